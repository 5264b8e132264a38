#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visnav_mpc::dynamics::{ControlInput, LinearizedModel, ModelParams, UavState, INPUT_DIM, STATE_DIM};
use visnav_mpc::ocp::{OcpConfig, References};
use visnav_mpc::perception::TargetPoint;
use visnav_mpc::qp::QpProblem;

pub fn refs_at(goal: Vector3<f64>, target: Vector3<f64>) -> References {
    References {
        x_ref: UavState::at_rest(goal, 0.0),
        u_ref: ControlInput::hover(&ModelParams::default()),
        target: TargetPoint::new(target),
    }
}

/// Random convex QP with `n <= 6` variables and `m <= 4` rows, feasible by
/// construction. The Hessian has random rank, so it may be singular; finite
/// boxes keep the problem bounded.
pub fn random_qp(seed: u64) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=6);
    let m = rng.random_range(0..=4);
    let rank = rng.random_range(0..=n);
    let f = DMatrix::from_fn(rank, n, |_, _| rng.random_range(-2.0..2.0));
    let hessian = if rng.random_bool(0.5) {
        f.transpose() * &f
    } else {
        f.transpose() * &f + DMatrix::identity(n, n) * rng.random_range(0.05..1.0)
    };
    let gradient = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let lower = DVector::from_fn(n, |_, _| rng.random_range(-2.0..-0.1));
    let upper = DVector::from_fn(n, |_, _| rng.random_range(0.1..2.0));
    let inside = DVector::from_fn(n, |i, _| rng.random_range(lower[i]..upper[i]));
    let a_ineq = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let az = &a_ineq * &inside;
    let b_ineq = DVector::from_fn(m, |j, _| {
        if rng.random_bool(0.3) {
            az[j]
        } else {
            az[j] - rng.random_range(0.0..1.0)
        }
    });
    QpProblem {
        hessian,
        gradient,
        lower,
        upper,
        a_ineq,
        b_ineq,
    }
}

pub fn is_positive_definite(h: &DMatrix<f64>, floor: f64) -> bool {
    h.clone().symmetric_eigen().eigenvalues.min() >= floor
}

/// Brute-force oracle: tries every combination of active bounds and rows,
/// solves the equality-constrained KKT system and returns the first point
/// that satisfies all optimality conditions. For a convex problem that point
/// is a global minimizer.
pub fn enumerate_qp(qp: &QpProblem) -> Option<DVector<f64>> {
    let n = qp.num_vars();
    let m = qp.num_rows();
    let tol = 1e-9;
    let total_bounds = 3usize.pow(n as u32);
    for row_mask in 0..(1usize << m) {
        for bound_code in 0..total_bounds {
            // 0 free, 1 at lower, 2 at upper
            let mut code = bound_code;
            let mut state = vec![0u8; n];
            for s in state.iter_mut() {
                *s = (code % 3) as u8;
                code /= 3;
            }
            let rows: Vec<usize> = (0..m).filter(|j| row_mask & (1 << j) != 0).collect();
            let fixed: Vec<usize> = (0..n).filter(|&i| state[i] != 0).collect();
            let k = rows.len() + fixed.len();
            let dim = n + k;
            let mut kkt = DMatrix::zeros(dim, dim);
            let mut rhs = DVector::zeros(dim);
            kkt.view_mut((0, 0), (n, n)).copy_from(&qp.hessian);
            rhs.rows_mut(0, n).copy_from(&(-&qp.gradient));
            for (c, &j) in rows.iter().enumerate() {
                for i in 0..n {
                    kkt[(n + c, i)] = qp.a_ineq[(j, i)];
                    kkt[(i, n + c)] = -qp.a_ineq[(j, i)];
                }
                rhs[n + c] = qp.b_ineq[j];
            }
            for (c, &i) in fixed.iter().enumerate() {
                let r = n + rows.len() + c;
                let sign = if state[i] == 1 { 1.0 } else { -1.0 };
                kkt[(r, i)] = 1.0;
                kkt[(i, r)] = -sign;
                rhs[r] = if state[i] == 1 { qp.lower[i] } else { qp.upper[i] };
            }
            let residual_ok = |sol: &DVector<f64>| (&kkt * sol - &rhs).amax() <= tol * (1.0 + rhs.amax());
            let sol = match kkt.clone().lu().solve(&rhs) {
                Some(sol) if residual_ok(&sol) => sol,
                _ => {
                    let svd = kkt.clone().svd(true, true);
                    let cutoff = 1e-10 * svd.singular_values.max();
                    match svd.solve(&rhs, cutoff) {
                        Ok(sol) if residual_ok(&sol) => sol,
                        _ => continue,
                    }
                }
            };
            let z = sol.rows(0, n).into_owned();
            let multipliers = sol.rows(n, k);
            if multipliers.iter().any(|&l| l < -tol) {
                continue;
            }
            if qp.infeasibility(&z) > tol {
                continue;
            }
            return Some(z);
        }
    }
    None
}

/// Dense batch least squares for the unconstrained linear-quadratic problem.
pub fn lq_oracle(model: &LinearizedModel, x0: &UavState, refs: &References, config: &OcpConfig) -> DVector<f64> {
    let n = config.num_intervals();
    let nu = n * INPUT_DIM;
    let (a, b) = (
        DMatrix::from_column_slice(STATE_DIM, STATE_DIM, model.a.as_slice()),
        DMatrix::from_column_slice(STATE_DIM, INPUT_DIM, model.b.as_slice()),
    );
    let sqrt_of = |m: &[f64], d: usize| {
        let eig = DMatrix::from_column_slice(d, d, m).symmetric_eigen();
        &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()))
            * eig.eigenvectors.transpose()
    };
    let lq = sqrt_of(config.q.as_slice(), STATE_DIM);
    let lqn = sqrt_of(config.q_terminal.as_slice(), STATE_DIM);
    let lr = sqrt_of(config.r.as_slice(), INPUT_DIM);

    // x_k = c_k + F_k U with the affine offset of the model folded into c_k
    let drift = model.next_bar - model.a * model.x_bar - model.b * model.u_bar;
    let drift = DVector::from_column_slice(drift.as_slice());
    let mut c = DVector::from_column_slice(x0.to_vector().as_slice());
    let mut f = DMatrix::<f64>::zeros(STATE_DIM, nu);
    let rows = (n + 1) * STATE_DIM + n * INPUT_DIM;
    let mut big = DMatrix::<f64>::zeros(rows, nu);
    let mut rhs = DVector::<f64>::zeros(rows);
    let xr = DVector::from_column_slice(refs.x_ref.to_vector().as_slice());
    let ur = DVector::from_column_slice(refs.u_ref.to_vector().as_slice());
    for k in 0..=n {
        let l = if k == n { &lqn } else { &lq };
        let r0 = k * STATE_DIM;
        big.view_mut((r0, 0), (STATE_DIM, nu)).copy_from(&(l * &f));
        rhs.rows_mut(r0, STATE_DIM).copy_from(&(l * (&xr - &c)));
        if k < n {
            let ri = (n + 1) * STATE_DIM + k * INPUT_DIM;
            big.view_mut((ri, k * INPUT_DIM), (INPUT_DIM, INPUT_DIM)).copy_from(&lr);
            rhs.rows_mut(ri, INPUT_DIM).copy_from(&(&lr * &ur));
            let mut fnext = &a * &f;
            let mut block = fnext.view_mut((0, k * INPUT_DIM), (STATE_DIM, INPUT_DIM));
            block += &b;
            f = fnext;
            c = &a * &c + &drift;
        }
    }
    big.svd(true, true).solve(&rhs, 1e-12).unwrap()
}

/// Inputs of a solution stacked node by node.
pub fn stacked(inputs: &[ControlInput]) -> DVector<f64> {
    DVector::from_iterator(
        inputs.len() * INPUT_DIM,
        inputs.iter().flat_map(|u| u.to_vector().iter().copied().collect::<Vec<_>>()),
    )
}
