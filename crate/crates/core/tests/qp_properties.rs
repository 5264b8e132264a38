mod common;

use common::{enumerate_qp, is_positive_definite, random_qp};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visnav_mpc::qp::{solve, ActiveConstraint, QpProblem, QpStatus, FEASIBILITY_TOLERANCE, KKT_TOLERANCE};

fn permuted(qp: &QpProblem, perm: &[usize]) -> QpProblem {
    let n = perm.len();
    QpProblem {
        hessian: DMatrix::from_fn(n, n, |r, c| qp.hessian[(perm[r], perm[c])]),
        gradient: DVector::from_fn(n, |r, _| qp.gradient[perm[r]]),
        lower: DVector::from_fn(n, |r, _| qp.lower[perm[r]]),
        upper: DVector::from_fn(n, |r, _| qp.upper[perm[r]]),
        a_ineq: DMatrix::from_fn(qp.num_rows(), n, |j, c| qp.a_ineq[(j, perm[c])]),
        b_ineq: qp.b_ineq.clone(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_the_enumeration_oracle(seed in any::<u64>()) {
        let qp = random_qp(seed);
        let sol = solve(&qp, None);
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        prop_assert!(sol.kkt_residual <= KKT_TOLERANCE);
        let oracle = enumerate_qp(&qp).expect("feasible by construction");
        let (f, f_star) = (qp.objective(&sol.primal), qp.objective(&oracle));
        prop_assert!((f - f_star).abs() <= 1e-7 * (1.0 + f_star.abs()), "{} vs {}", f, f_star);
        if is_positive_definite(&qp.hessian, 1e-3) {
            prop_assert!((&sol.primal - &oracle).amax() <= 1e-7);
        }
    }

    #[test]
    fn optimal_points_are_feasible_and_stationary(seed in any::<u64>()) {
        let qp = random_qp(seed);
        let sol = solve(&qp, None);
        prop_assert!(qp.infeasibility(&sol.primal) <= FEASIBILITY_TOLERANCE);
        prop_assert!(sol.kkt_residual <= KKT_TOLERANCE);
        prop_assert!(sol.lower_duals.iter().chain(sol.upper_duals.iter()).chain(sol.row_duals.iter()).all(|&d| d >= -KKT_TOLERANCE));
    }

    #[test]
    fn no_random_feasible_point_does_better(seed in any::<u64>()) {
        let qp = random_qp(seed);
        let f = qp.objective(&solve(&qp, None).primal);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut found = 0;
        for _ in 0..200_000 {
            if found == 1000 {
                break;
            }
            let z = DVector::from_fn(qp.num_vars(), |i, _| rng.random_range(qp.lower[i]..=qp.upper[i]));
            if qp.infeasibility(&z) > 0.0 {
                continue;
            }
            found += 1;
            prop_assert!(f <= qp.objective(&z) + 1e-9 * (1.0 + f.abs()));
        }
    }

    #[test]
    fn relabeling_variables_permutes_the_solution(seed in any::<u64>()) {
        let qp = random_qp(seed);
        let n = qp.num_vars();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(17));
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let a = solve(&qp, None);
        let b = solve(&permuted(&qp, &perm), None);
        if is_positive_definite(&qp.hessian, 1e-3) {
            for (r, &p) in perm.iter().enumerate() {
                prop_assert!((b.primal[r] - a.primal[p]).abs() <= 1e-8);
            }
        } else {
            let (fa, fb) = (qp.objective(&a.primal), permuted(&qp, &perm).objective(&b.primal));
            prop_assert!((fa - fb).abs() <= 1e-7 * (1.0 + fa.abs()));
        }
    }

    #[test]
    fn optimal_working_set_restarts_in_one_iteration(seed in any::<u64>()) {
        let qp = random_qp(seed);
        let cold = solve(&qp, None);
        let warm = solve(&qp, Some(&cold.active_set));
        prop_assert_eq!(warm.status, QpStatus::Optimal);
        prop_assert!(warm.iterations <= 1, "{} iterations", warm.iterations);
    }

    #[test]
    fn solving_is_deterministic(seed in any::<u64>()) {
        let qp = random_qp(seed);
        let (a, b) = (solve(&qp, None), solve(&qp, None));
        prop_assert_eq!(a.primal, b.primal);
        prop_assert_eq!(a.active_set, b.active_set);
    }
}

#[test]
fn lower_bound_example() {
    let mut qp = QpProblem::unconstrained(DMatrix::identity(3, 3), DVector::zeros(3));
    qp.lower[0] = 1.0;
    let sol = solve(&qp, None);
    assert_eq!(sol.primal, DVector::from_vec(vec![1.0, 0.0, 0.0]));
    assert!((sol.lower_duals[0] - 1.0).abs() <= 1e-12);
    assert_eq!(sol.active_set, vec![ActiveConstraint::Lower(0)]);
}
