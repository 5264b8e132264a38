//! Dense convex QP solver used as the inner solver of the SQP.
//!
//! ```text
//! minimize    1/2 z' H z + g' z
//! subject to  lower <= z <= upper
//!             A z >= b
//! ```
//!
//! A primal active-set method. Bounds in the working set are handled by
//! fixing variables, so each subproblem reduces to the free variables with
//! the active general rows as equality constraints (solved through a Schur
//! complement on a Cholesky factor of the free Hessian block, or through an
//! LU factor of the full KKT matrix when that block is singular). A feasible
//! starting point comes from the projection of the origin onto the box, or
//! from an elastic phase-one problem when general rows are violated there.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

/// Stationarity/complementarity tolerance for `Optimal`.
pub const KKT_TOLERANCE: f64 = 1e-8;
/// Primal feasibility tolerance for `Optimal`.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-10;
/// Diagonal shift applied when the Hessian is (nearly) singular.
pub const REGULARIZATION: f64 = 1e-8;
const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Rows encode `a . z >= b`.
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
}

impl QpProblem {
    /// Unbounded, unconstrained problem with the given objective.
    pub fn unconstrained(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        Self {
            hessian,
            gradient,
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
            a_ineq: DMatrix::zeros(0, n),
            b_ineq: DVector::zeros(0),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.gradient.len()
    }

    pub fn num_rows(&self) -> usize {
        self.b_ineq.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.gradient.dot(z)
    }

    /// Largest violation of any bound or row at `z`.
    pub fn infeasibility(&self, z: &DVector<f64>) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..z.len() {
            worst = worst.max(self.lower[i] - z[i]).max(z[i] - self.upper[i]);
        }
        if self.num_rows() > 0 {
            let az = &self.a_ineq * z;
            for j in 0..self.num_rows() {
                worst = worst.max(self.b_ineq[j] - az[j]);
            }
        }
        worst
    }

    pub fn validate(&self) -> Result<(), String> {
        let n = self.num_vars();
        if self.hessian.shape() != (n, n)
            || self.lower.len() != n
            || self.upper.len() != n
            || self.a_ineq.ncols() != n
            || self.a_ineq.nrows() != self.b_ineq.len()
        {
            return Err(format!(
                "inconsistent QP dimensions: n = {n}, H {:?}, A {:?}, b {}",
                self.hessian.shape(),
                self.a_ineq.shape(),
                self.b_ineq.len()
            ));
        }
        if (&self.hessian - self.hessian.transpose()).abs().max() > 1e-12 * (1.0 + self.hessian.abs().max()) {
            return Err("Hessian is not symmetric".into());
        }
        if (0..n).any(|i| self.lower[i] > self.upper[i]) {
            return Err("lower bound exceeds upper bound".into());
        }
        Ok(())
    }

    /// Plain-text dump for offline triage.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut matrix = |name: &str, m: &DMatrix<f64>| {
            let _ = writeln!(out, "# {name} {} {}", m.nrows(), m.ncols());
            for r in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:.17e}", m[(r, c)])).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        };
        matrix("hessian", &self.hessian);
        matrix("gradient", &DMatrix::from_column_slice(1, self.num_vars(), self.gradient.as_slice()));
        matrix("lower", &DMatrix::from_column_slice(1, self.num_vars(), self.lower.as_slice()));
        matrix("upper", &DMatrix::from_column_slice(1, self.num_vars(), self.upper.as_slice()));
        matrix("a_ineq", &self.a_ineq);
        matrix("b_ineq", &DMatrix::from_column_slice(1, self.num_rows(), self.b_ineq.as_slice()));
        out
    }

    /// Parses the text produced by [`QpProblem::dump`].
    pub fn from_dump(text: &str) -> Option<Self> {
        let mut blocks: Vec<(String, DMatrix<f64>)> = Vec::new();
        let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
        while let Some(header) = lines.next() {
            let mut parts = header.strip_prefix('#')?.split_whitespace();
            let name = parts.next()?.to_string();
            let rows: usize = parts.next()?.parse().ok()?;
            let cols: usize = parts.next()?.parse().ok()?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..if cols == 0 { 0 } else { rows } {
                for v in lines.next()?.split_whitespace() {
                    data.push(v.parse::<f64>().ok()?);
                }
            }
            if data.len() != rows * cols {
                return None;
            }
            blocks.push((name, DMatrix::from_row_slice(rows, cols, &data)));
        }
        let take = |name: &str| blocks.iter().find(|(n, _)| n == name).map(|(_, m)| m.clone());
        let vector = |m: DMatrix<f64>| DVector::from_column_slice(m.as_slice());
        Some(Self {
            hessian: take("hessian")?,
            gradient: vector(take("gradient")?),
            lower: vector(take("lower")?),
            upper: vector(take("upper")?),
            a_ineq: take("a_ineq")?,
            b_ineq: vector(take("b_ineq")?),
        })
    }
}

/// A member of the working set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActiveConstraint {
    Lower(usize),
    Upper(usize),
    Row(usize),
}

impl ActiveConstraint {
    /// Global ordering used for tie-breaking: bounds by variable, then rows.
    fn index(&self, n: usize) -> usize {
        match *self {
            ActiveConstraint::Lower(i) | ActiveConstraint::Upper(i) => i,
            ActiveConstraint::Row(j) => n + j,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Degenerate,
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub primal: DVector<f64>,
    pub lower_duals: DVector<f64>,
    pub upper_duals: DVector<f64>,
    pub row_duals: DVector<f64>,
    pub active_set: Vec<ActiveConstraint>,
    /// Scaled KKT residual (see [`kkt_residual`]).
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Fixed {
    Lower,
    Upper,
}

struct WorkingSet {
    fixed: Vec<Option<Fixed>>,
    rows: Vec<usize>,
}

impl WorkingSet {
    fn empty(n: usize) -> Self {
        Self {
            fixed: vec![None; n],
            rows: Vec::new(),
        }
    }

    fn to_list(&self) -> Vec<ActiveConstraint> {
        let mut list: Vec<ActiveConstraint> = self
            .fixed
            .iter()
            .enumerate()
            .filter_map(|(i, f)| {
                f.map(|f| match f {
                    Fixed::Lower => ActiveConstraint::Lower(i),
                    Fixed::Upper => ActiveConstraint::Upper(i),
                })
            })
            .collect();
        list.extend(self.rows.iter().map(|&j| ActiveConstraint::Row(j)));
        list.sort();
        list
    }
}

/// Result of one equality-constrained subproblem.
struct Subproblem {
    step: DVector<f64>,
    /// Size of the part of the step driven by the gradient, without the row correction.
    descent: f64,
    row_multipliers: DVector<f64>,
}

enum SubproblemError {
    Singular,
}

/// Solves `min 1/2 p'Hp + q'p  s.t. p_fixed = 0, A_W p = c` over the free variables.
fn solve_subproblem(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    ws: &WorkingSet,
    c: &DVector<f64>,
    direct: bool,
) -> Result<Subproblem, SubproblemError> {
    let n = q.len();
    let free: Vec<usize> = (0..n).filter(|&i| ws.fixed[i].is_none()).collect();
    let nf = free.len();
    let mut step = DVector::zeros(n);
    let nr = ws.rows.len();
    if nf == 0 {
        if c.iter().any(|v| v.abs() > 1e-12) {
            return Err(SubproblemError::Singular);
        }
        return Ok(Subproblem {
            step,
            descent: 0.0,
            row_multipliers: DVector::zeros(nr),
        });
    }
    let h_ff = DMatrix::from_fn(nf, nf, |r, s| h[(free[r], free[s])]);
    let q_f = DVector::from_fn(nf, |r, _| q[free[r]]);
    if direct {
        return solve_kkt_direct(h_ff, &q_f, a, ws, c, &free, n);
    }
    let chol = h_ff.cholesky().ok_or(SubproblemError::Singular)?;
    let hinv_q = chol.solve(&q_f);
    let (p_q, p_c, lambda) = if nr == 0 {
        (-hinv_q, DVector::zeros(nf), DVector::zeros(0))
    } else {
        let a_rf_t = DMatrix::from_fn(nf, nr, |r, k| a[(ws.rows[k], free[r])]);
        let y = chol.solve(&a_rf_t);
        let s = a_rf_t.transpose() * &y;
        let s_chol = s.cholesky().ok_or(SubproblemError::Singular)?;
        let l_q = s_chol.solve(&(a_rf_t.transpose() * &hinv_q));
        let l_c = s_chol.solve(c);
        if l_q.iter().chain(l_c.iter()).any(|v| !v.is_finite()) {
            return Err(SubproblemError::Singular);
        }
        (&y * &l_q - hinv_q, &y * &l_c, l_q + l_c)
    };
    for (r, &i) in free.iter().enumerate() {
        step[i] = p_q[r] + p_c[r];
    }
    Ok(Subproblem {
        step,
        descent: p_q.amax(),
        row_multipliers: lambda,
    })
}

/// Same subproblem through an LU factorization of the full KKT matrix,
/// which stays accurate when the Hessian is only regularized PSD.
fn solve_kkt_direct(
    h_ff: DMatrix<f64>,
    q_f: &DVector<f64>,
    a: &DMatrix<f64>,
    ws: &WorkingSet,
    c: &DVector<f64>,
    free: &[usize],
    n: usize,
) -> Result<Subproblem, SubproblemError> {
    let nf = free.len();
    let nr = ws.rows.len();
    let mut kkt = DMatrix::zeros(nf + nr, nf + nr);
    kkt.view_mut((0, 0), (nf, nf)).copy_from(&h_ff);
    // first column drives the descent, second the row correction
    let mut rhs = DMatrix::zeros(nf + nr, 2);
    for r in 0..nf {
        rhs[(r, 0)] = -q_f[r];
    }
    for (k, &j) in ws.rows.iter().enumerate() {
        for (r, &i) in free.iter().enumerate() {
            kkt[(nf + k, r)] = a[(j, i)];
            kkt[(r, nf + k)] = -a[(j, i)];
        }
        rhs[(nf + k, 1)] = c[k];
    }
    let sol = kkt.lu().solve(&rhs).ok_or(SubproblemError::Singular)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(SubproblemError::Singular);
    }
    let mut step = DVector::zeros(n);
    for (r, &i) in free.iter().enumerate() {
        step[i] = sol[(r, 0)] + sol[(r, 1)];
    }
    Ok(Subproblem {
        step,
        descent: sol.view((0, 0), (nf, 1)).amax(),
        row_multipliers: DVector::from_fn(nr, |k, _| sol[(nf + k, 0)] + sol[(nf + k, 1)]),
    })
}

/// Bound multipliers for fixed variables given the row multipliers:
/// `mu = q - A_W' lambda` restricted to the fixed components, sign-adjusted
/// so that both lower and upper multipliers are non-negative at optimality.
fn bound_multipliers(q: &DVector<f64>, a: &DMatrix<f64>, ws: &WorkingSet, lambda: &DVector<f64>) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for (i, f) in ws.fixed.iter().enumerate() {
        if let Some(f) = f {
            let mut r = q[i];
            for (k, &j) in ws.rows.iter().enumerate() {
                r -= a[(j, i)] * lambda[k];
            }
            out.push((i, if *f == Fixed::Lower { r } else { -r }));
        }
    }
    out
}

/// Scaled KKT residual of a candidate primal-dual point.
///
/// Stationarity, dual feasibility and complementarity are divided by
/// `1 + max(|g|_inf, |H|_max |z|_inf)`; primal feasibility is absolute.
pub fn kkt_residual(
    qp: &QpProblem,
    z: &DVector<f64>,
    lower_duals: &DVector<f64>,
    upper_duals: &DVector<f64>,
    row_duals: &DVector<f64>,
) -> f64 {
    let hz = &qp.hessian * z;
    let mut stat = &hz + &qp.gradient - lower_duals + upper_duals;
    if qp.num_rows() > 0 {
        stat -= qp.a_ineq.transpose() * row_duals;
    }
    let scale = 1.0 + qp.gradient.amax().max(qp.hessian.amax() * z.amax());
    let mut dual = 0.0f64;
    let mut comp = 0.0f64;
    for i in 0..z.len() {
        dual = dual.max(-lower_duals[i]).max(-upper_duals[i]);
        if lower_duals[i] != 0.0 {
            comp = comp.max((lower_duals[i] * (z[i] - qp.lower[i])).abs());
        }
        if upper_duals[i] != 0.0 {
            comp = comp.max((upper_duals[i] * (qp.upper[i] - z[i])).abs());
        }
    }
    if qp.num_rows() > 0 {
        let az = &qp.a_ineq * z;
        for j in 0..qp.num_rows() {
            dual = dual.max(-row_duals[j]);
            if row_duals[j] != 0.0 {
                comp = comp.max((row_duals[j] * (az[j] - qp.b_ineq[j])).abs());
            }
        }
    }
    let primal = qp.infeasibility(z).max(0.0);
    (stat.amax() / scale).max(primal).max(dual / scale).max(comp / scale)
}

/// Active-set QP solver. Keeps the last optimal working set so that repeated
/// solves of similar problems can warm start.
#[derive(Clone, Debug, Default)]
pub struct QpSolver {
    last_active_set: Option<Vec<ActiveConstraint>>,
}

impl QpSolver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_active_set(&self) -> Option<&[ActiveConstraint]> {
        self.last_active_set.as_deref()
    }

    pub fn solve(&mut self, qp: &QpProblem, warm_active_set: Option<&[ActiveConstraint]>) -> QpSolution {
        let sol = solve(qp, warm_active_set);
        if sol.status == QpStatus::Optimal {
            self.last_active_set = Some(sol.active_set.clone());
        }
        sol
    }
}

/// The Hessian used by the iterations, and whether it had to be shifted.
fn regularized_hessian(h: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let needs_shift = match h.clone().cholesky() {
        Some(chol) => {
            let l = chol.l_dirty();
            let pivot = (0..h.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
            pivot < EIGEN_FLOOR || smallest_eigenvalue(&chol) < EIGEN_FLOOR
        }
        None => true,
    };
    if needs_shift {
        (h + DMatrix::identity(h.nrows(), h.ncols()) * REGULARIZATION, true)
    } else {
        (h.clone(), false)
    }
}

/// Smallest eigenvalue by inverse iteration on a Cholesky factor.
fn smallest_eigenvalue(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let n = chol.l_dirty().nrows();
    if n == 0 {
        return f64::INFINITY;
    }
    let mut v = DVector::from_fn(n, |i, _| 1.0 + i as f64 / n as f64);
    v /= v.norm();
    let mut estimate = f64::INFINITY;
    for _ in 0..50 {
        let w = chol.solve(&v);
        let norm = w.norm();
        if !norm.is_finite() || norm == 0.0 {
            return 0.0;
        }
        let next = 1.0 / norm;
        v = w / norm;
        if (estimate - next).abs() <= 1e-3 * next {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Solves `qp`, optionally starting from a previous working set.
pub fn solve(qp: &QpProblem, warm_active_set: Option<&[ActiveConstraint]>) -> QpSolution {
    let n = qp.num_vars();
    let m = qp.num_rows();
    if let Err(msg) = qp.validate() {
        log::error!("rejecting QP: {msg}");
        return failed(n, m, QpStatus::Degenerate);
    }
    let (h, direct) = regularized_hessian(&qp.hessian);
    let max_iter = 10 * (n + m).max(1);

    if let Some(warm) = warm_active_set {
        if let Some((z, ws)) = warm_start_point(qp, &h, warm, direct) {
            let sol = active_set_loop(qp, &h, z, ws, max_iter, true, direct);
            if sol.status == QpStatus::Optimal {
                return sol;
            }
        }
    }

    let z0 = DVector::from_fn(n, |i, _| 0.0f64.clamp(qp.lower[i], qp.upper[i]));
    let mut ws = WorkingSet::empty(n);
    mark_bounds_at(qp, &z0, &mut ws);
    if qp.infeasibility(&z0) <= FEASIBILITY_TOLERANCE {
        return active_set_loop(qp, &h, z0, ws, max_iter, false, direct);
    }
    match phase_one(qp, &z0) {
        Some(z) => {
            let mut ws = WorkingSet::empty(n);
            mark_bounds_at(qp, &z, &mut ws);
            active_set_loop(qp, &h, z, ws, max_iter, false, direct)
        }
        None => failed(n, m, QpStatus::Infeasible),
    }
}

fn failed(n: usize, m: usize, status: QpStatus) -> QpSolution {
    QpSolution {
        primal: DVector::zeros(n),
        lower_duals: DVector::zeros(n),
        upper_duals: DVector::zeros(n),
        row_duals: DVector::zeros(m),
        active_set: Vec::new(),
        kkt_residual: f64::INFINITY,
        iterations: 0,
        status,
    }
}

/// Fixes every variable that sits exactly on a bound.
fn mark_bounds_at(qp: &QpProblem, z: &DVector<f64>, ws: &mut WorkingSet) {
    for i in 0..z.len() {
        if z[i] == qp.lower[i] {
            ws.fixed[i] = Some(Fixed::Lower);
        } else if z[i] == qp.upper[i] {
            ws.fixed[i] = Some(Fixed::Upper);
        }
    }
}

/// The minimizer over the warm working set, if it is feasible.
fn warm_start_point(
    qp: &QpProblem,
    h: &DMatrix<f64>,
    warm: &[ActiveConstraint],
    direct: bool,
) -> Option<(DVector<f64>, WorkingSet)> {
    let n = qp.num_vars();
    let mut ws = WorkingSet::empty(n);
    let mut z = DVector::zeros(n);
    for c in warm {
        match *c {
            ActiveConstraint::Lower(i) if i < n && qp.lower[i].is_finite() && ws.fixed[i].is_none() => {
                ws.fixed[i] = Some(Fixed::Lower);
                z[i] = qp.lower[i];
            }
            ActiveConstraint::Upper(i) if i < n && qp.upper[i].is_finite() && ws.fixed[i].is_none() => {
                ws.fixed[i] = Some(Fixed::Upper);
                z[i] = qp.upper[i];
            }
            ActiveConstraint::Row(j) if j < qp.num_rows() && !ws.rows.contains(&j) => ws.rows.push(j),
            _ => {}
        }
    }
    ws.rows.sort_unstable();
    let q = h * &z + &qp.gradient;
    let c = DVector::from_fn(ws.rows.len(), |k, _| {
        let j = ws.rows[k];
        qp.b_ineq[j] - qp.a_ineq.row(j).dot(&z.transpose())
    });
    let sub = solve_subproblem(h, &q, &qp.a_ineq, &ws, &c, direct).ok()?;
    z += sub.step;
    if qp.infeasibility(&z) <= FEASIBILITY_TOLERANCE {
        Some((z, ws))
    } else {
        None
    }
}

/// Finds a feasible point by minimizing
/// `1/2 |z - z0|^2 + 1/2 |t|^2 + M sum(t)` subject to `A z + t >= b`, `t >= 0`.
fn phase_one(qp: &QpProblem, z0: &DVector<f64>) -> Option<DVector<f64>> {
    let n = qp.num_vars();
    let m = qp.num_rows();
    let az0 = &qp.a_ineq * z0;
    let mut penalty = 1e4;
    for _ in 0..4 {
        let dim = n + m;
        let hessian = DMatrix::identity(dim, dim);
        let mut gradient = DVector::zeros(dim);
        for i in 0..n {
            gradient[i] = -z0[i];
        }
        for j in 0..m {
            gradient[n + j] = penalty;
        }
        let mut lower = DVector::zeros(dim);
        let mut upper = DVector::from_element(dim, f64::INFINITY);
        lower.rows_mut(0, n).copy_from(&qp.lower);
        upper.rows_mut(0, n).copy_from(&qp.upper);
        let mut a_ineq = DMatrix::zeros(m, dim);
        a_ineq.view_mut((0, 0), (m, n)).copy_from(&qp.a_ineq);
        for j in 0..m {
            a_ineq[(j, n + j)] = 1.0;
        }
        let elastic = QpProblem {
            hessian: hessian.clone(),
            gradient,
            lower,
            upper,
            a_ineq,
            b_ineq: qp.b_ineq.clone(),
        };
        let mut start = DVector::zeros(dim);
        start.rows_mut(0, n).copy_from(z0);
        for j in 0..m {
            start[n + j] = (qp.b_ineq[j] - az0[j]).max(0.0);
        }
        let mut ws = WorkingSet::empty(dim);
        mark_bounds_at(&elastic, &start, &mut ws);
        let sol = active_set_loop(&elastic, &hessian, start, ws, 10 * (dim + m), false, false);
        let z = sol.primal.rows(0, n).into_owned();
        if matches!(sol.status, QpStatus::Optimal | QpStatus::MaxIterations)
            && qp.infeasibility(&z) <= FEASIBILITY_TOLERANCE
        {
            return Some(z);
        }
        penalty *= 100.0;
    }
    None
}

fn active_set_loop(
    qp: &QpProblem,
    h: &DMatrix<f64>,
    mut z: DVector<f64>,
    mut ws: WorkingSet,
    max_iter: usize,
    starts_at_minimizer: bool,
    direct: bool,
) -> QpSolution {
    let n = qp.num_vars();
    let m = qp.num_rows();
    let mut iterations = 0;
    // set after a full, unblocked step: z minimizes over the working set
    let mut at_minimizer = starts_at_minimizer;
    let h_scale = (0..n).map(|i| h[(i, i)]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    loop {
        if iterations >= max_iter {
            return finish(qp, z, &ws, None, iterations, QpStatus::MaxIterations);
        }
        iterations += 1;
        let q = h * &z + &qp.gradient;
        // working-row residual pulls accumulated drift back onto the active rows
        let drift = DVector::from_fn(ws.rows.len(), |k, _| {
            let j = ws.rows[k];
            qp.b_ineq[j] - qp.a_ineq.row(j).dot(&z.transpose())
        });
        let sub = match solve_subproblem(h, &q, &qp.a_ineq, &ws, &drift, direct) {
            Ok(sub) => sub,
            Err(SubproblemError::Singular) => {
                return finish(qp, z, &ws, None, iterations, QpStatus::Degenerate);
            }
        };
        let step_norm = sub.step.amax();
        let free = ws.fixed.iter().filter(|f| f.is_none()).count();
        // round-off in the descent scales with the natural step |q| / |H|
        let step_scale = 1.0 + z.amax() + q.amax() / h_scale;
        if at_minimizer || ws.rows.len() >= free || sub.descent <= 1e-13 * step_scale {
            at_minimizer = false;
            // what is left of the step is round-off and drift; keep it when it does not hurt feasibility
            let polished = &z + &sub.step;
            if qp.infeasibility(&polished) <= qp.infeasibility(&z) {
                z = polished;
            }
            // stationary on the working set: check multiplier signs
            let scale = 1.0 + q.amax();
            let tol = 1e-12 * scale;
            let mut worst: Option<(ActiveConstraint, f64)> = None;
            let mut consider = |c: ActiveConstraint, value: f64| {
                if value < -tol {
                    let better = match worst {
                        None => true,
                        Some((wc, wv)) => value < wv || (value == wv && c.index(n) < wc.index(n)),
                    };
                    if better {
                        worst = Some((c, value));
                    }
                }
            };
            for (k, &j) in ws.rows.iter().enumerate() {
                consider(ActiveConstraint::Row(j), sub.row_multipliers[k]);
            }
            for (i, mu) in bound_multipliers(&q, &qp.a_ineq, &ws, &sub.row_multipliers) {
                let c = match ws.fixed[i] {
                    Some(Fixed::Lower) => ActiveConstraint::Lower(i),
                    _ => ActiveConstraint::Upper(i),
                };
                // a variable with equal bounds can never leave
                if qp.lower[i] == qp.upper[i] {
                    continue;
                }
                consider(c, mu);
            }
            match worst {
                None => {
                    return finish(qp, z, &ws, Some(&sub.row_multipliers), iterations, QpStatus::Optimal);
                }
                Some((ActiveConstraint::Row(j), _)) => ws.rows.retain(|&r| r != j),
                Some((ActiveConstraint::Lower(i), _)) | Some((ActiveConstraint::Upper(i), _)) => {
                    ws.fixed[i] = None;
                }
            }
            continue;
        }

        // ratio test, lowest global index wins ties
        let p = &sub.step;
        let mut alpha = 1.0;
        let mut blocking: Option<ActiveConstraint> = None;
        let take = |c: ActiveConstraint, ratio: f64, alpha: &mut f64, blocking: &mut Option<ActiveConstraint>| {
            let ratio = ratio.max(0.0);
            let wins = ratio < *alpha || (ratio == *alpha && blocking.is_none_or(|b| c.index(n) < b.index(n)));
            if wins {
                *alpha = ratio;
                *blocking = Some(c);
            }
        };
        for i in 0..n {
            if ws.fixed[i].is_some() {
                continue;
            }
            if p[i] < -1e-10 * step_norm && qp.lower[i].is_finite() {
                take(ActiveConstraint::Lower(i), (qp.lower[i] - z[i]) / p[i], &mut alpha, &mut blocking);
            } else if p[i] > 1e-10 * step_norm && qp.upper[i].is_finite() {
                take(ActiveConstraint::Upper(i), (qp.upper[i] - z[i]) / p[i], &mut alpha, &mut blocking);
            }
        }
        if m > 0 {
            let ap = &qp.a_ineq * p;
            let az = &qp.a_ineq * &z;
            for j in 0..m {
                if ws.rows.contains(&j) {
                    continue;
                }
                if ap[j] < -1e-10 * qp.a_ineq.row(j).amax() * step_norm {
                    take(ActiveConstraint::Row(j), (qp.b_ineq[j] - az[j]) / ap[j], &mut alpha, &mut blocking);
                }
            }
        }
        z.axpy(alpha, p, 1.0);
        match blocking {
            Some(ActiveConstraint::Lower(i)) => {
                z[i] = qp.lower[i];
                ws.fixed[i] = Some(Fixed::Lower);
            }
            Some(ActiveConstraint::Upper(i)) => {
                z[i] = qp.upper[i];
                ws.fixed[i] = Some(Fixed::Upper);
            }
            Some(ActiveConstraint::Row(j)) => {
                ws.rows.push(j);
                ws.rows.sort_unstable();
            }
            None => at_minimizer = true,
        }
    }
}

fn finish(
    qp: &QpProblem,
    z: DVector<f64>,
    ws: &WorkingSet,
    row_multipliers: Option<&DVector<f64>>,
    iterations: usize,
    status: QpStatus,
) -> QpSolution {
    let n = qp.num_vars();
    let m = qp.num_rows();
    let zeros = || (DVector::zeros(n), DVector::zeros(n), DVector::zeros(m));
    let (lower_duals, upper_duals, row_duals, kkt) = match row_multipliers {
        Some(lambda) => {
            // against the original Hessian; the loop may have run on a shifted one
            let q = &qp.hessian * &z + &qp.gradient;
            let mut best = duals_from(qp, &z, ws, &q, lambda);
            if let Some(refit) = refit_row_multipliers(&q, &qp.a_ineq, ws) {
                let other = duals_from(qp, &z, ws, &q, &refit);
                if other.3 < best.3 {
                    best = other;
                }
            }
            best
        }
        None => {
            let (l, u, r) = zeros();
            let kkt = kkt_residual(qp, &z, &l, &u, &r);
            (l, u, r, kkt)
        }
    };
    let status = if status == QpStatus::Optimal
        && (kkt > KKT_TOLERANCE || qp.infeasibility(&z) > FEASIBILITY_TOLERANCE)
    {
        log::debug!("active-set loop ended with KKT residual {kkt:e}");
        QpStatus::Degenerate
    } else {
        status
    };
    QpSolution {
        primal: z,
        lower_duals,
        upper_duals,
        row_duals,
        active_set: ws.to_list(),
        kkt_residual: kkt,
        iterations,
        status,
    }
}

/// Least-squares row multipliers from stationarity over the free variables.
fn refit_row_multipliers(q: &DVector<f64>, a: &DMatrix<f64>, ws: &WorkingSet) -> Option<DVector<f64>> {
    let free: Vec<usize> = (0..q.len()).filter(|&i| ws.fixed[i].is_none()).collect();
    if ws.rows.is_empty() || free.is_empty() {
        return None;
    }
    let a_t = DMatrix::from_fn(free.len(), ws.rows.len(), |r, k| a[(ws.rows[k], free[r])]);
    let q_f = DVector::from_fn(free.len(), |r, _| q[free[r]]);
    a_t.svd(true, true).solve(&q_f, 1e-12).ok()
}

fn duals_from(
    qp: &QpProblem,
    z: &DVector<f64>,
    ws: &WorkingSet,
    q: &DVector<f64>,
    lambda: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, DVector<f64>, f64) {
    let n = qp.num_vars();
    let mut lower_duals = DVector::zeros(n);
    let mut upper_duals = DVector::zeros(n);
    let mut row_duals = DVector::zeros(qp.num_rows());
    for (k, &j) in ws.rows.iter().enumerate() {
        row_duals[j] = lambda[k];
    }
    for (i, mu) in bound_multipliers(q, &qp.a_ineq, ws, lambda) {
        match ws.fixed[i] {
            Some(Fixed::Lower) => lower_duals[i] = mu,
            _ => upper_duals[i] = mu,
        }
    }
    for i in 0..n {
        if qp.lower[i] == qp.upper[i] && ws.fixed[i].is_some() {
            // equal bounds: split a signed multiplier across both sides
            let mu = lower_duals[i] - upper_duals[i];
            lower_duals[i] = mu.max(0.0);
            upper_duals[i] = (-mu).max(0.0);
        }
    }
    let kkt = kkt_residual(qp, z, &lower_duals, &upper_duals, &row_duals);
    (lower_duals, upper_duals, row_duals, kkt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn unconstrained_minimum() {
        let qp = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::from_vec(vec![-1.0, -2.0]));
        let sol = solve(&qp, None);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.primal, DVector::from_vec(vec![1.0, 2.0]), epsilon = 1e-12);
    }

    #[test]
    fn active_lower_bound() {
        let mut qp = QpProblem::unconstrained(DMatrix::identity(3, 3), DVector::zeros(3));
        qp.lower[0] = 1.0;
        let sol = solve(&qp, None);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.primal, DVector::from_vec(vec![1.0, 0.0, 0.0]), epsilon = 1e-12);
        assert_abs_diff_eq!(sol.lower_duals[0], 1.0, epsilon = 1e-12);
        assert_eq!(sol.active_set, vec![ActiveConstraint::Lower(0)]);
    }

    #[test]
    fn general_row_from_infeasible_origin() {
        // min 1/2 |z|^2 + z_0  s.t. z_0 + 2 z_1 >= 1
        let mut qp = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 0.0]));
        qp.a_ineq = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        qp.b_ineq = DVector::from_vec(vec![1.0]);
        let sol = solve(&qp, None);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.primal, DVector::from_vec(vec![-0.6, 0.8]), epsilon = 1e-12);
        assert!(sol.kkt_residual <= KKT_TOLERANCE);
    }

    #[test]
    fn infeasible_rows_are_reported() {
        let mut qp = QpProblem::unconstrained(DMatrix::identity(1, 1), DVector::zeros(1));
        qp.upper[0] = 1.0;
        qp.a_ineq = DMatrix::from_row_slice(1, 1, &[1.0]);
        qp.b_ineq = DVector::from_vec(vec![2.0]);
        assert_eq!(solve(&qp, None).status, QpStatus::Infeasible);
    }

    #[test]
    fn warm_start_finishes_in_one_iteration() {
        let mut qp = QpProblem::unconstrained(
            DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.1, 0.0, 0.1, 3.0]),
            DVector::from_vec(vec![-4.0, 1.0, 2.0]),
        );
        qp.upper[0] = 1.0;
        qp.a_ineq = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 1.0]);
        qp.b_ineq = DVector::from_vec(vec![0.5]);
        let cold = solve(&qp, None);
        assert_eq!(cold.status, QpStatus::Optimal);
        let warm = solve(&qp, Some(&cold.active_set));
        assert_eq!(warm.status, QpStatus::Optimal);
        assert!(warm.iterations <= 1, "{} iterations", warm.iterations);
        assert_abs_diff_eq!(warm.primal, cold.primal, epsilon = 1e-12);
    }

    #[test]
    fn singular_hessian_is_regularized() {
        let mut qp = QpProblem::unconstrained(DMatrix::zeros(2, 2), DVector::from_vec(vec![1.0, -1.0]));
        qp.lower = DVector::from_vec(vec![-1.0, -1.0]);
        qp.upper = DVector::from_vec(vec![1.0, 1.0]);
        let sol = solve(&qp, None);
        assert_abs_diff_eq!(sol.primal, DVector::from_vec(vec![-1.0, 1.0]), epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let mut qp = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::zeros(2));
        qp.b_ineq = DVector::zeros(1);
        assert!(qp.validate().is_err());
        assert_eq!(solve(&qp, None).status, QpStatus::Degenerate);
    }

    #[test]
    fn dump_lists_every_block() {
        let qp = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::zeros(2));
        let text = qp.dump();
        for header in ["# hessian 2 2", "# gradient 1 2", "# lower 1 2", "# upper 1 2", "# a_ineq 0 2", "# b_ineq 1 0"] {
            assert!(text.contains(header), "missing {header}");
        }
    }

    #[test]
    fn dump_round_trips() {
        let mut qp = QpProblem::unconstrained(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]), DVector::from_vec(vec![-1.0, 0.1 / 3.0]));
        assert_eq!(QpProblem::from_dump(&qp.dump()), Some(qp.clone()));
        qp.lower = DVector::from_vec(vec![-1.0, f64::NEG_INFINITY]);
        qp.a_ineq = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        qp.b_ineq = DVector::from_vec(vec![0.25]);
        assert_eq!(QpProblem::from_dump(&qp.dump()), Some(qp));
        assert_eq!(QpProblem::from_dump("# hessian 2 2\n1 0\n"), None);
    }
}
