//! Dual subproblem solver: finds the minimum-norm element of the convex hull
//! of gradient columns, measured in a variable metric W. Runs as an
//! active-set iteration over hull faces, with a per-iteration callback so
//! callers can stop early, plus a subset-enumeration reference solver used to
//! cross-check small instances.

use nalgebra::{DMatrix, DVector};

use crate::core::{GradientMatrix, SolverError};

/// Relative slack on the face-optimality test that ends the active-set
/// iteration when no caller stops it earlier.
const OPT_TOL: f64 = 1e-13;

/// Weights at or below this are treated as leaving the active face.
const DROP_TOL: f64 = 1e-14;

/// A symmetric positive definite matrix pair (H, W = H^{-1}) exposed through
/// the products the solver needs; implementations may be dense matrices or
/// compact quasi-Newton forms.
pub trait MetricOps {
    /// W v.
    fn apply_w(&self, v: &DVector<f64>) -> DVector<f64>;
    /// H v.
    fn apply_h(&self, v: &DVector<f64>) -> DVector<f64>;
    /// v^T W v.
    fn wnorm_sq(&self, v: &DVector<f64>) -> f64 {
        self.apply_w(v).dot(v)
    }
    /// v^T H v.
    fn hnorm_sq(&self, v: &DVector<f64>) -> f64 {
        self.apply_h(v).dot(v)
    }
}

/// H = W = I.
pub struct IdentityMetric;

impl MetricOps for IdentityMetric {
    fn apply_w(&self, v: &DVector<f64>) -> DVector<f64> {
        v.clone()
    }

    fn apply_h(&self, v: &DVector<f64>) -> DVector<f64> {
        v.clone()
    }
}

/// Explicit dense pair, mostly for tests and reference computations.
pub struct DenseMetric {
    pub h: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

impl DenseMetric {
    /// Builds the pair from W, inverting it for H.
    pub fn from_w(w: DMatrix<f64>) -> Self {
        let h = w
            .clone()
            .try_inverse()
            .expect("metric W must be invertible");
        DenseMetric { h, w }
    }
}

impl MetricOps for DenseMetric {
    fn apply_w(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.w * v
    }

    fn apply_h(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.h * v
    }
}

/// A feasible dual point: simplex weights over the gradient columns together
/// with the combinations the solver keeps re-using.
#[derive(Clone, Debug)]
pub struct DualIterate {
    /// Simplex weights, one per column.
    pub y: Vec<f64>,
    /// G y.
    pub gy: DVector<f64>,
    /// W G y; negated, this is the primal direction.
    pub wgy: DVector<f64>,
    /// Dual objective -0.5 |Gy|_W^2 (always <= 0).
    pub theta: f64,
}

impl DualIterate {
    /// Validates simplex feasibility and evaluates the dual objective.
    pub fn new(
        y: Vec<f64>,
        g: &GradientMatrix,
        metric: &dyn MetricOps,
    ) -> Result<Self, SolverError> {
        assert_eq!(y.len(), g.len(), "weight count must match column count");
        let sum: f64 = y.iter().sum();
        assert!(
            y.iter().all(|&w| w >= -1e-12) && (sum - 1.0).abs() <= 1e-9,
            "dual weights must lie on the unit simplex"
        );
        let gy = g.combine(&y);
        let wgy = metric.apply_w(&gy);
        let wnorm_sq = gy.dot(&wgy);
        if wnorm_sq < -1e-10 * f64::max(1.0, gy.norm_squared()) {
            return Err(SolverError::NumericalBreakdown(
                "metric W is not positive semidefinite on Gy".into(),
            ));
        }
        Ok(DualIterate {
            y,
            gy,
            wgy,
            theta: -0.5 * f64::max(wnorm_sq, 0.0),
        })
    }

    /// The unit vector e_i, i.e. all weight on column `i`.
    pub fn vertex(
        i: usize,
        g: &GradientMatrix,
        metric: &dyn MetricOps,
    ) -> Result<Self, SolverError> {
        let mut y = vec![0.0; g.len()];
        y[i] = 1.0;
        DualIterate::new(y, g, metric)
    }

    /// |Gy|_W^2, recovered from theta.
    pub fn wnorm_sq(&self) -> f64 {
        -2.0 * self.theta
    }
}

/// Primal point recovered from a dual iterate.
#[derive(Clone, Debug)]
pub struct PrimalIterate {
    /// Step direction d = -W G y.
    pub d: DVector<f64>,
    /// Worst linearized slope z = max_i g_i^T d.
    pub z: f64,
    /// Primal objective q = z + 0.5 |d|_H^2 (>= theta by weak duality).
    pub q: f64,
}

/// Recovers the primal pair (d, z) and objective from a dual iterate.
pub fn primal_from_dual(
    g: &GradientMatrix,
    metric: &dyn MetricOps,
    dual: &DualIterate,
) -> PrimalIterate {
    let d = -&dual.wgy;
    let z = g
        .dots(&d)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let q = z + 0.5 * metric.hnorm_sq(&d);
    PrimalIterate { d, z, q }
}

/// How a dual solve ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    /// Face optimality reached: the iterate solves the dual to working
    /// precision.
    Converged,
    /// The caller's callback stopped the run.
    CallbackStop,
    /// The iteration cap was hit first.
    IterLimit,
}

/// Progress snapshot of one dual solve. Best iterates are tracked separately
/// from the current one so early-termination tests can use the best dual
/// value and best primal value seen so far, whatever the iteration order.
#[derive(Clone, Debug)]
pub struct QpRun {
    pub current: DualIterate,
    pub best_dual: DualIterate,
    pub best_primal: PrimalIterate,
    /// Iteration index that produced `best_dual`.
    pub best_dual_iter: u64,
    /// Iteration index that produced `best_primal`.
    pub best_primal_iter: u64,
    pub iterations: u64,
    pub status: QpStatus,
}

/// Callback verdict after each dual iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CallbackDecision {
    Continue,
    Stop,
}

struct ActiveSet<'a> {
    g: &'a GradientMatrix,
    /// Lazily cached W g_i; the metric is fixed for the whole solve.
    wg: Vec<Option<DVector<f64>>>,
    support: Vec<usize>,
    weights: Vec<f64>,
}

impl<'a> ActiveSet<'a> {
    fn new(g: &'a GradientMatrix, dual: &DualIterate) -> Self {
        let mut support = Vec::new();
        let mut weights = Vec::new();
        for (i, &w) in dual.y.iter().enumerate() {
            if w > 0.0 {
                support.push(i);
                weights.push(w);
            }
        }
        ActiveSet {
            g,
            wg: vec![None; g.len()],
            support,
            weights,
        }
    }

    fn wg(&mut self, metric: &dyn MetricOps, i: usize) -> &DVector<f64> {
        if self.wg[i].is_none() {
            self.wg[i] = Some(metric.apply_w(self.g.column(i)));
        }
        self.wg[i].as_ref().unwrap()
    }

    fn dual(&self, metric: &dyn MetricOps) -> Result<DualIterate, SolverError> {
        let mut y = vec![0.0; self.g.len()];
        for (&i, &w) in self.support.iter().zip(&self.weights) {
            y[i] = w;
        }
        DualIterate::new(y, self.g, metric)
    }

    /// Minimizes |G_S w|_W^2 over affine weights (sum w = 1) on the support
    /// via the bordered normal equations, with a tiny ridge for safety.
    fn affine_minimizer(&mut self, metric: &dyn MetricOps) -> Result<Vec<f64>, SolverError> {
        let s = self.support.len();
        let mut kkt = DMatrix::zeros(s + 1, s + 1);
        let mut max_diag: f64 = 0.0;
        for a in 0..s {
            let ia = self.support[a];
            self.wg(metric, ia);
            for b in a..s {
                let ib = self.support[b];
                let m = self.wg[ia].as_ref().unwrap().dot(self.g.column(ib));
                kkt[(a, b)] = m;
                kkt[(b, a)] = m;
                if a == b {
                    max_diag = max_diag.max(m.abs());
                }
            }
        }
        let ridge = 1e-13 * f64::max(1.0, max_diag);
        for a in 0..s {
            kkt[(a, a)] += ridge;
            kkt[(a, s)] = 1.0;
            kkt[(s, a)] = 1.0;
        }
        let mut rhs = DVector::zeros(s + 1);
        rhs[s] = 1.0;
        let solution = nalgebra::linalg::LU::new(kkt)
            .solve(&rhs)
            .filter(|sol| sol.iter().all(|v| v.is_finite()))
            .ok_or_else(|| {
                SolverError::NumericalBreakdown("singular face system in dual solve".into())
            })?;
        Ok(solution.as_slice()[..s].to_vec())
    }
}

/// Runs the active-set iteration from `y0`, invoking `callback` after every
/// iteration (one iteration is either a face-optimality check that may add a
/// column, or one weight update inside a face). The callback sees the updated
/// run, including the best primal value refreshed at that point, and may stop
/// the solve. A final callback fires when the iteration converges on its own.
pub fn solve_dual(
    g: &GradientMatrix,
    metric: &dyn MetricOps,
    y0: DualIterate,
    max_iters: u64,
    callback: &mut dyn FnMut(&QpRun) -> CallbackDecision,
) -> Result<QpRun, SolverError> {
    assert!(!g.is_empty(), "dual solve needs at least one column");
    let mut active = ActiveSet::new(g, &y0);
    let best_primal = primal_from_dual(g, metric, &y0);
    let mut run = QpRun {
        best_dual: y0.clone(),
        best_primal,
        best_dual_iter: 0,
        best_primal_iter: 0,
        current: y0,
        iterations: 0,
        status: QpStatus::IterLimit,
    };

    macro_rules! record_iterate {
        () => {{
            run.current = active.dual(metric)?;
            if run.current.theta > run.best_dual.theta {
                run.best_dual = run.current.clone();
                run.best_dual_iter = run.iterations;
            }
            let primal = primal_from_dual(g, metric, &run.current);
            if primal.q < run.best_primal.q {
                run.best_primal = primal;
                run.best_primal_iter = run.iterations;
            }
            if callback(&run) == CallbackDecision::Stop {
                // Convergence detected in the same iteration takes priority.
                if run.status != QpStatus::Converged {
                    run.status = QpStatus::CallbackStop;
                }
                return Ok(run);
            }
        }};
    }

    while run.iterations < max_iters {
        // Face-optimality check: the current point is optimal once no column
        // scores below |Gy|_W^2 under the linear form g_i^T W Gy.
        run.iterations += 1;
        let scores = g.dots(&run.current.wgy);
        let wnorm_sq = run.current.wnorm_sq();
        let mut entering = 0;
        for (i, &c) in scores.iter().enumerate() {
            if c < scores[entering] {
                entering = i;
            }
        }
        let slack = wnorm_sq - scores[entering];
        if slack <= OPT_TOL * f64::max(1.0, wnorm_sq) || active.support.contains(&entering) {
            run.status = QpStatus::Converged;
            record_iterate!();
            return Ok(run);
        }
        active.support.push(entering);
        active.weights.push(0.0);
        record_iterate!();

        // Work within the enlarged face until its affine minimizer is feasible.
        loop {
            if run.iterations >= max_iters {
                return Ok(run);
            }
            run.iterations += 1;
            let target = active.affine_minimizer(metric)?;
            if target.iter().all(|&w| w > DROP_TOL) {
                let total: f64 = target.iter().sum();
                active.weights = target.iter().map(|w| w / total).collect();
                record_iterate!();
                break;
            }
            // Move to the boundary of the simplex along the segment toward
            // the face minimizer, then drop the weights that hit zero.
            let mut step = 1.0;
            for (w, t) in active.weights.iter().zip(&target) {
                if *t <= DROP_TOL && *w > *t {
                    step = f64::min(step, *w / (*w - *t));
                }
            }
            let mut kept_support = Vec::new();
            let mut kept_weights = Vec::new();
            for (&i, (&w, &t)) in active
                .support
                .iter()
                .zip(active.weights.iter().zip(&target))
            {
                let moved = w + step * (t - w);
                // Keep strictly positive weights; the ratio-defining index
                // lands on zero and leaves the face.
                if moved > DROP_TOL {
                    kept_support.push(i);
                    kept_weights.push(moved);
                }
            }
            if kept_support.is_empty() {
                return Err(SolverError::NumericalBreakdown(
                    "active face collapsed in dual solve".into(),
                ));
            }
            let total: f64 = kept_weights.iter().sum();
            for w in &mut kept_weights {
                *w /= total;
            }
            active.support = kept_support;
            active.weights = kept_weights;
            record_iterate!();
        }
    }
    Ok(run)
}

/// Infinity-norm KKT residual of a dual iterate: deviation of support-column
/// scores from |Gy|_W^2 plus one-sided violation on the other columns.
/// Simplex feasibility holds by construction and contributes nothing.
pub fn kkt_residual(g: &GradientMatrix, dual: &DualIterate) -> f64 {
    let scores = g.dots(&dual.wgy);
    let multiplier = dual.wnorm_sq();
    let mut residual: f64 = 0.0;
    for (i, &c) in scores.iter().enumerate() {
        if dual.y[i] > 0.0 {
            residual = residual.max((c - multiplier).abs());
        } else {
            residual = residual.max(multiplier - c);
        }
    }
    residual.max(0.0)
}

/// Solves the dual until the KKT residual drops to `tol`, starting from `y0`
/// (or all weight on column 0). Internal convergence before that is accepted
/// as-is: the active-set iteration has reached its fixed point and further
/// iterations would revisit the same face, so its terminal iterate is the
/// exact solution at working precision even when ill scaling keeps the
/// absolute residual above `tol`. Errors only if the iteration cap arrives
/// with the residual still above `tol`.
pub fn exact_solve(
    g: &GradientMatrix,
    metric: &dyn MetricOps,
    y0: Option<DualIterate>,
    tol: f64,
    max_iters: u64,
) -> Result<QpRun, SolverError> {
    let start = match y0 {
        Some(d) => d,
        None => DualIterate::vertex(0, g, metric)?,
    };
    let run = solve_dual(g, metric, start, max_iters, &mut |run| {
        if kkt_residual(g, &run.current) <= tol {
            CallbackDecision::Stop
        } else {
            CallbackDecision::Continue
        }
    })?;
    match run.status {
        QpStatus::CallbackStop | QpStatus::Converged => Ok(run),
        QpStatus::IterLimit => {
            let residual = kkt_residual(g, &run.current);
            if residual <= tol {
                Ok(run)
            } else {
                Err(SolverError::ExactSolveFailure { residual, tol })
            }
        }
    }
}

/// Brute-force reference: enumerates every nonempty column subset (at most 8
/// columns), solves each face exactly, and keeps the feasible face with the
/// least W-norm combination. Intended for validating `exact_solve`.
pub fn reference_min_norm(
    g: &GradientMatrix,
    metric: &dyn MetricOps,
) -> Result<DualIterate, SolverError> {
    let p = g.len();
    assert!(p > 0, "reference solve needs at least one column");
    if p > 8 {
        return Err(SolverError::CapacityError(p));
    }
    let wg: Vec<DVector<f64>> = (0..p).map(|i| metric.apply_w(g.column(i))).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << p) {
        let subset: Vec<usize> = (0..p).filter(|i| mask & (1 << i) != 0).collect();
        let s = subset.len();
        let mut kkt = DMatrix::zeros(s + 1, s + 1);
        for a in 0..s {
            for b in 0..s {
                kkt[(a, b)] = wg[subset[a]].dot(g.column(subset[b]));
            }
            kkt[(a, s)] = 1.0;
            kkt[(s, a)] = 1.0;
        }
        let mut rhs = DVector::zeros(s + 1);
        rhs[s] = 1.0;
        let Some(solution) = nalgebra::linalg::LU::new(kkt).solve(&rhs) else {
            continue;
        };
        let w = &solution.as_slice()[..s];
        if w.iter().any(|v| !v.is_finite() || *v < -1e-12) {
            continue;
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            continue;
        }
        let mut y = vec![0.0; p];
        for (&i, &v) in subset.iter().zip(w) {
            y[i] = v.max(0.0) / total;
        }
        let gy = g.combine(&y);
        let wnorm_sq = metric.apply_w(&gy).dot(&gy);
        if best.as_ref().is_none_or(|(b, _)| wnorm_sq < *b) {
            best = Some((wnorm_sq, y));
        }
    }
    let (_, y) = best.ok_or_else(|| {
        SolverError::NumericalBreakdown("no feasible face in reference solve".into())
    })?;
    DualIterate::new(y, g, metric)
}
