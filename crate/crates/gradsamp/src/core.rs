//! Shared solver vocabulary: the objective oracle interface, configuration,
//! sample points, gradient matrices, runtime counters, and the error taxonomy.

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::time::Duration;
use thiserror::Error;

use crate::quasinewton::HessianPair;
use crate::sampling::uniform_ball;

/// Hard caps that turn endless loops into diagnostics. Exceeding one of these
/// indicates a violated assumption (e.g. an objective unbounded below), not a
/// tunable limit, so they are constants rather than configuration.
pub const MAX_LINE_SEARCH_ITERS: u64 = 200;
pub const MAX_PERTURB_ATTEMPTS: u64 = 100;
pub const MAX_SAMPLE_REDRAWS: u64 = 100;
pub const MAX_START_PERTURBATIONS: u32 = 10;

/// One objective evaluation: the value, the gradient, and whether the point
/// was differentiable. For a max-of-smooth-pieces objective the gradient at a
/// tie is the tie-broken piece gradient and `differentiable` stays true; the
/// flag exists for oracles that can certify non-differentiability exactly.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub differentiable: bool,
}

/// A locally Lipschitz objective that reports a gradient wherever it is
/// differentiable. Implementations must be safe for concurrent read-only use
/// so independent solves can run in parallel.
pub trait ObjectiveOracle: Sync {
    fn dimension(&self) -> usize;
    fn evaluate(&self, x: &DVector<f64>) -> Evaluation;
}

/// Which parts of an evaluation the caller will actually consume. Counters
/// bill only what is consumed: sample-set draws need gradients but never
/// values, which is why gradient counts dwarf value counts on benchmark runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalUsage {
    Value,
    Gradient,
    Both,
}

/// Oracle-call and subproblem-iteration tallies for one solve.
#[derive(Clone, Copy, Debug, Default)]
pub struct Counters {
    pub funcs: u64,
    pub grads: u64,
    pub qp_iters: u64,
}

/// Evaluates the oracle at `x`, bills `counters` according to `usage`, and
/// rejects non-finite output on whichever parts were consumed.
pub fn evaluate(
    oracle: &dyn ObjectiveOracle,
    x: &DVector<f64>,
    usage: EvalUsage,
    counters: &mut Counters,
) -> Result<Evaluation, SolverError> {
    let eval = oracle.evaluate(x);
    bill(&eval, usage, counters)?;
    Ok(eval)
}

/// Charges an already-obtained evaluation to the counters. Split from
/// `evaluate` so a caller holding one oracle result can bill the value first
/// and the gradient later, only if it is actually consumed.
pub fn bill(
    eval: &Evaluation,
    usage: EvalUsage,
    counters: &mut Counters,
) -> Result<(), SolverError> {
    if matches!(usage, EvalUsage::Value | EvalUsage::Both) {
        counters.funcs += 1;
        if !eval.value.is_finite() {
            return Err(SolverError::NumericalBreakdown(
                "objective value is not finite".into(),
            ));
        }
    }
    if matches!(usage, EvalUsage::Gradient | EvalUsage::Both) {
        counters.grads += 1;
        if eval.differentiable && !eval.gradient.iter().all(|g| g.is_finite()) {
            return Err(SolverError::NumericalBreakdown(
                "gradient is not finite".into(),
            ));
        }
    }
    Ok(())
}

/// Which subproblem regime the solver runs in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Solve every subproblem to a tight KKT residual.
    Exact,
    /// Stop subproblem solves early once inexactness certificates hold.
    Inexact,
    /// Inexact solves plus gradient aggregation after null steps.
    InexactAgg,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Exact => write!(f, "exact"),
            Mode::Inexact => write!(f, "inexact"),
            Mode::InexactAgg => write!(f, "inexact-agg"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Mode::Exact),
            "inexact" => Ok(Mode::Inexact),
            "inexact-agg" => Ok(Mode::InexactAgg),
            other => Err(format!(
                "unknown mode '{other}' (expected exact, inexact, or inexact-agg)"
            )),
        }
    }
}

/// How the quasi-Newton metric pair is stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HessianStorage {
    /// Dense n-by-n matrices, updated in place.
    Full,
    /// Limited-memory form keeping at most this many curvature pairs.
    Limited(usize),
}

/// All solver parameters. Field names double as configuration-file keys.
#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub mode: Mode,
    pub hessian: HessianStorage,
    pub seed: u64,
    /// Radius-test scale factor (>= 1).
    pub nu: f64,
    /// Stepsize threshold below which a step counts as negligible.
    pub alpha_lo: f64,
    /// Upper bracket end for the line search.
    pub alpha_hi: f64,
    /// Initial trial stepsize.
    pub alpha_init: f64,
    /// Floor for the duality-gap factor lambda.
    pub rho: f64,
    /// Descent-test curvature fraction.
    pub kappa: f64,
    /// Multiplicative radius decrease on a shrink outcome.
    pub psi: f64,
    /// Multiplicative inexactness decrease after a negligible step.
    pub iota: f64,
    /// Sufficient-decrease slope (may be lowered by parameter selection).
    pub eta_lo: f64,
    /// Curvature-condition fraction.
    pub eta_hi: f64,
    /// Sample-set size cap p; `None` means 10n.
    pub sample_cap: Option<usize>,
    /// Inexactness level sigma restored on every radius shrink.
    pub sigma_reset: f64,
    /// Line-search interpolation weight.
    pub gamma: f64,
    /// Lower damping bound for curvature pairs.
    pub phi_lo: f64,
    /// Upper damping bound for curvature pairs.
    pub phi_hi: f64,
    /// Curvature threshold in the sample-reset test.
    pub xi: f64,
    /// Fraction of the decrease-parameter budget spent by selection.
    pub chi: f64,
    /// Points drawn per sampling round.
    pub sample_add: usize,
    /// Initial sampling radius; `None` means max(0.01, 0.1 * |grad(x0)|_inf).
    pub eps0: Option<f64>,
    /// Stationarity tolerance for termination.
    pub stat_tol: f64,
    /// Stop once f(x) < f_tol (disabled when `None`).
    pub f_tol: Option<f64>,
    /// Wall-clock limit in seconds (disabled when `None`).
    pub time_limit: Option<f64>,
    /// Outer-iteration cap; `None` means 50n + 10000.
    pub max_iters: Option<u64>,
    /// KKT residual tolerance for exact subproblem solves.
    pub exact_kkt_tol: f64,
    /// Perturbation attempts after which the curvature condition is waived.
    pub perturb_patience: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            mode: Mode::Inexact,
            hessian: HessianStorage::Full,
            seed: 0,
            nu: 1.0,
            alpha_lo: 1e-20,
            alpha_hi: 100.0,
            alpha_init: 1.0,
            rho: 0.01,
            kappa: 1e-4,
            psi: 0.1,
            iota: 0.5,
            eta_lo: 1e-10,
            eta_hi: 0.9,
            sample_cap: None,
            sigma_reset: 10.0,
            gamma: 0.5,
            phi_lo: 1e-20,
            phi_hi: 1e8,
            xi: 1e-20,
            chi: 0.5,
            sample_add: 100,
            eps0: None,
            stat_tol: 1e-4,
            f_tol: None,
            time_limit: None,
            max_iters: None,
            exact_kkt_tol: 1e-10,
            perturb_patience: 3,
        }
    }
}

impl SolverConfig {
    /// Checks every parameter bound, reporting the offending field and its
    /// admissible range.
    pub fn validate(&self) -> Result<(), SolverError> {
        fn fail(field: &str, value: f64, range: &str) -> Result<(), SolverError> {
            Err(SolverError::InvalidConfig(format!(
                "{field} = {value} is out of range: {field} must lie in {range}"
            )))
        }
        if !(self.nu >= 1.0) {
            return fail("nu", self.nu, "[1, inf)");
        }
        if !(self.alpha_lo > 0.0) {
            return fail("alpha_lo", self.alpha_lo, "(0, inf)");
        }
        if !(self.alpha_hi >= self.alpha_lo) {
            return fail("alpha_hi", self.alpha_hi, "[alpha_lo, inf)");
        }
        if !(self.alpha_init >= self.alpha_lo && self.alpha_init <= self.alpha_hi) {
            return fail("alpha_init", self.alpha_init, "[alpha_lo, alpha_hi]");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return fail("rho", self.rho, "(0, 1)");
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return fail("kappa", self.kappa, "(0, 1)");
        }
        if !(self.psi > 0.0 && self.psi <= 1.0) {
            return fail("psi", self.psi, "(0, 1]");
        }
        if !(self.iota > 0.0 && self.iota < 1.0) {
            return fail("iota", self.iota, "(0, 1)");
        }
        if !(self.eta_lo > 0.0 && self.eta_lo < 1.0) {
            return fail("eta_lo", self.eta_lo, "(0, 1)");
        }
        if !(self.eta_hi > self.eta_lo && self.eta_hi < 1.0) {
            return fail("eta_hi", self.eta_hi, "(eta_lo, 1)");
        }
        if !(self.sigma_reset > 0.0) {
            return fail("sigma_reset", self.sigma_reset, "(0, inf)");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail("gamma", self.gamma, "(0, 1)");
        }
        if !(self.phi_lo > 0.0 && self.phi_lo < 1.0) {
            return fail("phi_lo", self.phi_lo, "(0, 1)");
        }
        if !(self.phi_hi > 1.0) {
            return fail("phi_hi", self.phi_hi, "(1, inf)");
        }
        if !(self.xi > 0.0) {
            return fail("xi", self.xi, "(0, inf)");
        }
        if !(self.chi > 0.0 && self.chi < 1.0) {
            return fail("chi", self.chi, "(0, 1)");
        }
        if self.sample_add == 0 {
            return fail("sample_add", 0.0, "{1, 2, ...}");
        }
        if self.sample_cap == Some(0) {
            return fail("sample_cap", 0.0, "{1, 2, ...}");
        }
        if let Some(e) = self.eps0 {
            if !(e > 0.0) {
                return fail("eps0", e, "(0, inf)");
            }
        }
        if !(self.stat_tol > 0.0) {
            return fail("stat_tol", self.stat_tol, "(0, inf)");
        }
        if let Some(t) = self.time_limit {
            if !(t > 0.0) {
                return fail("time_limit", t, "(0, inf)");
            }
        }
        if !(self.exact_kkt_tol > 0.0) {
            return fail("exact_kkt_tol", self.exact_kkt_tol, "(0, inf)");
        }
        if let Some(h) = match self.hessian {
            HessianStorage::Limited(h) => Some(h),
            HessianStorage::Full => None,
        } {
            if h == 0 {
                return fail("hessian", 0.0, "limited memory needs at least 1 pair");
            }
        }
        Ok(())
    }

    /// Sample-set size cap for dimension `n`.
    pub fn sample_cap_for(&self, n: usize) -> usize {
        self.sample_cap.unwrap_or(10 * n)
    }

    /// Outer-iteration cap for dimension `n`.
    pub fn max_iters_for(&self, n: usize) -> u64 {
        self.max_iters.unwrap_or(50 * n as u64 + 10_000)
    }

    /// Initial sampling radius given the starting gradient's infinity norm.
    pub fn initial_epsilon(&self, grad0_inf: f64) -> f64 {
        self.eps0.unwrap_or_else(|| f64::max(0.01, 0.1 * grad0_inf))
    }
}

/// Everything that can stop a solve abnormally.
#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),
    #[error("line search exhausted {MAX_LINE_SEARCH_ITERS} iterations without an acceptable step")]
    LineSearchFailure,
    #[error("iterate perturbation exhausted {MAX_PERTURB_ATTEMPTS} attempts")]
    PerturbationFailure,
    #[error("sample redraw exhausted {MAX_SAMPLE_REDRAWS} attempts without a differentiable batch")]
    SampleRedrawFailure,
    #[error("exact subproblem solve stalled at residual {residual:.3e} (tolerance {tol:.3e})")]
    ExactSolveFailure { residual: f64, tol: f64 },
    #[error("subproblem stalled after {0} iterations without meeting any certificate")]
    SubproblemStall(u64),
    #[error("no differentiable starting point within {MAX_START_PERTURBATIONS} perturbations")]
    StartPointError,
    #[error("outer iteration {iteration}: {source}")]
    AtIteration {
        iteration: u64,
        #[source]
        source: Box<SolverError>,
    },
    #[error("{0} columns exceed the reference solver's enumeration capacity of 8")]
    CapacityError(usize),
}

/// Where a gradient-matrix column came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ColumnOrigin {
    /// Gradient at the current iterate; always column 0.
    CurrentIterate,
    /// Gradient at a retained sample point.
    Sampled { point_id: u64 },
    /// Convex combination of a previous matrix's columns.
    Aggregated,
}

/// Column-major bundle of gradients entering one subproblem.
#[derive(Clone, Debug)]
pub struct GradientMatrix {
    dim: usize,
    columns: Vec<DVector<f64>>,
    origins: Vec<ColumnOrigin>,
}

impl GradientMatrix {
    pub fn new(dim: usize) -> Self {
        GradientMatrix {
            dim,
            columns: Vec::new(),
            origins: Vec::new(),
        }
    }

    pub fn push(&mut self, gradient: DVector<f64>, origin: ColumnOrigin) {
        assert_eq!(gradient.len(), self.dim, "column dimension mismatch");
        self.columns.push(gradient);
        self.origins.push(origin);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn column(&self, i: usize) -> &DVector<f64> {
        &self.columns[i]
    }

    pub fn origin(&self, i: usize) -> &ColumnOrigin {
        &self.origins[i]
    }

    pub fn has_aggregated_column(&self) -> bool {
        self.origins.contains(&ColumnOrigin::Aggregated)
    }

    /// G y for simplex weights `y`.
    pub fn combine(&self, y: &[f64]) -> DVector<f64> {
        assert_eq!(y.len(), self.len(), "weight length mismatch");
        let mut out = DVector::zeros(self.dim);
        for (w, col) in y.iter().zip(&self.columns) {
            out.axpy(*w, col, 1.0);
        }
        out
    }

    /// G^T v, one inner product per column.
    pub fn dots(&self, v: &DVector<f64>) -> Vec<f64> {
        self.columns.iter().map(|c| c.dot(v)).collect()
    }
}

/// A retained sample: location, its gradient, and the iteration that drew it
/// (used to evict the eldest points first).
#[derive(Clone, Debug)]
pub struct SamplePoint {
    pub id: u64,
    pub x: DVector<f64>,
    pub gradient: DVector<f64>,
    pub birth: u64,
}

/// Mutable per-solve state threaded through the outer loop. `samples[0]` is
/// always the current iterate.
#[derive(Clone, Debug)]
pub struct SolverState {
    pub iteration: u64,
    pub x: DVector<f64>,
    pub f: f64,
    pub gradient: DVector<f64>,
    pub epsilon: f64,
    pub sigma: f64,
    pub samples: Vec<SamplePoint>,
    pub hessian: HessianPair,
    pub last_alpha: f64,
    pub counters: Counters,
    pub next_point_id: u64,
}

impl SolverState {
    /// Allocates a fresh sample-point id.
    pub fn fresh_id(&mut self) -> u64 {
        let id = self.next_point_id;
        self.next_point_id += 1;
        id
    }
}

/// Why a solve stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminationReason {
    /// Radius and dual vectors all below the stationarity tolerance.
    Stationary,
    /// Objective fell below the target value.
    FTolReached,
    TimeLimit,
    IterLimit,
    /// The gradient vanished exactly at the current iterate.
    ZeroGradient,
}

impl fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminationReason::Stationary => write!(f, "stationary"),
            TerminationReason::FTolReached => write!(f, "f-tol"),
            TerminationReason::TimeLimit => write!(f, "time-limit"),
            TerminationReason::IterLimit => write!(f, "iter-limit"),
            TerminationReason::ZeroGradient => write!(f, "zero-gradient"),
        }
    }
}

/// Final outcome of one solve.
#[derive(Clone, Debug)]
pub struct SolveReport {
    pub termination: TerminationReason,
    pub iterations: u64,
    pub counters: Counters,
    pub final_f: f64,
    pub final_x: DVector<f64>,
    pub wall_time: Duration,
}

/// Builds the state for iteration 0: evaluates the start point (perturbing it
/// slightly, up to a small attempt cap, if the oracle flags it as a kink),
/// then sets the initial radius, inexactness level, metric, and sample set.
pub fn init_state(
    oracle: &dyn ObjectiveOracle,
    config: &SolverConfig,
    x0: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<SolverState, SolverError> {
    config.validate()?;
    let n = oracle.dimension();
    assert_eq!(x0.len(), n, "start point dimension mismatch");

    let mut counters = Counters::default();
    let mut x = x0.clone();
    let mut eval = evaluate(oracle, &x, EvalUsage::Both, &mut counters)?;
    let mut attempts = 0;
    while !eval.differentiable {
        if attempts >= MAX_START_PERTURBATIONS {
            return Err(SolverError::StartPointError);
        }
        let radius = 1e-10 * f64::max(1.0, x0.amax());
        x = x0 + uniform_ball(n, radius, rng);
        eval = evaluate(oracle, &x, EvalUsage::Both, &mut counters)?;
        attempts += 1;
    }

    let epsilon = config.initial_epsilon(eval.gradient.amax());
    let hessian = match config.hessian {
        HessianStorage::Full => HessianPair::identity(n),
        HessianStorage::Limited(h) => HessianPair::limited(n, h),
    };
    let start = SamplePoint {
        id: 0,
        x: x.clone(),
        gradient: eval.gradient.clone(),
        birth: 0,
    };
    Ok(SolverState {
        iteration: 0,
        x,
        f: eval.value,
        gradient: eval.gradient,
        epsilon,
        sigma: config.sigma_reset,
        samples: vec![start],
        hessian,
        last_alpha: 0.0,
        counters,
        next_point_id: 1,
    })
}

/// Lowest index attaining the maximum of `values`, treating anything within
/// a 1e-14 relative band of the maximum as tied.
pub fn tiebreak_argmax(values: &[f64]) -> usize {
    assert!(!values.is_empty(), "argmax of empty slice");
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-14 * f64::max(1.0, max.abs());
    values
        .iter()
        .position(|&v| v >= max - tol)
        .expect("max exists")
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    struct Quadratic;

    impl ObjectiveOracle for Quadratic {
        fn dimension(&self) -> usize {
            2
        }

        fn evaluate(&self, x: &DVector<f64>) -> Evaluation {
            Evaluation {
                value: 0.5 * x.norm_squared(),
                gradient: x.clone(),
                differentiable: true,
            }
        }
    }

    #[test]
    fn counters_bill_only_consumed_parts() {
        let mut counters = Counters::default();
        let x = dvector![1.0, 2.0];
        evaluate(&Quadratic, &x, EvalUsage::Value, &mut counters).unwrap();
        evaluate(&Quadratic, &x, EvalUsage::Gradient, &mut counters).unwrap();
        evaluate(&Quadratic, &x, EvalUsage::Both, &mut counters).unwrap();
        assert_eq!((counters.funcs, counters.grads), (2, 2));
    }

    #[test]
    fn non_finite_value_is_rejected() {
        struct Bad;
        impl ObjectiveOracle for Bad {
            fn dimension(&self) -> usize {
                1
            }
            fn evaluate(&self, _x: &DVector<f64>) -> Evaluation {
                Evaluation {
                    value: f64::NAN,
                    gradient: dvector![0.0],
                    differentiable: true,
                }
            }
        }
        let mut counters = Counters::default();
        let err = evaluate(&Bad, &dvector![0.0], EvalUsage::Value, &mut counters);
        assert!(matches!(err, Err(SolverError::NumericalBreakdown(_))));
    }

    #[test]
    fn default_config_is_valid() {
        SolverConfig::default().validate().unwrap();
    }

    #[test]
    fn kappa_out_of_range_names_field_and_bound() {
        let config = SolverConfig {
            kappa: 2.0,
            ..SolverConfig::default()
        };
        let err = config.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("kappa"), "message: {msg}");
        assert!(msg.contains("(0, 1)"), "message: {msg}");
    }

    #[test]
    fn initial_epsilon_follows_gradient_scale() {
        let config = SolverConfig::default();
        assert_eq!(config.initial_epsilon(5.0), 0.5);
        assert_eq!(config.initial_epsilon(0.001), 0.01);
        let fixed = SolverConfig {
            eps0: Some(2.5),
            ..SolverConfig::default()
        };
        assert_eq!(fixed.initial_epsilon(5.0), 2.5);
    }

    #[test]
    fn combine_is_the_weighted_column_sum() {
        let mut g = GradientMatrix::new(2);
        g.push(dvector![1.0, 0.0], ColumnOrigin::CurrentIterate);
        g.push(dvector![0.0, 1.0], ColumnOrigin::Sampled { point_id: 1 });
        let gy = g.combine(&[0.25, 0.75]);
        assert_eq!(gy, dvector![0.25, 0.75]);
        assert_eq!(g.dots(&dvector![2.0, 3.0]), vec![2.0, 3.0]);
    }

    #[test]
    fn tiebreak_prefers_lowest_index() {
        assert_eq!(tiebreak_argmax(&[3.0, 3.0, 1.0]), 0);
        assert_eq!(tiebreak_argmax(&[1.0, 2.0, 2.0]), 1);
        assert_eq!(tiebreak_argmax(&[-1.0, -3.0]), 0);
        assert_eq!(tiebreak_argmax(&[0.5]), 0);
    }

    #[test]
    fn init_state_seeds_the_sample_set_with_the_start_point() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let config = SolverConfig::default();
        let x0 = dvector![3.0, -4.0];
        let state = init_state(&Quadratic, &config, &x0, &mut rng).unwrap();
        assert_eq!(state.samples.len(), 1);
        assert_eq!(state.samples[0].x, x0);
        assert_eq!(state.f, 12.5);
        assert_eq!(state.epsilon, 0.4);
        assert_eq!(state.sigma, 10.0);
        assert_eq!((state.counters.funcs, state.counters.grads), (1, 1));
    }

    #[test]
    fn init_state_perturbs_off_a_flagged_kink() {
        use rand::SeedableRng;
        struct KinkAtStart;
        impl ObjectiveOracle for KinkAtStart {
            fn dimension(&self) -> usize {
                2
            }
            fn evaluate(&self, x: &DVector<f64>) -> Evaluation {
                Evaluation {
                    value: x.amax(),
                    gradient: dvector![1.0, 0.0],
                    differentiable: x[0] != 1.0,
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let config = SolverConfig::default();
        let x0 = dvector![1.0, 1.0];
        let state = init_state(&KinkAtStart, &config, &x0, &mut rng).unwrap();
        assert!(state.x[0] != 1.0);
        assert!((&state.x - &x0).norm() <= 1e-10);
    }

    proptest::proptest! {
        #[test]
        fn tiebreak_picks_the_lowest_index_in_the_band(
            values in proptest::collection::vec(-1e6f64..1e6, 1..40)
        ) {
            let i = tiebreak_argmax(&values);
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let band = 1e-14 * f64::max(1.0, max.abs());
            proptest::prop_assert!(values[i] >= max - band);
            proptest::prop_assert!(values[..i].iter().all(|&v| v < max - band));
        }
    }
}
