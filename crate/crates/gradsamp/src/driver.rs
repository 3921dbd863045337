//! Outer solve loop: gradient-matrix assembly, subproblem call, line search,
//! radius and inexactness schedule, iterate perturbation, metric update,
//! sample-set maintenance, aggregation bookkeeping, and termination.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::core::{
    init_state, ColumnOrigin, GradientMatrix, Mode, ObjectiveOracle, SamplePoint, SolveReport,
    SolverConfig, SolverError, SolverState, TerminationReason,
};
use crate::linesearch::{perturb, search, AcceptedStep, StepKind};
use crate::quasinewton::{damped_pair, select_sufficient_decrease};
use crate::sampling::{self, should_reset};
use crate::subproblem::{self, OutcomeKind, SubproblemSettings};

/// Aggregation bookkeeping carried across a null step: the dual weights and
/// combination from the stalled iteration, the aggregated matrix the next
/// subproblem will use, and the expansion target the consistency check maps
/// dual weights back onto.
#[derive(Clone, Debug)]
pub struct AggregationState {
    /// Dual weights over the matrix the stalled iteration used.
    pub last_y: Vec<f64>,
    /// Aggregation vector G y for those weights.
    pub last_gy: DVector<f64>,
    /// Next subproblem's matrix: current gradient, aggregation vector, new
    /// sample gradients.
    pub matrix: GradientMatrix,
    /// Unaggregated counterpart: current gradient, every column of the used
    /// matrix, new sample gradients.
    pub shadow: GradientMatrix,
}

/// Expansion data recorded whenever a subproblem ran on an aggregated
/// matrix, for consistency checks against the unaggregated counterpart.
#[derive(Clone, Debug)]
pub struct AggregationTrace {
    /// Dual exit weights over the aggregated matrix.
    pub weights: Vec<f64>,
    /// The same point as weights over the unaggregated matrix.
    pub expanded: Vec<f64>,
    /// Combination under the aggregated matrix.
    pub aggregated_combination: DVector<f64>,
    /// Combination under the unaggregated matrix; equal up to round-off.
    pub full_combination: DVector<f64>,
}

/// One outer iteration, emitted after all of the iteration's updates.
#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub iteration: u64,
    pub outcome: OutcomeKind,
    /// Line-search exit kind; absent on the radius-shrink path.
    pub step_kind: Option<StepKind>,
    pub alpha: f64,
    pub epsilon_before: f64,
    pub epsilon_after: f64,
    pub sigma_before: f64,
    pub sigma_after: f64,
    pub f_before: f64,
    pub f_after: f64,
    /// Displacement of the accepted iterate (zero on null steps).
    pub step_norm: f64,
    pub d_norm: f64,
    pub gy_norm: f64,
    pub wgy_norm: f64,
    pub qp_iterations: u64,
    /// Column count of the matrix this subproblem ran on.
    pub columns: usize,
    pub used_aggregation: bool,
    /// Sample-set size after the update, excluding the iterate.
    pub sample_size: usize,
    pub aggregation: Option<AggregationTrace>,
}

/// Maps dual weights over an aggregated matrix onto the unaggregated one:
/// the aggregation column's weight is distributed over the previous
/// iteration's columns in proportion to its dual weights. Preserves simplex
/// feasibility and the combination vector.
pub fn expand_aggregated_dual(y: &[f64], y_prev: &[f64]) -> Vec<f64> {
    assert!(
        y.len() >= 2,
        "aggregated weights need at least the current-gradient and aggregation columns"
    );
    let mut out = Vec::with_capacity(1 + y_prev.len() + y.len() - 2);
    out.push(y[0]);
    for &w in y_prev {
        out.push(y[1] * w);
    }
    out.extend_from_slice(&y[2..]);
    out
}

/// Matrix for the subproblem after a null step: the current gradient, the
/// aggregation vector standing in for the previous matrix, and the points
/// drawn by the latest sample update. No deduplication is attempted.
pub fn build_aggregated(
    grad_next: &DVector<f64>,
    last_gy: &DVector<f64>,
    new_points: &[SamplePoint],
) -> GradientMatrix {
    let mut g = GradientMatrix::new(grad_next.len());
    g.push(grad_next.clone(), ColumnOrigin::CurrentIterate);
    g.push(last_gy.clone(), ColumnOrigin::Aggregated);
    for p in new_points {
        g.push(p.gradient.clone(), ColumnOrigin::Sampled { point_id: p.id });
    }
    g
}

/// End-of-iteration stop test on the latest subproblem combination: the
/// objective target, then stationarity (combination, direction preimage,
/// and radius all inside the tolerance), then the wall clock, then the
/// iteration cap.
pub fn check_termination(
    gy: &DVector<f64>,
    wgy: &DVector<f64>,
    epsilon: f64,
    f: f64,
    elapsed: Duration,
    iters: u64,
    config: &SolverConfig,
) -> Option<TerminationReason> {
    if let Some(target) = config.f_tol {
        if f < target {
            return Some(TerminationReason::FTolReached);
        }
    }
    if f64::max(f64::max(gy.amax(), wgy.amax()), epsilon) <= config.stat_tol {
        return Some(TerminationReason::Stationary);
    }
    if let Some(limit) = config.time_limit {
        if elapsed.as_secs_f64() > limit {
            return Some(TerminationReason::TimeLimit);
        }
    }
    if iters >= config.max_iters_for(gy.len()) {
        return Some(TerminationReason::IterLimit);
    }
    None
}

/// Full gradient matrix: the iterate's gradient first, then one column per
/// retained sample point.
fn build_full(state: &SolverState) -> GradientMatrix {
    let mut g = GradientMatrix::new(state.x.len());
    g.push(state.gradient.clone(), ColumnOrigin::CurrentIterate);
    for p in &state.samples[1..] {
        g.push(p.gradient.clone(), ColumnOrigin::Sampled { point_id: p.id });
    }
    g
}

/// Dual exit weights keyed by sample-point id so they can be re-attached to
/// next iteration's columns. Aggregation columns carry no id and drop out.
fn capture_warm(g: &GradientMatrix, y: &[f64], head_id: u64) -> Vec<(u64, f64)> {
    let mut out = Vec::with_capacity(y.len());
    for (j, &w) in y.iter().enumerate() {
        match g.origin(j) {
            ColumnOrigin::CurrentIterate => out.push((head_id, w)),
            ColumnOrigin::Sampled { point_id } => out.push((*point_id, w)),
            ColumnOrigin::Aggregated => {}
        }
    }
    out
}

/// Warm start for the next subproblem. An aggregated matrix starts from all
/// weight on the aggregation column, which reproduces the previous dual
/// value exactly because the metric is unchanged across a null step. A full
/// matrix re-attaches the previous weights by point id and renormalizes;
/// when too little weight survives the start falls back to the vertex.
fn warm_start_for(
    g: &GradientMatrix,
    head_id: u64,
    prev: Option<&[(u64, f64)]>,
) -> Option<Vec<f64>> {
    if let Some(pos) = (0..g.len()).find(|&j| *g.origin(j) == ColumnOrigin::Aggregated) {
        let mut y = vec![0.0; g.len()];
        y[pos] = 1.0;
        return Some(y);
    }
    let prev = prev?;
    let lookup: HashMap<u64, f64> = prev.iter().copied().collect();
    let mut y = vec![0.0; g.len()];
    let mut total = 0.0;
    for (j, slot) in y.iter_mut().enumerate() {
        let id = match g.origin(j) {
            ColumnOrigin::CurrentIterate => head_id,
            ColumnOrigin::Sampled { point_id } => *point_id,
            ColumnOrigin::Aggregated => unreachable!("handled above"),
        };
        if let Some(&w) = lookup.get(&id) {
            let w = w.max(0.0);
            *slot = w;
            total += w;
        }
    }
    if total >= 1e-8 {
        for w in &mut y {
            *w /= total;
        }
        Some(y)
    } else {
        None
    }
}

fn finish(reason: TerminationReason, state: SolverState, clock: Instant) -> SolveReport {
    SolveReport {
        termination: reason,
        iterations: state.iteration,
        counters: state.counters,
        final_f: state.f,
        final_x: state.x,
        wall_time: clock.elapsed(),
    }
}

/// Minimizes the oracle's objective from `x0`.
pub fn minimize(
    oracle: &dyn ObjectiveOracle,
    config: &SolverConfig,
    x0: &DVector<f64>,
) -> Result<SolveReport, SolverError> {
    minimize_with_observer(oracle, config, x0, &mut |_| {})
}

/// `minimize` with a per-iteration observer for schedule, decrease, and
/// aggregation-consistency instrumentation.
pub fn minimize_with_observer(
    oracle: &dyn ObjectiveOracle,
    config: &SolverConfig,
    x0: &DVector<f64>,
    observe: &mut dyn FnMut(&IterationRecord),
) -> Result<SolveReport, SolverError> {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = init_state(oracle, config, x0, &mut rng)?;
    let n = oracle.dimension();
    let p_cap = config.sample_cap_for(n);
    let max_iters = config.max_iters_for(n);

    // The sufficient-decrease slope may be tightened against the metric's
    // conditioning budget before the first iteration.
    let selection = select_sufficient_decrease(
        &state.hessian,
        config.phi_lo,
        config.phi_hi,
        config.chi,
        config.eta_lo,
    )?;
    let mut cfg = config.clone();
    cfg.eta_lo = selection.eta_lo;

    if cfg.f_tol.is_some_and(|target| state.f < target) {
        return Ok(finish(TerminationReason::FTolReached, state, clock));
    }

    let mut agg: Option<AggregationState> = None;
    let mut warm: Option<Vec<(u64, f64)>> = None;

    loop {
        if state.gradient.iter().all(|&g| g == 0.0) {
            return Ok(finish(TerminationReason::ZeroGradient, state, clock));
        }
        if state.iteration >= max_iters {
            return Ok(finish(TerminationReason::IterLimit, state, clock));
        }

        let k = state.iteration;
        let birth = k + 1;
        let epsilon_before = state.epsilon;
        let sigma_before = state.sigma;
        let f_before = state.f;
        let wrap = |e: SolverError| SolverError::AtIteration {
            iteration: k,
            source: Box::new(e),
        };

        // Matrix selection: the aggregated matrix applies only right after
        // a null step and only while the sample set is below its cap.
        let carried = agg.take();
        let p_k = state.samples.len() - 1;
        let use_agg = carried.is_some() && p_k < p_cap;
        let (g, expansion_ctx) = if use_agg {
            let c = carried.unwrap();
            (c.matrix, Some((c.shadow, c.last_y)))
        } else {
            (build_full(&state), None)
        };

        let warm_start = warm_start_for(&g, state.samples[0].id, warm.as_deref());
        let settings = SubproblemSettings {
            mode: cfg.mode,
            sigma: state.sigma,
            epsilon: state.epsilon,
            warm_start,
        };
        let outcome = subproblem::run(&g, &state.hessian, &settings, &cfg).map_err(wrap)?;
        state.counters.qp_iters += outcome.qp_iterations;
        warm = Some(capture_warm(&g, &outcome.y.y, state.samples[0].id));

        let trace = expansion_ctx.map(|(shadow, last_y)| {
            let expanded = expand_aggregated_dual(&outcome.y.y, &last_y);
            let full_combination = shadow.combine(&expanded);
            let aggregated_combination = outcome.y.gy.clone();
            debug_assert!(
                (&full_combination - &aggregated_combination).norm()
                    <= 1e-10 * (1.0 + aggregated_combination.norm()),
                "aggregated dual expansion does not reproduce the combination"
            );
            AggregationTrace {
                weights: outcome.y.y.clone(),
                expanded,
                aggregated_combination,
                full_combination,
            }
        });

        let gy_norm = outcome.y.gy.norm();
        let d_norm = outcome.d.norm();
        let mut alpha = 0.0;
        let mut step_kind = None;
        let mut accepted: Option<AcceptedStep> = None;
        let (eps_next, sigma_next) = match outcome.kind {
            OutcomeKind::RadiusShrink => (cfg.psi * state.epsilon, cfg.sigma_reset),
            OutcomeKind::Direction => {
                let ls = search(
                    oracle,
                    &state.x,
                    state.f,
                    &state.gradient,
                    &outcome.d,
                    outcome.y.gy.norm_squared(),
                    p_k,
                    &cfg,
                    &mut state.counters,
                )
                .map_err(wrap)?;
                alpha = ls.alpha;
                step_kind = Some(ls.kind);
                if ls.kind != StepKind::NullStep {
                    accepted = Some(
                        perturb(
                            oracle,
                            state.f,
                            &state.gradient,
                            &outcome.d,
                            gy_norm,
                            state.epsilon,
                            &ls,
                            &cfg,
                            &mut state.counters,
                            &mut rng,
                        )
                        .map_err(wrap)?,
                    );
                }
                let sigma = if alpha >= cfg.alpha_lo {
                    state.sigma
                } else {
                    cfg.iota * state.sigma
                };
                (state.epsilon, sigma)
            }
        };

        // The reset test consumes the metric that produced the direction,
        // so it runs before the metric update.
        let reset = should_reset(&outcome.d, &state.hessian, alpha, cfg.xi, cfg.alpha_lo);
        let mut step_norm = 0.0;
        if let Some(step) = accepted {
            let s = &outcome.d * alpha;
            let grad_diff = &step.gradient - &state.gradient;
            let (v, _) = damped_pair(&s, &grad_diff, cfg.phi_lo, cfg.phi_hi).map_err(wrap)?;
            state.hessian.update(&s, &v).map_err(wrap)?;
            step_norm = (&step.x - &state.x).norm();
            state.x = step.x;
            state.f = step.f;
            state.gradient = step.gradient;
        }
        state.epsilon = eps_next;
        state.sigma = sigma_next;
        state.last_alpha = alpha;

        sampling::update(
            &mut state.samples,
            &mut state.next_point_id,
            &state.x,
            &state.gradient,
            birth,
            state.epsilon,
            p_cap,
            cfg.sample_add,
            reset,
            oracle,
            &mut state.counters,
            &mut rng,
        )
        .map_err(wrap)?;

        agg = if cfg.mode == Mode::InexactAgg && alpha == 0.0 {
            let first_new = state
                .samples
                .iter()
                .position(|p| p.birth == birth)
                .unwrap_or(state.samples.len());
            let new_points = &state.samples[first_new..];
            let matrix = build_aggregated(&state.gradient, &outcome.y.gy, new_points);
            let mut shadow = GradientMatrix::new(n);
            shadow.push(state.gradient.clone(), ColumnOrigin::CurrentIterate);
            for j in 0..g.len() {
                shadow.push(g.column(j).clone(), g.origin(j).clone());
            }
            for p in new_points {
                shadow.push(p.gradient.clone(), ColumnOrigin::Sampled { point_id: p.id });
            }
            Some(AggregationState {
                last_y: outcome.y.y.clone(),
                last_gy: outcome.y.gy.clone(),
                matrix,
                shadow,
            })
        } else {
            None
        };

        state.iteration = k + 1;
        let record = IterationRecord {
            iteration: k,
            outcome: outcome.kind,
            step_kind,
            alpha,
            epsilon_before,
            epsilon_after: state.epsilon,
            sigma_before,
            sigma_after: state.sigma,
            f_before,
            f_after: state.f,
            step_norm,
            d_norm,
            gy_norm,
            wgy_norm: outcome.y.wgy.norm(),
            qp_iterations: outcome.qp_iterations,
            columns: g.len(),
            used_aggregation: use_agg,
            sample_size: state.samples.len() - 1,
            aggregation: trace,
        };
        observe(&record);

        if let Some(reason) = check_termination(
            &outcome.y.gy,
            &outcome.y.wgy,
            state.epsilon,
            state.f,
            clock.elapsed(),
            state.iteration,
            &cfg,
        ) {
            return Ok(finish(reason, state, clock));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::Evaluation;
    use nalgebra::dvector;

    #[test]
    fn termination_ranks_objective_then_stationarity_then_clocks() {
        let config = SolverConfig::default();
        let tiny = dvector![5e-5, 0.0];
        let small = dvector![9e-5, 0.0];
        let second = Duration::from_secs(1);

        let reason = check_termination(&tiny, &small, 1e-4, 1.0, second, 3, &config);
        assert_eq!(reason, Some(TerminationReason::Stationary));

        let reason = check_termination(&tiny, &small, 1e-3, 1.0, second, 3, &config);
        assert_eq!(reason, None);

        let targeted = SolverConfig {
            f_tol: Some(1e-3),
            ..SolverConfig::default()
        };
        let big = dvector![5.0, 0.0];
        let reason = check_termination(&big, &big, 1.0, 9e-4, second, 3, &targeted);
        assert_eq!(reason, Some(TerminationReason::FTolReached));

        let timed = SolverConfig {
            time_limit: Some(0.5),
            ..SolverConfig::default()
        };
        let reason = check_termination(&big, &big, 1.0, 1.0, second, 3, &timed);
        assert_eq!(reason, Some(TerminationReason::TimeLimit));

        let capped = SolverConfig {
            max_iters: Some(3),
            ..SolverConfig::default()
        };
        let reason = check_termination(&big, &big, 1.0, 1.0, second, 3, &capped);
        assert_eq!(reason, Some(TerminationReason::IterLimit));
    }

    #[test]
    fn aggregated_matrix_layout() {
        let grad = dvector![1.0, 2.0];
        let gy = dvector![0.5, 0.5];

        let g = build_aggregated(&grad, &gy, &[]);
        assert_eq!(g.len(), 2);
        assert_eq!(*g.origin(0), ColumnOrigin::CurrentIterate);
        assert_eq!(*g.origin(1), ColumnOrigin::Aggregated);

        // A coincidental match between the gradient and the aggregation
        // vector is kept as two columns.
        let g = build_aggregated(&grad, &grad, &[]);
        assert_eq!(g.len(), 2);
        assert_eq!(g.column(0), g.column(1));

        let points: Vec<SamplePoint> = (0..3)
            .map(|i| SamplePoint {
                id: 10 + i,
                x: dvector![i as f64, 0.0],
                gradient: dvector![i as f64, 1.0],
                birth: 4,
            })
            .collect();
        let g = build_aggregated(&grad, &gy, &points);
        assert_eq!(g.len(), 5);
        assert_eq!(*g.origin(2), ColumnOrigin::Sampled { point_id: 10 });
        assert_eq!(*g.origin(4), ColumnOrigin::Sampled { point_id: 12 });
    }

    #[test]
    fn expansion_weights_are_exact() {
        let out = expand_aggregated_dual(&[0.2, 0.3, 0.5], &[0.5, 0.5]);
        assert_eq!(out, vec![0.2, 0.15, 0.15, 0.5]);
        assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e-15);

        let out = expand_aggregated_dual(&[1.0, 0.0], &[0.25, 0.25, 0.5]);
        assert_eq!(out, vec![1.0, 0.0, 0.0, 0.0]);

        let out = expand_aggregated_dual(&[0.0, 1.0], &[0.25, 0.25, 0.5]);
        assert_eq!(out, vec![0.0, 0.25, 0.25, 0.5]);
    }

    struct Flat;

    impl ObjectiveOracle for Flat {
        fn dimension(&self) -> usize {
            2
        }
        fn evaluate(&self, _x: &DVector<f64>) -> Evaluation {
            Evaluation {
                value: 1.0,
                gradient: dvector![0.0, 0.0],
                differentiable: true,
            }
        }
    }

    #[test]
    fn zero_gradient_stops_before_any_iteration() {
        let report = minimize(&Flat, &SolverConfig::default(), &dvector![1.0, 2.0]).unwrap();
        assert_eq!(report.termination, TerminationReason::ZeroGradient);
        assert_eq!(report.iterations, 0);
        assert_eq!(report.final_f, 1.0);
        assert_eq!(report.counters.qp_iters, 0);
    }

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
    fn isotropic_quadratic_lands_exactly_in_one_step() {
        // d = -W grad = -x, so the first unit step hits the minimizer and
        // the zero-gradient check fires at the top of the next iteration.
        let report = minimize(&Quadratic, &SolverConfig::default(), &dvector![1.0, 1.0]).unwrap();
        assert_eq!(report.termination, TerminationReason::ZeroGradient);
        assert_eq!(report.iterations, 1);
        assert_eq!(report.final_f, 0.0);
        assert_eq!((report.counters.funcs, report.counters.grads), (2, 2));
    }

    struct Anisotropic;

    impl ObjectiveOracle for Anisotropic {
        fn dimension(&self) -> usize {
            2
        }
        fn evaluate(&self, x: &DVector<f64>) -> Evaluation {
            Evaluation {
                value: x[0] * x[0] + 0.25 * x[1] * x[1],
                gradient: dvector![2.0 * x[0], 0.5 * x[1]],
                differentiable: true,
            }
        }
    }

    #[test]
    fn quadratic_descends_monotonically_to_stationarity() {
        let config = SolverConfig {
            seed: 11,
            ..SolverConfig::default()
        };
        let mut records = Vec::new();
        let report =
            minimize_with_observer(&Anisotropic, &config, &dvector![1.0, 1.0], &mut |r| {
                records.push(r.clone())
            })
            .unwrap();
        assert_eq!(report.termination, TerminationReason::Stationary);
        assert!(report.final_f <= 1e-6, "final f = {}", report.final_f);
        assert!(!records.is_empty());
        for r in &records {
            assert!(r.f_after <= r.f_before, "objective rose at {}", r.iteration);
            assert!(
                r.epsilon_after == r.epsilon_before
                    || r.epsilon_after == config.psi * r.epsilon_before,
                "radius moved off schedule at {}",
                r.iteration
            );
        }
        assert_eq!(records.len() as u64, report.iterations);
    }

    #[test]
    fn start_below_the_objective_target_returns_at_once() {
        let config = SolverConfig {
            f_tol: Some(10.0),
            ..SolverConfig::default()
        };
        let report = minimize(&Quadratic, &config, &dvector![1.0, 1.0]).unwrap();
        assert_eq!(report.termination, TerminationReason::FTolReached);
        assert_eq!(report.iterations, 0);
        assert_eq!((report.counters.funcs, report.counters.grads), (1, 1));
    }
}
