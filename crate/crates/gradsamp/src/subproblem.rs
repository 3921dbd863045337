//! Direction-finding layer over the dual QP solver. In the inexact regimes
//! the dual iteration is interrupted on a fixed cadence and interrogated
//! with duality-gap certificates that either accept an early direction or
//! detect that the sampling radius should shrink; the exact regime runs the
//! QP to a tight KKT residual and classifies the optimum the same way.

use nalgebra::DVector;

use crate::core::{GradientMatrix, Mode, SolverConfig, SolverError};
use crate::qp::{
    exact_solve, solve_dual, CallbackDecision, DualIterate, MetricOps, QpStatus,
};

/// Per-run constants consumed by the certificate checks.
#[derive(Clone, Debug)]
pub struct CertificateInputs {
    pub tau: f64,
    pub sigma: f64,
    pub nu: f64,
    pub kappa: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub grad0: DVector<f64>,
    /// Dual value at this run's actual starting iterate.
    pub theta0: f64,
}

/// How a subproblem run resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutcomeKind {
    /// The hull norm is already small against the sampling radius.
    RadiusShrink,
    /// A certified descent direction was accepted.
    Direction,
}

#[derive(Clone, Debug)]
pub struct SubproblemOutcome {
    pub kind: OutcomeKind,
    /// Best dual iterate at acceptance.
    pub y: DualIterate,
    /// Search direction -W G y.
    pub d: DVector<f64>,
    pub qp_iterations: u64,
}

/// Which gap certificate accepted, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GapStatus {
    Gap1,
    Gap2,
    Neither,
}

/// Certificate slack factor sigma^2 + 2 sigma.
pub fn compute_tau(sigma: f64) -> f64 {
    sigma * sigma + 2.0 * sigma
}

/// Required dual progress fraction for the second gap certificate. Infinite
/// when the best primal value is nonnegative or equals theta0 (either way
/// the certificate degenerates to requiring a closed gap).
pub fn compute_lambda(theta0: f64, q_best: f64, sigma: f64, rho: f64) -> f64 {
    if q_best >= 0.0 || theta0 >= q_best {
        return f64::INFINITY;
    }
    f64::max(1.0 - compute_tau(sigma) / (theta0 / q_best - 1.0), rho)
}

/// Radius test: both the hull point and its preimage under W are already
/// within nu epsilon of zero.
pub fn check_radius(y: &DualIterate, nu: f64, epsilon: f64) -> bool {
    f64::max(y.wgy.norm(), y.gy.norm()) <= nu * epsilon
}

/// Descent test: -grad0^T W Gy <= -kappa (Gy)^T W (Gy).
pub fn check_descent(grad0: &DVector<f64>, y: &DualIterate, kappa: f64) -> bool {
    -grad0.dot(&y.wgy) <= -kappa * y.wnorm_sq()
}

/// Gap certificates, first one taking precedence: the primal-dual gap is
/// small against the primal value itself, or the dual has covered a lambda
/// fraction of the initial primal-dual gap.
pub fn check_gap(q_best: f64, theta_best: f64, theta0: f64, tau: f64, lambda: f64) -> GapStatus {
    if q_best - theta_best <= tau * (-q_best) {
        return GapStatus::Gap1;
    }
    let gap0 = q_best - theta0;
    let second = if lambda.is_infinite() {
        gap0 <= 0.0
    } else {
        theta_best - theta0 >= lambda * gap0
    };
    if second {
        GapStatus::Gap2
    } else {
        GapStatus::Neither
    }
}

/// Per-call inputs that vary across outer iterations.
#[derive(Clone, Debug)]
pub struct SubproblemSettings {
    pub mode: Mode,
    pub sigma: f64,
    pub epsilon: f64,
    /// Dual warm start; all weight on column 0 when absent.
    pub warm_start: Option<Vec<f64>>,
}

/// Iteration budget before a run is declared stalled.
pub fn stall_cap(columns: usize) -> u64 {
    50 * columns as u64 + 1000
}

/// Runs the direction-finding subproblem on the matrix `g` whose column 0
/// holds the gradient at the current iterate.
pub fn run(
    g: &GradientMatrix,
    metric: &dyn MetricOps,
    settings: &SubproblemSettings,
    config: &SolverConfig,
) -> Result<SubproblemOutcome, SolverError> {
    let columns = g.len();
    let cap = stall_cap(columns);
    let y0 = match &settings.warm_start {
        Some(y) => DualIterate::new(y.clone(), g, metric)?,
        None => DualIterate::vertex(0, g, metric)?,
    };

    if settings.mode == Mode::Exact {
        let run = exact_solve(g, metric, Some(y0), config.exact_kkt_tol, cap)?;
        let kind = if check_radius(&run.best_dual, config.nu, settings.epsilon) {
            OutcomeKind::RadiusShrink
        } else {
            OutcomeKind::Direction
        };
        let d = -&run.best_dual.wgy;
        return Ok(SubproblemOutcome {
            kind,
            y: run.best_dual,
            d,
            qp_iterations: run.iterations,
        });
    }

    let inputs = CertificateInputs {
        tau: compute_tau(settings.sigma),
        sigma: settings.sigma,
        nu: config.nu,
        kappa: config.kappa,
        rho: config.rho,
        epsilon: settings.epsilon,
        grad0: g.column(0).clone(),
        theta0: y0.theta,
    };
    // First certificate check after ceil(columns/4) QP iterations, then
    // every fourth, plus always at internal convergence.
    let first_check = (columns as u64).div_ceil(4);
    let mut outcome: Option<OutcomeKind> = None;
    let mut callback = |run: &crate::qp::QpRun| {
        let due = run.iterations >= first_check && (run.iterations - first_check) % 4 == 0;
        if !due && run.status != QpStatus::Converged {
            return CallbackDecision::Continue;
        }
        if check_radius(&run.best_dual, inputs.nu, inputs.epsilon) {
            outcome = Some(OutcomeKind::RadiusShrink);
            return CallbackDecision::Stop;
        }
        let q_best = run.best_primal.q;
        let lambda = compute_lambda(inputs.theta0, q_best, inputs.sigma, inputs.rho);
        let gap = check_gap(q_best, run.best_dual.theta, inputs.theta0, inputs.tau, lambda);
        if gap != GapStatus::Neither && check_descent(&inputs.grad0, &run.best_dual, inputs.kappa)
        {
            outcome = Some(OutcomeKind::Direction);
            return CallbackDecision::Stop;
        }
        CallbackDecision::Continue
    };
    let run = solve_dual(g, metric, y0, cap, &mut callback)?;

    let kind = match (outcome, run.status) {
        (Some(kind), _) => kind,
        // Converged without a firing certificate only happens in floating-
        // point corners (e.g. q_best rounding barely positive at an exact
        // optimum); the solution is exact, so classify it as such.
        (None, QpStatus::Converged) => {
            if check_radius(&run.best_dual, inputs.nu, inputs.epsilon) {
                OutcomeKind::RadiusShrink
            } else {
                OutcomeKind::Direction
            }
        }
        (None, _) => return Err(SolverError::SubproblemStall(run.iterations)),
    };
    let d = -&run.best_dual.wgy;
    Ok(SubproblemOutcome {
        kind,
        y: run.best_dual,
        d,
        qp_iterations: run.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::ColumnOrigin;
    use crate::qp::{reference_min_norm, DenseMetric, IdentityMetric};
    use approx::assert_relative_eq;
    use nalgebra::{dvector, DMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix_of(cols: Vec<DVector<f64>>) -> GradientMatrix {
        let mut g = GradientMatrix::new(cols[0].len());
        for (i, c) in cols.into_iter().enumerate() {
            let origin = if i == 0 {
                ColumnOrigin::CurrentIterate
            } else {
                ColumnOrigin::Sampled { point_id: i as u64 }
            };
            g.push(c, origin);
        }
        g
    }

    fn random_instance(
        n: usize,
        p: usize,
        rng: &mut ChaCha8Rng,
    ) -> (GradientMatrix, DenseMetric) {
        let cols = (0..p)
            .map(|_| DVector::from_fn(n, |_, _| 4.0 * (rng.random::<f64>() - 0.5)))
            .collect();
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let w = DMatrix::identity(n, n) * 0.5 + (&a * a.transpose()) * (1.0 / n as f64);
        (matrix_of(cols), DenseMetric::from_w(w))
    }

    fn settings(mode: Mode, sigma: f64, epsilon: f64) -> SubproblemSettings {
        SubproblemSettings {
            mode,
            sigma,
            epsilon,
            warm_start: None,
        }
    }

    #[test]
    fn tau_formula() {
        assert_relative_eq!(compute_tau(0.1), 0.21, epsilon = 1e-15);
        assert_relative_eq!(compute_tau(10.0), 120.0, epsilon = 1e-12);
        assert_relative_eq!(compute_tau(2f64.sqrt() - 1.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lambda_branches() {
        assert_eq!(compute_lambda(-1.0, 0.5, 0.5, 0.01), f64::INFINITY);
        assert_relative_eq!(
            compute_lambda(-10.0, -1.0, 0.5, 0.01),
            1.0 - 1.25 / 9.0,
            epsilon = 1e-12
        );
        assert_eq!(compute_lambda(-1.01, -1.0, 0.5, 0.01), 0.01);
        assert_eq!(compute_lambda(-1.0, -1.0, 0.5, 0.01), f64::INFINITY);
    }

    #[test]
    fn radius_check_uses_the_larger_norm() {
        let zero = DualIterate::new(
            vec![0.5, 0.5],
            &matrix_of(vec![dvector![1.0], dvector![-1.0]]),
            &IdentityMetric,
        )
        .unwrap();
        assert!(check_radius(&zero, 1.0, 1.0));

        // |Gy| = 2 while |WGy| = 0.1: the larger norm decides.
        let metric = DenseMetric::from_w(DMatrix::from_element(1, 1, 0.05));
        let spread = DualIterate::vertex(0, &matrix_of(vec![dvector![2.0]]), &metric).unwrap();
        assert!(!check_radius(&spread, 1.0, 1.0));

        let boundary =
            DualIterate::vertex(0, &matrix_of(vec![dvector![0.5]]), &IdentityMetric).unwrap();
        assert!(check_radius(&boundary, 1.0, 0.5));
    }

    #[test]
    fn descent_check_branches() {
        let single = matrix_of(vec![dvector![3.0, -1.0]]);
        let y = DualIterate::vertex(0, &single, &IdentityMetric).unwrap();
        assert!(check_descent(&dvector![3.0, -1.0], &y, 0.5));

        // Hull direction orthogonal to the gradient fails for any kappa > 0.
        let ortho = matrix_of(vec![dvector![0.0, 1.0]]);
        let y = DualIterate::vertex(0, &ortho, &IdentityMetric).unwrap();
        assert!(!check_descent(&dvector![1.0, 0.0], &y, 1e-4));

        let null = matrix_of(vec![dvector![1.0], dvector![-1.0]]);
        let y = DualIterate::new(vec![0.5, 0.5], &null, &IdentityMetric).unwrap();
        assert!(check_descent(&dvector![1.0], &y, 1e-4));
    }

    #[test]
    fn gap_certificates_in_priority_order() {
        assert_eq!(check_gap(-1.0, -1.1, -3.0, 0.21, 0.4), GapStatus::Gap1);
        assert_eq!(check_gap(-1.0, -2.0, -3.0, 0.21, 0.4), GapStatus::Gap2);
        assert_eq!(
            check_gap(1.0, -1.0, -3.0, 0.21, f64::INFINITY),
            GapStatus::Neither
        );
    }

    #[test]
    fn single_column_accepts_at_the_first_check() {
        let g = matrix_of(vec![dvector![5.0, 0.0]]);
        let config = SolverConfig::default();
        let out = run(
            &g,
            &IdentityMetric,
            &settings(Mode::Inexact, 10.0, 1e-6),
            &config,
        )
        .unwrap();
        assert_eq!(out.kind, OutcomeKind::Direction);
        assert_eq!(out.qp_iterations, 1);
        assert_eq!(out.d, dvector![-5.0, 0.0]);
    }

    #[test]
    fn cancelling_columns_shrink_the_radius() {
        let g = matrix_of(vec![dvector![1.0], dvector![-1.0]]);
        let config = SolverConfig::default();
        let out = run(
            &g,
            &IdentityMetric,
            &settings(Mode::Inexact, 10.0, 1.0),
            &config,
        )
        .unwrap();
        assert_eq!(out.kind, OutcomeKind::RadiusShrink);
        assert!(out.y.gy.norm() <= 1.0);
    }

    #[test]
    fn exact_mode_matches_the_reference_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let config = SolverConfig::default();
        for _ in 0..30 {
            let n = 1 + rng.random_range(0..5usize);
            let p = 1 + rng.random_range(0..6usize);
            let (g, metric) = random_instance(n, p, &mut rng);
            let out = run(&g, &metric, &settings(Mode::Exact, 10.0, 1e-9), &config).unwrap();
            let reference = reference_min_norm(&g, &metric).unwrap();
            assert_relative_eq!(
                out.y.wnorm_sq().sqrt(),
                reference.wnorm_sq().sqrt(),
                epsilon = 1e-7,
                max_relative = 1e-7
            );
        }
    }

    #[test]
    fn accepted_directions_are_certified_and_descending() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let config = SolverConfig::default();
        let sigma = 0.3;
        let bound = (1.0 + sigma) * (1.0 + sigma);
        let mut directions = 0;
        for _ in 0..50 {
            let n = 2 + rng.random_range(0..4usize);
            let p = 2 + rng.random_range(0..5usize);
            let (g, metric) = random_instance(n, p, &mut rng);
            let out = run(&g, &metric, &settings(Mode::Inexact, sigma, 1e-8), &config).unwrap();
            if out.kind != OutcomeKind::Direction {
                continue;
            }
            directions += 1;
            let theta_star = -0.5 * reference_min_norm(&g, &metric).unwrap().wnorm_sq();
            assert!(
                out.y.theta >= bound * theta_star - 1e-9,
                "dual value {} below the certified fraction of {}",
                out.y.theta,
                theta_star
            );
            let dhd = out.y.wnorm_sq();
            assert!(g.column(0).dot(&out.d) <= -config.kappa * dhd + 1e-9);
        }
        assert!(directions >= 40, "only {directions} direction exits");
    }
}
