//! Weak-Wolfe line search with a backtracking-Armijo fallback and null-step
//! truncation, plus the iterate perturbation that keeps accepted points off
//! flagged kinks while preserving the accepted decrease.

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;

use crate::core::{
    bill, Counters, EvalUsage, Evaluation, ObjectiveOracle, SolverConfig, SolverError,
    MAX_LINE_SEARCH_ITERS, MAX_PERTURB_ATTEMPTS,
};
use crate::sampling::uniform_ball;

/// How the line search exited.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    /// Stepsize truncated to zero because the sample set can still grow.
    NullStep,
    /// Both the sufficient-decrease and curvature conditions hold.
    ArmijoWolfe,
    /// Sufficient decrease alone, accepted below the minimal stepsize with a
    /// full sample set.
    ArmijoOnly,
}

/// Accepted stepsize and the oracle data at the trial point.
#[derive(Clone, Debug)]
pub struct LineSearchResult {
    pub alpha: f64,
    pub kind: StepKind,
    /// x + alpha d; equals x for a null step.
    pub trial_x: DVector<f64>,
    /// Evaluation at the trial point; absent for a null step and for the
    /// degenerate d = 0 early exit.
    pub eval: Option<Evaluation>,
    /// Whether the trial gradient has already been charged to the counters.
    pub(crate) grad_billed: bool,
}

/// Strict sufficient-decrease test: f0 - f_trial must exceed
/// eta_lo * alpha * max{|d|^2, |Gy|^2}.
pub fn armijo_holds(
    f0: f64,
    f_trial: f64,
    alpha: f64,
    d_norm_sq: f64,
    gy_norm_sq: f64,
    eta_lo: f64,
) -> bool {
    f0 - f_trial > eta_lo * alpha * f64::max(d_norm_sq, gy_norm_sq)
}

/// Curvature test: the directional derivative at the trial point must have
/// risen to at least eta_hi times its value at the base point.
pub fn curvature_holds(
    grad_trial: &DVector<f64>,
    d: &DVector<f64>,
    grad0: &DVector<f64>,
    eta_hi: f64,
) -> bool {
    grad_trial.dot(d) >= eta_hi * grad0.dot(d)
}

/// Bracketing line search along d. Starts at alpha_init inside [0, alpha_hi]
/// and bisects by gamma: a failed decrease shrinks the upper end, a failed
/// curvature check raises the lower end. Once alpha falls below alpha_lo the
/// result is a null step while the sample set can still grow; with a full
/// set the bracket restarts from zero and decrease alone is accepted.
pub fn search(
    oracle: &dyn ObjectiveOracle,
    x: &DVector<f64>,
    f0: f64,
    grad0: &DVector<f64>,
    d: &DVector<f64>,
    gy_norm_sq: f64,
    p_current: usize,
    config: &SolverConfig,
    counters: &mut Counters,
) -> Result<LineSearchResult, SolverError> {
    if d.iter().all(|&c| c == 0.0) {
        // Degenerate direction: the driver routes this around the search;
        // the contract returns the initial stepsize untouched.
        return Ok(LineSearchResult {
            alpha: config.alpha_init,
            kind: StepKind::ArmijoWolfe,
            trial_x: x.clone(),
            eval: None,
            grad_billed: false,
        });
    }

    let p_cap = config.sample_cap_for(x.len());
    let d_norm_sq = d.norm_squared();
    let mut lower = 0.0;
    let mut upper = config.alpha_hi;
    let mut alpha = config.alpha_init;
    let mut armijo_only = false;

    for _ in 0..MAX_LINE_SEARCH_ITERS {
        if alpha < config.alpha_lo && !armijo_only {
            if p_current < p_cap {
                return Ok(LineSearchResult {
                    alpha: 0.0,
                    kind: StepKind::NullStep,
                    trial_x: x.clone(),
                    eval: None,
                    grad_billed: false,
                });
            }
            armijo_only = true;
            lower = 0.0;
        }
        let trial_x = x + d * alpha;
        let eval = oracle.evaluate(&trial_x);
        bill(&eval, EvalUsage::Value, counters)?;
        if armijo_holds(f0, eval.value, alpha, d_norm_sq, gy_norm_sq, config.eta_lo) {
            if armijo_only {
                return Ok(LineSearchResult {
                    alpha,
                    kind: StepKind::ArmijoOnly,
                    trial_x,
                    eval: Some(eval),
                    grad_billed: false,
                });
            }
            if eval.differentiable {
                bill(&eval, EvalUsage::Gradient, counters)?;
                if curvature_holds(&eval.gradient, d, grad0, config.eta_hi) {
                    return Ok(LineSearchResult {
                        alpha,
                        kind: StepKind::ArmijoWolfe,
                        trial_x,
                        eval: Some(eval),
                        grad_billed: true,
                    });
                }
            }
            lower = alpha;
        } else {
            upper = alpha;
        }
        let next = (1.0 - config.gamma) * lower + config.gamma * upper;
        if next == alpha {
            // The bracket has collapsed to float resolution: the same trial
            // would repeat forever. With room left in the sample set this is
            // the null-step case; otherwise no acceptable step exists.
            if !armijo_only && p_current < p_cap {
                return Ok(LineSearchResult {
                    alpha: 0.0,
                    kind: StepKind::NullStep,
                    trial_x: x.clone(),
                    eval: None,
                    grad_billed: false,
                });
            }
            return Err(SolverError::LineSearchFailure);
        }
        alpha = next;
    }
    Err(SolverError::LineSearchFailure)
}

/// The accepted next iterate after perturbation.
#[derive(Clone, Debug)]
pub struct AcceptedStep {
    pub x: DVector<f64>,
    pub f: f64,
    pub gradient: DVector<f64>,
    pub perturbed: bool,
    /// Number of candidates sampled (zero when the trial point stands).
    pub attempts: u64,
}

/// Settles the next iterate after a nonzero step. The trial point stands
/// when it is off every flagged kink and satisfies the non-strict Wolfe
/// pair. Otherwise candidates are drawn from balls around the trial point
/// whose radius shrinks as 1/attempt; after `patience` rejections the
/// curvature half is waived and non-strict decrease alone suffices (the
/// displacement bound holds by construction of the radius).
#[allow(clippy::too_many_arguments)]
pub fn perturb(
    oracle: &dyn ObjectiveOracle,
    f0: f64,
    grad0: &DVector<f64>,
    d: &DVector<f64>,
    gy_norm: f64,
    epsilon: f64,
    ls: &LineSearchResult,
    config: &SolverConfig,
    counters: &mut Counters,
    rng: &mut ChaCha8Rng,
) -> Result<AcceptedStep, SolverError> {
    let alpha = ls.alpha;
    assert!(
        alpha > 0.0 && !d.iter().all(|&c| c == 0.0),
        "perturbation needs a genuine step; the driver keeps null steps in place"
    );
    let n = d.len();
    let d_norm = d.norm();
    let small = f64::min(d_norm, gy_norm);
    let big = f64::max(d_norm, gy_norm);
    let scale_sq = f64::max(d_norm * d_norm, gy_norm * gy_norm);
    let base_radius = f64::min(alpha, epsilon) * small;

    let mut cand_x = ls.trial_x.clone();
    let mut cand_eval = ls
        .eval
        .clone()
        .expect("a nonzero step carries its trial evaluation");
    let mut grad_billed = ls.grad_billed;
    let mut sampled = 0u64;

    for attempt in 1..=MAX_PERTURB_ATTEMPTS {
        if cand_eval.differentiable
            && f0 - cand_eval.value >= config.eta_lo * alpha * scale_sq
        {
            let accept = if attempt > config.perturb_patience {
                true
            } else {
                if !grad_billed {
                    bill(&cand_eval, EvalUsage::Gradient, counters)?;
                    grad_billed = true;
                }
                curvature_holds(&cand_eval.gradient, d, grad0, config.eta_hi)
            };
            if accept {
                if !grad_billed {
                    bill(&cand_eval, EvalUsage::Gradient, counters)?;
                }
                return Ok(AcceptedStep {
                    x: cand_x,
                    f: cand_eval.value,
                    gradient: cand_eval.gradient,
                    perturbed: sampled > 0,
                    attempts: sampled,
                });
            }
        }
        if attempt == MAX_PERTURB_ATTEMPTS {
            break;
        }
        let radius = base_radius / (attempt as f64 * big);
        cand_x = &ls.trial_x + uniform_ball(n, radius, rng);
        cand_eval = oracle.evaluate(&cand_x);
        bill(&cand_eval, EvalUsage::Value, counters)?;
        grad_billed = false;
        sampled += 1;
    }
    Err(SolverError::PerturbationFailure)
}
