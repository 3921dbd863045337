//! Sample-set maintenance between iterations: uniform draws from the
//! sampling ball, the reset-versus-augment test, and the retention and
//! eviction rules that keep the set inside the current ball and under its
//! size cap.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::core::{
    evaluate, Counters, EvalUsage, ObjectiveOracle, SamplePoint, SolverError, MAX_SAMPLE_REDRAWS,
};
use crate::qp::MetricOps;

/// A point drawn uniformly from the closed ball of the given radius around
/// the origin: spherically symmetric direction, radius scaled by u^(1/n).
pub fn uniform_ball(n: usize, radius: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let mut direction = DVector::zeros(n);
    let mut norm = 0.0;
    while norm <= 1e-12 {
        direction = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        norm = direction.norm();
    }
    let u: f64 = rng.random();
    direction * (radius * u.powf(1.0 / n as f64) / norm)
}

/// Whether the sample set restarts from scratch after this step: true when
/// the direction carries genuine curvature (d^T H d at least xi |d|^2) and
/// the step was not negligible.
pub fn should_reset(
    d: &DVector<f64>,
    metric: &dyn MetricOps,
    alpha: f64,
    xi: f64,
    alpha_lo: f64,
) -> bool {
    metric.hnorm_sq(d) >= xi * d.norm_squared() && alpha >= alpha_lo
}

/// Rebuilds the sample set around the next iterate. On a reset the set
/// becomes just the iterate. Otherwise points inside the new ball are
/// retained, a fresh batch is drawn (redrawn wholesale, up to a cap, if any
/// point lands on a flagged kink), and the eldest points are evicted once
/// the set exceeds `cap` (the iterate itself is never evicted).
#[allow(clippy::too_many_arguments)]
pub fn update(
    samples: &mut Vec<SamplePoint>,
    next_id: &mut u64,
    x_next: &DVector<f64>,
    grad_next: &DVector<f64>,
    birth: u64,
    eps_next: f64,
    cap: usize,
    draw_count: usize,
    reset: bool,
    oracle: &dyn ObjectiveOracle,
    counters: &mut Counters,
    rng: &mut ChaCha8Rng,
) -> Result<(), SolverError> {
    // The next iterate keeps its identity when it is already a member (a
    // null step), so warm starts can map dual weights across iterations.
    let existing = samples.iter().position(|p| p.x == *x_next);
    let head = match existing {
        Some(i) => samples.remove(i),
        None => SamplePoint {
            id: {
                let id = *next_id;
                *next_id += 1;
                id
            },
            x: x_next.clone(),
            gradient: grad_next.clone(),
            birth,
        },
    };

    if reset {
        samples.clear();
        samples.push(head);
        return Ok(());
    }

    let mut rebuilt = vec![head];
    for point in samples.drain(..) {
        if (&point.x - x_next).norm() <= eps_next {
            rebuilt.push(point);
        }
    }

    let n = x_next.len();
    let mut drawn = Vec::with_capacity(draw_count);
    'redraw: for attempt in 0.. {
        if attempt >= MAX_SAMPLE_REDRAWS {
            return Err(SolverError::SampleRedrawFailure);
        }
        drawn.clear();
        for _ in 0..draw_count {
            let x = x_next + uniform_ball(n, eps_next, rng);
            let eval = evaluate(oracle, &x, EvalUsage::Gradient, counters)?;
            if !eval.differentiable {
                continue 'redraw;
            }
            drawn.push((x, eval.gradient));
        }
        break;
    }
    for (x, gradient) in drawn {
        rebuilt.push(SamplePoint {
            id: {
                let id = *next_id;
                *next_id += 1;
                id
            },
            x,
            gradient,
            birth,
        });
    }

    // Evict eldest first (smallest birth, then earliest position), never the
    // iterate at position 0.
    let excess = (rebuilt.len() - 1).saturating_sub(cap);
    if excess > 0 {
        let mut order: Vec<usize> = (1..rebuilt.len()).collect();
        order.sort_by_key(|&i| (rebuilt[i].birth, i));
        let evict: std::collections::HashSet<usize> = order[..excess].iter().copied().collect();
        let mut kept = Vec::with_capacity(rebuilt.len() - excess);
        for (i, p) in rebuilt.into_iter().enumerate() {
            if i == 0 || !evict.contains(&i) {
                kept.push(p);
            }
        }
        rebuilt = kept;
    }
    *samples = rebuilt;
    Ok(())
}
