//! Self-correcting damped BFGS metric pair. The solver maintains a Hessian
//! approximation H and its inverse W side by side, updated with a damped
//! difference vector chosen so every curvature pair keeps both eigenvalue
//! bounds under control. Also hosts the sufficient-decrease parameter
//! selection that ties the line-search slope to the metric's conditioning.

use nalgebra::{DMatrix, DVector};
use std::collections::VecDeque;

use crate::core::SolverError;
use crate::qp::MetricOps;

/// One limited-memory curvature pair plus the caches needed to apply H
/// without reconstructing it: `a = H_prev s` and `sa = s^T H_prev s`, where
/// `H_prev` is the metric built from the pairs stored before this one.
#[derive(Clone, Debug)]
struct CurvaturePair {
    s: DVector<f64>,
    v: DVector<f64>,
    sv: f64,
    a: DVector<f64>,
    sa: f64,
}

/// The (H, W) metric pair in either dense or limited-memory storage. Both
/// representations start from the identity and stay mutual inverses up to
/// rounding drift.
#[derive(Clone, Debug)]
pub struct HessianPair {
    form: PairForm,
}

#[derive(Clone, Debug)]
enum PairForm {
    Full {
        h: DMatrix<f64>,
        w: DMatrix<f64>,
    },
    Limited {
        dim: usize,
        capacity: usize,
        pairs: VecDeque<CurvaturePair>,
    },
}

impl HessianPair {
    /// Dense identity pair.
    pub fn identity(n: usize) -> Self {
        HessianPair {
            form: PairForm::Full {
                h: DMatrix::identity(n, n),
                w: DMatrix::identity(n, n),
            },
        }
    }

    /// Limited-memory pair keeping at most `capacity` curvature pairs.
    pub fn limited(n: usize, capacity: usize) -> Self {
        assert!(capacity > 0, "limited memory needs at least one pair");
        HessianPair {
            form: PairForm::Limited {
                dim: n,
                capacity,
                pairs: VecDeque::new(),
            },
        }
    }

    pub fn dim(&self) -> usize {
        match &self.form {
            PairForm::Full { h, .. } => h.nrows(),
            PairForm::Limited { dim, .. } => *dim,
        }
    }

    /// The dense matrices (H, W), when this pair stores them.
    pub fn dense(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        match &self.form {
            PairForm::Full { h, w } => Some((h, w)),
            PairForm::Limited { .. } => None,
        }
    }

    /// trace(H).
    pub fn trace(&self) -> f64 {
        match &self.form {
            PairForm::Full { h, .. } => h.trace(),
            PairForm::Limited { dim, pairs, .. } => {
                let mut t = *dim as f64;
                for p in pairs {
                    t += p.v.norm_squared() / p.sv - p.a.norm_squared() / p.sa;
                }
                t
            }
        }
    }

    /// ln det(H). For the limited form this telescopes over the update
    /// determinant ratio det(H') = det(H) sv / sa.
    pub fn ln_det(&self) -> Result<f64, SolverError> {
        match &self.form {
            PairForm::Full { h, .. } => {
                let chol = h.clone().cholesky().ok_or_else(|| {
                    SolverError::NumericalBreakdown("metric H lost positive definiteness".into())
                })?;
                Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
            }
            PairForm::Limited { pairs, .. } => {
                Ok(pairs.iter().map(|p| (p.sv / p.sa).ln()).sum())
            }
        }
    }

    /// Applies the BFGS update with step `s` and damped difference `v` to
    /// both H and W. Requires positive curvature s^T v and s^T H s.
    pub fn update(&mut self, s: &DVector<f64>, v: &DVector<f64>) -> Result<(), SolverError> {
        let sv = s.dot(v);
        if !(sv > 0.0) || !sv.is_finite() {
            return Err(SolverError::NumericalBreakdown(format!(
                "nonpositive curvature s^T v = {sv:.3e} in metric update"
            )));
        }
        match &mut self.form {
            PairForm::Full { h, w } => {
                let hs = &*h * s;
                let shs = s.dot(&hs);
                if !(shs > 0.0) || !shs.is_finite() {
                    return Err(SolverError::NumericalBreakdown(
                        "metric H lost positive definiteness".into(),
                    ));
                }
                h.ger(-1.0 / shs, &hs, &hs, 1.0);
                h.ger(1.0 / sv, v, v, 1.0);
                let wv = &*w * v;
                let vwv = v.dot(&wv);
                w.ger(-1.0 / sv, s, &wv, 1.0);
                w.ger(-1.0 / sv, &wv, s, 1.0);
                w.ger((1.0 + vwv / sv) / sv, s, s, 1.0);
                // Rank-two updates preserve symmetry exactly in arithmetic;
                // re-symmetrize to stop rounding from accumulating.
                symmetrize(h);
                symmetrize(w);
                Ok(())
            }
            PairForm::Limited {
                capacity, pairs, ..
            } => {
                let evicting = pairs.len() == *capacity;
                if evicting {
                    pairs.pop_front();
                }
                pairs.push_back(CurvaturePair {
                    s: s.clone(),
                    v: v.clone(),
                    sv,
                    a: DVector::zeros(s.len()),
                    sa: 1.0,
                });
                if evicting {
                    rebuild_caches(pairs)
                } else {
                    refresh_last_cache(pairs)
                }
            }
        }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// H x for the limited form: identity plus the cached rank-two corrections.
fn limited_apply_h(pairs: &VecDeque<CurvaturePair>, upto: usize, x: &DVector<f64>) -> DVector<f64> {
    let mut out = x.clone();
    for p in pairs.iter().take(upto) {
        out.axpy(p.v.dot(x) / p.sv, &p.v, 1.0);
        out.axpy(-p.a.dot(x) / p.sa, &p.a, 1.0);
    }
    out
}

fn refresh_last_cache(pairs: &mut VecDeque<CurvaturePair>) -> Result<(), SolverError> {
    let last = pairs.len() - 1;
    let a = limited_apply_h(pairs, last, &pairs[last].s);
    let sa = pairs[last].s.dot(&a);
    if !(sa > 0.0) || !sa.is_finite() {
        return Err(SolverError::NumericalBreakdown(
            "metric H lost positive definiteness".into(),
        ));
    }
    pairs[last].a = a;
    pairs[last].sa = sa;
    Ok(())
}

/// Evicting the oldest pair changes every later `H_prev`, so all caches are
/// recomputed in sequence.
fn rebuild_caches(pairs: &mut VecDeque<CurvaturePair>) -> Result<(), SolverError> {
    for i in 0..pairs.len() {
        let a = limited_apply_h(pairs, i, &pairs[i].s);
        let sa = pairs[i].s.dot(&a);
        if !(sa > 0.0) || !sa.is_finite() {
            return Err(SolverError::NumericalBreakdown(
                "metric H lost positive definiteness".into(),
            ));
        }
        pairs[i].a = a;
        pairs[i].sa = sa;
    }
    Ok(())
}

impl MetricOps for HessianPair {
    fn apply_w(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.form {
            PairForm::Full { w, .. } => w * x,
            PairForm::Limited { pairs, .. } => {
                // Two-loop recursion over (s, v) pairs with identity seed.
                let mut q = x.clone();
                let mut alphas = vec![0.0; pairs.len()];
                for (i, p) in pairs.iter().enumerate().rev() {
                    alphas[i] = p.s.dot(&q) / p.sv;
                    q.axpy(-alphas[i], &p.v, 1.0);
                }
                for (i, p) in pairs.iter().enumerate() {
                    let beta = p.v.dot(&q) / p.sv;
                    q.axpy(alphas[i] - beta, &p.s, 1.0);
                }
                q
            }
        }
    }

    fn apply_h(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.form {
            PairForm::Full { h, .. } => h * x,
            PairForm::Limited { pairs, .. } => limited_apply_h(pairs, pairs.len(), x),
        }
    }
}

/// Damped curvature vector: the smallest theta in [0, 1] such that
/// v = theta s + (1 - theta) y satisfies both self-correcting bounds
/// phi_lo <= s^T v / |s|^2 and |v|^2 / s^T v <= phi_hi. Returns (v, theta).
pub fn damped_pair(
    s: &DVector<f64>,
    y: &DVector<f64>,
    phi_lo: f64,
    phi_hi: f64,
) -> Result<(DVector<f64>, f64), SolverError> {
    let a = s.norm_squared();
    if !(a > 0.0) {
        return Err(SolverError::NumericalBreakdown(
            "zero step in curvature pair".into(),
        ));
    }
    let b = s.dot(y);

    // Lower bound: s^T v(theta) = b + theta (a - b) must reach phi_lo a.
    let theta_lower = if b >= phi_lo * a {
        0.0
    } else {
        ((phi_lo * a - b) / (a - b)).clamp(0.0, 1.0)
    };

    // Upper bound: |v(theta)|^2 - phi_hi s^T v(theta) <= 0. Convex in theta
    // and strictly negative at theta = 1, so the feasible set is an interval
    // ending at 1; bisect for its left edge from the feasible side.
    let excess = |theta: f64| -> f64 {
        let v = theta * s + (1.0 - theta) * y;
        v.norm_squared() - phi_hi * (theta * a + (1.0 - theta) * b)
    };
    let theta_upper = if excess(0.0) <= 0.0 {
        0.0
    } else {
        let mut lo = 0.0;
        let mut hi = 1.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if excess(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };

    let theta = theta_lower.max(theta_upper);
    let v = theta * s + (1.0 - theta) * y;
    Ok((v, theta))
}

/// Outputs of the sufficient-decrease parameter selection.
#[derive(Clone, Copy, Debug)]
pub struct SufficientDecreaseParams {
    pub c0: f64,
    /// exp(-c0/2); underflows to zero for realistic damping bounds.
    pub c1: f64,
    /// Smaller root of 1 - r + ln r = -c0.
    pub c2: f64,
    /// Larger root of 1 - r + ln r = -c0.
    pub c3: f64,
    pub mu_lo: f64,
    pub mu_hi: f64,
    /// Conditioning bound max(mu_hi / mu_lo, 1 / mu_lo); +inf when it
    /// overflows, which is the expected regime at default damping bounds.
    pub mu: f64,
    /// Selected sufficient-decrease slope with eta_lo * mu < 1.
    pub eta_lo: f64,
}

/// Larger root of 1 - r + ln r = -c0, i.e. r - ln r = 1 + c0 on [1, inf).
fn root_above_one(c0: f64) -> f64 {
    let target = 1.0 + c0;
    let mut lo = 1.0_f64;
    let mut hi = 2.0_f64;
    while hi - hi.ln() < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid - mid.ln() < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Smaller root, solved for t = ln r so the tiny root keeps full relative
/// accuracy: 1 + t - exp(t) = -c0 on t <= 0. Returns ln(c2).
fn ln_root_below_one(c0: f64) -> f64 {
    let mut lo = -(c0 + 2.0);
    let mut hi = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if 1.0 + mid - mid.exp() < -c0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Derives the largest safe sufficient-decrease slope from the starting
/// metric and the damping bounds. All intermediate quantities are kept in
/// logarithms: at default bounds c0 is around 2e8, where c1 and c2 underflow
/// and mu overflows, in which case the configured slope is kept as is.
pub fn select_sufficient_decrease(
    h0: &HessianPair,
    phi_lo: f64,
    phi_hi: f64,
    chi: f64,
    configured_eta_lo: f64,
) -> Result<SufficientDecreaseParams, SolverError> {
    let c0 = (h0.trace() - h0.ln_det()? + phi_hi - 1.0 - phi_lo.ln()) / (1.0 - chi);
    if !(c0 > 0.0) || !c0.is_finite() {
        return Err(SolverError::NumericalBreakdown(format!(
            "sufficient-decrease budget c0 = {c0:.3e} is not a positive finite number"
        )));
    }
    let c3 = root_above_one(c0);
    let ln_c2 = ln_root_below_one(c0);
    let ln_mu_lo = -c0 - c3.ln();
    let ln_mu_hi = -2.0 * ln_c2;
    let ln_mu = f64::max(ln_mu_hi - ln_mu_lo, -ln_mu_lo);
    let mu = ln_mu.exp();
    let eta_lo = if mu.is_finite() {
        f64::min(configured_eta_lo, 0.5 / mu)
    } else {
        configured_eta_lo
    };
    Ok(SufficientDecreaseParams {
        c0,
        c1: (-c0 / 2.0).exp(),
        c2: ln_c2.exp(),
        c3,
        mu_lo: ln_mu_lo.exp(),
        mu_hi: ln_mu_hi.exp(),
        mu,
        eta_lo,
    })
}
