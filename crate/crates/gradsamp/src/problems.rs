//! Benchmark objectives: ten classic chained nonsmooth test problems with
//! their standard starting points, and a seeded random convex
//! max-of-affine-plus-quadratic generator whose global minimizer is the
//! origin with a controlled number of active pieces.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::core::{tiebreak_argmax, Evaluation, ObjectiveOracle};

/// Oracles that can report how far a point sits from the nearest gradient
/// discontinuity (value-space gap of tied max pieces, or distance to an
/// absolute-value or fractional-power kink). Finite-difference tests re-draw
/// probe points whose margin is tiny.
pub trait KinkAware: ObjectiveOracle {
    fn kink_margin(&self, x: &DVector<f64>) -> f64;
}

fn sign_or_one(y: f64) -> f64 {
    if y >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Gap between the winning and runner-up values of a max expression.
fn top_gap(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::INFINITY;
    }
    let winner = tiebreak_argmax(values);
    let mut gap = f64::INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if i != winner {
            gap = gap.min(values[winner] - v);
        }
    }
    gap
}

/// The ten named nonsmooth minimization problems.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NamedProblem {
    MaxQ,
    MxHilb,
    ChainedLQ,
    ChainedCB3I,
    ChainedCB3II,
    ActiveFaces,
    BrownFunction2,
    ChainedMifflin2,
    ChainedCrescent1,
    ChainedCrescent2,
}

impl NamedProblem {
    pub const ALL: [NamedProblem; 10] = [
        NamedProblem::MaxQ,
        NamedProblem::MxHilb,
        NamedProblem::ChainedLQ,
        NamedProblem::ChainedCB3I,
        NamedProblem::ChainedCB3II,
        NamedProblem::ActiveFaces,
        NamedProblem::BrownFunction2,
        NamedProblem::ChainedMifflin2,
        NamedProblem::ChainedCrescent1,
        NamedProblem::ChainedCrescent2,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            NamedProblem::MaxQ => "MaxQ",
            NamedProblem::MxHilb => "MxHilb",
            NamedProblem::ChainedLQ => "ChainedLQ",
            NamedProblem::ChainedCB3I => "ChainedCB3_1",
            NamedProblem::ChainedCB3II => "ChainedCB3_2",
            NamedProblem::ActiveFaces => "ActiveFaces",
            NamedProblem::BrownFunction2 => "BrownFunction2",
            NamedProblem::ChainedMifflin2 => "ChainedMifflin2",
            NamedProblem::ChainedCrescent1 => "ChainedCrescent1",
            NamedProblem::ChainedCrescent2 => "ChainedCrescent2",
        }
    }

    pub fn parse(name: &str) -> Option<NamedProblem> {
        NamedProblem::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(name))
    }

    /// Problem instance at dimension n.
    pub fn instance(&self, n: usize) -> NamedInstance {
        assert!(n >= 2, "named problems need n >= 2");
        NamedInstance { kind: *self, n }
    }

    /// Conventional starting point.
    pub fn standard_start(&self, n: usize) -> DVector<f64> {
        match self {
            NamedProblem::MaxQ => DVector::from_fn(n, |i, _| {
                let v = (i + 1) as f64;
                if i + 1 <= n / 2 {
                    v
                } else {
                    -v
                }
            }),
            NamedProblem::MxHilb => DVector::from_element(n, 1.0),
            NamedProblem::ChainedLQ => DVector::from_element(n, -0.5),
            NamedProblem::ChainedCB3I | NamedProblem::ChainedCB3II => {
                DVector::from_element(n, 2.0)
            }
            NamedProblem::ActiveFaces => DVector::from_element(n, 1.0),
            NamedProblem::BrownFunction2 => {
                DVector::from_fn(n, |i, _| if i % 2 == 0 { -1.0 } else { 1.0 })
            }
            NamedProblem::ChainedMifflin2 => DVector::from_element(n, -1.0),
            NamedProblem::ChainedCrescent1 | NamedProblem::ChainedCrescent2 => {
                DVector::from_fn(n, |i, _| if i % 2 == 0 { -1.5 } else { 2.0 })
            }
        }
    }

    /// Known optimal value, when the literature gives one in closed form.
    pub fn optimal_value(&self, n: usize) -> Option<f64> {
        match self {
            NamedProblem::MaxQ
            | NamedProblem::MxHilb
            | NamedProblem::ActiveFaces
            | NamedProblem::BrownFunction2
            | NamedProblem::ChainedCrescent1
            | NamedProblem::ChainedCrescent2 => Some(0.0),
            NamedProblem::ChainedLQ => Some(-((n - 1) as f64) * 2f64.sqrt()),
            NamedProblem::ChainedCB3I | NamedProblem::ChainedCB3II => Some(2.0 * (n - 1) as f64),
            NamedProblem::ChainedMifflin2 => None,
        }
    }
}

impl std::fmt::Display for NamedProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A named problem at a fixed dimension.
#[derive(Clone, Debug)]
pub struct NamedInstance {
    kind: NamedProblem,
    n: usize,
}

impl NamedInstance {
    pub fn kind(&self) -> NamedProblem {
        self.kind
    }

    pub fn standard_start(&self) -> DVector<f64> {
        self.kind.standard_start(self.n)
    }
}

/// Value and both partial derivatives of |u|^(w^2 + 1). The exponent is at
/// least one, so the only genuine kink sits at u = 0 with w = 0; there the
/// positive branch is taken.
fn power_term(u: f64, w: f64) -> (f64, f64, f64) {
    let p = w * w + 1.0;
    if u == 0.0 {
        let du = if w == 0.0 { 1.0 } else { 0.0 };
        (0.0, du, 0.0)
    } else {
        let au = u.abs();
        let val = au.powf(p);
        let du = p * au.powf(p - 1.0) * u.signum();
        let dw = val * au.ln() * 2.0 * w;
        (val, du, dw)
    }
}

impl ObjectiveOracle for NamedInstance {
    fn dimension(&self) -> usize {
        self.n
    }

    fn evaluate(&self, x: &DVector<f64>) -> Evaluation {
        let n = self.n;
        let mut grad = DVector::zeros(n);
        let value = match self.kind {
            NamedProblem::MaxQ => {
                let vals: Vec<f64> = x.iter().map(|&v| v * v).collect();
                let i = tiebreak_argmax(&vals);
                grad[i] = 2.0 * x[i];
                vals[i]
            }
            NamedProblem::MxHilb => {
                let s = DVector::from_fn(n, |i, _| {
                    (0..n).map(|j| x[j] / (i + j + 1) as f64).sum::<f64>()
                });
                let vals: Vec<f64> = s.iter().map(|v| v.abs()).collect();
                let i = tiebreak_argmax(&vals);
                let sg = sign_or_one(s[i]);
                for j in 0..n {
                    grad[j] = sg / (i + j + 1) as f64;
                }
                vals[i]
            }
            NamedProblem::ChainedLQ => {
                let mut f = 0.0;
                for i in 0..n - 1 {
                    let linear = -x[i] - x[i + 1];
                    let quad = linear + x[i] * x[i] + x[i + 1] * x[i + 1] - 1.0;
                    let pick = tiebreak_argmax(&[linear, quad]);
                    grad[i] -= 1.0;
                    grad[i + 1] -= 1.0;
                    if pick == 1 {
                        grad[i] += 2.0 * x[i];
                        grad[i + 1] += 2.0 * x[i + 1];
                        f += quad;
                    } else {
                        f += linear;
                    }
                }
                f
            }
            NamedProblem::ChainedCB3I => {
                let mut f = 0.0;
                for i in 0..n - 1 {
                    let (u, w) = (x[i], x[i + 1]);
                    let quartic = u.powi(4) + w * w;
                    let shifted = (2.0 - u) * (2.0 - u) + (2.0 - w) * (2.0 - w);
                    let exp = 2.0 * (w - u).exp();
                    match tiebreak_argmax(&[quartic, shifted, exp]) {
                        0 => {
                            grad[i] += 4.0 * u * u * u;
                            grad[i + 1] += 2.0 * w;
                            f += quartic;
                        }
                        1 => {
                            grad[i] += 2.0 * (u - 2.0);
                            grad[i + 1] += 2.0 * (w - 2.0);
                            f += shifted;
                        }
                        _ => {
                            grad[i] -= exp;
                            grad[i + 1] += exp;
                            f += exp;
                        }
                    }
                }
                f
            }
            NamedProblem::ChainedCB3II => {
                let mut sums = [0.0; 3];
                for i in 0..n - 1 {
                    let (u, w) = (x[i], x[i + 1]);
                    sums[0] += u.powi(4) + w * w;
                    sums[1] += (2.0 - u) * (2.0 - u) + (2.0 - w) * (2.0 - w);
                    sums[2] += 2.0 * (w - u).exp();
                }
                let pick = tiebreak_argmax(&sums);
                for i in 0..n - 1 {
                    let (u, w) = (x[i], x[i + 1]);
                    match pick {
                        0 => {
                            grad[i] += 4.0 * u * u * u;
                            grad[i + 1] += 2.0 * w;
                        }
                        1 => {
                            grad[i] += 2.0 * (u - 2.0);
                            grad[i + 1] += 2.0 * (w - 2.0);
                        }
                        _ => {
                            let e = 2.0 * (w - u).exp();
                            grad[i] -= e;
                            grad[i + 1] += e;
                        }
                    }
                }
                sums[pick]
            }
            NamedProblem::ActiveFaces => {
                let t: f64 = -x.iter().sum::<f64>();
                let mut vals = Vec::with_capacity(n + 1);
                vals.push((t.abs() + 1.0).ln());
                for &v in x.iter() {
                    vals.push((v.abs() + 1.0).ln());
                }
                let i = tiebreak_argmax(&vals);
                if i == 0 {
                    let slope = -sign_or_one(t) / (t.abs() + 1.0);
                    grad.fill(slope);
                } else {
                    let j = i - 1;
                    grad[j] = sign_or_one(x[j]) / (x[j].abs() + 1.0);
                }
                vals[i]
            }
            NamedProblem::BrownFunction2 => {
                let mut f = 0.0;
                for i in 0..n - 1 {
                    let (u, w) = (x[i], x[i + 1]);
                    let (v1, du1, dw1) = power_term(u, w);
                    let (v2, dw2, du2) = power_term(w, u);
                    f += v1 + v2;
                    grad[i] += du1 + du2;
                    grad[i + 1] += dw1 + dw2;
                }
                f
            }
            NamedProblem::ChainedMifflin2 => {
                let mut f = 0.0;
                for i in 0..n - 1 {
                    let c = x[i] * x[i] + x[i + 1] * x[i + 1] - 1.0;
                    let sc = sign_or_one(c);
                    f += -x[i] + 2.0 * c + 1.75 * c.abs();
                    let coeff = 4.0 + 3.5 * sc;
                    grad[i] += -1.0 + coeff * x[i];
                    grad[i + 1] += coeff * x[i + 1];
                }
                f
            }
            NamedProblem::ChainedCrescent1 => {
                let mut sums = [0.0; 2];
                for i in 0..n - 1 {
                    let (u, w) = (x[i], x[i + 1]);
                    sums[0] += u * u + (w - 1.0) * (w - 1.0) + w - 1.0;
                    sums[1] += -u * u - (w - 1.0) * (w - 1.0) + w + 1.0;
                }
                let pick = tiebreak_argmax(&sums);
                let side = if pick == 0 { 1.0 } else { -1.0 };
                for i in 0..n - 1 {
                    let (u, w) = (x[i], x[i + 1]);
                    grad[i] += side * 2.0 * u;
                    grad[i + 1] += side * 2.0 * (w - 1.0) + 1.0;
                }
                sums[pick]
            }
            NamedProblem::ChainedCrescent2 => {
                let mut f = 0.0;
                for i in 0..n - 1 {
                    let (u, w) = (x[i], x[i + 1]);
                    let first = u * u + (w - 1.0) * (w - 1.0) + w - 1.0;
                    let second = -u * u - (w - 1.0) * (w - 1.0) + w + 1.0;
                    let pick = tiebreak_argmax(&[first, second]);
                    let side = if pick == 0 { 1.0 } else { -1.0 };
                    grad[i] += side * 2.0 * u;
                    grad[i + 1] += side * 2.0 * (w - 1.0) + 1.0;
                    f += if pick == 0 { first } else { second };
                }
                f
            }
        };
        Evaluation {
            value,
            gradient: grad,
            differentiable: true,
        }
    }
}

impl KinkAware for NamedInstance {
    fn kink_margin(&self, x: &DVector<f64>) -> f64 {
        let n = self.n;
        match self.kind {
            NamedProblem::MaxQ => {
                let vals: Vec<f64> = x.iter().map(|&v| v * v).collect();
                top_gap(&vals)
            }
            NamedProblem::MxHilb => {
                let s = DVector::from_fn(n, |i, _| {
                    (0..n).map(|j| x[j] / (i + j + 1) as f64).sum::<f64>()
                });
                let vals: Vec<f64> = s.iter().map(|v| v.abs()).collect();
                let i = tiebreak_argmax(&vals);
                top_gap(&vals).min(s[i].abs())
            }
            NamedProblem::ChainedLQ => (0..n - 1)
                .map(|i| (x[i] * x[i] + x[i + 1] * x[i + 1] - 1.0).abs())
                .fold(f64::INFINITY, f64::min),
            NamedProblem::ChainedCB3I => {
                let mut margin = f64::INFINITY;
                for i in 0..n - 1 {
                    let (u, w) = (x[i], x[i + 1]);
                    margin = margin.min(top_gap(&[
                        u.powi(4) + w * w,
                        (2.0 - u) * (2.0 - u) + (2.0 - w) * (2.0 - w),
                        2.0 * (w - u).exp(),
                    ]));
                }
                margin
            }
            NamedProblem::ChainedCB3II => {
                let mut sums = [0.0; 3];
                for i in 0..n - 1 {
                    let (u, w) = (x[i], x[i + 1]);
                    sums[0] += u.powi(4) + w * w;
                    sums[1] += (2.0 - u) * (2.0 - u) + (2.0 - w) * (2.0 - w);
                    sums[2] += 2.0 * (w - u).exp();
                }
                top_gap(&sums)
            }
            NamedProblem::ActiveFaces => {
                let t: f64 = -x.iter().sum::<f64>();
                let mut vals = Vec::with_capacity(n + 1);
                vals.push((t.abs() + 1.0).ln());
                for &v in x.iter() {
                    vals.push((v.abs() + 1.0).ln());
                }
                let i = tiebreak_argmax(&vals);
                let active_arg = if i == 0 { t } else { x[i - 1] };
                top_gap(&vals).min(active_arg.abs())
            }
            NamedProblem::BrownFunction2 => {
                x.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min)
            }
            NamedProblem::ChainedMifflin2 => (0..n - 1)
                .map(|i| (x[i] * x[i] + x[i + 1] * x[i + 1] - 1.0).abs())
                .fold(f64::INFINITY, f64::min),
            NamedProblem::ChainedCrescent1 => {
                let mut sums = [0.0; 2];
                for i in 0..n - 1 {
                    let (u, w) = (x[i], x[i + 1]);
                    sums[0] += u * u + (w - 1.0) * (w - 1.0) + w - 1.0;
                    sums[1] += -u * u - (w - 1.0) * (w - 1.0) + w + 1.0;
                }
                (sums[0] - sums[1]).abs()
            }
            NamedProblem::ChainedCrescent2 => {
                let mut margin = f64::INFINITY;
                for i in 0..n - 1 {
                    let (u, w) = (x[i], x[i + 1]);
                    let first = u * u + (w - 1.0) * (w - 1.0) + w - 1.0;
                    let second = -u * u - (w - 1.0) * (w - 1.0) + w + 1.0;
                    margin = margin.min((first - second).abs());
                }
                margin
            }
        }
    }
}

/// Convex random objective g^T x + x^T Hq x / 2 + max(A x + b) whose unique
/// global minimizer is the origin: the active rows (b_i = 0) receive simplex
/// weights lambda with g = -A_active^T lambda, so zero lies in the
/// subdifferential at the origin, and Hq is positive definite.
#[derive(Clone, Debug)]
pub struct RandomMaxQuad {
    pub g: DVector<f64>,
    pub hq: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lambda: DVector<f64>,
    pub m_active: usize,
    pub seed: u64,
}

/// Deterministic instance of the random max-quadratic family. The first
/// `m_active` rows are active at the origin.
pub fn generate_random(n: usize, m: usize, m_active: usize, seed: u64) -> RandomMaxQuad {
    assert!(
        (1..=m).contains(&m_active),
        "need 1 <= m_active <= m, got m_active = {m_active}, m = {m}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = DMatrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut b = DVector::zeros(m);
    for i in m_active..m {
        b[i] = -rng.sample::<f64, _>(StandardNormal).abs() - 0.1;
    }
    // Uniform positive simplex weights via normalized exponentials.
    let mut lambda = DVector::from_fn(m_active, |_, _| {
        let u: f64 = rng.random();
        -(1.0 - u).ln()
    });
    lambda /= lambda.sum();
    let g = -(a.rows(0, m_active).transpose() * &lambda);
    let q_src = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = q_src.qr().q();
    // Steep quadratic (eigenvalues in [1e4, 1e6)) so that the polyhedral term
    // still dominates the landscape at moderate objective values: runs that
    // stop at typical objective tolerances have already left the smooth
    // regime and exercised the sampling machinery.
    let d = DVector::from_fn(n, |_, _| 1e4 * 100f64.powf(rng.random::<f64>()));
    let mut hq = &q * DMatrix::from_diagonal(&d) * q.transpose();
    // QR round-off leaves hq asymmetric at machine precision.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (hq[(i, j)] + hq[(j, i)]);
            hq[(i, j)] = avg;
            hq[(j, i)] = avg;
        }
    }
    RandomMaxQuad {
        g,
        hq,
        a,
        b,
        lambda,
        m_active,
        seed,
    }
}

impl ObjectiveOracle for RandomMaxQuad {
    fn dimension(&self) -> usize {
        self.hq.nrows()
    }

    fn evaluate(&self, x: &DVector<f64>) -> Evaluation {
        let affine = &self.a * x + &self.b;
        let i = tiebreak_argmax(affine.as_slice());
        let hx = &self.hq * x;
        let value = self.g.dot(x) + 0.5 * x.dot(&hx) + affine[i];
        let gradient = &self.g + hx + self.a.row(i).transpose();
        Evaluation {
            value,
            gradient,
            differentiable: true,
        }
    }
}

impl KinkAware for RandomMaxQuad {
    fn kink_margin(&self, x: &DVector<f64>) -> f64 {
        let affine = &self.a * x + &self.b;
        top_gap(affine.as_slice())
    }
}
