//! Scalar special functions and closed-form 2×2 linear algebra.
//!
//! The Von Mises normalizer needs `log I0(κ)` and the ratio `I1(κ)/I0(κ)` over
//! a wide range of concentrations (from near-uniform to κ ≈ 10⁶). Both are
//! evaluated from the exponentially scaled Bessel functions `I0e`, `I1e`,
//! using the power series below [`SERIES_CUTOFF`] and the Hankel asymptotic
//! expansion above it.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Arguments at or below this use the power series; above, the asymptotic series.
const SERIES_CUTOFF: f64 = 20.0;

/// Logistic function, stable for large |x|.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `log(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        0.0
    } else if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(p / (1 - p))`.
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log Σ exp(xᵢ)`; `-∞` for an empty slice or all `-∞` inputs.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `log(exp(a) + exp(b))`.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Natural log of the Beta function `B(a, b)`.
pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Lanczos approximation (g = 7, n = 9) of `log Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    let t = x + 7.5;
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

// ---------------------------------------------------------------------------
// Modified Bessel functions of the first kind
// ---------------------------------------------------------------------------

/// Exponentially scaled pair `(I0(x)·e^{-x}, I1(x)·e^{-x})` for `x ≥ 0`.
fn bessel_i01e(x: f64) -> (f64, f64) {
    debug_assert!(x >= 0.0);
    if x <= SERIES_CUTOFF {
        let q = 0.25 * x * x;
        let mut t0 = 1.0;
        let mut t1 = 0.5 * x;
        let mut s0 = t0;
        let mut s1 = t1;
        for k in 1..200 {
            let kf = k as f64;
            t0 *= q / (kf * kf);
            t1 *= q / (kf * (kf + 1.0));
            s0 += t0;
            s1 += t1;
            if t0 <= s0 * 1e-17 && t1 <= s1 * 1e-17 {
                break;
            }
        }
        let scale = (-x).exp();
        (s0 * scale, s1 * scale)
    } else {
        let (a0, a1, _) = asymptotic_series(x);
        let pre = 1.0 / (2.0 * PI * x).sqrt();
        (pre * a0, pre * a1)
    }
}

/// Hankel sums for ν = 0 and ν = 1, plus their difference computed termwise.
fn asymptotic_series(x: f64) -> (f64, f64, f64) {
    let eight_x = 8.0 * x;
    let (mut t0, mut t1) = (1.0_f64, 1.0_f64);
    let (mut s0, mut s1, mut diff) = (1.0, 1.0, 0.0);
    for k in 1..60 {
        let kf = k as f64;
        let odd = (2.0 * kf - 1.0) * (2.0 * kf - 1.0);
        let n0 = t0 * odd / (kf * eight_x);
        let n1 = t1 * (odd - 4.0) / (kf * eight_x);
        if n0.abs() > t0.abs() {
            // series has started to diverge
            break;
        }
        t0 = n0;
        t1 = n1;
        s0 += t0;
        s1 += t1;
        diff += t0 - t1;
        if t0.abs() < 1e-17 * s0 && t1.abs() < 1e-17 * s1.abs() {
            break;
        }
    }
    (s0, s1, diff)
}

/// `I0(x)·e^{-|x|}`.
pub fn bessel_i0e(x: f64) -> f64 {
    bessel_i01e(x.abs()).0
}

/// `I1(x)·e^{-|x|}`.
pub fn bessel_i1e(x: f64) -> f64 {
    let v = bessel_i01e(x.abs()).1;
    if x < 0.0 {
        -v
    } else {
        v
    }
}

/// `log I0(x)` for `x ≥ 0`, without overflow.
pub fn log_bessel_i0(x: f64) -> f64 {
    x + bessel_i0e(x).ln()
}

/// `A(κ) = I1(κ)/I0(κ)`, the derivative of `log I0`.
pub fn bessel_ratio(kappa: f64) -> f64 {
    if kappa <= 0.0 {
        return 0.0;
    }
    let (i0, i1) = bessel_i01e(kappa);
    i1 / i0
}

/// `1 − A(κ)`, accurate when A is close to one.
pub fn bessel_ratio_complement(kappa: f64) -> f64 {
    if kappa <= SERIES_CUTOFF {
        1.0 - bessel_ratio(kappa)
    } else {
        let (s0, _, diff) = asymptotic_series(kappa);
        diff / s0
    }
}

/// `A'(κ) = 1 − A/κ − A²`.
pub fn bessel_ratio_derivative(kappa: f64) -> f64 {
    if kappa < 1e-6 {
        return 0.5 - 3.0 * kappa * kappa / 16.0;
    }
    let a = bessel_ratio(kappa);
    let c = bessel_ratio_complement(kappa);
    c * (1.0 + a) - a / kappa
}

// ---------------------------------------------------------------------------
// Von Mises
// ---------------------------------------------------------------------------

/// Log density of a zero-mean Von Mises distribution at angle `phi`.
pub fn von_mises_log_density(phi: f64, kappa: f64) -> f64 {
    let half = 0.5 * phi;
    -2.0 * kappa * half.sin() * half.sin() - (2.0 * PI).ln() - bessel_i0e(kappa).ln()
}

/// Draw from a zero-mean Von Mises distribution (Best & Fisher rejection
/// sampler; uniform for negligible κ, wrapped normal for very large κ).
pub fn sample_von_mises<R: Rng + ?Sized>(rng: &mut R, kappa: f64) -> f64 {
    if kappa < 1e-8 {
        return PI * (2.0 * rng.random::<f64>() - 1.0);
    }
    if kappa > 1e6 {
        let z: f64 = rng.sample(StandardNormal);
        return crate::domain::wrap_angle(z / kappa.sqrt());
    }
    let s = if kappa < 1e-5 {
        1.0 / kappa + kappa
    } else {
        let r = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
        let rho = (r - (2.0 * r).sqrt()) / (2.0 * kappa);
        (1.0 + rho * rho) / (2.0 * rho)
    };
    let w = loop {
        let u: f64 = rng.random();
        let z = (PI * u).cos();
        let w = (1.0 + s * z) / (s + z);
        let y = kappa * (s - w);
        let v: f64 = rng.random();
        if y * (2.0 - y) - v >= 0.0 || (y / v).ln() + 1.0 - y >= 0.0 {
            break w;
        }
    };
    let angle = w.clamp(-1.0, 1.0).acos();
    if rng.random::<f64>() < 0.5 {
        -angle
    } else {
        angle
    }
}

/// Standard normal sample as a plain function, for callers that only hold `Rng`.
pub fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// 2×2 symmetric matrices
// ---------------------------------------------------------------------------

/// Eigen-decomposition of a symmetric 2×2 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymEigen2 {
    pub min: f64,
    pub max: f64,
    /// Unit eigenvector of `max`; the other is its perpendicular.
    pub max_vector: Vector2<f64>,
}

impl SymEigen2 {
    pub fn new(m: &Matrix2<f64>) -> Self {
        let a = m[(0, 0)];
        let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
        let c = m[(1, 1)];
        let mean = 0.5 * (a + c);
        let half_diff = 0.5 * (a - c);
        let rad = half_diff.hypot(b);
        let theta = 0.5 * (2.0 * b).atan2(a - c);
        SymEigen2 {
            min: mean - rad,
            max: mean + rad,
            max_vector: Vector2::new(theta.cos(), theta.sin()),
        }
    }

    pub fn min_vector(&self) -> Vector2<f64> {
        Vector2::new(-self.max_vector.y, self.max_vector.x)
    }

    /// Rebuild `V diag(f(λ)) Vᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix2<f64> {
        let u = self.max_vector;
        let v = self.min_vector();
        u * u.transpose() * f(self.max) + v * v.transpose() * f(self.min)
    }
}

/// Outer product `a bᵀ`.
#[inline]
pub fn outer(a: &Vector2<f64>, b: &Vector2<f64>) -> Matrix2<f64> {
    a * b.transpose()
}
