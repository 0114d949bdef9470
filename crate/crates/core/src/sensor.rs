//! Measurement model for a single ray given an object position.
//!
//! A ray observes an object at range `r` and angular residual `φ` (object
//! heading minus ray bearing, wrapped). The measurement density over `(r, φ)` is
//!
//! ```text
//! f(r, φ) = Exp(r; λ_r) · VonMises(φ; 0, κ(r)),   κ(r) = 1 / (σ_θ² + (σ_gps / r)²)
//! ```
//!
//! so GPS error widens the angular spread at short range. The per-frame
//! detection probability is
//!
//! ```text
//! p_d = p_max · σ(δ) · exp(−λ_r r) · v(φ),   δ = slope · logit(conf) + intercept
//! ```
//!
//! where `v` is a logistic field-of-view window (half-width 60°, edge 5°).
//!
//! Belief propagation uses the JPDA factorization: the existence potential
//! carries every missed detection, `log ψ_i = α + Σ_j log(1 − p_d,ij)`, and the
//! assignment potential carries the odds of detecting and measuring,
//!
//! ```text
//! log ψ_ij = log(p_d / (1 − p_d)) + log f − log f_FD
//! ```
//!
//! [`assignment_potential`] reports this as `δ + log f − log f_FD` plus the
//! correction `log(p_d / (1 − p_d)) − δ`; their sum is the composed potential.
//!
//! Every evaluation returns exact first and second derivatives with respect to
//! the object position and first derivatives with respect to the eight
//! unconstrained parameter coordinates of [`SensorParams`].

use std::f64::consts::PI;
use std::ops::{Add, Mul};

use thiserror::Error;

use crate::domain::{heading, wrap_angle, Mat2, Param, Ray, SensorParams, Vec2, N_PARAMS};
use crate::math::{
    bessel_i0e, bessel_ratio_complement, bessel_ratio_derivative, log_sigmoid,
    logit, outer, sigmoid,
};

/// Object–origin distances below this are degenerate.
pub const MIN_RANGE: f64 = 0.5;

/// Half-width of the field-of-view window, radians.
pub const FOV_HALF_WIDTH: f64 = 60.0 * PI / 180.0;

/// Logistic edge width of the field-of-view window, radians.
pub const FOV_EDGE_WIDTH: f64 = 5.0 * PI / 180.0;

/// Confidences are clamped into `[ε, 1 − ε]` before taking the logit.
pub const CONFIDENCE_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum SensorError {
    #[error("object is {distance:.3} m from the ray origin (minimum {MIN_RANGE} m)")]
    Degenerate { distance: f64 },
}

/// A scalar function of object position and parameters, with derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodEval {
    pub log_density: f64,
    pub grad_position: Vec2,
    pub hessian_position: Mat2,
    pub grad_params: [f64; N_PARAMS],
}

impl LikelihoodEval {
    pub fn constant(value: f64) -> Self {
        LikelihoodEval {
            log_density: value,
            grad_position: Vec2::zeros(),
            hessian_position: Mat2::zeros(),
            grad_params: [0.0; N_PARAMS],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.log_density.is_finite()
            && self.grad_position.iter().all(|v| v.is_finite())
            && self.hessian_position.iter().all(|v| v.is_finite())
            && self.grad_params.iter().all(|v| v.is_finite())
    }
}

impl Add for LikelihoodEval {
    type Output = LikelihoodEval;

    fn add(self, o: LikelihoodEval) -> LikelihoodEval {
        let mut grad_params = self.grad_params;
        for (g, h) in grad_params.iter_mut().zip(o.grad_params) {
            *g += h;
        }
        LikelihoodEval {
            log_density: self.log_density + o.log_density,
            grad_position: self.grad_position + o.grad_position,
            hessian_position: self.hessian_position + o.hessian_position,
            grad_params,
        }
    }
}

impl Mul<f64> for LikelihoodEval {
    type Output = LikelihoodEval;

    fn mul(self, w: f64) -> LikelihoodEval {
        LikelihoodEval {
            log_density: self.log_density * w,
            grad_position: self.grad_position * w,
            hessian_position: self.hessian_position * w,
            grad_params: self.grad_params.map(|g| g * w),
        }
    }
}

/// Range/residual of an object relative to a ray, with the local frame
/// `u` (unit, origin → object) and `n` (u rotated +90°).
#[derive(Debug, Clone, Copy)]
pub struct Geometry {
    pub range: f64,
    pub residual: f64,
    u: Vec2,
    n: Vec2,
}

impl Geometry {
    pub fn new(ray: &Ray, x: &Vec2) -> Result<Self, SensorError> {
        let d = x - ray.origin();
        let range = d.norm();
        if !(range >= MIN_RANGE) {
            return Err(SensorError::Degenerate { distance: range });
        }
        let u = d / range;
        Ok(Geometry {
            range,
            residual: wrap_angle(heading(&d) - ray.angle()),
            u,
            n: Vec2::new(-u.y, u.x),
        })
    }
}

/// Value and partial derivatives of a function of `(r, φ)`.
#[derive(Debug, Clone, Copy, Default)]
struct Polar {
    value: f64,
    dr: f64,
    dphi: f64,
    drr: f64,
    drphi: f64,
    dphiphi: f64,
}

impl Polar {
    /// Push the polar derivatives through `r(x)`, `φ(x)`.
    fn to_position(self, g: &Geometry, grad_params: [f64; N_PARAMS]) -> LikelihoodEval {
        let r = g.range;
        let uu = outer(&g.u, &g.u);
        let nn = outer(&g.n, &g.n);
        let un = outer(&g.u, &g.n) + outer(&g.n, &g.u);
        LikelihoodEval {
            log_density: self.value,
            grad_position: g.u * self.dr + g.n * (self.dphi / r),
            hessian_position: uu * self.drr
                + un * (self.drphi / r - self.dphi / (r * r))
                + nn * (self.dphiphi / (r * r) + self.dr / r),
            grad_params,
        }
    }
}

/// `κ(r)` and its first two range derivatives.
#[derive(Debug, Clone, Copy)]
struct Concentration {
    kappa: f64,
    d1: f64,
    d2: f64,
    /// `σ_θ²` and `σ_gps²`.
    a: f64,
    b: f64,
    denom: f64,
}

impl Concentration {
    fn new(r: f64, params: &SensorParams) -> Self {
        let a = params.angular_sigma().powi(2);
        let b = params.gps_sigma().powi(2);
        let denom = a * r * r + b;
        Concentration {
            kappa: r * r / denom,
            d1: 2.0 * r * b / (denom * denom),
            d2: 2.0 * b * (b - 3.0 * a * r * r) / denom.powi(3),
            a,
            b,
            denom,
        }
    }
}

/// Angular concentration at range `r`.
pub fn kappa(r: f64, params: &SensorParams) -> f64 {
    Concentration::new(r, params).kappa
}

/// `cos φ − A(κ)`, written to avoid cancellation when both are near one.
fn cos_minus_ratio(phi: f64, kappa: f64) -> f64 {
    let s = (0.5 * phi).sin();
    bessel_ratio_complement(kappa) - 2.0 * s * s
}

/// Log density over `(r, φ)`, with no range floor. Integrates to one over
/// `r ∈ (0, ∞)`, `φ ∈ (−π, π]`.
pub fn log_density_polar(r: f64, phi: f64, params: &SensorParams) -> f64 {
    let lambda = params.radial_rate();
    let kappa = kappa(r, params);
    let s = (0.5 * phi).sin();
    lambda.ln() - lambda * r - 2.0 * kappa * s * s - (2.0 * PI).ln() - bessel_i0e(kappa).ln()
}

/// Measurement log density `log f(z | x)`.
pub fn log_f(ray: &Ray, x: &Vec2, params: &SensorParams) -> Result<LikelihoodEval, SensorError> {
    let g = Geometry::new(ray, x)?;
    let (r, phi) = (g.range, g.residual);
    let lambda = params.radial_rate();
    let c = Concentration::new(r, params);
    let gk = cos_minus_ratio(phi, c.kappa);
    let ratio_slope = bessel_ratio_derivative(c.kappa);
    let polar = Polar {
        value: log_density_polar(r, phi, params),
        dr: -lambda + c.d1 * gk,
        dphi: -c.kappa * phi.sin(),
        drr: c.d2 * gk - c.d1 * c.d1 * ratio_slope,
        drphi: -c.d1 * phi.sin(),
        dphiphi: -c.kappa * phi.cos(),
    };
    let mut grad_params = [0.0; N_PARAMS];
    grad_params[Param::RadialRate.index()] = 1.0 - lambda * r;
    let k2 = c.kappa * c.kappa;
    grad_params[Param::AngularSigma.index()] = -2.0 * c.a * k2 * gk;
    grad_params[Param::GpsSigma.index()] = -2.0 * c.b * k2 / (r * r) * gk;
    Ok(polar.to_position(&g, grad_params))
}

/// Derivatives of `∇ₓ log f` with respect to each unconstrained parameter.
/// Only the radial and angular parameters contribute.
pub fn log_f_mixed(
    ray: &Ray,
    x: &Vec2,
    params: &SensorParams,
) -> Result<[Vec2; N_PARAMS], SensorError> {
    let g = Geometry::new(ray, x)?;
    let (r, phi) = (g.range, g.residual);
    let lambda = params.radial_rate();
    let c = Concentration::new(r, params);
    let gk = cos_minus_ratio(phi, c.kappa);
    let ratio_slope = bessel_ratio_derivative(c.kappa);
    let d3 = c.denom.powi(3);

    let mut out = [Vec2::zeros(); N_PARAMS];
    out[Param::RadialRate.index()] = g.u * (-lambda);

    // (∂κ/∂u, ∂κ'/∂u) for the two concentration parameters
    let partials = [
        (
            Param::AngularSigma,
            2.0 * c.a * (-(r.powi(4)) / (c.denom * c.denom)),
            2.0 * c.a * (-4.0 * r.powi(3) * c.b / d3),
        ),
        (
            Param::GpsSigma,
            2.0 * c.b * (-(r * r) / (c.denom * c.denom)),
            2.0 * c.b * (2.0 * r * (c.a * r * r - c.b) / d3),
        ),
    ];
    for (p, dk, dk1) in partials {
        let d_dr = dk1 * gk - c.d1 * ratio_slope * dk;
        let d_dphi = -dk * phi.sin();
        out[p.index()] = g.u * d_dr + g.n * (d_dphi / r);
    }
    Ok(out)
}

/// Clamped logit of a detector confidence.
pub fn confidence_logit(confidence: f64) -> f64 {
    logit(confidence.clamp(CONFIDENCE_EPS, 1.0 - CONFIDENCE_EPS))
}

/// Detection logit `δ = slope · logit(conf) + intercept`.
pub fn detection_logit(ray: &Ray, params: &SensorParams) -> f64 {
    params.conf_slope() * confidence_logit(ray.confidence()) + params.conf_intercept()
}

/// Log of the field-of-view window and its first two derivatives in `φ`.
fn log_window(phi: f64) -> (f64, f64, f64) {
    let g1 = (FOV_HALF_WIDTH - phi) / FOV_EDGE_WIDTH;
    let g2 = (FOV_HALF_WIDTH + phi) / FOV_EDGE_WIDTH;
    let (s1, s2) = (sigmoid(g1), sigmoid(g2));
    let (c1, c2) = (sigmoid(-g1), sigmoid(-g2));
    let w = FOV_EDGE_WIDTH;
    (
        log_sigmoid(g1) + log_sigmoid(g2),
        (c2 - c1) / w,
        -(s1 * c1 + s2 * c2) / (w * w),
    )
}

/// Field-of-view factor `v(φ)` in `[0, 1]`.
pub fn fov_window(phi: f64) -> f64 {
    log_window(phi).0.exp()
}

/// `log p_d` with derivatives.
pub fn log_detect_prob(
    ray: &Ray,
    x: &Vec2,
    params: &SensorParams,
) -> Result<LikelihoodEval, SensorError> {
    let g = Geometry::new(ray, x)?;
    let lambda = params.radial_rate();
    let ceiling = params.detect_ceiling();
    let ell = confidence_logit(ray.confidence());
    let delta = params.conf_slope() * ell + params.conf_intercept();
    let (lw, dlw, ddlw) = log_window(g.residual);
    let polar = Polar {
        value: ceiling.ln() + log_sigmoid(delta) - lambda * g.range + lw,
        dr: -lambda,
        dphi: dlw,
        drr: 0.0,
        drphi: 0.0,
        dphiphi: ddlw,
    };
    let miss = sigmoid(-delta);
    let mut grad_params = [0.0; N_PARAMS];
    grad_params[Param::RadialRate.index()] = -lambda * g.range;
    grad_params[Param::DetectCeiling.index()] = sigmoid(-params.unconstrained()[3]);
    grad_params[Param::ConfSlope.index()] = miss * ell;
    grad_params[Param::ConfIntercept.index()] = miss;
    Ok(polar.to_position(&g, grad_params))
}

/// Per-frame detection probability `p_d(x, j)`.
pub fn detect_prob(ray: &Ray, x: &Vec2, params: &SensorParams) -> Result<f64, SensorError> {
    Ok(log_detect_prob(ray, x, params)?.log_density.exp())
}

/// `log(1 − p_d)` with derivatives, from an evaluated `log p_d`.
fn log_miss(ld: &LikelihoodEval) -> LikelihoodEval {
    let p = ld.log_density.exp();
    let q = p / (1.0 - p);
    let outer_w = p / ((1.0 - p) * (1.0 - p));
    LikelihoodEval {
        log_density: (-p).ln_1p(),
        grad_position: ld.grad_position * (-q),
        hessian_position: ld.hessian_position * (-q)
            - outer(&ld.grad_position, &ld.grad_position) * outer_w,
        grad_params: ld.grad_params.map(|v| -q * v),
    }
}

/// `log(1 − p_d)` with derivatives.
pub fn log_miss_prob(
    ray: &Ray,
    x: &Vec2,
    params: &SensorParams,
) -> Result<LikelihoodEval, SensorError> {
    Ok(log_miss(&log_detect_prob(ray, x, params)?))
}

/// `log ψ_i = α + Σ_j log(1 − p_d(x, j))` over the rays attached to one
/// hypothesis.
pub fn existence_potential<'a>(
    x: &Vec2,
    rays: impl IntoIterator<Item = &'a Ray>,
    params: &SensorParams,
) -> Result<LikelihoodEval, SensorError> {
    let mut acc = LikelihoodEval::constant(params.existence_logit());
    acc.grad_params[Param::ExistenceLogit.index()] = 1.0;
    for ray in rays {
        acc = acc + log_miss_prob(ray, x, params)?;
    }
    Ok(acc)
}

/// Assignment potential of one ray to one object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignmentPotential {
    /// `δ + log f − log f_FD`.
    pub base: LikelihoodEval,
    /// `log(p_d / (1 − p_d)) − δ`.
    pub correction: LikelihoodEval,
}

impl AssignmentPotential {
    /// The JPDA potential used by belief propagation.
    pub fn composed(&self) -> LikelihoodEval {
        self.base + self.correction
    }
}

pub fn assignment_potential(
    ray: &Ray,
    x: &Vec2,
    params: &SensorParams,
) -> Result<AssignmentPotential, SensorError> {
    let lf = log_f(ray, x, params)?;
    let ld = log_detect_prob(ray, x, params)?;
    let ell = confidence_logit(ray.confidence());
    let delta = params.conf_slope() * ell + params.conf_intercept();

    let mut base = lf;
    base.log_density += delta - params.clutter_density().ln();
    base.grad_params[Param::ConfSlope.index()] += ell;
    base.grad_params[Param::ConfIntercept.index()] += 1.0;
    base.grad_params[Param::ClutterDensity.index()] -= 1.0;

    // log(p/(1−p)) = log p − log(1 − p)
    let miss = log_miss(&ld);
    let p = ld.log_density.exp();
    let mut odds = LikelihoodEval {
        log_density: ld.log_density - miss.log_density,
        grad_position: ld.grad_position / (1.0 - p),
        hessian_position: ld.hessian_position / (1.0 - p)
            + outer(&ld.grad_position, &ld.grad_position) * (p / ((1.0 - p) * (1.0 - p))),
        grad_params: ld.grad_params.map(|v| v / (1.0 - p)),
    };
    odds.log_density -= delta;
    odds.grad_params[Param::ConfSlope.index()] -= ell;
    odds.grad_params[Param::ConfIntercept.index()] -= 1.0;

    Ok(AssignmentPotential {
        base,
        correction: odds,
    })
}

/// Peak of the angular log density at range `r`.
pub fn angular_mode_log_density(r: f64, params: &SensorParams) -> f64 {
    let k = kappa(r, params);
    -(2.0 * PI).ln() - bessel_i0e(k).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{make_ray, SensorValues};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(f: impl FnOnce(&mut SensorValues)) -> SensorParams {
        let mut v = SensorValues::default();
        f(&mut v);
        SensorParams::new(v).unwrap()
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Ray, Vec2, SensorParams) {
        let origin = Vec2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let angle = rng.random_range(-PI..PI);
        let ray = make_ray(origin, angle, rng.random_range(0.05..0.95), 1, "f").unwrap();
        let r = rng.random_range(3.0..120.0);
        let off = rng.random_range(-1.2..1.2);
        let x = origin + Vec2::new((angle + off).cos(), (angle + off).sin()) * r;
        let p = SensorParams::from_unconstrained([
            rng.random_range(-5.0..-2.0),
            rng.random_range(-4.0..-1.0),
            rng.random_range(-1.0..2.0),
            rng.random_range(-1.0..3.0),
            rng.random_range(0.2..2.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-8.0..-5.0),
            rng.random_range(-3.0..1.0),
        ])
        .unwrap();
        (ray, x, p)
    }

    fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(scale)
    }

    fn check_derivatives(
        name: &str,
        f: impl Fn(&Vec2, &SensorParams) -> LikelihoodEval,
        x: &Vec2,
        p: &SensorParams,
        check_hessian: bool,
    ) {
        let e = f(x, p);
        let h = 1e-5 * x.norm().max(1.0);
        for k in 0..2 {
            let mut dx = Vec2::zeros();
            dx[k] = h;
            let fd = (f(&(x + dx), p).log_density - f(&(x - dx), p).log_density) / (2.0 * h);
            let err = rel_err(fd, e.grad_position[k], 1e-3);
            assert!(err < 1e-4, "{name} grad_x[{k}]: fd {fd} vs {}", e.grad_position[k]);
            if check_hessian {
                let g_hi = f(&(x + dx), p).grad_position;
                let g_lo = f(&(x - dx), p).grad_position;
                for m in 0..2 {
                    let fd = (g_hi[m] - g_lo[m]) / (2.0 * h);
                    let an = e.hessian_position[(m, k)];
                    let err = rel_err(fd, an, 1e-4);
                    assert!(err < 1e-3, "{name} hess[{m},{k}]: fd {fd} vs {an}");
                }
            }
        }
        let raw = p.unconstrained();
        for k in 0..N_PARAMS {
            let step = 1e-5;
            let mut hi = raw;
            let mut lo = raw;
            hi[k] += step;
            lo[k] -= step;
            let fh = f(x, &SensorParams::from_unconstrained(hi).unwrap()).log_density;
            let fl = f(x, &SensorParams::from_unconstrained(lo).unwrap()).log_density;
            let fd = (fh - fl) / (2.0 * step);
            let err = rel_err(fd, e.grad_params[k], 1e-4);
            assert!(err < 1e-4, "{name} grad_params[{k}]: fd {fd} vs {}", e.grad_params[k]);
        }
    }

    #[test]
    fn kappa_worked_value() {
        let p = params(|v| {
            v.angular_sigma = 0.1;
            v.gps_sigma = 5.0;
        });
        assert!((kappa(50.0, &p) - 50.0).abs() < 1e-9);
    }

    #[test]
    fn mode_along_bearing_has_no_perpendicular_gradient() {
        let p = params(|v| {
            v.gps_sigma = 0.0;
            v.radial_rate = 0.04;
        });
        let ray = make_ray(Vec2::new(2.0, -1.0), 0.7, 0.8, 1, "f").unwrap();
        let r = 1.0 / p.radial_rate();
        let x = ray.origin() + ray.bearing() * r;
        let e = log_f(&ray, &x, &p).unwrap();
        let perp = Vec2::new(-ray.bearing().y, ray.bearing().x);
        assert!(e.grad_position.dot(&perp).abs() < 1e-12);
        // φ = 0 so the density equals radial × angular peak
        let expected = p.radial_rate().ln() - 1.0 + angular_mode_log_density(r, &p);
        assert!((e.log_density - expected).abs() < 1e-12);
        for off in [0.01, -0.02, 0.1] {
            let y = ray.origin() + Vec2::new((0.7f64 + off).cos(), (0.7f64 + off).sin()) * r;
            assert!(log_f(&ray, &y, &p).unwrap().log_density < e.log_density);
        }
    }

    #[test]
    fn wide_angular_noise_is_uniform() {
        let p = params(|v| v.angular_sigma = 1e4);
        let ray = make_ray(Vec2::zeros(), 0.0, 0.5, 1, "f").unwrap();
        let lambda = p.radial_rate();
        for phi in [0.0f64, 1.0, 2.5, -3.0] {
            let x = Vec2::new(phi.cos(), phi.sin()) * 30.0;
            let e = log_f(&ray, &x, &p).unwrap();
            let uniform = lambda.ln() - lambda * 30.0 - (2.0 * PI).ln();
            assert!((e.log_density - uniform).abs() < 1e-7, "phi={phi}");
        }
    }

    #[test]
    fn density_is_monotone_in_residual() {
        let p = SensorParams::default();
        let ray = make_ray(Vec2::zeros(), 0.3, 0.5, 1, "f").unwrap();
        let mut last = f64::INFINITY;
        for i in 0..=60 {
            let phi = i as f64 * PI / 60.0;
            let v = log_density_polar(40.0, phi, &p);
            assert!(v < last || i == 0);
            last = v;
            let x = ray.origin() + Vec2::new((0.3 + phi).cos(), (0.3 + phi).sin()) * 40.0;
            if i < 60 {
                assert!((log_f(&ray, &x, &p).unwrap().log_density - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_geometry_is_an_error() {
        let ray = make_ray(Vec2::zeros(), 0.0, 0.5, 1, "f").unwrap();
        let p = SensorParams::default();
        let x = Vec2::new(0.2, 0.1);
        assert!(matches!(log_f(&ray, &x, &p), Err(SensorError::Degenerate { .. })));
        assert!(detect_prob(&ray, &x, &p).is_err());
        assert!(assignment_potential(&ray, &x, &p).is_err());
    }

    #[test]
    fn detect_prob_behind_camera_is_negligible() {
        let ray = make_ray(Vec2::zeros(), 0.0, 1.0, 1, "f").unwrap();
        let p = SensorParams::default();
        let pd = detect_prob(&ray, &Vec2::new(-10.0, 0.0), &p).unwrap();
        assert!(pd < 1e-3, "{pd}");
    }

    #[test]
    fn detect_prob_near_origin_reaches_ceiling() {
        let p = params(|v| {
            v.radial_rate = 1e-7;
            v.detect_ceiling = 0.7;
        });
        let ray = make_ray(Vec2::zeros(), 0.0, 1.0, 1, "f").unwrap();
        let pd = detect_prob(&ray, &Vec2::new(MIN_RANGE, 0.0), &p).unwrap();
        assert!((pd - 0.7).abs() < 1e-5, "{pd}");
    }

    #[test]
    fn detect_prob_worked_product() {
        // ceiling 0.5, logit(conf)·slope + intercept = 0, exp(−λr) = 0.5, on-axis
        let r = 40.0;
        let p = params(|v| {
            v.detect_ceiling = 0.5;
            v.conf_slope = 1.0;
            v.conf_intercept = 0.0;
            v.radial_rate = 2f64.ln() / r;
        });
        let ray = make_ray(Vec2::zeros(), 0.0, 0.5, 1, "f").unwrap();
        let pd = detect_prob(&ray, &Vec2::new(r, 0.0), &p).unwrap();
        let window = fov_window(0.0);
        assert!(window > 1.0 - 2e-5);
        assert!((pd - 0.125 * window).abs() < 1e-12);
        assert!((pd - 0.125).abs() < 2e-6);
    }

    #[test]
    fn existence_potential_examples() {
        let p = SensorParams::default();
        let x = Vec2::new(10.0, 0.0);
        let none: [Ray; 0] = [];
        let e = existence_potential(&x, &none, &p).unwrap();
        assert_eq!(e.log_density, p.existence_logit());

        let ray = make_ray(Vec2::zeros(), 0.0, 0.5, 1, "f").unwrap();
        let pd = detect_prob(&ray, &x, &p).unwrap();
        let one = existence_potential(&x, [&ray], &p).unwrap();
        assert!((one.log_density - (p.existence_logit() + (1.0 - pd).ln())).abs() < 1e-12);

        // three rays with identical p_d
        let rays = [ray.clone(), ray.clone(), ray];
        let three = existence_potential(&x, &rays, &p).unwrap();
        let expected = p.existence_logit() + 3.0 * (1.0 - pd).ln();
        assert!((three.log_density - expected).abs() < 1e-12);
    }

    #[test]
    fn assignment_base_examples() {
        let ray = make_ray(Vec2::zeros(), 0.0, 0.5, 1, "f").unwrap();
        let x = Vec2::new(25.0, 1.0);
        let p0 = params(|v| {
            v.conf_intercept = 0.0;
            v.conf_slope = 1.0;
        });
        let lf = log_f(&ray, &x, &p0).unwrap().log_density;
        // clutter density equal to f and δ = 0 → log ψ = 0
        let p1 = p0.with(|v| v.clutter_density = lf.exp()).unwrap();
        let a = assignment_potential(&ray, &x, &p1).unwrap();
        assert!(a.base.log_density.abs() < 1e-12);
        let p2 = p1.with(|v| v.clutter_density *= 2.0).unwrap();
        let b = assignment_potential(&ray, &x, &p2).unwrap();
        assert!((a.base.log_density - b.base.log_density - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn composed_potential_matches_hand_evaluation() {
        let ray = make_ray(Vec2::new(1.0, 2.0), 0.4, 0.73, 3, "f").unwrap();
        let x = Vec2::new(30.0, 18.0);
        let p = params(|v| {
            v.radial_rate = 0.03;
            v.angular_sigma = 0.07;
            v.gps_sigma = 2.0;
            v.detect_ceiling = 0.8;
            v.conf_slope = 1.3;
            v.conf_intercept = -0.2;
            v.clutter_density = 2e-3;
        });
        // independent re-derivation from the closed forms
        let d = x - ray.origin();
        let r = d.norm();
        let phi = wrap_angle(d.y.atan2(d.x) - 0.4);
        let sig_t = 0.07f64;
        let kap = 1.0 / (sig_t * sig_t + (2.0 / r).powi(2));
        let i0: f64 = (0..200)
            .map(|k| {
                let mut t = 1.0f64;
                for m in 1..=k {
                    t *= (kap / 2.0).powi(2) / (m as f64 * m as f64);
                }
                t
            })
            .sum();
        let f = 0.03 * (-0.03 * r).exp() * (kap * phi.cos()).exp() / (2.0 * PI * i0);
        let delta = 1.3 * (0.73f64 / 0.27).ln() - 0.2;
        let window = 1.0
            / (1.0 + (-(FOV_HALF_WIDTH - phi) / FOV_EDGE_WIDTH).exp())
            / (1.0 + (-(FOV_HALF_WIDTH + phi) / FOV_EDGE_WIDTH).exp());
        let pd = 0.8 / (1.0 + (-delta).exp()) * (-0.03 * r).exp() * window;
        let expected = (pd / (1.0 - pd)).ln() + f.ln() - 2e-3f64.ln();
        let got = assignment_potential(&ray, &x, &p).unwrap().composed().log_density;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        let base_expected = delta + f.ln() - 2e-3f64.ln();
        let base = assignment_potential(&ray, &x, &p).unwrap().base.log_density;
        assert!((base - base_expected).abs() < 1e-12);
    }

    #[test]
    fn polar_density_integrates_to_one() {
        let p = params(|v| {
            v.radial_rate = 0.05;
            v.angular_sigma = 0.08;
            v.gps_sigma = 2.0;
        });
        // substitute r = −ln(1 − t)/λ so the radial integral is over t ∈ (0, 1)
        let lambda = p.radial_rate();
        let (nt, nphi) = (400, 800);
        let mut total = 0.0;
        for i in 0..nt {
            let t = (i as f64 + 0.5) / nt as f64;
            let r = -(1.0 - t).ln() / lambda;
            let jac = 1.0 / (lambda * (1.0 - t));
            let mut ang = 0.0;
            for k in 0..nphi {
                let phi = -PI + (k as f64 + 0.5) * 2.0 * PI / nphi as f64;
                ang += log_density_polar(r, phi, &p).exp();
            }
            total += ang * 2.0 * PI / nphi as f64 * jac / nt as f64;
        }
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..60 {
            let (ray, x, p) = random_case(&mut rng);
            check_derivatives("log_f", |x, p| log_f(&ray, x, p).unwrap(), &x, &p, true);
            check_derivatives(
                "log_pd",
                |x, p| log_detect_prob(&ray, x, p).unwrap(),
                &x,
                &p,
                true,
            );
            check_derivatives(
                "log_miss",
                |x, p| log_miss_prob(&ray, x, p).unwrap(),
                &x,
                &p,
                true,
            );
            check_derivatives(
                "assign",
                |x, p| assignment_potential(&ray, x, p).unwrap().composed(),
                &x,
                &p,
                true,
            );
            check_derivatives(
                "assign_base",
                |x, p| assignment_potential(&ray, x, p).unwrap().base,
                &x,
                &p,
                true,
            );
        }
    }

    #[test]
    fn mixed_partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let (ray, x, p) = random_case(&mut rng);
            let mixed = log_f_mixed(&ray, &x, &p).unwrap();
            let raw = p.unconstrained();
            for k in 0..N_PARAMS {
                let step = 1e-5;
                let (mut hi, mut lo) = (raw, raw);
                hi[k] += step;
                lo[k] -= step;
                let gh = log_f(&ray, &x, &SensorParams::from_unconstrained(hi).unwrap())
                    .unwrap()
                    .grad_position;
                let gl = log_f(&ray, &x, &SensorParams::from_unconstrained(lo).unwrap())
                    .unwrap()
                    .grad_position;
                let fd = (gh - gl) / (2.0 * step);
                for m in 0..2 {
                    assert!(
                        rel_err(fd[m], mixed[k][m], 1e-5) < 1e-4,
                        "param {k} comp {m}: {} vs {}",
                        fd[m],
                        mixed[k][m]
                    );
                }
            }
        }
    }
}
