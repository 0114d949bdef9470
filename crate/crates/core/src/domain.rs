//! Core value types shared across the crate.
//!
//! All positions are local planar meters in an east/north frame. Angles are
//! radians measured counter-clockwise from east. Converting geodetic input into
//! this frame is the data producer's job.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{logit, sigmoid};

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

/// Spatial dimension of every position and Hessian block.
pub const DIM: usize = 2;

/// Number of per-class sensor parameters.
pub const N_PARAMS: usize = 8;

/// Tolerance on `‖bearing‖ = 1`.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("confidence {0} is outside [0, 1]")]
    Confidence(f64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("bearing is not unit length (norm {0})")]
    BearingNorm(f64),
    #[error("ray {index} origin ({x:.3}, {y:.3}) lies outside the batch bounds")]
    OutOfBounds { index: usize, x: f64, y: f64 },
    #[error("invalid sensor parameter {name}: {value}")]
    SensorParam { name: &'static str, value: f64 },
    #[error("invalid bounding box")]
    BoundingBox,
}

/// Reduce an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let r = a.rem_euclid(two_pi);
    if r > PI {
        r - two_pi
    } else {
        r
    }
}

/// Checked variant of [`wrap_angle`].
pub fn try_wrap_angle(a: f64) -> Result<f64, DomainError> {
    if !a.is_finite() {
        return Err(DomainError::NonFinite("angle"));
    }
    Ok(wrap_angle(a))
}

/// Heading angle of a planar vector.
#[inline]
pub fn heading(v: &Vec2) -> f64 {
    v.y.atan2(v.x)
}

/// A single bearing-only detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    origin: Vec2,
    bearing: Vec2,
    confidence: f64,
    class_id: u32,
    frame_id: String,
}

/// Build a ray from an origin and a bearing angle.
pub fn make_ray(
    origin: Vec2,
    bearing_angle: f64,
    confidence: f64,
    class_id: u32,
    frame_id: impl Into<String>,
) -> Result<Ray, DomainError> {
    if !bearing_angle.is_finite() {
        return Err(DomainError::NonFinite("bearing angle"));
    }
    Ray::new(
        origin,
        Vec2::new(bearing_angle.cos(), bearing_angle.sin()),
        confidence,
        class_id,
        frame_id,
    )
}

impl Ray {
    pub fn new(
        origin: Vec2,
        bearing: Vec2,
        confidence: f64,
        class_id: u32,
        frame_id: impl Into<String>,
    ) -> Result<Self, DomainError> {
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(DomainError::NonFinite("origin"));
        }
        if !bearing.iter().all(|v| v.is_finite()) {
            return Err(DomainError::NonFinite("bearing"));
        }
        if !confidence.is_finite() {
            return Err(DomainError::NonFinite("confidence"));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(DomainError::Confidence(confidence));
        }
        let norm = bearing.norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(DomainError::BearingNorm(norm));
        }
        Ok(Ray {
            origin,
            bearing,
            confidence,
            class_id,
            frame_id: frame_id.into(),
        })
    }

    pub fn origin(&self) -> &Vec2 {
        &self.origin
    }

    pub fn bearing(&self) -> &Vec2 {
        &self.bearing
    }

    /// Bearing as an angle in `(-π, π]`.
    pub fn angle(&self) -> f64 {
        heading(&self.bearing)
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn frame_id(&self) -> &str {
        &self.frame_id
    }

    /// Same ray with its origin shifted by `offset`.
    pub fn translated(&self, offset: &Vec2) -> Ray {
        Ray {
            origin: self.origin + offset,
            ..self.clone()
        }
    }
}

/// Axis-aligned rectangle in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min: Vec2,
    pub max: Vec2,
}

impl BBox {
    pub fn new(min: Vec2, max: Vec2) -> Result<Self, DomainError> {
        let finite = min.iter().chain(max.iter()).all(|v| v.is_finite());
        if !finite || min.x > max.x || min.y > max.y {
            return Err(DomainError::BoundingBox);
        }
        Ok(BBox { min, max })
    }

    /// Smallest box containing every point; `None` when empty.
    pub fn around<'a>(points: impl IntoIterator<Item = &'a Vec2>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let (min, max) = it.fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        Some(BBox { min, max })
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn expanded(&self, margin: f64) -> BBox {
        let m = Vec2::new(margin, margin);
        BBox {
            min: self.min - m,
            max: self.max + m,
        }
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn translated(&self, offset: &Vec2) -> BBox {
        BBox {
            min: self.min + offset,
            max: self.max + offset,
        }
    }
}

/// A known object position used as ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthObject {
    pub position: Vec2,
    pub class_id: u32,
}

/// A batch of rays over one region, optionally with (partial) ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBatch {
    rays: Vec<Ray>,
    bounds: BBox,
    ground_truth: Option<Vec<TruthObject>>,
}

impl SceneBatch {
    /// Default slack around `bounds` within which ray origins are accepted.
    pub const DEFAULT_MARGIN: f64 = 1.0;

    pub fn new(
        rays: Vec<Ray>,
        bounds: BBox,
        ground_truth: Option<Vec<TruthObject>>,
        margin: f64,
    ) -> Result<Self, DomainError> {
        let slack = bounds.expanded(margin);
        if let Some((index, ray)) = rays
            .iter()
            .enumerate()
            .find(|(_, r)| !slack.contains(r.origin()))
        {
            return Err(DomainError::OutOfBounds {
                index,
                x: ray.origin().x,
                y: ray.origin().y,
            });
        }
        Ok(SceneBatch {
            rays,
            bounds,
            ground_truth,
        })
    }

    /// Batch whose bounds are the box around the ray origins (and truth),
    /// grown by `margin`.
    pub fn from_rays(
        rays: Vec<Ray>,
        ground_truth: Option<Vec<TruthObject>>,
        margin: f64,
    ) -> SceneBatch {
        let points = rays
            .iter()
            .map(|r| r.origin())
            .chain(ground_truth.iter().flatten().map(|t| &t.position));
        let bounds = BBox::around(points)
            .unwrap_or(BBox {
                min: Vec2::zeros(),
                max: Vec2::zeros(),
            })
            .expanded(margin);
        SceneBatch {
            rays,
            bounds,
            ground_truth,
        }
    }

    pub fn rays(&self) -> &[Ray] {
        &self.rays
    }

    pub fn bounds(&self) -> &BBox {
        &self.bounds
    }

    pub fn ground_truth(&self) -> Option<&[TruthObject]> {
        self.ground_truth.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    /// Sorted, deduplicated class ids of rays and truth.
    pub fn classes(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .rays
            .iter()
            .map(|r| r.class_id())
            .chain(self.ground_truth.iter().flatten().map(|t| t.class_id))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// The sub-batch for one class, keeping the bounds.
    pub fn for_class(&self, class_id: u32) -> SceneBatch {
        SceneBatch {
            rays: self
                .rays
                .iter()
                .filter(|r| r.class_id() == class_id)
                .cloned()
                .collect(),
            bounds: self.bounds,
            ground_truth: self.ground_truth.as_ref().map(|gt| {
                gt.iter()
                    .filter(|t| t.class_id == class_id)
                    .copied()
                    .collect()
            }),
        }
    }

    pub fn translated(&self, offset: &Vec2) -> SceneBatch {
        SceneBatch {
            rays: self.rays.iter().map(|r| r.translated(offset)).collect(),
            bounds: self.bounds.translated(offset),
            ground_truth: self.ground_truth.as_ref().map(|gt| {
                gt.iter()
                    .map(|t| TruthObject {
                        position: t.position + offset,
                        class_id: t.class_id,
                    })
                    .collect()
            }),
        }
    }

    pub fn with_ground_truth(mut self, truth: Option<Vec<TruthObject>>) -> SceneBatch {
        self.ground_truth = truth;
        self
    }
}

/// A candidate object: position, existence marginal and soft ray assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectHypothesis {
    pub position: Vec2,
    /// Existence marginal from belief propagation.
    pub existence: f64,
    /// Ranking score: existence with the position prior's density ratio folded
    /// into its logit. Equal to `existence` under a uniform prior.
    pub score: f64,
    /// Laplace posterior covariance, m².
    pub covariance: Mat2,
    /// Ray index → assignment marginal.
    pub assignment_marginals: BTreeMap<usize, f64>,
}

/// Index into the unconstrained parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Param {
    RadialRate = 0,
    AngularSigma = 1,
    GpsSigma = 2,
    DetectCeiling = 3,
    ConfSlope = 4,
    ConfIntercept = 5,
    ClutterDensity = 6,
    ExistenceLogit = 7,
}

impl Param {
    pub const ALL: [Param; N_PARAMS] = [
        Param::RadialRate,
        Param::AngularSigma,
        Param::GpsSigma,
        Param::DetectCeiling,
        Param::ConfSlope,
        Param::ConfIntercept,
        Param::ClutterDensity,
        Param::ExistenceLogit,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Param::RadialRate => "radial_rate",
            Param::AngularSigma => "angular_sigma",
            Param::GpsSigma => "gps_sigma",
            Param::DetectCeiling => "detect_ceiling",
            Param::ConfSlope => "conf_slope",
            Param::ConfIntercept => "conf_intercept",
            Param::ClutterDensity => "clutter_density",
            Param::ExistenceLogit => "existence_logit",
        }
    }
}

/// Per-class sensor calibration.
///
/// Stored as eight unconstrained reals; the constrained values are exposed
/// through accessors. Positive quantities use `exp`, the detection ceiling
/// uses the logistic function, and the remaining three are the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorParams {
    raw: [f64; N_PARAMS],
}

/// Constrained view of [`SensorParams`], used for configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorValues {
    pub radial_rate: f64,
    pub angular_sigma: f64,
    pub gps_sigma: f64,
    pub detect_ceiling: f64,
    pub conf_slope: f64,
    pub conf_intercept: f64,
    pub clutter_density: f64,
    pub existence_logit: f64,
}

impl Default for SensorValues {
    fn default() -> Self {
        SensorValues {
            radial_rate: 0.02,
            angular_sigma: 0.05,
            gps_sigma: 3.0,
            detect_ceiling: 0.9,
            conf_slope: 1.0,
            conf_intercept: 0.0,
            clutter_density: 1e-3,
            existence_logit: -4.0,
        }
    }
}

impl Default for SensorParams {
    fn default() -> Self {
        SensorParams::new(SensorValues::default()).expect("defaults are valid")
    }
}

impl SensorParams {
    pub fn new(v: SensorValues) -> Result<Self, DomainError> {
        let check = |name: &'static str, value: f64, ok: bool| {
            if value.is_finite() && ok {
                Ok(())
            } else {
                Err(DomainError::SensorParam { name, value })
            }
        };
        check("radial_rate", v.radial_rate, v.radial_rate > 0.0)?;
        check("angular_sigma", v.angular_sigma, v.angular_sigma > 0.0)?;
        check("gps_sigma", v.gps_sigma, v.gps_sigma >= 0.0)?;
        check(
            "detect_ceiling",
            v.detect_ceiling,
            v.detect_ceiling > 0.0 && v.detect_ceiling < 1.0,
        )?;
        check("conf_slope", v.conf_slope, true)?;
        check("conf_intercept", v.conf_intercept, true)?;
        check("clutter_density", v.clutter_density, v.clutter_density > 0.0)?;
        check("existence_logit", v.existence_logit, true)?;
        Ok(SensorParams {
            raw: [
                v.radial_rate.ln(),
                v.angular_sigma.ln(),
                v.gps_sigma.ln(),
                logit(v.detect_ceiling),
                v.conf_slope,
                v.conf_intercept,
                v.clutter_density.ln(),
                v.existence_logit,
            ],
        })
    }

    /// Any finite vector maps to a valid parameter set. `GpsSigma` may be
    /// `-∞`, meaning zero GPS error.
    pub fn from_unconstrained(raw: [f64; N_PARAMS]) -> Result<Self, DomainError> {
        for p in Param::ALL {
            let v = raw[p.index()];
            let ok = v.is_finite() || (p == Param::GpsSigma && v == f64::NEG_INFINITY);
            if !ok {
                return Err(DomainError::SensorParam {
                    name: p.name(),
                    value: v,
                });
            }
        }
        Ok(SensorParams { raw })
    }

    pub fn unconstrained(&self) -> [f64; N_PARAMS] {
        self.raw
    }

    pub fn values(&self) -> SensorValues {
        SensorValues {
            radial_rate: self.radial_rate(),
            angular_sigma: self.angular_sigma(),
            gps_sigma: self.gps_sigma(),
            detect_ceiling: self.detect_ceiling(),
            conf_slope: self.conf_slope(),
            conf_intercept: self.conf_intercept(),
            clutter_density: self.clutter_density(),
            existence_logit: self.existence_logit(),
        }
    }

    pub fn radial_rate(&self) -> f64 {
        self.raw[0].exp()
    }

    pub fn angular_sigma(&self) -> f64 {
        self.raw[1].exp()
    }

    pub fn gps_sigma(&self) -> f64 {
        self.raw[2].exp()
    }

    pub fn detect_ceiling(&self) -> f64 {
        sigmoid(self.raw[3])
    }

    pub fn conf_slope(&self) -> f64 {
        self.raw[4]
    }

    pub fn conf_intercept(&self) -> f64 {
        self.raw[5]
    }

    pub fn clutter_density(&self) -> f64 {
        self.raw[6].exp()
    }

    pub fn existence_logit(&self) -> f64 {
        self.raw[7]
    }

    /// Copy with one constrained value replaced.
    pub fn with(&self, f: impl FnOnce(&mut SensorValues)) -> Result<Self, DomainError> {
        let mut v = self.values();
        f(&mut v);
        SensorParams::new(v)
    }
}
