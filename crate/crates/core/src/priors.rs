//! Position priors: uniform over the survey region, or a spike-and-slab
//! mixture of Gaussians at road intersections over a uniform background.
//!
//! ```text
//! p(x) = w · (1/K) Σ_k N(x; p_k, s² I) + (1 − w) / area
//! ```
//!
//! The affinity `w` is per class and fit offline by MAP under a Beta prior.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use thiserror::Error;

use crate::domain::{Mat2, TruthObject, Vec2};
use crate::math::{ln_beta, outer};

/// Default Gaussian scale of an intersection spike, metres.
pub const DEFAULT_INTERSECTION_RADIUS: f64 = 15.0;

/// Default Beta pseudo-counts for the affinity.
pub const DEFAULT_PSEUDO_COUNTS: (f64, f64) = (2.0, 2.0);

const GOLDEN_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("region area must be positive and finite, got {0}")]
    Area(f64),
    #[error("intersection radius must be positive and finite, got {0}")]
    Radius(f64),
    #[error("affinity for class {class_id} must lie in [0, 1], got {value}")]
    Affinity { class_id: u32, value: f64 },
    #[error("spike-and-slab prior needs at least one intersection")]
    NoIntersections,
    #[error("intersection {0} is not finite")]
    NonFinite(usize),
    #[error("Beta pseudo-counts must be positive, got ({0}, {1})")]
    PseudoCounts(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    Uniform,
    SpikeSlab,
}

/// Log prior density with position derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorEval {
    pub value: f64,
    pub grad: Vec2,
    pub hessian: Mat2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorDensity {
    kind: PriorKind,
    region_area: f64,
    intersections: Vec<Vec2>,
    intersection_radius: f64,
    affinity: BTreeMap<u32, f64>,
}

fn check_area(area: f64) -> Result<(), PriorError> {
    if area.is_finite() && area > 0.0 {
        Ok(())
    } else {
        Err(PriorError::Area(area))
    }
}

impl PriorDensity {
    pub fn uniform(region_area: f64) -> Result<Self, PriorError> {
        check_area(region_area)?;
        Ok(PriorDensity {
            kind: PriorKind::Uniform,
            region_area,
            intersections: Vec::new(),
            intersection_radius: DEFAULT_INTERSECTION_RADIUS,
            affinity: BTreeMap::new(),
        })
    }

    /// Classes missing from `affinity` have `w = 0`.
    pub fn spike_slab(
        region_area: f64,
        intersections: Vec<Vec2>,
        intersection_radius: f64,
        affinity: BTreeMap<u32, f64>,
    ) -> Result<Self, PriorError> {
        check_area(region_area)?;
        if !(intersection_radius.is_finite() && intersection_radius > 0.0) {
            return Err(PriorError::Radius(intersection_radius));
        }
        if intersections.is_empty() {
            return Err(PriorError::NoIntersections);
        }
        if let Some(k) = intersections.iter().position(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(PriorError::NonFinite(k));
        }
        for (&class_id, &value) in &affinity {
            if !(0.0..=1.0).contains(&value) {
                return Err(PriorError::Affinity { class_id, value });
            }
        }
        Ok(PriorDensity {
            kind: PriorKind::SpikeSlab,
            region_area,
            intersections,
            intersection_radius,
            affinity,
        })
    }

    pub fn kind(&self) -> PriorKind {
        self.kind
    }

    pub fn region_area(&self) -> f64 {
        self.region_area
    }

    pub fn intersections(&self) -> &[Vec2] {
        &self.intersections
    }

    pub fn intersection_radius(&self) -> f64 {
        self.intersection_radius
    }

    pub fn affinity(&self) -> &BTreeMap<u32, f64> {
        &self.affinity
    }

    pub fn affinity_for(&self, class_id: u32) -> f64 {
        self.affinity.get(&class_id).copied().unwrap_or(0.0)
    }

    /// Same prior over a different region area.
    pub fn with_region_area(&self, region_area: f64) -> Result<Self, PriorError> {
        check_area(region_area)?;
        Ok(PriorDensity {
            region_area,
            ..self.clone()
        })
    }

    pub fn with_affinity(&self, affinity: BTreeMap<u32, f64>) -> Result<Self, PriorError> {
        match self.kind {
            PriorKind::Uniform => Ok(self.clone()),
            PriorKind::SpikeSlab => PriorDensity::spike_slab(
                self.region_area,
                self.intersections.clone(),
                self.intersection_radius,
                affinity,
            ),
        }
    }

    /// `log(1 / area)`.
    pub fn log_uniform(&self) -> f64 {
        -self.region_area.ln()
    }

    pub fn log_prior(&self, x: &Vec2, class_id: u32) -> PriorEval {
        match self.kind {
            PriorKind::Uniform => PriorEval {
                value: self.log_uniform(),
                grad: Vec2::zeros(),
                hessian: Mat2::zeros(),
            },
            PriorKind::SpikeSlab => self.mixture(x, self.affinity_for(class_id)),
        }
    }

    fn mixture(&self, x: &Vec2, w: f64) -> PriorEval {
        let s2 = self.intersection_radius * self.intersection_radius;
        let k = self.intersections.len() as f64;
        let log_spike = (w / k).ln() - (2.0 * PI * s2).ln();
        let slab = (-w).ln_1p() - self.region_area.ln();

        let terms: Vec<(f64, Vec2)> = self
            .intersections
            .iter()
            .map(|p| {
                let d = x - p;
                (log_spike - d.norm_squared() / (2.0 * s2), -d / s2)
            })
            .collect();
        let peak = terms.iter().map(|t| t.0).fold(slab, f64::max);
        let mut total = (slab - peak).exp();
        let mut grad = Vec2::zeros();
        let mut second = Mat2::zeros();
        for (t, g) in &terms {
            let wt = (t - peak).exp();
            total += wt;
            grad += g * wt;
            second += (outer(g, g) - Mat2::identity() / s2) * wt;
        }
        grad /= total;
        second /= total;
        PriorEval {
            value: peak + total.ln(),
            grad,
            hessian: second - outer(&grad, &grad),
        }
    }
}

/// Mode of Beta(a, b) on `[0, 1]`; 0.5 when the density has no unique mode.
pub fn beta_mode(a: f64, b: f64) -> f64 {
    match (a > 1.0, b > 1.0) {
        (true, true) => (a - 1.0) / (a + b - 2.0),
        (false, true) => 0.0,
        (true, false) => 1.0,
        (false, false) => 0.5,
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// MAP affinity per class. Classes present in the template's affinity map but
/// absent from `truth` get the Beta mode.
pub fn fit_affinity(
    truth: &[TruthObject],
    template: &PriorDensity,
    pseudo_counts: (f64, f64),
) -> Result<BTreeMap<u32, f64>, PriorError> {
    let (a, b) = pseudo_counts;
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(PriorError::PseudoCounts(a, b));
    }
    if template.intersections.is_empty() {
        return Err(PriorError::NoIntersections);
    }
    let mut by_class: BTreeMap<u32, Vec<Vec2>> = BTreeMap::new();
    for t in truth {
        by_class.entry(t.class_id).or_default().push(t.position);
    }
    let mut out: BTreeMap<u32, f64> = template
        .affinity
        .keys()
        .map(|&c| (c, beta_mode(a, b)))
        .collect();
    let slab = template.with_affinity(BTreeMap::new())?;
    for (class_id, mut positions) in by_class {
        positions.sort_by(|p, q| p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y)));
        // spike density (w = 1) per sign; the mixture is linear in w
        let spikes: Vec<f64> = positions
            .iter()
            .map(|x| slab.mixture(x, 1.0).value.exp())
            .collect();
        let uniform = 1.0 / template.region_area;
        let objective = |w: f64| {
            let data: f64 = spikes
                .iter()
                .map(|s| (w * s + (1.0 - w) * uniform).ln())
                .sum();
            data + (a - 1.0) * w.ln() + (b - 1.0) * (1.0 - w).ln() - ln_beta(a, b)
        };
        out.insert(class_id, golden_max(objective, 0.0, 1.0, GOLDEN_TOL));
    }
    Ok(out)
}
