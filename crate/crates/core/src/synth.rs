//! Synthetic scenes drawn from the generative model.
//!
//! Objects are placed in a rectangular region, camera frames are laid out on
//! a grid, at random, or along a street grid, and every (frame, object) pair
//! yields a ray with the modelled detection probability. Ray origins carry
//! GPS noise, and the bearing is measured from the recorded origin with Von
//! Mises noise at the recorded range, so [`crate::sensor::log_f`] is the exact
//! likelihood of each emitted ray.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    heading, make_ray, wrap_angle, BBox, Ray, SceneBatch, SensorParams, SensorValues, TruthObject,
    Vec2,
};
use crate::math::{sample_standard_normal, sample_von_mises};
use crate::sensor::{detect_prob, kappa, FOV_HALF_WIDTH, MIN_RANGE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic scene configuration: {0}")]
    Config(String),
}

/// Camera placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FrameLayout {
    /// Cameras at cell centres of a square grid, each with `headings` evenly
    /// spaced view directions.
    Grid {
        spacing: f64,
        headings: usize,
        heading_offset_deg: f64,
    },
    Random {
        count: usize,
    },
    /// Cameras every `spacing` metres along the street grid of `roads`,
    /// looking both ways along the street.
    Streets {
        spacing: f64,
    },
}

/// Square street grid; intersections sit at cell corners offset by half a block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadGrid {
    pub block: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    Uniform,
    /// Each object at a random intersection plus isotropic Gaussian jitter.
    NearIntersections { jitter: f64 },
}

/// False objects that attract rays but are not ground truth. Their rays are
/// labelled clutter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Distractors {
    pub count: usize,
    /// Multiplies the modelled detection probability.
    pub detect_scale: f64,
    /// Minimum distance from any intersection, metres.
    pub clearance: f64,
}

impl Default for Distractors {
    fn default() -> Self {
        Distractors {
            count: 0,
            detect_scale: 0.3,
            clearance: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMode {
    Model,
    /// Every frame detects every object.
    Always,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Model,
    /// Exact origins and bearings.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub region_min: [f64; 2],
    pub region_max: [f64; 2],
    pub n_objects: usize,
    pub class_id: u32,
    pub frames: FrameLayout,
    /// Generating sensor parameters.
    pub sensor: SensorValues,
    /// Expected clutter rays per frame.
    pub clutter_rate: f64,
    /// Beta shape of detector confidence on true detections.
    pub confidence_beta: [f64; 2],
    pub clutter_confidence_beta: [f64; 2],
    pub roads: Option<RoadGrid>,
    pub placement: Placement,
    pub distractors: Distractors,
    pub detection: DetectionMode,
    pub noise: NoiseMode,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            region_min: [0.0, 0.0],
            region_max: [500.0, 500.0],
            n_objects: 50,
            class_id: 1,
            frames: FrameLayout::Grid {
                spacing: 25.0,
                headings: 4,
                heading_offset_deg: 0.0,
            },
            sensor: SensorValues::default(),
            clutter_rate: 0.5,
            confidence_beta: [4.0, 2.0],
            clutter_confidence_beta: [2.0, 4.0],
            roads: None,
            placement: Placement::Uniform,
            distractors: Distractors::default(),
            detection: DetectionMode::Model,
            noise: NoiseMode::Model,
            seed: 0,
        }
    }
}

/// Where a generated ray came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaySource {
    /// Index into the ground truth.
    Object(usize),
    Clutter,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Frame {
    pub id: String,
    pub position: Vec2,
    pub heading: f64,
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    /// Bounds are the configured region; noisy origins may fall just outside.
    pub batch: SceneBatch,
    /// One entry per ray.
    pub provenance: Vec<RaySource>,
    pub frames: Vec<Frame>,
    pub intersections: Vec<Vec2>,
    pub distractors: Vec<Vec2>,
}

impl SynthConfig {
    pub fn region(&self) -> Result<BBox, SynthError> {
        BBox::new(
            Vec2::new(self.region_min[0], self.region_min[1]),
            Vec2::new(self.region_max[0], self.region_max[1]),
        )
        .map_err(|e| SynthError::Config(e.to_string()))
    }

    pub fn sensor_params(&self) -> Result<SensorParams, SynthError> {
        SensorParams::new(self.sensor).map_err(|e| SynthError::Config(e.to_string()))
    }

    pub fn intersections(&self) -> Result<Vec<Vec2>, SynthError> {
        let Some(roads) = self.roads else {
            return Ok(Vec::new());
        };
        if !(roads.block > 0.0) {
            return Err(SynthError::Config("road block size must be positive".into()));
        }
        let region = self.region()?;
        let nx = (region.width() / roads.block).floor() as usize;
        let ny = (region.height() / roads.block).floor() as usize;
        let mut out = Vec::with_capacity(nx * ny);
        for i in 0..nx {
            for j in 0..ny {
                out.push(
                    region.min + Vec2::new(i as f64 + 0.5, j as f64 + 0.5) * roads.block,
                );
            }
        }
        Ok(out)
    }
}

fn beta(shape: [f64; 2], what: &str) -> Result<Beta<f64>, SynthError> {
    Beta::new(shape[0], shape[1])
        .map_err(|_| SynthError::Config(format!("invalid {what} Beta shape {shape:?}")))
}

fn frames_for(cfg: &SynthConfig, region: &BBox, intersections: &[Vec2], rng: &mut ChaCha8Rng) -> Result<Vec<Frame>, SynthError> {
    let mut frames = Vec::new();
    let mut push = |position: Vec2, heading: f64| {
        let id = format!("f{}", frames.len());
        frames.push(Frame {
            id,
            position,
            heading: wrap_angle(heading),
        });
    };
    match cfg.frames {
        FrameLayout::Grid {
            spacing,
            headings,
            heading_offset_deg,
        } => {
            if !(spacing > 0.0) || headings == 0 {
                return Err(SynthError::Config("grid frames need positive spacing and headings".into()));
            }
            let nx = (region.width() / spacing).floor().max(1.0) as usize;
            let ny = (region.height() / spacing).floor().max(1.0) as usize;
            for i in 0..nx {
                for j in 0..ny {
                    let p = region.min + Vec2::new(i as f64 + 0.5, j as f64 + 0.5) * spacing;
                    for h in 0..headings {
                        let a = heading_offset_deg.to_radians()
                            + h as f64 * std::f64::consts::TAU / headings as f64;
                        push(p, a);
                    }
                }
            }
        }
        FrameLayout::Random { count } => {
            for _ in 0..count {
                let p = Vec2::new(
                    rng.random_range(region.min.x..region.max.x),
                    rng.random_range(region.min.y..region.max.y),
                );
                push(p, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
            }
        }
        FrameLayout::Streets { spacing } => {
            if cfg.roads.is_none() {
                return Err(SynthError::Config("street frames need a road grid".into()));
            }
            if !(spacing > 0.0) {
                return Err(SynthError::Config("street frame spacing must be positive".into()));
            }
            // east-west streets through each intersection row, then north-south
            let mut rows: Vec<f64> = intersections.iter().map(|p| p.y).collect();
            let mut cols: Vec<f64> = intersections.iter().map(|p| p.x).collect();
            for v in [&mut rows, &mut cols] {
                v.sort_by(f64::total_cmp);
                v.dedup();
            }
            let offset = 0.5 * spacing;
            for &y in &rows {
                let mut x = region.min.x + offset;
                while x < region.max.x {
                    push(Vec2::new(x, y), 0.0);
                    push(Vec2::new(x, y), std::f64::consts::PI);
                    x += spacing;
                }
            }
            for &x in &cols {
                let mut y = region.min.y + offset;
                while y < region.max.y {
                    push(Vec2::new(x, y), 0.5 * std::f64::consts::PI);
                    push(Vec2::new(x, y), -0.5 * std::f64::consts::PI);
                    y += spacing;
                }
            }
        }
    }
    Ok(frames)
}

/// Draws one ray toward `target` from `frame`, or `None` on a miss.
fn observe(
    frame: &Frame,
    target: &Vec2,
    detect_scale: f64,
    cfg: &SynthConfig,
    params: &SensorParams,
    conf_dist: &Beta<f64>,
    rng: &mut ChaCha8Rng,
) -> Option<Ray> {
    let confidence: f64 = conf_dist.sample(rng);
    if cfg.detection == DetectionMode::Model {
        let camera = make_ray(frame.position, frame.heading, confidence, cfg.class_id, "camera").ok()?;
        let p = detect_prob(&camera, target, params).ok()? * detect_scale;
        if !rng.random_bool(p.clamp(0.0, 1.0)) {
            return None;
        }
    }
    let (origin, angle) = match cfg.noise {
        NoiseMode::None => (frame.position, heading(&(target - frame.position))),
        NoiseMode::Model => {
            let s = params.gps_sigma();
            let origin = frame.position
                + Vec2::new(sample_standard_normal(rng), sample_standard_normal(rng)) * s;
            let d = target - origin;
            let r = d.norm();
            if r < MIN_RANGE {
                return None;
            }
            (origin, heading(&d) + sample_von_mises(rng, kappa(r, params)))
        }
    };
    if (target - origin).norm() < MIN_RANGE {
        return None;
    }
    make_ray(origin, angle, confidence, cfg.class_id, &frame.id).ok()
}

/// Generate a scene. Identical configurations give identical scenes.
pub fn generate(cfg: &SynthConfig) -> Result<SynthScene, SynthError> {
    let region = cfg.region()?;
    let params = cfg.sensor_params()?;
    let conf_dist = beta(cfg.confidence_beta, "confidence")?;
    let clutter_conf = beta(cfg.clutter_confidence_beta, "clutter confidence")?;
    if !(cfg.clutter_rate >= 0.0 && cfg.clutter_rate.is_finite()) {
        return Err(SynthError::Config("clutter_rate must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let intersections = cfg.intersections()?;

    let uniform_point = |rng: &mut ChaCha8Rng| {
        Vec2::new(
            rng.random_range(region.min.x..region.max.x),
            rng.random_range(region.min.y..region.max.y),
        )
    };
    let objects: Vec<Vec2> = match cfg.placement {
        Placement::Uniform => (0..cfg.n_objects).map(|_| uniform_point(&mut rng)).collect(),
        Placement::NearIntersections { jitter } => {
            if intersections.is_empty() {
                return Err(SynthError::Config("intersection placement needs a road grid".into()));
            }
            (0..cfg.n_objects)
                .map(|_| {
                    let c = intersections[rng.random_range(0..intersections.len())];
                    c + Vec2::new(sample_standard_normal(&mut rng), sample_standard_normal(&mut rng))
                        * jitter
                })
                .collect()
        }
    };
    let mut distractors = Vec::with_capacity(cfg.distractors.count);
    let mut attempts = 0;
    while distractors.len() < cfg.distractors.count {
        attempts += 1;
        if attempts > 10_000 * (cfg.distractors.count + 1) {
            return Err(SynthError::Config("no room for distractors away from intersections".into()));
        }
        let p = uniform_point(&mut rng);
        if intersections
            .iter()
            .all(|c| (c - p).norm() >= cfg.distractors.clearance)
        {
            distractors.push(p);
        }
    }

    let frames = frames_for(cfg, &region, &intersections, &mut rng)?;
    let clutter_count = if cfg.clutter_rate > 0.0 {
        Some(Poisson::new(cfg.clutter_rate).map_err(|e| SynthError::Config(e.to_string()))?)
    } else {
        None
    };

    let mut rays = Vec::new();
    let mut provenance = Vec::new();
    for frame in &frames {
        for (k, x) in objects.iter().enumerate() {
            if let Some(r) = observe(frame, x, 1.0, cfg, &params, &conf_dist, &mut rng) {
                rays.push(r);
                provenance.push(RaySource::Object(k));
            }
        }
        for x in &distractors {
            if let Some(r) =
                observe(frame, x, cfg.distractors.detect_scale, cfg, &params, &conf_dist, &mut rng)
            {
                rays.push(r);
                provenance.push(RaySource::Clutter);
            }
        }
        let n_clutter = clutter_count.map_or(0, |d| d.sample(&mut rng) as usize);
        for _ in 0..n_clutter {
            let angle = frame.heading + rng.random_range(-FOV_HALF_WIDTH..FOV_HALF_WIDTH);
            let confidence: f64 = clutter_conf.sample(&mut rng);
            let ray = make_ray(frame.position, angle, confidence, cfg.class_id, &frame.id)
                .map_err(|e| SynthError::Config(e.to_string()))?;
            rays.push(ray);
            provenance.push(RaySource::Clutter);
        }
    }

    let truth = objects
        .iter()
        .map(|&position| TruthObject {
            position,
            class_id: cfg.class_id,
        })
        .collect();
    let batch = SceneBatch::new(rays, region, Some(truth), f64::INFINITY)
        .map_err(|e| SynthError::Config(e.to_string()))?;
    Ok(SynthScene {
        batch,
        provenance,
        frames,
        intersections,
        distractors,
    })
}
