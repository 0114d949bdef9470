//! On-disk formats. Line-oriented files are JSON lines; blank lines are
//! skipped and every parse error carries its 1-based line number.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use raymap::domain::{make_ray, ObjectHypothesis, Ray, TruthObject, Vec2};
use raymap::eval::Prediction;
use raymap::synth::RaySource;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::CliError;

/// One detection: origin in local metres, bearing angle in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RayRecord {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub conf: f64,
    pub class: u32,
    pub frame: String,
}

impl RayRecord {
    pub fn from_ray(ray: &Ray) -> Self {
        RayRecord {
            x: ray.origin().x,
            y: ray.origin().y,
            theta: ray.angle(),
            conf: ray.confidence(),
            class: ray.class_id(),
            frame: ray.frame_id().to_string(),
        }
    }

    pub fn to_ray(&self) -> Result<Ray, raymap::domain::DomainError> {
        make_ray(
            Vec2::new(self.x, self.y),
            self.theta,
            self.conf,
            self.class,
            self.frame.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthRecord {
    pub x: f64,
    pub y: f64,
    pub class: u32,
}

impl From<&TruthObject> for TruthRecord {
    fn from(t: &TruthObject) -> Self {
        TruthRecord {
            x: t.position.x,
            y: t.position.y,
            class: t.class_id,
        }
    }
}

impl From<&TruthRecord> for TruthObject {
    fn from(t: &TruthRecord) -> Self {
        TruthObject {
            position: Vec2::new(t.x, t.y),
            class_id: t.class,
        }
    }
}

/// One surviving hypothesis. `rays` maps input line index (0-based, blank
/// lines excluded) to assignment marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisRecord {
    pub x: f64,
    pub y: f64,
    pub class: u32,
    pub score: f64,
    #[serde(default)]
    pub existence: f64,
    /// Row-major `[xx, xy, yx, yy]`, m².
    #[serde(default)]
    pub covariance: [f64; 4],
    #[serde(default)]
    pub rays: BTreeMap<usize, f64>,
}

impl HypothesisRecord {
    /// `ray_index` maps batch-local ray indices to input indices.
    pub fn from_hypothesis(h: &ObjectHypothesis, class: u32, ray_index: &[usize]) -> Self {
        let c = &h.covariance;
        HypothesisRecord {
            x: h.position.x,
            y: h.position.y,
            class,
            score: h.score,
            existence: h.existence,
            covariance: [c[(0, 0)], c[(0, 1)], c[(1, 0)], c[(1, 1)]],
            rays: h
                .assignment_marginals
                .iter()
                .map(|(&j, &a)| (ray_index[j], a))
                .collect(),
        }
    }

    pub fn prediction(&self) -> Prediction {
        Prediction {
            position: Vec2::new(self.x, self.y),
            score: self.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadNetwork {
    pub intersections: Vec<[f64; 2]>,
}

impl RoadNetwork {
    pub fn points(&self) -> Vec<Vec2> {
        self.intersections.iter().map(|p| Vec2::new(p[0], p[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvenanceRecord {
    pub source: RaySource,
}

pub fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Parse JSON lines; each record comes with its 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, CliError> {
    let text = read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str(l)
                .map(|v| (k + 1, v))
                .map_err(|e| CliError::Parse {
                    path: path.to_path_buf(),
                    line: k + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

pub fn read_rays(path: &Path) -> Result<Vec<Ray>, CliError> {
    read_jsonl::<RayRecord>(path)?
        .into_iter()
        .map(|(line, r)| {
            r.to_ray().map_err(|e| CliError::Invariant {
                module: "domain",
                message: format!("{}:{line}: {e}", path.display()),
            })
        })
        .collect()
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthObject>, CliError> {
    Ok(read_jsonl::<TruthRecord>(path)?
        .iter()
        .map(|(_, t)| TruthObject::from(t))
        .collect())
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<HypothesisRecord>, CliError> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, h)| h).collect())
}

pub fn jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

pub fn csv_string<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("rows serialize");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(contents.as_bytes())
        .map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Predictions and truth as a GeoJSON FeatureCollection in local metres.
pub fn geojson(predictions: &[HypothesisRecord], truth: &[TruthObject]) -> Value {
    let point = |x: f64, y: f64| json!({ "type": "Point", "coordinates": [x, y] });
    let features: Vec<Value> = predictions
        .iter()
        .map(|h| {
            json!({
                "type": "Feature",
                "geometry": point(h.x, h.y),
                "properties": {
                    "kind": "prediction",
                    "class": h.class,
                    "score": h.score,
                    "existence": h.existence,
                },
            })
        })
        .chain(truth.iter().map(|t| {
            json!({
                "type": "Feature",
                "geometry": point(t.position.x, t.position.y),
                "properties": { "kind": "truth", "class": t.class_id },
            })
        }))
        .collect();
    json!({
        "type": "FeatureCollection",
        "crs_note": "local planar east/north metres; not geodetic",
        "features": features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip_exactly() {
        let r = RayRecord {
            x: 0.1 + 0.2,
            y: -1e-17,
            theta: std::f64::consts::PI / 3.0,
            conf: 0.7,
            class: 4,
            frame: "f\"7".into(),
        };
        let text = jsonl([&r]);
        let back: RayRecord = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(back, r);
        assert_eq!(jsonl([&back]), text);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<TruthRecord>(r#"{"x":1,"y":2,"class":1,"z":0}"#).is_err());
    }

    #[test]
    fn provenance_shape() {
        let p = ProvenanceRecord { source: RaySource::Object(3) };
        assert_eq!(serde_json::to_string(&p).unwrap(), r#"{"source":{"object":3}}"#);
        let c = ProvenanceRecord { source: RaySource::Clutter };
        assert_eq!(serde_json::to_string(&c).unwrap(), r#"{"source":"clutter"}"#);
    }
}
