//! Run configuration and the parameter checkpoint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use raymap::calibrate::{AdamState, ClassState, TrainOutcome, TrainConfig};
use raymap::cluster::EmConfig;
use raymap::domain::{SensorParams, SensorValues, N_PARAMS};
use raymap::priors::DEFAULT_INTERSECTION_RADIUS;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::formats::read_json;

/// Overrides the config path when `--config` is not given.
pub const CONFIG_ENV: &str = "RAYMAP_CONFIG";

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// m²; defaults to the batch bounding box.
    pub region_area: Option<f64>,
    pub intersection_radius: f64,
    /// Spike weight per class; fitted from truth during training when absent.
    pub affinity: BTreeMap<u32, f64>,
    /// Beta pseudo-counts for the fitted affinity.
    pub pseudo_counts: [f64; 2],
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            region_area: None,
            intersection_radius: DEFAULT_INTERSECTION_RADIUS,
            affinity: BTreeMap::new(),
            pseudo_counts: [2.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub em: EmConfig,
    pub train: TrainConfig,
    /// Initial parameters for every class without its own entry.
    pub sensor: SensorValues,
    pub class_sensor: BTreeMap<u32, SensorValues>,
    pub prior: PriorConfig,
}

impl RunConfig {
    pub fn sensor_for(&self, class_id: u32) -> Result<SensorParams, CliError> {
        let values = self.class_sensor.get(&class_id).unwrap_or(&self.sensor);
        Ok(SensorParams::new(*values)?)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.em.seed = s;
            self.train.seed = s;
        }
        self
    }
}

/// `--config` wins, then the environment variable, then `None`.
pub fn config_path(flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => read_json(p),
        None => Ok(RunConfig::default()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCheckpoint {
    /// Unconstrained coordinates; authoritative.
    pub raw: [f64; N_PARAMS],
    /// Constrained values derived from `raw`, for reading.
    pub values: SensorValues,
    pub adam: AdamState,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub classes: BTreeMap<u32, ClassCheckpoint>,
    #[serde(default)]
    pub affinity: BTreeMap<u32, f64>,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome, affinity: BTreeMap<u32, f64>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            classes: outcome
                .classes
                .iter()
                .map(|(&c, o)| {
                    let s = &o.state;
                    (
                        c,
                        ClassCheckpoint {
                            raw: s.params.unconstrained(),
                            values: s.params.values(),
                            adam: s.adam.clone(),
                            step: s.step,
                        },
                    )
                })
                .collect(),
            affinity,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let ckpt: Checkpoint = read_json(path)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CliError::input(
                path,
                format!("checkpoint version {} is not {CHECKPOINT_VERSION}", ckpt.version),
            ));
        }
        for c in ckpt.classes.values() {
            if c.adam.m.len() != N_PARAMS || c.adam.v.len() != N_PARAMS || c.adam.t.len() != N_PARAMS {
                return Err(CliError::input(path, "optimizer state must have 8 coordinates"));
            }
        }
        Ok(ckpt)
    }

    pub fn states(&self) -> Result<BTreeMap<u32, ClassState>, CliError> {
        self.classes
            .iter()
            .map(|(&c, k)| {
                Ok((
                    c,
                    ClassState {
                        params: SensorParams::from_unconstrained(k.raw)?,
                        adam: k.adam.clone(),
                        step: k.step,
                    },
                ))
            })
            .collect()
    }

    pub fn params(&self, class_id: u32) -> Result<Option<SensorParams>, CliError> {
        self.classes
            .get(&class_id)
            .map(|k| SensorParams::from_unconstrained(k.raw).map_err(CliError::from))
            .transpose()
    }
}
