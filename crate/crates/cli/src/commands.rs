use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use raymap::calibrate::{train, ClassState};
use raymap::cluster::run_em;
use raymap::domain::{SceneBatch, TruthObject, Vec2};
use raymap::eval::{match_predictions, matched_rmse, pr_curve, score_thresholds, Prediction};
use raymap::priors::{fit_affinity, PriorDensity};
use raymap::synth::{generate, SynthConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::args::{ClusterArgs, EvalArgs, PriorArgs, PriorChoice, SynthArgs, TrainArgs};
use crate::config::{config_path, load_config, Checkpoint, PriorConfig, RunConfig};
use crate::error::{CliError, EXIT_DEGENERATE_TRAINING, EXIT_OK};
use crate::formats::{
    csv_string, geojson, jsonl, pretty, read_hypotheses, read_json, read_rays, read_truth,
    write_atomic, HypothesisRecord, ProvenanceRecord, RayRecord, RoadNetwork, TruthRecord,
};

/// What a command did, for the manifest.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub status: u8,
}

struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Outputs {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        }
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        write_atomic(&path, contents)?;
        self.written.push(path);
        Ok(())
    }
}

/// The snapshot from a manifest when replaying, else the file.
fn resolve<T: DeserializeOwned + Default>(
    snapshot: Option<&Value>,
    path: Option<&Path>,
) -> Result<T, CliError> {
    match snapshot {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| CliError::Usage(format!("manifest config snapshot: {e}"))),
        None => match path {
            Some(p) => read_json(p),
            None => Ok(T::default()),
        },
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

fn run_config(
    flag: Option<&Path>,
    seed: Option<u64>,
    snapshot: Option<&Value>,
    inputs: &mut Vec<PathBuf>,
) -> Result<RunConfig, CliError> {
    let path = config_path(flag);
    let cfg = match snapshot {
        Some(_) => resolve(snapshot, None)?,
        None => {
            inputs.extend(path.clone());
            load_config(path.as_deref())?
        }
    };
    Ok(cfg.with_seed(seed))
}

fn road_network(args: &PriorArgs, inputs: &mut Vec<PathBuf>) -> Result<Option<Vec<Vec2>>, CliError> {
    let Some(path) = &args.road_network else {
        if args.prior == PriorChoice::SpikeSlab {
            return Err(CliError::Usage("--prior spike-slab needs --road-network".into()));
        }
        return Ok(None);
    };
    inputs.push(path.clone());
    let net: RoadNetwork = read_json(path)?;
    Ok(Some(net.points()))
}

fn build_prior(
    choice: PriorChoice,
    cfg: &PriorConfig,
    roads: Option<&[Vec2]>,
    area: f64,
    affinity: BTreeMap<u32, f64>,
) -> Result<PriorDensity, CliError> {
    Ok(match (choice, roads) {
        (PriorChoice::SpikeSlab, Some(points)) => {
            PriorDensity::spike_slab(area, points.to_vec(), cfg.intersection_radius, affinity)?
        }
        _ => PriorDensity::uniform(area)?,
    })
}

/// Bounding-box area, floored at 1 m² so single-point batches stay valid.
fn region_area(cfg: &PriorConfig, batches: &[SceneBatch]) -> f64 {
    cfg.region_area.unwrap_or_else(|| {
        batches
            .iter()
            .map(|b| b.bounds().area())
            .fold(1.0, f64::max)
    })
}

pub fn cluster(a: &ClusterArgs, snapshot: Option<&Value>) -> Result<RunRecord, CliError> {
    let mut inputs = vec![a.rays.clone()];
    let cfg = run_config(a.run.config.as_deref(), a.run.seed, snapshot, &mut inputs)?;
    let em = if a.prediction_mode {
        cfg.em.prediction_mode()
    } else {
        cfg.em
    };
    em.validate()?;
    let rays = read_rays(&a.rays)?;
    let truth = match &a.truth {
        Some(p) => {
            inputs.push(p.clone());
            Some(read_truth(p)?)
        }
        None => None,
    };
    let ckpt = match &a.params {
        Some(p) => {
            inputs.push(p.clone());
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    let roads = road_network(&a.prior, &mut inputs)?;

    let batch = SceneBatch::from_rays(rays, truth.clone(), 0.0);
    let area = region_area(&cfg.prior, std::slice::from_ref(&batch));
    let mut affinity = cfg.prior.affinity.clone();
    if let Some(c) = &ckpt {
        affinity.extend(c.affinity.iter().map(|(&k, &v)| (k, v)));
    }
    let prior = build_prior(a.prior.prior, &cfg.prior, roads.as_deref(), area, affinity)?;

    let mut records = Vec::new();
    for class_id in batch.classes() {
        let sub = batch.for_class(class_id);
        if sub.is_empty() {
            continue;
        }
        if a.prior.prior == PriorChoice::SpikeSlab && !prior.affinity().contains_key(&class_id) {
            warn!("class {class_id} has no intersection affinity; its prior is uniform");
        }
        let ray_index: Vec<usize> = batch
            .rays()
            .iter()
            .enumerate()
            .filter(|(_, r)| r.class_id() == class_id)
            .map(|(k, _)| k)
            .collect();
        let params = match ckpt.as_ref().map(|c| c.params(class_id)).transpose()?.flatten() {
            Some(p) => p,
            None => cfg.sensor_for(class_id)?,
        };
        let result = run_em(&sub, &params, &prior, &em)?;
        info!(
            "class {class_id}: {} rays, {} hypotheses",
            sub.rays().len(),
            result.hypotheses.len()
        );
        records.extend(
            result
                .hypotheses
                .iter()
                .map(|h| HypothesisRecord::from_hypothesis(h, class_id, &ray_index)),
        );
    }

    let mut out = Outputs::new(&a.run.out);
    out.write("hypotheses.jsonl", &jsonl(&records))?;
    let shown: Vec<HypothesisRecord> = records
        .iter()
        .filter(|h| h.score >= a.threshold)
        .cloned()
        .collect();
    let truth_shown = truth.unwrap_or_default();
    out.write("predictions.geojson", &pretty(&geojson(&shown, &truth_shown)))?;
    Ok(RunRecord {
        config: to_value(&cfg),
        seed: Some(cfg.em.seed),
        inputs,
        outputs: out.written,
        out_dir: a.run.out.clone(),
        status: EXIT_OK,
    })
}

/// `*.jsonl` files directly inside `dir`, sorted by name.
fn batch_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn train_cmd(a: &TrainArgs, snapshot: Option<&Value>) -> Result<RunRecord, CliError> {
    let mut inputs = Vec::new();
    let cfg = run_config(a.run.config.as_deref(), a.run.seed, snapshot, &mut inputs)?;
    let files = batch_files(&a.rays_dir)?;
    if files.is_empty() {
        return Err(CliError::input(&a.rays_dir, "no *.jsonl batch files"));
    }
    let mut batches = Vec::with_capacity(files.len());
    for f in &files {
        inputs.push(f.clone());
        let rays = read_rays(f)?;
        let truth_path = a
            .truth_dir
            .as_ref()
            .map(|d| d.join(f.file_name().expect("listed files have names")))
            .filter(|p| p.is_file());
        let truth = match truth_path {
            Some(p) => {
                inputs.push(p.clone());
                Some(read_truth(&p)?)
            }
            None => None,
        };
        batches.push(SceneBatch::from_rays(rays, truth, 0.0));
    }
    let labeled = batches.iter().filter(|b| b.ground_truth().is_some()).count();

    let resume = match &a.init {
        Some(p) => {
            inputs.push(p.clone());
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    let classes: BTreeSet<u32> = batches.iter().flat_map(|b| b.classes()).collect();
    let mut resumed = resume.as_ref().map(Checkpoint::states).transpose()?.unwrap_or_default();
    let mut init = BTreeMap::new();
    for &c in &classes {
        let state = match resumed.remove(&c) {
            Some(s) => s,
            None => ClassState::fresh(cfg.sensor_for(c)?),
        };
        init.insert(c, state);
    }

    let roads = road_network(&a.prior, &mut inputs)?;
    let area = region_area(&cfg.prior, &batches);
    let mut affinity = cfg.prior.affinity.clone();
    if let Some(c) = &resume {
        affinity.extend(c.affinity.iter().map(|(&k, &v)| (k, v)));
    }
    if let (PriorChoice::SpikeSlab, Some(points)) = (a.prior.prior, roads.as_deref()) {
        let unfitted: BTreeMap<u32, f64> = classes
            .iter()
            .filter(|c| !affinity.contains_key(c))
            .map(|&c| (c, 0.0))
            .collect();
        if !unfitted.is_empty() {
            let truth: Vec<TruthObject> = batches
                .iter()
                .filter_map(|b| b.ground_truth())
                .flatten()
                .copied()
                .collect();
            let template = PriorDensity::spike_slab(area, points.to_vec(), cfg.prior.intersection_radius, unfitted)?;
            let [pa, pb] = cfg.prior.pseudo_counts;
            affinity.extend(fit_affinity(&truth, &template, (pa, pb))?);
        }
    }
    let prior = build_prior(a.prior.prior, &cfg.prior, roads.as_deref(), area, affinity.clone())?;

    let outcome = train(&batches, init, &prior, &cfg.em, &cfg.train)?;
    let mut ckpt = Checkpoint::from_outcome(&outcome, affinity);
    // classes absent from these batches pass through unchanged
    if let Some(r) = resume {
        for (c, k) in r.classes {
            ckpt.classes.entry(c).or_insert(k);
        }
    }

    let mut out = Outputs::new(&a.run.out);
    out.write("params.json", &pretty(&ckpt))?;
    out.write("trace.csv", &csv_string(&outcome.trace))?;
    let status = if labeled == 0 {
        warn!("no batch has ground truth; training fits the prior only");
        EXIT_DEGENERATE_TRAINING
    } else {
        EXIT_OK
    };
    Ok(RunRecord {
        config: to_value(&cfg),
        seed: Some(cfg.train.seed),
        inputs,
        outputs: out.written,
        out_dir: a.run.out.clone(),
        status,
    })
}

#[derive(Debug, Serialize)]
struct MetricsRow {
    class: u32,
    threshold: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    auc: f64,
    rmse: Option<f64>,
}

#[derive(Debug, Serialize)]
struct PrRow {
    class: u32,
    threshold: f64,
    precision: f64,
    recall: f64,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
}

pub fn eval_cmd(a: &EvalArgs) -> Result<RunRecord, CliError> {
    let preds = read_hypotheses(&a.pred)?;
    let truth = read_truth(&a.truth)?;
    let pred_classes: BTreeSet<u32> = preds.iter().map(|h| h.class).collect();
    let truth_classes: BTreeSet<u32> = truth.iter().map(|t| t.class_id).collect();
    let unmatched: Vec<u32> = pred_classes.difference(&truth_classes).copied().collect();
    if !unmatched.is_empty() {
        warn!("classes {unmatched:?} have predictions but no truth; skipped");
    }
    let unpredicted: Vec<u32> = truth_classes.difference(&pred_classes).copied().collect();
    if !unpredicted.is_empty() {
        warn!("classes {unpredicted:?} have truth but no predictions");
    }

    let mut metrics = Vec::new();
    let mut pr = Vec::new();
    for &class in &truth_classes {
        let p: Vec<Prediction> = preds
            .iter()
            .filter(|h| h.class == class)
            .map(HypothesisRecord::prediction)
            .collect();
        let t: Vec<Vec2> = truth
            .iter()
            .filter(|o| o.class_id == class)
            .map(|o| o.position)
            .collect();
        let thresholds = a.thresholds.clone().unwrap_or_else(|| score_thresholds(&p));
        let curve = pr_curve(&p, &t, a.radius, &thresholds)?;
        let kept: Vec<Prediction> = p.iter().filter(|x| x.score >= a.threshold).copied().collect();
        let m = match_predictions(&kept, &t, a.radius)?;
        metrics.push(MetricsRow {
            class,
            threshold: a.threshold,
            precision: m.precision(),
            recall: m.recall(),
            f1: m.f1(),
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
            auc: curve.auc,
            rmse: matched_rmse(&kept, &t, &m),
        });
        pr.extend(curve.points.iter().map(|q| PrRow {
            class,
            threshold: q.threshold,
            precision: q.precision,
            recall: q.recall,
            tp: q.tp,
            fp: q.fp,
            fn_: q.fn_,
        }));
    }

    let mut out = Outputs::new(&a.out);
    out.write("metrics.csv", &csv_string(&metrics))?;
    out.write("pr_curve.csv", &csv_string(&pr))?;
    Ok(RunRecord {
        config: serde_json::json!({
            "radius": a.radius,
            "threshold": a.threshold,
            "thresholds": a.thresholds,
        }),
        seed: None,
        inputs: vec![a.pred.clone(), a.truth.clone()],
        outputs: out.written,
        out_dir: a.out.clone(),
        status: EXIT_OK,
    })
}

pub fn synth_cmd(a: &SynthArgs, snapshot: Option<&Value>) -> Result<RunRecord, CliError> {
    let mut cfg: SynthConfig = resolve(snapshot, a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let scene = generate(&cfg)?;
    let mut out = Outputs::new(&a.out);
    out.write("rays.jsonl", &jsonl(scene.batch.rays().iter().map(RayRecord::from_ray)))?;
    let truth = scene.batch.ground_truth().unwrap_or_default();
    out.write("truth.jsonl", &jsonl(truth.iter().map(TruthRecord::from)))?;
    out.write(
        "provenance.jsonl",
        &jsonl(scene.provenance.iter().map(|&source| ProvenanceRecord { source })),
    )?;
    if !scene.intersections.is_empty() {
        let net = RoadNetwork {
            intersections: scene.intersections.iter().map(|p| [p.x, p.y]).collect(),
        };
        out.write("road_network.json", &pretty(&net))?;
    }
    Ok(RunRecord {
        config: to_value(&cfg),
        seed: Some(cfg.seed),
        inputs: a.config.iter().cloned().filter(|_| snapshot.is_none()).collect(),
        outputs: out.written,
        out_dir: a.out.clone(),
        status: EXIT_OK,
    })
}
