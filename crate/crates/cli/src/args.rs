use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Clone, Parser)]
#[command(name = "raymap", version, about = "Map objects from bearing-only detections")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Cluster rays into object hypotheses.
    Cluster(ClusterArgs),
    /// Fit per-class sensor parameters on ray batches.
    Train(TrainArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic scene.
    Synth(SynthArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PriorChoice {
    Uniform,
    SpikeSlab,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON run configuration; falls back to $RAYMAP_CONFIG.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PriorArgs {
    #[arg(long, value_enum, default_value_t = PriorChoice::Uniform)]
    pub prior: PriorChoice,
    /// `{"intersections": [[x, y], ...]}`; required by the spike-slab prior.
    #[arg(long)]
    pub road_network: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub prior: PriorArgs,
    /// Rays, JSON lines.
    #[arg(long)]
    pub rays: PathBuf,
    /// Parameter checkpoint from `train`; classes it lacks use the config.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Truth, JSON lines; copied into the GeoJSON overlay.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Looser pruning for sparsely observed objects.
    #[arg(long)]
    pub prediction_mode: bool,
    /// Minimum score for the GeoJSON overlay.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub prior: PriorArgs,
    /// Directory of ray batches, one `*.jsonl` file each.
    #[arg(long)]
    pub rays_dir: PathBuf,
    /// Truth files named like the batch they label.
    #[arg(long)]
    pub truth_dir: Option<PathBuf>,
    /// Checkpoint to resume from.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Hypotheses, JSON lines.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Matching radius, metres.
    #[arg(long, default_value_t = 10.0)]
    pub radius: f64,
    /// Operating point for the metrics row.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Strictly descending sweep; defaults to the distinct prediction scores.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Scene configuration, JSON; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write here instead of the recorded output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Cluster(_) => "cluster",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Synth(_) => "synth",
            Command::Replay(_) => "replay",
        }
    }

    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut out: Vec<&mut PathBuf> = Vec::new();
        match self {
            Command::Cluster(a) => {
                out.extend([&mut a.run.out, &mut a.rays]);
                out.extend(a.run.config.as_mut());
                out.extend(a.prior.road_network.as_mut());
                out.extend(a.params.as_mut());
                out.extend(a.truth.as_mut());
            }
            Command::Train(a) => {
                out.extend([&mut a.run.out, &mut a.rays_dir]);
                out.extend(a.run.config.as_mut());
                out.extend(a.prior.road_network.as_mut());
                out.extend(a.truth_dir.as_mut());
                out.extend(a.init.as_mut());
            }
            Command::Eval(a) => out.extend([&mut a.pred, &mut a.truth, &mut a.out]),
            Command::Synth(a) => {
                out.push(&mut a.out);
                out.extend(a.config.as_mut());
            }
            Command::Replay(a) => {
                out.push(&mut a.manifest);
                out.extend(a.out.as_mut());
            }
        }
        out
    }

    /// Resolve relative paths against `base`.
    pub fn absolutize(&mut self, base: &std::path::Path) {
        for p in self.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn out_dir_mut(&mut self) -> Option<&mut PathBuf> {
        match self {
            Command::Cluster(a) => Some(&mut a.run.out),
            Command::Train(a) => Some(&mut a.run.out),
            Command::Eval(a) => Some(&mut a.out),
            Command::Synth(a) => Some(&mut a.out),
            Command::Replay(_) => None,
        }
    }
}
