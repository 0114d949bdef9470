//! Variational calibration of per-class sensor parameters.
//!
//! The variational distribution is the solver's output held fixed: an
//! independent Categorical per ray over its gated objects plus the null
//! option, and an independent Bernoulli per object. Discrete variables are
//! summed out in closed form, so the bound and its parameter gradient are
//! exact given that distribution.

use std::collections::BTreeMap;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assoc::{run_bp, AssocError, AssociationProblem, Marginals};
use crate::cluster::{build_edges, run_em, ClusterError, ClusterResult, EmConfig};
use crate::domain::{DomainError, Ray, SceneBatch, SensorParams, Vec2, N_PARAMS};
use crate::math::{log_sigmoid, sigmoid};
use crate::priors::PriorDensity;
use crate::sensor::{assignment_potential, existence_potential, log_f_mixed, SensorError};
use crate::solver::{posterior_covariance, MStepObjective};

/// Per-ray normalization slack accepted in frozen marginals.
pub const MARGINAL_TOL: f64 = 1e-6;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("inconsistent marginals: {0}")]
    Inconsistent(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no batch contains class {0}")]
    NoBatches(u32),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Assoc(#[from] AssocError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// The solver's output, frozen for one bound evaluation.
#[derive(Debug, Clone, Copy)]
pub struct FrozenPosterior<'a> {
    pub rays: &'a [Ray],
    pub positions: &'a [Vec2],
    pub problem: &'a AssociationProblem,
    pub marginals: &'a Marginals,
    pub class_id: u32,
}

impl<'a> FrozenPosterior<'a> {
    /// `None` for a result without a class, which has nothing to score.
    pub fn from_result(batch: &'a SceneBatch, result: &'a ClusterResult) -> Option<Self> {
        Some(FrozenPosterior {
            rays: batch.rays(),
            positions: &result.positions,
            problem: &result.problem,
            marginals: &result.marginals,
            class_id: result.class_id?,
        })
    }

    fn check(&self) -> Result<(), CalibrateError> {
        let p = self.problem;
        let m = self.marginals;
        let fail = |msg: String| Err(CalibrateError::Inconsistent(msg));
        if self.positions.len() != p.n_objects()
            || m.existence.len() != p.n_objects()
            || m.assignment.len() != p.edges().len()
            || m.null_mass.len() != p.n_rays()
            || self.rays.len() != p.n_rays()
        {
            return fail("lengths disagree with the association problem".into());
        }
        for j in 0..p.n_rays() {
            let total: f64 =
                m.null_mass[j] + p.ray_edges(j).iter().map(|&k| m.assignment[k]).sum::<f64>();
            if !((total - 1.0).abs() <= MARGINAL_TOL) {
                return fail(format!("ray {j} sums to {total}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElboReport {
    pub elbo: f64,
    pub data_term: f64,
    pub entropy_term: f64,
    pub prior_term: f64,
    /// Derivative of `elbo` in each unconstrained parameter coordinate.
    pub grad_params: [f64; N_PARAMS],
}

impl ElboReport {
    pub fn is_finite(&self) -> bool {
        self.elbo.is_finite() && self.grad_params.iter().all(|g| g.is_finite())
    }
}

/// `x log x` with `0 log 0 = 0`.
fn x_ln_x(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

fn bernoulli_entropy(p: f64) -> f64 {
    -(x_ln_x(p) + x_ln_x(1.0 - p))
}

/// Per-object contribution: value, parameter gradient and position gradient
/// of the data and prior terms.
struct ObjectTerms {
    data: f64,
    prior: f64,
    grad_params: [f64; N_PARAMS],
    grad_position: Vec2,
}

fn object_terms(
    post: &FrozenPosterior,
    i: usize,
    params: &SensorParams,
    prior: &PriorDensity,
) -> Result<ObjectTerms, CalibrateError> {
    let x = &post.positions[i];
    let edges = post.problem.object_edges(i);
    let e_bar = post.marginals.existence[i];
    let mut out = ObjectTerms {
        data: 0.0,
        prior: 0.0,
        grad_params: [0.0; N_PARAMS],
        grad_position: Vec2::zeros(),
    };

    let existence = existence_potential(
        x,
        edges.iter().map(|&k| &post.rays[post.problem.edges()[k].ray]),
        params,
    )?;
    let l = existence.log_density;
    out.data += e_bar * log_sigmoid(l) + (1.0 - e_bar) * log_sigmoid(-l);
    let w = e_bar - sigmoid(l);
    for (g, d) in out.grad_params.iter_mut().zip(&existence.grad_params) {
        *g += w * d;
    }
    out.grad_position += existence.grad_position * w;

    for &k in edges {
        let a = post.marginals.assignment[k];
        if a == 0.0 {
            continue;
        }
        let ray = &post.rays[post.problem.edges()[k].ray];
        let psi = assignment_potential(ray, x, params)?.composed();
        out.data += a * psi.log_density;
        for (g, d) in out.grad_params.iter_mut().zip(&psi.grad_params) {
            *g += a * d;
        }
        out.grad_position += psi.grad_position * a;
    }

    let lp = prior.log_prior(x, post.class_id);
    out.prior = e_bar * lp.value;
    out.grad_position += lp.grad * e_bar;
    Ok(out)
}

fn entropy(post: &FrozenPosterior) -> f64 {
    let m = post.marginals;
    let categorical: f64 = m.assignment.iter().chain(&m.null_mass).map(|&p| -x_ln_x(p)).sum();
    let bernoulli: f64 = m.existence.iter().map(|&p| bernoulli_entropy(p)).sum();
    categorical + bernoulli
}

/// Evidence lower bound at fixed assignments and positions.
pub fn elbo(
    post: &FrozenPosterior,
    params: &SensorParams,
    prior: &PriorDensity,
) -> Result<ElboReport, CalibrateError> {
    elbo_impl(post, params, prior, None)
}

/// As [`elbo`], but also differentiates each position through the
/// stationarity of the final Newton solve: `H · dx/dθ = −∂g/∂θ`. Exact when
/// the positions minimize the M-step loss under the frozen assignments.
pub fn elbo_implicit_positions(
    post: &FrozenPosterior,
    params: &SensorParams,
    prior: &PriorDensity,
    eig_floor: f64,
) -> Result<ElboReport, CalibrateError> {
    elbo_impl(post, params, prior, Some(eig_floor))
}

fn elbo_impl(
    post: &FrozenPosterior,
    params: &SensorParams,
    prior: &PriorDensity,
    implicit_floor: Option<f64>,
) -> Result<ElboReport, CalibrateError> {
    post.check()?;
    let mut report = ElboReport {
        elbo: 0.0,
        data_term: 0.0,
        entropy_term: entropy(post),
        prior_term: 0.0,
        grad_params: [0.0; N_PARAMS],
    };
    let objective = implicit_floor.map(|floor| {
        (
            MStepObjective {
                problem: post.problem,
                marginals: post.marginals,
                rays: post.rays,
                params,
                prior,
                class_id: post.class_id,
            },
            floor,
        )
    });
    for i in 0..post.positions.len() {
        let t = object_terms(post, i, params, prior)?;
        report.data_term += t.data;
        report.prior_term += t.prior;
        for (g, d) in report.grad_params.iter_mut().zip(&t.grad_params) {
            *g += d;
        }
        if let Some((objective, floor)) = &objective {
            let x = &post.positions[i];
            let (_, _, hess, _) = objective.object_term(i, x);
            let cov = posterior_covariance(&hess, *floor);
            // ∂g/∂θ = −Σ ā ∂(∇log f)/∂θ, so dx/dθ = cov · Σ ā ∂(∇log f)/∂θ
            let mut mixed = [Vec2::zeros(); N_PARAMS];
            for &k in post.problem.object_edges(i) {
                let a = post.marginals.assignment[k];
                if a == 0.0 {
                    continue;
                }
                let ray = &post.rays[post.problem.edges()[k].ray];
                for (m, d) in mixed.iter_mut().zip(log_f_mixed(ray, x, params)?) {
                    *m += d * a;
                }
            }
            for (g, m) in report.grad_params.iter_mut().zip(&mixed) {
                *g += t.grad_position.dot(&(cov * m));
            }
        }
    }
    report.elbo = report.data_term + report.entropy_term + report.prior_term;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Bias-corrected Adam moments for a minimization problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Per-coordinate update count.
    pub t: Vec<u64>,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: vec![0; dim],
        }
    }
}

/// One Adam update of `theta` against `grad`, touching only coordinates
/// with `mask[k]` set.
pub fn adam_step(
    state: &mut AdamState,
    theta: &mut [f64],
    grad: &[f64],
    learning_rate: f64,
    mask: &[bool],
) {
    assert!(
        theta.len() == state.m.len() && grad.len() == theta.len() && mask.len() == theta.len(),
        "adam shapes disagree"
    );
    for k in 0..theta.len() {
        if !mask[k] {
            continue;
        }
        let g = grad[k];
        state.t[k] += 1;
        state.m[k] = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g;
        state.v[k] = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * g * g;
        let t = state.t[k] as i32;
        let m_hat = state.m[k] / (1.0 - ADAM_BETA1.powi(t));
        let v_hat = state.v[k] / (1.0 - ADAM_BETA2.powi(t));
        theta[k] -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplies the learning rate after each pass over a class's batches.
    pub decay: f64,
    /// Optimizer steps per class.
    pub steps: usize,
    pub seed: u64,
    /// Hold positions fixed when differentiating; when off, unlabeled
    /// batches also differentiate positions through the final Newton solve.
    pub detach_inner: bool,
    /// Coordinates the optimizer may move, in parameter order.
    pub trainable: [bool; N_PARAMS],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            decay: 0.7,
            steps: 200,
            seed: 0,
            detach_inner: true,
            trainable: [true; N_PARAMS],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CalibrateError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(CalibrateError::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(CalibrateError::Config(format!(
                "decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        Ok(())
    }
}

/// Optimizer state of one class; enough to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassState {
    pub params: SensorParams,
    pub adam: AdamState,
    /// Steps already taken, including skipped ones.
    pub step: usize,
}

impl ClassState {
    pub fn fresh(params: SensorParams) -> Self {
        ClassState {
            params,
            adam: AdamState::new(N_PARAMS),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub class_id: u32,
    pub step: usize,
    pub epoch: usize,
    /// Index into the caller's batch list.
    pub batch: usize,
    pub labeled: bool,
    pub learning_rate: f64,
    pub elbo: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassOutcome {
    pub state: ClassState,
    /// Batches with ground truth among those seen by this class.
    pub labeled_batches: usize,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub classes: BTreeMap<u32, ClassOutcome>,
    pub trace: Vec<TraceRow>,
}

impl TrainOutcome {
    pub fn params(&self) -> BTreeMap<u32, SensorParams> {
        self.classes.iter().map(|(c, o)| (*c, o.state.params)).collect()
    }
}

/// Visit order of one epoch for one class, a pure function of its inputs
/// so classes and resumed runs see the same schedule.
fn epoch_order(n: usize, seed: u64, class_id: u32, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class_id as u64) << 32) | epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Bound for one class batch at the current parameters: labeled batches
/// score the truth positions after BP alone, unlabeled ones the EM output.
fn batch_elbo(
    batch: &SceneBatch,
    params: &SensorParams,
    prior: &PriorDensity,
    em: &EmConfig,
    detach_inner: bool,
    class_id: u32,
) -> Result<ElboReport, CalibrateError> {
    match batch.ground_truth() {
        Some(truth) => {
            let positions: Vec<Vec2> = truth.iter().map(|t| t.position).collect();
            let problem = build_edges(&positions, batch.rays(), params, em)?;
            let marginals = run_bp(&problem, &em.bp())?;
            let post = FrozenPosterior {
                rays: batch.rays(),
                positions: &positions,
                problem: &problem,
                marginals: &marginals,
                class_id,
            };
            elbo(&post, params, prior)
        }
        None => {
            let result = run_em(batch, params, prior, em)?;
            let post = FrozenPosterior {
                rays: batch.rays(),
                positions: &result.positions,
                problem: &result.problem,
                marginals: &result.marginals,
                class_id,
            };
            if detach_inner {
                elbo(&post, params, prior)
            } else {
                elbo_implicit_positions(&post, params, prior, em.eig_floor)
            }
        }
    }
}

/// Train every class in `init` independently for `cfg.steps` further steps.
pub fn train(
    batches: &[SceneBatch],
    init: BTreeMap<u32, ClassState>,
    prior: &PriorDensity,
    em: &EmConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, CalibrateError> {
    cfg.validate()?;
    em.validate()?;
    let mut outcome = TrainOutcome {
        classes: BTreeMap::new(),
        trace: Vec::new(),
    };
    for (class_id, state) in init {
        let (class_outcome, trace) = train_class(batches, class_id, state, prior, em, cfg)?;
        outcome.classes.insert(class_id, class_outcome);
        outcome.trace.extend(trace);
    }
    Ok(outcome)
}

fn train_class(
    batches: &[SceneBatch],
    class_id: u32,
    mut state: ClassState,
    prior: &PriorDensity,
    em: &EmConfig,
    cfg: &TrainConfig,
) -> Result<(ClassOutcome, Vec<TraceRow>), CalibrateError> {
    let own: Vec<(usize, SceneBatch)> = batches
        .iter()
        .enumerate()
        .filter(|(_, b)| b.classes().contains(&class_id))
        .map(|(k, b)| (k, b.for_class(class_id)))
        .collect();
    if own.is_empty() {
        return Err(CalibrateError::NoBatches(class_id));
    }
    let labeled_batches = own.iter().filter(|(_, b)| b.ground_truth().is_some()).count();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut skipped_steps = 0;
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;

    for _ in 0..cfg.steps {
        let epoch = state.step / own.len();
        if epoch != order_epoch {
            order = epoch_order(own.len(), cfg.seed, class_id, epoch);
            order_epoch = epoch;
        }
        let (batch_index, batch) = &own[order[state.step % own.len()]];
        let lr = cfg.learning_rate * cfg.decay.powi(epoch as i32);
        let report = batch_elbo(batch, &state.params, prior, em, cfg.detach_inner, class_id)?;
        let skipped = !report.is_finite();
        if skipped {
            skipped_steps += 1;
            warn!("class {class_id} step {}: non-finite bound on batch {batch_index}, step skipped", state.step);
        } else {
            let mut theta = state.params.unconstrained();
            let descent = report.grad_params.map(|g| -g);
            adam_step(&mut state.adam, &mut theta, &descent, lr, &cfg.trainable);
            match SensorParams::from_unconstrained(theta) {
                Ok(p) => state.params = p,
                Err(e) => {
                    skipped_steps += 1;
                    warn!("class {class_id} step {}: update rejected ({e})", state.step);
                }
            }
        }
        debug!("class {class_id} step {} batch {batch_index}: elbo {}", state.step, report.elbo);
        trace.push(TraceRow {
            class_id,
            step: state.step,
            epoch,
            batch: *batch_index,
            labeled: batch.ground_truth().is_some(),
            learning_rate: lr,
            elbo: report.elbo,
            skipped,
        });
        state.step += 1;
    }
    Ok((
        ClassOutcome {
            state,
            labeled_batches,
            skipped_steps,
        },
        trace,
    ))
}
