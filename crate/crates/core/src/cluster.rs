//! EM driver: seed candidates at ray intersections, then alternate loopy BP
//! over a gated sparse edge set with one Newton step on positions, pruning
//! and merging after every round.

use std::collections::{BTreeMap, HashMap};

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assoc::{run_bp, AssocError, AssociationProblem, BpConfig, Edge, Marginals};
use crate::domain::{Mat2, ObjectHypothesis, Ray, SceneBatch, SensorParams, Vec2};
use crate::grid::{cell_of, GridIndex};
use crate::math::{outer, sigmoid, SymEigen2};
use crate::priors::PriorDensity;
use crate::sensor::{assignment_potential, kappa, log_miss_prob, Geometry, MIN_RANGE};
use crate::solver::{newton_step, posterior_covariance, MStepObjective, NewtonConfig, SolverError};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("invalid EM configuration: {0}")]
    Config(String),
    #[error("batch mixes classes {0} and {1}; cluster one class at a time")]
    MixedClasses(u32, u32),
    #[error(transparent)]
    Assoc(#[from] AssocError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// EM settings. Angles are in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub em_iters: usize,
    pub bp_iters: usize,
    pub bp_damping: f64,
    /// Metres.
    pub merge_radius: f64,
    pub eccentricity_max: f64,
    /// m².
    pub variance_max: f64,
    pub existence_min: f64,
    /// Metres; rays farther than this from an object never attach to it.
    pub edge_radius: f64,
    /// Metres; grid cell for binning seed intersections.
    pub init_cell: f64,
    /// Intersections a cell needs before it seeds a candidate.
    pub init_min_intersections: usize,
    /// Seed only at cells that dominate their 3×3 neighbourhood.
    pub init_local_max: bool,
    /// Smallest crossing angle between two seeding rays.
    pub min_crossing_deg: f64,
    /// Added to the 3σ angular gate.
    pub angular_gate_margin_deg: f64,
    pub trust_radius: f64,
    pub eig_floor: f64,
    pub line_search: bool,
    /// Recorded for reproducibility; the driver itself draws no randomness.
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            em_iters: 10,
            bp_iters: 5,
            bp_damping: 0.5,
            merge_radius: 5.0,
            eccentricity_max: 0.95,
            variance_max: 25.0,
            existence_min: 0.2,
            edge_radius: 150.0,
            init_cell: 5.0,
            init_min_intersections: 2,
            init_local_max: true,
            min_crossing_deg: 10.0,
            angular_gate_margin_deg: 5.0,
            trust_radius: 10.0,
            eig_floor: 1e-3,
            line_search: true,
            seed: 0,
        }
    }
}

/// Pruning thresholds applied between EM rounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneThresholds {
    pub eccentricity_max: f64,
    pub variance_max: f64,
    pub existence_min: f64,
}

impl EmConfig {
    /// Looser pruning for prediction on sparsely observed objects.
    pub fn prediction_mode(self) -> Self {
        EmConfig {
            eccentricity_max: 0.99,
            variance_max: 100.0,
            existence_min: 0.05,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        let positive = [
            ("merge_radius", self.merge_radius),
            ("edge_radius", self.edge_radius),
            ("init_cell", self.init_cell),
            ("variance_max", self.variance_max),
            ("trust_radius", self.trust_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(ClusterError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.em_iters == 0 || self.bp_iters == 0 {
            return Err(ClusterError::Config("em_iters and bp_iters must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eccentricity_max) {
            return Err(ClusterError::Config("eccentricity_max must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.existence_min) {
            return Err(ClusterError::Config("existence_min must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.bp_damping) {
            return Err(ClusterError::Config("bp_damping must lie in [0, 1)".into()));
        }
        if !(self.eig_floor >= 0.0) || !(self.angular_gate_margin_deg >= 0.0) {
            return Err(ClusterError::Config("eig_floor and gate margin must be non-negative".into()));
        }
        Ok(())
    }

    pub fn thresholds(&self) -> PruneThresholds {
        PruneThresholds {
            eccentricity_max: self.eccentricity_max,
            variance_max: self.variance_max,
            existence_min: self.existence_min,
        }
    }

    pub fn newton(&self) -> NewtonConfig {
        NewtonConfig {
            trust_radius: self.trust_radius,
            eig_floor: self.eig_floor,
            line_search: self.line_search,
        }
    }

    pub fn bp(&self) -> BpConfig {
        BpConfig {
            max_iters: self.bp_iters,
            damping: self.bp_damping,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PruneCounts {
    pub eccentricity: usize,
    pub variance: usize,
    pub existence: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationDiagnostics {
    pub objects: usize,
    pub edges: usize,
    pub bp_converged: bool,
    pub loss_before: f64,
    pub loss_after: f64,
    pub skipped_edges: usize,
    pub pruned: PruneCounts,
    pub merged: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ClusterDiagnostics {
    pub seeded: usize,
    pub iterations: Vec<IterationDiagnostics>,
    /// Shape pruning after the final E-step.
    pub final_pruned: PruneCounts,
}

#[derive(Debug, Clone)]
pub struct ClusterResult {
    pub class_id: Option<u32>,
    /// Survivors of the final shape pruning.
    pub hypotheses: Vec<ObjectHypothesis>,
    /// Object positions of the final E-step, indexing `problem`'s objects.
    pub positions: Vec<Vec2>,
    pub problem: AssociationProblem,
    pub marginals: Marginals,
    pub diagnostics: ClusterDiagnostics,
}

impl ClusterResult {
    fn empty(class_id: Option<u32>) -> Self {
        ClusterResult {
            class_id,
            hypotheses: Vec::new(),
            positions: Vec::new(),
            problem: AssociationProblem::new(0, Vec::new(), Vec::new())
                .expect("empty problem is valid"),
            marginals: Marginals {
                existence: Vec::new(),
                existence_log_odds: Vec::new(),
                assignment: Vec::new(),
                null_mass: Vec::new(),
                converged: true,
                iterations_run: 0,
            },
            diagnostics: ClusterDiagnostics::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Seeding
// ---------------------------------------------------------------------------

/// Crossing of two rays as `(point, distance along a, distance along b)`.
pub fn ray_intersection(a: &Ray, b: &Ray) -> Option<(Vec2, f64, f64)> {
    let (da, db) = (a.bearing(), b.bearing());
    let cross = da.x * db.y - da.y * db.x;
    if cross == 0.0 {
        return None;
    }
    let w = b.origin() - a.origin();
    let t = (w.x * db.y - w.y * db.x) / cross;
    let s = (w.x * da.y - w.y * da.x) / cross;
    Some((a.origin() + da * t, t, s))
}

/// Calls `visit` with every crossing of two rays whose origins lie within
/// `2 · edge_radius`, whose lines cross at no less than the configured angle,
/// and which lies ahead of both origins within `edge_radius`.
pub fn for_each_intersection(batch: &SceneBatch, cfg: &EmConfig, mut visit: impl FnMut(Vec2)) {
    let rays = batch.rays();
    let pair_radius = 2.0 * cfg.edge_radius;
    let min_sin = cfg.min_crossing_deg.to_radians().sin();
    let origins: Vec<Vec2> = rays.iter().map(|r| *r.origin()).collect();
    let index = GridIndex::new(&origins, batch.bounds().min, pair_radius);
    let reach = MIN_RANGE..=cfg.edge_radius;
    for (j, a) in rays.iter().enumerate() {
        for k in index.neighbors(a.origin()) {
            if k <= j {
                continue;
            }
            let b = &rays[k];
            if (a.origin() - b.origin()).norm() > pair_radius {
                continue;
            }
            let cross = a.bearing().x * b.bearing().y - a.bearing().y * b.bearing().x;
            if cross.abs() < min_sin {
                continue;
            }
            if let Some((p, t, s)) = ray_intersection(a, b) {
                if reach.contains(&t) && reach.contains(&s) {
                    visit(p);
                }
            }
        }
    }
}

/// Seeds at the centroids of grid cells holding at least
/// `init_min_intersections` pairwise ray intersections, in lexicographic cell
/// order. With `init_local_max`, only cells whose count is the strict maximum
/// of their 3×3 block seed; equal counts resolve to the lowest cell index.
pub fn init_candidates(batch: &SceneBatch, cfg: &EmConfig) -> Vec<Vec2> {
    let anchor = batch.bounds().min;
    let mut cells: HashMap<(i64, i64), (Vec2, usize)> = HashMap::new();
    for_each_intersection(batch, cfg, |p| {
        let entry = cells
            .entry(cell_of(&p, &anchor, cfg.init_cell))
            .or_insert((Vec2::zeros(), 0));
        entry.0 += p;
        entry.1 += 1;
    });
    let dominates = |key: &(i64, i64), n: usize| {
        (-1..=1).all(|dx| {
            (-1..=1).all(|dy| {
                let other = (key.0 + dx, key.1 + dy);
                match cells.get(&other) {
                    Some(&(_, m)) if other != *key => m < n || (m == n && other > *key),
                    _ => true,
                }
            })
        })
    };
    let mut keys: Vec<(i64, i64)> = cells
        .iter()
        .filter(|(k, v)| v.1 >= cfg.init_min_intersections && (!cfg.init_local_max || dominates(k, v.1)))
        .map(|(k, _)| *k)
        .collect();
    keys.sort_unstable();
    keys.iter()
        .map(|k| {
            let (sum, n) = cells[k];
            sum / n as f64
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Edges
// ---------------------------------------------------------------------------

/// Whether ray `ray` may attach to an object at `x`.
pub fn edge_gate(ray: &Ray, x: &Vec2, params: &SensorParams, cfg: &EmConfig) -> Option<Geometry> {
    let g = Geometry::new(ray, x).ok()?;
    if g.range > cfg.edge_radius {
        return None;
    }
    let spread = 3.0 / kappa(g.range, params).sqrt();
    (g.residual.abs() < spread + cfg.angular_gate_margin_deg.to_radians()).then_some(g)
}

struct EdgeBuilder<'a> {
    rays: &'a [Ray],
    index: GridIndex,
}

impl<'a> EdgeBuilder<'a> {
    fn new(rays: &'a [Ray], anchor: Vec2, cfg: &EmConfig) -> Self {
        let origins: Vec<Vec2> = rays.iter().map(|r| *r.origin()).collect();
        EdgeBuilder {
            rays,
            index: GridIndex::new(&origins, anchor, cfg.edge_radius),
        }
    }

    fn build(
        &self,
        positions: &[Vec2],
        params: &SensorParams,
        cfg: &EmConfig,
    ) -> Result<AssociationProblem, ClusterError> {
        let mut edges = Vec::new();
        let mut log_psi_e = Vec::with_capacity(positions.len());
        for (i, x) in positions.iter().enumerate() {
            let mut existence = params.existence_logit();
            for j in self.index.neighbors(x) {
                let ray = &self.rays[j];
                if edge_gate(ray, x, params, cfg).is_none() {
                    continue;
                }
                let (Ok(miss), Ok(assign)) =
                    (log_miss_prob(ray, x, params), assignment_potential(ray, x, params))
                else {
                    continue;
                };
                existence += miss.log_density;
                edges.push(Edge {
                    object: i,
                    ray: j,
                    log_psi: assign.composed().log_density,
                });
            }
            log_psi_e.push(existence);
        }
        Ok(AssociationProblem::new(self.rays.len(), log_psi_e, edges)?)
    }
}

/// Gated sparse association problem for objects at `positions`.
pub fn build_edges(
    positions: &[Vec2],
    rays: &[Ray],
    params: &SensorParams,
    cfg: &EmConfig,
) -> Result<AssociationProblem, ClusterError> {
    let anchor = rays.first().map(|r| *r.origin()).unwrap_or_else(Vec2::zeros);
    EdgeBuilder::new(rays, anchor, cfg).build(positions, params, cfg)
}

// ---------------------------------------------------------------------------
// Prune and merge
// ---------------------------------------------------------------------------

/// `sqrt(1 − λ_min / λ_max)` of the assignment-weighted bearing scatter;
/// 1 when no ray is assigned.
pub fn eccentricity(h: &ObjectHypothesis, rays: &[Ray]) -> f64 {
    let mut scatter = Mat2::zeros();
    for (&j, &w) in &h.assignment_marginals {
        let d = rays[j].bearing();
        scatter += outer(d, d) * w;
    }
    let eig = SymEigen2::new(&scatter);
    if !(eig.max > 0.0) {
        return 1.0;
    }
    (1.0 - eig.min.max(0.0) / eig.max).max(0.0).sqrt()
}

/// Drops hypotheses that are too elongated, too uncertain, or too unlikely.
/// Each drop is counted under the first failed test in that order.
pub fn prune(
    hypotheses: Vec<ObjectHypothesis>,
    rays: &[Ray],
    thresholds: &PruneThresholds,
) -> (Vec<ObjectHypothesis>, PruneCounts) {
    let mut counts = PruneCounts::default();
    let kept = hypotheses
        .into_iter()
        .filter(|h| {
            if eccentricity(h, rays) > thresholds.eccentricity_max {
                counts.eccentricity += 1;
                false
            } else if SymEigen2::new(&h.covariance).max > thresholds.variance_max {
                counts.variance += 1;
                false
            } else if h.existence < thresholds.existence_min {
                counts.existence += 1;
                false
            } else {
                true
            }
        })
        .collect();
    (kept, counts)
}

/// Greedy merge: in order of decreasing existence, each survivor absorbs
/// every remaining hypothesis within `merge_radius`. Survivors keep their
/// own state.
pub fn merge(hypotheses: Vec<ObjectHypothesis>, merge_radius: f64) -> Vec<ObjectHypothesis> {
    let mut order: Vec<usize> = (0..hypotheses.len()).collect();
    order.sort_by(|&a, &b| {
        let (ha, hb) = (&hypotheses[a], &hypotheses[b]);
        hb.existence
            .total_cmp(&ha.existence)
            .then(ha.position.x.total_cmp(&hb.position.x))
            .then(ha.position.y.total_cmp(&hb.position.y))
    });
    let positions: Vec<Vec2> = hypotheses.iter().map(|h| h.position).collect();
    let anchor = positions.first().copied().unwrap_or_else(Vec2::zeros);
    let index = GridIndex::new(&positions, anchor, merge_radius);
    let mut consumed = vec![false; hypotheses.len()];
    let mut survivors = Vec::new();
    for &i in &order {
        if consumed[i] {
            continue;
        }
        consumed[i] = true;
        survivors.push(i);
        for k in index.neighbors(&positions[i]) {
            if !consumed[k] && (positions[k] - positions[i]).norm() <= merge_radius {
                consumed[k] = true;
            }
        }
    }
    let mut slots: Vec<Option<ObjectHypothesis>> = hypotheses.into_iter().map(Some).collect();
    survivors
        .into_iter()
        .map(|i| slots[i].take().expect("each survivor taken once"))
        .collect()
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

fn batch_class(rays: &[Ray]) -> Result<Option<u32>, ClusterError> {
    let mut class = None;
    for r in rays {
        match class {
            None => class = Some(r.class_id()),
            Some(c) if c != r.class_id() => return Err(ClusterError::MixedClasses(c, r.class_id())),
            _ => {}
        }
    }
    Ok(class)
}

/// Laplace covariance of the position given that the object exists: the
/// data curvature carries weights `ā_ij = ē_i · P(a_ij | e_i)`, so it is
/// rescaled by `1 / ē_i` while the prior curvature is kept as is.
pub fn conditional_covariance(
    loss_hessian: &Mat2,
    log_prior_hessian: &Mat2,
    existence: f64,
    eig_floor: f64,
) -> Mat2 {
    let data = loss_hessian + log_prior_hessian;
    let conditional = data / existence.max(f64::MIN_POSITIVE) - log_prior_hessian;
    posterior_covariance(&conditional, eig_floor)
}

/// Hypotheses for every object of `problem` at `positions`.
#[allow(clippy::too_many_arguments)]
fn hypotheses_at(
    positions: &[Vec2],
    problem: &AssociationProblem,
    marginals: &Marginals,
    hessians: &[Mat2],
    prior: &PriorDensity,
    class_id: u32,
    eig_floor: f64,
) -> Vec<ObjectHypothesis> {
    positions
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let assignment_marginals: BTreeMap<usize, f64> = problem
                .object_edges(i)
                .iter()
                .map(|&k| (problem.edges()[k].ray, marginals.assignment[k]))
                .collect();
            let log_prior = prior.log_prior(x, class_id);
            let density_ratio = log_prior.value - prior.log_uniform();
            ObjectHypothesis {
                position: *x,
                existence: marginals.existence[i],
                score: sigmoid(marginals.existence_log_odds[i] + density_ratio),
                covariance: conditional_covariance(
                    &hessians[i],
                    &log_prior.hessian,
                    marginals.existence[i],
                    eig_floor,
                ),
                assignment_marginals,
            }
        })
        .collect()
}

/// Full EM on one single-class batch.
pub fn run_em(
    batch: &SceneBatch,
    params: &SensorParams,
    prior: &PriorDensity,
    cfg: &EmConfig,
) -> Result<ClusterResult, ClusterError> {
    cfg.validate()?;
    let rays = batch.rays();
    let class = batch_class(rays)?;
    let Some(class_id) = class else {
        return Ok(ClusterResult::empty(None));
    };
    let builder = EdgeBuilder::new(rays, batch.bounds().min, cfg);
    let newton = cfg.newton();
    let bp = cfg.bp();

    let mut positions = init_candidates(batch, cfg);
    let mut diagnostics = ClusterDiagnostics {
        seeded: positions.len(),
        ..ClusterDiagnostics::default()
    };
    debug!("class {class_id}: {} rays, {} seeds", rays.len(), positions.len());

    for it in 0..cfg.em_iters {
        let problem = builder.build(&positions, params, cfg)?;
        let marginals = run_bp(&problem, &bp)?;
        let objective = MStepObjective {
            problem: &problem,
            marginals: &marginals,
            rays,
            params,
            prior,
            class_id,
        };
        let loss = objective.assemble(&positions)?;
        let f = |i: usize, x: &Vec2| objective.object_loss(i, x);
        let step = newton_step(&positions, &loss.grad, &loss.hessian, &newton, Some(&f))?;

        let mut hyps = hypotheses_at(
            &positions,
            &problem,
            &marginals,
            &loss.hessian,
            prior,
            class_id,
            cfg.eig_floor,
        );
        for (h, x) in hyps.iter_mut().zip(&step.positions_new) {
            h.position = *x;
        }
        let (kept, pruned) = prune(hyps, rays, &cfg.thresholds());
        let before_merge = kept.len();
        let merged = merge(kept, cfg.merge_radius);
        let record = IterationDiagnostics {
            objects: positions.len(),
            edges: problem.edges().len(),
            bp_converged: marginals.converged,
            loss_before: step.loss_before.unwrap_or(loss.loss),
            loss_after: step.loss_after.unwrap_or(loss.loss),
            skipped_edges: loss.skipped_edges,
            pruned,
            merged: before_merge - merged.len(),
        };
        debug!("class {class_id} iteration {it}: {record:?}");
        diagnostics.iterations.push(record);
        positions = merged.into_iter().map(|h| h.position).collect();
    }

    let problem = builder.build(&positions, params, cfg)?;
    let marginals = run_bp(&problem, &bp)?;
    let loss = MStepObjective {
        problem: &problem,
        marginals: &marginals,
        rays,
        params,
        prior,
        class_id,
    }
    .assemble(&positions)?;
    let hyps = hypotheses_at(
        &positions,
        &problem,
        &marginals,
        &loss.hessian,
        prior,
        class_id,
        cfg.eig_floor,
    );
    let shape_only = PruneThresholds {
        existence_min: 0.0,
        ..cfg.thresholds()
    };
    let (hypotheses, final_pruned) = prune(hyps, rays, &shape_only);
    diagnostics.final_pruned = final_pruned;
    Ok(ClusterResult {
        class_id: Some(class_id),
        hypotheses,
        positions,
        problem,
        marginals,
        diagnostics,
    })
}
