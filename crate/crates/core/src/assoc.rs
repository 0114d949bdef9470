//! Data association by sparse loopy belief propagation.
//!
//! The joint over existence flags `e_i` and ray assignments `a_j` is
//!
//! ```text
//! P(e, a) ∝ γ(e, a) · Π_i ψ_i^{e_i} · Π_(i,j) ψ_ij^{[a_j = i]}
//! ```
//!
//! where each ray is assigned to at most one object or to clutter (weight 1),
//! and `γ` forbids assigning a ray to an object that does not exist.
//! Messages run in the log domain on the bipartite object/ray graph.

use thiserror::Error;

use crate::math::{log_add_exp, log_sigmoid, sigmoid, softplus};

/// Log-potentials below this are treated as `−∞`.
pub const LOG_POTENTIAL_FLOOR: f64 = -40.0;

/// Largest instance `enumerate_exact` accepts.
pub const EXACT_MAX_OBJECTS: usize = 4;
pub const EXACT_MAX_RAYS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssocError {
    #[error("edge {edge} references object {object} / ray {ray} outside the problem")]
    EdgeIndex { edge: usize, object: usize, ray: usize },
    #[error("object {object} and ray {ray} are joined by more than one edge")]
    DuplicateEdge { object: usize, ray: usize },
    #[error("{what} log-potential is not a number or +inf: {value}")]
    NonFinite { what: &'static str, value: f64 },
    #[error("instance with {n_objects} objects and {n_rays} rays is too large to enumerate")]
    TooLarge { n_objects: usize, n_rays: usize },
    #[error("invalid belief propagation setting: {0}")]
    Config(&'static str),
}

/// One object/ray pair with its assignment log-potential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub object: usize,
    pub ray: usize,
    pub log_psi: f64,
}

/// A validated association factor graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationProblem {
    n_rays: usize,
    log_psi_e: Vec<f64>,
    edges: Vec<Edge>,
    object_edges: Vec<Vec<usize>>,
    ray_edges: Vec<Vec<usize>>,
}

fn floor(v: f64) -> f64 {
    if v < LOG_POTENTIAL_FLOOR {
        f64::NEG_INFINITY
    } else {
        v
    }
}

fn check(what: &'static str, value: f64) -> Result<(), AssocError> {
    if value.is_nan() || value == f64::INFINITY {
        Err(AssocError::NonFinite { what, value })
    } else {
        Ok(())
    }
}

impl AssociationProblem {
    /// `log_psi_e` has one entry per object. Potentials below the floor
    /// become `−∞`; NaN and `+∞` are rejected.
    pub fn new(n_rays: usize, log_psi_e: Vec<f64>, edges: Vec<Edge>) -> Result<Self, AssocError> {
        let n_objects = log_psi_e.len();
        for &v in &log_psi_e {
            check("existence", v)?;
        }
        let mut object_edges = vec![Vec::new(); n_objects];
        let mut ray_edges = vec![Vec::new(); n_rays];
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        let mut stored = Vec::with_capacity(edges.len());
        for (k, e) in edges.into_iter().enumerate() {
            if e.object >= n_objects || e.ray >= n_rays {
                return Err(AssocError::EdgeIndex {
                    edge: k,
                    object: e.object,
                    ray: e.ray,
                });
            }
            if !seen.insert((e.object, e.ray)) {
                return Err(AssocError::DuplicateEdge {
                    object: e.object,
                    ray: e.ray,
                });
            }
            check("assignment", e.log_psi)?;
            object_edges[e.object].push(k);
            ray_edges[e.ray].push(k);
            stored.push(Edge {
                log_psi: floor(e.log_psi),
                ..e
            });
        }
        Ok(AssociationProblem {
            n_rays,
            log_psi_e,
            edges: stored,
            object_edges,
            ray_edges,
        })
    }

    pub fn n_objects(&self) -> usize {
        self.log_psi_e.len()
    }

    pub fn n_rays(&self) -> usize {
        self.n_rays
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn log_psi_e(&self) -> &[f64] {
        &self.log_psi_e
    }

    /// Edge indices attached to object `i`.
    pub fn object_edges(&self, i: usize) -> &[usize] {
        &self.object_edges[i]
    }

    /// Edge indices attached to ray `j`.
    pub fn ray_edges(&self, j: usize) -> &[usize] {
        &self.ray_edges[j]
    }
}

/// Approximate or exact posterior marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    /// `ē_i` per object.
    pub existence: Vec<f64>,
    /// `logit ē_i`, kept separately so saturated beliefs stay ordered.
    pub existence_log_odds: Vec<f64>,
    /// `ā_ij` per edge, in problem edge order.
    pub assignment: Vec<f64>,
    /// Probability each ray is clutter.
    pub null_mass: Vec<f64>,
    pub converged: bool,
    pub iterations_run: usize,
}

/// Belief-propagation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpConfig {
    pub max_iters: usize,
    /// Weight on the previous log message, in `[0, 1)`.
    pub damping: f64,
    pub tol: f64,
}

impl Default for BpConfig {
    fn default() -> Self {
        BpConfig {
            max_iters: 5,
            damping: 0.0,
            tol: 1e-6,
        }
    }
}

/// Change between two log messages, with `−∞ → −∞` counting as no change.
fn log_change(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs()
    }
}

fn damp(new: f64, old: f64, d: f64) -> f64 {
    if d == 0.0 || new == old {
        new
    } else if new == f64::NEG_INFINITY || old == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        (1.0 - d) * new + d * old
    }
}

/// `log μ_ij`: object-to-ray belief that object `i` exists, excluding ray `j`.
fn object_messages(p: &AssociationProblem, log_nu: &[f64], out: &mut [f64]) {
    for (i, edges) in p.object_edges.iter().enumerate() {
        let total: f64 = p.log_psi_e[i] + edges.iter().map(|&k| log_nu[k]).sum::<f64>();
        for &k in edges {
            out[k] = log_sigmoid(total - log_nu[k]);
        }
    }
}

/// `log ν_ij`: ray-to-object likelihood ratio of `e_i = 1` versus `e_i = 0`.
fn ray_messages(p: &AssociationProblem, log_mu: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
    for edges in &p.ray_edges {
        let m = edges.len();
        // prefix[k] = log Σ_{l<k} ψ_l μ_l, suffix[k] = log Σ_{l≥k} ψ_l μ_l
        scratch.clear();
        scratch.resize(2 * (m + 1), f64::NEG_INFINITY);
        let (prefix, suffix) = scratch.split_at_mut(m + 1);
        for (idx, &k) in edges.iter().enumerate() {
            let t = p.edges[k].log_psi + log_mu[k];
            prefix[idx + 1] = log_add_exp(prefix[idx], t);
        }
        for (idx, &k) in edges.iter().enumerate().rev() {
            let t = p.edges[k].log_psi + log_mu[k];
            suffix[idx] = log_add_exp(suffix[idx + 1], t);
        }
        for (idx, &k) in edges.iter().enumerate() {
            let others = log_add_exp(prefix[idx], suffix[idx + 1]);
            out[k] = softplus(p.edges[k].log_psi - log_add_exp(0.0, others));
        }
    }
}

fn assemble(p: &AssociationProblem, log_nu: &[f64], converged: bool, iters: usize) -> Marginals {
    let mut log_mu = vec![0.0; p.edges.len()];
    object_messages(p, log_nu, &mut log_mu);

    let existence_log_odds: Vec<f64> = p
        .object_edges
        .iter()
        .enumerate()
        .map(|(i, edges)| p.log_psi_e[i] + edges.iter().map(|&k| log_nu[k]).sum::<f64>())
        .collect();
    let existence: Vec<f64> = existence_log_odds.iter().map(|&l| sigmoid(l)).collect();

    let mut assignment = vec![0.0; p.edges.len()];
    let mut null_mass = vec![1.0; p.n_rays];
    for (j, edges) in p.ray_edges.iter().enumerate() {
        let terms: Vec<f64> = edges
            .iter()
            .map(|&k| p.edges[k].log_psi + log_mu[k])
            .collect();
        let log_z = terms.iter().fold(0.0, |acc, &t| log_add_exp(acc, t));
        let mut assigned = 0.0;
        for (&k, &t) in edges.iter().zip(&terms) {
            // at a fixed point ā ≤ ē holds exactly; clip transients into the null option
            let a = (t - log_z).exp().min(existence[p.edges[k].object]);
            assignment[k] = a;
            assigned += a;
        }
        null_mass[j] = (1.0 - assigned).max(0.0);
    }
    Marginals {
        existence,
        existence_log_odds,
        assignment,
        null_mass,
        converged,
        iterations_run: iters,
    }
}

/// Synchronous loopy belief propagation.
pub fn run_bp(problem: &AssociationProblem, cfg: &BpConfig) -> Result<Marginals, AssocError> {
    if cfg.max_iters == 0 {
        return Err(AssocError::Config("max_iters must be at least 1"));
    }
    if !(0.0..1.0).contains(&cfg.damping) {
        return Err(AssocError::Config("damping must lie in [0, 1)"));
    }
    let n = problem.edges.len();
    let mut log_nu = vec![0.0; n];
    let mut log_mu = vec![0.0; n];
    let mut next_mu = vec![0.0; n];
    let mut next_nu = vec![0.0; n];
    let mut scratch = Vec::new();
    let mut converged = false;
    let mut iters = 0;
    for it in 0..cfg.max_iters {
        iters = it + 1;
        object_messages(problem, &log_nu, &mut next_mu);
        for k in 0..n {
            next_mu[k] = damp(next_mu[k], log_mu[k], cfg.damping);
        }
        ray_messages(problem, &next_mu, &mut next_nu, &mut scratch);
        let mut change: f64 = 0.0;
        for k in 0..n {
            next_nu[k] = damp(next_nu[k], log_nu[k], cfg.damping);
            change = change
                .max((next_mu[k].exp() - log_mu[k].exp()).abs())
                .max(log_change(next_nu[k], log_nu[k]));
        }
        std::mem::swap(&mut log_mu, &mut next_mu);
        std::mem::swap(&mut log_nu, &mut next_nu);
        if it > 0 && change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(assemble(problem, &log_nu, converged, iters))
}

/// Exact marginals by enumerating every feasible `(e, a)`.
pub fn enumerate_exact(problem: &AssociationProblem) -> Result<Marginals, AssocError> {
    let n = problem.n_objects();
    let m = problem.n_rays;
    if n > EXACT_MAX_OBJECTS || m > EXACT_MAX_RAYS {
        return Err(AssocError::TooLarge {
            n_objects: n,
            n_rays: m,
        });
    }
    // each ray's options: clutter (None) or one of its edges
    let options: Vec<Vec<Option<usize>>> = (0..m)
        .map(|j| {
            std::iter::once(None)
                .chain(problem.ray_edges[j].iter().map(|&k| Some(k)))
                .collect()
        })
        .collect();

    let visit = |f: &mut dyn FnMut(u32, &[usize], f64)| {
        let mut choice = vec![0usize; m];
        for bits in 0u32..(1 << n) {
            let base: f64 = (0..n)
                .filter(|&i| bits & (1 << i) != 0)
                .map(|i| problem.log_psi_e[i])
                .sum();
            choice.iter_mut().for_each(|c| *c = 0);
            loop {
                let mut w = base;
                let mut feasible = true;
                for j in 0..m {
                    if let Some(k) = options[j][choice[j]] {
                        let e = &problem.edges[k];
                        if bits & (1 << e.object) == 0 {
                            feasible = false;
                            break;
                        }
                        w += e.log_psi;
                    }
                }
                if feasible && w > f64::NEG_INFINITY {
                    f(bits, &choice, w);
                }
                // odometer
                let mut j = 0;
                while j < m {
                    choice[j] += 1;
                    if choice[j] < options[j].len() {
                        break;
                    }
                    choice[j] = 0;
                    j += 1;
                }
                if j == m {
                    break;
                }
            }
        }
    };

    let mut max_w = f64::NEG_INFINITY;
    visit(&mut |_, _, w| max_w = max_w.max(w));

    let mut z = 0.0;
    let mut existence = vec![0.0; n];
    let mut absent = vec![0.0; n];
    let mut assignment = vec![0.0; problem.edges.len()];
    let mut null_mass = vec![0.0; m];
    visit(&mut |bits, choice, w| {
        let p = (w - max_w).exp();
        z += p;
        for i in 0..n {
            if bits & (1 << i) != 0 {
                existence[i] += p;
            } else {
                absent[i] += p;
            }
        }
        for j in 0..m {
            match options[j][choice[j]] {
                Some(k) => assignment[k] += p,
                None => null_mass[j] += p,
            }
        }
    });
    let existence_log_odds = existence
        .iter()
        .zip(&absent)
        .map(|(e, a)| e.ln() - a.ln())
        .collect();
    for v in existence
        .iter_mut()
        .chain(assignment.iter_mut())
        .chain(null_mass.iter_mut())
    {
        *v /= z;
    }
    Ok(Marginals {
        existence,
        existence_log_odds,
        assignment,
        null_mass,
        converged: true,
        iterations_run: 0,
    })
}
