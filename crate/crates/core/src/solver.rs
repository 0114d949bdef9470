//! M-step: the assignment-weighted negative log-likelihood of object
//! positions and a regularized Newton step on it.
//!
//! The loss couples objects only through the fixed marginals, so its Hessian
//! is block diagonal with one 2×2 block per object and every solve is local.

use thiserror::Error;

use crate::assoc::{AssociationProblem, Marginals};
use crate::domain::{Mat2, Ray, SensorParams, Vec2};
use crate::math::SymEigen2;
use crate::priors::PriorDensity;
use crate::sensor::log_f;

/// Step halvings tried by the fallback line search.
pub const LINE_SEARCH_HALVINGS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("object {object} has a non-finite gradient or Hessian")]
    NonFinite { object: usize },
    #[error("{what}: expected {expected} entries, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Loss value with per-object gradient and Hessian blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAssembly {
    pub loss: f64,
    pub grad: Vec<Vec2>,
    pub hessian: Vec<Mat2>,
    /// Edges skipped because the object sat on the ray origin.
    pub skipped_edges: usize,
}

/// The expected complete-data objective for one E-step result.
#[derive(Debug, Clone, Copy)]
pub struct MStepObjective<'a> {
    pub problem: &'a AssociationProblem,
    pub marginals: &'a Marginals,
    pub rays: &'a [Ray],
    pub params: &'a SensorParams,
    pub prior: &'a PriorDensity,
    pub class_id: u32,
}

impl<'a> MStepObjective<'a> {
    /// `−Σ_j ā_ij log f(z_j | x) − log prior(x)` for one object, with derivatives.
    pub fn object_term(&self, i: usize, x: &Vec2) -> (f64, Vec2, Mat2, usize) {
        let prior = self.prior.log_prior(x, self.class_id);
        let mut loss = -prior.value;
        let mut grad = -prior.grad;
        let mut hess = -prior.hessian;
        let mut skipped = 0;
        for &k in self.problem.object_edges(i) {
            let weight = self.marginals.assignment[k];
            if weight == 0.0 {
                continue;
            }
            let ray = &self.rays[self.problem.edges()[k].ray];
            match log_f(ray, x, self.params) {
                Ok(e) => {
                    loss -= weight * e.log_density;
                    grad -= e.grad_position * weight;
                    hess -= e.hessian_position * weight;
                }
                Err(_) => skipped += 1,
            }
        }
        (loss, grad, hess, skipped)
    }

    pub fn object_loss(&self, i: usize, x: &Vec2) -> f64 {
        self.object_term(i, x).0
    }

    pub fn assemble(&self, positions: &[Vec2]) -> Result<LossAssembly, SolverError> {
        let n = self.problem.n_objects();
        if positions.len() != n {
            return Err(SolverError::Length {
                what: "positions",
                expected: n,
                got: positions.len(),
            });
        }
        if self.marginals.assignment.len() != self.problem.edges().len() {
            return Err(SolverError::Length {
                what: "assignment marginals",
                expected: self.problem.edges().len(),
                got: self.marginals.assignment.len(),
            });
        }
        let mut out = LossAssembly {
            loss: 0.0,
            grad: Vec::with_capacity(n),
            hessian: Vec::with_capacity(n),
            skipped_edges: 0,
        };
        for (i, x) in positions.iter().enumerate() {
            let (l, g, h, s) = self.object_term(i, x);
            out.loss += l;
            out.grad.push(g);
            out.hessian.push(h);
            out.skipped_edges += s;
        }
        Ok(out)
    }
}

/// `loss = −Σ ā_ij log f(z_j | x_i) − Σ_i log prior(x_i)`.
pub fn assemble_loss(
    positions: &[Vec2],
    problem: &AssociationProblem,
    marginals: &Marginals,
    rays: &[Ray],
    params: &SensorParams,
    prior: &PriorDensity,
    class_id: u32,
) -> Result<LossAssembly, SolverError> {
    MStepObjective {
        problem,
        marginals,
        rays,
        params,
        prior,
        class_id,
    }
    .assemble(positions)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    /// Metres; the step never exceeds this length.
    pub trust_radius: f64,
    /// Smallest eigenvalue allowed in a regularized block.
    pub eig_floor: f64,
    pub line_search: bool,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            trust_radius: 10.0,
            eig_floor: 1e-3,
            line_search: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonReport {
    pub positions_new: Vec<Vec2>,
    /// Present when a per-object loss was supplied.
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
    pub step_norms: Vec<f64>,
    pub regularizers: Vec<f64>,
}

/// Diagonal shift that makes `h` positive definite and bounds the step by
/// the trust radius.
pub fn regularizer(h: &Mat2, g: &Vec2, cfg: &NewtonConfig) -> f64 {
    let lambda_min = SymEigen2::new(h).min;
    (cfg.eig_floor - lambda_min).max(0.0) + g.norm() / cfg.trust_radius
}

/// One regularized Newton step per object. With `loss` supplied and the
/// line search enabled, each object's step is halved until its loss does not
/// increase; an object whose loss rises at every trial stays put.
pub fn newton_step(
    positions: &[Vec2],
    grad: &[Vec2],
    hess: &[Mat2],
    cfg: &NewtonConfig,
    loss: Option<&dyn Fn(usize, &Vec2) -> f64>,
) -> Result<NewtonReport, SolverError> {
    let n = positions.len();
    for (what, got) in [("gradients", grad.len()), ("Hessian blocks", hess.len())] {
        if got != n {
            return Err(SolverError::Length {
                what,
                expected: n,
                got,
            });
        }
    }
    let mut report = NewtonReport {
        positions_new: Vec::with_capacity(n),
        loss_before: loss.map(|_| 0.0),
        loss_after: loss.map(|_| 0.0),
        step_norms: Vec::with_capacity(n),
        regularizers: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (x, g, h) = (positions[i], grad[i], hess[i]);
        if !(g.iter().all(|v| v.is_finite()) && h.iter().all(|v| v.is_finite())) {
            return Err(SolverError::NonFinite { object: i });
        }
        let h = (h + h.transpose()) * 0.5;
        let shift = regularizer(&h, &g, cfg);
        let h_reg = h + Mat2::identity() * shift;
        let step = -SymEigen2::new(&h_reg).map(|l| 1.0 / l) * g;

        let mut accepted = x + step;
        if let Some(f) = loss {
            let f0 = f(i, &x);
            let mut f_new = f0;
            let mut moved = false;
            if cfg.line_search {
                let mut t = 1.0;
                for _ in 0..=LINE_SEARCH_HALVINGS {
                    let candidate = x + step * t;
                    let fc = f(i, &candidate);
                    if fc <= f0 {
                        accepted = candidate;
                        f_new = fc;
                        moved = true;
                        break;
                    }
                    t *= 0.5;
                }
                if !moved {
                    accepted = x;
                }
            } else {
                f_new = f(i, &accepted);
            }
            *report.loss_before.as_mut().unwrap() += f0;
            *report.loss_after.as_mut().unwrap() += f_new;
        }
        report.step_norms.push((accepted - x).norm());
        report.regularizers.push(shift);
        report.positions_new.push(accepted);
    }
    Ok(report)
}

/// Laplace covariance: inverse of the block with eigenvalues floored.
pub fn posterior_covariance(hess_block: &Mat2, eig_floor: f64) -> Mat2 {
    let sym = (hess_block + hess_block.transpose()) * 0.5;
    SymEigen2::new(&sym).map(|l| 1.0 / l.max(eig_floor))
}
