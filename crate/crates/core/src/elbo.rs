//! Evidence lower bound.
//!
//! `ELBO_i = E_q[log p(Y_i | b)] − KL(q_ψ(b | Y_i) ‖ N(0, Ω))`, the first
//! term estimated with reparameterized samples `b = μ + L_q ε`. The noise
//! `ε` is fixed per subject (seeded from the subject id), so the objective
//! is a deterministic function of the parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{value_and_gradient, DiffError, ParamVector, Real, Var};
use crate::nlme::{
    lower_solve, standard_normals, subject_seed, Dataset, NlmeError, NlmeProblem, Observable, Phi,
    SubjectRecord,
};
use crate::nn::{Encoder, NnError, Posterior};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ElboError {
    #[error(transparent)]
    Nlme(#[from] NlmeError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("Cholesky factor has a non-positive diagonal entry")]
    NonPositiveDiagonal,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl From<crate::mech::MechError> for ElboError {
    fn from(e: crate::mech::MechError) -> Self {
        ElboError::Nlme(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElboConfig {
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    /// Root of the per-subject noise seeds.
    #[serde(default)]
    pub seed: u64,
}

fn default_n_mc() -> usize {
    20
}

impl Default for ElboConfig {
    fn default() -> Self {
        Self {
            n_mc: default_n_mc(),
            seed: 0,
        }
    }
}

const DIAG_FLOOR: f64 = 1e-12;

fn log_diag<S: Real>(d: S) -> Result<S, ElboError> {
    if !(d.value() > 0.0) {
        return Err(ElboError::NonPositiveDiagonal);
    }
    Ok(if d.value() < DIAG_FLOOR {
        S::cst(DIAG_FLOOR.ln())
    } else {
        d.ln()
    })
}

/// `KL(N(μ, L_q L_qᵀ) ‖ N(0, L_Ω L_Ωᵀ))` via triangular solves.
pub fn kl_gaussian_chol<S: Real>(
    mu: &[S],
    l_q: &[Vec<S>],
    l_omega: &[Vec<S>],
) -> Result<S, ElboError> {
    let d = mu.len();
    if l_q.len() != d || l_omega.len() != d {
        return Err(ElboError::InvalidInput("KL dimension mismatch".into()));
    }
    let mut logdet = S::zero();
    for k in 0..d {
        logdet += log_diag(l_omega[k][k])? * 2.0;
        logdet -= log_diag(l_q[k][k])? * 2.0;
    }
    // tr(Ω⁻¹Σ_q) = ‖L_Ω⁻¹ L_q‖²_F, column by column.
    let mut trace = S::zero();
    for c in 0..d {
        let col: Vec<S> = (0..d).map(|r| l_q[r][c]).collect();
        let z = lower_solve(l_omega, &col);
        trace += S::dot(&z, &z);
    }
    let m = lower_solve(l_omega, mu);
    Ok((trace + S::dot(&m, &m) - d as f64 + logdet) * 0.5)
}

/// Mean over samples of `log p(Y_i | μ + L_q ε_l)`.
pub fn data_fidelity<S: Observable>(
    problem: &NlmeProblem,
    subject: &SubjectRecord,
    posterior: &Posterior<S>,
    phi: &Phi<S>,
    eps: &[Vec<f64>],
) -> Result<S, ElboError> {
    if eps.is_empty() {
        return Err(ElboError::InvalidInput("n_mc must be at least 1".into()));
    }
    let mut acc = S::zero();
    for e in eps {
        let b = posterior.sample(e);
        acc += problem.log_cond_likelihood(subject, &b, phi)?;
    }
    Ok(acc / eps.len() as f64)
}

/// The training objective over the concatenated vector `x = (φ ‖ ψ)`.
#[derive(Clone, Debug)]
pub struct Objective {
    pub problem: NlmeProblem,
    pub encoder: Encoder,
    pub cfg: ElboConfig,
}

impl Objective {
    pub fn new(problem: NlmeProblem, encoder: Encoder, cfg: ElboConfig) -> Result<Self, ElboError> {
        if cfg.n_mc == 0 {
            return Err(ElboError::InvalidInput("n_mc must be at least 1".into()));
        }
        if encoder.cfg.latent_dim != problem.n_random() {
            return Err(ElboError::InvalidInput(format!(
                "encoder latent_dim {} but model has {} random effects",
                encoder.cfg.latent_dim,
                problem.n_random()
            )));
        }
        Ok(Self {
            problem,
            encoder,
            cfg,
        })
    }

    pub fn n_phi(&self) -> usize {
        self.problem.layout().len()
    }

    pub fn n_params(&self) -> usize {
        self.n_phi() + self.encoder.n_params()
    }

    pub fn join(&self, phi: &ParamVector, psi: &ParamVector) -> Vec<f64> {
        let mut x = phi.values.clone();
        x.extend_from_slice(&psi.values);
        x
    }

    pub fn split(&self, x: &[f64]) -> (ParamVector, ParamVector) {
        let n = self.n_phi();
        (
            ParamVector {
                values: x[..n].to_vec(),
                layout: self.problem.layout(),
            },
            ParamVector {
                values: x[n..].to_vec(),
                layout: self.encoder.layout.clone(),
            },
        )
    }

    pub fn noise(&self, subject: &SubjectRecord) -> Vec<Vec<f64>> {
        standard_normals(
            subject_seed(self.cfg.seed, &subject.id),
            self.cfg.n_mc,
            self.problem.n_random(),
        )
    }

    /// `ELBO_i` at `x`. `dropout_seed` switches the encoder to training mode.
    pub fn subject_elbo<S: Observable>(
        &self,
        x: &[S],
        subject: &SubjectRecord,
        dropout_seed: Option<u64>,
    ) -> Result<S, ElboError> {
        let n = self.n_phi();
        let phi = self.problem.unpack(&x[..n]);
        let mut rng =
            dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(s ^ subject_seed(0, &subject.id)));
        let post = self.encoder.encode(&x[n..], subject, rng.as_mut())?;
        let fid = data_fidelity(&self.problem, subject, &post, &phi, &self.noise(subject))?;
        let kl = kl_gaussian_chol(&post.mu, &post.chol, &phi.l_omega)?;
        Ok(fid - kl)
    }

    pub fn subject_value_grad(
        &self,
        x: &[f64],
        subject: &SubjectRecord,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<f64>), ElboError> {
        let at = ParamVector {
            values: x.to_vec(),
            layout: crate::diff::Layout::new()
                .with("x", x.len())
                .expect("fresh"),
        };
        value_and_gradient(|v: &[Var]| self.subject_elbo(v, subject, dropout_seed), &at)
    }

    /// `Σ_i ELBO_i`, subjects evaluated in parallel and summed in order.
    pub fn total(&self, x: &[f64], data: &Dataset) -> Result<f64, ElboError> {
        let parts: Vec<Result<f64, ElboError>> = data
            .subjects
            .par_iter()
            .map(|s| self.subject_elbo(x, s, None))
            .collect();
        let mut acc = 0.0;
        for p in parts {
            acc += p?;
        }
        Ok(acc)
    }

    /// `Σ_i ELBO_i` and its gradient.
    pub fn total_value_grad(
        &self,
        x: &[f64],
        data: &Dataset,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<f64>), ElboError> {
        let parts: Vec<Result<(f64, Vec<f64>), ElboError>> = data
            .subjects
            .par_iter()
            .map(|s| self.subject_value_grad(x, s, dropout_seed))
            .collect();
        let mut value = 0.0;
        let mut grad = vec![0.0; x.len()];
        for p in parts {
            let (v, g) = p?;
            value += v;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok((value, grad))
    }

    /// Encoder means for every subject.
    pub fn ebes(&self, psi: &ParamVector, data: &Dataset) -> Result<Vec<Vec<f64>>, ElboError> {
        data.subjects
            .iter()
            .map(|s| crate::nlme::ebe(&self.encoder, psi, s).map_err(ElboError::from))
            .collect()
    }
}
