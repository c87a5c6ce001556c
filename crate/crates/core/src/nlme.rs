//! Population layer: parameter containers, prior and conditional
//! likelihood, Monte-Carlo marginal likelihood and cohort simulation.
//!
//! The population vector φ is a [`ParamVector`] with segments
//!
//! * `theta`: estimated fixed effects on the unconstrained scale,
//! * `log_omega`: log of the diagonal of `L_Ω`,
//! * `omega_offdiag`: strictly lower entries of `L_Ω` (full structure only),
//! * `log_sigma`: log residual standard deviation.
//!
//! Fixed effects that are not estimated keep the values in
//! [`NlmeProblem::fixed_u`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Layout, ParamVector, Real, Var};
use crate::linalg::Matrix;
use crate::mech::{MechError, MechModel};
use crate::odeint::SolverConfig;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NlmeError {
    #[error(transparent)]
    Mech(#[from] MechError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("every Monte-Carlo sample underflowed")]
    AllSamplesUnderflow,
    #[error("subject `{0}` has no valid observation")]
    EmptySubject(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaStructure {
    #[default]
    Diagonal,
    Full,
}

/// A mechanistic model plus the choice of estimated parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlmeProblem {
    pub model: MechModel,
    /// Indices into `model.params` that are estimated.
    pub estimated: Vec<usize>,
    /// Full-length unconstrained values; entries in `estimated` are
    /// overridden by φ.
    pub fixed_u: Vec<f64>,
    pub omega: OmegaStructure,
    pub solver: SolverConfig,
}

/// φ unpacked into model-ready pieces.
#[derive(Clone, Debug)]
pub struct Phi<S> {
    /// Full-length unconstrained fixed effects.
    pub theta_u: Vec<S>,
    /// Row-major lower-triangular `L_Ω`.
    pub l_omega: Vec<Vec<S>>,
    pub log_sigma: S,
}

/// Natural-scale summary of φ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationParams {
    pub theta: Vec<f64>,
    pub omega_sd: Vec<f64>,
    pub omega: Matrix,
    pub sigma: f64,
}

impl NlmeProblem {
    pub fn new(model: MechModel, estimated: &[&str]) -> Result<Self, NlmeError> {
        model.validate()?;
        let mut idx = Vec::with_capacity(estimated.len());
        for name in estimated {
            let k = model.param_index(name)?;
            if idx.contains(&k) {
                return Err(NlmeError::InvalidInput(format!("`{name}` listed twice")));
            }
            idx.push(k);
        }
        idx.sort_unstable();
        let fixed_u = model.truth_unconstrained();
        let solver = model.default_solver();
        Ok(Self {
            model,
            estimated: idx,
            fixed_u,
            omega: OmegaStructure::Diagonal,
            solver,
        })
    }

    pub fn n_random(&self) -> usize {
        self.model.n_random()
    }

    pub fn layout(&self) -> Layout {
        let d = self.n_random();
        let mut l = Layout::new();
        l.push("theta", self.estimated.len()).expect("fresh layout");
        l.push("log_omega", d).expect("fresh layout");
        if self.omega == OmegaStructure::Full && d > 1 {
            l.push("omega_offdiag", d * (d - 1) / 2)
                .expect("fresh layout");
        }
        l.push("log_sigma", 1).expect("fresh layout");
        l
    }

    pub fn estimated_names(&self) -> Vec<String> {
        self.estimated
            .iter()
            .map(|&k| self.model.params[k].name.clone())
            .collect()
    }

    /// φ from natural-scale values: full-length `theta`, random-effect
    /// standard deviations and noise standard deviation. Off-diagonals start
    /// at zero.
    pub fn phi_from_natural(
        &self,
        theta: &[f64],
        omega_sd: &[f64],
        sigma: f64,
    ) -> Result<ParamVector, NlmeError> {
        if theta.len() != self.model.n_params() || omega_sd.len() != self.n_random() {
            return Err(NlmeError::InvalidInput(
                "parameter vector lengths do not match the model".into(),
            ));
        }
        let th: Vec<f64> = self
            .estimated
            .iter()
            .map(|&k| self.model.params[k].transform.to_unconstrained(theta[k]))
            .collect();
        let lo: Vec<f64> = omega_sd.iter().map(|w| w.ln()).collect();
        let mut pv = ParamVector::zeros(self.layout());
        pv.set("theta", &th)?;
        pv.set("log_omega", &lo)?;
        pv.set("log_sigma", &[sigma.ln()])?;
        Ok(pv)
    }

    /// Reference φ from the model's truth table.
    pub fn phi_truth(&self) -> ParamVector {
        self.phi_from_natural(
            &self.model.truth_natural(),
            &self.model.omega_truth,
            self.model.sigma_truth,
        )
        .expect("model truth is consistent")
    }

    pub fn unpack<S: Real>(&self, phi: &[S]) -> Phi<S> {
        let d = self.n_random();
        let m = self.estimated.len();
        let mut theta_u: Vec<S> = self.fixed_u.iter().map(|&v| S::cst(v)).collect();
        for (j, &k) in self.estimated.iter().enumerate() {
            theta_u[k] = phi[j];
        }
        let mut l_omega = vec![vec![S::zero(); d]; d];
        for k in 0..d {
            l_omega[k][k] = phi[m + k].exp();
        }
        let mut next = m + d;
        if self.omega == OmegaStructure::Full && d > 1 {
            for r in 1..d {
                for c in 0..r {
                    l_omega[r][c] = phi[next];
                    next += 1;
                }
            }
        }
        Phi {
            theta_u,
            l_omega,
            log_sigma: phi[next],
        }
    }

    pub fn natural(&self, phi: &ParamVector) -> PopulationParams {
        let p = self.unpack(&phi.values);
        let theta = p
            .theta_u
            .iter()
            .zip(&self.model.params)
            .map(|(u, s)| s.transform.to_natural(*u))
            .collect();
        let d = self.n_random();
        let mut l = Matrix::zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                l[(r, c)] = p.l_omega[r][c];
            }
        }
        let omega = l.matmul(&l.transpose()).expect("square");
        let omega_sd = omega.diag().iter().map(|v| v.sqrt()).collect();
        PopulationParams {
            theta,
            omega_sd,
            omega,
            sigma: p.log_sigma.exp(),
        }
    }

    /// Which subject-level parameters depend on φ or on random effects.
    pub fn active(&self) -> Vec<bool> {
        let mut a = vec![false; self.model.n_params()];
        for &k in self.estimated.iter().chain(&self.model.re_map) {
            a[k] = true;
        }
        a
    }

    /// Conditional log-likelihood `log p(Y_i | b)`.
    pub fn log_cond_likelihood<S: Observable>(
        &self,
        subject: &SubjectRecord,
        b: &[S],
        phi: &Phi<S>,
    ) -> Result<S, NlmeError> {
        let (times, values) = subject.valid();
        if times.is_empty() {
            return Err(NlmeError::EmptySubject(subject.id.clone()));
        }
        let theta = self.model.individual_params(&phi.theta_u, b);
        let pred = S::predict(&self.model, &theta, &self.active(), &times, &self.solver)?;
        Ok(gaussian_loglik(&values, &pred, phi.log_sigma))
    }

    /// `b = L_Ω ε`.
    pub fn random_effect<S: Real>(&self, phi: &Phi<S>, eps: &[f64]) -> Vec<S> {
        lower_matvec(&phi.l_omega, eps)
    }

    /// MC estimate of `log p(Y_i)` with common random numbers drawn from
    /// `seed`.
    pub fn marginal_loglik_mc(
        &self,
        subject: &SubjectRecord,
        phi: &ParamVector,
        n_samples: usize,
        seed: u64,
    ) -> Result<MarginalEstimate, NlmeError> {
        if n_samples == 0 {
            return Err(NlmeError::InvalidInput("need at least one sample".into()));
        }
        let p = self.unpack(&phi.values);
        let eps = standard_normals(seed, n_samples, self.n_random());
        let mut logs = Vec::with_capacity(n_samples);
        for e in &eps {
            let b = self.random_effect(&p, e);
            logs.push(self.log_cond_likelihood(subject, &b, &p)?);
        }
        MarginalEstimate::from_log_samples(&logs)
    }

    /// Simulate a cohort under φ. Times, random effects and noise are drawn
    /// from one ChaCha stream seeded with `seed`.
    pub fn simulate_cohort(
        &self,
        phi: &ParamVector,
        design: &Design,
        seed: u64,
    ) -> Result<Dataset, NlmeError> {
        design.validate()?;
        let p = self.unpack(&phi.values);
        let sigma = p.log_sigma.exp();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = design.n_subjects.to_string().len().max(3);
        let mut subjects = Vec::with_capacity(design.n_subjects);
        for i in 0..design.n_subjects {
            let times = match design.sampling {
                Sampling::Regular => design.regular_grid(),
                Sampling::Irregular => irregular_times(&mut rng, design.n_obs, design.horizon),
            };
            let eps: Vec<f64> = (0..self.n_random())
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let b = self.random_effect(&p, &eps);
            let theta = self.model.individual_params(&p.theta_u, &b);
            let pred = self.model.predict(&theta, &times, &self.solver)?;
            let values = pred
                .iter()
                .map(|y| {
                    let z: f64 = rng.sample(StandardNormal);
                    y + sigma * z
                })
                .collect();
            subjects.push(SubjectRecord {
                id: format!("s{:0width$}", i + 1),
                mask: vec![true; times.len()],
                times,
                values,
            });
        }
        Ok(Dataset {
            model: self.model.name.clone(),
            pad_len: design.n_obs,
            design: Some(design.clone()),
            subjects,
        })
    }
}

/// Scalars that can run a model prediction: plain floats solve directly,
/// tape variables go through a forward-mode solve and custom nodes.
pub trait Observable: Real {
    fn predict(
        model: &MechModel,
        theta: &[Self],
        active: &[bool],
        times: &[f64],
        cfg: &SolverConfig,
    ) -> Result<Vec<Self>, MechError>;
}

impl Observable for f64 {
    fn predict(
        model: &MechModel,
        theta: &[f64],
        _active: &[bool],
        times: &[f64],
        cfg: &SolverConfig,
    ) -> Result<Vec<f64>, MechError> {
        model.predict(theta, times, cfg)
    }
}

impl Observable for Var {
    fn predict(
        model: &MechModel,
        theta: &[Var],
        active: &[bool],
        times: &[f64],
        cfg: &SolverConfig,
    ) -> Result<Vec<Var>, MechError> {
        model.predict_var(theta, active, times, cfg)
    }
}

/// `Σ_j log N(y_j; ŷ_j, σ²)` with `σ = exp(log_sigma)`.
pub fn gaussian_loglik<S: Real>(y: &[f64], pred: &[S], log_sigma: S) -> S {
    let n = y.len() as f64;
    let inv_var = (log_sigma * -2.0).exp();
    let mut ss = S::zero();
    for (yj, pj) in y.iter().zip(pred) {
        let r = *pj - *yj;
        ss += r * r;
    }
    -(ss * inv_var * 0.5) - log_sigma * n - 0.5 * n * LN_2PI
}

/// `L x` for row-major lower-triangular `L` and constant `x`.
pub fn lower_matvec<S: Real>(l: &[Vec<S>], x: &[f64]) -> Vec<S> {
    l.iter()
        .enumerate()
        .map(|(r, row)| {
            let mut acc = S::zero();
            for c in 0..=r {
                if x[c] != 0.0 {
                    acc += row[c] * x[c];
                }
            }
            acc
        })
        .collect()
}

/// Solve `L z = b` for lower-triangular `L`.
pub fn lower_solve<S: Real>(l: &[Vec<S>], b: &[S]) -> Vec<S> {
    let mut z: Vec<S> = Vec::with_capacity(b.len());
    for r in 0..b.len() {
        let mut acc = b[r];
        for c in 0..r {
            acc -= l[r][c] * z[c];
        }
        z.push(acc / l[r][r]);
    }
    z
}

/// Log-density of `N(0, L Lᵀ)` at `b`.
pub fn log_prior<S: Real>(b: &[S], l_omega: &[Vec<S>]) -> S {
    let z = lower_solve(l_omega, b);
    let d = b.len() as f64;
    let mut acc = -(S::dot(&z, &z) * 0.5) - 0.5 * d * LN_2PI;
    for (k, row) in l_omega.iter().enumerate() {
        acc -= row[k].ln();
    }
    acc
}

/// Log of an MC average of likelihoods, with a delta-method standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalEstimate {
    pub log_p: f64,
    pub std_error: f64,
}

impl MarginalEstimate {
    pub fn from_log_samples(logs: &[f64]) -> Result<Self, NlmeError> {
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(NlmeError::AllSamplesUnderflow);
        }
        let n = logs.len() as f64;
        let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            log_p: max + mean.ln(),
            std_error: (var / n).sqrt() / mean,
        })
    }
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SubjectRecord {
    /// Masked-in times and values.
    pub fn valid(&self) -> (Vec<f64>, Vec<f64>) {
        let mut t = Vec::with_capacity(self.times.len());
        let mut v = Vec::with_capacity(self.times.len());
        for k in 0..self.times.len() {
            if self.mask[k] {
                t.push(self.times[k]);
                v.push(self.values[k]);
            }
        }
        (t, v)
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn validate(&self) -> Result<(), NlmeError> {
        let n = self.times.len();
        if self.values.len() != n || self.mask.len() != n {
            return Err(NlmeError::InvalidInput(format!(
                "subject `{}`: ragged record",
                self.id
            )));
        }
        let (t, v) = self.valid();
        if t.is_empty() {
            return Err(NlmeError::EmptySubject(self.id.clone()));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) || t.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(NlmeError::InvalidInput(format!(
                "subject `{}`: times must be non-negative and strictly increasing",
                self.id
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(NlmeError::InvalidInput(format!(
                "subject `{}`: non-finite value",
                self.id
            )));
        }
        Ok(())
    }

    /// Pad with masked-out entries up to length `len`.
    pub fn padded(mut self, len: usize) -> Self {
        while self.times.len() < len {
            self.times.push(0.0);
            self.values.push(0.0);
            self.mask.push(false);
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Regular,
    Irregular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Design {
    pub n_subjects: usize,
    pub n_obs: usize,
    pub horizon: f64,
    pub sampling: Sampling,
}

impl Design {
    pub fn regular(n_subjects: usize, n_obs: usize, horizon: f64) -> Self {
        Self {
            n_subjects,
            n_obs,
            horizon,
            sampling: Sampling::Regular,
        }
    }

    pub fn validate(&self) -> Result<(), NlmeError> {
        if self.n_subjects == 0 || self.n_obs == 0 || !(self.horizon > 0.0) {
            return Err(NlmeError::InvalidInput(
                "design needs subjects, observations and a positive horizon".into(),
            ));
        }
        Ok(())
    }

    /// `horizon·j/n` for `j = 1..=n`.
    pub fn regular_grid(&self) -> Vec<f64> {
        (1..=self.n_obs)
            .map(|j| self.horizon * j as f64 / self.n_obs as f64)
            .collect()
    }
}

fn irregular_times(rng: &mut ChaCha8Rng, n: usize, horizon: f64) -> Vec<f64> {
    loop {
        let mut t: Vec<f64> = (0..n)
            .map(|_| horizon * (1.0 - rng.random::<f64>()))
            .collect();
        t.sort_by(f64::total_cmp);
        if t.windows(2).all(|w| w[1] > w[0]) {
            return t;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub model: String,
    pub pad_len: usize,
    #[serde(default)]
    pub design: Option<Design>,
    pub subjects: Vec<SubjectRecord>,
}

impl Dataset {
    pub fn validate(&self) -> Result<(), NlmeError> {
        if self.subjects.is_empty() {
            return Err(NlmeError::InvalidInput("dataset has no subjects".into()));
        }
        for s in &self.subjects {
            s.validate()?;
            if s.times.len() != self.pad_len {
                return Err(NlmeError::InvalidInput(format!(
                    "subject `{}` not padded to {}",
                    s.id, self.pad_len
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            subjects: idx.iter().map(|&i| self.subjects[i].clone()).collect(),
            ..self.clone()
        }
    }

    pub fn horizon(&self) -> f64 {
        match &self.design {
            Some(d) => d.horizon,
            None => self
                .subjects
                .iter()
                .flat_map(|s| s.valid().0)
                .fold(0.0, f64::max),
        }
    }
}

// ---------------------------------------------------------------------------
// Common random numbers
// ---------------------------------------------------------------------------

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Per-subject seed: depends on the subject id, not its position, so subject
/// order never changes the draws.
pub fn subject_seed(root: u64, id: &str) -> u64 {
    splitmix(root ^ splitmix(fnv1a(id)))
}

/// Derived seed for stream `k` of `root`.
pub fn child_seed(root: u64, k: u64) -> u64 {
    splitmix(root.wrapping_add(splitmix(k.wrapping_add(1))))
}

/// `n` standard-normal vectors of length `d`.
pub fn standard_normals(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Empirical Bayes estimate of `b_i`: the encoder mean in evaluation mode.
pub fn ebe(
    encoder: &crate::nn::Encoder,
    psi: &ParamVector,
    subject: &SubjectRecord,
) -> Result<Vec<f64>, crate::nn::NnError> {
    Ok(ebe_posterior(encoder, psi, subject)?.mu)
}

/// The full variational posterior of `b_i` in evaluation mode.
pub fn ebe_posterior(
    encoder: &crate::nn::Encoder,
    psi: &ParamVector,
    subject: &SubjectRecord,
) -> Result<crate::nn::Posterior<f64>, crate::nn::NnError> {
    encoder.encode(&psi.values, subject, None)
}
