//! Full-batch Adam maximization of the total ELBO.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::ParamVector;
use crate::elbo::{ElboConfig, ElboError, Objective};
use crate::nlme::{child_seed, Dataset, NlmeError, NlmeProblem};
use crate::nn::{Encoder, EncoderConfig, NnError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("objective not evaluable at the initial parameters: {0}")]
    SolverFailureAtInit(ElboError),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nlme(#[from] NlmeError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Elbo(#[from] ElboError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// Drop to `drop_to` once the training loss has not improved for
    /// `patience` epochs.
    PlateauStep {
        drop_to: f64,
        patience: usize,
    },
    Cosine {
        period: usize,
    },
    Constant,
}

/// Starting point of φ. Estimated fixed effects are drawn uniformly within
/// `±spread` of `center` on the unconstrained scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    /// Natural-scale centre per estimated parameter; the model truth if absent.
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub spread: f64,
    #[serde(default = "point_three")]
    pub omega: f64,
    #[serde(default = "point_three")]
    pub sigma: f64,
    /// Seed for the starting point only; defaults to the training seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn one() -> f64 {
    1.0
}

fn point_three() -> f64 {
    0.3
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            center: None,
            spread: 1.0,
            omega: 0.3,
            sigma: 0.3,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    pub max_epochs: usize,
    #[serde(default = "default_eps_g")]
    pub eps_g: f64,
    #[serde(default = "default_eps_p")]
    pub eps_p: f64,
    #[serde(default = "default_eps_div")]
    pub eps_div: f64,
    pub patience: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    pub n_mc: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: InitConfig,
}

fn default_eps_g() -> f64 {
    1e-4
}
fn default_eps_p() -> f64 {
    1e-6
}
fn default_eps_div() -> f64 {
    1e-8
}
fn default_val_fraction() -> f64 {
    0.2
}

const MAX_RETRIES: usize = 5;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 0.1,
            lr_schedule: LrSchedule::PlateauStep {
                drop_to: 0.05,
                patience: 50,
            },
            clip_norm: None,
            max_epochs: 1000,
            eps_g: default_eps_g(),
            eps_p: default_eps_p(),
            eps_div: default_eps_div(),
            patience: 30,
            val_fraction: default_val_fraction(),
            n_mc: 10,
            seed: 0,
            init: InitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lr_init > 0.0) {
            return bad("lr_init must be positive");
        }
        if !(self.eps_g > 0.0 && self.eps_p > 0.0 && self.eps_div > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.n_mc == 0 {
            return bad("n_mc must be at least 1");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive");
            }
        }
        match self.lr_schedule {
            LrSchedule::PlateauStep { drop_to, .. } if !(drop_to > 0.0) => {
                bad("drop_to must be positive")
            }
            LrSchedule::Cosine { period: 0 } => bad("cosine period must be positive"),
            _ => Ok(()),
        }?;
        if !(self.init.spread >= 0.0 && self.init.omega > 0.0 && self.init.sigma > 0.0) {
            return bad("init spread must be non-negative and init scales positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientNorm,
    ParamUpdate,
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub phi: ParamVector,
    pub psi: ParamVector,
    pub phi_init: ParamVector,
    /// Per-subject mean negative ELBO on the training split.
    pub train_history: Vec<f64>,
    pub val_history: Vec<f64>,
    pub stop_reason: StopReason,
    pub epochs_run: usize,
    /// Epoch whose parameters are returned (0 = initialization).
    pub best_epoch: usize,
    pub lr_final: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam descent step on `params`.
pub fn adam_update(state: &mut AdamState, params: &mut [f64], grad: &[f64], lr: f64) {
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    for k in 0..params.len() {
        state.m[k] = BETA1 * state.m[k] + (1.0 - BETA1) * grad[k];
        state.v[k] = BETA2 * state.v[k] + (1.0 - BETA2) * grad[k] * grad[k];
        let mh = state.m[k] / c1;
        let vh = state.v[k] / c2;
        params[k] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescale `grad` to global norm `clip` if larger; returns the original norm.
pub fn clip_global_norm(grad: &mut [f64], clip: f64) -> f64 {
    let n = l2_norm(grad);
    if n > clip {
        let s = clip / n;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    n
}

/// Number of trailing epochs whose loss is above the running minimum of
/// all earlier epochs.
pub fn epochs_since_improvement(history: &[f64]) -> usize {
    let mut best = f64::INFINITY;
    let mut since = 0;
    for &v in history {
        if v > best {
            since += 1;
        } else {
            best = v;
            since = 0;
        }
    }
    since
}

pub fn stop_check(
    grad: &[f64],
    prev: &[f64],
    cur: &[f64],
    val_history: &[f64],
    cfg: &TrainConfig,
) -> StopDecision {
    if l2_norm(grad) < cfg.eps_g {
        return StopDecision::Stop(StopReason::GradientNorm);
    }
    let delta: f64 = prev
        .iter()
        .zip(cur)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if delta / (l2_norm(prev) + cfg.eps_div) < cfg.eps_p {
        return StopDecision::Stop(StopReason::ParamUpdate);
    }
    if epochs_since_improvement(val_history) > cfg.patience {
        return StopDecision::Stop(StopReason::EarlyStop);
    }
    StopDecision::Continue
}

/// Learning rate for `epoch` given the training-loss history so far.
pub fn scheduled_lr(
    cfg: &TrainConfig,
    epoch: usize,
    dropped: &mut bool,
    train_history: &[f64],
) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr_init,
        LrSchedule::Cosine { period } => {
            let phase = (epoch % period) as f64 / period as f64;
            cfg.lr_init * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
        }
        LrSchedule::PlateauStep { drop_to, patience } => {
            if !*dropped && epochs_since_improvement(train_history) >= patience && patience > 0 {
                *dropped = true;
            }
            if *dropped {
                drop_to
            } else {
                cfg.lr_init
            }
        }
    }
}

/// Subject-level split, deterministic in `seed`. Returns (train, validation)
/// indices, each sorted.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = ((n as f64) * val_fraction).floor() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Random starting φ per [`InitConfig`].
pub fn initial_phi(
    problem: &NlmeProblem,
    init: &InitConfig,
    seed: u64,
) -> Result<ParamVector, TrainError> {
    let names = problem.estimated_names();
    let center_u: Vec<f64> = match &init.center {
        Some(c) => {
            if c.len() != names.len() {
                return Err(TrainError::InvalidConfig(format!(
                    "init center has {} values for {} estimated parameters",
                    c.len(),
                    names.len()
                )));
            }
            let u: Vec<f64> = problem
                .estimated
                .iter()
                .zip(c)
                .map(|(&k, &v)| problem.model.params[k].transform.to_unconstrained(v))
                .collect();
            if u.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::InvalidConfig(
                    "init center outside the parameter domain".into(),
                ));
            }
            u
        }
        None => {
            let t = problem.model.truth_unconstrained();
            problem.estimated.iter().map(|&k| t[k]).collect()
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta: Vec<f64> = center_u
        .iter()
        .map(|c| c + init.spread * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    let mut phi = ParamVector::zeros(problem.layout());
    phi.set("theta", &theta).map_err(NlmeError::from)?;
    phi.set("log_omega", &vec![init.omega.ln(); problem.n_random()])
        .map_err(NlmeError::from)?;
    phi.set("log_sigma", &[init.sigma.ln()])
        .map_err(NlmeError::from)?;
    Ok(phi)
}

/// The encoder configuration adapted to the dataset and model.
pub fn encoder_for(cfg: &EncoderConfig, data: &Dataset, problem: &NlmeProblem) -> EncoderConfig {
    let mut c = cfg.clone();
    c.seq_len = data.pad_len;
    c.latent_dim = problem.n_random();
    c
}

fn finite(v: &(f64, Vec<f64>)) -> bool {
    v.0.is_finite() && v.1.iter().all(|g| g.is_finite())
}

/// Fits φ and ψ by maximizing the ELBO of the training split.
///
/// Returns the parameters of the epoch with the lowest validation loss (the
/// training loss when there is no validation split).
pub fn fit(
    data: &Dataset,
    problem: &NlmeProblem,
    encoder_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<FitResult, TrainError> {
    let start = Instant::now();
    cfg.validate()?;
    data.validate()?;
    let encoder = Encoder::new(encoder_for(encoder_cfg, data, problem))?;
    let objective = Objective::new(
        problem.clone(),
        encoder,
        ElboConfig {
            n_mc: cfg.n_mc,
            seed: child_seed(cfg.seed, 0),
        },
    )?;
    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, child_seed(cfg.seed, 1));
    let train = data.subset(&train_idx);
    let val = data.subset(&val_idx);
    let n_train = train.len() as f64;
    let n_val = val.len() as f64;

    let init_root = cfg.init.seed.unwrap_or(cfg.seed);
    let phi0 = initial_phi(problem, &cfg.init, child_seed(init_root, 2))?;
    let psi0 = objective.encoder.init_params(child_seed(init_root, 3));
    let mut x = objective.join(&phi0, &psi0);
    let dropout = objective.encoder.cfg.dropout_rate > 0.0;
    let dropout_seed = |epoch: usize| dropout.then(|| child_seed(cfg.seed, 1000 + epoch as u64));

    let val_loss = |x: &[f64]| -> Result<Option<f64>, ElboError> {
        if val.is_empty() {
            Ok(None)
        } else {
            objective.total(x, &val).map(|v| Some(-v / n_val))
        }
    };

    let mut current = objective
        .total_value_grad(&x, &train, dropout_seed(0))
        .map_err(TrainError::SolverFailureAtInit)?;
    if !finite(&current) {
        return Err(TrainError::SolverFailureAtInit(ElboError::Diff(
            crate::diff::DiffError::NonFiniteValue,
        )));
    }
    let init_val = val_loss(&x)
        .map_err(TrainError::SolverFailureAtInit)?
        .unwrap_or(-current.0 / n_train);

    let mut adam = AdamState::new(x.len());
    let mut train_history = Vec::new();
    let mut val_history = Vec::new();
    let mut best = (init_val, 0usize, x.clone());
    let mut dropped = false;
    let mut lr_scale = 1.0;
    let mut lr = cfg.lr_init;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let mut grad: Vec<f64> = current.1.iter().map(|g| -g / n_train).collect();
        if let Some(c) = cfg.clip_norm {
            clip_global_norm(&mut grad, c);
        }
        lr = scheduled_lr(cfg, epoch - 1, &mut dropped, &train_history);
        let mut retries = 0;
        let (next_x, next, vloss) = loop {
            let mut trial_adam = adam.clone();
            let mut trial = x.clone();
            adam_update(&mut trial_adam, &mut trial, &grad, lr * lr_scale);
            let evaluated = objective
                .total_value_grad(&trial, &train, dropout_seed(epoch))
                .and_then(|vg| Ok((vg, val_loss(&trial)?)));
            match evaluated {
                Ok((vg, vl)) if finite(&vg) && vl.is_none_or(f64::is_finite) => {
                    adam = trial_adam;
                    break (trial, vg, vl);
                }
                _ if retries < MAX_RETRIES => {
                    retries += 1;
                    lr_scale *= 0.5;
                }
                Ok(_) => return Err(TrainError::NonFiniteLoss { epoch }),
                Err(e) => return Err(e.into()),
            }
        };
        let tloss = -next.0 / n_train;
        let vloss = vloss.unwrap_or(tloss);
        train_history.push(tloss);
        val_history.push(vloss);
        if vloss < best.0 {
            best = (vloss, epoch, next_x.clone());
        }
        let prev = std::mem::replace(&mut x, next_x);
        current = next;
        let g_now: Vec<f64> = current.1.iter().map(|g| -g / n_train).collect();
        if let StopDecision::Stop(r) = stop_check(&g_now, &prev, &x, &val_history, cfg) {
            stop_reason = r;
            break;
        }
    }

    let (_, best_epoch, best_x) = best;
    let (phi, psi) = objective.split(&best_x);
    Ok(FitResult {
        phi,
        psi,
        phi_init: phi0,
        epochs_run: train_history.len(),
        train_history,
        val_history,
        stop_reason,
        best_epoch,
        lr_final: lr * lr_scale,
        n_train: train.len(),
        n_val: val.len(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
