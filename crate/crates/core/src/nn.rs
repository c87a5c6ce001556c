//! Encoder networks for the amortized posterior `q_ψ(b_i | Y_i)`.
//!
//! Two variants share the same head:
//!
//! * `Conv`: channels `(value, mask)` on the padded grid → same-padded
//!   conv1d → GELU → masked attention pooling or masked flatten.
//! * `Recurrent`: GRU over `(value, Δt/t_max, t/t_max)` at valid steps only.
//!
//! The head is linear → GELU → dropout → linear to the posterior mean and
//! log standard deviations (plus strictly-lower Cholesky entries for the
//! full form). All parameters live in one flat [`ParamVector`]; the forward
//! pass is generic over [`Real`] so the same code runs on `f64` and on the
//! tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::diff::{Layout, ParamVector, Real};
use crate::nlme::SubjectRecord;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("subject `{0}` has no valid observation")]
    EmptySubject(String),
    #[error("attention pooling over an all-masked sequence")]
    AllMasked,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    Conv,
    Recurrent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorForm {
    #[default]
    DiagonalStd,
    FullCholesky,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    pub latent_dim: usize,
    /// Padded sequence length; required by the flatten head.
    pub seq_len: usize,
    /// Time normalization for the recurrent features.
    pub time_scale: f64,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default = "default_true")]
    pub use_attention_pool: bool,
    #[serde(default)]
    pub posterior_form: PosteriorForm,
    /// Initial bias of the log-std outputs.
    #[serde(default = "default_init_log_std")]
    pub init_log_std: f64,
}

fn default_kernel() -> usize {
    3
}
fn default_channels() -> usize {
    8
}
fn default_hidden() -> usize {
    16
}
fn default_embed() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_init_log_std() -> f64 {
    -2.0
}

impl EncoderConfig {
    pub fn conv(latent_dim: usize, seq_len: usize, time_scale: f64) -> Self {
        Self {
            variant: EncoderVariant::Conv,
            kernel_size: default_kernel(),
            channels: default_channels(),
            hidden_dim: default_hidden(),
            embed_dim: default_embed(),
            latent_dim,
            seq_len,
            time_scale,
            dropout_rate: 0.0,
            use_attention_pool: true,
            posterior_form: PosteriorForm::DiagonalStd,
            init_log_std: default_init_log_std(),
        }
    }

    pub fn recurrent(latent_dim: usize, seq_len: usize, time_scale: f64) -> Self {
        Self {
            variant: EncoderVariant::Recurrent,
            ..Self::conv(latent_dim, seq_len, time_scale)
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(m.to_string()));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if self.embed_dim == 0 || self.seq_len == 0 {
            return bad("embed_dim and seq_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(self.time_scale > 0.0) {
            return bad("time_scale must be positive");
        }
        match self.variant {
            EncoderVariant::Conv => {
                if self.kernel_size % 2 == 0 {
                    return bad("kernel_size must be odd");
                }
                if self.channels == 0 {
                    return bad("channels must be positive");
                }
            }
            EncoderVariant::Recurrent => {
                if self.hidden_dim == 0 || self.hidden_dim > 32 {
                    return bad("hidden_dim must lie in 1..=32");
                }
            }
        }
        Ok(())
    }

    fn out_dim(&self) -> usize {
        let d = self.latent_dim;
        match self.posterior_form {
            PosteriorForm::DiagonalStd => 2 * d,
            PosteriorForm::FullCholesky => 2 * d + d * (d - 1) / 2,
        }
    }

    fn pooled_dim(&self) -> usize {
        match self.variant {
            EncoderVariant::Conv if self.use_attention_pool => self.channels,
            EncoderVariant::Conv => self.channels * self.seq_len,
            EncoderVariant::Recurrent => self.hidden_dim,
        }
    }
}

/// Posterior `N(mu, chol·cholᵀ)`; `chol` is row-major lower triangular.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior<S> {
    pub mu: Vec<S>,
    pub chol: Vec<Vec<S>>,
}

impl<S: Real> Posterior<S> {
    /// `mu + chol·eps`.
    pub fn sample(&self, eps: &[f64]) -> Vec<S> {
        self.mu
            .iter()
            .zip(crate::nlme::lower_matvec(&self.chol, eps))
            .map(|(m, v)| *m + v)
            .collect()
    }

    pub fn values(&self) -> Posterior<f64> {
        Posterior {
            mu: self.mu.iter().map(|v| v.value()).collect(),
            chol: self
                .chol
                .iter()
                .map(|r| r.iter().map(|v| v.value()).collect())
                .collect(),
        }
    }
}

const GRU_INPUT: usize = 3;
const CONV_INPUT: usize = 2;

/// Encoder architecture with its parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub layout: Layout,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self, NnError> {
        cfg.validate()?;
        let mut l = Layout::new();
        let mut push = |name: &str, len: usize| l.push(name, len).expect("unique segment names");
        match cfg.variant {
            EncoderVariant::Conv => {
                push("conv.w", cfg.channels * CONV_INPUT * cfg.kernel_size);
                push("conv.b", cfg.channels);
                if cfg.use_attention_pool {
                    push("attn.w", cfg.channels);
                    push("attn.c", 1);
                }
            }
            EncoderVariant::Recurrent => {
                let h = cfg.hidden_dim;
                push("gru.w", 3 * h * GRU_INPUT);
                push("gru.u", 3 * h * h);
                push("gru.b", 3 * h);
                push("gru.bn", h);
            }
        }
        push("embed.w", cfg.embed_dim * cfg.pooled_dim());
        push("embed.b", cfg.embed_dim);
        push("out.w", cfg.out_dim() * cfg.embed_dim);
        push("out.b", cfg.out_dim());
        Ok(Self { cfg, layout: l })
    }

    pub fn n_params(&self) -> usize {
        self.layout.len()
    }

    /// Fan-in uniform `U(±1/√fan_in)` everywhere except the final layer,
    /// whose weights are `N(0, 0.001²)`; final biases are 0 for the mean
    /// and `init_log_std` for the log standard deviations.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pv = ParamVector::zeros(self.layout.clone());
        let cfg = &self.cfg;
        let fan_in = |name: &str| -> f64 {
            match name {
                "conv.w" | "conv.b" => (CONV_INPUT * cfg.kernel_size) as f64,
                "attn.w" | "attn.c" => cfg.channels as f64,
                "gru.w" | "gru.u" | "gru.b" | "gru.bn" => cfg.hidden_dim as f64,
                "embed.w" | "embed.b" => cfg.pooled_dim() as f64,
                _ => cfg.embed_dim as f64,
            }
        };
        let final_w = Normal::new(0.0, 0.001).expect("valid sd");
        for seg in self.layout.segments().to_vec() {
            let vals: Vec<f64> = match seg.name.as_str() {
                "out.w" => (0..seg.len).map(|_| rng.sample(final_w)).collect(),
                "out.b" => (0..seg.len)
                    .map(|k| {
                        let d = cfg.latent_dim;
                        if (d..2 * d).contains(&k) {
                            cfg.init_log_std
                        } else {
                            0.0
                        }
                    })
                    .collect(),
                name => {
                    let a = 1.0 / fan_in(name).sqrt();
                    (0..seg.len).map(|_| rng.random_range(-a..a)).collect()
                }
            };
            pv.set(&seg.name, &vals).expect("segment length");
        }
        pv
    }

    fn seg<'a, S>(&self, psi: &'a [S], name: &str) -> &'a [S] {
        let s = self.layout.segment(name).expect("segment exists");
        &psi[s.offset..s.offset + s.len]
    }

    /// Posterior for one subject. `dropout` supplies the mask stream in
    /// training mode; `None` means evaluation mode.
    pub fn encode<S: Real>(
        &self,
        psi: &[S],
        subject: &SubjectRecord,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Posterior<S>, NnError> {
        if psi.len() != self.n_params() {
            return Err(NnError::Shape(format!(
                "expected {} encoder parameters, got {}",
                self.n_params(),
                psi.len()
            )));
        }
        if subject.n_valid() == 0 {
            return Err(NnError::EmptySubject(subject.id.clone()));
        }
        let cfg = &self.cfg;
        let pooled = match cfg.variant {
            EncoderVariant::Conv => self.conv_features(psi, subject)?,
            EncoderVariant::Recurrent => self.gru_features(psi, subject),
        };
        let mut e = linear(self.seg(psi, "embed.w"), self.seg(psi, "embed.b"), &pooled)?;
        for v in e.iter_mut() {
            *v = v.gelu();
        }
        if let Some(rng) = dropout {
            apply_dropout(&mut e, cfg.dropout_rate, rng);
        }
        let out = linear(self.seg(psi, "out.w"), self.seg(psi, "out.b"), &e)?;
        Ok(posterior_from_output(
            &out,
            cfg.latent_dim,
            cfg.posterior_form,
        ))
    }

    fn conv_features<S: Real>(
        &self,
        psi: &[S],
        subject: &SubjectRecord,
    ) -> Result<Vec<S>, NnError> {
        let cfg = &self.cfg;
        let t_len = subject.times.len();
        if t_len != cfg.seq_len {
            return Err(NnError::Shape(format!(
                "conv encoder expects length {}, got {t_len}",
                cfg.seq_len
            )));
        }
        let input: Vec<Vec<S>> = vec![
            subject
                .values
                .iter()
                .zip(&subject.mask)
                .map(|(v, m)| S::cst(if *m { *v } else { 0.0 }))
                .collect(),
            subject
                .mask
                .iter()
                .map(|m| S::cst(if *m { 1.0 } else { 0.0 }))
                .collect(),
        ];
        let conv = conv1d(
            self.seg(psi, "conv.w"),
            self.seg(psi, "conv.b"),
            &input,
            cfg.channels,
            cfg.kernel_size,
        )?;
        // z[t] is the channel vector at position t.
        let z: Vec<Vec<S>> = (0..t_len)
            .map(|t| (0..cfg.channels).map(|c| conv[c][t].gelu()).collect())
            .collect();
        if cfg.use_attention_pool {
            let w = self.seg(psi, "attn.w");
            let c = self.seg(psi, "attn.c")[0];
            attention_pool(&z, &subject.mask, w, c)
        } else {
            let mut flat = Vec::with_capacity(cfg.channels * t_len);
            for (t, zt) in z.iter().enumerate() {
                for v in zt {
                    flat.push(if subject.mask[t] { *v } else { S::zero() });
                }
            }
            Ok(flat)
        }
    }

    fn gru_features<S: Real>(&self, psi: &[S], subject: &SubjectRecord) -> Vec<S> {
        let cfg = &self.cfg;
        let gru = GruParams {
            w: self.seg(psi, "gru.w"),
            u: self.seg(psi, "gru.u"),
            b: self.seg(psi, "gru.b"),
            bn: self.seg(psi, "gru.bn"),
            hidden: cfg.hidden_dim,
        };
        let mut h = vec![S::zero(); cfg.hidden_dim];
        let mut prev: Option<f64> = None;
        for k in 0..subject.times.len() {
            if !subject.mask[k] {
                continue;
            }
            let t = subject.times[k];
            let dt = prev.map_or(0.0, |p| t - p);
            prev = Some(t);
            let x = [
                S::cst(subject.values[k]),
                S::cst(dt / cfg.time_scale),
                S::cst(t / cfg.time_scale),
            ];
            h = gru_step(&gru, &x, &h);
        }
        h
    }
}

fn posterior_from_output<S: Real>(out: &[S], d: usize, form: PosteriorForm) -> Posterior<S> {
    let mu = out[..d].to_vec();
    let mut chol = vec![vec![S::zero(); d]; d];
    for k in 0..d {
        chol[k][k] = out[d + k].exp();
    }
    if form == PosteriorForm::FullCholesky {
        let mut next = 2 * d;
        for r in 1..d {
            for c in 0..r {
                chol[r][c] = out[next];
                next += 1;
            }
        }
    }
    Posterior { mu, chol }
}

/// `W x + b` with `W` row-major `(b.len() × x.len())`.
pub fn linear<S: Real>(w: &[S], b: &[S], x: &[S]) -> Result<Vec<S>, NnError> {
    let n = x.len();
    if w.len() != b.len() * n {
        return Err(NnError::Shape(format!(
            "linear: {} weights for {}×{}",
            w.len(),
            b.len(),
            n
        )));
    }
    Ok(b.iter()
        .enumerate()
        .map(|(r, br)| S::dot(&w[r * n..(r + 1) * n], x) + *br)
        .collect())
}

/// Same-length 1-D convolution with zero padding. `input[c][t]`, weights
/// `[out][in][k]`, returns `out[c][t]`.
pub fn conv1d<S: Real>(
    w: &[S],
    b: &[S],
    input: &[Vec<S>],
    out_channels: usize,
    kernel: usize,
) -> Result<Vec<Vec<S>>, NnError> {
    let c_in = input.len();
    if w.len() != out_channels * c_in * kernel || b.len() != out_channels || kernel % 2 == 0 {
        return Err(NnError::Shape("conv1d parameter shapes".into()));
    }
    let t_len = input.first().map_or(0, Vec::len);
    let half = kernel / 2;
    let mut out = vec![Vec::with_capacity(t_len); out_channels];
    let mut ws = Vec::with_capacity(c_in * kernel);
    let mut xs = Vec::with_capacity(c_in * kernel);
    for t in 0..t_len {
        for (o, row) in out.iter_mut().enumerate() {
            ws.clear();
            xs.clear();
            for (ci, chan) in input.iter().enumerate() {
                for k in 0..kernel {
                    let pos = t + k;
                    if pos < half || pos - half >= t_len {
                        continue;
                    }
                    ws.push(w[(o * c_in + ci) * kernel + k]);
                    xs.push(chan[pos - half]);
                }
            }
            row.push(S::dot(&ws, &xs) + b[o]);
        }
    }
    Ok(out)
}

pub struct GruParams<'a, S> {
    /// Input weights for gates (z, r, n), each `hidden × input`.
    pub w: &'a [S],
    /// Recurrent weights for gates (z, r, n), each `hidden × hidden`.
    pub u: &'a [S],
    pub b: &'a [S],
    /// Recurrent bias inside the reset product.
    pub bn: &'a [S],
    pub hidden: usize,
}

/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `n = tanh(W_n x + b_n + r ⊙ (U_n h + b_hn))`, `h' = (1 − z) ⊙ n + z ⊙ h`.
pub fn gru_step<S: Real>(p: &GruParams<S>, x: &[S], h: &[S]) -> Vec<S> {
    let hd = p.hidden;
    let ni = x.len();
    let wrow = |g: usize, r: usize| &p.w[(g * hd + r) * ni..(g * hd + r + 1) * ni];
    let urow = |g: usize, r: usize| &p.u[(g * hd + r) * hd..(g * hd + r + 1) * hd];
    (0..hd)
        .map(|r| {
            let z = (S::dot(wrow(0, r), x) + S::dot(urow(0, r), h) + p.b[r]).sigmoid();
            let rg = (S::dot(wrow(1, r), x) + S::dot(urow(1, r), h) + p.b[hd + r]).sigmoid();
            let n =
                (S::dot(wrow(2, r), x) + p.b[2 * hd + r] + rg * (S::dot(urow(2, r), h) + p.bn[r]))
                    .tanh();
            (-z + 1.0) * n + z * h[r]
        })
        .collect()
}

/// Masked softmax pooling `Σ α_t z_t` with logits `wᵀz_t + c`; masked
/// positions get exactly zero weight.
pub fn attention_pool<S: Real>(
    hidden: &[Vec<S>],
    mask: &[bool],
    w: &[S],
    c: S,
) -> Result<Vec<S>, NnError> {
    if hidden.len() != mask.len() {
        return Err(NnError::Shape(
            "attention: hidden and mask lengths differ".into(),
        ));
    }
    let valid: Vec<usize> = (0..mask.len()).filter(|&t| mask[t]).collect();
    if valid.is_empty() {
        return Err(NnError::AllMasked);
    }
    let logits: Vec<S> = valid.iter().map(|&t| S::dot(w, &hidden[t]) + c).collect();
    let weights = softmax(&logits);
    let h = hidden[valid[0]].len();
    Ok((0..h)
        .map(|k| {
            let col: Vec<S> = valid.iter().map(|&t| hidden[t][k]).collect();
            S::dot(&weights, &col)
        })
        .collect())
}

pub fn softmax<S: Real>(logits: &[S]) -> Vec<S> {
    let max = logits
        .iter()
        .map(|v| v.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<S> = logits.iter().map(|l| (*l - max).exp()).collect();
    let total = S::sum(&e);
    e.iter().map(|v| *v / total).collect()
}

/// Inverted dropout.
pub fn apply_dropout<S: Real>(x: &mut [S], rate: f64, rng: &mut ChaCha8Rng) {
    if rate == 0.0 {
        return;
    }
    let keep = 1.0 / (1.0 - rate);
    for v in x.iter_mut() {
        if rng.random::<f64>() < rate {
            *v = S::zero();
        } else {
            *v *= S::cst(keep);
        }
    }
}
