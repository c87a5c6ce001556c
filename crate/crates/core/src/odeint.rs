//! Adaptive Runge–Kutta integration of subject-level ODE systems.
//!
//! Two methods are provided:
//!
//! * [`Method::ExplicitRk5`]: the Dormand–Prince 5(4) embedded pair with FSAL.
//! * [`Method::ImplicitEsdirk`]: the six-stage, L-stable, stiffly accurate
//!   ESDIRK 4(3) of Kennedy & Carpenter (ARK4(3)6L\[2\]SA, implicit part,
//!   γ = 1/4). Stage equations are solved by Newton iteration with a
//!   finite-difference Jacobian evaluated once per step.
//!
//! The step grid is clipped so that every save time and every event time is
//! hit exactly; no dense output is used. At an event the integrator restarts
//! from the current state with a fresh first stage, so a discontinuous
//! forcing term is only ever evaluated on its own side of the jump. The field
//! receives the index of the current forcing interval (the number of events
//! at or before the segment start) for that purpose.
//!
//! All step-size and accept/reject decisions are made on primal values, so
//! integrating with [`Dual`](crate::diff::Dual) states differentiates the
//! discretization actually taken with the step sequence frozen.

use serde::{Deserialize, Serialize};

use crate::diff::Real;
use crate::linalg::{Lu, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    ExplicitRk5,
    ImplicitEsdirk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub max_steps: usize,
    /// Convergence threshold on the weighted RMS norm of a Newton update.
    pub newton_tol: f64,
    pub newton_max_iters: usize,
    /// Overrides adaptivity: every segment is split into equal steps of at
    /// most this size.
    #[serde(default)]
    pub fixed_step: Option<f64>,
}

impl SolverConfig {
    pub fn explicit(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::ExplicitRk5,
            rtol,
            atol,
            h_init: 1e-2,
            h_min: 1e-12,
            h_max: 1e6,
            max_steps: 200_000,
            newton_tol: 1e-3,
            newton_max_iters: 10,
            fixed_step: None,
        }
    }

    pub fn implicit(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::ImplicitEsdirk,
            ..Self::explicit(rtol, atol)
        }
    }

    pub fn with_fixed_step(mut self, h: f64) -> Self {
        self.fixed_step = Some(h);
        self
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        let bad = |m: &str| Err(OdeError::InvalidInput(m.to_string()));
        if !(self.rtol > 0.0) || !(self.atol > 0.0) {
            return bad("rtol and atol must be positive");
        }
        if !(self.h_min > 0.0 && self.h_min <= self.h_init && self.h_init <= self.h_max) {
            return bad("step bounds must satisfy 0 < h_min <= h_init <= h_max");
        }
        if self.max_steps == 0 || self.newton_max_iters == 0 {
            return bad("max_steps and newton_max_iters must be positive");
        }
        if !(self.newton_tol > 0.0) {
            return bad("newton_tol must be positive");
        }
        if let Some(h) = self.fixed_step {
            if !(h > 0.0) || !h.is_finite() {
                return bad("fixed_step must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OdeError {
    #[error("step limit exceeded at t = {t}")]
    StepLimitExceeded { t: f64 },
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("Newton iteration diverged at t = {t}")]
    NewtonDivergence { t: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// States at the requested save times.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePath<S> {
    pub times: Vec<f64>,
    pub states: Vec<Vec<S>>,
}

impl<S: Real> StatePath<S> {
    pub fn values(&self) -> Vec<Vec<f64>> {
        self.states
            .iter()
            .map(|x| x.iter().map(|v| v.value()).collect())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Tableaus
// ---------------------------------------------------------------------------

const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// Fifth-order minus embedded fourth-order weights.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

pub(crate) const ESDIRK_GAMMA: f64 = 0.25;
pub(crate) const ESDIRK_C: [f64; 6] = [0.0, 0.5, 83.0 / 250.0, 31.0 / 50.0, 17.0 / 20.0, 1.0];
pub(crate) const ESDIRK_A: [[f64; 6]; 6] = [
    [0.0; 6],
    [0.25, 0.25, 0.0, 0.0, 0.0, 0.0],
    [8611.0 / 62500.0, -1743.0 / 31250.0, 0.25, 0.0, 0.0, 0.0],
    [
        5012029.0 / 34652500.0,
        -654441.0 / 2922500.0,
        174375.0 / 388108.0,
        0.25,
        0.0,
        0.0,
    ],
    [
        15267082809.0 / 155376265600.0,
        -71443401.0 / 120774400.0,
        730878875.0 / 902184768.0,
        2285395.0 / 8070912.0,
        0.25,
        0.0,
    ],
    [
        82889.0 / 524892.0,
        0.0,
        15625.0 / 83664.0,
        69875.0 / 102672.0,
        -2260.0 / 8211.0,
        0.25,
    ],
];
pub(crate) const ESDIRK_BHAT: [f64; 6] = [
    4586570599.0 / 29645900160.0,
    0.0,
    178811875.0 / 945068544.0,
    814220225.0 / 1159782912.0,
    -3700637.0 / 11593932.0,
    61727.0 / 225920.0,
];

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

fn error_norm<S: Real>(err: &[S], x_old: &[S], x_new: &[S], cfg: &SolverConfig) -> f64 {
    let n = err.len().max(1) as f64;
    let sum: f64 = err
        .iter()
        .zip(x_old.iter().zip(x_new))
        .map(|(e, (a, b))| {
            let scale = cfg.atol + cfg.rtol * a.value().abs().max(b.value().abs());
            (e.value() / scale).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

fn all_finite<S: Real>(x: &[S]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// `x + h Σ_j a_j k_j`.
fn stage_state<S: Real>(x: &[S], k: &[Vec<S>], coeffs: &[f64], h: f64) -> Vec<S> {
    let mut out = x.to_vec();
    for (j, a) in coeffs.iter().enumerate() {
        if *a == 0.0 {
            continue;
        }
        let w = h * a;
        for (o, kj) in out.iter_mut().zip(&k[j]) {
            *o += *kj * w;
        }
    }
    out
}

struct StepOutcome<S> {
    x_new: Vec<S>,
    err: f64,
}

/// Stage buffers for Dormand–Prince, reused across steps.
struct DopriWork<S> {
    k: Vec<Vec<S>>,
    xi: Vec<S>,
    x_new: Vec<S>,
    /// `k[0]` already holds the derivative at the current state.
    has_fsal: bool,
}

impl<S: Real> DopriWork<S> {
    fn new(d: usize) -> Self {
        Self {
            k: vec![vec![S::zero(); d]; 7],
            xi: vec![S::zero(); d],
            x_new: vec![S::zero(); d],
            has_fsal: false,
        }
    }

    /// After an accepted step the end-point derivative becomes the next
    /// first stage.
    fn accept(&mut self, x: &mut Vec<S>) {
        std::mem::swap(x, &mut self.x_new);
        self.k.swap(0, 6);
        self.has_fsal = true;
    }
}

fn stage_into<S: Real>(x: &[S], k: &[Vec<S>], coeffs: &[f64], h: f64, out: &mut [S]) {
    out.copy_from_slice(x);
    for (j, a) in coeffs.iter().enumerate() {
        if *a == 0.0 {
            continue;
        }
        let w = h * a;
        for (o, kj) in out.iter_mut().zip(&k[j]) {
            *o += *kj * w;
        }
    }
}

/// One Dormand–Prince step into `w.x_new`; returns the error norm.
fn dopri_step<S, F>(
    field: &mut F,
    t: f64,
    piece: usize,
    x: &[S],
    h: f64,
    cfg: &SolverConfig,
    w: &mut DopriWork<S>,
) -> f64
where
    S: Real,
    F: FnMut(f64, usize, &[S], &mut [S]),
{
    if !w.has_fsal {
        field(t, piece, x, &mut w.k[0]);
        w.has_fsal = true;
    }
    for i in 1..7 {
        stage_into(x, &w.k, &DP_A[i][..i], h, &mut w.xi);
        field(t + DP_C[i] * h, piece, &w.xi, &mut w.k[i]);
    }
    stage_into(x, &w.k, &DP_A[6][..6], h, &mut w.x_new);
    let mut sum = 0.0;
    for j in 0..x.len() {
        let mut e = 0.0;
        for (i, c) in DP_E.iter().enumerate() {
            if *c != 0.0 {
                e += w.k[i][j].value() * c;
            }
        }
        let scale = cfg.atol + cfg.rtol * x[j].value().abs().max(w.x_new[j].value().abs());
        sum += (h * e / scale).powi(2);
    }
    (sum / x.len().max(1) as f64).sqrt()
}

/// One Dormand–Prince step; returns the new state and the weighted RMS
/// local error estimate.
pub fn step_explicit<S, F>(
    mut field: F,
    t: f64,
    x: &[S],
    h: f64,
    piece: usize,
    cfg: &SolverConfig,
) -> Result<(Vec<S>, f64), OdeError>
where
    S: Real,
    F: FnMut(f64, usize, &[S], &mut [S]),
{
    if !(h > 0.0) {
        return Err(OdeError::InvalidInput("step size must be positive".into()));
    }
    let mut w = DopriWork::new(x.len());
    let err = dopri_step(&mut field, t, piece, x, h, cfg, &mut w);
    Ok((w.x_new, err))
}

fn numerical_jacobian<S, F>(field: &mut F, t: f64, piece: usize, x: &[S], f0: &[f64]) -> Matrix
where
    S: Real,
    F: FnMut(f64, usize, &[S], &mut [S]),
{
    let d = x.len();
    let mut jac = Matrix::zeros(d, d);
    let base: Vec<f64> = x.iter().map(|v| v.value()).collect();
    let mut xp: Vec<S> = base.iter().map(|&v| S::cst(v)).collect();
    let mut fp = vec![S::zero(); d];
    for c in 0..d {
        let delta = f64::EPSILON.sqrt() * base[c].abs().max(1e-5);
        xp[c] = S::cst(base[c] + delta);
        field(t, piece, &xp, &mut fp);
        for r in 0..d {
            jac[(r, c)] = (fp[r].value() - f0[r]) / delta;
        }
        xp[c] = S::cst(base[c]);
    }
    jac
}

fn esdirk_step<S, F>(
    field: &mut F,
    t: f64,
    piece: usize,
    x: &[S],
    h: f64,
    cfg: &SolverConfig,
) -> Result<StepOutcome<S>, OdeError>
where
    S: Real,
    F: FnMut(f64, usize, &[S], &mut [S]),
{
    let d = x.len();
    let mut k: Vec<Vec<S>> = Vec::with_capacity(6);
    let mut k1 = vec![S::zero(); d];
    field(t, piece, x, &mut k1);
    let f0: Vec<f64> = k1.iter().map(|v| v.value()).collect();
    k.push(k1);

    let jac = numerical_jacobian(field, t, piece, x, &f0);
    let hg = h * ESDIRK_GAMMA;
    let mut m = Matrix::identity(d);
    for r in 0..d {
        for c in 0..d {
            m[(r, c)] -= hg * jac[(r, c)];
        }
    }
    let lu = Lu::factor(&m).map_err(|_| OdeError::NewtonDivergence { t })?;
    let weights: Vec<f64> = x
        .iter()
        .map(|v| cfg.atol + cfg.rtol * v.value().abs())
        .collect();

    let mut z_last = x.to_vec();
    for i in 1..6 {
        let ti = t + ESDIRK_C[i] * h;
        let r = stage_state(x, &k, &ESDIRK_A[i][..i], h);
        // Predictor: extrapolate with the previous stage slope.
        let mut z: Vec<S> = r
            .iter()
            .zip(&k[i - 1])
            .map(|(ri, kp)| *ri + *kp * hg)
            .collect();
        let mut fz = vec![S::zero(); d];
        let mut converged = false;
        let mut prev_norm = f64::INFINITY;
        let mut polish = !S::is_primal();
        for _ in 0..cfg.newton_max_iters + 1 {
            field(ti, piece, &z, &mut fz);
            let g: Vec<S> = (0..d).map(|c| z[c] - fz[c] * hg - r[c]).collect();
            let dz = lu.solve(&g);
            for (zc, dc) in z.iter_mut().zip(&dz) {
                *zc -= *dc;
            }
            if converged {
                // One extra pass so tangent components settle as well.
                polish = false;
                break;
            }
            let norm = (dz
                .iter()
                .zip(&weights)
                .map(|(v, w)| (v.value() / w).powi(2))
                .sum::<f64>()
                / d.max(1) as f64)
                .sqrt();
            if !norm.is_finite() || (norm > 2.0 * prev_norm && prev_norm < f64::INFINITY) {
                return Err(OdeError::NewtonDivergence { t });
            }
            prev_norm = norm;
            if norm <= cfg.newton_tol {
                converged = true;
                if !polish {
                    break;
                }
            }
        }
        if !converged || polish {
            return Err(OdeError::NewtonDivergence { t });
        }
        let ki: Vec<S> = (0..d).map(|c| (z[c] - r[c]) / hg).collect();
        k.push(ki);
        z_last = z;
    }
    // Stiffly accurate: the last stage is the solution.
    let x_new = z_last;
    let mut e = vec![S::zero(); d];
    for i in 0..6 {
        let w = h * (ESDIRK_A[5][i] - ESDIRK_BHAT[i]);
        for (ej, kij) in e.iter_mut().zip(&k[i]) {
            *ej += *kij * w;
        }
    }
    let err = error_norm(&e, x, &x_new, cfg);
    Ok(StepOutcome { x_new, err })
}

/// One ESDIRK step; returns the new state and the weighted RMS local error
/// estimate.
pub fn step_implicit<S, F>(
    mut field: F,
    t: f64,
    x: &[S],
    h: f64,
    piece: usize,
    cfg: &SolverConfig,
) -> Result<(Vec<S>, f64), OdeError>
where
    S: Real,
    F: FnMut(f64, usize, &[S], &mut [S]),
{
    if !(h > 0.0) {
        return Err(OdeError::InvalidInput("step size must be positive".into()));
    }
    let out = esdirk_step(&mut field, t, piece, x, h, cfg)?;
    Ok((out.x_new, out.err))
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

struct Driver<'a> {
    cfg: &'a SolverConfig,
    steps: usize,
    /// Controller proposal carried across save-time breakpoints.
    h: f64,
}

impl Driver<'_> {
    fn controller_exponent(&self) -> f64 {
        match self.cfg.method {
            Method::ExplicitRk5 => 1.0 / 5.0,
            Method::ImplicitEsdirk => 1.0 / 4.0,
        }
    }

    fn factor(&self, err: f64) -> f64 {
        if err == 0.0 {
            return 5.0;
        }
        (0.9 * err.powf(-self.controller_exponent())).clamp(0.2, 5.0)
    }

    /// Attempts one step of size `h` from `(t, x)`. Returns the error norm,
    /// NaN when the step produced a non-finite state, or `None` when the
    /// Newton iteration failed. The candidate state is left in `w.x_new`.
    fn attempt<S, F>(
        &self,
        field: &mut F,
        t: f64,
        piece: usize,
        x: &[S],
        h: f64,
        w: &mut DopriWork<S>,
    ) -> Result<Option<f64>, OdeError>
    where
        S: Real,
        F: FnMut(f64, usize, &[S], &mut [S]),
    {
        let err = match self.cfg.method {
            Method::ExplicitRk5 => dopri_step(field, t, piece, x, h, self.cfg, w),
            Method::ImplicitEsdirk => match esdirk_step(field, t, piece, x, h, self.cfg) {
                Ok(o) => {
                    w.x_new = o.x_new;
                    o.err
                }
                Err(OdeError::NewtonDivergence { .. }) => return Ok(None),
                Err(e) => return Err(e),
            },
        };
        Ok(Some(if all_finite(&w.x_new) && err.is_finite() {
            err
        } else {
            f64::NAN
        }))
    }

    fn commit<S: Real>(&self, w: &mut DopriWork<S>, x: &mut Vec<S>) {
        match self.cfg.method {
            Method::ExplicitRk5 => w.accept(x),
            Method::ImplicitEsdirk => std::mem::swap(x, &mut w.x_new),
        }
    }

    fn segment<S, F>(
        &mut self,
        field: &mut F,
        t_start: f64,
        t_end: f64,
        piece: usize,
        x: &mut Vec<S>,
    ) -> Result<(), OdeError>
    where
        S: Real,
        F: FnMut(f64, usize, &[S], &mut [S]),
    {
        let mut w = DopriWork::new(x.len());
        if let Some(hf) = self.cfg.fixed_step {
            let span = t_end - t_start;
            let n = ((span / hf) - 1e-9).ceil().max(1.0) as usize;
            let h = span / n as f64;
            let mut t = t_start;
            for i in 0..n {
                self.steps += 1;
                if self.steps > self.cfg.max_steps {
                    return Err(OdeError::StepLimitExceeded { t });
                }
                match self.attempt(field, t, piece, x, h, &mut w)? {
                    None => return Err(OdeError::NewtonDivergence { t }),
                    Some(e) if e.is_nan() => return Err(OdeError::NonFiniteState { t }),
                    Some(_) => self.commit(&mut w, x),
                }
                t = if i + 1 == n {
                    t_end
                } else {
                    t_start + (i + 1) as f64 * h
                };
            }
            return Ok(());
        }

        let mut t = t_start;
        while t < t_end {
            let remaining = t_end - t;
            let proposal = self.h.min(self.cfg.h_max);
            let clipped = proposal * 1.01 >= remaining;
            let h = if clipped { remaining } else { proposal };
            self.steps += 1;
            if self.steps > self.cfg.max_steps {
                return Err(OdeError::StepLimitExceeded { t });
            }
            let outcome = self.attempt(field, t, piece, x, h, &mut w)?;
            let err = outcome.unwrap_or(f64::NAN);
            if err <= 1.0 {
                self.commit(&mut w, x);
                t = if clipped { t_end } else { t + h };
                let next = h * self.factor(err);
                self.h = if clipped { next.max(proposal) } else { next };
            } else {
                let shrink = if err.is_nan() {
                    0.25
                } else {
                    self.factor(err).min(0.9)
                };
                self.h = h * shrink;
                if self.h < self.cfg.h_min {
                    return Err(match outcome {
                        None => OdeError::NewtonDivergence { t },
                        Some(e) if e.is_nan() => OdeError::NonFiniteState { t },
                        Some(_) => OdeError::StepUnderflow { t, h: self.h },
                    });
                }
            }
        }
        Ok(())
    }
}

/// Integrate `field` from `(t0, x0)` and return the state at every save time.
///
/// `field(t, piece, x, dx)` writes the derivative into `dx`; `piece` is the
/// number of `events` at or before the start of the current segment.
pub fn integrate<S, F>(
    mut field: F,
    x0: &[S],
    t0: f64,
    save_times: &[f64],
    events: &[f64],
    cfg: &SolverConfig,
) -> Result<StatePath<S>, OdeError>
where
    S: Real,
    F: FnMut(f64, usize, &[S], &mut [S]),
{
    cfg.validate()?;
    if save_times.is_empty() {
        return Err(OdeError::InvalidInput("save_times is empty".into()));
    }
    if save_times.windows(2).any(|w| !(w[1] > w[0])) || save_times.iter().any(|t| !t.is_finite()) {
        return Err(OdeError::InvalidInput(
            "save_times must be strictly increasing".into(),
        ));
    }
    if save_times[0] < t0 {
        return Err(OdeError::InvalidInput(
            "save_times precede the initial time".into(),
        ));
    }
    if events.windows(2).any(|w| w[1] < w[0]) || events.iter().any(|t| !t.is_finite()) {
        return Err(OdeError::InvalidInput("events must be sorted".into()));
    }
    if !all_finite(x0) {
        return Err(OdeError::NonFiniteState { t: t0 });
    }

    let t_last = *save_times.last().expect("non-empty");
    let mut breaks: Vec<f64> = save_times
        .iter()
        .chain(events.iter())
        .copied()
        .filter(|&t| t > t0 && t <= t_last)
        .collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let mut driver = Driver {
        cfg,
        steps: 0,
        h: cfg.h_init,
    };
    let mut x = x0.to_vec();
    let mut t = t0;
    let mut states = Vec::with_capacity(save_times.len());
    let mut next_save = 0;
    if save_times[0] == t0 {
        states.push(x.clone());
        next_save = 1;
    }
    for &b in &breaks {
        let piece = events.partition_point(|&e| e <= t);
        driver.segment(&mut field, t, b, piece, &mut x)?;
        t = b;
        if next_save < save_times.len() && save_times[next_save] == b {
            states.push(x.clone());
            next_save += 1;
        }
        if events.binary_search_by(|e| e.total_cmp(&b)).is_ok() {
            driver.h = cfg.h_init;
        }
    }
    debug_assert_eq!(states.len(), save_times.len());
    Ok(StatePath {
        times: save_times.to_vec(),
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Dual;

    fn decay(_t: f64, _p: usize, x: &[f64], dx: &mut [f64]) {
        dx[0] = -x[0];
    }

    fn cfg(method: Method, tol: f64) -> SolverConfig {
        match method {
            Method::ExplicitRk5 => SolverConfig::explicit(tol, tol),
            Method::ImplicitEsdirk => SolverConfig::implicit(tol, tol),
        }
    }

    #[test]
    fn constant_field_keeps_state() {
        for m in [Method::ExplicitRk5, Method::ImplicitEsdirk] {
            let path = integrate(
                |_t, _p, _x: &[f64], dx: &mut [f64]| dx[0] = 0.0,
                &[2.5],
                0.0,
                &[1.0, 2.0, 3.0],
                &[],
                &cfg(m, 1e-8),
            )
            .unwrap();
            assert!(path.states.iter().all(|s| s[0] == 2.5));
        }
    }

    #[test]
    fn exponential_decay_matches_analytic() {
        for m in [Method::ExplicitRk5, Method::ImplicitEsdirk] {
            let path = integrate(decay, &[1.0], 0.0, &[1.0], &[], &cfg(m, 1e-8)).unwrap();
            assert!(
                (path.states[0][0] - 0.36787944117144233).abs() < 1e-7,
                "{m:?}"
            );
        }
    }

    #[test]
    fn pk_linear_system_at_t1() {
        // X1(t) = 6 e^{-t/2} - 4 e^{-2t} for rates (0.5, 2) from (2, 3).
        let field = |_t: f64, _p: usize, x: &[f64], dx: &mut [f64]| {
            dx[0] = 2.0 * x[1] - 0.5 * x[0];
            dx[1] = -2.0 * x[1];
        };
        let path = integrate(
            field,
            &[2.0, 3.0],
            0.0,
            &[1.0],
            &[],
            &cfg(Method::ExplicitRk5, 1e-8),
        )
        .unwrap();
        let want = 6.0 * (-0.5f64).exp() - 4.0 * (-2.0f64).exp();
        assert!((path.states[0][0] - want).abs() < 1e-7);
    }

    #[test]
    fn save_time_at_initial_time_returns_initial_state() {
        let path = integrate(
            decay,
            &[1.0],
            0.0,
            &[0.0, 0.5],
            &[],
            &cfg(Method::ExplicitRk5, 1e-8),
        )
        .unwrap();
        assert_eq!(path.states[0][0], 1.0);
    }

    #[test]
    fn implicit_step_of_constant_field() {
        let (x, err) = step_implicit(
            |_t, _p, _x: &[f64], dx: &mut [f64]| dx[0] = 0.0,
            0.0,
            &[3.0],
            0.1,
            0,
            &cfg(Method::ImplicitEsdirk, 1e-6),
        )
        .unwrap();
        assert_eq!(x, vec![3.0]);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn implicit_step_is_stable_on_stiff_decay() {
        let (x, _) = step_implicit(
            |_t, _p, x: &[f64], dx: &mut [f64]| dx[0] = -1000.0 * x[0],
            0.0,
            &[1.0],
            0.01,
            0,
            &cfg(Method::ImplicitEsdirk, 1e-6),
        )
        .unwrap();
        assert!(x[0].abs() < 1.0);
    }

    #[test]
    fn implicit_step_local_error() {
        let (x, _) = step_implicit(
            decay,
            0.0,
            &[1.0],
            0.1,
            0,
            &cfg(Method::ImplicitEsdirk, 1e-6),
        )
        .unwrap();
        // Local error of an order-4 method is O(h^5) ~ 1e-5 · C.
        assert!((x[0] - (-0.1f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn esdirk_order_conditions() {
        let a = ESDIRK_A;
        let b = ESDIRK_A[5];
        let c = ESDIRK_C;
        for i in 0..6 {
            let row: f64 = a[i].iter().sum();
            assert!((row - c[i]).abs() < 1e-14, "row sum {i}");
        }
        let sum = |f: &dyn Fn(usize) -> f64| (0..6).map(f).sum::<f64>();
        let ac = |i: usize| (0..6).map(|j| a[i][j] * c[j]).sum::<f64>();
        let aac = |i: usize| (0..6).map(|j| a[i][j] * ac(j)).sum::<f64>();
        let acc = |i: usize| (0..6).map(|j| a[i][j] * c[j] * c[j]).sum::<f64>();
        let checks = [
            (sum(&|i| b[i]), 1.0),
            (sum(&|i| b[i] * c[i]), 0.5),
            (sum(&|i| b[i] * c[i] * c[i]), 1.0 / 3.0),
            (sum(&|i| b[i] * ac(i)), 1.0 / 6.0),
            (sum(&|i| b[i] * c[i].powi(3)), 0.25),
            (sum(&|i| b[i] * c[i] * ac(i)), 1.0 / 8.0),
            (sum(&|i| b[i] * acc(i)), 1.0 / 12.0),
            (sum(&|i| b[i] * aac(i)), 1.0 / 24.0),
        ];
        for (k, (got, want)) in checks.iter().enumerate() {
            assert!(
                (got - want).abs() < 1e-12,
                "order condition {k}: {got} vs {want}"
            );
        }
        let bh = ESDIRK_BHAT;
        let embedded = [
            (sum(&|i| bh[i]), 1.0),
            (sum(&|i| bh[i] * c[i]), 0.5),
            (sum(&|i| bh[i] * c[i] * c[i]), 1.0 / 3.0),
            (sum(&|i| bh[i] * ac(i)), 1.0 / 6.0),
        ];
        for (k, (got, want)) in embedded.iter().enumerate() {
            assert!(
                (got - want).abs() < 1e-12,
                "embedded condition {k}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn esdirk_stability_function_vanishes_at_infinity() {
        // Scalar test equation x' = λx with λh = -1e8.
        let (x, _) = step_implicit(
            |_t, _p, x: &[f64], dx: &mut [f64]| dx[0] = -1e8 * x[0],
            0.0,
            &[1.0],
            1.0,
            0,
            &cfg(Method::ImplicitEsdirk, 1e-6),
        )
        .unwrap();
        assert!(x[0].abs() < 1e-6);
    }

    fn fixed_step_error(m: Method, h: f64) -> f64 {
        let c = cfg(m, 1e-6).with_fixed_step(h);
        let path = integrate(decay, &[1.0], 0.0, &[1.0], &[], &c).unwrap();
        (path.states[0][0] - (-1.0f64).exp()).abs()
    }

    #[test]
    fn observed_order_under_step_halving() {
        for m in [Method::ExplicitRk5, Method::ImplicitEsdirk] {
            let e1 = fixed_step_error(m, 0.1);
            let e2 = fixed_step_error(m, 0.05);
            assert!(e1 / e2 >= 16.0 * 0.8, "{m:?}: ratio {}", e1 / e2);
        }
    }

    #[test]
    fn event_restart_is_continuous_and_piecewise() {
        // x' = piece: slope 0 before t=1, slope 1 after.
        let field = |_t: f64, piece: usize, _x: &[f64], dx: &mut [f64]| dx[0] = piece as f64;
        let path = integrate(
            field,
            &[0.0],
            0.0,
            &[1.0, 2.0],
            &[1.0],
            &cfg(Method::ExplicitRk5, 1e-10),
        )
        .unwrap();
        assert_eq!(path.states[0][0], 0.0);
        assert!((path.states[1][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn event_continuity_exact() {
        // Saving exactly at the event returns the pre-event state, and the
        // post-event segment starts from it bit-for-bit.
        let field = |_t: f64, piece: usize, x: &[f64], dx: &mut [f64]| {
            dx[0] = if piece == 0 { -x[0] } else { 2.0 - x[0] };
        };
        let c = cfg(Method::ExplicitRk5, 1e-9);
        let before = integrate(field, &[1.0], 0.0, &[0.7], &[0.7], &c).unwrap();
        let joined = integrate(field, &[1.0], 0.0, &[0.7, 1.5], &[0.7], &c).unwrap();
        let restarted = integrate(field, &before.states[0], 0.7, &[1.5], &[0.7], &c).unwrap();
        assert_eq!(before.states[0], joined.states[0]);
        assert_eq!(joined.states[1], restarted.states[0]);
    }

    #[test]
    fn determinism() {
        let c = cfg(Method::ImplicitEsdirk, 1e-7);
        let a = integrate(decay, &[1.0], 0.0, &[0.3, 1.0, 4.0], &[2.0], &c).unwrap();
        let b = integrate(decay, &[1.0], 0.0, &[0.3, 1.0, 4.0], &[2.0], &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tighter_tolerance_does_not_increase_error() {
        for m in [Method::ExplicitRk5, Method::ImplicitEsdirk] {
            let mut prev = f64::INFINITY;
            for tol in [1e-4, 1e-5, 1e-6, 1e-7, 1e-8] {
                let p = integrate(decay, &[1.0], 0.0, &[5.0], &[], &cfg(m, tol)).unwrap();
                let e = (p.states[0][0] - (-5.0f64).exp()).abs();
                assert!(e <= prev * 1.0001 + 1e-15, "{m:?} tol {tol}: {e} > {prev}");
                prev = e;
            }
        }
    }

    #[test]
    fn dual_sensitivity_matches_analytic() {
        // d/dk e^{-k t} at k=0.7, t=2 is -t e^{-k t}.
        let k = Dual::<1>::variable(0.7, 0);
        let field = |_t: f64, _p: usize, x: &[Dual<1>], dx: &mut [Dual<1>]| dx[0] = -(k * x[0]);
        let path = integrate(
            field,
            &[Dual::constant(1.0)],
            0.0,
            &[2.0],
            &[],
            &cfg(Method::ExplicitRk5, 1e-10),
        )
        .unwrap();
        let want = -2.0 * (-1.4f64).exp();
        assert!((path.states[0][0].eps[0] - want).abs() < 1e-8);

        let path = integrate(
            field,
            &[Dual::constant(1.0)],
            0.0,
            &[2.0],
            &[],
            &cfg(Method::ImplicitEsdirk, 1e-10),
        )
        .unwrap();
        assert!((path.states[0][0].eps[0] - want).abs() < 1e-7);
    }

    #[test]
    fn step_limit_and_input_errors() {
        let mut c = cfg(Method::ExplicitRk5, 1e-12);
        c.max_steps = 3;
        let e = integrate(decay, &[1.0], 0.0, &[100.0], &[], &c).unwrap_err();
        assert!(matches!(e, OdeError::StepLimitExceeded { .. }));

        let c = cfg(Method::ExplicitRk5, 1e-6);
        assert!(integrate(decay, &[1.0], 0.0, &[], &[], &c).is_err());
        assert!(integrate(decay, &[1.0], 0.0, &[2.0, 1.0], &[], &c).is_err());
        assert!(integrate(decay, &[f64::NAN], 0.0, &[1.0], &[], &c).is_err());
    }

    #[test]
    fn blow_up_reports_non_finite_or_underflow() {
        let c = cfg(Method::ExplicitRk5, 1e-6);
        let e = integrate(
            |_t, _p, x: &[f64], dx: &mut [f64]| dx[0] = x[0] * x[0],
            &[1.0],
            0.0,
            &[2.0],
            &[],
            &c,
        )
        .unwrap_err();
        assert!(matches!(
            e,
            OdeError::NonFiniteState { .. }
                | OdeError::StepUnderflow { .. }
                | OdeError::StepLimitExceeded { .. }
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = SolverConfig::explicit(1e-6, 1e-6);
        c.h_init = 1e-20;
        assert!(c.validate().is_err());
        let mut c = SolverConfig::explicit(0.0, 1e-6);
        assert!(c.validate().is_err());
        c.rtol = 1e-6;
        c.fixed_step = Some(-1.0);
        assert!(c.validate().is_err());
    }
}
