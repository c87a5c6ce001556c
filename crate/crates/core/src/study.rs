//! Replicated simulate → fit → UQ studies and multi-start runs.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::ParamVector;
use crate::mech::{MechError, MechModel};
use crate::nlme::{child_seed, Dataset, Design, NlmeError, NlmeProblem};
use crate::nn::{Encoder, EncoderConfig, NnError};
use crate::odeint::SolverConfig;
use crate::train::{encoder_for, fit, LrSchedule, StopReason, TrainConfig, TrainError};
use crate::uq::{
    coverage, observed_fim, phi_names, phi_scales, ProposalKind, ReplicateEstimate, UqConfig,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("relative metric undefined for zero truth")]
    ZeroTruth,
    #[error("no estimates")]
    Empty,
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Mech(#[from] MechError),
    #[error(transparent)]
    Nlme(#[from] NlmeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Replicate summary metrics on one coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Fractions, not percent.
    pub rel_bias: f64,
    pub rrmse: f64,
    /// Population variance (divisor N).
    pub emp_var: f64,
}

pub fn emp_var(estimates: &[f64]) -> Result<f64, StudyError> {
    if estimates.is_empty() {
        return Err(StudyError::Empty);
    }
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    Ok(estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n)
}

pub fn metrics(estimates: &[f64], truth: f64) -> Result<Metrics, StudyError> {
    if truth == 0.0 {
        return Err(StudyError::ZeroTruth);
    }
    let var = emp_var(estimates)?;
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let mse = estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / n;
    Ok(Metrics {
        rel_bias: (mean - truth) / truth,
        rrmse: mse.sqrt() / truth.abs(),
        emp_var: var,
    })
}

/// What is simulated and which parameters are estimated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub model: String,
    pub estimated: Vec<String>,
    /// Natural-scale overrides of the model's reference values; parameters
    /// not estimated stay fixed at these.
    #[serde(default)]
    pub truth: BTreeMap<String, f64>,
    #[serde(default)]
    pub omega_sd: Option<Vec<f64>>,
    #[serde(default)]
    pub sigma: Option<f64>,
    pub design: Design,
    /// Replaces the model's default solver settings.
    #[serde(default)]
    pub solver: Option<SolverConfig>,
    #[serde(default = "one")]
    pub n_replicates: usize,
    #[serde(default = "one")]
    pub n_starts: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl ScenarioSpec {
    /// Named scenario sets: `pk`, `antibody` `s1`–`s3`, `tgf` `s1`–`s3`.
    pub fn preset(model: &str, scenario: &str) -> Result<Self, StudyError> {
        let (estimated, design): (&[&str], Design) = match (model, scenario) {
            ("pk", "s1") => (&["theta1", "theta2"], Design::regular(100, 6, 10.0)),
            ("antibody", "s1") => (&["theta", "fm2", "fm3"], Design::regular(50, 15, 400.0)),
            ("antibody", "s2") => (
                &["theta", "fm2", "fm3", "delta_s"],
                Design::regular(50, 15, 400.0),
            ),
            ("antibody", "s3") => (
                &["theta", "fm2", "fm3", "delta_s", "lambda"],
                Design::regular(50, 15, 400.0),
            ),
            ("tgf", "s1") => (&["k_p"], Design::regular(50, 15, 400.0)),
            ("tgf", "s2") => (&["k_p", "k_b"], Design::regular(50, 15, 400.0)),
            ("tgf", "s3") => (&["k_p", "k_b", "k_ac"], Design::regular(50, 15, 400.0)),
            _ => {
                return Err(StudyError::InvalidScenario(format!(
                    "unknown scenario {model}/{scenario}"
                )))
            }
        };
        Ok(Self {
            model: model.into(),
            estimated: estimated.iter().map(|s| s.to_string()).collect(),
            truth: BTreeMap::new(),
            omega_sd: None,
            sigma: None,
            design,
            solver: None,
            n_replicates: 20,
            seed: 0,
            n_starts: match (model, scenario) {
                ("pk", _) => 10,
                ("antibody", "s3") => 5,
                _ => 1,
            },
        })
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        if self.n_replicates == 0 || self.n_starts == 0 {
            return Err(StudyError::InvalidScenario(
                "n_replicates and n_starts must be >= 1".into(),
            ));
        }
        self.design.validate()?;
        self.problem().map(|_| ())
    }

    pub fn problem(&self) -> Result<NlmeProblem, StudyError> {
        let mut model = MechModel::by_name(&self.model)?;
        for (name, &v) in &self.truth {
            let k = model.param_index(name)?;
            model.params[k].truth = v;
        }
        if let Some(w) = &self.omega_sd {
            if w.len() != model.re_map.len() {
                return Err(StudyError::InvalidScenario(format!(
                    "omega_sd has {} entries, model has {} random effects",
                    w.len(),
                    model.re_map.len()
                )));
            }
            model.omega_truth = w.clone();
        }
        if let Some(s) = self.sigma {
            model.sigma_truth = s;
        }
        model.validate()?;
        let names: Vec<&str> = self.estimated.iter().map(String::as_str).collect();
        let mut problem = NlmeProblem::new(model, &names)?;
        if let Some(s) = &self.solver {
            problem.solver = s.clone();
        }
        Ok(problem)
    }

    pub fn simulate(&self, problem: &NlmeProblem, replicate: usize) -> Result<Dataset, StudyError> {
        let seed = child_seed(child_seed(self.seed, replicate as u64), 0);
        Ok(problem.simulate_cohort(&problem.phi_truth(), &self.design, seed)?)
    }
}

/// Fitting and UQ settings shared by all replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub uq: UqConfig,
    /// Skip the Fisher information step.
    #[serde(default)]
    pub skip_uq: bool,
}

impl StudyConfig {
    /// Settings that work for the shipped models.
    pub fn preset(model: &str) -> Self {
        match model {
            "pk" => Self {
                encoder: EncoderConfig::conv(1, 6, 10.0),
                train: TrainConfig {
                    lr_init: 0.1,
                    lr_schedule: LrSchedule::PlateauStep {
                        drop_to: 0.05,
                        patience: 50,
                    },
                    max_epochs: 1000,
                    patience: 100,
                    val_fraction: 0.0,
                    n_mc: 10,
                    ..TrainConfig::default()
                },
                uq: UqConfig {
                    n_samples: 1000,
                    proposal: ProposalKind::Encoder { inflation: 2.0 },
                    ..UqConfig::default()
                },
                skip_uq: false,
            },
            _ => {
                let d = MechModel::by_name(model).map_or(1, |m| m.n_random());
                let mut encoder = EncoderConfig::conv(d, 15, 400.0);
                encoder.use_attention_pool = false;
                Self {
                    encoder,
                    train: TrainConfig {
                        lr_init: 0.02,
                        lr_schedule: LrSchedule::Cosine { period: 1000 },
                        clip_norm: Some(5.0),
                        max_epochs: 1000,
                        patience: 100,
                        val_fraction: 0.0,
                        n_mc: 10,
                        ..TrainConfig::default()
                    },
                    uq: UqConfig {
                        n_samples: 500,
                        proposal: ProposalKind::Encoder { inflation: 2.0 },
                        ..UqConfig::default()
                    },
                    skip_uq: false,
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    /// φ̂ on the optimization scale; absent when the fit failed.
    pub estimate: Option<Vec<f64>>,
    pub se: Option<Vec<f64>>,
    pub stop_reason: Option<StopReason>,
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
    pub fit_error: Option<String>,
    pub uq_error: Option<String>,
    pub jitter_applied: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    /// Scale of `truth` and all metrics: `log` or `identity`.
    pub scale: String,
    pub truth: f64,
    /// Relative metrics are absent when the truth is zero on this scale.
    pub rel_bias_pct: Option<f64>,
    pub rrmse_pct: Option<f64>,
    pub emp_var: f64,
    pub mean_est_var: Option<f64>,
    pub emp_cov: f64,
    pub est_cov: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub schema_version: u32,
    pub scenario: ScenarioSpec,
    pub params: Vec<ParamSummary>,
    pub replicates: Vec<ReplicateRecord>,
    pub fit_failures: usize,
    pub uq_failures: usize,
    pub wall_time_s: f64,
}

impl StudyReport {
    pub fn param(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }

    /// One row per replicate with estimates and standard errors.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), StudyError> {
        let names: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
        write_records_csv(&names, &self.replicates, "replicate", w)
    }
}

/// Shared layout of the replicate and start CSV files.
fn write_records_csv<W: Write>(
    names: &[&str],
    records: &[ReplicateRecord],
    index_name: &str,
    w: W,
) -> Result<(), StudyError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![
        index_name.to_string(),
        "seed".into(),
        "status".into(),
        "stop_reason".into(),
        "epochs_run".into(),
        "wall_time_s".into(),
    ];
    header.extend(names.iter().map(|n| format!("est_{n}")));
    header.extend(names.iter().map(|n| format!("se_{n}")));
    out.write_record(&header)?;
    for r in records {
        let status = if r.fit_error.is_some() {
            "fit_failed"
        } else if r.uq_error.is_some() {
            "uq_failed"
        } else {
            "ok"
        };
        let stop = r
            .stop_reason
            .and_then(|s| serde_json::to_value(s).ok())
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        let mut row = vec![
            r.replicate.to_string(),
            r.seed.to_string(),
            status.into(),
            stop,
            r.epochs_run.to_string(),
            r.wall_time_s.to_string(),
        ];
        let cell = |v: Option<&Vec<f64>>, k: usize| v.map(|x| x[k].to_string()).unwrap_or_default();
        row.extend((0..names.len()).map(|k| cell(r.estimate.as_ref(), k)));
        row.extend((0..names.len()).map(|k| cell(r.se.as_ref(), k)));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

fn fit_and_uq(
    data: &Dataset,
    problem: &NlmeProblem,
    cfg: &StudyConfig,
    train: &TrainConfig,
    uq_seed: u64,
) -> ReplicateRecord {
    let start = Instant::now();
    let mut rec = ReplicateRecord {
        replicate: 0,
        seed: train.seed,
        estimate: None,
        se: None,
        stop_reason: None,
        epochs_run: 0,
        final_loss: None,
        fit_error: None,
        uq_error: None,
        jitter_applied: None,
        wall_time_s: 0.0,
    };
    match fit(data, problem, &cfg.encoder, train) {
        Err(e) => rec.fit_error = Some(e.to_string()),
        Ok(r) => {
            rec.estimate = Some(r.phi.values.clone());
            rec.stop_reason = Some(r.stop_reason);
            rec.epochs_run = r.epochs_run;
            rec.final_loss = r.train_history.last().copied();
            if !cfg.skip_uq {
                match uq_for(data, problem, cfg, &r.phi, &r.psi, uq_seed) {
                    Ok(v) => {
                        rec.se = Some(v.se);
                        rec.jitter_applied = v.jitter_applied;
                    }
                    Err(e) => rec.uq_error = Some(e),
                }
            }
        }
    }
    rec.wall_time_s = start.elapsed().as_secs_f64();
    rec
}

fn uq_for(
    data: &Dataset,
    problem: &NlmeProblem,
    cfg: &StudyConfig,
    phi: &ParamVector,
    psi: &ParamVector,
    seed: u64,
) -> Result<crate::uq::VarianceReport, String> {
    let encoder =
        Encoder::new(encoder_for(&cfg.encoder, data, problem)).map_err(|e| e.to_string())?;
    observed_fim(
        problem,
        data,
        phi,
        cfg.uq.n_samples,
        seed,
        cfg.uq.proposal(&encoder, psi),
    )
    .map_err(|e| e.to_string())
}

/// Simulate, fit and assess `spec.n_replicates` independent cohorts.
/// Replicate `k` draws every seed from `child_seed(spec.seed, k)`, so the
/// result does not depend on the worker count.
pub fn run_study(spec: &ScenarioSpec, cfg: &StudyConfig) -> Result<StudyReport, StudyError> {
    let start = Instant::now();
    spec.validate()?;
    cfg.train.validate()?;
    let problem = spec.problem()?;
    let replicates: Vec<ReplicateRecord> = (0..spec.n_replicates)
        .into_par_iter()
        .map(|k| {
            let root = child_seed(spec.seed, k as u64);
            let mut rec = match spec.simulate(&problem, k) {
                Ok(data) => {
                    let mut train = cfg.train.clone();
                    train.seed = child_seed(root, 1);
                    fit_and_uq(&data, &problem, cfg, &train, child_seed(root, 2))
                }
                Err(e) => ReplicateRecord {
                    replicate: k,
                    seed: root,
                    estimate: None,
                    se: None,
                    stop_reason: None,
                    epochs_run: 0,
                    final_loss: None,
                    fit_error: Some(e.to_string()),
                    uq_error: None,
                    jitter_applied: None,
                    wall_time_s: 0.0,
                },
            };
            rec.replicate = k;
            rec.seed = root;
            rec
        })
        .collect();
    let params = summarize(&problem, &replicates)?;
    Ok(StudyReport {
        schema_version: SCHEMA_VERSION,
        scenario: spec.clone(),
        params,
        fit_failures: replicates.iter().filter(|r| r.fit_error.is_some()).count(),
        uq_failures: replicates.iter().filter(|r| r.uq_error.is_some()).count(),
        replicates,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn summarize(
    problem: &NlmeProblem,
    reps: &[ReplicateRecord],
) -> Result<Vec<ParamSummary>, StudyError> {
    let names = phi_names(problem);
    let scales = phi_scales(problem);
    let truth = problem.phi_truth().values;
    let ok: Vec<ReplicateEstimate> = reps
        .iter()
        .filter_map(|r| {
            r.estimate.as_ref().map(|e| ReplicateEstimate {
                estimate: e.clone(),
                se: r.se.clone(),
            })
        })
        .collect();
    if ok.is_empty() {
        return Ok(names
            .into_iter()
            .zip(scales)
            .zip(&truth)
            .map(|((name, scale), &t)| ParamSummary {
                name,
                scale: scale.into(),
                truth: t,
                rel_bias_pct: None,
                rrmse_pct: None,
                emp_var: f64::NAN,
                mean_est_var: None,
                emp_cov: f64::NAN,
                est_cov: None,
            })
            .collect());
    }
    let cov = coverage(&ok, &truth).map_err(|e| StudyError::InvalidScenario(e.to_string()))?;
    let mut out = Vec::with_capacity(names.len());
    for (k, name) in names.into_iter().enumerate() {
        let est: Vec<f64> = ok.iter().map(|r| r.estimate[k]).collect();
        let (rb, rr) = match metrics(&est, truth[k]) {
            Ok(m) => (Some(100.0 * m.rel_bias), Some(100.0 * m.rrmse)),
            Err(StudyError::ZeroTruth) => (None, None),
            Err(e) => return Err(e),
        };
        let se2: Vec<f64> = ok
            .iter()
            .filter_map(|r| r.se.as_ref().map(|s| s[k] * s[k]))
            .collect();
        out.push(ParamSummary {
            name,
            scale: scales[k].into(),
            truth: truth[k],
            rel_bias_pct: rb,
            rrmse_pct: rr,
            emp_var: emp_var(&est)?,
            mean_est_var: (!se2.is_empty()).then(|| se2.iter().sum::<f64>() / se2.len() as f64),
            emp_cov: cov[k].emp_cov,
            est_cov: (!se2.is_empty()).then_some(cov[k].est_cov),
        });
    }
    Ok(out)
}

/// Number of clusters in 1-D: sorted values split wherever a gap exceeds
/// both `ratio` × the median gap and `floor`.
pub fn cluster_count(values: &[f64], ratio: f64, floor: f64) -> usize {
    if values.len() < 2 {
        return values.len();
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let gaps: Vec<f64> = v.windows(2).map(|w| w[1] - w[0]).collect();
    let mut sorted = gaps.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    1 + gaps
        .iter()
        .filter(|&&g| g > ratio * median && g > floor)
        .count()
}

pub const CLUSTER_RATIO: f64 = 5.0;
pub const CLUSTER_FLOOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub name: String,
    pub scale: String,
    pub truth: f64,
    pub min: f64,
    pub max: f64,
    pub range: f64,
    /// Population standard deviation across starts.
    pub std: f64,
    pub clusters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultistartReport {
    pub schema_version: u32,
    pub scenario: ScenarioSpec,
    pub starts: Vec<ReplicateRecord>,
    pub dispersion: Vec<Dispersion>,
    pub failures: usize,
    pub wall_time_s: f64,
}

impl MultistartReport {
    pub fn param(&self, name: &str) -> Option<&Dispersion> {
        self.dispersion.iter().find(|p| p.name == name)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), StudyError> {
        let names: Vec<&str> = self.dispersion.iter().map(|p| p.name.as_str()).collect();
        write_records_csv(&names, &self.starts, "start", w)
    }
}

/// Fits one dataset from `n_starts` starting points. Only the initialization
/// seed varies between starts; the data split and CRN draws are shared.
pub fn multistart(
    spec: &ScenarioSpec,
    cfg: &StudyConfig,
    data: &Dataset,
    n_starts: usize,
) -> Result<MultistartReport, StudyError> {
    let start = Instant::now();
    if n_starts == 0 {
        return Err(StudyError::InvalidScenario("n_starts must be >= 1".into()));
    }
    cfg.train.validate()?;
    let problem = spec.problem()?;
    let mut plain = cfg.clone();
    plain.skip_uq = true;
    let starts: Vec<ReplicateRecord> = (0..n_starts)
        .into_par_iter()
        .map(|s| {
            let mut train = plain.train.clone();
            train.seed = spec.seed;
            train.init.seed = Some(child_seed(spec.seed, 100 + s as u64));
            let mut rec = fit_and_uq(data, &problem, &plain, &train, 0);
            rec.replicate = s;
            rec.seed = train.init.seed.expect("set above");
            rec
        })
        .collect();
    let names = phi_names(&problem);
    let scales = phi_scales(&problem);
    let truth = problem.phi_truth().values;
    let ok: Vec<&Vec<f64>> = starts.iter().filter_map(|r| r.estimate.as_ref()).collect();
    let dispersion = names
        .into_iter()
        .enumerate()
        .map(|(k, name)| {
            let v: Vec<f64> = ok.iter().map(|e| e[k]).collect();
            let (min, max) = v
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
                    (a.min(x), b.max(x))
                });
            Dispersion {
                name,
                scale: scales[k].into(),
                truth: truth[k],
                min,
                max,
                range: max - min,
                std: emp_var(&v).map(f64::sqrt).unwrap_or(f64::NAN),
                clusters: cluster_count(&v, CLUSTER_RATIO, CLUSTER_FLOOR),
            }
        })
        .collect();
    Ok(MultistartReport {
        schema_version: SCHEMA_VERSION,
        scenario: spec.clone(),
        failures: starts.iter().filter(|r| r.fit_error.is_some()).count(),
        starts,
        dispersion,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::InitConfig;
    use proptest::prelude::*;

    #[test]
    fn metrics_examples() {
        let m = metrics(&[0.5, 0.5, 0.5], 0.5).unwrap();
        assert_eq!((m.rel_bias, m.rrmse, m.emp_var), (0.0, 0.0, 0.0));
        let m = metrics(&[0.4, 0.6], 0.5).unwrap();
        assert!(m.rel_bias.abs() < 1e-15);
        assert!((m.rrmse - 0.2).abs() < 1e-12);
        assert!((m.emp_var - 0.01).abs() < 1e-12);
        assert!(matches!(metrics(&[1.0], 0.0), Err(StudyError::ZeroTruth)));
        assert!(matches!(metrics(&[], 1.0), Err(StudyError::Empty)));
    }

    #[test]
    fn clusters() {
        assert_eq!(cluster_count(&[], 5.0, 0.05), 0);
        assert_eq!(cluster_count(&[1.0], 5.0, 0.05), 1);
        assert_eq!(cluster_count(&[1.0, 1.0, 1.0], 5.0, 0.05), 1);
        assert_eq!(
            cluster_count(&[0.0, 0.01, 0.02, 0.03, 1.0, 1.01, 1.02], 5.0, 0.05),
            2
        );
        // Wide but even spread is one cluster.
        assert_eq!(cluster_count(&[0.0, 0.1, 0.2, 0.3, 0.4], 5.0, 0.05), 1);
        // Tiny gaps never split, however uneven.
        assert_eq!(cluster_count(&[0.0, 1e-6, 2e-6, 0.01], 5.0, 0.05), 1);
    }

    #[test]
    fn presets_resolve() {
        for (m, s) in [
            ("pk", "s1"),
            ("antibody", "s1"),
            ("antibody", "s2"),
            ("antibody", "s3"),
            ("tgf", "s1"),
            ("tgf", "s2"),
            ("tgf", "s3"),
        ] {
            let spec = ScenarioSpec::preset(m, s).unwrap();
            let pb = spec.problem().unwrap();
            assert_eq!(pb.estimated.len(), spec.estimated.len());
        }
        assert!(ScenarioSpec::preset("pk", "s9").is_err());
        let mut bad = ScenarioSpec::preset("pk", "s1").unwrap();
        bad.truth.insert("nope".into(), 1.0);
        assert!(bad.validate().is_err());
        bad = ScenarioSpec::preset("pk", "s1").unwrap();
        bad.n_replicates = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scenario_json_rejects_unknown_keys() {
        let spec = ScenarioSpec::preset("pk", "s1").unwrap();
        let mut v = serde_json::to_value(&spec).unwrap();
        let back: ScenarioSpec = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(back, spec);
        v["extra"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ScenarioSpec>(v).is_err());
    }

    fn tiny() -> (ScenarioSpec, StudyConfig) {
        let mut spec = ScenarioSpec::preset("pk", "s1").unwrap();
        spec.design = Design::regular(8, 4, 10.0);
        spec.n_replicates = 2;
        let mut cfg = StudyConfig::preset("pk");
        cfg.encoder.seq_len = 4;
        cfg.train.max_epochs = 3;
        cfg.train.n_mc = 2;
        cfg.uq.n_samples = 50;
        (spec, cfg)
    }

    #[test]
    fn zero_epochs_reports_initialization() {
        let (mut spec, mut cfg) = tiny();
        spec.n_replicates = 1;
        cfg.train.max_epochs = 0;
        cfg.skip_uq = true;
        let rep = run_study(&spec, &cfg).unwrap();
        let pb = spec.problem().unwrap();
        let data = spec.simulate(&pb, 0).unwrap();
        let init_seed = child_seed(child_seed(spec.seed, 0), 1);
        let phi0 =
            crate::train::initial_phi(&pb, &cfg.train.init, child_seed(init_seed, 2)).unwrap();
        assert_eq!(rep.replicates[0].estimate.as_ref().unwrap(), &phi0.values);
        let m = metrics(&[phi0.values[0]], pb.phi_truth().values[0]).unwrap();
        assert!((rep.params[0].rel_bias_pct.unwrap() - 100.0 * m.rel_bias).abs() < 1e-12);
        assert_eq!(data.len(), 8);
    }

    #[test]
    fn noiseless_truth_start_has_no_bias() {
        let (mut spec, mut cfg) = tiny();
        spec.omega_sd = Some(vec![1e-4]);
        spec.sigma = Some(1e-4);
        cfg.train.init = InitConfig {
            center: None,
            spread: 0.0,
            omega: 1e-4,
            sigma: 1e-4,
            seed: None,
        };
        cfg.train.lr_init = 1e-4;
        cfg.skip_uq = true;
        let rep = run_study(&spec, &cfg).unwrap();
        for p in &rep.params[..2] {
            assert!(p.rel_bias_pct.unwrap().abs() < 0.1, "{p:?}");
        }
    }

    #[test]
    fn study_is_reproducible_and_csv_has_one_row_per_replicate() {
        let (spec, cfg) = tiny();
        let a = run_study(&spec, &cfg).unwrap();
        let b = run_study(&spec, &cfg).unwrap();
        let strip = |r: &StudyReport| {
            r.replicates
                .iter()
                .map(|x| (x.estimate.clone(), x.se.clone(), x.stop_reason))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.params, b.params);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + spec.n_replicates);
        assert!(text.starts_with("replicate,seed,status"));
    }

    #[test]
    fn multistart_single_and_identical() {
        let (spec, cfg) = tiny();
        let pb = spec.problem().unwrap();
        let data = spec.simulate(&pb, 0).unwrap();
        let one = multistart(&spec, &cfg, &data, 1).unwrap();
        assert!(one
            .dispersion
            .iter()
            .all(|d| d.range == 0.0 && d.std == 0.0 && d.clusters == 1));
        let a = multistart(&spec, &cfg, &data, 2).unwrap();
        let b = multistart(&spec, &cfg, &data, 2).unwrap();
        assert_eq!(a.starts[0].estimate, one.starts[0].estimate);
        for (x, y) in a.starts.iter().zip(&b.starts) {
            assert_eq!(x.estimate, y.estimate);
        }
        assert_ne!(a.starts[0].estimate, a.starts[1].estimate);
        assert!(multistart(&spec, &cfg, &data, 0).is_err());
    }

    proptest! {
        #[test]
        fn metrics_permutation_invariant(mut v in prop::collection::vec(-5.0f64..5.0, 1..20), truth in 0.1f64..3.0, k in 0usize..100) {
            let a = metrics(&v, truth).unwrap();
            let n = v.len();
            v.rotate_left(k % n);
            v.reverse();
            let b = metrics(&v, truth).unwrap();
            prop_assert!((a.rel_bias - b.rel_bias).abs() < 1e-12);
            prop_assert!((a.rrmse - b.rrmse).abs() < 1e-12);
            prop_assert!((a.emp_var - b.emp_var).abs() < 1e-12);
        }

        #[test]
        fn bias_variance_bounds(v in prop::collection::vec(-5.0f64..5.0, 1..20), truth in prop_oneof![-3.0f64..-0.1, 0.1f64..3.0]) {
            let m = metrics(&v, truth).unwrap();
            prop_assert!(m.emp_var >= 0.0);
            prop_assert!(m.rrmse * m.rrmse >= m.rel_bias * m.rel_bias - 1e-12);
            // MSE = bias² + variance.
            let lhs = (m.rrmse * truth).powi(2);
            let rhs = (m.rel_bias * truth).powi(2) + m.emp_var;
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs));
        }
    }
}
