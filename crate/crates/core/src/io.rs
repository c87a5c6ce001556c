//! Run configuration, dataset CSV and report files.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::diff::ParamVector;
use crate::mech::{MechError, MechModel, Observation};
use crate::nlme::{
    standard_normals, Dataset, Design, NlmeError, NlmeProblem, Sampling, SubjectRecord,
};
use crate::nn::EncoderConfig;
use crate::study::{ScenarioSpec, StudyConfig, StudyError, SCHEMA_VERSION};
use crate::train::{FitResult, StopReason, TrainConfig};
use crate::uq::{phi_names, phi_scales, UqConfig, VarianceReport};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Mech(#[from] MechError),
    #[error(transparent)]
    Nlme(#[from] NlmeError),
    #[error(transparent)]
    Study(#[from] StudyError),
}

pub const DATASET_HEADER: [&str; 4] = ["subject_id", "time", "observable", "value"];

pub fn observable_label(model: &MechModel) -> String {
    match model.observation {
        Observation::State(k) => format!("x{}", k + 1),
        Observation::Log10State(k) => format!("log10_x{}", k + 1),
        Observation::StatePlusParam { .. } => "y".into(),
    }
}

fn label_for(model: &str) -> String {
    MechModel::by_name(model)
        .map(|m| observable_label(&m))
        .unwrap_or_else(|_| "y".into())
}

/// Masked-in observations only, sorted by `(subject_id, time)`.
pub fn write_dataset_csv<W: Write>(data: &Dataset, w: W) -> Result<(), IoError> {
    let obs = label_for(&data.model);
    let mut subjects: Vec<&SubjectRecord> = data.subjects.iter().collect();
    subjects.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = csv::Writer::from_writer(w);
    out.write_record(DATASET_HEADER)?;
    for s in subjects {
        let mut rows: Vec<(f64, f64)> = (0..s.times.len())
            .filter(|&k| s.mask[k])
            .map(|k| (s.times[k], s.values[k]))
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (t, v) in rows {
            out.write_record([s.id.as_str(), &t.to_string(), &obs, &v.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct Row {
    subject_id: String,
    time: f64,
    observable: String,
    value: f64,
}

/// Reads the long-format CSV. With a regular design every subject gets the
/// design grid and absent rows become masked-out entries; otherwise the
/// observed times are padded to the longest subject (or `n_obs`).
pub fn read_dataset_csv<R: Read>(
    r: R,
    model: &str,
    design: Option<&Design>,
) -> Result<Dataset, IoError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != DATASET_HEADER {
        return Err(IoError::Format(format!(
            "expected header {}",
            DATASET_HEADER.join(",")
        )));
    }
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut observable: Option<String> = None;
    for row in rdr.deserialize() {
        let row: Row = row?;
        match &observable {
            None => observable = Some(row.observable.clone()),
            Some(o) if *o != row.observable => {
                return Err(IoError::Format(format!(
                    "mixed observables `{o}` and `{}`",
                    row.observable
                )))
            }
            _ => {}
        }
        if !row.time.is_finite() || !row.value.is_finite() {
            return Err(IoError::Format(format!(
                "non-finite entry for `{}`",
                row.subject_id
            )));
        }
        groups
            .entry(row.subject_id)
            .or_default()
            .push((row.time, row.value));
    }
    if groups.is_empty() {
        return Err(IoError::Format("no observations".into()));
    }
    for (id, rows) in groups.iter_mut() {
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        if rows.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(IoError::Format(format!(
                "duplicate time for subject `{id}`"
            )));
        }
    }
    let grid = design
        .filter(|d| d.sampling == Sampling::Regular)
        .map(Design::regular_grid);
    let pad_len = match (&grid, design) {
        (Some(g), _) => g.len(),
        (None, d) => groups
            .values()
            .map(Vec::len)
            .max()
            .unwrap_or(0)
            .max(d.map_or(0, |d| d.n_obs)),
    };
    let mut subjects = Vec::with_capacity(groups.len());
    for (id, rows) in groups {
        let rec = match &grid {
            Some(g) => {
                let mut values = vec![0.0; g.len()];
                let mut mask = vec![false; g.len()];
                for (t, v) in rows {
                    let k = g
                        .iter()
                        .position(|&x| (x - t).abs() <= 1e-9 * x.abs().max(1.0))
                        .ok_or_else(|| {
                            IoError::Format(format!(
                                "subject `{id}`: time {t} is not on the design grid"
                            ))
                        })?;
                    values[k] = v;
                    mask[k] = true;
                }
                SubjectRecord {
                    id,
                    times: g.clone(),
                    values,
                    mask,
                }
            }
            None => SubjectRecord {
                id,
                mask: vec![true; rows.len()],
                times: rows.iter().map(|r| r.0).collect(),
                values: rows.iter().map(|r| r.1).collect(),
            }
            .padded(pad_len),
        };
        subjects.push(rec);
    }
    let data = Dataset {
        model: model.to_string(),
        pad_len,
        design: design.cloned(),
        subjects,
    };
    data.validate()?;
    Ok(data)
}

/// Everything a command needs, validated before any computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub scenario: ScenarioSpec,
    /// Fitting settings; missing sections take the model's preset.
    #[serde(default)]
    pub encoder: Option<EncoderConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub uq: Option<UqConfig>,
    #[serde(default)]
    pub skip_uq: bool,
    #[serde(default)]
    pub output_dir: Option<String>,
}

impl RunConfig {
    pub fn preset(model: &str, scenario: &str) -> Result<Self, IoError> {
        let cfg = StudyConfig::preset(model);
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            scenario: ScenarioSpec::preset(model, scenario)?,
            encoder: Some(cfg.encoder),
            train: Some(cfg.train),
            uq: Some(cfg.uq),
            skip_uq: false,
            output_dir: None,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), IoError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(IoError::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.scenario.validate()?;
        let cfg = self.study_config();
        cfg.train
            .validate()
            .map_err(|e| IoError::Config(e.to_string()))?;
        if cfg.uq.n_samples == 0 {
            return Err(IoError::Config("uq.n_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn study_config(&self) -> StudyConfig {
        let base = StudyConfig::preset(&self.scenario.model);
        StudyConfig {
            encoder: self.encoder.clone().unwrap_or(base.encoder),
            train: self.train.clone().unwrap_or(base.train),
            uq: self.uq.clone().unwrap_or(base.uq),
            skip_uq: self.skip_uq,
        }
    }
}

/// One φ coordinate on both scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub name: String,
    /// Scale of `estimate` and `truth`: `log` or `identity`.
    pub scale: String,
    pub estimate: f64,
    pub truth: f64,
    pub natural_estimate: f64,
    pub natural_truth: f64,
}

fn to_natural(scale: &str, v: f64) -> f64 {
    if scale == "log" {
        v.exp()
    } else {
        v
    }
}

pub fn param_table(problem: &NlmeProblem, phi: &ParamVector) -> Vec<ParamEstimate> {
    let truth = problem.phi_truth().values;
    phi_names(problem)
        .into_iter()
        .zip(phi_scales(problem))
        .enumerate()
        .map(|(k, (name, scale))| ParamEstimate {
            name,
            scale: scale.into(),
            estimate: phi.values[k],
            truth: truth[k],
            natural_estimate: to_natural(scale, phi.values[k]),
            natural_truth: to_natural(scale, truth[k]),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub scenario: ScenarioSpec,
    pub encoder: EncoderConfig,
    pub uq: UqConfig,
    pub params: Vec<ParamEstimate>,
    pub stop_reason: StopReason,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_train_loss: Option<f64>,
    pub wall_time_s: f64,
    pub result: FitResult,
}

impl FitReport {
    pub fn new(
        problem: &NlmeProblem,
        scenario: &ScenarioSpec,
        cfg: &StudyConfig,
        result: FitResult,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scenario: scenario.clone(),
            encoder: cfg.encoder.clone(),
            uq: cfg.uq.clone(),
            params: param_table(problem, &result.phi),
            stop_reason: result.stop_reason,
            epochs_run: result.epochs_run,
            best_epoch: result.best_epoch,
            final_train_loss: result.train_history.last().copied(),
            wall_time_s: result.wall_time_s,
            result,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UqParam {
    pub name: String,
    pub scale: String,
    pub estimate: f64,
    pub se: f64,
    pub ci95_lower: f64,
    pub ci95_upper: f64,
    pub natural_estimate: f64,
    pub natural_ci95_lower: f64,
    pub natural_ci95_upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UqReport {
    pub schema_version: u32,
    pub params: Vec<UqParam>,
    pub variance: VarianceReport,
}

impl UqReport {
    pub fn new(problem: &NlmeProblem, v: VarianceReport) -> Self {
        let scales = phi_scales(problem);
        let params = (0..v.names.len())
            .map(|k| {
                let (lo, hi) = v.ci95[k];
                UqParam {
                    name: v.names[k].clone(),
                    scale: scales[k].into(),
                    estimate: v.estimate[k],
                    se: v.se[k],
                    ci95_lower: lo,
                    ci95_upper: hi,
                    natural_estimate: to_natural(scales[k], v.estimate[k]),
                    natural_ci95_lower: to_natural(scales[k], lo),
                    natural_ci95_upper: to_natural(scales[k], hi),
                }
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            params,
            variance: v,
        }
    }
}

pub fn write_history_csv<W: Write>(fit: &FitResult, w: W) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "train_loss", "val_loss"])?;
    for (k, t) in fit.train_history.iter().enumerate() {
        let v = fit
            .val_history
            .get(k)
            .map(f64::to_string)
            .unwrap_or_default();
        out.write_record([k.to_string(), t.to_string(), v])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_ebe_csv<W: Write>(ids: &[String], ebes: &[Vec<f64>], w: W) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(w);
    let d = ebes.first().map_or(0, Vec::len);
    let mut header = vec!["subject_id".to_string()];
    header.extend((0..d).map(|k| format!("b{k}")));
    out.write_record(&header)?;
    for (id, b) in ids.iter().zip(ebes) {
        let mut row = vec![id.clone()];
        row.extend(b.iter().map(f64::to_string));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Population prediction bands on `times`: mean and 2.5/97.5 percentiles
/// over `n_draws` random-effect draws at φ.
pub fn prediction_bands(
    problem: &NlmeProblem,
    phi: &ParamVector,
    times: &[f64],
    n_draws: usize,
    seed: u64,
) -> Result<Vec<[f64; 4]>, IoError> {
    let p = problem.unpack(&phi.values);
    let mut curves = Vec::with_capacity(n_draws);
    for eps in standard_normals(seed, n_draws, problem.n_random()) {
        let b = problem.random_effect(&p, &eps);
        let theta = problem.model.individual_params(&p.theta_u, &b);
        curves.push(problem.model.predict(&theta, times, &problem.solver)?);
    }
    Ok(times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let mut col: Vec<f64> = curves.iter().map(|c| c[j]).collect();
            col.sort_by(f64::total_cmp);
            let mean = col.iter().sum::<f64>() / col.len().max(1) as f64;
            let q = |f: f64| col[((col.len() - 1) as f64 * f).round() as usize];
            [t, mean, q(0.025), q(0.975)]
        })
        .collect())
}

pub fn write_bands_csv<W: Write>(bands: &[[f64; 4]], w: W) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["time", "mean", "lower95", "upper95"])?;
    for r in bands {
        out.write_record(r.iter().map(f64::to_string))?;
    }
    out.flush()?;
    Ok(())
}
