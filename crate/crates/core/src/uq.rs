//! Observed Fisher information of the Monte-Carlo marginal likelihood.
//!
//! For one subject, with `b_l = L_Ω ε_l` and `ℓ_l = log p(Y | b_l)`,
//! `log p̂ = logsumexp(ℓ) − log L`. With softmax weights `w_l`, its gradient
//! is `Σ w_l ∇ℓ_l`. The Hessian is taken as central differences of that
//! exact gradient with the draws `ε_l` held fixed, which equals the
//! log-space form of the product-rule identities.
//!
//! Draws come from the prior by default. When posteriors are much narrower
//! than Ω the prior draws carry almost no weight, so an importance proposal
//! built from the fitted encoder can be used instead.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{
    hessian_with_stencil, value_and_gradient, DiffError, Layout, ParamVector, Stencil, Var,
};
use crate::linalg::{LinalgError, Matrix};
use crate::nlme::{
    ebe_posterior, log_prior, lower_matvec, standard_normals, subject_seed, Dataset,
    MarginalEstimate, NlmeError, NlmeProblem, SubjectRecord,
};
use crate::nn::{Encoder, NnError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum UqError {
    #[error("marginal likelihood underflows for every sample of subject `{0}`")]
    DegenerateMarginal(String),
    #[error("Fisher information is not positive definite after jitter {jitter:e}")]
    SingularFim { jitter: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Nlme(#[from] NlmeError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Serializable choice of proposal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProposalKind {
    #[default]
    Prior,
    Encoder {
        inflation: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UqConfig {
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub proposal: ProposalKind,
    #[serde(default = "default_uq_seed")]
    pub seed: u64,
}

fn default_samples() -> usize {
    DEFAULT_UQ_SAMPLES
}

fn default_uq_seed() -> u64 {
    7
}

impl Default for UqConfig {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_UQ_SAMPLES,
            proposal: ProposalKind::Prior,
            seed: default_uq_seed(),
        }
    }
}

impl UqConfig {
    pub fn proposal<'a>(&self, encoder: &'a Encoder, psi: &'a ParamVector) -> Proposal<'a> {
        match self.proposal {
            ProposalKind::Prior => Proposal::Prior,
            ProposalKind::Encoder { inflation } => Proposal::Encoder {
                encoder,
                psi,
                inflation,
            },
        }
    }
}

/// Where the draws `b_l` come from.
#[derive(Clone, Copy, Debug)]
pub enum Proposal<'a> {
    /// `b_l = L_Ω ε_l`; the draws move with φ.
    Prior,
    /// Importance sampling from the fitted encoder posterior with its
    /// Cholesky factor scaled by `inflation`; the draws are fixed in φ.
    Encoder {
        encoder: &'a Encoder,
        psi: &'a ParamVector,
        inflation: f64,
    },
}

/// Per-subject sampling distribution.
#[derive(Clone, Debug, PartialEq)]
pub enum SubjectProposal {
    Prior,
    Gaussian { mu: Vec<f64>, chol: Vec<Vec<f64>> },
}

impl Proposal<'_> {
    pub fn for_subject(&self, subject: &SubjectRecord) -> Result<SubjectProposal, UqError> {
        match self {
            Proposal::Prior => Ok(SubjectProposal::Prior),
            Proposal::Encoder {
                encoder,
                psi,
                inflation,
            } => {
                if !(*inflation > 0.0) {
                    return Err(UqError::InvalidInput(
                        "proposal inflation must be positive".into(),
                    ));
                }
                let post = ebe_posterior(encoder, psi, subject)?;
                let chol = post
                    .chol
                    .iter()
                    .map(|r| r.iter().map(|v| v * inflation).collect())
                    .collect();
                Ok(SubjectProposal::Gaussian { mu: post.mu, chol })
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Proposal::Prior => "prior".into(),
            Proposal::Encoder { inflation, .. } => format!("encoder(x{inflation})"),
        }
    }
}

pub const DEFAULT_UQ_SAMPLES: usize = 10_000;
const JITTERS: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectCurvature {
    pub log_p: f64,
    pub log_p_se: f64,
    pub grad: Vec<f64>,
    pub hess: Matrix,
}

/// Value and φ-gradient of `log p̂(Y_i)` under the draws `eps`.
fn log_marginal_grad(
    problem: &NlmeProblem,
    subject: &SubjectRecord,
    phi: &ParamVector,
    eps: &[Vec<f64>],
    proposal: &SubjectProposal,
) -> Result<(MarginalEstimate, Vec<f64>), UqError> {
    let mut logs = Vec::with_capacity(eps.len());
    let mut grads = Vec::with_capacity(eps.len());
    for e in eps {
        let r = value_and_gradient(
            |x: &[Var]| -> Result<Var, UqError> {
                let p = problem.unpack(x);
                match proposal {
                    SubjectProposal::Prior => {
                        let b = problem.random_effect(&p, e);
                        Ok(problem.log_cond_likelihood(subject, &b, &p)?)
                    }
                    SubjectProposal::Gaussian { mu, chol } => {
                        let b: Vec<f64> = mu
                            .iter()
                            .zip(lower_matvec(chol, e))
                            .map(|(m, v)| m + v)
                            .collect();
                        let c: Vec<f64> = b.iter().zip(mu).map(|(x, m)| x - m).collect();
                        let log_q = log_prior(&c, chol);
                        let bv: Vec<Var> = b
                            .iter()
                            .map(|&v| <Var as crate::diff::Real>::cst(v))
                            .collect();
                        let ll = problem.log_cond_likelihood(subject, &bv, &p)?;
                        Ok(ll + log_prior(&bv, &p.l_omega) - log_q)
                    }
                }
            },
            phi,
        );
        match r {
            Ok((v, g)) => {
                logs.push(v);
                grads.push(g);
            }
            // An underflowing sample has zero weight.
            Err(UqError::Diff(DiffError::NonFiniteValue)) => {
                logs.push(f64::NEG_INFINITY);
                grads.push(vec![0.0; phi.len()]);
            }
            Err(e) => return Err(e),
        }
    }
    let est = MarginalEstimate::from_log_samples(&logs).map_err(|e| match e {
        NlmeError::AllSamplesUnderflow => UqError::DegenerateMarginal(subject.id.clone()),
        other => other.into(),
    })?;
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut grad = vec![0.0; phi.len()];
    for (wl, gl) in w.iter().zip(&grads) {
        if *wl == 0.0 {
            continue;
        }
        for (a, b) in grad.iter_mut().zip(gl) {
            *a += wl / total * b;
        }
    }
    Ok((est, grad))
}

/// `log p̂(Y_i)`, its gradient and Hessian over φ with `L` draws seeded by
/// the subject id.
pub fn marginal_grad_hess(
    problem: &NlmeProblem,
    subject: &SubjectRecord,
    phi: &ParamVector,
    n_samples: usize,
    seed: u64,
    proposal: &SubjectProposal,
) -> Result<SubjectCurvature, UqError> {
    if n_samples == 0 {
        return Err(UqError::InvalidInput("need at least one sample".into()));
    }
    if phi.values.iter().any(|v| !v.is_finite()) {
        return Err(UqError::InvalidInput("non-finite φ".into()));
    }
    let eps = standard_normals(
        subject_seed(seed, &subject.id),
        n_samples,
        problem.n_random(),
    );
    let (est, grad) = log_marginal_grad(problem, subject, phi, &eps, proposal)?;
    let indices: Vec<usize> = (0..phi.len()).collect();
    // Monte Carlo error dominates the O(h²) truncation here.
    let h = hessian_with_stencil(
        |p: &ParamVector| log_marginal_grad(problem, subject, p, &eps, proposal).map(|(_, g)| g),
        phi,
        &indices,
        Stencil::Central2,
    )?;
    Ok(SubjectCurvature {
        log_p: est.log_p,
        log_p_se: est.std_error,
        grad,
        hess: h.matrix,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    /// Label per φ coordinate, e.g. `theta[theta1]` or `log_sigma`.
    pub names: Vec<String>,
    /// φ̂ on the optimization scale (log for positive parameters).
    pub estimate: Vec<f64>,
    pub fim: Matrix,
    pub cov: Matrix,
    pub se: Vec<f64>,
    pub ci95: Vec<(f64, f64)>,
    pub condition_number: f64,
    pub mc_samples: usize,
    pub proposal: String,
    /// Diagonal jitter added before inversion, relative to the mean diagonal.
    pub jitter_applied: Option<f64>,
    pub log_likelihood: f64,
}

/// Labels for the φ coordinates of `problem`.
pub fn phi_names(problem: &NlmeProblem) -> Vec<String> {
    let layout: Layout = problem.layout();
    let est = problem.estimated_names();
    let mut out = Vec::with_capacity(layout.len());
    for seg in layout.segments() {
        for k in 0..seg.len {
            out.push(match seg.name.as_str() {
                "theta" => format!("theta[{}]", est[k]),
                "log_sigma" => "log_sigma".into(),
                other => format!("{other}[{k}]"),
            });
        }
    }
    out
}

/// Scale of each φ coordinate, aligned with [`phi_names`].
pub fn phi_scales(problem: &NlmeProblem) -> Vec<&'static str> {
    let mut out = Vec::new();
    for seg in problem.layout().segments() {
        for k in 0..seg.len {
            out.push(match seg.name.as_str() {
                "theta" => match problem.model.params[problem.estimated[k]].transform {
                    crate::mech::Transform::Log => "log",
                    crate::mech::Transform::Identity => "identity",
                },
                "omega_offdiag" => "identity",
                _ => "log",
            });
        }
    }
    out
}

/// Summed per-subject curvature, subjects evaluated in parallel and added in
/// dataset order. Returns `(Σ log p̂, Σ ∇²log p̂)`.
pub fn summed_hessian(
    problem: &NlmeProblem,
    data: &Dataset,
    phi: &ParamVector,
    n_samples: usize,
    seed: u64,
    proposal: Proposal,
) -> Result<(f64, Matrix), UqError> {
    let parts: Vec<Result<SubjectCurvature, UqError>> = data
        .subjects
        .par_iter()
        .map(|s| marginal_grad_hess(problem, s, phi, n_samples, seed, &proposal.for_subject(s)?))
        .collect();
    let d = phi.len();
    let mut h = Matrix::zeros(d, d);
    let mut ll = 0.0;
    for p in parts {
        let c = p?;
        ll += c.log_p;
        h = h.add(&c.hess);
    }
    Ok((ll, h))
}

/// Builds a report from a Fisher information matrix.
pub fn report_from_fim(
    names: Vec<String>,
    estimate: Vec<f64>,
    fim: Matrix,
    mc_samples: usize,
    proposal: String,
    log_likelihood: f64,
) -> Result<VarianceReport, UqError> {
    let fim = fim.symmetrize();
    let d = fim.rows();
    let scale = (fim.diag().iter().map(|v| v.abs()).sum::<f64>() / d.max(1) as f64).max(1.0);
    let mut jitter = None;
    let mut cov = fim.spd_inverse();
    for j in JITTERS {
        if cov.is_ok() {
            break;
        }
        jitter = Some(j);
        cov = fim.add(&Matrix::identity(d).scale(j * scale)).spd_inverse();
    }
    let cov = cov.map_err(|_| UqError::SingularFim {
        jitter: *JITTERS.last().expect("non-empty"),
    })?;
    let se: Vec<f64> = cov.diag().iter().map(|v| v.sqrt()).collect();
    let ci95 = estimate
        .iter()
        .zip(&se)
        .map(|(m, s)| (m - 1.96 * s, m + 1.96 * s))
        .collect();
    let eig = fim.symmetric_eigenvalues();
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let condition_number = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    Ok(VarianceReport {
        names,
        estimate,
        fim,
        cov,
        se,
        ci95,
        condition_number,
        mc_samples,
        proposal,
        jitter_applied: jitter,
        log_likelihood,
    })
}

/// `I_n(φ̂) = −Σ_i ∇²log p̂(Y_i)` with its inverse and Wald intervals.
pub fn observed_fim(
    problem: &NlmeProblem,
    data: &Dataset,
    phi: &ParamVector,
    n_samples: usize,
    seed: u64,
    proposal: Proposal,
) -> Result<VarianceReport, UqError> {
    data.validate()?;
    let (ll, h) = summed_hessian(problem, data, phi, n_samples, seed, proposal)?;
    report_from_fim(
        phi_names(problem),
        phi.values.clone(),
        h.scale(-1.0),
        n_samples,
        proposal.label(),
        ll,
    )
}

/// One replicate's estimate and, when UQ succeeded, its standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimate {
    pub estimate: Vec<f64>,
    pub se: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// Fraction of replicates whose interval with the across-replicate
    /// variance contains the truth.
    pub emp_cov: f64,
    /// Same with each replicate's own standard error; NaN without any.
    pub est_cov: f64,
}

/// Per-coordinate 95% coverage.
pub fn coverage(reps: &[ReplicateEstimate], truth: &[f64]) -> Result<Vec<Coverage>, UqError> {
    if reps.is_empty() {
        return Err(UqError::InvalidInput("no replicates".into()));
    }
    if reps.iter().any(|r| r.estimate.len() != truth.len()) {
        return Err(UqError::InvalidInput(
            "estimate length differs from truth".into(),
        ));
    }
    let n = reps.len() as f64;
    Ok((0..truth.len())
        .map(|k| {
            let mean = reps.iter().map(|r| r.estimate[k]).sum::<f64>() / n;
            let var = reps
                .iter()
                .map(|r| (r.estimate[k] - mean).powi(2))
                .sum::<f64>()
                / n;
            let half = 1.96 * var.sqrt();
            let emp = reps
                .iter()
                .filter(|r| (r.estimate[k] - truth[k]).abs() <= half)
                .count() as f64
                / n;
            let with_se: Vec<&ReplicateEstimate> = reps.iter().filter(|r| r.se.is_some()).collect();
            let est = if with_se.is_empty() {
                f64::NAN
            } else {
                with_se
                    .iter()
                    .filter(|r| {
                        let se = r.se.as_ref().expect("filtered")[k];
                        (r.estimate[k] - truth[k]).abs() <= 1.96 * se
                    })
                    .count() as f64
                    / with_se.len() as f64
            };
            Coverage {
                emp_cov: emp,
                est_cov: est,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{hessian, Real};
    use crate::mech::MechModel;
    use crate::nlme::Design;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn conj_m(n: usize, m: usize, seed: u64) -> (NlmeProblem, Dataset) {
        let pb = NlmeProblem::new(MechModel::conjugate(0.3, 0.8, 0.6), &["mu"]).unwrap();
        let data = pb
            .simulate_cohort(&pb.phi_truth(), &Design::regular(n, m, 1.0), seed)
            .unwrap();
        (pb, data)
    }

    fn conj(n: usize, seed: u64) -> (NlmeProblem, Dataset) {
        conj_m(n, 1, seed)
    }

    #[test]
    fn conjugate_mean_curvature() {
        // With one observation per subject only ω² + σ² is identified, so
        // check the θ̄ entry alone.
        let (pb, data) = conj(30, 1);
        let (_, h) = summed_hessian(&pb, &data, &pb.phi_truth(), 4000, 9, Proposal::Prior).unwrap();
        let want = -30.0 / (0.64 + 0.36);
        assert!(
            (h[(0, 0)] - want).abs() / want.abs() < 0.1,
            "{} vs {want}",
            h[(0, 0)]
        );
    }

    #[test]
    fn conjugate_standard_error() {
        let (pb, data) = conj_m(100, 2, 1);
        let r = observed_fim(&pb, &data, &pb.phi_truth(), 2000, 9, Proposal::Prior).unwrap();
        let se = ((0.64f64 + 0.36 / 2.0) / 100.0).sqrt();
        assert!((r.se[0] - se).abs() / se < 0.1, "{} vs {se}", r.se[0]);
        assert_eq!(r.names, vec!["theta[mu]", "log_omega[0]", "log_sigma"]);
        assert_eq!(r.jitter_applied, None);
        let ci = r.ci95[0];
        assert!(((ci.0 + ci.1) / 2.0 - r.estimate[0]).abs() < 1e-12);
        assert!(((ci.1 - ci.0) / 2.0 - 1.96 * r.se[0]).abs() < 1e-12);
        let prod = r.cov.matmul(&r.fim).unwrap();
        assert!(prod.add(&Matrix::identity(3).scale(-1.0)).max_abs() < 1e-6);
        assert!(r.fim.add(&r.fim.transpose().scale(-1.0)).max_abs() == 0.0);
    }

    #[test]
    fn conjugate_gradient_is_closed_form_score() {
        let (pb, data) = conj(1, 2);
        let s = &data.subjects[0];
        let c = marginal_grad_hess(&pb, s, &pb.phi_truth(), 20_000, 3, &SubjectProposal::Prior)
            .unwrap();
        // d/dμ log N(y; μ, ω²+σ²) = (y − μ)/(ω²+σ²)
        let want = (s.values[0] - 0.3) / 1.0;
        assert!((c.grad[0] - want).abs() < 0.03, "{} vs {want}", c.grad[0]);
        let exact = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * (s.values[0] - 0.3).powi(2);
        assert!((c.log_p - exact).abs() < 3.0 * c.log_p_se + 1e-3);
    }

    #[test]
    fn vanishing_prior_gives_conditional_hessian() {
        let pb = NlmeProblem::new(MechModel::pk(), &["theta1", "theta2"]).unwrap();
        let data = pb
            .simulate_cohort(&pb.phi_truth(), &Design::regular(1, 6, 10.0), 4)
            .unwrap();
        let s = &data.subjects[0];
        let phi = pb.phi_from_natural(&[0.5, 2.0], &[1e-7], 0.2).unwrap();
        let c = marginal_grad_hess(&pb, s, &phi, 3, 1, &SubjectProposal::Prior).unwrap();
        let direct = hessian(
            |x: &[Var]| -> Result<Var, UqError> {
                let p = pb.unpack(x);
                Ok(pb.log_cond_likelihood(s, &[Var::cst(0.0)], &p)?)
            },
            &phi,
            &["theta", "log_sigma"],
        )
        .unwrap();
        // (θ̄1, θ̄2) block and the σ entry.
        for (a, &i) in direct.indices.iter().enumerate() {
            for (b, &j) in direct.indices.iter().enumerate() {
                let d = direct.matrix[(a, b)];
                assert!(
                    (c.hess[(i, j)] - d).abs() < 1e-4 * (1.0 + d.abs()),
                    "{i},{j}: {} vs {d}",
                    c.hess[(i, j)]
                );
            }
        }
    }

    #[test]
    fn fim_is_additive_over_subjects() {
        let (pb, data) = conj(4, 5);
        let phi = pb.phi_truth();
        let a = data.subset(&[0, 1]);
        let b = data.subset(&[2, 3]);
        let (_, ha) = summed_hessian(&pb, &a, &phi, 500, 1, Proposal::Prior).unwrap();
        let (_, hb) = summed_hessian(&pb, &b, &phi, 500, 1, Proposal::Prior).unwrap();
        let (_, hab) = summed_hessian(&pb, &data, &phi, 500, 1, Proposal::Prior).unwrap();
        assert!(hab.add(&ha.add(&hb).scale(-1.0)).max_abs() < 1e-9);
        let mut twice = data.clone();
        twice.subjects.extend(data.subjects.clone());
        let (_, h2) = summed_hessian(&pb, &twice, &phi, 500, 1, Proposal::Prior).unwrap();
        assert!(h2.add(&hab.scale(-2.0)).max_abs() < 1e-9);
    }

    #[test]
    fn quadratic_fim_is_exact_and_singular_is_reported() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let r = report_from_fim(
            vec!["a".into(), "b".into()],
            vec![0.0, 0.0],
            a.clone(),
            1,
            "prior".into(),
            0.0,
        )
        .unwrap();
        assert_eq!(r.fim, a);
        assert_eq!(r.jitter_applied, None);
        let sing = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let r = report_from_fim(
            vec!["a".into(), "b".into()],
            vec![0.0, 0.0],
            sing,
            1,
            "prior".into(),
            0.0,
        )
        .unwrap();
        assert!(r.jitter_applied.is_some());
        let neg = Matrix::from_diag(&[1.0, -1.0]);
        assert!(matches!(
            report_from_fim(
                vec!["a".into(), "b".into()],
                vec![0.0, 0.0],
                neg,
                1,
                "prior".into(),
                0.0
            ),
            Err(UqError::SingularFim { .. })
        ));
    }

    #[test]
    fn coverage_examples() {
        let reps: Vec<ReplicateEstimate> = (0..5)
            .map(|k| ReplicateEstimate {
                estimate: vec![1.0 + 0.01 * k as f64],
                se: Some(vec![1.0]),
            })
            .collect();
        let c = coverage(&reps, &[1.0]).unwrap();
        assert_eq!(c[0].est_cov, 1.0);
        let zero: Vec<ReplicateEstimate> = (0..5)
            .map(|_| ReplicateEstimate {
                estimate: vec![2.0],
                se: Some(vec![0.0]),
            })
            .collect();
        let c = coverage(&zero, &[1.0]).unwrap();
        assert_eq!((c[0].emp_cov, c[0].est_cov), (0.0, 0.0));
    }

    #[test]
    fn coverage_is_near_nominal_for_exact_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let v: f64 = 0.04;
        let dist = Normal::new(2.0, v.sqrt()).unwrap();
        let reps: Vec<ReplicateEstimate> = (0..200)
            .map(|_| ReplicateEstimate {
                estimate: vec![dist.sample(&mut rng)],
                se: Some(vec![v.sqrt()]),
            })
            .collect();
        let c = coverage(&reps, &[2.0]).unwrap();
        assert!((0.90..=0.99).contains(&c[0].est_cov), "{c:?}");
        assert!((0.90..=0.99).contains(&c[0].emp_cov), "{c:?}");
    }
}
