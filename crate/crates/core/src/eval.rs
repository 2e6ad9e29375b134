//! Metrics and empirical checks of the transfer bounds.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{self, DiagGaussian, PredictorSpec};
use crate::error::{check_dim, Error, Result};
use crate::metalearn::spectral_norm;
use crate::taskgen::TaskEmbedding;

pub const PROB_CLAMP: f64 = 1e-12;

/// Mann-Whitney AUROC with midranks for ties. NaN when only one class is present.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_dim(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(f64::NAN);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-12, 1 - 1e-12]`.
pub fn log_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_dim(probs.len(), labels.len())?;
    if probs.is_empty() {
        return Err(Error::Domain("log loss of an empty set".into()));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if l == 1 { -p.ln() } else { -(1.0 - p).ln() }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Log loss of the transfer method minus log loss of the target-only baseline.
/// Positive values mean transfer hurt.
pub fn negative_transfer(scores_x: &[f64], scores_nt: &[f64], labels: &[u8]) -> Result<f64> {
    check_dim(scores_x.len(), scores_nt.len())?;
    Ok(log_loss(scores_x, labels)? - log_loss(scores_nt, labels)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub value: f64,
    pub n_param_samples: usize,
    pub n_data: usize,
    pub std_err: f64,
}

fn zero_one_risk(spec: &PredictorSpec, phi: &DVector<f64>, x: &DMatrix<f64>, y: &[u8]) -> Result<f64> {
    let f = spec.logits(phi, x)?;
    let wrong = f.iter().zip(y).filter(|(&f, &y)| (f > 0.0) != (y == 1)).count();
    Ok(wrong as f64 / y.len() as f64)
}

fn risk_from_noise(spec: &PredictorSpec, prior: &DiagGaussian, x: &DMatrix<f64>, y: &[u8], noise: &[DVector<f64>]) -> Result<RiskEstimate> {
    let risks = noise
        .iter()
        .map(|z| zero_one_risk(spec, &prior.reparameterize(z), x, y))
        .collect::<Result<Vec<_>>>()?;
    let n = risks.len() as f64;
    let mean = risks.iter().sum::<f64>() / n;
    let var = risks.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(RiskEstimate { value: mean, n_param_samples: risks.len(), n_data: y.len(), std_err: (var / n).sqrt() })
}

/// Monte Carlo estimate of `E_{φ ~ prior}[R(φ)]` under 0-1 loss.
pub fn prior_induced_risk<R: Rng + ?Sized>(
    spec: &PredictorSpec,
    prior: &DiagGaussian,
    x: &DMatrix<f64>,
    y: &[u8],
    n_param_samples: usize,
    rng: &mut R,
) -> Result<RiskEstimate> {
    if n_param_samples < 100 {
        return Err(Error::Config(format!("n_param_samples must be >= 100, got {n_param_samples}")));
    }
    check_dim(x.nrows(), y.len())?;
    if y.is_empty() {
        return Err(Error::Domain("risk of an empty dataset".into()));
    }
    let noise = bayes::draw_noise(rng, prior.dim(), n_param_samples);
    risk_from_noise(spec, prior, x, y, &noise)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub tolerance: f64,
    pub holds: bool,
}

/// `L = M ‖W‖₂ / (2σ)` with the loss bounded by `M`.
pub fn lipschitz_const(w_emb: &DMatrix<f64>, sigma: f64, loss_bound: f64) -> f64 {
    loss_bound * spectral_norm(w_emb) / (2.0 * sigma)
}

/// Compares `|R̄(z1) − R̄(z2)|` to `M ‖W‖₂ ‖z1 − z2‖ / (2σ)` with a 3-sigma allowance
/// for Monte Carlo error. Both risks reuse the same noise draws.
#[allow(clippy::too_many_arguments)]
pub fn check_lipschitz<R: Rng + ?Sized>(
    spec: &PredictorSpec,
    prior_z1: &DiagGaussian,
    prior_z2: &DiagGaussian,
    z1: &TaskEmbedding,
    z2: &TaskEmbedding,
    x: &DMatrix<f64>,
    y: &[u8],
    w_emb: &DMatrix<f64>,
    sigma: f64,
    n_param_samples: usize,
    rng: &mut R,
) -> Result<LipschitzCheck> {
    check_dim(prior_z1.dim(), prior_z2.dim())?;
    check_dim(z1.dim(), z2.dim())?;
    let noise = bayes::draw_noise(rng, prior_z1.dim(), n_param_samples.max(2));
    let r1 = risk_from_noise(spec, prior_z1, x, y, &noise)?;
    let r2 = risk_from_noise(spec, prior_z2, x, y, &noise)?;
    let lhs = (r1.value - r2.value).abs();
    let rhs = lipschitz_const(w_emb, sigma, 1.0) * (z1.vector() - z2.vector()).norm();
    let tolerance = 3.0 * (r1.std_err.powi(2) + r2.std_err.powi(2)).sqrt();
    Ok(LipschitzCheck { lhs, rhs, tolerance, holds: lhs <= rhs + tolerance })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsDecomposition {
    pub eps_ood: f64,
    pub eps_causal: f64,
    pub eps_expert: f64,
    pub lipschitz_const: f64,
    pub bound: f64,
}

impl EpsDecomposition {
    pub fn total(&self) -> f64 {
        self.eps_ood + self.eps_causal + self.eps_expert
    }
}

/// Splits the distance between the embedding actually used (`z_hat`) and the
/// source mean (`z_bar`) into expert, discovery and OOD parts.
pub fn eps_decomposition(
    z_true: &TaskEmbedding,
    z_tilde: &TaskEmbedding,
    z_hat: &TaskEmbedding,
    z_bar: &TaskEmbedding,
    w_emb: &DMatrix<f64>,
    sigma: f64,
) -> Result<EpsDecomposition> {
    let d = z_true.dim();
    for z in [z_tilde, z_hat, z_bar] {
        check_dim(d, z.dim())?;
    }
    let eps_ood = (z_true.vector() - z_bar.vector()).norm();
    let eps_causal = (z_tilde.vector() - z_true.vector()).norm();
    let eps_expert = (z_hat.vector() - z_tilde.vector()).norm();
    let l = lipschitz_const(w_emb, sigma, 1.0);
    Ok(EpsDecomposition { eps_ood, eps_causal, eps_expert, lipschitz_const: l, bound: l * (eps_ood + eps_causal + eps_expert) })
}

/// One paired causal/global run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtPair {
    pub seed: u64,
    pub shift_s: f64,
    pub nt_causal: f64,
    pub nt_glob: f64,
    pub eps: EpsDecomposition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtMitigationReport {
    pub n_total: usize,
    pub n_used: usize,
    pub condition_met: bool,
    pub mean_nt_causal: f64,
    pub mean_nt_glob: f64,
    /// Mean of `nt_causal − nt_glob` with its percentile bootstrap interval.
    pub mean_diff: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
    /// The interval lies entirely above zero, i.e. the causal prior transferred worse.
    pub violation: bool,
}

/// Keeps the runs with `ε_expert + ε_causal ≤ ε_OOD` and compares the mean
/// negative transfer of the causal and global priors with a paired bootstrap.
pub fn check_nt_mitigation<R: Rng + ?Sized>(pairs: &[NtPair], n_boot: usize, rng: &mut R) -> NtMitigationReport {
    let used: Vec<&NtPair> = pairs.iter().filter(|p| p.eps.eps_expert + p.eps.eps_causal <= p.eps.eps_ood).collect();
    let nan = f64::NAN;
    if used.is_empty() {
        log::info!("negative-transfer check: condition never met over {} runs", pairs.len());
        return NtMitigationReport {
            n_total: pairs.len(),
            n_used: 0,
            condition_met: false,
            mean_nt_causal: nan,
            mean_nt_glob: nan,
            mean_diff: nan,
            ci_low: nan,
            ci_high: nan,
            ci_level: 0.95,
            violation: false,
        };
    }
    let n = used.len();
    let diffs: Vec<f64> = used.iter().map(|p| p.nt_causal - p.nt_glob).collect();
    let mean = |v: &mut dyn Iterator<Item = f64>| v.sum::<f64>() / n as f64;
    let mean_diff = mean(&mut diffs.iter().copied());
    let mut boot: Vec<f64> = (0..n_boot.max(1))
        .map(|_| mean(&mut (0..n).map(|_| diffs[rng.random_range(0..n)])))
        .collect();
    boot.sort_by(f64::total_cmp);
    let q = |p: f64| boot[((p * (boot.len() - 1) as f64).round() as usize).min(boot.len() - 1)];
    let (ci_low, ci_high) = (q(0.025), q(0.975));
    NtMitigationReport {
        n_total: pairs.len(),
        n_used: n,
        condition_met: true,
        mean_nt_causal: mean(&mut used.iter().map(|p| p.nt_causal)),
        mean_nt_glob: mean(&mut used.iter().map(|p| p.nt_glob)),
        mean_diff,
        ci_low,
        ci_high,
        ci_level: 0.95,
        violation: ci_low > 0.0,
    }
}

/// Spearman rank correlation with midranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let ra = midranks(a);
    let rb = midranks(b);
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    Ok(cov / (va * vb).sqrt())
}

fn midranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            ranks[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    ranks
}
