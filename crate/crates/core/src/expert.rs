//! Expert-guided inference of a target task embedding.
//!
//! The expert is asked "is source `i` closer to the target than source `j`?".
//! With `Δ = ‖z − z_j‖ − ‖z − z_i‖` the answer `c = 1` has probability
//! `Φ(τ Δ)`. A diagonal Gaussian posterior over `z` under an `N(0, I)` prior is
//! refit by SVI after every answer, and the next pair maximizes the BALD
//! mutual information.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bayes::{self, DiagGaussian};
use crate::embedding::EmbeddingSet;
use crate::error::{check_dim, Error, Result};
use crate::optim::Adam;
use crate::rng::{self, Purpose};
use crate::special::{binary_entropy, inv_mills, log_norm_cdf, norm_cdf};
use crate::taskgen::TaskEmbedding;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpertQuery {
    pub i: String,
    pub j: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    #[serde(flatten)]
    pub query: ExpertQuery,
    /// 1 when `i` was judged closer.
    pub c: u8,
    #[serde(rename = "eig")]
    pub eig_at_selection: f64,
    /// Supplied by the caller; the simulated loop uses the query index.
    pub timestamp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Acquisition {
    Bald,
    Random,
}

impl std::str::FromStr for Acquisition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bald" => Ok(Acquisition::Bald),
            "random" => Ok(Acquisition::Random),
            other => Err(Error::Config(format!("unknown acquisition {other:?}, expected bald or random"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SviConfig {
    pub lr: f64,
    pub steps: usize,
    pub elbo_mc: usize,
}

impl Default for SviConfig {
    fn default() -> Self {
        SviConfig { lr: 0.01, steps: 150, elbo_mc: 16 }
    }
}

/// `‖z − z_j‖ − ‖z − z_i‖`; positive when `i` is closer.
pub fn delta(query: &ExpertQuery, z: &TaskEmbedding, sources: &EmbeddingSet) -> Result<f64> {
    let zi = sources.by_id(&query.i)?;
    let zj = sources.by_id(&query.j)?;
    check_dim(sources.dim(), z.dim())?;
    Ok((z.vector() - zj.vector()).norm() - (z.vector() - zi.vector()).norm())
}

/// `Φ(τ Δ)`, the probability of `c = 1`.
pub fn probit_lik(delta: f64, tau: f64) -> f64 {
    norm_cdf(tau * delta)
}

/// `log p(c | Δ, τ)`, stable far into either tail.
pub fn probit_log_lik(delta: f64, c: u8, tau: f64) -> f64 {
    let a = tau * delta;
    if c == 1 { log_norm_cdf(a) } else { log_norm_cdf(-a) }
}

/// One comparison with its sources resolved to vectors.
#[derive(Clone, Debug)]
pub struct ResolvedComparison {
    pub zi: DVector<f64>,
    pub zj: DVector<f64>,
    pub c: u8,
}

fn unit_or_zero(v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    if n > 0.0 { v / n } else { v }
}

/// Log-likelihood of all comparisons at `z` and its gradient.
pub fn comparisons_loglik(z: &DVector<f64>, history: &[ResolvedComparison], tau: f64) -> (f64, DVector<f64>) {
    let mut value = 0.0;
    let mut grad = DVector::zeros(z.len());
    for h in history {
        let di = z - &h.zi;
        let dj = z - &h.zj;
        let d = dj.norm() - di.norm();
        let sign = if h.c == 1 { 1.0 } else { -1.0 };
        let a = sign * tau * d;
        value += log_norm_cdf(a);
        grad += (unit_or_zero(dj) - unit_or_zero(di)) * (sign * tau * inv_mills(a));
    }
    (value, grad)
}

/// Negative ELBO of the comparison model under `N(0, I)` with the given noise.
pub fn probit_elbo_with_noise(q: &DiagGaussian, history: &[ResolvedComparison], tau: f64, noise: &[DVector<f64>]) -> Result<bayes::ElboEstimate> {
    if noise.is_empty() {
        return Err(Error::Config("elbo_mc must be >= 1".into()));
    }
    let d = q.dim();
    let prior = DiagGaussian::standard(d);
    let sd = q.std();
    let s = noise.len() as f64;
    let mut nll = 0.0;
    let mut gm = DVector::zeros(d);
    let mut gl = DVector::zeros(d);
    for eps in noise {
        check_dim(d, eps.len())?;
        let z = &q.mean + sd.component_mul(eps);
        let (ll, g) = comparisons_loglik(&z, history, tau);
        nll -= ll / s;
        gm -= &g / s;
        gl -= g.component_mul(eps).component_mul(&sd) / s;
    }
    let kl = bayes::kl_diag(q, &prior)?;
    let kg = bayes::kl_diag_grad(q, &prior)?;
    Ok(bayes::ElboEstimate { value: nll + kl, grad_mean: gm + kg.q_mean, grad_log_std: gl + kg.q_log_std, mc_samples: noise.len(), nll, kl })
}

/// Per-pair BALD estimate from shared posterior samples.
fn eig_from_samples(dist_i: &[f64], dist_j: &[f64], tau: f64) -> f64 {
    let n = dist_i.len() as f64;
    let mut p_bar = 0.0;
    let mut h_mean = 0.0;
    for (di, dj) in dist_i.iter().zip(dist_j) {
        let p = norm_cdf(tau * (dj - di));
        p_bar += p;
        h_mean += binary_entropy(p);
    }
    (binary_entropy(p_bar / n) - h_mean / n).clamp(0.0, std::f64::consts::LN_2)
}

/// A query selected and waiting for an answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingQuery {
    pub query_index: usize,
    #[serde(flatten)]
    pub query: ExpertQuery,
    pub eig: f64,
    /// Every pair had already been asked.
    pub repeat: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertSession {
    pub sources: EmbeddingSet,
    pub posterior: DiagGaussian,
    pub history: Vec<Comparison>,
    /// Inference temperature.
    pub tau: f64,
    pub budget: usize,
    pub acquisition: Acquisition,
    pub svi: SviConfig,
    pub bald_mc: usize,
    pub rng_seed: u64,
    /// Selections made after the pair pool ran out.
    pub repeats: usize,
}

impl ExpertSession {
    pub fn new(sources: EmbeddingSet, budget: usize, acquisition: Acquisition, seed: u64) -> Result<Self> {
        if sources.len() < 2 {
            return Err(Error::Config("an expert session needs at least two sources".into()));
        }
        let d = sources.dim();
        Ok(ExpertSession {
            sources,
            posterior: DiagGaussian::standard(d),
            history: Vec::new(),
            tau: 1.0,
            budget,
            acquisition,
            svi: SviConfig::default(),
            bald_mc: 200,
            rng_seed: seed,
            repeats: 0,
        })
    }

    pub fn remaining(&self) -> usize {
        self.budget.saturating_sub(self.history.len())
    }

    pub fn is_exhausted(&self) -> bool {
        self.remaining() == 0
    }

    pub fn posterior_mean(&self) -> TaskEmbedding {
        TaskEmbedding(self.posterior.mean.clone())
    }

    fn resolved(&self) -> Result<Vec<ResolvedComparison>> {
        self.history
            .iter()
            .map(|h| {
                Ok(ResolvedComparison {
                    zi: self.sources.by_id(&h.query.i)?.vector().clone(),
                    zj: self.sources.by_id(&h.query.j)?.vector().clone(),
                    c: h.c,
                })
            })
            .collect()
    }

    /// Refits the posterior to the whole history, warm-started at the current
    /// posterior. A divergence restarts once from the prior.
    pub fn svi_update(&mut self) -> Result<DiagGaussian> {
        let history = self.resolved()?;
        let update = self.history.len() as u64;
        match self.run_svi(self.posterior.clone(), &history, update, 0) {
            Ok(q) => self.posterior = q,
            Err(Error::Numerical(msg)) => {
                log::warn!("SVI diverged ({msg}); replaying history from the prior");
                self.posterior = self.run_svi(DiagGaussian::standard(self.sources.dim()), &history, update, 1)?;
            }
            Err(e) => return Err(e),
        }
        Ok(self.posterior.clone())
    }

    fn run_svi(&self, mut q: DiagGaussian, history: &[ResolvedComparison], update: u64, attempt: u64) -> Result<DiagGaussian> {
        let d = q.dim();
        let mut rng = rng::stream_sub(self.rng_seed, update, Purpose::SviNoise, attempt);
        let mut am = Adam::new(self.svi.lr, d);
        let mut al = Adam::new(self.svi.lr, d);
        for step in 0..self.svi.steps {
            let noise = bayes::draw_noise(&mut rng, d, self.svi.elbo_mc.max(1));
            let e = probit_elbo_with_noise(&q, history, self.tau, &noise)?;
            let finite = e.value.is_finite() && e.grad_mean.iter().chain(e.grad_log_std.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(Error::Numerical(format!("expert ELBO is not finite at SVI step {step}")));
            }
            am.step(q.mean.as_mut_slice(), e.grad_mean.as_slice());
            al.step(q.log_std.as_mut_slice(), e.grad_log_std.as_slice());
            q.clamp_log_std();
        }
        Ok(q)
    }

    /// Scrambled Sobol points pushed through the posterior; the low
    /// discrepancy keeps the EIG ranking stable at small sample counts.
    fn posterior_samples(&self) -> Vec<DVector<f64>> {
        let mut rng = rng::stream(self.rng_seed, self.history.len() as u64, Purpose::BaldSamples);
        let scramble: u32 = rng.random();
        let std_normal = Normal::standard();
        (0..self.bald_mc.max(1) as u32)
            .map(|k| {
                let e = DVector::from_fn(self.sources.dim(), |j, _| {
                    let block = scramble.wrapping_add((k >> 16).wrapping_mul(0x9e37_79b9));
                    let u = f64::from(sobol_burley::sample(k & 0xffff, j as u32, block)).clamp(1e-9, 1.0 - 1e-9);
                    std_normal.inverse_cdf(u)
                });
                self.posterior.reparameterize(&e)
            })
            .collect()
    }

    /// Distances from every posterior sample to every source, by source.
    fn sample_distances(&self) -> Vec<Vec<f64>> {
        let samples = self.posterior_samples();
        self.sources.rows().iter().map(|src| samples.iter().map(|z| (z - src.vector()).norm()).collect()).collect()
    }

    /// BALD mutual information of a query, in nats.
    pub fn bald_eig(&self, query: &ExpertQuery) -> Result<f64> {
        let i = self.sources.index_of(&query.i)?;
        let j = self.sources.index_of(&query.j)?;
        let dist = self.sample_distances();
        Ok(eig_from_samples(&dist[i], &dist[j], self.tau))
    }

    fn asked(&self) -> std::collections::HashSet<(usize, usize)> {
        self.history
            .iter()
            .filter_map(|h| {
                let a = self.sources.index_of(&h.query.i).ok()?;
                let b = self.sources.index_of(&h.query.j).ok()?;
                Some((a.min(b), a.max(b)))
            })
            .collect()
    }

    fn query_for(&self, i: usize, j: usize) -> ExpertQuery {
        ExpertQuery { i: self.sources.ids()[i].clone(), j: self.sources.ids()[j].clone() }
    }

    /// Next pair: highest EIG among unasked unordered pairs (first in
    /// lexicographic order on ties), or uniform among them in random mode.
    pub fn select_query(&mut self) -> Result<PendingQuery> {
        if self.is_exhausted() {
            return Err(Error::Domain("query budget exhausted".into()));
        }
        let n = self.sources.len();
        let asked = self.asked();
        let mut pool: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|p| !asked.contains(p)).collect();
        let repeat = pool.is_empty();
        if repeat {
            self.repeats += 1;
            log::warn!("all {} pairs asked; allowing repeats", n * (n - 1) / 2);
            pool = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        }
        let dist = self.sample_distances();
        let (i, j, eig) = match self.acquisition {
            Acquisition::Bald => {
                let mut best = (pool[0].0, pool[0].1, f64::NEG_INFINITY);
                for &(i, j) in &pool {
                    let e = eig_from_samples(&dist[i], &dist[j], self.tau);
                    if e > best.2 {
                        best = (i, j, e);
                    }
                }
                best
            }
            Acquisition::Random => {
                let mut rng = rng::stream(self.rng_seed, self.history.len() as u64, Purpose::RandomQuery);
                let (i, j) = pool[rng.random_range(0..pool.len())];
                (i, j, eig_from_samples(&dist[i], &dist[j], self.tau))
            }
        };
        Ok(PendingQuery { query_index: self.history.len(), query: self.query_for(i, j), eig, repeat })
    }

    /// Records an answer to `pending` and refits the posterior.
    pub fn answer(&mut self, pending: &PendingQuery, c: u8, timestamp: u64) -> Result<()> {
        if c > 1 {
            return Err(Error::Domain(format!("answer must be 0 or 1, got {c}")));
        }
        if pending.query_index != self.history.len() {
            return Err(Error::Domain(format!("stale query index {} (expected {})", pending.query_index, self.history.len())));
        }
        if self.is_exhausted() {
            return Err(Error::Domain("query budget exhausted".into()));
        }
        self.sources.index_of(&pending.query.i)?;
        self.sources.index_of(&pending.query.j)?;
        self.history.push(Comparison { query: pending.query.clone(), c, eig_at_selection: pending.eig, timestamp });
        self.svi_update()?;
        Ok(())
    }

    pub fn export(&self, sources_ref: Option<String>, rmse_trace: Option<Vec<f64>>) -> SessionExport {
        SessionExport {
            sources_ref,
            sources: self.sources.clone(),
            tau: self.tau,
            budget: self.budget,
            acquisition: self.acquisition,
            svi: self.svi.clone(),
            bald_mc: self.bald_mc,
            seed: self.rng_seed,
            history: self.history.clone(),
            posterior: self.posterior.clone(),
            rmse_trace,
        }
    }
}

/// `c ~ Bernoulli(Φ(τ_expert Δ))`.
pub fn simulate_expert<R: Rng + ?Sized>(delta: f64, tau_expert: f64, rng: &mut R) -> Result<u8> {
    if !(tau_expert > 0.0) {
        return Err(Error::Config(format!("tau_expert must be positive, got {tau_expert}")));
    }
    let u: f64 = rng.random();
    Ok(u8::from(u < probit_lik(delta, tau_expert)))
}

/// Answers queries from the true embeddings, which may differ from the ones
/// the session reasons with.
#[derive(Clone, Debug)]
pub struct SimulatedExpert {
    pub true_sources: EmbeddingSet,
    pub z_true: TaskEmbedding,
    pub tau_expert: f64,
    pub seed: u64,
}

impl SimulatedExpert {
    pub fn answer(&self, query: &ExpertQuery, query_index: usize) -> Result<u8> {
        let d = delta(query, &self.z_true, &self.true_sources)?;
        let mut rng = rng::stream(self.seed, query_index as u64, Purpose::ExpertAnswer);
        simulate_expert(d, self.tau_expert, &mut rng)
    }
}

pub fn rmse(a: &TaskEmbedding, b: &TaskEmbedding) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    Ok(((a.vector() - b.vector()).norm_squared() / a.dim() as f64).sqrt())
}

#[derive(Clone, Debug)]
pub struct LoopResult {
    pub z_hat: TaskEmbedding,
    /// Posterior mean after `b` answers, `b = 0..=B`.
    pub mean_trace: Vec<TaskEmbedding>,
    /// RMSE against the simulated expert's truth, `b = 0..=B`.
    pub rmse_trace: Vec<f64>,
}

/// Runs select, answer, refit until the budget is spent.
pub fn run_loop(session: &mut ExpertSession, expert: &SimulatedExpert) -> Result<LoopResult> {
    let mut mean_trace = vec![session.posterior_mean()];
    while !session.is_exhausted() {
        let q = session.select_query()?;
        let c = expert.answer(&q.query, q.query_index)?;
        session.answer(&q, c, q.query_index as u64)?;
        mean_trace.push(session.posterior_mean());
    }
    let rmse_trace = mean_trace.iter().map(|m| rmse(m, &expert.z_true)).collect::<Result<Vec<_>>>()?;
    Ok(LoopResult { z_hat: session.posterior_mean(), mean_trace, rmse_trace })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionExport {
    pub sources_ref: Option<String>,
    pub sources: EmbeddingSet,
    pub tau: f64,
    pub budget: usize,
    pub acquisition: Acquisition,
    pub svi: SviConfig,
    pub bald_mc: usize,
    pub seed: u64,
    pub history: Vec<Comparison>,
    pub posterior: DiagGaussian,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rmse_trace: Option<Vec<f64>>,
}

/// Rebuilds a session offline by feeding the exported answers through SVI again.
pub fn replay(export: &SessionExport) -> Result<ExpertSession> {
    let mut s = ExpertSession::new(export.sources.clone(), export.budget.max(export.history.len()), export.acquisition, export.seed)?;
    s.tau = export.tau;
    s.svi = export.svi.clone();
    s.bald_mc = export.bald_mc;
    for (k, h) in export.history.iter().enumerate() {
        let pending = PendingQuery { query_index: k, query: h.query.clone(), eig: h.eig_at_selection, repeat: false };
        s.answer(&pending, h.c, h.timestamp)?;
    }
    Ok(s)
}
