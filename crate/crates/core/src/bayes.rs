//! Variational building blocks shared by the meta-learner and the expert model.
//!
//! Gradients are written out by hand. Every one of them is checked against
//! central finite differences with frozen reparameterization noise in the
//! tests below.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng;
use crate::special::{log_sigmoid, sigmoid};

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 3.0;
pub const LOGIT_CLAMP: f64 = 50.0;

static LOG_STD_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// How many times `log_std` was pushed back into `[LOG_STD_MIN, LOG_STD_MAX]`.
pub fn log_std_clamp_count() -> u64 {
    LOG_STD_CLAMPS.load(Ordering::Relaxed)
}

/// Gaussian with diagonal covariance, parameterized by mean and log standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    #[serde(with = "crate::json::vector")]
    pub mean: DVector<f64>,
    #[serde(with = "crate::json::vector")]
    pub log_std: DVector<f64>,
}

impl DiagGaussian {
    pub fn new(mean: DVector<f64>, log_std: DVector<f64>) -> Result<Self> {
        check_dim(mean.len(), log_std.len())?;
        if mean.is_empty() {
            return Err(Error::Domain("gaussian must have dimension >= 1".into()));
        }
        let g = DiagGaussian { mean, log_std };
        if !g.is_finite() {
            return Err(Error::Numerical("gaussian parameters must be finite".into()));
        }
        Ok(g)
    }

    pub fn isotropic(mean: DVector<f64>, std: f64) -> Self {
        let n = mean.len();
        DiagGaussian { mean, log_std: DVector::from_element(n, std.ln()) }
    }

    pub fn standard(d: usize) -> Self {
        Self::isotropic(DVector::zeros(d), 1.0)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> DVector<f64> {
        self.log_std.map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX).exp())
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(self.log_std.iter()).all(|v| v.is_finite())
    }

    /// Push `log_std` back into its admissible range, counting activations.
    pub fn clamp_log_std(&mut self) {
        for l in self.log_std.iter_mut() {
            let c = l.clamp(LOG_STD_MIN, LOG_STD_MAX);
            if c != *l {
                LOG_STD_CLAMPS.fetch_add(1, Ordering::Relaxed);
                *l = c;
            }
        }
    }

    /// `mean + std ⊙ ζ`.
    pub fn reparameterize(&self, noise: &DVector<f64>) -> DVector<f64> {
        &self.mean + self.std().component_mul(noise)
    }
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    let sq = q.std();
    let sp = p.std();
    let mut kl = 0.0;
    for k in 0..q.dim() {
        let ratio = sq[k] / sp[k];
        let dm = (q.mean[k] - p.mean[k]) / sp[k];
        kl += -ratio.ln() + 0.5 * (ratio * ratio + dm * dm) - 0.5;
    }
    Ok(kl.max(0.0))
}

/// Partial derivatives of `KL(q ‖ p)`.
#[derive(Clone, Debug)]
pub struct KlGrad {
    pub q_mean: DVector<f64>,
    pub q_log_std: DVector<f64>,
    pub p_mean: DVector<f64>,
}

pub fn kl_diag_grad(q: &DiagGaussian, p: &DiagGaussian) -> Result<KlGrad> {
    check_dim(p.dim(), q.dim())?;
    let sq = q.std();
    let sp = p.std();
    let var_p = sp.component_mul(&sp);
    let dm = &q.mean - &p.mean;
    let q_mean = dm.component_div(&var_p);
    let q_log_std = sq.component_mul(&sq).component_div(&var_p).add_scalar(-1.0);
    Ok(KlGrad { p_mean: -&q_mean, q_mean, q_log_std })
}

/// Reparameterized draws together with the standard-normal noise that produced them.
#[derive(Clone, Debug)]
pub struct Draws {
    pub params: Vec<DVector<f64>>,
    pub noise: Vec<DVector<f64>>,
}

pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, dim: usize, s: usize) -> Vec<DVector<f64>> {
    (0..s).map(|_| DVector::from_vec(rng::normal_vec(rng, dim))).collect()
}

pub fn sample<R: Rng + ?Sized>(q: &DiagGaussian, rng: &mut R, s: usize) -> Result<Draws> {
    if s == 0 {
        return Err(Error::Config("number of samples must be >= 1".into()));
    }
    let noise = draw_noise(rng, q.dim(), s);
    let params = noise.iter().map(|z| q.reparameterize(z)).collect();
    Ok(Draws { params, noise })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    Linear,
    /// One tanh hidden layer.
    Mlp { hidden: usize },
}

/// Logistic predictor `p(y = 1 | x, φ) = σ(f_φ(x))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub arch: Arch,
    pub input_dim: usize,
}

impl PredictorSpec {
    pub fn linear(input_dim: usize) -> Self {
        PredictorSpec { arch: Arch::Linear, input_dim }
    }

    pub fn mlp(input_dim: usize, hidden: usize) -> Self {
        PredictorSpec { arch: Arch::Mlp { hidden }, input_dim }
    }

    /// Linear: weights then bias. MLP: hidden weights (row-major), hidden
    /// biases, output weights, output bias.
    pub fn param_dim(&self) -> usize {
        match self.arch {
            Arch::Linear => self.input_dim + 1,
            Arch::Mlp { hidden } => hidden * (self.input_dim + 1) + hidden + 1,
        }
    }

    fn check(&self, phi: &DVector<f64>, x: &DMatrix<f64>) -> Result<()> {
        check_dim(self.param_dim(), phi.len())?;
        check_dim(self.input_dim, x.ncols())
    }

    /// Raw (unclamped) logits for every row.
    pub fn logits(&self, phi: &DVector<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check(phi, x)?;
        let d = self.input_dim;
        Ok(match self.arch {
            Arch::Linear => {
                let w = phi.rows(0, d);
                (x * w).add_scalar(phi[d])
            }
            Arch::Mlp { hidden } => {
                let (w1, b1, w2, b2) = split_mlp(phi, d, hidden);
                let pre = x * w1.transpose();
                DVector::from_fn(x.nrows(), |i, _| {
                    (0..hidden).map(|h| w2[h] * (pre[(i, h)] + b1[h]).tanh()).sum::<f64>() + b2
                })
            }
        })
    }

    /// Mean over `phis` of `σ(f_φ(x))` per row.
    pub fn predict_mean(&self, phis: &[DVector<f64>], x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; x.nrows()];
        for phi in phis {
            let f = self.logits(phi, x)?;
            for (a, v) in acc.iter_mut().zip(f.iter()) {
                *a += sigmoid(v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
            }
        }
        let n = phis.len().max(1) as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }
}

fn split_mlp(phi: &DVector<f64>, d: usize, hidden: usize) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, f64) {
    let w1 = DMatrix::from_row_slice(hidden, d, &phi.as_slice()[..hidden * d]);
    let b1 = phi.rows(hidden * d, hidden).into_owned();
    let w2 = phi.rows(hidden * d + hidden, hidden).into_owned();
    (w1, b1, w2, phi[phi.len() - 1])
}

fn check_labels(y: &[u8], rows: usize) -> Result<()> {
    check_dim(rows, y.len())?;
    if let Some(bad) = y.iter().find(|&&v| v > 1) {
        return Err(Error::Domain(format!("labels must be binary, found {bad}")));
    }
    Ok(())
}

/// Bernoulli log-likelihood summed over rows, and its gradient in `φ`.
pub fn loglik(spec: &PredictorSpec, phi: &DVector<f64>, x: &DMatrix<f64>, y: &[u8]) -> Result<(f64, DVector<f64>)> {
    check_labels(y, x.nrows())?;
    let f = spec.logits(phi, x)?;
    let mut value = 0.0;
    // d loglik / d f_i, zero where the logit is clamped.
    let mut resid = DVector::zeros(f.len());
    for i in 0..f.len() {
        let fc = f[i].clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        let yi = y[i] as f64;
        value += if y[i] == 1 { log_sigmoid(fc) } else { log_sigmoid(-fc) };
        if f[i].abs() < LOGIT_CLAMP {
            resid[i] = yi - sigmoid(fc);
        }
    }
    let d = spec.input_dim;
    let grad = match spec.arch {
        Arch::Linear => {
            let mut g = DVector::zeros(d + 1);
            g.rows_mut(0, d).copy_from(&(x.transpose() * &resid));
            g[d] = resid.sum();
            g
        }
        Arch::Mlp { hidden } => {
            let (w1, b1, w2, _) = split_mlp(phi, d, hidden);
            let pre = x * w1.transpose();
            let mut g_w1 = DMatrix::<f64>::zeros(hidden, d);
            let mut g_b1 = DVector::<f64>::zeros(hidden);
            let mut g_w2 = DVector::<f64>::zeros(hidden);
            for i in 0..x.nrows() {
                let r = resid[i];
                if r == 0.0 {
                    continue;
                }
                for h in 0..hidden {
                    let a = (pre[(i, h)] + b1[h]).tanh();
                    g_w2[h] += r * a;
                    let back = r * w2[h] * (1.0 - a * a);
                    g_b1[h] += back;
                    for k in 0..d {
                        g_w1[(h, k)] += back * x[(i, k)];
                    }
                }
            }
            let mut g = DVector::zeros(spec.param_dim());
            for h in 0..hidden {
                for k in 0..d {
                    g[h * d + k] = g_w1[(h, k)];
                }
            }
            g.rows_mut(hidden * d, hidden).copy_from(&g_b1);
            g.rows_mut(hidden * d + hidden, hidden).copy_from(&g_w2);
            g[spec.param_dim() - 1] = resid.sum();
            g
        }
    };
    Ok((value, grad))
}

/// Hessian of the summed log-likelihood of the linear predictor (negative semi-definite).
pub fn loglik_hessian_linear(spec: &PredictorSpec, phi: &DVector<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if spec.arch != Arch::Linear {
        return Err(Error::Config("analytic Hessian is only available for the linear predictor".into()));
    }
    let f = spec.logits(phi, x)?;
    let d = spec.input_dim;
    let mut h = DMatrix::zeros(d + 1, d + 1);
    let mut xt = DVector::zeros(d + 1);
    for i in 0..x.nrows() {
        if f[i].abs() >= LOGIT_CLAMP {
            continue;
        }
        let s = sigmoid(f[i]);
        let w = s * (1.0 - s);
        for k in 0..d {
            xt[k] = x[(i, k)];
        }
        xt[d] = 1.0;
        h.ger(-w, &xt, &xt, 1.0);
    }
    Ok(h)
}

/// Monte Carlo estimate of the tempered negative ELBO and its gradient.
#[derive(Clone, Debug)]
pub struct ElboEstimate {
    /// `mean NLL + kl_weight * KL(q ‖ prior)`.
    pub value: f64,
    pub grad_mean: DVector<f64>,
    pub grad_log_std: DVector<f64>,
    pub mc_samples: usize,
    pub nll: f64,
    pub kl: f64,
}

/// Negative ELBO with the likelihood averaged over rows:
/// `-(1/M) E_q[log p(y | X, φ)] + kl_weight · KL(q ‖ prior)`.
pub fn elbo_grad<R: Rng + ?Sized>(
    q: &DiagGaussian,
    prior: &DiagGaussian,
    x: &DMatrix<f64>,
    y: &[u8],
    spec: &PredictorSpec,
    s: usize,
    kl_weight: f64,
    rng: &mut R,
) -> Result<ElboEstimate> {
    if s == 0 {
        return Err(Error::Config("mc_samples must be >= 1".into()));
    }
    let noise = draw_noise(rng, q.dim(), s);
    elbo_grad_with_noise(q, prior, x, y, spec, &noise, kl_weight)
}

/// Same as [`elbo_grad`] with caller-supplied reparameterization noise.
pub fn elbo_grad_with_noise(
    q: &DiagGaussian,
    prior: &DiagGaussian,
    x: &DMatrix<f64>,
    y: &[u8],
    spec: &PredictorSpec,
    noise: &[DVector<f64>],
    kl_weight: f64,
) -> Result<ElboEstimate> {
    if noise.is_empty() {
        return Err(Error::Config("mc_samples must be >= 1".into()));
    }
    if !(kl_weight >= 0.0) {
        return Err(Error::Config(format!("kl_weight must be >= 0, got {kl_weight}")));
    }
    check_dim(spec.param_dim(), q.dim())?;
    check_dim(q.dim(), prior.dim())?;
    let m = x.nrows().max(1) as f64;
    let scale = 1.0 / (m * noise.len() as f64);
    let sq = q.std();
    let mut nll = 0.0;
    let mut grad_mean = DVector::zeros(q.dim());
    let mut grad_log_std = DVector::zeros(q.dim());
    for z in noise {
        check_dim(q.dim(), z.len())?;
        let phi = &q.mean + sq.component_mul(z);
        let (ll, g) = loglik(spec, &phi, x, y)?;
        nll -= ll * scale;
        grad_mean -= &g * scale;
        grad_log_std -= g.component_mul(z).component_mul(&sq) * scale;
    }
    let mut kl = 0.0;
    if kl_weight > 0.0 {
        kl = kl_diag(q, prior)?;
        let kg = kl_diag_grad(q, prior)?;
        grad_mean += kg.q_mean * kl_weight;
        grad_log_std += kg.q_log_std * kl_weight;
    }
    Ok(ElboEstimate { value: nll + kl_weight * kl, grad_mean, grad_log_std, mc_samples: noise.len(), nll, kl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn toy_data(seed: u64, m: usize, d: usize) -> (DMatrix<f64>, Vec<u8>) {
        let mut r = stream(seed, 0, Purpose::Theory);
        let x = DMatrix::from_fn(m, d, |_, _| rng::std_normal(&mut r));
        let y = (0..m).map(|i| u8::from(x[(i, 0)] + 0.5 * rng::std_normal(&mut r) > 0.0)).collect();
        (x, y)
    }

    fn rand_gauss(seed: u64, p: usize, spread: f64) -> DiagGaussian {
        let mut r = stream(seed, 1, Purpose::Theory);
        let mean = DVector::from_vec(rng::normal_vec(&mut r, p)) * spread;
        let log_std = DVector::from_fn(p, |_, _| -1.0 + 0.3 * rng::std_normal(&mut r));
        DiagGaussian::new(mean, log_std).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn kl_examples() {
        let p = rand_gauss(0, 5, 1.0);
        assert_eq!(kl_diag(&p, &p).unwrap(), 0.0);
        let mut m = DVector::zeros(11);
        let q0 = DiagGaussian::isotropic(m.clone(), 0.05);
        m[0] = 1.0;
        let q1 = DiagGaussian::isotropic(m, 0.05);
        assert!((kl_diag(&q1, &q0).unwrap() - 200.0).abs() < 1e-9);
        assert!(kl_diag(&q1, &DiagGaussian::standard(3)).is_err());
    }

    #[test]
    fn kl_is_positive_unless_equal() {
        for seed in 0..20 {
            let q = rand_gauss(seed, 4, 1.0);
            let p = rand_gauss(seed + 100, 4, 1.0);
            assert!(kl_diag(&q, &p).unwrap() > 0.0);
            assert!(kl_diag(&q, &q).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let q = rand_gauss(3, 4, 1.0);
        let p = rand_gauss(4, 4, 1.0);
        let g = kl_diag_grad(&q, &p).unwrap();
        let h = 1e-6;
        for k in 0..4 {
            let bump = |qm: f64, ql: f64, pm: f64| {
                let mut q2 = q.clone();
                let mut p2 = p.clone();
                q2.mean[k] += qm;
                q2.log_std[k] += ql;
                p2.mean[k] += pm;
                kl_diag(&q2, &p2).unwrap()
            };
            let fd_qm = (bump(h, 0.0, 0.0) - bump(-h, 0.0, 0.0)) / (2.0 * h);
            let fd_ql = (bump(0.0, h, 0.0) - bump(0.0, -h, 0.0)) / (2.0 * h);
            let fd_pm = (bump(0.0, 0.0, h) - bump(0.0, 0.0, -h)) / (2.0 * h);
            assert!(rel_err(fd_qm, g.q_mean[k]) < 1e-6);
            assert!(rel_err(fd_ql, g.q_log_std[k]) < 1e-6);
            assert!(rel_err(fd_pm, g.p_mean[k]) < 1e-6);
        }
    }

    #[test]
    fn sampling_behaviour() {
        let mut q = DiagGaussian::isotropic(DVector::from_vec(vec![1.0, -2.0]), 1.0);
        q.log_std.fill(-10.0);
        let mut r = stream(0, 0, Purpose::Theory);
        let d = sample(&q, &mut r, 5).unwrap();
        assert!(d.params.iter().all(|p| (p - &q.mean).amax() < 1e-3));
        assert!(sample(&q, &mut r, 0).is_err());

        let q = DiagGaussian::new(DVector::from_vec(vec![0.5, 3.0]), DVector::from_vec(vec![0.0, -1.0])).unwrap();
        let n = 100_000;
        let d = sample(&q, &mut stream(1, 0, Purpose::Theory), n).unwrap();
        let mean = d.params.iter().fold(DVector::zeros(2), |a, p| a + p) / n as f64;
        for k in 0..2 {
            assert!((mean[k] - q.mean[k]).abs() < 4.0 * q.std()[k] / (n as f64).sqrt());
        }
        let a = sample(&q, &mut stream(2, 0, Purpose::Theory), 3).unwrap();
        let b = sample(&q, &mut stream(2, 0, Purpose::Theory), 3).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn loglik_at_zero_is_uniform() {
        let (x, y) = toy_data(0, 40, 10);
        let spec = PredictorSpec::linear(10);
        let (v, _) = loglik(&spec, &DVector::zeros(11), &x, &y).unwrap();
        assert!((v + 40.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loglik_saturates_to_zero() {
        let spec = PredictorSpec::linear(1);
        let x = DMatrix::from_element(1, 1, 1.0);
        let (v, _) = loglik(&spec, &DVector::from_vec(vec![1e6, 0.0]), &x, &[1]).unwrap();
        assert!(v <= 0.0 && v > -1e-20);
    }

    #[test]
    fn loglik_rejects_bad_input() {
        let spec = PredictorSpec::linear(2);
        let x = DMatrix::zeros(2, 2);
        assert!(matches!(loglik(&spec, &DVector::zeros(3), &x, &[0, 2]), Err(Error::Domain(_))));
        assert!(loglik(&spec, &DVector::zeros(4), &x, &[0, 1]).is_err());
        assert!(loglik(&spec, &DVector::zeros(3), &x, &[0]).is_err());
    }

    fn check_loglik_gradient(spec: PredictorSpec, seed: u64) {
        let (x, y) = toy_data(seed, 30, spec.input_dim);
        let phi = rand_gauss(seed, spec.param_dim(), 0.5).mean;
        let (_, g) = loglik(&spec, &phi, &x, &y).unwrap();
        let h = 1e-5;
        for k in 0..spec.param_dim() {
            let mut a = phi.clone();
            let mut b = phi.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (loglik(&spec, &a, &x, &y).unwrap().0 - loglik(&spec, &b, &x, &y).unwrap().0) / (2.0 * h);
            assert!(rel_err(fd, g[k]) < 1e-6, "{spec:?} k={k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn loglik_gradient_matches_finite_differences() {
        for seed in 0..5 {
            check_loglik_gradient(PredictorSpec::linear(10), seed);
            check_loglik_gradient(PredictorSpec::mlp(3, 4), seed);
        }
    }

    #[test]
    fn hessian_matches_finite_differences_of_gradient() {
        let spec = PredictorSpec::linear(3);
        let (x, y) = toy_data(7, 25, 3);
        let phi = rand_gauss(7, 4, 0.5).mean;
        let hess = loglik_hessian_linear(&spec, &phi, &x).unwrap();
        let h = 1e-5;
        for k in 0..4 {
            let mut a = phi.clone();
            let mut b = phi.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (loglik(&spec, &a, &x, &y).unwrap().1 - loglik(&spec, &b, &x, &y).unwrap().1) / (2.0 * h);
            for j in 0..4 {
                assert!(rel_err(fd[j], hess[(j, k)]) < 1e-5);
            }
        }
        assert!(loglik_hessian_linear(&PredictorSpec::mlp(3, 2), &DVector::zeros(11), &x).is_err());
    }

    #[test]
    fn elbo_reduces_to_nll_for_degenerate_posterior() {
        let spec = PredictorSpec::linear(4);
        let (x, y) = toy_data(2, 50, 4);
        let mut q = rand_gauss(2, 5, 0.5);
        q.log_std.fill(-10.0);
        let prior = DiagGaussian::standard(5);
        let e = elbo_grad(&q, &prior, &x, &y, &spec, 20, 0.0, &mut stream(0, 0, Purpose::Theory)).unwrap();
        let (ll, _) = loglik(&spec, &q.mean, &x, &y).unwrap();
        assert!((e.value + ll / 50.0).abs() < 1e-4);
    }

    #[test]
    fn elbo_kl_term_vanishes_at_prior() {
        let spec = PredictorSpec::linear(4);
        let (x, y) = toy_data(2, 50, 4);
        let q = rand_gauss(5, 5, 0.5);
        let noise = draw_noise(&mut stream(0, 0, Purpose::Theory), 5, 4);
        let with = elbo_grad_with_noise(&q, &q, &x, &y, &spec, &noise, 3.0).unwrap();
        let without = elbo_grad_with_noise(&q, &q, &x, &y, &spec, &noise, 0.0).unwrap();
        assert_eq!(with.kl, 0.0);
        assert!((with.value - without.value).abs() < 1e-15);
        assert!((with.grad_mean - without.grad_mean).amax() < 1e-12);
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let spec = PredictorSpec::linear(4);
            let (x, y) = toy_data(seed, 40, 4);
            let q = rand_gauss(seed, 5, 0.7);
            let prior = rand_gauss(seed + 50, 5, 0.7);
            let noise = draw_noise(&mut stream(seed, 0, Purpose::InnerNoise), 5, 3);
            let w = 0.3;
            let e = elbo_grad_with_noise(&q, &prior, &x, &y, &spec, &noise, w).unwrap();
            let f = |q2: &DiagGaussian| elbo_grad_with_noise(q2, &prior, &x, &y, &spec, &noise, w).unwrap().value;
            let h = 1e-5;
            for k in 0..5 {
                let (mut a, mut b) = (q.clone(), q.clone());
                a.mean[k] += h;
                b.mean[k] -= h;
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                assert!(rel_err(fd, e.grad_mean[k]) < 1e-4, "mean k={k}");
                let (mut a, mut b) = (q.clone(), q.clone());
                a.log_std[k] += h;
                b.log_std[k] -= h;
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                assert!(rel_err(fd, e.grad_log_std[k]) < 1e-4, "log_std k={k}");
            }
        }
    }

    #[test]
    fn clamp_counter_tracks_activations() {
        let before = log_std_clamp_count();
        let mut q = DiagGaussian::standard(2);
        q.log_std[0] = -20.0;
        q.clamp_log_std();
        assert_eq!(q.log_std[0], LOG_STD_MIN);
        assert!(log_std_clamp_count() > before);
    }
}
