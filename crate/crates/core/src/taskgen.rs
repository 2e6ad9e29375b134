//! Synthetic task families from linear structural causal models.
//!
//! Every task shares the same ten endogenous features and parent set; tasks
//! differ through their effect vector `e_t = b + W z_t + η_t`, which is a
//! linear function of the task embedding `z_t` plus per-task noise. A
//! spurious, non-causal feature is attached to the label afterwards, with a
//! strength that decays as the target task moves away from the sources.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{self, Purpose};

/// Stream index offset for target tasks, keeping them disjoint from sources.
pub const TARGET_INDEX_BASE: u64 = 1 << 32;

/// Shift levels of the standard target family.
pub const DEFAULT_SHIFT_LEVELS: [f64; 5] = [0.1, 1.0, 2.0, 3.0, 4.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    /// Zero-based indices of the causal parents of the outcome.
    pub parents: Vec<usize>,
    pub gen_weight_sd: f64,
    pub bias_low: f64,
    pub bias_high: f64,
    pub eta_sd: f64,
    pub uy_sd: f64,
    pub alpha_source: f64,
    /// Spurious strength of a target at zero shift; decays linearly to 0 at `s_max`.
    pub alpha_target_max: f64,
    pub s_max: f64,
    pub label_quantile: f64,
    /// Shift direction; normalized on construction. `None` means `(1,..,1)/sqrt(d)`.
    pub delta: Option<Vec<f64>>,
    pub samples_per_task: usize,
    pub source_embed_sd: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            feature_dim: 10,
            embed_dim: 4,
            parents: vec![0, 1, 2, 3],
            gen_weight_sd: 0.5,
            bias_low: 0.5,
            bias_high: 1.0,
            eta_sd: 0.15,
            uy_sd: 0.6,
            alpha_source: 0.3,
            alpha_target_max: 0.5,
            s_max: 4.0,
            label_quantile: 0.7,
            delta: None,
            samples_per_task: 500,
            source_embed_sd: 0.8,
        }
    }
}

impl GeneratorConfig {
    /// The spurious feature is always the last column.
    pub fn spurious_feature(&self) -> usize {
        self.feature_dim - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 || self.embed_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 2 and embed_dim >= 1".into()));
        }
        if self.parents.is_empty() {
            return Err(Error::Config("parent set must be non-empty".into()));
        }
        for &j in &self.parents {
            if j >= self.spurious_feature() {
                return Err(Error::Config(format!(
                    "parent index {j} out of range or collides with the spurious feature"
                )));
            }
        }
        if !(self.label_quantile > 0.0 && self.label_quantile < 1.0) {
            return Err(Error::Config("label_quantile must lie in (0, 1)".into()));
        }
        if self.samples_per_task < 2 {
            return Err(Error::Config("samples_per_task must be >= 2".into()));
        }
        if !(self.s_max > 0.0) || self.eta_sd < 0.0 || !(self.uy_sd > 0.0) {
            return Err(Error::Config("s_max and uy_sd must be positive, eta_sd non-negative".into()));
        }
        if !(self.bias_low <= self.bias_high) {
            return Err(Error::Config("bias_low must not exceed bias_high".into()));
        }
        Ok(())
    }

    /// Rank of the threshold order statistic, `ceil(q * M)`.
    pub fn threshold_rank(&self) -> usize {
        // The epsilon keeps 0.7 * 500 from rounding up to 351.
        let k = (self.label_quantile * self.samples_per_task as f64 - 1e-9).ceil() as usize;
        k.clamp(1, self.samples_per_task)
    }
}

/// Frozen parameters of the generator for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub config: GeneratorConfig,
    pub seed: u64,
    /// `feature_dim x embed_dim`; non-parent rows are exactly zero.
    pub w_gen: DMatrix<f64>,
    /// Non-parent entries are exactly zero.
    pub b: DVector<f64>,
    /// Unit shift direction.
    pub delta: DVector<f64>,
}

impl GeneratorSpec {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let delta = match &config.delta {
            Some(v) => {
                check_dim(d, v.len())?;
                let v = DVector::from_column_slice(v);
                let n = v.norm();
                if !(n > 0.0) || !n.is_finite() {
                    return Err(Error::Config("delta must be a non-zero finite vector".into()));
                }
                v / n
            }
            None => DVector::from_element(d, 1.0 / (d as f64).sqrt()),
        };

        let mut rng = rng::stream(seed, 0, Purpose::GeneratorParams);
        let mut w_gen = DMatrix::zeros(config.feature_dim, d);
        let mut b = DVector::zeros(config.feature_dim);
        for j in 0..config.feature_dim {
            if config.parents.contains(&j) {
                for k in 0..d {
                    w_gen[(j, k)] = config.gen_weight_sd * rng::std_normal(&mut rng);
                }
                b[j] = rng.random_range(config.bias_low..=config.bias_high);
            }
        }
        Ok(GeneratorSpec { config, seed, w_gen, b, delta })
    }

    pub fn with_defaults(seed: u64) -> Self {
        Self::new(GeneratorConfig::default(), seed).expect("default generator config is valid")
    }

    /// Spurious-feature strength for a target at shift `s`.
    pub fn alpha_target(&self, s: f64) -> f64 {
        self.config.alpha_target_max * (1.0 - s / self.config.s_max)
    }
}

/// A point in the causal embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct TaskEmbedding(pub DVector<f64>);

impl TaskEmbedding {
    pub fn new(z: Vec<f64>) -> Self {
        TaskEmbedding(DVector::from_vec(z))
    }

    pub fn zeros(d: usize) -> Self {
        TaskEmbedding(DVector::zeros(d))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for TaskEmbedding {
    fn from(v: Vec<f64>) -> Self {
        TaskEmbedding::new(v)
    }
}

impl From<TaskEmbedding> for Vec<f64> {
    fn from(z: TaskEmbedding) -> Self {
        z.0.as_slice().to_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

/// Sampled data of one task together with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: String,
    /// Stream index used for every draw belonging to this task.
    pub index: u64,
    pub x: DMatrix<f64>,
    pub y: Vec<u8>,
    pub effect: DVector<f64>,
    pub embedding_true: TaskEmbedding,
    pub shift_s: f64,
    pub role: Role,
}

/// Owned rows of a task, e.g. a support or test subset.
#[derive(Clone, Debug, PartialEq)]
pub struct Rows {
    pub x: DMatrix<f64>,
    pub y: Vec<u8>,
}

impl Rows {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&v| v == 1).count()
    }

    pub fn rows(&self, idx: &[usize]) -> Rows {
        let x = self.x.select_rows(idx.iter());
        let y = idx.iter().map(|&i| self.y[i]).collect();
        Rows { x, y }
    }

    /// The same task restricted to `idx`, e.g. to embed a target from its support rows only.
    pub fn subset(&self, idx: &[usize]) -> TaskDataset {
        let r = self.rows(idx);
        TaskDataset { x: r.x, y: r.y, ..self.clone() }
    }

    pub fn all_rows(&self) -> Rows {
        Rows { x: self.x.clone(), y: self.y.clone() }
    }
}

/// Row partition of a task: 30% test, the remaining 70% halved into support and query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSplit {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub test: Vec<usize>,
}

impl DataSplit {
    pub fn standard(n: usize, seed: u64, task_index: u64) -> Self {
        Self::with_fractions(n, 0.7, 0.5, seed, task_index)
    }

    pub fn with_fractions(n: usize, train_frac: f64, support_frac: f64, seed: u64, task_index: u64) -> Self {
        let mut rng = rng::stream(seed, task_index, Purpose::DataSplit);
        let perm = rng::permutation(&mut rng, n);
        let n_train = ((n as f64) * train_frac).round() as usize;
        let n_support = ((n_train as f64) * support_frac).round() as usize;
        let mut support = perm[..n_support].to_vec();
        let mut query = perm[n_support..n_train].to_vec();
        let mut test = perm[n_train..].to_vec();
        support.sort_unstable();
        query.sort_unstable();
        test.sort_unstable();
        DataSplit { support, query, test }
    }

    /// Support and query together.
    pub fn train(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.support.iter().chain(&self.query).copied().collect();
        t.sort_unstable();
        t
    }
}

pub fn sample_source_embeddings(spec: &GeneratorSpec, n: usize, sd: f64) -> Result<Vec<TaskEmbedding>> {
    if n == 0 {
        return Err(Error::Config("number of source embeddings must be positive".into()));
    }
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::Config(format!("source embedding sd must be positive, got {sd}")));
    }
    let d = spec.config.embed_dim;
    Ok((0..n as u64)
        .map(|t| {
            let mut r = rng::stream(spec.seed, t, Purpose::SourceEmbedding);
            TaskEmbedding::new(rng::normal_vec(&mut r, d).into_iter().map(|v| sd * v).collect())
        })
        .collect())
}

/// `z = s * δ`.
pub fn make_target_embedding(spec: &GeneratorSpec, s: f64) -> Result<TaskEmbedding> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(Error::Domain(format!("shift magnitude must be >= 0, got {s}")));
    }
    Ok(TaskEmbedding(&spec.delta * s))
}

pub fn source_task_id(t: usize) -> String {
    format!("source_{t:02}")
}

pub fn target_task_id(k: usize) -> String {
    format!("target_{k}")
}

/// Draw one task. `index` is the source number or the target number within its role.
pub fn generate_task(spec: &GeneratorSpec, z: &TaskEmbedding, role: Role, index: usize, s: f64) -> Result<TaskDataset> {
    let cfg = &spec.config;
    check_dim(cfg.embed_dim, z.dim())?;
    if !z.is_finite() {
        return Err(Error::Domain("embedding has non-finite entries".into()));
    }
    let (stream_index, alpha, task_id, shift) = match role {
        Role::Source => (index as u64, cfg.alpha_source, source_task_id(index), 0.0),
        Role::Target => {
            if !(0.0..=cfg.s_max).contains(&s) {
                return Err(Error::Domain(format!("target shift {s} outside [0, {}]", cfg.s_max)));
            }
            (TARGET_INDEX_BASE + index as u64, spec.alpha_target(s), target_task_id(index), s)
        }
    };
    let m = cfg.samples_per_task;
    let p = cfg.feature_dim;

    let mut eff_rng = rng::stream(spec.seed, stream_index, Purpose::TaskEffects);
    let eta = DVector::from_vec(rng::normal_vec(&mut eff_rng, p)) * cfg.eta_sd;
    let mut effect = &spec.b + &spec.w_gen * z.vector() + eta;
    for j in 0..p {
        if !cfg.parents.contains(&j) {
            effect[j] = 0.0;
        }
    }

    let mut x_rng = rng::stream(spec.seed, stream_index, Purpose::TaskFeatures);
    // Row-major draw order so that the table does not depend on storage layout.
    let mut x = DMatrix::zeros(m, p);
    for i in 0..m {
        for j in 0..p {
            x[(i, j)] = rng::std_normal(&mut x_rng);
        }
    }

    let signal: Vec<f64> = (0..m)
        .map(|i| cfg.parents.iter().map(|&j| x[(i, j)] * effect[j]).sum())
        .collect();
    let k = cfg.threshold_rank();
    let mut attempt = 0u64;
    let y = loop {
        let mut u_rng = rng::stream_sub(spec.seed, stream_index, Purpose::OutcomeNoise, attempt);
        let yc: Vec<f64> = signal.iter().map(|s| s + cfg.uy_sd * rng::std_normal(&mut u_rng)).collect();
        let mut sorted = yc.clone();
        sorted.sort_by(f64::total_cmp);
        let tau = sorted[k - 1];
        let tied = sorted.iter().filter(|&&v| v == tau).count() > 1;
        if !tied {
            break yc.iter().map(|&v| u8::from(v > tau)).collect::<Vec<u8>>();
        }
        attempt += 1;
        log::warn!("{task_id}: tie at the label threshold, redrawing outcome noise (attempt {attempt})");
        if attempt > 16 {
            return Err(Error::Numerical(format!("{task_id}: persistent ties at the label threshold")));
        }
    };

    let mut sp_rng = rng::stream(spec.seed, stream_index, Purpose::SpuriousNoise);
    let js = cfg.spurious_feature();
    for i in 0..m {
        let sign = 2.0 * y[i] as f64 - 1.0;
        x[(i, js)] = alpha * sign + rng::std_normal(&mut sp_rng);
    }

    Ok(TaskDataset { task_id, index: stream_index, x, y, effect, embedding_true: z.clone(), shift_s: shift, role })
}

/// Source tasks plus one target per shift level, all fixed by the generator seed.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: GeneratorSpec,
    pub sources: Vec<TaskDataset>,
    pub targets: Vec<TaskDataset>,
}

impl World {
    pub fn source_embeddings(&self) -> Vec<TaskEmbedding> {
        self.sources.iter().map(|t| t.embedding_true.clone()).collect()
    }

    pub fn target_at(&self, s: f64) -> Option<&TaskDataset> {
        self.targets.iter().find(|t| (t.shift_s - s).abs() < 1e-12)
    }
}

pub fn generate_experiment_world(spec: &GeneratorSpec, n_source: usize, shift_levels: &[f64]) -> Result<World> {
    if shift_levels.is_empty() {
        return Err(Error::Config("shift_levels must be non-empty".into()));
    }
    let zs = sample_source_embeddings(spec, n_source, spec.config.source_embed_sd)?;
    let sources = zs
        .iter()
        .enumerate()
        .map(|(t, z)| generate_task(spec, z, Role::Source, t, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let targets = shift_levels
        .iter()
        .enumerate()
        .map(|(k, &s)| generate_task(spec, &make_target_embedding(spec, s)?, Role::Target, k, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(World { spec: spec.clone(), sources, targets })
}

// ---------------------------------------------------------------------------
// Serialization: {spec, sources:[{task_id, z, s, X, y, e_t}], targets:[...]}
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SpecRecord {
    config: GeneratorConfig,
    seed: u64,
    w_gen: Vec<Vec<f64>>,
    b: Vec<f64>,
    delta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    task_id: String,
    index: u64,
    role: Role,
    z: Vec<f64>,
    s: f64,
    #[serde(rename = "X")]
    x: Vec<Vec<f64>>,
    y: Vec<u8>,
    e_t: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WorldRecord {
    spec: SpecRecord,
    sources: Vec<TaskRecord>,
    targets: Vec<TaskRecord>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn rows_matrix(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    for r in rows {
        check_dim(ncols, r.len())?;
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl From<&TaskDataset> for TaskRecord {
    fn from(t: &TaskDataset) -> Self {
        TaskRecord {
            task_id: t.task_id.clone(),
            index: t.index,
            role: t.role,
            z: t.embedding_true.as_slice().to_vec(),
            s: t.shift_s,
            x: matrix_rows(&t.x),
            y: t.y.clone(),
            e_t: t.effect.as_slice().to_vec(),
        }
    }
}

impl TaskRecord {
    fn into_dataset(self, feature_dim: usize) -> Result<TaskDataset> {
        check_dim(self.x.len(), self.y.len())?;
        check_dim(feature_dim, self.e_t.len())?;
        if self.y.iter().any(|&v| v > 1) {
            return Err(Error::Domain(format!("{}: labels must be binary", self.task_id)));
        }
        Ok(TaskDataset {
            x: rows_matrix(&self.x, feature_dim)?,
            task_id: self.task_id,
            index: self.index,
            y: self.y,
            effect: DVector::from_vec(self.e_t),
            embedding_true: TaskEmbedding::new(self.z),
            shift_s: self.s,
            role: self.role,
        })
    }
}

impl Serialize for World {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        WorldRecord {
            spec: SpecRecord {
                config: self.spec.config.clone(),
                seed: self.spec.seed,
                w_gen: matrix_rows(&self.spec.w_gen),
                b: self.spec.b.as_slice().to_vec(),
                delta: self.spec.delta.as_slice().to_vec(),
            },
            sources: self.sources.iter().map(TaskRecord::from).collect(),
            targets: self.targets.iter().map(TaskRecord::from).collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for World {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rec = WorldRecord::deserialize(deserializer)?;
        let cfg = rec.spec.config;
        let p = cfg.feature_dim;
        let convert = |r: Vec<TaskRecord>| -> Result<Vec<TaskDataset>> { r.into_iter().map(|t| t.into_dataset(p)).collect() };
        let spec = GeneratorSpec {
            w_gen: rows_matrix(&rec.spec.w_gen, cfg.embed_dim).map_err(D::Error::custom)?,
            b: DVector::from_vec(rec.spec.b),
            delta: DVector::from_vec(rec.spec.delta),
            seed: rec.spec.seed,
            config: cfg,
        };
        Ok(World {
            spec,
            sources: convert(rec.sources).map_err(D::Error::custom)?,
            targets: convert(rec.targets).map_err(D::Error::custom)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn spurious_corr(t: &TaskDataset) -> f64 {
        let col: Vec<f64> = t.x.column(9).iter().copied().collect();
        let sgn: Vec<f64> = t.y.iter().map(|&v| 2.0 * v as f64 - 1.0).collect();
        pearson(&col, &sgn)
    }

    #[test]
    fn spec_invariants() {
        let spec = GeneratorSpec::with_defaults(3);
        for j in 4..10 {
            assert!(spec.w_gen.row(j).iter().all(|&v| v == 0.0));
            assert_eq!(spec.b[j], 0.0);
        }
        for j in 0..4 {
            assert!((0.5..=1.0).contains(&spec.b[j]));
        }
        assert!((spec.delta.norm() - 1.0).abs() < 1e-12);
        assert_eq!(spec.config.threshold_rank(), 350);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = GeneratorConfig { label_quantile: 1.0, ..Default::default() };
        assert!(matches!(GeneratorSpec::new(cfg, 0), Err(Error::Config(_))));
        let cfg = GeneratorConfig { parents: vec![9], ..Default::default() };
        assert!(GeneratorSpec::new(cfg, 0).is_err());
        let cfg = GeneratorConfig { delta: Some(vec![0.0; 4]), ..Default::default() };
        assert!(GeneratorSpec::new(cfg, 0).is_err());
    }

    #[test]
    fn source_embeddings_are_reproducible_and_scaled() {
        let spec = GeneratorSpec::with_defaults(11);
        let a = sample_source_embeddings(&spec, 20, 0.8).unwrap();
        let b = sample_source_embeddings(&spec, 20, 0.8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert!(a.iter().all(|z| z.dim() == 4));
        // Prefix stability: more tasks never perturb earlier ones.
        let c = sample_source_embeddings(&spec, 25, 0.8).unwrap();
        assert_eq!(&c[..20], &a[..]);
        let tiny = sample_source_embeddings(&spec, 5, 1e-300).unwrap();
        assert!(tiny.iter().all(|z| z.norm() < 1e-290));
        assert!(sample_source_embeddings(&spec, 0, 0.8).is_err());
        assert!(sample_source_embeddings(&spec, 3, 0.0).is_err());
    }

    #[test]
    fn source_embedding_mean_tends_to_zero() {
        let spec = GeneratorSpec::with_defaults(5);
        let zs = sample_source_embeddings(&spec, 4000, 0.8).unwrap();
        let mut mean = DVector::zeros(4);
        for z in &zs {
            mean += z.vector();
        }
        mean /= zs.len() as f64;
        // 4 sigma of the sample mean.
        assert!(mean.amax() < 4.0 * 0.8 / (4000f64).sqrt(), "{mean}");
    }

    #[test]
    fn target_embedding_geometry() {
        let spec = GeneratorSpec::with_defaults(0);
        assert_eq!(make_target_embedding(&spec, 0.0).unwrap().norm(), 0.0);
        let z = make_target_embedding(&spec, 4.0).unwrap();
        for v in z.as_slice() {
            assert!((v - 2.0).abs() < 1e-12);
        }
        assert!((z.norm() - 4.0).abs() < 1e-12);
        assert!(matches!(make_target_embedding(&spec, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn labels_are_exactly_thirty_percent_positive() {
        for seed in 0..5 {
            let spec = GeneratorSpec::with_defaults(seed);
            let world = generate_experiment_world(&spec, 20, &DEFAULT_SHIFT_LEVELS).unwrap();
            for t in world.sources.iter().chain(&world.targets) {
                assert_eq!(t.positives(), 150, "{}", t.task_id);
                assert!(t.effect.iter().skip(4).all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn spurious_strength_follows_shift() {
        let spec = GeneratorSpec::with_defaults(0);
        assert_eq!(spec.alpha_target(4.0), 0.0);
        assert_eq!(spec.alpha_target(0.0), 0.5);
        let mut src = 0.0;
        let mut tgt = 0.0;
        let seeds = 30;
        for seed in 0..seeds {
            let spec = GeneratorSpec::with_defaults(seed);
            let world = generate_experiment_world(&spec, 4, &[4.0]).unwrap();
            src += world.sources.iter().map(spurious_corr).sum::<f64>() / 4.0;
            tgt += spurious_corr(&world.targets[0]);
        }
        src /= seeds as f64;
        tgt /= seeds as f64;
        assert!((0.20..=0.40).contains(&src), "source corr {src}");
        assert!(tgt.abs() <= 0.05, "target corr {tgt}");
    }

    #[test]
    fn world_is_deterministic() {
        let spec = GeneratorSpec::with_defaults(9);
        let a = generate_experiment_world(&spec, 20, &DEFAULT_SHIFT_LEVELS).unwrap();
        let b = generate_experiment_world(&spec, 20, &DEFAULT_SHIFT_LEVELS).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.sources.len(), a.targets.len()), (20, 5));
        let single = generate_experiment_world(&spec, 20, &[0.0]).unwrap();
        assert_eq!(single.targets.len(), 1);
        assert_eq!(single.targets[0].embedding_true.norm(), 0.0);
        assert!(generate_experiment_world(&spec, 20, &[]).is_err());
    }

    #[test]
    fn rejects_wrong_dimension_and_out_of_range_shift() {
        let spec = GeneratorSpec::with_defaults(0);
        let z = TaskEmbedding::zeros(3);
        assert!(matches!(generate_task(&spec, &z, Role::Source, 0, 0.0), Err(Error::DimensionMismatch { .. })));
        let z = TaskEmbedding::zeros(4);
        assert!(generate_task(&spec, &z, Role::Target, 0, 4.5).is_err());
    }

    #[test]
    fn world_json_round_trip() {
        let mut cfg = GeneratorConfig::default();
        cfg.samples_per_task = 20;
        let spec = GeneratorSpec::new(cfg, 2).unwrap();
        let world = generate_experiment_world(&spec, 3, &[1.0]).unwrap();
        let text = crate::json::to_string(&world).unwrap();
        let back: World = serde_json::from_str(&text).unwrap();
        assert_eq!(world, back);
        assert!(text.contains("\"X\""));
    }

    #[test]
    fn split_fractions() {
        let s = DataSplit::standard(500, 1, 0);
        assert_eq!((s.support.len(), s.query.len(), s.test.len()), (175, 175, 150));
        let mut all: Vec<usize> = s.train().into_iter().chain(s.test.iter().copied()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..500).collect::<Vec<_>>());
    }
}
