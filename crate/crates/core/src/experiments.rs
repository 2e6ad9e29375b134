//! Experiment configuration and the runners behind the command-line tool.
//!
//! Every runner is a pure function of an [`ExperimentConfig`] and a seed list.
//! Work is split into one cell per seed; a seed's meta-training is shared by
//! all of its shift levels. Cells run on a private thread pool and their rows
//! are merged by a deterministic sort, so `jobs` never changes the output.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bayes::{self, Arch, DiagGaussian, PredictorSpec};
use crate::embedding::{self, CorrelationProjector, EmbeddingSet, Provenance};
use crate::error::{Error, Result};
use crate::eval::{self, EpsDecomposition, LipschitzCheck, NtMitigationReport, NtPair};
use crate::expert::{self, Acquisition, ExpertSession, SimulatedExpert};
use crate::json;
use crate::metalearn::{self, BnnParams, MamlParams, MetaState, Prediction, Schedule, SourceTask};
use crate::rng::{self, Purpose};
use crate::taskgen::{self, DataSplit, GeneratorConfig, GeneratorSpec, TaskDataset, TaskEmbedding, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    CausalOracle,
    CausalExpert,
    CorrEmbed,
    HbmGlobal,
    BnnNt,
    Fomaml,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::CausalOracle, Method::CausalExpert, Method::CorrEmbed, Method::HbmGlobal, Method::BnnNt, Method::Fomaml];

    pub fn name(self) -> &'static str {
        match self {
            Method::CausalOracle => "causal_oracle",
            Method::CausalExpert => "causal_expert",
            Method::CorrEmbed => "corr_embed",
            Method::HbmGlobal => "hbm_global",
            Method::BnnNt => "bnn_nt",
            Method::Fomaml => "fomaml",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// The expert-inferred embedding setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Exp2Settings {
    /// Sd of the additive noise on source embeddings.
    pub sigma_c: f64,
    pub tau_expert: f64,
    pub budget: usize,
    pub acquisition: Acquisition,
    /// Budgets at which the elicited embedding is also evaluated.
    pub budget_sweep: Vec<usize>,
}

impl Default for Exp2Settings {
    fn default() -> Self {
        Exp2Settings { sigma_c: 0.5, tau_expert: 2.0, budget: 20, acquisition: Acquisition::Bald, budget_sweep: vec![0, 5, 10, 15, 20] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    /// Directional corruption levels applied to every task embedding.
    pub sigma_c_grid: Vec<f64>,
    pub tau_grid: Vec<f64>,
    /// Query budget of the elicitation ablations.
    pub budget: usize,
    pub acquisitions: Vec<Acquisition>,
    pub acq_shift: f64,
    pub acq_tau: f64,
    /// Seeds of the acquisition ablation; `None` means `0..20`.
    pub acq_seeds: Option<Vec<u64>>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            sigma_c_grid: vec![0.0, 0.5, 0.8],
            tau_grid: vec![0.5, 1.0, 2.0],
            budget: 20,
            acquisitions: vec![Acquisition::Bald, Acquisition::Random],
            acq_shift: 4.0,
            acq_tau: 1.0,
            acq_seeds: None,
        }
    }
}

impl AblationSettings {
    pub fn acq_seeds(&self) -> Vec<u64> {
        self.acq_seeds.clone().unwrap_or_else(|| (0..20).collect())
    }
}

/// One JSON document drives every runner. Missing keys take defaults, so a
/// config file only lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: GeneratorConfig,
    pub n_sources: usize,
    pub shifts: Vec<f64>,
    /// Hidden width of a one-layer MLP predictor; `None` is logistic regression.
    pub mlp_hidden: Option<usize>,
    pub hyper: metalearn::HyperParams,
    pub schedule: Schedule,
    pub bnn: BnnParams,
    pub maml: MamlParams,
    pub exp2: Exp2Settings,
    pub ablation: AblationSettings,
    pub seeds: Vec<u64>,
    /// `None` picks the runner's own method set.
    pub methods: Option<Vec<Method>>,
    pub record_timing: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: GeneratorConfig::default(),
            n_sources: 20,
            shifts: taskgen::DEFAULT_SHIFT_LEVELS.to_vec(),
            mlp_hidden: None,
            hyper: metalearn::HyperParams::synthetic(),
            schedule: Schedule::synthetic(),
            bnn: BnnParams::default(),
            maml: MamlParams::default(),
            exp2: Exp2Settings::default(),
            ablation: AblationSettings::default(),
            seeds: (0..10).collect(),
            methods: None,
            record_timing: false,
            out_dir: PathBuf::from("results"),
        }
    }
}

pub const EXP1_METHODS: [Method; 5] = [Method::CausalOracle, Method::CorrEmbed, Method::HbmGlobal, Method::BnnNt, Method::Fomaml];
pub const EXP2_METHODS: [Method; 4] = [Method::CausalOracle, Method::CausalExpert, Method::HbmGlobal, Method::BnnNt];

impl ExperimentConfig {
    /// Defaults, then `base` merged key by key, then dotted-path overrides
    /// such as `("hyper.inner_lr", "0.001")`. Override values are parsed as
    /// JSON and fall back to plain strings.
    pub fn from_parts(base: Option<&Value>, overrides: &[(String, String)]) -> Result<Self> {
        let mut v = serde_json::to_value(ExperimentConfig::default())?;
        if let Some(b) = base {
            if !b.is_object() {
                return Err(Error::Config("config file must hold a JSON object".into()));
            }
            merge(&mut v, b);
        }
        for (path, raw) in overrides {
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut v, path, parsed)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let base: Value = serde_json::from_slice(&std::fs::read(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_parts(Some(&base), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.hyper.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if self.methods.as_ref().is_some_and(|m| m.is_empty()) {
            return Err(Error::Config("methods must be non-empty".into()));
        }
        if self.shifts.is_empty() || self.shifts.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("shifts must be a non-empty list of finite values >= 0".into()));
        }
        if self.n_sources < 2 {
            return Err(Error::Config("n_sources must be >= 2".into()));
        }
        let grids = [("exp2.sigma_c", vec![self.exp2.sigma_c]), ("ablation.sigma_c_grid", self.ablation.sigma_c_grid.clone())];
        for (name, g) in grids {
            if g.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                return Err(Error::Config(format!("{name} values must be finite and >= 0")));
            }
        }
        let taus = self.ablation.tau_grid.iter().chain([&self.exp2.tau_expert, &self.ablation.acq_tau]);
        if taus.into_iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Config("expert temperatures must be positive".into()));
        }
        Ok(())
    }

    pub fn predictor(&self) -> PredictorSpec {
        match self.mlp_hidden {
            Some(h) => PredictorSpec { arch: Arch::Mlp { hidden: h }, input_dim: self.world.feature_dim },
            None => PredictorSpec::linear(self.world.feature_dim),
        }
    }

    pub fn methods_or(&self, default: &[Method]) -> Vec<Method> {
        let mut m = self.methods.clone().unwrap_or_else(|| default.to_vec());
        m.sort();
        m.dedup();
        m
    }

    /// Content hash of everything that affects results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.record_timing = false;
        json::content_hash(&json::to_vec(&c).expect("config serializes"))
    }
}

fn merge(dst: &mut Value, src: &Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        d.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (d, s) => *d = s.clone(),
    }
}

fn set_path(v: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = v;
    let parts: Vec<&str> = path.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| Error::Config(format!("'{path}': '{part}' is not inside an object")))?;
        if k + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    Err(Error::Config("empty override path".into()))
}

/// One line of a results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub seed: u64,
    pub method: Method,
    pub shift_s: f64,
    pub sigma_c: Option<f64>,
    pub tau_expert: Option<f64>,
    pub acquisition: Option<Acquisition>,
    pub budget: Option<usize>,
    pub auroc: f64,
    pub logloss: f64,
    pub nt: f64,
    pub eps_ood: Option<f64>,
    pub eps_causal: Option<f64>,
    pub eps_expert: Option<f64>,
    pub runtime_ms: Option<u64>,
    pub config_hash: String,
    pub world_hash: String,
}

pub const RESULT_HEADER: &str = "seed,method,shift_s,sigma_c,tau_expert,acquisition,budget,auroc,logloss,nt,eps_ood,eps_causal,eps_expert,runtime_ms,config_hash,world_hash";

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

fn acq_name(a: Acquisition) -> &'static str {
    match a {
        Acquisition::Bald => "bald",
        Acquisition::Random => "random",
    }
}

impl ResultRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.method.name(),
            self.shift_s,
            opt(&self.sigma_c),
            opt(&self.tau_expert),
            self.acquisition.map(acq_name).unwrap_or_default(),
            opt(&self.budget),
            self.auroc,
            self.logloss,
            self.nt,
            opt(&self.eps_ood),
            opt(&self.eps_causal),
            opt(&self.eps_expert),
            opt(&self.runtime_ms),
            self.config_hash,
            self.world_hash
        )
    }

    fn sort_key(&self) -> (u64, Method, [f64; 3], u8, usize) {
        let f = |v: Option<f64>| v.unwrap_or(f64::NEG_INFINITY);
        let a = self.acquisition.map_or(0, |a| 1 + a as u8);
        (self.seed, self.method, [self.shift_s, f(self.sigma_c), f(self.tau_expert)], a, self.budget.unwrap_or(0))
    }
}

fn cmp_rows(a: &ResultRow, b: &ResultRow) -> Ordering {
    let (ka, kb) = (a.sort_key(), b.sort_key());
    ka.0.cmp(&kb.0)
        .then(ka.1.cmp(&kb.1))
        .then_with(|| ka.2.iter().zip(&kb.2).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal))
        .then(ka.3.cmp(&kb.3))
        .then(ka.4.cmp(&kb.4))
}

pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Posterior-mean RMSE after each answer of one elicitation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub seed: u64,
    pub shift_s: f64,
    pub tau_expert: f64,
    pub acquisition: Acquisition,
    pub query: usize,
    pub rmse: f64,
    pub config_hash: String,
    pub world_hash: String,
}

pub const TRACE_HEADER: &str = "seed,shift_s,tau_expert,acquisition,query,rmse,config_hash,world_hash";

pub fn traces_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.seed,
            r.shift_s,
            r.tau_expert,
            acq_name(r.acquisition),
            r.query,
            r.rmse,
            r.config_hash,
            r.world_hash
        );
    }
    out
}

fn cmp_traces(a: &TraceRow, b: &TraceRow) -> Ordering {
    a.seed
        .cmp(&b.seed)
        .then(a.shift_s.total_cmp(&b.shift_s))
        .then(a.tau_expert.total_cmp(&b.tau_expert))
        .then((a.acquisition as u8).cmp(&(b.acquisition as u8)))
        .then(a.query.cmp(&b.query))
}

/// Runs `f` for every seed on `jobs` threads and concatenates the results in
/// seed order.
fn per_seed<T: Send>(seeds: &[u64], jobs: usize, f: impl Fn(u64) -> Result<Vec<T>> + Sync) -> Result<Vec<T>> {
    let parts: Vec<Vec<T>> = if jobs <= 1 {
        seeds.iter().map(|&s| f(s)).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| seeds.par_iter().map(|&s| f(s)).collect::<Result<_>>())?
    };
    Ok(parts.into_iter().flatten().collect())
}

/// A stream-derived seed for an independent sub-computation.
fn derive_seed(seed: u64, index: u64, purpose: Purpose) -> u64 {
    rng::stream(seed, index, purpose).next_u64()
}

/// A seed's world plus everything derived from it that several methods share.
pub struct SeedWorld {
    pub seed: u64,
    pub world: World,
    pub source_splits: Vec<DataSplit>,
    pub target_splits: Vec<DataSplit>,
    pub world_hash: String,
}

impl SeedWorld {
    pub fn build(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let spec = GeneratorSpec::new(cfg.world.clone(), seed)?;
        let world = taskgen::generate_experiment_world(&spec, cfg.n_sources, &cfg.shifts)?;
        Self::from_world(world)
    }

    /// Wraps an existing world, e.g. one read from disk.
    pub fn from_world(world: World) -> Result<Self> {
        let seed = world.spec.seed;
        let split = |t: &TaskDataset| DataSplit::standard(t.len(), seed, t.index);
        let source_splits = world.sources.iter().map(split).collect();
        let target_splits = world.targets.iter().map(split).collect();
        let world_hash = json::content_hash(&json::to_vec(&world)?);
        Ok(SeedWorld { seed, world, source_splits, target_splits, world_hash })
    }

    pub fn oracle_sources(&self) -> Vec<TaskEmbedding> {
        self.world.source_embeddings()
    }

    /// Meta-trains on the sources with the given embeddings.
    pub fn train(&self, cfg: &ExperimentConfig, zs: &[TaskEmbedding], train_w: bool) -> Result<MetaState> {
        let sources: Vec<SourceTask> = self
            .world
            .sources
            .iter()
            .zip(&self.source_splits)
            .zip(zs)
            .map(|((data, split), z)| SourceTask { data, z, split })
            .collect();
        let state0 = MetaState::new(cfg.predictor(), cfg.hyper.clone(), cfg.world.embed_dim, self.seed)?;
        let out = metalearn::meta_train(state0, &sources, &Schedule { train_w, ..cfg.schedule.clone() })?;
        log::debug!("seed {} train_w {}: best validation AUROC {:.4} at step {}", self.seed, train_w, out.best_val_auroc, out.state.step_count);
        Ok(out.state)
    }

    pub fn bnn(&self, cfg: &ExperimentConfig) -> Result<Vec<Prediction>> {
        self.world
            .targets
            .iter()
            .zip(&self.target_splits)
            .map(|(t, sp)| metalearn::train_bnn_baseline(&cfg.predictor(), t, sp, &cfg.bnn, self.seed))
            .collect()
    }
}

fn mean_embedding(zs: &[TaskEmbedding]) -> TaskEmbedding {
    let mut m = DVector::zeros(zs[0].dim());
    for z in zs {
        m += z.vector();
    }
    TaskEmbedding(m / zs.len() as f64)
}

struct RowCtx<'a> {
    cfg_hash: &'a str,
    sw: &'a SeedWorld,
    timing: bool,
}

impl RowCtx<'_> {
    #[allow(clippy::too_many_arguments)]
    fn row(&self, method: Method, k: usize, pred: &Prediction, bnn: &Prediction, eps: Option<EpsDecomposition>, started: Instant) -> Result<ResultRow> {
        let logloss = pred.log_loss()?;
        Ok(ResultRow {
            seed: self.sw.seed,
            method,
            shift_s: self.sw.world.targets[k].shift_s,
            sigma_c: None,
            tau_expert: None,
            acquisition: None,
            budget: None,
            auroc: pred.auroc,
            logloss,
            nt: eval::negative_transfer(&pred.scores, &bnn.scores, &pred.labels)?,
            eps_ood: eps.map(|e| e.eps_ood),
            eps_causal: eps.map(|e| e.eps_causal),
            eps_expert: eps.map(|e| e.eps_expert),
            runtime_ms: self.timing.then(|| started.elapsed().as_millis() as u64),
            config_hash: self.cfg_hash.to_string(),
            world_hash: self.sw.world_hash.clone(),
        })
    }
}

/// Elicits each target's embedding with a simulated expert and scores the
/// model trained on additively corrupted source embeddings at every budget
/// in the sweep.
fn expert_rows(cfg: &ExperimentConfig, sw: &SeedWorld, ctx: &RowCtx, bnn: &[Prediction]) -> Result<Vec<ResultRow>> {
    let t0 = Instant::now();
    let e2 = &cfg.exp2;
    let seed = sw.seed;
    let noisy: Vec<TaskEmbedding> = sw
        .world
        .sources
        .iter()
        .map(|t| embedding::add_noise(&t.embedding_true, e2.sigma_c, &mut rng::stream(seed, t.index, Purpose::Corruption)))
        .collect();
    let state = sw.train(cfg, &noisy, true)?;
    let noisy_set = EmbeddingSet::from_tasks(&sw.world.sources, noisy.clone(), Provenance::Noisy { sd: e2.sigma_c })?;
    let true_set = EmbeddingSet::oracle(&sw.world.sources)?;
    let z_bar = mean_embedding(&noisy);
    let mut budgets: Vec<usize> = e2.budget_sweep.iter().copied().chain([e2.budget]).collect();
    budgets.sort_unstable();
    budgets.dedup();
    let b_max = *budgets.last().expect("budget list is non-empty");
    let train_ms = t0.elapsed();
    let mut rows = Vec::new();
    for (k, t) in sw.world.targets.iter().enumerate() {
        let started = Instant::now() - train_ms;
        let mut session = ExpertSession::new(noisy_set.clone(), b_max, e2.acquisition, derive_seed(seed, t.index, Purpose::SviNoise))?;
        let sim = SimulatedExpert {
            true_sources: true_set.clone(),
            z_true: t.embedding_true.clone(),
            tau_expert: e2.tau_expert,
            seed: derive_seed(seed, t.index, Purpose::ExpertAnswer),
        };
        let run = expert::run_loop(&mut session, &sim)?;
        let z_tilde = embedding::add_noise(&t.embedding_true, e2.sigma_c, &mut rng::stream(seed, t.index, Purpose::Corruption));
        for &b in &budgets {
            let z_hat = &run.mean_trace[b];
            let pred = metalearn::adapt_and_predict(&state, z_hat, t, &sw.target_splits[k])?;
            let eps = eval::eps_decomposition(&t.embedding_true, &z_tilde, z_hat, &z_bar, &state.w_emb, state.hyper.prior_sd)?;
            let mut row = ctx.row(Method::CausalExpert, k, &pred, &bnn[k], Some(eps), started)?;
            row.sigma_c = Some(e2.sigma_c);
            row.tau_expert = Some(e2.tau_expert);
            row.acquisition = Some(e2.acquisition);
            row.budget = Some(b);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// All rows of one seed for the requested methods.
fn seed_rows(cfg: &ExperimentConfig, cfg_hash: &str, seed: u64, methods: &[Method]) -> Result<Vec<ResultRow>> {
    let sw = SeedWorld::build(cfg, seed)?;
    let ctx = RowCtx { cfg_hash, sw: &sw, timing: cfg.record_timing };
    let t_bnn = Instant::now();
    let bnn = sw.bnn(cfg)?;
    let bnn_ms = t_bnn.elapsed() / bnn.len().max(1) as u32;
    let oracle = sw.oracle_sources();
    let z_bar = mean_embedding(&oracle);
    let d = cfg.world.embed_dim;
    let mut rows = Vec::new();
    for &m in methods {
        let t0 = Instant::now();
        match m {
            Method::CausalOracle | Method::HbmGlobal => {
                let causal = m == Method::CausalOracle;
                let state = sw.train(cfg, &oracle, causal)?;
                let train_ms = t0.elapsed();
                for (k, t) in sw.world.targets.iter().enumerate() {
                    let started = Instant::now() - train_ms;
                    let z = if causal { t.embedding_true.clone() } else { TaskEmbedding::zeros(d) };
                    let pred = metalearn::adapt_and_predict(&state, &z, t, &sw.target_splits[k])?;
                    let eps = causal
                        .then(|| eval::eps_decomposition(&t.embedding_true, &z, &z, &z_bar, &state.w_emb, state.hyper.prior_sd))
                        .transpose()?;
                    rows.push(ctx.row(m, k, &pred, &bnn[k], eps, started)?);
                }
            }
            Method::CorrEmbed => {
                let train_rows: Vec<TaskDataset> =
                    sw.world.sources.iter().zip(&sw.source_splits).map(|(t, s)| t.subset(&s.train())).collect();
                let proj = CorrelationProjector::fit(&train_rows, d)?;
                let zs = train_rows.iter().map(|t| proj.embed(t)).collect::<Result<Vec<_>>>()?;
                let state = sw.train(cfg, &zs, true)?;
                let train_ms = t0.elapsed();
                for (k, t) in sw.world.targets.iter().enumerate() {
                    let started = Instant::now() - train_ms;
                    let z = proj.embed(&t.subset(&sw.target_splits[k].support))?;
                    let pred = metalearn::adapt_and_predict(&state, &z, t, &sw.target_splits[k])?;
                    rows.push(ctx.row(m, k, &pred, &bnn[k], None, started)?);
                }
            }
            Method::BnnNt => {
                for (k, pred) in bnn.iter().enumerate() {
                    rows.push(ctx.row(m, k, pred, pred, None, Instant::now() - bnn_ms)?);
                }
            }
            Method::Fomaml => {
                let sources: Vec<SourceTask> = sw
                    .world
                    .sources
                    .iter()
                    .zip(&sw.source_splits)
                    .zip(&oracle)
                    .map(|((data, split), z)| SourceTask { data, z, split })
                    .collect();
                let init = metalearn::fomaml_meta_train(&cfg.predictor(), &sources, &cfg.maml, seed)?;
                let train_ms = t0.elapsed();
                for (k, t) in sw.world.targets.iter().enumerate() {
                    let started = Instant::now() - train_ms;
                    let pred = metalearn::fomaml_adapt_predict(&cfg.predictor(), &init, t, &sw.target_splits[k], &cfg.maml)?;
                    rows.push(ctx.row(m, k, &pred, &bnn[k], None, started)?);
                }
            }
            Method::CausalExpert => rows.extend(expert_rows(cfg, &sw, &ctx, &bnn)?),
        }
    }
    Ok(rows)
}

fn run_methods(cfg: &ExperimentConfig, methods: &[Method], jobs: usize) -> Result<Vec<ResultRow>> {
    let h = cfg.hash();
    let mut rows = per_seed(&cfg.seeds, jobs, |seed| seed_rows(cfg, &h, seed, methods))?;
    rows.sort_by(cmp_rows);
    Ok(rows)
}

/// Shift sweep with oracle, correlation, and no embeddings.
pub fn run_exp1(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<ResultRow>> {
    let methods = cfg.methods_or(&EXP1_METHODS);
    for required in [Method::CausalOracle, Method::CorrEmbed, Method::HbmGlobal, Method::BnnNt] {
        if !methods.contains(&required) {
            return Err(Error::Config(format!("exp1 needs method {}", required.name())));
        }
    }
    run_methods(cfg, &methods, jobs)
}

/// Shift sweep with embeddings elicited from a simulated expert, including
/// the budget sweep.
pub fn run_exp2(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<ResultRow>> {
    let methods = cfg.methods_or(&EXP2_METHODS);
    if !methods.contains(&Method::CausalExpert) {
        return Err(Error::Config("exp2 needs method causal_expert".into()));
    }
    run_methods(cfg, &methods, jobs)
}

/// Causal-prior rows with every task embedding, sources and targets alike,
/// rotated by the norm-preserving corruption at each `σ_c` in the grid.
pub fn run_noise_ablation(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<ResultRow>> {
    let h = cfg.hash();
    let grid = cfg.ablation.sigma_c_grid.clone();
    let mut rows = per_seed(&cfg.seeds, jobs, |seed| {
        let sw = SeedWorld::build(cfg, seed)?;
        let ctx = RowCtx { cfg_hash: &h, sw: &sw, timing: cfg.record_timing };
        let bnn = sw.bnn(cfg)?;
        let mut rows = Vec::new();
        for &sc in &grid {
            let t0 = Instant::now();
            let corrupt = |z: &TaskEmbedding, index: u64| -> Result<TaskEmbedding> {
                if sc == 0.0 {
                    return Ok(z.clone());
                }
                embedding::corrupt(z, sc, &mut rng::stream_sub(seed, index, Purpose::Corruption, 1))
            };
            let zs = sw.world.sources.iter().map(|t| corrupt(&t.embedding_true, t.index)).collect::<Result<Vec<_>>>()?;
            let state = sw.train(cfg, &zs, true)?;
            let z_bar = mean_embedding(&zs);
            let train_ms = t0.elapsed();
            for (k, t) in sw.world.targets.iter().enumerate() {
                let started = Instant::now() - train_ms;
                let z = corrupt(&t.embedding_true, t.index)?;
                let pred = metalearn::adapt_and_predict(&state, &z, t, &sw.target_splits[k])?;
                let eps = eval::eps_decomposition(&t.embedding_true, &z, &z, &z_bar, &state.w_emb, state.hyper.prior_sd)?;
                let mut row = ctx.row(Method::CausalOracle, k, &pred, &bnn[k], Some(eps), started)?;
                row.sigma_c = Some(sc);
                rows.push(row);
            }
        }
        Ok(rows)
    })?;
    rows.sort_by(cmp_rows);
    Ok(rows)
}

fn elicitation_traces(
    cfg: &ExperimentConfig,
    cfg_hash: &str,
    seed: u64,
    settings: &[(f64, Acquisition)],
    shift: Option<f64>,
) -> Result<Vec<TraceRow>> {
    let sw = SeedWorld::build(cfg, seed)?;
    let sources = EmbeddingSet::oracle(&sw.world.sources)?;
    let mut rows = Vec::new();
    for t in sw.world.targets.iter().filter(|t| shift.is_none_or(|s| t.shift_s == s)) {
        for &(tau, acq) in settings {
            let mut session = ExpertSession::new(sources.clone(), cfg.ablation.budget, acq, derive_seed(seed, t.index, Purpose::SviNoise))?;
            let sim = SimulatedExpert {
                true_sources: sources.clone(),
                z_true: t.embedding_true.clone(),
                tau_expert: tau,
                seed: derive_seed(seed, t.index, Purpose::ExpertAnswer),
            };
            let run = expert::run_loop(&mut session, &sim)?;
            for (b, &rmse) in run.rmse_trace.iter().enumerate() {
                rows.push(TraceRow {
                    seed,
                    shift_s: t.shift_s,
                    tau_expert: tau,
                    acquisition: acq,
                    query: b,
                    rmse,
                    config_hash: cfg_hash.to_string(),
                    world_hash: sw.world_hash.clone(),
                });
            }
        }
    }
    Ok(rows)
}

/// Elicitation RMSE traces over the expert-temperature grid, every target,
/// BALD queries, uncorrupted sources.
pub fn run_expert_ablation(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<TraceRow>> {
    let h = cfg.hash();
    let settings: Vec<(f64, Acquisition)> = cfg.ablation.tau_grid.iter().map(|&t| (t, Acquisition::Bald)).collect();
    let mut rows = per_seed(&cfg.seeds, jobs, |seed| elicitation_traces(cfg, &h, seed, &settings, None))?;
    rows.sort_by(cmp_traces);
    Ok(rows)
}

/// Elicitation RMSE traces per acquisition rule at one shift level.
pub fn run_acquisition_ablation(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<TraceRow>> {
    let h = cfg.hash();
    let a = &cfg.ablation;
    if !cfg.shifts.contains(&a.acq_shift) {
        return Err(Error::Config(format!("ablation.acq_shift {} is not among the shift levels", a.acq_shift)));
    }
    let settings: Vec<(f64, Acquisition)> = a.acquisitions.iter().map(|&q| (a.acq_tau, q)).collect();
    let mut rows = per_seed(&a.acq_seeds(), jobs, |seed| elicitation_traces(cfg, &h, seed, &settings, Some(a.acq_shift)))?;
    rows.sort_by(cmp_traces);
    Ok(rows)
}

/// Seed-averaged final RMSE per `(tau, acquisition)`.
pub fn final_rmse(rows: &[TraceRow]) -> Vec<(f64, Acquisition, f64)> {
    let mut acc: BTreeMap<(u64, u8), (f64, Acquisition, f64, usize)> = BTreeMap::new();
    let last = rows.iter().map(|r| r.query).max().unwrap_or(0);
    for r in rows.iter().filter(|r| r.query == last) {
        let e = acc.entry((r.tau_expert.to_bits(), r.acquisition as u8)).or_insert((r.tau_expert, r.acquisition, 0.0, 0));
        e.2 += r.rmse;
        e.3 += 1;
    }
    let mut out: Vec<_> = acc.into_values().map(|(t, a, s, n)| (t, a, s / n as f64)).collect();
    out.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1 as u8).cmp(&(y.1 as u8))));
    out
}

/// Mean of `value` over rows that pass `keep`; `None` when nothing passes.
pub fn mean_of(rows: &[ResultRow], keep: impl Fn(&ResultRow) -> bool, value: impl Fn(&ResultRow) -> f64) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| keep(r)).map(value).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Seed-averaged metrics per method, shift, and setting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub shift_s: f64,
    pub sigma_c: Option<f64>,
    pub budget: Option<usize>,
    pub n: usize,
    pub auroc_mean: f64,
    pub auroc_sd: f64,
    pub nt_mean: f64,
}

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<(SummaryRow, Vec<&ResultRow>)> = Vec::new();
    let mut sorted: Vec<&ResultRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.shift_s.total_cmp(&b.shift_s))
            .then(a.sigma_c.unwrap_or(-1.0).total_cmp(&b.sigma_c.unwrap_or(-1.0)))
            .then(a.budget.cmp(&b.budget))
    });
    for r in sorted {
        let same = groups.last().is_some_and(|(g, _)| g.method == r.method && g.shift_s == r.shift_s && g.sigma_c == r.sigma_c && g.budget == r.budget);
        if !same {
            let head = SummaryRow { method: r.method, shift_s: r.shift_s, sigma_c: r.sigma_c, budget: r.budget, n: 0, auroc_mean: 0.0, auroc_sd: 0.0, nt_mean: 0.0 };
            groups.push((head, Vec::new()));
        }
        groups.last_mut().expect("group pushed").1.push(r);
    }
    groups
        .into_iter()
        .map(|(mut g, rs)| {
            let n = rs.len() as f64;
            g.n = rs.len();
            g.auroc_mean = rs.iter().map(|r| r.auroc).sum::<f64>() / n;
            g.nt_mean = rs.iter().map(|r| r.nt).sum::<f64>() / n;
            g.auroc_sd = if rs.len() > 1 { (rs.iter().map(|r| (r.auroc - g.auroc_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            g
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlCheck {
    pub analytic: f64,
    pub monte_carlo: f64,
    pub rel_err: f64,
    pub n_samples: usize,
}

/// Closed-form KL between two random diagonal Gaussians against the mean of
/// `log q(x) − log p(x)` over `n` draws from `q`.
pub fn kl_monte_carlo_check(seed: u64, dim: usize, n: usize) -> Result<KlCheck> {
    let mut r = rng::stream(seed, 0, Purpose::Theory);
    let gauss = |r: &mut rng::StreamRng| {
        let mean = DVector::from_vec(rng::normal_vec(r, dim));
        let log_std = DVector::from_iterator(dim, (0..dim).map(|_| -1.0 + 1.5 * rand::Rng::random::<f64>(r)));
        DiagGaussian::new(mean, log_std)
    };
    let q = gauss(&mut r)?;
    let p = gauss(&mut r)?;
    let analytic = bayes::kl_diag(&q, &p)?;
    let (sq, sp) = (q.std(), p.std());
    let mut total = 0.0;
    for _ in 0..n {
        let mut lr = 0.0;
        for i in 0..dim {
            let e = rng::std_normal(&mut r);
            let x = q.mean[i] + sq[i] * e;
            let u = (x - p.mean[i]) / sp[i];
            lr += (sp[i] / sq[i]).ln() - 0.5 * e * e + 0.5 * u * u;
        }
        total += lr;
    }
    let monte_carlo = total / n as f64;
    Ok(KlCheck { analytic, monte_carlo, rel_err: (monte_carlo - analytic).abs() / analytic, n_samples: n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzSummary {
    pub n_pairs: usize,
    pub n_holds: usize,
    pub fraction: f64,
    pub lipschitz_const: f64,
    /// Largest `lhs / rhs` seen, a measure of how tight the bound is.
    pub max_ratio: f64,
}

/// Checks the prior-risk Lipschitz bound on random embedding pairs for a
/// state at the published settings with random `θ` and `‖W‖₂ = w_cap`. Half of
/// the pairs are independent draws, half are close neighbours.
pub fn lipschitz_sweep(cfg: &ExperimentConfig, seed: u64, n_pairs: usize, n_param_samples: usize) -> Result<LipschitzSummary> {
    let sw = SeedWorld::build(cfg, seed)?;
    let target = sw.world.targets.last().ok_or_else(|| Error::Config("no target tasks".into()))?;
    let data = target.all_rows();
    let d = cfg.world.embed_dim;
    let mut state = MetaState::new(cfg.predictor(), metalearn::HyperParams::published(), d, seed)?;
    let mut r = rng::stream_sub(seed, 0, Purpose::Theory, 1);
    let p = state.lambda.mean.len();
    state.lambda.mean = DVector::from_vec(rng::normal_vec(&mut r, p));
    let w = DMatrix::from_vec(p, d, rng::normal_vec(&mut r, p * d));
    state.w_emb = &w * (state.hyper.w_cap / metalearn::spectral_norm(&w));
    let sigma = state.hyper.prior_sd;
    let mut n_holds = 0;
    let mut max_ratio: f64 = 0.0;
    for k in 0..n_pairs {
        let mut pr = rng::stream_sub(seed, k as u64, Purpose::Theory, 2);
        let z1 = TaskEmbedding::new(rng::normal_vec(&mut pr, d));
        let z2 = if k % 2 == 0 {
            TaskEmbedding::new(rng::normal_vec(&mut pr, d))
        } else {
            TaskEmbedding(z1.vector() + DVector::from_vec(rng::normal_vec(&mut pr, d)) * 0.05)
        };
        let (p1, p2) = (metalearn::prior_for_task(&state, &z1)?, metalearn::prior_for_task(&state, &z2)?);
        let c: LipschitzCheck = eval::check_lipschitz(&state.predictor, &p1, &p2, &z1, &z2, &data.x, &data.y, &state.w_emb, sigma, n_param_samples, &mut pr)?;
        n_holds += usize::from(c.holds);
        if c.rhs > 0.0 {
            max_ratio = max_ratio.max(c.lhs / c.rhs);
        }
    }
    Ok(LipschitzSummary {
        n_pairs,
        n_holds,
        fraction: n_holds as f64 / n_pairs.max(1) as f64,
        lipschitz_const: eval::lipschitz_const(&state.w_emb, sigma, 1.0),
        max_ratio,
    })
}

/// Pairs causal-oracle and global-prior rows by seed and shift.
pub fn nt_pairs(rows: &[ResultRow], shifts: &[f64]) -> Vec<NtPair> {
    let glob: BTreeMap<(u64, u64), f64> =
        rows.iter().filter(|r| r.method == Method::HbmGlobal).map(|r| ((r.seed, r.shift_s.to_bits()), r.nt)).collect();
    rows.iter()
        .filter(|r| r.method == Method::CausalOracle && r.sigma_c.is_none() && shifts.contains(&r.shift_s))
        .filter_map(|r| {
            let nt_glob = *glob.get(&(r.seed, r.shift_s.to_bits()))?;
            let (o, c, e) = (r.eps_ood?, r.eps_causal?, r.eps_expert?);
            // Result rows do not carry W, so the bound itself is not recomputed.
            let eps = EpsDecomposition { eps_ood: o, eps_causal: c, eps_expert: e, lipschitz_const: f64::NAN, bound: f64::NAN };
            Some(NtPair { seed: r.seed, shift_s: r.shift_s, nt_causal: r.nt, nt_glob, eps })
        })
        .collect()
}

pub const NT_CHECK_SHIFTS: [f64; 3] = [2.0, 3.0, 4.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub kl: KlCheck,
    pub lipschitz: LipschitzSummary,
    pub nt_shifts: Vec<f64>,
    pub nt_mitigation: NtMitigationReport,
}

/// KL against Monte Carlo, the Lipschitz sweep, and the negative-transfer
/// check. `exp1_rows` are reused when given; otherwise the oracle, global,
/// and no-transfer methods are run.
pub fn verify_theory(cfg: &ExperimentConfig, exp1_rows: Option<&[ResultRow]>, jobs: usize) -> Result<TheoryReport> {
    let seed = cfg.seeds[0];
    let kl = kl_monte_carlo_check(seed, cfg.predictor().param_dim(), 1_000_000)?;
    let lipschitz = lipschitz_sweep(cfg, seed, 1000, 100)?;
    let owned;
    let rows = match exp1_rows {
        Some(r) => r,
        None => {
            owned = run_methods(cfg, &[Method::CausalOracle, Method::HbmGlobal, Method::BnnNt], jobs)?;
            &owned
        }
    };
    let pairs = nt_pairs(rows, &NT_CHECK_SHIFTS);
    let nt_mitigation = eval::check_nt_mitigation(&pairs, 2000, &mut rng::stream(seed, 0, Purpose::Bootstrap));
    Ok(TheoryReport { kl, lipschitz, nt_shifts: NT_CHECK_SHIFTS.to_vec(), nt_mitigation })
}

/// A plot a renderer can draw straight from a results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigureSpec {
    pub id: String,
    pub title: String,
    pub csv: String,
    pub x: String,
    pub y: String,
    pub group: String,
    /// Column equality filters applied before plotting.
    pub filter: BTreeMap<String, String>,
    pub aggregate: String,
}

fn fig(id: &str, title: &str, csv: &str, x: &str, y: &str, group: &str, filter: &[(&str, String)]) -> FigureSpec {
    FigureSpec {
        id: id.into(),
        title: title.into(),
        csv: csv.into(),
        x: x.into(),
        y: y.into(),
        group: group.into(),
        filter: filter.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        aggregate: "mean_sd_over_seed".into(),
    }
}

/// Figures backed by the file a runner writes.
pub fn figures_for(kind: &str, cfg: &ExperimentConfig) -> Vec<FigureSpec> {
    let s_max = cfg.shifts.iter().copied().fold(f64::NEG_INFINITY, f64::max).to_string();
    match kind {
        "exp1" => vec![
            fig("exp1_auroc", "AUROC under task shift", "exp1.csv", "shift_s", "auroc", "method", &[]),
            fig("exp1_nt", "Change in log loss relative to no transfer", "exp1.csv", "shift_s", "nt", "method", &[]),
        ],
        "exp2" => vec![
            fig("exp2_auroc", "AUROC with elicited embeddings", "exp2.csv", "shift_s", "auroc", "method", &[("budget", cfg.exp2.budget.to_string())]),
            fig(
                "exp2_budget",
                "AUROC against query budget",
                "exp2.csv",
                "budget",
                "auroc",
                "method",
                &[("method", "causal_expert".into()), ("shift_s", s_max)],
            ),
        ],
        "ablate_noise" => vec![fig("ablate_noise", "AUROC under embedding corruption", "ablate_noise.csv", "shift_s", "auroc", "sigma_c", &[])],
        "ablate_expert" => vec![fig("ablate_expert", "Embedding RMSE against queries", "ablate_expert.csv", "query", "rmse", "tau_expert", &[])],
        "ablate_acq" => vec![fig("ablate_acq", "BALD against random queries", "ablate_acq.csv", "query", "rmse", "acquisition", &[])],
        _ => Vec::new(),
    }
}

/// Writes `contents` to `out_dir/name` and merges the figures into
/// `out_dir/figures.json`, replacing entries with the same id.
pub fn write_output(out_dir: &Path, name: &str, contents: &str, figures: &[FigureSpec]) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(name);
    std::fs::write(&path, contents)?;
    let manifest_path = out_dir.join("figures.json");
    let mut all: Vec<FigureSpec> = if manifest_path.exists() { json::read_file(&manifest_path)? } else { Vec::new() };
    all.retain(|f| figures.iter().all(|g| g.id != f.id));
    all.extend(figures.iter().cloned());
    all.sort_by(|a, b| a.id.cmp(&b.id));
    json::write_file(&manifest_path, &all)?;
    Ok(path)
}
