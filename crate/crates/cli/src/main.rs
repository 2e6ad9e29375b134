//! `metacausal`: world generation, training, adaptation, the experiment
//! runners, and the elicitation service.
//!
//! Any `--section.key value` (or `--section.key=value`) flag overrides the
//! matching config path, e.g. `--hyper.prior_sd 0.1`.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use metacausal::experiments::{self, ExperimentConfig, Method, ResultRow, SeedWorld, TraceRow};
use metacausal::metalearn::{self, MetaState};
use metacausal::taskgen::{TaskEmbedding, World};
use metacausal::{json, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "metacausal", version, about = "Causally-aware Bayesian meta-learning experiments")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world (sources and shifted targets) as JSON.
    Gen(GenArgs),
    /// Meta-train on a world's sources and write a checkpoint.
    Train(TrainArgs),
    /// Adapt a checkpoint to one target and write test-row scores.
    Adapt(AdaptArgs),
    /// Shift sweep with oracle, correlation, and no embeddings.
    Exp1(RunArgs),
    /// Shift sweep with expert-elicited embeddings and the budget sweep.
    Exp2(RunArgs),
    /// Embedding-corruption ablation.
    AblateNoise(RunArgs),
    /// Expert-temperature ablation of elicitation RMSE.
    AblateExpert(RunArgs),
    /// BALD against random query selection.
    AblateAcq(RunArgs),
    /// KL, Lipschitz, and negative-transfer checks.
    VerifyTheory(RunArgs),
    /// Run the elicitation HTTP service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON config; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, env = "METACAUSAL_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "world.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, env = "METACAUSAL_SEED", default_value_t = 0)]
    seed: u64,
    /// World JSON from `gen`; generated from the seed when absent.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Train the global-prior model (`W = 0`) instead of the causal prior.
    #[arg(long)]
    global: bool,
    #[arg(long, default_value = "state.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, env = "METACAUSAL_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    world: Option<PathBuf>,
    /// Shift level of the target task.
    #[arg(long)]
    shift: f64,
    /// Comma-separated embedding; defaults to the target's true embedding.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    z: Option<Vec<f64>>,
    #[arg(long, default_value = "predictions.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Seeds: `7`, `0,3,5`, or the inclusive range `0-9`.
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads over seeds; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Fill the runtime_ms column (makes output run-dependent).
    #[arg(long)]
    record_timing: bool,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Append session events to this JSONL file.
    #[arg(long)]
    event_log: Option<PathBuf>,
}

/// Splits `--a.b value` and `--a.b=value` pairs out of the arguments.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut over = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(a);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => over.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("--{flag} needs a value")))?;
                over.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, over))
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("cannot parse seeds '{s}'"));
    if let Some((a, b)) = s.split_once('-') {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

fn load_config(args: &ConfigArgs, over: &[(String, String)]) -> Result<ExperimentConfig> {
    match &args.config {
        Some(p) => ExperimentConfig::load(p, over),
        None => ExperimentConfig::from_parts(None, over),
    }
}

fn run_config(a: &RunArgs, over: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut cfg = load_config(&a.cfg, over)?;
    match &a.seeds {
        Some(s) => cfg.seeds = parse_seeds(s)?,
        None => {
            if let Ok(base) = std::env::var("METACAUSAL_SEED") {
                let base: u64 = base.parse().map_err(|_| Error::Config(format!("METACAUSAL_SEED='{base}' is not a seed")))?;
                cfg.seeds = cfg.seeds.iter().map(|s| s + base).collect();
            }
        }
    }
    if let Some(m) = &a.methods {
        cfg.methods = Some(m.iter().map(|s| s.parse()).collect::<Result<Vec<Method>>>()?);
    }
    if let Some(d) = &a.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.record_timing |= a.record_timing;
    cfg.validate()?;
    Ok(cfg)
}

fn load_world(cfg: &ExperimentConfig, path: Option<&Path>, seed: u64) -> Result<SeedWorld> {
    match path {
        Some(p) => SeedWorld::from_world(json::read_file::<World>(p)?),
        None => SeedWorld::build(cfg, seed),
    }
}

fn print_summary(rows: &[ResultRow]) {
    println!("{:<14} {:>7} {:>7} {:>7} {:>4} {:>8} {:>7} {:>8}", "method", "shift", "sigma_c", "budget", "n", "auroc", "sd", "nt");
    for s in experiments::summarize(rows) {
        let o = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        println!(
            "{:<14} {:>7} {:>7} {:>7} {:>4} {:>8.4} {:>7.4} {:>+8.4}",
            s.method.name(),
            s.shift_s,
            o(s.sigma_c.map(|v| v.to_string())),
            o(s.budget.map(|v| v.to_string())),
            s.n,
            s.auroc_mean,
            s.auroc_sd,
            s.nt_mean
        );
    }
}

fn print_final_rmse(rows: &[TraceRow]) {
    println!("{:>6} {:<8} {:>10}", "tau", "acq", "final_rmse");
    for (tau, acq, r) in experiments::final_rmse(rows) {
        println!("{:>6} {:<8} {:>10.4}", tau, format!("{acq:?}").to_lowercase(), r);
    }
}

fn write(cfg: &ExperimentConfig, kind: &str, contents: &str) -> Result<()> {
    let path = experiments::write_output(&cfg.out_dir, &format!("{kind}.csv"), contents, &experiments::figures_for(kind, cfg))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli, over: Vec<(String, String)>) -> Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let cfg = load_config(&a.cfg, &over)?;
            let sw = SeedWorld::build(&cfg, a.seed)?;
            json::write_file(&a.out, &sw.world)?;
            println!("{} sources, {} targets, world hash {}", sw.world.sources.len(), sw.world.targets.len(), sw.world_hash);
        }
        Command::Train(a) => {
            let cfg = load_config(&a.cfg, &over)?;
            let sw = load_world(&cfg, a.world.as_deref(), a.seed)?;
            let state = sw.train(&cfg, &sw.oracle_sources(), !a.global)?;
            state.save(&a.out)?;
            println!(
                "trained {} steps, |W|_2 = {:.4}, checkpoint {}",
                state.step_count,
                metalearn::spectral_norm(&state.w_emb),
                a.out.display()
            );
        }
        Command::Adapt(a) => {
            let cfg = load_config(&a.cfg, &over)?;
            let state = MetaState::load(&a.state)?;
            let sw = load_world(&cfg, a.world.as_deref(), a.seed)?;
            let k = sw
                .world
                .targets
                .iter()
                .position(|t| t.shift_s == a.shift)
                .ok_or_else(|| Error::Config(format!("no target at shift {}", a.shift)))?;
            let t = &sw.world.targets[k];
            let z = a.z.map(TaskEmbedding::new).unwrap_or_else(|| t.embedding_true.clone());
            if !z.is_finite() {
                return Err(Error::Config("--z must be finite".into()));
            }
            let pred = metalearn::adapt_and_predict(&state, &z, t, &sw.target_splits[k])?;
            std::fs::write(&a.out, pred.to_csv())?;
            println!("task {} auroc {:.4} logloss {:.4}", t.task_id, pred.auroc, pred.log_loss()?);
        }
        Command::Exp1(a) => {
            let cfg = run_config(&a, &over)?;
            let rows = experiments::run_exp1(&cfg, a.jobs)?;
            write(&cfg, "exp1", &experiments::rows_to_csv(&rows))?;
            print_summary(&rows);
        }
        Command::Exp2(a) => {
            let cfg = run_config(&a, &over)?;
            let rows = experiments::run_exp2(&cfg, a.jobs)?;
            write(&cfg, "exp2", &experiments::rows_to_csv(&rows))?;
            print_summary(&rows);
        }
        Command::AblateNoise(a) => {
            let cfg = run_config(&a, &over)?;
            let rows = experiments::run_noise_ablation(&cfg, a.jobs)?;
            write(&cfg, "ablate_noise", &experiments::rows_to_csv(&rows))?;
            print_summary(&rows);
        }
        Command::AblateExpert(a) => {
            let cfg = run_config(&a, &over)?;
            let rows = experiments::run_expert_ablation(&cfg, a.jobs)?;
            write(&cfg, "ablate_expert", &experiments::traces_to_csv(&rows))?;
            print_final_rmse(&rows);
        }
        Command::AblateAcq(a) => {
            let mut cfg = run_config(&a, &over)?;
            if let Some(s) = &a.seeds {
                cfg.ablation.acq_seeds = Some(parse_seeds(s)?);
            }
            let rows = experiments::run_acquisition_ablation(&cfg, a.jobs)?;
            write(&cfg, "ablate_acq", &experiments::traces_to_csv(&rows))?;
            print_final_rmse(&rows);
        }
        Command::VerifyTheory(a) => {
            let cfg = run_config(&a, &over)?;
            let report = experiments::verify_theory(&cfg, None, a.jobs)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join("theory.json");
            json::write_file(&path, &report)?;
            let (k, l, n) = (&report.kl, &report.lipschitz, &report.nt_mitigation);
            println!("kl: analytic {:.6} monte carlo {:.6} rel err {:.2e}", k.analytic, k.monte_carlo, k.rel_err);
            println!("lipschitz: {}/{} pairs hold (L = {:.3})", l.n_holds, l.n_pairs, l.lipschitz_const);
            println!(
                "negative transfer at s in {:?}: {} of {} runs used, causal {:+.4} global {:+.4}, diff CI [{:+.4}, {:+.4}]",
                report.nt_shifts, n.n_used, n.n_total, n.mean_nt_causal, n.mean_nt_glob, n.ci_low, n.ci_high
            );
            eprintln!("wrote {}", path.display());
        }
        Command::Serve(a) => {
            let addr: std::net::SocketAddr = a.addr.parse().map_err(|_| Error::Config(format!("bad address '{}'", a.addr)))?;
            let mut state = metacausal_elicit::AppState::new();
            if let Some(p) = &a.event_log {
                state = state.with_event_log(p)?;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                eprintln!("serving on http://{}/api/v1", listener.local_addr()?);
                metacausal_elicit::serve(listener, Arc::new(state)).await
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, over) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = Cli::parse_from(args);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli, over) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
