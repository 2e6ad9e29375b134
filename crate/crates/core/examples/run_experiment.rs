//! Runs a reduced shift-robustness experiment in-process and prints the
//! per-method summary. Any config key can be overridden as `path=value`.
//!
//! ```text
//! cargo run --release --example run_experiment -- seeds=[0,1] schedule.max_steps=600
//! ```

use metacausal::experiments::{self, ExperimentConfig, Method};

fn main() -> metacausal::Result<()> {
    let mut overrides = vec![
        ("seeds".to_string(), "[0]".to_string()),
        ("methods".to_string(), r#"["causal_oracle","corr_embed","hbm_global","bnn_nt"]"#.to_string()),
    ];
    for arg in std::env::args().skip(1) {
        if let Some((k, v)) = arg.split_once('=') {
            overrides.push((k.to_string(), v.to_string()));
        }
    }
    let cfg = ExperimentConfig::from_parts(None, &overrides)?;
    let rows = experiments::run_exp1(&cfg, 1)?;

    println!("{:<14} {:>5} {:>3} {:>8} {:>8}", "method", "shift", "n", "auroc", "nt");
    for s in experiments::summarize(&rows) {
        if s.method != Method::BnnNt {
            println!("{:<14} {:>5.1} {:>3} {:>8.3} {:>+8.3}", s.method.name(), s.shift_s, s.n, s.auroc_mean, s.nt_mean);
        }
    }
    Ok(())
}
