//! Checks the closed-form KL against Monte Carlo and the prior-risk
//! Lipschitz bound on random embedding pairs.
//!
//! ```text
//! cargo run --release --example theory_checks
//! ```

use metacausal::experiments::{self, ExperimentConfig};

fn main() -> metacausal::Result<()> {
    let kl = experiments::kl_monte_carlo_check(0, 11, 200_000)?;
    println!("KL analytic {:.5}, Monte Carlo {:.5} ({} draws), rel err {:.2e}", kl.analytic, kl.monte_carlo, kl.n_samples, kl.rel_err);

    let lip = experiments::lipschitz_sweep(&ExperimentConfig::default(), 0, 200, 200)?;
    println!(
        "Lipschitz L = {:.2}: bound holds for {}/{} pairs, tightest ratio {:.3}",
        lip.lipschitz_const, lip.n_holds, lip.n_pairs, lip.max_ratio
    );
    Ok(())
}
