//! Generates a synthetic task family and prints what each task looks like.
//!
//! ```text
//! cargo run --example generate_world -- 3
//! ```

use metacausal::taskgen::{self, DataSplit, GeneratorSpec};

fn main() -> metacausal::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = GeneratorSpec::with_defaults(seed);
    let world = taskgen::generate_experiment_world(&spec, 20, &taskgen::DEFAULT_SHIFT_LEVELS)?;

    println!("seed {seed}: {} sources, {} targets", world.sources.len(), world.targets.len());
    println!("{:<12} {:>6} {:>5} {:>7} {:>9} {:>9}", "task", "rows", "pos", "shift", "‖z‖", "alpha");
    for t in world.sources.iter().take(3).chain(&world.targets) {
        let alpha = if t.shift_s > 0.0 { spec.alpha_target(t.shift_s) } else { spec.config.alpha_source };
        println!("{:<12} {:>6} {:>5} {:>7.1} {:>9.3} {:>9.3}", t.task_id, t.len(), t.positives(), t.shift_s, t.embedding_true.norm(), alpha);
    }

    let t = world.target_at(4.0).expect("s = 4 is a default shift level");
    let split = DataSplit::standard(t.len(), seed, t.index);
    println!("split of {}: support {}, query {}, test {}", t.task_id, split.support.len(), split.query.len(), split.test.len());
    Ok(())
}
