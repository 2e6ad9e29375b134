//! Infers a target's embedding from a simulated expert's pairwise answers,
//! comparing BALD against random query selection.
//!
//! ```text
//! cargo run --release --example expert_elicitation
//! ```

use metacausal::embedding::EmbeddingSet;
use metacausal::expert::{self, Acquisition, ExpertSession, SimulatedExpert};
use metacausal::taskgen::{self, GeneratorSpec};

fn main() -> metacausal::Result<()> {
    let world = taskgen::generate_experiment_world(&GeneratorSpec::with_defaults(1), 20, &taskgen::DEFAULT_SHIFT_LEVELS)?;
    let sources = EmbeddingSet::oracle(&world.sources)?;
    let target = world.target_at(2.0).expect("s = 2 is a default shift level");
    let sim = SimulatedExpert { true_sources: sources.clone(), z_true: target.embedding_true.clone(), tau_expert: 2.0, seed: 7 };

    for acq in [Acquisition::Bald, Acquisition::Random] {
        let mut session = ExpertSession::new(sources.clone(), 20, acq, 3)?;
        let run = expert::run_loop(&mut session, &sim)?;
        let trace: Vec<String> = run.rmse_trace.iter().step_by(5).map(|r| format!("{r:.3}")).collect();
        println!("{acq:?}: RMSE every 5 answers {}", trace.join(" "));
    }
    Ok(())
}
