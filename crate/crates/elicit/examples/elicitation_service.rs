//! Starts the elicitation service on a local port and walks one session
//! through its HTTP endpoints, answering as a simulated expert would.
//!
//! ```text
//! cargo run --example elicitation_service
//! ```

use std::sync::Arc;

use serde_json::json;

use metacausal::embedding::EmbeddingSet;
use metacausal::expert::{ExpertQuery, SimulatedExpert};
use metacausal::taskgen::{self, GeneratorSpec};
use metacausal_elicit::client::Client;
use metacausal_elicit::{AppState, BackgroundServer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let world = taskgen::generate_experiment_world(&GeneratorSpec::with_defaults(0), 20, &taskgen::DEFAULT_SHIFT_LEVELS)?;
    let sources = EmbeddingSet::oracle(&world.sources)?;
    let target = world.target_at(3.0).expect("s = 3 is a default shift level");

    let server = BackgroundServer::start("127.0.0.1:0".parse()?, Arc::new(AppState::new().with_world("demo", sources.clone())))?;
    let client = Client::new(server.addr);
    println!("listening on {}", server.addr);

    let body = json!({"world_ref": "demo", "budget": 8, "seed": 1, "z_true": target.embedding_true.as_slice()});
    let (_, created) = client.post("/api/v1/sessions", &body)?;
    let id = created["session_id"].as_str().ok_or("no session id")?.to_string();

    let sim = SimulatedExpert { true_sources: sources, z_true: target.embedding_true.clone(), tau_expert: 2.0, seed: 2 };
    loop {
        let (status, q) = client.get(&format!("/api/v1/sessions/{id}/query"))?;
        if status != 200 {
            println!("session closed: {}", q["code"]);
            break;
        }
        let k = q["query_index"].as_u64().ok_or("no query index")? as usize;
        let query = ExpertQuery { i: q["i"].as_str().unwrap_or_default().into(), j: q["j"].as_str().unwrap_or_default().into() };
        let choice = if sim.answer(&query, k)? == 1 { "i" } else { "j" };
        let (_, a) = client.post(&format!("/api/v1/sessions/{id}/answer"), &json!({"query_index": k, "choice": choice}))?;
        println!("q{k}: {} vs {} -> {choice}, remaining {}", query.i, query.j, a["remaining"]);
    }

    let (_, post) = client.get(&format!("/api/v1/sessions/{id}/posterior"))?;
    println!("posterior mean {}", post["posterior_mean"]);
    println!("true embedding {:?}", target.embedding_true.as_slice());
    Ok(())
}
