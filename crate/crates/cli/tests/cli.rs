use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_metacausal");
const SHORT: [&str; 6] = ["--schedule.max_steps", "20", "--schedule.min_steps", "0", "--schedule.eval_every", "10"];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).env_remove("METACAUSAL_SEED").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_train_adapt_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(d, &["gen", "--seed", "3", "--out", "w.json"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let mut train = vec!["train", "--world", "w.json", "--out", "s.json"];
    train.extend(SHORT);
    let o = run(d, &train);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = run(d, &["adapt", "--state", "s.json", "--world", "w.json", "--shift", "2", "--out", "p.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("p.csv")).unwrap();
    assert_eq!(csv.lines().count(), 151, "header plus 150 test rows");

    let o = run(d, &["adapt", "--state", "s.json", "--world", "w.json", "--shift", "2", "--z", "0.5,-0.5,0,1", "--out", "q.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(std::fs::read(d.join("p.csv")).unwrap(), std::fs::read(d.join("q.csv")).unwrap());
}

#[test]
fn seed_env_var_is_the_default_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let env = Command::new(BIN).current_dir(d).args(["gen", "--out", "a.json"]).env("METACAUSAL_SEED", "9").output().unwrap();
    assert!(env.status.success());
    let flag = run(d, &["gen", "--seed", "9", "--out", "b.json"]);
    assert!(flag.status.success());
    assert_eq!(std::fs::read(d.join("a.json")).unwrap(), std::fs::read(d.join("b.json")).unwrap());
}

#[test]
fn dotted_overrides_reach_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = run(d, &["gen", "--out", "a.json", "--world.samples_per_task", "300"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let world: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("a.json")).unwrap()).unwrap();
    assert_eq!(world["spec"]["config"]["samples_per_task"], 300);

    std::fs::write(d.join("c.json"), r#"{"world": {"samples_per_task": 400}}"#).unwrap();
    let b = run(d, &["gen", "--config", "c.json", "--out", "b.json"]);
    assert!(b.status.success(), "{}", stderr(&b));
    let world: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("b.json")).unwrap()).unwrap();
    assert_eq!(world["spec"]["config"]["samples_per_task"], 400);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        vec!["exp1", "--no.such.key", "1"],
        vec!["gen", "--config", "missing.json"],
        vec!["exp1", "--seeds", "x-y"],
        vec!["gen", "--world.embed_dim", "0"],
    ] {
        let o = run(d, &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
    assert!(run(d, &["gen", "--out", "w.json"]).status.success());
    let o = run(d, &["adapt", "--state", "nothing.json", "--world", "w.json", "--shift", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(run(d, &["gen", "--out", "w.json"]).status.success());
    let mut args = vec!["train", "--world", "w.json", "--hyper.outer_lr", "1e300", "--out", "s.json"];
    args.extend(SHORT);
    let o = run(d, &args);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("numerical"));
}
