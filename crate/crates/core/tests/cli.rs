use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "data": {"source": {"kind": "synth", "seed": 3,
           "config": {"users": 40, "items": 30, "clusters": 3, "min_interactions": 8, "max_interactions": 12}},
           "min_interactions": 5, "max_len": 8},
  "model": {"d": 8, "d_state": 4, "d_ff": 16},
  "train": {"epochs": 2, "batch_size": 64, "eval_every": 1},
  "eval": {"batch_size": 32, "throughput_reps": 1, "throughput_warmup": 0}
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftrec")).args(args).output().unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("config.json");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();

    let gen = run(&["gen", "--config", &cfg, "--out", o]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    let tsv = fs::read_to_string(out.join("interactions.tsv")).unwrap();
    assert!(tsv.lines().count() > 40 * 8);

    let train = run(&["train", "--config", &cfg, "--out", o]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    assert_eq!(fs::read_to_string(out.join("train_log.jsonl")).unwrap().lines().count(), 2);
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["checkpoint_sha256"].as_str().unwrap().len(), 64);

    let ckpt = out.join("checkpoint.t2ar");
    let c = ckpt.to_str().unwrap();
    let mut reports = Vec::new();
    for ttt in ["off", "off", "on"] {
        let e = run(&["eval", "--config", &cfg, "--out", o, "--checkpoint", c, "--ttt", ttt]);
        assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
        let m = json(&out.join("metrics.json"));
        assert_eq!(m["segments"].as_array().unwrap().len(), 4);
        reports.push(m);
        let t = json(&out.join("throughput.json"));
        assert!(t["ratio"].as_f64().unwrap() > 0.0);
    }
    assert_eq!(reports[0], reports[1]);
    assert!(out.join("adapt_reports.jsonl").exists());
}

#[test]
fn eval_rejects_a_checkpoint_of_another_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = dir.path().join("run");
    let train = run(&["train", "--config", &cfg, "--out", o.to_str().unwrap()]);
    assert!(train.status.success());
    let other = dir.path().join("other.json");
    fs::write(&other, TINY.replace("\"d\": 8", "\"d\": 12")).unwrap();
    let e = run(&[
        "eval",
        "--config",
        other.to_str().unwrap(),
        "--out",
        o.to_str().unwrap(),
        "--checkpoint",
        o.join("checkpoint.t2ar").to_str().unwrap(),
    ]);
    assert!(!e.status.success());
    assert!(String::from_utf8_lossy(&e.stderr).contains("architecture mismatch"));
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"model": {"d": 0, "dropout": 2.0}, "precision": "f32"}"#).unwrap();
    let out = run(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["model.d", "dropout", "f32"] {
        assert!(err.contains(needle), "{err}");
    }
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("gc");
    let out = run(&["gradcheck", "--out", o.to_str().unwrap(), "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results = json(&o.join("gradcheck.json"));
    assert_eq!(results.as_array().unwrap().len(), 4);
}

#[test]
fn ablations_and_presets_resolve() {
    use clap::Parser;
    use shiftrec::cli::{resolve_config, Cli, Command as Cmd};
    let cli = Cli::parse_from(["shiftrec", "train", "--preset", "appendix", "--ablate", "time,state-test"]);
    let Cmd::Train(args) = cli.command else { panic!() };
    let cfg = resolve_config(&args).unwrap();
    assert_eq!((cfg.train.optimizer.lr, cfg.adapt.lr), (1e-2, 0.05));
    assert_eq!(cfg.loss.mu1_train, 0.0);
    assert!(!cfg.adapt.use_time && !cfg.adapt.use_state);
    assert_eq!(cfg.loss.mu2_train, 1.0);
}
