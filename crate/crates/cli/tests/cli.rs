use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use switchdit::trainer::metrics::{parse_csv, HEADER};
use tempfile::TempDir;

const TINY: &[&str] = &[
    "--set",
    "model.blocks=2",
    "--set",
    "model.dim=16",
    "--set",
    "model.heads=2",
    "--set",
    "train.batch_size=8",
    "--set",
    "data.size=64",
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_switchdit"));
    c.env_remove("SWITCHDIT_OUT_DIR");
    c
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin().arg("--out-dir").arg(out).args(args).output().expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_tiny(out: &Path, steps: usize, extra: &[&str]) {
    let mut args: Vec<&str> = TINY.to_vec();
    args.extend_from_slice(extra);
    let s = steps.to_string();
    args.extend(["train", "--steps", &s]);
    ok(&run(out, &args));
}

#[test]
fn help_documents_every_key_with_default() {
    let o = bin().arg("--help").output().unwrap();
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    for key in ["lambda_dp", "ema_decay", "timesteps", "guidance", "quantile", "mode"] {
        assert!(text.contains(key), "{key} missing from help");
    }
    assert_eq!(text.matches("[default:").count(), 47, "{text}");
    assert!(text.contains("SWITCHDIT_OUT_DIR"));
}

#[test]
fn usage_errors_exit_one_with_distinct_messages() {
    let dir = TempDir::new().unwrap();
    let bad_flag = run(dir.path(), &["--frobnicate", "train"]);
    assert_eq!(bad_flag.status.code(), Some(1));
    assert!(stderr(&bad_flag).contains("unexpected argument"));

    let cfg = dir.path().join("bad.ini");
    fs::write(&cfg, "[train]\nlearning_rate = 3\n").unwrap();
    let bad_cfg = run(dir.path(), &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(bad_cfg.status.code(), Some(1));
    assert!(stderr(&bad_cfg).contains("unknown config key 'learning_rate'"));

    fs::write(&cfg, "[train\nsteps = 3\n").unwrap();
    let malformed = run(dir.path(), &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(malformed.status.code(), Some(1));
    assert!(stderr(&malformed).contains("malformed config"));

    let missing = run(dir.path(), &["sample", "--checkpoint", "does/not/exist.swdt"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("checkpoint not found"));

    let bad_ablation = run(dir.path(), &["--ablation", "dropout", "train"]);
    assert_eq!(bad_ablation.status.code(), Some(1));
    assert!(stderr(&bad_ablation).contains("unknown ablation"));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let junk = dir.path().join("junk.swdt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = run(dir.path(), &["inspect-routing", "--checkpoint", junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("corrupt checkpoint"));

    train_tiny(dir.path(), 1, &["--set", "model.smoe=false"]);
    let ck = dir.path().join("checkpoint.swdt");
    let o = run(dir.path(), &["match-debug", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("plain DiT"));
}

#[test]
fn artifacts_embed_config_and_version_and_are_reproducible() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for d in [&a, &b] {
        train_tiny(d.path(), 6, &["--seed", "11"]);
        let ck = d.path().join("checkpoint.swdt");
        let ck = ck.to_str().unwrap();
        ok(&run(d.path(), &["match-debug", "--checkpoint", ck]));
        ok(&run(d.path(), &["inspect-routing", "--checkpoint", ck]));
        ok(&run(d.path(), &["sample", "--checkpoint", ck, "--count", "2", "--steps", "4"]));
        ok(&run(
            d.path(),
            &["--set", "eval.n=8", "--set", "eval.trials=4", "--set", "sample.steps=3", "eval", "--checkpoint", ck],
        ));
    }
    let version = switchdit::BUILD_VERSION;
    for f in [
        "metrics.csv",
        "config.ini",
        "match.json",
        "eval.json",
        "routing/gate_map.csv",
        "routing/gate_map.pgm",
        "routing/prior_map.csv",
        "routing/gate_probs.csv",
        "routing/routing.json",
        "routing/paths.txt",
        "samples/sample_0001.pgm",
    ] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical runs");
        let text = String::from_utf8_lossy(&x);
        assert!(text.contains(version), "{f} lacks the build version");
        if f != "routing/paths.txt" && f != "config.ini" {
            assert!(text.contains("lambda_dp"), "{f} lacks the config");
        }
    }
    let ini = fs::read_to_string(a.path().join("config.ini")).unwrap();
    assert!(ini.contains("seed = 11") && ini.contains("steps = 6"));
    let rows = parse_csv(&fs::read_to_string(a.path().join("metrics.csv")).unwrap());
    assert_eq!(rows.len(), 6);
}

#[test]
fn out_dir_from_environment() {
    let dir = TempDir::new().unwrap();
    let mut args: Vec<&str> = TINY.to_vec();
    args.extend(["train", "--steps", "1"]);
    let o = bin().env("SWITCHDIT_OUT_DIR", dir.path()).args(&args).output().unwrap();
    ok(&o);
    assert!(dir.path().join("checkpoint.swdt").is_file());
}

#[test]
fn config_file_then_flags() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.ini");
    fs::write(&cfg, "[train]\nsteps = 2\nseed = 5\n[model]\nblocks = 2\ndim = 16\nheads = 2\n").unwrap();
    ok(&run(dir.path(), &["--config", cfg.to_str().unwrap(), "--seed", "9", "--ablation", "noisy-gating", "train"]));
    let ini = fs::read_to_string(dir.path().join("config.ini")).unwrap();
    assert!(ini.contains("steps = 2"));
    assert!(ini.contains("seed = 9"));
    assert!(ini.contains("ablations = noisy-gating"));
}

#[test]
fn untrained_routing_is_degenerate() {
    let dir = TempDir::new().unwrap();
    train_tiny(dir.path(), 0, &[]);
    let ck = dir.path().join("checkpoint.swdt");
    let o = run(dir.path(), &["inspect-routing", "--checkpoint", ck.to_str().unwrap()]);
    ok(&o);
    let paths = fs::read_to_string(dir.path().join("routing/paths.txt")).unwrap();
    for b in 1..=2 {
        assert!(paths.contains(&format!("block {b}: shared {{1,2}} specific {{-}} unused {{3}}")), "{paths}");
    }
    let csv = fs::read_to_string(dir.path().join("routing/gate_map.csv")).unwrap();
    assert!(csv.contains("0-indexed"));
    assert!(csv.lines().filter(|l| !l.starts_with('#')).skip(1).all(|l| l.ends_with(",1,1,0,1,1,0")));
}

#[test]
fn resume_continues_the_metrics_stream() {
    let full = TempDir::new().unwrap();
    let split = TempDir::new().unwrap();
    train_tiny(full.path(), 8, &[]);
    train_tiny(split.path(), 4, &[]);
    let ck = split.path().join("checkpoint.swdt");
    ok(&run(split.path(), &["train", "--resume", ck.to_str().unwrap(), "--steps", "8"]));
    let a = parse_csv(&fs::read_to_string(full.path().join("metrics.csv")).unwrap());
    let b = parse_csv(&fs::read_to_string(split.path().join("metrics.csv")).unwrap());
    assert_eq!(a, b);
}

fn ldp_mean(dir: &Path) -> f64 {
    let ck = dir.join("checkpoint.swdt");
    ok(&run(dir, &["match-debug", "--checkpoint", ck.to_str().unwrap()]));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("match.json")).unwrap()).unwrap();
    json["ldp_mean"].as_f64().unwrap()
}

#[test]
fn match_debug_separates_lambda_runs() {
    let toy = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.ini");
    let with = TempDir::new().unwrap();
    let without = TempDir::new().unwrap();
    for (d, lambda) in [(&with, "train.lambda_dp=1"), (&without, "train.lambda_dp=0")] {
        let args = ["--config", toy, "--set", lambda, "train", "--steps", "1000"];
        ok(&run(d.path(), &args));
    }
    let (a, b) = (ldp_mean(with.path()), ldp_mean(without.path()));
    assert!(b >= 10.0 * a, "L_dp mean {a} with the prior loss vs {b} without");
}

#[test]
fn default_config_trains_with_falling_loss() {
    let dir = TempDir::new().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.ini");
    ok(&run(dir.path(), &["--config", cfg, "train", "--steps", "400"]));
    let rows = parse_csv(&fs::read_to_string(dir.path().join("metrics.csv")).unwrap());
    assert_eq!(rows.len(), 400);
    let col = HEADER.split(',').position(|h| h == "loss_noise").unwrap();
    let means: Vec<f64> = rows
        .chunks(100)
        .map(|c| c.iter().map(|r| r[col].parse::<f64>().unwrap()).sum::<f64>() / c.len() as f64)
        .collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "windowed L_noise {means:?}");
}
