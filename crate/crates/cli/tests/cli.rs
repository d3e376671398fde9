use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fluxsteg_core::dataset::DatasetManifest;
use fluxsteg_core::embedding::CostMap;
use fluxsteg_core::volatility::{combine_costs, estimate_volatility_cost, CombineConfig};
use tempfile::TempDir;

fn fluxsteg(args: &[&str]) -> Output {
    fluxsteg_env(args, &[])
}

fn fluxsteg_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fluxsteg"));
    cmd.args(args).env("RUST_LOG", "warn");
    for k in ["FLUXSTEG_ITERATIONS", "FLUXSTEG_SEED", "FLUXSTEG_BACKEND", "FLUXSTEG_CONFIG", "FLUXSTEG_PAYLOAD"] {
        cmd.env_remove(k);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn failed(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure, stdout: {}", String::from_utf8_lossy(&out.stdout));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn prompts(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("prompts.txt");
    let body: String = std::iter::once("# categories\n".to_string())
        .chain((0..n).map(|k| format!("category {k}\n")))
        .collect();
    fs::write(&path, body).unwrap();
    path
}

fn build(dir: &Path, n_prompts: usize, seeds: &str, size: &str, extra: &[&str]) -> PathBuf {
    let p = prompts(dir, n_prompts);
    let out = dir.join("data");
    let mut args = vec!["dataset", "--prompts", s(&p), "--seeds", seeds, "--size", size, "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&fluxsteg(&args));
    out
}

#[test]
fn procedural_dataset_counts() {
    let dir = TempDir::new().unwrap();
    let out = build(dir.path(), 10, "2", "16x16", &["--split", "8,4,8"]);
    let m = DatasetManifest::load(&out.join("manifest.tsv")).unwrap();
    assert_eq!(m.len(), 20);
    assert!(m.entries.iter().all(|e| e.fluctuations.len() == 10));
    for (role, n) in [("train", 8), ("val", 4), ("test", 8)] {
        assert_eq!(DatasetManifest::load(&out.join(format!("{role}.tsv"))).unwrap().len(), n);
    }
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "dataset");
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);
    assert!(run["tool_version"].is_string() && run["inputs"][0]["sha256"].is_string());
}

#[test]
fn zero_tau_exhausts_generation() {
    let dir = TempDir::new().unwrap();
    let p = prompts(dir.path(), 2);
    let out = dir.path().join("data");
    let err = failed(&fluxsteg(&[
        "dataset", "--prompts", s(&p), "--size", "16x16", "--tau", "0", "--amplitude", "8", "--max-retries", "3",
        "--out", s(&out),
    ]));
    assert!(err.contains("generation exhausted"), "{err}");
}

#[test]
fn full_scale_dry_run() {
    let dir = TempDir::new().unwrap();
    let p = prompts(dir.path(), 1000);
    let out = dir.path().join("never");
    let text = ok(&fluxsteg(&["dataset", "--prompts", s(&p), "--seeds", "10", "--size", "256x256", "--split", "4000,1000,5000", "--dry-run", "--out", s(&out)]));
    assert!(text.contains("10000 sets"), "{text}");
    assert!(!out.exists());
    let err = failed(&fluxsteg(&["dataset", "--prompts", s(&p), "--split", "4000,1000,5000", "--dry-run", "--out", s(&out)]));
    assert!(err.contains("split sizes"), "{err}");
}

#[test]
fn embed_extract_round_trip_through_files() {
    let dir = TempDir::new().unwrap();
    let data = build(dir.path(), 1, "1", "64x64", &[]);
    let cover = data.join("images/000000/cover.pgm");
    let costs = dir.path().join("costs.grid");
    ok(&fluxsteg(&["costs", "--cover", s(&cover), "--source", "hill", "--out", s(&costs)]));
    let msg = dir.path().join("msg.bin");
    let payload: Vec<u8> = (0..150u32).map(|k| (k * 37 % 251) as u8).collect();
    fs::write(&msg, &payload).unwrap();
    let stego = dir.path().join("stego.pgm");
    ok(&fluxsteg_env(
        &["embed", "--cover", s(&cover), "--costs", s(&costs), "--message", s(&msg), "--payload", "0.4", "--out", s(&stego)],
        &[("FLUXSTEG_KEY", "99")],
    ));
    let back = dir.path().join("back.bin");
    ok(&fluxsteg_env(&["extract", "--stego", s(&stego), "--payload", "0.4", "--out", s(&back)], &[("FLUXSTEG_KEY", "99")]));
    assert_eq!(fs::read(&back).unwrap(), payload);
    let hex_out = ok(&fluxsteg_env(&["extract", "--stego", s(&stego), "--payload", "0.4"], &[("FLUXSTEG_KEY", "99")]));
    assert_eq!(hex_out.trim(), payload.iter().map(|b| format!("{b:02x}")).collect::<String>());
    assert!(dir.path().join("stego.pgm.run.json").exists());
    let manifest = fs::read_to_string(dir.path().join("stego.pgm.run.json")).unwrap();
    assert!(!manifest.contains("\"key\""), "key leaked into the run manifest");

    let big = dir.path().join("big.bin");
    fs::write(&big, vec![7u8; 400]).unwrap();
    let err = failed(&fluxsteg(&["embed", "--cover", s(&cover), "--costs", s(&costs), "--message", s(&big), "--out", s(&stego)]));
    assert!(err.contains("exceeds") && err.contains("capacity"), "{err}");
}

#[test]
fn combine_matches_library() {
    let dir = TempDir::new().unwrap();
    let data = build(dir.path(), 1, "1", "32x32", &["--amplitude", "4"]);
    let cover = data.join("images/000000/cover.pgm");
    let costs = dir.path().join("hill.grid");
    ok(&fluxsteg(&["costs", "--cover", s(&cover), "--source", "hill", "--out", s(&costs)]));
    let out = dir.path().join("combined.grid");
    let manifest = data.join("manifest.tsv");
    ok(&fluxsteg(&["combine", "--costs", s(&costs), "--manifest", s(&manifest), "--vc-beta", "0.15", "--out", s(&out)]));

    let set = DatasetManifest::load(&manifest).unwrap().load_set(0).unwrap();
    let original = CostMap::load(&costs).unwrap();
    let vol = estimate_volatility_cost(&set).unwrap();
    let (expected, _) = combine_costs(&original, &vol.costs, &CombineConfig { vc_beta: 0.15 }).unwrap();
    let via_file = dir.path().join("expected.grid");
    expected.save(&via_file).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&via_file).unwrap());

    // Same stack given as separate files.
    let mut args = vec!["combine".to_string(), "--costs".into(), s(&costs).into(), "--cover".into(), s(&cover).into()];
    for k in 0..10 {
        args.push("--fluctuation".into());
        args.push(s(&data.join(format!("images/000000/flu_{k:02}.pgm"))).into());
    }
    let out2 = dir.path().join("combined2.grid");
    args.extend(["--out".into(), s(&out2).into()]);
    ok(&fluxsteg(&args.iter().map(String::as_str).collect::<Vec<_>>()));
    assert_eq!(fs::read(&out2).unwrap(), fs::read(&out).unwrap());
}

#[test]
fn covers_only_eval_is_at_chance() {
    let dir = TempDir::new().unwrap();
    let data = build(dir.path(), 60, "1", "32x32", &["--fluctuations", "2", "--split", "30,10,20"]);
    let report = dir.path().join("report.json");
    let table = ok(&fluxsteg(&[
        "eval", "--train", s(&data.join("train.tsv")), "--val", s(&data.join("val.tsv")), "--test",
        s(&data.join("test.tsv")), "--methods", "none", "--epochs", "2", "--out", s(&report),
    ]));
    let reports: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let pe = reports[0]["p_e"].as_f64().unwrap();
    assert!((pe - 0.5).abs() <= 0.05, "p_e {pe}");
    assert!(table.contains("none") && table.contains("0.4 bpp"), "{table}");
    let rendered = ok(&fluxsteg(&["report", "--eval", s(&report)]));
    assert!(rendered.contains("50.00") || rendered.contains("none"), "{rendered}");
}

const TINY: &str = "iterations = 5\nbatch_size = 2\n\n[generator]\nbase_channels = 2\nmax_channels = 4\n";

#[test]
fn train_config_precedence() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, TINY).unwrap();
    let m = dir.path().join("unused.tsv");
    let show = |extra: &[&str], env: &[(&str, &str)]| {
        let mut args = vec!["train", "--manifest", s(&m), "--config", s(&cfg), "--out", "unused", "--print-config"];
        args.extend_from_slice(extra);
        let text = ok(&fluxsteg_env(&args, env));
        let cfg: toml::Value = text.parse::<toml::Table>().map(toml::Value::Table).unwrap();
        cfg["iterations"].as_integer().unwrap()
    };
    assert_eq!(show(&[], &[]), 5);
    assert_eq!(show(&[], &[("FLUXSTEG_ITERATIONS", "3")]), 3);
    assert_eq!(show(&["--iterations", "2"], &[("FLUXSTEG_ITERATIONS", "3")]), 2);
    let err = failed(&fluxsteg(&["train", "--manifest", s(&m), "--config", s(&cfg), "--out", "x", "--strategy", "both", "--print-config"]));
    assert!(err.contains("invalid flag value"), "{err}");
}

#[test]
fn train_then_report_and_learned_costs() {
    let dir = TempDir::new().unwrap();
    let data = build(dir.path(), 4, "1", "32x32", &["--fluctuations", "3"]);
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, TINY).unwrap();
    let runs = dir.path().join("runs");
    ok(&fluxsteg(&[
        "train", "--manifest", s(&data.join("manifest.tsv")), "--config", s(&cfg), "--iterations", "2", "--payload",
        "0.1,0.4", "--out", s(&runs),
    ]));
    for q in ["q0.1", "q0.4"] {
        let metrics = fs::read_to_string(runs.join(q).join("metrics.jsonl")).unwrap();
        assert_eq!(metrics.lines().count(), 2);
        assert!(runs.join(q).join("final/generator.ckpt").exists());
        let run = fs::read_to_string(runs.join(q).join("run.json")).unwrap();
        assert!(run.contains("\"seed\": 0"), "{run}");
    }
    let text = ok(&fluxsteg(&["report", "--metrics", s(&runs.join("q0.4/metrics.jsonl"))]));
    assert!(text.contains("iterations        2"), "{text}");

    let cover = data.join("images/000000/cover.pgm");
    let costs = dir.path().join("learned.grid");
    let ckpt = runs.join("q0.4/final/generator.ckpt");
    ok(&fluxsteg(&["costs", "--cover", s(&cover), "--generator", s(&ckpt), "--out", s(&costs)]));
    let c = CostMap::load(&costs).unwrap();
    assert_eq!(c.shape(), (32, 32));
    let again = dir.path().join("learned2.grid");
    ok(&fluxsteg(&["costs", "--cover", s(&cover), "--generator", s(&ckpt), "--out", s(&again)]));
    assert_eq!(fs::read(&costs).unwrap(), fs::read(&again).unwrap());

    let missing = dir.path().join("nope.ckpt");
    let err = failed(&fluxsteg(&["costs", "--cover", s(&cover), "--generator", s(&missing), "--out", s(&costs)]));
    assert!(err.contains("loading generator"), "{err}");
}
