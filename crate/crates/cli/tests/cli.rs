//! Drives the `pote` binary end to end on small configurations.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pote::manifest::{sha256_hex, Manifest};
use pote_core::eval::EvalReport;
use pote_core::experiment::SweepReport;

const TINY: &str = r#"
seeds = [0]
sweep_alphas = [0.3, 0.7]
[dataset]
n = 400
[poe]
warmup_epochs = 2
pareto_epochs = 1
[popl]
warmup_epochs = 1
pareto_epochs = 1
"#;

fn pote(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pote"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pote(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn generate_default_simulation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        ok(&[
            "generate",
            "--dataset",
            "simulation",
            "--seed",
            "0",
            "--out-dir",
            d.to_str().unwrap(),
        ]);
    }
    let text = fs::read(a.join("data.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&text).lines().count(), 20_001);
    assert_eq!(
        sha256_hex(&text),
        sha256_hex(&fs::read(b.join("data.csv")).unwrap())
    );
    let m = Manifest::read(&a).unwrap();
    assert_eq!(m.commands, vec!["generate"]);
    assert!(m
        .outputs
        .iter()
        .any(|o| o.name == "data" && o.sha256 == sha256_hex(&text)));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        pote(&["generate", "--dataset", "crime", "--out-dir", out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        pote(&["train", "--mode", "cfr", "--out-dir", out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        pote(&["generate", "--dataset", "twins", "--out-dir", out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(pote(&["frobnicate"]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seeds = \"x\"").unwrap();
    assert_eq!(
        pote(&[
            "generate",
            "--config",
            bad.to_str().unwrap(),
            "--out-dir",
            out
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(pote(&["train", "--out-dir", out]).status.code(), Some(3));
    assert_eq!(pote(&["eval", "--out-dir", out]).status.code(), Some(3));
}

#[test]
fn train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    ok(&["generate", "--config", &cfg, "--out-dir", o]);
    ok(&["train", "--config", &cfg, "--seeds", "0,1", "--out-dir", o]);

    let m = Manifest::read(&out).unwrap();
    assert_eq!(m.seeds.len(), 2);
    for s in &m.seeds {
        assert_eq!(s.artifacts.len(), 5);
        for a in &s.artifacts {
            assert_eq!(a.sha256, sha256_hex(&fs::read(out.join(&a.path)).unwrap()));
        }
    }
    let estimator = fs::read(out.join("seed_0/estimator.json")).unwrap();

    ok(&["eval", "--out-dir", o]);
    let report: EvalReport =
        serde_json::from_str(&fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report.seeds, vec![0, 1]);
    assert!(report.mse_s.mean.is_finite() && report.mse_y.mean.is_finite());
    assert!(report.mse_s.std >= 0.0);
    let plot = fs::read_to_string(out.join("seed_0/plot_data.csv")).unwrap();
    assert_eq!(plot.lines().count(), 1 + 20 * 50 + 20);

    // Same config and seed reproduce the snapshot bit for bit.
    let again = dir.path().join("again");
    let a = again.to_str().unwrap();
    ok(&["generate", "--config", &cfg, "--out-dir", a]);
    ok(&["train", "--config", &cfg, "--seed", "0", "--out-dir", a]);
    assert_eq!(
        fs::read(again.join("seed_0/estimator.json")).unwrap(),
        estimator
    );

    fs::remove_file(out.join("seed_1/policy.json")).unwrap();
    assert_eq!(pote(&["eval", "--out-dir", o]).status.code(), Some(3));
}

#[test]
fn single_seed_untrained_eval_has_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fresh.toml");
    fs::write(&cfg, "seeds = [4]\n[dataset]\nn = 300\n[poe]\nwarmup_epochs = 0\npareto_epochs = 0\n[popl]\nwarmup_epochs = 0\npareto_epochs = 0\n").unwrap();
    let c = cfg.to_str().unwrap();
    let o = dir.path().to_str().unwrap();
    ok(&["generate", "--config", c, "--out-dir", o]);
    ok(&["train", "--config", c, "--out-dir", o]);
    ok(&["eval", "--out-dir", o, "--grid-points", "10"]);
    let report: EvalReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval_report.json")).unwrap())
            .unwrap();
    assert_eq!((report.mse_s.std, report.mse_y.std), (0.0, 0.0));
    assert!(report.mse_s.mean.is_finite() && report.mse_y.mean.is_finite());
}

#[test]
fn sweep_selects_by_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let o = dir.path().to_str().unwrap();
    ok(&["generate", "--config", &cfg, "--out-dir", o]);
    ok(&["sweep", "--config", &cfg, "--out-dir", o]);
    let rep: SweepReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sweep_report.json")).unwrap())
            .unwrap();
    assert_eq!(rep.rows.len(), 2);
    let best = rep.selected_row().val_loss.mean;
    assert!(rep.rows.iter().all(|r| best <= r.val_loss.mean));

    ok(&["sweep", "--config", &cfg, "--alphas", "0.5", "--out-dir", o]);
    let rep: SweepReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sweep_report.json")).unwrap())
            .unwrap();
    assert_eq!((rep.rows.len(), rep.selected), (1, 0));
}

#[test]
fn ladder_reports_every_rung() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let o = dir.path().to_str().unwrap();
    ok(&["generate", "--config", &cfg, "--out-dir", o]);
    let out = ok(&["ladder", "--config", &cfg, "--out-dir", o]);
    let text = String::from_utf8_lossy(&out.stdout);
    for rung in ["separate ", "joint ", "joint_shat ", "joint_shat_pareto "] {
        assert!(text.contains(rung), "{rung} missing from\n{text}");
    }
}
