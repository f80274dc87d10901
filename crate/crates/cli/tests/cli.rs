use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use far_core::data;

const SMALL: &str = "\
data.train_per_domain = 32
data.test_per_domain = 16
epochs = 2
batch_per_domain = 4
log_every = 4
lr_init = 0.01
";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let text = format!("{SMALL}data.dir = {}\n{extra}", data_dir.display());
        fs::write(dir.path().join("run.cfg"), text).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn far(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_far"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.far(args);
        assert!(
            out.status.success(),
            "far {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn gen(&self) {
        self.ok(&["dataset", "gen", "--config", "run.cfg"]);
    }
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn dataset_gen_writes_eight_files_and_manifest() {
    let ws = Workspace::new("");
    ws.gen();
    let files: Vec<_> = fs::read_dir(ws.path("data"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(files.iter().filter(|f| f.ends_with(".fard")).count(), 8);
    let manifest: serde_json::Value = serde_json::from_str(&read(ws.path("data/manifest.json"))).unwrap();
    assert_eq!(manifest["files"].as_array().unwrap().len(), 8);

    let set = data::load(ws.path("data/domain2_test.fard")).unwrap();
    assert_eq!(set.len(), 16);
    assert_eq!(set.domain_id, 2);
}

#[test]
fn dataset_gen_is_deterministic_and_hash_tracks_spec() {
    let ws = Workspace::new("");
    ws.ok(&["dataset", "gen", "--config", "run.cfg", "--out", "a"]);
    ws.ok(&["dataset", "gen", "--config", "run.cfg", "--out", "b"]);
    for f in ["domain0_train.fard", "domain3_test.fard", "manifest.json"] {
        assert_eq!(fs::read(ws.path(&format!("a/{f}"))).unwrap(), fs::read(ws.path(&format!("b/{f}"))).unwrap());
    }
    ws.ok(&["dataset", "gen", "--config", "run.cfg", "--out", "c", "--set", "domain.1.rho=0.5"]);
    let hashes = |dir: &str| -> Vec<String> {
        let m: serde_json::Value = serde_json::from_str(&read(ws.path(&format!("{dir}/manifest.json")))).unwrap();
        m["files"]
            .as_array()
            .unwrap()
            .iter()
            .map(|f| f["spec_hash"].as_str().unwrap().to_string())
            .collect()
    };
    let (a, c) = (hashes("a"), hashes("c"));
    for (i, (x, y)) in a.iter().zip(&c).enumerate() {
        // files are listed domain-major, two splits each
        assert_eq!(x != y, i / 2 == 1, "file {i}");
    }
}

#[test]
fn inspect_reports_header() {
    let ws = Workspace::new("");
    ws.gen();
    let out = ws.ok(&["dataset", "inspect", "data/domain1_train.fard"]);
    assert!(out.contains("domain 1"), "{out}");
    assert!(out.contains("32 images of 3x16x16"), "{out}");
}

#[test]
fn dry_run_prints_config_and_trains_nothing() {
    let ws = Workspace::new("");
    let out = ws.ok(&["train", "--config", "run.cfg", "--dry-run", "--out", "run"]);
    assert!(out.contains("epochs = 2"));
    assert!(out.contains("lr_init = 0.01"));
    assert!(!ws.path("run").exists());
}

#[test]
fn train_writes_run_directory_with_expected_rows() {
    let ws = Workspace::new("");
    ws.gen();
    ws.ok(&["train", "--config", "run.cfg", "--out", "run"]);
    let metrics = read(ws.path("run/metrics.csv"));
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,step,lr,l_cls,l_align,l_dre_plus,l_dre_minus,l_consist,acc_d0,acc_d1,acc_d2,acc_d3"
    );
    // 8 steps per epoch, a step row every 4 steps, one epoch row
    assert_eq!(lines.count(), 2 * (1 + 2));
    assert!(ws.path("run/checkpoint.farc").exists());
    assert!(read(ws.path("run/config.txt")).contains("variant = FAR"));
}

#[test]
fn identical_config_and_seed_give_identical_metrics() {
    let ws = Workspace::new("");
    ws.gen();
    ws.ok(&["train", "--config", "run.cfg", "--out", "r1", "--seed", "3"]);
    ws.ok(&["train", "--config", "run.cfg", "--out", "r2", "--seed", "3"]);
    assert_eq!(fs::read(ws.path("r1/metrics.csv")).unwrap(), fs::read(ws.path("r2/metrics.csv")).unwrap());
    // the snapshot reproduces the run
    ws.ok(&["train", "--config", "r1/config.txt", "--out", "r3"]);
    assert_eq!(fs::read(ws.path("r1/metrics.csv")).unwrap(), fs::read(ws.path("r3/metrics.csv")).unwrap());
    ws.ok(&["train", "--config", "run.cfg", "--out", "r4", "--seed", "4"]);
    assert_ne!(fs::read(ws.path("r1/metrics.csv")).unwrap(), fs::read(ws.path("r4/metrics.csv")).unwrap());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let ws = Workspace::new("epochs = 3\n");
    ws.gen();
    ws.ok(&["train", "--config", "run.cfg", "--out", "full"]);
    ws.ok(&["train", "--config", "run.cfg", "--out", "part", "--stop-after", "1"]);
    fs::copy(ws.path("part/checkpoint.farc"), ws.path("epoch1.farc")).unwrap();
    ws.ok(&["train", "--config", "run.cfg", "--out", "part", "--resume", "epoch1.farc"]);
    assert_eq!(read(ws.path("full/metrics.csv")), read(ws.path("part/metrics.csv")));
    assert_eq!(
        fs::read(ws.path("full/checkpoint.farc")).unwrap(),
        fs::read(ws.path("part/checkpoint.farc")).unwrap()
    );
}

#[test]
fn errors_use_stable_prefix_and_nonzero_exit() {
    let ws = Workspace::new("");
    let out = ws.far(&["train", "--config", "run.cfg", "--out", "run"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("far-error:"), "{err}");
    assert!(err.contains("domain0_train.fard"), "missing file not named: {err}");

    let out = ws.far(&["train", "--config", "run.cfg", "--set", "epoch=3", "--dry-run"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("far-error:") && err.contains("unknown key"), "{err}");

    let out = ws.far(&["no-such-command"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("far-error:"));

    assert!(ws.far(&["--help"]).status.success());
}

#[test]
fn ablation_single_variant_single_seed() {
    let ws = Workspace::new("epochs = 1\nablation.variants = Baseline\nablation.seeds = 0\n");
    ws.gen();
    ws.ok(&["ablation", "--config", "run.cfg", "--out", "abl"]);
    let summary = read(ws.path("abl/summary.csv"));
    assert_eq!(summary.lines().count(), 2, "{summary}");
    assert!(summary.lines().nth(1).unwrap().starts_with("Baseline,3,"));
    let verdict: serde_json::Value = serde_json::from_str(&read(ws.path("abl/verdict.json"))).unwrap();
    assert!(verdict["ordering_holds"].is_null());
}

#[test]
fn ablation_summary_is_mean_of_runs_and_independent_of_workers() {
    let ws = Workspace::new("epochs = 1\nablation.variants = Baseline,FARNoTS\nablation.seeds = 0,1\n");
    ws.gen();
    ws.ok(&["ablation", "--config", "run.cfg", "--out", "one"]);
    let out = Command::new(env!("CARGO_BIN_EXE_far"))
        .args(["ablation", "--config", "run.cfg", "--out", "two"])
        .env("FAR_THREADS", "2")
        .current_dir(ws.dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["runs.csv", "summary.csv", "verdict.json"] {
        assert_eq!(read(ws.path(&format!("one/{f}"))), read(ws.path(&format!("two/{f}"))), "{f}");
    }

    let runs = read(ws.path("one/runs.csv"));
    let summary = read(ws.path("one/summary.csv"));
    for variant in ["Baseline", "FARNoTS"] {
        let accs: Vec<f64> = runs
            .lines()
            .skip(1)
            .filter(|l| l.starts_with(&format!("{variant},")))
            .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
            .collect();
        assert_eq!(accs.len(), 2);
        let mean: f64 = summary
            .lines()
            .find(|l| l.starts_with(&format!("{variant},")))
            .unwrap()
            .split(',')
            .nth(2)
            .unwrap()
            .parse()
            .unwrap();
        assert!((mean - (accs[0] + accs[1]) / 2.0).abs() < 1e-8);
    }
}

#[test]
fn diagnose_exports_reports_maps_and_features() {
    let ws = Workspace::new("epochs = 1\ndiagnose.samples = 2\n");
    ws.gen();
    ws.ok(&["train", "--config", "run.cfg", "--out", "run"]);
    ws.ok(&["diagnose", "--config", "run.cfg", "--checkpoint", "run/checkpoint.farc", "--out", "diag"]);

    let report: serde_json::Value = serde_json::from_str(&read(ws.path("diag/divergence_report.json"))).unwrap();
    let stages: Vec<&str> = report["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["stage"].as_str().unwrap())
        .collect();
    assert_eq!(stages, ["F", "A", "A+R+"]);
    for s in report["stages"].as_array().unwrap() {
        let m = s["matrix"].as_array().unwrap();
        assert_eq!(m.len(), 4);
        for (i, row) in m.iter().enumerate() {
            assert_eq!(row[i].as_f64().unwrap(), 0.0);
        }
    }

    let pgm = read(ws.path("diag/maps/domain0_sample0_F.pgm"));
    let mut lines = pgm.lines();
    assert_eq!(lines.next(), Some("P2"));
    assert_eq!(lines.next(), Some("2 2"));
    // 4 domains × 2 samples × 3 stages
    assert_eq!(fs::read_dir(ws.path("diag/maps")).unwrap().count(), 24);

    let features = read(ws.path("diag/features.csv"));
    assert_eq!(features.lines().count() - 1, 4 * 16 * 3);
}

#[test]
fn diagnose_rejects_mismatched_architecture() {
    let ws = Workspace::new("epochs = 1\n");
    ws.gen();
    ws.ok(&["train", "--config", "run.cfg", "--out", "run", "--set", "variant=FARConv"]);
    let out = ws.far(&["diagnose", "--config", "run.cfg", "--checkpoint", "run/checkpoint.farc"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("far-error:"), "{err}");
    assert!(err.contains("align."), "parameter not named: {err}");
}

#[test]
fn uda_run_ignores_target_labels() {
    let ws = Workspace::new("mode = uda\n");
    ws.gen();
    ws.ok(&["train", "--config", "run.cfg", "--out", "with_labels"]);
    let target = ws.path("data/domain3_train.fard");
    let unlabeled = data::load(&target).unwrap().without_labels();
    data::save(&unlabeled, &target).unwrap();
    ws.ok(&["train", "--config", "run.cfg", "--out", "without_labels"]);
    assert_eq!(
        fs::read(ws.path("with_labels/metrics.csv")).unwrap(),
        fs::read(ws.path("without_labels/metrics.csv")).unwrap()
    );
}
