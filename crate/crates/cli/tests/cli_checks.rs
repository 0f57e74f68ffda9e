use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flatland::model::Model;
use flatland_cli::config::{parse, RunConfig};

struct Workspace {
    root: PathBuf,
}

impl Workspace {
    fn new(tag: &str) -> Self {
        let root = std::env::temp_dir().join(format!("flatland-cli-{}-{tag}", std::process::id()));
        let _ = fs::remove_dir_all(&root);
        fs::create_dir_all(&root).unwrap();
        let smoke = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
        fs::copy(smoke, root.join("smoke.toml")).unwrap();
        Workspace { root }
    }

    fn write_config(&self, name: &str, cfg: &RunConfig) {
        fs::write(self.root.join(name), toml::to_string(cfg).unwrap()).unwrap();
    }

    fn smoke(&self) -> RunConfig {
        parse(&fs::read_to_string(self.root.join("smoke.toml")).unwrap()).unwrap()
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, None)
    }

    fn run_env(&self, args: &[&str], seed: Option<&str>) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_flatland"));
        cmd.args(args).current_dir(&self.root).env_remove("FLATLAND_SEED");
        if let Some(s) = seed {
            cmd.env("FLATLAND_SEED", s);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn read(&self, rel: &str) -> String {
        fs::read_to_string(self.root.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.root);
    }
}

fn metric(csv: &str, key: &str) -> f64 {
    csv.lines()
        .find_map(|l| l.strip_prefix(&format!("{key},")))
        .unwrap_or_else(|| panic!("{key} missing from {csv}"))
        .parse()
        .unwrap()
}

#[test]
fn single_stage_run_writes_its_artifacts() {
    let ws = Workspace::new("stage1");
    ws.ok(&["train", "--config", "smoke.toml", "--stages", "1"]);
    let metrics = ws.read("runs/smoke/stage1/metrics.csv");
    assert_eq!(metrics.lines().next(), Some("epoch,lr,train_loss,val_acc"));
    assert!(metrics.lines().count() >= 2);
    let info: serde_json::Value = serde_json::from_str(&ws.read("runs/smoke/stage1/stage.json")).unwrap();
    assert_eq!(info["loss_mode"], "CE");
    assert_eq!(info["resolution"], 16);
    let manifest: serde_json::Value = serde_json::from_str(&ws.read("runs/smoke/manifest.json")).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["stages"].as_array().unwrap().len(), 1);
    assert!(!ws.root.join("runs/smoke/stage2").exists());
}

#[test]
fn later_stages_need_an_init_checkpoint() {
    let ws = Workspace::new("init");
    let out = ws.run(&["train", "--config", "smoke.toml", "--stages", "3,4"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));

    ws.ok(&["train", "--config", "smoke.toml", "--stages", "1,2"]);
    ws.ok(&["train", "--config", "smoke.toml", "--stages", "3,4", "--init", "runs/smoke/stage2/model.ckpt"]);
    assert!(ws.root.join("runs/smoke/stage4/model.ckpt").exists());
}

#[test]
fn identical_runs_produce_identical_outputs() {
    let ws = Workspace::new("determinism");
    ws.ok(&["train", "--config", "smoke.toml"]);
    let first: Vec<Vec<u8>> = (1..=4)
        .flat_map(|k| {
            let dir = ws.root.join(format!("runs/smoke/stage{k}"));
            [fs::read(dir.join("metrics.csv")).unwrap(), fs::read(dir.join("model.ckpt")).unwrap()]
        })
        .collect();
    fs::remove_dir_all(ws.root.join("runs")).unwrap();
    ws.ok(&["train", "--config", "smoke.toml"]);
    for k in 1..=4 {
        let dir = ws.root.join(format!("runs/smoke/stage{k}"));
        assert_eq!(fs::read(dir.join("metrics.csv")).unwrap(), first[2 * (k - 1)], "stage {k} metrics");
        assert_eq!(fs::read(dir.join("model.ckpt")).unwrap(), first[2 * (k - 1) + 1], "stage {k} checkpoint");
    }
    let bytes = fs::read(ws.root.join("runs/smoke/stage4/model.ckpt")).unwrap();
    let model = Model::<f32>::load(&bytes[..]).unwrap();
    let mut again = Vec::new();
    model.save(&mut again).unwrap();
    assert_eq!(again, bytes);
}

#[test]
fn all_ce_config_is_rejected_with_its_key() {
    let ws = Workspace::new("all-ce");
    let mut cfg = ws.smoke();
    for s in &mut cfg.stages {
        s.loss_mode = flatland::pipeline::LossMode::Ce;
    }
    ws.write_config("bad.toml", &cfg);
    let out = ws.run(&["train", "--config", "bad.toml"]);
    assert_ne!(out.status.code(), Some(0));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stages[1].loss_mode"), "{err}");
    assert!(!ws.root.join("runs").exists());
}

#[test]
fn unknown_config_key_names_its_path() {
    let ws = Workspace::new("unknown-key");
    fs::write(ws.root.join("typo.toml"), "[landscape]\nstep_1d = 11\n").unwrap();
    let out = ws.run(&["gen-data", "--config", "typo.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("landscape"));
}

#[test]
fn eval_reports_plain_and_tta_accuracy() {
    let ws = Workspace::new("eval");
    ws.ok(&["train", "--config", "smoke.toml"]);
    for k in [1, 4] {
        let ckpt = format!("runs/smoke/stage{k}/model.ckpt");
        ws.ok(&["eval", "--config", "smoke.toml", "--checkpoint", &ckpt, "--tta", "0"]);
        let csv = ws.read(&format!("runs/smoke/eval/stage{k}.csv"));
        assert_eq!(csv.lines().next(), Some("metric,value"));
        assert_eq!(metric(&csv, "plain_accuracy"), metric(&csv, "tta_accuracy"));
        assert_eq!(metric(&csv, "resolution"), if k == 1 { 16.0 } else { 32.0 });

        ws.ok(&["eval", "--config", "smoke.toml", "--checkpoint", &ckpt]);
        let csv = ws.read(&format!("runs/smoke/eval/stage{k}.csv"));
        assert_eq!(metric(&csv, "tta_epochs"), 2.0);
        assert!((0.0..=1.0).contains(&metric(&csv, "tta_accuracy")));
    }
    let out = ws.run(&["eval", "--config", "smoke.toml", "--checkpoint", "runs/smoke/stage1/model.ckpt", "--tta", "-1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn lodo_table_has_a_row_per_domain_and_an_average() {
    let ws = Workspace::new("lodo");
    let mut cfg = ws.smoke();
    cfg.dataset.samples_per_cell = 4;
    for s in &mut cfg.stages {
        s.max_epochs = 1;
    }
    ws.write_config("tiny.toml", &cfg);
    let stdout = ws.ok(&["eval", "--config", "tiny.toml", "--lodo", "--tta", "0"]);
    let csv = ws.read("runs/smoke/eval/lodo.csv");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "held_out_domain,accuracy");
    for (d, line) in lines[1..4].iter().enumerate() {
        assert!(line.starts_with(&format!("{d},")));
    }
    let avg = metric(&csv, "average");
    let mean = lines[1..4].iter().map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).sum::<f64>() / 3.0;
    assert!((avg - mean).abs() < 1e-12);
    assert!(stdout.contains("average"));
}

#[test]
fn landscape_slice_centre_is_the_base_loss() {
    let ws = Workspace::new("landscape");
    ws.ok(&["train", "--config", "smoke.toml", "--stages", "1"]);
    let stdout = ws.ok(&[
        "landscape",
        "--config",
        "smoke.toml",
        "--checkpoint",
        "runs/smoke/stage1/model.ckpt",
        "--mode",
        "1d",
        "--steps",
        "3",
    ]);
    let csv = ws.read("runs/smoke/landscape/stage1_1d.csv");
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][0], 0.0);
    let base: f64 = stdout.lines().find_map(|l| l.strip_prefix("base loss ")).unwrap().parse().unwrap();
    assert_eq!(rows[1][1], base);
    assert!(csv.contains("# normalization=filter"));
    assert!(ws.read("runs/smoke/landscape/stage1_1d.svg").starts_with("<svg"));

    ws.ok(&["landscape", "--config", "smoke.toml", "--checkpoint", "runs/smoke/stage1/model.ckpt", "--mode", "2d"]);
    let grid = ws.read("runs/smoke/landscape/stage1_2d.csv");
    assert_eq!(grid.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3 * 3);
}

#[test]
fn seed_variable_overrides_the_config() {
    let ws = Workspace::new("seed-env");
    let out = ws.run_env(&["train", "--config", "smoke.toml", "--stages", "1"], Some("123"));
    assert!(out.status.success());
    let manifest: serde_json::Value = serde_json::from_str(&ws.read("runs/smoke/manifest.json")).unwrap();
    assert_eq!(manifest["seed"], 123);
    let out = ws.run_env(&["train", "--config", "smoke.toml", "--stages", "1"], Some("many"));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn outputs_stay_under_the_output_directory() {
    let ws = Workspace::new("containment");
    ws.ok(&["train", "--config", "smoke.toml"]);
    ws.ok(&["eval", "--config", "smoke.toml", "--checkpoint", "runs/smoke/stage2/model.ckpt"]);
    ws.ok(&["landscape", "--config", "smoke.toml", "--checkpoint", "runs/smoke/stage2/model.ckpt"]);
    ws.ok(&["gen-data", "--config", "smoke.toml"]);
    let mut top: Vec<String> = fs::read_dir(&ws.root)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    top.sort();
    assert_eq!(top, ["runs", "smoke.toml"]);
    let runs: Vec<String> = fs::read_dir(ws.root.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(runs, ["smoke"]);
    let manifest = ws.read("runs/smoke/data/manifest.jsonl");
    assert_eq!(manifest.lines().count(), 4 * 3 * 6);
}
