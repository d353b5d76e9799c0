use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
schema_version = 1
seed = 3
[dataset]
kind = "synthetic"
train_count = 48
test_count = 16
height = 4
width = 4
channels = 3
[model]
symbol_count = 6
[model.backbone]
kind = "mlp"
hidden = [16]
[stage1]
epochs = 1
batch_size = 16
learning_rate = 1e-3
[stage2]
epochs = 1
batch_size = 16
tokens = 4
dim = 8
depth = 1
heads = 2
cond_hidden = 8
probe_snrs = [10.0]
[eval]
snrs = [5.0, 15.0]
seeds = [0]
ablation_seeds = [0]
"#;

fn ijscc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ijscc"))
        .args(args)
        .output()
        .expect("run ijscc")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        // Top-level keys must precede the first table.
        let body = format!("output_dir = \"{}\"\n{config}", root.join("runs").display());
        let config = root.join("config.toml");
        std::fs::write(&config, body).unwrap();
        Self { _dir: dir, root, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn stage1(&self) -> PathBuf {
        let out = ijscc(&["train-stage1", "--config", s(&self.config)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        self.path("runs/stage1")
    }

    fn stage2(&self, stage1: &Path, extra: &[&str]) -> Output {
        let mut args = vec!["train-stage2", "--config", s(&self.config), "--stage1-dir", s(stage1)];
        args.extend_from_slice(extra);
        ijscc(&args)
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn stage1_writes_checkpoint_interface_and_log() {
    let ws = Workspace::new(TINY);
    let dir = ws.stage1();
    for f in ["source.safetensors", "interface.bsc", "stage1_log.jsonl", "manifest.json"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let manifest = read_json(&dir.join("manifest.json"));
    assert_eq!(manifest["bit_count"], 24);
}

#[test]
fn negative_lambda_is_a_config_error() {
    let ws = Workspace::new(&TINY.replace("[stage1]\n", "[stage1]\nlambda = -0.5\n"));
    let out = ijscc(&["train-stage1", "--config", s(&ws.config)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("stage1.lambda"), "{}", stderr(&out));
    assert!(!ws.path("runs/stage1/source.safetensors").exists());
}

#[test]
fn unknown_field_is_a_config_error() {
    let ws = Workspace::new(&TINY.replace("[stage1]\n", "[stage1]\nlamda = 1.0\n"));
    let out = ijscc(&["train-stage1", "--config", s(&ws.config)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("lamda"), "{}", stderr(&out));
}

#[test]
fn output_collision_requires_force() {
    let ws = Workspace::new(TINY);
    ws.stage1();
    let again = ijscc(&["train-stage1", "--config", s(&ws.config)]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    let forced = ijscc(&["train-stage1", "--config", s(&ws.config), "--force"]);
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
}

#[test]
fn stage2_records_ablation_and_rejects_mismatched_stage1() {
    let ws = Workspace::new(TINY);
    let stage1 = ws.stage1();
    let out = ws.stage2(&stage1, &["--ablation", "no-ian"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let dir = ws.path("runs/stage2-awgn-no-ian");
    assert!(dir.join("channel.safetensors").is_file());
    assert!(dir.join("stage2_log.jsonl").is_file());
    let manifest = read_json(&dir.join("manifest.json"));
    assert_eq!(manifest["ablation"], "no-ian");
    assert_eq!(manifest["channel"], "awgn");

    let other = Workspace::new(&TINY.replace("seed = 3", "seed = 4"));
    let out = other.stage2(&stage1, &[]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("source hash"), "{}", stderr(&out));

    let out = ws.stage2(&ws.path("missing"), &["--output", s(&ws.path("x"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn sweep_eval_export_and_plot() {
    let ws = Workspace::new(TINY);
    let stage1 = ws.stage1();
    for ch in ["awgn", "rayleigh"] {
        let out = ws.stage2(&stage1, &["--channel", ch]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let awgn = ws.path("runs/stage2-awgn-full");
    let rayleigh = ws.path("runs/stage2-rayleigh-full");
    let sweep = ws.path("sweep");
    let out = ijscc(&[
        "sweep", "--model", s(&awgn), "--model", s(&rayleigh), "--output", s(&sweep),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert!(table.starts_with("channel,cbr,snr_db,seed,mean_psnr_db"));
    assert_eq!(table.lines().count(), 1 + 2 * 2);
    assert!(sweep.join("plots/psnr_awgn_cbr0p125000.svg").is_file());
    let manifest = read_json(&sweep.join("manifest.json"));
    assert_eq!(manifest["seeds"], serde_json::json!([0]));
    let models = manifest["models"].as_array().unwrap();
    assert_eq!(models.len(), 2);
    assert_eq!(models[0]["interface_fingerprint"], models[1]["interface_fingerprint"]);

    let rerun = ws.path("sweep2");
    let out = ijscc(&[
        "sweep", "--model", s(&awgn), "--model", s(&rayleigh), "--output", s(&rerun),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(table, std::fs::read_to_string(rerun.join("sweep.csv")).unwrap());

    let out = ijscc(&["sweep", "--model", s(&awgn), "--cbr", "0.5", "--output", s(&ws.path("s3"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    let out = ijscc(&["eval", "--model", s(&awgn), "--snr", "10", "--save-images", "1", "--output", s(&ws.path("ev"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(ws.path("ev/eval.json").is_file());
    assert!(ws.path("ev/image000_original.ppm").is_file());

    let copy = ws.path("copy.bsc");
    let json = ws.path("interface.json");
    let out = ijscc(&[
        "export-interface", "--stage1-dir", s(&stage1), "--interface", s(&copy), "--output", s(&json),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(stage1.join("interface.bsc")).unwrap());
    let summary = read_json(&json);
    assert_eq!(summary["epsilon"].as_array().unwrap().len(), 24);
    assert_eq!(summary["bit_count"], 24);

    let plots = ws.path("replot");
    let out = ijscc(&["plot", "--input", s(&sweep.join("sweep.csv")), "--output", s(&plots)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(plots.join("psnr_rayleigh_cbr0p125000.svg").is_file());
}

#[test]
fn ablate_writes_table_with_all_arms() {
    let ws = Workspace::new(TINY);
    let stage1 = ws.stage1();
    let out = ijscc(&["ablate", "--config", s(&ws.config), "--stage1-dir", s(&stage1)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let dir = ws.path("runs/ablation");
    let table = std::fs::read_to_string(dir.join("ablation.csv")).unwrap();
    for arm in ["full", "no-ian", "no-iattn"] {
        assert!(table.lines().any(|l| l.starts_with(arm)), "{arm} missing:\n{table}");
    }
    assert!(dir.join("ablation.svg").is_file());
    let manifest = read_json(&dir.join("manifest.json"));
    assert_eq!(manifest["arms"].as_array().unwrap().len(), 3);
    assert!(manifest["stage1_fingerprint"].is_string());
}
