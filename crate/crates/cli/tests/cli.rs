use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fusereid_core::checkpoint;
use fusereid_core::eval::embedding_file_rows;

const TINY: &str = r#"
seed = 5

[model]
parts = 2
reduction = 2

[model.encoder]
channels = 8
input_height = 16
input_width = 8
block_widths = [4, 8]
final_stride = 1

[cluster]
clusters = 4
restarts = 2

[sampler]
ids_per_batch = 3
imgs_per_id = 2

[pretrain]
epochs = 2
iters_per_epoch = 3
milestones = [1]

[finetune]
epochs = 2
iters_per_epoch = 3

[synthetic]
train_ids = 6
test_ids = 4
images_per_id = 4
query_per_id = 1
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_fusereid"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("FUSEREID_OUTPUT_DIR")
            .env_remove("FUSEREID_SEED")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn shipped_desk_config_is_the_desk_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../desk.toml");
    let cfg = fusereid_core::config::TrainConfig::load(&path).unwrap();
    assert_eq!(cfg, fusereid_core::config::TrainConfig::desk());
}

#[test]
fn pretrain_is_deterministic_and_writes_manifest() {
    let ws = Workspace::new();
    ws.ok(&["pretrain", "--config", "tiny.toml", "--seed", "3", "--output-dir", "a"]);
    ws.ok(&["pretrain", "--config", "tiny.toml", "--seed", "3", "--output-dir", "b"]);
    for f in ["student.ckpt", "loss_log.csv"] {
        assert_eq!(read(&ws.path(&format!("a/pretrain/{f}"))), read(&ws.path(&format!("b/pretrain/{f}"))), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&read(&ws.path("a/pretrain/manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["stage"], "pretrain");
    assert!(ws.path("a/pretrain/resolved_config.toml").is_file());

    // Re-running from the manifest reproduces the checkpoint.
    ws.ok(&["pretrain", "--config", "a/pretrain/manifest.json", "--output-dir", "c"]);
    assert_eq!(read(&ws.path("a/pretrain/student.ckpt")), read(&ws.path("c/pretrain/student.ckpt")));
}

#[test]
fn env_overrides_seed_and_output_dir() {
    let ws = Workspace::new();
    let out = Command::new(env!("CARGO_BIN_EXE_fusereid"))
        .args(["pretrain", "--config", "tiny.toml", "--epochs", "0"])
        .current_dir(ws.dir.path())
        .env("FUSEREID_OUTPUT_DIR", "from-env")
        .env("FUSEREID_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    let manifest: serde_json::Value = serde_json::from_slice(&read(&ws.path("from-env/pretrain/manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 11);
}

#[test]
fn zero_epochs_gives_initialization() {
    let ws = Workspace::new();
    ws.ok(&["pretrain", "--config", "tiny.toml", "--epochs", "0", "--output-dir", "z"]);
    let (state, meta) = checkpoint::load(&ws.path("z/pretrain/student.ckpt")).unwrap();
    assert_eq!(meta.epoch, 0);
    let cfg = fusereid_core::config::TrainConfig::from_toml_str(TINY).unwrap();
    let source = fusereid_core::data::source_domain(&cfg).unwrap();
    let mut zero = cfg.clone();
    zero.pretrain.epochs = 0;
    let (init, _) = fusereid_core::train::pretrain_source(&source, &zero).unwrap();
    assert_eq!(state, init);
}

#[test]
fn usage_and_config_errors_exit_2() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["pretrain", "--config", "missing.toml"])), 2);
    assert_eq!(code(&ws.run(&["pretrain"])), 2);
    assert_eq!(code(&ws.run(&["finetune", "--config", "tiny.toml", "--checkpoint", "x", "--ablation", "bogus"])), 2);

    fs::write(ws.path("bad.toml"), "[model]\nparts = 0\n").unwrap();
    assert_eq!(code(&ws.run(&["pretrain", "--config", "bad.toml"])), 2);
    fs::write(ws.path("unknown.toml"), "[model]\nwidth = 3\n").unwrap();
    assert_eq!(code(&ws.run(&["pretrain", "--config", "unknown.toml"])), 2);

    let missing_data = format!("{TINY}\n[data]\nsource_root = \"no/such/dir\"\n");
    fs::write(ws.path("nodata.toml"), missing_data).unwrap();
    assert_eq!(code(&ws.run(&["pretrain", "--config", "nodata.toml"])), 2);

    fs::write(ws.path("garbage.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&ws.run(&["finetune", "--config", "tiny.toml", "--checkpoint", "garbage.ckpt"])), 2);
    assert_eq!(code(&ws.run(&["evaluate", "--config", "tiny.toml", "--checkpoint", "absent.ckpt"])), 2);
}

#[test]
fn incompatible_checkpoint_exits_2() {
    let ws = Workspace::new();
    ws.ok(&["pretrain", "--config", "tiny.toml", "--epochs", "0", "--output-dir", "o"]);
    let wider = TINY.replace("block_widths = [4, 8]", "block_widths = [6, 8]");
    fs::write(ws.path("wider.toml"), wider).unwrap();
    let out = ws.run(&["finetune", "--config", "wider.toml", "--checkpoint", "o/pretrain/student.ckpt"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let out = ws.run(&["evaluate", "--config", "wider.toml", "--checkpoint", "o/pretrain/student.ckpt"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn full_pipeline_with_ablations_and_consistency_report() {
    let ws = Workspace::new();
    ws.ok(&["pretrain", "--config", "tiny.toml", "--output-dir", "run"]);
    let ckpt = "run/pretrain/student.ckpt";
    ws.ok(&["finetune", "--config", "tiny.toml", "--checkpoint", ckpt, "--output-dir", "run"]);
    ws.ok(&["finetune", "--config", "tiny.toml", "--checkpoint", ckpt, "--ablation", "no-fm", "--output-dir", "run"]);
    ws.ok(&["finetune", "--config", "tiny.toml", "--checkpoint", ckpt, "--ablation", "baseline", "--output-dir", "run"]);

    for variant in ["full", "no-fm", "baseline"] {
        let dir = ws.path(&format!("run/finetune-{variant}"));
        let report = fs::read_to_string(dir.join("report.csv")).unwrap();
        assert_eq!(report.lines().count(), 1 + 2, "{variant}: header plus one row per epoch");
        assert!(dir.join("teacher.ckpt").is_file());
        assert!(dir.join("labels/epoch_000.csv").is_file());
        assert!(dir.join("labels/epoch_001.csv").is_file());
        let manifest: serde_json::Value = serde_json::from_slice(&read(&dir.join("manifest.json"))).unwrap();
        assert!(manifest["resolved_config"].as_str().unwrap().contains(&format!("variant = \"{variant}\"")));
    }

    // The recomputed table matches the ARI recorded during training.
    let table = ws.ok(&["report-consistency", "--labels", "run/finetune-full/labels", "--output-dir", "run"]);
    let report = fs::read_to_string(ws.path("run/finetune-full/report.csv")).unwrap();
    let header: Vec<&str> = report.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "mean_ari").unwrap();
    for (t, r) in table.lines().skip(1).zip(report.lines().skip(1)) {
        let recomputed: f64 = t.split(',').next_back().unwrap().parse().unwrap();
        let logged: f64 = r.split(',').nth(col).unwrap().parse().unwrap();
        assert!((recomputed - logged).abs() < 1e-12);
    }
    assert!(ws.path("run/consistency/consistency.csv").is_file());

    let teacher = "run/finetune-full/teacher.ckpt";
    let full = ws.ok(&["evaluate", "--config", "tiny.toml", "--checkpoint", teacher, "--export-embeddings", "emb.bin"]);
    assert!(full.contains("dim 24"), "{full}");
    for key in ["mAP ", "CMC@1 ", "CMC@5 ", "CMC@10 "] {
        let v: f64 = full.split(key).nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key}{v}");
    }
    // 4 test ids x 4 images, all of which land in query or gallery.
    assert_eq!(embedding_file_rows(&ws.path("emb.bin")).unwrap(), 16);
    let global = ws.ok(&["evaluate", "--config", "tiny.toml", "--checkpoint", teacher, "--global-only", "--export-embeddings", "emb.csv"]);
    assert!(global.contains("dim 8"), "{global}");
    let csv = fs::read_to_string(ws.path("emb.csv")).unwrap();
    assert_eq!(csv.lines().count(), 17);
    assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 3 + 8);
}

#[test]
fn finetune_is_deterministic() {
    let ws = Workspace::new();
    ws.ok(&["pretrain", "--config", "tiny.toml", "--output-dir", "p"]);
    for out in ["x", "y"] {
        ws.ok(&["finetune", "--config", "tiny.toml", "--checkpoint", "p/pretrain/student.ckpt", "--output-dir", out]);
    }
    for f in ["teacher.ckpt", "student.ckpt", "fusion.ckpt", "loss_log.csv", "report.csv", "labels/epoch_001.csv"] {
        assert_eq!(read(&ws.path(&format!("x/finetune-full/{f}"))), read(&ws.path(&format!("y/finetune-full/{f}"))), "{f}");
    }
}

#[test]
fn synth_gen_round_trips_through_the_loader() {
    let ws = Workspace::new();
    ws.ok(&["synth-gen", "--config", "tiny.toml", "--domain", "target", "--out", "synth"]);
    let train = fusereid_core::data::load_dataset(&ws.path("synth"), fusereid_core::data::Split::Train, 16, 8).unwrap();
    assert_eq!(train.len(), 6 * 4);
    assert!(ws.path("synth/query").is_dir());
    assert!(ws.path("synth/bounding_box_test").is_dir());

    // A config pointing at the generated directory runs end to end.
    let on_disk = format!("{TINY}\n[data]\ntarget_root = \"synth\"\n");
    fs::write(ws.path("disk.toml"), on_disk).unwrap();
    ws.ok(&["pretrain", "--config", "disk.toml", "--epochs", "1", "--output-dir", "d"]);
    ws.ok(&["evaluate", "--config", "disk.toml", "--checkpoint", "d/pretrain/student.ckpt", "--output-dir", "d"]);
    assert_eq!(code(&ws.run(&["synth-gen", "--config", "tiny.toml", "--domain", "moon", "--out", "m"])), 2);
}
