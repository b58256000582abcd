use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fusereid_core::checkpoint::{self, Metadata};
use fusereid_core::cluster::{consistency_ari, PseudoLabelSets};
use fusereid_core::config::{TrainConfig, Variant};
use fusereid_core::data::{self, save_split, Split};
use fusereid_core::eval::{self, Annotations, InferenceMode};
use fusereid_core::model::init_student;
use fusereid_core::train::{self, EpochReport, StepLosses, TrainObserver};
use fusereid_core::{Error, ModelState};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::output::{self, RunManifest};

/// Problem with how the program was invoked rather than with the run itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn is_usage_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(
                e.downcast_ref::<Error>(),
                Some(Error::Config(_) | Error::Checkpoint(_) | Error::EmptyDataset(_))
            )
    })
}

/// Reads a TOML config, or the resolved config embedded in a run manifest.
fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    if !path.is_file() {
        return Err(usage(format!("config file {} does not exist", path.display())));
    }
    let mut cfg = if path.extension().is_some_and(|e| e == "json") {
        let manifest = RunManifest::read(path).map_err(|e| usage(format!("bad manifest {}: {e:#}", path.display())))?;
        TrainConfig::from_toml_str(&manifest.resolved_config)?
    } else {
        TrainConfig::load(path)?
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    for root in [&cfg.data.source_root, &cfg.data.target_root].into_iter().flatten() {
        if !root.is_dir() {
            return Err(usage(format!("dataset directory {} does not exist", root.display())));
        }
    }
    Ok(cfg)
}

fn stage_dir(output_dir: &Path, name: &str) -> Result<PathBuf> {
    let dir = output_dir.join(name);
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn meta(cfg: &TrainConfig, stage: &str, epoch: usize, network: &str) -> Metadata {
    Metadata { config_hash: cfg.hash(), stage: stage.into(), epoch, network: network.into() }
}

/// Checks that `state` holds an encoder and part experts shaped for `cfg`.
/// The classifier is ignored because its width depends on the label set.
fn check_compatible(state: &ModelState, cfg: &TrainConfig, with_experts: bool, path: &Path) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut expected = init_student(&cfg.model.encoder, cfg.model.parts, 2, &mut rng)?;
    expected.remove_prefix("classifier");
    let mut found = state.clone();
    found.remove_prefix("classifier");
    if !with_experts {
        expected = expected.subset("encoder.");
        found = found.subset("encoder.");
    }
    found
        .check_same_layout(&expected)
        .map_err(|e| Error::Checkpoint(format!("{} does not match the configured model: {e}", path.display())))?;
    Ok(())
}

pub fn pretrain(output_dir: &Path, seed: Option<u64>, config: &Path, epochs: Option<usize>) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    if let Some(e) = epochs {
        cfg.pretrain.epochs = e;
    }
    let source = data::source_domain(&cfg)?;
    info!("pretraining on {} source images", source.len());
    let (student, history) = train::pretrain_source(&source, &cfg)?;
    let dir = stage_dir(output_dir, "pretrain")?;
    checkpoint::save(&dir.join("student.ckpt"), &student, &meta(&cfg, "pretrain", history.len(), "student"))?;
    fs::write(dir.join("loss_log.csv"), output::pretrain_log(&history))?;
    RunManifest::new(config, &cfg, &dir, "pretrain", None).write(&dir)?;
    println!("wrote {}", dir.join("student.ckpt").display());
    Ok(())
}

#[derive(Default)]
struct Recorder {
    steps: Vec<(usize, usize, StepLosses)>,
    labels_dir: PathBuf,
    error: Option<std::io::Error>,
}

impl TrainObserver for Recorder {
    fn iteration(&mut self, epoch: usize, it: usize, _s: &ModelState, _t: &ModelState, losses: &StepLosses) {
        self.steps.push((epoch, it, losses.clone()));
    }

    fn epoch_end(&mut self, report: &EpochReport, labels: &PseudoLabelSets) {
        info!(
            "finetune epoch {}: loss {:.4}, mean ARI {:.3}",
            report.epoch, report.loss, report.mean_ari
        );
        let path = self.labels_dir.join(output::labels_file_name(report.epoch));
        if let Err(e) = fs::write(path, output::labels_csv(labels)) {
            self.error.get_or_insert(e);
        }
    }
}

pub fn finetune(
    output_dir: &Path,
    seed: Option<u64>,
    config: &Path,
    ckpt: &Path,
    ablation: Option<Variant>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    if let Some(v) = ablation {
        cfg.finetune.variant = v;
    }
    if let Some(e) = epochs {
        cfg.finetune.epochs = e;
    }
    let (pretrained, _) = checkpoint::load(ckpt)?;
    check_compatible(&pretrained, &cfg, true, ckpt)?;
    let (target, _, _) = data::target_domain(&cfg)?;
    let variant = cfg.finetune.variant;
    let dir = stage_dir(output_dir, &format!("finetune-{}", variant.name()))?;
    let labels_dir = dir.join("labels");
    fs::create_dir_all(&labels_dir)?;
    info!("fine-tuning variant {} on {} target images", variant.name(), target.len());

    let mut rec = Recorder { labels_dir, ..Default::default() };
    let out = train::finetune_target(&pretrained, &target, &cfg, &mut rec)?;
    if let Some(e) = rec.error {
        return Err(e).context("cannot write label files");
    }
    let epochs_done = out.reports.len();
    let nets = &out.networks;
    checkpoint::save(&dir.join("teacher.ckpt"), &nets.teacher, &meta(&cfg, "finetune", epochs_done, "teacher"))?;
    checkpoint::save(&dir.join("student.ckpt"), &nets.student, &meta(&cfg, "finetune", epochs_done, "student"))?;
    checkpoint::save(&dir.join("fusion.ckpt"), &nets.fusion, &meta(&cfg, "finetune", epochs_done, "fusion"))?;
    let parts = cfg.model.parts;
    fs::write(dir.join("report.csv"), output::epoch_report_csv(&out.reports, parts))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&out.reports)? + "\n")?;
    fs::write(dir.join("loss_log.csv"), output::step_log(&rec.steps, parts))?;
    RunManifest::new(config, &cfg, &dir, "finetune", Some(ckpt)).write(&dir)?;
    println!("wrote {}", dir.join("teacher.ckpt").display());
    Ok(())
}

pub fn evaluate(
    output_dir: &Path,
    seed: Option<u64>,
    config: &Path,
    ckpt: &Path,
    global_only: bool,
    normalize_segments: bool,
    export: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    cfg.eval.inference = InferenceMode { global_only, normalize_segments };
    let (network, _) = checkpoint::load(ckpt)?;
    check_compatible(&network, &cfg, false, ckpt)?;
    let (_, query, gallery) = data::target_domain(&cfg)?;
    let (enc, parts, mode) = (&cfg.model.encoder, cfg.model.parts, cfg.eval.inference);
    let qf = eval::extract_features(enc, &network, &query, parts, mode)?;
    let gf = eval::extract_features(enc, &network, &gallery, parts, mode)?;
    let (qa, ga) = (Annotations::from_samples(&query)?, Annotations::from_samples(&gallery)?);
    let metrics = eval::evaluate(qf.view(), &qa, gf.view(), &ga)?;

    let dir = stage_dir(output_dir, "evaluate")?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    RunManifest::new(config, &cfg, &dir, "evaluate", Some(ckpt)).write(&dir)?;
    println!(
        "mAP {:.4}  CMC@1 {:.4}  CMC@5 {:.4}  CMC@10 {:.4}  ({} queries, {} skipped, dim {})",
        metrics.map,
        metrics.cmc1,
        metrics.cmc5,
        metrics.cmc10,
        metrics.evaluated,
        metrics.skipped,
        qf.ncols()
    );
    if let Some(path) = export {
        let rows = if path.extension().is_some_and(|e| e == "csv") {
            eval::export_embeddings_csv(path, &[("query", &qa, qf.view()), ("gallery", &ga, gf.view())])?
        } else {
            eval::export_embeddings_bin(path, &[(0, &qa, qf.view()), (1, &ga, gf.view())])?
        };
        println!("exported {rows} embeddings to {}", path.display());
    }
    Ok(())
}

pub fn report_consistency(output_dir: &Path, labels_dir: &Path) -> Result<()> {
    if !labels_dir.is_dir() {
        return Err(usage(format!("label directory {} does not exist", labels_dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(labels_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(usage(format!("no epoch_NNN.csv files in {}", labels_dir.display())));
    }
    let mut table = String::new();
    for (row, path) in files.iter().enumerate() {
        let text = fs::read_to_string(path)?;
        let views = output::parse_labels_csv(&text).with_context(|| format!("in {}", path.display()))?;
        let ari = views[1..].iter().map(|v| consistency_ari(&views[0], v)).collect::<fusereid_core::Result<Vec<_>>>()?;
        if row == 0 {
            table += "file";
            for j in 1..views.len() {
                table += &format!(",ari_{j}");
            }
            table += ",mean_ari\n";
        }
        let mean = if ari.is_empty() { 1.0 } else { ari.iter().sum::<f64>() / ari.len() as f64 };
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let cells: Vec<String> = ari.iter().map(f64::to_string).collect();
        table += &format!("{name},{}{}{mean}\n", cells.join(","), if cells.is_empty() { "" } else { "," });
    }
    let dir = stage_dir(output_dir, "consistency")?;
    fs::write(dir.join("consistency.csv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn synth_gen(seed: Option<u64>, config: &Path, domain: &str, out: &Path) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let from_disk = match domain {
        "source" => cfg.data.source_root.is_some(),
        _ => cfg.data.target_root.is_some(),
    };
    if from_disk {
        return Err(usage(format!("the config reads the {domain} domain from disk; nothing to generate")));
    }
    match domain {
        "source" => save_split(out, Split::Train, &data::source_domain(&cfg)?)?,
        "target" => {
            let (train, query, gallery) = data::target_domain(&cfg)?;
            save_split(out, Split::Train, &train)?;
            save_split(out, Split::Query, &query)?;
            save_split(out, Split::Gallery, &gallery)?;
        }
        other => return Err(usage(format!("unknown domain {other:?}; expected source or target"))),
    }
    RunManifest::new(config, &cfg, out, "synth-gen", None).write(out)?;
    println!("wrote {domain} domain to {}", out.display());
    Ok(())
}
