//! Run manifests and the CSV logs written next to checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fusereid_core::cluster::PseudoLabelSets;
use fusereid_core::config::TrainConfig;
use fusereid_core::train::{EpochReport, PretrainEpoch, StepLosses};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Everything needed to repeat a command. `resolved_config` is the complete
/// TOML rendering after command-line overrides, so passing the manifest back
/// as `--config` reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_path: PathBuf,
    pub resolved_config: String,
    pub config_hash: String,
    pub output_dir: PathBuf,
    pub stage: String,
    pub seed: u64,
    /// Checkpoint the command started from, if any.
    pub input_checkpoint: Option<PathBuf>,
}

impl RunManifest {
    pub fn new(config_path: &Path, cfg: &TrainConfig, output_dir: &Path, stage: &str, input: Option<&Path>) -> Self {
        Self {
            config_path: config_path.to_path_buf(),
            resolved_config: cfg.to_toml_string(),
            config_hash: cfg.hash(),
            output_dir: output_dir.to_path_buf(),
            stage: stage.to_string(),
            seed: cfg.seed,
            input_checkpoint: input.map(Path::to_path_buf),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
        fs::write(dir.join(RESOLVED_CONFIG_FILE), &self.resolved_config)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn join<T: ToString>(values: impl IntoIterator<Item = T>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn pretrain_log(history: &[PretrainEpoch]) -> String {
    let mut out = String::from("epoch,lr,iterations,loss,cls,tri\n");
    for h in history {
        writeln!(out, "{},{},{},{},{},{}", h.epoch, h.lr, h.iterations, h.loss, h.cls, h.tri).expect("string write");
    }
    out
}

/// One row per optimizer step of the target stage.
pub fn step_log(steps: &[(usize, usize, StepLosses)], parts: usize) -> String {
    let mut out = String::from("epoch,iteration,total,cls,tri");
    for j in 1..=parts {
        write!(out, ",part_tri_{j}").expect("string write");
    }
    out.push('\n');
    for (epoch, it, l) in steps {
        write!(out, "{epoch},{it},{},{},{}", l.total, l.cls, l.tri).expect("string write");
        for j in 0..parts {
            match l.part_tri.get(j) {
                Some(v) => write!(out, ",{v}"),
                None => write!(out, ","),
            }
            .expect("string write");
        }
        out.push('\n');
    }
    out
}

/// One row per target epoch. Missing values (parts of the baseline, purity
/// without annotations) are left empty.
pub fn epoch_report_csv(reports: &[EpochReport], parts: usize) -> String {
    let mut head = vec!["epoch".to_string(), "loss".into(), "cls".into(), "tri".into()];
    head.extend((1..=parts).map(|j| format!("part_tri_{j}")));
    head.extend((1..=parts).map(|j| format!("ari_{j}")));
    head.push("mean_ari".into());
    head.extend((0..=parts).map(|v| format!("purity_{v}")));
    head.push("clusters".into());
    let mut out = head.join(",") + "\n";
    let cell = |v: Option<&f64>| v.map_or(String::new(), f64::to_string);
    for r in reports {
        let mut row = vec![r.epoch.to_string(), r.loss.to_string(), r.cls.to_string(), r.tri.to_string()];
        row.extend((0..parts).map(|j| cell(r.part_tri.get(j))));
        row.extend((0..parts).map(|j| cell(r.ari.get(j))));
        row.push(r.mean_ari.to_string());
        row.extend((0..=parts).map(|v| cell(r.purity.as_ref().and_then(|p| p.get(v)))));
        row.push(r.cluster_sizes.first().map_or(0, |s| s.iter().filter(|&&n| n > 0).count()).to_string());
        out += &(row.join(",") + "\n");
    }
    out
}

pub fn labels_file_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.csv")
}

/// `sample,view0,view1,...` with one row per target sample.
pub fn labels_csv(labels: &PseudoLabelSets) -> String {
    let mut out = String::from("sample");
    for v in 0..labels.num_views() {
        write!(out, ",view{v}").expect("string write");
    }
    out.push('\n');
    for i in 0..labels.num_samples() {
        writeln!(out, "{i},{}", join(labels.sample(i))).expect("string write");
    }
    out
}

/// Parses a file written by [`labels_csv`] back into per-view label vectors.
pub fn parse_labels_csv(text: &str) -> Result<Vec<Vec<usize>>> {
    let mut lines = text.lines();
    let header = lines.next().context("empty label file")?;
    let views = header.split(',').count().saturating_sub(1);
    anyhow::ensure!(views > 0, "label file header has no view columns");
    let mut out = vec![Vec::new(); views];
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        anyhow::ensure!(cells.len() == views + 1, "line {} has {} cells, expected {}", n + 2, cells.len(), views + 1);
        for (v, c) in cells[1..].iter().enumerate() {
            out[v].push(c.trim().parse().with_context(|| format!("bad label {c:?} on line {}", n + 2))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        let labels = PseudoLabelSets { views: vec![vec![0, 1, 1], vec![2, 0, 1]], clusters: vec![2, 3] };
        let parsed = parse_labels_csv(&labels_csv(&labels)).unwrap();
        assert_eq!(parsed, labels.views);
    }

    #[test]
    fn malformed_labels_rejected() {
        assert!(parse_labels_csv("").is_err());
        assert!(parse_labels_csv("sample\n0\n").is_err());
        assert!(parse_labels_csv("sample,view0\n0,x\n").is_err());
        assert!(parse_labels_csv("sample,view0,view1\n0,1\n").is_err());
    }

    #[test]
    fn report_leaves_missing_parts_empty() {
        let r = EpochReport {
            epoch: 0,
            loss: 1.5,
            cls: 1.0,
            tri: 0.5,
            part_tri: vec![],
            ari: vec![],
            mean_ari: 1.0,
            purity: None,
            cluster_sizes: vec![vec![2, 0, 1]],
        };
        let csv = epoch_report_csv(&[r], 2);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,loss,cls,tri,part_tri_1,part_tri_2,ari_1,ari_2,mean_ari,purity_0,purity_1,purity_2,clusters"
        );
        assert_eq!(lines.next().unwrap(), "0,1.5,1,0.5,,,,,1,,,,2");
    }
}
