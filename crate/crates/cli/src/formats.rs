//! CSV and key-value file formats.
//!
//! Floats are written with Rust's shortest round-trip formatting, so equal
//! values always produce equal bytes.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};

use lossguard_core::metrics::DetectionReport;
use lossguard_core::odin::{OdinParams, Tuned};
use lossguard_core::synthdata::LabeledSet;
use lossguard_core::training::TrainHistory;
use lossguard_core::Tensor;

fn writer(path: &Path) -> anyhow::Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))
}

fn reader(path: &Path) -> anyhow::Result<csv::Reader<fs::File>> {
    csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))
}

/// Feature columns `x0..x{d-1}`, then `label` when the set is labeled.
pub fn write_dataset(path: &Path, set: &LabeledSet) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = (0..set.dim()).map(|j| format!("x{j}")).collect();
    if set.is_labeled() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for r in 0..set.len() {
        let mut rec: Vec<String> = set.x.row(r).iter().map(f64::to_string).collect();
        if set.is_labeled() {
            rec.push(set.labels[r].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path, tag: &str) -> anyhow::Result<LabeledSet> {
    let mut r = reader(path)?;
    let header = r.headers()?.clone();
    let labeled = header.iter().next_back() == Some("label");
    let d = header.len() - usize::from(labeled);
    ensure!(d > 0, "{}: no feature columns", path.display());
    let (mut data, mut labels) = (Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        ensure!(rec.len() == header.len(), "{}: row {} has {} fields", path.display(), i + 1, rec.len());
        for f in rec.iter().take(d) {
            data.push(f.parse::<f64>().with_context(|| format!("{}: row {}: `{f}`", path.display(), i + 1))?);
        }
        if labeled {
            labels.push(rec[d].parse::<usize>().with_context(|| format!("{}: row {} label", path.display(), i + 1))?);
        }
    }
    let n = data.len() / d;
    ensure!(n > 0, "{}: no rows", path.display());
    let k = labels.iter().max().map_or(0, |m| m + 1);
    Ok(LabeledSet {
        x: Tensor::matrix(n, d, data)?,
        labels,
        class_names: (0..k).map(|c| format!("class{c}")).collect(),
        tag: tag.into(),
    })
}

pub fn write_history(path: &Path, h: &TrainHistory) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["epoch", "lr", "train_lpri", "train_laux", "val_balacc", "val_kendall_tau"])?;
    for r in &h.records {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_lpri.to_string(),
            r.train_laux.to_string(),
            r.val_balacc.to_string(),
            r.val_kendall_tau.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One line of a score dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: usize,
    pub dataset_tag: String,
    pub score: f64,
    pub label_if_known: Option<usize>,
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["sample_id", "dataset_tag", "score", "label_if_known"])?;
    for r in rows {
        w.write_record([
            r.sample_id.to_string(),
            r.dataset_tag.clone(),
            r.score.to_string(),
            r.label_if_known.map(|l| l.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> anyhow::Result<Vec<ScoreRow>> {
    let mut r = reader(path)?;
    r.deserialize()
        .map(|row| row.with_context(|| format!("bad row in {}", path.display())))
        .collect()
}

/// Detection-table column order; metric columns are in percent.
pub const DETECTION_HEADER: [&str; 6] = ["dataset", "fpr_at_tpr95", "dterr", "auroc", "aupr_in", "aupr_out"];

pub fn write_detection_table(path: &Path, rows: &[(String, DetectionReport)]) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(DETECTION_HEADER)?;
    for (tag, r) in rows {
        let mut rec = vec![tag.clone()];
        rec.extend(r.as_array().iter().map(|v| format!("{:.4}", 100.0 * v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a detection table back as `(dataset, [five metrics in percent])`.
pub fn read_detection_table(path: &Path) -> anyhow::Result<Vec<(String, [f64; 5])>> {
    let mut r = reader(path)?;
    ensure!(r.headers()?.iter().eq(DETECTION_HEADER), "{}: unexpected header", path.display());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut v = [0.0; 5];
        for (slot, f) in v.iter_mut().zip(rec.iter().skip(1)) {
            *slot = f.parse()?;
        }
        out.push((rec[0].to_string(), v));
    }
    Ok(out)
}

/// `K` sensitivity rows then a `balanced_accuracy` row.
pub fn write_classification_report(
    path: &Path,
    class_names: &[String],
    sensitivity: &[Option<f64>],
    support: &[usize],
    balanced_accuracy: f64,
) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["row", "value", "support"])?;
    for ((name, s), n) in class_names.iter().zip(sensitivity).zip(support) {
        w.write_record([name.clone(), s.map(|v| v.to_string()).unwrap_or_default(), n.to_string()])?;
    }
    w.write_record(["balanced_accuracy".to_string(), balanced_accuracy.to_string(), support.iter().sum::<usize>().to_string()])?;
    w.flush()?;
    Ok(())
}

pub fn write_predictions(path: &Path, labels: &[usize], predictions: &[usize]) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["sample_id", "label", "prediction"])?;
    for (i, (l, p)) in labels.iter().zip(predictions).enumerate() {
        w.write_record([i.to_string(), l.to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> anyhow::Result<(Vec<usize>, Vec<usize>)> {
    let mut r = reader(path)?;
    let (mut labels, mut preds) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        labels.push(rec[1].parse()?);
        preds.push(rec[2].parse()?);
    }
    Ok((labels, preds))
}

/// The tuned-parameter file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunedFile {
    pub temperature: f64,
    pub eta: f64,
    pub tau: f64,
    /// FPR@TPR95 on the tuning pair at the chosen grid point.
    pub tuning_fpr_at_tpr95: f64,
}

impl From<&Tuned> for TunedFile {
    fn from(t: &Tuned) -> Self {
        TunedFile {
            temperature: t.params.temperature,
            eta: t.params.epsilon,
            tau: t.params.threshold,
            tuning_fpr_at_tpr95: t.fpr_at_tpr95,
        }
    }
}

impl TunedFile {
    pub fn params(&self) -> OdinParams {
        OdinParams {
            temperature: self.temperature,
            epsilon: self.eta,
            threshold: self.tau,
        }
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        fs::write(path, toml::to_string(self)?).with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let t: TunedFile = toml::from_str(&text).with_context(|| format!("bad tuned-parameter file {}", path.display()))?;
        if let Err(e) = t.params().validate() {
            bail!("{}: {e}", path.display());
        }
        Ok(t)
    }
}
