//! Pipeline stages. Each stage has an in-memory form used by the tests and
//! a `cmd_*` form that also writes its files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context};

use lossguard_core::bench::{self, Benchmark, TUNE_TAG};
use lossguard_core::losses::AuxKind;
use lossguard_core::metrics::{self, DetectionReport};
use lossguard_core::nets::JointModel;
use lossguard_core::odin::{self, OdinParams, ScoreSet, Tuned};
use lossguard_core::seed;
use lossguard_core::synthdata::LabeledSet;
use lossguard_core::training::{self, EvalStats, TrainHistory};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::formats::{self, ScoreRow, TunedFile};

/// Benchmark for a run; `unseen` withholds `data.held_out`.
pub fn benchmark(cfg: &RunConfig, unseen: bool) -> anyhow::Result<Benchmark> {
    Ok(bench::build(&cfg.bench(unseen)?, cfg.seed)?)
}

/// The benchmark a checkpoint was trained on, rebuilt from the config's
/// data settings and the checkpoint's seed and held-out classes.
pub fn benchmark_for(cfg: &RunConfig, ckpt: &Checkpoint) -> anyhow::Result<Benchmark> {
    let mut bc = cfg.bench(false)?;
    bc.held_out = ckpt.held_out.clone();
    let b = bench::build(&bc, ckpt.root_seed)?;
    let arch = ckpt.model.arch();
    ensure!(
        arch.input_dim == b.train.dim(),
        "checkpoint expects {}-dimensional inputs but the configured data has {}",
        arch.input_dim,
        b.train.dim()
    );
    ensure!(
        arch.num_classes == b.train.num_classes(),
        "checkpoint has {} classes but the configured data has {}",
        arch.num_classes,
        b.train.num_classes()
    );
    Ok(b)
}

pub fn write_benchmark(dir: &Path, b: &Benchmark) -> anyhow::Result<()> {
    let sets = [&b.train, &b.val, &b.tune].into_iter().chain(&b.ood).chain(&b.novel);
    for s in sets {
        formats::write_dataset(&dir.join(format!("{}.csv", s.tag)), s)?;
    }
    Ok(())
}

/// Writes the datasets of the full benchmark to `out/data` and, when
/// `data.held_out` is nonempty, the unseen-class split to `out/data/unseen`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    write_benchmark(&out.join("data"), &benchmark(cfg, false)?)?;
    if !cfg.data.held_out.is_empty() {
        write_benchmark(&out.join("data").join("unseen"), &benchmark(cfg, true)?)?;
    }
    Ok(())
}

/// A trained model and its validation statistics.
#[derive(Debug, Clone)]
pub struct Fit {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub val: EvalStats,
}

/// Trains one model on `b`. Every auxiliary kind starts from the same
/// initialisation and minibatch stream for a given root seed.
pub fn fit(cfg: &RunConfig, aux: AuxKind, b: &Benchmark, held_out: &[usize]) -> anyhow::Result<Fit> {
    let k = b.train.num_classes();
    let model = JointModel::init(cfg.arch(k), seed::derive(cfg.seed, "model"))?;
    let tc = cfg.train_config(aux)?;
    let (model, history) = training::train(model, &b.train, &b.val, &tc)?;
    let weights = training::resolve_class_weights(&tc, &b.train.labels, k);
    let val = training::evaluate(&model, &b.val, &weights)?;
    Ok(Fit {
        checkpoint: Checkpoint {
            model,
            aux,
            root_seed: cfg.seed,
            held_out: held_out.to_vec(),
        },
        history,
        val,
    })
}

fn snapshot(cfg: &RunConfig, aux: AuxKind, out: &Path) -> anyhow::Result<()> {
    let mut c = cfg.clone();
    c.loss.aux = aux.as_str().into();
    c.out_dir = out.to_path_buf();
    fs::write(out.join("config.toml"), c.to_toml()).context("cannot write config snapshot")
}

/// Trains and writes `model.ckpt`, `history.csv` and `config.toml` into `out`.
pub fn cmd_train(cfg: &RunConfig, unseen: bool, out: &Path) -> anyhow::Result<Fit> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let aux = cfg.aux_kind()?;
    let b = benchmark(cfg, unseen)?;
    let held: &[usize] = if unseen { &cfg.data.held_out } else { &[] };
    let f = fit(cfg, aux, &b, held)?;
    f.checkpoint.save(&out.join("model.ckpt"))?;
    formats::write_history(&out.join("history.csv"), &f.history)?;
    snapshot(cfg, aux, out)?;
    Ok(f)
}

/// Per-class sensitivity plus balanced accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class_names: Vec<String>,
    pub sensitivity: Vec<Option<f64>>,
    pub support: Vec<usize>,
    pub balanced_accuracy: f64,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
}

pub fn classify(model: &JointModel, set: &LabeledSet) -> anyhow::Result<ClassReport> {
    ensure!(set.is_labeled(), "dataset `{}` has no labels", set.tag);
    let k = model.arch().num_classes;
    let predictions = model.predict(&set.x)?;
    let mut support = vec![0; k];
    for &l in &set.labels {
        ensure!(l < k, "label {l} outside the model's {k} classes");
        support[l] += 1;
    }
    Ok(ClassReport {
        class_names: (0..k)
            .map(|c| set.class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}")))
            .collect(),
        sensitivity: metrics::per_class_sensitivity(&predictions, &set.labels, k)?,
        support,
        balanced_accuracy: metrics::balanced_accuracy(&predictions, &set.labels, k)?,
        labels: set.labels.clone(),
        predictions,
    })
}

/// Resolves a dataset argument: `train`, `val`, or a CSV path.
pub fn resolve_dataset(cfg: &RunConfig, ckpt: &Checkpoint, dataset: &str) -> anyhow::Result<LabeledSet> {
    match dataset {
        "train" | "val" => {
            let b = benchmark_for(cfg, ckpt)?;
            Ok(if dataset == "train" { b.train } else { b.val })
        }
        path => {
            let p = Path::new(path);
            ensure!(p.exists(), "dataset `{path}` is neither `train`, `val` nor an existing CSV file");
            let set = formats::read_dataset(p, path)?;
            ensure!(
                set.dim() == ckpt.model.arch().input_dim,
                "dataset has {} features but the checkpoint expects {}",
                set.dim(),
                ckpt.model.arch().input_dim
            );
            Ok(set)
        }
    }
}

/// Writes `classification.csv` and `predictions.csv` into `out`.
pub fn cmd_eval(cfg: &RunConfig, ckpt: &Checkpoint, dataset: &str, out: &Path) -> anyhow::Result<ClassReport> {
    let set = resolve_dataset(cfg, ckpt, dataset)?;
    let r = classify(&ckpt.model, &set)?;
    formats::write_classification_report(
        &out.join("classification.csv"),
        &r.class_names,
        &r.sensitivity,
        &r.support,
        r.balanced_accuracy,
    )?;
    formats::write_predictions(&out.join("predictions.csv"), &r.labels, &r.predictions)?;
    Ok(r)
}

pub fn tune(cfg: &RunConfig, model: &JointModel, b: &Benchmark) -> anyhow::Result<Tuned> {
    Ok(odin::tune_hyperparams(
        model,
        &b.val.x,
        &b.tune.x,
        &cfg.odin.temperatures,
        &cfg.odin.epsilons,
    )?)
}

/// Tunes on the designated tuning set and writes `odin.toml`.
pub fn cmd_odin_tune(cfg: &RunConfig, ckpt: &Checkpoint, out: &Path) -> anyhow::Result<Tuned> {
    let b = benchmark_for(cfg, ckpt)?;
    let t = tune(cfg, &ckpt.model, &b)?;
    fs::create_dir_all(out)?;
    TunedFile::from(&t).save(&out.join("odin.toml"))?;
    Ok(t)
}

/// Scores and the five metrics for each OOD set against `inliers`.
pub struct Detection {
    pub rows: Vec<(String, DetectionReport)>,
    pub scores: Vec<ScoreRow>,
}

pub fn detect_sets(
    model: &JointModel,
    inliers: &LabeledSet,
    outliers: &[&LabeledSet],
    params: &OdinParams,
) -> anyhow::Result<Detection> {
    let in_scores = odin::odin_scores(model, &inliers.x, params.temperature, params.epsilon)?;
    let mut scores = score_rows(&inliers.tag, &in_scores, &inliers.labels);
    let mut rows = Vec::with_capacity(outliers.len());
    for set in outliers {
        let s = odin::odin_scores(model, &set.x, params.temperature, params.epsilon)?;
        scores.extend(score_rows(&set.tag, &s, &set.labels));
        let report = DetectionReport::compute(&ScoreSet::new(in_scores.clone(), s))?;
        rows.push((set.tag.clone(), report));
    }
    Ok(Detection { rows, scores })
}

fn score_rows(tag: &str, scores: &[f64], labels: &[usize]) -> Vec<ScoreRow> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| ScoreRow {
            sample_id: i,
            dataset_tag: tag.to_string(),
            score: s,
            label_if_known: labels.get(i).copied(),
        })
        .collect()
}

/// Rebuilds the detection table from a score dump: rows tagged `in_tag`
/// are the inliers, every other tag is one OOD set (in order of first
/// appearance).
pub fn table_from_scores(rows: &[ScoreRow], in_tag: &str) -> anyhow::Result<Vec<(String, DetectionReport)>> {
    let inl: Vec<f64> = rows.iter().filter(|r| r.dataset_tag == in_tag).map(|r| r.score).collect();
    ensure!(!inl.is_empty(), "no rows tagged `{in_tag}`");
    let mut tags: Vec<&str> = Vec::new();
    for r in rows {
        if r.dataset_tag != in_tag && !tags.contains(&r.dataset_tag.as_str()) {
            tags.push(&r.dataset_tag);
        }
    }
    tags.into_iter()
        .map(|t| {
            let out = rows.iter().filter(|r| r.dataset_tag == t).map(|r| r.score).collect();
            Ok((t.to_string(), DetectionReport::compute(&ScoreSet::new(inl.clone(), out))?))
        })
        .collect()
}

/// Evaluates the configured OOD kinds (plus the tuning set when
/// `ood.include_tune_set`) and writes `ood_eval.csv` and `ood_scores.csv`.
pub fn cmd_ood_eval(cfg: &RunConfig, ckpt: &Checkpoint, params: &OdinParams, out: &Path) -> anyhow::Result<Detection> {
    let b = benchmark_for(cfg, ckpt)?;
    let d = ood_eval(cfg, &ckpt.model, &b, params)?;
    formats::write_detection_table(&out.join("ood_eval.csv"), &d.rows)?;
    formats::write_scores(&out.join("ood_scores.csv"), &d.scores)?;
    Ok(d)
}

pub fn ood_eval(cfg: &RunConfig, model: &JointModel, b: &Benchmark, params: &OdinParams) -> anyhow::Result<Detection> {
    let mut sets: Vec<&LabeledSet> = b.ood.iter().filter(|s| s.tag != TUNE_TAG).collect();
    if cfg.ood.include_tune_set {
        sets.push(&b.tune);
    }
    detect_sets(model, &b.val, &sets, params)
}

pub struct NovelOutcome {
    pub detection: Detection,
    pub warning: Option<String>,
}

/// Withheld-class samples against the validation inliers; writes
/// `novel_eval.csv` and `novel_scores.csv`.
pub fn cmd_novel_eval(cfg: &RunConfig, ckpt: &Checkpoint, params: &OdinParams, out: &Path) -> anyhow::Result<NovelOutcome> {
    let b = benchmark_for(cfg, ckpt)?;
    let (novel, warning) = match &b.novel {
        Some(n) => (n.clone(), None),
        None => {
            let mut bc = cfg.bench(true)?;
            ensure!(!bc.held_out.is_empty(), "data.held_out is empty; there are no novel classes to evaluate");
            bc.held_out = cfg.data.held_out.clone();
            let split = bench::build(&bc, ckpt.root_seed)?;
            let warning = format!(
                "checkpoint was trained on all {} classes; classes {:?} are not novel to it",
                ckpt.model.arch().num_classes,
                cfg.data.held_out
            );
            (split.novel.expect("held-out classes requested"), Some(warning))
        }
    };
    let detection = detect_sets(&ckpt.model, &b.val, &[&novel], params)?;
    formats::write_detection_table(&out.join("novel_eval.csv"), &detection.rows)?;
    formats::write_scores(&out.join("novel_scores.csv"), &detection.scores)?;
    Ok(NovelOutcome { detection, warning })
}

/// One row of the gradient self-check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradRow {
    pub seed: u64,
    pub aux: AuxKind,
    pub leaf: String,
    pub max_rel_error: f64,
}

pub struct GradReport {
    pub rows: Vec<GradRow>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.tolerance
    }
}

/// Finite-difference check of the joint objective for both auxiliary
/// kinds on each seed (step `1e-6`, tolerance `1e-5`).
pub fn gradcheck(seeds: &[u64]) -> anyhow::Result<GradReport> {
    let mut rows = Vec::new();
    for &s in seeds {
        for aux in [AuxKind::Contrastive, AuxKind::Mse] {
            let r = training::joint_grad_check(s, aux, 1e-6)?;
            rows.extend(r.per_leaf.into_iter().map(|(leaf, e)| GradRow {
                seed: s,
                aux,
                leaf,
                max_rel_error: e,
            }));
        }
    }
    Ok(GradReport { rows, tolerance: 1e-5 })
}

/// What one `reproduce-all` run measured, per model.
#[derive(Debug, Clone)]
pub struct ModelSummary {
    pub name: String,
    pub val_balanced_accuracy: f64,
    pub val_kendall_tau: f64,
    pub variance_ratio: f64,
    pub tuned: Tuned,
    pub ood: Vec<(String, DetectionReport)>,
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub full: Vec<ModelSummary>,
    pub unseen: Vec<ModelSummary>,
}

fn run_dir(out: &Path, name: &str) -> anyhow::Result<PathBuf> {
    let d = out.join(name);
    fs::create_dir_all(&d).with_context(|| format!("cannot create {}", d.display()))?;
    Ok(d)
}

/// generate → train(vanilla) → train(proposed) → tune → ood-eval, then the
/// same on the unseen-class split → novel-eval. Writes everything under
/// `out` plus the combined `detection.csv`, `novel.csv` and `summary.csv`.
pub fn reproduce_all(cfg: &RunConfig, out: &Path) -> anyhow::Result<Summary> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let proposed = cfg.aux_kind()?;
    let models = [("vanilla", AuxKind::None), ("proposed", proposed)];

    let full_bench = benchmark(cfg, false)?;
    write_benchmark(&out.join("data"), &full_bench)?;
    let mut full = Vec::new();
    let mut table = Vec::new();
    for (name, aux) in models {
        let dir = run_dir(out, name)?;
        let f = fit(cfg, aux, &full_bench, &[])?;
        f.checkpoint.save(&dir.join("model.ckpt"))?;
        formats::write_history(&dir.join("history.csv"), &f.history)?;
        snapshot(cfg, aux, &dir)?;
        let cls = classify(&f.checkpoint.model, &full_bench.val)?;
        formats::write_classification_report(
            &dir.join("classification.csv"),
            &cls.class_names,
            &cls.sensitivity,
            &cls.support,
            cls.balanced_accuracy,
        )?;
        formats::write_predictions(&dir.join("predictions.csv"), &cls.labels, &cls.predictions)?;
        let tuned = tune(cfg, &f.checkpoint.model, &full_bench)?;
        TunedFile::from(&tuned).save(&dir.join("odin.toml"))?;
        let d = ood_eval(cfg, &f.checkpoint.model, &full_bench, &tuned.params)?;
        formats::write_detection_table(&dir.join("ood_eval.csv"), &d.rows)?;
        formats::write_scores(&dir.join("ood_scores.csv"), &d.scores)?;
        table.extend(d.rows.iter().map(|(t, r)| (format!("{name}/{t}"), *r)));
        full.push(ModelSummary {
            name: name.into(),
            val_balanced_accuracy: f.val.balanced_accuracy,
            val_kendall_tau: f.val.kendall_tau,
            variance_ratio: f.val.variance_ratio(),
            tuned,
            ood: d.rows,
        });
    }
    formats::write_detection_table(&out.join("detection.csv"), &table)?;

    let mut unseen = Vec::new();
    let mut novel_table = Vec::new();
    if !cfg.data.held_out.is_empty() {
        let ub = benchmark(cfg, true)?;
        write_benchmark(&out.join("data").join("unseen"), &ub)?;
        let novel = ub.novel.as_ref().expect("held-out classes requested");
        for (name, aux) in models {
            let name = format!("unseen-{name}");
            let dir = run_dir(out, &name)?;
            let f = fit(cfg, aux, &ub, &cfg.data.held_out)?;
            f.checkpoint.save(&dir.join("model.ckpt"))?;
            formats::write_history(&dir.join("history.csv"), &f.history)?;
            snapshot(cfg, aux, &dir)?;
            let tuned = tune(cfg, &f.checkpoint.model, &ub)?;
            TunedFile::from(&tuned).save(&dir.join("odin.toml"))?;
            let d = detect_sets(&f.checkpoint.model, &ub.val, &[novel], &tuned.params)?;
            formats::write_detection_table(&dir.join("novel_eval.csv"), &d.rows)?;
            formats::write_scores(&dir.join("novel_scores.csv"), &d.scores)?;
            novel_table.extend(d.rows.iter().map(|(t, r)| (format!("{name}/{t}"), *r)));
            unseen.push(ModelSummary {
                name,
                val_balanced_accuracy: f.val.balanced_accuracy,
                val_kendall_tau: f.val.kendall_tau,
                variance_ratio: f.val.variance_ratio(),
                tuned,
                ood: d.rows,
            });
        }
        formats::write_detection_table(&out.join("novel.csv"), &novel_table)?;
    }

    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(["model", "val_balacc", "val_kendall_tau", "variance_ratio", "temperature", "eta", "tau"])?;
    for m in full.iter().chain(&unseen) {
        w.write_record([
            m.name.clone(),
            m.val_balanced_accuracy.to_string(),
            m.val_kendall_tau.to_string(),
            m.variance_ratio.to_string(),
            m.tuned.params.temperature.to_string(),
            m.tuned.params.epsilon.to_string(),
            m.tuned.params.threshold.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(Summary { full, unseen })
}
