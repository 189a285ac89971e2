//! Assembly of the standard synthetic benchmark from one root seed.

use alloc::format;
use alloc::vec::Vec;

use crate::seed;
use crate::synthdata::{self, InlierSpec, LabeledSet, OodKind, OodSpec};
use crate::{Error, Result};

/// Tag of the designated far-OOD set used only for ODIN tuning.
pub const TUNE_TAG: &str = "far-tune";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub inliers: InlierSpec,
    /// Fraction of the (seen-class) inliers kept for validation.
    pub val_fraction: f64,
    /// Approximate size of the inlier pool the OOD sets are derived from
    /// (per-class rounding moves it by at most one row per class).
    pub ood_pool: usize,
    /// Classes withheld from training; empty trains on all classes.
    pub held_out: Vec<usize>,
    /// Evaluation OOD variants.
    pub ood_kinds: Vec<OodKind>,
    /// Parameter overrides for the evaluation sets; kinds not listed use
    /// [`OodSpec::standard`]. Seeds here are ignored.
    pub ood_overrides: Vec<OodSpec>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            inliers: InlierSpec::default(),
            val_fraction: 0.1,
            ood_pool: 1000,
            held_out: Vec::new(),
            ood_kinds: OodKind::ALL.to_vec(),
            ood_overrides: Vec::new(),
        }
    }
}

impl BenchConfig {
    /// The default benchmark with the three largest-index classes withheld.
    pub fn unseen_split() -> Self {
        let k = InlierSpec::default().num_classes;
        BenchConfig {
            held_out: (k - 3..k).collect(),
            ..BenchConfig::default()
        }
    }

    fn ood_spec(&self, kind: OodKind, seed: u64) -> OodSpec {
        match self.ood_overrides.iter().find(|s| s.kind == kind) {
            Some(s) => OodSpec { seed, ..s.clone() },
            None => OodSpec::standard(kind, seed),
        }
    }
}

/// Everything one run needs: training data, validation data, OOD
/// evaluation sets, the tuning set and (for unseen splits) the novel set.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: LabeledSet,
    pub val: LabeledSet,
    /// One unlabeled set per evaluation kind, tagged with the kind name.
    pub ood: Vec<LabeledSet>,
    pub tune: LabeledSet,
    /// Samples of the withheld classes, when any.
    pub novel: Option<LabeledSet>,
}

/// Builds the benchmark. The inliers and the OOD pool come from the same
/// generator draw, so the pool shares the class geometry of the training
/// data; the pool is then carved off with a stratified split.
pub fn build(cfg: &BenchConfig, root: u64) -> Result<Benchmark> {
    if cfg.ood_pool == 0 {
        return Err(Error::config("ood_pool must be positive"));
    }
    let mut spec = cfg.inliers.clone();
    spec.n += cfg.ood_pool;
    let all = synthdata::gen_inliers(&spec, seed::derive(root, "inliers"))?;
    let pool_frac = cfg.ood_pool as f64 / spec.n as f64;
    let (data, pool) = synthdata::stratified_split(&all, pool_frac, seed::derive(root, "pool-split"))?;

    let (seen, novel) = if cfg.held_out.is_empty() {
        (data, None)
    } else {
        let (s, n) = synthdata::split_unseen_classes(&data, &cfg.held_out)?;
        (s, Some(n))
    };
    let (mut train, mut val) = synthdata::stratified_split(&seen, cfg.val_fraction, seed::derive(root, "val-split"))?;
    train.tag = "train".into();
    val.tag = "val".into();
    let novel = novel.map(|mut n| {
        n.tag = "novel".into();
        n
    });

    let mut ood = Vec::with_capacity(cfg.ood_kinds.len());
    for &kind in &cfg.ood_kinds {
        let spec = cfg.ood_spec(kind, seed::derive(root, &format!("ood/{}", kind.as_str())));
        let mut set = synthdata::make_ood(&pool, &spec)?;
        set.tag = kind.as_str().into();
        ood.push(set);
    }
    let mut tune = synthdata::make_ood(&pool, &OodSpec::standard(OodKind::Far, seed::derive(root, "ood/tune")))?;
    tune.tag = TUNE_TAG.into();

    Ok(Benchmark {
        train,
        val,
        ood,
        tune,
        novel,
    })
}
