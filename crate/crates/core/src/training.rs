//! Joint optimisation of predictor and estimator.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::diff::{self, Bindings, GradCheck, Gradients, Tape};
use crate::losses::{self, AuxKind, LossConfig, PairScheme};
use crate::math;
use crate::metrics;
use crate::nets::{argmax_rows, is_bias, ArchConfig, JointModel};
use crate::seed::{self, Rng};
use crate::synthdata::{augment, LabeledSet};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Draw minibatches with probability ∝ 1 / class count.
    pub weighted_sampling: bool,
    /// Fill empty `loss.class_weights` with inverse class frequencies.
    pub weighted_loss: bool,
    /// Std of the additive jitter applied to each training batch.
    pub augment_noise: f64,
    /// Per-coordinate sign-flip probability for training batches.
    pub augment_flip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            base_lr: 1e-4,
            lr_decay_factor: 0.5,
            lr_decay_every: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 5e-4,
            seed: 0,
            loss: LossConfig::default(),
            weighted_sampling: true,
            weighted_loss: true,
            augment_noise: 0.05,
            augment_flip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::config("epochs, batch_size and lr_decay_every must be positive"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr must be positive"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::config("lr_decay_factor must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("adam_eps must be positive and weight_decay nonnegative"));
        }
        if !(self.augment_noise >= 0.0) || !(0.0..=1.0).contains(&self.augment_flip) {
            return Err(Error::config("augmentation settings out of range"));
        }
        self.loss.validate()
    }
}

/// `base_lr · factor^⌊epoch / every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * math::powi(cfg.lr_decay_factor, (epoch / cfg.lr_decay_every) as i32)
}

/// Endless with-replacement index stream where each index has probability
/// proportional to the inverse size of its class.
pub struct WeightedSampler {
    dist: WeightedIndex<f64>,
    rng: Rng,
}

impl WeightedSampler {
    pub fn new(labels: &[usize], seed: u64) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("sampler labels"));
        }
        let k = labels.iter().max().copied().unwrap_or(0) + 1;
        let mut counts = alloc::vec![0usize; k];
        for &l in labels {
            counts[l] += 1;
        }
        Self::with_weights(labels.iter().map(|&l| 1.0 / counts[l] as f64), seed)
    }

    /// Uniform sampling with replacement.
    pub fn uniform(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("sampler labels"));
        }
        Self::with_weights(core::iter::repeat_n(1.0, n), seed)
    }

    fn with_weights(w: impl IntoIterator<Item = f64>, seed: u64) -> Result<Self> {
        let dist = WeightedIndex::new(w).map_err(|e| Error::config(format!("sampler weights: {e}")))?;
        Ok(WeightedSampler {
            dist,
            rng: seed::rng(seed),
        })
    }
}

impl Iterator for WeightedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.dist.sample(&mut self.rng))
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

/// One bias-corrected Adam step over every parameter that has a gradient.
///
/// Weight decay is decoupled: `lr · wd · θ` is subtracted alongside the
/// Adam update, and skipped for bias parameters.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - math::powi(cfg.beta1, t);
    let bc2 = 1.0 - math::powi(cfg.beta2, t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(Error::shape(
                format!("adam_step `{name}`"),
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::shape(format!("adam_step `{name}`"), "moment shape"));
        }
        let wd = if is_bias(name) { 0.0 } else { cfg.weight_decay };
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gv;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gv * gv;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            *pv -= lr * mhat / (math::sqrt(vhat) + cfg.adam_eps) + lr * wd * *pv;
        }
    }
    Ok(())
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_lpri: f64,
    pub train_laux: f64,
    pub val_balacc: f64,
    pub val_kendall_tau: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

/// Eval-mode statistics of a model on a labeled set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub predictions: Vec<usize>,
    pub balanced_accuracy: f64,
    /// Per-sample (weighted) cross-entropy.
    pub losses: Vec<f64>,
    pub estimates: Vec<f64>,
    /// Kendall tau-b between estimates and losses.
    pub kendall_tau: f64,
}

impl EvalStats {
    /// `Var(ℓ̂) / Var(ℓ)`.
    pub fn variance_ratio(&self) -> f64 {
        metrics::variance(&self.estimates) / metrics::variance(&self.losses)
    }
}

/// Scores a model on `set` with the given cross-entropy class weights
/// (empty = uniform).
pub fn evaluate(model: &JointModel, set: &LabeledSet, class_weights: &[f64]) -> Result<EvalStats> {
    if !set.is_labeled() {
        return Err(Error::config(format!("set `{}` has no labels", set.tag)));
    }
    let k = model.arch().num_classes;
    let (logits, est) = model.eval_forward(&set.x)?;
    let predictions = argmax_rows(&logits);
    let w: Vec<f64> = if class_weights.is_empty() {
        alloc::vec![1.0; k]
    } else {
        class_weights.to_vec()
    };
    let (losses, _) = losses::weighted_cross_entropy(&logits, &set.labels, &w)?;
    let estimates = est.into_data();
    Ok(EvalStats {
        balanced_accuracy: metrics::balanced_accuracy(&predictions, &set.labels, k)?,
        kendall_tau: metrics::kendall_tau(&estimates, &losses)?,
        predictions,
        losses,
        estimates,
    })
}

/// Resolved cross-entropy class weights for a training set under `cfg`.
pub fn resolve_class_weights(cfg: &TrainConfig, train_labels: &[usize], num_classes: usize) -> Vec<f64> {
    if !cfg.loss.class_weights.is_empty() {
        cfg.loss.class_weights.clone()
    } else if cfg.weighted_loss {
        losses::inverse_frequency_weights(train_labels, num_classes)
    } else {
        alloc::vec![1.0; num_classes]
    }
}

/// Trains predictor and estimator jointly on `train`, evaluating on `val`
/// after each epoch.
///
/// An epoch is `⌈n / batch_size⌉` minibatches drawn with replacement.
pub fn train(
    mut model: JointModel,
    train: &LabeledSet,
    val: &LabeledSet,
    cfg: &TrainConfig,
) -> Result<(JointModel, TrainHistory)> {
    cfg.validate()?;
    model.check_input(&train.x)?;
    model.check_input(&val.x)?;
    let k = model.arch().num_classes;
    for &l in train.labels.iter().chain(&val.labels) {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
    }
    if !train.is_labeled() || !val.is_labeled() {
        return Err(Error::config("training and validation sets need labels"));
    }

    let mut loss_cfg = cfg.loss.clone();
    loss_cfg.class_weights = resolve_class_weights(cfg, &train.labels, k);

    let mut sampler = if cfg.weighted_sampling {
        WeightedSampler::new(&train.labels, seed::derive(cfg.seed, "sampler"))?
    } else {
        WeightedSampler::uniform(train.len(), seed::derive(cfg.seed, "sampler"))?
    };
    let mut dropout_rng = seed::rng(seed::derive(cfg.seed, "dropout"));
    let mut pair_rng = seed::rng(seed::derive(cfg.seed, "pairs"));
    let mut augment_rng = seed::rng(seed::derive(cfg.seed, "augment"));
    let steps = train.len().div_ceil(cfg.batch_size);
    let mut state = AdamState::default();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let (mut sum_pri, mut sum_aux) = (0.0, 0.0);
        for batch in 0..steps {
            let idx: Vec<usize> = sampler.by_ref().take(cfg.batch_size).collect();
            let xb = augment(
                &train.x.select_rows(&idx),
                cfg.augment_noise,
                cfg.augment_flip,
                &mut augment_rng,
            );
            let yb: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let masks = (model.arch().dropout > 0.0).then(|| model.dropout_masks(idx.len(), &mut dropout_rng));
            let pairs = match loss_cfg.aux {
                AuxKind::Contrastive => losses::make_pairs(loss_cfg.pairs, idx.len(), &mut pair_rng),
                _ => Vec::new(),
            };
            if loss_cfg.aux == AuxKind::Contrastive && pairs.is_empty() {
                return Err(Error::config("batch too small to form ranking pairs"));
            }

            let mut tape = Tape::new();
            let (_, nodes) = model.record_joint(&mut tape, masks);
            let loss_nodes = losses::record_objective(&mut tape, nodes.logits, nodes.estimates, &yb, &loss_cfg, pairs);
            let grads = {
                let mut b = Bindings::new();
                model.bind(&mut b);
                b.bind("x", &xb);
                let total = tape.forward(&b)?.item();
                if !total.is_finite() {
                    return Err(Error::NonFinite { epoch, batch });
                }
                tape.backward(1.0)?
            };
            let bl = loss_nodes.read(&tape);
            sum_pri += bl.l_pri;
            sum_aux += bl.l_aux;
            adam_step(model.params_mut(), &grads, &mut state, lr, cfg)?;
        }
        if !model.all_finite() {
            return Err(Error::NonFinite { epoch, batch: steps });
        }
        let stats = evaluate(&model, val, &loss_cfg.class_weights)?;
        history.records.push(EpochRecord {
            epoch,
            lr,
            train_lpri: sum_pri / steps as f64,
            train_laux: sum_aux / steps as f64,
            val_balacc: stats.balanced_accuracy,
            val_kendall_tau: stats.kendall_tau,
        });
    }
    Ok((model, history))
}

/// Small architecture used by [`joint_grad_check`]; finite differences on
/// the full-size model would be slow without adding coverage.
pub fn grad_check_arch() -> ArchConfig {
    ArchConfig {
        input_dim: 5,
        hidden_dims: alloc::vec![6; 4],
        num_classes: 3,
        tap_layers: alloc::vec![0, 1, 2, 3],
        tap_embed_dim: 4,
        dropout: 0.25,
    }
}

/// Finite-difference check of the full joint objective (predictor,
/// estimator, weighted cross-entropy and the chosen auxiliary loss) with
/// respect to every parameter and the input batch.
///
/// Inputs are redrawn until every ReLU pre-activation and hinge argument
/// sits at least `1e-3` away from its kink.
pub fn joint_grad_check(seed: u64, aux: AuxKind, epsilon: f64) -> Result<GradCheck> {
    const BATCH: usize = 4;
    let arch = grad_check_arch();
    let model = JointModel::init(arch.clone(), seed::derive(seed, "gradcheck/model"))?;
    let mut rng = seed::rng(seed::derive(seed, "gradcheck/data"));
    let masks = model.dropout_masks(BATCH, &mut rng);
    let labels: Vec<usize> = (0..BATCH).map(|i| i % arch.num_classes).collect();
    let cfg = LossConfig {
        aux,
        pairs: PairScheme::All,
        class_weights: (0..arch.num_classes).map(|c| 0.5 + c as f64 * 0.75).collect(),
        ..LossConfig::default()
    };
    let mut last = None;
    for _ in 0..100 {
        let x = augment(&Tensor::zeros(&[BATCH, arch.input_dim]), 1.0, 0.0, &mut rng);
        let mut tape = Tape::new();
        let (_, nodes) = model.record_joint(&mut tape, Some(masks.clone()));
        let pairs = losses::all_pairs(BATCH);
        losses::record_objective(&mut tape, nodes.logits, nodes.estimates, &labels, &cfg, pairs);
        let mut b = Bindings::new();
        model.bind(&mut b);
        b.bind("x", &x);
        tape.forward(&b)?;
        let clear = tape.kink_margin() > 1e-3;
        let check = diff::grad_check(&mut tape, &b, epsilon)?;
        if clear {
            return Ok(check);
        }
        last = Some(check);
    }
    Ok(last.expect("at least one draw"))
}
