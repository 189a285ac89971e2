//! Weighted cross-entropy, the pairwise ranking objective for the loss
//! estimator, the mse baseline and the combined objective.
//!
//! Each objective exists twice: as a plain function over slices (used for
//! evaluation and as the reference in tests) and as a recorder that appends
//! the same computation to a [`Tape`] for training.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::diff::{NodeId, Tape};
use crate::math;
use crate::seed::Rng;
use crate::{Error, Result, Tensor};

/// Which auxiliary objective trains the loss estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxKind {
    Contrastive,
    Mse,
    /// Vanilla classifier: the estimator receives no training signal.
    None,
}

impl AuxKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AuxKind::Contrastive => "contrastive",
            AuxKind::Mse => "mse",
            AuxKind::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "contrastive" => Some(AuxKind::Contrastive),
            "mse" => Some(AuxKind::Mse),
            "none" | "vanilla" => Some(AuxKind::None),
            _ => None,
        }
    }
}

/// How ranking pairs are drawn within a minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairScheme {
    /// Shuffle and pair disjointly: `n / 2` pairs.
    Disjoint,
    /// Every unordered pair `i < j`.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the auxiliary term.
    pub lambda: f64,
    /// Ranking hinge margin.
    pub margin: f64,
    /// Per-class cross-entropy weights; empty means uniform.
    pub class_weights: Vec<f64>,
    pub aux: AuxKind,
    pub pairs: PairScheme,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.5,
            margin: 0.1,
            class_weights: Vec::new(),
            aux: AuxKind::Contrastive,
            pairs: PairScheme::Disjoint,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be a nonnegative number"));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::config("margin must be a nonnegative number"));
        }
        if self.class_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::config("class weights must be positive"));
        }
        Ok(())
    }

    /// Weight for class `c`, `1.0` when no weights are configured.
    pub fn weight(&self, c: usize) -> f64 {
        self.class_weights.get(c).copied().unwrap_or(1.0)
    }
}

/// Per-sample losses and the three scalar objectives of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub per_sample: Vec<f64>,
    pub l_pri: f64,
    pub l_aux: f64,
    pub l_total: f64,
}

/// `n / (K · count_c)` for each class; classes without samples get `1`.
pub fn inverse_frequency_weights(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = alloc::vec![0usize; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 1.0 } else { n / (num_classes as f64 * c as f64) })
        .collect()
}

/// Per-sample `w_y · (−log softmax(logits)_y)` and their weighted mean
/// `Σ ℓ_i / Σ w_{y_i}`.
pub fn weighted_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<(Vec<f64>, f64)> {
    if logits.ndim() != 2 {
        return Err(Error::shape("weighted_cross_entropy", "logits must be a matrix"));
    }
    let (n, k) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            what: "labels vs logits rows",
            left: labels.len(),
            right: n,
        });
    }
    if class_weights.len() != k {
        return Err(Error::LengthMismatch {
            what: "class weights vs classes",
            left: class_weights.len(),
            right: k,
        });
    }
    let mut per = Vec::with_capacity(n);
    let mut wsum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        let row = logits.row(i);
        let nll = math::log_sum_exp(row) - row[y];
        per.push(class_weights[y] * nll);
        wsum += class_weights[y];
    }
    let l_pri = per.iter().sum::<f64>() / wsum;
    Ok((per, l_pri))
}

/// `+1` if `a > b`, `−1` otherwise (ties included).
#[inline]
pub fn indicator(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else {
        -1.0
    }
}

/// Mean over `pairs` of `max(0, −I(ℓ_i, ℓ_j)·(ℓ̂_i − ℓ̂_j) + margin)`.
pub fn contrastive_rank_loss(
    losses: &[f64],
    estimates: &[f64],
    margin: f64,
    pairs: &[(usize, usize)],
) -> Result<f64> {
    if losses.len() != estimates.len() {
        return Err(Error::LengthMismatch {
            what: "losses vs estimates",
            left: losses.len(),
            right: estimates.len(),
        });
    }
    if pairs.is_empty() {
        return Err(Error::Empty("pair set"));
    }
    let mut total = 0.0;
    for &(i, j) in pairs {
        if i >= losses.len() || j >= losses.len() {
            return Err(Error::shape("contrastive_rank_loss", "pair index out of range"));
        }
        let s = indicator(losses[i], losses[j]);
        let arg = -s * (estimates[i] - estimates[j]) + margin;
        total += if arg > 0.0 { arg } else { 0.0 };
    }
    Ok(total / pairs.len() as f64)
}

/// Mean of `(ℓ̂_i − ℓ_i)²`.
pub fn mse_aux_loss(losses: &[f64], estimates: &[f64]) -> Result<f64> {
    if losses.len() != estimates.len() {
        return Err(Error::LengthMismatch {
            what: "losses vs estimates",
            left: losses.len(),
            right: estimates.len(),
        });
    }
    if losses.is_empty() {
        return Err(Error::Empty("losses"));
    }
    let s: f64 = losses
        .iter()
        .zip(estimates)
        .map(|(l, e)| (e - l) * (e - l))
        .sum();
    Ok(s / losses.len() as f64)
}

pub fn total_loss(l_pri: f64, l_aux: f64, lambda: f64) -> f64 {
    l_pri + lambda * l_aux
}

/// Shuffles `0..n` and pairs neighbours; an odd leftover is dropped.
pub fn disjoint_pairs(n: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks_exact(2).map(|c| (c[0], c[1])).collect()
}

pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push((i, j));
        }
    }
    out
}

pub fn make_pairs(scheme: PairScheme, n: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    match scheme {
        PairScheme::Disjoint => disjoint_pairs(n, rng),
        PairScheme::All => all_pairs(n),
    }
}

/// Tape nodes of the recorded objective.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub per_sample: NodeId,
    pub l_pri: NodeId,
    pub l_aux: Option<NodeId>,
    pub total: NodeId,
}

/// Appends `weighted CE + λ·aux` to `tape` and marks it as the output.
///
/// The auxiliary targets go through a `detach`, so neither objective
/// differentiates through the per-sample losses it ranks or regresses.
pub fn record_objective(
    tape: &mut Tape,
    logits: NodeId,
    estimates: NodeId,
    labels: &[usize],
    cfg: &LossConfig,
    pairs: Vec<(usize, usize)>,
) -> LossNodes {
    let ls = tape.log_softmax(logits);
    let picked = tape.gather(ls, labels.to_vec());
    let w: Vec<f64> = labels.iter().map(|&y| cfg.weight(y)).collect();
    let wsum: f64 = w.iter().sum();
    let wc = tape.constant(Tensor::vector(w));
    let weighted = tape.mul(picked, wc);
    let per_sample = tape.scale(weighted, -1.0);
    let sum = tape.sum(per_sample);
    let l_pri = tape.scale(sum, 1.0 / wsum);

    let l_aux = match cfg.aux {
        AuxKind::None => None,
        AuxKind::Contrastive => {
            let targets = tape.detach(per_sample);
            let h = tape.pair_hinge(estimates, targets, pairs, cfg.margin);
            Some(tape.mean(h))
        }
        AuxKind::Mse => {
            let targets = tape.detach(per_sample);
            let d = tape.sub(estimates, targets);
            let sq = tape.square(d);
            Some(tape.mean(sq))
        }
    };
    let total = match l_aux {
        Some(a) => {
            let scaled = tape.scale(a, cfg.lambda);
            tape.add(l_pri, scaled)
        }
        None => tape.scale(l_pri, 1.0),
    };
    tape.set_output(total);
    LossNodes {
        per_sample,
        l_pri,
        l_aux,
        total,
    }
}

impl LossNodes {
    /// Reads the batch losses back from a forwarded tape.
    pub fn read(&self, tape: &Tape) -> BatchLoss {
        let v = |n: NodeId| tape.value(n).expect("tape was forwarded");
        BatchLoss {
            per_sample: v(self.per_sample).data().to_vec(),
            l_pri: v(self.l_pri).item(),
            l_aux: self.l_aux.map(|n| v(n).item()).unwrap_or(0.0),
            l_total: v(self.total).item(),
        }
    }
}
