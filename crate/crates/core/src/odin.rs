//! ODIN scoring: temperature-scaled maximum softmax probability computed on
//! an input nudged one signed-gradient step toward higher confidence.

use alloc::vec::Vec;

use crate::diff::{Bindings, Tape};
use crate::math;
use crate::metrics;
use crate::nets::{argmax_rows, JointModel, Mode};
use crate::{Error, Result, Tensor};

pub use crate::metrics::ScoreSet;

/// Temperature, perturbation size and decision threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdinParams {
    pub temperature: f64,
    pub epsilon: f64,
    pub threshold: f64,
}

impl OdinParams {
    /// Plain max-softmax confidence.
    pub const BASELINE: OdinParams = OdinParams {
        temperature: 1.0,
        epsilon: 0.0,
        threshold: 0.5,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 1.0) {
            return Err(Error::config("temperature must be at least 1"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::config("perturbation size must be nonnegative"));
        }
        Ok(())
    }
}

/// `max_c softmax(logits / T)_c`, via log-sum-exp.
pub fn temperature_score(logits: &[f64], temperature: f64) -> f64 {
    assert!(temperature > 0.0, "temperature must be positive");
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    math::exp(max - math::log_sum_exp(&scaled))
}

/// Row-wise [`temperature_score`].
pub fn temperature_scores(logits: &Tensor, temperature: f64) -> Vec<f64> {
    (0..logits.rows())
        .map(|r| temperature_score(logits.row(r), temperature))
        .collect()
}

/// `∇ₓ log S(x, T)` for each row, with the class fixed to the argmax of
/// the unperturbed logits. Rows are independent so one backward pass over
/// the summed objective yields every row's gradient.
pub fn log_score_gradient(model: &JointModel, x: &Tensor, temperature: f64) -> Result<Tensor> {
    model.check_input(x)?;
    let (logits, _) = model.predictor_forward(x, Mode::Eval)?;
    let classes = argmax_rows(&logits);

    let mut tape = Tape::new();
    let xi = tape.input("x");
    let (li, _) = model.record_predictor(&mut tape, xi, None);
    let scaled = tape.scale(li, 1.0 / temperature);
    let ls = tape.log_softmax(scaled);
    let picked = tape.gather(ls, classes);
    tape.sum(picked);
    let mut b = Bindings::new();
    model.bind(&mut b);
    b.bind("x", x);
    tape.forward(&b)?;
    let grads = tape.backward(1.0)?;
    Ok(grads.get("x").expect("x is a leaf").clone())
}

/// `x̂ = x − η · sign(−∇ₓ log S(x, T))`, with `sign(0) = 0`.
pub fn perturb_input(model: &JointModel, x: &Tensor, temperature: f64, epsilon: f64) -> Result<Tensor> {
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let g = log_score_gradient(model, x, temperature)?;
    Ok(apply_step(x, &g, epsilon, None))
}

/// [`perturb_input`] with the result clamped to `[lo, hi]`.
pub fn perturb_input_clamped(
    model: &JointModel,
    x: &Tensor,
    temperature: f64,
    epsilon: f64,
    lo: f64,
    hi: f64,
) -> Result<Tensor> {
    let g = log_score_gradient(model, x, temperature)?;
    Ok(apply_step(x, &g, epsilon, Some((lo, hi))))
}

fn apply_step(x: &Tensor, grad: &Tensor, epsilon: f64, clamp: Option<(f64, f64)>) -> Tensor {
    let mut out = x.clone();
    for (v, g) in out.data_mut().iter_mut().zip(grad.data()) {
        *v -= epsilon * math::sign(-g);
        if let Some((lo, hi)) = clamp {
            *v = v.clamp(lo, hi);
        }
    }
    out
}

/// ODIN score of every row of `x`.
pub fn odin_scores(model: &JointModel, x: &Tensor, temperature: f64, epsilon: f64) -> Result<Vec<f64>> {
    let xp = perturb_input(model, x, temperature, epsilon)?;
    let (logits, _) = model.predictor_forward(&xp, Mode::Eval)?;
    Ok(temperature_scores(&logits, temperature))
}

/// ODIN score of a single sample (`[d]` or `[1 × d]`).
pub fn odin_score(model: &JointModel, x: &Tensor, params: &OdinParams) -> Result<f64> {
    let row = Tensor::matrix(1, x.len(), x.data().to_vec())?;
    Ok(odin_scores(model, &row, params.temperature, params.epsilon)?[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Inlier,
    Outlier,
}

/// Inlier iff `score ≥ threshold`.
pub fn detect(score: f64, threshold: f64) -> Decision {
    if score >= threshold {
        Decision::Inlier
    } else {
        Decision::Outlier
    }
}

/// Outcome of the grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct Tuned {
    pub params: OdinParams,
    /// FPR@TPR95 on the tuning pair at the chosen grid point.
    pub fpr_at_tpr95: f64,
}

fn sorted_unique(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s
}

/// Exhaustive search over `temperatures × epsilons` minimising FPR@TPR95 of
/// `in_x` against `ood_x`. Ties go to the smaller perturbation, then the
/// smaller temperature. The threshold is the TPR-95 operating point of the
/// chosen in-distribution scores.
pub fn tune_hyperparams(
    model: &JointModel,
    in_x: &Tensor,
    ood_x: &Tensor,
    temperatures: &[f64],
    epsilons: &[f64],
) -> Result<Tuned> {
    let temps = sorted_unique(temperatures);
    let eps = sorted_unique(epsilons);
    if temps.is_empty() || eps.is_empty() {
        return Err(Error::Empty("ODIN grid"));
    }
    if temps.iter().any(|&t| !(t > 0.0)) || eps.iter().any(|&e| !(e >= 0.0)) {
        return Err(Error::config("grid temperatures must be positive and perturbations nonnegative"));
    }

    // grid[ti][ei] = (fpr, in scores)
    let mut grid: Vec<Vec<(f64, Vec<f64>)>> = Vec::with_capacity(temps.len());
    for &t in &temps {
        let g_in = log_score_gradient(model, in_x, t)?;
        let g_out = log_score_gradient(model, ood_x, t)?;
        let mut row = Vec::with_capacity(eps.len());
        for &e in &eps {
            let score = |x: &Tensor, g: &Tensor| -> Result<Vec<f64>> {
                let xp = apply_step(x, g, e, None);
                let (logits, _) = model.predictor_forward(&xp, Mode::Eval)?;
                Ok(temperature_scores(&logits, t))
            };
            let s_in = score(in_x, &g_in)?;
            let s_out = score(ood_x, &g_out)?;
            let fpr = metrics::fpr_at_tpr95(&ScoreSet::new(s_in.clone(), s_out))?;
            row.push((fpr, s_in));
        }
        grid.push(row);
    }

    let mut best: Option<(usize, usize)> = None;
    for ei in 0..eps.len() {
        for ti in 0..temps.len() {
            let better = match best {
                None => true,
                Some((bt, be)) => grid[ti][ei].0 < grid[bt][be].0,
            };
            if better {
                best = Some((ti, ei));
            }
        }
    }
    let (ti, ei) = best.expect("grid is nonempty");
    let (fpr, ref s_in) = grid[ti][ei];
    Ok(Tuned {
        params: OdinParams {
            temperature: temps[ti],
            epsilon: eps[ei],
            threshold: metrics::tpr95_threshold(s_in)?,
        },
        fpr_at_tpr95: fpr,
    })
}

/// In/out ODIN scores for one pairing.
pub fn score_sets(model: &JointModel, in_x: &Tensor, out_x: &Tensor, params: &OdinParams) -> Result<ScoreSet> {
    Ok(ScoreSet::new(
        odin_scores(model, in_x, params.temperature, params.epsilon)?,
        odin_scores(model, out_x, params.temperature, params.epsilon)?,
    ))
}
