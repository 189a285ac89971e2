//! The predictor (a ReLU trunk plus a linear head) and the loss estimator
//! that reads the trunk through tap points.
//!
//! Weight matrices are stored `[fan_in × fan_out]` and applied to row-major
//! batches as `x·W + b`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::{Bindings, NodeId, Tape};
use crate::math;
use crate::seed::{self, Rng};
use crate::{Error, Result, Tensor};

/// Network shape shared by the predictor and the estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub input_dim: usize,
    /// Widths of the predictor's hidden (trunk) layers.
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    /// Trunk layer indices whose activations feed the estimator, in order.
    pub tap_layers: Vec<usize>,
    /// Width of each tap's linear+ReLU transform.
    pub tap_embed_dim: usize,
    /// Inverted-dropout rate after each trunk layer (train mode only).
    pub dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_dim: 16,
            hidden_dims: vec![64; 4],
            num_classes: 8,
            tap_layers: vec![0, 1, 2, 3],
            tap_embed_dim: 32,
            dropout: 0.4,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden_dims must be nonempty and positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.tap_layers.is_empty() {
            return Err(Error::config("at least one tap layer is required"));
        }
        for (i, &t) in self.tap_layers.iter().enumerate() {
            if t >= self.hidden_dims.len() {
                return Err(Error::config(format!(
                    "tap layer {t} out of range for {} trunk layers",
                    self.hidden_dims.len()
                )));
            }
            if self.tap_layers[..i].contains(&t) {
                return Err(Error::config(format!("tap layer {t} listed twice")));
            }
        }
        if self.tap_embed_dim == 0 {
            return Err(Error::config("tap_embed_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Every parameter name with its shape: predictor first, then estimator.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut fan_in = self.input_dim;
        for (i, &h) in self.hidden_dims.iter().enumerate() {
            out.push((format!("f.trunk{i}.w"), vec![fan_in, h]));
            out.push((format!("f.trunk{i}.b"), vec![h]));
            fan_in = h;
        }
        out.push(("f.head.w".into(), vec![fan_in, self.num_classes]));
        out.push(("f.head.b".into(), vec![self.num_classes]));
        for (j, &t) in self.tap_layers.iter().enumerate() {
            out.push((format!("g.tap{j}.w"), vec![self.hidden_dims[t], self.tap_embed_dim]));
            out.push((format!("g.tap{j}.b"), vec![self.tap_embed_dim]));
        }
        out.push((
            "g.out.w".into(),
            vec![self.tap_layers.len() * self.tap_embed_dim, 1],
        ));
        out.push(("g.out.b".into(), vec![1]));
        out
    }
}

/// Bias parameters carry a `.b` suffix; weight decay skips them.
pub fn is_bias(name: &str) -> bool {
    name.ends_with(".b")
}

/// Whether dropout is applied during a forward pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

/// Predictor and estimator parameters plus their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    arch: ArchConfig,
    seed: u64,
    params: BTreeMap<String, Tensor>,
}

/// Nodes recorded for one joint forward pass.
#[derive(Debug, Clone)]
pub struct JointNodes {
    pub logits: NodeId,
    pub taps: Vec<NodeId>,
    pub estimates: NodeId,
}

impl JointModel {
    /// He-normal weights (variance `2 / fan_in`), zero biases.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in arch.param_shapes() {
            let t = if is_bias(&name) {
                Tensor::zeros(&shape)
            } else {
                let std = math::sqrt(2.0 / shape[0] as f64);
                let len = shape.iter().product();
                let data = (0..len)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                    .collect();
                Tensor::new(shape, data)?
            };
            params.insert(name, t);
        }
        Ok(JointModel { arch, seed, params })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_params(arch: ArchConfig, seed: u64, params: BTreeMap<String, Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        for (name, shape) in &shapes {
            let t = params
                .get(name)
                .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    format!("parameter `{name}`"),
                    format!("expected {shape:?}, got {:?}", t.shape()),
                ));
            }
            if !t.all_finite() {
                return Err(Error::config(format!("parameter `{name}` is not finite")));
            }
        }
        if params.len() != shapes.len() {
            let extra = params
                .keys()
                .find(|k| !shapes.iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::config(format!("unexpected parameter `{extra}`")));
        }
        Ok(JointModel { arch, seed, params })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn predictor_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with("f."))
            .map(|(k, v)| (k.as_str(), v))
    }

    pub fn estimator_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with("g."))
            .map(|(k, v)| (k.as_str(), v))
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Binds every parameter under its own name.
    pub fn bind<'a>(&'a self, bindings: &mut Bindings<'a>) {
        for (k, v) in &self.params {
            bindings.bind(k.clone(), v);
        }
    }

    /// Fails unless `x` is a nonempty `[n × input_dim]` batch.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != 2 || x.cols() != self.arch.input_dim {
            return Err(Error::shape(
                "model input",
                format!(
                    "model expects [n × {}], got {:?}",
                    self.arch.input_dim,
                    x.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Inverted-dropout masks (`0` or `1 / (1 - p)`) for each trunk layer.
    pub fn dropout_masks(&self, n: usize, rng: &mut Rng) -> Vec<Tensor> {
        let p = self.arch.dropout;
        let keep = 1.0 / (1.0 - p);
        self.arch
            .hidden_dims
            .iter()
            .map(|&h| {
                let data = (0..n * h)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                Tensor::new(vec![n, h], data).expect("mask shape")
            })
            .collect()
    }

    /// Records the trunk and head. Taps are the post-ReLU trunk activations
    /// (before dropout) at the configured layers.
    pub fn record_predictor(
        &self,
        tape: &mut Tape,
        x: NodeId,
        masks: Option<Vec<Tensor>>,
    ) -> (NodeId, Vec<NodeId>) {
        let mut masks = masks.map(Vec::into_iter);
        let mut h = x;
        let mut trunk = Vec::with_capacity(self.arch.hidden_dims.len());
        for i in 0..self.arch.hidden_dims.len() {
            let w = tape.param(format!("f.trunk{i}.w"));
            let b = tape.param(format!("f.trunk{i}.b"));
            let z = tape.affine(h, w, b);
            let a = tape.relu(z);
            trunk.push(a);
            h = match masks.as_mut().and_then(Iterator::next) {
                Some(m) => {
                    let m = tape.constant(m);
                    tape.mul(a, m)
                }
                None => a,
            };
        }
        let w = tape.param("f.head.w");
        let b = tape.param("f.head.b");
        let logits = tape.affine(h, w, b);
        let taps = self.arch.tap_layers.iter().map(|&t| trunk[t]).collect();
        (logits, taps)
    }

    /// Records the estimator: per-tap linear+ReLU, concat, final linear.
    /// Output is a length-`n` vector, unclamped.
    pub fn record_estimator(&self, tape: &mut Tape, taps: &[NodeId]) -> NodeId {
        let mut embeds = Vec::with_capacity(taps.len());
        for (j, &t) in taps.iter().enumerate() {
            let w = tape.param(format!("g.tap{j}.w"));
            let b = tape.param(format!("g.tap{j}.b"));
            let z = tape.affine(t, w, b);
            embeds.push(tape.relu(z));
        }
        let cat = tape.concat(&embeds);
        let w = tape.param("g.out.w");
        let b = tape.param("g.out.b");
        let out = tape.affine(cat, w, b);
        tape.flatten(out)
    }

    /// Records predictor and estimator on a fresh tape with input leaf `x`.
    pub fn record_joint(&self, tape: &mut Tape, masks: Option<Vec<Tensor>>) -> (NodeId, JointNodes) {
        let x = tape.input("x");
        let (logits, taps) = self.record_predictor(tape, x, masks);
        let estimates = self.record_estimator(tape, &taps);
        (
            x,
            JointNodes {
                logits,
                taps,
                estimates,
            },
        )
    }

    /// Logits `[n × K]` and tap activations for a batch.
    pub fn predictor_forward(&self, x: &Tensor, mode: Mode<'_>) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_input(x)?;
        let masks = match mode {
            Mode::Eval => None,
            Mode::Train(rng) => Some(self.dropout_masks(x.rows(), rng)),
        };
        let mut tape = Tape::new();
        let xi = tape.input("x");
        let (logits, taps) = self.record_predictor(&mut tape, xi, masks);
        tape.set_output(logits);
        let mut b = Bindings::new();
        self.bind(&mut b);
        b.bind("x", x);
        let logits = tape.forward(&b)?;
        let taps = taps
            .iter()
            .map(|&t| tape.value(t).expect("forward ran").clone())
            .collect();
        Ok((logits, taps))
    }

    /// Loss estimates (one per row) from tap activations.
    pub fn estimator_forward(&self, taps: &[Tensor]) -> Result<Tensor> {
        if taps.len() != self.arch.tap_layers.len() {
            return Err(Error::LengthMismatch {
                what: "tap count",
                left: taps.len(),
                right: self.arch.tap_layers.len(),
            });
        }
        let mut tape = Tape::new();
        let names: Vec<String> = (0..taps.len()).map(|j| format!("tap{j}")).collect();
        let ids: Vec<NodeId> = names.iter().map(|n| tape.input(n.clone())).collect();
        let out = self.record_estimator(&mut tape, &ids);
        tape.set_output(out);
        let mut b = Bindings::new();
        self.bind(&mut b);
        for (n, t) in names.iter().zip(taps) {
            b.bind(n.clone(), t);
        }
        tape.forward(&b)
    }

    /// Eval-mode logits and loss estimates in one pass.
    pub fn eval_forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let (_, nodes) = self.record_joint(&mut tape, None);
        tape.set_output(nodes.estimates);
        let mut b = Bindings::new();
        self.bind(&mut b);
        b.bind("x", x);
        let est = tape.forward(&b)?;
        let logits = tape.value(nodes.logits).expect("forward ran").clone();
        Ok((logits, est))
    }

    /// Argmax class per row of eval-mode logits (first index wins ties).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (logits, _) = self.predictor_forward(x, Mode::Eval)?;
        Ok(argmax_rows(&logits))
    }
}

pub fn argmax_rows(m: &Tensor) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            input_dim: 3,
            hidden_dims: vec![5, 4, 6],
            num_classes: 3,
            tap_layers: vec![0, 2],
            tap_embed_dim: 2,
            dropout: 0.4,
        }
    }

    #[test]
    fn arch_validation() {
        assert!(ArchConfig::default().validate().is_ok());
        let mut a = small_arch();
        a.tap_layers = vec![0, 0];
        assert!(a.validate().is_err());
        let mut a = small_arch();
        a.tap_layers = vec![3];
        assert!(a.validate().is_err());
        let mut a = small_arch();
        a.num_classes = 1;
        assert!(a.validate().is_err());
        let mut a = small_arch();
        a.dropout = 1.0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = JointModel::init(small_arch(), 11).unwrap();
        let b = JointModel::init(small_arch(), 11).unwrap();
        assert_eq!(a, b);
        let c = JointModel::init(small_arch(), 12).unwrap();
        assert_ne!(a, c);
        for (name, t) in a.params() {
            if is_bias(name) {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform_softmax_and_bias_estimates() {
        let mut m = JointModel::init(small_arch(), 1).unwrap();
        for t in m.params_mut().values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m.params_mut().get_mut("g.out.b").unwrap().data_mut()[0] = 0.25;
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
        let (logits, _) = m.predictor_forward(&x, Mode::Eval).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let (_, est) = m.eval_forward(&x).unwrap();
        assert_eq!(est.data(), &[0.25, 0.25]);
    }

    #[test]
    fn input_dimension_checked() {
        let m = JointModel::init(small_arch(), 1).unwrap();
        let x = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(m.predictor_forward(&x, Mode::Eval), Err(Error::Shape { .. })));
    }

    #[test]
    fn tap_count_checked() {
        let m = JointModel::init(small_arch(), 1).unwrap();
        let t = Tensor::matrix(1, 5, vec![0.0; 5]).unwrap();
        assert!(m.estimator_forward(&[t]).is_err());
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let m = JointModel::init(small_arch(), 3).unwrap();
        let x = Tensor::matrix(4, 3, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        let (a, _) = m.predictor_forward(&x, Mode::Eval).unwrap();
        let (b, _) = m.predictor_forward(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
        let mut rng = seed::rng(5);
        let (c, _) = m.predictor_forward(&x, Mode::Train(&mut rng)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn from_params_rejects_wrong_shapes() {
        let m = JointModel::init(small_arch(), 3).unwrap();
        let mut p = m.params().clone();
        assert!(JointModel::from_params(small_arch(), 3, p.clone()).is_ok());
        p.insert("f.head.b".into(), Tensor::vector(vec![0.0; 4]));
        assert!(JointModel::from_params(small_arch(), 3, p).is_err());
    }
}
