//! Forward passes against a straight-line oracle, and end-to-end training.

mod oracle;

use lossguard_core::diff::{Bindings, Tape};
use lossguard_core::losses::{AuxKind, LossConfig};
use lossguard_core::nets::{ArchConfig, JointModel, Mode};
use lossguard_core::synthdata::{self, InlierSpec, LabeledSet};
use lossguard_core::training::{self, TrainConfig};
use lossguard_core::{seed, Error, Tensor};
use rand::Rng;

fn arch() -> ArchConfig {
    ArchConfig {
        input_dim: 4,
        hidden_dims: vec![5, 3],
        num_classes: 3,
        tap_layers: vec![0, 1],
        tap_embed_dim: 2,
        dropout: 0.3,
    }
}

/// Seeded model with every parameter, biases included, drawn at random.
fn random_model(s: u64) -> JointModel {
    let mut m = JointModel::init(arch(), s).unwrap();
    let mut rng = seed::rng(s + 100);
    for t in m.params_mut().values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    m
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn layer(m: &JointModel, prefix: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = m.param(&format!("{prefix}.w")).unwrap();
    let b = m.param(&format!("{prefix}.b")).unwrap();
    oracle::affine(x, w.data(), w.shape()[1], b.data())
}

#[test]
fn forward_matches_straight_line_recomputation() {
    let m = random_model(3);
    let x = Tensor::matrix(3, 4, vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.7, 0.0, 1.5, 1.2, 0.4, -0.8, -2.0]).unwrap();
    let (logits, est) = m.eval_forward(&x).unwrap();

    let h0 = oracle::relu(layer(&m, "f.trunk0", &rows(&x)));
    let h1 = oracle::relu(layer(&m, "f.trunk1", &h0));
    let z = layer(&m, "f.head", &h1);
    let e0 = oracle::relu(layer(&m, "g.tap0", &h0));
    let e1 = oracle::relu(layer(&m, "g.tap1", &h1));
    let cat: Vec<Vec<f64>> = e0.iter().zip(&e1).map(|(a, b)| [a.as_slice(), b.as_slice()].concat()).collect();
    let want = layer(&m, "g.out", &cat);

    assert_eq!(est.shape(), &[3]);
    for r in 0..3 {
        assert!((est.data()[r] - want[r][0]).abs() < 1e-12);
        for (got, want) in logits.row(r).iter().zip(&z[r]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    let (_, taps) = m.predictor_forward(&x, Mode::Eval).unwrap();
    assert_eq!(rows(&taps[0]), h0);
    assert_eq!(rows(&taps[1]), h1);
    assert_eq!(m.estimator_forward(&taps).unwrap(), est);
}

#[test]
fn rows_are_independent() {
    let m = random_model(4);
    let mut rng = seed::rng(9);
    let x = Tensor::matrix(6, 4, (0..24).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let (logits, est) = m.eval_forward(&x).unwrap();

    let perm = [4, 1, 5, 0, 3, 2];
    let (pl, pe) = m.eval_forward(&x.select_rows(&perm)).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(pl.row(i), logits.row(p));
        assert_eq!(pe.data()[i], est.data()[p]);
    }
    for r in 0..6 {
        let (l1, e1) = m.eval_forward(&x.select_rows(&[r])).unwrap();
        assert!(l1.max_abs_diff(&Tensor::matrix(1, 3, logits.row(r).to_vec()).unwrap()) < 1e-12);
        assert!((e1.data()[0] - est.data()[r]).abs() < 1e-12);
    }
    assert_eq!(m.eval_forward(&x).unwrap(), (logits, est));
}

#[test]
fn backward_is_linear_and_deterministic() {
    let m = random_model(5);
    let x = Tensor::matrix(2, 4, vec![0.3, -0.2, 1.1, 0.9, -1.4, 0.6, 0.2, 0.8]).unwrap();
    let grads = |a: f64, b: f64| {
        let mut tape = Tape::new();
        let (_, nodes) = m.record_joint(&mut tape, None);
        let f = tape.sum(nodes.logits);
        let g = tape.sum(nodes.estimates);
        let fa = tape.scale(f, a);
        let gb = tape.scale(g, b);
        tape.add(fa, gb);
        let mut bind = Bindings::new();
        m.bind(&mut bind);
        bind.bind("x", &x);
        tape.forward(&bind).unwrap();
        tape.backward(1.0).unwrap().into_map()
    };
    let gf = grads(1.0, 0.0);
    let gg = grads(0.0, 1.0);
    let mix = grads(2.5, -0.75);
    for (name, t) in &mix {
        for ((v, f), g) in t.data().iter().zip(gf[name].data()).zip(gg[name].data()) {
            assert!((v - (2.5 * f - 0.75 * g)).abs() < 1e-12, "{name}");
        }
    }
    assert_eq!(grads(2.5, -0.75), mix);
}

fn blobs() -> (LabeledSet, LabeledSet) {
    let spec = InlierSpec {
        num_classes: 2,
        dim: 4,
        n: 600,
        imbalance_ratio: 1.0,
        separation: 6.0,
        base_spread: 0.5,
    };
    let data = synthdata::gen_inliers(&spec, 21).unwrap();
    synthdata::stratified_split(&data, 0.2, 22).unwrap()
}

fn blob_config(aux: AuxKind) -> (ArchConfig, TrainConfig) {
    let arch = ArchConfig {
        input_dim: 4,
        hidden_dims: vec![16, 16],
        num_classes: 2,
        tap_layers: vec![0, 1],
        tap_embed_dim: 8,
        dropout: 0.1,
    };
    let cfg = TrainConfig {
        epochs: 20,
        base_lr: 1e-3,
        seed: 7,
        loss: LossConfig {
            aux,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    (arch, cfg)
}

#[test]
fn separable_blobs_are_learned() {
    let (train, val) = blobs();
    let (arch, cfg) = blob_config(AuxKind::Contrastive);
    let (_, hist) = training::train(JointModel::init(arch, 1).unwrap(), &train, &val, &cfg).unwrap();
    assert_eq!(hist.records.len(), 20);
    let last = hist.records.last().unwrap();
    assert!(last.val_balacc >= 0.95, "balanced accuracy {}", last.val_balacc);
}

#[test]
fn training_is_bitwise_reproducible() {
    let (train, val) = blobs();
    let (arch, mut cfg) = blob_config(AuxKind::Contrastive);
    cfg.epochs = 3;
    let a = training::train(JointModel::init(arch.clone(), 1).unwrap(), &train, &val, &cfg).unwrap();
    let b = training::train(JointModel::init(arch.clone(), 1).unwrap(), &train, &val, &cfg).unwrap();
    assert_eq!(a, b);
    cfg.seed = 8;
    let c = training::train(JointModel::init(arch, 1).unwrap(), &train, &val, &cfg).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn vanilla_training_leaves_estimator_untouched() {
    let (train, val) = blobs();
    let (arch, mut cfg) = blob_config(AuxKind::None);
    cfg.epochs = 2;
    cfg.weight_decay = 0.0;
    let init = JointModel::init(arch, 1).unwrap();
    let (trained, hist) = training::train(init.clone(), &train, &val, &cfg).unwrap();
    assert!(hist.records.iter().all(|r| r.train_laux == 0.0));
    for (name, t) in trained.estimator_params() {
        assert_eq!(t, init.param(name).unwrap(), "{name}");
    }
    assert_ne!(trained.param("f.head.w"), init.param("f.head.w"));
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let (mut train, val) = blobs();
    train.x.data_mut().iter_mut().for_each(|v| *v *= 1e308);
    let (arch, cfg) = blob_config(AuxKind::Contrastive);
    let err = training::train(JointModel::init(arch, 1).unwrap(), &train, &val, &cfg).unwrap_err();
    assert!(matches!(err, Error::NonFinite { epoch: 0, .. }), "{err}");
}
