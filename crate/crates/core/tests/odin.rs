//! ODIN scoring and tuning on hand-built and random models.

use std::collections::BTreeMap;

use lossguard_core::metrics::{self, ScoreSet};
use lossguard_core::nets::{ArchConfig, JointModel};
use lossguard_core::odin::{self, OdinParams};
use lossguard_core::{seed, Tensor};
use rand::Rng;

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        input_dim: 2,
        hidden_dims: vec![2],
        num_classes: 2,
        tap_layers: vec![0],
        tap_embed_dim: 1,
        dropout: 0.0,
    }
}

/// Identity trunk with bias `trunk_b`, then a head `h · head_w + head_b`.
fn hand_model(trunk_b: f64, head_w: [f64; 4], head_b: [f64; 2]) -> JointModel {
    let t = |shape: &[usize], v: Vec<f64>| Tensor::new(shape.to_vec(), v).unwrap();
    let params: BTreeMap<String, Tensor> = [
        ("f.trunk0.w", t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])),
        ("f.trunk0.b", t(&[2], vec![trunk_b; 2])),
        ("f.head.w", t(&[2, 2], head_w.to_vec())),
        ("f.head.b", t(&[2], head_b.to_vec())),
        ("g.tap0.w", t(&[2, 1], vec![0.0; 2])),
        ("g.tap0.b", t(&[1], vec![0.0])),
        ("g.out.w", t(&[1, 1], vec![0.0])),
        ("g.out.b", t(&[1], vec![0.0])),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    JointModel::from_params(tiny_arch(), 0, params).unwrap()
}

fn random_model(s: u64) -> JointModel {
    let arch = ArchConfig {
        input_dim: 5,
        hidden_dims: vec![8, 8],
        num_classes: 3,
        tap_layers: vec![1],
        tap_embed_dim: 2,
        dropout: 0.0,
    };
    JointModel::init(arch, s).unwrap()
}

fn gaussian_rows(n: usize, d: usize, scale: f64, s: u64) -> Tensor {
    let mut rng = seed::rng(s);
    Tensor::matrix(n, d, (0..n * d).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn linear_model_step_follows_closed_form_sign() {
    // The trunk bias keeps both units active, so logits are z = (x + 10)·A + b
    // and ∂ log p_c / ∂x_i = (A_ic − A_io) · p_o / T for the other class o.
    let a = [2.0, -1.0, 0.5, 1.0];
    let m = hand_model(10.0, a, [0.0, 0.0]);
    let eta = 0.01;

    // class 0 wins: signs (A_00 − A_01, A_10 − A_11) = (+3, −0.5)
    let x = Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap();
    let xp = odin::perturb_input(&m, &x, 10.0, eta).unwrap();
    assert_eq!(xp.data(), &[0.3 + eta, -0.2 - eta]);

    // class 1 wins: signs (A_01 − A_00, A_11 − A_10) = (−3, +0.5)
    let x = Tensor::matrix(1, 2, vec![-9.9, 5.0]).unwrap();
    let xp = odin::perturb_input(&m, &x, 10.0, eta).unwrap();
    assert_eq!(xp.data(), &[-9.9 - eta, 5.0 + eta]);
}

#[test]
fn zero_step_is_identity_and_steps_are_signed() {
    let m = random_model(2);
    let x = gaussian_rows(20, 5, 2.0, 3);
    assert_eq!(odin::perturb_input(&m, &x, 7.0, 0.0).unwrap(), x);
    let eta = 0.01;
    let xp = odin::perturb_input(&m, &x, 7.0, eta).unwrap();
    let mut moved = 0;
    for (a, b) in x.data().iter().zip(xp.data()) {
        assert!(*b == *a || *b == a + eta || *b == a - eta, "{a} -> {b}");
        moved += usize::from(a != b);
    }
    assert!(moved > 0);
}

#[test]
fn baseline_is_plain_max_softmax() {
    let m = random_model(4);
    let x = gaussian_rows(10, 5, 1.5, 5);
    let (logits, _) = m.eval_forward(&x).unwrap();
    for r in 0..x.rows() {
        let z = logits.row(r);
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let want = z.iter().map(|v| v.exp() / denom).fold(0.0, f64::max);
        let row = Tensor::matrix(1, 5, x.row(r).to_vec()).unwrap();
        let got = odin::odin_score(&m, &row, &OdinParams::BASELINE).unwrap();
        assert!((got - want).abs() < 1e-12);
        let cold = odin::odin_score(&m, &row, &OdinParams { temperature: 50.0, epsilon: 0.0, threshold: 0.5 }).unwrap();
        assert_eq!(cold, odin::temperature_score(z, 50.0));
    }
}

#[test]
fn tuner_picks_the_perturbation_that_separates() {
    // z_0 = 1 − h_0 + h_1 and z_1 = 0. Outliers sit where every unit is off,
    // so their score is σ(1) and their gradient is zero. The first inlier
    // scores just below σ(1) until a 0.01 step lifts z_0 to 1.01.
    let m = hand_model(0.0, [-1.0, 0.0, 1.0, 0.0], [1.0, 0.0]);
    let in_x = Tensor::matrix(3, 2, vec![0.05, 0.04, 0.3, 0.5, 0.1, 0.3]).unwrap();
    let out_x = Tensor::matrix(4, 2, vec![-1.0, -1.0, -2.0, -0.5, -0.3, -3.0, -1.5, -1.5]).unwrap();

    let fpr = |eta: f64| {
        let s = ScoreSet::new(
            odin::odin_scores(&m, &in_x, 1.0, eta).unwrap(),
            odin::odin_scores(&m, &out_x, 1.0, eta).unwrap(),
        );
        metrics::fpr_at_tpr95(&s).unwrap()
    };
    assert_eq!(fpr(0.0), 1.0);
    assert_eq!(fpr(0.01), 0.0);
    assert_eq!(fpr(0.02), 0.0);

    let t = odin::tune_hyperparams(&m, &in_x, &out_x, &[1.0], &[0.0, 0.01]).unwrap();
    assert_eq!(t.params.epsilon, 0.01);
    assert_eq!(t.fpr_at_tpr95, 0.0);
    // ties resolve to the smaller step
    let t = odin::tune_hyperparams(&m, &in_x, &out_x, &[1.0], &[0.02, 0.01, 0.0]).unwrap();
    assert_eq!(t.params.epsilon, 0.01);
}

#[test]
fn tuner_equals_brute_force_argmin() {
    let temps = [1.0, 10.0, 100.0, 1000.0];
    let eps = [0.0, 0.001, 0.005, 0.02, 0.1];
    for s in 0..4 {
        let m = random_model(s);
        let in_x = gaussian_rows(40, 5, 1.0, 10 + s);
        let out_x = gaussian_rows(30, 5, 3.0, 20 + s);

        let mut best: Option<(f64, f64, f64, Vec<f64>)> = None;
        for &e in &eps {
            for &t in &temps {
                let s_in = odin::odin_scores(&m, &in_x, t, e).unwrap();
                let s_out = odin::odin_scores(&m, &out_x, t, e).unwrap();
                let f = metrics::fpr_at_tpr95(&ScoreSet::new(s_in.clone(), s_out)).unwrap();
                if best.as_ref().is_none_or(|b| f < b.0) {
                    best = Some((f, t, e, s_in));
                }
            }
        }
        let (f, t, e, s_in) = best.unwrap();
        let got = odin::tune_hyperparams(&m, &in_x, &out_x, &temps, &eps).unwrap();
        assert_eq!(got.fpr_at_tpr95, f);
        assert_eq!((got.params.temperature, got.params.epsilon), (t, e));
        assert_eq!(got.params.threshold, metrics::tpr95_threshold(&s_in).unwrap());

        let dup = odin::tune_hyperparams(&m, &in_x, &out_x, &[1000.0, 1.0, 10.0, 1.0, 100.0, 10.0], &[0.1, 0.0, 0.02, 0.0, 0.001, 0.005, 0.1])
            .unwrap();
        assert_eq!(dup, got);
    }
}

#[test]
fn singleton_grid_returns_baseline() {
    let m = random_model(9);
    let in_x = gaussian_rows(25, 5, 1.0, 1);
    let out_x = gaussian_rows(25, 5, 1.0, 2);
    let t = odin::tune_hyperparams(&m, &in_x, &out_x, &[1.0], &[0.0]).unwrap();
    assert_eq!((t.params.temperature, t.params.epsilon), (1.0, 0.0));
    let base = odin::odin_scores(&m, &in_x, 1.0, 0.0).unwrap();
    assert_eq!(t.params.threshold, metrics::tpr95_threshold(&base).unwrap());
}
