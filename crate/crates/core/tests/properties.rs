//! Invariants and statistical properties.

use lossguard_core::losses;
use lossguard_core::metrics::{self, DetectionReport, ScoreSet};
use lossguard_core::nets::{ArchConfig, JointModel};
use lossguard_core::odin;
use lossguard_core::seed;
use lossguard_core::synthdata::{self, InlierSpec, OodKind, OodSpec};
use lossguard_core::training::WeightedSampler;
use lossguard_core::Tensor;
use proptest::prelude::*;

fn grid_scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u8..30).prop_map(|v| v as f64 / 30.0), 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_stay_in_unit_interval(inl in grid_scores(50), out in grid_scores(50)) {
        let r = DetectionReport::compute(&ScoreSet::new(inl, out)).unwrap();
        for v in r.as_array() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(r.dterr <= 0.5);
    }

    #[test]
    fn auroc_swaps_to_complement(inl in grid_scores(50), out in grid_scores(50)) {
        let s = ScoreSet::new(inl, out);
        let a = metrics::auroc(&s).unwrap();
        let b = metrics::auroc(&s.swapped()).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_invariant_under_monotone_maps(inl in grid_scores(50), out in grid_scores(50)) {
        let f = |v: &[f64]| v.iter().map(|x| 0.5 * x + 0.25).collect::<Vec<_>>();
        let a = DetectionReport::compute(&ScoreSet::new(inl.clone(), out.clone())).unwrap();
        let b = DetectionReport::compute(&ScoreSet::new(f(&inl), f(&out))).unwrap();
        prop_assert_eq!(a.as_array(), b.as_array());
    }

    #[test]
    fn temperature_score_bounds_and_monotonicity(
        z in prop::collection::vec(-20.0f64..20.0, 2..9),
        t1 in 1.0f64..50.0,
        dt in 0.0f64..500.0,
    ) {
        let k = z.len() as f64;
        let a = odin::temperature_score(&z, t1);
        let b = odin::temperature_score(&z, t1 + dt);
        prop_assert!(a >= 1.0 / k - 1e-15 && a <= 1.0 + 1e-15);
        prop_assert!(b <= a + 1e-12);
        prop_assert!((odin::temperature_score(&z, 1e8) - 1.0 / k).abs() < 1e-6);
    }

    #[test]
    fn doubling_class_weights(z in prop::collection::vec(-5.0f64..5.0, 12), w in prop::collection::vec(0.1f64..3.0, 3)) {
        let t = Tensor::matrix(4, 3, z).unwrap();
        let y = [0, 2, 1, 2];
        let (p1, l1) = losses::weighted_cross_entropy(&t, &y, &w).unwrap();
        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let (p2, l2) = losses::weighted_cross_entropy(&t, &y, &w2).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in p1.iter().zip(&p2) {
            prop_assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_loss_nonnegative_and_zero_when_ordered(l in prop::collection::vec(0.0f64..5.0, 2..10), margin in 0.0f64..1.0) {
        let pairs = losses::all_pairs(l.len());
        // estimates that copy the loss order with gaps ≥ margin
        let mut order: Vec<usize> = (0..l.len()).collect();
        order.sort_by(|&a, &b| l[a].total_cmp(&l[b]));
        let mut e = vec![0.0; l.len()];
        for (rank, &i) in order.iter().enumerate() {
            e[i] = rank as f64 * (margin + 1.0);
        }
        let distinct = {
            let mut s = l.clone();
            s.sort_by(f64::total_cmp);
            s.windows(2).all(|w| w[0] < w[1])
        };
        let v = losses::contrastive_rank_loss(&l, &e, margin, &pairs).unwrap();
        prop_assert!(v >= 0.0);
        if distinct {
            prop_assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn rank_loss_ignores_a_common_shift(
        l in prop::collection::vec((0u8..6).prop_map(f64::from), 2..10),
        e in prop::collection::vec(-2.0f64..2.0, 10),
        c in -100.0f64..100.0,
    ) {
        let e = &e[..l.len()];
        let shifted: Vec<f64> = e.iter().map(|v| v + c).collect();
        let pairs = losses::all_pairs(l.len());
        let a = losses::contrastive_rank_loss(&l, e, 0.1, &pairs).unwrap();
        let b = losses::contrastive_rank_loss(&l, &shifted, 0.1, &pairs).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn class_sizes_sum_and_order(k in 2usize..10, n in 100usize..5000, ratio in 1.0f64..30.0) {
        let s = synthdata::class_sizes(k, n, ratio);
        prop_assert_eq!(s.iter().sum::<usize>(), n);
        prop_assert!(s.windows(2).all(|w| w[0] + 1 >= w[1]));
    }

    #[test]
    fn stratified_split_partitions(seed in any::<u64>(), frac in 0.05f64..0.5) {
        let spec = InlierSpec { n: 300, ..InlierSpec::default() };
        let d = synthdata::gen_inliers(&spec, 1).unwrap();
        let (a, b) = synthdata::stratified_split(&d, frac, seed).unwrap();
        prop_assert_eq!(a.len() + b.len(), d.len());
        for (c, &total) in d.class_counts().iter().enumerate() {
            let va = b.labels.iter().filter(|&&l| l == c).count();
            prop_assert!(va >= 1 && va < total);
        }
    }
}

#[test]
fn augment_noise_has_folded_gaussian_mean() {
    let x = Tensor::zeros(&[625, 16]);
    let mut rng = seed::rng(5);
    let y = synthdata::augment(&x, 0.1, 0.0, &mut rng);
    let mean = y.data().iter().map(|v| v.abs()).sum::<f64>() / y.len() as f64;
    let want = 0.1 * (2.0 / std::f64::consts::PI).sqrt();
    assert!((mean / want - 1.0).abs() < 0.05, "{mean} vs {want}");
}

#[test]
fn different_seeds_give_different_data() {
    let spec = InlierSpec { n: 400, ..InlierSpec::default() };
    let a = synthdata::gen_inliers(&spec, 1).unwrap();
    let b = synthdata::gen_inliers(&spec, 2).unwrap();
    assert_ne!(a.checksum(), b.checksum());
    for kind in OodKind::ALL {
        let s1 = synthdata::make_ood(&a, &OodSpec::standard(kind, 1)).unwrap();
        let s2 = synthdata::make_ood(&a, &OodSpec::standard(kind, 2)).unwrap();
        assert_ne!(s1.checksum(), s2.checksum(), "{kind:?}");
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn far_set_lies_beyond_inlier_diameter() {
    let spec = InlierSpec { n: 400, ..InlierSpec::default() };
    let inl = synthdata::gen_inliers(&spec, 3).unwrap();
    let far = synthdata::make_ood(&inl, &OodSpec::standard(OodKind::Far, 4)).unwrap();
    let mut diameter = 0.0f64;
    for i in 0..inl.len() {
        for j in i + 1..inl.len() {
            diameter = diameter.max(dist(inl.x.row(i), inl.x.row(j)));
        }
    }
    let mut gap = f64::INFINITY;
    for i in 0..inl.len() {
        for j in 0..far.len() {
            gap = gap.min(dist(inl.x.row(i), far.x.row(j)));
        }
    }
    assert!(gap > diameter, "gap {gap} vs diameter {diameter}");
}

#[test]
fn default_inliers_are_learnable_by_nearest_mean() {
    for seed in 0..3 {
        let data = synthdata::gen_inliers(&InlierSpec::default(), seed).unwrap();
        let (train, val) = synthdata::stratified_split(&data, 0.1, 1).unwrap();
        let k = train.num_classes();
        let mut means = vec![vec![0.0; train.dim()]; k];
        let counts = train.class_counts();
        for i in 0..train.len() {
            for (m, v) in means[train.labels[i]].iter_mut().zip(train.x.row(i)) {
                *m += v / counts[train.labels[i]] as f64;
            }
        }
        let pred: Vec<usize> = (0..val.len())
            .map(|i| {
                (0..k)
                    .min_by(|&a, &b| dist(val.x.row(i), &means[a]).total_cmp(&dist(val.x.row(i), &means[b])))
                    .unwrap()
            })
            .collect();
        let ba = metrics::balanced_accuracy(&pred, &val.labels, k).unwrap();
        assert!(ba >= 0.8, "seed {seed}: nearest-mean balanced accuracy {ba}");
        assert!(ba < 0.99, "seed {seed}: benchmark saturated at {ba}");
    }
}

#[test]
fn he_init_variance() {
    let arch = ArchConfig {
        input_dim: 200,
        hidden_dims: vec![200],
        num_classes: 2,
        tap_layers: vec![0],
        tap_embed_dim: 2,
        dropout: 0.0,
    };
    let m = JointModel::init(arch, 8).unwrap();
    let w = m.param("f.trunk0.w").unwrap().data();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
    assert!((var / (2.0 / 200.0) - 1.0).abs() < 0.05, "variance {var}");
    assert!(mean.abs() < 0.005);
    assert!(m.param("f.trunk0.b").unwrap().data().iter().all(|&b| b == 0.0));
}

#[test]
fn sampler_balances_classes() {
    let labels: Vec<usize> = (0..1000).map(|i| if i < 900 { 0 } else if i < 990 { 1 } else { 2 }).collect();
    let draws: Vec<usize> = WeightedSampler::new(&labels, 3).unwrap().take(30_000).collect();
    let mut freq = [0usize; 3];
    for i in draws {
        freq[labels[i]] += 1;
    }
    for f in freq {
        let p = f as f64 / 30_000.0;
        assert!((p - 1.0 / 3.0).abs() < 0.015, "{freq:?}");
    }
}
