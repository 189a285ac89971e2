//! Deterministic synthetic data: an imbalanced Gaussian-mixture inlier set
//! and OOD variants derived from it.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::math;
use crate::seed::{self, Rng};
use crate::{Error, Result, Tensor};

/// A feature matrix with (optional) labels.
///
/// OOD sets carry no labels: `labels` is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub tag: String,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Rows `idx` (labels follow when present).
    pub fn subset(&self, idx: &[usize], tag: impl Into<String>) -> LabeledSet {
        LabeledSet {
            x: self.x.select_rows(idx),
            labels: if self.is_labeled() {
                idx.iter().map(|&i| self.labels[i]).collect()
            } else {
                Vec::new()
            },
            class_names: self.class_names.clone(),
            tag: tag.into(),
        }
    }

    /// Order-sensitive FNV-1a checksum over the raw feature bits and labels.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for &v in self.x.data() {
            eat(v.to_bits());
        }
        for &l in &self.labels {
            eat(l as u64);
        }
        h
    }
}

/// Shape of the inlier mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct InlierSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub n: usize,
    /// Largest class size over smallest class size.
    pub imbalance_ratio: f64,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    /// Spread of the tightest class; the loosest is 3× this.
    pub base_spread: f64,
}

impl Default for InlierSpec {
    fn default() -> Self {
        InlierSpec {
            num_classes: 8,
            dim: 16,
            n: 8000,
            imbalance_ratio: 20.0,
            separation: 3.5,
            base_spread: 0.6,
        }
    }
}

/// Class sizes following `size_k ∝ ratio^(−k/(K−1))`, summing to `n`.
pub fn class_sizes(num_classes: usize, n: usize, ratio: f64) -> Vec<usize> {
    let k = num_classes;
    let raw: Vec<f64> = (0..k)
        .map(|i| {
            let t = if k > 1 { i as f64 / (k - 1) as f64 } else { 0.0 };
            libm::pow(ratio, -t)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let mut sizes: Vec<usize> = raw
        .iter()
        .map(|r| (math::round(r / total * n as f64) as usize).max(1))
        .collect();
    // absorb rounding drift in the largest class
    let assigned: usize = sizes.iter().sum();
    if assigned > n {
        sizes[0] -= assigned - n;
    } else {
        sizes[0] += n - assigned;
    }
    sizes
}

/// Class means on a scaled simplex (`separation · e_k`); when there are
/// more classes than dimensions the extra means use seeded random
/// directions of the same norm.
fn class_means(spec: &InlierSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..spec.num_classes)
        .map(|k| {
            let mut m = vec![0.0; spec.dim];
            if k < spec.dim {
                m[k] = spec.separation;
            } else {
                let dir: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(rng)).collect();
                let norm = math::sqrt(dir.iter().map(|v| v * v).sum());
                for (mv, dv) in m.iter_mut().zip(dir) {
                    *mv = dv / norm * spec.separation;
                }
            }
            m
        })
        .collect()
}

/// Imbalanced anisotropic Gaussian mixture.
///
/// Class `k` has per-coordinate spreads `s_k · a_{k,j}` where `s_k` rises
/// linearly from `base_spread` to `3 · base_spread` across classes and the
/// anisotropy factors `a_{k,j}` are drawn from `[0.5, 1.5]`. Rows are
/// grouped by class.
pub fn gen_inliers(spec: &InlierSpec, seed: u64) -> Result<LabeledSet> {
    if spec.num_classes < 2 {
        return Err(Error::config("need at least 2 classes"));
    }
    if spec.dim < 2 {
        return Err(Error::config("need at least 2 dimensions"));
    }
    if spec.n < spec.num_classes {
        return Err(Error::config(format!(
            "n = {} is smaller than the class count {}",
            spec.n, spec.num_classes
        )));
    }
    if !(spec.imbalance_ratio >= 1.0) {
        return Err(Error::config("imbalance ratio must be at least 1"));
    }
    let mut rng = seed::rng(seed);
    let means = class_means(spec, &mut rng);
    let sizes = class_sizes(spec.num_classes, spec.n, spec.imbalance_ratio);
    let k = spec.num_classes;
    let mut data = Vec::with_capacity(spec.n * spec.dim);
    let mut labels = Vec::with_capacity(spec.n);
    for c in 0..k {
        let s = spec.base_spread * (1.0 + 2.0 * c as f64 / (k - 1) as f64);
        let aniso: Vec<f64> = (0..spec.dim).map(|_| rng.random_range(0.5..1.5)).collect();
        for _ in 0..sizes[c] {
            for j in 0..spec.dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(means[c][j] + z * s * aniso[j]);
            }
            labels.push(c);
        }
    }
    Ok(LabeledSet {
        x: Tensor::matrix(spec.n, spec.dim, data)?,
        labels,
        class_names: (0..k).map(|c| format!("class{c}")).collect(),
        tag: "inliers".into(),
    })
}

/// Kinds of synthetic distribution change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OodKind {
    /// A contiguous block of coordinates zeroed.
    MaskPatch,
    /// The same with most coordinates zeroed.
    MaskPatchHeavy,
    /// An unrelated Gaussian far outside the inlier hull.
    Far,
    /// Inlier clusters with inflated spread.
    Near,
    /// Inliers translated by a fixed vector.
    Shift,
}

impl OodKind {
    pub const ALL: [OodKind; 5] = [
        OodKind::MaskPatch,
        OodKind::MaskPatchHeavy,
        OodKind::Far,
        OodKind::Near,
        OodKind::Shift,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OodKind::MaskPatch => "mask-patch",
            OodKind::MaskPatchHeavy => "mask-patch-heavy",
            OodKind::Far => "far",
            OodKind::Near => "near",
            OodKind::Shift => "shift",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        OodKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

/// One OOD variant and its parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OodSpec {
    pub kind: OodKind,
    /// Masked fraction of coordinates (mask kinds).
    pub mask_fraction: f64,
    /// Translation length (shift) or distance multiplier (far).
    pub magnitude: f64,
    /// Spread inflation (near): deviations from the class mean scale by `1 + inflation`.
    pub inflation: f64,
    pub seed: u64,
}

impl OodSpec {
    /// Default parameters for each kind.
    pub fn standard(kind: OodKind, seed: u64) -> Self {
        let (mask_fraction, magnitude, inflation) = match kind {
            OodKind::MaskPatch => (0.25, 0.0, 0.0),
            OodKind::MaskPatchHeavy => (0.7, 0.0, 0.0),
            OodKind::Far => (0.0, 3.0, 0.0),
            OodKind::Near => (0.0, 0.0, 0.5),
            OodKind::Shift => (0.0, 2.5, 0.0),
        };
        OodSpec {
            kind,
            mask_fraction,
            magnitude,
            inflation,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            OodKind::MaskPatch | OodKind::MaskPatchHeavy => {
                if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
                    return Err(Error::config("mask fraction must lie in (0, 1]"));
                }
            }
            OodKind::Far => {
                if !(self.magnitude >= 1.0) {
                    return Err(Error::config("far distance multiplier must be at least 1"));
                }
            }
            OodKind::Near => {
                if !(self.inflation >= 0.0) {
                    return Err(Error::config("inflation must be nonnegative"));
                }
            }
            OodKind::Shift => {
                if !(self.magnitude >= 0.0) {
                    return Err(Error::config("shift magnitude must be nonnegative"));
                }
            }
        }
        Ok(())
    }
}

fn centroid(x: &Tensor, rows: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut c = vec![0.0; x.cols()];
    let mut n = 0usize;
    for r in rows {
        for (cv, v) in c.iter_mut().zip(x.row(r)) {
            *cv += v;
        }
        n += 1;
    }
    c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    c
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn random_unit(dim: usize, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = math::sqrt(v.iter().map(|a| a * a).sum());
    v.into_iter().map(|a| a / n).collect()
}

/// Builds an unlabeled OOD set of the same size as `base`.
///
/// - mask kinds zero `round(fraction · d)` contiguous coordinates per row,
///   at a random start;
/// - `Far` draws from a Gaussian (spread = the largest per-coordinate inlier
///   standard deviation) centred `magnitude · R + 10·σ` away from the inlier
///   centroid along a random direction, where `R` is the largest
///   centroid-to-sample distance of `base`;
/// - `Near` resamples rows of `base` with replacement and scales each
///   row's deviation from its class mean by `1 + inflation` (needs labels);
/// - `Shift` adds one random vector of length `magnitude` to every row.
pub fn make_ood(base: &LabeledSet, spec: &OodSpec) -> Result<LabeledSet> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed);
    let (n, d) = (base.len(), base.dim());
    let mut x = base.x.clone();
    match spec.kind {
        OodKind::MaskPatch | OodKind::MaskPatchHeavy => {
            let width = (math::round(spec.mask_fraction * d as f64) as usize).clamp(1, d);
            for r in 0..n {
                let start = rng.random_range(0..=d - width);
                x.row_mut(r)[start..start + width].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        OodKind::Far => {
            let c = centroid(&base.x, 0..n);
            let radius = (0..n).map(|r| dist(base.x.row(r), &c)).fold(0.0, f64::max);
            let sigma = (0..d)
                .map(|j| {
                    let col: Vec<f64> = (0..n).map(|r| base.x.row(r)[j]).collect();
                    math::sqrt(crate::metrics::variance(&col))
                })
                .fold(0.0, f64::max);
            let u = random_unit(d, &mut rng);
            let offset = spec.magnitude * radius + 10.0 * sigma;
            for r in 0..n {
                for (j, v) in x.row_mut(r).iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = c[j] + u[j] * offset + z * sigma;
                }
            }
        }
        OodKind::Near => {
            if !base.is_labeled() {
                return Err(Error::config("near OOD needs a labeled base set"));
            }
            let means: Vec<Vec<f64>> = (0..base.num_classes())
                .map(|k| centroid(&base.x, (0..n).filter(|&r| base.labels[r] == k)))
                .collect();
            let s = 1.0 + spec.inflation;
            for r in 0..n {
                let src = rng.random_range(0..n);
                let m = &means[base.labels[src]];
                for ((v, mv), b) in x.row_mut(r).iter_mut().zip(m).zip(base.x.row(src)) {
                    *v = mv + (b - mv) * s;
                }
            }
        }
        OodKind::Shift => {
            let u = random_unit(d, &mut rng);
            for r in 0..n {
                for (v, uv) in x.row_mut(r).iter_mut().zip(&u) {
                    *v += uv * spec.magnitude;
                }
            }
        }
    }
    Ok(LabeledSet {
        x,
        labels: Vec::new(),
        class_names: base.class_names.clone(),
        tag: spec.kind.as_str().to_string(),
    })
}

/// Splits off the `held_out` classes as a novel set; the remaining classes
/// are relabelled `0..K−|held_out|` in their original order.
pub fn split_unseen_classes(data: &LabeledSet, held_out: &[usize]) -> Result<(LabeledSet, LabeledSet)> {
    let k = data.num_classes();
    if held_out.is_empty() {
        return Err(Error::config("held-out class set is empty"));
    }
    if let Some(&c) = held_out.iter().find(|&&c| c >= k) {
        return Err(Error::LabelOutOfRange { label: c, classes: k });
    }
    let kept: Vec<usize> = (0..k).filter(|c| !held_out.contains(c)).collect();
    if kept.is_empty() {
        return Err(Error::config("held-out classes cover every class"));
    }
    let mut remap = vec![usize::MAX; k];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = new;
    }
    let (mut train_idx, mut novel_idx) = (Vec::new(), Vec::new());
    for (i, &l) in data.labels.iter().enumerate() {
        if remap[l] == usize::MAX {
            novel_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    let mut train = data.subset(&train_idx, format!("{}-seen", data.tag));
    train.labels.iter_mut().for_each(|l| *l = remap[*l]);
    train.class_names = kept.iter().map(|&c| data.class_names[c].clone()).collect();
    let mut novel = data.subset(&novel_idx, format!("{}-novel", data.tag));
    novel.labels.clear();
    Ok((train, novel))
}

/// Per-class split: `max(1, round_half_up(count · fraction))` rows of each
/// class go to validation. Row order within each output follows the input.
pub fn stratified_split(data: &LabeledSet, val_fraction: f64, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config("validation fraction must lie in (0, 1)"));
    }
    let mut rng = seed::rng(seed);
    let mut is_val = vec![false; data.len()];
    for c in 0..data.num_classes() {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::config(format!(
                "class {c} has {} sample; a stratified split needs at least 2",
                idx.len()
            )));
        }
        let nval = (math::floor(idx.len() as f64 * val_fraction + 0.5) as usize).clamp(1, idx.len() - 1);
        idx.shuffle(&mut rng);
        for &i in &idx[..nval] {
            is_val[i] = true;
        }
    }
    let train_idx: Vec<usize> = (0..data.len()).filter(|&i| !is_val[i]).collect();
    let val_idx: Vec<usize> = (0..data.len()).filter(|&i| is_val[i]).collect();
    Ok((
        data.subset(&train_idx, format!("{}-train", data.tag)),
        data.subset(&val_idx, format!("{}-val", data.tag)),
    ))
}

/// Feature-space augmentation: each coordinate's sign flips with
/// probability `flip_prob`, then `N(0, noise_scale²)` jitter is added.
pub fn augment(x: &Tensor, noise_scale: f64, flip_prob: f64, rng: &mut Rng) -> Tensor {
    assert!(noise_scale >= 0.0, "noise scale must be nonnegative");
    if noise_scale == 0.0 && flip_prob == 0.0 {
        return x.clone();
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        if flip_prob > 0.0 && rng.random::<f64>() < flip_prob {
            *v = -*v;
        }
        if noise_scale > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            *v += noise_scale * z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> InlierSpec {
        InlierSpec {
            num_classes: 3,
            dim: 4,
            n: 300,
            imbalance_ratio: 4.0,
            ..InlierSpec::default()
        }
    }

    #[test]
    fn sizes_follow_geometric_profile() {
        let s = class_sizes(4, 400, 1.0);
        assert_eq!(s, vec![100; 4]);
        let s = class_sizes(8, 8000, 20.0);
        assert_eq!(s.iter().sum::<usize>(), 8000);
        let ratio = s[0] as f64 / s[7] as f64;
        // ±1 sample of rounding on either end
        let lo = (s[0] - 1) as f64 / (s[7] + 1) as f64;
        let hi = (s[0] + 1) as f64 / (s[7] - 1) as f64;
        assert!(lo <= 20.0 && 20.0 <= hi, "{s:?} ratio {ratio}");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_inliers(&small(), 3).unwrap();
        let b = gen_inliers(&small(), 3).unwrap();
        let c = gen_inliers(&small(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn too_few_samples_rejected() {
        let mut s = small();
        s.n = 2;
        assert!(gen_inliers(&s, 0).is_err());
    }

    #[test]
    fn mask_zeroes_exact_fraction() {
        let mut s = small();
        s.dim = 10;
        let base = gen_inliers(&s, 1).unwrap();
        let spec = OodSpec {
            mask_fraction: 0.7,
            ..OodSpec::standard(OodKind::MaskPatchHeavy, 9)
        };
        let o = make_ood(&base, &spec).unwrap();
        for r in 0..o.len() {
            let row = o.x.row(r);
            let zeros: Vec<usize> = (0..10).filter(|&j| row[j] == 0.0).collect();
            assert_eq!(zeros.len(), 7);
            assert_eq!(zeros[6] - zeros[0], 6, "block is contiguous");
        }
        assert!(!o.is_labeled());
    }

    #[test]
    fn zero_shift_is_identity() {
        let base = gen_inliers(&small(), 1).unwrap();
        let spec = OodSpec {
            magnitude: 0.0,
            ..OodSpec::standard(OodKind::Shift, 2)
        };
        assert_eq!(make_ood(&base, &spec).unwrap().x, base.x);
    }

    #[test]
    fn unseen_split_relabels() {
        let mut s = small();
        s.num_classes = 8;
        s.dim = 8;
        s.n = 800;
        let data = gen_inliers(&s, 5).unwrap();
        let (train, novel) = split_unseen_classes(&data, &[5, 6, 7]).unwrap();
        assert_eq!(train.num_classes(), 5);
        assert!(train.labels.iter().all(|&l| l < 5));
        assert_eq!(train.len() + novel.len(), data.len());
        let expect_novel: usize = data.class_counts()[5..].iter().sum();
        assert_eq!(novel.len(), expect_novel);
        assert!(split_unseen_classes(&data, &[]).is_err());
        assert!(split_unseen_classes(&data, &[0, 1, 2, 3, 4, 5, 6, 7]).is_err());
    }

    #[test]
    fn stratified_split_counts() {
        let x = Tensor::zeros(&[105, 2]);
        let mut labels = vec![0; 100];
        labels.extend([1; 5]);
        let data = LabeledSet {
            x,
            labels,
            class_names: vec!["a".into(), "b".into()],
            tag: "t".into(),
        };
        let (train, val) = stratified_split(&data, 0.1, 3).unwrap();
        assert_eq!(val.class_counts(), vec![10, 1]);
        assert_eq!(train.len() + val.len(), 105);

        let lone = data.subset(&[0, 1, 100], "lone");
        let mut lone = lone;
        lone.labels = vec![0, 0, 1];
        assert!(stratified_split(&lone, 0.1, 3).is_err());
    }

    #[test]
    fn augment_identity_and_determinism() {
        let x = Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let mut rng = seed::rng(1);
        assert_eq!(augment(&x, 0.0, 0.0, &mut rng), x);
        let a = augment(&x, 0.1, 0.2, &mut seed::rng(7));
        let b = augment(&x, 0.1, 0.2, &mut seed::rng(7));
        assert_eq!(a, b);
    }
}
