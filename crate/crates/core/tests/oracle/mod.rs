//! Slow, direct reimplementations used as test oracles. Nothing here calls
//! into the crate under test.

#![allow(dead_code)]

/// Per-sample `w_y · (log Σ_k e^{z_k} − z_y)` and their weighted mean.
pub fn weighted_ce(logits: &[Vec<f64>], labels: &[usize], weights: &[f64]) -> (Vec<f64>, f64) {
    let mut per = Vec::new();
    for (z, &y) in logits.iter().zip(labels) {
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        per.push(weights[y] * (lse - z[y]));
    }
    let wsum: f64 = labels.iter().map(|&y| weights[y]).sum();
    let mean = per.iter().sum::<f64>() / wsum;
    (per, mean)
}

/// Mean pairwise hinge with the strict `>` indicator.
pub fn rank_loss(l: &[f64], e: &[f64], margin: f64, pairs: &[(usize, usize)]) -> f64 {
    let mut s = 0.0;
    for &(i, j) in pairs {
        let sign = if l[i] > l[j] { 1.0 } else { -1.0 };
        s += (margin - sign * (e[i] - e[j])).max(0.0);
    }
    s / pairs.len() as f64
}

fn count_ge(v: &[f64], t: f64) -> usize {
    v.iter().filter(|&&s| s >= t).count()
}

/// Every candidate threshold, highest first: each distinct score plus +∞.
fn thresholds(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = a.iter().chain(b).copied().collect();
    t.push(f64::INFINITY);
    t.sort_by(|x, y| y.partial_cmp(x).unwrap());
    t.dedup();
    t
}

pub fn fpr95(inl: &[f64], out: &[f64]) -> f64 {
    for t in thresholds(inl, out) {
        let tp = count_ge(inl, t);
        if tp * 20 >= inl.len() * 19 {
            return count_ge(out, t) as f64 / out.len() as f64;
        }
    }
    unreachable!("the lowest threshold accepts every inlier")
}

pub fn dterr(inl: &[f64], out: &[f64]) -> f64 {
    thresholds(inl, out)
        .into_iter()
        .map(|t| {
            let tpr = count_ge(inl, t) as f64 / inl.len() as f64;
            let fpr = count_ge(out, t) as f64 / out.len() as f64;
            0.5 * (1.0 - tpr) + 0.5 * fpr
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn auroc(inl: &[f64], out: &[f64]) -> f64 {
    let mut s = 0.0;
    for &a in inl {
        for &b in out {
            s += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (inl.len() * out.len()) as f64
}

/// Step-wise `Σ ΔR·P` with `pos` as the positive class.
pub fn aupr(pos: &[f64], neg: &[f64]) -> f64 {
    let mut area = 0.0;
    let mut prev = 0.0;
    for t in thresholds(pos, neg) {
        let tp = count_ge(pos, t);
        let fp = count_ge(neg, t);
        if tp + fp == 0 {
            continue;
        }
        let r = tp as f64 / pos.len() as f64;
        area += (r - prev) * tp as f64 / (tp + fp) as f64;
        prev = r;
    }
    area
}

pub fn aupr_out(inl: &[f64], out: &[f64]) -> f64 {
    let neg = |v: &[f64]| v.iter().map(|s| -s).collect::<Vec<_>>();
    aupr(&neg(out), &neg(inl))
}

/// `[fpr95, dterr, auroc, aupr_in, aupr_out]`.
pub fn all_metrics(inl: &[f64], out: &[f64]) -> [f64; 5] {
    [
        fpr95(inl, out),
        dterr(inl, out),
        auroc(inl, out),
        aupr(inl, out),
        aupr_out(inl, out),
    ]
}

/// Kendall tau-b by direct pair enumeration.
pub fn kendall(a: &[f64], b: &[f64]) -> f64 {
    let (mut c, mut d, mut ta, mut tb) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let x = (a[i] - a[j]).signum() * if a[i] == a[j] { 0.0 } else { 1.0 };
            let y = (b[i] - b[j]).signum() * if b[i] == b[j] { 0.0 } else { 1.0 };
            if x == 0.0 && y == 0.0 {
                continue;
            }
            if x == 0.0 {
                ta += 1.0;
            } else if y == 0.0 {
                tb += 1.0;
            } else if x == y {
                c += 1.0;
            } else {
                d += 1.0;
            }
        }
    }
    (c - d) / ((c + d + ta) * (c + d + tb)).sqrt()
}

/// Row-major `x · W + b`.
pub fn affine(x: &[Vec<f64>], w: &[f64], fan_out: usize, b: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..fan_out)
                .map(|o| b[o] + row.iter().enumerate().map(|(i, v)| v * w[i * fan_out + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn relu(x: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    x.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}
