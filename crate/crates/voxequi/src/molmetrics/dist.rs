//! Distribution distances and rank agreement.

use crate::error::{Result, VoxError};
use std::collections::BTreeMap;

/// Total variation between two categorical count maps over the same
/// category set: half the L1 distance of the normalized distributions.
pub fn tv_categorical(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<f64> {
    if a.keys().ne(b.keys()) {
        return Err(VoxError::Argument("mismatched category sets".into()));
    }
    let (za, zb): (f64, f64) = (a.values().sum(), b.values().sum());
    if za <= 0.0 || zb <= 0.0 {
        return Err(VoxError::Argument("empty categorical distribution".into()));
    }
    let mut tv = 0.0;
    for (ka, va) in a {
        tv += (va / za - b[ka] / zb).abs();
    }
    Ok(0.5 * tv)
}

/// Align two count maps onto the union of their categories (absent -> 0).
pub fn align_categories(
    a: &BTreeMap<String, f64>,
    b: &BTreeMap<String, f64>,
) -> (BTreeMap<String, f64>, BTreeMap<String, f64>) {
    let mut oa = a.clone();
    let mut ob = b.clone();
    for k in a.keys() {
        ob.entry(k.clone()).or_insert(0.0);
    }
    for k in b.keys() {
        oa.entry(k.clone()).or_insert(0.0);
    }
    (oa, ob)
}

/// Exact 1D Wasserstein-1 between two empirical samples: the integral of
/// |F_a - F_b| over the merged support (handles unequal sample counts).
pub fn w1_scalar(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(VoxError::Argument("w1 needs non-empty samples".into()));
    }
    let mut xs: Vec<f64> = a.iter().chain(b).copied().collect();
    xs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    xs.dedup();
    let mut sa: Vec<f64> = a.to_vec();
    let mut sb: Vec<f64> = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let cdf = |sorted: &[f64], x: f64| -> f64 {
        // fraction of samples <= x
        let mut lo = 0usize;
        let mut hi = sorted.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            if sorted[mid] <= x {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo as f64 / sorted.len() as f64
    };
    let mut w1 = 0.0;
    for win in xs.windows(2) {
        let (x0, x1) = (win[0], win[1]);
        w1 += (cdf(&sa, x0) - cdf(&sb, x0)).abs() * (x1 - x0);
    }
    Ok(w1)
}

/// KL(A || B) over shared histograms with add-alpha smoothing.
///
/// Samples are binned over the pooled min-max range; `alpha` is added to
/// every bin and both histograms renormalized, so the divergence is always
/// finite and `KL(A || A) = 0`.
pub fn kl_histogram(a: &[f64], b: &[f64], bins: usize, alpha: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(VoxError::Argument("kl needs non-empty samples".into()));
    }
    if bins == 0 {
        return Err(VoxError::Argument("bins must be >= 1".into()));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { hi - lo } else { 1.0 };
    let hist = |xs: &[f64]| -> Vec<f64> {
        let mut h = vec![alpha; bins];
        for &x in xs {
            let idx = (((x - lo) / width) * bins as f64) as usize;
            h[idx.min(bins - 1)] += 1.0;
        }
        let z: f64 = h.iter().sum();
        for v in &mut h {
            *v /= z;
        }
        h
    };
    let pa = hist(a);
    let pb = hist(b);
    Ok(kl_from_probs(&pa, &pb))
}

/// Paper-style defaults: 50 bins, alpha = 1e-6 per bin.
pub fn kl_histogram_default(a: &[f64], b: &[f64]) -> Result<f64> {
    kl_histogram(a, b, 50, 1e-6)
}

fn kl_from_probs(pa: &[f64], pb: &[f64]) -> f64 {
    pa.iter()
        .zip(pb)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

#[derive(Clone, Copy, Debug)]
pub struct RankAgreement {
    /// None when either input has zero rank variance (undefined rho).
    pub spearman_rho: Option<f64>,
    pub mae: f64,
}

/// Spearman correlation (average ranks on ties) and mean absolute error.
pub fn rank_agreement(pred: &[f64], target: &[f64]) -> Result<RankAgreement> {
    if pred.len() != target.len() {
        return Err(VoxError::Argument("length mismatch".into()));
    }
    if pred.len() < 3 {
        return Err(VoxError::Argument("need at least 3 points".into()));
    }
    let mae =
        pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64;
    let ra = average_ranks(pred);
    let rb = average_ranks(target);
    let spearman_rho = pearson(&ra, &rb);
    Ok(RankAgreement { spearman_rho, mae })
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for (x, y) in a.iter().zip(b) {
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
        sab += (x - ma) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}
