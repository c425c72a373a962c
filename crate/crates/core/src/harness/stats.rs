//! Rank tests used to compare optimisers across independent runs.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// Samples at or below this size (both sides) get an exact permutation
/// p-value.
pub const EXACT_LIMIT: usize = 8;

/// Mid-ranks (1-based) of `values`, ties sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]].total_cmp(&values[idx[i]]).is_eq() {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// `Σ (t³ − t)` over tie groups of `values`.
fn tie_term(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut sum = 0.0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1].total_cmp(&v[i]).is_eq() {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        sum += t * t * t - t;
        i = j + 1;
    }
    sum
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `U` statistic of the first sample: the number of pairs `(a, b)` with
    /// `a > b`, ties counting one half.
    pub u: f64,
    pub p_two_sided: f64,
    /// Evidence that the first sample tends to be smaller.
    pub p_less: f64,
    /// Evidence that the first sample tends to be larger.
    pub p_greater: f64,
    pub exact: bool,
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> MannWhitney {
    assert!(!a.is_empty() && !b.is_empty(), "Mann-Whitney needs two non-empty samples");
    let (n, m) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let u_of = |ra: f64| ra - (n * (n + 1)) as f64 / 2.0;
    let u = u_of(ranks[..n].iter().sum());

    let (p_less, p_greater, exact) = if n <= EXACT_LIMIT && m <= EXACT_LIMIT {
        // Permutation distribution of U over every split of the pooled ranks.
        let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
        let eps = 1e-9;
        for_each_subset(n + m, n, &mut |subset| {
            let uu = u_of(subset.iter().map(|&i| ranks[i]).sum());
            total += 1;
            if uu <= u + eps {
                le += 1;
            }
            if uu >= u - eps {
                ge += 1;
            }
        });
        (le as f64 / total as f64, ge as f64 / total as f64, true)
    } else {
        let nm = (n * m) as f64;
        let big_n = (n + m) as f64;
        let var = nm / 12.0 * ((big_n + 1.0) - tie_term(&pooled) / (big_n * (big_n - 1.0)));
        if var <= 0.0 {
            (1.0, 1.0, false)
        } else {
            let sd = var.sqrt();
            let mean = nm / 2.0;
            let std = Normal::standard();
            let p_less = std.cdf((u - mean + 0.5) / sd);
            let p_greater = std.sf((u - mean - 0.5) / sd);
            (p_less.min(1.0), p_greater.min(1.0), false)
        }
    };
    let p_two_sided = (2.0 * p_less.min(p_greater)).min(1.0);
    MannWhitney { u, p_two_sided, p_less, p_greater, exact }
}

/// Visit every `k`-subset of `0..n` in lexicographic order.
fn for_each_subset(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Friedman {
    pub statistic: f64,
    pub p: f64,
    pub df: usize,
}

/// Friedman test on `blocks × algorithms` losses, ranking within each block.
pub fn friedman_test(matrix: &[Vec<f64>]) -> Friedman {
    let n = matrix.len();
    assert!(n >= 2, "Friedman test needs at least two blocks");
    let k = matrix[0].len();
    assert!(k >= 2, "Friedman test needs at least two algorithms");
    assert!(matrix.iter().all(|row| row.len() == k), "ragged Friedman matrix");

    let mut rank_sums = vec![0.0; k];
    let mut ties = 0.0;
    for row in matrix {
        for (s, r) in rank_sums.iter_mut().zip(midranks(row)) {
            *s += r;
        }
        ties += tie_term(row);
    }
    let (nf, kf) = (n as f64, k as f64);
    let ss: f64 = rank_sums.iter().map(|r| r * r).sum();
    let raw = 12.0 / (nf * kf * (kf + 1.0)) * ss - 3.0 * nf * (kf + 1.0);
    let denom = 1.0 - ties / (nf * (kf * kf * kf - kf));
    if denom <= 1e-12 {
        return Friedman { statistic: 0.0, p: 1.0, df: k - 1 };
    }
    let statistic = (raw / denom).max(0.0);
    let chi = ChiSquared::new((k - 1) as f64).expect("positive degrees of freedom");
    Friedman { statistic, p: chi.sf(statistic), df: k - 1 }
}

/// Linear-interpolated percentile (`q ∈ [0, 1]`) of a sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, q)
}

pub(crate) fn percentile_sorted(v: &[f64], q: f64) -> f64 {
    match v.len() {
        0 => f64::NAN,
        1 => v[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            if lo == hi || !v[hi].is_finite() || !v[lo].is_finite() {
                if pos - lo as f64 >= 0.5 { v[hi] } else { v[lo] }
            } else {
                v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
            }
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    percentile(values, 0.5)
}
