//! Two-sided Mann-Whitney U test with midranks.
//!
//! Small samples use the exact permutation distribution of the rank sum,
//! computed by dynamic programming over doubled midranks so that ties are
//! handled exactly. Larger samples use the normal approximation with tie and
//! continuity corrections.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{invalid, Result};

/// Largest smaller-sample size for which the exact distribution is used.
pub const EXACT_MAX_MIN_SIZE: usize = 8;

/// Cap on the dynamic-programming table (subset size x rank-sum) for the exact path.
const EXACT_TABLE_LIMIT: usize = 4_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UTestMethod {
    Exact,
    NormalApproximation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UTestResult {
    /// U of `sample_a`: the number of (a, b) pairs with a > b, ties counting one half.
    pub u_statistic: f64,
    pub p_two_sided: f64,
    pub method: UTestMethod,
}

/// Midranks (1-based) of the pooled sample.
fn midranks(pooled: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && pooled[order[j]] == pooled[order[i]] {
            j += 1;
        }
        // positions i..j share the average of ranks i+1..=j
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

pub fn mann_whitney_u(sample_a: &[f64], sample_b: &[f64]) -> Result<UTestResult> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return invalid("Mann-Whitney U needs two nonempty samples");
    }
    if sample_a.iter().chain(sample_b).any(|v| v.is_nan()) {
        return invalid("Mann-Whitney U samples contain NaN");
    }
    let n = sample_a.len();
    let m = sample_b.len();
    let pooled: Vec<f64> = sample_a.iter().chain(sample_b).copied().collect();
    let ranks = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..n].iter().sum();
    let u_a = rank_sum_a - (n * (n + 1)) as f64 / 2.0;

    let total = n + m;
    let small = n.min(m);
    let table = (small + 1) * (2 * small * total + 1);
    let exact = small <= EXACT_MAX_MIN_SIZE && table <= EXACT_TABLE_LIMIT && binomial(total, small) < 2f64.powi(52);

    let p = if exact {
        exact_p(&ranks, n, m)
    } else {
        normal_p(&ranks, u_a, n, m)
    };
    Ok(UTestResult {
        u_statistic: u_a,
        p_two_sided: p,
        method: if exact {
            UTestMethod::Exact
        } else {
            UTestMethod::NormalApproximation
        },
    })
}

/// Exact two-sided p from the permutation distribution of the smaller
/// sample's doubled rank sum.
fn exact_p(ranks: &[f64], n: usize, m: usize) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    // Count from the smaller sample's side; counts are exact integers in f64.
    let (k, observed): (usize, usize) = if n <= m {
        (n, doubled[..n].iter().sum())
    } else {
        (m, doubled[n..].iter().sum())
    };
    let max_sum: usize = {
        let mut sorted = doubled.clone();
        sorted.sort_unstable();
        sorted[sorted.len() - k..].iter().sum()
    };
    // ways[j][s]: number of j-subsets of the items seen so far with doubled rank sum s
    let width = max_sum + 1;
    let mut ways = vec![0.0f64; (k + 1) * width];
    ways[0] = 1.0;
    for &r in &doubled {
        for j in (1..=k).rev() {
            let (lower, upper) = ways.split_at_mut(j * width);
            let prev = &lower[(j - 1) * width..];
            let cur = &mut upper[..width];
            for s in (r..width).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    let dist = &ways[k * width..];
    let all: f64 = dist.iter().sum();
    let lower: f64 = dist[..=observed].iter().sum();
    let upper: f64 = dist[observed..].iter().sum();
    (2.0 * lower.min(upper) / all).min(1.0)
}

fn normal_p(ranks: &[f64], u_a: f64, n: usize, m: usize) -> f64 {
    let total = (n + m) as f64;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let nm = (n * m) as f64;
    let variance = nm / 12.0 * ((total + 1.0) - tie_term / (total * (total - 1.0)));
    if variance <= 0.0 {
        return 1.0;
    }
    let deviation = (u_a - nm / 2.0).abs();
    let z = ((deviation - 0.5).max(0.0)) / variance.sqrt();
    erfc(z / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separated_triples() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.u_statistic, 0.0);
        assert_eq!(r.method, UTestMethod::Exact);
        assert!((r.p_two_sided - 0.1).abs() < 1e-12);
    }

    #[test]
    fn all_tied_gives_one() {
        let r = mann_whitney_u(&[5.0; 4], &[5.0; 4]).unwrap();
        assert_eq!(r.p_two_sided, 1.0);
        let big = mann_whitney_u(&[5.0; 40], &[5.0; 40]).unwrap();
        assert_eq!(big.method, UTestMethod::NormalApproximation);
        assert_eq!(big.p_two_sided, 1.0);
    }

    #[test]
    fn empty_sample_rejected() {
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
        assert!(mann_whitney_u(&[1.0], &[]).is_err());
    }

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn calibrated_under_null() {
        let mut above = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..100).map(|_| rng.gen::<f64>()).collect();
            let b: Vec<f64> = (0..100).map(|_| rng.gen::<f64>()).collect();
            if mann_whitney_u(&a, &b).unwrap().p_two_sided > 0.025 {
                above += 1;
            }
        }
        assert!(above >= 95, "only {above}/100 null repetitions above 0.025");
    }

    #[test]
    fn large_exact_case_uses_dp() {
        // min size 8 against 100 stays exact and agrees with the approximation
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.gen::<f64>()).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(r.method, UTestMethod::Exact);
        let ranks = midranks(&a.iter().chain(&b).copied().collect::<Vec<_>>());
        let approx = normal_p(&ranks, r.u_statistic, 8, 100);
        assert!((r.p_two_sided - approx).abs() < 0.05);
    }
}
