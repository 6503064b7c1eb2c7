//! Campaign statistics: Wilson score intervals and Spearman correlation.

use thiserror::Error;

use crate::rng::SplitMix64;

/// z for a two-sided 95% interval.
const Z95: f64 = 1.959963984540054;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("no trials")]
    Empty,
    #[error("series must have equal length >= 3")]
    BadSeries,
}

/// Wilson score interval at 95% confidence.
///
/// Returns `(point, low, high)`.
pub fn wilson_interval(successes: u64, trials: u64) -> Result<(f64, f64, f64), StatsError> {
    if trials == 0 {
        return Err(StatsError::Empty);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = p + z2 / (2.0 * n);
    let spread = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let mut low = ((center - spread) / denom).clamp(0.0, 1.0);
    let mut high = ((center + spread) / denom).clamp(0.0, 1.0);
    // analytically exact endpoints at the extremes; avoid 1-ulp residue
    if successes == 0 {
        low = 0.0;
    }
    if successes == trials {
        high = 1.0;
    }
    Ok((p, low, high))
}

/// Spearman rank correlation result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    /// `None` when a series is constant (rho undefined).
    pub rho: Option<f64>,
    pub p_value: Option<f64>,
    /// Significant at alpha = 0.05.
    pub significant: bool,
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // average rank for the tie group, 1-based
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn rho_of(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

/// Spearman correlation with average ranks for ties. Significance comes
/// from the exact permutation distribution for n <= 8 and from a seeded
/// 20000-sample permutation test otherwise.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Spearman, StatsError> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(StatsError::BadSeries);
    }
    let rho = match rho_of(xs, ys) {
        Some(r) => r,
        None => {
            return Ok(Spearman {
                rho: None,
                p_value: None,
                significant: false,
            })
        }
    };
    let n = xs.len();
    let observed = rho.abs() - 1e-12;
    let p = if n <= 8 {
        // exact: enumerate all permutations of ys
        let mut perm: Vec<usize> = (0..n).collect();
        let mut total = 0u64;
        let mut extreme = 0u64;
        permute(&mut perm, 0, &mut |p| {
            total += 1;
            let ys_p: Vec<f64> = p.iter().map(|&i| ys[i]).collect();
            if let Some(r) = rho_of(xs, &ys_p) {
                if r.abs() >= observed {
                    extreme += 1;
                }
            }
        });
        extreme as f64 / total as f64
    } else {
        let mut rng = SplitMix64::new(0x5EA4_11AC);
        let trials = 20_000u64;
        let mut extreme = 0u64;
        let mut perm: Vec<usize> = (0..n).collect();
        for _ in 0..trials {
            // Fisher-Yates
            for i in (1..n).rev() {
                let j = rng.below(i as u64 + 1) as usize;
                perm.swap(i, j);
            }
            let ys_p: Vec<f64> = perm.iter().map(|&i| ys[i]).collect();
            if let Some(r) = rho_of(xs, &ys_p) {
                if r.abs() >= observed {
                    extreme += 1;
                }
            }
        }
        extreme as f64 / trials as f64
    };
    Ok(Spearman {
        rho: Some(rho),
        p_value: Some(p),
        significant: p <= 0.05,
    })
}

fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}
