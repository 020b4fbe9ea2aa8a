use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Sample sizes up to this use the exact null distribution.
const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    TwoSided,
    /// differences tend to be negative
    Less,
    /// differences tend to be positive
    Greater,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// sum of the ranks of the positive differences
    pub w_plus: f64,
    /// differences left after dropping zeros
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
    /// every difference was zero; `p_value` is 1
    pub degenerate: bool,
}

/// Wilcoxon signed-rank test on the paired differences `a - b`. Zero
/// differences are dropped and tied magnitudes get mid-ranks.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], alternative: Alternative) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    signed_rank(&d, alternative)
}

fn signed_rank(diffs: &[f64], alternative: Alternative) -> Result<WilcoxonResult> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired differences".into()));
    }
    let mut nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Ok(WilcoxonResult { w_plus: 0.0, n: 0, p_value: 1.0, exact: true, degenerate: true });
    }
    nz.sort_by(|x, y| x.abs().total_cmp(&y.abs()));

    // doubled mid-ranks stay integral
    let mut rank2 = vec![0u64; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nz[j + 1].abs() == nz[i].abs() {
            j += 1;
        }
        let r2 = (i + 1 + j + 1) as u64;
        rank2[i..=j].iter_mut().for_each(|r| *r = r2);
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let w2: u64 = nz.iter().zip(&rank2).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w_plus = w2 as f64 / 2.0;

    if n <= EXACT_MAX_N {
        let total: u64 = rank2.iter().sum();
        let mut counts = vec![0u64; total as usize + 1];
        counts[0] = 1;
        let mut reach = 0usize;
        for &r in &rank2 {
            let r = r as usize;
            for s in (0..=reach).rev() {
                let c = counts[s];
                if c > 0 {
                    counts[s + r] += c;
                }
            }
            reach += r;
        }
        let all = (1u64 << n) as f64;
        let le = counts[..=w2 as usize].iter().sum::<u64>() as f64 / all;
        let ge = counts[w2 as usize..].iter().sum::<u64>() as f64 / all;
        let p_value = match alternative {
            Alternative::Less => le,
            Alternative::Greater => ge,
            Alternative::TwoSided => (2.0 * le.min(ge)).min(1.0),
        };
        return Ok(WilcoxonResult { w_plus, n, p_value, exact: true, degenerate: false });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0).sqrt();
    let normal = Normal::standard();
    let dev = w_plus - mean;
    let p_value = match alternative {
        Alternative::Less => normal.cdf((dev + 0.5) / sd),
        Alternative::Greater => normal.sf((dev - 0.5) / sd),
        Alternative::TwoSided => (2.0 * normal.sf((dev.abs() - 0.5).max(0.0) / sd)).min(1.0),
    };
    Ok(WilcoxonResult { w_plus, n, p_value, exact: false, degenerate: false })
}

/// Whether smaller metric values are better (doses to organs, HI) or larger
/// ones (coverage, CI).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    LowerIsBetter,
    HigherIsBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonInferiorityResult {
    /// mean of `candidate - reference`
    pub mean_diff: f64,
    pub p_value: f64,
    pub margin: f64,
    pub verdict: bool,
    pub n: usize,
}

/// One-sided shifted Wilcoxon test of H0 "candidate worse than reference by at
/// least `margin`". Non-inferior when `p < 0.05`.
pub fn noninferiority_test(
    candidate: &[f64],
    reference: &[f64],
    margin: f64,
    direction: Direction,
) -> Result<NonInferiorityResult> {
    if candidate.len() != reference.len() {
        return Err(Error::Argument(format!(
            "paired samples differ in length: {} vs {}",
            candidate.len(),
            reference.len()
        )));
    }
    let n = candidate.len();
    if n < 5 {
        return Err(Error::Argument(format!("non-inferiority needs at least 5 pairs, got {n}")));
    }
    if !(margin >= 0.0) || !margin.is_finite() {
        return Err(Error::Argument(format!("margin must be finite and >= 0, got {margin}")));
    }
    let sign = match direction {
        Direction::LowerIsBetter => 1.0,
        Direction::HigherIsBetter => -1.0,
    };
    let raw: Vec<f64> = candidate.iter().zip(reference).map(|(c, r)| c - r).collect();
    let shifted: Vec<f64> = raw.iter().map(|d| sign * d - margin).collect();
    let w = signed_rank(&shifted, Alternative::Less)?;
    Ok(NonInferiorityResult {
        mean_diff: raw.iter().sum::<f64>() / n as f64,
        p_value: w.p_value,
        margin,
        verdict: w.p_value < 0.05,
        n,
    })
}
