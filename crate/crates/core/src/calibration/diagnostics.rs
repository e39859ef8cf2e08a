//! Chain summaries: batch-means effective sample size and quantiles.

use serde::{Deserialize, Serialize};

/// Effective sample size of one series by batch means with batch length
/// `⌊√N⌋`. A series with no variation gives `ess = 1` and `failed = true`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ess {
    pub ess: f64,
    pub failed: bool,
}

pub fn ess_batch_means(x: &[f64]) -> Ess {
    let n = x.len();
    if n < 4 {
        return Ess {
            ess: n.max(1) as f64,
            failed: n < 2,
        };
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let tol = 1e-12 * mean.abs().max(f64::MIN_POSITIVE.sqrt());
    if !(var.sqrt() > tol) {
        return Ess { ess: 1.0, failed: true };
    }
    let b = (n as f64).sqrt().floor() as usize;
    let a = n / b;
    let used = a * b;
    let grand = x[..used].iter().sum::<f64>() / used as f64;
    let var_batch = x[..used]
        .chunks_exact(b)
        .map(|c| {
            let m = c.iter().sum::<f64>() / b as f64;
            (m - grand) * (m - grand)
        })
        .sum::<f64>()
        / (a - 1) as f64;
    if !(var_batch > 0.0) {
        return Ess {
            ess: n as f64,
            failed: false,
        };
    }
    let ess = (n as f64 * var / (b as f64 * var_batch)).clamp(1.0, n as f64);
    Ess { ess, failed: false }
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub(crate) fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}
