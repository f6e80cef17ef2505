//! Small Monte-Carlo estimators.

use serde::Serialize;

/// Point estimate with standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: u64,
}

impl Estimate {
    /// Sample mean and standard error of the mean.
    pub fn from_samples(xs: &[f64]) -> Estimate {
        let n = xs.len();
        if n == 0 {
            return Estimate { mean: f64::NAN, se: f64::NAN, n: 0 };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Estimate { mean, se: (var / n as f64).sqrt(), n: n as u64 }
    }

    /// Self-normalized ratio `sum(a) / sum(b)` with a delta-method standard error.
    pub fn ratio(a: &[f64], b: &[f64]) -> Estimate {
        let n = a.len();
        let sb: f64 = b.iter().sum();
        if n == 0 || sb == 0.0 {
            return Estimate { mean: f64::NAN, se: f64::NAN, n: n as u64 };
        }
        let r = a.iter().sum::<f64>() / sb;
        let bbar = sb / n as f64;
        let resid: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - r * y).collect();
        let var = if n > 1 { resid.iter().map(|e| e * e).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Estimate { mean: r, se: (var / n as f64).sqrt() / bbar, n: n as u64 }
    }

    /// Batch-means estimate for a correlated sequence.
    pub fn batch_means(xs: &[f64], batches: usize) -> Estimate {
        let batches = batches.max(2).min(xs.len().max(1));
        let size = xs.len() / batches;
        if size == 0 {
            return Estimate::from_samples(xs);
        }
        let means: Vec<f64> = xs.chunks_exact(size).take(batches).map(|c| c.iter().sum::<f64>() / size as f64).collect();
        let e = Estimate::from_samples(&means);
        Estimate { mean: xs.iter().sum::<f64>() / xs.len() as f64, se: e.se, n: xs.len() as u64 }
    }

    /// Symmetric confidence interval `mean ± z·se`.
    pub fn interval(&self, z: f64) -> (f64, f64) {
        (self.mean - z * self.se, self.mean + z * self.se)
    }
}

/// Effective sample size of importance weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}
