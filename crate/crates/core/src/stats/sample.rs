use serde::{Deserialize, Serialize};

/// Sample moments with standard errors, for Monte-Carlo comparisons.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub n: usize,
    pub mean: f64,
    /// Unbiased variance.
    pub var: f64,
    pub se_mean: f64,
    /// Large-sample standard error of `var`, from the fourth central moment.
    pub se_var: f64,
}

impl SampleStats {
    pub fn from_slice(xs: &[f64]) -> Self {
        let n = xs.len();
        let nf = n as f64;
        let mean = xs.iter().sum::<f64>() / nf;
        let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / nf;
        let var = m2 * nf / (nf - 1.0);
        Self {
            n,
            mean,
            var,
            se_mean: (var / nf).sqrt(),
            se_var: ((m4 - m2 * m2).max(0.0) / nf).sqrt(),
        }
    }
}

/// Unbiased sample covariance and its large-sample standard error.
pub fn sample_covariance(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let products: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    let mean_product = products.iter().sum::<f64>() / n;
    let spread = products.iter().map(|p| (p - mean_product).powi(2)).sum::<f64>() / n;
    (mean_product * n / (n - 1.0), (spread / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        let s = SampleStats::from_slice(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.var - 5.0 / 3.0).abs() < 1e-15);
        let (c, _) = sample_covariance(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]);
        assert!((c - 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_sample_has_zero_errors() {
        let s = SampleStats::from_slice(&[3.0; 10]);
        assert_eq!((s.var, s.se_var, s.se_mean), (0.0, 0.0, 0.0));
    }
}
