//! Estimators for correlated Monte Carlo time series.

use serde::Serialize;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Normalized autocorrelation `ρ(0..=max_lag)`.
pub fn autocorrelation(xs: &[f64], max_lag: usize) -> Vec<f64> {
    let n = xs.len();
    let m = mean(xs);
    let c0: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
    if !(c0 > 0.0) {
        return vec![1.0];
    }
    (0..=max_lag.min(n.saturating_sub(1)))
        .map(|t| {
            let c: f64 = (0..n - t).map(|k| (xs[k] - m) * (xs[k + t] - m)).sum::<f64>() / n as f64;
            c / c0
        })
        .collect()
}

/// Integrated autocorrelation time `τ = 1/2 + Σ_{t>=1} ρ(t)` with Sokal's
/// self-consistent window `W >= c τ(W)`, `c = 5`. Equals `1/2` for
/// independent samples.
pub fn integrated_autocorrelation_time(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return 0.5;
    }
    let m = mean(xs);
    let c0: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    if !(c0 > 0.0) {
        return 0.5;
    }
    let mut tau = 0.5;
    for w in 1..n / 2 {
        let c: f64 = (0..n - w).map(|k| (xs[k] - m) * (xs[k + w] - m)).sum();
        tau += c / c0;
        if w as f64 >= 5.0 * tau {
            break;
        }
    }
    tau.max(0.5)
}

/// `n / (2τ)`.
pub fn effective_sample_size(xs: &[f64]) -> f64 {
    xs.len() as f64 / (2.0 * integrated_autocorrelation_time(xs))
}

/// Mean with a standard error corrected for autocorrelation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub tau: f64,
    pub ess: f64,
    pub n: usize,
}

pub fn estimate(xs: &[f64]) -> Estimate {
    let n = xs.len();
    let tau = integrated_autocorrelation_time(xs);
    let var = variance(xs);
    Estimate {
        mean: mean(xs),
        se: (2.0 * tau * var / n as f64).sqrt(),
        tau,
        ess: n as f64 / (2.0 * tau),
        n,
    }
}

/// Standard error of the mean from `batches` non-overlapping batch means.
pub fn batch_means_se(xs: &[f64], batches: usize) -> f64 {
    let size = xs.len() / batches.max(1);
    if batches < 2 || size == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..batches).map(|b| mean(&xs[b * size..(b + 1) * size])).collect();
    (variance(&means) / batches as f64).sqrt()
}

/// Sample skewness `m3 / m2^{3/2}`.
pub fn skewness(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

/// Sample excess kurtosis `m4 / m2² - 3`.
pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

/// Jarque–Bera statistic and its asymptotic χ²₂ p-value `exp(-JB/2)`.
pub fn jarque_bera(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let s = skewness(xs);
    let k = excess_kurtosis(xs);
    let jb = n / 6.0 * (s * s + k * k / 4.0);
    (jb, (-jb / 2.0).exp())
}

/// Weighted least squares fit `y = a + b x`; returns `(a, b, se_b)`.
pub fn weighted_linear_fit(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let sx: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
    let sy: f64 = y.iter().zip(w).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| a * a * b).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((a, c), b)| a * c * b).sum();
    let det = sw * sxx - sx * sx;
    let slope = (sw * sxy - sx * sy) / det;
    let icept = (sy - slope * sx) / sw;
    (icept, slope, (sw / det).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn ar1(phi: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, Domain::Replicate, 0);
        let mut x = 0.0;
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                x = phi * x + z;
                x
            })
            .collect()
    }

    #[test]
    fn iid_tau_is_half() {
        let xs = ar1(0.0, 20_000, 1);
        let tau = integrated_autocorrelation_time(&xs);
        assert!((tau - 0.5).abs() < 0.1, "{tau}");
    }

    #[test]
    fn ar1_tau_matches_closed_form() {
        // τ = (1 + φ) / (2 (1 - φ)).
        let phi = 0.8;
        let xs = ar1(phi, 200_000, 2);
        let tau = integrated_autocorrelation_time(&xs);
        let exact = (1.0 + phi) / (2.0 * (1.0 - phi));
        assert!((tau - exact).abs() < 0.15 * exact, "{tau} vs {exact}");
        let est = estimate(&xs);
        let bm = batch_means_se(&xs, 50);
        assert!((est.se / bm - 1.0).abs() < 0.35);
    }

    #[test]
    fn gaussian_moments_and_normality() {
        let xs = ar1(0.0, 50_000, 3);
        assert!(skewness(&xs).abs() < 0.05);
        assert!(excess_kurtosis(&xs).abs() < 0.1);
        assert!(jarque_bera(&xs).1 > 1e-3);
        let cubes: Vec<f64> = xs.iter().map(|x| x * x * x).collect();
        assert!(jarque_bera(&cubes).1 < 1e-6);
    }

    #[test]
    fn linear_fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let (a, b, _) = weighted_linear_fit(&x, &y, &[1.0, 2.0, 1.0, 0.5]);
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
    }
}
