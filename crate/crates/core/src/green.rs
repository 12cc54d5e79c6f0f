//! Exact Gaussian covariances for the quadratic model on a torus.
//!
//! For `U(η) = kη²/2` the tilted torus measure `exp(-s Σ_b U(∇φ_b + u))`
//! has gradients independent of `u` and precision `s k L`, with `L` the
//! graph Laplacian. Here `s` is the bond weight times `β`.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// `λ(p) = Σ_l 2(1 - cos p_l)` on the dual torus.
fn laplacian_symbol(coords: &[usize], n: usize) -> f64 {
    coords
        .iter()
        .map(|&c| 2.0 * (1.0 - (2.0 * std::f64::consts::PI * c as f64 / n as f64).cos()))
        .sum()
}

fn coords_of(mut idx: usize, n: usize, d: usize) -> Vec<usize> {
    (0..d)
        .map(|_| {
            let c = idx % n;
            idx /= n;
            c
        })
        .collect()
}

/// In-place forward DFT `Σ_x a(x) e^{-i p·x}` over an `n^d` grid stored
/// first-coordinate-fastest.
fn fft_nd(data: &mut [Complex64], n: usize, d: usize) {
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    for axis in 0..d {
        let stride = n.pow(axis as u32);
        for start in 0..data.len() {
            if !(start / stride).is_multiple_of(n) {
                continue;
            }
            for k in 0..n {
                line[k] = data[start + k * stride];
            }
            fft.process(&mut line);
            for k in 0..n {
                data[start + k * stride] = line[k];
            }
        }
    }
}

fn check(n: usize, d: usize, stiffness: f64) -> Result<()> {
    if d == 0 || d > 4 || n < 2 {
        return Err(Error::validation("geometry", "need 1 <= d <= 4 and n >= 2"));
    }
    if !(stiffness > 0.0 && stiffness.is_finite()) {
        return Err(Error::validation("stiffness", "must be positive"));
    }
    Ok(())
}

/// Gradient covariances `C_ij(r) = Cov(∇_iφ(x), ∇_jφ(x + r))` on the
/// torus of side `n`, for precision `stiffness · L`. Returned as
/// `out[i][j][r]` with `r` indexed like lattice sites.
pub fn torus_gradient_covariance(n: usize, d: usize, stiffness: f64) -> Result<Vec<Vec<Vec<f64>>>> {
    check(n, d, stiffness)?;
    let sites = n.pow(d as u32);
    let phase: Vec<Vec<Complex64>> = (0..sites)
        .map(|p| {
            let c = coords_of(p, n, d);
            c.iter()
                .map(|&ck| Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * ck as f64 / n as f64) - 1.0)
                .collect()
        })
        .collect();
    let lambda: Vec<f64> = (0..sites).map(|p| laplacian_symbol(&coords_of(p, n, d), n)).collect();
    let mut out = vec![vec![Vec::new(); d]; d];
    for i in 0..d {
        for j in 0..d {
            let mut a: Vec<Complex64> = (0..sites)
                .map(|p| {
                    if p == 0 {
                        Complex64::new(0.0, 0.0)
                    } else {
                        phase[p][i] * phase[p][j].conj() / lambda[p]
                    }
                })
                .collect();
            fft_nd(&mut a, n, d);
            let norm = 1.0 / (sites as f64 * stiffness);
            out[i][j] = a.iter().map(|z| z.re * norm).collect();
        }
    }
    Ok(out)
}

/// Variance of `Σ_x c(x) φ(x)` for coefficients summing to zero.
pub fn linear_functional_variance(coeffs: &[f64], n: usize, d: usize, stiffness: f64) -> Result<f64> {
    check(n, d, stiffness)?;
    let sites = n.pow(d as u32);
    if coeffs.len() != sites {
        return Err(Error::validation("coeffs", "length must be n^d"));
    }
    let total: f64 = coeffs.iter().sum();
    let scale: f64 = coeffs.iter().map(|c| c.abs()).sum::<f64>().max(1.0);
    if total.abs() > 1e-9 * scale {
        return Err(Error::validation("coeffs", "must sum to zero"));
    }
    let mut a: Vec<Complex64> = coeffs.iter().map(|&c| Complex64::new(c, 0.0)).collect();
    fft_nd(&mut a, n, d);
    let s: f64 = (1..sites)
        .map(|p| a[p].norm_sqr() / laplacian_symbol(&coords_of(p, n, d), n))
        .sum();
    Ok(s / (sites as f64 * stiffness))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct `O(N^{2d})` sum over momenta.
    fn direct(n: usize, d: usize, i: usize, j: usize, r: &[usize]) -> f64 {
        let sites = n.pow(d as u32);
        let tau = 2.0 * std::f64::consts::PI / n as f64;
        let mut s = 0.0;
        for p in 1..sites {
            let c = coords_of(p, n, d);
            let lam: f64 = c.iter().map(|&k| 2.0 * (1.0 - (tau * k as f64).cos())).sum();
            let pi = tau * c[i] as f64;
            let pj = tau * c[j] as f64;
            let pr: f64 = c.iter().zip(r).map(|(&k, &x)| tau * (k * x) as f64).sum();
            let a = Complex64::from_polar(1.0, pi) - 1.0;
            let b = Complex64::from_polar(1.0, -pj) - 1.0;
            s += (a * b * Complex64::from_polar(1.0, -pr)).re / lam;
        }
        s / sites as f64
    }

    #[test]
    fn fft_matches_direct_sum() {
        for &(n, d) in &[(8, 1), (6, 2), (4, 3)] {
            let c = torus_gradient_covariance(n, d, 1.0).unwrap();
            for i in 0..d {
                for j in 0..d {
                    for r in 0..n.pow(d as u32) {
                        let exact = direct(n, d, i, j, &coords_of(r, n, d));
                        assert!((c[i][j][r] - exact).abs() < 1e-12, "{n} {d} {i} {j} {r}");
                    }
                }
            }
        }
    }

    #[test]
    fn one_dimensional_gradients() {
        // On a ring the gradients are iid N(0, 1/s) conditioned on summing
        // to zero: variance (1 - 1/N)/s, covariance -1/(N s).
        let n = 10;
        let c = torus_gradient_covariance(n, 1, 2.0).unwrap();
        assert!((c[0][0][0] - (1.0 - 0.1) / 2.0).abs() < 1e-12);
        for r in 1..n {
            assert!((c[0][0][r] + 0.1 / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_two_sum_rule() {
        // Σ_i Var(∇_iφ) = (N^d - 1)/(N^d s) since tr(∇ L^+ ∇*) = rank.
        let (n, d) = (8, 2);
        let c = torus_gradient_covariance(n, d, 1.0).unwrap();
        let tr = c[0][0][0] + c[1][1][0];
        let sites = (n * n) as f64;
        assert!((tr - (sites - 1.0) / sites).abs() < 1e-12);
    }

    #[test]
    fn functional_variance_of_a_gradient() {
        let (n, d) = (6, 2);
        let mut coeffs = vec![0.0; n * n];
        coeffs[1] = 1.0;
        coeffs[0] = -1.0;
        let v = linear_functional_variance(&coeffs, n, d, 3.0).unwrap();
        let c = torus_gradient_covariance(n, d, 3.0).unwrap();
        assert!((v - c[0][0][0]).abs() < 1e-12);
        coeffs[0] = 0.0;
        assert!(linear_functional_variance(&coeffs, n, d, 3.0).is_err());
    }
}
