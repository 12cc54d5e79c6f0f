//! Covariance decay tables, the CLT statistic, surface tension and tilt
//! estimates.
//!
//! On a torus the raw gradients `∇_iφ` sum to zero over the lattice, so
//! their translation average has mean exactly zero and the effective
//! gradient `∇_iφ + u_i` has mean `u_i`.

use std::fmt::Write as _;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::decimation::{theoretical_bounds, SiteMeasure};
use crate::error::{Error, Result};
use crate::green;
use crate::lattice::{Field, Geometry, Parity};
use crate::par::{map_slice, Parallelism};
use crate::potentials::Potential;
use crate::sampler::{run_chain, Algorithm, ChainConfig, Model};
use crate::stats;

// ---------------------------------------------------------------------------
// Covariance decay

#[derive(Debug, Clone, Serialize)]
pub struct DecayRow {
    pub r: usize,
    pub i: usize,
    pub j: usize,
    pub cov: f64,
    pub se: f64,
    pub n: usize,
    pub ess: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayFit {
    /// `p` in `|cov| ∝ (1 + r)^{-p}`.
    pub exponent: f64,
    /// Half width of the 95% interval.
    pub ci95: f64,
    pub r_min: usize,
    pub r_max: usize,
    pub reliable: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayTable {
    pub rows: Vec<DecayRow>,
    pub fit: Option<DecayFit>,
    pub min_ess: f64,
}

impl DecayTable {
    pub fn get(&self, r: usize, i: usize, j: usize) -> Option<&DecayRow> {
        self.rows.iter().find(|w| w.r == r && w.i == i && w.j == j)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("r,i,j,cov,se,n\n");
        for w in &self.rows {
            let _ = writeln!(s, "{},{},{},{:e},{:e},{}", w.r, w.i + 1, w.j + 1, w.cov, w.se, w.n);
        }
        s
    }
}

/// Index map swapping axis 0 with `axis`.
fn swap(axis: usize, i: usize) -> usize {
    if i == 0 {
        axis
    } else if i == axis {
        0
    } else {
        i
    }
}

/// Site reached from `x` by `r` steps along `axis` on a torus.
fn torus_offset(g: &Geometry, x: usize, axis: usize, r: usize) -> usize {
    let s = g.side();
    let stride = s.pow(axis as u32);
    let c = (x / stride) % s;
    x - c * stride + ((c + r) % s) * stride
}

/// Streaming estimator for translation averaged gradient covariances
/// `Cov(∇_iφ(x), ∇_jφ(x + r e_1))`, also averaged over the axis
/// permutations that map `e_1` to each `e_a`.
pub struct DecayAccumulator {
    geometry: Geometry,
    max_r: usize,
    series: Vec<Vec<f64>>,
    /// `offsets[a][r][x]`: the site `x + r e_a`.
    offsets: Vec<Vec<Vec<usize>>>,
}

impl DecayAccumulator {
    pub fn new(geometry: Geometry, max_r: usize) -> Result<Self> {
        if !geometry.is_torus() {
            return Err(Error::validation("geometry", "covariance decay needs a torus"));
        }
        if max_r == 0 || max_r > geometry.n() / 2 {
            return Err(Error::validation("max_r", "must lie in 1..=N/2"));
        }
        let d = geometry.d();
        Ok(DecayAccumulator {
            geometry,
            max_r,
            series: vec![Vec::new(); (max_r + 1) * d * d],
            offsets: (0..d)
                .map(|a| {
                    (0..=max_r)
                        .map(|r| (0..geometry.n_sites()).map(|x| torus_offset(&geometry, x, a, r)).collect())
                        .collect()
                })
                .collect(),
        })
    }

    fn slot(&self, r: usize, i: usize, j: usize) -> usize {
        let d = self.geometry.d();
        (r * d + i) * d + j
    }

    pub fn push(&mut self, field: &Field) -> Result<()> {
        let g = &self.geometry;
        if field.geometry != *g {
            return Err(Error::validation("field", "geometry mismatch"));
        }
        let d = g.d();
        let ns = g.n_sites();
        let h = &field.heights;
        let grads: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..ns).map(|x| h[self.offsets[i][1][x]] - h[x]).collect())
            .collect();
        for r in 0..=self.max_r {
            for i in 0..d {
                for j in 0..d {
                    let mut acc = 0.0;
                    for a in 0..d {
                        let (ii, jj) = (swap(a, i), swap(a, j));
                        let off = &self.offsets[a][r];
                        let s: f64 = (0..ns).map(|x| grads[ii][x] * grads[jj][off[x]]).sum();
                        acc += s / ns as f64;
                    }
                    let k = self.slot(r, i, j);
                    self.series[k].push(acc / d as f64);
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.series[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Build the table and fit the `(1,1)` row over `2 <= r <= min(max_r, N/4)`.
    /// The fit is marked unreliable below `min_ess` effective samples or
    /// when a fitted entry is within two standard errors of zero.
    pub fn finish(&self, min_ess: f64) -> DecayTable {
        let d = self.geometry.d();
        let mut rows = Vec::new();
        let mut ess_min = f64::INFINITY;
        for r in 0..=self.max_r {
            for i in 0..d {
                for j in 0..d {
                    let e = stats::estimate(&self.series[self.slot(r, i, j)]);
                    ess_min = ess_min.min(e.ess);
                    rows.push(DecayRow {
                        r,
                        i,
                        j,
                        cov: e.mean,
                        se: e.se,
                        n: e.n,
                        ess: e.ess,
                    });
                }
            }
        }
        let r_max = self.max_r.min(self.geometry.n() / 4);
        let fit = fit_decay(&rows, 2, r_max, |w| w.i == 0 && w.j == 0).map(|mut f| {
            f.reliable = f.reliable && ess_min >= min_ess;
            f
        });
        DecayTable {
            rows,
            fit,
            min_ess: ess_min,
        }
    }
}

/// Weighted least squares of `log|cov|` on `log(1 + r)`.
pub fn fit_decay(rows: &[DecayRow], r_min: usize, r_max: usize, pick: impl Fn(&DecayRow) -> bool) -> Option<DecayFit> {
    let sel: Vec<&DecayRow> = rows.iter().filter(|w| pick(w) && w.r >= r_min && w.r <= r_max).collect();
    if sel.len() < 2 {
        return None;
    }
    let x: Vec<f64> = sel.iter().map(|w| (1.0 + w.r as f64).ln()).collect();
    let y: Vec<f64> = sel.iter().map(|w| w.cov.abs().ln()).collect();
    let wts: Vec<f64> = sel
        .iter()
        .map(|w| {
            let rel = if w.se > 0.0 { w.se / w.cov.abs() } else { 1e-6 };
            1.0 / (rel * rel)
        })
        .collect();
    let (_, slope, se) = stats::weighted_linear_fit(&x, &y, &wts);
    let reliable = sel.iter().all(|w| w.cov.abs() > 2.0 * w.se) && slope.is_finite();
    Some(DecayFit {
        exponent: -slope,
        ci95: 1.96 * se,
        r_min,
        r_max,
        reliable,
    })
}

pub fn covariance_decay<'a>(samples: impl IntoIterator<Item = &'a Field>, geometry: Geometry, max_r: usize) -> Result<DecayTable> {
    let mut acc = DecayAccumulator::new(geometry, max_r)?;
    for f in samples {
        acc.push(f)?;
    }
    Ok(acc.finish(1e4))
}

/// Exact rows for the quadratic model, averaged exactly like
/// [`DecayAccumulator`]. `stiffness` is `w β k`.
pub fn exact_decay_rows(n: usize, d: usize, stiffness: f64, max_r: usize) -> Result<Vec<DecayRow>> {
    let c = green::torus_gradient_covariance(n, d, stiffness)?;
    let g = Geometry::torus(d, n)?;
    let mut rows = Vec::new();
    for r in 0..=max_r {
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for a in 0..d {
                    let site = torus_offset(&g, 0, a, r);
                    acc += c[swap(a, i)][swap(a, j)][site];
                }
                rows.push(DecayRow {
                    r,
                    i,
                    j,
                    cov: acc / d as f64,
                    se: 0.0,
                    n: 0,
                    ess: f64::INFINITY,
                });
            }
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Central limit statistic

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Zero,
    /// `Π_l exp(1 - 1/(1 - (z_l/R)²))` on `|z_l| < R`.
    Bump { radius: f64 },
    /// `exp(-|z|²/(2σ²))` cut off at `|z| <= radius`.
    Gaussian { sigma: f64, radius: f64 },
}

/// Vector test function `f_i(z) = weights[i] · profile(z)`, centred at the
/// middle of the torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunction {
    pub profile: Profile,
    pub weights: Vec<f64>,
}

impl TestFunction {
    pub fn eval(&self, z: &[f64]) -> f64 {
        match self.profile {
            Profile::Zero => 0.0,
            Profile::Bump { radius } => z
                .iter()
                .map(|&c| {
                    let t = c / radius;
                    if t.abs() < 1.0 {
                        (1.0 - 1.0 / (1.0 - t * t)).exp()
                    } else {
                        0.0
                    }
                })
                .product(),
            Profile::Gaussian { sigma, radius } => {
                let r2: f64 = z.iter().map(|c| c * c).sum();
                if r2 <= radius * radius {
                    (-r2 / (2.0 * sigma * sigma)).exp()
                } else {
                    0.0
                }
            }
        }
    }

    /// Sup-norm radius of the support.
    pub fn radius(&self) -> f64 {
        match self.profile {
            Profile::Zero => 0.0,
            Profile::Bump { radius } | Profile::Gaussian { radius, .. } => radius,
        }
    }
}

/// Per-site values `f_i(ε(x - c))` on the torus, zero where the scaled
/// support does not reach.
struct ScaledTestFunction {
    values: Vec<f64>,
    weights: Vec<f64>,
}

fn scale_test_function(g: &Geometry, f: &TestFunction, eps: f64) -> Result<ScaledTestFunction> {
    if !g.is_torus() {
        return Err(Error::validation("geometry", "the CLT statistic is computed on a torus"));
    }
    if f.weights.len() != g.d() {
        return Err(Error::validation("f.weights", "need one weight per direction"));
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::validation("epsilon", "must lie in (0, 1]"));
    }
    let half = (g.n() / 2) as f64;
    if f.radius() / eps > half - 2.0 {
        return Err(Error::validation(
            "epsilon",
            format!("support radius {} exceeds the torus half width {}", f.radius() / eps, half - 2.0),
        ));
    }
    let values = (0..g.n_sites())
        .map(|x| {
            let z: Vec<f64> = g.coords(x).iter().map(|&c| eps * (c as f64 - half)).collect();
            f.eval(&z)
        })
        .collect();
    Ok(ScaledTestFunction {
        values,
        weights: f.weights.clone(),
    })
}

/// `S_ε(f)` and `R_ε(f) = Σ_i R_{ε,i}(f)` for one configuration.
fn clt_pair(field: &Field, f: &ScaledTestFunction, eps: f64) -> (f64, f64) {
    let g = &field.geometry;
    let d = g.d();
    let h = &field.heights;
    let norm = eps.powf(d as f64 / 2.0);
    let mut s = 0.0;
    let mut r = 0.0;
    for x in 0..g.n_sites() {
        let fx = f.values[x];
        for i in 0..d {
            let y = torus_offset(g, x, i, 1);
            let w = f.weights[i];
            // Raw torus gradients equal the effective gradient minus u.
            s += w * fx * (h[y] - h[x]);
            if g.parity(x) == Parity::Even {
                let z = torus_offset(g, y, i, 1);
                r += w * (f.values[y] - fx) * (h[z] - h[y]);
            }
        }
    }
    (norm * s, norm * r)
}

/// `S_ε(f) = S^e_ε(f) + R_ε(f)` split used by the even/odd argument;
/// returns `(S, S^e, R)`.
pub fn clt_split(field: &Field, f: &TestFunction, eps: f64) -> Result<(f64, f64, f64)> {
    let sf = scale_test_function(&field.geometry, f, eps)?;
    let (s, r) = clt_pair(field, &sf, eps);
    let g = &field.geometry;
    let h = &field.heights;
    let norm = eps.powf(g.d() as f64 / 2.0);
    let mut se = 0.0;
    for x in g.sites_of(Parity::Even) {
        for i in 0..g.d() {
            let z = torus_offset(g, x, i, 2);
            se += sf.weights[i] * sf.values[x] * (h[z] - h[x]);
        }
    }
    Ok((s, norm * se, r))
}

#[derive(Debug, Clone, Serialize)]
pub struct CltResult {
    pub epsilon: f64,
    pub f: TestFunction,
    pub replicates: Vec<f64>,
    pub remainders: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    /// Standard error of the variance, `var · sqrt(2/ESS)`.
    pub variance_se: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub jarque_bera: f64,
    pub p_value: f64,
    pub remainder_variance: f64,
    pub tau: f64,
}

impl CltResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,s_eps,r_eps\n");
        for (k, (a, b)) in self.replicates.iter().zip(&self.remainders).enumerate() {
            let _ = writeln!(s, "{k},{a:e},{b:e}");
        }
        s
    }
}

pub struct CltAccumulator {
    geometry: Geometry,
    f: TestFunction,
    scaled: ScaledTestFunction,
    epsilon: f64,
    s: Vec<f64>,
    r: Vec<f64>,
}

impl CltAccumulator {
    pub fn new(geometry: Geometry, f: TestFunction, epsilon: f64) -> Result<Self> {
        let scaled = scale_test_function(&geometry, &f, epsilon)?;
        Ok(CltAccumulator {
            geometry,
            f,
            scaled,
            epsilon,
            s: Vec::new(),
            r: Vec::new(),
        })
    }

    pub fn push(&mut self, field: &Field) -> Result<()> {
        if field.geometry != self.geometry {
            return Err(Error::validation("field", "geometry mismatch"));
        }
        let (s, r) = clt_pair(field, &self.scaled, self.epsilon);
        self.s.push(s);
        self.r.push(r);
        Ok(())
    }

    pub fn finish(self) -> Result<CltResult> {
        if self.s.len() < 30 {
            return Err(Error::validation("replicates", "need at least 30 for moment tests"));
        }
        let var = stats::variance(&self.s);
        let tau = stats::integrated_autocorrelation_time(&self.s);
        let ess = self.s.len() as f64 / (2.0 * tau);
        let (jb, p) = if var > 0.0 { stats::jarque_bera(&self.s) } else { (0.0, 1.0) };
        let (skew, kurt) = if var > 0.0 {
            (stats::skewness(&self.s), stats::excess_kurtosis(&self.s))
        } else {
            (0.0, 0.0)
        };
        Ok(CltResult {
            epsilon: self.epsilon,
            f: self.f,
            mean: stats::mean(&self.s),
            variance: var,
            variance_se: var * (2.0 / ess).sqrt(),
            skewness: skew,
            excess_kurtosis: kurt,
            jarque_bera: jb,
            p_value: p,
            remainder_variance: stats::variance(&self.r),
            tau,
            replicates: self.s,
            remainders: self.r,
        })
    }
}

pub fn clt_statistic<'a>(samples: impl IntoIterator<Item = &'a Field>, geometry: Geometry, f: &TestFunction, epsilon: f64) -> Result<CltResult> {
    let mut acc = CltAccumulator::new(geometry, f.clone(), epsilon)?;
    for s in samples {
        acc.push(s)?;
    }
    acc.finish()
}

/// Exact `Var S_ε(f)` for the quadratic model with precision `stiffness · L`.
pub fn clt_exact_variance(geometry: Geometry, f: &TestFunction, epsilon: f64, stiffness: f64) -> Result<f64> {
    let sf = scale_test_function(&geometry, f, epsilon)?;
    let g = &geometry;
    let d = g.d();
    let norm = epsilon.powf(d as f64 / 2.0);
    let mut coeffs = vec![0.0; g.n_sites()];
    for x in 0..g.n_sites() {
        for i in 0..d {
            let w = norm * sf.weights[i] * sf.values[x];
            coeffs[torus_offset(g, x, i, 1)] += w;
            coeffs[x] -= w;
        }
    }
    green::linear_functional_variance(&coeffs, g.n(), d, stiffness)
}

// ---------------------------------------------------------------------------
// Tilt

#[derive(Debug, Clone, Serialize)]
pub struct TiltEstimate {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub ess: Vec<f64>,
}

/// Average gradient per direction over bonds whose endpoints are both
/// interior (bonds touching the boundary would telescope to exactly `u`).
pub struct TiltAccumulator {
    geometry: Geometry,
    series: Vec<Vec<f64>>,
}

impl TiltAccumulator {
    pub fn new(geometry: Geometry) -> Result<Self> {
        if geometry.is_torus() {
            return Err(Error::validation("geometry", "tilt estimates need a box"));
        }
        if geometry.n() < 3 {
            return Err(Error::validation("geometry.n", "need n >= 3 for interior bonds"));
        }
        Ok(TiltAccumulator {
            geometry,
            series: vec![Vec::new(); geometry.d()],
        })
    }

    pub fn push(&mut self, field: &Field) -> Result<()> {
        let g = &self.geometry;
        if field.geometry != *g {
            return Err(Error::validation("field", "geometry mismatch"));
        }
        for i in 0..g.d() {
            let (mut s, mut c) = (0.0, 0usize);
            for x in 0..g.n_sites() {
                if g.is_boundary(x) {
                    continue;
                }
                if let Some(y) = g.neighbor(x, i as isize + 1) {
                    if !g.is_boundary(y) {
                        s += field.heights[y] - field.heights[x];
                        c += 1;
                    }
                }
            }
            self.series[i].push(s / c as f64);
        }
        Ok(())
    }

    pub fn finish(&self) -> TiltEstimate {
        let e: Vec<stats::Estimate> = self.series.iter().map(|s| stats::estimate(s)).collect();
        TiltEstimate {
            mean: e.iter().map(|e| e.mean).collect(),
            se: e.iter().map(|e| e.se).collect(),
            ess: e.iter().map(|e| e.ess).collect(),
        }
    }
}

pub fn tilt_estimate<'a>(samples: impl IntoIterator<Item = &'a Field>, geometry: Geometry) -> Result<TiltEstimate> {
    let mut acc = TiltAccumulator::new(geometry)?;
    for s in samples {
        acc.push(s)?;
    }
    Ok(acc.finish())
}

// ---------------------------------------------------------------------------
// Surface tension, d = 1 transfer operator

pub const DEFAULT_TRANSFER_GRID: usize = 400;
const MAX_TRANSFER_GRID: usize = 12_800;
const WINDOW_DROP: f64 = 60.0;

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Interval outside which `logf` stays `WINDOW_DROP` below its maximum.
fn find_window(logf: &dyn Fn(f64) -> f64, center: f64, scale: f64) -> Result<(f64, f64)> {
    let mut top = logf(center);
    let step = scale;
    let mut hi = center;
    let mut lo = center;
    for _ in 0..10_000 {
        hi += step;
        let v = logf(hi);
        top = top.max(v);
        if v < top - WINDOW_DROP && logf(hi + step) < top - WINDOW_DROP {
            break;
        }
    }
    for _ in 0..10_000 {
        lo -= step;
        let v = logf(lo);
        top = top.max(v);
        if v < top - WINDOW_DROP && logf(lo - step) < top - WINDOW_DROP {
            break;
        }
    }
    if !(top.is_finite()) || hi - lo > 1e6 * scale {
        return Err(Error::Integration {
            stage: "transfer window",
            requested: WINDOW_DROP,
            achieved: top,
        });
    }
    Ok((lo, hi))
}

/// `log (f^{*n})(0)` for `f = exp(logf)` on the real line, evaluated by an
/// `n`-fold discrete convolution on a uniform grid of about `m` points. An
/// exponential tilt `e^{λη}` (invisible on `Σ η = 0`) centres the kernel so
/// the value at zero is computed at the bulk of the distribution.
pub fn log_pinned_convolution_power(logf: &dyn Fn(f64) -> f64, n: usize, m: usize, center: f64, scale: f64) -> Result<f64> {
    if n < 1 || m < 16 {
        return Err(Error::validation("transfer", "need n >= 1 and grid >= 16"));
    }
    let (mut lo, mut hi) = find_window(logf, center, scale)?;
    let mut lambda = 0.0;
    let mut grid: Vec<f64> = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    let mut h = 0.0;
    for _ in 0..4 {
        lo = lo.min(0.0 - scale);
        hi = hi.max(0.0 + scale);
        h = (hi - lo) / m as f64;
        let kmin = (lo / h).floor() as i64;
        let kmax = (hi / h).ceil() as i64;
        grid = (kmin..=kmax).map(|k| k as f64 * h).collect();
        vals = grid.iter().map(|&x| logf(x)).collect();
        // Newton for the tilt that makes the grid mean vanish.
        for _ in 0..100 {
            let w: Vec<f64> = vals.iter().zip(&grid).map(|(v, x)| v + lambda * x).collect();
            let lz = log_sum_exp(w.iter().cloned());
            let p: Vec<f64> = w.iter().map(|v| (v - lz).exp()).collect();
            let mean: f64 = p.iter().zip(&grid).map(|(p, x)| p * x).sum();
            let var: f64 = p.iter().zip(&grid).map(|(p, x)| p * (x - mean) * (x - mean)).sum();
            if !(var > 0.0) {
                return Err(Error::Integration {
                    stage: "transfer tilt",
                    requested: 0.0,
                    achieved: var,
                });
            }
            let step = mean / var;
            lambda -= step;
            if step.abs() * var.sqrt() < 1e-15 {
                break;
            }
        }
        let tilted = |x: f64| logf(x) + lambda * x;
        let (l2, h2) = find_window(&tilted, 0.0, scale)?;
        if l2 >= lo - 0.5 * scale && h2 <= hi + 0.5 * scale {
            break;
        }
        lo = lo.min(l2);
        hi = hi.max(h2);
    }
    let kmin = (grid[0] / h).round() as i64;
    let w: Vec<f64> = vals.iter().zip(&grid).map(|(v, x)| v + lambda * x + h.ln()).collect();
    let log_s = log_sum_exp(w.iter().cloned());
    let q: Vec<f64> = w.iter().map(|v| (v - log_s).exp()).collect();
    let k = q.len();
    let span = n * (k - 1) + 1;
    let len = span.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut buf: Vec<Complex64> = (0..len).map(|j| Complex64::new(if j < k { q[j] } else { 0.0 }, 0.0)).collect();
    fwd.process(&mut buf);
    for z in buf.iter_mut() {
        *z = z.powu(n as u32);
    }
    inv.process(&mut buf);
    // Σ k_i = 0 corresponds to Σ j_i = -n kmin.
    let target = (-(n as i64) * kmin) as usize;
    let at_zero = buf[target].re / len as f64;
    if !(at_zero > 0.0) {
        return Err(Error::Integration {
            stage: "transfer convolution",
            requested: 0.0,
            achieved: at_zero,
        });
    }
    Ok(n as f64 * log_s + at_zero.ln() - h.ln())
}

fn transfer_scale(potential: &Potential) -> f64 {
    let (a, _) = potential.growth();
    0.05 / (potential.beta * a).sqrt().max(1e-12)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TransferValue {
    pub sigma: f64,
    pub grid: usize,
    /// `|σ(grid) - σ(grid/2)|` at the accepted grid.
    pub refinement_change: f64,
}

fn refine(mut eval: impl FnMut(usize) -> Result<f64>, grid: usize, tol: f64) -> Result<TransferValue> {
    let mut m = grid.max(16);
    let mut prev = eval(m)?;
    loop {
        let next = eval(2 * m)?;
        let change = (next - prev).abs();
        m *= 2;
        if change < tol {
            return Ok(TransferValue {
                sigma: next,
                grid: m,
                refinement_change: change,
            });
        }
        if m >= MAX_TRANSFER_GRID {
            return Err(Error::Integration {
                stage: "transfer refinement",
                requested: tol,
                achieved: change,
            });
        }
        prev = next;
    }
}

fn check_transfer_args(potential: &Potential, u: f64, n: usize) -> Result<()> {
    potential.validate()?;
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::validation("n", "must be even and >= 2"));
    }
    if !u.is_finite() {
        return Err(Error::validation("u", "must be finite"));
    }
    Ok(())
}

/// `σ_{T_N}(u) = -(1/N) log(Z(u)/Z(0))` on the one dimensional torus with
/// `Z(u) = (f_u^{*N})(0)`, `f_u(η) = exp(-βU(η + u))`. The grid is doubled
/// until σ changes by less than `1e-10`.
pub fn surface_tension_transfer_1d(potential: &Potential, u: f64, n: usize, grid: usize) -> Result<TransferValue> {
    check_transfer_args(potential, u, n)?;
    let beta = potential.beta;
    let scale = transfer_scale(potential);
    let log_z = |u: f64, m: usize| -> Result<f64> {
        let f = move |x: f64| -beta * potential.value(x + u, 0);
        log_pinned_convolution_power(&f, n, m, -u, scale)
    };
    refine(|m| Ok(-(log_z(u, m)? - log_z(0.0, m)?) / n as f64), grid, 1e-10)
}

/// Even torus surface tension from the decimated Hamiltonian.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvenSurfaceTension {
    pub u: f64,
    pub sigma: f64,
    pub sigma_even: f64,
    /// `|σ_ev - σ/2|`, the stated halving identity.
    pub halving_defect: f64,
    /// `|σ_ev - 2σ|`, what the definitions imply since `Z_E = Z_T` and the
    /// even torus has half as many sites.
    pub doubling_defect: f64,
    /// `|log Z_E(u) - log Z_T(u)|` at the accepted grid.
    pub partition_defect: f64,
    pub grid: usize,
}

/// `σ_ev(u) = -(1/|T_ev|) log(Z_E(u)/Z_E(0))` with
/// `Z_E(u) = ∫ exp(-Σ_{x odd} F_x) Π_{even x ≠ 0} dφ(x)` and `F_x` the
/// single-site free energy of `exp(-β Σ_{i∈I} U(∇_iφ(x) + u_i))`, obtained
/// by quadrature. In `d = 1`, `F_x` depends on `Δ = φ(x+1) - φ(x-1)` only,
/// so `Z_E(u)` is an `N/2`-fold pinned convolution power of `exp(-F)`.
pub fn even_surface_tension_1d(potential: &Potential, u: f64, n: usize, grid: usize, tol: f64) -> Result<EvenSurfaceTension> {
    check_transfer_args(potential, u, n)?;
    let half = n / 2;
    let beta = potential.beta;
    let scale = 2.0 * transfer_scale(potential);
    let log_f_x = |delta: f64, u: f64| -> f64 {
        // Legs φ(x-1) - u and φ(x+1) + u with φ(x-1) = 0.
        let legs = [-u, delta + u];
        let m = SiteMeasure {
            potential,
            prefactor: beta,
            legs: &legs,
        };
        match m.free_energy(tol) {
            Ok(fx) => -fx,
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let log_ze = |u: f64, m: usize| -> Result<f64> {
        let f = move |x: f64| log_f_x(x, u);
        log_pinned_convolution_power(&f, half, m, -2.0 * u, scale)
    };
    let log_zt = |u: f64, m: usize| -> Result<f64> {
        let f = move |x: f64| -beta * potential.value(x + u, 0);
        log_pinned_convolution_power(&f, n, m, -u, transfer_scale(potential))
    };
    let sigma = surface_tension_transfer_1d(potential, u, n, grid)?;
    let ev = refine(|m| Ok(-(log_ze(u, m)? - log_ze(0.0, m)?) / half as f64), grid, 1e-9)?;
    let partition_defect = (log_ze(u, ev.grid)? - log_zt(u, ev.grid)?).abs();
    Ok(EvenSurfaceTension {
        u,
        sigma: sigma.sigma,
        sigma_even: ev.sigma,
        halving_defect: (ev.sigma - 0.5 * sigma.sigma).abs(),
        doubling_defect: (ev.sigma - 2.0 * sigma.sigma).abs(),
        partition_defect,
        grid: ev.grid,
    })
}

// ---------------------------------------------------------------------------
// Surface tension convexity

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMethod {
    Transfer1d,
    ThermodynamicIntegration,
}

#[derive(Debug, Clone, Serialize)]
pub struct SurfaceTensionResult {
    pub method: SigmaMethod,
    pub d: usize,
    pub beta: f64,
    pub n: usize,
    /// Unit direction of the scan; `u_k = s_k · direction`.
    pub direction: Vec<f64>,
    pub s_grid: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma_se: Vec<f64>,
    /// Central second differences at interior nodes (NaN at the ends).
    pub d2sigma: Vec<f64>,
    pub d2sigma_se: Vec<f64>,
    /// `4dβ²c_l`, or 0 when the random walk bounds are not asserted.
    pub bound: f64,
    pub bound_asserted: bool,
    /// `min d2sigma - bound` over interior nodes.
    pub margin: f64,
    pub sigma_even: Option<Vec<f64>>,
}

impl SurfaceTensionResult {
    pub fn to_csv(&self) -> String {
        let d = self.direction.len();
        let mut s = String::new();
        for i in 0..d {
            let _ = write!(s, "u{},", i + 1);
        }
        s.push_str("sigma,sigma_se,d2sigma,margin\n");
        for k in 0..self.s_grid.len() {
            for i in 0..d {
                let _ = write!(s, "{:e},", self.s_grid[k] * self.direction[i]);
            }
            let _ = writeln!(
                s,
                "{:e},{:e},{:e},{:e}",
                self.sigma[k],
                self.sigma_se[k],
                self.d2sigma[k],
                self.d2sigma[k] - self.bound
            );
        }
        s
    }
}

/// Monte Carlo settings for thermodynamic integration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TiSettings {
    pub sweeps: u64,
    pub burn_in: u64,
    #[serde(default = "one")]
    pub thinning: u64,
    pub seed: u64,
    #[serde(default = "nine")]
    pub path_nodes: usize,
    #[serde(default)]
    pub parallelism: Parallelism,
}

fn one() -> u64 {
    1
}

fn nine() -> usize {
    9
}

/// `∂σ/∂u_i = (wβ/|T|) E_u[Σ_x U'(∇_iφ(x) + u_i)]` by heat-bath sampling,
/// returned with standard errors.
pub fn sigma_gradient_mc(potential: &Potential, geometry: Geometry, u: &[f64], ti: &TiSettings, counter: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let cfg = ChainConfig {
        potential: potential.clone(),
        geometry,
        tilt: u.to_vec(),
        sweeps: ti.sweeps,
        burn_in: ti.burn_in,
        thinning: ti.thinning,
        seed: ti.seed.wrapping_add(counter.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        algorithm: Algorithm::HeatBath,
        bond_weight: None,
        parallelism: ti.parallelism,
    };
    let model = Model::new(potential.clone(), geometry, u.to_vec(), None)?;
    let d = geometry.d();
    let mut series = vec![Vec::new(); d];
    let pre = model.prefactor() / geometry.n_sites() as f64;
    run_chain(cfg, |_, f| {
        for (i, s) in series.iter_mut().enumerate() {
            let mut acc = 0.0;
            for x in 0..geometry.n_sites() {
                acc += potential.value(f.effective_gradient(x, i as isize + 1)?, 1);
            }
            s.push(pre * acc);
        }
        Ok(())
    })?;
    let e: Vec<stats::Estimate> = series.iter().map(|s| stats::estimate(s)).collect();
    Ok((e.iter().map(|e| e.mean).collect(), e.iter().map(|e| e.se).collect()))
}

/// `σ(s·e)` by the trapezoid rule along the straight path from 0, using
/// `path_nodes` gradient estimates. Returns `(σ, se)` with independent
/// node errors propagated.
pub fn surface_tension_ti(potential: &Potential, geometry: Geometry, u: &[f64], ti: &TiSettings) -> Result<(f64, f64)> {
    if ti.path_nodes < 2 {
        return Err(Error::validation("path_nodes", "need at least 2"));
    }
    let k = ti.path_nodes;
    let nodes: Vec<usize> = (0..k).collect();
    let grads = map_slice(&nodes, ti.parallelism, |&j| {
        let t = j as f64 / (k - 1) as f64;
        let uj: Vec<f64> = u.iter().map(|v| t * v).collect();
        let key = u.iter().fold(j as u64, |acc, v| acc.wrapping_mul(31).wrapping_add(v.to_bits()));
        sigma_gradient_mc(potential, geometry, &uj, ti, key)
    });
    let mut sigma = 0.0;
    let mut var = 0.0;
    for (j, g) in grads.into_iter().enumerate() {
        let (m, se) = g?;
        let w = if j == 0 || j == k - 1 { 0.5 } else { 1.0 } / (k - 1) as f64;
        let proj: f64 = m.iter().zip(u).map(|(a, b)| a * b).sum();
        let proj_se2: f64 = se.iter().zip(u).map(|(a, b)| (a * b).powi(2)).sum();
        sigma += w * proj;
        var += w * w * proj_se2;
    }
    Ok((sigma, var.sqrt()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvexitySpec {
    pub n: usize,
    /// Scan positions `s_k` along `direction`.
    pub s_grid: Vec<f64>,
    #[serde(default)]
    pub direction: Option<Vec<f64>>,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default)]
    pub with_even: bool,
    #[serde(default)]
    pub mc: Option<TiSettings>,
}

fn default_grid() -> usize {
    DEFAULT_TRANSFER_GRID
}

fn default_q() -> f64 {
    1.0
}

/// σ on a uniform grid along a direction, its second differences and the
/// margin against `4dβ²c_l`. `d = 1` uses the transfer operator; otherwise
/// thermodynamic integration, with `d2sigma` from central differences of
/// the Monte Carlo gradient.
pub fn surface_tension_convexity(potential: &Potential, d: usize, spec: &ConvexitySpec) -> Result<SurfaceTensionResult> {
    let s = &spec.s_grid;
    if s.len() < 3 {
        return Err(Error::validation("s_grid", "need at least 3 points"));
    }
    let step = s[1] - s[0];
    if !(step > 0.0) || s.windows(2).any(|w| ((w[1] - w[0]) - step).abs() > 1e-9 * step.abs().max(1.0)) {
        return Err(Error::validation("s_grid", "must be uniform and increasing"));
    }
    let dir = spec.direction.clone().unwrap_or_else(|| {
        let mut e = vec![0.0; d];
        e[0] = 1.0;
        e
    });
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    if dir.len() != d || !(norm > 0.0) {
        return Err(Error::validation("direction", "need a nonzero d-vector"));
    }
    let dir: Vec<f64> = dir.iter().map(|x| x / norm).collect();
    let dec = potential.decomposition()?;
    let b = theoretical_bounds(&dec, spec.q, d, potential.beta)?;
    let bound = if b.asserted {
        4.0 * d as f64 * potential.beta * potential.beta * b.c_l
    } else {
        0.0
    };
    let k = s.len();
    let mut sigma = vec![0.0; k];
    let mut sigma_se = vec![0.0; k];
    let mut d2 = vec![f64::NAN; k];
    let mut d2_se = vec![f64::NAN; k];
    let mut sigma_even = None;
    let method;
    if d == 1 {
        method = SigmaMethod::Transfer1d;
        let vals = map_slice(s, Parallelism::Rayon, |&x| surface_tension_transfer_1d(potential, x * dir[0], spec.n, spec.grid));
        for (j, v) in vals.into_iter().enumerate() {
            sigma[j] = v?.sigma;
        }
        for j in 1..k - 1 {
            d2[j] = (sigma[j + 1] - 2.0 * sigma[j] + sigma[j - 1]) / (step * step);
            d2_se[j] = 0.0;
        }
        if spec.with_even {
            let ev = map_slice(s, Parallelism::Rayon, |&x| even_surface_tension_1d(potential, x * dir[0], spec.n, spec.grid, 1e-12));
            sigma_even = Some(ev.into_iter().map(|e| e.map(|e| e.sigma_even)).collect::<Result<Vec<_>>>()?);
        }
    } else {
        method = SigmaMethod::ThermodynamicIntegration;
        let ti = spec
            .mc
            .as_ref()
            .ok_or_else(|| Error::validation("mc", "Monte Carlo settings required for d > 1"))?;
        let geometry = Geometry::torus(d, spec.n)?;
        for j in 0..k {
            let u: Vec<f64> = dir.iter().map(|e| e * s[j]).collect();
            let (v, se) = surface_tension_ti(potential, geometry, &u, ti)?;
            sigma[j] = v;
            sigma_se[j] = se;
        }
        // Directional derivative estimates at each node.
        let mut grad = vec![0.0; k];
        let mut grad_se = vec![0.0; k];
        for j in 0..k {
            let u: Vec<f64> = dir.iter().map(|e| e * s[j]).collect();
            let (m, se) = sigma_gradient_mc(potential, geometry, &u, ti, 1_000_003 + j as u64)?;
            grad[j] = m.iter().zip(&dir).map(|(a, b)| a * b).sum();
            grad_se[j] = se.iter().zip(&dir).map(|(a, b)| (a * b).powi(2)).sum::<f64>().sqrt();
        }
        for j in 1..k - 1 {
            d2[j] = (grad[j + 1] - grad[j - 1]) / (2.0 * step);
            d2_se[j] = (grad_se[j + 1].powi(2) + grad_se[j - 1].powi(2)).sqrt() / (2.0 * step);
        }
    }
    let margin = d2[1..k - 1].iter().cloned().fold(f64::INFINITY, f64::min) - bound;
    Ok(SurfaceTensionResult {
        method,
        d,
        beta: potential.beta,
        n: spec.n,
        direction: dir,
        s_grid: s.clone(),
        sigma,
        sigma_se,
        d2sigma: d2,
        d2sigma_se: d2_se,
        bound,
        bound_asserted: b.asserted,
        margin,
        sigma_even,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinned_power_of_a_gaussian() {
        // N-fold convolution of N(μ, 1) at 0 is the N(Nμ, N) density at 0.
        let mu = 0.7;
        for n in [1usize, 4, 16] {
            let f = |x: f64| -0.5 * (x - mu) * (x - mu) - 0.5 * (2.0 * std::f64::consts::PI).ln();
            let got = log_pinned_convolution_power(&f, n, 400, mu, 0.05).unwrap();
            let nn = n as f64;
            let exact = -0.5 * (2.0 * std::f64::consts::PI * nn).ln() - (nn * mu).powi(2) / (2.0 * nn);
            assert!((got - exact).abs() < 1e-10, "{n}: {got} vs {exact}");
        }
    }

    #[test]
    fn quadratic_surface_tension() {
        for beta in [0.5, 1.0, 3.0] {
            let pot = Potential::quadratic(1.0, beta).unwrap();
            for u in [0.0, 0.5, -1.0] {
                let s = surface_tension_transfer_1d(&pot, u, 16, 400).unwrap();
                assert!((s.sigma - beta * u * u / 2.0).abs() < 1e-8, "{beta} {u} {}", s.sigma);
            }
        }
    }

    #[test]
    fn log_well_sigma_is_symmetric_and_n_stable() {
        let pot = Potential::log_well(0.25, 0.5).unwrap();
        let a = surface_tension_transfer_1d(&pot, 0.6, 16, 400).unwrap().sigma;
        let b = surface_tension_transfer_1d(&pot, -0.6, 16, 400).unwrap().sigma;
        assert!((a - b).abs() < 1e-9);
        assert!(a > 0.0);
    }

    #[test]
    fn even_partition_function_equals_torus_one() {
        let pot = Potential::log_well(0.25, 0.5).unwrap();
        let e = even_surface_tension_1d(&pot, 0.5, 8, 200, 1e-12).unwrap();
        assert!(e.partition_defect < 1e-7, "{}", e.partition_defect);
        assert!(e.doubling_defect < 1e-6);
    }

    #[test]
    fn tilt_accumulator_uses_interior_bonds() {
        let g = Geometry::boxed(1, 4).unwrap();
        let mut f = Field::tilted_box(g, vec![0.5]).unwrap();
        f.heights[2] += 1.0;
        let mut acc = TiltAccumulator::new(g).unwrap();
        acc.push(&f).unwrap();
        // Interior bonds (1,2) and (2,3): 1.5 and -0.5.
        assert!((acc.finish().mean[0] - 0.5).abs() < 1e-12);
        f.heights[3] += 1.0;
        let mut acc = TiltAccumulator::new(g).unwrap();
        acc.push(&f).unwrap();
        assert!((acc.finish().mean[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clt_split_identity() {
        let g = Geometry::torus(2, 16).unwrap();
        let mut f = Field::flat(g);
        for (k, h) in f.heights.iter_mut().enumerate() {
            *h = ((k * 37) % 11) as f64 * 0.1;
        }
        let tf = TestFunction {
            profile: Profile::Bump { radius: 1.0 },
            weights: vec![1.0, -0.5],
        };
        let (s, se, r) = clt_split(&f, &tf, 0.25).unwrap();
        assert!((s - se - r).abs() < 1e-12);
        let zero = TestFunction {
            profile: Profile::Zero,
            weights: vec![1.0, 1.0],
        };
        assert_eq!(clt_split(&f, &zero, 0.25).unwrap().0, 0.0);
        assert!(clt_split(&f, &tf, 0.1).unwrap_err().is_validation());
    }

    #[test]
    fn decay_accumulator_matches_exact_average_for_a_fixed_field() {
        // On a single configuration the accumulator is a plain average.
        let g = Geometry::torus(2, 4).unwrap();
        let mut f = Field::flat(g);
        f.heights[5] = 1.0;
        let mut acc = DecayAccumulator::new(g, 2).unwrap();
        acc.push(&f).unwrap();
        let t = acc.finish(0.0);
        // r = 0, (1,1): mean over axes of mean_x (∇φ)² = (2/16 + 2/16)/2.
        assert!((t.get(0, 0, 0).unwrap().cov - 0.125).abs() < 1e-12);
        let exact = exact_decay_rows(8, 2, 1.0, 4).unwrap();
        let tr = exact.iter().find(|w| w.r == 0 && w.i == 0 && w.j == 0).unwrap().cov
            + exact.iter().find(|w| w.r == 0 && w.i == 1 && w.j == 1).unwrap().cov;
        assert!((tr - 63.0 / 64.0).abs() < 1e-12);
    }
}
