//! One-dimensional integration over the real line.
//!
//! All single-site computations in the crate reduce to integrals of the form
//! `∫ w(φ) exp(-E(φ)) dφ` where the energy `E` grows at least quadratically.
//! The engine below truncates the line to a window justified by a declared
//! quadratic lower bound on `E`, shifts the exponent by its minimum on that
//! window and integrates with an adaptive 15-point Gauss–Kronrod rule.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_PANELS: usize = 20_000;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Debug, Clone)]
struct Panel {
    a: f64,
    b: f64,
    value: Vec<f64>,
    abs: Vec<f64>,
    err: Vec<f64>,
}

fn gk15<F>(f: &F, ncomp: usize, a: f64, b: f64, buf: &mut [f64]) -> Panel
where
    F: Fn(f64, &mut [f64]),
{
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut kron = vec![0.0; ncomp];
    let mut gauss = vec![0.0; ncomp];
    let mut abs = vec![0.0; ncomp];
    let mut acc = |x: f64, wk: f64, wg: Option<f64>, buf: &mut [f64]| {
        f(x, buf);
        for k in 0..ncomp {
            kron[k] += wk * buf[k];
            abs[k] += wk * buf[k].abs();
            if let Some(w) = wg {
                gauss[k] += w * buf[k];
            }
        }
    };
    acc(c, WGK[7], Some(WG[3]), buf);
    for j in 0..7 {
        let wg = if j % 2 == 1 { Some(WG[j / 2]) } else { None };
        acc(c - h * XGK[j], WGK[j], wg, buf);
        acc(c + h * XGK[j], WGK[j], wg, buf);
    }
    let mut err = vec![0.0; ncomp];
    for k in 0..ncomp {
        kron[k] *= h;
        gauss[k] *= h;
        abs[k] *= h.abs();
        err[k] = (kron[k] - gauss[k]).abs();
    }
    Panel {
        a,
        b,
        value: kron,
        abs,
        err,
    }
}

/// Result of an adaptive integration of a vector-valued integrand.
#[derive(Debug, Clone)]
pub struct Integral {
    pub values: Vec<f64>,
    /// Integrals of the absolute values, used as scale for relative errors.
    pub abs_values: Vec<f64>,
    pub errors: Vec<f64>,
    /// Final panel boundaries, sorted.
    pub mesh: Vec<f64>,
}

impl Integral {
    fn from_panels(panels: &[Panel], ncomp: usize) -> Self {
        let mut values = Vec::with_capacity(ncomp);
        let mut abs_values = Vec::with_capacity(ncomp);
        let mut errors = Vec::with_capacity(ncomp);
        for k in 0..ncomp {
            let mut v = KahanSum::default();
            let mut s = KahanSum::default();
            let mut e = KahanSum::default();
            for p in panels {
                v.add(p.value[k]);
                s.add(p.abs[k]);
                e.add(p.err[k]);
            }
            values.push(v.value());
            abs_values.push(s.value());
            errors.push(e.value());
        }
        let mut mesh: Vec<f64> = panels.iter().map(|p| p.a).collect();
        if let Some(last) = panels.last() {
            mesh.push(last.b);
        }
        Integral {
            values,
            abs_values,
            errors,
            mesh,
        }
    }

    /// Largest error relative to the absolute-value scale of its component.
    pub fn max_relative_error(&self) -> f64 {
        self.errors
            .iter()
            .zip(&self.abs_values)
            .map(|(e, s)| if *s > 0.0 { e / s } else { *e })
            .fold(0.0, f64::max)
    }
}

/// Adaptive Gauss–Kronrod integration of `f: R -> R^ncomp` over the mesh
/// `initial` (sorted breakpoints, at least two).
///
/// Panels are split until for every component the summed error estimate is
/// below `rel_tol` times the integral of the component's absolute value.
pub fn integrate_adaptive<F>(
    f: &F,
    ncomp: usize,
    initial: &[f64],
    rel_tol: f64,
    stage: &'static str,
) -> Result<Integral>
where
    F: Fn(f64, &mut [f64]),
{
    assert!(initial.len() >= 2, "mesh needs at least two points");
    let mut buf = vec![0.0; ncomp];
    let mut panels: Vec<Panel> = initial
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| gk15(f, ncomp, w[0], w[1], &mut buf))
        .collect();
    loop {
        let total = Integral::from_panels(&panels, ncomp);
        if total.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                stage,
                requested: rel_tol,
                achieved: f64::INFINITY,
            });
        }
        let budget: Vec<f64> = total
            .abs_values
            .iter()
            .map(|s| rel_tol * s.max(f64::MIN_POSITIVE))
            .collect();
        let converged = total
            .errors
            .iter()
            .zip(&budget)
            .all(|(e, b)| e <= b);
        if converged {
            return Ok(total);
        }
        if panels.len() >= MAX_PANELS {
            return Err(Error::Integration {
                stage,
                requested: rel_tol,
                achieved: total.max_relative_error(),
            });
        }
        // Split every panel that uses more than its fair share of the budget.
        let n = panels.len() as f64;
        let share = |p: &Panel| {
            p.err
                .iter()
                .zip(&budget)
                .map(|(e, b)| e / b)
                .fold(0.0, f64::max)
                * n
        };
        let mut next = Vec::with_capacity(panels.len() * 2);
        let mut split_any = false;
        for p in panels.drain(..) {
            if share(&p) > 1.0 && p.b - p.a > 1e-13 * (p.a.abs() + p.b.abs() + 1.0) {
                let mid = 0.5 * (p.a + p.b);
                next.push(gk15(f, ncomp, p.a, mid, &mut buf));
                next.push(gk15(f, ncomp, mid, p.b, &mut buf));
                split_any = true;
            } else {
                next.push(p);
            }
        }
        panels = next;
        if !split_any {
            let total = Integral::from_panels(&panels, ncomp);
            return Err(Error::Integration {
                stage,
                requested: rel_tol,
                achieved: total.max_relative_error(),
            });
        }
    }
}

/// Gauss–Kronrod sum over a fixed mesh without refinement.
///
/// Evaluating nearby integrands on one shared mesh makes the discretization
/// error a smooth function of the parameters, which finite differences need.
pub fn integrate_on_mesh<F>(f: &F, ncomp: usize, mesh: &[f64]) -> Integral
where
    F: Fn(f64, &mut [f64]),
{
    let mut buf = vec![0.0; ncomp];
    let panels: Vec<Panel> = mesh
        .windows(2)
        .map(|w| gk15(f, ncomp, w[0], w[1], &mut buf))
        .collect();
    Integral::from_panels(&panels, ncomp)
}

/// Scalar convenience wrapper around [`integrate_adaptive`] on `[a, b]`.
pub fn integrate<F>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<(f64, f64)>
where
    F: Fn(f64) -> f64,
{
    let g = |x: f64, out: &mut [f64]| out[0] = f(x);
    let mesh: Vec<f64> = (0..=8).map(|i| a + (b - a) * i as f64 / 8.0).collect();
    let r = integrate_adaptive(&g, 1, &mesh, rel_tol, "integrate")?;
    Ok((r.values[0], r.errors[0]))
}

/// Declared lower bound `energy(φ) >= curvature·(φ - center)² - offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailBound {
    pub center: f64,
    pub curvature: f64,
    pub offset: f64,
}

type Scalar<'a> = Box<dyn Fn(f64) -> f64 + Send + Sync + 'a>;

/// A single-site Gibbs density `∝ exp(-energy)` together with a list of
/// functionals whose moments are requested.
pub struct LineIntegrand<'a> {
    pub energy: Scalar<'a>,
    pub weights: Vec<Scalar<'a>>,
    pub tail: TailBound,
}

impl<'a> LineIntegrand<'a> {
    pub fn new(energy: impl Fn(f64) -> f64 + Send + Sync + 'a, tail: TailBound) -> Self {
        LineIntegrand {
            energy: Box::new(energy),
            weights: Vec::new(),
            tail,
        }
    }

    pub fn with_weight(mut self, w: impl Fn(f64) -> f64 + Send + Sync + 'a) -> Self {
        self.weights.push(Box::new(w));
        self
    }
}

/// Integration window plus the energy shift used on it.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
    pub shift: f64,
    pub argmin: f64,
}

impl Window {
    pub fn initial_mesh(&self, panels: usize) -> Vec<f64> {
        let mut mesh: Vec<f64> = (0..=panels)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / panels as f64)
            .collect();
        if self.argmin > self.lo && self.argmin < self.hi {
            mesh.push(self.argmin);
            mesh.sort_by(f64::total_cmp);
            mesh.dedup();
        }
        mesh
    }
}

const PRESCAN: usize = 513;
const INITIAL_PANELS: usize = 32;

fn scan_min(energy: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.5 * (lo + hi));
    for i in 0..PRESCAN {
        let x = lo + (hi - lo) * i as f64 / (PRESCAN - 1) as f64;
        let e = energy(x);
        if e < best.0 {
            best = (e, x);
        }
    }
    best
}

/// Mass of `exp(-(A t² - B) + shift)` outside `|t| <= w` (Mills bound).
fn tail_mass(bound: &TailBound, shift: f64, w: f64) -> f64 {
    let a = bound.curvature;
    (-a * w * w + bound.offset + shift).exp() / (a * w)
}

/// Result of [`log_partition_detailed`].
#[derive(Debug, Clone)]
pub struct Partition {
    /// `-log ∫ exp(-energy)`.
    pub neg_log_z: f64,
    /// `∫ exp(-(energy - shift))` on the window.
    pub shifted_z: f64,
    pub err_est: f64,
    pub window: Window,
    pub mesh: Vec<f64>,
}

impl LineIntegrand<'_> {
    /// Chooses a window whose neglected tails contribute less than
    /// `tol / 10` relative to the partition integral, and integrates the
    /// density on it.
    fn windowed(&self, tol: f64, stage: &'static str) -> Result<Partition> {
        let b = self.tail;
        if !(b.curvature > 0.0) || !b.curvature.is_finite() || !b.offset.is_finite() {
            return Err(Error::validation(
                "tail.curvature",
                "quadratic lower bound must have positive finite curvature",
            ));
        }
        if !(tol > 0.0) {
            return Err(Error::validation("tol", "tolerance must be positive"));
        }
        let e_center = (self.energy)(b.center);
        if !e_center.is_finite() {
            return Err(Error::Domain {
                what: "energy",
                eta: b.center,
            });
        }
        let lead = (10.0 / tol).ln() + (b.offset + e_center).max(0.0);
        let mut w = (lead / b.curvature).sqrt() + 3.0 / b.curvature.sqrt();
        for _ in 0..40 {
            let (lo, hi) = (b.center - w, b.center + w);
            let (shift, argmin) = scan_min(&*self.energy, lo, hi);
            let window = Window {
                lo,
                hi,
                shift,
                argmin,
            };
            let density = |x: f64, out: &mut [f64]| out[0] = (-((self.energy)(x) - shift)).exp();
            let r = integrate_adaptive(
                &density,
                1,
                &window.initial_mesh(INITIAL_PANELS),
                0.5 * tol,
                stage,
            )?;
            let z = r.values[0];
            if !(z > 0.0) || !z.is_finite() {
                return Err(Error::Integration {
                    stage,
                    requested: tol,
                    achieved: f64::INFINITY,
                });
            }
            let tail = tail_mass(&b, shift, w);
            if tail <= 0.1 * tol * z {
                return Ok(Partition {
                    neg_log_z: -(z.ln()) + shift,
                    shifted_z: z,
                    err_est: r.errors[0] / z + tail / z,
                    window,
                    mesh: r.mesh,
                });
            }
            w *= 1.5;
        }
        Err(Error::Integration {
            stage,
            requested: tol,
            achieved: f64::INFINITY,
        })
    }
}

/// `-log ∫ exp(-energy(φ)) dφ` with absolute error at most `tol`.
pub fn log_partition(integrand: &LineIntegrand<'_>, tol: f64) -> Result<f64> {
    Ok(log_partition_detailed(integrand, tol)?.neg_log_z)
}

pub fn log_partition_detailed(integrand: &LineIntegrand<'_>, tol: f64) -> Result<Partition> {
    integrand.windowed(tol, "log_partition")
}

/// Means and covariance of the integrand's weights under `∝ exp(-energy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentResult {
    /// `-log ∫ exp(-energy)`.
    pub neg_log_z: f64,
    pub means: Vec<f64>,
    /// Row-major `n × n` covariance of the weights.
    pub covariance: Vec<Vec<f64>>,
    pub err_est: f64,
}

/// Computes means and the covariance matrix of the weights.
///
/// The covariance is integrated in centered form `E[(F - EF)(G - EG)]`,
/// which is algebraically `E[FG] - E[F]E[G]` but insensitive to errors in
/// the means and free of cancellation when the means are large.
pub fn measure_moments(integrand: &LineIntegrand<'_>, tol: f64) -> Result<MomentResult> {
    let part = integrand.windowed(tol, "measure_moments")?;
    let n = integrand.weights.len();
    let shift = part.window.shift;
    let energy = &integrand.energy;
    let weights = &integrand.weights;

    // Pass 1: mass and first moments.
    let first = |x: f64, out: &mut [f64]| {
        let rho = (-(energy(x) - shift)).exp();
        out[0] = rho;
        for (k, w) in weights.iter().enumerate() {
            out[k + 1] = w(x) * rho;
        }
    };
    let r1 = integrate_adaptive(&first, n + 1, &part.mesh, 0.5 * tol, "measure_moments")?;
    let z = r1.values[0];
    let means: Vec<f64> = (0..n).map(|k| r1.values[k + 1] / z).collect();

    // Pass 2: centered second moments, upper triangle.
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a..n).map(move |b| (a, b))).collect();
    let second = |x: f64, out: &mut [f64]| {
        let rho = (-(energy(x) - shift)).exp();
        let mut centered = [0.0f64; 16];
        let mut heap;
        let c: &mut [f64] = if n <= 16 {
            &mut centered[..n]
        } else {
            heap = vec![0.0; n];
            &mut heap[..]
        };
        for (k, w) in weights.iter().enumerate() {
            c[k] = w(x) - means[k];
        }
        for (slot, &(a, b)) in pairs.iter().enumerate() {
            out[slot] = c[a] * c[b] * rho;
        }
    };
    let mut covariance = vec![vec![0.0; n]; n];
    let mut err_est = r1.errors[0] / z;
    if !pairs.is_empty() {
        let r2 = integrate_adaptive(&second, pairs.len(), &r1.mesh, 0.5 * tol, "measure_moments")?;
        let mut cov_err: f64 = 0.0;
        for (slot, &(a, b)) in pairs.iter().enumerate() {
            let v = r2.values[slot] / z;
            covariance[a][b] = v;
            covariance[b][a] = v;
            let e = r2.errors[slot] / z + v.abs() * r1.errors[0] / z;
            cov_err = cov_err.max(e);
        }
        err_est = err_est.max(cov_err);
    }
    Ok(MomentResult {
        neg_log_z: -(z.ln()) + shift,
        means,
        covariance,
        err_est: err_est + part.err_est,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn gaussian(curv: f64, m: f64) -> LineIntegrand<'static> {
        LineIntegrand::new(
            move |x| curv * (x - m) * (x - m),
            TailBound {
                center: m,
                curvature: curv,
                offset: 0.0,
            },
        )
    }

    #[test]
    fn standard_gaussian_normalizer() {
        let g = gaussian(0.5, 0.0);
        let f = log_partition(&g, 1e-12).unwrap();
        assert!((f + (2.0 * PI).sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn shifted_gaussian_is_shift_invariant() {
        // 2(φ - m)²: -log √(π/2) ≈ 0.225791 with the opposite sign.
        let expected = -(PI / 2.0).sqrt().ln();
        assert!((expected + 0.225_791).abs() < 1e-6);
        for m in [-30.0, -1.5, 0.0, 2.25, 100.0] {
            let f = log_partition(&gaussian(2.0, m), 1e-10).unwrap();
            assert!((f - expected).abs() < 2e-10, "m = {m}: {f}");
        }
    }

    #[test]
    fn moments_of_gaussian() {
        let (d, beta, m) = (2.0, 0.7, 1.3);
        let curv = 2.0 * d * beta;
        let g = gaussian(curv, m).with_weight(|x| x).with_weight(|x| -x);
        let r = measure_moments(&g, 1e-10).unwrap();
        let var = 1.0 / (4.0 * d * beta);
        assert!((r.means[0] - m).abs() < 1e-9);
        assert!((r.covariance[0][0] - var).abs() < 1e-10);
        assert!((r.covariance[0][1] + var).abs() < 1e-10);
        assert!(r.err_est < 1e-8);
    }

    #[test]
    fn bimodal_energy_is_resolved() {
        // Two narrow wells at ±3; exact mass is two Gaussians.
        let e = |x: f64| {
            let a = 50.0 * (x - 3.0) * (x - 3.0);
            let b = 50.0 * (x + 3.0) * (x + 3.0);
            let m = a.min(b);
            m - (-(a - m)).exp().ln_1p_plus((-(b - m)).exp())
        };
        trait Ln1p {
            fn ln_1p_plus(self, y: f64) -> f64;
        }
        impl Ln1p for f64 {
            fn ln_1p_plus(self, y: f64) -> f64 {
                (self + y).ln()
            }
        }
        let g = LineIntegrand::new(
            e,
            TailBound {
                center: 0.0,
                curvature: 10.0,
                offset: 200.0,
            },
        );
        let f = log_partition(&g, 1e-10).unwrap();
        let exact = -(2.0 * (PI / 50.0).sqrt()).ln();
        assert!((f - exact).abs() < 1e-9, "{f} vs {exact}");
    }

    #[test]
    fn bad_tail_bound_is_rejected() {
        let g = LineIntegrand::new(
            |x| x * x,
            TailBound {
                center: 0.0,
                curvature: 0.0,
                offset: 0.0,
            },
        );
        assert!(log_partition(&g, 1e-8).unwrap_err().is_validation());
    }

    #[test]
    fn kahan_sum_beats_naive() {
        let mut k = KahanSum::default();
        k.add(1.0);
        for _ in 0..10 {
            k.add(1e-16);
        }
        k.add(-1.0);
        assert!((k.value() - 1e-15).abs() < 1e-25);
    }
}
