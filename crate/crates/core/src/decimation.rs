//! Integrating out one odd site: the induced multi-body potential `F_x`,
//! its Hessian through the covariance representation, and scans of the
//! random walk representation bounds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{map_indexed, Parallelism};
use crate::potentials::{gpp_lq_norm, Decomposition, Potential};
use crate::quadrature::{
    integrate_adaptive, integrate_on_mesh, log_partition_detailed, measure_moments, LineIntegrand,
    TailBound,
};
use crate::rng::{stream, Domain};

/// Default absolute tolerance for a single `F_x` evaluation.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Default tolerance for scans.
pub const SCAN_TOL: f64 = 1e-8;

/// Neighbour heights `(φ(x+e_i))_{i∈I}` stored in the order
/// `-d, ..., -1, 1, ..., d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stencil {
    pub d: usize,
    pub values: Vec<f64>,
}

impl Stencil {
    pub fn new(d: usize, values: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::validation("d", "must be at least 1"));
        }
        if values.len() != 2 * d {
            return Err(Error::validation(
                "stencil",
                format!("need {} values for d = {d}, got {}", 2 * d, values.len()),
            ));
        }
        if let Some(x) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation("stencil", format!("non-finite entry {x}")));
        }
        Ok(Stencil { d, values })
    }

    pub fn zeros(d: usize) -> Self {
        Stencil { d, values: vec![0.0; 2 * d] }
    }

    /// Signed direction of storage slot `k`.
    pub fn direction(d: usize, k: usize) -> isize {
        if k < d {
            k as isize - d as isize
        } else {
            k as isize - d as isize + 1
        }
    }

    /// Storage slot of signed direction `i`.
    pub fn slot(d: usize, i: isize) -> usize {
        assert!(i != 0 && i.unsigned_abs() <= d, "direction out of range");
        if i < 0 {
            (i + d as isize) as usize
        } else {
            (i + d as isize - 1) as usize
        }
    }

    pub fn shifted(&self, t: f64) -> Self {
        Stencil {
            d: self.d,
            values: self.values.iter().map(|v| v + t).collect(),
        }
    }
}

/// The single-site Gibbs density `∝ exp(-prefactor Σ_i U(t_i - φ))`.
///
/// Decimation uses `prefactor = 2β` with the neighbour heights as legs; the
/// tilted torus uses `prefactor = β` with legs `φ(x+e_i) + u_i`.
#[derive(Debug, Clone, Copy)]
pub struct SiteMeasure<'a> {
    pub potential: &'a Potential,
    pub prefactor: f64,
    pub legs: &'a [f64],
}

impl<'a> SiteMeasure<'a> {
    pub fn decimation(potential: &'a Potential, stencil: &'a Stencil) -> Self {
        SiteMeasure {
            potential,
            prefactor: 2.0 * potential.beta,
            legs: &stencil.values,
        }
    }

    pub fn energy(&self, phi: f64) -> f64 {
        self.prefactor * self.legs.iter().map(|t| self.potential.value(t - phi, 0)).sum::<f64>()
    }

    /// Quadratic lower bound on the energy inherited from `U >= Aη² - B`.
    pub fn tail(&self) -> TailBound {
        let (a, b) = self.potential.growth();
        let n = self.legs.len() as f64;
        let m = self.legs.iter().sum::<f64>() / n;
        let spread: f64 = self.legs.iter().map(|t| (t - m) * (t - m)).sum();
        TailBound {
            center: m,
            curvature: self.prefactor * a * n,
            offset: self.prefactor * (n * b - a * spread),
        }
    }

    /// Standard deviation scale of the density, `1/√curvature`.
    pub fn length_scale(&self) -> f64 {
        1.0 / self.tail().curvature.sqrt()
    }

    fn integrand(&self) -> LineIntegrand<'_> {
        let s = *self;
        LineIntegrand::new(move |phi| s.energy(phi), self.tail())
    }

    /// `-log ∫ exp(-energy)`.
    pub fn free_energy(&self, tol: f64) -> Result<f64> {
        Ok(log_partition_detailed(&self.integrand(), tol)?.neg_log_z)
    }

    /// Moments of `U'(t_i - φ)` for every leg.
    pub fn force_moments(&self, tol: f64) -> Result<crate::quadrature::MomentResult> {
        let mut li = self.integrand();
        for &t in self.legs {
            let pot = self.potential;
            li = li.with_weight(move |phi| pot.value(t - phi, 1));
        }
        measure_moments(&li, tol)
    }

    /// `∂F/∂t_i = prefactor · E[U'(t_i - φ)]`.
    pub fn gradient(&self, tol: f64) -> Result<Vec<f64>> {
        let m = self.force_moments(tol)?;
        Ok(m.means.iter().map(|v| self.prefactor * v).collect())
    }

    /// Hessian of the free energy in the legs: off-diagonal entries
    /// `-prefactor² cov(U'_i, U'_j)`, diagonal from the zero row sums.
    pub fn hessian(&self, tol: f64) -> Result<HessianFx> {
        let m = self.force_moments(tol)?;
        let n = self.legs.len();
        let s2 = self.prefactor * self.prefactor;
        let mut matrix = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    matrix[i][j] = -s2 * m.covariance[i][j];
                }
            }
        }
        complete_diagonal(&mut matrix);
        Ok(HessianFx {
            matrix,
            method: HessianMethod::Covariance,
            err_est: s2 * m.err_est,
        })
    }

    /// Finite-difference Hessian of the free energy with step `h`.
    ///
    /// All perturbed integrals are evaluated on the adaptive mesh of the
    /// unperturbed one with a common exponent shift, so the quadrature
    /// error varies smoothly with the legs and cancels in the differences.
    pub fn hessian_fd(&self, h: f64) -> Result<HessianFx> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::validation("h", "finite-difference step must be positive"));
        }
        let base = log_partition_detailed(&self.integrand(), 1e-13)?;
        let shift = base.window.shift;
        let n = self.legs.len();
        let log_z = |delta: &[(usize, f64)]| -> f64 {
            let mut legs = self.legs.to_vec();
            for &(k, dv) in delta {
                legs[k] += dv;
            }
            let s = SiteMeasure { legs: &legs, ..*self };
            let f = |x: f64, out: &mut [f64]| out[0] = (-(s.energy(x) - shift)).exp();
            integrate_on_mesh(&f, 1, &base.mesh).values[0].ln()
        };
        let z0 = log_z(&[]);
        // F(t + δ) - F(t) = -(log Z(t + δ) - log Z(t)).
        let df = |delta: &[(usize, f64)]| -(log_z(delta) - z0);
        let mut matrix = vec![vec![0.0; n]; n];
        for i in 0..n {
            matrix[i][i] = (df(&[(i, h)]) + df(&[(i, -h)])) / (h * h);
            for j in 0..i {
                let v = (df(&[(i, h), (j, h)]) - df(&[(i, h), (j, -h)]) - df(&[(i, -h), (j, h)])
                    + df(&[(i, -h), (j, -h)]))
                    / (4.0 * h * h);
                matrix[i][j] = v;
                matrix[j][i] = v;
            }
        }
        Ok(HessianFx {
            matrix,
            method: HessianMethod::FiniteDifference,
            err_est: h * h,
        })
    }
}

fn complete_diagonal(matrix: &mut [Vec<f64>]) {
    let n = matrix.len();
    for j in 0..n {
        let s: f64 = (0..n).filter(|&i| i != j).map(|i| matrix[i][j]).sum();
        matrix[j][j] = -s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMethod {
    Covariance,
    FiniteDifference,
}

/// `D^{i,j} F_x` in stencil storage order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HessianFx {
    pub matrix: Vec<Vec<f64>>,
    pub method: HessianMethod,
    pub err_est: f64,
}

impl HessianFx {
    pub fn max_abs(&self) -> f64 {
        self.matrix.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max_j |D^{jj} + Σ_{i≠j} D^{ij}|`.
    pub fn row_sum_defect(&self) -> f64 {
        let n = self.matrix.len();
        (0..n)
            .map(|j| (0..n).map(|i| self.matrix[i][j]).sum::<f64>().abs())
            .fold(0.0, f64::max)
    }

    pub fn asymmetry(&self) -> f64 {
        let n = self.matrix.len();
        let mut m: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                m = m.max((self.matrix[i][j] - self.matrix[j][i]).abs());
            }
        }
        m
    }

    /// Largest entrywise difference relative to the larger matrix norm.
    pub fn relative_difference(&self, other: &HessianFx) -> f64 {
        let scale = self.max_abs().max(other.max_abs()).max(f64::MIN_POSITIVE);
        self.matrix
            .iter()
            .flatten()
            .zip(other.matrix.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / scale
    }
}

/// `F_x = -log ∫ exp(-2β Σ_i U(φ(x+e_i) - φ)) dφ`.
pub fn f_x(potential: &Potential, stencil: &Stencil) -> Result<f64> {
    f_x_tol(potential, stencil, DEFAULT_TOL)
}

pub fn f_x_tol(potential: &Potential, stencil: &Stencil, tol: f64) -> Result<f64> {
    SiteMeasure::decimation(potential, stencil).free_energy(tol)
}

pub fn hessian_fx_cov(potential: &Potential, stencil: &Stencil) -> Result<HessianFx> {
    SiteMeasure::decimation(potential, stencil).hessian(DEFAULT_TOL)
}

pub fn hessian_fx_fd(potential: &Potential, stencil: &Stencil, h: f64) -> Result<HessianFx> {
    SiteMeasure::decimation(potential, stencil).hessian_fd(h)
}

/// A finite-difference step balancing truncation against round-off: a
/// fixed fraction of the width of the single-site density.
pub fn default_fd_step(potential: &Potential, stencil: &Stencil) -> f64 {
    2e-4 * SiteMeasure::decimation(potential, stencil).length_scale()
}

/// Lower and upper bounds on `cov(U'(∇_iφ), U'(∇_jφ))` from the
/// smallness condition, in covariance units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoreticalBounds {
    pub c_l: f64,
    pub c_u: f64,
    pub epsilon: f64,
    /// Same quantities at `β = C1 = 1`.
    pub rescaled_c_l: f64,
    pub rescaled_c_u: f64,
    /// Norm of `g''` in the rescaled frame.
    pub rescaled_gpp_norm: f64,
    /// False when `ε <= 0`; the bounds are then not claimed.
    pub asserted: bool,
    /// True when `g ≡ 0` and the strictly convex bounds were used.
    pub convex_case: bool,
}

impl TheoreticalBounds {
    /// Bounds on `-D^{i,j} F_x = 4β² cov`.
    pub fn hessian_scale(&self, beta: f64) -> (f64, f64) {
        (4.0 * beta * beta * self.c_l, 4.0 * beta * beta * self.c_u)
    }
}

/// Evaluates the covariance bounds of the random walk representation
/// theorem. The formulas are applied at `β = C1 = 1` and mapped back with
/// `cov = (C1/β) · cov_rescaled`.
pub fn theoretical_bounds(
    decomposition: &Decomposition,
    q: f64,
    d: usize,
    beta: f64,
) -> Result<TheoreticalBounds> {
    if !(q >= 1.0) {
        return Err(Error::validation("q", "must be >= 1"));
    }
    if d == 0 {
        return Err(Error::validation("d", "must be at least 1"));
    }
    if !(beta > 0.0) {
        return Err(Error::validation("beta", "must be positive"));
    }
    let (c0, c1, c2) = (decomposition.c0, decomposition.c1, decomposition.c2);
    let df = d as f64;
    let to_user = c1 / beta;
    let norm = gpp_lq_norm(decomposition, q, 1e-10)?;
    let c2t = c2 / c1;
    let c0t = c0 / c1;
    let nt = (beta * c1).powf(1.0 / (2.0 * q)) / c1 * norm;
    let epsilon =
        (4.0 * df * c2t).powf(-1.0 / (2.0 * q)) - 2.0 * c2t.sqrt() * nt / 2f64.powf(1.0 / (2.0 * q));
    if norm == 0.0 {
        let lo = c1 * c1 / (4.0 * df * beta * c2);
        let hi = c2 * c2 / (4.0 * df * beta * c1);
        return Ok(TheoreticalBounds {
            c_l: lo,
            c_u: hi,
            epsilon,
            rescaled_c_l: lo / to_user,
            rescaled_c_u: hi / to_user,
            rescaled_gpp_norm: 0.0,
            asserted: true,
            convex_case: true,
        });
    }
    let e2q = (2.0 * q - 1.0) / (2.0 * q);
    let cl_t = epsilon / (4.0 * df * c2t).powf(e2q);
    let a = c2t / (4.0 * df);
    let b = c2t.sqrt() * nt / (2f64.powf((2.0 * q + 1.0) / (2.0 * q)) * df);
    let cu_t = (c2t + c0t * c0t) * (a / b.powf(e2q) + b).powf(2.0 * q);
    Ok(TheoreticalBounds {
        c_l: cl_t * to_user,
        c_u: cu_t * to_user,
        epsilon,
        rescaled_c_l: cl_t,
        rescaled_c_u: cu_t,
        rescaled_gpp_norm: nt,
        asserted: epsilon > 0.0,
        convex_case: false,
    })
}

/// Which stencils an RWR scan visits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSpec {
    pub d: usize,
    /// Half-width of the stencil box; defaults to `10/√(βC1)`.
    #[serde(default)]
    pub radius: Option<f64>,
    /// Grid points per free coordinate; the first leg is pinned to 0.
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_random")]
    pub random: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_scan_tol")]
    pub tol: f64,
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default)]
    pub parallelism: Parallelism,
}

fn default_grid() -> usize {
    9
}
fn default_random() -> usize {
    1000
}
fn default_scan_tol() -> f64 {
    SCAN_TOL
}
fn default_q() -> f64 {
    1.0
}

impl ScanSpec {
    pub fn new(d: usize) -> Self {
        ScanSpec {
            d,
            radius: None,
            grid: if d <= 2 { 9 } else { 3 },
            random: 1000,
            seed: 0,
            tol: SCAN_TOL,
            q: 1.0,
            parallelism: Parallelism::default(),
        }
    }

    fn stencils(&self, radius: f64) -> Vec<Stencil> {
        let d = self.d;
        let free = 2 * d - 1;
        let mut out = Vec::new();
        if self.grid >= 2 {
            let total = self.grid.pow(free as u32);
            for idx in 0..total {
                let mut vals = vec![0.0; 2 * d];
                let mut rest = idx;
                for v in vals.iter_mut().skip(1) {
                    let g = rest % self.grid;
                    rest /= self.grid;
                    *v = -radius + 2.0 * radius * g as f64 / (self.grid - 1) as f64;
                }
                out.push(Stencil { d, values: vals });
            }
        } else if self.grid == 1 {
            out.push(Stencil::zeros(d));
        }
        for k in 0..self.random {
            let mut rng = stream(self.seed, Domain::Scan, k as u64);
            let mut vals = vec![0.0; 2 * d];
            for v in vals.iter_mut().skip(1) {
                *v = rng.gen_range(-radius..=radius);
            }
            out.push(Stencil { d, values: vals });
        }
        out
    }
}

/// One `-D^{i,j} F_x` value of a scan. `i`, `j` are signed directions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanRow {
    pub stencil: Vec<f64>,
    pub i: isize,
    pub j: isize,
    pub minus_dij: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub stencil: Vec<f64>,
    pub i: isize,
    pub j: isize,
    pub minus_dij: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanHole {
    pub stencil: Vec<f64>,
    pub error: String,
}

/// Scan evidence for the random walk representation condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RwrReport {
    pub label: &'static str,
    pub d: usize,
    pub beta: f64,
    pub radius: f64,
    pub stencils: usize,
    /// Extrema of `-D^{i,j} F_x`, `i ≠ j`.
    pub scanned_min: f64,
    pub scanned_max: f64,
    pub min_witness: Option<Witness>,
    pub max_witness: Option<Witness>,
    pub bounds: TheoreticalBounds,
    /// `bounds` in `-D^{i,j}` units.
    pub minus_d_lower: f64,
    pub minus_d_upper: f64,
    pub bounds_contain: bool,
    pub holds: bool,
    pub complete: bool,
    pub holes: Vec<ScanHole>,
    #[serde(skip)]
    pub rows: Vec<ScanRow>,
}

/// Relative slack when comparing scanned values with the bounds.
pub const REPORT_TOL: f64 = 1e-6;

impl RwrReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for k in 0..2 * self.d {
            s.push_str(&format!("s{},", Stencil::direction(self.d, k)));
        }
        s.push_str("i,j,minus_Dij\n");
        for r in &self.rows {
            for v in &r.stencil {
                s.push_str(&format!("{v:.12e},"));
            }
            s.push_str(&format!("{},{},{:.12e}\n", r.i, r.j, r.minus_dij));
        }
        s
    }
}

/// Evaluates `-D^{i,j} F_x` over the stencils of `scan` and compares the
/// extrema with [`theoretical_bounds`].
pub fn rwr_scan(potential: &Potential, scan: &ScanSpec) -> Result<RwrReport> {
    if scan.d == 0 {
        return Err(Error::validation("scan.d", "must be at least 1"));
    }
    let dec = potential.decomposition()?;
    let beta = potential.beta;
    let radius = scan.radius.unwrap_or(10.0 / (beta * dec.c1).sqrt());
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::validation("scan.radius", "must be positive"));
    }
    let bounds = theoretical_bounds(&dec, scan.q, scan.d, beta)?;
    let stencils = scan.stencils(radius);
    let tol = scan.tol;
    let results = map_indexed(stencils.len(), scan.parallelism, |k| {
        SiteMeasure::decimation(potential, &stencils[k]).hessian(tol)
    });
    let n = 2 * scan.d;
    let mut rows = Vec::new();
    let mut holes = Vec::new();
    let mut min_w: Option<Witness> = None;
    let mut max_w: Option<Witness> = None;
    for (st, res) in stencils.iter().zip(results) {
        match res {
            Ok(hess) => {
                for a in 0..n {
                    for b in (a + 1)..n {
                        let v = -hess.matrix[a][b];
                        let w = Witness {
                            stencil: st.values.clone(),
                            i: Stencil::direction(scan.d, a),
                            j: Stencil::direction(scan.d, b),
                            minus_dij: v,
                        };
                        if min_w.as_ref().is_none_or(|m| v < m.minus_dij) {
                            min_w = Some(w.clone());
                        }
                        if max_w.as_ref().is_none_or(|m| v > m.minus_dij) {
                            max_w = Some(w.clone());
                        }
                        rows.push(ScanRow {
                            stencil: w.stencil,
                            i: w.i,
                            j: w.j,
                            minus_dij: v,
                        });
                    }
                }
            }
            Err(e) => holes.push(ScanHole {
                stencil: st.values.clone(),
                error: e.to_string(),
            }),
        }
    }
    let scanned_min = min_w.as_ref().map_or(f64::NAN, |w| w.minus_dij);
    let scanned_max = max_w.as_ref().map_or(f64::NAN, |w| w.minus_dij);
    let (lo, hi) = bounds.hessian_scale(beta);
    let bounds_contain = bounds.asserted
        && scanned_min >= lo * (1.0 - REPORT_TOL)
        && scanned_max <= hi * (1.0 + REPORT_TOL);
    Ok(RwrReport {
        label: "scan evidence",
        d: scan.d,
        beta,
        radius,
        stencils: stencils.len(),
        scanned_min,
        scanned_max,
        min_witness: min_w,
        max_witness: max_w,
        minus_d_lower: lo,
        minus_d_upper: hi,
        holds: scanned_min > 0.0 && bounds_contain,
        bounds_contain,
        complete: holes.is_empty(),
        holes,
        bounds,
        rows,
    })
}

/// `cov(U'(∇_iφ), U'(∇_jφ))` for the Gaussian mixture at `β = 1` in closed
/// form, for stencil slots `i` and `j`.
///
/// Squaring each leg's mixture gives a sum over component pairs per leg;
/// each term is a Gaussian integral in `φ`. Weights are accumulated in the
/// log domain.
pub fn bk_exact_cov(p: f64, k1: f64, k2: f64, stencil: &Stencil, i: usize, j: usize) -> Result<f64> {
    Ok(bk_exact_cov_matrix(p, k1, k2, stencil)?[i][j])
}

/// Full covariance matrix of the leg forces, see [`bk_exact_cov`].
pub fn bk_exact_cov_matrix(p: f64, k1: f64, k2: f64, stencil: &Stencil) -> Result<Vec<Vec<f64>>> {
    Potential::gaussian_mixture(p, k1, k2, 1.0)?;
    let n = stencil.values.len();
    if n > 8 {
        return Err(Error::validation("stencil.d", "closed form is limited to d <= 4"));
    }
    let t = &stencil.values;
    let ks = [k1, k2];
    let logw = [p.ln(), (1.0 - p).ln()];
    let combos = 1usize << (2 * n);
    // First pass: log masses.
    let mut terms: Vec<(f64, Vec<(usize, usize)>, f64, f64)> = Vec::with_capacity(combos);
    for c in 0..combos {
        let mut lw = 0.0;
        let mut kk = 0.0;
        let mut kt = 0.0;
        let mut ktt = 0.0;
        let mut first = Vec::with_capacity(n);
        for (leg, &tl) in t.iter().enumerate() {
            let a = (c >> (2 * leg)) & 1;
            let b = (c >> (2 * leg + 1)) & 1;
            lw += logw[a] + logw[b];
            let kap = ks[a] + ks[b];
            kk += kap;
            kt += kap * tl;
            ktt += kap * tl * tl;
            first.push((a, b));
        }
        if lw == f64::NEG_INFINITY {
            continue;
        }
        let mu = kt / kk;
        let lm = lw + 0.5 * (2.0 * std::f64::consts::PI / kk).ln() - 0.5 * (ktt - kt * kt / kk);
        terms.push((lm, first, mu, kk));
    }
    let lmax = terms.iter().fold(f64::NEG_INFINITY, |m, t| m.max(t.0));
    let mut z = 0.0;
    let mut bsum = vec![0.0; n];
    let mut asum = vec![vec![0.0; n]; n];
    for (lm, first, mu, kk) in &terms {
        let m = (lm - lmax).exp();
        z += m;
        // U'(x) e^{-2U(x)} picks the stiffness of the first copy of a leg;
        // U'(x)² e^{-2U(x)} picks both.
        let f: Vec<f64> = (0..n).map(|l| ks[first[l].0]).collect();
        for a in 0..n {
            let da = t[a] - mu;
            bsum[a] += m * f[a] * da;
            for b in 0..n {
                let db = t[b] - mu;
                let w = if a == b { f[a] * ks[first[a].1] } else { f[a] * f[b] };
                asum[a][b] += m * w * (da * db + 1.0 / kk);
            }
        }
    }
    let mut cov = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            cov[a][b] = asum[a][b] / z - (bsum[a] / z) * (bsum[b] / z);
        }
    }
    Ok(cov)
}

/// Result of [`l1_expectation_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct L1Report {
    pub expectation: f64,
    pub l1_norm: f64,
    /// `√(2dβC2)‖h‖₁`.
    pub bound: f64,
    /// `√(4dβC2)‖h‖₁`, what the integration by parts argument yields.
    pub provable_bound: f64,
    pub slack: f64,
    pub holds: bool,
}

/// Compares `|E(h(φ(x)))|` under the single-site measure with the `L¹`
/// bound. `h` must vanish outside `support`.
pub fn l1_expectation_check(
    potential: &Potential,
    h: &(dyn Fn(f64) -> f64 + Sync),
    support: (f64, f64),
    stencil: &Stencil,
) -> Result<L1Report> {
    let (lo, hi) = support;
    if !(lo < hi) {
        return Err(Error::validation("support", "need lo < hi"));
    }
    let site = SiteMeasure::decimation(potential, stencil);
    let f = site.free_energy(1e-12)?;
    let mesh: Vec<f64> = (0..=16).map(|k| lo + (hi - lo) * k as f64 / 16.0).collect();
    let integrand = |x: f64, out: &mut [f64]| {
        let hv = h(x);
        out[0] = hv * (f - site.energy(x)).exp();
        out[1] = hv.abs();
    };
    let r = integrate_adaptive(&integrand, 2, &mesh, 1e-10, "l1_expectation")?;
    let expectation = r.values[0];
    let l1 = r.values[1];
    let c2 = potential.decomposition()?.c2;
    let d = stencil.d as f64;
    let bound = (2.0 * d * potential.beta * c2).sqrt() * l1;
    let provable = (4.0 * d * potential.beta * c2).sqrt() * l1;
    Ok(L1Report {
        expectation,
        l1_norm: l1,
        bound,
        provable_bound: provable,
        slack: bound - expectation.abs(),
        holds: expectation.abs() <= bound + 1e-12,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use std::f64::consts::PI;

    fn quad(beta: f64) -> Potential {
        Potential::quadratic(1.0, beta).unwrap()
    }

    #[test]
    fn stencil_slots_round_trip() {
        for d in 1..4 {
            for k in 0..2 * d {
                assert_eq!(Stencil::slot(d, Stencil::direction(d, k)), k);
            }
        }
        assert_eq!(Stencil::direction(2, 0), -2);
        assert_eq!(Stencil::direction(2, 2), 1);
    }

    #[test]
    fn quadratic_free_energy_closed_form() {
        let p = quad(1.0);
        let f0 = f_x(&p, &Stencil::zeros(1)).unwrap();
        assert!((f0 + 0.225_791).abs() < 1e-6);
        for (a, b) in [(0.0, 0.0), (1.0, -2.0), (3.5, 0.25)] {
            let f = f_x(&p, &Stencil::new(1, vec![a, b]).unwrap()).unwrap();
            let exact = (a - b) * (a - b) / 2.0 - (PI / 2.0).sqrt().ln();
            assert!((f - exact).abs() < 1e-9);
        }
        let f11 = f_x(&p, &Stencil::new(1, vec![1.0, 1.0]).unwrap()).unwrap();
        assert!((f11 - f0).abs() < 2e-10);
    }

    #[test]
    fn quadratic_hessian_is_beta_over_d() {
        for d in 1..=3 {
            for beta in [0.3, 1.0, 2.5] {
                let st = Stencil::new(d, (0..2 * d).map(|k| k as f64 * 0.7 - 1.0).collect()).unwrap();
                let h = hessian_fx_cov(&quad(beta), &st).unwrap();
                for i in 0..2 * d {
                    for j in 0..2 * d {
                        if i != j {
                            assert!((h.matrix[i][j] + beta / d as f64).abs() < 1e-8);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn quadratic_fd_hessian() {
        let h = hessian_fx_fd(&quad(1.0), &Stencil::new(1, vec![0.3, -0.4]).unwrap(), 1e-3).unwrap();
        let want = [[1.0, -1.0], [-1.0, 1.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((h.matrix[i][j] - want[i][j]).abs() < 1e-5);
            }
        }
        assert!(h.asymmetry() <= 1e-6);
    }

    #[test]
    fn mixture_single_gaussian_limit() {
        let k2 = 1.7;
        let p = Potential::gaussian_mixture(0.0, 40.0, k2, 1.0).unwrap();
        let st = Stencil::new(2, vec![0.1, -0.5, 1.2, 0.0]).unwrap();
        let h = hessian_fx_cov(&p, &st).unwrap();
        let cov = bk_exact_cov_matrix(0.0, 40.0, k2, &st).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!((-h.matrix[i][j] - k2 / 2.0).abs() < 1e-8);
                    assert!((cov[i][j] - k2 / 8.0).abs() < 1e-12);
                }
            }
        }
        let cov1 = bk_exact_cov_matrix(1.0, 40.0, k2, &st).unwrap();
        assert!((cov1[0][1] - 5.0).abs() < 1e-10);
    }

    #[test]
    fn bk_closed_form_matches_quadrature() {
        let p = Potential::gaussian_mixture(0.1, 40.0, 1.0, 1.0).unwrap();
        for k in 0..10 {
            let mut rng = stream(11, Domain::Scan, k);
            let st = Stencil::new(2, (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
            let h = hessian_fx_cov(&p, &st).unwrap();
            let cov = bk_exact_cov_matrix(0.1, 40.0, 1.0, &st).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    if i != j {
                        let q = -h.matrix[i][j] / 4.0;
                        assert!((cov[i][j] - q).abs() <= 1e-6 * q.abs(), "{} vs {}", cov[i][j], q);
                    }
                }
            }
        }
    }

    #[test]
    fn bounds_convex_case() {
        let p = quad(1.0);
        let dec = p.decomposition().unwrap();
        let b = theoretical_bounds(&dec, 1.0, 1, 1.0).unwrap();
        assert!((b.c_l - 0.25).abs() < 1e-15 && (b.c_u - 0.25).abs() < 1e-15);
        assert!((b.epsilon - 0.5).abs() < 1e-15);
        assert_eq!(b.hessian_scale(1.0), (1.0, 1.0));
    }

    #[test]
    fn bounds_log_well_admissible() {
        let p = Potential::log_well(0.25, 0.003).unwrap();
        let dec = p.decomposition().unwrap();
        let b = theoretical_bounds(&dec, 1.0, 1, 0.003).unwrap();
        assert!(b.asserted && b.epsilon > 0.0 && b.c_l > 0.0 && b.c_u > b.c_l);
        let bad = theoretical_bounds(&dec, 1.0, 1, 0.5).unwrap();
        assert!(!bad.asserted);
    }

    #[test]
    fn quadratic_scan_is_flat() {
        let mut spec = ScanSpec::new(1);
        spec.random = 20;
        let r = rwr_scan(&quad(1.0), &spec).unwrap();
        assert!((r.scanned_min - 1.0).abs() < 1e-8 && (r.scanned_max - 1.0).abs() < 1e-8);
        assert!(r.holds && r.complete);
        assert_eq!(r.rows.len(), 9 + 20);
        assert!(r.to_csv().starts_with("s-1,s1,i,j,minus_Dij\n"));
    }

    #[test]
    fn scan_is_independent_of_parallelism() {
        let p = Potential::gaussian_mixture(0.1, 40.0, 1.0, 1.0).unwrap();
        let mut spec = ScanSpec::new(1);
        spec.random = 30;
        spec.seed = 5;
        let a = rwr_scan(&p, &spec).unwrap();
        spec.parallelism = Parallelism::Sequential;
        let b = rwr_scan(&p, &spec).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn l1_zero_function() {
        let r = l1_expectation_check(&quad(1.0), &|_| 0.0, (-1.0, 1.0), &Stencil::zeros(1)).unwrap();
        assert_eq!(r.expectation, 0.0);
        assert!(r.holds);
    }

    #[test]
    fn l1_bump_under_quadratic() {
        let bump = |x: f64| if x.abs() < 0.1 { 5.0 } else { 0.0 };
        let r = l1_expectation_check(&quad(1.0), &bump, (-0.1, 0.1), &Stencil::zeros(1)).unwrap();
        // Density at 0 is √(2/π).
        assert!((r.expectation - (2.0 / PI).sqrt()).abs() < 1e-2);
        assert!(r.holds && r.slack > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn free_energy_is_shift_invariant(a in -5.0f64..5.0, b in -5.0f64..5.0, t in -50.0f64..50.0) {
            let p = Potential::log_well(0.25, 0.5).unwrap();
            let st = Stencil::new(1, vec![a, b]).unwrap();
            let f0 = f_x(&p, &st).unwrap();
            let f1 = f_x(&p, &st.shifted(t)).unwrap();
            prop_assert!((f0 - f1).abs() <= 2.0 * DEFAULT_TOL + 1e-12 * f0.abs());
        }

        #[test]
        fn covariance_hessian_is_symmetric_with_zero_rows(
            v in proptest::collection::vec(-2.0f64..2.0, 4)
        ) {
            let p = Potential::gaussian_mixture(0.2, 30.0, 1.0, 1.0).unwrap();
            let st = Stencil::new(2, v).unwrap();
            let h = hessian_fx_cov(&p, &st).unwrap();
            prop_assert!(h.asymmetry() <= 1e-12 * h.max_abs());
            prop_assert!(h.row_sum_defect() <= 1e-12 * h.max_abs());
        }
    }
}
