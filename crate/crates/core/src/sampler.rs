//! Checkerboard heat-bath and Metropolis samplers, Langevin dynamics and
//! shared-noise coupled runs.
//!
//! The bond weight `w` fixes the convention. On a box every bond touching an
//! interior site carries weight 2, so the site conditional is
//! `exp(-2β Σ_i U(φ(x+e_i) - φ(x)))`. On the tilted torus the Hamiltonian is
//! `Σ_b U(∇φ(b) + u)` with weight 1. Either default can be overridden.
//!
//! All randomness is drawn from counter-based streams keyed by
//! `(seed, sweep, site)`, so runs are bitwise identical for any number of
//! worker threads.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::decimation::SiteMeasure;
use crate::error::{Error, Result};
use crate::lattice::{Field, Geometry, Parity};
use crate::par::{map_slice, Parallelism};
use crate::potentials::{Kind, Potential};
use crate::rng::{site_stream, stream, Domain};

/// Rejection attempts before falling back to the grid sampler. At the
/// acceptance floor 0.05 a spurious fallback has probability `0.95^200`.
pub const MAX_TRIES: u32 = 200;
pub const ACCEPTANCE_FLOOR: f64 = 0.05;
const FALLBACK_GRID: usize = 4097;
const DIVERGENCE_THRESHOLD: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Algorithm {
    HeatBath,
    /// Uniform proposal `φ + step·U(-1, 1)`.
    Metropolis { step: f64 },
    /// Full-field Euler–Maruyama; one sweep is one step.
    Langevin { dt: f64 },
}

/// Potential, geometry, tilt and bond weight: everything that defines the
/// Gibbs measure being sampled.
#[derive(Debug, Clone)]
pub struct Model {
    pub potential: Potential,
    pub geometry: Geometry,
    pub tilt: Vec<f64>,
    pub weight: f64,
    free: Vec<bool>,
    odd: Vec<usize>,
    even: Vec<usize>,
    dirs: Vec<isize>,
    /// `nbr[x * 2d + k]` is the neighbour of `x` in direction `dirs[k]`, or
    /// `usize::MAX` outside a box.
    nbr: Vec<usize>,
    /// Tilt shift per direction slot.
    shifts: Vec<f64>,
}

impl Model {
    /// `weight = None` selects 2 on a box and 1 on a torus.
    pub fn new(potential: Potential, geometry: Geometry, tilt: Vec<f64>, weight: Option<f64>) -> Result<Self> {
        potential.validate()?;
        geometry.validate()?;
        if tilt.len() != geometry.d() || tilt.iter().any(|u| !u.is_finite()) {
            return Err(Error::validation("tilt", "must have d finite components"));
        }
        let weight = weight.unwrap_or(if geometry.is_torus() { 1.0 } else { 2.0 });
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::validation("bond_weight", "must be positive"));
        }
        // The torus pins site 0 to remove the zero mode.
        let free: Vec<bool> = (0..geometry.n_sites())
            .map(|x| if geometry.is_torus() { x != 0 } else { !geometry.is_boundary(x) })
            .collect();
        let pick = |p: Parity| -> Vec<usize> {
            geometry.sites_of(p).into_iter().filter(|&x| free[x]).collect()
        };
        let dirs = geometry.directions();
        let nbr = (0..geometry.n_sites())
            .flat_map(|x| dirs.iter().map(move |&k| geometry.neighbor(x, k).unwrap_or(usize::MAX)))
            .collect();
        let shifts = dirs
            .iter()
            .map(|&k| {
                let u = if geometry.is_torus() { tilt[k.unsigned_abs() - 1] } else { 0.0 };
                if k > 0 {
                    u
                } else {
                    -u
                }
            })
            .collect();
        Ok(Model {
            odd: pick(Parity::Odd),
            even: pick(Parity::Even),
            dirs,
            nbr,
            shifts,
            potential,
            geometry,
            tilt,
            weight,
            free,
        })
    }

    pub fn beta(&self) -> f64 {
        self.potential.beta
    }

    /// `w β`, the prefactor of the single-site energy.
    pub fn prefactor(&self) -> f64 {
        self.weight * self.potential.beta
    }

    pub fn is_free(&self, x: usize) -> bool {
        self.free[x]
    }

    pub fn free_sites(&self, parity: Parity) -> &[usize] {
        match parity {
            Parity::Odd => &self.odd,
            Parity::Even => &self.even,
        }
    }

    /// Torus tilt added to the bond leaving a site in direction `dir`.
    fn shift(&self, dir: isize) -> f64 {
        if !self.geometry.is_torus() {
            return 0.0;
        }
        let u = self.tilt[dir.unsigned_abs() - 1];
        if dir > 0 {
            u
        } else {
            -u
        }
    }

    /// Legs `t_i = φ(x+e_i) + u_i` in the order `[-d..-1, 1..d]`.
    pub fn legs(&self, heights: &[f64], x: usize, out: &mut Vec<f64>) {
        out.clear();
        let k = self.dirs.len();
        for (&y, u) in self.nbr[x * k..(x + 1) * k].iter().zip(&self.shifts) {
            out.push(heights[y] + u);
        }
    }

    /// Starting field: flat on the torus, `x·u` on the box.
    pub fn initial_field(&self) -> Result<Field> {
        if self.geometry.is_torus() {
            Field::torus(self.geometry, self.tilt.clone())
        } else {
            Field::tilted_box(self.geometry, self.tilt.clone())
        }
    }

    fn check_field(&self, heights: &[f64]) -> Result<()> {
        if heights.len() != self.geometry.n_sites() {
            return Err(Error::validation("field", "size does not match the geometry"));
        }
        Ok(())
    }

    /// `β H` summed over bonds with at least one free endpoint.
    pub fn energy(&self, heights: &[f64]) -> f64 {
        let g = &self.geometry;
        let mut e = 0.0;
        for x in 0..g.n_sites() {
            for i in 1..=g.d() as isize {
                let Some(y) = g.neighbor(x, i) else { continue };
                if !g.is_torus() && g.is_boundary(x) && g.is_boundary(y) {
                    continue;
                }
                e += self.potential.value(heights[y] - heights[x] + self.shift(i), 0);
            }
        }
        self.prefactor() * e
    }

    /// `-∂(βH)/∂φ(x)`.
    pub fn drift(&self, heights: &[f64], x: usize) -> f64 {
        let phi = heights[x];
        let mut s = 0.0;
        let k = self.dirs.len();
        for (&y, u) in self.nbr[x * k..(x + 1) * k].iter().zip(&self.shifts) {
            s += self.potential.value(heights[y] + u - phi, 1);
        }
        self.prefactor() * s
    }

    /// Largest stable Euler step, `1/(2 w d β (C₂ + C₀))`; for `w = 2` this is
    /// `1/(4dβC₂ + 4dβC₀)`.
    pub fn langevin_dt_max(&self) -> Result<f64> {
        let dec = self.potential.decomposition()?;
        Ok(1.0 / (2.0 * self.weight * self.geometry.d() as f64 * self.beta() * (dec.c2 + dec.c0)))
    }
}

/// `(A, B)` with `U >= Aη² - B`, as tight in `B` as known in closed form.
fn envelope_constants(potential: &Potential) -> (f64, f64) {
    match potential.kind {
        // U - η²/2 = y/2 - ln y + a/2 with y = η² + a, minimal at y = 2.
        Kind::LogWell { a } => (0.5, std::f64::consts::LN_2 - 1.0 - 0.5 * a),
        _ => potential.growth(),
    }
}

/// Counters from site updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepStats {
    pub updates: u64,
    pub proposals: u64,
    pub accepted: u64,
    pub fallbacks: u64,
}

impl SweepStats {
    fn add(&mut self, o: &SweepStats) {
        self.updates += o.updates;
        self.proposals += o.proposals;
        self.accepted += o.accepted;
        self.fallbacks += o.fallbacks;
    }

    pub fn acceptance(&self) -> f64 {
        self.accepted as f64 / self.proposals.max(1) as f64
    }
}

/// Exact draw from `∝ exp(-measure.energy(φ))`: Gaussian-envelope rejection,
/// then a grid inverse CDF if `MAX_TRIES` proposals are all rejected.
pub fn draw_site<R: Rng>(measure: &SiteMeasure<'_>, rng: &mut R) -> (f64, SweepStats) {
    let (a, b) = envelope_constants(measure.potential);
    let n = measure.legs.len() as f64;
    let m = measure.legs.iter().sum::<f64>() / n;
    let spread: f64 = measure.legs.iter().map(|t| (t - m) * (t - m)).sum();
    let curv = measure.prefactor * a * n;
    let offset = measure.prefactor * (n * b - a * spread);
    let sd = (0.5 / curv).sqrt();
    let mut stats = SweepStats {
        updates: 1,
        ..Default::default()
    };
    for _ in 0..MAX_TRIES {
        let z: f64 = rng.sample(StandardNormal);
        let phi = m + sd * z;
        stats.proposals += 1;
        let log_ratio = -(measure.energy(phi) - curv * (phi - m) * (phi - m) + offset);
        let v: f64 = rng.gen();
        if v.ln() < log_ratio {
            stats.accepted += 1;
            return (phi, stats);
        }
    }
    stats.fallbacks += 1;
    (grid_draw(measure, m, curv, offset, rng.gen()), stats)
}

fn grid_draw(measure: &SiteMeasure<'_>, m: f64, curv: f64, offset: f64, v: f64) -> f64 {
    let w = ((40.0 + (offset + measure.energy(m)).max(0.0)) / curv).sqrt();
    let h = 2.0 * w / (FALLBACK_GRID - 1) as f64;
    let xs: Vec<f64> = (0..FALLBACK_GRID).map(|k| m - w + k as f64 * h).collect();
    let es: Vec<f64> = xs.iter().map(|&x| measure.energy(x)).collect();
    let e0 = es.iter().cloned().fold(f64::INFINITY, f64::min);
    let p: Vec<f64> = es.iter().map(|e| (e0 - e).exp()).collect();
    let mut cdf = vec![0.0; FALLBACK_GRID];
    for k in 1..FALLBACK_GRID {
        cdf[k] = cdf[k - 1] + 0.5 * h * (p[k] + p[k - 1]);
    }
    let target = v * cdf[FALLBACK_GRID - 1];
    let k = cdf.partition_point(|&c| c < target).clamp(1, FALLBACK_GRID - 1);
    let span = cdf[k] - cdf[k - 1];
    let frac = if span > 0.0 { (target - cdf[k - 1]) / span } else { 0.5 };
    xs[k - 1] + frac * h
}

/// Update one parity class from a frozen snapshot of the other.
fn parity_pass<F>(model: &Model, heights: &mut [f64], parity: Parity, mode: Parallelism, update: F) -> SweepStats
where
    F: Fn(usize, f64, &SiteMeasure<'_>) -> (f64, SweepStats) + Sync,
{
    let sites = model.free_sites(parity);
    let snapshot: &[f64] = heights;
    let prefactor = model.prefactor();
    let k = model.dirs.len();
    let results = map_slice(sites, mode, |&x| {
        let mut legs = [0.0f64; 8];
        for (slot, (&y, u)) in model.nbr[x * k..(x + 1) * k].iter().zip(&model.shifts).enumerate() {
            legs[slot] = snapshot[y] + u;
        }
        let measure = SiteMeasure {
            potential: &model.potential,
            prefactor,
            legs: &legs[..k],
        };
        update(x, snapshot[x], &measure)
    });
    let mut total = SweepStats::default();
    for (&x, (v, s)) in sites.iter().zip(results) {
        heights[x] = v;
        total.add(&s);
    }
    total
}

/// One checkerboard heat-bath sweep: all odd sites, then all even sites.
pub fn heat_bath_sweep(model: &Model, heights: &mut [f64], seed: u64, sweep: u64, mode: Parallelism) -> Result<SweepStats> {
    model.check_field(heights)?;
    let n = heights.len();
    let mut stats = SweepStats::default();
    for parity in [Parity::Odd, Parity::Even] {
        let s = parity_pass(model, heights, parity, mode, |x, _, measure| {
            let mut rng = site_stream(seed, Domain::SiteUpdate, sweep, x, n);
            draw_site(measure, &mut rng)
        });
        stats.add(&s);
    }
    Ok(stats)
}

/// One checkerboard Metropolis sweep with uniform proposals of half-width `step`.
pub fn metropolis_sweep(
    model: &Model,
    heights: &mut [f64],
    step: f64,
    seed: u64,
    sweep: u64,
    mode: Parallelism,
) -> Result<SweepStats> {
    model.check_field(heights)?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::validation("algorithm.step", "must be positive"));
    }
    let n = heights.len();
    let mut stats = SweepStats::default();
    for parity in [Parity::Odd, Parity::Even] {
        let s = parity_pass(model, heights, parity, mode, |x, old, measure| {
            let mut rng = site_stream(seed, Domain::SiteUpdate, sweep, x, n);
            let new = old + step * (2.0 * rng.gen::<f64>() - 1.0);
            let accept = rng.gen::<f64>().ln() < measure.energy(old) - measure.energy(new);
            let st = SweepStats {
                updates: 1,
                proposals: 1,
                accepted: accept as u64,
                fallbacks: 0,
            };
            (if accept { new } else { old }, st)
        });
        stats.add(&s);
    }
    Ok(stats)
}

/// Standard normal noise for step `step`, one value per site.
pub fn noise(seed: u64, step: u64, n_sites: usize) -> Vec<f64> {
    let mut rng = stream(seed, Domain::Noise, step);
    (0..n_sites).map(|_| rng.sample(StandardNormal)).collect()
}

fn apply_step(heights: &mut [f64], sites: &[usize], drift: &[f64], dt: f64, noise: &[f64], step: u64) -> Result<()> {
    let amp = (2.0 * dt).sqrt();
    let mut max_abs = 0.0f64;
    for (&x, f) in sites.iter().zip(drift) {
        heights[x] += dt * f + amp * noise[x];
        max_abs = max_abs.max(heights[x].abs());
    }
    if !(max_abs <= DIVERGENCE_THRESHOLD) {
        return Err(Error::Divergence { step: step as usize, max_abs });
    }
    Ok(())
}

/// Euler–Maruyama step of `dφ = -∇(βH) dt + √2 dW` on all free sites.
/// `noise` holds one standard normal per site; `step` labels diagnostics.
pub fn langevin_step(model: &Model, heights: &mut [f64], dt: f64, noise: &[f64], step: u64, mode: Parallelism) -> Result<()> {
    model.check_field(heights)?;
    if !(dt > 0.0) || noise.len() != heights.len() {
        return Err(Error::validation("langevin", "need dt > 0 and one noise value per site"));
    }
    let sites: Vec<usize> = (0..heights.len()).filter(|&x| model.free[x]).collect();
    let snapshot: &[f64] = heights;
    let drift = map_slice(&sites, mode, |&x| model.drift(snapshot, x));
    apply_step(heights, &sites, &drift, dt, noise, step)
}

/// Drift of the even field, `-Σ_x ∂F_x/∂φ(y)` over odd neighbours `x` of `y`
/// with `F_x` the decimated single-site free energy. Odd sites that are not
/// free contribute their bond directly.
pub fn even_drift(model: &Model, heights: &[f64], tol: f64) -> Result<Vec<f64>> {
    let g = &model.geometry;
    let mut drift = vec![0.0; heights.len()];
    let mut legs = Vec::new();
    for x in 0..heights.len() {
        if g.parity(x) != Parity::Odd {
            continue;
        }
        if !model.free[x] {
            for &dir in &model.dirs {
                let Some(y) = g.neighbor(x, dir) else { continue };
                if model.free[y] {
                    // Bond (x, y) seen from y points in direction -dir.
                    let t = heights[x] + model.shift(-dir);
                    drift[y] += model.prefactor() * model.potential.value(t - heights[y], 1);
                }
            }
            continue;
        }
        model.legs(heights, x, &mut legs);
        let grad = SiteMeasure {
            potential: &model.potential,
            prefactor: model.prefactor(),
            legs: &legs,
        }
        .gradient(tol)?;
        for (k, &dir) in model.dirs.iter().enumerate() {
            let y = g.neighbor(x, dir).expect("free sites have all neighbours");
            drift[y] -= grad[k];
        }
    }
    Ok(drift)
}

/// Euler–Maruyama step of the even-field dynamics. Odd heights are left
/// untouched. Small lattices only: each step needs a quadrature per odd site.
pub fn even_langevin_step(model: &Model, heights: &mut [f64], dt: f64, noise: &[f64], step: u64, tol: f64) -> Result<()> {
    model.check_field(heights)?;
    if model.geometry.d() > 2 || model.geometry.n() > 8 {
        return Err(Error::validation("geometry", "even-field dynamics needs d <= 2 and n <= 8"));
    }
    if !(dt > 0.0) || noise.len() != heights.len() {
        return Err(Error::validation("langevin", "need dt > 0 and one noise value per site"));
    }
    let drift = even_drift(model, heights, tol)?;
    let sites = model.even.clone();
    let d: Vec<f64> = sites.iter().map(|&y| drift[y]).collect();
    apply_step(heights, &sites, &d, dt, noise, step)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    #[default]
    Full,
    Even,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    pub steps: u64,
    pub dt: f64,
    pub seed: u64,
    #[serde(default = "one")]
    pub record_every: u64,
    #[serde(default)]
    pub dynamics: Dynamics,
    #[serde(default = "default_coupling_tol")]
    pub tol: f64,
    #[serde(default)]
    pub parallelism: Parallelism,
}

fn one() -> u64 {
    1
}

fn default_coupling_tol() -> f64 {
    1e-8
}

/// Series recorded along a coupled run, with `φ̃ = φ_a - φ_b`.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CouplingDiagnostics {
    pub time: Vec<f64>,
    /// `Σ_{y even, free} φ̃(y)²`.
    pub even_l2: Vec<f64>,
    /// `Σ (∇φ̃)²` over even bonds with both ends free.
    pub dirichlet: Vec<f64>,
    /// `Σ |φ̃(y_b)| |∇φ̃(b)|` over even bonds from a free site to a frozen one.
    pub boundary: Vec<f64>,
    /// `Σ_i` mean over even sites of the squared difference of the two
    /// chains' effective gradients along `e_ev,i`.
    pub gradient_gap: Vec<f64>,
}

impl CouplingDiagnostics {
    pub fn is_finite(&self) -> bool {
        [&self.even_l2, &self.dirichlet, &self.boundary, &self.gradient_gap]
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Time average of `gradient_gap` over the second half of the run.
    pub fn late_gap(&self) -> f64 {
        let k = self.gradient_gap.len() / 2;
        crate::stats::mean(&self.gradient_gap[k..])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,even_l2,dirichlet,boundary,gradient_gap\n");
        for k in 0..self.time.len() {
            s.push_str(&format!(
                "{:e},{:e},{:e},{:e},{:e}\n",
                self.time[k], self.even_l2[k], self.dirichlet[k], self.boundary[k], self.gradient_gap[k]
            ));
        }
        s
    }
}

/// Generators of the even sublattice: `e_i + e_{i+1}` for `i < d`, and
/// `e_d - e_1` (d even) or `e_d + e_1` (d odd). As coordinate offsets.
pub fn even_generators(d: usize) -> Vec<Vec<i64>> {
    (0..d)
        .map(|i| {
            let mut v = vec![0i64; d];
            if i + 1 < d {
                v[i] += 1;
                v[i + 1] += 1;
            } else {
                v[d - 1] += 1;
                v[0] += if d.is_multiple_of(2) { -1 } else { 1 };
            }
            v
        })
        .collect()
}

fn offset_site(g: &Geometry, x: usize, v: &[i64]) -> Option<usize> {
    let mut y = x;
    for (axis, &k) in v.iter().enumerate() {
        let dir = (axis + 1) as isize * k.signum() as isize;
        for _ in 0..k.unsigned_abs() {
            y = g.neighbor(y, dir)?;
        }
    }
    Some(y)
}

fn record(a: &Model, b: &Model, ha: &[f64], hb: &[f64], diag: &mut CouplingDiagnostics, t: f64) {
    let g = &a.geometry;
    let diff: Vec<f64> = ha.iter().zip(hb).map(|(x, y)| x - y).collect();
    let even: Vec<usize> = g.sites_of(Parity::Even);
    let l2: f64 = a.even.iter().map(|&y| diff[y] * diff[y]).sum();
    let mut dir = 0.0;
    let mut bnd = 0.0;
    for (x, y) in crate::lattice::even_bonds(g) {
        let grad = diff[y] - diff[x];
        match (a.free[x], a.free[y]) {
            (true, true) => dir += grad * grad,
            (true, false) => bnd += diff[x].abs() * grad.abs(),
            (false, true) => bnd += diff[y].abs() * grad.abs(),
            _ => {}
        }
    }
    let mut gap = 0.0;
    for v in even_generators(g.d()) {
        let (mut s, mut count) = (0.0, 0usize);
        let shift = |m: &Model| -> f64 {
            if g.is_torus() {
                v.iter().zip(&m.tilt).map(|(&k, u)| k as f64 * u).sum()
            } else {
                0.0
            }
        };
        let (sa, sb) = (shift(a), shift(b));
        for &x in &even {
            if let Some(y) = offset_site(g, x, &v) {
                let ea = ha[y] - ha[x] + sa;
                let eb = hb[y] - hb[x] + sb;
                s += (ea - eb) * (ea - eb);
                count += 1;
            }
        }
        gap += s / count.max(1) as f64;
    }
    diag.time.push(t);
    diag.even_l2.push(l2);
    diag.dirichlet.push(dir);
    diag.boundary.push(bnd);
    diag.gradient_gap.push(gap);
}

/// Evolve two chains under the same noise and record [`CouplingDiagnostics`].
/// The models may differ only in their tilt.
pub fn coupled_run(
    model_a: &Model,
    model_b: &Model,
    field_a: &mut Field,
    field_b: &mut Field,
    cfg: &CouplingConfig,
) -> Result<CouplingDiagnostics> {
    if model_a.geometry != model_b.geometry || model_a.weight != model_b.weight {
        return Err(Error::validation("couple", "chains must share geometry and bond weight"));
    }
    if format!("{:?}", model_a.potential) != format!("{:?}", model_b.potential) {
        return Err(Error::validation("couple", "chains must share the potential"));
    }
    if !(cfg.dt > 0.0) || cfg.record_every == 0 {
        return Err(Error::validation("couple.dt", "need dt > 0 and record_every >= 1"));
    }
    let dt_max = model_a.langevin_dt_max()?;
    if cfg.dt > dt_max {
        return Err(Error::validation("couple.dt", format!("dt exceeds the stability bound {dt_max:e}")));
    }
    let n = field_a.heights.len();
    let mut diag = CouplingDiagnostics::default();
    record(model_a, model_b, &field_a.heights, &field_b.heights, &mut diag, 0.0);
    for step in 0..cfg.steps {
        let xi = noise(cfg.seed, step, n);
        match cfg.dynamics {
            Dynamics::Full => {
                langevin_step(model_a, &mut field_a.heights, cfg.dt, &xi, step, cfg.parallelism)?;
                langevin_step(model_b, &mut field_b.heights, cfg.dt, &xi, step, cfg.parallelism)?;
            }
            Dynamics::Even => {
                even_langevin_step(model_a, &mut field_a.heights, cfg.dt, &xi, step, cfg.tol)?;
                even_langevin_step(model_b, &mut field_b.heights, cfg.dt, &xi, step, cfg.tol)?;
            }
        }
        if (step + 1) % cfg.record_every == 0 {
            let t = (step + 1) as f64 * cfg.dt;
            record(model_a, model_b, &field_a.heights, &field_b.heights, &mut diag, t);
        }
    }
    Ok(diag)
}

/// Fit `Σφ̃² ∝ exp(-2 r t)` over the second half of the run and return `r`,
/// the decay rate of `‖φ̃‖`.
pub fn contraction_rate(diag: &CouplingDiagnostics) -> f64 {
    let k = diag.time.len() / 2;
    let (t, y): (Vec<f64>, Vec<f64>) = diag.time[k..]
        .iter()
        .zip(&diag.even_l2[k..])
        .filter(|(_, v)| **v > 0.0)
        .map(|(t, v)| (*t, v.ln()))
        .unzip();
    let w = vec![1.0; t.len()];
    -0.5 * crate::stats::weighted_linear_fit(&t, &y, &w).1
}

fn default_thinning() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub potential: Potential,
    pub geometry: Geometry,
    pub tilt: Vec<f64>,
    pub sweeps: u64,
    #[serde(default)]
    pub burn_in: u64,
    #[serde(default = "default_thinning")]
    pub thinning: u64,
    pub seed: u64,
    pub algorithm: Algorithm,
    /// Overrides the default bond weight (2 on a box, 1 on a torus).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bond_weight: Option<f64>,
    #[serde(default)]
    pub parallelism: Parallelism,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<Model> {
        if self.sweeps <= self.burn_in {
            return Err(Error::validation("sampler.sweeps", "must exceed burn_in"));
        }
        if self.thinning == 0 {
            return Err(Error::validation("sampler.thinning", "must be >= 1"));
        }
        let model = Model::new(self.potential.clone(), self.geometry, self.tilt.clone(), self.bond_weight)?;
        match self.algorithm {
            Algorithm::HeatBath => {}
            Algorithm::Metropolis { step } => {
                if !(step > 0.0 && step.is_finite()) {
                    return Err(Error::validation("sampler.algorithm.step", "must be positive"));
                }
            }
            Algorithm::Langevin { dt } => {
                let max = model.langevin_dt_max()?;
                if !(dt > 0.0 && dt <= max) {
                    return Err(Error::validation(
                        "sampler.algorithm.dt",
                        format!("must lie in (0, {max:e}]"),
                    ));
                }
            }
        }
        Ok(model)
    }
}

/// Running chain. Iterating yields `(sweep, field)` snapshots after burn-in,
/// every `thinning` sweeps.
pub struct Chain {
    pub config: ChainConfig,
    pub model: Model,
    pub field: Field,
    pub sweep: u64,
    pub stats: SweepStats,
}

impl Chain {
    pub fn new(config: ChainConfig) -> Result<Self> {
        let model = config.validate()?;
        let field = model.initial_field()?;
        Ok(Chain {
            config,
            model,
            field,
            sweep: 0,
            stats: SweepStats::default(),
        })
    }

    /// Advance by one sweep.
    pub fn step(&mut self) -> Result<()> {
        let c = &self.config;
        let h = &mut self.field.heights;
        let s = match c.algorithm {
            Algorithm::HeatBath => heat_bath_sweep(&self.model, h, c.seed, self.sweep, c.parallelism)?,
            Algorithm::Metropolis { step } => metropolis_sweep(&self.model, h, step, c.seed, self.sweep, c.parallelism)?,
            Algorithm::Langevin { dt } => {
                let xi = noise(c.seed, self.sweep, h.len());
                langevin_step(&self.model, h, dt, &xi, self.sweep, c.parallelism)?;
                SweepStats::default()
            }
        };
        self.stats.add(&s);
        self.sweep += 1;
        Ok(())
    }

    /// True when the sweep just completed is kept.
    pub fn retained(&self) -> bool {
        self.sweep > self.config.burn_in && (self.sweep - self.config.burn_in).is_multiple_of(self.config.thinning)
    }

    pub fn finished(&self) -> bool {
        self.sweep >= self.config.sweeps
    }
}

impl Iterator for Chain {
    type Item = Result<(u64, Field)>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.finished() {
            if let Err(e) = self.step() {
                self.sweep = self.config.sweeps;
                return Some(Err(e));
            }
            if self.retained() {
                return Some(Ok((self.sweep, self.field.clone())));
            }
        }
        None
    }
}

/// Run a chain to completion, calling `visit(sweep, field)` on each retained
/// snapshot without cloning it.
pub fn run_chain<F>(config: ChainConfig, mut visit: F) -> Result<SweepStats>
where
    F: FnMut(u64, &Field) -> Result<()>,
{
    let mut chain = Chain::new(config)?;
    while !chain.finished() {
        chain.step()?;
        if chain.retained() {
            visit(chain.sweep, &chain.field)?;
        }
    }
    Ok(chain.stats)
}
