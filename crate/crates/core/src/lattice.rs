//! Height fields on tori and boxes, bond bookkeeping and the even/odd split.
//!
//! Sites are indexed row-major with the first coordinate varying fastest.
//! A torus of side `N` has `N^d` sites. A box of size `N` has sites with
//! coordinates `0..=N`; those with some coordinate equal to `0` or `N` form
//! the boundary and carry the boundary heights `ψ(x) = x·u`.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Geometry {
    Torus { d: usize, n: usize },
    Box { d: usize, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parity {
    Even,
    Odd,
}

impl Geometry {
    pub fn torus(d: usize, n: usize) -> Result<Self> {
        let g = Geometry::Torus { d, n };
        g.validate()?;
        Ok(g)
    }

    pub fn boxed(d: usize, n: usize) -> Result<Self> {
        let g = Geometry::Box { d, n };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n) = (self.d(), self.n());
        if d == 0 || d > 4 {
            return Err(Error::validation("geometry.d", "must be between 1 and 4"));
        }
        match self {
            Geometry::Torus { .. } => {
                if n < 2 || n % 2 != 0 {
                    return Err(Error::validation("geometry.n", "torus side must be even and >= 2"));
                }
            }
            Geometry::Box { .. } => {
                if n < 2 {
                    return Err(Error::validation("geometry.n", "box size must be >= 2"));
                }
            }
        }
        if self.side().checked_pow(d as u32).is_none_or(|s| s > 1 << 26) {
            return Err(Error::validation("geometry.n", "lattice too large"));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        match *self {
            Geometry::Torus { d, .. } | Geometry::Box { d, .. } => d,
        }
    }

    pub fn n(&self) -> usize {
        match *self {
            Geometry::Torus { n, .. } | Geometry::Box { n, .. } => n,
        }
    }

    pub fn is_torus(&self) -> bool {
        matches!(self, Geometry::Torus { .. })
    }

    /// Number of coordinate values per axis.
    pub fn side(&self) -> usize {
        match *self {
            Geometry::Torus { n, .. } => n,
            Geometry::Box { n, .. } => n + 1,
        }
    }

    pub fn n_sites(&self) -> usize {
        self.side().pow(self.d() as u32)
    }

    pub fn coords(&self, mut idx: usize) -> Vec<usize> {
        let s = self.side();
        (0..self.d())
            .map(|_| {
                let c = idx % s;
                idx /= s;
                c
            })
            .collect()
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        let s = self.side();
        coords.iter().rev().fold(0, |acc, &c| acc * s + c)
    }

    /// Neighbour of `idx` in signed direction `dir` (`±1..=±d`), wrapping on
    /// the torus and `None` outside a box.
    pub fn neighbor(&self, idx: usize, dir: isize) -> Option<usize> {
        let d = self.d();
        let axis = dir.unsigned_abs() - 1;
        assert!(dir != 0 && axis < d, "direction out of range");
        let s = self.side();
        let stride = s.pow(axis as u32);
        let c = (idx / stride) % s;
        if dir > 0 {
            if c + 1 < s {
                Some(idx + stride)
            } else if self.is_torus() {
                Some(idx + stride - s * stride)
            } else {
                None
            }
        } else if c > 0 {
            Some(idx - stride)
        } else if self.is_torus() {
            Some(idx + (s - 1) * stride)
        } else {
            None
        }
    }

    pub fn parity(&self, idx: usize) -> Parity {
        even_odd(&self.coords(idx))
    }

    /// True for box sites carrying boundary heights.
    pub fn is_boundary(&self, idx: usize) -> bool {
        match *self {
            Geometry::Torus { .. } => false,
            Geometry::Box { n, .. } => self.coords(idx).iter().any(|&c| c == 0 || c == n),
        }
    }

    /// Sites of one parity in increasing index order.
    pub fn sites_of(&self, parity: Parity) -> Vec<usize> {
        (0..self.n_sites()).filter(|&i| self.parity(i) == parity).collect()
    }

    pub fn directions(&self) -> Vec<isize> {
        let d = self.d() as isize;
        (-d..=d).filter(|&i| i != 0).collect()
    }
}

/// Parity of a site from its coordinates.
pub fn even_odd(coords: &[usize]) -> Parity {
    if coords.iter().sum::<usize>() % 2 == 0 {
        Parity::Even
    } else {
        Parity::Odd
    }
}

/// Pairs of even sites at `ℓ¹` distance two, each listed once as
/// `(x, y)` with `x < y`.
pub fn even_bonds(geometry: &Geometry) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for x in geometry.sites_of(Parity::Even) {
        for y in even_neighbors(geometry, x) {
            if x < y {
                out.push((x, y));
            }
        }
    }
    out
}

/// Even sites at `ℓ¹` distance two from the even site `x`, without repeats.
pub fn even_neighbors(geometry: &Geometry, x: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for a in geometry.directions() {
        let Some(m) = geometry.neighbor(x, a) else { continue };
        for b in geometry.directions() {
            if b == -a {
                continue;
            }
            if let Some(y) = geometry.neighbor(m, b) {
                if y != x && !out.contains(&y) {
                    out.push(y);
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// A height configuration with its tilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub geometry: Geometry,
    pub heights: Vec<f64>,
    /// On the torus the tilt enters the Hamiltonian as `U(∇_iφ + u_i)`; on a
    /// box it is carried by the boundary heights.
    pub tilt: Vec<f64>,
}

impl Field {
    pub fn flat(geometry: Geometry) -> Self {
        Field {
            geometry,
            heights: vec![0.0; geometry.n_sites()],
            tilt: vec![0.0; geometry.d()],
        }
    }

    /// Torus field with tilt `u` in the Hamiltonian.
    pub fn torus(geometry: Geometry, tilt: Vec<f64>) -> Result<Self> {
        if !geometry.is_torus() {
            return Err(Error::validation("geometry", "expected a torus"));
        }
        check_tilt(&geometry, &tilt)?;
        Ok(Field {
            geometry,
            heights: vec![0.0; geometry.n_sites()],
            tilt,
        })
    }

    /// Box field with every height set to `x·u`.
    pub fn tilted_box(geometry: Geometry, tilt: Vec<f64>) -> Result<Self> {
        if geometry.is_torus() {
            return Err(Error::validation("geometry", "expected a box"));
        }
        check_tilt(&geometry, &tilt)?;
        let heights = (0..geometry.n_sites())
            .map(|i| {
                geometry
                    .coords(i)
                    .iter()
                    .zip(&tilt)
                    .map(|(&c, u)| c as f64 * u)
                    .sum()
            })
            .collect();
        Ok(Field {
            geometry,
            heights,
            tilt,
        })
    }

    /// `φ(x + e_dir) - φ(x)`, the value of the directed bond leaving `x`.
    pub fn gradient(&self, site: usize, dir: isize) -> Result<f64> {
        if site >= self.heights.len() || dir == 0 || dir.unsigned_abs() > self.geometry.d() {
            return Err(Error::validation("bond", format!("no bond ({site}, {dir})")));
        }
        match self.geometry.neighbor(site, dir) {
            Some(y) => Ok(self.heights[y] - self.heights[site]),
            None => Err(Error::validation("bond", format!("bond ({site}, {dir}) leaves the box"))),
        }
    }

    /// Gradient plus the torus tilt, the argument of `U` in the tilted torus
    /// Hamiltonian. Equal to [`Field::gradient`] on a box.
    pub fn effective_gradient(&self, site: usize, dir: isize) -> Result<f64> {
        let g = self.gradient(site, dir)?;
        if self.geometry.is_torus() {
            let u = self.tilt[dir.unsigned_abs() - 1];
            Ok(g + if dir > 0 { u } else { -u })
        } else {
            Ok(g)
        }
    }

    /// Text dump: a commented header followed by one height per line.
    pub fn dump_text(&self, seed: u64, sweep: u64) -> String {
        let mut s = String::new();
        let (kind, d, n) = match self.geometry {
            Geometry::Torus { d, n } => ("torus", d, n),
            Geometry::Box { d, n } => ("box", d, n),
        };
        let _ = writeln!(s, "# gradlab field");
        let _ = writeln!(s, "# geometry {kind} d={d} n={n}");
        let tilt: Vec<String> = self.tilt.iter().map(|u| format!("{u:e}")).collect();
        let _ = writeln!(s, "# tilt {}", tilt.join(" "));
        let _ = writeln!(s, "# seed {seed}");
        let _ = writeln!(s, "# sweep {sweep}");
        for h in &self.heights {
            let _ = writeln!(s, "{h:e}");
        }
        s
    }

    /// Inverse of [`Field::dump_text`]; returns the field, seed and sweep.
    pub fn parse_dump(text: &str) -> Result<(Field, u64, u64)> {
        let bad = |m: &str| Error::validation("dump", m.to_string());
        let mut geometry = None;
        let mut tilt = Vec::new();
        let (mut seed, mut sweep) = (0, 0);
        let mut heights = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# ") {
                let mut parts = rest.split_whitespace();
                match parts.next() {
                    Some("geometry") => {
                        let kind = parts.next().ok_or_else(|| bad("geometry kind"))?;
                        let mut num = |p: &str| -> Result<usize> {
                            parts
                                .next()
                                .and_then(|t| t.strip_prefix(p))
                                .and_then(|t| t.parse().ok())
                                .ok_or_else(|| bad("geometry size"))
                        };
                        let d = num("d=")?;
                        let n = num("n=")?;
                        geometry = Some(match kind {
                            "torus" => Geometry::torus(d, n)?,
                            "box" => Geometry::boxed(d, n)?,
                            _ => return Err(bad("geometry kind")),
                        });
                    }
                    Some("tilt") => {
                        tilt = parts
                            .map(|t| t.parse::<f64>().map_err(|_| bad("tilt")))
                            .collect::<Result<_>>()?;
                    }
                    Some("seed") => seed = parts.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("seed"))?,
                    Some("sweep") => sweep = parts.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("sweep"))?,
                    _ => {}
                }
            } else if !line.trim().is_empty() {
                heights.push(line.trim().parse::<f64>().map_err(|_| bad("height"))?);
            }
        }
        let geometry = geometry.ok_or_else(|| bad("missing geometry"))?;
        if heights.len() != geometry.n_sites() || tilt.len() != geometry.d() {
            return Err(bad("size mismatch"));
        }
        Ok((
            Field {
                geometry,
                heights,
                tilt,
            },
            seed,
            sweep,
        ))
    }
}

fn check_tilt(geometry: &Geometry, tilt: &[f64]) -> Result<()> {
    if tilt.len() != geometry.d() || tilt.iter().any(|u| !u.is_finite()) {
        return Err(Error::validation("tilt", format!("need {} finite entries", geometry.d())));
    }
    Ok(())
}

/// Values on the positive bonds `(x, x + e_i)`; the reversed bond carries
/// the negated value. Bonds leaving a box are stored as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientConfig {
    pub geometry: Geometry,
    values: Vec<f64>,
}

impl GradientConfig {
    pub fn zeros(geometry: Geometry) -> Self {
        let d = geometry.d();
        let mut values = vec![0.0; geometry.n_sites() * d];
        for x in 0..geometry.n_sites() {
            for i in 0..d {
                if geometry.neighbor(x, i as isize + 1).is_none() {
                    values[x * d + i] = f64::NAN;
                }
            }
        }
        GradientConfig { geometry, values }
    }

    pub fn from_field(field: &Field) -> Self {
        let g = field.geometry;
        let d = g.d();
        let mut cfg = Self::zeros(g);
        for x in 0..g.n_sites() {
            for i in 0..d {
                if let Ok(v) = field.gradient(x, i as isize + 1) {
                    cfg.values[x * d + i] = v;
                }
            }
        }
        cfg
    }

    /// Value of the directed bond leaving `x` in direction `dir`.
    pub fn get(&self, x: usize, dir: isize) -> Option<f64> {
        let d = self.geometry.d();
        if dir > 0 {
            let v = self.values[x * d + dir as usize - 1];
            (!v.is_nan()).then_some(v)
        } else {
            let y = self.geometry.neighbor(x, dir)?;
            let v = self.values[y * d + (-dir) as usize - 1];
            (!v.is_nan()).then_some(-v)
        }
    }

    /// Sets the positive bond `(x, x + e_i)`, `i` in `1..=d`.
    pub fn set(&mut self, x: usize, i: usize, value: f64) -> Result<()> {
        let d = self.geometry.d();
        if i == 0 || i > d || self.geometry.neighbor(x, i as isize).is_none() {
            return Err(Error::validation("bond", format!("no bond ({x}, {i})")));
        }
        self.values[x * d + i - 1] = value;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaquetteReport {
    pub plaquettes: usize,
    pub max_defect: f64,
    /// Site and axis pair of the worst plaquette.
    pub worst: Option<(usize, usize, usize)>,
    /// Largest sum along a non-contractible line of the torus; zero on a box.
    pub winding_defect: f64,
}

impl PlaquetteReport {
    pub fn is_gradient(&self, tol: f64) -> bool {
        self.max_defect <= tol && self.winding_defect <= tol
    }
}

/// Sums `η` around every elementary plaquette.
pub fn validate_plaquette(config: &GradientConfig) -> PlaquetteReport {
    let g = &config.geometry;
    let d = g.d();
    let mut count = 0;
    let mut max_defect: f64 = 0.0;
    let mut worst = None;
    for x in 0..g.n_sites() {
        for i in 1..=d {
            for j in (i + 1)..=d {
                let (ii, jj) = (i as isize, j as isize);
                let (Some(xi), Some(xj)) = (g.neighbor(x, ii), g.neighbor(x, jj)) else {
                    continue;
                };
                let parts = [
                    config.get(x, ii),
                    config.get(xi, jj),
                    config.get(xj, ii),
                    config.get(x, jj),
                ];
                let [Some(a), Some(b), Some(c), Some(e)] = parts else { continue };
                count += 1;
                let defect = (a + b - c - e).abs();
                if defect > max_defect {
                    max_defect = defect;
                    worst = Some((x, i, j));
                }
            }
        }
    }
    let mut winding: f64 = 0.0;
    if g.is_torus() {
        for i in 1..=d {
            for x in 0..g.n_sites() {
                if g.coords(x)[i - 1] != 0 {
                    continue;
                }
                let mut s = 0.0;
                let mut y = x;
                for _ in 0..g.n() {
                    s += config.get(y, i as isize).unwrap_or(0.0);
                    y = g.neighbor(y, i as isize).expect("torus");
                }
                winding = winding.max(s.abs());
            }
        }
    }
    PlaquetteReport {
        plaquettes: count,
        max_defect,
        worst,
        winding_defect: winding,
    }
}

/// Value of the even bond `x -> y` composed from the two odd-site bonds
/// through the first intermediate site found.
pub fn even_bond_value(config: &GradientConfig, x: usize, y: usize) -> Option<f64> {
    let g = &config.geometry;
    for a in g.directions() {
        let Some(m) = g.neighbor(x, a) else { continue };
        for b in g.directions() {
            if g.neighbor(m, b) == Some(y) && b != -a {
                return Some(config.get(x, a)? + config.get(m, b)?);
            }
        }
    }
    None
}

/// Largest sum of composed even-bond values around triangles of the even
/// sublattice `x -> y -> z -> x`.
pub fn even_cycle_defect(config: &GradientConfig) -> f64 {
    let g = &config.geometry;
    let mut worst: f64 = 0.0;
    for x in g.sites_of(Parity::Even) {
        let nx = even_neighbors(g, x);
        for &y in &nx {
            for z in even_neighbors(g, y) {
                if z == x || !nx.contains(&z) {
                    continue;
                }
                let (Some(a), Some(b), Some(c)) = (
                    even_bond_value(config, x, y),
                    even_bond_value(config, y, z),
                    even_bond_value(config, z, x),
                ) else {
                    continue;
                };
                worst = worst.max((a + b + c).abs());
            }
        }
    }
    worst
}

/// How [`heights_from_gradients`] chooses the chains from the base site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathStrategy {
    /// Breadth-first tree exploring directions in increasing order.
    BreadthFirst,
    /// Spanning tree grown from randomly shuffled neighbour lists.
    Random { seed: u64 },
}

/// Heights `φ(x) = base + Σ_{b∈C_{0,x}} η(b)` along the chains of a
/// spanning tree rooted at site 0. The config must satisfy the plaquette
/// condition, and on a torus have zero winding sums.
pub fn heights_from_gradients(
    config: &GradientConfig,
    base: f64,
    strategy: PathStrategy,
) -> Result<Field> {
    let report = validate_plaquette(config);
    let scale = config
        .values
        .iter()
        .filter(|v| !v.is_nan())
        .fold(1.0f64, |m, v| m.max(v.abs()));
    if !report.is_gradient(1e-9 * scale) {
        return Err(Error::validation(
            "gradients",
            format!(
                "not a gradient field: plaquette defect {:e}, winding defect {:e}",
                report.max_defect, report.winding_defect
            ),
        ));
    }
    let g = config.geometry;
    let mut heights = vec![f64::NAN; g.n_sites()];
    heights[0] = base;
    let mut queue = VecDeque::from([0usize]);
    let mut dirs = g.directions();
    let mut rng = match strategy {
        PathStrategy::Random { seed } => Some(stream(seed, Domain::Init, 0)),
        PathStrategy::BreadthFirst => None,
    };
    loop {
        // Random order pops from either end of the queue.
        let back = rng.as_mut().is_some_and(|r| rand::Rng::gen_bool(r, 0.5));
        let next = if back { queue.pop_back() } else { queue.pop_front() };
        let Some(x) = next else { break };
        if let Some(r) = rng.as_mut() {
            dirs.shuffle(r);
        }
        for &dir in &dirs {
            let Some(y) = g.neighbor(x, dir) else { continue };
            if heights[y].is_nan() {
                if let Some(v) = config.get(x, dir) {
                    heights[y] = heights[x] + v;
                    queue.push_back(y);
                }
            }
        }
    }
    if heights.iter().any(|h| h.is_nan()) {
        return Err(Error::validation("gradients", "bond graph is not connected"));
    }
    Ok(Field {
        geometry: g,
        heights,
        tilt: vec![0.0; g.d()],
    })
}

/// Replaces the interior of a box field by the discrete harmonic extension
/// of its boundary heights (Gauss–Seidel until the update is below `tol`).
pub fn harmonic_fill(field: &mut Field, tol: f64) -> Result<usize> {
    let g = field.geometry;
    if g.is_torus() {
        return Err(Error::validation("geometry", "harmonic fill needs a box"));
    }
    let interior: Vec<usize> = (0..g.n_sites()).filter(|&i| !g.is_boundary(i)).collect();
    let dirs = g.directions();
    for sweep in 0..1_000_000 {
        let mut change: f64 = 0.0;
        for &x in &interior {
            let avg = dirs
                .iter()
                .map(|&k| field.heights[g.neighbor(x, k).expect("interior")])
                .sum::<f64>()
                / dirs.len() as f64;
            change = change.max((avg - field.heights[x]).abs());
            field.heights[x] = avg;
        }
        if change <= tol {
            return Ok(sweep + 1);
        }
    }
    Err(Error::Integration {
        stage: "harmonic_fill",
        requested: tol,
        achieved: f64::NAN,
    })
}
