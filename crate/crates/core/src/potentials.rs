//! Symmetric nearest-neighbour potentials `U = V + g` and numerical checks of
//! the smallness assumptions on the non-convex part `g`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{integrate_adaptive, KahanSum};

/// A real function together with its first two derivatives.
pub trait Profile: Send + Sync {
    /// Value (`order = 0`), first or second derivative at `x`.
    fn eval(&self, x: f64, order: u8) -> f64;
}

impl<F> Profile for F
where
    F: Fn(f64, u8) -> f64 + Send + Sync,
{
    fn eval(&self, x: f64, order: u8) -> f64 {
        self(x, order)
    }
}

/// Built-in potential families plus a user supplied split.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kind {
    /// `k η² / 2`.
    Quadratic { k: f64 },
    /// `k η² / 2 + eps (1 - cos η)` with `|eps| < k`, strictly convex.
    Cosine { k: f64, eps: f64 },
    /// `-log(p e^{-k1 η²/2} + (1-p) e^{-k2 η²/2})`.
    GaussianMixture { p: f64, k1: f64, k2: f64 },
    /// `η² + a - log(η² + a)`, a double well for `0 < a < 1`.
    LogWell { a: f64 },
    /// `V + g` from an explicit decomposition. Not serializable.
    #[serde(skip)]
    Custom(Decomposition),
}

/// Serialized flat as `{"kind": "log_well", "a": 0.25, "beta": 0.005}`.
/// Parsing rejects unknown keys and validates the parameters.
#[derive(Clone, Debug, Deserialize)]
#[serde(try_from = "Repr")]
pub struct Potential {
    pub kind: Kind,
    pub beta: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Repr {
    Quadratic { k: f64, beta: f64 },
    Cosine { k: f64, eps: f64, beta: f64 },
    GaussianMixture { p: f64, k1: f64, k2: f64, beta: f64 },
    LogWell { a: f64, beta: f64 },
}

impl TryFrom<Repr> for Potential {
    type Error = Error;

    fn try_from(r: Repr) -> Result<Self> {
        match r {
            Repr::Quadratic { k, beta } => Potential::quadratic(k, beta),
            Repr::Cosine { k, eps, beta } => Potential::cosine(k, eps, beta),
            Repr::GaussianMixture { p, k1, k2, beta } => Potential::gaussian_mixture(p, k1, k2, beta),
            Repr::LogWell { a, beta } => Potential::log_well(a, beta),
        }
    }
}

impl Serialize for Potential {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let beta = self.beta;
        let r = match self.kind {
            Kind::Quadratic { k } => Repr::Quadratic { k, beta },
            Kind::Cosine { k, eps } => Repr::Cosine { k, eps, beta },
            Kind::GaussianMixture { p, k1, k2 } => Repr::GaussianMixture { p, k1, k2, beta },
            Kind::LogWell { a } => Repr::LogWell { a, beta },
            Kind::Custom(_) => return Err(serde::ser::Error::custom("custom potentials are not serializable")),
        };
        r.serialize(s)
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::validation(key, format!("must be positive and finite, got {v}")))
    }
}

impl Potential {
    pub fn new(kind: Kind, beta: f64) -> Result<Self> {
        let p = Potential { kind, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn quadratic(k: f64, beta: f64) -> Result<Self> {
        Self::new(Kind::Quadratic { k }, beta)
    }

    pub fn cosine(k: f64, eps: f64, beta: f64) -> Result<Self> {
        Self::new(Kind::Cosine { k, eps }, beta)
    }

    pub fn gaussian_mixture(p: f64, k1: f64, k2: f64, beta: f64) -> Result<Self> {
        Self::new(Kind::GaussianMixture { p, k1, k2 }, beta)
    }

    pub fn log_well(a: f64, beta: f64) -> Result<Self> {
        Self::new(Kind::LogWell { a }, beta)
    }

    pub fn custom(decomposition: Decomposition, beta: f64) -> Result<Self> {
        Self::new(Kind::Custom(decomposition), beta)
    }

    pub fn validate(&self) -> Result<()> {
        positive("beta", self.beta)?;
        match &self.kind {
            Kind::Quadratic { k } => positive("k", *k),
            Kind::Cosine { k, eps } => {
                positive("k", *k)?;
                if !(eps.is_finite() && eps.abs() < *k) {
                    return Err(Error::validation("eps", "need |eps| < k for strict convexity"));
                }
                Ok(())
            }
            Kind::GaussianMixture { p, k1, k2 } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::validation("p", format!("must lie in [0, 1], got {p}")));
                }
                positive("k2", *k2)?;
                positive("k1", *k1)?;
                if k2 >= k1 {
                    return Err(Error::validation("k2", "need 0 < k2 < k1"));
                }
                Ok(())
            }
            Kind::LogWell { a } => {
                if !(a.is_finite() && *a > 0.0 && *a < 1.0) {
                    return Err(Error::validation("a", format!("must lie in (0, 1), got {a}")));
                }
                Ok(())
            }
            Kind::Custom(dec) => dec.validate_constants(),
        }
    }

    /// `U`, `U'` or `U''` at `eta` without domain checks.
    #[inline]
    pub fn value(&self, eta: f64, order: u8) -> f64 {
        match &self.kind {
            Kind::Quadratic { k } => match order {
                0 => 0.5 * k * eta * eta,
                1 => k * eta,
                _ => *k,
            },
            Kind::Cosine { k, eps } => match order {
                0 => 0.5 * k * eta * eta + eps * (1.0 - eta.cos()),
                1 => k * eta + eps * eta.sin(),
                _ => k + eps * eta.cos(),
            },
            Kind::GaussianMixture { p, k1, k2 } => mixture_value(*p, *k1, *k2, eta, order),
            Kind::LogWell { a } => {
                let y = eta * eta + a;
                match order {
                    0 => y - y.ln(),
                    1 => 2.0 * eta - 2.0 * eta / y,
                    _ => 2.0 + 2.0 * (eta * eta - a) / (y * y),
                }
            }
            Kind::Custom(dec) => dec.v.eval(eta, order) + dec.g.eval(eta, order),
        }
    }

    /// Checked evaluation of `U` (`order = 0`), `U'` or `U''`.
    pub fn eval(&self, eta: f64, order: u8) -> Result<f64> {
        if order > 2 {
            return Err(Error::validation("order", "must be 0, 1 or 2"));
        }
        if !eta.is_finite() {
            return Err(Error::Domain { what: "potential argument", eta });
        }
        let v = self.value(eta, order);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Domain { what: "potential", eta })
        }
    }

    /// Constants `(A, B)` with `U(η) >= A η² - B`.
    pub fn growth(&self) -> (f64, f64) {
        match &self.kind {
            Kind::Quadratic { k } => (0.5 * k, 0.0),
            Kind::Cosine { k, eps } => (0.5 * k, if *eps < 0.0 { 2.0 * eps.abs() } else { 0.0 }),
            Kind::GaussianMixture { k2, .. } => (0.5 * k2, 0.0),
            // -log y >= 1 - ln 2 - y/2, hence U >= (η² + a)/2 + 1 - ln 2.
            Kind::LogWell { .. } => (0.5, 0.0),
            Kind::Custom(dec) => (dec.a, dec.b),
        }
    }

    /// A decomposition `U = V + g` satisfying the curvature assumptions.
    pub fn decomposition(&self) -> Result<Decomposition> {
        let (a, b) = self.growth();
        match &self.kind {
            Kind::Quadratic { k } => {
                let k = *k;
                Ok(Decomposition::convex(
                    Arc::new(move |x: f64, o: u8| match o {
                        0 => 0.5 * k * x * x,
                        1 => k * x,
                        _ => k,
                    }),
                    (a, b),
                    k,
                    k,
                ))
            }
            Kind::Cosine { k, eps } => {
                let (k, eps) = (*k, *eps);
                Ok(Decomposition::convex(
                    Arc::new(move |x: f64, o: u8| match o {
                        0 => 0.5 * k * x * x + eps * (1.0 - x.cos()),
                        1 => k * x + eps * x.sin(),
                        _ => k + eps * x.cos(),
                    }),
                    (a, b),
                    k - eps.abs(),
                    k + eps.abs(),
                ))
            }
            Kind::GaussianMixture { p, k1, k2 } => Ok(mixture_decomposition(*p, *k1, *k2)),
            Kind::LogWell { a: aw } => {
                let aw = *aw;
                let y = Arc::new(move |x: f64, o: u8| match o {
                    0 => x * x + aw,
                    1 => 2.0 * x,
                    _ => 2.0,
                });
                let h = Arc::new(move |x: f64, o: u8| {
                    let y = x * x + aw;
                    match o {
                        0 => -y.ln(),
                        1 => -2.0 * x / y,
                        _ => 2.0 * (x * x - aw) / (y * y),
                    }
                });
                let r = aw.sqrt();
                split_compact_support(y, h, &[(-r, r)], (a, b))
            }
            Kind::Custom(dec) => Ok(dec.clone()),
        }
    }

    /// Same potential at a different inverse temperature.
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Self::new(self.kind.clone(), beta)
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            Kind::Quadratic { .. } => "quadratic",
            Kind::Cosine { .. } => "cosine",
            Kind::GaussianMixture { .. } => "gaussian_mixture",
            Kind::LogWell { .. } => "log_well",
            Kind::Custom(_) => "custom",
        }
    }
}

/// Responsibility of the stiff component `k1` at `eta`.
fn mixture_weight(p: f64, k1: f64, k2: f64, eta: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let logit = (p / (1.0 - p)).ln() - 0.5 * (k1 - k2) * eta * eta;
    1.0 / (1.0 + (-logit).exp())
}

fn mixture_value(p: f64, k1: f64, k2: f64, eta: f64, order: u8) -> f64 {
    let e2 = eta * eta;
    match order {
        0 => {
            // -log((1-p) e^{-b} + p e^{-a}) with a >= b.
            let (a, b) = (0.5 * k1 * e2, 0.5 * k2 * e2);
            if p <= 0.0 {
                b
            } else if p >= 1.0 {
                a
            } else {
                b - ((1.0 - p) + p * (-(a - b)).exp()).ln()
            }
        }
        1 => {
            let w = mixture_weight(p, k1, k2, eta);
            eta * (w * k1 + (1.0 - w) * k2)
        }
        _ => {
            let w = mixture_weight(p, k1, k2, eta);
            w * k1 + (1.0 - w) * k2 - e2 * w * (1.0 - w) * (k1 - k2) * (k1 - k2)
        }
    }
}

/// The mixture's `g`: `g'' = -η² Var_w(k)`, `g(0) = g'(0) = 0`.
struct MixtureG {
    p: f64,
    k1: f64,
    k2: f64,
    /// Beyond this radius `g''` is below double precision.
    cutoff: f64,
}

impl MixtureG {
    fn gpp(&self, t: f64) -> f64 {
        let w = mixture_weight(self.p, self.k1, self.k2, t);
        -t * t * w * (1.0 - w) * (self.k1 - self.k2).powi(2)
    }

    /// `(∫_0^s g'', ∫_0^s t g''(t) dt)` for `s >= 0`.
    fn moments(&self, s: f64) -> (f64, f64) {
        let top = s.min(self.cutoff);
        if top <= 0.0 {
            return (0.0, 0.0);
        }
        let f = |t: f64, out: &mut [f64]| {
            let v = self.gpp(t);
            out[0] = v;
            out[1] = t * v;
        };
        let mesh: Vec<f64> = (0..=64).map(|i| top * i as f64 / 64.0).collect();
        match integrate_adaptive(&f, 2, &mesh, 1e-13, "mixture g") {
            Ok(r) => (r.values[0], r.values[1]),
            Err(_) => (f64::NAN, f64::NAN),
        }
    }
}

impl Profile for MixtureG {
    fn eval(&self, x: f64, order: u8) -> f64 {
        match order {
            2 => self.gpp(x),
            1 => {
                let (m0, _) = self.moments(x.abs());
                m0 * x.signum()
            }
            _ => {
                let s = x.abs();
                let (m0, m1) = self.moments(s);
                s * m0 - m1
            }
        }
    }
}

fn mixture_decomposition(p: f64, k1: f64, k2: f64) -> Decomposition {
    let delta = k1 - k2;
    // w(1-w) <= e^{-Δη²/2} p/(1-p); beyond Δη²/2 = 800 this underflows.
    let odds = if p > 0.0 && p < 1.0 { (p / (1.0 - p)).ln().max(0.0) } else { 0.0 };
    let cutoff = ((1600.0 + 2.0 * odds) / delta).sqrt() + 1.0;
    let g = Arc::new(MixtureG { p, k1, k2, cutoff });
    let gv = g.clone();
    let v = Arc::new(move |x: f64, o: u8| mixture_value(p, k1, k2, x, o) - gv.eval(x, o));
    let gpp_min = scan_extrema(&|x| g.gpp(x), cutoff, 20_001).0;
    let nontrivial = p > 0.0 && p < 1.0;
    Decomposition {
        v,
        g,
        a: 0.5 * k2,
        b: 0.0,
        c0: if nontrivial { -gpp_min } else { 0.0 },
        c1: k2,
        c2: p * k1 + (1.0 - p) * k2,
        breakpoints: Vec::new(),
        g_vanishes: !nontrivial,
    }
}

/// `(min, max)` of `f` on a uniform grid over `[-r, r]`.
fn scan_extrema(f: &dyn Fn(f64) -> f64, r: f64, n: usize) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let x = -r + 2.0 * r * i as f64 / (n - 1) as f64;
        let v = f(x);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// `U = V + g` with `C1 <= V'' <= C2`, `-C0 <= g'' <= 0` and
/// `U(η) >= A η² - B`.
#[derive(Clone)]
pub struct Decomposition {
    pub v: Arc<dyn Profile>,
    pub g: Arc<dyn Profile>,
    pub a: f64,
    pub b: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// Points where `g''` may fail to be smooth (ends of its support).
    pub breakpoints: Vec<f64>,
    /// Set when `g` is known to vanish identically.
    pub g_vanishes: bool,
}

impl fmt::Debug for Decomposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Decomposition")
            .field("a", &self.a)
            .field("b", &self.b)
            .field("c0", &self.c0)
            .field("c1", &self.c1)
            .field("c2", &self.c2)
            .field("breakpoints", &self.breakpoints)
            .finish()
    }
}

impl Decomposition {
    /// Strictly convex case `g ≡ 0`.
    pub fn convex(v: Arc<dyn Profile>, growth: (f64, f64), c1: f64, c2: f64) -> Self {
        Decomposition {
            v,
            g: Arc::new(|_: f64, _: u8| 0.0),
            a: growth.0,
            b: growth.1,
            c0: 0.0,
            c1,
            c2,
            breakpoints: Vec::new(),
            g_vanishes: true,
        }
    }

    /// A user supplied split with declared constants. The constants are
    /// verified by [`check_conditions`], not derived.
    #[allow(clippy::too_many_arguments)]
    pub fn custom(
        v: Arc<dyn Profile>,
        g: Arc<dyn Profile>,
        growth: (f64, f64),
        c0: f64,
        c1: f64,
        c2: f64,
        breakpoints: Vec<f64>,
    ) -> Result<Self> {
        let d = Decomposition {
            v,
            g,
            a: growth.0,
            b: growth.1,
            c0,
            c1,
            c2,
            breakpoints,
            g_vanishes: false,
        };
        d.validate_constants()?;
        Ok(d)
    }

    fn validate_constants(&self) -> Result<()> {
        positive("A", self.a)?;
        positive("C1", self.c1)?;
        positive("C2", self.c2)?;
        if !(self.b.is_finite() && self.b >= 0.0) {
            return Err(Error::validation("B", "must be finite and nonnegative"));
        }
        if !(self.c0.is_finite() && self.c0 >= 0.0) {
            return Err(Error::validation("C0", "must be finite and nonnegative"));
        }
        if self.c1 > self.c2 {
            return Err(Error::validation("C1", "need C1 <= C2"));
        }
        Ok(())
    }

    /// Radius of the grid used for pointwise checks.
    pub fn sample_radius(&self) -> f64 {
        let edge = self.breakpoints.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        (10.0 / self.a.sqrt()).max(4.0 * edge)
    }
}

/// Splits `U = Y + h` where `h'' <= 0` exactly on the given intervals into
/// `g`, equal to `h` up to an affine term on each interval and affine
/// between and outside them, and `V = U - g`.
///
/// `growth` is the pair `(A, B)` for `U = Y + h`. `C0`, `C1`, `C2` are
/// measured on a grid.
pub fn split_compact_support(
    y: Arc<dyn Profile>,
    h: Arc<dyn Profile>,
    intervals: &[(f64, f64)],
    growth: (f64, f64),
) -> Result<Decomposition> {
    let mut iv: Vec<(f64, f64)> = intervals.to_vec();
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (k, &(lo, hi)) in iv.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::validation("support", format!("bad interval [{lo}, {hi}]")));
        }
        if k > 0 && lo < iv[k - 1].1 {
            return Err(Error::validation("support", "intervals overlap"));
        }
    }
    let scale = |x: f64| 1e-8 * (1.0 + h.eval(x, 2).abs().max(1.0));
    for &(lo, hi) in &iv {
        for x in [lo, hi] {
            if h.eval(x, 2).abs() > scale(x) {
                return Err(Error::Decomposition {
                    message: "h'' must vanish at the ends of the support".into(),
                    witness: x,
                });
            }
        }
        let n = 2001;
        for i in 1..n - 1 {
            let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            if h.eval(x, 2) > 1e-12 {
                return Err(Error::Decomposition {
                    message: "h'' is positive inside the support".into(),
                    witness: x,
                });
            }
        }
    }

    // Affine corrections so g is C¹: on interval k, g = h + c_k + d_k s.
    let mut corr = Vec::with_capacity(iv.len());
    let (mut c, mut d) = (0.0, 0.0);
    for (k, &(lo, _)) in iv.iter().enumerate() {
        if k > 0 {
            let (plo, phi) = iv[k - 1];
            let _ = plo;
            let (pc, pd) = corr[k - 1];
            let gb = h.eval(phi, 0) + pc + pd * phi;
            let gpb = h.eval(phi, 1) + pd;
            d = gpb - h.eval(lo, 1);
            c = gb + gpb * (lo - phi) - h.eval(lo, 0) - d * lo;
        }
        corr.push((c, d));
    }
    let iv_g = iv.clone();
    let h_g = h.clone();
    let g = Arc::new(move |s: f64, o: u8| -> f64 {
        if iv_g.is_empty() {
            return 0.0;
        }
        // Anchor: the interval containing s, else the closest one to the left,
        // else the first interval's left end.
        let mut anchor = None;
        for (k, &(lo, hi)) in iv_g.iter().enumerate() {
            if s >= lo && s <= hi {
                let (c, d) = corr[k];
                return match o {
                    0 => h_g.eval(s, 0) + c + d * s,
                    1 => h_g.eval(s, 1) + d,
                    _ => h_g.eval(s, 2),
                };
            }
            if s > hi {
                anchor = Some((k, hi));
            }
        }
        let (k, x0) = anchor.unwrap_or((0, iv_g[0].0));
        let (c, d) = corr[k];
        let g0 = h_g.eval(x0, 0) + c + d * x0;
        let g1 = h_g.eval(x0, 1) + d;
        match o {
            0 => g0 + g1 * (s - x0),
            1 => g1,
            _ => 0.0,
        }
    });
    let (yv, hv, gv) = (y.clone(), h.clone(), g.clone());
    let v = Arc::new(move |s: f64, o: u8| yv.eval(s, o) + hv.eval(s, o) - gv.eval(s, o));
    let breakpoints: Vec<f64> = iv.iter().flat_map(|&(a, b)| [a, b]).collect();
    let mut dec = Decomposition {
        v: v.clone(),
        g: g.clone(),
        a: growth.0,
        b: growth.1,
        c0: 0.0,
        c1: 1.0,
        c2: 1.0,
        breakpoints,
        g_vanishes: iv.is_empty(),
    };
    let r = dec.sample_radius();
    let (c1, c2) = scan_extrema(&|x| v.eval(x, 2), r, 20_001);
    let (gmin, _) = scan_extrema(&|x| g.eval(x, 2), r, 20_001);
    dec.c0 = (-gmin).max(0.0);
    dec.c1 = c1;
    dec.c2 = c2;
    dec.validate_constants()?;
    Ok(dec)
}

/// Outcome of [`check_conditions`]. Margins are right-hand side minus
/// left-hand side, so a positive margin means the inequality holds.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub d: usize,
    pub q: f64,
    pub beta: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub a0_holds: bool,
    pub a0_witness: Option<f64>,
    pub a1_holds: bool,
    pub a1_witness: Option<f64>,
    pub gpp_lq_norm: f64,
    /// `+inf` when `g'` does not decay, which is the case for every
    /// nontrivial symmetric `g` with `g'' <= 0`.
    pub gp_l2_norm: f64,
    pub a2_margin: f64,
    pub a3_margin: f64,
    /// Largest β for which the `L^q` smallness condition holds.
    pub a2_beta_threshold: f64,
    /// Closed-form threshold quoted in the literature for the log-well
    /// example, for comparison with `a2_beta_threshold`.
    pub reference_beta_threshold: Option<f64>,
}

const CHECK_GRID: usize = 10_001;

/// Right-hand side of the `L^q` smallness condition.
pub fn a2_rhs(c1: f64, c2: f64, q: f64, d: usize) -> f64 {
    c1.powf(1.5) / (2.0 * c2.powf((q + 1.0) / (2.0 * q)) * (2.0 * d as f64).powf(1.0 / (2.0 * q)))
}

/// Right-hand side of the `L²` condition on `g'`.
pub fn a3_rhs(c1: f64, c2: f64, d: usize) -> f64 {
    c1.powf(1.5) / (2.0 * c2.powf(1.25) * (2.0 * d as f64).powf(0.75))
}

/// `(∫ |f|^q)^{1/q}` over the line, growing the window until the outermost
/// shell adds less than `tol` relative. Returns `+inf` when the shells stop
/// shrinking, which happens when `f` tends to a nonzero constant.
fn lq_norm(f: &dyn Fn(f64) -> f64, q: f64, breaks: &[f64], r0: f64, tol: f64) -> Result<f64> {
    let integrand = |x: f64, out: &mut [f64]| out[0] = f(x).abs().powf(q);
    let piece = |lo: f64, hi: f64| -> Result<f64> {
        let mut mesh: Vec<f64> = (0..=32).map(|i| lo + (hi - lo) * i as f64 / 32.0).collect();
        mesh.extend(breaks.iter().copied().filter(|b| *b > lo && *b < hi));
        mesh.sort_by(f64::total_cmp);
        mesh.dedup();
        Ok(integrate_adaptive(&integrand, 1, &mesh, 0.1 * tol, "lq_norm")?.values[0])
    };
    let mut r = r0;
    let mut total = KahanSum::default();
    total.add(piece(-r, r)?);
    let mut last_shell = f64::INFINITY;
    for _ in 0..40 {
        let shell = piece(r, 2.0 * r)? + piece(-2.0 * r, -r)?;
        total.add(shell);
        if shell <= tol * total.value() {
            return Ok(total.value().powf(1.0 / q));
        }
        // A non-decaying tail doubles the shell mass at every step.
        if shell >= 1.5 * last_shell && r > 1e3 * r0 {
            return Ok(f64::INFINITY);
        }
        last_shell = shell;
        r *= 2.0;
    }
    Ok(f64::INFINITY)
}

/// `‖g''‖_{L^q}` over the line.
pub fn gpp_lq_norm(decomposition: &Decomposition, q: f64, tol: f64) -> Result<f64> {
    if decomposition.g_vanishes {
        return Ok(0.0);
    }
    let g2 = |x: f64| decomposition.g.eval(x, 2);
    lq_norm(&g2, q, &decomposition.breakpoints, norm_radius(decomposition), tol)
}

fn norm_radius(dec: &Decomposition) -> f64 {
    (4.0f64).max(2.0 * dec.breakpoints.iter().fold(0.0f64, |m, x| m.max(x.abs())))
}

/// Checks growth, curvature bounds and both smallness conditions for a
/// decomposition of `potential` in dimension `d`.
pub fn check_conditions(
    potential: &Potential,
    decomposition: &Decomposition,
    q: f64,
    quad_tol: f64,
    d: usize,
) -> Result<ConditionReport> {
    if !(q >= 1.0 && q.is_finite()) {
        return Err(Error::validation("q", "must be a finite real >= 1"));
    }
    if !(quad_tol > 0.0) {
        return Err(Error::validation("quad_tol", "must be positive"));
    }
    if d == 0 {
        return Err(Error::validation("d", "must be at least 1"));
    }
    let dec = decomposition;
    let r = dec.sample_radius();
    let grid = |i: usize| -r + 2.0 * r * i as f64 / (CHECK_GRID - 1) as f64;

    // The decomposition must reproduce U.
    for i in (0..CHECK_GRID).step_by(97) {
        let x = grid(i);
        let u = potential.value(x, 0);
        let s = dec.v.eval(x, 0) + dec.g.eval(x, 0);
        if (u - s).abs() > 1e-8 * (1.0 + u.abs()) {
            return Err(Error::Decomposition {
                message: "V + g does not reproduce U".into(),
                witness: x,
            });
        }
    }

    let mut a0_witness = None;
    let mut a1_witness = None;
    for i in 0..CHECK_GRID {
        let x = grid(i);
        let u = potential.value(x, 0);
        let slack = 1e-10 * (1.0 + u.abs());
        if a0_witness.is_none() && u < dec.a * x * x - dec.b - slack {
            a0_witness = Some(x);
        }
        let vpp = dec.v.eval(x, 2);
        let gpp = dec.g.eval(x, 2);
        let tol1 = 1e-9 * (1.0 + dec.c2.max(dec.c0));
        let ok = vpp >= dec.c1 - tol1 && vpp <= dec.c2 + tol1 && gpp <= tol1 && gpp >= -dec.c0 - tol1;
        if a1_witness.is_none() && !ok {
            a1_witness = Some(x);
        }
    }

    let gpp_norm = gpp_lq_norm(dec, q, quad_tol)?;
    let gp_norm = if dec.g_vanishes {
        0.0
    } else {
        let g1 = |x: f64| dec.g.eval(x, 1);
        lq_norm(&g1, 2.0, &dec.breakpoints, norm_radius(dec), quad_tol)?
    };
    let beta = potential.beta;
    let rhs2 = a2_rhs(dec.c1, dec.c2, q, d);
    let rhs3 = a3_rhs(dec.c1, dec.c2, d);
    let a2_margin = rhs2 - beta.powf(1.0 / (2.0 * q)) * gpp_norm;
    let a3_margin = if gp_norm.is_finite() {
        rhs3 - beta.powf(0.75) * gp_norm
    } else {
        f64::NEG_INFINITY
    };
    let a2_beta_threshold = if gpp_norm > 0.0 {
        (rhs2 / gpp_norm).powf(2.0 * q)
    } else {
        f64::INFINITY
    };
    let reference_beta_threshold = match potential.kind {
        Kind::LogWell { a } => {
            let c2 = 2.0 + 2.0 / (25.0 * a);
            Some(a / (4.0 * 2f64.sqrt() * d as f64 * c2 * c2))
        }
        _ => None,
    };
    Ok(ConditionReport {
        d,
        q,
        beta,
        c0: dec.c0,
        c1: dec.c1,
        c2: dec.c2,
        a0_holds: a0_witness.is_none(),
        a0_witness,
        a1_holds: a1_witness.is_none(),
        a1_witness,
        gpp_lq_norm: gpp_norm,
        gp_l2_norm: gp_norm,
        a2_margin,
        a3_margin,
        a2_beta_threshold,
        reference_beta_threshold,
    })
}

/// Rescaled potential `Ũ(s) = βU(s/√(βC1))` at `β̃ = 1`, its decomposition
/// with `C̃1 = 1`, and the offset `-log(βC1)/2` relating the decimated
/// potentials: `F̃(√(βC1)·ψ) = offset + F(ψ)`.
pub fn rescale_to_unit(
    potential: &Potential,
    decomposition: &Decomposition,
) -> Result<(Potential, Decomposition, f64)> {
    let beta = potential.beta;
    positive("beta", beta)?;
    positive("C1", decomposition.c1)?;
    let c1 = decomposition.c1;
    let lam = (beta * c1).sqrt();
    let offset = -0.5 * (beta * c1).ln();
    let scaled = |p: Arc<dyn Profile>| -> Arc<dyn Profile> {
        if (lam - 1.0).abs() == 0.0 && beta == 1.0 {
            return p;
        }
        Arc::new(move |s: f64, o: u8| {
            let x = s / lam;
            let f = beta * p.eval(x, o);
            match o {
                0 => f,
                1 => f / lam,
                _ => f / (lam * lam),
            }
        })
    };
    let dec = Decomposition {
        v: scaled(decomposition.v.clone()),
        g: scaled(decomposition.g.clone()),
        a: decomposition.a / c1,
        b: beta * decomposition.b,
        c0: decomposition.c0 / c1,
        c1: 1.0,
        c2: decomposition.c2 / c1,
        breakpoints: decomposition.breakpoints.iter().map(|x| x * lam).collect(),
        g_vanishes: decomposition.g_vanishes,
    };
    let pot = Potential::custom(dec.clone(), 1.0)?;
    Ok((pot, dec, offset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn builtins() -> Vec<Potential> {
        vec![
            Potential::quadratic(1.0, 1.0).unwrap(),
            Potential::cosine(1.0, 0.5, 1.0).unwrap(),
            Potential::cosine(2.0, -1.0, 0.5).unwrap(),
            Potential::gaussian_mixture(0.1, 40.0, 1.0, 1.0).unwrap(),
            Potential::log_well(0.25, 0.005).unwrap(),
        ]
    }

    #[test]
    fn quadratic_zero() {
        let p = Potential::quadratic(1.0, 1.0).unwrap();
        assert_eq!(p.eval(0.0, 0).unwrap(), 0.0);
    }

    #[test]
    fn log_well_curvature_vanishes_at_edge() {
        let p = Potential::log_well(0.25, 1.0).unwrap();
        let dec = p.decomposition().unwrap();
        // U'' = 2 + h'' and h''(±√a) = 0.
        assert!((p.eval(0.5, 2).unwrap() - 2.0).abs() < 1e-14);
        assert!(dec.g.eval(0.5, 2).abs() < 1e-14);
    }

    #[test]
    fn mixture_degenerate_limits() {
        let p0 = Potential::gaussian_mixture(0.0, 40.0, 1.0, 1.0).unwrap();
        let p1 = Potential::gaussian_mixture(1.0, 40.0, 1.0, 1.0).unwrap();
        for x in [-3.0, -0.2, 0.0, 0.7, 5.0] {
            assert_eq!(p0.eval(x, 2).unwrap(), 1.0);
            assert_eq!(p1.eval(x, 2).unwrap(), 40.0);
        }
    }

    #[test]
    fn mixture_derivatives_match_finite_differences() {
        let p = Potential::gaussian_mixture(0.3, 40.0, 1.0, 1.0).unwrap();
        let h = 1e-5;
        for x in [-1.0, -0.3, 0.05, 0.4, 2.0] {
            let d1 = (p.value(x + h, 0) - p.value(x - h, 0)) / (2.0 * h);
            let d2 = (p.value(x + h, 1) - p.value(x - h, 1)) / (2.0 * h);
            assert!((d1 - p.value(x, 1)).abs() < 1e-7, "U' at {x}");
            assert!((d2 - p.value(x, 2)).abs() < 1e-6, "U'' at {x}");
        }
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        assert!(Potential::gaussian_mixture(1.5, 2.0, 1.0, 1.0).unwrap_err().is_validation());
        assert!(Potential::gaussian_mixture(0.5, 1.0, 2.0, 1.0).is_err());
        assert!(Potential::log_well(1.0, 1.0).is_err());
        assert!(Potential::cosine(1.0, 1.0, 1.0).is_err());
        assert!(Potential::quadratic(1.0, 0.0).is_err());
    }

    #[test]
    fn symmetric_kinds_have_flat_origin() {
        for p in builtins() {
            assert_eq!(p.eval(0.0, 1).unwrap(), 0.0, "{}", p.label());
        }
    }

    #[test]
    fn log_well_split_constants() {
        let a = 0.25;
        let p = Potential::log_well(a, 1.0).unwrap();
        let dec = p.decomposition().unwrap();
        assert!((dec.c0 - 2.0 / a).abs() < 1e-9);
        assert!((dec.c1 - 2.0).abs() < 1e-12);
        // sup of h'' off the support is 1/(4a), attained at η² = 3a.
        assert!((dec.c2 - (2.0 + 1.0 / (4.0 * a))).abs() < 1e-6);
    }

    #[test]
    fn log_well_g_is_c1_at_support_edges() {
        let a: f64 = 0.25;
        let dec = Potential::log_well(a, 1.0).unwrap().decomposition().unwrap();
        let h = 1e-7;
        for x in [-a.sqrt(), a.sqrt()] {
            let left = (dec.g.eval(x, 0) - dec.g.eval(x - h, 0)) / h;
            let right = (dec.g.eval(x + h, 0) - dec.g.eval(x, 0)) / h;
            assert!((left - right).abs() < 1e-6);
            assert!((left - dec.g.eval(x, 1)).abs() < 1e-6);
        }
    }

    #[test]
    fn split_with_zero_perturbation() {
        let y: Arc<dyn Profile> = Arc::new(|x: f64, o: u8| match o {
            0 => x * x,
            1 => 2.0 * x,
            _ => 2.0,
        });
        let h: Arc<dyn Profile> = Arc::new(|_: f64, _: u8| 0.0);
        let dec = split_compact_support(y.clone(), h, &[], (1.0, 0.0)).unwrap();
        for x in [-2.0, 0.0, 1.3] {
            assert_eq!(dec.g.eval(x, 0), 0.0);
            assert_eq!(dec.v.eval(x, 0), y.eval(x, 0));
        }
    }

    #[test]
    fn split_rejects_positive_curvature_inside() {
        let y: Arc<dyn Profile> = Arc::new(|x: f64, o: u8| match o {
            0 => x * x,
            1 => 2.0 * x,
            _ => 2.0,
        });
        // h'' = cos(x) is positive near 0 and zero at ±π/2.
        let h: Arc<dyn Profile> = Arc::new(|x: f64, o: u8| match o {
            0 => -x.cos(),
            1 => x.sin(),
            _ => x.cos(),
        });
        let half = std::f64::consts::FRAC_PI_2;
        match split_compact_support(y, h, &[(-half, half)], (0.5, 1.0)) {
            Err(Error::Decomposition { witness, .. }) => assert!(witness.abs() < half),
            other => panic!("expected decomposition error, got {other:?}"),
        }
    }

    #[test]
    fn split_two_intervals_is_c1() {
        // h'' = -sin(x) on [0, π] and [2π, 3π], positive in between.
        let y: Arc<dyn Profile> = Arc::new(|x: f64, o: u8| match o {
            0 => 2.0 * x * x,
            1 => 4.0 * x,
            _ => 4.0,
        });
        let h: Arc<dyn Profile> = Arc::new(|x: f64, o: u8| match o {
            0 => x.sin(),
            1 => x.cos(),
            _ => -x.sin(),
        });
        let pi = std::f64::consts::PI;
        let dec = split_compact_support(y, h, &[(0.0, pi), (2.0 * pi, 3.0 * pi)], (1.0, 1.0)).unwrap();
        let eps = 1e-7;
        for x in [0.0, pi, 2.0 * pi, 3.0 * pi] {
            let l = (dec.g.eval(x, 0) - dec.g.eval(x - eps, 0)) / eps;
            let r = (dec.g.eval(x + eps, 0) - dec.g.eval(x, 0)) / eps;
            assert!((l - r).abs() < 1e-5, "kink at {x}: {l} vs {r}");
            let gl = dec.g.eval(x - eps, 0);
            let gr = dec.g.eval(x + eps, 0);
            assert!((gl - gr).abs() < 1e-5, "jump at {x}");
        }
        assert!((dec.c0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn log_well_l1_norm_of_gpp() {
        for a in [0.1, 0.25, 0.6] {
            let p = Potential::log_well(a, 0.001).unwrap();
            let dec = p.decomposition().unwrap();
            let rep = check_conditions(&p, &dec, 1.0, 1e-10, 1).unwrap();
            assert!((rep.gpp_lq_norm - 2.0 / a.sqrt()).abs() < 1e-8, "a = {a}");
            assert!(rep.a0_holds && rep.a1_holds);
            assert!(rep.gp_l2_norm.is_infinite());
            assert_eq!(rep.a3_margin, f64::NEG_INFINITY);
        }
    }

    #[test]
    fn convex_potentials_have_positive_margin() {
        for beta in [1e-3, 1.0, 1e3] {
            let p = Potential::cosine(1.0, 0.3, beta).unwrap();
            let dec = p.decomposition().unwrap();
            let rep = check_conditions(&p, &dec, 1.0, 1e-10, 2).unwrap();
            assert_eq!(rep.gpp_lq_norm, 0.0);
            assert!(rep.a2_margin > 0.0 && rep.a3_margin > 0.0);
        }
    }

    #[test]
    fn a2_margin_against_fixed_grid_riemann_sum() {
        let (a, beta, d) = (0.25, 0.005, 1);
        let p = Potential::log_well(a, beta).unwrap();
        let dec = p.decomposition().unwrap();
        let rep = check_conditions(&p, &dec, 1.0, 1e-10, d).unwrap();
        // Midpoint rule for ∫|h''| on the support.
        let n = 200_000;
        let r = a.sqrt();
        let dx = 2.0 * r / n as f64;
        let norm: f64 = (0..n)
            .map(|i| {
                let x = -r + (i as f64 + 0.5) * dx;
                (2.0 * (x * x - a) / (x * x + a).powi(2)).abs() * dx
            })
            .sum();
        let margin = a2_rhs(2.0, 2.0 + 1.0 / (4.0 * a), 1.0, d) - beta.sqrt() * norm;
        assert_eq!(margin > 0.0, rep.a2_margin > 0.0);
        assert!((margin - rep.a2_margin).abs() < 1e-6);
        // Threshold a / (4 d C2²).
        let c2 = 2.0 + 1.0 / (4.0 * a);
        let direct = a / (4.0 * d as f64 * c2 * c2);
        assert!((rep.a2_beta_threshold - direct).abs() < 1e-6 * direct);
        assert!(rep.reference_beta_threshold.unwrap() > 0.0);
    }

    #[test]
    fn mixture_decomposition_bounds() {
        let (p, k1, k2) = (0.2, 40.0, 1.0);
        let pot = Potential::gaussian_mixture(p, k1, k2, 1.0).unwrap();
        let dec = pot.decomposition().unwrap();
        assert_eq!(dec.c1, k2);
        assert!((dec.c2 - (p * k1 + (1.0 - p) * k2)).abs() < 1e-12);
        let rep = check_conditions(&pot, &dec, 1.0, 1e-9, 2).unwrap();
        assert!(rep.a0_holds && rep.a1_holds, "{rep:?}");
        assert!(rep.gpp_lq_norm > 0.0);
        assert!(rep.gp_l2_norm.is_infinite());
        // g' = ∫ g'' checked at one point by finite differences of g.
        let h = 1e-5;
        let x = 0.3;
        let fd = (dec.g.eval(x + h, 0) - dec.g.eval(x - h, 0)) / (2.0 * h);
        assert!((fd - dec.g.eval(x, 1)).abs() < 1e-8);
    }

    #[test]
    fn json_round_trip_and_strict_parsing() {
        let p = Potential::log_well(0.25, 0.005).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(text, r#"{"kind":"log_well","a":0.25,"beta":0.005}"#);
        let back: Potential = serde_json::from_str(&text).unwrap();
        assert_eq!(back.value(0.7, 0), p.value(0.7, 0));
        let bad = r#"{"kind":"gaussian_mixture","p":1.5,"k1":40,"k2":1,"beta":1}"#;
        let err = serde_json::from_str::<Potential>(bad).unwrap_err().to_string();
        assert!(err.contains("`p`"), "{err}");
        assert!(serde_json::from_str::<Potential>(r#"{"kind":"quadratic","k":1,"beta":1,"x":0}"#).is_err());
        let dec = p.decomposition().unwrap();
        assert!(serde_json::to_string(&Potential::custom(dec, 1.0).unwrap()).is_err());
    }

    #[test]
    fn rescale_identity_at_unit_scale() {
        let p = Potential::quadratic(1.0, 1.0).unwrap();
        let dec = p.decomposition().unwrap();
        let (q, qd, off) = rescale_to_unit(&p, &dec).unwrap();
        assert_eq!(off, 0.0);
        assert_eq!(qd.c2, 1.0);
        for x in [-2.0, 0.1, 3.0] {
            for o in 0..3 {
                assert_eq!(q.value(x, o), p.value(x, o));
            }
        }
    }

    #[test]
    fn rescale_quadratic_beta_four() {
        let p = Potential::quadratic(1.0, 4.0).unwrap();
        let dec = p.decomposition().unwrap();
        let (q, _, off) = rescale_to_unit(&p, &dec).unwrap();
        assert!((off + 0.5 * 4f64.ln()).abs() < 1e-15);
        for s in [-1.5, 0.3, 2.0] {
            assert!((q.value(s, 0) - 0.5 * s * s).abs() < 1e-14);
        }
    }

    #[test]
    fn rescaled_norm_identity() {
        let p = Potential::log_well(0.25, 1.0).unwrap();
        let dec = p.decomposition().unwrap();
        let (q, qd, _) = rescale_to_unit(&p, &dec).unwrap();
        let r = check_conditions(&p, &dec, 1.0, 1e-11, 1).unwrap();
        let rq = check_conditions(&q, &qd, 1.0, 1e-11, 1).unwrap();
        let c1 = dec.c1;
        assert!((rq.gpp_lq_norm - c1.sqrt() / c1 * r.gpp_lq_norm).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn builtins_are_symmetric(eta in -50.0f64..50.0) {
            for p in builtins() {
                let u = p.value(eta, 0);
                prop_assert!((u - p.value(-eta, 0)).abs() <= 1e-12 * (1.0 + u.abs()));
                prop_assert!(u.is_finite() && p.value(eta, 1).is_finite() && p.value(eta, 2).is_finite());
            }
        }

        #[test]
        fn decomposition_identity(eta in -20.0f64..20.0) {
            for p in builtins() {
                let dec = p.decomposition().unwrap();
                let u = p.value(eta, 0);
                let s = dec.v.eval(eta, 0) + dec.g.eval(eta, 0);
                prop_assert!((u - s).abs() <= 1e-10 * (1.0 + u.abs()), "{} at {}", p.label(), eta);
            }
        }

        #[test]
        fn growth_bound_holds(eta in -100.0f64..100.0) {
            for p in builtins() {
                let (a, b) = p.growth();
                prop_assert!(p.value(eta, 0) >= a * eta * eta - b - 1e-9);
            }
        }
    }
}
