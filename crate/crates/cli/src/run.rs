//! Dispatch from a resolved config to the library and artifact writing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gradlab::decimation::{bk_exact_cov_matrix, hessian_fx_cov, rwr_scan, theoretical_bounds, Stencil};
use gradlab::observables::{surface_tension_convexity, CltAccumulator, DecayAccumulator};
use gradlab::potentials::{check_conditions, Potential};
use gradlab::rng::{stream, Domain};
use gradlab::sampler::{contraction_rate, coupled_run, run_chain, Model};
use gradlab::stats;
use rand::Rng;
use serde::Serialize;

use crate::config::{Command, ExperimentConfig};
use crate::error::CliError;

/// Writes artifacts into one directory.
pub struct Out {
    dir: PathBuf,
}

impl Out {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Out { dir: dir.to_path_buf() })
    }

    pub fn text(&self, name: &str, body: &str) -> Result<(), CliError> {
        fs::write(self.dir.join(name), body)?;
        Ok(())
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
        s.push('\n');
        self.text(name, &s)
    }
}

/// Runs `cfg` and writes the manifest plus the command's artifacts.
pub fn run(cfg: &ExperimentConfig, out: &Out) -> Result<String, CliError> {
    out.json("manifest.json", &cfg.manifest())?;
    match cfg.command {
        Command::Check => check(cfg, out),
        Command::Rwr => rwr(cfg, out),
        Command::Bk => bk(cfg, out),
        Command::Sample => sample(cfg, out),
        Command::Decay => decay(cfg, out),
        Command::Clt => clt(cfg, out),
        Command::Sigma => sigma(cfg, out),
        Command::Couple => couple(cfg, out),
    }
}

fn tol(cfg: &ExperimentConfig) -> f64 {
    cfg.tol.unwrap_or(1e-10)
}

fn check(cfg: &ExperimentConfig, out: &Out) -> Result<String, CliError> {
    let pot = cfg.potential()?;
    let d = cfg.d()?;
    let q = cfg.q.unwrap_or(1.0);
    let dec = pot.decomposition().map_err(CliError::within("potential"))?;
    let conditions = check_conditions(pot, &dec, q, tol(cfg), d).map_err(CliError::within("check"))?;
    let bounds = theoretical_bounds(&dec, q, d, pot.beta).map_err(CliError::within("check"))?;
    #[derive(Serialize)]
    struct Report<'a> {
        conditions: &'a gradlab::potentials::ConditionReport,
        bounds: &'a gradlab::decimation::TheoreticalBounds,
    }
    out.json("report.json", &Report { conditions: &conditions, bounds: &bounds })?;
    Ok(format!(
        "a2 margin {:e}, beta threshold {:e}, bounds asserted {}",
        conditions.a2_margin, conditions.a2_beta_threshold, bounds.asserted
    ))
}

fn rwr(cfg: &ExperimentConfig, out: &Out) -> Result<String, CliError> {
    let pot = cfg.potential()?;
    let scan = cfg.scan.as_ref().expect("resolved");
    let report = rwr_scan(pot, scan).map_err(CliError::within("scan"))?;
    out.json("report.json", &report)?;
    out.text("scan.csv", &report.to_csv())?;
    let summary = format!(
        "-D in [{:e}, {:e}] over {} stencils; bounds [{:e}, {:e}]",
        report.scanned_min, report.scanned_max, report.stencils, report.minus_d_lower, report.minus_d_upper
    );
    if !report.complete {
        return Err(CliError::Numerical(format!(
            "{} stencils failed to integrate, first: {}",
            report.holes.len(),
            report.holes[0].error
        )));
    }
    if report.bounds.asserted && !report.holds {
        let w = report.min_witness.as_ref().or(report.max_witness.as_ref());
        return Err(CliError::Assertion(format!("scanned values leave the bounds: {summary}; witness {w:?}")));
    }
    Ok(summary)
}

fn bk(cfg: &ExperimentConfig, out: &Out) -> Result<String, CliError> {
    let b = cfg.bk.as_ref().expect("resolved");
    let pot = Potential::gaussian_mixture(b.p, b.k1, b.k2, 1.0).map_err(CliError::within("bk"))?;
    let mut stencils = Vec::new();
    for v in &b.stencils {
        stencils.push(Stencil::new(b.d, v.clone()).map_err(CliError::within("bk"))?);
    }
    for k in 0..b.random {
        let mut rng = stream(cfg.seed(), Domain::Scan, k as u64);
        let v = (0..2 * b.d).map(|_| rng.gen_range(-b.radius..=b.radius)).collect();
        stencils.push(Stencil::new(b.d, v).map_err(CliError::within("bk"))?);
    }
    if stencils.is_empty() {
        return Err(CliError::Validation("config key `bk.stencils`: no stencils given".into()));
    }
    let mut csv = String::from("stencil,i,j,closed_form,quadrature,rel_err\n");
    let mut worst: f64 = 0.0;
    for (s, st) in stencils.iter().enumerate() {
        let exact = bk_exact_cov_matrix(b.p, b.k1, b.k2, st)?;
        let h = hessian_fx_cov(&pot, st)?;
        let n = 2 * b.d;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = -h.matrix[i][j] / 4.0;
                let rel = (exact[i][j] - q).abs() / q.abs().max(f64::MIN_POSITIVE);
                worst = worst.max(rel);
                let _ = writeln!(
                    csv,
                    "{s},{},{},{:e},{:e},{:e}",
                    Stencil::direction(b.d, i),
                    Stencil::direction(b.d, j),
                    exact[i][j],
                    q,
                    rel
                );
            }
        }
    }
    out.text("bk.csv", &csv)?;
    let t = tol(cfg);
    let summary = format!("max relative error {worst:e} over {} stencils (tol {t:e})", stencils.len());
    if worst > t {
        return Err(CliError::Assertion(summary));
    }
    Ok(summary)
}

fn sample(cfg: &ExperimentConfig, out: &Out) -> Result<String, CliError> {
    let chain = cfg.chain()?;
    let model = chain.validate().map_err(CliError::within("sampler"))?;
    let seed = chain.seed;
    let dump_every = cfg.sampler.as_ref().and_then(|s| s.dump_every);
    let mut csv = String::from("sweep,energy\n");
    let mut energies = Vec::new();
    let mut kept = 0u64;
    let mut last = None;
    let mut dumps = Vec::new();
    let stats = run_chain(chain, |sweep, f| {
        let e = model.energy(&f.heights);
        energies.push(e);
        let _ = writeln!(csv, "{sweep},{e:e}");
        kept += 1;
        if let Some(k) = dump_every {
            if k > 0 && kept.is_multiple_of(k) {
                dumps.push((sweep, f.dump_text(seed, sweep)));
            }
        }
        last = Some((sweep, f.clone()));
        Ok(())
    })?;
    out.text("series.csv", &csv)?;
    for (sweep, text) in &dumps {
        out.text(&format!("field_{sweep:08}.txt"), text)?;
    }
    if let Some((sweep, f)) = &last {
        out.text("field_final.txt", &f.dump_text(seed, *sweep))?;
    }
    let energy = stats::estimate(&energies);
    #[derive(Serialize)]
    struct Report {
        stats: gradlab::sampler::SweepStats,
        acceptance: f64,
        energy: stats::Estimate,
    }
    out.json("stats.json", &Report { stats, acceptance: stats.acceptance(), energy })?;
    Ok(format!(
        "{} snapshots, mean energy {:e} ± {:e}, acceptance {:.3}",
        energies.len(),
        energy.mean,
        energy.se,
        stats.acceptance()
    ))
}

fn decay(cfg: &ExperimentConfig, out: &Out) -> Result<String, CliError> {
    let chain = cfg.chain()?;
    let block = cfg.decay.as_ref().expect("resolved");
    let mut acc = DecayAccumulator::new(chain.geometry, block.max_r).map_err(CliError::within("decay"))?;
    run_chain(chain, |_, f| acc.push(f))?;
    let table = acc.finish(block.min_ess);
    out.text("decay.csv", &table.to_csv())?;
    #[derive(Serialize)]
    struct Report<'a> {
        fit: &'a Option<gradlab::observables::DecayFit>,
        min_ess: f64,
        snapshots: usize,
    }
    out.json("report.json", &Report { fit: &table.fit, min_ess: table.min_ess, snapshots: acc.len() })?;
    Ok(match &table.fit {
        Some(f) => format!("exponent {:.4} ± {:.4} (reliable {}), min ESS {:.0}", f.exponent, f.ci95, f.reliable, table.min_ess),
        None => "too few distances to fit".into(),
    })
}

fn clt(cfg: &ExperimentConfig, out: &Out) -> Result<String, CliError> {
    let chain = cfg.chain()?;
    let block = cfg.clt.as_ref().expect("resolved");
    if block.epsilons.is_empty() {
        return Err(CliError::Validation("config key `clt.epsilons`: must not be empty".into()));
    }
    let mut accs = Vec::new();
    for &eps in &block.epsilons {
        accs.push(CltAccumulator::new(chain.geometry, block.f.clone(), eps).map_err(CliError::within("clt"))?);
    }
    run_chain(chain, |_, f| accs.iter_mut().try_for_each(|a| a.push(f)))?;
    #[derive(Serialize)]
    struct Row {
        epsilon: f64,
        replicates: usize,
        mean: f64,
        variance: f64,
        variance_se: f64,
        skewness: f64,
        excess_kurtosis: f64,
        jarque_bera: f64,
        p_value: f64,
        remainder_variance: f64,
        tau: f64,
    }
    let mut rows = Vec::new();
    for (k, acc) in accs.into_iter().enumerate() {
        let r = acc.finish().map_err(CliError::within("clt"))?;
        out.text(&format!("clt_{k}.csv"), &r.to_csv())?;
        rows.push(Row {
            epsilon: r.epsilon,
            replicates: r.replicates.len(),
            mean: r.mean,
            variance: r.variance,
            variance_se: r.variance_se,
            skewness: r.skewness,
            excess_kurtosis: r.excess_kurtosis,
            jarque_bera: r.jarque_bera,
            p_value: r.p_value,
            remainder_variance: r.remainder_variance,
            tau: r.tau,
        });
    }
    out.json("report.json", &rows)?;
    let mut s = String::new();
    for r in &rows {
        let _ = write!(s, "eps {}: var {:.4} skew {:.3} kurt {:.3}; ", r.epsilon, r.variance, r.skewness, r.excess_kurtosis);
    }
    Ok(s.trim_end_matches("; ").to_string())
}

fn sigma(cfg: &ExperimentConfig, out: &Out) -> Result<String, CliError> {
    let pot = cfg.potential()?;
    let spec = cfg.sigma.as_ref().expect("resolved");
    let r = surface_tension_convexity(pot, cfg.d()?, spec).map_err(CliError::within("sigma"))?;
    out.text("sigma.csv", &r.to_csv())?;
    out.json("report.json", &r)?;
    let t = cfg.tol.unwrap_or(1e-4);
    let summary = format!("min d2sigma - bound = {:e} (bound {:e}, asserted {})", r.margin, r.bound, r.bound_asserted);
    if r.bound_asserted && r.margin < -t {
        return Err(CliError::Assertion(summary));
    }
    Ok(summary)
}

fn couple(cfg: &ExperimentConfig, out: &Out) -> Result<String, CliError> {
    let pot = cfg.potential()?;
    let geometry = cfg.geometry()?;
    let c = cfg.couple.as_ref().expect("resolved");
    let d = geometry.d();
    let tilt = |t: &Option<Vec<f64>>| t.clone().unwrap_or_else(|| vec![0.0; d]);
    let ma = Model::new(pot.clone(), geometry, tilt(&c.tilt_a), c.bond_weight).map_err(CliError::within("couple"))?;
    let mb = Model::new(pot.clone(), geometry, tilt(&c.tilt_b), c.bond_weight).map_err(CliError::within("couple"))?;
    let mut fa = ma.initial_field()?;
    let mut fb = mb.initial_field()?;
    for x in 0..fa.heights.len() {
        if ma.is_free(x) {
            let v: f64 = stream(cfg.seed(), Domain::Init, x as u64).gen_range(-1.0..1.0);
            fa.heights[x] += c.perturbation * v;
        }
    }
    let diag = coupled_run(&ma, &mb, &mut fa, &mut fb, &c.coupling).map_err(CliError::within("couple"))?;
    out.text("couple.csv", &diag.to_csv())?;
    #[derive(Serialize)]
    struct Report {
        contraction_rate: f64,
        late_gradient_gap: f64,
        dt_max: f64,
        finite: bool,
    }
    let report = Report {
        contraction_rate: contraction_rate(&diag),
        late_gradient_gap: diag.late_gap(),
        dt_max: ma.langevin_dt_max()?,
        finite: diag.is_finite(),
    };
    out.json("report.json", &report)?;
    Ok(format!("rate {:e}, late gradient gap {:e}", report.contraction_rate, report.late_gradient_gap))
}
