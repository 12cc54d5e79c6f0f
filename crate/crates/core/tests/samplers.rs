//! Samplers against exact or independently computed answers.

use gradlab::decimation::{SiteMeasure, Stencil};
use gradlab::lattice::Geometry;
use gradlab::observables::{
    exact_decay_rows, surface_tension_ti, surface_tension_transfer_1d, DecayAccumulator, TiSettings, TiltAccumulator,
};
use gradlab::par::Parallelism;
use gradlab::potentials::Potential;
use gradlab::rng::{stream, Domain};
use gradlab::sampler::{draw_site, run_chain, Algorithm, ChainConfig, Model};
use gradlab::stats;

fn chain(pot: Potential, geometry: Geometry, tilt: Vec<f64>, sweeps: u64, seed: u64, algorithm: Algorithm) -> ChainConfig {
    ChainConfig {
        potential: pot,
        geometry,
        tilt,
        sweeps,
        burn_in: 1000,
        thinning: 1,
        seed,
        algorithm,
        bond_weight: None,
        parallelism: Parallelism::Sequential,
    }
}

/// Stationary `Var ∇_1φ(0)` of Euler–Maruyama for the quadratic torus
/// model with unit stiffness: mode `q` has drift rate `μ_q` and stationary
/// variance `2 / (μ_q (2 - dt μ_q))`.
fn euler_gradient_variance(n: usize, dt: f64) -> f64 {
    let mut s = 0.0;
    for a in 0..n {
        for b in 0..n {
            if a == 0 && b == 0 {
                continue;
            }
            let c1 = 1.0 - (2.0 * std::f64::consts::PI * a as f64 / n as f64).cos();
            let c2 = 1.0 - (2.0 * std::f64::consts::PI * b as f64 / n as f64).cos();
            let mu = 2.0 * (c1 + c2);
            s += 2.0 * c1 * 2.0 / (mu * (2.0 - dt * mu));
        }
    }
    s / (n * n) as f64
}

fn langevin_gradient_variance(dt: f64, seed: u64) -> (f64, f64) {
    let g = Geometry::torus(2, 8).unwrap();
    let cfg = chain(Potential::quadratic(1.0, 1.0).unwrap(), g, vec![0.0, 0.0], 60_000, seed, Algorithm::Langevin { dt });
    let mut acc = DecayAccumulator::new(g, 1).unwrap();
    run_chain(cfg, |_, f| acc.push(f)).unwrap();
    let t = acc.finish(10.0);
    let row = t.get(0, 0, 0).unwrap();
    (row.cov, row.se)
}

#[test]
fn langevin_matches_the_discretized_gaussian_and_its_dt_bias() {
    let m = Model::new(Potential::quadratic(1.0, 1.0).unwrap(), Geometry::torus(2, 8).unwrap(), vec![0.0, 0.0], None).unwrap();
    let dt_max = m.langevin_dt_max().unwrap();
    let green = exact_decay_rows(8, 2, 1.0, 0).unwrap()[0].cov;
    assert!((euler_gradient_variance(8, 0.0) - green).abs() < 1e-12);

    let mut biases = Vec::new();
    for (k, frac) in [0.5, 0.25].into_iter().enumerate() {
        let dt = frac * dt_max;
        let (v, se) = langevin_gradient_variance(dt, 40 + k as u64);
        let want = euler_gradient_variance(8, dt);
        assert!((v - want).abs() < 4.0 * se, "dt = {dt}: {v} ± {se} vs {want}");
        biases.push(v - green);
    }
    // First order: halving dt roughly halves the bias.
    let ratio = biases[1] / biases[0];
    assert!(ratio > 0.3 && ratio < 0.6, "bias ratio {ratio}");
}

fn box_tilt(pot: Potential, d: usize, n: usize, tilt: Vec<f64>, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let g = Geometry::boxed(d, n).unwrap();
    let mut acc = TiltAccumulator::new(g).unwrap();
    run_chain(chain(pot, g, tilt, 20_000, seed, Algorithm::HeatBath), |_, f| acc.push(f)).unwrap();
    let e = acc.finish();
    (e.mean, e.se)
}

#[test]
fn box_boundary_tilt_is_recovered_in_the_interior() {
    let u = vec![0.4, -0.2];
    for (pot, d) in [
        (Potential::quadratic(1.0, 0.5).unwrap(), 2),
        (Potential::cosine(1.0, 0.5, 1.0).unwrap(), 2),
        (Potential::log_well(0.25, 0.5).unwrap(), 1),
    ] {
        let (m, se) = box_tilt(pot, d, if d == 1 { 16 } else { 8 }, u[..d].to_vec(), 7);
        for i in 0..d {
            assert!((m[i] - u[i]).abs() < 4.0 * se[i], "d={d} dir {i}: {} ± {}", m[i], se[i]);
        }
    }
    // Off convexity the boundary layer pulls the interior slope; the pull
    // fades as the box grows.
    let lw = Potential::log_well(0.25, 0.5).unwrap();
    let (small, _) = box_tilt(lw.clone(), 2, 8, u.clone(), 8);
    let (large, _) = box_tilt(lw, 2, 16, u.clone(), 9);
    assert!((large[0] - u[0]).abs() < (small[0] - u[0]).abs(), "{small:?} vs {large:?}");
}

#[test]
fn thermodynamic_integration_agrees_with_the_transfer_operator() {
    let pot = Potential::log_well(0.25, 0.5).unwrap();
    let exact = surface_tension_transfer_1d(&pot, 0.8, 16, 400).unwrap().sigma;
    let ti = TiSettings {
        sweeps: 20_000,
        burn_in: 500,
        thinning: 1,
        seed: 7,
        path_nodes: 9,
        parallelism: Parallelism::Sequential,
    };
    let (sigma, se) = surface_tension_ti(&pot, Geometry::torus(1, 16).unwrap(), &[0.8], &ti).unwrap();
    assert!((sigma - exact).abs() < 4.0 * se + 1e-3, "{sigma} ± {se} vs {exact}");
}

#[test]
fn heat_bath_draws_reproduce_decimated_force_means() {
    let pot = Potential::log_well(0.25, 0.5).unwrap();
    for (k, values) in [vec![0.3, 1.4], vec![-1.0, 0.2, 0.9, 2.5]].into_iter().enumerate() {
        let d = values.len() / 2;
        let st = Stencil::new(d, values).unwrap();
        let m = SiteMeasure::decimation(&pot, &st);
        let moments = m.force_moments(1e-10).unwrap();
        let mut rng = stream(11, Domain::SiteUpdate, k as u64);
        let mut forces = vec![Vec::with_capacity(100_000); 2 * d];
        for _ in 0..100_000 {
            let (x, _) = draw_site(&m, &mut rng);
            for (a, t) in st.values.iter().enumerate() {
                forces[a].push(pot.value(t - x, 1));
            }
        }
        for (a, f) in forces.iter().enumerate() {
            let mc = stats::mean(f);
            let se = (stats::variance(f) / f.len() as f64).sqrt();
            assert!((mc - moments.means[a]).abs() < 4.0 * se, "leg {a}: {mc} ± {se} vs {}", moments.means[a]);
        }
    }
}
