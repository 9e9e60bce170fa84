//! Acceptance criteria. Each test prints one PASS/FAIL line per criterion
//! and fails if any of its lines fails.

use std::sync::OnceLock;
use std::time::Instant;

use gauss_fluct::asymptotics::{
    estimate_limit_covariance_with, q_operator, spectral_measure_nu, steady_entropy_production, LimitCovariances,
    LimitFunctional, LimitOptions,
};
use gauss_fluct::flow::{cocycle_defect, entropy_balance_defect, flow_point};
use gauss_fluct::ldp::{es_symmetry_defect, rate_function};
use gauss_fluct::linalg::Mat;
use gauss_fluct::models::{build_chain, build_toy, ChainOracle, ChainSpec, ToySpec, KAPPA};
use gauss_fluct::montecarlo::{
    change_of_measure, clt_sample, empirical_mgf, log_grid, sigma_integral_matrix, sigma_integral_series,
    slln_trajectory, trace_identity,
};
use gauss_fluct::renyi::{DomainKind, RenyiPencil};
use gauss_fluct::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    criterion: &'static str,
    failures: Vec<String>,
}

impl Report {
    fn new(criterion: &'static str) -> Self {
        Report { criterion, failures: vec![] }
    }

    fn check(&mut self, name: &str, ok: bool, detail: String) {
        println!("{} [{}] {}: {}", if ok { "PASS" } else { "FAIL" }, self.criterion, name, detail);
        if !ok {
            self.failures.push(name.to_string());
        }
    }

    fn finish(self) {
        assert!(self.failures.is_empty(), "criterion {} failed: {:?}", self.criterion, self.failures);
    }
}

struct Chain {
    model: Model,
    oracle: ChainOracle,
    lims: LimitCovariances,
}

fn chain() -> &'static Chain {
    static CHAIN: OnceLock<Chain> = OnceLock::new();
    CHAIN.get_or_init(|| {
        let spec = ChainSpec::new(128, 128, (2.0, 1.0, 1.0));
        let (model, oracle) = build_chain(&spec).unwrap();
        let opts = LimitOptions { workers: 8, ..Default::default() };
        let lims = estimate_limit_covariance_with(&model, 100.0, 0.25, &opts).unwrap();
        Chain { model, oracle: oracle.unwrap(), lims }
    })
}

fn limit_functional(c: &Chain) -> LimitFunctional {
    LimitFunctional::new(&q_operator(&c.lims).unwrap(), c.model.sigma())
}

fn interior(lower: f64, upper: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|i| lower + (upper - lower) * i as f64 / (n + 1) as f64).collect()
}

#[test]
fn criterion_1_toy_exactness() {
    let mut r = Report::new("1");
    let start = Instant::now();
    let (model, oracle) = build_toy(&ToySpec::new(1024, 1.0)).unwrap();
    let d_plus = Mat::eye(model.dim());
    let (mut worst, mut worst_plus) = (0.0_f64, 0.0_f64);
    for t in [1.0, 5.0, 20.0, 100.0] {
        let fp = flow_point(&model, t).unwrap();
        let reference = RenyiPencil::reference(&fp).unwrap();
        let d = oracle.delta_t(t);
        for a in interior(-d, 1.0 + d, 21) {
            worst = worst.max((reference.value(a).unwrap() - oracle.e_t(t, a)).abs());
        }
        let ness = RenyiPencil::ness(&fp, &d_plus).unwrap();
        let rho = oracle.ness_radius(t);
        for a in interior(-rho, rho, 21) {
            worst_plus = worst_plus.max((ness.value(a).unwrap() - oracle.e_t_plus(t, a)).abs());
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    r.check("e_t vs closed form", worst <= 1e-8, format!("max |diff| = {worst:.3e} (tol 1e-8)"));
    r.check("e_t+ vs closed form", worst_plus <= 1e-8, format!("max |diff| = {worst_plus:.3e} (tol 1e-8)"));
    r.check("runtime", elapsed <= 60.0, format!("{elapsed:.1} s (limit 60 s)"));
    r.finish();
}

#[test]
fn criterion_2_chain_limit() {
    let mut r = Report::new("2");
    let start = Instant::now();
    let c = chain();
    let t = 50.0;
    let target = -KAPPA * (9.0f64 / 8.0).ln();
    let pencil = RenyiPencil::reference(&flow_point(&c.model, t).unwrap()).unwrap();
    let scaled = pencil.value(0.5).unwrap() / t;
    let rel = ((scaled - target) / target).abs();
    r.check("(1/t) e_t(1/2)", rel <= 0.05, format!("{scaled:.7} vs {target:.7}, relative error {rel:.4} (tol 0.05)"));
    let sep = steady_entropy_production(c.model.sigma(), c.model.covariance(), &c.lims.d_plus, Some(&c.lims.d_minus));
    let want = c.oracle.omega_plus();
    let rel = ((sep.omega_plus - want) / want).abs();
    r.check(
        "omega_+(sigma)",
        rel <= 0.03,
        format!("{:.7} vs {want:.7}, relative error {rel:.4} (tol 0.03)", sep.omega_plus),
    );
    let elapsed = start.elapsed().as_secs_f64();
    r.check("runtime", elapsed <= 300.0, format!("{elapsed:.1} s (limit 300 s)"));
    r.finish();
}

#[test]
fn criterion_3_spectral_measure() {
    let mut r = Report::new("3");
    let c = chain();
    let q = q_operator(&c.lims).unwrap();
    let nu = spectral_measure_nu(&q, c.model.sigma(), 1e-8);
    let [(r_lo, _), (r_hi, _)] = c.oracle.nu_atoms();
    for (name, at) in [("atom at -delta_o", r_lo), ("atom at 1+delta_o", r_hi)] {
        let (w, loc) = nu.cluster(at - 0.5 * at.abs(), at + 0.5 * at.abs());
        let dl = ((loc - at) / at).abs();
        let dw = ((w - KAPPA) / KAPPA).abs();
        r.check(
            name,
            dl <= 0.02 && dw <= 0.05,
            format!("location {loc:.5} (rel {dl:.4}, tol 0.02), weight {w:.5} (rel {dw:.4}, tol 0.05)"),
        );
    }
    r.finish();
}

#[test]
fn criterion_4_exact_identities() {
    let mut r = Report::new("4");
    let c = chain();
    let (toy, _) = build_toy(&ToySpec::new(64, 1.0)).unwrap();
    let mut es = 0.0_f64;
    for (m, t) in [(&c.model, 10.0), (&toy, 5.0)] {
        let p = RenyiPencil::reference(&flow_point(m, t).unwrap()).unwrap();
        let d = p.domain().unwrap();
        for a in interior(d.lower, d.upper, 41) {
            es = es.max((p.value(a).unwrap() - p.value(1.0 - a).unwrap()).abs());
        }
    }
    r.check("finite-time ES symmetry", es <= 1e-9, format!("max defect {es:.3e} (tol 1e-9)"));
    let mut cocycle = 0.0_f64;
    for s in [-20.0, -5.0, -1.0, 1.0, 5.0, 20.0] {
        for t in [-20.0, -5.0, -1.0, 1.0, 5.0, 20.0] {
            cocycle = cocycle.max(cocycle_defect(&c.model, s, t).unwrap());
        }
    }
    r.check("cocycle", cocycle <= 1e-10, format!("max defect {cocycle:.3e} (tol 1e-10)"));
    let bal = entropy_balance_defect(&c.model, 10.0, 200).unwrap();
    r.check("entropy balance", bal <= 1e-6, format!("defect {bal:.3e} (tol 1e-6)"));
    let mut ld = 0.0_f64;
    for t in [1.0, 10.0, 50.0] {
        ld = ld.max(flow_point(&c.model, t).unwrap().logdet_term().abs());
        ld = ld.max(flow_point(&toy, t).unwrap().logdet_term().abs());
    }
    r.check("log det under G4", ld <= 1e-8, format!("max |1/2 log det(I + D T_t)| {ld:.3e} (tol 1e-8)"));
    let rate = rate_function(&limit_functional(c).functional(), DomainKind::Reference).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (lo, hi) = rate.tail_slopes;
    let mut fy = f64::INFINITY;
    for _ in 0..100 {
        let a = rng.gen_range(lo + 1e-3..hi - 1e-3);
        let s = rng.gen_range(-1.0..1.5);
        fy = fy.min(rate.fenchel_young_gap(a, s));
    }
    r.check(
        "Fenchel-Young",
        fy >= -1e-9,
        format!("min gap {fy:.3e} (tol -1e-9) on effective alpha range ({lo:.4}, {hi:.4})"),
    );
    r.finish();
}

#[test]
fn criterion_5_monte_carlo() {
    let mut r = Report::new("5");
    let start = Instant::now();
    let workers = 8;
    let c = chain();
    let n = c.model.dim();
    let d = c.model.covariance();
    let n_samples = 100_000;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Mat::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
    let a = (&a + &a.t()) * 0.5;
    let tr = trace_identity(d, &a, 1, n_samples, workers).unwrap();
    r.check(
        "trace identity",
        tr.z_score.abs() <= 4.0,
        format!("mean {:.6} vs tr(DA) {:.6}, z = {:.2} (tol 4)", tr.estimate, tr.exact, tr.z_score),
    );
    let com = change_of_measure(&c.model, 1.0, 2, n_samples, workers).unwrap();
    r.check(
        "change of measure",
        com.z_score.abs() <= 4.0,
        format!("mean {:.6} vs 1, z = {:.2} (tol 4)", com.estimate, com.z_score),
    );

    let b10 = sigma_integral_matrix(&c.model, 10.0, 1000).unwrap();
    let mgf = empirical_mgf(&c.model, &b10, 0.25, 3, n_samples, workers).unwrap();
    let oracle = RenyiPencil::reference(&flow_point(&c.model, 10.0).unwrap()).unwrap().value(0.25).unwrap();
    let z = (mgf.estimate - oracle) / mgf.std_error;
    r.check(
        "MGF vs e_t(0.25)",
        z.abs() <= 3.0,
        format!("{:.6} vs {oracle:.6}, z = {z:.2} (tol 3)", mgf.estimate),
    );

    let omega = c.oracle.omega_plus();
    let variance = c.oracle.clt_variance();
    let b40 = sigma_integral_matrix(&c.model, 40.0, 4000).unwrap();
    let clt = clt_sample(&b40, d, omega, variance, 4, 20_000, workers).unwrap();
    r.check(
        "CLT KS distance",
        clt.ks <= 0.02,
        format!(
            "KS {:.4} (tol 0.02); sample mean {:.4}, variance {:.4} vs predicted {:.4}",
            clt.ks, clt.sample_mean, clt.sample_variance, variance
        ),
    );

    let series = sigma_integral_series(&c.model, &log_grid(1.0, 50.0, 16), 0.01).unwrap();
    let mut hits = 0;
    let mut finals = vec![];
    for seed in 0..50u64 {
        let traj = slln_trajectory(&series, d, 1000 + seed).unwrap();
        let last = traj.last().unwrap().1;
        finals.push(last);
        if ((last - omega) / omega).abs() <= 0.15 {
            hits += 1;
        }
    }
    let mean_final = finals.iter().sum::<f64>() / finals.len() as f64;
    r.check(
        "SLLN",
        hits >= 40,
        format!("{hits}/50 seeds within 15% of {omega:.5} (need 40); mean final value {mean_final:.5}"),
    );
    let elapsed = start.elapsed().as_secs_f64();
    r.check("runtime", elapsed <= 600.0, format!("{elapsed:.1} s (limit 600 s)"));
    r.finish();
}

#[test]
fn criterion_6_rate_functions() {
    let mut r = Report::new("6");
    let (_, toy) = build_toy(&ToySpec::new(64, 1.0)).unwrap();
    let rate = rate_function(&toy.limit_functional(), DomainKind::Reference).unwrap();
    let rate_plus = rate_function(&toy.limit_functional_plus(), DomainKind::Ness).unwrap();
    let grid: Vec<f64> = (0..=80).map(|i| -4.0 + 0.1 * i as f64).collect();
    let mut d_ref = 0.0_f64;
    let mut d_ness = 0.0_f64;
    for &s in &grid {
        d_ref = d_ref.max((rate.eval(s) - (1.5 * s.abs() - 0.5 * s)).abs());
        d_ness = d_ness.max((rate_plus.eval(s) - 2.0 * s.abs()).abs());
    }
    r.check("toy I(s) = 1.5|s| - 0.5s", d_ref <= 1e-8, format!("max |diff| {d_ref:.3e} (tol 1e-8)"));
    r.check("toy I+(s) = 2|s|", d_ness <= 1e-8, format!("max |diff| {d_ness:.3e} (tol 1e-8)"));

    let c = chain();
    let chain_rate = rate_function(&limit_functional(c).functional(), DomainKind::Reference).unwrap();
    let bound = 3.0 * c.oracle.omega_plus() + 1.0;
    let sgrid: Vec<f64> = (0..=100).map(|i| -bound + 2.0 * bound * i as f64 / 100.0).collect();
    let es = es_symmetry_defect(&chain_rate, &sgrid);
    r.check("chain ES relation", es <= 1e-6, format!("max |I(-s) - I(s) - s| {es:.3e} (tol 1e-6)"));

    let gc = es_symmetry_defect(&rate_plus, &grid);
    let signed = rate_plus.eval(-1.0) - rate_plus.eval(1.0) - 1.0;
    r.check(
        "toy NESS Gallavotti-Cohen failure",
        gc > 1e-3 && signed < 0.0,
        format!("max defect {gc:.3} on |s| <= 4; I+(-1) - I+(1) - 1 = {signed:.3}"),
    );
    r.finish();
}
