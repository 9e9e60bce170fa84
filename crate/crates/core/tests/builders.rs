use gauss_fluct::flow::flow_point;
use gauss_fluct::linalg::Mat;
use gauss_fluct::model::validate_model;
use gauss_fluct::models::chain::jacobi_spectrum;
use gauss_fluct::models::{build_chain, build_perturbed_chain, build_toy, ChainSpec, Inhomogeneity, ToySpec};
use gauss_fluct::renyi::{domain_interval, renyi_entropy, RenyiPencil};

fn interior(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|i| lo + (hi - lo) * i as f64 / (n + 1) as f64).collect()
}

#[test]
fn toy_matches_closed_forms() {
    let (m, oracle) = build_toy(&ToySpec::new(64, 1.0)).unwrap();
    let d_plus = Mat::eye(m.dim());
    for t in [1.0, 5.0, 8.0, 20.0] {
        let fp = flow_point(&m, t).unwrap();
        let reference = RenyiPencil::reference(&fp).unwrap();
        let ness = RenyiPencil::ness(&fp, &d_plus).unwrap();
        let dom = reference.domain().unwrap();
        assert!((dom.delta_t - oracle.delta_t(t)).abs() <= 1e-8 * oracle.delta_t(t), "t = {t}");
        let d = oracle.delta_t(t);
        for a in interior(-d, 1.0 + d, 21) {
            assert!((reference.value(a).unwrap() - oracle.e_t(t, a)).abs() <= 1e-8, "t = {t}, alpha = {a}");
        }
        let rho = oracle.ness_radius(t);
        for a in interior(-rho, rho, 21) {
            assert!((ness.value(a).unwrap() - oracle.e_t_plus(t, a)).abs() <= 1e-8, "t = {t}, alpha = {a}");
        }
    }
}

#[test]
fn toy_without_coupling_is_trivial() {
    let (m, _) = build_toy(&ToySpec::new(16, 0.0)).unwrap();
    assert!(m.sigma().is_zero());
    let d = domain_interval(&m, 3.0).unwrap();
    assert!(d.lower.is_infinite() && d.upper.is_infinite());
    for a in [-5.0, 0.3, 7.0] {
        assert!(renyi_entropy(&m, 3.0, a).unwrap().abs() <= 1e-12);
    }
}

#[test]
fn builders_satisfy_time_reversal() {
    let grid = [0.0, 1.0, 5.0];
    let (toy, _) = build_toy(&ToySpec::new(32, 0.7)).unwrap();
    let (chain, _) = build_chain(&ChainSpec::new(8, 8, (2.0, 1.0, 1.0))).unwrap();
    let perturbed = build_perturbed_chain(&ChainSpec::new(8, 8, (2.0, 1.5, 1.0))).unwrap();
    let mut spec = ChainSpec::new(6, 6, (1.5, 1.0, 0.5));
    let sites = spec.sites();
    spec.inhomogeneous = Some(Inhomogeneity {
        omega: (0..sites).map(|i| 1.0 + 0.1 * (i % 3) as f64).collect(),
        kappa: (0..=sites).map(|i| 0.8 + 0.05 * (i % 4) as f64).collect(),
    });
    let (inhom, oracle) = build_chain(&spec).unwrap();
    assert!(oracle.is_none());
    for m in [&toy, &chain, &perturbed, &inhom] {
        let rep = validate_model(m, &grid).unwrap();
        assert!(rep.g4_ok, "{}: {:?}", m.label(), rep.notes);
    }
}

#[test]
fn undoubled_toy_fails_time_reversal() {
    let (m, _) = build_toy(&ToySpec::new(16, 1.0).undoubled()).unwrap();
    let rep = validate_model(&m, &[0.0, 1.0]).unwrap();
    assert!(!rep.g4_ok);
}

#[test]
fn homogeneous_jacobi_spectrum() {
    let spec = ChainSpec::new(20, 20, (2.0, 1.0, 1.0));
    let sp = jacobi_spectrum(&spec).unwrap();
    assert!(sp.iter().all(|&j| (1.0 - 1e-10..=5.0 + 1e-10).contains(&j)));
}

#[test]
fn chain_approaches_limit() {
    let (m, oracle) = build_chain(&ChainSpec::new(128, 128, (2.0, 1.0, 1.0))).unwrap();
    let oracle = oracle.unwrap();
    let pencils: Vec<(f64, RenyiPencil)> = [20.0, 40.0, 60.0]
        .into_iter()
        .map(|t| (t, RenyiPencil::reference(&flow_point(&m, t).unwrap()).unwrap()))
        .collect();
    for a in [0.25, 0.5] {
        let dist: Vec<f64> =
            pencils.iter().map(|(t, p)| (p.value(a).unwrap() / t - oracle.e(a)).abs()).collect();
        assert!(dist[0] > dist[1] && dist[1] > dist[2], "alpha = {a}: {dist:?}");
    }
}
