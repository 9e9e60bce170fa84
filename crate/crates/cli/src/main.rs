use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use gauss_fluct::asymptotics::{
    estimate_limit_covariance_with, ness_limit_functional, q_operator, sampled_ness_domain, spectral_measure_nu,
    steady_entropy_production, LimitFunctional, LimitOptions,
};
use gauss_fluct::flow::scan_row;
use gauss_fluct::io::{fmt_g17, load_model, matrix_value, num, write_csv, MatrixSource, ModelFile};
use gauss_fluct::ldp::{clt_variance, rate_function};
use gauss_fluct::linalg::Mat;
use gauss_fluct::model::validate_model;
use gauss_fluct::models::{build_chain, build_toy, BuilderSpec};
use gauss_fluct::montecarlo::{
    change_of_measure, clt_sample, empirical_mgf, log_grid, sigma_integral_matrix, sigma_integral_series,
    slln_trajectory, trace_identity,
};
use gauss_fluct::par::default_workers;
use gauss_fluct::renyi::{DomainKind, RenyiPencil};
use gauss_fluct::{Error, Model};

mod grid;

use grid::Grid;

#[derive(Parser, Debug)]
#[command(name = "gauss-fluct", version, about = "Entropic fluctuations of linear Gaussian dynamical systems")]
struct Cli {
    /// Directory for result files; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "GAUSS_FLUCT_THREADS")]
    workers: Option<usize>,
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Hypothesis report: spectral bounds of D_t and the time-reversal relations.
    Validate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "0:20:21", allow_hyphen_values = true)]
        t_grid: Grid,
    },
    /// Time scan of the covariance flow and entropy balance.
    Flow {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "0:10:11", allow_hyphen_values = true)]
        t_grid: Grid,
        #[arg(long, default_value_t = 200)]
        quad_steps: usize,
    },
    /// Finite-time Rényi functional on an α grid.
    ScanRenyi {
        #[arg(long)]
        model: PathBuf,
        /// Times; repeat the flag for several.
        #[arg(long = "t", required = true, allow_hyphen_values = true)]
        times: Vec<f64>,
        #[arg(long, allow_hyphen_values = true)]
        alpha_grid: Grid,
    },
    /// Limiting covariances, steady entropy production, e(α) and the atom measure.
    Asymptotics {
        #[command(flatten)]
        limit: LimitArgs,
        #[arg(long, default_value = "-0.5:1.5:41", allow_hyphen_values = true)]
        alpha_grid: Grid,
        #[arg(long, default_value_t = 1e-8)]
        q_floor: f64,
    },
    /// Rate functions I and I⁺ from the limiting functionals.
    Rate {
        #[command(flatten)]
        limit: LimitArgs,
        #[arg(long, allow_hyphen_values = true)]
        s_grid: Grid,
    },
    /// Monte Carlo checks.
    Mc {
        #[command(subcommand)]
        check: McCommand,
    },
    /// Compare computed functionals with the closed forms of a builder model.
    OracleCompare {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "t", required = true, allow_hyphen_values = true)]
        times: Vec<f64>,
        #[arg(long, default_value_t = 21)]
        points: usize,
    },
}

#[derive(Args, Debug)]
struct LimitArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    horizon: f64,
    /// Largest accepted plateau residual.
    #[arg(long, default_value_t = 0.25)]
    tol: f64,
    #[arg(long, default_value_t = 65)]
    grid_points: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Measure {
    Reference,
    Ness,
}

#[derive(Subcommand, Debug)]
enum McCommand {
    /// log E exp(−α ∫σ) against e_t(α).
    Mgf {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        t: f64,
        #[arg(long, allow_hyphen_values = true)]
        alpha: f64,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
    },
    /// Time averages of σ along single draws.
    Slln {
        #[command(flatten)]
        limit: LimitArgs,
        #[arg(long, value_enum, default_value_t = Measure::Reference)]
        measure: Measure,
        #[arg(long, default_value_t = 50)]
        seeds: u64,
        #[arg(long, default_value_t = 0.15)]
        band: f64,
    },
    /// Fluctuations of ∫σ against N(0, e″).
    Clt {
        #[command(flatten)]
        limit: LimitArgs,
        #[arg(long, value_enum, default_value_t = Measure::Reference)]
        measure: Measure,
        #[arg(long, allow_hyphen_values = true)]
        t: f64,
        #[arg(long, default_value_t = 20_000)]
        n: usize,
    },
    /// Sample mean of (x, A x) against tr(DA) for random symmetric A.
    Trace {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        matrices: usize,
    },
    /// Mean of the Radon–Nikodym derivative dω_t/dω under ω against 1.
    ChangeOfMeasure {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        t: f64,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
    },
}

/// Successful run whose report flags a failed hypothesis.
struct HypothesisFailure;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(HypothesisFailure)) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            let hyp = e.downcast_ref::<Error>().is_some_and(Error::is_hypothesis_failure);
            ExitCode::from(if hyp { 2 } else { 1 })
        }
    }
}

struct Output<'a> {
    dir: Option<&'a Path>,
}

impl Output<'_> {
    fn json(&self, name: &str, value: &Value) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        match self.dir {
            Some(d) => {
                fs::create_dir_all(d)?;
                let p = d.join(name);
                fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?;
            }
            None => println!("{text}"),
        }
        Ok(())
    }

    fn csv(&self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> anyhow::Result<()> {
        match self.dir {
            Some(d) => {
                fs::create_dir_all(d)?;
                let p = d.join(name);
                let mut f = fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?;
                write_csv(&mut f, header, rows)?;
            }
            None => {
                let stdout = std::io::stdout();
                let mut lock = stdout.lock();
                write_csv(&mut lock, header, rows)?;
                lock.flush()?;
            }
        }
        Ok(())
    }
}

fn load(path: &Path) -> anyhow::Result<Model> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn run(cli: &Cli) -> anyhow::Result<Option<HypothesisFailure>> {
    let workers = cli.workers.unwrap_or_else(default_workers);
    if workers == 0 {
        bail!("workers must be at least 1");
    }
    let out = Output { dir: cli.out.as_deref() };
    match &cli.command {
        Command::Validate { model, t_grid } => cmd_validate(&out, &load(model)?, t_grid),
        Command::Flow { model, t_grid, quad_steps } => {
            let m = load(model)?;
            let mut rows = Vec::new();
            for t in t_grid.points()? {
                let r = scan_row(&m, t, *quad_steps)?;
                rows.push(vec![r.t, r.trace_dt, r.lambda_min_dt, r.lambda_max_dt, r.mean_sigma, r.ent_balance_defect]);
            }
            out.csv(
                "flow.csv",
                &["t", "trace_Dt", "lambda_min_Dt", "lambda_max_Dt", "mean_sigma", "ent_balance_defect"],
                &rows,
            )?;
            Ok(None)
        }
        Command::ScanRenyi { model, times, alpha_grid } => cmd_scan_renyi(&out, &load(model)?, times, alpha_grid),
        Command::Asymptotics { limit, alpha_grid, q_floor } => {
            cmd_asymptotics(&out, limit, alpha_grid, *q_floor, workers)
        }
        Command::Rate { limit, s_grid } => cmd_rate(&out, limit, s_grid, workers),
        Command::Mc { check } => cmd_mc(&out, check, cli.seed, workers),
        Command::OracleCompare { model, times, points } => cmd_oracle(&out, model, times, *points),
    }
}

fn cmd_validate(out: &Output, m: &Model, grid: &Grid) -> anyhow::Result<Option<HypothesisFailure>> {
    let mut times = grid.points()?;
    if !times.contains(&0.0) {
        times.insert(0, 0.0);
    }
    let rep = validate_model(m, &times)?;
    let defects = rep.g4_defects.map(|d| {
        json!({
            "involution": num(d.involution),
            "orthogonality": num(d.orthogonality),
            "anticommutes_generator": num(d.anticommutes_generator),
            "commutes_covariance": num(d.commutes_covariance),
            "generator_trace": num(d.generator_trace),
        })
    });
    let sigma = m.sigma();
    out.json(
        "validate.json",
        &json!({
            "label": m.label(),
            "dim": m.dim(),
            "g4_ok": rep.g4_ok,
            "m_est": num(rep.bounds.0),
            "M_est": num(rep.bounds.1),
            "delta": num(rep.delta),
            "trace_D_sigma": num(sigma.trace_d_sigma),
            "g4_defects": defects,
            "notes": rep.notes,
        }),
    )?;
    Ok((!rep.g4_ok).then_some(HypothesisFailure))
}

fn cmd_scan_renyi(out: &Output, m: &Model, times: &[f64], grid: &Grid) -> anyhow::Result<Option<HypothesisFailure>> {
    let alphas = grid.points()?;
    let mut rows = Vec::new();
    let mut domains = Vec::new();
    for &t in times {
        let p = RenyiPencil::reference(&gauss_fluct::flow::flow_point(m, t)?)?;
        let d = p.domain()?;
        let mut per_t = Vec::new();
        for &a in &alphas {
            let inside = d.contains(a);
            let v = if inside { p.value(a)? } else { f64::INFINITY };
            let flag = if inside && v.is_finite() { 1.0 } else { 0.0 };
            rows.push(vec![t, a, v, flag]);
            per_t.push(vec![a, v, flag]);
        }
        if out.dir.is_some() {
            out.csv(&format!("renyi_t{}.csv", fmt_g17(t)), &["alpha", "e_t", "in_domain"], &per_t)?;
        }
        domains.push(json!({
            "t": num(t),
            "lower": num(d.lower),
            "upper": num(d.upper),
            "delta_t": num(d.delta_t),
            "symmetric": d.symmetric,
            "notes": d.notes,
        }));
    }
    out.csv("renyi.csv", &["t", "alpha", "e_t", "in_domain"], &rows)?;
    match out.dir {
        Some(_) => out.json("domains.json", &Value::Array(domains))?,
        None => eprintln!("{}", serde_json::to_string(&Value::Array(domains))?),
    }
    Ok(None)
}

struct Limits {
    model: Model,
    lims: gauss_fluct::asymptotics::LimitCovariances,
}

fn limits(args: &LimitArgs, workers: usize) -> anyhow::Result<Limits> {
    let model = load(&args.model)?;
    let opts = LimitOptions { grid_points: args.grid_points, workers, ..Default::default() };
    let lims = estimate_limit_covariance_with(&model, args.horizon, args.tol, &opts)?;
    Ok(Limits { model, lims })
}

fn cmd_asymptotics(
    out: &Output,
    args: &LimitArgs,
    grid: &Grid,
    q_floor: f64,
    workers: usize,
) -> anyhow::Result<Option<HypothesisFailure>> {
    let Limits { model, lims } = limits(args, workers)?;
    let sigma = model.sigma();
    let sep = steady_entropy_production(sigma, model.covariance(), &lims.d_plus, Some(&lims.d_minus));
    let q = q_operator(&lims)?;
    let lf = LimitFunctional::new(&q, sigma);
    let e_grid: Vec<Value> = grid
        .points()?
        .into_iter()
        .map(|a| json!({ "alpha": num(a), "e": num(lf.value(a)) }))
        .collect();
    let nu = spectral_measure_nu(&q, sigma, q_floor);
    let atoms: Vec<Value> = nu.atoms.iter().map(|a| json!({ "r": num(a.r), "w": num(a.w) })).collect();
    let dom = lf.domain();
    out.json(
        "asymptotics.json",
        &json!({
            "d_plus": matrix_value(&lims.d_plus),
            "window": [num(lims.window.0), num(lims.window.1)],
            "plateau_residual": num(lims.plateau_residual),
            "stationarity_defect": num(lims.stationarity_defect),
            "omega_plus_sigma": num(sep.omega_plus),
            "omega_minus_sigma": sep.omega_minus.map(num),
            "delta_bar": num(lims.delta_bar),
            "delta_series": lims.delta_series.iter().map(|(t, d)| json!([num(*t), num(*d)])).collect::<Vec<_>>(),
            "q_spectrum": [num(q.spectrum[0]), num(q.spectrum[q.spectrum.len() - 1])],
            "qspec_defect": num(q.qspec_defect),
            "domain": [num(dom.lower), num(dom.upper)],
            "e_grid": e_grid,
            "atoms": atoms,
            "dropped_mass": num(nu.dropped_mass),
            "warnings": nu.warnings,
            "notes": lims.notes,
        }),
    )?;
    Ok(None)
}

fn cmd_rate(out: &Output, args: &LimitArgs, grid: &Grid, workers: usize) -> anyhow::Result<Option<HypothesisFailure>> {
    let Limits { model, lims } = limits(args, workers)?;
    let q = q_operator(&lims)?;
    let rate = rate_function(&LimitFunctional::new(&q, model.sigma()).functional(), DomainKind::Reference)?;
    let (lo, hi) = lims.window;
    let times: Vec<f64> = (0..4).map(|i| lo + (hi - lo) * i as f64 / 3.0).collect();
    let ness_dom = sampled_ness_domain(&model, &lims.d_plus, &times)?;
    let ness = ness_limit_functional(LimitFunctional::new(&q, model.sigma()), ness_dom);
    let rate_plus = rate_function(&ness, DomainKind::Ness)?;
    let rows: Vec<Vec<f64>> = grid
        .points()?
        .into_iter()
        .map(|s| {
            let i = rate.eval(s);
            let im = rate.eval(-s);
            vec![s, i, rate_plus.eval(s), im, im - i - s]
        })
        .collect();
    out.csv("rate.csv", &["s", "I", "I_plus", "I_of_minus_s", "es_defect"], &rows)?;
    Ok(None)
}

fn random_symmetric(n: usize, seed: u64) -> Mat {
    use gauss_fluct::montecarlo::GaussianSampler;
    let z = GaussianSampler::new(&Mat::eye(n), seed).expect("identity is SPD").block(0, n);
    (&z + &z.t()) * 0.5
}

fn cmd_mc(out: &Output, check: &McCommand, seed: u64, workers: usize) -> anyhow::Result<Option<HypothesisFailure>> {
    match check {
        McCommand::Mgf { model, t, alpha, n, steps } => {
            let m = load(model)?;
            let b = sigma_integral_matrix(&m, *t, *steps)?;
            let est = empirical_mgf(&m, &b, *alpha, seed, *n, workers)?;
            let oracle = RenyiPencil::reference(&gauss_fluct::flow::flow_point(&m, *t)?)?.value(*alpha)?;
            out.json(
                "mc_mgf.json",
                &json!({
                    "estimate": num(est.estimate),
                    "std_error": num(est.std_error),
                    "oracle": num(oracle),
                    "z_score": num((est.estimate - oracle) / est.std_error),
                    "quadrature_error": num(b.error_estimate),
                }),
            )?;
        }
        McCommand::Slln { limit, measure, seeds, band } => {
            let Limits { model, lims } = limits(limit, workers)?;
            let sep = steady_entropy_production(model.sigma(), model.covariance(), &lims.d_plus, None);
            let cov = match measure {
                Measure::Reference => model.covariance().clone(),
                Measure::Ness => lims.d_plus.clone(),
            };
            let series = sigma_integral_series(&model, &log_grid(1.0, limit.horizon, 16), 0.01)?;
            let mut finals = Vec::new();
            for k in 0..*seeds {
                let traj = slln_trajectory(&series, &cov, seed.wrapping_add(k))?;
                finals.push(traj.last().map_or(f64::NAN, |p| p.1));
            }
            let omega = sep.omega_plus;
            let hits = finals.iter().filter(|v| ((*v - omega) / omega).abs() <= *band).count();
            out.json(
                "mc_slln.json",
                &json!({
                    "omega_plus_sigma": num(omega),
                    "horizon": num(limit.horizon),
                    "final_values": finals.iter().map(|v| num(*v)).collect::<Vec<_>>(),
                    "within_band": hits,
                    "seeds": seeds,
                    "band": num(*band),
                }),
            )?;
        }
        McCommand::Clt { limit, measure, t, n } => {
            let Limits { model, lims } = limits(limit, workers)?;
            let q = q_operator(&lims)?;
            let lf = LimitFunctional::new(&q, model.sigma());
            let sep = steady_entropy_production(model.sigma(), model.covariance(), &lims.d_plus, None);
            let (cov, variance) = match measure {
                Measure::Reference => (model.covariance().clone(), clt_variance(&lf.functional(), 1.0)?),
                Measure::Ness => (lims.d_plus.clone(), clt_variance(&lf.functional(), 0.0)?),
            };
            let b = sigma_integral_matrix(&model, *t, (t.abs() * 100.0).ceil() as usize / 4 * 4 + 16)?;
            let rep = clt_sample(&b, &cov, sep.omega_plus, variance, seed, *n, workers)?;
            let hist: Vec<Vec<f64>> = rep.histogram.iter().map(|(a, b, c)| vec![*a, *b, *c as f64]).collect();
            out.json(
                "mc_clt.json",
                &json!({
                    "t": num(rep.t),
                    "predicted_variance": num(rep.predicted_variance),
                    "sample_mean": num(rep.sample_mean),
                    "sample_variance": num(rep.sample_variance),
                    "ks": num(rep.ks),
                    "skipped": rep.skipped,
                    "note": rep.note,
                }),
            )?;
            if out.dir.is_some() {
                out.csv("clt_histogram.csv", &["bin_lo", "bin_hi", "count"], &hist)?;
            }
        }
        McCommand::Trace { model, n, matrices } => {
            let m = load(model)?;
            let mut checks = Vec::new();
            for k in 0..*matrices {
                let a = random_symmetric(m.dim(), seed.wrapping_add(1 + k as u64));
                let c = trace_identity(m.covariance(), &a, seed, *n, workers)?;
                checks.push(json!({
                    "estimate": num(c.estimate),
                    "std_error": num(c.std_error),
                    "exact": num(c.exact),
                    "z_score": num(c.z_score),
                }));
            }
            out.json("mc_trace.json", &Value::Array(checks))?;
        }
        McCommand::ChangeOfMeasure { model, t, n } => {
            let m = load(model)?;
            let c = change_of_measure(&m, *t, seed, *n, workers)?;
            out.json(
                "mc_change_of_measure.json",
                &json!({
                    "estimate": num(c.estimate),
                    "std_error": num(c.std_error),
                    "exact": num(c.exact),
                    "z_score": num(c.z_score),
                }),
            )?;
        }
    }
    Ok(None)
}

fn cmd_oracle(out: &Output, path: &Path, times: &[f64], points: usize) -> anyhow::Result<Option<HypothesisFailure>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: ModelFile = serde_json::from_str(&text).map_err(Error::from)?;
    let MatrixSource::Builder { builder } = &file.generator else {
        bail!("oracle-compare needs a builder model (toy or homogeneous chain)");
    };
    let mut rows = Vec::new();
    match builder {
        BuilderSpec::Toy(spec) => {
            let (m, oracle) = build_toy(spec)?;
            let d_plus = Mat::eye(m.dim());
            for &t in times {
                let fp = gauss_fluct::flow::flow_point(&m, t)?;
                let reference = RenyiPencil::reference(&fp)?;
                let ness = RenyiPencil::ness(&fp, &d_plus)?;
                let dom = reference.domain()?;
                let (d, rho) = (oracle.delta_t(t), oracle.ness_radius(t));
                let mut worst = 0.0_f64;
                let mut worst_plus = 0.0_f64;
                for i in 1..=points {
                    let f = i as f64 / (points + 1) as f64;
                    let a = -d + (1.0 + 2.0 * d) * f;
                    worst = worst.max((reference.value(a)? - oracle.e_t(t, a)).abs());
                    let b = -rho + 2.0 * rho * f;
                    worst_plus = worst_plus.max((ness.value(b)? - oracle.e_t_plus(t, b)).abs());
                }
                rows.push(json!({
                    "t": num(t),
                    "delta_t": num(dom.delta_t),
                    "delta_t_oracle": num(d),
                    "max_abs_diff_e_t": num(worst),
                    "max_abs_diff_e_t_plus": num(worst_plus),
                }));
            }
        }
        BuilderSpec::Chain(p) if p.omega.is_none() && p.kappa.is_none() && !p.perturbed => {
            let spec = gauss_fluct::models::ChainSpec::new(p.n_left, p.n_right, (p.temps[0], p.temps[1], p.temps[2]));
            let (m, oracle) = build_chain(&spec)?;
            let oracle = oracle.expect("homogeneous chain has an oracle");
            for &t in times {
                let p = RenyiPencil::reference(&gauss_fluct::flow::flow_point(&m, t)?)?;
                let mut cells = Vec::new();
                for a in [0.25, 0.5, 0.75] {
                    let v = p.value(a)? / t;
                    cells.push(json!({ "alpha": num(a), "scaled_e_t": num(v), "e_limit": num(oracle.e(a)) }));
                }
                rows.push(json!({ "t": num(t), "values": cells }));
            }
        }
        _ => bail!("no closed-form oracle for this builder"),
    }
    out.json("oracle_compare.json", &Value::Array(rows))?;
    Ok(None)
}
