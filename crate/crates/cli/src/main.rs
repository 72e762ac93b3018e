//! `cointel`: command-line driver for simulation, diagnostics, moments,
//! network training, backtests and the batch strategy comparison.
//!
//! Settings come from an optional TOML file (`--config`) laid out as
//!
//! ```toml
//! out = "results"
//!
//! [experiment]
//! horizon_days = 1000
//! n_paths = 500
//! seed = 0
//! strategies = ["MVC", "SC", "ML_LS", "ML", "FM"]
//!
//! [experiment.params]
//! mu = 0.05
//! sigma = 0.17
//! kappa = 0.1
//! eta = 0.16
//! rho = -0.6
//! x0 = 1.0
//! y0 = 1.0
//!
//! [dgm]
//! hidden = 20
//! max_steps = 80000
//! ```
//!
//! and command-line flags override file values. Exit codes: 0 success,
//! 2 invalid configuration, 3 numerical fault, 4 I/O failure.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use cointel_core::backtest::{dynamic_switching, mvc_strategy, run_strategy, sc_strategy, write_trace, FixedWeights, SwitchMode};
use cointel_core::bandml::{band_gaussian_fit, live_strategy, train_band_model, write_strategy_table, BandKind};
use cointel_core::dgm::{merton_analytic, merton_problem, residual_rms, train, TrainReport};
use cointel_core::experiment::{emit_outputs, run_experiment, train_pairs_network, DgmSettings, ExperimentConfig, Label};
use cointel_core::moments::{mc_moment_oracle, return_moments, McConfig};
use cointel_core::mvc::{mvc_utility, mvc_weights_from_moments};
use cointel_core::net::{init_network, DgmNetwork};
use cointel_core::sim::{
    cointelation_test, count_crosses, estimation_zones, path_seed, simulate_pair, CointelationHypothesis, PathPair, Zone,
};
use cointel_core::{Error, Exec};

#[derive(Parser, Debug)]
#[command(name = "cointel", version, about = "Cointelated pairs: simulation, moments, DGM training and strategy backtests")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    mu: Option<f64>,
    #[arg(long, global = true)]
    sigma: Option<f64>,
    #[arg(long, global = true)]
    kappa: Option<f64>,
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    x0: Option<f64>,
    #[arg(long, global = true)]
    y0: Option<f64>,
    #[arg(long, global = true)]
    horizon_days: Option<usize>,
    #[arg(long, global = true)]
    n_paths: Option<usize>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    substeps: Option<usize>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    v0: Option<f64>,
    /// Band count for the band-wise strategies.
    #[arg(long, global = true)]
    bands: Option<usize>,
    #[arg(long, global = true)]
    grid_step: Option<f64>,
    /// Comma-separated roster, e.g. `MVC,SC,FM`.
    #[arg(long, global = true, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    #[arg(long, global = true, value_enum)]
    switch_mode: Option<SwitchArg>,
    /// Run batches on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    /// Load the pairs network instead of training it.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Fail instead of training when no checkpoint is given.
    #[arg(long, global = true)]
    no_train: bool,
    #[arg(long, global = true)]
    hidden: Option<usize>,
    #[arg(long, global = true)]
    layers: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    alpha0: Option<f64>,
    #[arg(long, global = true)]
    lambda_decay: Option<f64>,
    /// Record real elapsed seconds in training logs instead of `NA`.
    #[arg(long, global = true)]
    log_wall_time: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SwitchArg {
    Shadow,
    OneBook,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate pair paths.
    Simulate,
    /// Run the cointelation test on one simulated path.
    Diagnose {
        /// Index of the path within the batch.
        #[arg(long, default_value_t = 0)]
        path_index: usize,
        /// Constant of the crossing formula.
        #[arg(long, default_value_t = 0.05)]
        gamma_c: f64,
    },
    /// Closed-form one-step moments, optionally against Monte Carlo.
    Moments {
        #[arg(long, default_value_t = 1.0)]
        x: f64,
        #[arg(long, default_value_t = 1.0)]
        y: f64,
        /// Also estimate the moments from this many simulated steps.
        #[arg(long)]
        mc_paths: Option<usize>,
    },
    /// Mean-variance weights at given prices.
    Mvc {
        #[arg(long, default_value_t = 1.0)]
        x: f64,
        #[arg(long, default_value_t = 1.0)]
        y: f64,
    },
    /// Train the pairs value-ratio network (or the Merton benchmark).
    DgmTrain {
        #[arg(long, value_enum, default_value_t = Problem::Pairs)]
        problem: Problem,
    },
    /// Run one strategy on one simulated path and write its trace.
    Backtest {
        #[arg(long, value_enum, default_value_t = StrategyArg::Mvc)]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 0)]
        path_index: usize,
        /// Weights for `--strategy fixed`.
        #[arg(long, num_args = 2, allow_hyphen_values = true, default_values_t = [0.5, 0.5])]
        weights: Vec<f64>,
    },
    /// Train band strategies on the first half of a path.
    BandmlTrain {
        #[arg(long, default_value_t = 0)]
        path_index: usize,
        /// Restrict to long/short kinds.
        #[arg(long)]
        pairs_only: bool,
    },
    /// Full strategy comparison over many paths.
    Experiment,
}

#[derive(Copy, Clone, Debug, PartialEq, ValueEnum)]
enum Problem {
    Pairs,
    Merton,
}

#[derive(Copy, Clone, Debug, PartialEq, ValueEnum)]
enum StrategyArg {
    Mvc,
    Sc,
    Ds,
    Ml,
    MlLs,
    Fixed,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    out: Option<PathBuf>,
    experiment: ExperimentConfig,
    dgm: DgmSettings,
}

struct Settings {
    out: PathBuf,
    exp: ExperimentConfig,
    dgm: DgmSettings,
}

fn load_settings(c: &Common) -> Result<Settings, Error> {
    let file = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str::<FileConfig>(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let mut exp = file.experiment;
    let mut dgm = file.dgm;
    let p = &mut exp.params;
    macro_rules! set {
        ($($flag:ident => $dst:expr),* $(,)?) => {$( if let Some(v) = c.$flag { $dst = v; } )*};
    }
    set!(mu => p.mu, sigma => p.sigma, kappa => p.kappa, eta => p.eta, rho => p.rho, x0 => p.x0, y0 => p.y0);
    set!(
        seed => exp.seed, horizon_days => exp.horizon_days, n_paths => exp.n_paths, dt => exp.dt,
        substeps => exp.substeps, tau => exp.tau, gamma => exp.gamma, v0 => exp.v0, bands => exp.bands,
        grid_step => exp.grid_step,
    );
    set!(hidden => dgm.hidden, layers => dgm.layers, steps => dgm.max_steps, alpha0 => dgm.alpha0, lambda_decay => dgm.lambda_decay);
    if let Some(list) = &c.strategies {
        exp.strategies = list.iter().filter(|s| !s.is_empty()).map(|s| Label::parse(s.trim())).collect::<Result<_, _>>()?;
    }
    if let Some(m) = c.switch_mode {
        exp.switch_mode = match m {
            SwitchArg::Shadow => SwitchMode::Shadow,
            SwitchArg::OneBook => SwitchMode::OneBook,
        };
    }
    exp.exec = if c.sequential { Exec::Sequential } else { Exec::Parallel };
    exp.validate()?;
    let out = c.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("cointel-out"));
    Ok(Settings { out, exp, dgm })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<fs::File>, Error> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

fn header(seed: u64) -> String {
    format!("# root_seed={seed}")
}

fn batch_path(s: &Settings, index: usize) -> Result<PathPair, Error> {
    let e = &s.exp;
    simulate_pair(&e.params, e.horizon(), e.dt, e.substeps, path_seed(e.seed, index))
}

fn cmd_simulate(s: &Settings) -> Result<(), Error> {
    let e = &s.exp;
    let paths = cointel_core::exec::map_indexed(e.exec, e.n_paths, |i| batch_path(s, i));
    let mut f = create(&s.out, "paths.csv")?;
    writeln!(f, "{}", header(e.seed))?;
    writeln!(f, "path,seed,step,time,x,y")?;
    for (i, p) in paths.into_iter().enumerate() {
        let p = p?;
        for k in 0..p.len() {
            writeln!(f, "{i},{},{k},{},{},{}", p.seed, p.times[k], p.x[k], p.y[k])?;
        }
    }
    f.flush()?;
    Ok(())
}

fn cmd_diagnose(s: &Settings, index: usize, gamma_c: f64) -> Result<(), Error> {
    let p = batch_path(s, index)?;
    let hyp = CointelationHypothesis::from_params(&s.exp.params, s.exp.dt, gamma_c);
    let rep = cointelation_test(&p.x, &p.y, &hyp)?;
    let zones = estimation_zones(&p.x, &p.y)?;
    let mut f = create(&s.out, "diagnose.csv")?;
    writeln!(f, "{} path={index}", header(s.exp.seed))?;
    writeln!(f, "check,lag,empirical,expected,pass")?;
    for l in &rep.lags {
        let emp = l.empirical.map_or("NA".to_string(), |v| v.to_string());
        writeln!(f, "inferred_correlation,{},{emp},{},{}", l.delta_t, l.approx, l.pass)?;
    }
    let c = &rep.crossings;
    writeln!(f, "crossings,{},{},{},{}", c.n, c.observed, c.expected, c.pass)?;
    writeln!(f, "raw_crossings,{},{},NA,NA", c.n, count_crosses(&p.x, &p.y))?;
    writeln!(f, "zone_rho,{},{},NA,NA", p.len(), zones.count(Zone::Rho))?;
    writeln!(f, "zone_kappa,{},{},NA,NA", p.len(), zones.count(Zone::Kappa))?;
    writeln!(f, "overall,NA,NA,NA,{}", rep.pass)?;
    f.flush()?;
    println!("cointelation test on path {index}: {}", if rep.pass { "pass" } else { "fail" });
    Ok(())
}

fn cmd_moments(s: &Settings, x: f64, y: f64, mc_paths: Option<usize>) -> Result<(), Error> {
    let e = &s.exp;
    let m = return_moments(&e.params, x, y, e.dt)?;
    let mut f = create(&s.out, "moments.csv")?;
    writeln!(f, "{} x={x} y={y} dt={}", header(e.seed), e.dt)?;
    writeln!(f, "moment,closed_form,mc_value,mc_std_error")?;
    let closed = [
        ("E[Y]", m.mean_y),
        ("E[XY]", m.mean_xy),
        ("E[Y^2]", m.mean_y2),
        ("e_rx", m.e_rx),
        ("e_ry", m.e_ry),
        ("var_rx", m.var_rx),
        ("var_ry", m.var_ry),
        ("cov_rxy", m.cov_rxy),
    ];
    let mc = match mc_paths {
        Some(n) => Some(mc_moment_oracle(&e.params, x, y, e.dt, &McConfig { exec: e.exec, ..McConfig::new(n, e.seed) })?),
        None => None,
    };
    for (i, (name, v)) in closed.iter().enumerate() {
        match &mc {
            Some(mc) => {
                let est = [mc.mean_y, mc.mean_xy, mc.mean_y2, mc.e_rx, mc.e_ry, mc.var_rx, mc.var_ry, mc.cov_rxy][i];
                writeln!(f, "{name},{v},{},{}", est.value, est.std_error)?;
            }
            None => writeln!(f, "{name},{v},NA,NA")?,
        }
    }
    writeln!(f, "flagged,{},NA,NA", m.flagged)?;
    f.flush()?;
    Ok(())
}

fn cmd_mvc(s: &Settings, x: f64, y: f64) -> Result<(), Error> {
    let e = &s.exp;
    let m = return_moments(&e.params, x, y, e.dt)?;
    let w = mvc_weights_from_moments(&m, e.tau)?;
    let cov = [[m.var_rx, m.cov_rxy], [m.cov_rxy, m.var_ry]];
    let u = mvc_utility(w.as_array(), m.mean_vector(), &cov, e.tau);
    let mut f = create(&s.out, "mvc.csv")?;
    writeln!(f, "{} x={x} y={y} tau={}", header(e.seed), e.tau)?;
    writeln!(f, "h1,h2,clipped,utility")?;
    writeln!(f, "{},{},{},{u}", w.h1, w.h2, w.clipped)?;
    f.flush()?;
    println!("h = ({}, {})", w.h1, w.h2);
    Ok(())
}

fn write_train_log(s: &Settings, rep: &TrainReport, wall_time: bool) -> Result<(), Error> {
    let mut f = create(&s.out, "train_log.csv")?;
    writeln!(f, "{}", header(s.dgm.train_seed))?;
    writeln!(f, "step,loss,alpha,wall_time")?;
    for e in &rep.loss_history {
        let wt = if wall_time { e.wall_time.to_string() } else { "NA".to_string() };
        writeln!(f, "{},{},{},{wt}", e.step, e.loss, e.alpha)?;
    }
    f.flush()?;
    Ok(())
}

/// Deterministic quasi-random points over `[0, T] x [lo, hi]`.
fn held_out_points(horizon: f64, lo: f64, hi: f64, n: usize) -> Vec<(f64, f64)> {
    const A1: f64 = 0.618_033_988_749_894_9;
    const A2: f64 = 0.754_877_666_246_692_7;
    (0..n).map(|i| ((i as f64 * A1).fract() * horizon, lo + (hi - lo) * (i as f64 * A2).fract())).collect()
}

fn pairs_network(s: &Settings, c: &Common) -> Result<DgmNetwork, Error> {
    if let Some(p) = &c.checkpoint {
        return DgmNetwork::load(p);
    }
    if c.no_train {
        return Err(Error::InvalidInput("no checkpoint given and training disabled".into()));
    }
    let e = &s.exp;
    let trained = train_pairs_network(&e.params, e.gamma, e.horizon(), e.dt, &s.dgm, e.exec)?;
    fs::create_dir_all(&s.out)?;
    trained.net.save(&s.out.join("checkpoint.txt"))?;
    write_train_log(s, &trained.report, c.log_wall_time)?;
    Ok(trained.net)
}

fn cmd_dgm_train(s: &Settings, c: &Common, problem: Problem) -> Result<(), Error> {
    let e = &s.exp;
    fs::create_dir_all(&s.out)?;
    let mut f = create(&s.out, "dgm_report.csv")?;
    writeln!(f, "{}", header(s.dgm.train_seed))?;
    writeln!(f, "quantity,value")?;
    match problem {
        Problem::Pairs => {
            let trained = train_pairs_network(&e.params, e.gamma, e.horizon(), e.dt, &s.dgm, e.exec)?;
            let d = trained.problem.domain;
            let pts = held_out_points(d.horizon, d.z_lo, d.z_hi, 400);
            let init = init_network(s.dgm.hidden, s.dgm.layers, s.dgm.net_seed)?.with_input_map(d.input_map());
            let (r0, r1) = (residual_rms(&init, &trained.problem, &pts), residual_rms(&trained.net, &trained.problem, &pts));
            let term = (0..=200)
                .map(|j| (trained.net.forward(d.horizon, d.z_lo + (d.z_hi - d.z_lo) * j as f64 / 200.0) - 1.0).abs())
                .fold(0.0, f64::max);
            for (k, v) in [("z_lo", d.z_lo), ("z_hi", d.z_hi), ("residual_rms_init", r0), ("residual_rms_trained", r1), ("terminal_max_error", term)] {
                writeln!(f, "{k},{v}")?;
            }
            writeln!(f, "steps_run,{}", trained.report.steps_run)?;
            writeln!(f, "final_loss,{}", trained.report.final_loss)?;
            trained.net.save(&s.out.join("checkpoint.txt"))?;
            write_train_log(s, &trained.report, c.log_wall_time)?;
            println!("residual rms {r0:e} -> {r1:e}");
        }
        Problem::Merton => {
            let (mu, sigma, gamma, horizon) = (0.1, 0.2, e.gamma, 1.0);
            let pde = merton_problem(mu, sigma, gamma, horizon, 0.0, 3.0)?;
            let net = init_network(s.dgm.hidden, s.dgm.layers, s.dgm.net_seed)?;
            let (net, rep) = train(net, &pde, &s.dgm.train_config(e.exec))?;
            rep.check()?;
            let mut worst: f64 = 0.0;
            for i in 0..=20 {
                for j in 0..=20 {
                    let (t, x) = (horizon * i as f64 / 20.0, 0.2 + 1.8 * j as f64 / 20.0);
                    let exact = merton_analytic(mu, sigma, gamma, horizon, t, x);
                    worst = worst.max(((net.forward(t, x) - exact) / exact).abs());
                }
            }
            writeln!(f, "max_relative_error,{worst}")?;
            writeln!(f, "steps_run,{}", rep.steps_run)?;
            net.save(&s.out.join("checkpoint.txt"))?;
            write_train_log(s, &rep, c.log_wall_time)?;
            println!("max relative error vs analytic {worst:e}");
        }
    }
    f.flush()?;
    Ok(())
}

fn cmd_backtest(s: &Settings, c: &Common, strategy: StrategyArg, index: usize, weights: &[f64]) -> Result<(), Error> {
    let e = &s.exp;
    let h = e.horizon_days;
    let full = simulate_pair(&e.params, 2.0 * e.horizon(), e.dt, e.substeps, path_seed(e.seed, index))?;
    let (train_half, live) = (full.window(0, h), full.window(h, 2 * h));
    let p = &e.params;
    let trace = match strategy {
        StrategyArg::Mvc => run_strategy(&live, mvc_strategy(p, e.tau, e.dt)?, e.v0, "MVC")?,
        StrategyArg::Fixed => run_strategy(&live, FixedWeights(weights[0], weights[1]), e.v0, "FIXED")?,
        StrategyArg::Ml | StrategyArg::MlLs => {
            let kinds: &[BandKind] = if strategy == StrategyArg::Ml { &BandKind::ALL } else { &BandKind::PAIRS };
            let model = train_band_model(&train_half, e.bands, e.grid_step, kinds, e.exec)?;
            let label = if strategy == StrategyArg::Ml { "ML" } else { "ML_LS" };
            run_strategy(&live, live_strategy(&model)?, e.v0, label)?
        }
        StrategyArg::Sc | StrategyArg::Ds => {
            let net = pairs_network(s, c)?;
            let sc = sc_strategy(&net, p, e.gamma)?;
            if strategy == StrategyArg::Sc {
                run_strategy(&live, sc, e.v0, "SC")?
            } else {
                let ds = dynamic_switching(sc, mvc_strategy(p, e.tau, e.dt)?, e.switch_mode);
                run_strategy(&live, ds, e.v0, "FM")?
            }
        }
    };
    let mut f = create(&s.out, "trace.csv")?;
    write_trace(&mut f, &trace, e.seed)?;
    f.flush()?;
    println!("{} return {}", trace.label, cointel_core::backtest::portfolio_return(&trace));
    Ok(())
}

fn cmd_bandml_train(s: &Settings, index: usize, pairs_only: bool) -> Result<(), Error> {
    let e = &s.exp;
    let full = simulate_pair(&e.params, 2.0 * e.horizon(), e.dt, e.substeps, path_seed(e.seed, index))?;
    let train_half = full.window(0, e.horizon_days);
    let kinds: &[BandKind] = if pairs_only { &BandKind::PAIRS } else { &BandKind::ALL };
    let model = train_band_model(&train_half, e.bands, e.grid_step, kinds, e.exec)?;
    let mut f = create(&s.out, "strategy_table.csv")?;
    write_strategy_table(&mut f, &model, e.seed)?;
    f.flush()?;
    let fit = band_gaussian_fit(&train_half.spread(), &model.bands)?;
    let mut g = create(&s.out, "band_fit.csv")?;
    writeln!(g, "{}", header(e.seed))?;
    writeln!(g, "band,count,mean,std_dev")?;
    for i in 0..fit.means.len() {
        writeln!(g, "{i},{},{},{}", fit.counts[i], fit.means[i], fit.std_devs[i])?;
    }
    g.flush()?;
    Ok(())
}

fn cmd_experiment(s: &Settings, c: &Common) -> Result<(), Error> {
    let net = if s.exp.needs_network() { Some(pairs_network(s, c)?) } else { None };
    let out = run_experiment(&s.exp, net.as_ref())?;
    emit_outputs(&out, &s.out)?;
    for st in &out.summary.stats {
        println!("{:6} mean {:+.4} (se {:.4})", st.label.name(), st.mean, st.std_error);
    }
    println!("ranking: {}", out.summary.ranking);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let s = load_settings(&cli.common)?;
    match &cli.command {
        Command::Simulate => cmd_simulate(&s),
        Command::Diagnose { path_index, gamma_c } => cmd_diagnose(&s, *path_index, *gamma_c),
        Command::Moments { x, y, mc_paths } => cmd_moments(&s, *x, *y, *mc_paths),
        Command::Mvc { x, y } => cmd_mvc(&s, *x, *y),
        Command::DgmTrain { problem } => cmd_dgm_train(&s, &cli.common, *problem),
        Command::Backtest { strategy, path_index, weights } => cmd_backtest(&s, &cli.common, *strategy, *path_index, weights),
        Command::BandmlTrain { path_index, pairs_only } => cmd_bandml_train(&s, *path_index, *pairs_only),
        Command::Experiment => cmd_experiment(&s, &cli.common),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 4,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
