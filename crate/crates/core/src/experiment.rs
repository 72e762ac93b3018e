//! Batch comparison of the strategies on simulated paths.
//!
//! Every path is simulated over twice the evaluation horizon. The first half
//! trains the band models; all strategies are then run on the second half,
//! with times re-based to zero so the value-ratio network sees `t in [0, T]`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backtest::{dynamic_switching, mvc_strategy, portfolio_return, run_strategy, sc_strategy, StrategyTrace, SwitchMode};
use crate::bandml::{live_strategy, train_band_model, BandKind, DEFAULT_BANDS, DEFAULT_GRID_STEP};
use crate::dgm::{cointelation_pde_problem, train, z_domain_from_simulation, CointelationPde, Domain, LossWeights, Optimizer, TrainConfig, TrainReport};
use crate::error::{ensure, Error, Result};
use crate::exec::{map_indexed, Exec};
use crate::mvc::DEFAULT_TAU;
use crate::net::{init_network, DgmNetwork};
use crate::sim::{path_seed, simulate_pair, CointelationParams, PathPair, DAILY, DEFAULT_SUBSTEPS};
use crate::stats::Welford;

pub const HISTOGRAM_BINS: usize = 41;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "MVC")]
    Mvc,
    #[serde(rename = "SC")]
    Sc,
    /// Band model restricted to the long/short kinds.
    #[serde(rename = "ML_LS")]
    MlLs,
    #[serde(rename = "ML")]
    Ml,
    /// Dynamic switching between SC and MVC.
    #[serde(rename = "FM")]
    Fm,
}

impl Label {
    pub const ALL: [Label; 5] = [Label::Mvc, Label::Sc, Label::MlLs, Label::Ml, Label::Fm];

    pub fn name(self) -> &'static str {
        match self {
            Label::Mvc => "MVC",
            Label::Sc => "SC",
            Label::MlLs => "ML_LS",
            Label::Ml => "ML",
            Label::Fm => "FM",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s) || (s.eq_ignore_ascii_case("DS") && *l == Label::Fm))
            .ok_or_else(|| Error::InvalidInput(format!("unknown strategy {s:?}")))
    }

    fn needs_network(self) -> bool {
        matches!(self, Label::Sc | Label::Fm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub params: CointelationParams,
    /// Evaluation horizon in steps; paths are simulated over twice this.
    pub horizon_days: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub strategies: Vec<Label>,
    pub dt: f64,
    pub substeps: usize,
    pub tau: f64,
    pub gamma: f64,
    pub v0: f64,
    pub bands: usize,
    pub grid_step: f64,
    pub switch_mode: SwitchMode,
    /// Path whose full traces are kept for plotting.
    pub illustrative_path: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            params: CointelationParams::example1(),
            horizon_days: 1000,
            n_paths: 500,
            seed: 0,
            strategies: Label::ALL.to_vec(),
            dt: DAILY,
            substeps: DEFAULT_SUBSTEPS,
            tau: DEFAULT_TAU,
            gamma: 0.5,
            v0: 1.0,
            bands: DEFAULT_BANDS,
            grid_step: DEFAULT_GRID_STEP,
            switch_mode: SwitchMode::Shadow,
            illustrative_path: 0,
            exec: Exec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        ensure(self.n_paths >= 1, || "n_paths must be >= 1".into())?;
        ensure(self.horizon_days >= 2, || format!("horizon_days must be >= 2, got {}", self.horizon_days))?;
        ensure(self.dt.is_finite() && self.dt > 0.0, || format!("dt must be > 0, got {}", self.dt))?;
        ensure(self.substeps >= 1, || "substeps must be >= 1".into())?;
        ensure(self.tau.is_finite() && self.tau >= 0.0, || format!("tau must be >= 0, got {}", self.tau))?;
        ensure(self.gamma < 1.0 && self.gamma != 0.0, || format!("gamma must be < 1 and nonzero, got {}", self.gamma))?;
        ensure(self.v0.is_finite() && self.v0 > 0.0, || format!("v0 must be > 0, got {}", self.v0))?;
        ensure(self.bands >= 1, || "bands must be >= 1".into())?;
        let mut seen = std::collections::HashSet::new();
        ensure(self.strategies.iter().all(|s| seen.insert(*s)), || "duplicate strategy in roster".into())
    }

    /// Evaluation horizon in model time units.
    pub fn horizon(&self) -> f64 {
        self.horizon_days as f64 * self.dt
    }

    pub fn needs_network(&self) -> bool {
        self.strategies.iter().any(|s| s.needs_network())
    }
}

/// Network, domain and optimiser settings for the pairs value-ratio solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgmSettings {
    pub hidden: usize,
    pub layers: usize,
    pub net_seed: u64,
    /// Paths simulated to size the `z` domain.
    pub domain_paths: usize,
    pub domain_seed: u64,
    /// Train on the residual divided by `sigma~ f^2`.
    pub normalized: bool,
    pub alpha0: f64,
    pub lambda_decay: f64,
    pub max_steps: usize,
    pub batch_interior: usize,
    pub batch_terminal: usize,
    pub tolerance: f64,
    pub train_seed: u64,
    /// Adam instead of plain gradient descent.
    pub adam: bool,
    pub warm_start_steps: usize,
    pub log_every: usize,
}

impl Default for DgmSettings {
    fn default() -> Self {
        Self {
            hidden: 20,
            layers: 2,
            net_seed: 1,
            domain_paths: 200,
            domain_seed: 7,
            normalized: true,
            alpha0: 3e-3,
            lambda_decay: 0.99995,
            max_steps: 80_000,
            batch_interior: 64,
            batch_terminal: 32,
            tolerance: 1e-10,
            train_seed: 0,
            adam: true,
            warm_start_steps: 1000,
            log_every: 1000,
        }
    }
}

impl DgmSettings {
    pub fn train_config(&self, exec: Exec) -> TrainConfig {
        TrainConfig {
            alpha0: self.alpha0,
            lambda_decay: self.lambda_decay,
            batch_interior: self.batch_interior,
            batch_terminal: self.batch_terminal,
            max_steps: self.max_steps,
            tolerance: self.tolerance,
            seed: self.train_seed,
            weights: LossWeights::default(),
            optimizer: if self.adam { Optimizer::adam() } else { Optimizer::Sgd },
            log_every: self.log_every.max(1),
            warm_start_steps: self.warm_start_steps,
            exec,
            ..TrainConfig::default()
        }
    }
}

/// A trained pairs network with the (unnormalised) problem it solves.
#[derive(Debug, Clone)]
pub struct TrainedPairs {
    pub net: DgmNetwork,
    pub report: TrainReport,
    pub problem: CointelationPde,
}

/// Sizes the `z` domain by simulation over `horizon`, then trains.
pub fn train_pairs_network(
    params: &CointelationParams,
    gamma: f64,
    horizon: f64,
    dt: f64,
    settings: &DgmSettings,
    exec: Exec,
) -> Result<TrainedPairs> {
    let (lo, hi) = z_domain_from_simulation(params, horizon, dt, settings.domain_paths, settings.domain_seed, exec)?;
    let problem = cointelation_pde_problem(params, gamma, Domain::new(horizon, lo, hi)?)?;
    let target = CointelationPde { normalized: settings.normalized, ..problem };
    let net = init_network(settings.hidden, settings.layers, settings.net_seed)?;
    let (net, report) = train(net, &target, &settings.train_config(exec))?;
    report.check()?;
    Ok(TrainedPairs { net, report, problem })
}

/// Results for one path; `returns` follows the roster order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathOutcome {
    pub index: usize,
    pub seed: u64,
    pub returns: Vec<f64>,
    /// Share of steps on which switching traded SC.
    pub fm_sc_share: Option<f64>,
    pub fallback_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyStats {
    pub label: Label,
    pub mean: f64,
    pub std_error: f64,
    pub std_dev: f64,
    /// Paths on which the book was ruined.
    pub ruined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// Excess return of `a` over `b`.
    pub a: Label,
    pub b: Label,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + w * i as f64, self.lo + w * (i + 1) as f64)
    }
}

/// `bins` equal-width bins over the observed range; a zero-width range puts
/// everything in the middle bin.
pub fn histogram(values: &[f64], bins: usize) -> (f64, f64, Vec<usize>) {
    let mut counts = vec![0; bins];
    if values.is_empty() || bins == 0 {
        return (f64::NAN, f64::NAN, counts);
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in values {
        let i = if hi > lo { (((v - lo) / (hi - lo)) * bins as f64) as usize } else { bins / 2 };
        counts[i.min(bins - 1)] += 1;
    }
    (lo, hi, counts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub seed: u64,
    pub n_paths: usize,
    pub stats: Vec<StrategyStats>,
    /// `(a, b, fraction of paths with return_a > return_b)`.
    pub win_rates: Vec<(Label, Label, f64)>,
    pub histograms: Vec<Histogram>,
    /// Labels by increasing mean return, joined with `" < "`.
    pub ranking: String,
}

impl ExperimentSummary {
    pub fn stats_for(&self, label: Label) -> Option<&StrategyStats> {
        self.stats.iter().find(|s| s.label == label)
    }

    pub fn win_rate(&self, a: Label, b: Label) -> Option<f64> {
        self.win_rates.iter().find(|w| w.0 == a && w.1 == b).map(|w| w.2)
    }
}

/// Traces of the illustrative path.
#[derive(Debug, Clone, PartialEq)]
pub struct Illustration {
    pub index: usize,
    pub path: PathPair,
    pub traces: Vec<StrategyTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub roster: Vec<Label>,
    pub paths: Vec<PathOutcome>,
    pub summary: ExperimentSummary,
    pub illustration: Option<Illustration>,
}

impl ExperimentOutput {
    /// Per-path returns of one strategy.
    pub fn returns(&self, label: Label) -> Option<Vec<f64>> {
        let j = self.roster.iter().position(|l| *l == label)?;
        Some(self.paths.iter().map(|p| p.returns[j]).collect())
    }

    /// Mean and standard error of the per-path difference `a - b`.
    pub fn paired_difference(&self, a: Label, b: Label) -> Option<(f64, f64)> {
        let (ra, rb) = (self.returns(a)?, self.returns(b)?);
        let w: Welford = ra.iter().zip(&rb).map(|(x, y)| x - y).collect();
        Some((w.mean(), w.std_error()))
    }
}

/// Runs the roster on the evaluation half of one doubled-horizon path.
pub fn run_path(config: &ExperimentConfig, net: Option<&DgmNetwork>, index: usize) -> Result<(PathOutcome, PathPair, Vec<StrategyTrace>)> {
    let seed = path_seed(config.seed, index);
    let h = config.horizon_days;
    let full = simulate_pair(&config.params, 2.0 * config.horizon(), config.dt, config.substeps, seed)?;
    let (train, live) = (full.window(0, h), full.window(h, 2 * h));
    let p = &config.params;
    let need_net = || net.ok_or_else(|| Error::InvalidInput("SC and FM require a trained network".into()));

    let mut traces = Vec::with_capacity(config.strategies.len());
    let mut fm_sc_share = None;
    for label in &config.strategies {
        let name = label.name();
        let trace = match label {
            Label::Mvc => run_strategy(&live, mvc_strategy(p, config.tau, config.dt)?, config.v0, name)?,
            Label::Sc => run_strategy(&live, sc_strategy(need_net()?, p, config.gamma)?, config.v0, name)?,
            Label::Fm => {
                let sc = sc_strategy(need_net()?, p, config.gamma)?;
                let mut ds = dynamic_switching(sc, mvc_strategy(p, config.tau, config.dt)?, config.switch_mode);
                let tr = run_strategy(&live, &mut ds, config.v0, name)?;
                fm_sc_share = Some(ds.first_share());
                tr
            }
            Label::Ml | Label::MlLs => {
                let kinds: &[BandKind] = if *label == Label::Ml { &BandKind::ALL } else { &BandKind::PAIRS };
                let model = train_band_model(&train, config.bands, config.grid_step, kinds, Exec::Sequential)?;
                run_strategy(&live, live_strategy(&model)?, config.v0, name)?
            }
        };
        traces.push(trace);
    }
    let outcome = PathOutcome {
        index,
        seed,
        returns: traces.iter().map(portfolio_return).collect(),
        fm_sc_share,
        fallback_events: traces.iter().map(|t| t.fallback_events).sum(),
    };
    Ok((outcome, live, traces))
}

fn summarize(config: &ExperimentConfig, paths: &[PathOutcome], ruined: &[Vec<bool>]) -> ExperimentSummary {
    let roster = &config.strategies;
    let col = |j: usize| paths.iter().map(move |p| p.returns[j]);
    let stats: Vec<StrategyStats> = roster
        .iter()
        .enumerate()
        .map(|(j, label)| {
            let w: Welford = col(j).collect();
            let mean = col(j).sum::<f64>() / paths.len() as f64;
            StrategyStats {
                label: *label,
                mean,
                std_error: w.std_error(),
                std_dev: w.std_dev(),
                ruined: ruined.iter().filter(|r| r[j]).count(),
            }
        })
        .collect();

    let mut win_rates = Vec::new();
    for (i, a) in roster.iter().enumerate() {
        for (j, b) in roster.iter().enumerate() {
            if i != j {
                let wins = paths.iter().filter(|p| p.returns[i] > p.returns[j]).count();
                win_rates.push((*a, *b, wins as f64 / paths.len() as f64));
            }
        }
    }

    let mut histograms = Vec::new();
    for (a, b) in [(Label::MlLs, Label::Sc), (Label::Ml, Label::Fm)] {
        let (Some(i), Some(j)) = (roster.iter().position(|l| *l == a), roster.iter().position(|l| *l == b)) else {
            continue;
        };
        let excess: Vec<f64> = paths.iter().map(|p| p.returns[i] - p.returns[j]).collect();
        let (lo, hi, counts) = histogram(&excess, HISTOGRAM_BINS);
        histograms.push(Histogram { a, b, lo, hi, counts });
    }

    let mut order: Vec<&StrategyStats> = stats.iter().collect();
    order.sort_by(|a, b| a.mean.total_cmp(&b.mean));
    let ranking = order.iter().map(|s| s.label.name()).collect::<Vec<_>>().join(" < ");

    ExperimentSummary { seed: config.seed, n_paths: paths.len(), stats, win_rates, histograms, ranking }
}

/// Runs every path, keeps the traces of the illustrative one and aggregates.
pub fn run_experiment(config: &ExperimentConfig, net: Option<&DgmNetwork>) -> Result<ExperimentOutput> {
    config.validate()?;
    if config.needs_network() && net.is_none() {
        return Err(Error::InvalidInput("SC and FM require a trained network; supply a checkpoint or enable training".into()));
    }
    let results = map_indexed(config.exec, config.n_paths, |i| {
        run_path(config, net, i).map(|(outcome, live, traces)| {
            let ruined: Vec<bool> = traces.iter().map(|t| t.halted_at.is_some()).collect();
            let keep = (i == config.illustrative_path).then_some((live, traces));
            (outcome, ruined, keep)
        })
    });
    let mut paths = Vec::with_capacity(config.n_paths);
    let mut ruined = Vec::with_capacity(config.n_paths);
    let mut illustration = None;
    for r in results {
        let (outcome, r, keep) = r?;
        if let Some((path, traces)) = keep {
            illustration = Some(Illustration { index: outcome.index, path, traces });
        }
        paths.push(outcome);
        ruined.push(r);
    }
    let summary = summarize(config, &paths, &ruined);
    Ok(ExperimentOutput { roster: config.strategies.clone(), paths, summary, illustration })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

/// Writes the summary table, per-path returns, win rates, excess-return
/// histograms and the illustrative path's series into `outdir`. Returns the
/// file names written.
pub fn emit_outputs(output: &ExperimentOutput, outdir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(outdir)?;
    let s = &output.summary;
    let seed_line = format!("# root_seed={} n_paths={}", s.seed, s.n_paths);
    let mut written = Vec::new();

    let mut f = create(outdir, "summary.csv")?;
    writeln!(f, "{seed_line}")?;
    writeln!(f, "criterion,average_return,std_error,ruined")?;
    for st in &s.stats {
        writeln!(f, "{},{},{},{}", st.label.name(), st.mean, st.std_error, st.ruined)?;
    }
    f.flush()?;
    written.push("summary.csv".to_string());

    let mut f = create(outdir, "ranking.txt")?;
    writeln!(f, "{seed_line}")?;
    writeln!(f, "{}", s.ranking)?;
    f.flush()?;
    written.push("ranking.txt".to_string());

    let mut f = create(outdir, "returns.csv")?;
    writeln!(f, "{seed_line}")?;
    let names: Vec<&str> = output.roster.iter().map(|l| l.name()).collect();
    writeln!(f, "path,seed,{}", names.join(","))?;
    for p in &output.paths {
        let vals: Vec<String> = p.returns.iter().map(|r| r.to_string()).collect();
        writeln!(f, "{},{},{}", p.index, p.seed, vals.join(","))?;
    }
    f.flush()?;
    written.push("returns.csv".to_string());

    let mut f = create(outdir, "win_rates.csv")?;
    writeln!(f, "{seed_line}")?;
    writeln!(f, "strategy,versus,win_rate")?;
    for (a, b, r) in &s.win_rates {
        writeln!(f, "{},{},{r}", a.name(), b.name())?;
    }
    f.flush()?;
    written.push("win_rates.csv".to_string());

    for h in &s.histograms {
        let name = format!("excess_{}_vs_{}.csv", h.a.name(), h.b.name());
        let mut f = create(outdir, &name)?;
        writeln!(f, "{seed_line}")?;
        writeln!(f, "bin_lo,bin_hi,count")?;
        for (i, c) in h.counts.iter().enumerate() {
            let (lo, hi) = h.bin_edges(i);
            writeln!(f, "{lo},{hi},{c}")?;
        }
        f.flush()?;
        written.push(name);
    }

    if let Some(ill) = &output.illustration {
        let mut f = create(outdir, "illustrative_path.csv")?;
        writeln!(f, "{seed_line} path={}", ill.index)?;
        let mut cols = vec!["step".to_string(), "time".into(), "x".into(), "y".into(), "spread".into()];
        for t in &ill.traces {
            cols.extend([format!("w1_{}", t.label), format!("w2_{}", t.label), format!("V_{}", t.label)]);
        }
        writeln!(f, "{}", cols.join(","))?;
        for k in 0..ill.path.len() {
            let mut row = vec![
                k.to_string(),
                ill.path.times[k].to_string(),
                ill.path.x[k].to_string(),
                ill.path.y[k].to_string(),
                (ill.path.x[k] - ill.path.y[k]).to_string(),
            ];
            for t in &ill.traces {
                row.extend([t.w1[k].to_string(), t.w2[k].to_string(), t.wealth[k].to_string()]);
            }
            writeln!(f, "{}", row.join(","))?;
        }
        f.flush()?;
        written.push("illustrative_path.csv".to_string());
    }
    Ok(written)
}
