//! Self-financing wealth evolution on a sampled path and the strategy rules.
//!
//! A strategy is a [`WeightRule`]: at step `k` it sees only the price prefix
//! `0..=k` and returns the fractions of current wealth held in each leg over
//! `k -> k+1`. Wealth compounds multiplicatively,
//!
//! ```text
//! V_{k+1} = V_k (1 + w1 R_X,k + w2 R_Y,k)
//! ```
//!
//! with one-step simple returns. A step that takes wealth to zero or below
//! ruins the book: wealth is floored at zero and trading stops.

use std::io::Write;

use serde::Serialize;

use crate::dgm::optimal_pi;
use crate::error::{ensure, Error, Result};
use crate::moments::{mc_moment_oracle, return_moments, McConfig};
use crate::mvc::mvc_weights;
use crate::net::DgmNetwork;
use crate::sim::{CointelationParams, PathPair};

/// Paths drawn by the Monte Carlo fallback when closed-form moments are unusable.
pub const FALLBACK_MC_PATHS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum StrategyKind {
    Mvc,
    Sc,
    Ds,
    BandMl,
    Fixed,
}

/// What a rule is allowed to see at step `k`: samples `0..=k`.
#[derive(Debug, Clone, Copy)]
pub struct Prefix<'a> {
    pub times: &'a [f64],
    pub x: &'a [f64],
    pub y: &'a [f64],
}

impl<'a> Prefix<'a> {
    pub fn step(&self) -> usize {
        self.x.len() - 1
    }

    pub fn t(&self) -> f64 {
        self.times[self.step()]
    }

    pub fn x_now(&self) -> f64 {
        self.x[self.step()]
    }

    pub fn y_now(&self) -> f64 {
        self.y[self.step()]
    }
}

/// A causal weight rule.
pub trait WeightRule {
    fn weights(&mut self, prefix: &Prefix) -> (f64, f64);

    fn kind(&self) -> StrategyKind;

    /// Steps where the rule fell back to a safe or approximate answer.
    fn fallback_events(&self) -> usize {
        0
    }
}

impl<R: WeightRule + ?Sized> WeightRule for &mut R {
    fn weights(&mut self, prefix: &Prefix) -> (f64, f64) {
        (**self).weights(prefix)
    }

    fn kind(&self) -> StrategyKind {
        (**self).kind()
    }

    fn fallback_events(&self) -> usize {
        (**self).fallback_events()
    }
}

/// Constant weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedWeights(pub f64, pub f64);

impl WeightRule for FixedWeights {
    fn weights(&mut self, _prefix: &Prefix) -> (f64, f64) {
        (self.0, self.1)
    }

    fn kind(&self) -> StrategyKind {
        StrategyKind::Fixed
    }
}

/// Per-step weights, wealth and P&L of one strategy on one path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyTrace {
    pub label: String,
    pub kind: StrategyKind,
    pub times: Vec<f64>,
    /// Weights held over `k -> k+1`; the last entry is always `(0, 0)`.
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub wealth: Vec<f64>,
    /// `V(t) - V(0)`.
    pub pnl: Vec<f64>,
    /// Step at which the book was ruined, if any.
    pub halted_at: Option<usize>,
    pub fallback_events: usize,
}

impl StrategyTrace {
    pub fn len(&self) -> usize {
        self.wealth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wealth.is_empty()
    }

    pub fn v0(&self) -> f64 {
        self.wealth[0]
    }

    pub fn terminal_wealth(&self) -> f64 {
        *self.wealth.last().expect("trace is never empty")
    }

    /// Sample standard deviation of the first weight over the traded steps.
    pub fn w1_std(&self) -> f64 {
        let n = self.w1.len().saturating_sub(1);
        self.w1[..n].iter().copied().collect::<crate::stats::Welford>().std_dev()
    }
}

/// Runs a rule over the path starting from wealth `v0`.
pub fn run_strategy<R: WeightRule>(path: &PathPair, mut rule: R, v0: f64, label: &str) -> Result<StrategyTrace> {
    ensure(v0.is_finite() && v0 > 0.0, || format!("v0 must be > 0, got {v0}"))?;
    ensure(path.len() >= 2, || "path needs at least two samples".into())?;
    let n = path.len();
    let mut w1 = Vec::with_capacity(n);
    let mut w2 = Vec::with_capacity(n);
    let mut wealth = Vec::with_capacity(n);
    let mut halted_at = None;
    let mut v = v0;
    wealth.push(v);
    for k in 0..n - 1 {
        if halted_at.is_some() {
            w1.push(0.0);
            w2.push(0.0);
            wealth.push(0.0);
            continue;
        }
        let prefix = Prefix { times: &path.times[..=k], x: &path.x[..=k], y: &path.y[..=k] };
        let (a, b) = rule.weights(&prefix);
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::Evaluation(format!("rule returned non-finite weights at step {k}")));
        }
        let rx = path.x[k + 1] / path.x[k] - 1.0;
        let ry = path.y[k + 1] / path.y[k] - 1.0;
        v *= 1.0 + a * rx + b * ry;
        if v <= 0.0 {
            v = 0.0;
            halted_at = Some(k + 1);
        }
        w1.push(a);
        w2.push(b);
        wealth.push(v);
    }
    w1.push(0.0);
    w2.push(0.0);
    let pnl = wealth.iter().map(|v| v - v0).collect();
    Ok(StrategyTrace {
        label: label.to_string(),
        kind: rule.kind(),
        times: path.times.clone(),
        w1,
        w2,
        wealth,
        pnl,
        halted_at,
        fallback_events: rule.fallback_events(),
    })
}

/// `(V(T) - V(0)) / V(0)`.
pub fn portfolio_return(trace: &StrategyTrace) -> f64 {
    (trace.terminal_wealth() - trace.v0()) / trace.v0()
}

// ---------------------------------------------------------------------------
// Mean-variance
// ---------------------------------------------------------------------------

/// Closed-form mean-variance weights recomputed every step from the
/// one-step moments conditioned on current prices.
#[derive(Debug, Clone)]
pub struct MvcRule {
    params: CointelationParams,
    tau: f64,
    dt: f64,
    fallbacks: usize,
    last: (f64, f64),
}

pub fn mvc_strategy(params: &CointelationParams, tau: f64, dt: f64) -> Result<MvcRule> {
    params.validate()?;
    ensure(tau.is_finite() && tau >= 0.0, || format!("tau must be >= 0, got {tau}"))?;
    ensure(dt.is_finite() && dt > 0.0, || format!("dt must be > 0, got {dt}"))?;
    Ok(MvcRule { params: *params, tau, dt, fallbacks: 0, last: (0.5, 0.5) })
}

impl MvcRule {
    fn closed_form(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let m = return_moments(&self.params, x, y, self.dt)?;
        if m.flagged {
            return Err(Error::FlaggedMoments);
        }
        let cov = [[m.var_rx, m.cov_rxy], [m.cov_rxy, m.var_ry]];
        let w = mvc_weights(m.mean_vector(), &cov, self.tau)?;
        Ok((w.h1, w.h2))
    }

    fn monte_carlo(&self, x: f64, y: f64, step: usize) -> Result<(f64, f64)> {
        let cfg = McConfig { exec: crate::Exec::Sequential, ..McConfig::new(FALLBACK_MC_PATHS, step as u64) };
        let mc = mc_moment_oracle(&self.params, x, y, self.dt, &cfg)?;
        let cov = [[mc.var_rx.value, mc.cov_rxy.value], [mc.cov_rxy.value, mc.var_ry.value]];
        let w = mvc_weights([mc.e_rx.value, mc.e_ry.value], &cov, self.tau)?;
        Ok((w.h1, w.h2))
    }
}

impl WeightRule for MvcRule {
    fn weights(&mut self, prefix: &Prefix) -> (f64, f64) {
        let (x, y) = (prefix.x_now(), prefix.y_now());
        let w = match self.closed_form(x, y) {
            Ok(w) => w,
            Err(_) => {
                self.fallbacks += 1;
                self.monte_carlo(x, y, prefix.step()).unwrap_or(self.last)
            }
        };
        self.last = w;
        w
    }

    fn kind(&self) -> StrategyKind {
        StrategyKind::Mvc
    }

    fn fallback_events(&self) -> usize {
        self.fallbacks
    }
}

// ---------------------------------------------------------------------------
// Stochastic control
// ---------------------------------------------------------------------------

/// Pairs weights `(pi_1*, -pi_1*)` read off a trained value-ratio network at
/// `(t, X/Y)`. Evaluation failures trade flat for that step.
#[derive(Debug, Clone)]
pub struct ScRule<'a> {
    net: &'a DgmNetwork,
    params: CointelationParams,
    gamma: f64,
    failures: usize,
}

pub fn sc_strategy<'a>(net: &'a DgmNetwork, params: &CointelationParams, gamma: f64) -> Result<ScRule<'a>> {
    params.validate()?;
    ensure(gamma < 1.0 && gamma != 0.0, || format!("gamma must be < 1 and nonzero, got {gamma}"))?;
    Ok(ScRule { net, params: *params, gamma, failures: 0 })
}

impl WeightRule for ScRule<'_> {
    fn weights(&mut self, prefix: &Prefix) -> (f64, f64) {
        let z = prefix.x_now() / prefix.y_now();
        match optimal_pi(self.net, prefix.t(), z, &self.params, self.gamma) {
            Ok(w) => w,
            Err(_) => {
                self.failures += 1;
                (0.0, 0.0)
            }
        }
    }

    fn kind(&self) -> StrategyKind {
        StrategyKind::Sc
    }

    fn fallback_events(&self) -> usize {
        self.failures
    }
}

// ---------------------------------------------------------------------------
// Dynamic switching
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwitchMode {
    /// Two standalone shadow books started at `v0`; trade the stochastic
    /// control weights whenever its shadow is at least as rich.
    #[default]
    Shadow,
    /// Both shadows are re-marked to a common book every step, so the switch
    /// compares only the last step's growth of each strategy.
    OneBook,
}

/// Switches between two rules by comparing their shadow wealth; ties go to
/// the first (stochastic control) rule.
#[derive(Debug)]
pub struct DsRule<A, B> {
    sc: A,
    mvc: B,
    mode: SwitchMode,
    v_sc: f64,
    v_mvc: f64,
    w_sc: (f64, f64),
    w_mvc: (f64, f64),
    /// Per step: whether the first rule was chosen, and the two shadow wealths.
    pub choices: Vec<(bool, f64, f64)>,
}

pub fn dynamic_switching<A: WeightRule, B: WeightRule>(rule_sc: A, rule_mvc: B, mode: SwitchMode) -> DsRule<A, B> {
    DsRule { sc: rule_sc, mvc: rule_mvc, mode, v_sc: 1.0, v_mvc: 1.0, w_sc: (0.0, 0.0), w_mvc: (0.0, 0.0), choices: Vec::new() }
}

impl<A, B> DsRule<A, B> {
    /// Fraction of steps on which the first rule was traded.
    pub fn first_share(&self) -> f64 {
        if self.choices.is_empty() {
            return f64::NAN;
        }
        self.choices.iter().filter(|c| c.0).count() as f64 / self.choices.len() as f64
    }
}

fn grow(v: f64, w: (f64, f64), rx: f64, ry: f64) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    (v * (1.0 + w.0 * rx + w.1 * ry)).max(0.0)
}

impl<A: WeightRule, B: WeightRule> WeightRule for DsRule<A, B> {
    fn weights(&mut self, prefix: &Prefix) -> (f64, f64) {
        let k = prefix.step();
        if k > 0 {
            let rx = prefix.x[k] / prefix.x[k - 1] - 1.0;
            let ry = prefix.y[k] / prefix.y[k - 1] - 1.0;
            let (a, b) = (grow(self.v_sc, self.w_sc, rx, ry), grow(self.v_mvc, self.w_mvc, rx, ry));
            match self.mode {
                SwitchMode::Shadow => (self.v_sc, self.v_mvc) = (a, b),
                SwitchMode::OneBook => {
                    // Growth factors only; rebase both to one.
                    let (ga, gb) = (a / self.v_sc.max(f64::MIN_POSITIVE), b / self.v_mvc.max(f64::MIN_POSITIVE));
                    (self.v_sc, self.v_mvc) = (ga, gb);
                }
            }
        }
        self.w_sc = self.sc.weights(prefix);
        self.w_mvc = self.mvc.weights(prefix);
        let pick_sc = self.v_sc >= self.v_mvc;
        self.choices.push((pick_sc, self.v_sc, self.v_mvc));
        if self.mode == SwitchMode::OneBook {
            (self.v_sc, self.v_mvc) = (1.0, 1.0);
        }
        if pick_sc {
            self.w_sc
        } else {
            self.w_mvc
        }
    }

    fn kind(&self) -> StrategyKind {
        StrategyKind::Ds
    }

    fn fallback_events(&self) -> usize {
        self.sc.fallback_events() + self.mvc.fallback_events()
    }
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// Writes `step,time,w1,w2,V,pnl,label` rows after a seed header.
pub fn write_trace<W: Write>(out: &mut W, trace: &StrategyTrace, root_seed: u64) -> Result<()> {
    writeln!(out, "# root_seed={root_seed}")?;
    writeln!(out, "step,time,w1,w2,V,pnl,label")?;
    for k in 0..trace.len() {
        writeln!(
            out,
            "{k},{},{},{},{},{},{}",
            trace.times[k], trace.w1[k], trace.w2[k], trace.wealth[k], trace.pnl[k], trace.label
        )?;
    }
    Ok(())
}
