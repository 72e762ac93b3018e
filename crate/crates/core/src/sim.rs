//! Cointelated pair simulation, the generalized bumping SDE, and the
//! cointelation diagnostics (measured/inferred correlation, crossing counts,
//! estimation zones).
//!
//! The leading asset `X` is a geometric Brownian motion; the lagging asset `Y`
//! mean-reverts towards `X`:
//!
//! ```text
//! dX = mu X dt + sigma X dW
//! dY = kappa (X - Y) dt + eta Y dW~,     d<W, W~> = rho dt
//! ```
//!
//! Time is measured in whatever unit the caller picks for `dt`. The strategy
//! code uses years with daily steps (`dt = 1/252`); the correlation and
//! crossing diagnostics are naturally stated per sampling step, so they take
//! `kappa` as a per-step rate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Daily step in years.
pub const DAILY: f64 = 1.0 / 252.0;
/// Euler substeps per recorded step for the lagging asset.
pub const DEFAULT_SUBSTEPS: usize = 8;
/// Lagging-asset floor as a fraction of `y0`.
pub const FLOOR_FRACTION: f64 = 1e-8;
/// Decay constant of the inferred-correlation approximation for regular data.
pub const DEFAULT_LAMBDA_IC: f64 = 1.75;
/// Lags (in samples) used by the cointelation test: daily, weekly, monthly, yearly.
pub const TEST_LAGS: [usize; 4] = [1, 5, 22, 252];
/// Absolute tolerance between empirical and approximate inferred correlation.
pub const CORR_TOLERANCE: f64 = 0.15;
/// Relative tolerance between observed and expected crossings.
pub const CROSS_TOLERANCE: f64 = 0.15;

/// Seed of path `index` in a batch driven by `root`.
pub fn path_seed(root: u64, index: usize) -> u64 {
    root ^ index as u64
}

pub(crate) fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// Model parameters
// ---------------------------------------------------------------------------

/// Coefficients of the cointelation model plus initial prices.
/// Missing fields deserialize to the [`CointelationParams::example1`] values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CointelationParams {
    /// Drift of the leading asset.
    pub mu: f64,
    /// Volatility of the leading asset.
    pub sigma: f64,
    /// Mean-reversion speed of the lagging asset towards the leading one.
    pub kappa: f64,
    /// Volatility of the lagging asset.
    pub eta: f64,
    /// Correlation of the two Brownian drivers.
    pub rho: f64,
    pub x0: f64,
    pub y0: f64,
}

impl Default for CointelationParams {
    fn default() -> Self {
        Self::example1()
    }
}

impl CointelationParams {
    /// Parameters used by the head-to-head strategy comparison.
    pub fn example1() -> Self {
        Self { mu: 0.05, sigma: 0.17, kappa: 0.1, eta: 0.16, rho: -0.6, x0: 1.0, y0: 1.0 }
    }

    /// Checks ranges and finiteness.
    ///
    /// `kappa = 0` (independent legs) and zero volatilities are accepted as
    /// degenerate control cases; everything downstream that divides by a
    /// volatility checks for it separately.
    pub fn validate(&self) -> Result<()> {
        let all = [self.mu, self.sigma, self.kappa, self.eta, self.rho, self.x0, self.y0];
        ensure(all.iter().all(|v| v.is_finite()), || format!("non-finite parameter in {self:?}"))?;
        ensure(self.sigma >= 0.0, || format!("sigma must be >= 0, got {}", self.sigma))?;
        ensure(self.eta >= 0.0, || format!("eta must be >= 0, got {}", self.eta))?;
        ensure((0.0..=1.0).contains(&self.kappa), || {
            format!("kappa must lie in [0, 1], got {}", self.kappa)
        })?;
        ensure((-1.0..=1.0).contains(&self.rho), || format!("rho must lie in [-1, 1], got {}", self.rho))?;
        ensure(self.x0 > 0.0 && self.y0 > 0.0, || {
            format!("initial prices must be positive, got x0={} y0={}", self.x0, self.y0)
        })
    }

    /// Variance rate of `dX/X - dY/Y`: `sigma^2 - 2 sigma eta rho + eta^2`.
    pub fn sigma_tilde(&self) -> f64 {
        self.sigma * self.sigma - 2.0 * self.sigma * self.eta * self.rho + self.eta * self.eta
    }

    /// `kappa` expressed per sampling step of length `dt`.
    pub fn kappa_per_step(&self, dt: f64) -> f64 {
        self.kappa * dt
    }
}

// ---------------------------------------------------------------------------
// Paths
// ---------------------------------------------------------------------------

/// A sampled joint trajectory of the two prices.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPair {
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub seed: u64,
    pub dt: f64,
    pub substeps: usize,
    /// Number of substeps where the lagging asset hit the positivity floor.
    pub floor_events: usize,
}

impl PathPair {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn spread(&self) -> Vec<f64> {
        self.x.iter().zip(&self.y).map(|(a, b)| a - b).collect()
    }

    /// Sub-path over samples `start..=end`, with times re-based to zero.
    pub fn window(&self, start: usize, end: usize) -> PathPair {
        let t0 = self.times[start];
        PathPair {
            times: self.times[start..=end].iter().map(|t| t - t0).collect(),
            x: self.x[start..=end].to_vec(),
            y: self.y[start..=end].to_vec(),
            seed: self.seed,
            dt: self.dt,
            substeps: self.substeps,
            floor_events: 0,
        }
    }

    /// Builds a path from raw series (e.g. read back from disk).
    pub fn from_series(times: Vec<f64>, x: Vec<f64>, y: Vec<f64>) -> Result<PathPair> {
        ensure(x.len() == y.len() && x.len() == times.len(), || "series lengths differ".into())?;
        ensure(x.len() >= 2, || "need at least two samples".into())?;
        ensure(times.windows(2).all(|w| w[1] > w[0]), || "times must be strictly increasing".into())?;
        ensure(x.iter().chain(&y).all(|p| *p > 0.0 && p.is_finite()), || "prices must be positive".into())?;
        let dt = times[1] - times[0];
        Ok(PathPair { times, x, y, seed: 0, dt, substeps: 1, floor_events: 0 })
    }
}

/// One sub-grid step of the pair from two independent standard normals.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Substepper {
    p: CointelationParams,
    h: f64,
    sqrt_h: f64,
    x_drift: f64,
    rho_perp: f64,
    floor: f64,
}

impl Substepper {
    pub(crate) fn new(p: &CointelationParams, h: f64) -> Self {
        Self {
            p: *p,
            h,
            sqrt_h: h.sqrt(),
            x_drift: (p.mu - 0.5 * p.sigma * p.sigma) * h,
            rho_perp: (1.0 - p.rho * p.rho).max(0.0).sqrt(),
            floor: FLOOR_FRACTION * p.y0,
        }
    }

    /// Returns the new `(x, y)` and whether the floor was hit.
    #[inline]
    pub(crate) fn step(&self, x: f64, y: f64, z1: f64, z2: f64) -> (f64, f64, bool) {
        let p = &self.p;
        let dw = self.sqrt_h * z1;
        let dw_t = self.sqrt_h * (p.rho * z1 + self.rho_perp * z2);
        let y_next = y + p.kappa * (x - y) * self.h + p.eta * y * dw_t;
        let x_next = x * (self.x_drift + p.sigma * dw).exp();
        if y_next < self.floor {
            (x_next, self.floor, true)
        } else {
            (x_next, y_next, false)
        }
    }
}

/// Simulates the cointelation model.
///
/// `X` is stepped exactly in law on the sub-grid `dt / substeps`; `Y` uses
/// Euler–Maruyama on the same sub-grid with the correlated increment, then is
/// floored at `1e-8 * y0`. Samples are recorded every `dt`.
pub fn simulate_pair(
    params: &CointelationParams,
    horizon: f64,
    dt: f64,
    substeps: usize,
    seed: u64,
) -> Result<PathPair> {
    params.validate()?;
    ensure(horizon.is_finite() && horizon > 0.0, || format!("horizon must be > 0, got {horizon}"))?;
    ensure(dt.is_finite() && dt > 0.0, || format!("dt must be > 0, got {dt}"))?;
    ensure(substeps >= 1, || "substeps must be >= 1".into())?;
    let n_steps = (horizon / dt).round() as usize;
    ensure(n_steps >= 1, || format!("horizon {horizon} shorter than one step {dt}"))?;

    let stepper = Substepper::new(params, dt / substeps as f64);
    let (x0, y0) = (params.x0, params.y0);

    let mut rng = rng_from_seed(seed);
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut xs = Vec::with_capacity(n_steps + 1);
    let mut ys = Vec::with_capacity(n_steps + 1);
    let (mut x, mut y) = (x0, y0);
    times.push(0.0);
    xs.push(x);
    ys.push(y);
    let mut floor_events = 0;

    for step in 1..=n_steps {
        for _ in 0..substeps {
            let (z1, z2) = (normal(&mut rng), normal(&mut rng));
            let floored;
            (x, y, floored) = stepper.step(x, y, z1, z2);
            floor_events += usize::from(floored);
        }
        if !(x > 0.0 && x.is_finite()) {
            return Err(Error::SimulationFault { step, reason: format!("leading price {x}") });
        }
        if !y.is_finite() {
            return Err(Error::SimulationFault { step, reason: format!("lagging price {y}") });
        }
        times.push(step as f64 * dt);
        xs.push(x);
        ys.push(y);
    }

    Ok(PathPair { times, x: xs, y: ys, seed, dt, substeps, floor_events })
}

// ---------------------------------------------------------------------------
// Generalized bumping SDE
// ---------------------------------------------------------------------------

/// `dP = theta (mu_level - P) dt + sigma P^alpha (1 - P^2)^beta dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedSdeParams {
    pub theta: f64,
    pub mu_level: f64,
    pub sigma: f64,
    /// Positivity exponent.
    pub alpha: f64,
    /// Boundary exponent for the [-1, 1] band.
    pub beta: f64,
    pub p0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedPath {
    pub times: Vec<f64>,
    pub prices: Vec<f64>,
    /// Steps where the diffusion term had to be evaluated on a clamped value.
    pub clamp_events: usize,
}

fn is_integer(v: f64) -> bool {
    v.fract() == 0.0
}

impl GeneralizedSdeParams {
    /// Diffusion coefficient at `p`, and whether a clamp was applied.
    pub fn diffusion(&self, p: f64) -> (f64, bool) {
        let mut clamped = false;
        let pos = if p < 0.0 && !is_integer(self.alpha) {
            clamped = true;
            0.0
        } else {
            p
        };
        let pow_alpha = if is_integer(self.alpha) { pos.powi(self.alpha as i32) } else { pos.powf(self.alpha) };
        let band = if self.beta != 0.0 {
            let q = if p.abs() > 1.0 {
                clamped = true;
                p.signum()
            } else {
                p
            };
            (1.0 - q * q).powf(self.beta)
        } else {
            1.0
        };
        (self.sigma * pow_alpha * band, clamped)
    }
}

/// Euler path of the generalized SDE recorded every `dt`.
pub fn simulate_generalized(params: &GeneralizedSdeParams, horizon: f64, dt: f64, seed: u64) -> Result<GeneralizedPath> {
    let p = params;
    ensure([p.theta, p.mu_level, p.sigma, p.alpha, p.beta, p.p0].iter().all(|v| v.is_finite()), || {
        "non-finite generalized SDE parameter".into()
    })?;
    ensure(p.sigma >= 0.0, || format!("sigma must be >= 0, got {}", p.sigma))?;
    ensure(dt.is_finite() && dt > 0.0, || format!("dt must be > 0, got {dt}"))?;
    ensure(horizon.is_finite() && horizon > 0.0, || format!("horizon must be > 0, got {horizon}"))?;
    let n_steps = (horizon / dt).round().max(1.0) as usize;
    let sqrt_dt = dt.sqrt();
    let mut rng = rng_from_seed(seed);
    let mut prices = Vec::with_capacity(n_steps + 1);
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut clamp_events = 0;
    let mut cur = p.p0;
    prices.push(cur);
    times.push(0.0);
    for step in 1..=n_steps {
        let (diff, clamped) = p.diffusion(cur);
        clamp_events += usize::from(clamped);
        cur += p.theta * (p.mu_level - cur) * dt + diff * sqrt_dt * normal(&mut rng);
        if !cur.is_finite() {
            return Err(Error::SimulationFault { step, reason: format!("generalized SDE value {cur}") });
        }
        prices.push(cur);
        times.push(step as f64 * dt);
    }
    Ok(GeneralizedPath { times, prices, clamp_events })
}

// ---------------------------------------------------------------------------
// Returns and correlation
// ---------------------------------------------------------------------------

/// `r_i = ln(p_{i+step} / p_i)`.
pub fn log_returns(prices: &[f64], step: usize) -> Result<Vec<f64>> {
    ensure(step >= 1, || "step must be >= 1".into())?;
    ensure(prices.iter().all(|p| *p > 0.0), || "prices must be positive".into())?;
    if step >= prices.len() {
        return Err(Error::EmptyOutput(format!("step {step} >= series length {}", prices.len())));
    }
    Ok(prices.windows(step + 1).map(|w| (w[step] / w[0]).ln()).collect())
}

fn simple_returns(p: &[f64], lag: usize) -> Vec<f64> {
    p.windows(lag + 1).map(|w| (w[lag] - w[0]) / w[0]).collect()
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 {
        return Err(Error::UndefinedCorrelation("leading returns"));
    }
    if sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("lagging returns"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Sample correlation of overlapping `delta_t`-step simple returns.
pub fn measured_correlation(x: &[f64], y: &[f64], delta_t: usize) -> Result<f64> {
    ensure(x.len() == y.len(), || "series lengths differ".into())?;
    ensure(delta_t >= 1, || "delta_t must be >= 1".into())?;
    if x.len() < delta_t + 2 {
        return Err(Error::InsufficientData { needed: delta_t + 2, got: x.len() });
    }
    pearson(&simple_returns(x, delta_t), &simple_returns(y, delta_t))
}

/// Supremum of the measured correlation over lags `1..=delta_t`.
pub fn inferred_correlation_empirical(x: &[f64], y: &[f64], delta_t: usize) -> Result<f64> {
    ensure(delta_t >= 1, || "delta_t must be >= 1".into())?;
    let mut best: Option<f64> = None;
    let mut last_err = None;
    for d in 1..=delta_t {
        match measured_correlation(x, y, d) {
            Ok(c) => best = Some(best.map_or(c, |b| b.max(c))),
            Err(e @ Error::UndefinedCorrelation(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| last_err.expect("delta_t >= 1"))
}

/// `rho + (1 - rho) [1 - exp(-lambda kappa (delta_t - 1))]`, with `kappa` per step.
pub fn inferred_correlation_approx(rho: f64, kappa: f64, lambda_ic: f64, delta_t: usize) -> Result<f64> {
    ensure((-1.0..=1.0).contains(&rho), || format!("rho must lie in [-1, 1], got {rho}"))?;
    ensure((0.0..=1.0).contains(&kappa), || format!("kappa must lie in [0, 1], got {kappa}"))?;
    ensure(lambda_ic > 0.0, || format!("lambda must be > 0, got {lambda_ic}"))?;
    ensure(delta_t >= 1, || "delta_t must be >= 1".into())?;
    let decay = (-lambda_ic * kappa * (delta_t as f64 - 1.0)).exp();
    Ok(rho + (1.0 - rho) * (1.0 - decay))
}

// ---------------------------------------------------------------------------
// Crossings and zones
// ---------------------------------------------------------------------------

/// `N [gamma (1 - kappa) + sqrt(kappa) / 2]`.
pub fn expected_crosses(kappa: f64, n: usize, gamma_c: f64) -> Result<f64> {
    ensure(n >= 1, || "n must be >= 1".into())?;
    ensure(gamma_c > 0.0, || format!("gamma must be > 0, got {gamma_c}"))?;
    ensure((0.0..=1.0).contains(&kappa), || format!("kappa must lie in [0, 1], got {kappa}"))?;
    Ok(n as f64 * (gamma_c * (1.0 - kappa) + 0.5 * kappa.sqrt()))
}

/// Sign changes of `x - y`. A zero spread keeps the previous sign, so a touch
/// without passing through is not a crossing.
pub fn count_crosses(x: &[f64], y: &[f64]) -> usize {
    let mut prev = 0i8;
    let mut crosses = 0;
    for (a, b) in x.iter().zip(y) {
        let s = a - b;
        let sign = if s > 0.0 {
            1
        } else if s < 0.0 {
            -1
        } else {
            prev
        };
        if prev != 0 && sign != prev {
            crosses += 1;
        }
        prev = sign;
    }
    crosses
}

/// Crossings of the series after normalising each by its first value.
pub fn count_crosses_normalized(x: &[f64], y: &[f64]) -> usize {
    match (x.first(), y.first()) {
        (Some(&x0), Some(&y0)) => {
            let xn: Vec<f64> = x.iter().map(|v| v / x0).collect();
            let yn: Vec<f64> = y.iter().map(|v| v / y0).collect();
            count_crosses(&xn, &yn)
        }
        _ => 0,
    }
}

/// Least-squares `gamma` for `count = N gamma` over control runs `(N, count)`.
pub fn fit_crossing_gamma(controls: &[(usize, usize)]) -> Result<f64> {
    let num: f64 = controls.iter().map(|&(n, c)| n as f64 * c as f64).sum();
    let den: f64 = controls.iter().map(|&(n, _)| (n as f64).powi(2)).sum();
    if den == 0.0 {
        return Err(Error::InvalidInput("no control runs".into()));
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Zone {
    /// Spread strictly between the bands: good samples for `rho`.
    Rho,
    /// Spread outside the bands: good samples for `kappa`.
    Kappa,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZoneReport {
    pub b_plus: f64,
    pub b_minus: f64,
    pub zone_labels: Vec<Zone>,
}

impl ZoneReport {
    pub fn count(&self, zone: Zone) -> usize {
        self.zone_labels.iter().filter(|z| **z == zone).count()
    }
}

/// Band levels from the spread extremes and the per-step zone labels.
pub fn estimation_zones(x: &[f64], y: &[f64]) -> Result<ZoneReport> {
    ensure(x.len() == y.len(), || "series lengths differ".into())?;
    if x.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: x.len() });
    }
    let spread: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let max = spread.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = spread.iter().copied().fold(f64::INFINITY, f64::min);
    let b_plus = (max / 2.0).abs();
    let b_minus = (min / 2.0).abs();
    let zone_labels = spread
        .iter()
        .map(|s| if b_plus > s.abs() && s.abs() > b_minus { Zone::Rho } else { Zone::Kappa })
        .collect();
    Ok(ZoneReport { b_plus, b_minus, zone_labels })
}

// ---------------------------------------------------------------------------
// Cointelation test
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LagCheck {
    pub delta_t: usize,
    /// `None` when the series is too short for this lag.
    pub empirical: Option<f64>,
    pub approx: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossingCheck {
    pub n: usize,
    pub observed: usize,
    pub observed_normalized: usize,
    pub expected: f64,
    pub relative_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CointelationReport {
    /// False when the spread is identically zero and the test says nothing.
    pub applicable: bool,
    pub lags: Vec<LagCheck>,
    pub crossings: CrossingCheck,
    pub correlation_pass: bool,
    pub pass: bool,
}

/// Hypothesised model for the cointelation test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CointelationHypothesis {
    pub rho: f64,
    /// Mean-reversion rate per sampling step.
    pub kappa_per_step: f64,
    pub lambda_ic: f64,
    pub gamma_c: f64,
}

impl CointelationHypothesis {
    pub fn from_params(params: &CointelationParams, dt: f64, gamma_c: f64) -> Self {
        Self { rho: params.rho, kappa_per_step: params.kappa_per_step(dt), lambda_ic: DEFAULT_LAMBDA_IC, gamma_c }
    }
}

/// Checks the inferred-correlation approximation at daily/weekly/monthly/yearly
/// lags and the number-of-crosses formula on the raw spread.
pub fn cointelation_test(x: &[f64], y: &[f64], hyp: &CointelationHypothesis) -> Result<CointelationReport> {
    ensure(x.len() == y.len(), || "series lengths differ".into())?;
    let needed = 2 * TEST_LAGS[TEST_LAGS.len() - 1];
    if x.len() < needed {
        return Err(Error::InsufficientData { needed, got: x.len() });
    }
    let n = x.len();
    let applicable = x.iter().zip(y).any(|(a, b)| a != b);

    let mut lags = Vec::with_capacity(TEST_LAGS.len());
    for &d in &TEST_LAGS {
        let approx = inferred_correlation_approx(hyp.rho, hyp.kappa_per_step, hyp.lambda_ic, d)?;
        let empirical = match inferred_correlation_empirical(x, y, d) {
            Ok(c) => Some(c),
            Err(Error::UndefinedCorrelation(_)) => None,
            Err(e) => return Err(e),
        };
        let pass = empirical.is_some_and(|e| (e - approx).abs() <= CORR_TOLERANCE);
        lags.push(LagCheck { delta_t: d, empirical, approx, pass });
    }

    let observed = count_crosses(x, y);
    let expected = expected_crosses(hyp.kappa_per_step, n, hyp.gamma_c)?;
    let relative_error = (observed as f64 - expected).abs() / expected;
    let crossings = CrossingCheck {
        n,
        observed,
        observed_normalized: count_crosses_normalized(x, y),
        expected,
        relative_error,
        pass: relative_error <= CROSS_TOLERANCE,
    };
    let correlation_pass = lags.iter().all(|l| l.pass);
    let pass = applicable && correlation_pass && crossings.pass;
    Ok(CointelationReport { applicable, lags, crossings, correlation_pass, pass })
}
