//! One-step conditional moments of the cointelation model.
//!
//! Conditioning on `(X, Y) = (x, y)` at the start of a step of length `dt`,
//! the raw moments `E[Y]`, `E[XY]` and `E[Y^2]` solve linear ODEs and have
//! closed forms:
//!
//! ```text
//! E[Y]   = a e^{mu dt} + (y - a) e^{-kappa dt}
//! E[XY]  = b e^{(2mu + sigma^2) dt} + (xy - b) e^{(mu - kappa + sigma eta rho) dt}
//! E[Y^2] = c e^{(2mu + sigma^2) dt} + d e^{(mu - kappa + sigma eta rho) dt}
//!          + (y^2 - c - d) e^{(eta^2 - 2 kappa) dt}
//! ```
//!
//! Log-return statistics of the lagging leg follow from second-order Taylor
//! expansions around the means. These are approximations; [`MomentSet::flagged`]
//! marks outputs that are not a valid covariance structure.

use serde::Serialize;

use crate::error::{ensure, Error, Result};
use crate::exec::{chunked_reduce, Exec};
use crate::sim::{normal, path_seed, rng_from_seed, CointelationParams, Substepper};

/// Denominators closer to zero than this are treated as singular.
const SINGULAR_DENOM: f64 = 1e-12;
/// Tolerance on `|cov| <= sqrt(var_x var_y)` before a set is flagged.
const COV_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RawMoments {
    pub mean_y: f64,
    pub mean_xy: f64,
    pub mean_y2: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

/// Conditional moments and log-return statistics for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentSet {
    pub e_rx: f64,
    pub e_ry: f64,
    pub var_rx: f64,
    pub var_ry: f64,
    pub cov_rxy: f64,
    pub mean_y: f64,
    pub mean_xy: f64,
    pub mean_y2: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub dt: f64,
    pub x_prev: f64,
    pub y_prev: f64,
    /// Taylor output is not a valid covariance structure
    /// (`var_ry <= 0` or implied `|corr| > 1`).
    pub flagged: bool,
}

impl MomentSet {
    pub fn mean_vector(&self) -> [f64; 2] {
        [self.e_rx, self.e_ry]
    }

    /// Implied correlation of the log returns.
    pub fn correlation(&self) -> f64 {
        self.cov_rxy / (self.var_rx * self.var_ry).sqrt()
    }
}

fn denom(value: f64, what: &str) -> Result<f64> {
    if value.abs() < SINGULAR_DENOM || !value.is_finite() {
        Err(Error::Degenerate(format!("{what} = {value:e} is singular")))
    } else {
        Ok(value)
    }
}

fn check_inputs(params: &CointelationParams, x_prev: f64, y_prev: f64, dt: f64) -> Result<()> {
    params.validate()?;
    ensure(dt.is_finite() && dt > 0.0, || format!("dt must be > 0, got {dt}"))?;
    ensure(x_prev > 0.0 && y_prev > 0.0 && x_prev.is_finite() && y_prev.is_finite(), || {
        format!("conditioning prices must be positive, got x={x_prev} y={y_prev}")
    })
}

/// Closed-form `E[Y]`, `E[XY]`, `E[Y^2]` after `dt`, with the helper constants.
pub fn raw_moments(params: &CointelationParams, x_prev: f64, y_prev: f64, dt: f64) -> Result<RawMoments> {
    check_inputs(params, x_prev, y_prev, dt)?;
    let CointelationParams { mu, sigma, kappa, eta, rho, .. } = *params;
    let sr = sigma * eta * rho;
    let (x, y) = (x_prev, y_prev);

    // Exponents of the three modes.
    let g_xx = 2.0 * mu + sigma * sigma;
    let g_xy = mu - kappa + sr;
    let g_yy = eta * eta - 2.0 * kappa;

    let a = kappa * x / denom(mu + kappa, "mu + kappa")?;
    let b = kappa * x * x / denom(mu + sigma * sigma + kappa - sr, "mu + sigma^2 + kappa - sigma eta rho")?;
    let c = 2.0 * kappa * b / denom(g_xx - g_yy, "2mu + sigma^2 - eta^2 + 2kappa")?;
    let d = 2.0 * kappa * (x * y - b) / denom(g_xy - g_yy, "mu + kappa + sigma eta rho - eta^2")?;

    let mean_y = a * (mu * dt).exp() + (y - a) * (-kappa * dt).exp();
    let mean_xy = b * (g_xx * dt).exp() + (x * y - b) * (g_xy * dt).exp();
    let mean_y2 = c * (g_xx * dt).exp() + d * (g_xy * dt).exp() + (y * y - c - d) * (g_yy * dt).exp();
    Ok(RawMoments { mean_y, mean_xy, mean_y2, a, b, c, d })
}

/// Expected log returns, variances and covariance over `dt`.
pub fn return_moments(params: &CointelationParams, x_prev: f64, y_prev: f64, dt: f64) -> Result<MomentSet> {
    let raw = raw_moments(params, x_prev, y_prev, dt)?;
    let CointelationParams { mu, sigma, .. } = *params;
    let mean_x = x_prev * (mu * dt).exp();
    let m2 = raw.mean_y * raw.mean_y;
    let e_ry = raw.mean_y.ln() - raw.mean_y2 / (2.0 * m2) + 0.5 - y_prev.ln();
    let var_ry = raw.mean_y2 / m2 - 1.0;
    let cov_rxy = (raw.mean_xy / (mean_x * raw.mean_y)).ln();
    let var_rx = sigma * sigma * dt;
    let e_rx = (mu - 0.5 * sigma * sigma) * dt;
    let flagged = !(var_ry > 0.0) || cov_rxy.abs() > (var_rx * var_ry).sqrt() + COV_SLACK;
    if !(e_ry.is_finite() && var_ry.is_finite() && cov_rxy.is_finite()) {
        return Err(Error::Degenerate(format!("non-finite return moments at x={x_prev} y={y_prev} dt={dt}")));
    }
    Ok(MomentSet {
        e_rx,
        e_ry,
        var_rx,
        var_ry,
        cov_rxy,
        mean_y: raw.mean_y,
        mean_xy: raw.mean_xy,
        mean_y2: raw.mean_y2,
        a: raw.a,
        b: raw.b,
        c: raw.c,
        d: raw.d,
        dt,
        x_prev,
        y_prev,
        flagged,
    })
}

// ---------------------------------------------------------------------------
// Monte Carlo oracle
// ---------------------------------------------------------------------------

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    /// `|value - target|` in standard errors; infinite if the SE is zero and
    /// the values differ.
    pub fn z_score(&self, target: f64) -> f64 {
        let diff = (self.value - target).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.std_error
        }
    }
}

/// Empirical one-step moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McMoments {
    pub mean_y: Estimate,
    pub mean_xy: Estimate,
    pub mean_y2: Estimate,
    pub e_rx: Estimate,
    pub e_ry: Estimate,
    pub var_rx: Estimate,
    pub var_ry: Estimate,
    pub cov_rxy: Estimate,
    pub n_paths: usize,
    pub floor_events: usize,
}

/// Oracle sampling settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub n_paths: usize,
    pub substeps: usize,
    pub seed: u64,
    /// Pair each draw with its negated twin.
    pub antithetic: bool,
    pub exec: Exec,
}

impl McConfig {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self { n_paths, substeps: crate::sim::DEFAULT_SUBSTEPS, seed, antithetic: true, exec: Exec::default() }
    }
}

const N_STATS: usize = 8;
// Per-sample statistics: Y, XY, Y^2, rx, ry, and (cross) products of the logs.
const S_Y: usize = 0;
const S_XY: usize = 1;
const S_Y2: usize = 2;
const S_RX: usize = 3;
const S_RY: usize = 4;
const S_RX2: usize = 5;
const S_RY2: usize = 6;
const S_RXY: usize = 7;

/// Running means and centred second moments of the per-unit averages,
/// merged pairwise (Chan et al.) so constant samples give exactly zero spread.
#[derive(Clone, Copy)]
struct Acc {
    n: usize,
    floors: usize,
    mean: [f64; N_STATS],
    m2: [f64; N_STATS],
}

impl Acc {
    fn zero() -> Self {
        Self { n: 0, floors: 0, mean: [0.0; N_STATS], m2: [0.0; N_STATS] }
    }

    fn push(&mut self, s: &[f64; N_STATS]) {
        self.n += 1;
        let n = self.n as f64;
        for k in 0..N_STATS {
            let d = s[k] - self.mean[k];
            self.mean[k] += d / n;
            self.m2[k] += d * (s[k] - self.mean[k]);
        }
    }

    fn merge(mut self, o: Acc) -> Acc {
        if o.n == 0 {
            return self;
        }
        let (na, nb) = (self.n as f64, o.n as f64);
        let n = na + nb;
        for k in 0..N_STATS {
            let d = o.mean[k] - self.mean[k];
            self.mean[k] += d * nb / n;
            self.m2[k] += o.m2[k] + d * d * na * nb / n;
        }
        self.n += o.n;
        self.floors += o.floors;
        self
    }

    fn mean(&self, k: usize) -> f64 {
        self.mean[k]
    }

    fn estimate(&self, k: usize) -> Estimate {
        let n = self.n as f64;
        let var = self.m2[k] / (n - 1.0);
        Estimate { value: self.mean[k], std_error: (var / n).sqrt() }
    }
}

/// Simulates `n_paths` one-step transitions from `(x_prev, y_prev)` on a fine
/// sub-grid and returns sample moments with standard errors.
///
/// With antithetic sampling, standard errors are computed from the pair
/// averages, which are i.i.d.
pub fn mc_moment_oracle(
    params: &CointelationParams,
    x_prev: f64,
    y_prev: f64,
    dt: f64,
    cfg: &McConfig,
) -> Result<McMoments> {
    check_inputs(params, x_prev, y_prev, dt)?;
    ensure(cfg.n_paths >= 1000, || format!("n_paths must be >= 1000, got {}", cfg.n_paths))?;
    ensure(cfg.substeps >= 1, || "substeps must be >= 1".into())?;
    let local = CointelationParams { x0: x_prev, y0: y_prev, ..*params };
    let stepper = Substepper::new(&local, dt / cfg.substeps as f64);
    let group = if cfg.antithetic { 2 } else { 1 };
    let n_units = cfg.n_paths / group;
    let (lx, ly) = (x_prev.ln(), y_prev.ln());

    let run_unit = |u: usize| -> ([f64; N_STATS], usize) {
        let mut rng = rng_from_seed(path_seed(cfg.seed, u));
        let mut zs = vec![0.0; 2 * cfg.substeps];
        for z in zs.iter_mut() {
            *z = normal(&mut rng);
        }
        let mut avg = [0.0; N_STATS];
        let mut floors = 0;
        for sign in [1.0, -1.0].iter().take(group) {
            let (mut x, mut y) = (x_prev, y_prev);
            for pair in zs.chunks_exact(2) {
                let hit;
                (x, y, hit) = stepper.step(x, y, sign * pair[0], sign * pair[1]);
                floors += usize::from(hit);
            }
            let (rx, ry) = (x.ln() - lx, y.ln() - ly);
            let s = [y, x * y, y * y, rx, ry, rx * rx, ry * ry, rx * ry];
            for k in 0..N_STATS {
                avg[k] += s[k] / group as f64;
            }
        }
        (avg, floors)
    };

    let acc = chunked_reduce(
        cfg.exec,
        n_units,
        1024,
        |range| {
            let mut acc = Acc::zero();
            for u in range {
                let (s, floors) = run_unit(u);
                acc.push(&s);
                acc.floors += floors;
            }
            acc
        },
        Acc::merge,
    )
    .unwrap_or_else(Acc::zero);

    // Central second moments from the raw ones; their standard errors use the
    // per-unit second-moment spread, which dominates for small means.
    let central = |k2: usize, ka: usize, kb: usize| {
        let raw = acc.estimate(k2);
        let value = raw.value - acc.mean(ka) * acc.mean(kb);
        Estimate { value, std_error: raw.std_error }
    };
    Ok(McMoments {
        mean_y: acc.estimate(S_Y),
        mean_xy: acc.estimate(S_XY),
        mean_y2: acc.estimate(S_Y2),
        e_rx: acc.estimate(S_RX),
        e_ry: acc.estimate(S_RY),
        var_rx: central(S_RX2, S_RX, S_RX),
        var_ry: central(S_RY2, S_RY, S_RY),
        cov_rxy: central(S_RXY, S_RX, S_RY),
        n_paths: n_units * group,
        floor_events: acc.floors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ex1() -> CointelationParams {
        CointelationParams::example1()
    }

    #[test]
    fn constant_leader_collapses() {
        let p = CointelationParams { mu: 0.0, sigma: 0.0, kappa: 0.3, eta: 0.2, rho: 0.1, x0: 2.0, y0: 1.0 };
        let dt = 0.7;
        let r = raw_moments(&p, 2.0, 1.0, dt).unwrap();
        assert_relative_eq!(r.a, 2.0, max_relative = 1e-15);
        assert_relative_eq!(r.mean_y, 2.0 + (1.0 - 2.0) * (-0.3 * dt).exp(), max_relative = 1e-14);
    }

    #[test]
    fn zero_horizon_limit() {
        let r = raw_moments(&ex1(), 1.3, 0.8, 1e-12).unwrap();
        assert_relative_eq!(r.mean_y, 0.8, max_relative = 1e-10);
        assert_relative_eq!(r.mean_xy, 1.3 * 0.8, max_relative = 1e-10);
        assert_relative_eq!(r.mean_y2, 0.64, max_relative = 1e-10);
    }

    #[test]
    fn raw_moments_satisfy_their_odes() {
        // Central differences in the horizon against the generator equations.
        let p = ex1();
        let (x, y) = (1.2, 0.9);
        for &t in &[0.01, 0.25, 1.0] {
            let h = 1e-5;
            let lo = raw_moments(&p, x, y, t - h).unwrap();
            let hi = raw_moments(&p, x, y, t + h).unwrap();
            let m = raw_moments(&p, x, y, t).unwrap();
            let ex = x * (p.mu * t).exp();
            let ex2 = x * x * ((2.0 * p.mu + p.sigma * p.sigma) * t).exp();
            let sr = p.sigma * p.eta * p.rho;
            let dy = (hi.mean_y - lo.mean_y) / (2.0 * h);
            let dxy = (hi.mean_xy - lo.mean_xy) / (2.0 * h);
            let dy2 = (hi.mean_y2 - lo.mean_y2) / (2.0 * h);
            assert_relative_eq!(dy, p.kappa * (ex - m.mean_y), max_relative = 1e-6);
            assert_relative_eq!(dxy, p.kappa * ex2 + (p.mu - p.kappa + sr) * m.mean_xy, max_relative = 1e-6);
            let rhs = 2.0 * p.kappa * m.mean_xy + (p.eta * p.eta - 2.0 * p.kappa) * m.mean_y2;
            assert_relative_eq!(dy2, rhs, max_relative = 1e-6);
        }
    }

    #[test]
    fn exact_leader_statistics() {
        let p = CointelationParams { mu: 0.07, sigma: 0.2, ..ex1() };
        let m = return_moments(&p, 1.0, 1.0, 1.0 / 252.0).unwrap();
        assert_relative_eq!(m.e_rx, 0.05 / 252.0, max_relative = 1e-12);
        assert_relative_eq!(m.var_rx, 0.04 / 252.0, max_relative = 1e-12);
        assert!(!m.flagged);
    }

    #[test]
    fn degenerate_denominator_is_reported() {
        let p = CointelationParams { mu: -0.1, kappa: 0.1, ..ex1() };
        match raw_moments(&p, 1.0, 1.0, 0.1) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("mu + kappa")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn continuous_across_horizons() {
        let p = ex1();
        let mut prev = return_moments(&p, 1.0, 1.1, 1e-4).unwrap();
        let mut dt = 1e-4;
        while dt < 1.0 {
            dt += 1e-4;
            let m = return_moments(&p, 1.0, 1.1, dt).unwrap();
            assert!((m.e_ry - prev.e_ry).abs() < 1e-4);
            assert!((m.var_ry - prev.var_ry).abs() < 1e-4);
            assert!((m.cov_rxy - prev.cov_rxy).abs() < 1e-4);
            prev = m;
        }
    }

    #[test]
    fn oracle_is_exact_without_noise() {
        let p = CointelationParams { mu: 0.05, sigma: 0.0, kappa: 0.5, eta: 0.0, rho: 0.0, x0: 1.0, y0: 1.0 };
        let mut cfg = McConfig::new(1000, 3);
        cfg.substeps = 64;
        let mc = mc_moment_oracle(&p, 1.0, 2.0, 0.5, &cfg).unwrap();
        let cf = raw_moments(&p, 1.0, 2.0, 0.5).unwrap();
        assert!(mc.mean_y.std_error < 1e-14);
        // Euler bias on the sub-grid only.
        assert_relative_eq!(mc.mean_y.value, cf.mean_y, max_relative = 1e-3);
        assert_relative_eq!(mc.mean_y2.value, cf.mean_y2, max_relative = 2e-3);
    }

    #[test]
    fn oracle_is_deterministic_across_modes() {
        let p = ex1();
        let mut cfg = McConfig::new(4000, 9);
        cfg.exec = Exec::Sequential;
        let a = mc_moment_oracle(&p, 1.0, 1.0, 0.1, &cfg).unwrap();
        cfg.exec = Exec::Parallel;
        let b = mc_moment_oracle(&p, 1.0, 1.0, 0.1, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_error_scales_with_paths() {
        let p = ex1();
        let small = mc_moment_oracle(&p, 1.0, 1.0, 0.25, &McConfig::new(20_000, 1)).unwrap();
        let large = mc_moment_oracle(&p, 1.0, 1.0, 0.25, &McConfig::new(40_000, 2)).unwrap();
        let ratio = large.mean_y.std_error / small.mean_y.std_error;
        assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.05, "{ratio}");
    }
}
