//! Deep Galerkin training over pluggable PDE problems.
//!
//! A problem supplies a residual `R(t, z, f, f_t, f_z, f_zz)`, its partial
//! derivatives with respect to the four jet components, a terminal condition
//! at `t = T`, and optionally a Dirichlet condition on one `z` edge. The loss
//! on a batch is
//!
//! ```text
//! w_i mean(R^2) + w_T mean((f(T, z) - g(z))^2) + w_B mean((f(t, z_b) - b)^2)
//! ```
//!
//! and is minimised by plain gradient steps with an exponentially decaying
//! learning rate `alpha_n = alpha_0 lambda^n`.
//!
//! Built-in problems: the Merton portfolio problem with its closed-form
//! solution, and the reduced HJB equation of the pairs-trading control
//! problem, whose solution gives the optimal pairs weight.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{ensure, Error, Result};
use crate::exec::{chunked_reduce, map_indexed, Exec};
use crate::net::{DgmNetwork, EvalResult, InputMap, Jet};
use crate::sim::{path_seed, simulate_pair, CointelationParams};
use crate::stats::quantile;

/// Cap on `|pi_1|` for the pairs weight.
pub const PI_MAX: f64 = 5.0;
/// `|f|` below this makes the optimal weight undefined.
pub const F_MIN: f64 = 1e-6;
/// Loss level that counts as divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;
/// Consecutive divergent steps before training aborts.
pub const DIVERGENCE_STEPS: usize = 100;

// ---------------------------------------------------------------------------
// Problems
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Domain {
    pub horizon: f64,
    pub z_lo: f64,
    pub z_hi: f64,
}

impl Domain {
    pub fn new(horizon: f64, z_lo: f64, z_hi: f64) -> Result<Self> {
        ensure(horizon.is_finite() && horizon > 0.0, || format!("horizon must be > 0, got {horizon}"))?;
        ensure(z_lo.is_finite() && z_hi.is_finite() && z_lo < z_hi, || {
            format!("need z_lo < z_hi, got [{z_lo}, {z_hi}]")
        })?;
        Ok(Self { horizon, z_lo, z_hi })
    }

    pub fn input_map(&self) -> InputMap {
        InputMap::unit_square(self.horizon, self.z_lo, self.z_hi)
    }
}

/// Dirichlet condition `f(t, z) = value` on the edge `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Boundary {
    pub z: f64,
    pub value: f64,
}

/// A terminal-value PDE on `[0, T] x [z_lo, z_hi]`.
pub trait PdeProblem: Sync {
    fn residual(&self, t: f64, z: f64, e: &EvalResult) -> f64;
    /// `dR / d(f, f_t, f_z, f_zz)`.
    fn residual_partials(&self, t: f64, z: f64, e: &EvalResult) -> Jet;
    fn terminal_value(&self, z: f64) -> f64;
    fn domain(&self) -> Domain;
    fn boundary(&self) -> Option<Boundary> {
        None
    }
}

/// Merton problem with power utility `x^gamma / gamma` and zero rate:
/// `V_t V_xx - mu^2 / (2 sigma^2) V_x^2 = 0`, the HJB equation after the
/// supremum over the risky fraction has been taken and multiplied through by
/// `V_xx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MertonProblem {
    pub mu: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub domain: Domain,
    /// Enforce `V(t, 0) = 0` when the domain reaches zero wealth.
    pub boundary: Option<Boundary>,
    pub form: MertonForm,
}

/// Algebraic form of the Merton residual.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub enum MertonForm {
    /// `V_t V_xx - k V_x^2`. Also vanishes on functions flat in `x`, which
    /// gradient training tends to collapse into away from `t = T`.
    Multiplied,
    /// `V_t V_xx / V_x^2 - k`, undefined where `V_x = 0`.
    #[default]
    Normalized,
}

impl MertonProblem {
    fn k(&self) -> f64 {
        self.mu * self.mu / (2.0 * self.sigma * self.sigma)
    }
}

/// Builds the Merton problem on wealth range `[x_lo, x_hi]`. A zero-wealth
/// boundary condition is attached when `x_lo == 0` and `gamma > 0`.
pub fn merton_problem(mu: f64, sigma: f64, gamma: f64, horizon: f64, x_lo: f64, x_hi: f64) -> Result<MertonProblem> {
    ensure(gamma < 1.0 && gamma != 0.0, || format!("gamma must be < 1 and nonzero, got {gamma}"))?;
    ensure(sigma > 0.0, || format!("sigma must be > 0, got {sigma}"))?;
    ensure(mu.is_finite(), || "mu must be finite".into())?;
    ensure(x_lo >= 0.0, || format!("wealth range must be non-negative, got {x_lo}"))?;
    let domain = Domain::new(horizon, x_lo, x_hi)?;
    let boundary = (x_lo == 0.0 && gamma > 0.0).then_some(Boundary { z: 0.0, value: 0.0 });
    Ok(MertonProblem { mu, sigma, gamma, domain, boundary, form: MertonForm::default() })
}

/// Closed-form Merton value `(x^gamma / gamma) exp(c (T - t))`,
/// `c = gamma mu^2 / (2 sigma^2 (1 - gamma))`.
pub fn merton_analytic(mu: f64, sigma: f64, gamma: f64, horizon: f64, t: f64, x: f64) -> f64 {
    let c = gamma * mu * mu / (2.0 * sigma * sigma * (1.0 - gamma));
    x.powf(gamma) / gamma * (c * (horizon - t)).exp()
}

impl PdeProblem for MertonProblem {
    fn residual(&self, _t: f64, _z: f64, e: &EvalResult) -> f64 {
        match self.form {
            MertonForm::Multiplied => e.f_t * e.f_zz - self.k() * e.f_z * e.f_z,
            MertonForm::Normalized => e.f_t * e.f_zz / (e.f_z * e.f_z) - self.k(),
        }
    }

    fn residual_partials(&self, _t: f64, _z: f64, e: &EvalResult) -> Jet {
        match self.form {
            MertonForm::Multiplied => [0.0, e.f_zz, -2.0 * self.k() * e.f_z, e.f_t],
            MertonForm::Normalized => {
                let q = 1.0 / (e.f_z * e.f_z);
                [0.0, e.f_zz * q, -2.0 * e.f_t * e.f_zz * q / e.f_z, e.f_t * q]
            }
        }
    }

    fn terminal_value(&self, z: f64) -> f64 {
        z.powf(self.gamma) / self.gamma
    }

    fn domain(&self) -> Domain {
        self.domain
    }

    fn boundary(&self) -> Option<Boundary> {
        self.boundary
    }
}

/// Which algebraic form of the reduced pairs HJB equation to use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub enum ResidualForm {
    /// Obtained by substituting `G = f v^gamma` into the HJB equation:
    ///
    /// ```text
    /// s(g-1) f f_t - 1/2 s^2 g z^2 f_z^2 - s g A z f f_z - 1/2 g A^2 f^2
    ///   + 1/2 s^2 (g-1) z^2 f f_zz + s (g-1) B z f f_z
    /// ```
    ///
    /// with `s = sigma~`, `g = gamma`, `A = mu - kappa (z - 1)` and
    /// `B = mu + eta^2 - sigma eta rho - kappa (z - 1)`.
    #[default]
    Derived,
    /// The commonly printed variant: `A^2 f` instead of `A^2 f^2`, `s`
    /// instead of `s^2` on the `f_zz` term and no `z` on the `B` term.
    Printed,
}

/// Reduced HJB equation for the value ratio `f(t, z)`, `z = X / Y`, with
/// terminal condition `f(T, z) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CointelationPde {
    pub params: CointelationParams,
    pub gamma: f64,
    pub domain: Domain,
    pub form: ResidualForm,
    /// Divide the residual by `sigma~ f^2`. The equation is homogeneous of
    /// degree two in `f`, so this is the same equation written for `ln f`,
    /// with coefficients of order one.
    pub normalized: bool,
}

impl CointelationPde {
    fn coeffs(&self, z: f64) -> (f64, f64, f64) {
        let p = &self.params;
        let a = p.mu - p.kappa * (z - 1.0);
        let b = p.mu + p.eta * p.eta - p.sigma * p.eta * p.rho - p.kappa * (z - 1.0);
        (p.sigma_tilde(), a, b)
    }
}

/// Builds the pairs HJB problem on `[0, horizon] x [z_lo, z_hi]`.
pub fn cointelation_pde_problem(params: &CointelationParams, gamma: f64, domain: Domain) -> Result<CointelationPde> {
    params.validate()?;
    ensure(gamma < 1.0 && gamma != 0.0, || format!("gamma must be < 1 and nonzero, got {gamma}"))?;
    let st = params.sigma_tilde();
    if !(st > 0.0) {
        return Err(Error::Degenerate(format!("sigma~ = {st:e} must be > 0 (requires not rho = 1 with sigma = eta)")));
    }
    Ok(CointelationPde { params: *params, gamma, domain, form: ResidualForm::Derived, normalized: false })
}

impl CointelationPde {
    /// The residual exactly as in [`ResidualForm`], never normalised.
    pub fn raw_residual(&self, z: f64, e: &EvalResult) -> f64 {
        let (s, a, b) = self.coeffs(z);
        let g = self.gamma;
        let EvalResult { f, f_t, f_z, f_zz } = *e;
        let r = match self.form {
            ResidualForm::Derived => {
                s * (g - 1.0) * f * f_t - 0.5 * s * s * g * z * z * f_z * f_z - s * g * a * z * f * f_z
                    - 0.5 * g * a * a * f * f
                    + 0.5 * s * s * (g - 1.0) * z * z * f * f_zz
                    + s * (g - 1.0) * b * z * f * f_z
            }
            ResidualForm::Printed => {
                s * (g - 1.0) * f * f_t - 0.5 * s * s * g * z * z * f_z * f_z - 0.5 * g * a * a * f
                    + 0.5 * s * (g - 1.0) * z * z * f * f_zz
                    - s * g * a * z * f * f_z
                    + s * (g - 1.0) * b * f * f_z
            }
        };
        r
    }

    fn raw_partials(&self, z: f64, e: &EvalResult) -> Jet {
        let (s, a, b) = self.coeffs(z);
        let g = self.gamma;
        let EvalResult { f, f_t, f_z, f_zz } = *e;
        let j = match self.form {
            ResidualForm::Derived => [
                s * (g - 1.0) * f_t - s * g * a * z * f_z - g * a * a * f
                    + 0.5 * s * s * (g - 1.0) * z * z * f_zz
                    + s * (g - 1.0) * b * z * f_z,
                s * (g - 1.0) * f,
                -s * s * g * z * z * f_z - s * g * a * z * f + s * (g - 1.0) * b * z * f,
                0.5 * s * s * (g - 1.0) * z * z * f,
            ],
            ResidualForm::Printed => [
                s * (g - 1.0) * f_t - 0.5 * g * a * a + 0.5 * s * (g - 1.0) * z * z * f_zz - s * g * a * z * f_z
                    + s * (g - 1.0) * b * f_z,
                s * (g - 1.0) * f,
                -s * s * g * z * z * f_z - s * g * a * z * f + s * (g - 1.0) * b * f,
                0.5 * s * (g - 1.0) * z * z * f,
            ],
        };
        j
    }
}

impl PdeProblem for CointelationPde {
    fn residual(&self, _t: f64, z: f64, e: &EvalResult) -> f64 {
        let r = self.raw_residual(z, e);
        if self.normalized {
            r / (self.params.sigma_tilde() * e.f * e.f)
        } else {
            r
        }
    }

    fn residual_partials(&self, _t: f64, z: f64, e: &EvalResult) -> Jet {
        let d = self.raw_partials(z, e);
        if !self.normalized {
            return d;
        }
        let r = self.raw_residual(z, e);
        let q = 1.0 / (self.params.sigma_tilde() * e.f * e.f);
        [q * (d[0] - 2.0 * r / e.f), q * d[1], q * d[2], q * d[3]]
    }

    fn terminal_value(&self, _z: f64) -> f64 {
        1.0
    }

    fn domain(&self) -> Domain {
        self.domain
    }
}

/// `z`-range covering the simulated ratio `X / Y`: the 0.5% and 99.5%
/// quantiles over all sampled points, padded by 10% of the width each side.
pub fn z_domain_from_simulation(
    params: &CointelationParams,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
    exec: Exec,
) -> Result<(f64, f64)> {
    ensure(n_paths >= 1, || "need at least one path".into())?;
    let paths = map_indexed(exec, n_paths, |i| simulate_pair(params, horizon, dt, 1, path_seed(seed, i)));
    let mut zs = Vec::new();
    for p in paths {
        let p = p?;
        zs.extend(p.x.iter().zip(&p.y).map(|(x, y)| x / y));
    }
    let (lo, hi) = (quantile(&zs, 0.005), quantile(&zs, 0.995));
    let pad = 0.1 * (hi - lo).max(1e-6);
    Ok(((lo - pad).max(1e-6), hi + pad))
}

/// `pi_1* = -z f_z / ((gamma - 1) f) - A / (sigma~ (gamma - 1))`, clamped to
/// `[-PI_MAX, PI_MAX]`. Returns `(pi_1, pi_2)` with `pi_2 = -pi_1`.
pub fn optimal_pi_from_eval(e: &EvalResult, z: f64, params: &CointelationParams, gamma: f64) -> Result<(f64, f64)> {
    if !(e.f.abs() >= F_MIN) {
        return Err(Error::Evaluation(format!("|f| = {:e} below {F_MIN:e} at z = {z}", e.f.abs())));
    }
    let st = params.sigma_tilde();
    let a = params.mu - params.kappa * (z - 1.0);
    let pi = -z * e.f_z / ((gamma - 1.0) * e.f) - a / (st * (gamma - 1.0));
    if !pi.is_finite() {
        return Err(Error::Evaluation(format!("non-finite weight at z = {z}")));
    }
    let pi = pi.clamp(-PI_MAX, PI_MAX);
    Ok((pi, -pi))
}

/// Optimal pairs weights from a trained network.
pub fn optimal_pi(net: &DgmNetwork, t: f64, z: f64, params: &CointelationParams, gamma: f64) -> Result<(f64, f64)> {
    optimal_pi_from_eval(&net.forward_with_input_derivs(t, z), z, params, gamma)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Optimizer {
    /// `theta <- theta - alpha g`.
    Sgd,
    /// Adam with bias correction, using the same decaying `alpha_n`.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub interior: f64,
    pub terminal: f64,
    pub boundary: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { interior: 1.0, terminal: 1.0, boundary: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub alpha0: f64,
    pub lambda_decay: f64,
    pub batch_interior: usize,
    pub batch_terminal: usize,
    pub batch_boundary: usize,
    pub max_steps: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Gradients with a larger norm are rescaled to this norm.
    pub clip_norm: Option<f64>,
    pub optimizer: Optimizer,
    /// Loss history keeps every `log_every`-th step plus the last one.
    pub log_every: usize,
    /// For this many initial steps the interior points are fitted to the
    /// terminal value instead of the residual, so training starts from
    /// `f(t, z) = g(z)`.
    pub warm_start_steps: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha0: 1e-3,
            lambda_decay: 0.9999,
            batch_interior: 64,
            batch_terminal: 32,
            batch_boundary: 16,
            max_steps: 100_000,
            tolerance: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
            clip_norm: Some(1e3),
            optimizer: Optimizer::Sgd,
            log_every: 100,
            warm_start_steps: 0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.alpha0 > 0.0 && self.alpha0.is_finite(), || format!("alpha0 must be > 0, got {}", self.alpha0))?;
        ensure(self.lambda_decay > 0.0 && self.lambda_decay < 1.0, || {
            format!("lambda_decay must lie in (0, 1), got {}", self.lambda_decay)
        })?;
        ensure(self.tolerance > 0.0, || format!("tolerance must be > 0, got {}", self.tolerance))?;
        ensure(self.batch_interior >= 1 && self.batch_terminal >= 1, || "batch sizes must be >= 1".into())?;
        ensure(self.log_every >= 1, || "log_every must be >= 1".into())?;
        let w = &self.weights;
        ensure([w.interior, w.terminal, w.boundary].iter().all(|v| *v >= 0.0 && v.is_finite()), || {
            "loss weights must be finite and >= 0".into()
        })
    }

    /// `alpha_0 lambda^n`.
    pub fn alpha(&self, n: usize) -> f64 {
        self.alpha0 * self.lambda_decay.powi(n as i32)
    }
}

/// Random collocation points for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub interior: Vec<(f64, f64)>,
    pub terminal: Vec<f64>,
    pub boundary: Vec<f64>,
}

/// Uniform points over the domain, deterministic in `(seed, step)`.
pub fn sample_batch(problem: &dyn PdeProblem, config: &TrainConfig, step: usize) -> Batch {
    let d = problem.domain();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(step as u64);
    let uz = |rng: &mut ChaCha8Rng| d.z_lo + (d.z_hi - d.z_lo) * rng.random::<f64>();
    let interior = (0..config.batch_interior)
        .map(|_| {
            let t = d.horizon * rng.random::<f64>();
            (t, uz(&mut rng))
        })
        .collect();
    let terminal = (0..config.batch_terminal).map(|_| uz(&mut rng)).collect();
    let boundary = if problem.boundary().is_some() {
        (0..config.batch_boundary).map(|_| d.horizon * rng.random::<f64>()).collect()
    } else {
        Vec::new()
    };
    Batch { interior, terminal, boundary }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossParts {
    pub interior: f64,
    pub terminal: f64,
    pub boundary: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.interior + self.terminal + self.boundary
    }
}

/// Points per parallel work unit in the batch loss.
const LOSS_CHUNK: usize = 8;

enum Point {
    Interior(f64, f64),
    Terminal(f64),
    Boundary(f64),
}

/// Weighted batch loss and its exact parameter gradient.
pub fn loss_and_grad(
    net: &DgmNetwork,
    problem: &dyn PdeProblem,
    batch: &Batch,
    weights: &LossWeights,
    exec: Exec,
) -> Result<(LossParts, Vec<f64>)> {
    batch_loss(net, problem, batch, weights, exec, false)
}

fn batch_loss(
    net: &DgmNetwork,
    problem: &dyn PdeProblem,
    batch: &Batch,
    weights: &LossWeights,
    exec: Exec,
    warm: bool,
) -> Result<(LossParts, Vec<f64>)> {
    let d = problem.domain();
    let bc = problem.boundary();
    let n_i = batch.interior.len();
    let n_t = batch.terminal.len();
    let n_b = if bc.is_some() { batch.boundary.len() } else { 0 };
    let point = |k: usize| {
        if k < n_i {
            let (t, z) = batch.interior[k];
            Point::Interior(t, z)
        } else if k < n_i + n_t {
            Point::Terminal(batch.terminal[k - n_i])
        } else {
            Point::Boundary(batch.boundary[k - n_i - n_t])
        }
    };
    let n_params = net.n_params();
    let unit = |range: std::ops::Range<usize>| -> Result<(LossParts, Vec<f64>)> {
        let mut grad = vec![0.0; n_params];
        let mut parts = LossParts { interior: 0.0, terminal: 0.0, boundary: 0.0 };
        for k in range {
            match point(k) {
                Point::Interior(t, z) if warm => {
                    let tape = net.tape(t, z);
                    let m = tape.eval().f - problem.terminal_value(z);
                    if !m.is_finite() {
                        return Err(Error::NonFinite { t, z, what: "warm-start mismatch" });
                    }
                    let c = weights.interior / n_i as f64;
                    parts.interior += c * m * m;
                    net.backward_into(&tape, &[2.0 * c * m, 0.0, 0.0, 0.0], &mut grad);
                }
                Point::Interior(t, z) => {
                    let tape = net.tape(t, z);
                    let e = tape.eval();
                    let r = problem.residual(t, z, &e);
                    if !r.is_finite() || !e.is_finite() {
                        return Err(Error::NonFinite { t, z, what: "interior residual" });
                    }
                    let c = weights.interior / n_i as f64;
                    parts.interior += c * r * r;
                    let dr = problem.residual_partials(t, z, &e);
                    net.backward_into(&tape, &dr.map(|v| 2.0 * c * r * v), &mut grad);
                }
                Point::Terminal(z) => {
                    let tape = net.tape(d.horizon, z);
                    let m = tape.eval().f - problem.terminal_value(z);
                    if !m.is_finite() {
                        return Err(Error::NonFinite { t: d.horizon, z, what: "terminal mismatch" });
                    }
                    let c = weights.terminal / n_t as f64;
                    parts.terminal += c * m * m;
                    net.backward_into(&tape, &[2.0 * c * m, 0.0, 0.0, 0.0], &mut grad);
                }
                Point::Boundary(t) => {
                    let b = bc.expect("boundary points only with a boundary");
                    let tape = net.tape(t, b.z);
                    let m = tape.eval().f - b.value;
                    if !m.is_finite() {
                        return Err(Error::NonFinite { t, z: b.z, what: "boundary mismatch" });
                    }
                    let c = weights.boundary / n_b as f64;
                    parts.boundary += c * m * m;
                    net.backward_into(&tape, &[2.0 * c * m, 0.0, 0.0, 0.0], &mut grad);
                }
            }
        }
        Ok((parts, grad))
    };
    let merged = chunked_reduce(exec, n_i + n_t + n_b, LOSS_CHUNK, unit, |a, b| {
        let (mut pa, mut ga) = a?;
        let (pb, gb) = b?;
        pa.interior += pb.interior;
        pa.terminal += pb.terminal;
        pa.boundary += pb.boundary;
        for (x, y) in ga.iter_mut().zip(&gb) {
            *x += y;
        }
        Ok((pa, ga))
    });
    merged.unwrap_or_else(|| Ok((LossParts { interior: 0.0, terminal: 0.0, boundary: 0.0 }, vec![0.0; n_params])))
}

/// Root-mean-square interior residual over fixed points.
pub fn residual_rms(net: &DgmNetwork, problem: &dyn PdeProblem, points: &[(f64, f64)]) -> f64 {
    let ss: f64 = points
        .iter()
        .map(|&(t, z)| {
            let r = problem.residual(t, z, &net.forward_with_input_derivs(t, z));
            r * r
        })
        .sum();
    (ss / points.len() as f64).sqrt()
}

/// One entry of the decimated loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub alpha: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps_run: usize,
    pub final_loss: f64,
    pub loss_history: Vec<LogEntry>,
    pub wall_time: f64,
    pub clip_events: usize,
    pub skipped_steps: usize,
    pub converged: bool,
    pub diverged: bool,
}

impl TrainReport {
    /// Turns a divergent run into an error.
    pub fn check(&self) -> Result<()> {
        if self.diverged {
            Err(Error::Divergence { steps: self.steps_run, loss: self.final_loss })
        } else {
            Ok(())
        }
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Runs the training loop. The network's input map is set from the problem
/// domain before the first step.
pub fn train(mut net: DgmNetwork, problem: &dyn PdeProblem, config: &TrainConfig) -> Result<(DgmNetwork, TrainReport)> {
    config.validate()?;
    net.set_input_map(problem.domain().input_map());
    let start = Instant::now();
    let mut history = Vec::new();
    let mut clip_events = 0;
    let mut skipped = 0;
    let mut bad_run = 0;
    let mut converged = false;
    let mut diverged = false;
    let mut last_loss = f64::NAN;
    let mut steps_run = 0;
    let mut adam = match config.optimizer {
        Optimizer::Adam { .. } => Some(AdamState { m: vec![0.0; net.n_params()], v: vec![0.0; net.n_params()] }),
        Optimizer::Sgd => None,
    };

    if config.max_steps == 0 {
        let batch = sample_batch(problem, config, 0);
        let (parts, _) = loss_and_grad(&net, problem, &batch, &config.weights, config.exec)?;
        last_loss = parts.total();
        history.push(LogEntry { step: 0, loss: last_loss, alpha: config.alpha(0), wall_time: 0.0 });
    }

    for n in 0..config.max_steps {
        let batch = sample_batch(problem, config, n);
        let warm = n < config.warm_start_steps;
        let (parts, mut grad) = batch_loss(&net, problem, &batch, &config.weights, config.exec, warm)?;
        let loss = parts.total();
        last_loss = loss;
        let alpha = config.alpha(n);
        let log_now = n % config.log_every == 0;
        if loss <= config.tolerance && !warm {
            converged = true;
            history.push(LogEntry { step: n, loss, alpha, wall_time: start.elapsed().as_secs_f64() });
            break;
        }
        bad_run = if loss > DIVERGENCE_LOSS || !loss.is_finite() { bad_run + 1 } else { 0 };
        if bad_run >= DIVERGENCE_STEPS {
            diverged = true;
            history.push(LogEntry { step: n, loss, alpha, wall_time: start.elapsed().as_secs_f64() });
            break;
        }
        if log_now {
            history.push(LogEntry { step: n, loss, alpha, wall_time: start.elapsed().as_secs_f64() });
        }

        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if let Some(clip) = config.clip_norm {
            if norm > clip {
                clip_events += 1;
                let s = clip / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        if !norm.is_finite() {
            skipped += 1;
        } else {
            match (config.optimizer, adam.as_mut()) {
                (Optimizer::Adam { beta1, beta2, eps }, Some(st)) => {
                    let k = (n + 1) as i32;
                    let (c1, c2) = (1.0 - beta1.powi(k), 1.0 - beta2.powi(k));
                    for (i, p) in net.params_mut().iter_mut().enumerate() {
                        let g = grad[i];
                        st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                        st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                        *p -= alpha * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + eps);
                    }
                }
                _ => {
                    let g = crate::net::ParamGradient { grad, loss };
                    net.sgd_step(&g, alpha)?;
                }
            }
        }
        steps_run = n + 1;
    }
    if !converged && !diverged && config.max_steps > 0 {
        let last = history.last().map(|h| h.step);
        if last != Some(steps_run - 1) {
            let alpha = config.alpha(steps_run - 1);
            history.push(LogEntry { step: steps_run - 1, loss: last_loss, alpha, wall_time: start.elapsed().as_secs_f64() });
        }
    }
    let report = TrainReport {
        steps_run,
        final_loss: last_loss,
        loss_history: history,
        wall_time: start.elapsed().as_secs_f64(),
        clip_events,
        skipped_steps: skipped,
        converged,
        diverged,
    };
    Ok((net, report))
}
