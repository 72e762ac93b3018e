//! Gated DGM network `f(t, z; theta)` with exact input derivatives.
//!
//! Architecture, with `x = (t_n, z_n)` the normalised inputs and `tanh`
//! activations:
//!
//! ```text
//! S1      = tanh(W1 x + b1)
//! Z       = tanh(Uz x + Wz S + bz)
//! G       = tanh(Ug x + Wg S + bg)
//! R       = tanh(Ur x + Wr S + br)
//! H       = tanh(Uh x + Wh (S * R) + bh)
//! S_next  = (1 - G) * H + Z * S              (repeated for each layer)
//! f       = w . S_{L+1} + b
//! ```
//!
//! Every intermediate is carried as a jet `[value, d/dt, d/dz, d2/dz2]`, so
//! `f_t`, `f_z` and `f_zz` come out exactly. Parameter gradients of any linear
//! combination of the four outputs are obtained by reverse accumulation over
//! the jet graph.
//!
//! # Parameter layout
//!
//! All parameters live in one flat vector, matrices row-major with one row per
//! hidden unit:
//!
//! | block            | shape      |
//! |------------------|------------|
//! | `W1`             | `H x 2`    |
//! | `b1`             | `H`        |
//! | per layer, per gate in order `Z, G, R, H`: `U` | `H x 2` |
//! |                  `W`        | `H x H`    |
//! |                  `b`        | `H`        |
//! | output `w`       | `H`        |
//! | output `b`       | `1`        |
//!
//! # Checkpoint format
//!
//! Plain UTF-8 text, one item per line:
//!
//! ```text
//! cointel-dgm-checkpoint v1
//! hidden <H>
//! layers <L>
//! seed <u64>
//! input_map <t_shift> <t_scale> <z_shift> <z_scale>
//! params <count>
//! <value>            (count lines, in the layout order above)
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so a save/load
//! cycle is bit exact.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::error::{ensure, Error, Result};
use crate::sim::rng_from_seed;

/// Jet: value, d/dt, d/dz, d2/dz2.
pub type Jet = [f64; 4];

const V: usize = 0;
const T: usize = 1;
const Z: usize = 2;
const ZZ: usize = 3;

const CHECKPOINT_MAGIC: &str = "cointel-dgm-checkpoint v1";

/// Affine map from problem coordinates to network inputs:
/// `t_n = (t - t_shift) t_scale`, `z_n = (z - z_shift) z_scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InputMap {
    pub t_shift: f64,
    pub t_scale: f64,
    pub z_shift: f64,
    pub z_scale: f64,
}

impl Default for InputMap {
    fn default() -> Self {
        Self { t_shift: 0.0, t_scale: 1.0, z_shift: 0.0, z_scale: 1.0 }
    }
}

impl InputMap {
    /// Maps `[0, horizon] x [z_lo, z_hi]` onto the unit square.
    pub fn unit_square(horizon: f64, z_lo: f64, z_hi: f64) -> Self {
        Self { t_shift: 0.0, t_scale: 1.0 / horizon, z_shift: z_lo, z_scale: 1.0 / (z_hi - z_lo) }
    }

    fn input_jets(&self, t: f64, z: f64) -> (Jet, Jet) {
        (
            [(t - self.t_shift) * self.t_scale, self.t_scale, 0.0, 0.0],
            [(z - self.z_shift) * self.z_scale, 0.0, self.z_scale, 0.0],
        )
    }
}

/// `f` and its input derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub f: f64,
    pub f_t: f64,
    pub f_z: f64,
    pub f_zz: f64,
}

impl EvalResult {
    fn from_jet(j: Jet) -> Self {
        Self { f: j[V], f_t: j[T], f_z: j[Z], f_zz: j[ZZ] }
    }

    pub fn is_finite(&self) -> bool {
        self.f.is_finite() && self.f_t.is_finite() && self.f_z.is_finite() && self.f_zz.is_finite()
    }
}

/// Gradient with respect to every parameter (same layout as the network),
/// together with the loss it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub grad: Vec<f64>,
    pub loss: f64,
}

impl ParamGradient {
    pub fn zeros(n: usize) -> Self {
        Self { grad: vec![0.0; n], loss: 0.0 }
    }

    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
struct Gate {
    u: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    w1: usize,
    b1: usize,
    /// `[layer][gate]`, gates ordered Z, G, R, H.
    gates: Vec<[Gate; 4]>,
    out_w: usize,
    out_b: usize,
    len: usize,
}

impl Layout {
    fn new(h: usize, layers: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let w1 = take(2 * h);
        let b1 = take(h);
        let gates = (0..layers)
            .map(|_| {
                [(); 4].map(|_| {
                    let u = take(2 * h);
                    let w = take(h * h);
                    let b = take(h);
                    Gate { u, w, b }
                })
            })
            .collect();
        let out_w = take(h);
        let out_b = take(1);
        Layout { w1, b1, gates, out_w, out_b, len: at }
    }
}

/// The DGM surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct DgmNetwork {
    hidden: usize,
    layers: usize,
    seed: u64,
    input_map: InputMap,
    params: Vec<f64>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct Tape {
    x_t: Jet,
    x_z: Jet,
    pre1: Vec<Jet>,
    layers: Vec<LayerTape>,
    out: Jet,
}

#[derive(Debug, Clone)]
struct LayerTape {
    s: Vec<Jet>,
    /// Pre-activations and activations, gates ordered Z, G, R, H.
    pre: [Vec<Jet>; 4],
    act: [Vec<Jet>; 4],
    sr: Vec<Jet>,
}

impl Tape {
    pub fn eval(&self) -> EvalResult {
        EvalResult::from_jet(self.out)
    }
}

fn tanh_jet(u: &Jet) -> Jet {
    let y = u[V].tanh();
    let d1 = 1.0 - y * y;
    let d2 = -2.0 * y * d1;
    [y, d1 * u[T], d1 * u[Z], d1 * u[ZZ] + d2 * u[Z] * u[Z]]
}

/// Adjoint of `tanh_jet`: given the output adjoint `a` and the input `u`,
/// returns the input adjoint.
fn tanh_jet_back(u: &Jet, a: &Jet) -> Jet {
    let y = u[V].tanh();
    let d1 = 1.0 - y * y;
    let d2 = -2.0 * y * d1;
    let d3 = -2.0 * d1 * d1 + 4.0 * y * y * d1;
    [
        a[V] * d1 + a[T] * d2 * u[T] + a[Z] * d2 * u[Z] + a[ZZ] * (d2 * u[ZZ] + d3 * u[Z] * u[Z]),
        a[T] * d1,
        a[Z] * d1 + 2.0 * a[ZZ] * d2 * u[Z],
        a[ZZ] * d1,
    ]
}

fn mul_jet(a: &Jet, b: &Jet) -> Jet {
    [
        a[V] * b[V],
        a[T] * b[V] + a[V] * b[T],
        a[Z] * b[V] + a[V] * b[Z],
        a[ZZ] * b[V] + 2.0 * a[Z] * b[Z] + a[V] * b[ZZ],
    ]
}

/// Adds the adjoint contribution of `p = a * b` to `a`'s adjoint.
fn mul_jet_back(ap: &Jet, b: &Jet, aa: &mut Jet) {
    aa[V] += ap[V] * b[V] + ap[T] * b[T] + ap[Z] * b[Z] + ap[ZZ] * b[ZZ];
    aa[T] += ap[T] * b[V];
    aa[Z] += ap[Z] * b[V] + 2.0 * ap[ZZ] * b[Z];
    aa[ZZ] += ap[ZZ] * b[V];
}

impl DgmNetwork {
    /// Glorot-uniform weights per tensor, zero biases.
    pub fn new(hidden: usize, layers: usize, seed: u64) -> Result<Self> {
        ensure(hidden >= 1, || "hidden_width must be >= 1".into())?;
        ensure(layers >= 1, || "n_layers must be >= 1".into())?;
        let lay = Layout::new(hidden, layers);
        let mut params = vec![0.0; lay.len];
        let mut rng = rng_from_seed(seed);
        let mut fill = |start: usize, rows: usize, cols: usize, params: &mut [f64]| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            for p in &mut params[start..start + rows * cols] {
                *p = rng.random_range(-limit..limit);
            }
        };
        fill(lay.w1, hidden, 2, &mut params);
        for gates in &lay.gates {
            for g in gates {
                fill(g.u, hidden, 2, &mut params);
                fill(g.w, hidden, hidden, &mut params);
            }
        }
        fill(lay.out_w, 1, hidden, &mut params);
        Ok(Self { hidden, layers, seed, input_map: InputMap::default(), params })
    }

    pub fn with_input_map(mut self, map: InputMap) -> Self {
        self.input_map = map;
        self
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden
    }

    pub fn n_layers(&self) -> usize {
        self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_map(&self) -> InputMap {
        self.input_map
    }

    pub fn set_input_map(&mut self, map: InputMap) {
        self.input_map = map;
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn layout(&self) -> Layout {
        Layout::new(self.hidden, self.layers)
    }

    /// `f(t, z)`.
    pub fn forward(&self, t: f64, z: f64) -> f64 {
        self.tape(t, z).out[V]
    }

    /// `f` with `f_t`, `f_z`, `f_zz`.
    pub fn forward_with_input_derivs(&self, t: f64, z: f64) -> EvalResult {
        self.tape(t, z).eval()
    }

    fn affine(&self, u: usize, w: Option<(usize, &[Jet])>, b: usize, x_t: &Jet, x_z: &Jet) -> Vec<Jet> {
        let p = &self.params;
        let h = self.hidden;
        (0..h)
            .map(|i| {
                let (ut, uz) = (p[u + 2 * i], p[u + 2 * i + 1]);
                let mut j = [
                    ut * x_t[V] + uz * x_z[V],
                    ut * x_t[T] + uz * x_z[T],
                    ut * x_t[Z] + uz * x_z[Z],
                    ut * x_t[ZZ] + uz * x_z[ZZ],
                ];
                if let Some((w, s)) = w {
                    let row = &p[w + i * h..w + (i + 1) * h];
                    for (wij, sj) in row.iter().zip(s) {
                        for c in 0..4 {
                            j[c] += wij * sj[c];
                        }
                    }
                }
                j[V] += p[b + i];
                j
            })
            .collect()
    }

    /// Forward pass keeping every intermediate jet.
    pub fn tape(&self, t: f64, z: f64) -> Tape {
        let lay = self.layout();
        let (x_t, x_z) = self.input_map.input_jets(t, z);
        let pre1 = self.affine(lay.w1, None, lay.b1, &x_t, &x_z);
        let mut s: Vec<Jet> = pre1.iter().map(tanh_jet).collect();
        let mut layers = Vec::with_capacity(self.layers);
        for gates in &lay.gates {
            let [gz, gg, gr, gh] = *gates;
            let pre_z = self.affine(gz.u, Some((gz.w, &s)), gz.b, &x_t, &x_z);
            let pre_g = self.affine(gg.u, Some((gg.w, &s)), gg.b, &x_t, &x_z);
            let pre_r = self.affine(gr.u, Some((gr.w, &s)), gr.b, &x_t, &x_z);
            let act_z: Vec<Jet> = pre_z.iter().map(tanh_jet).collect();
            let act_g: Vec<Jet> = pre_g.iter().map(tanh_jet).collect();
            let act_r: Vec<Jet> = pre_r.iter().map(tanh_jet).collect();
            let sr: Vec<Jet> = s.iter().zip(&act_r).map(|(a, b)| mul_jet(a, b)).collect();
            let pre_h = self.affine(gh.u, Some((gh.w, &sr)), gh.b, &x_t, &x_z);
            let act_h: Vec<Jet> = pre_h.iter().map(tanh_jet).collect();
            let next: Vec<Jet> = (0..self.hidden)
                .map(|i| {
                    let gh_ = mul_jet(&act_g[i], &act_h[i]);
                    let zs = mul_jet(&act_z[i], &s[i]);
                    [0, 1, 2, 3].map(|c| act_h[i][c] - gh_[c] + zs[c])
                })
                .collect();
            layers.push(LayerTape {
                s: std::mem::replace(&mut s, next),
                pre: [pre_z, pre_g, pre_r, pre_h],
                act: [act_z, act_g, act_r, act_h],
                sr,
            });
        }
        let p = &self.params;
        let mut out = [0.0; 4];
        for (wi, si) in p[lay.out_w..lay.out_w + self.hidden].iter().zip(&s) {
            for c in 0..4 {
                out[c] += wi * si[c];
            }
        }
        out[V] += p[lay.out_b];
        // Keep the final state for the backward pass.
        layers.push(LayerTape { s, pre: Default::default(), act: Default::default(), sr: Vec::new() });
        Tape { x_t, x_z, pre1, layers, out }
    }

    /// Accumulates into `grad` the gradient of `adj . (f, f_t, f_z, f_zz)`.
    pub fn backward_into(&self, tape: &Tape, adj: &Jet, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let lay = self.layout();
        let h = self.hidden;
        let p = &self.params;
        let (x_t, x_z) = (&tape.x_t, &tape.x_z);

        let s_final = &tape.layers[self.layers].s;
        for i in 0..h {
            grad[lay.out_w + i] += (0..4).map(|c| adj[c] * s_final[i][c]).sum::<f64>();
        }
        grad[lay.out_b] += adj[V];
        let mut a_s: Vec<Jet> = (0..h).map(|i| adj.map(|a| a * p[lay.out_w + i])).collect();

        // Linear backward for `pre = U x + W s + b`; returns the adjoint of `s`.
        let linear_back = |a_pre: &[Jet], gate: Gate, s_in: Option<&[Jet]>, grad: &mut [f64]| -> Vec<Jet> {
            let mut a_in = vec![[0.0; 4]; if s_in.is_some() { h } else { 0 }];
            for i in 0..h {
                let a = &a_pre[i];
                grad[gate.u + 2 * i] += (0..4).map(|c| a[c] * x_t[c]).sum::<f64>();
                grad[gate.u + 2 * i + 1] += (0..4).map(|c| a[c] * x_z[c]).sum::<f64>();
                grad[gate.b + i] += a[V];
                if let Some(s) = s_in {
                    let row = gate.w + i * h;
                    for j in 0..h {
                        grad[row + j] += (0..4).map(|c| a[c] * s[j][c]).sum::<f64>();
                        let w = p[row + j];
                        for c in 0..4 {
                            a_in[j][c] += w * a[c];
                        }
                    }
                }
            }
            a_in
        };

        for l in (0..self.layers).rev() {
            let lt = &tape.layers[l];
            let [gz, gg, gr, gh] = lay.gates[l];
            let [az, ag, ar, ah] = &lt.act;
            // S_next = H - G*H + Z*S
            let mut a_act: [Vec<Jet>; 4] = Default::default();
            for a in a_act.iter_mut() {
                *a = vec![[0.0; 4]; h];
            }
            let mut a_s_prev = vec![[0.0; 4]; h];
            for i in 0..h {
                let an = a_s[i];
                let neg = an.map(|v| -v);
                for c in 0..4 {
                    a_act[3][i][c] += an[c];
                }
                mul_jet_back(&neg, &ah[i], &mut a_act[1][i]);
                mul_jet_back(&neg, &ag[i], &mut a_act[3][i]);
                mul_jet_back(&an, &lt.s[i], &mut a_act[0][i]);
                mul_jet_back(&an, &az[i], &mut a_s_prev[i]);
            }
            // H = tanh(Uh x + Wh (S*R) + bh)
            let a_pre_h: Vec<Jet> = (0..h).map(|i| tanh_jet_back(&lt.pre[3][i], &a_act[3][i])).collect();
            let a_sr = linear_back(&a_pre_h, gh, Some(&lt.sr), grad);
            for i in 0..h {
                mul_jet_back(&a_sr[i], &ar[i], &mut a_s_prev[i]);
                mul_jet_back(&a_sr[i], &lt.s[i], &mut a_act[2][i]);
            }
            for (k, gate) in [(0, gz), (1, gg), (2, gr)] {
                let a_pre: Vec<Jet> = (0..h).map(|i| tanh_jet_back(&lt.pre[k][i], &a_act[k][i])).collect();
                let a_in = linear_back(&a_pre, gate, Some(&lt.s), grad);
                for i in 0..h {
                    for c in 0..4 {
                        a_s_prev[i][c] += a_in[i][c];
                    }
                }
            }
            a_s = a_s_prev;
        }

        let a_pre1: Vec<Jet> = (0..h).map(|i| tanh_jet_back(&tape.pre1[i], &a_s[i])).collect();
        linear_back(&a_pre1, Gate { u: lay.w1, w: 0, b: lay.b1 }, None, grad);
    }

    /// Gradient of `adj . (f, f_t, f_z, f_zz)` at `(t, z)`.
    pub fn backward(&self, t: f64, z: f64, adj: &Jet) -> ParamGradient {
        let tape = self.tape(t, z);
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(&tape, adj, &mut grad);
        let loss = (0..4).map(|c| adj[c] * tape.out[c]).sum();
        ParamGradient { grad, loss }
    }

    /// `theta <- theta - alpha grad`. A non-finite gradient leaves the
    /// parameters untouched and returns `false`.
    pub fn sgd_step(&mut self, grad: &ParamGradient, alpha: f64) -> Result<bool> {
        ensure(alpha > 0.0 && alpha.is_finite(), || format!("learning rate must be > 0, got {alpha}"))?;
        ensure(grad.grad.len() == self.params.len(), || "gradient length mismatch".into())?;
        if !grad.grad.iter().all(|g| g.is_finite()) {
            return Ok(false);
        }
        for (p, g) in self.params.iter_mut().zip(&grad.grad) {
            *p -= alpha * g;
        }
        Ok(true)
    }

    // -----------------------------------------------------------------------
    // Checkpoints
    // -----------------------------------------------------------------------

    pub fn to_checkpoint_string(&self) -> String {
        let m = &self.input_map;
        let mut s = String::with_capacity(24 * self.params.len() + 128);
        let _ = writeln!(s, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(s, "hidden {}", self.hidden);
        let _ = writeln!(s, "layers {}", self.layers);
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "input_map {:?} {:?} {:?} {:?}", m.t_shift, m.t_scale, m.z_shift, m.z_scale);
        let _ = writeln!(s, "params {}", self.params.len());
        for p in &self.params {
            let _ = writeln!(s, "{p:?}");
        }
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::Parse(format!("checkpoint truncated before {what}")));
        if next("header")?.trim() != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a DGM checkpoint (bad header)".into()));
        }
        fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| Error::Parse(format!("expected `{key}` line, got `{line}`")))
        }
        fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
            s.trim().parse().map_err(|_| Error::Parse(format!("bad {what}: `{s}`")))
        }
        let hidden: usize = num(field(next("hidden")?, "hidden")?, "hidden")?;
        let layers: usize = num(field(next("layers")?, "layers")?, "layers")?;
        let seed: u64 = num(field(next("seed")?, "seed")?, "seed")?;
        let map: Vec<f64> = field(next("input_map")?, "input_map")?
            .split_whitespace()
            .map(|v| num(v, "input_map"))
            .collect::<Result<_>>()?;
        if map.len() != 4 {
            return Err(Error::Parse("input_map needs 4 values".into()));
        }
        let count: usize = num(field(next("params")?, "params")?, "params")?;
        let mut net = DgmNetwork::new(hidden, layers, seed).map_err(|e| Error::Parse(e.to_string()))?;
        if count != net.params.len() {
            return Err(Error::Parse(format!("expected {} params for H={hidden} L={layers}, got {count}", net.params.len())));
        }
        for p in net.params.iter_mut() {
            *p = num(next("parameter")?, "parameter")?;
            if !p.is_finite() {
                return Err(Error::Parse("non-finite parameter".into()));
            }
        }
        net.input_map = InputMap { t_shift: map[0], t_scale: map[1], z_shift: map[2], z_scale: map[3] };
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}

/// Alias matching the usual entry point name.
pub fn init_network(hidden_width: usize, n_layers: usize, seed: u64) -> Result<DgmNetwork> {
    DgmNetwork::new(hidden_width, n_layers, seed)
}
