//! Band-wise strategy learning on the spread `X - Y`.
//!
//! Training samples of the spread are cut into `h` percentile bands. Inside
//! each band three fixed-mix strategies are tried:
//!
//! ```text
//! PP: ( w,  1-w)   long both
//! PM: ( w, -(1-w)) long X, short Y
//! MP: (-w,  1-w)   short X, long Y
//! ```
//!
//! scored by the in-band price-increment P&L `sum (w1 dX + w2 dY) 1{a < s_t <= b}`
//! and the best `(kind, w)` per band is traded live by band lookup.
//!
//! Band `i` is the interval `(e_{i-1}, e_i]` with `e_{-1} = -inf` and
//! `e_{h-1} = +inf`.

use std::io::{BufRead, Write};

use serde::Serialize;

use crate::backtest::{Prefix, StrategyKind, WeightRule};
use crate::error::{ensure, Error, Result};
use crate::exec::{map_indexed, Exec};
use crate::sim::PathPair;
use crate::stats::Welford;

pub const DEFAULT_BANDS: usize = 5;
pub const DEFAULT_GRID_STEP: f64 = 0.05;
/// Weight chosen when every grid point scores the same.
pub const TIE_WEIGHT: f64 = 0.5;

/// Sorted band edges learnt from training spreads.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandSet {
    /// Interior edges, strictly increasing; `h() = edges.len() + 1`.
    pub edges: Vec<f64>,
    /// Band count asked for; larger than `h()` when duplicate edges merged.
    pub requested_h: usize,
    pub n_samples: usize,
}

impl BandSet {
    pub fn h(&self) -> usize {
        self.edges.len() + 1
    }

    /// Band holding `v`; a value equal to an edge belongs to the band below.
    pub fn band_of(&self, v: f64) -> usize {
        self.edges.partition_point(|e| *e < v)
    }

    /// `(lo, hi]` of band `i`.
    pub fn interval(&self, i: usize) -> (f64, f64) {
        let lo = if i == 0 { f64::NEG_INFINITY } else { self.edges[i - 1] };
        let hi = if i + 1 == self.h() { f64::INFINITY } else { self.edges[i] };
        (lo, hi)
    }

    pub fn merged(&self) -> usize {
        self.requested_h - self.h()
    }
}

/// Splits the sorted samples into `h` groups of near-equal size and puts an
/// edge at the largest value of every group but the last.
///
/// Group `i` (1-based) holds order statistics `ceil((n(i-1)+1)/h) ..= floor(ni/h)`.
/// Equal edges from tied data are merged, so the result can have fewer bands
/// but never an empty one.
pub fn find_percentile_bands(samples: &[f64], h: usize) -> Result<BandSet> {
    ensure(h >= 1, || "band count must be >= 1".into())?;
    if samples.len() < h {
        return Err(Error::InsufficientData { needed: h, got: samples.len() });
    }
    ensure(samples.iter().all(|s| s.is_finite()), || "non-finite spread sample".into())?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut edges: Vec<f64> = (1..h).map(|i| sorted[n * i / h - 1]).collect();
    edges.dedup();
    // An edge at the sample maximum would leave the top band empty.
    edges.retain(|e| *e < sorted[n - 1]);
    Ok(BandSet { edges, requested_h: h, n_samples: n })
}

/// Indices of the samples falling in each band.
pub fn allocate_to_bands(samples: &[f64], bands: &BandSet) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); bands.h()];
    for (i, s) in samples.iter().enumerate() {
        out[bands.band_of(*s)].push(i);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandGaussianFit {
    pub means: Vec<f64>,
    /// Sample standard deviations (zero for single-sample bands).
    pub std_devs: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn band_gaussian_fit(samples: &[f64], bands: &BandSet) -> Result<BandGaussianFit> {
    let groups = allocate_to_bands(samples, bands);
    let mut fit = BandGaussianFit { means: Vec::new(), std_devs: Vec::new(), counts: Vec::new() };
    for (i, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(Error::EmptyOutput(format!("band {i} has no samples")));
        }
        let w: Welford = g.iter().map(|&k| samples[k]).collect();
        fit.means.push(w.mean());
        fit.std_devs.push(w.std_dev());
        fit.counts.push(g.len());
    }
    Ok(fit)
}

// ---------------------------------------------------------------------------
// Per-band optimisation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum BandKind {
    PP,
    PM,
    MP,
}

impl BandKind {
    /// In tie-break preference order.
    pub const ALL: [BandKind; 3] = [BandKind::PP, BandKind::PM, BandKind::MP];
    pub const PAIRS: [BandKind; 2] = [BandKind::PM, BandKind::MP];

    pub fn legs(self, w: f64) -> (f64, f64) {
        match self {
            BandKind::PP => (w, 1.0 - w),
            BandKind::PM => (w, -(1.0 - w)),
            BandKind::MP => (-w, 1.0 - w),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BandKind::PP => "PP",
            BandKind::PM => "PM",
            BandKind::MP => "MP",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "PP" => Ok(BandKind::PP),
            "PM" => Ok(BandKind::PM),
            "MP" => Ok(BandKind::MP),
            _ => Err(Error::Parse(format!("unknown band strategy kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandStrategy {
    pub band: usize,
    pub kind: BandKind,
    pub w: f64,
    pub trained_pnl: f64,
    /// False when the band was never visited in training.
    pub trained: bool,
}

impl BandStrategy {
    /// Live weights; untrained bands stay flat.
    pub fn weights(&self) -> (f64, f64) {
        if self.trained {
            self.kind.legs(self.w)
        } else {
            (0.0, 0.0)
        }
    }
}

/// Sums of the price increments over steps whose starting spread lies in
/// the band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandIncrements {
    pub sum_dx: f64,
    pub sum_dy: f64,
    pub steps: usize,
}

pub fn band_increments(path: &PathPair, bands: &BandSet, band: usize) -> BandIncrements {
    let mut inc = BandIncrements { sum_dx: 0.0, sum_dy: 0.0, steps: 0 };
    for k in 0..path.len().saturating_sub(1) {
        if bands.band_of(path.x[k] - path.y[k]) == band {
            inc.sum_dx += path.x[k + 1] - path.x[k];
            inc.sum_dy += path.y[k + 1] - path.y[k];
            inc.steps += 1;
        }
    }
    inc
}

/// In-band P&L of `kind` at the two corners `w = 0` and `w = 1`.
fn corner_pnl(kind: BandKind, inc: &BandIncrements) -> (f64, f64) {
    let (sx, sy) = (inc.sum_dx, inc.sum_dy);
    let (p0, p1) = match kind {
        BandKind::PP => (sy, sx),
        BandKind::PM => (-sy, sx),
        BandKind::MP => (sy, -sx),
    };
    (p0, p1)
}

fn grid_points(step: f64) -> Result<usize> {
    ensure(step.is_finite() && step > 0.0 && step <= 0.5, || format!("grid step must lie in (0, 0.5], got {step}"))?;
    let m = (1.0 / step).round();
    ensure((m * step - 1.0).abs() < 1e-9, || format!("grid step {step} must divide 1"))?;
    Ok(m as usize)
}

/// Best weight of each kind on the grid `{0, step, ..., 1}`. Ties go to the
/// smallest weight, except that a P&L flat in `w` gives `w = 0.5`.
pub fn optimize_band(path: &PathPair, bands: &BandSet, band: usize, grid_step: f64) -> Result<[BandStrategy; 3]> {
    ensure(band < bands.h(), || format!("band {band} out of range for {} bands", bands.h()))?;
    let m = grid_points(grid_step)?;
    let inc = band_increments(path, bands, band);
    Ok(BandKind::ALL.map(|kind| {
        if inc.steps == 0 {
            return BandStrategy { band, kind, w: TIE_WEIGHT, trained_pnl: 0.0, trained: false };
        }
        // Interior points as `P(0) + w (P(1) - P(0))` so the value is monotone
        // in `w` under rounding; the corners exactly, so kinds that share a
        // corner tie exactly.
        let (p0, p1) = corner_pnl(kind, &inc);
        let slope = p1 - p0;
        let (w, pnl) = if slope == 0.0 {
            (TIE_WEIGHT, p0)
        } else {
            let mut best = (0.0, p0);
            for k in 1..=m {
                let w = k as f64 / m as f64;
                let v = if k == m { p1 } else { p0 + w * slope };
                if v > best.1 {
                    best = (w, v);
                }
            }
            best
        };
        BandStrategy { band, kind, w, trained_pnl: pnl, trained: true }
    }))
}

/// Highest P&L among the allowed kinds; ties follow the order of `kinds`.
pub fn select_best(candidates: &[BandStrategy; 3], kinds: &[BandKind]) -> BandStrategy {
    let mut best: Option<BandStrategy> = None;
    for kind in kinds {
        let c = candidates.iter().find(|c| c.kind == *kind).expect("one candidate per kind");
        if best.is_none_or(|b| c.trained_pnl > b.trained_pnl) {
            best = Some(*c);
        }
    }
    best.expect("at least one kind")
}

/// A trained band model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandModel {
    pub bands: BandSet,
    pub strategies: Vec<BandStrategy>,
}

/// Bands from the training spreads, then the best allowed strategy per band.
pub fn train_band_model(path: &PathPair, h: usize, grid_step: f64, kinds: &[BandKind], exec: Exec) -> Result<BandModel> {
    ensure(!kinds.is_empty(), || "need at least one strategy kind".into())?;
    let bands = find_percentile_bands(&path.spread(), h)?;
    let cands = map_indexed(exec, bands.h(), |i| optimize_band(path, &bands, i, grid_step));
    let mut strategies = Vec::with_capacity(bands.h());
    for c in cands {
        strategies.push(select_best(&c?, kinds));
    }
    Ok(BandModel { bands, strategies })
}

/// Live rule: look up the current spread's band and hold its weights.
#[derive(Debug, Clone)]
pub struct BandRule {
    model: BandModel,
}

pub fn live_strategy(model: &BandModel) -> Result<BandRule> {
    ensure(model.strategies.len() == model.bands.h(), || {
        format!("{} strategies for {} bands", model.strategies.len(), model.bands.h())
    })?;
    Ok(BandRule { model: model.clone() })
}

impl BandModel {
    pub fn weights_at(&self, x: f64, y: f64) -> (f64, f64) {
        self.strategies[self.bands.band_of(x - y)].weights()
    }
}

impl WeightRule for BandRule {
    fn weights(&mut self, prefix: &Prefix) -> (f64, f64) {
        self.model.weights_at(prefix.x_now(), prefix.y_now())
    }

    fn kind(&self) -> StrategyKind {
        StrategyKind::BandMl
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Signal {
    Buy,
    Sell,
    Hold,
}

fn signal(w: f64) -> Signal {
    if w > 0.0 {
        Signal::Buy
    } else if w < 0.0 {
        Signal::Sell
    } else {
        Signal::Hold
    }
}

/// Buy/sell/hold per leg from the sign of the live weights.
pub fn forecast_signals(model: &BandModel, x: f64, y: f64) -> (Signal, Signal) {
    let (a, b) = model.weights_at(x, y);
    (signal(a), signal(b))
}

// ---------------------------------------------------------------------------
// Strategy table
// ---------------------------------------------------------------------------

const TABLE_HEADER: &str = "band_lo,band_hi,kind,w,trained_pnl,flag";

/// Writes one row per band: `band_lo,band_hi,kind,w,trained_pnl,flag` where
/// `flag` is `trained` or `untrained`.
pub fn write_strategy_table<W: Write>(out: &mut W, model: &BandModel, root_seed: u64) -> Result<()> {
    writeln!(out, "# root_seed={root_seed} requested_h={} n_samples={}", model.bands.requested_h, model.bands.n_samples)?;
    writeln!(out, "{TABLE_HEADER}")?;
    for s in &model.strategies {
        let (lo, hi) = model.bands.interval(s.band);
        let flag = if s.trained { "trained" } else { "untrained" };
        writeln!(out, "{lo},{hi},{},{},{},{flag}", s.kind.name(), s.w, s.trained_pnl)?;
    }
    Ok(())
}

pub fn read_strategy_table<R: BufRead>(input: R) -> Result<BandModel> {
    let mut rows = Vec::new();
    let mut requested_h = None;
    let mut n_samples = 0;
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if let Some(meta) = line.strip_prefix('#') {
            for kv in meta.split_whitespace() {
                match kv.split_once('=') {
                    Some(("requested_h", v)) => requested_h = v.parse().ok(),
                    Some(("n_samples", v)) => n_samples = v.parse().unwrap_or(0),
                    _ => {}
                }
            }
            continue;
        }
        if line.is_empty() || line == TABLE_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Parse(format!("expected 6 fields, got {}: {line:?}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
        let trained = match f[5] {
            "trained" => true,
            "untrained" => false,
            other => return Err(Error::Parse(format!("unknown flag {other:?}"))),
        };
        rows.push((num(f[0])?, num(f[1])?, BandKind::parse(f[2])?, num(f[3])?, num(f[4])?, trained));
    }
    if rows.is_empty() {
        return Err(Error::Parse("strategy table has no rows".into()));
    }
    let edges: Vec<f64> = rows[..rows.len() - 1].iter().map(|r| r.1).collect();
    if !edges.windows(2).all(|w| w[0] < w[1]) || rows[0].0 != f64::NEG_INFINITY {
        return Err(Error::Parse("band edges must be strictly increasing from -inf".into()));
    }
    let strategies = rows
        .iter()
        .enumerate()
        .map(|(band, r)| BandStrategy { band, kind: r.2, w: r.3, trained_pnl: r.4, trained: r.5 })
        .collect();
    let h = rows.len();
    Ok(BandModel { bands: BandSet { edges, requested_h: requested_h.unwrap_or(h), n_samples }, strategies })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_from(x: Vec<f64>, y: Vec<f64>) -> PathPair {
        let t = (0..x.len()).map(|i| i as f64).collect();
        PathPair::from_series(t, x, y).unwrap()
    }

    #[test]
    fn percentile_edges() {
        let s: Vec<f64> = (0..100).map(f64::from).collect();
        assert_eq!(find_percentile_bands(&s, 4).unwrap().edges, vec![24.0, 49.0, 74.0]);
        let b = find_percentile_bands(&[3.0, 1.0, 2.0, 4.0], 2).unwrap();
        assert_eq!(b.edges, vec![2.0]);
        let b = find_percentile_bands(&[3.0, 1.0, 2.0], 3).unwrap();
        assert_eq!(b.edges, vec![1.0, 2.0]);
        assert_eq!(allocate_to_bands(&[3.0, 1.0, 2.0], &b), vec![vec![1], vec![2], vec![0]]);
        assert!(find_percentile_bands(&[1.0], 2).is_err());
    }

    #[test]
    fn duplicates_merge_bands() {
        let b = find_percentile_bands(&[1.0, 1.0, 1.0, 1.0, 2.0, 3.0], 3).unwrap();
        assert_eq!(b.edges, vec![1.0]);
        assert_eq!((b.h(), b.merged()), (2, 1));
    }

    #[test]
    fn edge_value_goes_to_lower_band() {
        let b = BandSet { edges: vec![0.0, 1.0], requested_h: 3, n_samples: 0 };
        assert_eq!(b.band_of(0.0), 0);
        assert_eq!(b.band_of(1e-12), 1);
        assert_eq!(b.band_of(1.0), 1);
        assert_eq!(b.band_of(5.0), 2);
        assert_eq!(b.interval(0), (f64::NEG_INFINITY, 0.0));
        assert_eq!(b.interval(2), (1.0, f64::INFINITY));
    }

    #[test]
    fn gaussian_fit_examples() {
        let b = find_percentile_bands(&[2.0; 6], 3).unwrap();
        let fit = band_gaussian_fit(&[2.0; 6], &b).unwrap();
        assert!(fit.std_devs.iter().all(|s| *s == 0.0));
        let empty = BandSet { edges: vec![0.0], requested_h: 2, n_samples: 0 };
        assert!(band_gaussian_fit(&[1.0, 2.0], &empty).is_err());
    }

    #[test]
    fn corner_weights() {
        // X rises 1, Y falls 0.5 every step; one band.
        let p = path_from(vec![1.0, 2.0, 3.0, 4.0], vec![3.0, 2.5, 2.0, 1.5]);
        let b = find_percentile_bands(&p.spread(), 1).unwrap();
        let [pp, pm, mp] = optimize_band(&p, &b, 0, DEFAULT_GRID_STEP).unwrap();
        assert_eq!((pp.w, pp.trained_pnl), (1.0, 3.0));
        // PM: w * 3 + (1 - w) * 1.5, best at w = 1.
        assert_eq!((pm.w, pm.trained_pnl), (1.0, 3.0));
        // MP: -3 w - 1.5 (1 - w), best at w = 0.
        assert_eq!((mp.w, mp.trained_pnl), (0.0, -1.5));
        // PP and PM tie at 3: PP wins.
        assert_eq!(select_best(&[pp, pm, mp], &BandKind::ALL).kind, BandKind::PP);
        assert_eq!(select_best(&[pp, pm, mp], &BandKind::PAIRS).kind, BandKind::PM);
    }

    #[test]
    fn flat_band_ties_to_half() {
        let p = path_from(vec![1.0, 1.0, 1.0], vec![2.0, 2.0, 2.0]);
        let b = find_percentile_bands(&p.spread(), 1).unwrap();
        for c in optimize_band(&p, &b, 0, DEFAULT_GRID_STEP).unwrap() {
            assert_eq!((c.w, c.trained_pnl, c.trained), (0.5, 0.0, true));
        }
    }

    #[test]
    fn unvisited_band_is_flat() {
        let p = path_from(vec![1.0, 1.1, 1.2], vec![1.0, 1.0, 1.0]);
        let b = BandSet { edges: vec![5.0], requested_h: 2, n_samples: 3 };
        let c = optimize_band(&p, &b, 1, DEFAULT_GRID_STEP).unwrap();
        assert!(c.iter().all(|s| !s.trained && s.trained_pnl == 0.0));
        assert_eq!(select_best(&c, &BandKind::ALL).weights(), (0.0, 0.0));
    }

    #[test]
    fn signals() {
        let bands = BandSet { edges: vec![0.0, 1.0], requested_h: 3, n_samples: 0 };
        let mk = |band, kind, w, trained| BandStrategy { band, kind, w, trained_pnl: 0.0, trained };
        let model = BandModel {
            bands,
            strategies: vec![mk(0, BandKind::PM, 0.6, true), mk(1, BandKind::PP, 0.0, true), mk(2, BandKind::MP, 0.3, false)],
        };
        assert_eq!(forecast_signals(&model, 1.0, 2.0), (Signal::Buy, Signal::Sell));
        assert_eq!(forecast_signals(&model, 1.5, 1.0), (Signal::Hold, Signal::Buy));
        assert_eq!(forecast_signals(&model, 5.0, 1.0), (Signal::Hold, Signal::Hold));
    }

    #[test]
    fn table_round_trip() {
        let p = path_from(vec![1.0, 1.2, 0.9, 1.4, 1.0, 1.3], vec![1.0, 1.1, 1.0, 1.2, 1.1, 1.2]);
        let model = train_band_model(&p, 3, DEFAULT_GRID_STEP, &BandKind::ALL, Exec::Sequential).unwrap();
        let mut buf = Vec::new();
        write_strategy_table(&mut buf, &model, 4).unwrap();
        let back = read_strategy_table(buf.as_slice()).unwrap();
        assert_eq!(back, model);
    }
}
