//! Simulation, moments, optimal-control and backtesting toolkit for
//! cointelated asset pairs.
//!
//! Module map:
//!
//! * [`sim`]: pair simulation, the generalized bumping SDE and diagnostics.
//! * [`moments`]: closed-form one-step moments and a Monte Carlo oracle.
//! * [`mvc`]: mean-variance utility and weights.
//! * [`net`]: the gated DGM network with exact input derivatives.
//! * [`dgm`]: the Deep Galerkin trainer, Merton and pairs HJB problems.
//! * [`backtest`]: wealth evolution and the strategy rules.
//! * [`bandml`]: percentile banding and per-band strategy search.
//! * [`experiment`]: the batch comparison driver and its output files.

pub mod backtest;
pub mod bandml;
pub mod dgm;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod moments;
pub mod mvc;
pub mod net;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use exec::Exec;
