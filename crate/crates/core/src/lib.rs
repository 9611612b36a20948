//! Scheduling engine for a demand-side aggregator operating a pool of
//! prosumers (households with controllable EV charging and rooftop PV).
//!
//! The engine runs in two stages. A day-ahead pass picks hourly grid
//! exchange and EV charging profiles for every prosumer by minimizing a
//! mean-variance objective over forecast day-ahead prices. A real-time pass
//! then re-dispatches 15-minute deviations with a receding-horizon loop
//! that trades off realized prices, price risk, and the imbalance regime
//! of the hosting market.
//!
//! The crate is `no_std`-compatible (with `alloc`); all IO, calendars, and
//! file formats live in the companion CLI crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod da;
pub mod linalg;
pub mod prices;
pub mod prosumer;
pub mod qp;
pub mod rt;
pub mod sampling;
pub mod timegrid;

mod fmath;

pub use da::{solve_da, DaError, DaProblem, DaSolution};
pub use linalg::DenseMatrix;
pub use prices::{
    condition_psd, estimate_covariance, rt_window_covariance, seasonal_baseline_forecast,
    DayClass, DaySample, ForecastErrorSample,
};
pub use prosumer::{synth_pool, FleetSpec, PoolNoise, Prosumer};
pub use qp::{solve_qp, solve_qp_dense, QpProblem, QpResult, QpSettings, QpSolver, QpStatus};
pub use rt::{
    imbalance_cost, run_mpc, solve_rt_step, ImbalanceCharge, ImbalanceRegime, MpcTrace,
    RtDayInputs, RtError, RtStepSolution, RtWindow,
};
pub use timegrid::TimeGrid;

/// Conversion factor applied whenever a kW power held over some duration is
/// priced against a $/MWh price.
pub const MWH_PER_KWH: f64 = 1e-3;

/// Length of one real-time market slot, in hours.
pub const RT_STEP_HOURS: f64 = 0.25;
