//! Prosumer data model and the constraint rows both optimization stages
//! build from it.
//!
//! All time-varying data is stored at quarter-hour resolution (the
//! real-time grid); hourly day-ahead bounds are derived on demand. An EV
//! slot with power bounds exactly (0, 0) means "not plugged in".

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::sampling::standard_normal;
use crate::timegrid::TimeGrid;

#[derive(Debug, Clone)]
pub struct Prosumer {
    pub id: u32,
    /// EV charging efficiency in (0, 1]; grid-side power is metered, the
    /// battery receives `eta` times the energy.
    pub eta: f64,
    /// Grid exchange box (kW), applies at both resolutions.
    pub g_lo_kw: f64,
    pub g_hi_kw: f64,
    /// Hourly day-ahead forecasts (kW), `t` entries each.
    pub load_da_kw: Vec<f64>,
    pub pv_da_kw: Vec<f64>,
    /// Quarter-hourly realizations (kW), `4t` entries each.
    pub load_rt_kw: Vec<f64>,
    pub pv_rt_kw: Vec<f64>,
    /// Per-slot EV power bounds (kW), `4t` entries.
    pub ev_lo_rt_kw: Vec<f64>,
    pub ev_hi_rt_kw: Vec<f64>,
    /// Cumulative delivered-energy window (kWh) at the end of each slot.
    pub ev_cum_lo_rt_kwh: Vec<f64>,
    pub ev_cum_hi_rt_kwh: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProsumerError {
    LengthMismatch { field: &'static str },
    NonFinite { field: &'static str },
    InvertedBounds { field: &'static str, index: usize },
    BadEta,
    BadGridBox,
}

impl Prosumer {
    pub fn validate(&self, grid: &TimeGrid) -> Result<(), ProsumerError> {
        let t = grid.t();
        let rt = grid.rt_len();
        let hourly: [(&str, &Vec<f64>); 2] =
            [("load_da_kw", &self.load_da_kw), ("pv_da_kw", &self.pv_da_kw)];
        for (name, v) in hourly {
            if v.len() != t {
                return Err(ProsumerError::LengthMismatch { field: name });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ProsumerError::NonFinite { field: name });
            }
        }
        let quarterly: [(&str, &Vec<f64>); 6] = [
            ("load_rt_kw", &self.load_rt_kw),
            ("pv_rt_kw", &self.pv_rt_kw),
            ("ev_lo_rt_kw", &self.ev_lo_rt_kw),
            ("ev_hi_rt_kw", &self.ev_hi_rt_kw),
            ("ev_cum_lo_rt_kwh", &self.ev_cum_lo_rt_kwh),
            ("ev_cum_hi_rt_kwh", &self.ev_cum_hi_rt_kwh),
        ];
        for (name, v) in quarterly {
            if v.len() != rt {
                return Err(ProsumerError::LengthMismatch { field: name });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ProsumerError::NonFinite { field: name });
            }
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(ProsumerError::BadEta);
        }
        if !(self.g_lo_kw <= self.g_hi_kw) {
            return Err(ProsumerError::BadGridBox);
        }
        for s in 0..rt {
            if self.ev_lo_rt_kw[s] > self.ev_hi_rt_kw[s] {
                return Err(ProsumerError::InvertedBounds { field: "ev_rt_kw", index: s });
            }
            if self.ev_cum_lo_rt_kwh[s] > self.ev_cum_hi_rt_kwh[s] {
                return Err(ProsumerError::InvertedBounds { field: "ev_cum_rt_kwh", index: s });
            }
        }
        Ok(())
    }

    /// Net metered load (consumption minus solar), hourly forecast.
    pub fn net_load_da_kw(&self) -> Vec<f64> {
        self.load_da_kw.iter().zip(&self.pv_da_kw).map(|(l, s)| l - s).collect()
    }

    /// Net metered load, quarter-hour realization.
    pub fn net_load_rt_kw(&self) -> Vec<f64> {
        self.load_rt_kw.iter().zip(&self.pv_rt_kw).map(|(l, s)| l - s).collect()
    }

    /// A slot with power bounds pinned to exactly (0, 0) is unplugged.
    pub fn plugged_rt(&self, slot_idx: usize) -> bool {
        !(self.ev_lo_rt_kw[slot_idx] == 0.0 && self.ev_hi_rt_kw[slot_idx] == 0.0)
    }

    /// Hourly EV power box implied by the quarter-hour one: a constant
    /// hourly rate must respect every quarter it covers, so the lower
    /// bounds fold with max and the upper bounds with min. An hour that is
    /// only partially plugged collapses to the forced rate 0.
    pub fn ev_power_da_kw(&self, grid: &TimeGrid) -> (Vec<f64>, Vec<f64>) {
        let t = grid.t();
        let mut lo = vec![f64::NEG_INFINITY; t];
        let mut hi = vec![f64::INFINITY; t];
        for h in 1..=t {
            for s in grid.hour_to_quarters(h) {
                lo[h - 1] = lo[h - 1].max(self.ev_lo_rt_kw[s - 1]);
                hi[h - 1] = hi[h - 1].min(self.ev_hi_rt_kw[s - 1]);
            }
        }
        (lo, hi)
    }

    /// Hourly cumulative-energy window implied by the quarter-hour one.
    /// With non-negative charging the delivered energy is nondecreasing,
    /// so bounding the hour-end value by the strictest quarter inside the
    /// hour is sufficient (and exact when the lower bound only steps at
    /// hour boundaries).
    pub fn ev_cum_da_kwh(&self, grid: &TimeGrid) -> (Vec<f64>, Vec<f64>) {
        let t = grid.t();
        let mut lo = vec![0.0f64; t];
        let mut hi = vec![0.0f64; t];
        for h in 1..=t {
            let quarters = grid.hour_to_quarters(h);
            lo[h - 1] = self.ev_cum_lo_rt_kwh[quarters[3] - 1];
            hi[h - 1] = quarters
                .iter()
                .map(|&s| self.ev_cum_hi_rt_kwh[s - 1])
                .fold(f64::INFINITY, f64::min);
        }
        (lo, hi)
    }

    /// Fast per-prosumer feasibility scan of the day-ahead stage by
    /// interval propagation of the reachable cumulative-energy window.
    /// Returns the first hour (1-based) at which the window empties.
    pub fn da_feasible(&self, grid: &TimeGrid) -> Result<(), usize> {
        let t = grid.t();
        let (p_lo, p_hi) = self.ev_power_da_kw(grid);
        let (c_lo, c_hi) = self.ev_cum_da_kwh(grid);
        let net = self.net_load_da_kw();
        let mut reach_lo = 0.0f64;
        let mut reach_hi = 0.0f64;
        for h in 1..=t {
            // EV rate must also keep the grid exchange inside its box:
            // G = net + EV.
            let lo = p_lo[h - 1].max(self.g_lo_kw - net[h - 1]);
            let hi = p_hi[h - 1].min(self.g_hi_kw - net[h - 1]);
            if lo > hi + 1e-9 {
                return Err(h);
            }
            reach_lo += self.eta * lo;
            reach_hi += self.eta * hi;
            reach_lo = reach_lo.max(c_lo[h - 1]);
            reach_hi = reach_hi.min(c_hi[h - 1]);
            if reach_lo > reach_hi + 1e-9 {
                return Err(h);
            }
        }
        Ok(())
    }
}

/// Cumulative battery-side energy after each slot: eta * dt * prefix sums
/// of the metered charging power.
pub fn cumulative_energy_kwh(eta: f64, dt_hours: f64, ev_kw: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ev_kw.len());
    let mut acc = 0.0f64;
    for &p in ev_kw {
        acc += eta * dt_hours * p;
        out.push(acc);
    }
    out
}

/// One constraint row over a prosumer-local column layout.
#[derive(Debug, Clone)]
pub struct LinearConstraint {
    pub coeffs: Vec<(usize, f64)>,
    pub lo: f64,
    pub hi: f64,
}

/// Local layout: columns `0..w` hold grid exchange, `w..2w` EV charging,
/// for a window of `w` slots.
///
/// Power balance ties them together: G_k - EV_k = net_k (load minus solar
/// leaves through the meter unless the EV absorbs it).
pub fn balance_rows(w: usize, rhs: &[f64]) -> Vec<LinearConstraint> {
    assert_eq!(rhs.len(), w);
    (0..w)
        .map(|k| LinearConstraint {
            coeffs: vec![(k, 1.0), (w + k, -1.0)],
            lo: rhs[k],
            hi: rhs[k],
        })
        .collect()
}

/// Box rows on a contiguous run of single variables starting at `col0`.
pub fn single_var_rows(col0: usize, lo: &[f64], hi: &[f64]) -> Vec<LinearConstraint> {
    assert_eq!(lo.len(), hi.len());
    lo.iter()
        .zip(hi)
        .enumerate()
        .map(|(k, (&l, &h))| LinearConstraint { coeffs: vec![(col0 + k, 1.0)], lo: l, hi: h })
        .collect()
}

/// Cumulative-energy window rows over the EV columns: for every prefix
/// length j, eta * dt * (EV_0 + ... + EV_j) must stay inside the window.
pub fn cum_energy_rows(
    w: usize,
    eta: f64,
    dt_hours: f64,
    lo_kwh: &[f64],
    hi_kwh: &[f64],
) -> Vec<LinearConstraint> {
    assert_eq!(lo_kwh.len(), w);
    assert_eq!(hi_kwh.len(), w);
    let coeff = eta * dt_hours;
    (0..w)
        .map(|j| LinearConstraint {
            coeffs: (0..=j).map(|k| (w + k, coeff)).collect(),
            lo: lo_kwh[j],
            hi: hi_kwh[j],
        })
        .collect()
}

/// Shape of the synthetic EV fleet attached to a pool.
#[derive(Debug, Clone, Copy)]
pub struct FleetSpec {
    /// Usable battery capacity, upper cumulative bound (kWh).
    pub battery_kwh: f64,
    /// Energy that must be delivered by the plug-out deadline (kWh).
    pub required_kwh: f64,
    /// Maximum charging power while plugged (kW).
    pub charger_kw: f64,
    /// Fraction of the fleet plugged overnight until a morning departure;
    /// the rest arrives in the evening and must be served by midnight.
    pub morning_fraction: f64,
    /// Grid connection box, symmetric (kW).
    pub grid_cap_kw: f64,
}

impl Default for FleetSpec {
    fn default() -> Self {
        Self {
            battery_kwh: 40.0,
            required_kwh: 10.0,
            charger_kw: 7.4,
            morning_fraction: 0.5,
            grid_cap_kw: 10.0,
        }
    }
}

/// Noise levels of the synthetic pool.
#[derive(Debug, Clone, Copy)]
pub struct PoolNoise {
    /// Per-prosumer multiplicative spread of the load/PV share, uniform on
    /// [-spread, +spread].
    pub share_spread: f64,
    /// Quarter-hourly multiplicative forecast error of the realized load
    /// and PV (standard deviation).
    pub rt_sigma: f64,
}

impl Default for PoolNoise {
    fn default() -> Self {
        Self { share_spread: 0.2, rt_sigma: 0.05 }
    }
}

/// Builds a deterministic synthetic pool of `n` prosumers splitting an
/// aggregate hourly load and PV profile. EV plug windows are contiguous
/// (overnight-until-departure or evening-arrival-until-midnight) with all
/// boundaries on whole hours, so the derived day-ahead bounds are exact.
pub fn synth_pool(
    n: usize,
    grid: &TimeGrid,
    aggregate_load_kw: &[f64],
    aggregate_pv_kw: &[f64],
    fleet: &FleetSpec,
    noise: &PoolNoise,
    seed: u64,
) -> Vec<Prosumer> {
    let t = grid.t();
    assert_eq!(aggregate_load_kw.len(), t, "aggregate load must be hourly");
    assert_eq!(aggregate_pv_kw.len(), t, "aggregate pv must be hourly");
    assert!(n > 0);
    let rt = grid.rt_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv_n = 1.0 / n as f64;

    let mut pool = Vec::with_capacity(n);
    for idx in 0..n {
        let u_load = rng.gen_range(-noise.share_spread..=noise.share_spread);
        let u_pv = rng.gen_range(-noise.share_spread..=noise.share_spread);
        let load_da: Vec<f64> =
            aggregate_load_kw.iter().map(|&v| v * inv_n * (1.0 + u_load)).collect();
        let pv_da: Vec<f64> = aggregate_pv_kw.iter().map(|&v| v * inv_n * (1.0 + u_pv)).collect();

        let mut load_rt = Vec::with_capacity(rt);
        let mut pv_rt = Vec::with_capacity(rt);
        for s in 1..=rt {
            let h = grid.quarter_to_hour(s);
            let zl = standard_normal(&mut rng);
            let zp = standard_normal(&mut rng);
            load_rt.push((load_da[h - 1] * (1.0 + noise.rt_sigma * zl)).max(0.0));
            pv_rt.push((pv_da[h - 1] * (1.0 + noise.rt_sigma * zp)).max(0.0));
        }

        // Plug window on whole hours; the deadline is the last plugged
        // hour's end, where the cumulative lower bound steps up.
        let morning = rng.gen_bool(fleet.morning_fraction.clamp(0.0, 1.0));
        let (first_hour, last_hour) = if morning {
            (1usize, rng.gen_range(6..=9usize))
        } else {
            (rng.gen_range(17..=21usize), t)
        };
        let deadline_slot = 4 * last_hour;

        let ev_lo = vec![0.0f64; rt];
        let mut ev_hi = vec![0.0f64; rt];
        let mut cum_lo = vec![0.0f64; rt];
        let cum_hi = vec![fleet.battery_kwh; rt];
        for h in first_hour..=last_hour {
            for s in grid.hour_to_quarters(h) {
                ev_hi[s - 1] = fleet.charger_kw;
            }
        }
        for s in deadline_slot..=rt {
            cum_lo[s - 1] = fleet.required_kwh;
        }

        pool.push(Prosumer {
            id: (idx + 1) as u32,
            eta: 0.9,
            g_lo_kw: -fleet.grid_cap_kw,
            g_hi_kw: fleet.grid_cap_kw,
            load_da_kw: load_da,
            pv_da_kw: pv_da,
            load_rt_kw: load_rt,
            pv_rt_kw: pv_rt,
            ev_lo_rt_kw: ev_lo,
            ev_hi_rt_kw: ev_hi,
            ev_cum_lo_rt_kwh: cum_lo,
            ev_cum_hi_rt_kwh: cum_hi,
        });
    }
    pool
}
