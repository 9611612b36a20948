//! Shared time discretization. The day-ahead market clears on `T` hourly
//! slots, the real-time market on `4T` quarter-hour slots. Domain indices
//! are 1-based throughout (hour 1 covers rt slots 1..=4); helpers convert
//! to 0-based vector positions at the boundary.

use alloc::vec::Vec;

/// Immutable description of one scheduling day.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TimeGrid {
    t: usize,
    horizon_hours: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeGridError {
    /// `T` must be at least 1.
    EmptyDay,
    /// The MPC horizon must satisfy `1 <= T_H <= T`.
    BadHorizon { t: usize, horizon_hours: usize },
}

impl core::fmt::Display for TimeGridError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TimeGridError::EmptyDay => write!(f, "day must contain at least one hour"),
            TimeGridError::BadHorizon { t, horizon_hours } => {
                write!(f, "horizon {horizon_hours} h must lie in 1..={t}")
            }
        }
    }
}

impl core::error::Error for TimeGridError {}

/// Quarter-hour window the MPC optimizes at one hour: 1-based rt indices
/// `start..start+len-1`, always a whole number of hours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MpcWindow {
    pub start: usize,
    pub len: usize,
}

impl MpcWindow {
    /// 1-based rt slot indices covered by the window.
    pub fn slots(&self) -> impl Iterator<Item = usize> {
        self.start..self.start + self.len
    }

    /// 0-based offsets into full-day rt vectors.
    pub fn positions(&self) -> impl Iterator<Item = usize> {
        (self.start - 1)..(self.start - 1 + self.len)
    }
}

impl TimeGrid {
    pub fn new(t: usize, horizon_hours: usize) -> Result<Self, TimeGridError> {
        if t == 0 {
            return Err(TimeGridError::EmptyDay);
        }
        if horizon_hours == 0 || horizon_hours > t {
            return Err(TimeGridError::BadHorizon { t, horizon_hours });
        }
        Ok(Self { t, horizon_hours })
    }

    /// Number of day-ahead (hourly) slots.
    pub fn t(&self) -> usize {
        self.t
    }

    /// Number of real-time (quarter-hour) slots.
    pub fn rt_len(&self) -> usize {
        4 * self.t
    }

    /// MPC lookahead in hours.
    pub fn horizon_hours(&self) -> usize {
        self.horizon_hours
    }

    /// Length of one rt slot in hours.
    pub fn dt_hours(&self) -> f64 {
        crate::RT_STEP_HOURS
    }

    /// The four 1-based rt indices inside hour `h`.
    pub fn hour_to_quarters(&self, h: usize) -> [usize; 4] {
        assert!(h >= 1 && h <= self.t, "hour {h} out of 1..={}", self.t);
        let base = 4 * (h - 1);
        [base + 1, base + 2, base + 3, base + 4]
    }

    /// Hour (1-based) that contains rt slot `s`.
    pub fn quarter_to_hour(&self, s: usize) -> usize {
        assert!(s >= 1 && s <= self.rt_len(), "slot {s} out of 1..={}", self.rt_len());
        (s - 1) / 4 + 1
    }

    /// Repeats each hourly value over its four quarters.
    pub fn upsample_hourly(&self, hourly: &[f64]) -> Vec<f64> {
        assert_eq!(hourly.len(), self.t, "hourly vector length mismatch");
        let mut out = Vec::with_capacity(self.rt_len());
        for v in hourly {
            out.extend_from_slice(&[*v, *v, *v, *v]);
        }
        out
    }

    /// Averages each hour's four quarters back to an hourly vector.
    pub fn downsample_mean(&self, rt: &[f64]) -> Vec<f64> {
        assert_eq!(rt.len(), self.rt_len(), "rt vector length mismatch");
        (0..self.t)
            .map(|h| rt[4 * h..4 * h + 4].iter().sum::<f64>() / 4.0)
            .collect()
    }

    /// Receding window for the solve at hour `h`: starts at rt slot
    /// `4(h-1)+1` and extends `4*horizon_hours` slots, truncated at the end
    /// of the day.
    pub fn mpc_window(&self, h: usize) -> MpcWindow {
        assert!(h >= 1 && h <= self.t, "hour {h} out of 1..={}", self.t);
        let start = 4 * (h - 1) + 1;
        let remaining = self.rt_len() - (start - 1);
        MpcWindow { start, len: (4 * self.horizon_hours).min(remaining) }
    }
}
