//! Temporal-to-spatial transform of the magnetic signal.
//!
//! Velocity is integrated to along-track position, the position-to-time
//! relation is inverted by reverse linear interpolation, and the field is
//! resampled on a uniform arclength grid matching the map spacing. The
//! inversion requires strictly forward motion over the covered span;
//! standstill and backward stretches must be excised beforehand (see
//! [`crate::signal::segment_motion`]).

use thiserror::Error;

use crate::signal::TimeSignal;
use crate::FieldSample;

#[derive(Debug, Error)]
pub enum SpacifyError {
    #[error("positions not strictly increasing at index {index}")]
    Monotonicity { index: usize },
    #[error("query {x} outside covered span [{lo}, {hi}]")]
    Domain { x: f64, lo: f64, hi: f64 },
    #[error("length mismatch: {0} positions vs {1} times")]
    LengthMismatch(usize, usize),
    #[error("signal carries no velocity channel")]
    MissingVelocity,
    #[error("segment spans {span} m, need at least 2 grid samples at dx = {dx}")]
    EmptyOutput { span: f64, dx: f64 },
}

/// Uniformly arclength-sampled 3-axis magnetic sequence. In cold start the
/// offset `x0` is window-relative; only after alignment does it gain an
/// absolute meaning.
#[derive(Debug, Clone)]
pub struct SpaceSignal {
    pub dx: f64,
    pub x0: f64,
    pub b: Vec<FieldSample>,
}

impl SpaceSignal {
    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    /// Arclength covered from first to last sample.
    pub fn span(&self) -> f64 {
        if self.b.len() < 2 {
            0.0
        } else {
            (self.b.len() - 1) as f64 * self.dx
        }
    }
}

/// Left-endpoint cumulative sum of the velocity samples:
/// `x_j = x0 + dt * (v_0 + ... + v_j)`.
pub fn integrate_positions(v: &[f64], dt: f64, x0: f64) -> Vec<f64> {
    let mut acc = 0.0;
    v.iter()
        .map(|&vi| {
            acc += vi;
            x0 + dt * acc
        })
        .collect()
}

/// Piecewise-linear inverse of the trajectory: maps arclength back to time,
/// exact at every anchor.
#[derive(Debug, Clone)]
pub struct TimeMap {
    x: Vec<f64>,
    t: Vec<f64>,
}

impl TimeMap {
    pub fn domain(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }

    /// Time at arclength `x`; anchors reproduce their time bit-exactly.
    pub fn query(&self, x: f64) -> Result<f64, SpacifyError> {
        let (lo, hi) = self.domain();
        if !(x >= lo && x <= hi) {
            return Err(SpacifyError::Domain { x, lo, hi });
        }
        // partition_point: first index with x[i] > query; the anchor at or
        // before the query is one to the left.
        let k = self.x.partition_point(|&xi| xi <= x);
        if k == self.x.len() {
            return Ok(self.t[self.t.len() - 1]);
        }
        let i = k - 1;
        let frac = (x - self.x[i]) / (self.x[i + 1] - self.x[i]);
        Ok(self.t[i] + frac * (self.t[i + 1] - self.t[i]))
    }
}

/// Builds the arclength-to-time map from matched position and time
/// sequences. Positions must be strictly increasing.
pub fn invert_time(x: &[f64], t: &[f64]) -> Result<TimeMap, SpacifyError> {
    if x.len() != t.len() {
        return Err(SpacifyError::LengthMismatch(x.len(), t.len()));
    }
    if x.is_empty() {
        return Err(SpacifyError::LengthMismatch(0, 0));
    }
    for i in 1..x.len() {
        if !(x[i] > x[i - 1]) {
            return Err(SpacifyError::Monotonicity { index: i });
        }
    }
    Ok(TimeMap { x: x.to_vec(), t: t.to_vec() })
}

/// Transforms a forward-moving time signal onto the uniform arclength grid
/// `x0, x0 + dx, ...`, sampling the field by linear interpolation in time.
///
/// The grid is generated by index multiplication, never by accumulation, so
/// successive output positions differ by exactly `dx`.
pub fn spacify(sig: &TimeSignal, dx: f64, x0: f64) -> Result<SpaceSignal, SpacifyError> {
    let v = sig.v.as_ref().ok_or(SpacifyError::MissingVelocity)?;
    let positions = integrate_positions(v, sig.dt, x0);
    let times: Vec<f64> = (0..sig.len()).map(|i| sig.time_at(i)).collect();
    let tmap = invert_time(&positions, &times)?;
    let (lo, hi) = tmap.domain();

    // Round-off slack at the span ends keeps grid points that land within a
    // hair of an anchor from being dropped.
    let tol = 1e-6 * dx;
    let g_min = ((lo - tol - x0) / dx).ceil().max(0.0) as u64;
    let g_max_f = (hi + tol - x0) / dx;
    if g_max_f < g_min as f64 {
        return Err(SpacifyError::EmptyOutput { span: hi - lo, dx });
    }
    let g_max = g_max_f.floor() as u64;
    let count = (g_max - g_min + 1) as usize;
    if count < 2 {
        return Err(SpacifyError::EmptyOutput { span: hi - lo, dx });
    }

    let mut b = Vec::with_capacity(count);
    for g in g_min..=g_max {
        let xg = x0 + g as f64 * dx;
        let t = tmap.query(xg.clamp(lo, hi))?;
        let sample = sig
            .field_at(t)
            .expect("time from the inverse map lies inside the signal span");
        b.push(sample);
    }
    Ok(SpaceSignal { dx, x0: x0 + g_min as f64 * dx, b })
}
