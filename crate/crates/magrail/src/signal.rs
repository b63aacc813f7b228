//! Time-domain preprocessing of the live magnetometer stream.
//!
//! Velocity can be measured directly (wheel sensor, IMU) and carried as a
//! channel of the signal, or estimated from the time delay between two
//! magnetometers mounted a fixed distance apart along the vehicle.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::track::fmt_sig9;
use crate::vec3;
use crate::FieldSample;

pub const SIGNAL_CSV_HEADER: &str = "t_s,bx,by,bz";
pub const SIGNAL_CSV_HEADER_V: &str = "t_s,bx,by,bz,v_mps";

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("invalid signal: {0}")]
    Invalid(String),
    #[error("degenerate signal: correlation window has zero variance")]
    DegenerateSignal,
    #[error("domain error: {0}")]
    Domain(String),
}

/// Uniformly time-sampled 3-axis magnetic stream, optionally with a
/// velocity channel of the same length.
#[derive(Debug, Clone)]
pub struct TimeSignal {
    pub dt: f64,
    pub t0: f64,
    pub b: Vec<FieldSample>,
    pub v: Option<Vec<f64>>,
}

impl TimeSignal {
    pub fn new(
        dt: f64,
        t0: f64,
        b: Vec<FieldSample>,
        v: Option<Vec<f64>>,
    ) -> Result<Self, SignalError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(SignalError::Invalid(format!("dt must be positive, got {dt}")));
        }
        if !t0.is_finite() {
            return Err(SignalError::Invalid("t0 must be finite".into()));
        }
        if b.iter().any(|s| s.iter().any(|c| !c.is_finite())) {
            return Err(SignalError::Invalid("non-finite field sample".into()));
        }
        if let Some(v) = &v {
            if v.len() != b.len() {
                return Err(SignalError::Invalid(format!(
                    "velocity channel length {} != field length {}",
                    v.len(),
                    b.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(SignalError::Invalid("non-finite velocity sample".into()));
            }
        }
        Ok(Self { dt, t0, b, v })
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn time_at(&self, index: usize) -> f64 {
        self.t0 + index as f64 * self.dt
    }

    /// Sub-signal over `[start, end)` keeping the time base.
    pub fn slice(&self, start: usize, end: usize) -> TimeSignal {
        TimeSignal {
            dt: self.dt,
            t0: self.time_at(start),
            b: self.b[start..end].to_vec(),
            v: self.v.as_ref().map(|v| v[start..end].to_vec()),
        }
    }

    /// Field at an arbitrary time by linear interpolation between samples.
    /// Times outside the covered span are a domain error.
    pub fn field_at(&self, t: f64) -> Result<FieldSample, SignalError> {
        let pos = (t - self.t0) / self.dt;
        let last = (self.b.len() - 1) as f64;
        // Tolerate round-off at the ends; a query epsilon past the last
        // sample clamps instead of failing.
        let tol = 1e-6;
        if pos < -tol || pos > last + tol {
            return Err(SignalError::Domain(format!(
                "time {t} outside signal span [{}, {}]",
                self.t0,
                self.time_at(self.b.len() - 1)
            )));
        }
        if self.b.len() == 1 {
            return Ok(self.b[0]);
        }
        let pos = pos.clamp(0.0, last);
        let idx = (pos.floor() as usize).min(self.b.len() - 2);
        let frac = pos - idx as f64;
        Ok(vec3::lerp(&self.b[idx], &self.b[idx + 1], frac))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
    Standstill,
}

/// A maximal run of samples sharing one motion regime; `end` is exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MotionSegment {
    pub start: usize,
    pub end: usize,
    pub direction: Direction,
}

/// Estimates the time delay of `m2` behind `m1` by normalized
/// cross-correlation of the field magnitudes over the last `window` samples,
/// with parabolic sub-sample refinement around the best integer lag.
///
/// The mounting geometry is fixed (`m2` trails `m1`), so only non-negative
/// lags up to `window / 2` are searched.
pub fn estimate_delay(m1: &TimeSignal, m2: &TimeSignal, window: usize) -> Result<f64, SignalError> {
    if (m1.dt - m2.dt).abs() > 1e-9 * m1.dt {
        return Err(SignalError::Invalid(format!(
            "sample intervals differ: {} vs {}",
            m1.dt, m2.dt
        )));
    }
    if window < 8 {
        return Err(SignalError::Invalid(format!("window {window} < 8")));
    }
    if m1.len() < window || m2.len() < window {
        return Err(SignalError::Invalid(format!(
            "signals shorter than window {window}: {} and {}",
            m1.len(),
            m2.len()
        )));
    }
    let a: Vec<f64> = m1.b[m1.len() - window..].iter().map(vec3::magnitude).collect();
    let b: Vec<f64> = m2.b[m2.len() - window..].iter().map(vec3::magnitude).collect();
    if variance(&a) == 0.0 || variance(&b) == 0.0 {
        return Err(SignalError::DegenerateSignal);
    }

    let max_lag = window / 2;
    let mut best_lag = 0usize;
    let mut best_r = f64::NEG_INFINITY;
    let mut corr = vec![f64::NEG_INFINITY; max_lag + 1];
    for (lag, c) in corr.iter_mut().enumerate() {
        // m2(t) = m1(t - lag): compare the head of a with the tail of b.
        let r = pearson(&a[..window - lag], &b[lag..]);
        *c = r;
        if r > best_r {
            best_r = r;
            best_lag = lag;
        }
    }

    let mut lag = best_lag as f64;
    if best_lag > 0 && best_lag < max_lag {
        let (ym, y0, yp) = (corr[best_lag - 1], corr[best_lag], corr[best_lag + 1]);
        if ym.is_finite() && yp.is_finite() {
            let denom = ym - 2.0 * y0 + yp;
            if denom.abs() > 1e-15 {
                let delta = 0.5 * (ym - yp) / denom;
                lag += delta.clamp(-0.5, 0.5);
            }
        }
    }
    Ok(lag * m1.dt)
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.is_empty() {
        return f64::NEG_INFINITY;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dxa = x - ma;
        let dxb = y - mb;
        cov += dxa * dxb;
        va += dxa * dxa;
        vb += dxb * dxb;
    }
    if va == 0.0 || vb == 0.0 {
        return f64::NEG_INFINITY;
    }
    cov / (va * vb).sqrt()
}

/// Converts a measured inter-sensor delay into a ground speed,
/// `v = separation / delay`.
pub fn delay_to_velocity(delay: f64, separation: f64) -> Result<f64, SignalError> {
    if !(delay > 0.0) {
        return Err(SignalError::Domain(format!("delay must be positive, got {delay}")));
    }
    if !(separation > 0.0) {
        return Err(SignalError::Domain(format!(
            "sensor separation must be positive, got {separation}"
        )));
    }
    Ok(separation / delay)
}

/// Partitions the sample range into maximal forward / backward / standstill
/// runs. Runs shorter than 0.5 s are merged into their longer neighbour so
/// threshold chatter does not fragment the segmentation.
pub fn segment_motion(v: &[f64], dt: f64, v_min: f64) -> Vec<MotionSegment> {
    if v.is_empty() {
        return Vec::new();
    }
    let classify = |x: f64| {
        if x > v_min {
            Direction::Forward
        } else if x < -v_min {
            Direction::Backward
        } else {
            Direction::Standstill
        }
    };
    let mut runs: Vec<MotionSegment> = Vec::new();
    let mut start = 0usize;
    let mut dir = classify(v[0]);
    for (i, &x) in v.iter().enumerate().skip(1) {
        let d = classify(x);
        if d != dir {
            runs.push(MotionSegment { start, end: i, direction: dir });
            start = i;
            dir = d;
        }
    }
    runs.push(MotionSegment { start, end: v.len(), direction: dir });

    let min_len = (0.5 / dt).ceil() as usize;
    loop {
        let candidate = runs
            .iter()
            .enumerate()
            .filter(|(_, r)| runs.len() > 1 && r.end - r.start < min_len)
            .min_by_key(|(_, r)| r.end - r.start)
            .map(|(i, _)| i);
        let Some(i) = candidate else { break };
        let left_len = if i > 0 { runs[i - 1].end - runs[i - 1].start } else { 0 };
        let right_len = if i + 1 < runs.len() {
            runs[i + 1].end - runs[i + 1].start
        } else {
            0
        };
        if i > 0 && left_len >= right_len {
            runs[i - 1].end = runs[i].end;
            runs.remove(i);
        } else {
            runs[i + 1].start = runs[i].start;
            runs.remove(i);
        }
        // Coalesce equal directions created by the merge.
        let mut j = 1;
        while j < runs.len() {
            if runs[j].direction == runs[j - 1].direction {
                runs[j - 1].end = runs[j].end;
                runs.remove(j);
            } else {
                j += 1;
            }
        }
    }
    runs
}

/// Loads a time-signal CSV (`t_s,bx,by,bz[,v_mps]`), validating that the
/// time stamps are uniformly spaced.
pub fn load_signal(path: impl AsRef<Path>) -> Result<TimeSignal, SignalError> {
    let mut reader = csv::Reader::from_path(path.as_ref()).map_err(csv_to_signal_error)?;
    let has_velocity = {
        let headers = reader.headers().map_err(csv_to_signal_error)?;
        let got: Vec<&str> = headers.iter().collect();
        if got == SIGNAL_CSV_HEADER.split(',').collect::<Vec<_>>() {
            false
        } else if got == SIGNAL_CSV_HEADER_V.split(',').collect::<Vec<_>>() {
            true
        } else {
            return Err(SignalError::Parse {
                row: 1,
                msg: format!(
                    "expected header `{SIGNAL_CSV_HEADER}` or `{SIGNAL_CSV_HEADER_V}`, got `{}`",
                    got.join(",")
                ),
            });
        }
    };
    let mut times = Vec::new();
    let mut b = Vec::new();
    let mut v = if has_velocity { Some(Vec::new()) } else { None };
    let want = if has_velocity { 5 } else { 4 };
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|_| SignalError::Parse { row, msg: "bad row".into() })?;
        if record.len() != want {
            return Err(SignalError::Parse {
                row,
                msg: format!("expected {want} fields, got {}", record.len()),
            });
        }
        let mut f = vec![0.0f64; want];
        for (j, cell) in record.iter().enumerate() {
            f[j] = cell.trim().parse().map_err(|_| SignalError::Parse {
                row,
                msg: format!("bad float `{cell}`"),
            })?;
        }
        times.push(f[0]);
        b.push([f[1], f[2], f[3]]);
        if let Some(v) = v.as_mut() {
            v.push(f[4]);
        }
    }
    if times.len() < 2 {
        return Err(SignalError::Invalid(format!(
            "signal needs at least 2 samples, got {}",
            times.len()
        )));
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    if !(dt > 0.0) {
        return Err(SignalError::Invalid("time stamps not increasing".into()));
    }
    for (i, w) in times.windows(2).enumerate() {
        if ((w[1] - w[0]) - dt).abs() > 1e-6 * dt {
            return Err(SignalError::Parse {
                row: i + 3,
                msg: format!("non-uniform time spacing: {} vs dt {}", w[1] - w[0], dt),
            });
        }
    }
    TimeSignal::new(dt, times[0], b, v)
}

pub fn save_signal(sig: &TimeSignal, path: impl AsRef<Path>) -> Result<(), SignalError> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    match &sig.v {
        Some(v) => {
            writeln!(w, "{SIGNAL_CSV_HEADER_V}")?;
            for (i, smp) in sig.b.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    fmt_sig9(sig.time_at(i)),
                    fmt_sig9(smp[0]),
                    fmt_sig9(smp[1]),
                    fmt_sig9(smp[2]),
                    fmt_sig9(v[i]),
                )?;
            }
        }
        None => {
            writeln!(w, "{SIGNAL_CSV_HEADER}")?;
            for (i, smp) in sig.b.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{}",
                    fmt_sig9(sig.time_at(i)),
                    fmt_sig9(smp[0]),
                    fmt_sig9(smp[1]),
                    fmt_sig9(smp[2]),
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_to_signal_error(e: csv::Error) -> SignalError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SignalError::Io(io),
        other => SignalError::Parse { row: 0, msg: format!("{other:?}") },
    }
}
