//! Synthetic ground truth: magnetic maps with realistic along-track
//! variability and noisy sensor replays with exact trajectories.
//!
//! The generated field is smoothed Gaussian noise with a controllable
//! correlation length plus sparse strong spikes standing in for
//! infrastructure (signals, switches, bridges). Everything is reproducible
//! from the seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::signal::TimeSignal;
use crate::track::{GeoPoint, MapSample, TrackMap, EARTH_RADIUS_M};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    Invalid(String),
    #[error("trajectory leaves the map: position {x} not in [0, {length}]")]
    OutOfBounds { x: f64, length: f64 },
    #[error(transparent)]
    Track(#[from] crate::track::TrackError),
    #[error(transparent)]
    Signal(#[from] crate::signal::SignalError),
}

/// Parameters of a generated map.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub length: f64,
    pub dx: f64,
    pub seed: u64,
    /// Standard deviation of the smooth field component, per axis.
    pub field_scale: f64,
    /// Feature scale of the smooth component, meters.
    pub corr_length: f64,
    pub anchor: GeoPoint,
    /// Bearing of the straight track layout, degrees clockwise from north.
    pub bearing_deg: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            length: 5_000.0,
            dx: 0.25,
            seed: 1,
            field_scale: 30.0,
            corr_length: 5.0,
            anchor: GeoPoint { lat: 46.2, lon: 7.0 },
            bearing_deg: 60.0,
        }
    }
}

/// Mean gap between infrastructure spikes, meters.
const SPIKE_MEAN_GAP_M: f64 = 200.0;
/// Spike amplitude as a multiple of the field scale.
const SPIKE_AMPLITUDE_FACTOR: f64 = 5.0;
/// Gaussian sigma of a spike, meters (about 2 m wide at half maximum).
const SPIKE_SIGMA_M: f64 = 1.0;

/// One phase of a velocity profile: ramp linearly from the velocity at the
/// phase start to `target` over `duration` seconds. The first phase starts
/// at its own target (constant).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfilePhase {
    pub duration: f64,
    pub target: f64,
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub profile: Vec<ProfilePhase>,
    pub sensor_rate: f64,
    /// Gaussian field noise per axis, field units.
    pub noise_sigma: f64,
    /// Gaussian noise on the attached velocity channel, m/s.
    pub vel_noise_sigma: f64,
    /// Start arclength on the map, meters.
    pub start_s: f64,
    pub seed: u64,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            profile: vec![ProfilePhase { duration: 60.0, target: 20.0 }],
            sensor_rate: 2_000.0,
            noise_sigma: 0.0,
            vel_noise_sigma: 0.0,
            start_s: 0.0,
            seed: 1,
        }
    }
}

/// Exact ground truth of a simulated run, sampled at the sensor rate.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl Trajectory {
    /// Position at time `t` by linear interpolation.
    pub fn position_at(&self, t: f64) -> Option<f64> {
        interp_clamped(&self.t, &self.x, t)
    }

    pub fn velocity_at(&self, t: f64) -> Option<f64> {
        interp_clamped(&self.t, &self.v, t)
    }
}

fn interp_clamped(ts: &[f64], ys: &[f64], t: f64) -> Option<f64> {
    let n = ts.len();
    if n == 0 {
        return None;
    }
    let t0 = ts[0];
    let t1 = ts[n - 1];
    let tol = 1e-9 * (t1 - t0).abs().max(1.0);
    if t < t0 - tol || t > t1 + tol {
        return None;
    }
    if n == 1 {
        return Some(ys[0]);
    }
    let dt = (t1 - t0) / (n - 1) as f64;
    let pos = ((t - t0) / dt).clamp(0.0, (n - 1) as f64);
    let idx = (pos.floor() as usize).min(n - 2);
    let frac = pos - idx as f64;
    Some(ys[idx] + frac * (ys[idx + 1] - ys[idx]))
}

/// Generates a synthetic magnetic map laid out on a straight bearing.
pub fn gen_map(spec: &SynthSpec) -> Result<TrackMap, SynthError> {
    if !(spec.length > 0.0) || !(spec.dx > 0.0) {
        return Err(SynthError::Invalid(format!(
            "length and dx must be positive, got {} and {}",
            spec.length, spec.dx
        )));
    }
    if spec.corr_length < 2.0 * spec.dx {
        return Err(SynthError::Invalid(format!(
            "corr_length {} must be at least 2 * dx = {}",
            spec.corr_length,
            2.0 * spec.dx
        )));
    }
    if !(spec.field_scale > 0.0) {
        return Err(SynthError::Invalid("field_scale must be positive".into()));
    }
    let n = (spec.length / spec.dx).round() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    // Smooth component: moving average of white noise, rescaled so the
    // per-axis standard deviation stays at field_scale.
    let window = ((spec.corr_length / spec.dx).round() as usize).max(1);
    let gain = spec.field_scale * (window as f64).sqrt() / window as f64;
    let mut field = vec![[0.0f64; 3]; n];
    for axis in 0..3 {
        let white: Vec<f64> = (0..n + window).map(|_| normal.sample(&mut rng)).collect();
        let mut acc: f64 = white[..window].iter().sum();
        for (i, f) in field.iter_mut().enumerate() {
            f[axis] = acc * gain;
            acc += white[i + window] - white[i];
        }
    }

    // Infrastructure spikes: Poisson-placed strong localized bumps.
    let mut s_spike = 0.0;
    loop {
        let u: f64 = rng.random();
        s_spike += -SPIKE_MEAN_GAP_M * (1.0 - u).ln();
        if s_spike >= spec.length {
            break;
        }
        let mut dir = [
            normal.sample(&mut rng),
            normal.sample(&mut rng),
            normal.sample(&mut rng),
        ];
        let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        if norm < 1e-12 {
            continue;
        }
        for d in &mut dir {
            *d /= norm;
        }
        let amp = SPIKE_AMPLITUDE_FACTOR * spec.field_scale * rng.random_range(0.5..1.0);
        let half_extent = 4.0 * SPIKE_SIGMA_M;
        let i_lo = ((s_spike - half_extent) / spec.dx).floor().max(0.0) as usize;
        let i_hi = (((s_spike + half_extent) / spec.dx).ceil() as usize).min(n - 1);
        for (i, f) in field.iter_mut().enumerate().take(i_hi + 1).skip(i_lo) {
            let ds = i as f64 * spec.dx - s_spike;
            let bump = amp * (-ds * ds / (2.0 * SPIKE_SIGMA_M * SPIKE_SIGMA_M)).exp();
            for axis in 0..3 {
                f[axis] += bump * dir[axis];
            }
        }
    }

    let bearing = spec.bearing_deg.to_radians();
    let lat0 = spec.anchor.lat.to_radians();
    let deg = 180.0 / std::f64::consts::PI;
    let samples = field
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let s = i as f64 * spec.dx;
            MapSample {
                s,
                lat: spec.anchor.lat + deg * s * bearing.cos() / EARTH_RADIUS_M,
                lon: spec.anchor.lon + deg * s * bearing.sin() / (EARTH_RADIUS_M * lat0.cos()),
                b,
            }
        })
        .collect();
    Ok(TrackMap::new(samples)?)
}

/// Evaluates the piecewise-linear-ramp velocity profile at time `t` and its
/// exact integral (distance travelled) up to `t`.
fn profile_eval(profile: &[ProfilePhase], t: f64) -> (f64, f64) {
    let mut v_start = profile[0].target;
    let mut t_acc = 0.0;
    let mut x_acc = 0.0;
    for phase in profile {
        let dur = phase.duration;
        if t <= t_acc + dur {
            let tau = t - t_acc;
            let slope = (phase.target - v_start) / dur;
            let v = v_start + slope * tau;
            let x = x_acc + v_start * tau + 0.5 * slope * tau * tau;
            return (v, x);
        }
        x_acc += 0.5 * (v_start + phase.target) * dur;
        t_acc += dur;
        v_start = phase.target;
    }
    (v_start, x_acc)
}

/// Total duration of a profile, seconds.
pub fn profile_duration(profile: &[ProfilePhase]) -> f64 {
    profile.iter().map(|p| p.duration).sum()
}

/// Replays a drive over the map: integrates the velocity profile, samples
/// the map field along it at the sensor rate, and adds i.i.d. Gaussian
/// noise. Returns the noisy signal (with velocity channel) and the exact
/// trajectory.
pub fn simulate_run(map: &TrackMap, run: &RunSpec) -> Result<(TimeSignal, Trajectory), SynthError> {
    if run.profile.is_empty() {
        return Err(SynthError::Invalid("empty velocity profile".into()));
    }
    if !(run.sensor_rate > 0.0) {
        return Err(SynthError::Invalid(format!(
            "sensor_rate must be positive, got {}",
            run.sensor_rate
        )));
    }
    if run.noise_sigma < 0.0 || run.vel_noise_sigma < 0.0 {
        return Err(SynthError::Invalid("noise sigmas must be >= 0".into()));
    }
    let dt = 1.0 / run.sensor_rate;
    let total = profile_duration(&run.profile);
    // Tolerate round-off in total/dt so a 25 s profile at 100 Hz yields
    // exactly 2501 samples.
    let n = (total / dt + 1e-9).floor() as usize + 1;

    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut t = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut v_chan = Vec::with_capacity(n);
    for i in 0..n {
        let ti = i as f64 * dt;
        let (vi, xi) = profile_eval(&run.profile, ti);
        let pos = run.start_s + xi;
        let field = map
            .lookup_field(pos)
            .ok_or(SynthError::OutOfBounds { x: pos, length: map.length() })?;
        let noisy = [
            field[0] + run.noise_sigma * normal.sample(&mut rng),
            field[1] + run.noise_sigma * normal.sample(&mut rng),
            field[2] + run.noise_sigma * normal.sample(&mut rng),
        ];
        let v_meas = vi + run.vel_noise_sigma * normal.sample(&mut rng);
        t.push(ti);
        x.push(pos);
        v.push(vi);
        b.push(noisy);
        v_chan.push(v_meas);
    }
    let sig = TimeSignal::new(dt, 0.0, b, Some(v_chan))?;
    Ok((sig, Trajectory { t, x, v }))
}

/// Writes the ground-truth trajectory as `t_s,x_m,v_mps`.
pub fn save_truth(truth: &Trajectory, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t_s,x_m,v_mps")?;
    for i in 0..truth.t.len() {
        writeln!(
            w,
            "{},{},{}",
            crate::track::fmt_sig9(truth.t[i]),
            crate::track::fmt_sig9(truth.x[i]),
            crate::track::fmt_sig9(truth.v[i]),
        )?;
    }
    w.flush()
}

/// Loads a `t_s,x_m,v_mps` trajectory file.
pub fn load_truth(path: impl AsRef<std::path::Path>) -> Result<Trajectory, SynthError> {
    let mut reader = csv::Reader::from_path(path.as_ref()).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => SynthError::Signal(crate::signal::SignalError::Io(io)),
        other => SynthError::Invalid(format!("{other:?}")),
    })?;
    {
        let headers = reader.headers().map_err(|e| SynthError::Invalid(e.to_string()))?;
        let got: Vec<&str> = headers.iter().collect();
        if got != ["t_s", "x_m", "v_mps"] {
            return Err(SynthError::Invalid(format!(
                "expected header `t_s,x_m,v_mps`, got `{}`",
                got.join(",")
            )));
        }
    }
    let mut t = Vec::new();
    let mut x = Vec::new();
    let mut v = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| SynthError::Invalid(e.to_string()))?;
        if record.len() != 3 {
            return Err(SynthError::Invalid(format!(
                "row {}: expected 3 fields, got {}",
                i + 2,
                record.len()
            )));
        }
        let parse = |cell: &str| {
            cell.trim()
                .parse::<f64>()
                .map_err(|_| SynthError::Invalid(format!("row {}: bad float `{cell}`", i + 2)))
        };
        t.push(parse(&record[0])?);
        x.push(parse(&record[1])?);
        v.push(parse(&record[2])?);
    }
    if t.len() < 2 {
        return Err(SynthError::Invalid("truth needs at least 2 rows".into()));
    }
    Ok(Trajectory { t, x, v })
}
