//! Evaluation metrics: localisation error over time, convergence at the
//! 25 m threshold, and the minimum-subsequence-length study.

use thiserror::Error;

use crate::align::{subsequence_search, Metric};
use crate::signal::TimeSignal;
use crate::spacify::{spacify, SpaceSignal};
use crate::synth::Trajectory;
use crate::track::{haversine, TrackMap};

/// The convergence radius: a localisation counts as found once the error
/// drops below the typical length of a train car.
pub const CONVERGENCE_THRESHOLD_M: f64 = 25.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("estimate at t = {t} outside truth coverage [{lo}, {hi}]")]
    Coverage { t: f64, lo: f64, hi: f64 },
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Track(#[from] crate::track::TrackError),
    #[error(transparent)]
    Align(#[from] crate::align::AlignError),
    #[error(transparent)]
    Spacify(#[from] crate::spacify::SpacifyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorMode {
    /// Haversine distance between the geo positions of estimate and truth.
    Geo,
    /// Absolute along-track difference in meters.
    Arclength,
}

#[derive(Debug, Clone)]
pub struct ErrorSeries {
    pub t: Vec<f64>,
    pub err: Vec<f64>,
    pub mode: ErrorMode,
}

/// Per-estimate localisation error against the interpolated ground truth.
pub fn error_over_time(
    estimates: &[(f64, f64)],
    truth: &Trajectory,
    map: &TrackMap,
    mode: ErrorMode,
) -> Result<ErrorSeries, EvalError> {
    if estimates.is_empty() {
        return Err(EvalError::Empty("no estimates".into()));
    }
    let lo = truth.t[0];
    let hi = *truth.t.last().unwrap();
    let mut t_out = Vec::with_capacity(estimates.len());
    let mut err = Vec::with_capacity(estimates.len());
    for &(t, x_hat) in estimates {
        let x_true = truth
            .position_at(t)
            .ok_or(EvalError::Coverage { t, lo, hi })?;
        let e = match mode {
            ErrorMode::Arclength => (x_hat - x_true).abs(),
            ErrorMode::Geo => {
                let a = map.arclength_to_geo(x_hat.clamp(0.0, map.length()))?;
                let b = map.arclength_to_geo(x_true.clamp(0.0, map.length()))?;
                haversine(a, b)
            }
        };
        t_out.push(t);
        err.push(e);
    }
    Ok(ErrorSeries { t: t_out, err, mode })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub converged: bool,
    /// Time of the first sub-threshold error, seconds from the series start.
    pub t_first: Option<f64>,
    /// Distance travelled (per ground truth) until first convergence.
    pub d_first: Option<f64>,
    /// True when the error never re-exits the threshold after `t_first`.
    pub sustained: bool,
    /// Number of re-exits after first convergence.
    pub excursions: usize,
}

/// Convergence statistics for an error series at the given threshold
/// (25 m unless overridden). Distance is integrated over the true velocity.
pub fn convergence_report(
    series: &ErrorSeries,
    truth: &Trajectory,
    threshold: f64,
) -> ConvergenceReport {
    let first = series.err.iter().position(|&e| e < threshold);
    let Some(k0) = first else {
        return ConvergenceReport {
            converged: false,
            t_first: None,
            d_first: None,
            sustained: false,
            excursions: 0,
        };
    };
    let t_first = series.t[k0] - series.t[0];
    let d_first = integrate_velocity(truth, series.t[0], series.t[k0]);
    let mut excursions = 0usize;
    let mut inside = true;
    for &e in &series.err[k0 + 1..] {
        if inside && e >= threshold {
            excursions += 1;
            inside = false;
        } else if !inside && e < threshold {
            inside = true;
        }
    }
    ConvergenceReport {
        converged: true,
        t_first: Some(t_first),
        d_first: Some(d_first),
        sustained: excursions == 0,
        excursions,
    }
}

/// Trapezoidal integral of the true velocity between two times.
fn integrate_velocity(truth: &Trajectory, t_from: f64, t_to: f64) -> f64 {
    if t_to <= t_from {
        return 0.0;
    }
    // The trajectory is uniformly sampled; integrate sample intervals and
    // patch the fractional ends.
    let v_from = truth.velocity_at(t_from).unwrap_or(truth.v[0]);
    let v_to = truth
        .velocity_at(t_to)
        .unwrap_or(*truth.v.last().unwrap());
    let n = truth.t.len();
    let mut acc = 0.0;
    let mut prev_t = t_from;
    let mut prev_v = v_from;
    for i in 0..n {
        let ti = truth.t[i];
        if ti <= t_from {
            continue;
        }
        if ti >= t_to {
            break;
        }
        acc += 0.5 * (prev_v + truth.v[i]) * (ti - prev_t);
        prev_t = ti;
        prev_v = truth.v[i];
    }
    acc + 0.5 * (prev_v + v_to) * (t_to - prev_t)
}

/// Result of the minimum-length study for one start point.
#[derive(Debug, Clone)]
pub struct MinLengthStudy {
    /// Tested lengths in meters, ascending.
    pub lengths: Vec<f64>,
    /// Best (smallest) rank with error below the threshold per length;
    /// `None` when no candidate was close enough.
    pub best_rank: Vec<Option<usize>>,
    /// `L(k)` per requested k: the minimum length whose best rank is <= k,
    /// `None` when no tested length suffices.
    pub l_of_k: Vec<(usize, Option<f64>)>,
}

/// For each window length, aligns the trailing window of the run against
/// the map and records the best rank that lands within `threshold` of the
/// truth. `L(k)` is non-increasing in k by construction.
///
/// Lengths are scanned in ascending order and the scan stops early once
/// rank 1 succeeds, which settles L(k) for every k.
#[allow(clippy::too_many_arguments)]
pub fn min_length_study(
    map: &TrackMap,
    sig: &TimeSignal,
    truth: &Trajectory,
    k_values: &[usize],
    lengths: &[f64],
    metric: Metric,
    threshold: f64,
    mode: ErrorMode,
) -> Result<MinLengthStudy, EvalError> {
    if k_values.is_empty() || lengths.is_empty() {
        return Err(EvalError::Empty("k_values and lengths must be non-empty".into()));
    }
    let k_max = *k_values.iter().max().unwrap();
    let map_sig = map.to_space_signal();
    let dx = map.dx();

    let velocities = sig
        .v
        .as_ref()
        .ok_or_else(|| EvalError::Empty("signal has no velocity channel".into()))?;

    // Spacify the longest needed trailing stretch once; per-length queries
    // are its suffixes.
    let max_len = lengths.iter().cloned().fold(0.0f64, f64::max);
    let slice_start = trailing_slice_start(velocities, sig.dt, max_len + 4.0 * dx);
    let window_sig = sig.slice(slice_start, sig.len());
    let full_window = spacify(&window_sig, dx, 0.0)?;

    // Truth position at the time of the window's last sample.
    let t_end = sig.time_at(sig.len() - 1);
    let x_true_end = truth
        .position_at(t_end)
        .ok_or(EvalError::Coverage { t: t_end, lo: truth.t[0], hi: *truth.t.last().unwrap() })?;

    let mut tested = Vec::new();
    let mut best_ranks: Vec<Option<usize>> = Vec::new();
    for &len in lengths {
        let m = (len / dx).round() as usize + 1;
        if m < 2 || m > full_window.len() {
            continue;
        }
        let query = SpaceSignal {
            dx,
            x0: 0.0,
            b: full_window.b[full_window.len() - m..].to_vec(),
        };
        let span = query.span();
        let hits = subsequence_search(&map_sig, &query, metric, k_max, span.max(dx))?;
        let mut best: Option<usize> = None;
        for hit in &hits {
            let est_end = hit.s + span;
            let err = match mode {
                ErrorMode::Arclength => (est_end - x_true_end).abs(),
                ErrorMode::Geo => {
                    let a = map.arclength_to_geo(est_end.clamp(0.0, map.length()))?;
                    let b = map.arclength_to_geo(x_true_end.clamp(0.0, map.length()))?;
                    haversine(a, b)
                }
            };
            if err <= threshold {
                best = Some(hit.rank);
                break;
            }
        }
        tested.push(len);
        best_ranks.push(best);
        if best == Some(1) {
            break;
        }
    }

    let l_of_k = k_values
        .iter()
        .map(|&k| {
            let found = tested
                .iter()
                .zip(&best_ranks)
                .find(|(_, rank)| rank.is_some_and(|r| r <= k))
                .map(|(len, _)| *len);
            (k, found)
        })
        .collect();

    Ok(MinLengthStudy { lengths: tested, best_rank: best_ranks, l_of_k })
}

/// Index from which the trailing `span_m` meters of forward motion start.
fn trailing_slice_start(v: &[f64], dt: f64, span_m: f64) -> usize {
    let mut acc = 0.0;
    let mut idx = v.len();
    while idx > 0 && acc < span_m {
        idx -= 1;
        acc += v[idx].max(0.0) * dt;
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_map, simulate_run, ProfilePhase, RunSpec, SynthSpec};
    use approx::assert_relative_eq;

    fn test_map() -> TrackMap {
        gen_map(&SynthSpec { length: 3_000.0, seed: 5, ..Default::default() }).unwrap()
    }

    fn test_run(map: &TrackMap) -> (TimeSignal, Trajectory) {
        simulate_run(
            map,
            &RunSpec {
                profile: vec![ProfilePhase { duration: 30.0, target: 20.0 }],
                sensor_rate: 400.0,
                start_s: 500.0,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn perfect_estimates_have_zero_error() {
        let map = test_map();
        let (_, truth) = test_run(&map);
        let est: Vec<(f64, f64)> = truth
            .t
            .iter()
            .step_by(100)
            .zip(truth.x.iter().step_by(100))
            .map(|(&t, &x)| (t, x))
            .collect();
        let series = error_over_time(&est, &truth, &map, ErrorMode::Arclength).unwrap();
        assert!(series.err.iter().all(|&e| e == 0.0));
        let series_geo = error_over_time(&est, &truth, &map, ErrorMode::Geo).unwrap();
        assert!(series_geo.err.iter().all(|&e| e < 1e-6));
    }

    #[test]
    fn constant_offset_shows_up_everywhere() {
        let map = test_map();
        let (_, truth) = test_run(&map);
        let est: Vec<(f64, f64)> = truth
            .t
            .iter()
            .step_by(50)
            .zip(truth.x.iter().step_by(50))
            .map(|(&t, &x)| (t, x + 10.0))
            .collect();
        for mode in [ErrorMode::Arclength, ErrorMode::Geo] {
            let series = error_over_time(&est, &truth, &map, mode).unwrap();
            for &e in &series.err {
                assert_relative_eq!(e, 10.0, max_relative = 1e-3);
            }
        }
    }

    #[test]
    fn estimate_beyond_truth_is_coverage_error() {
        let map = test_map();
        let (_, truth) = test_run(&map);
        let est = vec![(truth.t.last().unwrap() + 5.0, 100.0)];
        assert!(matches!(
            error_over_time(&est, &truth, &map, ErrorMode::Arclength),
            Err(EvalError::Coverage { .. })
        ));
    }

    fn series(t: Vec<f64>, err: Vec<f64>) -> ErrorSeries {
        ErrorSeries { t, err, mode: ErrorMode::Arclength }
    }

    fn flat_truth(t_max: f64, v: f64) -> Trajectory {
        let n = (t_max * 10.0) as usize + 1;
        Trajectory {
            t: (0..n).map(|i| i as f64 * 0.1).collect(),
            x: (0..n).map(|i| i as f64 * 0.1 * v).collect(),
            v: vec![v; n],
        }
    }

    #[test]
    fn never_below_threshold_means_not_converged() {
        let truth = flat_truth(10.0, 10.0);
        let s = series(vec![0.0, 1.0, 2.0], vec![100.0, 50.0, 30.0]);
        let report = convergence_report(&s, &truth, 25.0);
        assert!(!report.converged);
        assert_eq!(report.t_first, None);
        assert_eq!(report.d_first, None);
    }

    #[test]
    fn converged_from_start() {
        let truth = flat_truth(10.0, 10.0);
        let s = series(vec![0.0, 1.0, 2.0], vec![5.0, 4.0, 3.0]);
        let report = convergence_report(&s, &truth, 25.0);
        assert!(report.converged && report.sustained);
        assert_eq!(report.t_first, Some(0.0));
        assert_eq!(report.d_first, Some(0.0));
        assert_eq!(report.excursions, 0);
    }

    #[test]
    fn excursion_counting() {
        let truth = flat_truth(10.0, 10.0);
        let s = series(
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            vec![60.0, 50.0, 40.0, 20.0, 30.0, 10.0],
        );
        let report = convergence_report(&s, &truth, 25.0);
        assert!(report.converged);
        assert_relative_eq!(report.t_first.unwrap(), 3.0);
        assert_relative_eq!(report.d_first.unwrap(), 30.0, max_relative = 1e-9);
        assert_eq!(report.excursions, 1);
        assert!(!report.sustained);
    }

    #[test]
    fn appending_subthreshold_samples_keeps_t_first() {
        let truth = flat_truth(20.0, 10.0);
        let mut t = vec![0.0, 1.0, 2.0, 3.0];
        let mut e = vec![60.0, 40.0, 20.0, 18.0];
        let r1 = convergence_report(&series(t.clone(), e.clone()), &truth, 25.0);
        t.extend([4.0, 5.0, 6.0]);
        e.extend([12.0, 9.0, 3.0]);
        let r2 = convergence_report(&series(t, e), &truth, 25.0);
        assert_eq!(r1.t_first, r2.t_first);
        assert_eq!(r1.d_first, r2.d_first);
    }

    #[test]
    fn planted_window_study_finds_small_length() {
        let map = test_map();
        let (sig, truth) = test_run(&map);
        let lengths: Vec<f64> = (1..=60).map(|l| l as f64).collect();
        let study = min_length_study(
            &map,
            &sig,
            &truth,
            &[1, 2, 3],
            &lengths,
            Metric::Euclid,
            CONVERGENCE_THRESHOLD_M,
            ErrorMode::Arclength,
        )
        .unwrap();
        let l1 = study.l_of_k.iter().find(|(k, _)| *k == 1).unwrap().1;
        assert!(l1.is_some(), "no length up to 60 m localised the window");
        assert!(l1.unwrap() <= 60.0);
        // Non-increasing in k.
        let ls: Vec<Option<f64>> = study.l_of_k.iter().map(|(_, l)| *l).collect();
        for w in ls.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                assert!(b <= a, "L(k) increased: {a} -> {b}");
            }
        }
    }

    #[test]
    fn constant_map_never_localises() {
        let samples = (0..8_000)
            .map(|i| crate::track::MapSample {
                s: i as f64 * 0.25,
                lat: 47.0,
                lon: 8.0,
                b: [5.0, 5.0, 5.0],
            })
            .collect();
        let map = TrackMap::new(samples).unwrap();
        let run = RunSpec {
            profile: vec![ProfilePhase { duration: 20.0, target: 20.0 }],
            sensor_rate: 400.0,
            start_s: 1_000.0,
            ..Default::default()
        };
        let (sig, truth) = simulate_run(&map, &run).unwrap();
        let lengths = [5.0, 20.0, 50.0];
        let study = min_length_study(
            &map,
            &sig,
            &truth,
            &[1, 2, 3],
            &lengths,
            Metric::Euclid,
            CONVERGENCE_THRESHOLD_M,
            ErrorMode::Arclength,
        )
        .unwrap();
        // Ties all score zero and resolve to the map start, far from the
        // 1400 m truth position.
        for (_, l) in &study.l_of_k {
            assert_eq!(*l, None);
        }
    }
}
