//! Cold-start pipeline combining alignment and particle filtering.
//!
//! The control loop waits for enough forward motion, transforms the
//! trailing window into the spatial domain, asks the alignment search for
//! the three best map positions, and burns in one particle filter per
//! candidate. False candidates diverge against live data; the surviving
//! filter tracks until its position variance exceeds the divergence
//! threshold, after which the loop re-enters the alignment step.
//!
//! The same logic serves online use and file replay; a replay simply
//! drains the buffered samples as fast as they can be processed, which is
//! how the catch-up after alignment latency works out in practice.

use thiserror::Error;

use crate::align::{subsequence_search, AlignError, MatchCandidate, Metric};
use crate::pf::{FilterState, PfConfig, PfError, StateEstimate};
use crate::rng::derive_seed;
use crate::signal::TimeSignal;
use crate::spacify::{spacify, SpaceSignal, SpacifyError};
use crate::track::TrackMap;
use crate::FieldSample;

/// Velocity spread of burn-phase filters relative to the measured speed.
const BURN_V_SPREAD_FRAC: f64 = 0.05;
const BURN_V_SPREAD_MIN_MPS: f64 = 0.5;

/// Updates before variance-based kills engage: the initial spread needs a
/// few reweights to compress, and during that window every filter's
/// variance is dominated by the initialisation, not by map disagreement.
const BURN_GRACE_UPDATES: usize = 5;

#[derive(Debug, Error)]
pub enum HybridError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("signal carries no velocity channel; the hybrid pipeline needs one")]
    MissingVelocity,
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Spacify(#[from] SpacifyError),
    #[error(transparent)]
    Pf(#[from] PfError),
}

#[derive(Debug, Clone)]
pub struct HybridConfig {
    /// Lookback range n: meters of spatial window fed to the alignment.
    pub lookback_m: f64,
    /// Burn-phase length: maximum updates before the coincidence check.
    pub burn_updates: usize,
    /// Position variance above which a filter counts as diverged, m^2.
    pub var_threshold: f64,
    pub pf: PfConfig,
    /// Particles per burn-phase filter.
    pub n_particles: usize,
    pub align_metric: Metric,
    /// Do not start aligning below this speed, m/s.
    pub v_start_min: f64,
    /// Forward-motion threshold for the trailing window, m/s.
    pub v_min: f64,
    /// Two surviving filters count as coincident within this distance.
    pub coincide_m: f64,
    pub seed: u64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            lookback_m: 100.0,
            burn_updates: 100,
            var_threshold: 25.0,
            pf: PfConfig::default(),
            n_particles: 10_000,
            align_metric: Metric::Dtw,
            v_start_min: 10.0,
            v_min: 0.5,
            coincide_m: 25.0,
            seed: 0,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<(), HybridError> {
        if !(self.lookback_m > 0.0) {
            return Err(HybridError::Invalid(format!(
                "lookback_m must be positive, got {}",
                self.lookback_m
            )));
        }
        if self.burn_updates < 1 {
            return Err(HybridError::Invalid("burn_updates must be >= 1".into()));
        }
        if !(self.var_threshold > 0.0) {
            return Err(HybridError::Invalid(format!(
                "var_threshold must be positive, got {}",
                self.var_threshold
            )));
        }
        if self.n_particles < 1 {
            return Err(HybridError::Invalid("n_particles must be >= 1".into()));
        }
        self.pf.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    /// Alignment produced a candidate set: (start arclength, score) pairs.
    CandidateSet { candidates: Vec<(f64, f64)> },
    /// Burn-phase filters spawned at these positions.
    FiltersSpawned { positions: Vec<f64> },
    FilterKilled { index: usize, reason: String },
    /// A single filter survived the burn phase.
    Converged { index: usize, x_hat: f64 },
    /// The tracking filter exceeded the divergence threshold.
    Diverged { x_hat: f64, var_x: f64 },
    /// The burn phase failed; the pipeline restarts at the alignment step.
    ErrorRestart { reason: String, hint: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalisationEvent {
    pub t: f64,
    pub kind: EventKind,
}

impl LocalisationEvent {
    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            EventKind::CandidateSet { .. } => "candidate-set",
            EventKind::FiltersSpawned { .. } => "filters-spawned",
            EventKind::FilterKilled { .. } => "filter-killed",
            EventKind::Converged { .. } => "converged",
            EventKind::Diverged { .. } => "diverged",
            EventKind::ErrorRestart { .. } => "error-restart",
        }
    }

    /// Key=value detail string, comma-free so it drops into the event CSV.
    pub fn detail(&self) -> String {
        match &self.kind {
            EventKind::CandidateSet { candidates } => candidates
                .iter()
                .enumerate()
                .map(|(i, (s, score))| format!("s{}={s:.2};score{}={score:.4}", i + 1, i + 1))
                .collect::<Vec<_>>()
                .join(";"),
            EventKind::FiltersSpawned { positions } => positions
                .iter()
                .enumerate()
                .map(|(i, p)| format!("x{}={p:.2}", i + 1))
                .collect::<Vec<_>>()
                .join(";"),
            EventKind::FilterKilled { index, reason } => {
                format!("index={index};reason={reason}")
            }
            EventKind::Converged { index, x_hat } => {
                format!("index={index};x_hat={x_hat:.2}")
            }
            EventKind::Diverged { x_hat, var_x } => {
                format!("x_hat={x_hat:.2};var_x={var_x:.1}")
            }
            EventKind::ErrorRestart { reason, hint } => {
                format!("reason={reason};hint={hint}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatePoint {
    pub t: f64,
    pub x_hat: f64,
    pub v_hat: f64,
    pub var_x: f64,
}

/// Locates the window on the map and returns up to three well-separated
/// candidates, best first. Separation is one window length, so the
/// candidates are distinct track hypotheses rather than shifted copies of
/// the same one.
pub fn align_top3(
    map_sig: &SpaceSignal,
    window: &SpaceSignal,
    cfg: &HybridConfig,
) -> Result<Vec<MatchCandidate>, AlignError> {
    subsequence_search(
        map_sig,
        window,
        cfg.align_metric,
        3,
        window.span().max(window.dx),
    )
}

/// Why the burn phase did not produce a survivor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BurnFailure {
    pub reason: String,
    /// Parameter guidance, following the tuning advice attached to the
    /// algorithm: widen the window, adjust the threshold, or lengthen the
    /// burn phase depending on the failure shape.
    pub hint: String,
}

pub enum BurnVerdict {
    Continue,
    Survivor { index: usize, estimate: StateEstimate },
    Failed(BurnFailure),
}

/// Lockstep burn phase: one filter per alignment candidate, stepped on the
/// shared measurement stream until all but one diverge.
pub struct BurnPhase {
    filters: Vec<Option<FilterState>>,
    scores: Vec<f64>,
    updates: usize,
    cfg_burn_updates: usize,
    coincide_m: f64,
}

impl BurnPhase {
    pub fn spawn(
        map: &TrackMap,
        candidates: &[MatchCandidate],
        window_span: f64,
        v0: f64,
        cfg: &HybridConfig,
        seed_base: u64,
    ) -> Self {
        let spread = window_span / 2.0;
        let v_spread = (v0.abs() * BURN_V_SPREAD_FRAC).max(BURN_V_SPREAD_MIN_MPS);
        let filters = candidates
            .iter()
            .map(|cand| {
                Some(FilterState::init_local(
                    map,
                    cand.s + window_span,
                    spread,
                    v0,
                    v_spread,
                    cfg.n_particles,
                    derive_seed(seed_base, cand.rank as u64),
                ))
            })
            .collect();
        Self {
            filters,
            scores: candidates.iter().map(|c| c.score).collect(),
            updates: 0,
            cfg_burn_updates: cfg.burn_updates,
            coincide_m: cfg.coincide_m,
        }
    }

    pub fn positions(&self) -> Vec<f64> {
        self.filters
            .iter()
            .flatten()
            .map(|f| f.estimate().x_hat)
            .collect()
    }

    /// Advances every live filter by one measurement; returns kill
    /// notifications for this step plus the verdict.
    pub fn step(
        &mut self,
        map: &TrackMap,
        z: &FieldSample,
        cfg: &HybridConfig,
    ) -> (Vec<(usize, String)>, BurnVerdict) {
        self.updates += 1;
        let variance_kills_active = self.updates > BURN_GRACE_UPDATES;
        let mut kills = Vec::new();
        let mut estimates: Vec<(usize, StateEstimate)> = Vec::new();
        for i in 0..self.filters.len() {
            let Some(filter) = self.filters[i].as_mut() else {
                continue;
            };
            match filter.step(map, z, &cfg.pf) {
                Ok(est) if variance_kills_active && est.var_x > cfg.var_threshold => {
                    kills.push((i, format!("variance {:.0} above threshold", est.var_x)));
                    self.filters[i] = None;
                }
                Ok(est) => estimates.push((i, est)),
                Err(PfError::TotalCollapse) => {
                    kills.push((i, "total weight collapse".into()));
                    self.filters[i] = None;
                }
                Err(e) => {
                    kills.push((i, e.to_string()));
                    self.filters[i] = None;
                }
            }
        }

        let verdict = match estimates.len() {
            0 => BurnVerdict::Failed(BurnFailure {
                reason: "all filters diverged".into(),
                hint: "increase var_threshold or check the data".into(),
            }),
            1 => BurnVerdict::Survivor { index: estimates[0].0, estimate: estimates[0].1 },
            _ if self.updates >= self.cfg_burn_updates => {
                let coincide = estimates.iter().all(|(_, a)| {
                    estimates
                        .iter()
                        .all(|(_, b)| (a.x_hat - b.x_hat).abs() <= self.coincide_m)
                });
                if coincide {
                    // Merge into the best-scored survivor.
                    let &(index, estimate) = estimates
                        .iter()
                        .min_by(|(i, _), (j, _)| self.scores[*i].total_cmp(&self.scores[*j]))
                        .expect("at least two estimates");
                    BurnVerdict::Survivor { index, estimate }
                } else {
                    BurnVerdict::Failed(BurnFailure {
                        reason: format!(
                            "{} filters converged at distinct positions",
                            estimates.len()
                        ),
                        hint: "increase lookback_m, decrease var_threshold, or increase \
                               burn_updates"
                            .into(),
                    })
                }
            }
            _ => BurnVerdict::Continue,
        };
        (kills, verdict)
    }

    pub fn take_filter(&mut self, index: usize) -> FilterState {
        self.filters[index].take().expect("survivor filter present")
    }
}

/// Burn-phase driver over a prepared measurement sequence: spawns one
/// filter per candidate and runs them in lockstep until a unique survivor
/// emerges. Returns the survivor with its current estimate, or the failure
/// with tuning hints. Measurements arrive at the filter update cadence.
pub fn get_pf(
    map: &TrackMap,
    candidates: &[MatchCandidate],
    window_span: f64,
    v0: f64,
    measurements: impl IntoIterator<Item = FieldSample>,
    cfg: &HybridConfig,
    seed_base: u64,
) -> Result<(FilterState, StateEstimate), BurnFailure> {
    if candidates.is_empty() {
        return Err(BurnFailure {
            reason: "no alignment candidates".into(),
            hint: "check the data".into(),
        });
    }
    let mut burn = BurnPhase::spawn(map, candidates, window_span, v0, cfg, seed_base);
    for z in measurements {
        let (_kills, verdict) = burn.step(map, &z, cfg);
        match verdict {
            BurnVerdict::Continue => {}
            BurnVerdict::Survivor { index, estimate } => {
                return Ok((burn.take_filter(index), estimate));
            }
            BurnVerdict::Failed(failure) => return Err(failure),
        }
    }
    Err(BurnFailure {
        reason: "measurement stream ended during the burn phase".into(),
        hint: "provide a longer stream".into(),
    })
}

#[derive(Debug, Default)]
pub struct HybridOutput {
    pub estimates: Vec<EstimatePoint>,
    pub events: Vec<LocalisationEvent>,
}

enum Phase {
    Gather,
    Burn(BurnPhase),
    Track(FilterState),
}

/// Replays the signal through the full pipeline and returns the estimate
/// stream plus the control-flow event log. End of stream terminates
/// cleanly, possibly with no estimates at all.
pub fn localise(
    map: &TrackMap,
    sig: &TimeSignal,
    cfg: &HybridConfig,
) -> Result<HybridOutput, HybridError> {
    cfg.validate()?;
    let velocities = sig.v.as_ref().ok_or(HybridError::MissingVelocity)?;

    let ratio = cfg.pf.dt / sig.dt;
    let spu = ratio.round() as usize;
    if spu < 1 || (ratio - spu as f64).abs() > 1e-3 {
        return Err(HybridError::Invalid(format!(
            "filter update interval {} is not a multiple of the sample interval {}",
            cfg.pf.dt, sig.dt
        )));
    }

    let map_sig = map.to_space_signal();
    let target_window_samples = (cfg.lookback_m / map.dx()).floor() as usize + 1;

    let mut out = HybridOutput::default();
    let mut phase = Phase::Gather;

    // Trailing run of forward motion (v > v_min), in samples and meters.
    let mut run_start = 0usize;
    let mut run_meters = 0.0f64;
    // Forward meters accumulated since the last error-restart; alignment is
    // gated on this so a failed burn is not retried on the same window.
    let mut gate_meters = cfg.lookback_m;
    let mut round: u64 = 0;

    let n_blocks = sig.len() / spu;
    for block in 0..n_blocks {
        let lo = block * spu;
        let hi = lo + spu;
        let t_block = sig.time_at(hi - 1);

        let mut z = [0.0f64; 3];
        let mut v_mean = 0.0f64;
        for i in lo..hi {
            z[0] += sig.b[i][0];
            z[1] += sig.b[i][1];
            z[2] += sig.b[i][2];
            v_mean += velocities[i];
            if velocities[i] > cfg.v_min {
                let step_m = velocities[i] * sig.dt;
                run_meters += step_m;
                gate_meters += step_m;
            } else {
                run_start = i + 1;
                run_meters = 0.0;
            }
        }
        let inv = 1.0 / spu as f64;
        z = [z[0] * inv, z[1] * inv, z[2] * inv];
        v_mean *= inv;

        match phase {
            Phase::Gather => {
                if run_meters >= cfg.lookback_m
                    && gate_meters >= cfg.lookback_m
                    && v_mean >= cfg.v_start_min
                {
                    // Trailing window: walk back until lookback_m is covered.
                    let mut acc = 0.0;
                    let mut j0 = hi;
                    while j0 > run_start && acc < cfg.lookback_m {
                        j0 -= 1;
                        acc += velocities[j0] * sig.dt;
                    }
                    let window_sig = sig.slice(j0, hi);
                    let mut window = spacify(&window_sig, map.dx(), 0.0)?;
                    if window.len() > target_window_samples {
                        let cut = window.len() - target_window_samples;
                        window.b.drain(..cut);
                        window.x0 += cut as f64 * window.dx;
                    }
                    let candidates = align_top3(&map_sig, &window, cfg)?;
                    out.events.push(LocalisationEvent {
                        t: t_block,
                        kind: EventKind::CandidateSet {
                            candidates: candidates.iter().map(|c| (c.s, c.score)).collect(),
                        },
                    });
                    if candidates.is_empty() {
                        out.events.push(LocalisationEvent {
                            t: t_block,
                            kind: EventKind::ErrorRestart {
                                reason: "alignment produced no candidates".into(),
                                hint: "check the data".into(),
                            },
                        });
                        gate_meters = 0.0;
                        round += 1;
                        continue;
                    }
                    let burn = BurnPhase::spawn(
                        map,
                        &candidates,
                        window.span(),
                        v_mean,
                        cfg,
                        derive_seed(cfg.seed, round),
                    );
                    out.events.push(LocalisationEvent {
                        t: t_block,
                        kind: EventKind::FiltersSpawned {
                            positions: candidates
                                .iter()
                                .map(|c| c.s + window.span())
                                .collect(),
                        },
                    });
                    round += 1;
                    phase = Phase::Burn(burn);
                }
            }
            Phase::Burn(ref mut burn) => {
                let (kills, verdict) = burn.step(map, &z, cfg);
                for (index, reason) in kills {
                    out.events.push(LocalisationEvent {
                        t: t_block,
                        kind: EventKind::FilterKilled { index, reason },
                    });
                }
                match verdict {
                    BurnVerdict::Continue => {}
                    BurnVerdict::Survivor { index, estimate } => {
                        out.events.push(LocalisationEvent {
                            t: t_block,
                            kind: EventKind::Converged { index, x_hat: estimate.x_hat },
                        });
                        let filter = burn.take_filter(index);
                        out.estimates.push(EstimatePoint {
                            t: t_block,
                            x_hat: estimate.x_hat,
                            v_hat: estimate.v_hat,
                            var_x: estimate.var_x,
                        });
                        phase = Phase::Track(filter);
                    }
                    BurnVerdict::Failed(failure) => {
                        out.events.push(LocalisationEvent {
                            t: t_block,
                            kind: EventKind::ErrorRestart {
                                reason: failure.reason,
                                hint: failure.hint,
                            },
                        });
                        gate_meters = 0.0;
                        phase = Phase::Gather;
                    }
                }
            }
            Phase::Track(ref mut filter) => {
                match filter.step(map, &z, &cfg.pf) {
                    Ok(est) if est.var_x > cfg.var_threshold => {
                        out.events.push(LocalisationEvent {
                            t: t_block,
                            kind: EventKind::Diverged { x_hat: est.x_hat, var_x: est.var_x },
                        });
                        phase = Phase::Gather;
                    }
                    Ok(est) => {
                        out.estimates.push(EstimatePoint {
                            t: t_block,
                            x_hat: est.x_hat,
                            v_hat: est.v_hat,
                            var_x: est.var_x,
                        });
                    }
                    Err(PfError::TotalCollapse) => {
                        out.events.push(LocalisationEvent {
                            t: t_block,
                            kind: EventKind::Diverged { x_hat: f64::NAN, var_x: f64::INFINITY },
                        });
                        phase = Phase::Gather;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }
    Ok(out)
}

/// Writes the estimate stream as
/// `t_s,x_m,v_mps,var_m2,lat_deg,lon_deg`.
pub fn save_estimates(
    estimates: &[EstimatePoint],
    map: &TrackMap,
    path: impl AsRef<std::path::Path>,
) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t_s,x_m,v_mps,var_m2,lat_deg,lon_deg")?;
    for e in estimates {
        let geo = map
            .arclength_to_geo(e.x_hat.clamp(0.0, map.length()))
            .expect("clamped arclength is on the track");
        writeln!(
            w,
            "{:.4},{:.3},{:.3},{:.3},{:.8},{:.8}",
            e.t, e.x_hat, e.v_hat, e.var_x, geo.lat, geo.lon
        )?;
    }
    w.flush()
}

/// Writes the event log as `t_s,kind,detail`.
pub fn save_events(
    events: &[LocalisationEvent],
    path: impl AsRef<std::path::Path>,
) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t_s,kind,detail")?;
    for e in events {
        writeln!(w, "{:.4},{},{}", e.t, e.kind_name(), e.detail())?;
    }
    w.flush()
}
