//! Particle filter over along-track position and velocity.
//!
//! Particles follow a constant-velocity model with process noise
//! `Q = q * [[dt^3/3, dt^2/2], [dt^2/2, dt]]` and are reweighted by the
//! similarity between the map field at their position and the live
//! measurement. The default weighting kernel is the heavy-tailed
//! `1 / (1 + |a - b|)`, which tolerates measurement outliers far better
//! than a Gaussian likelihood.
//!
//! All randomness is addressed through per-particle ChaCha streams, so a
//! replay is bit-reproducible for any rayon worker count.

use rayon::prelude::*;
use thiserror::Error;

use crate::rng::StreamRng;
use crate::track::TrackMap;
use crate::vec3;
use crate::FieldSample;

/// Stream id for ensemble-level draws (resampling offset); particle i uses
/// stream i.
const CONTROL_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum PfError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("total weight collapse: no particle retains support")]
    TotalCollapse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    /// `1 / (1 + |a - b|)`; heavy tails keep far-off particles alive.
    Modified,
    /// `exp(-|a - b|^2 / (2 sigma^2))`.
    Gaussian { sigma: f64 },
}

impl Kernel {
    #[inline]
    pub fn weight(&self, a: &FieldSample, b: &FieldSample) -> f64 {
        match self {
            Kernel::Modified => kernel_modified(a, b),
            Kernel::Gaussian { sigma } => kernel_gaussian(a, b, *sigma),
        }
    }
}

#[inline]
pub fn kernel_modified(a: &FieldSample, b: &FieldSample) -> f64 {
    1.0 / (1.0 + vec3::dist(a, b))
}

#[inline]
pub fn kernel_gaussian(a: &FieldSample, b: &FieldSample, sigma: f64) -> f64 {
    let d2 = vec3::sq_dist(a, b);
    (-d2 / (2.0 * sigma * sigma)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfConfig {
    /// Process noise intensity.
    pub q: f64,
    pub kernel: Kernel,
    /// Update interval, seconds (reciprocal of the update frequency).
    pub dt: f64,
    /// Resample when ESS drops below this fraction of the particle count.
    pub ess_frac: f64,
    /// Position variance above which the filter counts as diverged, m^2.
    pub var_threshold: f64,
}

impl Default for PfConfig {
    fn default() -> Self {
        Self {
            q: 0.53,
            kernel: Kernel::Modified,
            dt: 0.1,
            ess_frac: 0.5,
            // A locked-on filter sits well below 1 m^2 position variance;
            // one latched onto unrelated track fluctuates far above 25 m^2.
            var_threshold: 25.0,
        }
    }
}

impl PfConfig {
    pub fn validate(&self) -> Result<(), PfError> {
        if !(self.q > 0.0) {
            return Err(PfError::Domain(format!("q must be positive, got {}", self.q)));
        }
        if !(self.dt > 0.0) {
            return Err(PfError::Domain(format!("dt must be positive, got {}", self.dt)));
        }
        if let Kernel::Gaussian { sigma } = self.kernel {
            if !(sigma > 0.0) {
                return Err(PfError::Domain(format!("sigma must be positive, got {sigma}")));
            }
        }
        if !(self.ess_frac > 0.0 && self.ess_frac <= 1.0) {
            return Err(PfError::Domain(format!(
                "ess_frac must be in (0, 1], got {}",
                self.ess_frac
            )));
        }
        if !(self.var_threshold > 0.0) {
            return Err(PfError::Domain(format!(
                "var_threshold must be positive, got {}",
                self.var_threshold
            )));
        }
        Ok(())
    }
}

/// Process noise covariance of the constant-velocity model.
pub fn process_noise_cov(q: f64, dt: f64) -> Result<[[f64; 2]; 2], PfError> {
    if !(q > 0.0) || !(dt > 0.0) {
        return Err(PfError::Domain(format!("q and dt must be positive, got q={q}, dt={dt}")));
    }
    let dt2 = dt * dt;
    let dt3 = dt2 * dt;
    Ok([[q * dt3 / 3.0, q * dt2 / 2.0], [q * dt2 / 2.0, q * dt]])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateEstimate {
    pub x_hat: f64,
    pub v_hat: f64,
    pub var_x: f64,
    pub ess: f64,
}

/// The particle ensemble. Weights always sum to one after construction,
/// reweighting, and resampling.
#[derive(Debug, Clone)]
pub struct FilterState {
    x: Vec<f64>,
    v: Vec<f64>,
    w: Vec<f64>,
    rng: StreamRng,
    epoch: u64,
}

impl FilterState {
    /// Particles uniform over the whole track, velocities uniform over the
    /// prior range; the cold-start initialisation.
    pub fn init_uniform(map: &TrackMap, n: usize, v_prior: (f64, f64), seed: u64) -> Self {
        assert!(n >= 1, "particle count must be >= 1");
        let rng = StreamRng::new(seed);
        let len = map.length();
        let (v_lo, v_hi) = v_prior;
        let mut x = vec![0.0; n];
        let mut v = vec![0.0; n];
        x.par_iter_mut()
            .zip(v.par_iter_mut())
            .enumerate()
            .for_each(|(i, (xi, vi))| {
                let (ux, uv) = rng.uniform2(i as u64, 0);
                *xi = ux * len;
                *vi = v_lo + uv * (v_hi - v_lo);
            });
        Self { x, v, w: vec![1.0 / n as f64; n], rng, epoch: 1 }
    }

    /// Particles around a known position; the warm-start and burn-phase
    /// initialisation. Positions are clamped to the track.
    pub fn init_local(
        map: &TrackMap,
        x0: f64,
        spread: f64,
        v0: f64,
        v_spread: f64,
        n: usize,
        seed: u64,
    ) -> Self {
        assert!(n >= 1, "particle count must be >= 1");
        assert!(spread >= 0.0, "spread must be >= 0");
        let rng = StreamRng::new(seed);
        let len = map.length();
        let mut x = vec![0.0; n];
        let mut v = vec![0.0; n];
        x.par_iter_mut()
            .zip(v.par_iter_mut())
            .enumerate()
            .for_each(|(i, (xi, vi))| {
                let (ux, z) = rng.uniform_and_normal(i as u64, 0);
                *xi = (x0 - spread + ux * 2.0 * spread).clamp(0.0, len);
                *vi = v0 + v_spread * z;
            });
        Self { x, v, w: vec![1.0 / n as f64; n], rng, epoch: 1 }
    }

    pub fn n_particles(&self) -> usize {
        self.x.len()
    }

    pub fn positions(&self) -> &[f64] {
        &self.x
    }

    pub fn velocities(&self) -> &[f64] {
        &self.v
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    /// Constant-velocity propagation with additive noise drawn through the
    /// Cholesky factor of Q. Weights are untouched.
    pub fn propagate(&mut self, cfg: &PfConfig) {
        let dt = cfg.dt;
        let q = cfg.q;
        // Q = L L^T with L = [[l11, 0], [l21, l22]].
        let l11 = (q * dt * dt * dt / 3.0).sqrt();
        let l21 = q * dt * dt * 0.5 / l11;
        let l22 = (q * dt - l21 * l21).max(0.0).sqrt();
        let rng = self.rng;
        let epoch = self.epoch;
        self.x
            .par_iter_mut()
            .zip(self.v.par_iter_mut())
            .enumerate()
            .for_each(|(i, (xi, vi))| {
                let (z1, z2) = rng.normals2(i as u64, epoch);
                let x_new = *xi + dt * *vi + l11 * z1;
                let v_new = *vi + l21 * z1 + l22 * z2;
                *xi = x_new;
                *vi = v_new;
            });
        self.epoch += 1;
    }

    /// Multiplies each weight by the kernel similarity between the map
    /// field at the particle and the measurement, then renormalises.
    /// Off-track particles receive factor zero.
    pub fn reweight(&mut self, map: &TrackMap, z: &FieldSample, cfg: &PfConfig) -> Result<(), PfError> {
        let kernel = cfg.kernel;
        let mut factors = vec![0.0f64; self.x.len()];
        factors
            .par_iter_mut()
            .zip(self.x.par_iter())
            .for_each(|(f, &xi)| {
                *f = match map.lookup_field(xi) {
                    Some(field) => kernel.weight(&field, z),
                    None => 0.0,
                };
            });
        self.apply_factors(&factors)
    }

    /// Multiplies weights by externally computed likelihood factors and
    /// renormalises; the core of [`FilterState::reweight`], exposed for
    /// custom measurement models.
    pub fn apply_factors(&mut self, factors: &[f64]) -> Result<(), PfError> {
        debug_assert_eq!(factors.len(), self.w.len());
        for (wi, f) in self.w.iter_mut().zip(factors) {
            *wi *= f;
        }
        let sum: f64 = self.w.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(PfError::TotalCollapse);
        }
        let inv = 1.0 / sum;
        for wi in &mut self.w {
            *wi *= inv;
        }
        Ok(())
    }

    /// `1 / sum(w^2)`; drops towards 1 as the ensemble degenerates.
    pub fn effective_sample_size(&self) -> f64 {
        let sum_sq: f64 = self.w.iter().map(|w| w * w).sum();
        1.0 / sum_sq
    }

    /// Low-variance systematic resampling: one uniform offset strides the
    /// cumulative weights, weights reset to 1/N.
    pub fn resample_systematic(&mut self) {
        let n = self.x.len();
        let u0 = self.rng.uniform(CONTROL_STREAM, self.epoch) / n as f64;
        self.epoch += 1;
        let mut new_x = Vec::with_capacity(n);
        let mut new_v = Vec::with_capacity(n);
        let mut cum = self.w[0];
        let mut i = 0usize;
        for j in 0..n {
            let target = u0 + j as f64 / n as f64;
            while cum < target && i + 1 < n {
                i += 1;
                cum += self.w[i];
            }
            new_x.push(self.x[i]);
            new_v.push(self.v[i]);
        }
        self.x = new_x;
        self.v = new_v;
        self.w.fill(1.0 / n as f64);
    }

    /// Weighted mean and variance of the ensemble.
    pub fn estimate(&self) -> StateEstimate {
        let mut x_hat = 0.0;
        let mut v_hat = 0.0;
        for ((&xi, &vi), &wi) in self.x.iter().zip(&self.v).zip(&self.w) {
            x_hat += wi * xi;
            v_hat += wi * vi;
        }
        let mut var_x = 0.0;
        for (&xi, &wi) in self.x.iter().zip(&self.w) {
            let d = xi - x_hat;
            var_x += wi * d * d;
        }
        StateEstimate { x_hat, v_hat, var_x, ess: self.effective_sample_size() }
    }

    /// One full update: propagate, reweight against the aggregated
    /// measurement, resample if the ESS fell below the threshold, estimate.
    pub fn step(
        &mut self,
        map: &TrackMap,
        z: &FieldSample,
        cfg: &PfConfig,
    ) -> Result<StateEstimate, PfError> {
        self.propagate(cfg);
        self.reweight(map, z, cfg)?;
        if self.effective_sample_size() < cfg.ess_frac * self.x.len() as f64 {
            self.resample_systematic();
        }
        Ok(self.estimate())
    }
}
