//! Flat `key = value` run configuration shared by all CLI commands.
//!
//! A config file is UTF-8 text, one assignment per line, `#` comments.
//! Unknown keys are rejected rather than ignored so a typo cannot silently
//! fall back to a default. CLI `--set key=value` pairs override file
//! values; the effective configuration can be dumped (`--print-config`)
//! and is hashed into each experiment's meta file.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::align::Metric;
use crate::hybrid::HybridConfig;
use crate::pf::{Kernel, PfConfig};
use crate::rng::derive_seed;
use crate::synth::{ProfilePhase, RunSpec, SynthSpec};
use crate::track::GeoPoint;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    // Synthetic map.
    pub length_m: f64,
    pub dx_m: f64,
    pub corr_length_m: f64,
    pub field_scale: f64,
    pub anchor_lat_deg: f64,
    pub anchor_lon_deg: f64,
    pub anchor_bearing_deg: f64,

    // Simulated run.
    pub profile: Vec<ProfilePhase>,
    pub sensor_rate_hz: f64,
    pub noise_sigma: f64,
    pub vel_noise_sigma: f64,
    pub start_m: f64,

    // Particle filter.
    pub n_particles: usize,
    pub q: f64,
    pub kernel: String,
    pub gauss_sigma: f64,
    pub pf_dt_s: f64,
    pub ess_frac: f64,
    pub var_threshold_m2: f64,

    // Warm / cold initialisation.
    pub x0_m: f64,
    pub spread_m: f64,
    pub v0_mps: f64,
    pub v_spread_mps: f64,
    pub v_prior_min_mps: f64,
    pub v_prior_max_mps: f64,

    // Hybrid pipeline.
    pub lookback_m: f64,
    pub burn_updates: usize,
    pub align_metric: String,
    pub v_start_min_mps: f64,
    pub v_min_mps: f64,
    pub coincide_m: f64,

    // Evaluation / cold-start study.
    pub threshold_m: f64,
    pub k_max: usize,
    pub min_length_m: f64,
    pub max_length_m: f64,
    pub length_step_m: f64,
    pub starts: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            length_m: 5_000.0,
            dx_m: 0.25,
            corr_length_m: 5.0,
            field_scale: 30.0,
            anchor_lat_deg: 46.2,
            anchor_lon_deg: 7.0,
            anchor_bearing_deg: 60.0,
            profile: vec![ProfilePhase { duration: 60.0, target: 20.0 }],
            sensor_rate_hz: 2_000.0,
            noise_sigma: 0.6,
            vel_noise_sigma: 0.0,
            start_m: 0.0,
            n_particles: 10_000,
            q: 0.53,
            kernel: "modified".into(),
            gauss_sigma: 10.0,
            pf_dt_s: 0.1,
            ess_frac: 0.5,
            var_threshold_m2: 25.0,
            x0_m: 0.0,
            spread_m: 10.0,
            v0_mps: 20.0,
            v_spread_mps: 1.0,
            v_prior_min_mps: 0.0,
            v_prior_max_mps: 50.0,
            lookback_m: 100.0,
            burn_updates: 100,
            align_metric: "dtw".into(),
            v_start_min_mps: 10.0,
            v_min_mps: 0.5,
            coincide_m: 25.0,
            threshold_m: 25.0,
            k_max: 5,
            min_length_m: 1.0,
            max_length_m: 200.0,
            length_step_m: 1.0,
            starts: 14,
        }
    }
}

fn parse_profile(value: &str) -> Result<Vec<ProfilePhase>, String> {
    let mut phases = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        let (dur, vel) = part
            .split_once(':')
            .ok_or_else(|| format!("phase `{part}` is not `duration:velocity`"))?;
        let duration: f64 = dur.trim().parse().map_err(|_| format!("bad duration `{dur}`"))?;
        let target: f64 = vel.trim().parse().map_err(|_| format!("bad velocity `{vel}`"))?;
        if !(duration > 0.0) {
            return Err(format!("phase duration must be positive, got {duration}"));
        }
        phases.push(ProfilePhase { duration, target });
    }
    if phases.is_empty() {
        return Err("profile has no phases".into());
    }
    Ok(phases)
}

fn profile_to_string(profile: &[ProfilePhase]) -> String {
    profile
        .iter()
        .map(|p| format!("{}:{}", p.duration, p.target))
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        cfg.merge_str(&text)?;
        Ok(cfg)
    }

    pub fn merge_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one key from its textual value; the single source of truth for
    /// the key namespace.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |msg: &str| ConfigError::BadValue { key: key.into(), msg: msg.into() };
        macro_rules! num {
            ($field:expr) => {
                $field = value.parse().map_err(|_| bad("not a number"))?
            };
        }
        match key {
            "seed" => num!(self.seed),
            "length_m" => num!(self.length_m),
            "dx_m" => num!(self.dx_m),
            "corr_length_m" => num!(self.corr_length_m),
            "field_scale" => num!(self.field_scale),
            "anchor_lat_deg" => num!(self.anchor_lat_deg),
            "anchor_lon_deg" => num!(self.anchor_lon_deg),
            "anchor_bearing_deg" => num!(self.anchor_bearing_deg),
            "profile" => self.profile = parse_profile(value).map_err(|m| bad(&m))?,
            "sensor_rate_hz" => num!(self.sensor_rate_hz),
            "noise_sigma" => num!(self.noise_sigma),
            "vel_noise_sigma" => num!(self.vel_noise_sigma),
            "start_m" => num!(self.start_m),
            "n_particles" => num!(self.n_particles),
            "q" => num!(self.q),
            "kernel" => match value {
                "modified" | "gaussian" => self.kernel = value.into(),
                _ => return Err(bad("expected `modified` or `gaussian`")),
            },
            "gauss_sigma" => num!(self.gauss_sigma),
            "pf_dt_s" => num!(self.pf_dt_s),
            "ess_frac" => num!(self.ess_frac),
            "var_threshold_m2" => num!(self.var_threshold_m2),
            "x0_m" => num!(self.x0_m),
            "spread_m" => num!(self.spread_m),
            "v0_mps" => num!(self.v0_mps),
            "v_spread_mps" => num!(self.v_spread_mps),
            "v_prior_min_mps" => num!(self.v_prior_min_mps),
            "v_prior_max_mps" => num!(self.v_prior_max_mps),
            "lookback_m" => num!(self.lookback_m),
            "burn_updates" => num!(self.burn_updates),
            "align_metric" => match value {
                "euclid" | "dtw" => self.align_metric = value.into(),
                _ => return Err(bad("expected `euclid` or `dtw`")),
            },
            "v_start_min_mps" => num!(self.v_start_min_mps),
            "v_min_mps" => num!(self.v_min_mps),
            "coincide_m" => num!(self.coincide_m),
            "threshold_m" => num!(self.threshold_m),
            "k_max" => num!(self.k_max),
            "min_length_m" => num!(self.min_length_m),
            "max_length_m" => num!(self.max_length_m),
            "length_step_m" => num!(self.length_step_m),
            "starts" => num!(self.starts),
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    pub fn apply_overrides<'a>(
        &mut self,
        pairs: impl IntoIterator<Item = &'a str>,
    ) -> Result<(), ConfigError> {
        for pair in pairs {
            let (key, value) = pair.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: 0,
                msg: format!("--set expects key=value, got `{pair}`"),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical dump: stable key order, parseable back via `merge_str`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("length_m", self.length_m.to_string());
        kv("dx_m", self.dx_m.to_string());
        kv("corr_length_m", self.corr_length_m.to_string());
        kv("field_scale", self.field_scale.to_string());
        kv("anchor_lat_deg", self.anchor_lat_deg.to_string());
        kv("anchor_lon_deg", self.anchor_lon_deg.to_string());
        kv("anchor_bearing_deg", self.anchor_bearing_deg.to_string());
        kv("profile", profile_to_string(&self.profile));
        kv("sensor_rate_hz", self.sensor_rate_hz.to_string());
        kv("noise_sigma", self.noise_sigma.to_string());
        kv("vel_noise_sigma", self.vel_noise_sigma.to_string());
        kv("start_m", self.start_m.to_string());
        kv("n_particles", self.n_particles.to_string());
        kv("q", self.q.to_string());
        kv("kernel", self.kernel.clone());
        kv("gauss_sigma", self.gauss_sigma.to_string());
        kv("pf_dt_s", self.pf_dt_s.to_string());
        kv("ess_frac", self.ess_frac.to_string());
        kv("var_threshold_m2", self.var_threshold_m2.to_string());
        kv("x0_m", self.x0_m.to_string());
        kv("spread_m", self.spread_m.to_string());
        kv("v0_mps", self.v0_mps.to_string());
        kv("v_spread_mps", self.v_spread_mps.to_string());
        kv("v_prior_min_mps", self.v_prior_min_mps.to_string());
        kv("v_prior_max_mps", self.v_prior_max_mps.to_string());
        kv("lookback_m", self.lookback_m.to_string());
        kv("burn_updates", self.burn_updates.to_string());
        kv("align_metric", self.align_metric.clone());
        kv("v_start_min_mps", self.v_start_min_mps.to_string());
        kv("v_min_mps", self.v_min_mps.to_string());
        kv("coincide_m", self.coincide_m.to_string());
        kv("threshold_m", self.threshold_m.to_string());
        kv("k_max", self.k_max.to_string());
        kv("min_length_m", self.min_length_m.to_string());
        kv("max_length_m", self.max_length_m.to_string());
        kv("length_step_m", self.length_step_m.to_string());
        kv("starts", self.starts.to_string());
        s
    }

    pub fn sha256_hex(&self) -> String {
        use sha2::Digest;
        let digest = sha2::Sha256::digest(self.to_text().as_bytes());
        digest.iter().fold(String::new(), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        })
    }

    /// Checks every value against the type invariants of the modules it
    /// feeds, without running anything.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.synth_spec()
            .map(|_| ())
            .and_then(|_| self.run_spec().map(|_| ()))?;
        self.pf_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.hybrid_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.v_prior_min_mps > self.v_prior_max_mps {
            return Err(ConfigError::Invalid("v_prior_min_mps > v_prior_max_mps".into()));
        }
        if !(self.spread_m >= 0.0) || !(self.v_spread_mps >= 0.0) {
            return Err(ConfigError::Invalid("spreads must be >= 0".into()));
        }
        if !(self.threshold_m > 0.0) {
            return Err(ConfigError::Invalid("threshold_m must be positive".into()));
        }
        if self.k_max < 1 || self.starts < 1 {
            return Err(ConfigError::Invalid("k_max and starts must be >= 1".into()));
        }
        if !(self.min_length_m > 0.0)
            || self.max_length_m < self.min_length_m
            || !(self.length_step_m > 0.0)
        {
            return Err(ConfigError::Invalid("bad length sweep bounds".into()));
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> Result<SynthSpec, ConfigError> {
        let anchor = GeoPoint::new(self.anchor_lat_deg, self.anchor_lon_deg)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(SynthSpec {
            length: self.length_m,
            dx: self.dx_m,
            seed: derive_seed(self.seed, 1),
            field_scale: self.field_scale,
            corr_length: self.corr_length_m,
            anchor,
            bearing_deg: self.anchor_bearing_deg,
        })
    }

    pub fn run_spec(&self) -> Result<RunSpec, ConfigError> {
        if !(self.sensor_rate_hz > 0.0) {
            return Err(ConfigError::Invalid("sensor_rate_hz must be positive".into()));
        }
        Ok(RunSpec {
            profile: self.profile.clone(),
            sensor_rate: self.sensor_rate_hz,
            noise_sigma: self.noise_sigma,
            vel_noise_sigma: self.vel_noise_sigma,
            start_s: self.start_m,
            seed: derive_seed(self.seed, 2),
        })
    }

    pub fn kernel(&self) -> Kernel {
        match self.kernel.as_str() {
            "gaussian" => Kernel::Gaussian { sigma: self.gauss_sigma },
            _ => Kernel::Modified,
        }
    }

    pub fn metric(&self) -> Metric {
        match self.align_metric.as_str() {
            "euclid" => Metric::Euclid,
            _ => Metric::Dtw,
        }
    }

    pub fn pf_config(&self) -> PfConfig {
        PfConfig {
            q: self.q,
            kernel: self.kernel(),
            dt: self.pf_dt_s,
            ess_frac: self.ess_frac,
            var_threshold: self.var_threshold_m2,
        }
    }

    pub fn hybrid_config(&self) -> HybridConfig {
        HybridConfig {
            lookback_m: self.lookback_m,
            burn_updates: self.burn_updates,
            var_threshold: self.var_threshold_m2,
            pf: self.pf_config(),
            n_particles: self.n_particles,
            align_metric: self.metric(),
            v_start_min: self.v_start_min_mps,
            v_min: self.v_min_mps,
            coincide_m: self.coincide_m,
            seed: derive_seed(self.seed, 3),
        }
    }

    /// Seed for warm/cold particle filter initialisation.
    pub fn filter_seed(&self) -> u64 {
        derive_seed(self.seed, 4)
    }
}
