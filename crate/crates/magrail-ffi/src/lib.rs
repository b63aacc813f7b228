//! C ABI for the magrail localisation engine.
//!
//! Handles are opaque pointers owned by Rust; every constructor has a
//! matching `_free`. Functions report a [`MagrailStatus`]; on failure the
//! thread-local message from [`magrail_last_error_message`] carries the
//! details. Pointers returned for strings stay valid until the next
//! failing call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;

use magrail::hybrid::{localise, save_estimates, save_events, HybridConfig};
use magrail::pf::{FilterState, Kernel, PfConfig, PfError};
use magrail::signal::load_signal;
use magrail::track::{haversine, load_map, GeoPoint, TrackMap};

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(msg).unwrap_or_default();
    });
}

/// Outcome of a call. Anything but `Ok` leaves a message readable through
/// `magrail_last_error_message`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MagrailStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Domain = 5,
    OutOfBounds = 6,
    Collapse = 7,
    Internal = 8,
}

/// Message describing the most recent failure on this thread; empty string
/// when no failure occurred yet. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn magrail_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Opaque pre-recorded magnetic map handle.
pub struct MagrailMap {
    inner: TrackMap,
}

/// Opaque particle filter handle.
pub struct MagrailPf {
    inner: FilterState,
}

/// Weighting kernel selector for `MagrailPfConfig`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MagrailKernel {
    /// 1 / (1 + |a - b|); the recommended heavy-tailed kernel.
    Modified = 0,
    /// exp(-|a - b|^2 / (2 sigma^2)) with `gauss_sigma`.
    Gaussian = 1,
}

/// Particle filter parameters; obtain defaults from
/// `magrail_pf_config_default` and override fields as needed.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MagrailPfConfig {
    pub q: f64,
    pub dt: f64,
    pub ess_frac: f64,
    pub var_threshold: f64,
    pub kernel: MagrailKernel,
    pub gauss_sigma: f64,
}

/// Weighted ensemble summary returned by step/estimate calls.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MagrailEstimate {
    pub x_hat: f64,
    pub v_hat: f64,
    pub var_x: f64,
    pub ess: f64,
}

fn to_pf_config(cfg: &MagrailPfConfig) -> PfConfig {
    PfConfig {
        q: cfg.q,
        kernel: match cfg.kernel {
            MagrailKernel::Modified => Kernel::Modified,
            MagrailKernel::Gaussian => Kernel::Gaussian { sigma: cfg.gauss_sigma },
        },
        dt: cfg.dt,
        ess_frac: cfg.ess_frac,
        var_threshold: cfg.var_threshold,
    }
}

unsafe fn path_from_c(ptr: *const c_char) -> Result<PathBuf, MagrailStatus> {
    if ptr.is_null() {
        set_error("null path");
        return Err(MagrailStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(MagrailStatus::InvalidUtf8)
        }
    }
}

/// Loads a map CSV (`s_m,lat_deg,lon_deg,bx,by,bz`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must point to writable
/// storage for one pointer. On success `*out` owns the map and must be
/// released with `magrail_map_free`.
#[no_mangle]
pub unsafe extern "C" fn magrail_map_load(
    path: *const c_char,
    out: *mut *mut MagrailMap,
) -> MagrailStatus {
    if out.is_null() {
        set_error("null output pointer");
        return MagrailStatus::NullArgument;
    }
    let path = match path_from_c(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match load_map(&path) {
        Ok(map) => {
            *out = Box::into_raw(Box::new(MagrailMap { inner: map }));
            MagrailStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            match e {
                magrail::track::TrackError::Io(_) => MagrailStatus::Io,
                magrail::track::TrackError::Parse { .. }
                | magrail::track::TrackError::Spacing { .. } => MagrailStatus::Parse,
                _ => MagrailStatus::Domain,
            }
        }
    }
}

/// # Safety
/// `map` must be a pointer from `magrail_map_load`, not freed before.
#[no_mangle]
pub unsafe extern "C" fn magrail_map_free(map: *mut MagrailMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Total arclength in meters, or NaN for a null handle.
///
/// # Safety
/// `map` must be a live map handle or null.
#[no_mangle]
pub unsafe extern "C" fn magrail_map_length(map: *const MagrailMap) -> f64 {
    map.as_ref().map_or(f64::NAN, |m| m.inner.length())
}

/// Spatial sampling step in meters, or NaN for a null handle.
///
/// # Safety
/// `map` must be a live map handle or null.
#[no_mangle]
pub unsafe extern "C" fn magrail_map_dx(map: *const MagrailMap) -> f64 {
    map.as_ref().map_or(f64::NAN, |m| m.inner.dx())
}

/// Number of map samples, or 0 for a null handle.
///
/// # Safety
/// `map` must be a live map handle or null.
#[no_mangle]
pub unsafe extern "C" fn magrail_map_sample_count(map: *const MagrailMap) -> u64 {
    map.as_ref().map_or(0, |m| m.inner.len() as u64)
}

/// Interpolated field at arclength `s`, written into `out_bxyz[0..3]`.
/// Returns `OutOfBounds` (without touching `out_bxyz`) off the track.
///
/// # Safety
/// `map` must be a live map handle; `out_bxyz` must point to three f64.
#[no_mangle]
pub unsafe extern "C" fn magrail_map_lookup_field(
    map: *const MagrailMap,
    s: f64,
    out_bxyz: *mut f64,
) -> MagrailStatus {
    let Some(map) = map.as_ref() else {
        set_error("null map handle");
        return MagrailStatus::NullArgument;
    };
    if out_bxyz.is_null() {
        set_error("null output pointer");
        return MagrailStatus::NullArgument;
    }
    match map.inner.lookup_field(s) {
        Some(b) => {
            std::ptr::copy_nonoverlapping(b.as_ptr(), out_bxyz, 3);
            MagrailStatus::Ok
        }
        None => {
            set_error(format!("arclength {s} outside [0, {}]", map.inner.length()));
            MagrailStatus::OutOfBounds
        }
    }
}

/// Geographic position at arclength `s`.
///
/// # Safety
/// `map` must be a live map handle; `out_lat`/`out_lon` must be writable.
#[no_mangle]
pub unsafe extern "C" fn magrail_map_to_geo(
    map: *const MagrailMap,
    s: f64,
    out_lat: *mut f64,
    out_lon: *mut f64,
) -> MagrailStatus {
    let Some(map) = map.as_ref() else {
        set_error("null map handle");
        return MagrailStatus::NullArgument;
    };
    if out_lat.is_null() || out_lon.is_null() {
        set_error("null output pointer");
        return MagrailStatus::NullArgument;
    }
    match map.inner.arclength_to_geo(s) {
        Ok(geo) => {
            *out_lat = geo.lat;
            *out_lon = geo.lon;
            MagrailStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            MagrailStatus::OutOfBounds
        }
    }
}

/// Great-circle distance in meters between two lat/lon pairs (degrees);
/// NaN when a coordinate is out of range.
#[no_mangle]
pub extern "C" fn magrail_haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    match (GeoPoint::new(lat1, lon1), GeoPoint::new(lat2, lon2)) {
        (Ok(a), Ok(b)) => haversine(a, b),
        _ => f64::NAN,
    }
}

#[no_mangle]
pub extern "C" fn magrail_pf_config_default() -> MagrailPfConfig {
    let cfg = PfConfig::default();
    MagrailPfConfig {
        q: cfg.q,
        dt: cfg.dt,
        ess_frac: cfg.ess_frac,
        var_threshold: cfg.var_threshold,
        kernel: MagrailKernel::Modified,
        gauss_sigma: 10.0,
    }
}

/// Cold-start ensemble: positions uniform over the track, velocities
/// uniform over `[v_min, v_max]`.
///
/// # Safety
/// `map` must be a live map handle; `out` must be writable. On success
/// `*out` must be released with `magrail_pf_free`.
#[no_mangle]
pub unsafe extern "C" fn magrail_pf_init_uniform(
    map: *const MagrailMap,
    n_particles: u64,
    v_min: f64,
    v_max: f64,
    seed: u64,
    out: *mut *mut MagrailPf,
) -> MagrailStatus {
    let Some(map) = map.as_ref() else {
        set_error("null map handle");
        return MagrailStatus::NullArgument;
    };
    if out.is_null() {
        set_error("null output pointer");
        return MagrailStatus::NullArgument;
    }
    if n_particles == 0 || !(v_min <= v_max) {
        set_error("need n_particles >= 1 and v_min <= v_max");
        return MagrailStatus::Domain;
    }
    let state = FilterState::init_uniform(&map.inner, n_particles as usize, (v_min, v_max), seed);
    *out = Box::into_raw(Box::new(MagrailPf { inner: state }));
    MagrailStatus::Ok
}

/// Warm-start ensemble around a known position.
///
/// # Safety
/// Same contracts as `magrail_pf_init_uniform`.
#[no_mangle]
pub unsafe extern "C" fn magrail_pf_init_local(
    map: *const MagrailMap,
    x0: f64,
    spread: f64,
    v0: f64,
    v_spread: f64,
    n_particles: u64,
    seed: u64,
    out: *mut *mut MagrailPf,
) -> MagrailStatus {
    let Some(map) = map.as_ref() else {
        set_error("null map handle");
        return MagrailStatus::NullArgument;
    };
    if out.is_null() {
        set_error("null output pointer");
        return MagrailStatus::NullArgument;
    }
    if n_particles == 0 || !(spread >= 0.0) || !(v_spread >= 0.0) {
        set_error("need n_particles >= 1 and non-negative spreads");
        return MagrailStatus::Domain;
    }
    let state = FilterState::init_local(
        &map.inner,
        x0,
        spread,
        v0,
        v_spread,
        n_particles as usize,
        seed,
    );
    *out = Box::into_raw(Box::new(MagrailPf { inner: state }));
    MagrailStatus::Ok
}

/// # Safety
/// `pf` must be a pointer from an init call, not freed before.
#[no_mangle]
pub unsafe extern "C" fn magrail_pf_free(pf: *mut MagrailPf) {
    if !pf.is_null() {
        drop(Box::from_raw(pf));
    }
}

/// One filter update against the aggregated measurement `z_bxyz[0..3]`.
/// `Collapse` means every particle lost support; the filter is then
/// unusable and should be re-initialised.
///
/// # Safety
/// `pf` and `map` must be live handles; `z_bxyz` points to three f64;
/// `cfg` to a valid config; `out_estimate` (optional) to writable storage.
#[no_mangle]
pub unsafe extern "C" fn magrail_pf_step(
    pf: *mut MagrailPf,
    map: *const MagrailMap,
    z_bxyz: *const f64,
    cfg: *const MagrailPfConfig,
    out_estimate: *mut MagrailEstimate,
) -> MagrailStatus {
    let Some(pf) = pf.as_mut() else {
        set_error("null filter handle");
        return MagrailStatus::NullArgument;
    };
    let Some(map) = map.as_ref() else {
        set_error("null map handle");
        return MagrailStatus::NullArgument;
    };
    if z_bxyz.is_null() || cfg.is_null() {
        set_error("null measurement or config");
        return MagrailStatus::NullArgument;
    }
    let z = [*z_bxyz, *z_bxyz.add(1), *z_bxyz.add(2)];
    let rust_cfg = to_pf_config(&*cfg);
    if let Err(e) = rust_cfg.validate() {
        set_error(e.to_string());
        return MagrailStatus::Domain;
    }
    match pf.inner.step(&map.inner, &z, &rust_cfg) {
        Ok(est) => {
            if !out_estimate.is_null() {
                *out_estimate = MagrailEstimate {
                    x_hat: est.x_hat,
                    v_hat: est.v_hat,
                    var_x: est.var_x,
                    ess: est.ess,
                };
            }
            MagrailStatus::Ok
        }
        Err(PfError::TotalCollapse) => {
            set_error("total weight collapse");
            MagrailStatus::Collapse
        }
        Err(e) => {
            set_error(e.to_string());
            MagrailStatus::Domain
        }
    }
}

/// Current weighted estimate without advancing the filter.
///
/// # Safety
/// `pf` must be a live filter handle; `out_estimate` must be writable.
#[no_mangle]
pub unsafe extern "C" fn magrail_pf_estimate(
    pf: *const MagrailPf,
    out_estimate: *mut MagrailEstimate,
) -> MagrailStatus {
    let Some(pf) = pf.as_ref() else {
        set_error("null filter handle");
        return MagrailStatus::NullArgument;
    };
    if out_estimate.is_null() {
        set_error("null output pointer");
        return MagrailStatus::NullArgument;
    }
    let est = pf.inner.estimate();
    *out_estimate = MagrailEstimate {
        x_hat: est.x_hat,
        v_hat: est.v_hat,
        var_x: est.var_x,
        ess: est.ess,
    };
    MagrailStatus::Ok
}

/// Full cold-start replay: runs the alignment-initialised pipeline over a
/// signal CSV (which must carry a velocity channel) and writes the
/// estimate stream and event log CSVs.
///
/// # Safety
/// All paths must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn magrail_hybrid_localise_files(
    map_path: *const c_char,
    signal_path: *const c_char,
    estimates_out: *const c_char,
    events_out: *const c_char,
    seed: u64,
) -> MagrailStatus {
    let (map_path, signal_path, estimates_out, events_out) = match (
        path_from_c(map_path),
        path_from_c(signal_path),
        path_from_c(estimates_out),
        path_from_c(events_out),
    ) {
        (Ok(a), Ok(b), Ok(c), Ok(d)) => (a, b, c, d),
        (Err(s), ..) | (_, Err(s), ..) | (_, _, Err(s), _) | (_, _, _, Err(s)) => return s,
    };
    let map = match load_map(&map_path) {
        Ok(m) => m,
        Err(e) => {
            set_error(e.to_string());
            return MagrailStatus::Parse;
        }
    };
    let sig = match load_signal(&signal_path) {
        Ok(s) => s,
        Err(e) => {
            set_error(e.to_string());
            return MagrailStatus::Parse;
        }
    };
    let cfg = HybridConfig { seed, ..HybridConfig::default() };
    let out = match localise(&map, &sig, &cfg) {
        Ok(o) => o,
        Err(e) => {
            set_error(e.to_string());
            return MagrailStatus::Domain;
        }
    };
    if let Err(e) = save_estimates(&out.estimates, &map, &estimates_out) {
        set_error(e.to_string());
        return MagrailStatus::Io;
    }
    if let Err(e) = save_events(&out.events, &events_out) {
        set_error(e.to_string());
        return MagrailStatus::Io;
    }
    MagrailStatus::Ok
}
