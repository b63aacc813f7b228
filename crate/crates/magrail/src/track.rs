//! Track map data model, geodesy, and interpolated magnetic lookup.
//!
//! A [`TrackMap`] is the pre-recorded magnetic fingerprint of one track: a
//! uniformly arclength-sampled polyline carrying geographic coordinates and
//! a 3-axis field sample per point. It is immutable after load and safe to
//! share across workers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::vec3;
use crate::FieldSample;

/// Mean Earth radius in meters, used for all great-circle distances.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Relative tolerance on the uniform-spacing check of consecutive arclengths.
const SPACING_REL_TOL: f64 = 1e-9;

pub const MAP_CSV_HEADER: &str = "s_m,lat_deg,lon_deg,bx,by,bz";

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("spacing error at row {row}: {msg}")]
    Spacing { row: usize, msg: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("arclength {s} outside track [0, {length}]")]
    OutOfTrack { s: f64, length: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, TrackError> {
        if !(-90.0..=90.0).contains(&lat) || !lat.is_finite() {
            return Err(TrackError::Domain(format!("latitude {lat} out of [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&lon) || !lon.is_finite() {
            return Err(TrackError::Domain(format!("longitude {lon} out of [-180, 180]")));
        }
        Ok(Self { lat, lon })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MapSample {
    /// Arclength along the track, meters.
    pub s: f64,
    pub lat: f64,
    pub lon: f64,
    pub b: FieldSample,
}

/// The pre-recorded magnetic map: at least two samples, strictly increasing
/// in arclength with uniform spacing `dx`, starting at s = 0.
#[derive(Debug, Clone)]
pub struct TrackMap {
    samples: Vec<MapSample>,
    dx: f64,
    length: f64,
}

impl TrackMap {
    pub fn new(samples: Vec<MapSample>) -> Result<Self, TrackError> {
        if samples.len() < 2 {
            return Err(TrackError::Domain(format!(
                "map needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        for (i, smp) in samples.iter().enumerate() {
            GeoPoint::new(smp.lat, smp.lon)
                .map_err(|e| TrackError::Parse { row: i + 1, msg: e.to_string() })?;
            if !smp.s.is_finite() || smp.b.iter().any(|c| !c.is_finite()) {
                return Err(TrackError::Parse {
                    row: i + 1,
                    msg: "non-finite value".into(),
                });
            }
        }
        let n = samples.len();
        let dx = (samples[n - 1].s - samples[0].s) / (n - 1) as f64;
        if !(dx > 0.0) {
            return Err(TrackError::Spacing {
                row: n,
                msg: format!("arclength not increasing (dx = {dx})"),
            });
        }
        if samples[0].s.abs() > 1e-6 * dx {
            return Err(TrackError::Spacing {
                row: 1,
                msg: format!("map must start at s = 0, got {}", samples[0].s),
            });
        }
        for i in 1..n {
            let delta = samples[i].s - samples[i - 1].s;
            if (delta - dx).abs() > SPACING_REL_TOL * dx {
                return Err(TrackError::Spacing {
                    row: i + 1,
                    msg: format!("delta {delta} differs from dx {dx}"),
                });
            }
        }
        let length = (n - 1) as f64 * dx;
        Ok(Self { samples, dx, length })
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Total arclength, meters; equals `(count - 1) * dx`.
    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false // at least 2 samples by construction
    }

    pub fn samples(&self) -> &[MapSample] {
        &self.samples
    }

    /// Index of the sample bracketing `s` from below plus interpolation
    /// fraction; `None` outside [0, length].
    fn bracket(&self, s: f64) -> Option<(usize, f64)> {
        if !s.is_finite() || s < 0.0 || s > self.length {
            return None;
        }
        let pos = s / self.dx;
        let mut idx = pos.floor() as usize;
        if idx >= self.samples.len() - 1 {
            idx = self.samples.len() - 2; // s == length
        }
        Some((idx, pos - idx as f64))
    }

    /// Piecewise-linear field interpolation. Out-of-range arclengths return
    /// `None` instead of extrapolating: a particle off the track has no
    /// magnetic evidence.
    pub fn lookup_field(&self, s: f64) -> Option<FieldSample> {
        let (idx, frac) = self.bracket(s)?;
        if frac == 0.0 {
            return Some(self.samples[idx].b);
        }
        Some(vec3::lerp(&self.samples[idx].b, &self.samples[idx + 1].b, frac))
    }

    /// Linear interpolation of the geographic coordinates at arclength `s`.
    pub fn arclength_to_geo(&self, s: f64) -> Result<GeoPoint, TrackError> {
        let (idx, frac) = self.bracket(s).ok_or(TrackError::OutOfTrack {
            s,
            length: self.length,
        })?;
        let a = &self.samples[idx];
        if frac == 0.0 {
            return Ok(GeoPoint { lat: a.lat, lon: a.lon });
        }
        let b = &self.samples[idx + 1];
        Ok(GeoPoint {
            lat: a.lat + frac * (b.lat - a.lat),
            lon: a.lon + frac * (b.lon - a.lon),
        })
    }

    /// The field sequence viewed as a spatial signal starting at s = 0,
    /// ready for alignment against spacified live windows.
    pub fn to_space_signal(&self) -> crate::spacify::SpaceSignal {
        crate::spacify::SpaceSignal {
            dx: self.dx,
            x0: 0.0,
            b: self.samples.iter().map(|m| m.b).collect(),
        }
    }
}

/// Great-circle distance in meters between two points on the mean sphere.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let sin_dlat = (dlat * 0.5).sin();
    let sin_dlon = (dlon * 0.5).sin();
    let h = sin_dlat * sin_dlat + lat1.cos() * lat2.cos() * sin_dlon * sin_dlon;
    2.0 * EARTH_RADIUS_M * h.sqrt().atan2((1.0 - h).sqrt())
}

/// Formats with 9 significant digits, the precision of all map/signal files.
pub(crate) fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            let t = s.trim_end_matches('0').trim_end_matches('.');
            t.to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}

/// Loads a map CSV (`s_m,lat_deg,lon_deg,bx,by,bz`) and re-validates every
/// invariant, so hand-edited files fail loudly.
pub fn load_map(path: impl AsRef<Path>) -> Result<TrackMap, TrackError> {
    let mut reader = csv::Reader::from_path(path.as_ref())
        .map_err(|e| csv_to_track_error(e, 0))?;
    {
        let headers = reader.headers().map_err(|e| csv_to_track_error(e, 0))?;
        let expected: Vec<&str> = MAP_CSV_HEADER.split(',').collect();
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(TrackError::Parse {
                row: 1,
                msg: format!("expected header `{MAP_CSV_HEADER}`, got `{}`", got.join(",")),
            });
        }
    }
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after the header
        let record = record.map_err(|e| csv_to_track_error(e, row))?;
        if record.len() != 6 {
            return Err(TrackError::Parse {
                row,
                msg: format!("expected 6 fields, got {}", record.len()),
            });
        }
        let mut f = [0.0f64; 6];
        for (j, cell) in record.iter().enumerate() {
            f[j] = cell.trim().parse().map_err(|_| TrackError::Parse {
                row,
                msg: format!("bad float `{cell}`"),
            })?;
        }
        samples.push(MapSample {
            s: f[0],
            lat: f[1],
            lon: f[2],
            b: [f[3], f[4], f[5]],
        });
    }
    TrackMap::new(samples)
}

pub fn save_map(map: &TrackMap, path: impl AsRef<Path>) -> Result<(), TrackError> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "{MAP_CSV_HEADER}")?;
    for smp in map.samples() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            fmt_sig9(smp.s),
            fmt_sig9(smp.lat),
            fmt_sig9(smp.lon),
            fmt_sig9(smp.b[0]),
            fmt_sig9(smp.b[1]),
            fmt_sig9(smp.b[2]),
        )?;
    }
    w.flush()?;
    Ok(())
}

fn csv_to_track_error(e: csv::Error, row: usize) -> TrackError {
    if let csv::ErrorKind::Io(_) = e.kind() {
        if row == 0 {
            if let csv::ErrorKind::Io(io) = e.into_kind() {
                return TrackError::Io(io);
            }
            unreachable!()
        }
    }
    TrackError::Parse { row, msg: e.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn straight_map(n: usize, dx: f64) -> TrackMap {
        let samples = (0..n)
            .map(|i| MapSample {
                s: i as f64 * dx,
                lat: 47.0 + i as f64 * 1e-6,
                lon: 8.0 + i as f64 * 1e-6,
                b: [i as f64, 2.0 * i as f64, -(i as f64)],
            })
            .collect();
        TrackMap::new(samples).unwrap()
    }

    #[test]
    fn three_rows_give_expected_dx_and_length() {
        let map = straight_map(3, 0.5);
        assert_eq!(map.dx(), 0.5);
        assert_eq!(map.length(), 1.0);
    }

    #[test]
    fn non_uniform_spacing_rejected() {
        let mut samples = straight_map(3, 0.5).samples().to_vec();
        samples[2].s = 1.1;
        let err = TrackMap::new(samples).unwrap_err();
        assert!(matches!(err, TrackError::Spacing { .. }), "{err}");
    }

    #[test]
    fn synthetic_66km_sample_count() {
        // count = length/dx + 1
        let n = (66_000.0f64 / 0.25) as usize + 1;
        assert_eq!(n, 264_001);
        let map = straight_map(101, 0.25);
        assert_eq!(map.len(), 101);
        assert_relative_eq!(map.length(), 25.0);
    }

    #[test]
    fn lookup_exact_at_grid_points() {
        let map = straight_map(10, 0.5);
        for (i, smp) in map.samples().iter().enumerate() {
            assert_eq!(map.lookup_field(i as f64 * 0.5).unwrap(), smp.b);
        }
    }

    #[test]
    fn lookup_linear_midpoint() {
        let samples = vec![
            MapSample { s: 0.0, lat: 0.0, lon: 0.0, b: [0.0, 0.0, 0.0] },
            MapSample { s: 1.0, lat: 0.0, lon: 0.001, b: [2.0, 4.0, 6.0] },
        ];
        let map = TrackMap::new(samples).unwrap();
        assert_eq!(map.lookup_field(0.5).unwrap(), [1.0, 2.0, 3.0]);
    }

    #[test]
    fn lookup_out_of_bounds_is_none() {
        let map = straight_map(3, 0.5);
        assert_eq!(map.lookup_field(map.length() + 1.0), None);
        assert_eq!(map.lookup_field(-0.01), None);
        assert!(map.lookup_field(map.length()).is_some());
    }

    #[test]
    fn lookup_is_continuous() {
        let map = straight_map(100, 0.25);
        let eps = map.dx() * 1e-6;
        for i in 0..40 {
            let s = 3.0 + i as f64 * 0.51;
            let a = map.lookup_field(s).unwrap();
            let b = map.lookup_field(s + eps).unwrap();
            let gap = crate::vec3::dist(&a, &b);
            assert!(gap < 1e-4, "jump {gap} at s = {s}");
        }
    }

    #[test]
    fn geo_interpolation_and_domain() {
        let map = straight_map(3, 0.5);
        let g0 = map.arclength_to_geo(0.0).unwrap();
        assert_eq!((g0.lat, g0.lon), (47.0, 8.0));
        let mid = map.arclength_to_geo(0.25).unwrap();
        assert_relative_eq!(mid.lat, 47.0 + 0.5e-6, max_relative = 1e-12);
        assert!(map.arclength_to_geo(-1.0).is_err());
    }

    #[test]
    fn haversine_identity_and_equator_degree() {
        let p = GeoPoint::new(12.5, -7.25).unwrap();
        assert_eq!(haversine(p, p), 0.0);
        // One degree of longitude on the equator: R * pi/180.
        let a = GeoPoint::new(0.0, 0.0).unwrap();
        let b = GeoPoint::new(0.0, 1.0).unwrap();
        let oracle = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        assert!((haversine(a, b) - oracle).abs() < 0.1);
        assert!((haversine(a, b) - 111_194.9).abs() < 0.1);
    }

    #[test]
    fn save_load_round_trip() {
        let map = straight_map(50, 0.25);
        let dir = std::env::temp_dir().join("magrail_track_rt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("map.csv");
        save_map(&map, &path).unwrap();
        let back = load_map(&path).unwrap();
        assert_eq!(back.len(), map.len());
        assert_relative_eq!(back.dx(), map.dx(), max_relative = 1e-9);
        for (a, b) in map.samples().iter().zip(back.samples()) {
            assert_relative_eq!(a.s, b.s, max_relative = 1e-8);
            assert_relative_eq!(a.lat, b.lat, max_relative = 1e-8);
            for k in 0..3 {
                assert_relative_eq!(a.b[k], b.b[k], max_relative = 1e-8, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn load_rejects_bad_rows() {
        let dir = std::env::temp_dir().join("magrail_track_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(
            &path,
            "s_m,lat_deg,lon_deg,bx,by,bz\n0,47,8,1,2,3\n0.5,47,8,oops,2,3\n",
        )
        .unwrap();
        let err = load_map(&path).unwrap_err();
        match err {
            TrackError::Parse { row, .. } => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other}"),
        }

        std::fs::write(
            &path,
            "s_m,lat_deg,lon_deg,bx,by,bz\n0,47,8,1,2,3\n0.5,47,8,1,2,3\n1.1,47,8,1,2,3\n",
        )
        .unwrap();
        assert!(matches!(load_map(&path), Err(TrackError::Spacing { .. })));

        std::fs::write(
            &path,
            "s_m,lat_deg,lon_deg,bx,by,bz\n0,95,8,1,2,3\n0.5,95,8,1,2,3\n",
        )
        .unwrap();
        assert!(matches!(load_map(&path), Err(TrackError::Parse { .. })));
    }

    #[test]
    fn fmt_sig9_representative_values() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(0.25), "0.25");
        assert_eq!(fmt_sig9(66000.25), "66000.25");
        assert_eq!(fmt_sig9(-46.1234567891), "-46.1234568");
        assert_eq!(fmt_sig9(1.0e12), "1.00000000e12");
        let v: f64 = 123456.789123;
        let back: f64 = fmt_sig9(v).parse().unwrap();
        assert!((back - v).abs() / v < 1e-8);
    }
}
