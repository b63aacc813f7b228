//! Sequence-alignment core: same-length distances lifted to sliding-window
//! subsequence search over the map.
//!
//! Scores are accumulated squared per-sample costs with a final square
//! root, so the DTW of two equal-length sequences never exceeds their
//! Euclidean distance (the diagonal is one admissible warping path).
//!
//! The subsequence search evaluates every window start independently; the
//! banded DTW recurrence keeps the total cost at O(n * m * band), never
//! O(n^2). Window evaluations are batched four wide so the inner recurrence
//! vectorises, which matters: a cold start scans a quarter-million windows.

use rayon::prelude::*;
use thiserror::Error;

use crate::spacify::SpaceSignal;
use crate::vec3::sq_dist_components;
use crate::FieldSample;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("band {band} infeasible for lengths {m} and {n} (need >= {})", *m as i64 - *n as i64)]
    InfeasibleBand { band: usize, m: usize, n: usize },
    #[error("query ({m} samples) longer than reference ({n} samples)")]
    QueryLongerThanReference { n: usize, m: usize },
    #[error("invalid search input: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Euclid,
    Dtw,
}

/// One alignment hit: a window start on the reference with its distance.
#[derive(Debug, Clone, Copy)]
pub struct MatchCandidate {
    /// Window start as a sample index into the reference.
    pub index: usize,
    /// Window start arclength, meters.
    pub s: f64,
    /// Distance between the reference window and the query; lower is better.
    pub score: f64,
    /// 1-based rank by ascending score.
    pub rank: usize,
}

/// Band radius used for windowed DTW when none is requested explicitly:
/// 10 % of the query length.
pub fn default_dtw_band(m: usize) -> usize {
    (m / 10).max(1)
}

/// Branchless minimum; compiles to a single `minpd`-style instruction where
/// `f64::min`'s NaN handling would force a three-op sequence. Inputs here
/// are finite costs or the +inf band guards, never NaN.
#[inline(always)]
fn fmin(a: f64, b: f64) -> f64 {
    if a < b {
        a
    } else {
        b
    }
}

/// Euclidean distance between equal-length field sequences.
pub fn euclid_dist(a: &[FieldSample], b: &[FieldSample]) -> Result<f64, AlignError> {
    if a.len() != b.len() {
        return Err(AlignError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(AlignError::Invalid("empty sequences".into()));
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += sq_dist_components(x[0], x[1], x[2], y[0], y[1], y[2]);
    }
    Ok(acc.sqrt())
}

/// Dynamic time warping distance with steps (1,0), (0,1), (1,1), matched
/// endpoints, and an optional Sakoe-Chiba band `|i - j| <= band`.
pub fn dtw_dist(a: &[FieldSample], b: &[FieldSample], band: Option<usize>) -> Result<f64, AlignError> {
    let m = a.len();
    let n = b.len();
    if m == 0 || n == 0 {
        return Err(AlignError::Invalid("empty sequences".into()));
    }
    if let Some(band) = band {
        if band < m.abs_diff(n) {
            return Err(AlignError::InfeasibleBand { band, m, n });
        }
    }
    let band = band.unwrap_or(m.max(n));

    let mut prev = vec![f64::INFINITY; n];
    let mut cur = vec![f64::INFINITY; n];

    for i in 0..m {
        let jlo = i.saturating_sub(band);
        let jhi = (i + band).min(n - 1);
        if jlo > 0 {
            cur[jlo - 1] = f64::INFINITY;
        }
        for j in jlo..=jhi {
            let cost = sq_dist_components(a[i][0], a[i][1], a[i][2], b[j][0], b[j][1], b[j][2]);
            let best = if i == 0 {
                if j == 0 {
                    0.0
                } else {
                    cur[j - 1]
                }
            } else if j == 0 {
                prev[0]
            } else {
                fmin(fmin(prev[j], prev[j - 1]), cur[j - 1])
            };
            cur[j] = cost + best;
        }
        if jhi + 1 < n {
            cur[jhi + 1] = f64::INFINITY;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[n - 1].sqrt())
}

/// Structure-of-arrays layout of a field sequence; the window batches read
/// consecutive reference samples as contiguous lanes.
struct Soa {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
}

impl Soa {
    fn from_samples(b: &[FieldSample]) -> Self {
        Self {
            x: b.iter().map(|s| s[0]).collect(),
            y: b.iter().map(|s| s[1]).collect(),
            z: b.iter().map(|s| s[2]).collect(),
        }
    }

    fn len(&self) -> usize {
        self.x.len()
    }
}

/// Banded DTW over `L` consecutive windows at once. Produces scores that are
/// bit-identical to `dtw_dist(window, query, Some(band))` per window: the
/// recurrence, the cost expression, and the accumulation order all match.
///
/// Per-cell costs are precomputed densely for the row (no dependencies, so
/// the loop vectorises), then the recurrence scan carries only the min/add
/// chain; its serial latency is amortised over the `L` lanes.
fn dtw_window_batch<const L: usize>(
    reference: &Soa,
    query: &Soa,
    band: usize,
    w0: usize,
    prev: &mut [[f64; L]],
    cur: &mut [[f64; L]],
    slab: &mut [f64],
    out: &mut [f64],
) {
    let m = query.len();
    debug_assert_eq!(prev.len(), m);
    debug_assert_eq!(cur.len(), m);
    let stride = 2 * band + L;
    debug_assert!(slab.len() >= m * stride);

    // Cost slab, transposed and banded: slot k of column c holds the
    // squared distance between reference sample `w0 + c - band + k` and
    // query sample c. Each pair is computed once per batch even though the
    // recurrence visits it from up to L different windows.
    for c in 0..m {
        let k_lo = band.saturating_sub(c);
        let r_hi = (c + band).min(m - 1);
        let count = (r_hi + band - c + L) - k_lo; // k_hi + 1 - k_lo
        let p0 = w0 + c + k_lo - band;
        let (qx, qy, qz) = (query.x[c], query.y[c], query.z[c]);
        let dst = &mut slab[c * stride + k_lo..c * stride + k_lo + count];
        let sx = &reference.x[p0..p0 + count];
        let sy = &reference.y[p0..p0 + count];
        let sz = &reference.z[p0..p0 + count];
        for ((d, (&x, &y)), &z) in dst.iter_mut().zip(sx.iter().zip(sy)).zip(sz) {
            *d = sq_dist_components(x, y, z, qx, qy, qz);
        }
    }

    let mut prev = prev;
    let mut cur = cur;

    for r in 0..m {
        let clo = r.saturating_sub(band);
        let chi = (r + band).min(m - 1);
        // Lane cost vector for cell (r, c) sits at column c, slots
        // r - c + band onward; its offset retreats by stride - 1 per column.
        let cost_at = |c: usize| c * stride + (r + band - c);

        if r == 0 {
            // Only the top-row path exists: prefix accumulation.
            let mut acc = [0.0f64; L];
            for (c, cur_c) in cur[..=chi].iter_mut().enumerate() {
                let cost: &[f64; L] = slab[cost_at(c)..cost_at(c) + L].try_into().unwrap();
                for w in 0..L {
                    acc[w] += cost[w];
                    cur_c[w] = acc[w];
                }
            }
        } else {
            // `left` is the previous output column, carried in registers so
            // the recurrence never reloads what it just stored.
            let mut left = [f64::INFINITY; L];
            let c_start = if clo == 0 {
                let cost: &[f64; L] = slab[cost_at(0)..cost_at(0) + L].try_into().unwrap();
                for w in 0..L {
                    left[w] = cost[w] + prev[0][w];
                }
                cur[0] = left;
                1
            } else {
                clo
            };
            let mut idx = cost_at(c_start);
            for ((up_c, diag_c), cur_c) in prev[c_start..=chi]
                .iter()
                .zip(prev[c_start - 1..chi].iter())
                .zip(cur[c_start..=chi].iter_mut())
            {
                let cost: &[f64; L] = slab[idx..idx + L].try_into().unwrap();
                let mut next = [0.0f64; L];
                for w in 0..L {
                    // min of the same three values in any order; grouping
                    // up/diag first keeps the serial chain through `left`
                    // at one min plus one add per column.
                    next[w] = cost[w] + fmin(fmin(up_c[w], diag_c[w]), left[w]);
                }
                *cur_c = next;
                left = next;
                idx += stride - 1;
            }
        }
        if chi + 1 < m {
            cur[chi + 1] = [f64::INFINITY; L];
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    for w in 0..L {
        out[w] = prev[m - 1][w].sqrt();
    }
}

const LANES: usize = 8;

/// Scores every window in `[start, start + out_chunk.len())`.
#[inline(always)]
fn dtw_chunk(reference: &Soa, query: &Soa, band: usize, start: usize, out_chunk: &mut [f64]) {
    let m = query.len();
    let mut prev = vec![[f64::INFINITY; LANES]; m];
    let mut cur = vec![[f64::INFINITY; LANES]; m];
    let mut prev1 = vec![[f64::INFINITY; 1]; m];
    let mut cur1 = vec![[f64::INFINITY; 1]; m];
    let mut slab = vec![0.0f64; m * (2 * band + LANES)];
    let mut w = 0;
    while w + LANES <= out_chunk.len() {
        dtw_window_batch::<LANES>(
            reference,
            query,
            band,
            start + w,
            &mut prev,
            &mut cur,
            &mut slab,
            &mut out_chunk[w..w + LANES],
        );
        w += LANES;
    }
    while w < out_chunk.len() {
        dtw_window_batch::<1>(
            reference,
            query,
            band,
            start + w,
            &mut prev1,
            &mut cur1,
            &mut slab,
            &mut out_chunk[w..w + 1],
        );
        w += 1;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dtw_chunk_avx2(reference: &Soa, query: &Soa, band: usize, start: usize, out: &mut [f64]) {
    dtw_chunk(reference, query, band, start, out);
}

fn have_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

fn dtw_scores(reference: &Soa, query: &Soa, band: usize, scores: &mut [f64]) {
    // Chunks of windows sized so each rayon task amortises its scratch
    // allocation; results are written into disjoint slices, so the output
    // is identical for any worker count. The AVX2 variant computes exactly
    // the same IEEE operations, only wider.
    let chunk = 1024usize;
    let avx2 = have_avx2();
    scores
        .par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(ci, out_chunk)| {
            let start = ci * chunk;
            #[cfg(target_arch = "x86_64")]
            if avx2 {
                // SAFETY: feature presence checked at runtime.
                unsafe { dtw_chunk_avx2(reference, query, band, start, out_chunk) };
                return;
            }
            let _ = avx2;
            dtw_chunk(reference, query, band, start, out_chunk);
        });
}

fn euclid_scores(reference: &Soa, query: &Soa, scores: &mut [f64]) {
    let m = query.len();
    scores.par_chunks_mut(1024).enumerate().for_each(|(ci, out_chunk)| {
        let start = ci * 1024;
        for (w, out) in out_chunk.iter_mut().enumerate() {
            let i = start + w;
            let mut acc = 0.0;
            for c in 0..m {
                acc += sq_dist_components(
                    reference.x[i + c],
                    reference.y[i + c],
                    reference.z[i + c],
                    query.x[c],
                    query.y[c],
                    query.z[c],
                );
            }
            *out = acc.sqrt();
        }
    });
}

/// Evaluates the query against every same-length window of the reference
/// and returns up to `k` lowest-score starts, greedily suppressing hits
/// closer than `min_sep` meters to an already accepted one. Ties resolve by
/// ascending start index.
pub fn subsequence_search(
    reference: &SpaceSignal,
    query: &SpaceSignal,
    metric: Metric,
    k: usize,
    min_sep: f64,
) -> Result<Vec<MatchCandidate>, AlignError> {
    let n = reference.len();
    let m = query.len();
    if m > n {
        return Err(AlignError::QueryLongerThanReference { n, m });
    }
    if m < 2 {
        return Err(AlignError::Invalid(format!("query needs >= 2 samples, got {m}")));
    }
    if k < 1 {
        return Err(AlignError::Invalid("k must be >= 1".into()));
    }
    if !(min_sep >= 0.0) {
        return Err(AlignError::Invalid(format!("min_sep must be >= 0, got {min_sep}")));
    }
    if (reference.dx - query.dx).abs() > 1e-9 * reference.dx {
        return Err(AlignError::Invalid(format!(
            "spatial steps differ: reference {} vs query {}",
            reference.dx, query.dx
        )));
    }

    let ref_soa = Soa::from_samples(&reference.b);
    let q_soa = Soa::from_samples(&query.b);
    let mut scores = vec![0.0f64; n - m + 1];
    match metric {
        Metric::Euclid => euclid_scores(&ref_soa, &q_soa, &mut scores),
        Metric::Dtw => dtw_scores(&ref_soa, &q_soa, default_dtw_band(m), &mut scores),
    }

    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[a as usize]
            .partial_cmp(&scores[b as usize])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });

    let dx = reference.dx;
    let mut picked: Vec<MatchCandidate> = Vec::with_capacity(k);
    for &idx in &order {
        let idx = idx as usize;
        let s = reference.x0 + idx as f64 * dx;
        let far_enough = picked
            .iter()
            .all(|c| (s - c.s).abs() >= min_sep);
        if far_enough {
            picked.push(MatchCandidate {
                index: idx,
                s,
                score: scores[idx],
                rank: picked.len() + 1,
            });
            if picked.len() == k {
                break;
            }
        }
    }
    Ok(picked)
}
