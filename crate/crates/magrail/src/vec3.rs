use crate::FieldSample;

#[inline(always)]
pub fn sq_dist(a: &FieldSample, b: &FieldSample) -> f64 {
    sq_dist_components(a[0], a[1], a[2], b[0], b[1], b[2])
}

/// Shared by the scalar and the lane-batched distance kernels so both
/// produce bit-identical accumulations.
#[inline(always)]
pub fn sq_dist_components(ax: f64, ay: f64, az: f64, bx: f64, by: f64, bz: f64) -> f64 {
    let dx = ax - bx;
    let dy = ay - by;
    let dz = az - bz;
    dx * dx + dy * dy + dz * dz
}

#[inline(always)]
pub fn dist(a: &FieldSample, b: &FieldSample) -> f64 {
    sq_dist(a, b).sqrt()
}

#[inline(always)]
pub fn lerp(a: &FieldSample, b: &FieldSample, frac: f64) -> FieldSample {
    [
        a[0] + frac * (b[0] - a[0]),
        a[1] + frac * (b[1] - a[1]),
        a[2] + frac * (b[2] - a[2]),
    ]
}

#[inline(always)]
pub fn magnitude(a: &FieldSample) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        assert_eq!(dist(&[0.0, 0.0, 0.0], &[3.0, 4.0, 0.0]), 5.0);
    }

    #[test]
    fn lerp_endpoints_exact() {
        let a = [1.0, -2.0, 3.5];
        let b = [4.0, 0.25, -1.0];
        assert_eq!(lerp(&a, &b, 0.0), a);
        assert_eq!(lerp(&a, &b, 1.0), b);
    }
}
