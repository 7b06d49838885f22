//! Grunert's three-point solution and absolute orientation.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::geometry::RigidPose;

/// Real roots of `c[0]·x⁴ + c[1]·x³ + c[2]·x² + c[3]·x + c[4]`.
fn quartic_roots(c: [f64; 5]) -> Vec<f64> {
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || c[0].abs() < 1e-14 * scale {
        return cubic_fallback(&c[1..]);
    }
    let a = [c[1] / c[0], c[2] / c[0], c[3] / c[0], c[4] / c[0]];
    let companion = Matrix4::new(
        -a[0], -a[1], -a[2], -a[3], //
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0,
    );
    let poly = |x: f64| (((x + a[0]) * x + a[1]) * x + a[2]) * x + a[3];
    let dpoly = |x: f64| ((4.0 * x + 3.0 * a[0]) * x + 2.0 * a[1]) * x + a[2];
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| polish(z.re, poly, dpoly))
        .collect()
}

fn cubic_fallback(c: &[f64]) -> Vec<f64> {
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || c[0].abs() < 1e-14 * scale {
        // Quadratic or lower; degenerate configurations are not worth solving.
        return Vec::new();
    }
    let a = [c[1] / c[0], c[2] / c[0], c[3] / c[0]];
    let companion = Matrix3::new(-a[0], -a[1], -a[2], 1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let poly = |x: f64| ((x + a[0]) * x + a[1]) * x + a[2];
    let dpoly = |x: f64| (3.0 * x + 2.0 * a[0]) * x + a[1];
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| polish(z.re, poly, dpoly))
        .collect()
}

fn polish(mut x: f64, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..4 {
        let d = df(x);
        if d == 0.0 {
            break;
        }
        let step = f(x) / d;
        if !step.is_finite() {
            break;
        }
        x -= step;
    }
    x
}

/// Rigid transform with `R·x + t ≈ y` for corresponding columns.
pub fn absolute_orientation(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> Option<RigidPose> {
    let n = x.len() as f64;
    if x.len() != y.len() || x.len() < 3 {
        return None;
    }
    let cx = x.iter().sum::<Vector3<f64>>() / n;
    let cy = y.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in x.iter().zip(y) {
        h += (b - cy) * (a - cx).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let t = cy - r * cx;
    Some(RigidPose::new(r, t))
}

/// Up to four camera poses mapping `points` onto the unit `rays`.
pub fn p3p(rays: &[Vector3<f64>; 3], points: &[Vector3<f64>; 3]) -> Vec<RigidPose> {
    let [p1, p2, p3] = points;
    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    if a2 < 1e-24 || b2 < 1e-24 || c2 < 1e-24 {
        return Vec::new();
    }
    let f: Vec<Vector3<f64>> = rays.iter().map(|r| r.normalize()).collect();
    let cos_a = f[1].dot(&f[2]);
    let cos_b = f[0].dot(&f[2]);
    let cos_g = f[0].dot(&f[1]);

    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;
    let (ca2, cb2, cg2) = (cos_a * cos_a, cos_b * cos_b, cos_g * cos_g);

    let coeffs = [
        (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca2,
        4.0 * (amc * (1.0 - amc) * cos_b - (1.0 - apc) * cos_a * cos_g
            + 2.0 * c2 / b2 * ca2 * cos_b),
        2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cb2 + 2.0 * bmc * ca2
            - 4.0 * apc * cos_a * cos_b * cos_g
            + 2.0 * bma * cg2),
        4.0 * (-amc * (1.0 + amc) * cos_b + 2.0 * a2 / b2 * cg2 * cos_b
            - (1.0 - apc) * cos_a * cos_g),
        (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg2,
    ];

    let mut poses = Vec::with_capacity(4);
    for v in quartic_roots(coeffs) {
        if v <= 0.0 {
            continue;
        }
        let denom = 2.0 * (cos_g - v * cos_a);
        if denom.abs() < 1e-14 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cos_b * v + 1.0 + amc) / denom;
        if u <= 0.0 {
            continue;
        }
        let q = 1.0 + v * v - 2.0 * v * cos_b;
        if q <= 0.0 {
            continue;
        }
        let s1 = (b2 / q).sqrt();
        let (s2, s3) = (u * s1, v * s1);
        let cam = [f[0] * s1, f[1] * s2, f[2] * s3];
        if let Some(pose) = absolute_orientation(points, &cam) {
            if pose.rotation.iter().all(|x| x.is_finite()) && pose.translation.iter().all(|x| x.is_finite()) {
                poses.push(pose);
            }
        }
    }
    poses
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::random_rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quartic_with_known_roots() {
        // (x-1)(x-2)(x+3)(x-0.5)
        let roots = [1.0, 2.0, -3.0, 0.5];
        let mut c = [1.0, 0.0, 0.0, 0.0, 0.0];
        for (deg, r) in roots.into_iter().enumerate() {
            let mut next = [0.0; 5];
            for i in 0..=deg {
                next[i] += c[i];
                next[i + 1] -= r * c[i];
            }
            c = next;
        }
        let mut got = quartic_roots(c);
        got.sort_by(f64::total_cmp);
        let mut want = roots.to_vec();
        want.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn recovers_generating_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let r = random_rotation(&mut rng);
            let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let pose = RigidPose::new(r, t);
            let cam: Vec<Vector3<f64>> = (0..3)
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..6.0)))
                .collect();
            let world: Vec<Vector3<f64>> = cam.iter().map(|c| r.transpose() * (c - t)).collect();
            let rays = [cam[0].normalize(), cam[1].normalize(), cam[2].normalize()];
            let sols = p3p(&rays, &[world[0], world[1], world[2]]);
            let best = sols
                .iter()
                .map(|s| (s.rotation - pose.rotation).norm() + (s.translation - pose.translation).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "best {best} among {} solutions", sols.len());
        }
    }

    #[test]
    fn kabsch_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = random_rotation(&mut rng);
        let t = Vector3::new(0.3, -2.0, 1.0);
        let x: Vec<Vector3<f64>> = (0..5)
            .map(|_| Vector3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let y: Vec<Vector3<f64>> = x.iter().map(|p| r * p + t).collect();
        let pose = absolute_orientation(&x, &y).unwrap();
        assert!((pose.rotation - r).norm() < 1e-12);
        assert!((pose.translation - t).norm() < 1e-12);
    }
}
