//! Unit quaternions stored as `[w, x, y, z]`.

use crate::error::{Error, Result};

pub type Quat = [f64; 4];

pub const IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn dot(a: &Quat, b: &Quat) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(q: &Quat) -> f64 {
    dot(q, q).sqrt()
}

pub fn normalize(q: &Quat) -> Result<Quat> {
    let n = norm(q);
    if !n.is_finite() || n == 0.0 {
        return Err(Error::invalid(format!("quaternion {q:?} has no direction")));
    }
    Ok(q.map(|c| c / n))
}

/// Unit norm with scalar part ≥ 0; when the scalar part is zero the first
/// nonzero vector component is made positive.
pub fn canonicalize(q: &Quat) -> Result<Quat> {
    let u = normalize(q)?;
    let lead = u.iter().copied().find(|&c| c != 0.0).unwrap_or(1.0);
    Ok(if lead < 0.0 { u.map(|c| -c) } else { u })
}

pub fn is_canonical(q: &Quat, tol: f64) -> bool {
    if (norm(q) - 1.0).abs() > tol {
        return false;
    }
    q.iter().copied().find(|&c| c != 0.0).is_some_and(|c| c > 0.0)
}

pub fn mul(a: &Quat, b: &Quat) -> Quat {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

pub fn conj(q: &Quat) -> Quat {
    [q[0], -q[1], -q[2], -q[3]]
}

pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Quat {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (s, c) = (angle / 2.0).sin_cos();
    [c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n]
}

/// Shortest-arc spherical interpolation; `u = 0` gives `a`, `u = 1` gives `±b`.
pub fn slerp(a: &Quat, b: &Quat, u: f64) -> Quat {
    let mut b = *b;
    let mut d = dot(a, &b);
    if d < 0.0 {
        b = b.map(|c| -c);
        d = -d;
    }
    if d > 1.0 - 1e-12 {
        let q: Quat = std::array::from_fn(|i| a[i] + u * (b[i] - a[i]));
        return normalize(&q).unwrap_or(*a);
    }
    let theta = d.min(1.0).acos();
    let s = theta.sin();
    let wa = ((1.0 - u) * theta).sin() / s;
    let wb = (u * theta).sin() / s;
    std::array::from_fn(|i| wa * a[i] + wb * b[i])
}

/// Rotation vector (axis times angle in radians) of the shortest rotation `q` represents.
pub fn log_map(q: &Quat) -> Result<[f64; 3]> {
    let u = canonicalize(q)?;
    let v = (u[1] * u[1] + u[2] * u[2] + u[3] * u[3]).sqrt();
    if v < 1e-15 {
        return Ok([2.0 * u[1], 2.0 * u[2], 2.0 * u[3]]);
    }
    let angle = 2.0 * v.atan2(u[0]);
    Ok([u[1] / v * angle, u[2] / v * angle, u[3] / v * angle])
}

/// Geodesic angle between the rotations of `p` and `g`, in degrees.
///
/// Equal to `2·acos(|⟨p̂, ĝ⟩|)` but evaluated as `2·atan2(|v|, |w|)` of the
/// relative rotation of the canonical forms, so `q` against `-q` is exactly 0.
pub fn rot_error(p: &Quat, g: &Quat) -> Result<f64> {
    let p = canonicalize(p)?;
    let g = canonicalize(g)?;
    // conj(p)·g, grouped so that equal inputs cancel exactly
    let w = dot(&p, &g);
    let cross = |i: usize, j: usize| p[i] * g[j] - p[j] * g[i];
    let v = [
        (p[0] * g[1] - g[0] * p[1]) - cross(2, 3),
        (p[0] * g[2] - g[0] * p[2]) - cross(3, 1),
        (p[0] * g[3] - g[0] * p[3]) - cross(1, 2),
    ];
    let v = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    Ok(2.0 * v.atan2(w.abs()).to_degrees())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Quat, b: &Quat, tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn canonical_examples() {
        assert_eq!(canonicalize(&[-1.0, 0.0, 0.0, 0.0]).unwrap(), IDENTITY);
        let h = [0.5, 0.5, 0.5, 0.5];
        assert_eq!(canonicalize(&h).unwrap(), h);
        assert_eq!(
            canonicalize(&[0.0, 0.0, -2.0, 0.0]).unwrap(),
            [0.0, 0.0, 1.0, 0.0]
        );
        assert!(canonicalize(&[0.0; 4]).is_err());
    }

    #[test]
    fn rot_error_examples() {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((rot_error(&IDENTITY, &[r, 0.0, 0.0, r]).unwrap() - 90.0).abs() < 1e-9);
        let q = [0.3, -0.2, 0.9, 0.1];
        assert_eq!(rot_error(&q, &q).unwrap(), 0.0);
        assert_eq!(rot_error(&q, &q.map(|c| -c)).unwrap(), 0.0);
    }

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let a = IDENTITY;
        let b = from_axis_angle([0.0, 0.0, 1.0], 1.0);
        assert!(close(&slerp(&a, &b, 0.0), &a, 1e-12));
        assert!(close(&slerp(&a, &b, 1.0), &b, 1e-12));
        let mid = slerp(&a, &b, 0.5);
        assert!((rot_error(&a, &mid).unwrap() - 0.5f64.to_degrees()).abs() < 1e-9);
    }

    #[test]
    fn log_map_recovers_axis_angle() {
        let q = from_axis_angle([1.0, 2.0, -2.0], 0.7);
        let v = log_map(&q).unwrap();
        let want = [0.7 / 3.0, 1.4 / 3.0, -1.4 / 3.0];
        for i in 0..3 {
            assert!((v[i] - want[i]).abs() < 1e-12);
        }
        assert_eq!(log_map(&IDENTITY).unwrap(), [0.0; 3]);
    }

    #[test]
    fn product_with_conjugate_is_identity() {
        let q = normalize(&[0.2, 0.4, -0.1, 0.7]).unwrap();
        assert!(close(&mul(&q, &conj(&q)), &IDENTITY, 1e-12));
    }
}
