//! Finite-difference gradient checking.
//!
//! These helpers only ever evaluate the forward function, so they stay
//! independent of the reverse pass they are used to check.

/// Central finite-difference gradient of `f` at `x` for the coordinates in `coords`.
pub fn central_difference<F>(f: F, x: &[f64], coords: &[usize], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Full central-difference gradient.
pub fn numeric_gradient<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    central_difference(f, x, &coords, step)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error: length mismatch");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(floor)
}
