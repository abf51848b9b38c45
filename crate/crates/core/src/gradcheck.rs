//! Central finite differences, used as an independent gradient oracle.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error `|a - b| / max(|a|, |b|)`, or the absolute error when both
/// magnitudes fall below `abs_floor`.
pub fn rel_error(a: f64, b: f64, abs_floor: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < abs_floor {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Largest pairwise [`rel_error`] between two gradient vectors.
pub fn max_rel_error(a: &[f64], b: &[f64], abs_floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_error(x, y, abs_floor))
        .fold(0.0, f64::max)
}

/// Pass/fail at relative tolerance `rel_tol`, or absolute `abs_tol` near zero.
pub fn close(a: f64, b: f64, rel_tol: f64, abs_tol: f64) -> bool {
    let d = (a - b).abs();
    d <= abs_tol || d <= rel_tol * a.abs().max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }
}
