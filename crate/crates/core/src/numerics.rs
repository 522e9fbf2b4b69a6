//! Grid-level numerics shared by every module: trapezoid quadrature,
//! fourth-order finite differences and the RK4 step for linear ODEs.
//!
//! All modules use these same routines so discrete identities between the
//! quadratic forms hold up to smoothness error only.

use std::ops::{Add, Mul};

use nalgebra::{DMatrix, DVector};

/// Trapezoid weights for `n_intervals` uniform steps of size `h`.
pub fn trapezoid_weights(n_intervals: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n_intervals + 1];
    w[0] = 0.5 * h;
    w[n_intervals] = 0.5 * h;
    w
}

/// Cumulative trapezoid integral, starting from zero at the first node.
pub fn cumulative_trapezoid(samples: &[DVector<f64>], h: f64) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    let mut acc = DVector::zeros(samples.first().map_or(0, |s| s.len()));
    out.push(acc.clone());
    for pair in samples.windows(2) {
        acc += (&pair[0] + &pair[1]) * (0.5 * h);
        out.push(acc.clone());
    }
    out
}

/// Fourth-order finite-difference time derivative of uniformly sampled data.
///
/// Central stencils in the interior, one-sided fourth-order stencils at the
/// two nodes nearest each end. Grids with fewer than five nodes fall back to
/// second-order stencils.
pub fn time_derivative<T>(s: &[T], h: f64) -> Vec<T>
where
    T: Clone + Add<Output = T>,
    for<'a> &'a T: Mul<f64, Output = T>,
{
    let len = s.len();
    assert!(len >= 3, "time_derivative needs at least 3 samples");
    let comb = |coefs: &[(usize, f64)], denom: f64| -> T {
        let mut it = coefs.iter();
        let &(i0, c0) = it.next().unwrap();
        // integer weights first so constant data differentiates to exactly zero
        let mut acc = &s[i0] * c0;
        for &(i, c) in it {
            acc = acc + &s[i] * c;
        }
        &acc * (1.0 / denom)
    };
    let last = len - 1;
    if len < 5 {
        return (0..len)
            .map(|k| match k {
                0 => comb(&[(0, -3.0), (1, 4.0), (2, -1.0)], 2.0 * h),
                k if k == last => comb(&[(last, 3.0), (last - 1, -4.0), (last - 2, 1.0)], 2.0 * h),
                k => comb(&[(k + 1, 1.0), (k - 1, -1.0)], 2.0 * h),
            })
            .collect();
    }
    let d = 12.0 * h;
    (0..len)
        .map(|k| match k {
            0 => comb(&[(0, -25.0), (1, 48.0), (2, -36.0), (3, 16.0), (4, -3.0)], d),
            1 => comb(&[(0, -3.0), (1, -10.0), (2, 18.0), (3, -6.0), (4, 1.0)], d),
            k if k == last => comb(
                &[
                    (last, 25.0),
                    (last - 1, -48.0),
                    (last - 2, 36.0),
                    (last - 3, -16.0),
                    (last - 4, 3.0),
                ],
                d,
            ),
            k if k == last - 1 => comb(
                &[
                    (last, 3.0),
                    (last - 1, 10.0),
                    (last - 2, -18.0),
                    (last - 3, 6.0),
                    (last - 4, -1.0),
                ],
                d,
            ),
            k => comb(&[(k - 2, 1.0), (k - 1, -8.0), (k + 1, 8.0), (k + 2, -1.0)], d),
        })
        .collect()
}

/// One classical RK4 step of `x' = A(t) x + b(t)` where `A` and `b` are
/// linear in time across the step (`A(t0) = a0`, `A(t0+h) = a1`, likewise `b`).
pub fn rk4_linear_step(
    a0: &DMatrix<f64>,
    a1: &DMatrix<f64>,
    b0: &DVector<f64>,
    b1: &DVector<f64>,
    x: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    let am = (a0 + a1) * 0.5;
    let bm = (b0 + b1) * 0.5;
    let k1 = a0 * x + b0;
    let k2 = &am * (x + &k1 * (0.5 * h)) + &bm;
    let k3 = &am * (x + &k2 * (0.5 * h)) + &bm;
    let k4 = a1 * (x + &k3 * h) + b1;
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Matrix form of [`rk4_linear_step`]: `x+ = P x + C0 b0 + C1 b1`.
#[derive(Clone, Debug)]
pub struct LinearStep {
    pub p: DMatrix<f64>,
    pub c0: DMatrix<f64>,
    pub c1: DMatrix<f64>,
}

impl LinearStep {
    pub fn new(a0: &DMatrix<f64>, a1: &DMatrix<f64>, h: f64) -> Self {
        let n = a0.nrows();
        let am = (a0 + a1) * 0.5;
        let id = DMatrix::<f64>::identity(n, n);
        // P = I + h/6 (K1 + 2K2 + 2K3 + K4) with K's the stage maps on x
        let k1 = a0.clone();
        let k2 = &am * (&id + &k1 * (0.5 * h));
        let k3 = &am * (&id + &k2 * (0.5 * h));
        let k4 = a1 * (&id + &k3 * h);
        let p = &id + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
        // stage maps on b0 and b1 (bm = (b0 + b1)/2)
        let stages = |w0: f64, w1: f64| {
            let wm = 0.5 * (w0 + w1);
            let s1 = &id * w0;
            let s2 = &am * (&s1 * (0.5 * h)) + &id * wm;
            let s3 = &am * (&s2 * (0.5 * h)) + &id * wm;
            let s4 = a1 * (&s3 * h) + &id * w1;
            (&s1 + &s2 * 2.0 + &s3 * 2.0 + &s4) * (h / 6.0)
        };
        LinearStep {
            p,
            c0: stages(1.0, 0.0),
            c1: stages(0.0, 1.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_integrate_linear_exactly() {
        let w = trapezoid_weights(10, 0.1);
        let s: f64 = w.iter().enumerate().map(|(k, w)| w * (2.0 * k as f64 * 0.1 + 1.0)).sum();
        assert!((s - 2.0).abs() < 1e-14);
    }

    #[test]
    fn derivative_exact_on_quartic() {
        let h = 0.05;
        let s: Vec<DVector<f64>> = (0..21)
            .map(|k| {
                let t = k as f64 * h;
                DVector::from_vec(vec![t.powi(4) - 2.0 * t.powi(3) + t, 3.0 * t])
            })
            .collect();
        let d = time_derivative(&s, h);
        for (k, dk) in d.iter().enumerate() {
            let t = k as f64 * h;
            assert!((dk[0] - (4.0 * t.powi(3) - 6.0 * t * t + 1.0)).abs() < 1e-11, "k={k}");
            assert!((dk[1] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_converges_at_fourth_order() {
        let err = |n: usize| {
            let h = 1.0 / n as f64;
            let s: Vec<DMatrix<f64>> = (0..=n)
                .map(|k| DMatrix::from_element(1, 1, (3.0 * k as f64 * h).sin()))
                .collect();
            time_derivative(&s, h)
                .iter()
                .enumerate()
                .map(|(k, d)| (d[(0, 0)] - 3.0 * (3.0 * k as f64 * h).cos()).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(50), err(100));
        assert!(e1 / e2 >= 8.0, "ratio {}", e1 / e2);
    }

    #[test]
    fn step_matrices_match_direct_step() {
        let a0 = DMatrix::from_row_slice(2, 2, &[0.1, 1.0, -0.3, 0.2]);
        let a1 = DMatrix::from_row_slice(2, 2, &[0.0, 1.2, -0.1, 0.4]);
        let b0 = DVector::from_vec(vec![0.5, -1.0]);
        let b1 = DVector::from_vec(vec![0.7, 0.3]);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let h = 0.1;
        let direct = rk4_linear_step(&a0, &a1, &b0, &b1, &x, h);
        let st = LinearStep::new(&a0, &a1, h);
        let via = &st.p * &x + &st.c0 * &b0 + &st.c1 * &b1;
        assert!((direct - via).amax() < 1e-15);
    }
}
