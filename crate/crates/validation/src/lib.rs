//! Reference computations that share no code with the library under test:
//! finite-difference gradients, a numerically integrated BMI, and phase
//! error folding.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use num_complex::Complex64;

/// Central differences of `f` with respect to the real and imaginary part
/// of every entry of `taps`, returned as `d/dRe + j d/dIm`.
pub fn numeric_gradient(taps: &[Complex64], h: f64, f: impl Fn(&[Complex64]) -> f64) -> Vec<Complex64> {
    let mut work = taps.to_vec();
    (0..taps.len())
        .map(|k| {
            let mut part = |d: Complex64| {
                work[k] = taps[k] + d;
                let plus = f(&work);
                work[k] = taps[k] - d;
                let minus = f(&work);
                work[k] = taps[k];
                (plus - minus) / (2.0 * h)
            };
            Complex64::new(part(Complex64::new(h, 0.0)), part(Complex64::new(0.0, h)))
        })
        .collect()
}

/// `||a - b|| / ||b||` over all entries.
pub fn relative_error(a: &[Complex64], b: &[Complex64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let norm: f64 = b.iter().map(|v| v.norm_sqr()).sum();
    (diff / norm).sqrt()
}

/// BMI of Gray-labelled unit-energy QPSK in complex AWGN at `es_n0_db`.
///
/// Each bit is a BPSK decision with amplitude `a = 1/sqrt(2)` and noise
/// variance `s2 = N0/2` per dimension. The penalty
/// `E[log2(1 + exp(-2 a y / s2))]`, `y ~ N(a, s2)`, is integrated with the
/// trapezoid rule over +-12 standard deviations.
pub fn qpsk_awgn_bmi(es_n0_db: f64) -> f64 {
    let n0 = 10f64.powf(-es_n0_db / 10.0);
    let a = FRAC_PI_4.cos();
    let s2 = n0 / 2.0;
    let s = s2.sqrt();
    let steps = 200_000;
    let lo = a - 12.0 * s;
    let dy = 24.0 * s / steps as f64;
    let mut acc = 0.0;
    for k in 0..=steps {
        let y = lo + k as f64 * dy;
        let pdf = (-(y - a).powi(2) / (2.0 * s2)).exp() / (2.0 * PI * s2).sqrt();
        let l = 2.0 * a * y / s2;
        // log(1 + e^-l) without overflow.
        let nats = if l > 0.0 { (-l).exp().ln_1p() } else { -l + l.exp().ln_1p() };
        let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
        acc += w * pdf * nats / 2f64.ln();
    }
    2.0 * (1.0 - acc * dy)
}

/// Fold a phase error into `[-pi/4, pi/4)`, the range left by the
/// quarter-turn ambiguity of square QAM.
pub fn fold_quarter(err: f64) -> f64 {
    (err + FRAC_PI_4).rem_euclid(FRAC_PI_2) - FRAC_PI_4
}

/// Shift `track` by the multiple of `pi/2` that best matches `truth` on
/// average, then return the mean squared difference.
pub fn quarter_aligned_mse(track: &[f64], truth: &[f64]) -> f64 {
    let n = track.len() as f64;
    let mean: f64 = track.iter().zip(truth).map(|(a, b)| b - a).sum::<f64>() / n;
    let shift = (mean / FRAC_PI_2).round() * FRAC_PI_2;
    track.iter().zip(truth).map(|(a, b)| (a + shift - b).powi(2)).sum::<f64>() / n
}
