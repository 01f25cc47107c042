//! Blind phase search (BPS) carrier phase recovery.
//!
//! The hard path picks the test angle with the smallest smoothed decision
//! distance. The soft path keeps that forward value but carries gradients
//! through `phi_soft = sum_b softmax(-d_bar / T)_b * theta_b`
//! (straight-through estimator).

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::signal::Constellation;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpsConfig {
    pub angles_per_quadrant: usize,
    pub temperature: f64,
    /// Odd length of the triangular averaging window, in symbols.
    pub window_len: usize,
}

impl Default for BpsConfig {
    fn default() -> Self {
        Self {
            angles_per_quadrant: 40,
            temperature: 0.01,
            window_len: 65,
        }
    }
}

impl BpsConfig {
    pub fn new(angles_per_quadrant: usize, temperature: f64, window_len: usize) -> Result<Self> {
        let cfg = Self {
            angles_per_quadrant,
            temperature,
            window_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.angles_per_quadrant == 0 {
            return Err(Error::InvalidParameter("need at least one test angle".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidParameter("temperature must be positive".into()));
        }
        if self.window_len.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "window length {} must be odd",
                self.window_len
            )));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        FRAC_PI_2 / self.angles_per_quadrant as f64
    }

    /// `B` angles from `-pi/4` in steps of `(pi/2)/B`.
    pub fn test_angles(&self) -> Vec<f64> {
        (0..self.angles_per_quadrant)
            .map(|b| -FRAC_PI_4 + b as f64 * self.spacing())
            .collect()
    }

    /// Triangular weights `(h + 1 - |k|) / (h + 1)^2` for `k = -h..=h`.
    pub fn window_weights(&self) -> Vec<f64> {
        let h = (self.window_len / 2) as i64;
        let norm = ((h + 1) * (h + 1)) as f64;
        (-h..=h).map(|k| (h + 1 - k.abs()) as f64 / norm).collect()
    }

    pub fn half_window(&self) -> usize {
        self.window_len / 2
    }
}

/// Smoothed BPS metric of one channel, stored angle-major: `[b][n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BpsMetrics {
    pub n_symbols: usize,
    pub n_angles: usize,
    pub smoothed: Vec<f64>,
}

impl BpsMetrics {
    #[inline]
    pub fn get(&self, n: usize, b: usize) -> f64 {
        self.smoothed[b * self.n_symbols + n]
    }
}

/// `d_n(b) = |x_n e^{-j theta_b} - dec(x_n e^{-j theta_b})|^2`.
fn raw_distances(x: &[Complex64], c: &Constellation, angles: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; angles.len() * n];
    for (b, &theta) in angles.iter().enumerate() {
        let rot = Complex64::from_polar(1.0, -theta);
        let row = &mut d[b * n..(b + 1) * n];
        for (out, &z) in row.iter_mut().zip(x) {
            let r = z * rot;
            *out = (r - c.points()[c.nearest(r)]).norm_sqr();
        }
    }
    d
}

/// Circular triangular smoothing of one row, computed as two running box
/// sums of length `h + 1`.
fn smooth_row(row: &[f64], h: usize, out: &mut [f64]) {
    let n = row.len();
    if n == 0 {
        return;
    }
    let len = h + 1;
    let at = |i: i64| row[i.rem_euclid(n as i64) as usize];
    // a[n] = sum_{k=0..h} row[n + k]
    let mut a = vec![0.0; n];
    let mut acc: f64 = (0..len as i64).map(at).sum();
    for (i, v) in a.iter_mut().enumerate() {
        *v = acc;
        let i = i as i64;
        acc += at(i + len as i64) - at(i);
    }
    let at_a = |i: i64| a[i.rem_euclid(n as i64) as usize];
    let mut acc: f64 = (0..len as i64).map(|k| at_a(-k)).sum();
    let norm = (len * len) as f64;
    for (i, v) in out.iter_mut().enumerate() {
        *v = acc / norm;
        let i = i as i64;
        acc += at_a(i + 1) - at_a(i - h as i64);
    }
}

fn smooth(d: &[f64], n: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for (row, o) in d.chunks(n).zip(out.chunks_mut(n)) {
        smooth_row(row, h, o);
    }
    out
}

/// Smoothed BPS metric of one channel; the window wraps circularly at the
/// sequence ends.
pub fn bps_distances(x: &[Complex64], c: &Constellation, cfg: &BpsConfig) -> BpsMetrics {
    let angles = cfg.test_angles();
    let n = x.len();
    let raw = raw_distances(x, c, &angles);
    BpsMetrics {
        n_symbols: n,
        n_angles: angles.len(),
        smoothed: smooth(&raw, n, cfg.half_window()),
    }
}

/// Per-channel carrier phase track.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseTrack {
    /// Selected test angle per symbol, in `[-pi/4, pi/4)`.
    pub raw: Vec<f64>,
    pub index: Vec<usize>,
    /// `raw` plus multiples of `pi/2` for continuity.
    pub unwrapped: Vec<f64>,
    /// Softmax-weighted angle, present for the differentiable path.
    pub soft: Option<Vec<f64>>,
    /// Softmax weights `[n][b]`.
    pub weights: Option<Vec<f64>>,
}

/// Hard selection: per-symbol argmin over the test angles (lowest index on
/// ties), then unwrapping relative to `reference`.
pub fn bps_select_hard(metrics: &BpsMetrics, cfg: &BpsConfig, reference: Option<f64>) -> PhaseTrack {
    let angles = cfg.test_angles();
    let index: Vec<usize> = (0..metrics.n_symbols)
        .map(|n| {
            let mut best = 0;
            let mut best_v = metrics.get(n, 0);
            for b in 1..metrics.n_angles {
                let v = metrics.get(n, b);
                if v < best_v {
                    best = b;
                    best_v = v;
                }
            }
            best
        })
        .collect();
    let raw: Vec<f64> = index.iter().map(|&b| angles[b]).collect();
    let unwrapped = unwrap(&raw, reference);
    PhaseTrack {
        raw,
        index,
        unwrapped,
        soft: None,
        weights: None,
    }
}

/// Hard selection plus the softmax weights and soft angle used for the
/// backward pass.
pub fn bps_select_soft(metrics: &BpsMetrics, cfg: &BpsConfig, reference: Option<f64>) -> PhaseTrack {
    let mut track = bps_select_hard(metrics, cfg, reference);
    let angles = cfg.test_angles();
    let nb = metrics.n_angles;
    let t = cfg.temperature;
    let mut weights = vec![0.0; metrics.n_symbols * nb];
    let mut soft = vec![0.0; metrics.n_symbols];
    for n in 0..metrics.n_symbols {
        let w = &mut weights[n * nb..(n + 1) * nb];
        // The hard argmin has the largest logit.
        let top = -metrics.get(n, track.index[n]) / t;
        let mut sum = 0.0;
        for (b, wb) in w.iter_mut().enumerate() {
            *wb = (-metrics.get(n, b) / t - top).exp();
            sum += *wb;
        }
        let mut phi = 0.0;
        for (wb, a) in w.iter_mut().zip(&angles) {
            *wb /= sum;
            phi += *wb * a;
        }
        soft[n] = phi;
    }
    track.soft = Some(soft);
    track.weights = Some(weights);
    track
}

/// Gradient with respect to `x` of a loss whose gradient with respect to
/// the soft angles is `grad_phi`.
pub fn soft_phase_backward(
    x: &[Complex64],
    c: &Constellation,
    cfg: &BpsConfig,
    track: &PhaseTrack,
    grad_phi: &[f64],
) -> Result<Vec<Complex64>> {
    let (Some(weights), Some(soft)) = (&track.weights, &track.soft) else {
        return Err(Error::InvalidParameter("phase track has no soft path".into()));
    };
    let n = x.len();
    if grad_phi.len() != n || soft.len() != n {
        return Err(Error::ShapeMismatch("phase gradient length differs from input".into()));
    }
    let angles = cfg.test_angles();
    let nb = angles.len();
    let t = cfg.temperature;
    // dL/d d_bar_n(b) = g_n * w_n(b) * (theta_b - phi_n) * (-1/T), angle-major.
    let mut g_bar = vec![0.0; nb * n];
    for k in 0..n {
        let g = grad_phi[k];
        if g == 0.0 {
            continue;
        }
        for b in 0..nb {
            g_bar[b * n + k] = -g * weights[k * nb + b] * (angles[b] - soft[k]) / t;
        }
    }
    // The triangular window is symmetric, so its transpose is itself.
    let g_raw = smooth(&g_bar, n, cfg.half_window());
    let mut gx = vec![Complex64::new(0.0, 0.0); n];
    for (b, &theta) in angles.iter().enumerate() {
        let rot = Complex64::from_polar(1.0, -theta);
        let back = rot.conj();
        for k in 0..n {
            let g = g_raw[b * n + k];
            if g == 0.0 {
                continue;
            }
            let r = x[k] * rot;
            let err = r - c.points()[c.nearest(r)];
            gx[k] += err * back * (2.0 * g);
        }
    }
    Ok(gx)
}

/// Shift an unwrapped track by the multiple of `pi/2` that brings
/// `unwrapped[index]` closest to `value`.
pub fn anchor(unwrapped: &mut [f64], index: usize, value: f64) {
    let Some(&v) = unwrapped.get(index) else {
        return;
    };
    let shift = ((value - v) / FRAC_PI_2).round() * FRAC_PI_2;
    if shift != 0.0 {
        for a in unwrapped.iter_mut() {
            *a += shift;
        }
    }
}

/// Add multiples of `pi/2` so that consecutive angles differ by at most
/// `pi/4`. The first angle is moved next to `reference` when one is given.
pub fn unwrap(raw: &[f64], reference: Option<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    let mut prev = reference;
    for &a in raw {
        let v = match prev {
            None => a,
            Some(p) => a + ((p - a) / FRAC_PI_2).round() * FRAC_PI_2,
        };
        out.push(v);
        prev = Some(v);
    }
    out
}

/// `x_n e^{-j phi_n}`.
pub fn apply_cpr(x: &[Complex64], phase: &[f64]) -> Result<Vec<Complex64>> {
    if x.len() != phase.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} samples, {} phase values",
            x.len(),
            phase.len()
        )));
    }
    Ok(x.iter()
        .zip(phase)
        .map(|(z, p)| z * Complex64::from_polar(1.0, -p))
        .collect())
}
