//! Output alignment and performance metrics.

use std::f64::consts::{FRAC_PI_2, LN_2};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::signal::Constellation;
use crate::{Error, Result};

/// Mapping of one equalizer output onto a transmitted stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelAlignment {
    /// Transmitted channel this output carries.
    pub source: usize,
    /// Output symbol `k` corresponds to transmitted symbol `k + delay`.
    pub delay: i64,
    /// Output is rotated by `rotation * pi/2` relative to the transmitted
    /// symbols.
    pub rotation: u8,
    /// Normalized correlation magnitude in `[0, 1]`.
    pub score: f64,
}

impl ChannelAlignment {
    /// `x e^{-j rotation pi/2}`.
    pub fn derotate(&self, x: &[Complex64]) -> Vec<Complex64> {
        let r = Complex64::from_polar(1.0, -(self.rotation as f64) * FRAC_PI_2);
        x.iter().map(|z| z * r).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub channels: Vec<ChannelAlignment>,
}

impl Alignment {
    pub fn identity(n_ch: usize) -> Self {
        Self {
            channels: (0..n_ch)
                .map(|i| ChannelAlignment {
                    source: i,
                    delay: 0,
                    rotation: 0,
                    score: 1.0,
                })
                .collect(),
        }
    }

    /// Lowest correlation score over the channels.
    pub fn min_score(&self) -> f64 {
        self.channels.iter().map(|c| c.score).fold(f64::INFINITY, f64::min)
    }

    pub fn converged(&self, threshold: f64) -> bool {
        self.min_score() >= threshold
    }
}

/// Normalized correlation `sum x_k conj(s_{k+d}) / sqrt(sum|x|^2 sum|s|^2)`
/// over the overlap. `s` covers output indices `-margin .. n + margin`.
fn correlate(x: &[Complex64], s: &[Complex64], margin: usize, d: i64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    let mut px = 0.0;
    let mut ps = 0.0;
    for (k, xv) in x.iter().enumerate() {
        let idx = k as i64 + d + margin as i64;
        if idx < 0 || idx as usize >= s.len() {
            continue;
        }
        let sv = s[idx as usize];
        acc += xv * sv.conj();
        px += xv.norm_sqr();
        ps += sv.norm_sqr();
    }
    if px == 0.0 || ps == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    acc / (px * ps).sqrt()
}

/// Resolve channel permutation, symbol delay within `±max_delay`, and the
/// four-fold phase ambiguity by correlating equalizer outputs with the
/// transmitted symbols. `tx[j]` must hold `x.len() + 2 max_delay` symbols,
/// starting `max_delay` before the first output symbol. Channels are matched
/// greedily by descending correlation.
pub fn align(x: &[Vec<Complex64>], tx: &[Vec<Complex64>], max_delay: usize) -> Result<Alignment> {
    if x.is_empty() || x.len() != tx.len() {
        return Err(Error::ShapeMismatch("alignment needs one reference per output".into()));
    }
    let n = x[0].len();
    if tx.iter().any(|s| s.len() != n + 2 * max_delay) {
        return Err(Error::ShapeMismatch(format!(
            "reference must hold {} symbols",
            n + 2 * max_delay
        )));
    }
    let n_ch = x.len();
    let d = max_delay as i64;
    // Best (score, delay, phase) for every output/reference pair.
    let mut cand = Vec::with_capacity(n_ch * n_ch);
    for (i, xi) in x.iter().enumerate() {
        for (j, sj) in tx.iter().enumerate() {
            let mut best = (-1.0, 0i64, 0.0);
            for delay in -d..=d {
                let c = correlate(xi, sj, max_delay, delay);
                if c.norm() > best.0 {
                    best = (c.norm(), delay, c.arg());
                }
            }
            cand.push((best.0, i, j, best.1, best.2));
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out: Vec<Option<ChannelAlignment>> = vec![None; n_ch];
    let mut used = vec![false; n_ch];
    for (score, i, j, delay, phase) in cand {
        if out[i].is_some() || used[j] {
            continue;
        }
        let rotation = ((phase / FRAC_PI_2).round() as i64).rem_euclid(4) as u8;
        out[i] = Some(ChannelAlignment {
            source: j,
            delay,
            rotation,
            score,
        });
        used[j] = true;
    }
    Ok(Alignment {
        channels: out.into_iter().map(|c| c.expect("every output matched")).collect(),
    })
}

/// Bit-wise mutual information in bits per symbol from LLRs
/// `L = ln P(b=0) / P(b=1)`:
/// `m - (1/N) sum_n sum_i log2(1 + exp(-(1 - 2 b) L))`.
pub fn bmi(llr: &[f64], bits: &[u8], bits_per_symbol: usize) -> Result<f64> {
    if llr.len() != bits.len() || bits_per_symbol == 0 || !llr.len().is_multiple_of(bits_per_symbol) {
        return Err(Error::ShapeMismatch(format!(
            "{} LLRs for {} bits at {bits_per_symbol} bits per symbol",
            llr.len(),
            bits.len()
        )));
    }
    let n = llr.len() / bits_per_symbol;
    if n == 0 {
        return Err(Error::InvalidParameter("no symbols to score".into()));
    }
    let penalty: f64 = llr
        .iter()
        .zip(bits)
        .map(|(&l, &b)| {
            let s = if b == 0 { l } else { -l };
            softplus(-s) / LN_2
        })
        .sum();
    Ok(bits_per_symbol as f64 - penalty / n as f64)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Fraction of symbol decisions that differ from the truth.
pub fn ser(decided: &[usize], truth: &[usize]) -> Result<f64> {
    if decided.len() != truth.len() || truth.is_empty() {
        return Err(Error::ShapeMismatch("symbol error rate needs equal, non-empty inputs".into()));
    }
    let errors = decided.iter().zip(truth).filter(|(a, b)| a != b).count();
    Ok(errors as f64 / truth.len() as f64)
}

/// Nearest-point decisions.
pub fn decide(x: &[Complex64], c: &Constellation) -> Vec<usize> {
    x.iter().map(|z| c.nearest(*z)).collect()
}

/// SNR estimate in dB from the reconstruction error:
/// `10 log10(P_y N / C)`; `+inf` when `C` is zero.
pub fn snr_est(received_power: f64, n_samples: usize, c: f64) -> f64 {
    if c == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (received_power * n_samples as f64 / c).log10()
}

/// Outcome of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    /// Alignment correlation stayed below threshold; still scored.
    NonConverged,
    /// A loss or tap became non-finite; later frames are not scored.
    Diverged,
}

/// Metrics of one channel in one frame of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub frame: usize,
    pub channel: usize,
    pub bmi: f64,
    pub ser: f64,
    pub snr_est_db: f64,
    pub loss_a: f64,
    pub loss_c: f64,
    pub status: RunStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub n: usize,
    /// Fewer finite values than expected.
    pub partial: bool,
}

/// Min/mean/max over the finite values; `None` when there are none.
pub fn aggregate(values: &[f64], expected: usize) -> Option<Summary> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return None;
    }
    let n = finite.len();
    Some(Summary {
        min: finite.iter().copied().fold(f64::INFINITY, f64::min),
        mean: finite.iter().sum::<f64>() / n as f64,
        max: finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        n,
        partial: n < expected,
    })
}
