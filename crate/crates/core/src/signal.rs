//! Constellations, bit labels and pulse shaping.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Square QAM alphabet with Gray labels and a symbol prior.
///
/// Point `i` sits at in-phase level `i / side` and quadrature level
/// `i % side`. Labels are the per-axis reflected binary codes with the
/// in-phase bits in the upper half of the label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constellation {
    points: Vec<Complex64>,
    labels: Vec<u32>,
    prior: Vec<f64>,
    bits_per_symbol: usize,
    side: usize,
    scale: f64,
}

impl Constellation {
    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn order(&self) -> usize {
        self.points.len()
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.bits_per_symbol
    }

    /// Distance between neighbouring levels on one axis is `2 * scale`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Bit `b` (0 = most significant) of the label of point `index`.
    #[inline]
    pub fn bit(&self, index: usize, b: usize) -> u8 {
        ((self.labels[index] >> (self.bits_per_symbol - 1 - b)) & 1) as u8
    }

    /// Index of the point carrying `label`.
    pub fn index_of_label(&self, label: u32) -> usize {
        let half = self.bits_per_symbol / 2;
        let gi = (label >> half) as usize;
        let gq = (label & ((1 << half) - 1)) as usize;
        gray_decode(gi) * self.side + gray_decode(gq)
    }

    /// Nearest point by Euclidean distance, via per-axis slicing.
    #[inline]
    pub fn nearest(&self, z: Complex64) -> usize {
        let half_span = (self.side - 1) as f64;
        let slice = |v: f64| -> usize {
            let a = ((v / self.scale + half_span) / 2.0).round();
            a.clamp(0.0, half_span) as usize
        };
        slice(z.re) * self.side + slice(z.im)
    }

    /// Godard radius `E|c|^4 / E|c|^2` under the prior.
    pub fn godard_radius(&self) -> f64 {
        let (m2, m4) = self
            .points
            .iter()
            .zip(&self.prior)
            .fold((0.0, 0.0), |(m2, m4), (c, p)| {
                let e = c.norm_sqr();
                (m2 + p * e, m4 + p * e * e)
            });
        m4 / m2
    }
}

fn gray_decode(mut g: usize) -> usize {
    let mut b = g;
    while g > 1 {
        g >>= 1;
        b ^= g;
    }
    b
}

/// Unit-energy Gray-labelled square QAM. A uniform prior is used when
/// `prior` is `None`.
pub fn make_qam(order: usize, prior: Option<&[f64]>) -> Result<Constellation> {
    let side = match order {
        4 => 2,
        16 => 4,
        64 => 8,
        256 => 16,
        _ => return Err(Error::UnsupportedOrder(order)),
    };
    let bits_per_symbol = order.trailing_zeros() as usize;
    let half = bits_per_symbol / 2;

    let prior = match prior {
        None => vec![1.0 / order as f64; order],
        Some(p) => {
            if p.len() != order {
                return Err(Error::InvalidPrior(format!(
                    "expected {order} entries, got {}",
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidPrior("entries must be finite and non-negative".into()));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidPrior(format!("entries sum to {s}, expected 1")));
            }
            p.iter().map(|v| v / s).collect()
        }
    };

    let level = |a: usize| (2 * a) as f64 - (side - 1) as f64;
    let mut grid = Vec::with_capacity(order);
    let mut labels = Vec::with_capacity(order);
    for ai in 0..side {
        for aq in 0..side {
            grid.push(Complex64::new(level(ai), level(aq)));
            let gi = (ai ^ (ai >> 1)) as u32;
            let gq = (aq ^ (aq >> 1)) as u32;
            labels.push((gi << half) | gq);
        }
    }
    let energy: f64 = grid.iter().zip(&prior).map(|(c, p)| p * c.norm_sqr()).sum();
    let scale = 1.0 / energy.sqrt();
    let points = grid.into_iter().map(|c| c * scale).collect();

    Ok(Constellation {
        points,
        labels,
        prior,
        bits_per_symbol,
        side,
        scale,
    })
}

/// Multi-channel complex baseband buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSequence {
    channels: Vec<Vec<Complex64>>,
    sps: usize,
}

impl ComplexSequence {
    pub fn new(channels: Vec<Vec<Complex64>>, sps: usize) -> Result<Self> {
        if sps == 0 {
            return Err(Error::InvalidParameter("sps must be at least 1".into()));
        }
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::ShapeMismatch("channels differ in length".into()));
        }
        if !len.is_multiple_of(sps) {
            return Err(Error::ShapeMismatch(format!(
                "length {len} is not a multiple of sps {sps}"
            )));
        }
        Ok(Self { channels, sps })
    }

    pub fn zeros(n_channels: usize, len: usize, sps: usize) -> Result<Self> {
        Self::new(vec![vec![Complex64::new(0.0, 0.0); len]; n_channels], sps)
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sps(&self) -> usize {
        self.sps
    }

    pub fn channel(&self, i: usize) -> &[Complex64] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<Complex64>] {
        &self.channels
    }

    pub fn channels_mut(&mut self) -> &mut [Vec<Complex64>] {
        &mut self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<Complex64>> {
        self.channels
    }

    /// Mean `|x|^2` of each channel.
    pub fn channel_powers(&self) -> Vec<f64> {
        self.channels.iter().map(|c| mean_power(c)).collect()
    }
}

pub fn mean_power(x: &[Complex64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v.norm_sqr()).sum::<f64>() / x.len() as f64
}

/// Root-raised-cosine taps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RrcFilter {
    pub rolloff: f64,
    pub span: usize,
    pub sps: usize,
    pub taps: Vec<f64>,
}

/// Unit-energy RRC filter of `span * sps - 1` taps, covering the open
/// interval of `span` symbols around the peak.
pub fn rrc_taps(rolloff: f64, span: usize, sps: usize) -> Result<RrcFilter> {
    if !(0.0..=1.0).contains(&rolloff) {
        return Err(Error::InvalidParameter(format!("rolloff {rolloff} outside [0, 1]")));
    }
    if span == 0 || !span.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("span {span} must be even and positive")));
    }
    if sps < 2 {
        return Err(Error::InvalidParameter(format!("sps {sps} must be at least 2")));
    }
    let n = span * sps - 1;
    let center = (n / 2) as i64;
    let mut taps: Vec<f64> = (0..n as i64)
        .map(|k| rrc_impulse((k - center) as f64 / sps as f64, rolloff))
        .collect();
    let energy: f64 = taps.iter().map(|t| t * t).sum();
    let norm = energy.sqrt();
    taps.iter_mut().for_each(|t| *t /= norm);
    Ok(RrcFilter {
        rolloff,
        span,
        sps,
        taps,
    })
}

/// Continuous RRC impulse response at `t` symbol periods.
fn rrc_impulse(t: f64, beta: f64) -> f64 {
    if t == 0.0 {
        return 1.0 - beta + 4.0 * beta / PI;
    }
    if beta > 0.0 && ((4.0 * beta * t).abs() - 1.0).abs() < 1e-12 {
        let a = PI / (4.0 * beta);
        return beta / 2f64.sqrt() * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos());
    }
    let num = (PI * t * (1.0 - beta)).sin() + 4.0 * beta * t * (PI * t * (1.0 + beta)).cos();
    let den = PI * t * (1.0 - (4.0 * beta * t).powi(2));
    num / den
}

/// Map groups of `bits_per_symbol` bits (MSB first) to their labelled points.
pub fn map_bits(bits: &[u8], c: &Constellation) -> Result<ComplexSequence> {
    let m = c.bits_per_symbol();
    if !bits.len().is_multiple_of(m) {
        return Err(Error::ShapeMismatch(format!(
            "{} bits is not a multiple of {m}",
            bits.len()
        )));
    }
    let symbols = bits
        .chunks(m)
        .map(|chunk| {
            let label = chunk.iter().fold(0u32, |acc, &b| (acc << 1) | u32::from(b & 1));
            c.points()[c.index_of_label(label)]
        })
        .collect();
    ComplexSequence::new(vec![symbols], 1)
}

/// Hard-decision demap back to bits (MSB first per symbol).
pub fn demap_hard(symbols: &[Complex64], c: &Constellation) -> Vec<u8> {
    let m = c.bits_per_symbol();
    let mut out = Vec::with_capacity(symbols.len() * m);
    for &z in symbols {
        let idx = c.nearest(z);
        out.extend((0..m).map(|b| c.bit(idx, b)));
    }
    out
}

/// Zero-insertion upsampling followed by same-length circular convolution
/// with the filter taps, centred on the middle tap.
pub fn upsample_and_shape(symbols: &ComplexSequence, f: &RrcFilter) -> Result<ComplexSequence> {
    if symbols.sps() != 1 {
        return Err(Error::InvalidParameter("input must be symbol spaced".into()));
    }
    let channels = symbols
        .channels()
        .iter()
        .map(|ch| shape_circular(ch, f))
        .collect();
    ComplexSequence::new(channels, f.sps)
}

pub(crate) fn shape_circular(symbols: &[Complex64], f: &RrcFilter) -> Vec<Complex64> {
    let sps = f.sps;
    let n = symbols.len() * sps;
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    if n == 0 {
        return out;
    }
    let center = f.taps.len() / 2;
    // Each symbol spreads its scaled copy of the taps around position k*sps.
    for (k, &s) in symbols.iter().enumerate() {
        if s.re == 0.0 && s.im == 0.0 {
            continue;
        }
        let base = (k * sps) as i64 - center as i64;
        for (m, &t) in f.taps.iter().enumerate() {
            let idx = (base + m as i64).rem_euclid(n as i64) as usize;
            out[idx] += s * t;
        }
    }
    out
}
