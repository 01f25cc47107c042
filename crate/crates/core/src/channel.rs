//! Linear multi-core fiber link: per-core dual-polarization frequency
//! response, channel permutation, Wiener phase noise and AWGN.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::signal::{shape_circular, ComplexSequence, Constellation, RrcFilter};
use crate::{Error, Result};

/// Parameters of one core's 2x2 frequency response.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreChannelParams {
    /// Polarization rotation angle in radians.
    pub gamma_hv: f64,
    /// Differential group delay in seconds.
    pub tau_pmd: f64,
    /// Accumulated residual dispersion beta_2 * L in s^2.
    pub beta_cd_l: f64,
    /// Symbol rate in baud.
    pub symbol_rate: f64,
}

impl CoreChannelParams {
    /// 90 GBd core with a pi/10 rotation, sqrt(1000) * 0.1 ps DGD and
    /// -26 ps^2 * 2 residual dispersion.
    pub fn reference() -> Self {
        Self {
            gamma_hv: PI / 10.0,
            tau_pmd: 1000f64.sqrt() * 0.1e-12,
            beta_cd_l: -26e-24 * 2.0,
            symbol_rate: 90e9,
        }
    }

    /// All impairments off.
    pub fn transparent(symbol_rate: f64) -> Self {
        Self {
            gamma_hv: 0.0,
            tau_pmd: 0.0,
            beta_cd_l: 0.0,
            symbol_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_pmd >= 0.0) {
            return Err(Error::InvalidParameter("tau_pmd must be non-negative".into()));
        }
        if !(self.symbol_rate > 0.0) {
            return Err(Error::InvalidParameter("symbol rate must be positive".into()));
        }
        Ok(())
    }
}

/// Laser phase noise described by its linewidth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseNoiseParams {
    pub linewidth_hz: f64,
    pub symbol_rate: f64,
}

impl PhaseNoiseParams {
    pub fn new(linewidth_hz: f64, symbol_rate: f64) -> Result<Self> {
        if !(linewidth_hz >= 0.0) || !(symbol_rate > 0.0) {
            return Err(Error::InvalidParameter(
                "linewidth must be >= 0 and symbol rate > 0".into(),
            ));
        }
        Ok(Self {
            linewidth_hz,
            symbol_rate,
        })
    }

    /// Per-symbol increment variance `2 * pi * linewidth / R_S` in rad^2.
    pub fn per_symbol_variance(&self) -> f64 {
        2.0 * PI * self.linewidth_hz / self.symbol_rate
    }

    pub fn enabled(&self) -> bool {
        self.linewidth_hz > 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub cores: usize,
    pub core_params: Vec<CoreChannelParams>,
    /// Output channel `i` carries filtered channel `permutation[i]`.
    pub permutation: Vec<usize>,
    pub snr_db: f64,
    pub phase_noise: PhaseNoiseParams,
    pub seed: u64,
}

impl LinkConfig {
    /// Same parameters on every core and a permutation drawn uniformly
    /// from the seed.
    pub fn with_random_permutation(
        cores: usize,
        params: CoreChannelParams,
        snr_db: f64,
        phase_noise: PhaseNoiseParams,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = stream_rng(seed, RngStream::Permutation);
        let mut permutation: Vec<usize> = (0..2 * cores).collect();
        permutation.shuffle(&mut rng);
        let cfg = Self {
            cores,
            core_params: vec![params; cores],
            permutation,
            snr_db,
            phase_noise,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_channels(&self) -> usize {
        2 * self.cores
    }

    pub fn validate(&self) -> Result<()> {
        if self.cores == 0 {
            return Err(Error::InvalidParameter("at least one core is required".into()));
        }
        if self.core_params.len() != self.cores {
            return Err(Error::ShapeMismatch(format!(
                "{} core parameter sets for {} cores",
                self.core_params.len(),
                self.cores
            )));
        }
        self.core_params.iter().try_for_each(CoreChannelParams::validate)?;
        if !is_permutation(&self.permutation, self.n_channels()) {
            return Err(Error::InvalidParameter(format!(
                "{:?} is not a permutation of 0..{}",
                self.permutation,
                self.n_channels()
            )));
        }
        if self.snr_db.is_nan() {
            return Err(Error::InvalidParameter("snr_db is NaN".into()));
        }
        Ok(())
    }
}

pub fn is_permutation(p: &[usize], n: usize) -> bool {
    if p.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &v in p {
        if v >= n || seen[v] {
            return false;
        }
        seen[v] = true;
    }
    true
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum RngStream {
    Permutation = 1,
    Symbols = 2,
    PhaseNoise = 3,
    Noise = 4,
}

pub(crate) fn stream_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Frequencies of an `n`-point FFT grid at `sample_rate`, in standard
/// FFT order (non-negative first, then the negative half).
pub fn fft_frequencies(n: usize, sample_rate: f64) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let k = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
            k * sample_rate / n as f64
        })
        .collect()
}

pub type Matrix2 = [[Complex64; 2]; 2];

/// `H(f) = R(gamma) * diag(e^{j pi tau f}, e^{-j pi tau f}) * e^{-j 2 pi^2 beta L f^2}`.
pub fn core_frequency_response(p: &CoreChannelParams, freqs: &[f64]) -> Vec<Matrix2> {
    let (s, c) = p.gamma_hv.sin_cos();
    freqs
        .iter()
        .map(|&f| {
            let cd = Complex64::from_polar(1.0, -2.0 * PI * PI * p.beta_cd_l * f * f);
            let d0 = Complex64::from_polar(1.0, PI * p.tau_pmd * f) * cd;
            let d1 = Complex64::from_polar(1.0, -PI * p.tau_pmd * f) * cd;
            [[d0 * c, -d1 * s], [d0 * s, d1 * c]]
        })
        .collect()
}

struct FftPair {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plan(planner: &mut FftPlanner<f64>, n: usize) -> FftPair {
    FftPair {
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }
}

/// Circularly filter every core's polarization pair in place.
fn filter_cores_with(
    channels: &mut [Vec<Complex64>],
    params: &[CoreChannelParams],
    sps: usize,
    fft: &FftPair,
) {
    let n = channels.first().map_or(0, Vec::len);
    if n == 0 {
        return;
    }
    for (core, p) in params.iter().enumerate() {
        let h = core_frequency_response(p, &fft_frequencies(n, p.symbol_rate * sps as f64));
        let (lo, hi) = channels.split_at_mut(2 * core + 1);
        let x0 = &mut lo[2 * core];
        let x1 = &mut hi[0];
        fft.forward.process(x0);
        fft.forward.process(x1);
        let scale = 1.0 / n as f64;
        for k in 0..n {
            let (a, b) = (x0[k], x1[k]);
            x0[k] = (h[k][0][0] * a + h[k][0][1] * b) * scale;
            x1[k] = (h[k][1][0] * a + h[k][1][1] * b) * scale;
        }
        fft.inverse.process(x0);
        fft.inverse.process(x1);
    }
}

/// Per-core unitary filtering followed by the channel permutation; the
/// deterministic part of the link.
pub fn apply_linear(tx: &ComplexSequence, cfg: &LinkConfig) -> Result<ComplexSequence> {
    cfg.validate()?;
    if tx.n_channels() != cfg.n_channels() {
        return Err(Error::ShapeMismatch(format!(
            "link expects {} channels, got {}",
            cfg.n_channels(),
            tx.n_channels()
        )));
    }
    let mut channels = tx.channels().to_vec();
    let mut planner = FftPlanner::new();
    let fft = plan(&mut planner, tx.len());
    filter_cores_with(&mut channels, &cfg.core_params, tx.sps(), &fft);
    let permuted = cfg.permutation.iter().map(|&src| channels[src].clone()).collect();
    ComplexSequence::new(permuted, tx.sps())
}

/// Full link on a periodic sequence: linear part, then independent Wiener
/// phase noise per channel, then AWGN at the configured SNR.
pub fn apply_link(tx: &ComplexSequence, cfg: &LinkConfig) -> Result<ComplexSequence> {
    let mut out = apply_linear(tx, cfg)?;
    let sps = tx.sps();
    if cfg.phase_noise.enabled() {
        let mut rng = stream_rng(cfg.seed, RngStream::PhaseNoise);
        let var = cfg.phase_noise.per_symbol_variance() / sps as f64;
        for ch in out.channels_mut() {
            let phase = wiener_phase(ch.len(), var, &mut rng);
            for (z, p) in ch.iter_mut().zip(phase) {
                *z *= Complex64::from_polar(1.0, p);
            }
        }
    }
    let mut rng = stream_rng(cfg.seed, RngStream::Noise);
    awgn(&out, cfg.snr_db, &mut rng)
}

/// Wiener phase path: uniform start in `[0, 2 pi)`, Gaussian increments of
/// variance `variance`.
pub fn wiener_phase<R: Rng + ?Sized>(n: usize, variance: f64, rng: &mut R) -> Vec<f64> {
    let mut w = WienerProcess::new(variance, rng);
    (0..n).map(|_| w.next(rng)).collect()
}

/// Streaming form of [`wiener_phase`].
#[derive(Clone, Debug)]
pub struct WienerProcess {
    phase: f64,
    std: f64,
    started: bool,
}

impl WienerProcess {
    pub fn new<R: Rng + ?Sized>(variance: f64, rng: &mut R) -> Self {
        Self {
            phase: rng.random_range(0.0..2.0 * PI),
            std: variance.max(0.0).sqrt(),
            started: false,
        }
    }

    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        if self.started {
            let w: f64 = StandardNormal.sample(rng);
            self.phase += self.std * w;
        }
        self.started = true;
        self.phase
    }
}

/// Add circular complex Gaussian noise per channel with variance
/// `P_ch / 10^(snr_db / 10)`, `P_ch` being the measured channel power.
pub fn awgn<R: Rng + ?Sized>(x: &ComplexSequence, snr_db: f64, rng: &mut R) -> Result<ComplexSequence> {
    if x.is_empty() {
        return Err(Error::InvalidParameter("cannot add noise to an empty sequence".into()));
    }
    let mut out = x.clone();
    for ch in out.channels_mut() {
        add_noise(ch, snr_db, rng);
    }
    Ok(out)
}

fn add_noise<R: Rng + ?Sized>(ch: &mut [Complex64], snr_db: f64, rng: &mut R) {
    let var = crate::signal::mean_power(ch) / 10f64.powf(snr_db / 10.0);
    if !(var > 0.0) || !var.is_finite() {
        return;
    }
    let normal = Normal::new(0.0, (var / 2.0).sqrt()).expect("finite std");
    for z in ch.iter_mut() {
        *z += Complex64::new(normal.sample(rng), normal.sample(rng));
    }
}

/// Chunk of received samples with the transmit symbols that produced it.
#[derive(Clone, Debug)]
pub struct LinkChunk {
    pub samples: ComplexSequence,
    /// Transmit symbol indices per transmit channel (before permutation).
    pub symbols: Vec<Vec<u16>>,
}

/// Streaming transmitter + link. Successive chunks form one continuous
/// signal: the linear part runs overlap-save style on blocks padded with
/// `margin` symbols of true neighbours on both sides, while phase noise
/// continues across chunk borders.
pub struct LinkSimulator {
    cfg: LinkConfig,
    constellation: Constellation,
    filter: RrcFilter,
    margin: usize,
    /// Symbols from `buffered_from` onwards, per transmit channel.
    tx: Vec<Vec<u16>>,
    buffered_from: i64,
    position: i64,
    prior_cdf: Vec<f64>,
    symbol_rng: ChaCha8Rng,
    phase_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    wiener: Vec<WienerProcess>,
    planner: FftPlanner<f64>,
}

impl LinkSimulator {
    pub fn new(cfg: LinkConfig, constellation: Constellation, filter: RrcFilter) -> Result<Self> {
        cfg.validate()?;
        let sps = filter.sps;
        let margin = filter.span / 2 + 48;
        let mut phase_rng = stream_rng(cfg.seed, RngStream::PhaseNoise);
        let var = cfg.phase_noise.per_symbol_variance() / sps as f64;
        let wiener = (0..cfg.n_channels())
            .map(|_| WienerProcess::new(var, &mut phase_rng))
            .collect();
        let mut acc = 0.0;
        let prior_cdf = constellation
            .prior()
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self {
            tx: vec![Vec::new(); cfg.n_channels()],
            buffered_from: -(margin as i64),
            position: 0,
            prior_cdf,
            symbol_rng: stream_rng(cfg.seed, RngStream::Symbols),
            noise_rng: stream_rng(cfg.seed, RngStream::Noise),
            phase_rng,
            wiener,
            planner: FftPlanner::new(),
            margin,
            cfg,
            constellation,
            filter,
        })
    }

    pub fn config(&self) -> &LinkConfig {
        &self.cfg
    }

    pub fn constellation(&self) -> &Constellation {
        &self.constellation
    }

    pub fn sps(&self) -> usize {
        self.filter.sps
    }

    fn draw_symbol(&mut self) -> u16 {
        let u: f64 = self.symbol_rng.random();
        let idx = self.prior_cdf.partition_point(|&c| c <= u);
        idx.min(self.prior_cdf.len() - 1) as u16
    }

    fn ensure_generated(&mut self, until: i64) {
        let have = self.buffered_from + self.tx[0].len() as i64;
        for _ in have..until {
            for ch in 0..self.tx.len() {
                let s = self.draw_symbol();
                self.tx[ch].push(s);
            }
        }
    }

    /// Next `n` symbols worth of received samples.
    pub fn next_chunk(&mut self, n: usize) -> LinkChunk {
        let sps = self.filter.sps;
        let margin = self.margin as i64;
        let start = self.position;
        let end = start + n as i64;
        self.ensure_generated(end + margin);

        let lo = (start - margin - self.buffered_from) as usize;
        let hi = (end + margin - self.buffered_from) as usize;
        let points = self.constellation.points();
        let mut block: Vec<Vec<Complex64>> = self
            .tx
            .iter()
            .map(|ch| {
                let symbols: Vec<Complex64> =
                    ch[lo..hi].iter().map(|&s| points[s as usize]).collect();
                shape_circular(&symbols, &self.filter)
            })
            .collect();
        let fft = plan(&mut self.planner, block[0].len());
        filter_cores_with(&mut block, &self.cfg.core_params, sps, &fft);

        let keep = self.margin * sps..(self.margin + n) * sps;
        let mut out: Vec<Vec<Complex64>> = self
            .cfg
            .permutation
            .iter()
            .map(|&src| block[src][keep.clone()].to_vec())
            .collect();
        if self.cfg.phase_noise.enabled() {
            for (ch, w) in out.iter_mut().zip(self.wiener.iter_mut()) {
                for z in ch.iter_mut() {
                    *z *= Complex64::from_polar(1.0, w.next(&mut self.phase_rng));
                }
            }
        }
        for ch in out.iter_mut() {
            add_noise(ch, self.cfg.snr_db, &mut self.noise_rng);
        }

        let sym_lo = (start - self.buffered_from) as usize;
        let symbols = self
            .tx
            .iter()
            .map(|ch| ch[sym_lo..sym_lo + n].to_vec())
            .collect();

        // Keep `margin` symbols of history for the next block.
        let drop = (end - margin - self.buffered_from).max(0) as usize;
        for ch in self.tx.iter_mut() {
            ch.drain(..drop);
        }
        self.buffered_from += drop as i64;
        self.position = end;

        LinkChunk {
            samples: ComplexSequence::new(out, sps).expect("consistent chunk shape"),
            symbols,
        }
    }
}
