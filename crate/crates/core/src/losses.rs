//! Soft demapping and training objectives.
//!
//! Gradients use the real-pair convention: for a real loss `L` and a
//! complex quantity `z`, the stored gradient is `dL/dRe z + j dL/dIm z`.
//! Adam consumes these directly.
//!
//! The VAE objective for one batch is
//!
//! ```text
//! L = A + sum_i N ln(C_i / N)
//! A   = sum_i sum_n KL(q_{i,n} || prior)
//! C_i = sum_k |y_ik - y_hat_ik|^2 + v_hat_ik
//! ```
//!
//! where `y_hat`/`v_hat` are the estimator projections of the posterior mean
//! and variance, and `N` is the number of received samples entering `C_i`.
//! The logarithmic reconstruction term is the expected Gaussian
//! log-likelihood with the per-channel noise variance at its maximum
//! likelihood value `C_i / N`; the same ratio gives the SNR estimate.

use std::f64::consts::LN_2;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cpr::{self, BpsConfig, PhaseTrack};
use crate::equalizer::{
    equalize_window, equalize_window_backward, estimate_channel_project, project_backward,
    window_len, ButterflyFilterBank,
};
use crate::signal::Constellation;
use crate::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Demapper noise variance per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseScale(Vec<f64>);

impl NoiseScale {
    pub fn new(per_channel: Vec<f64>) -> Result<Self> {
        if per_channel.is_empty() || per_channel.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "demapper noise variance must be finite and positive".into(),
            ));
        }
        Ok(Self(per_channel))
    }

    pub fn uniform(n_channels: usize, variance: f64) -> Result<Self> {
        Self::new(vec![variance; n_channels])
    }

    pub fn get(&self, ch: usize) -> f64 {
        self.0[ch]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-symbol categorical posteriors of every channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGrid {
    pub n_symbols: usize,
    pub order: usize,
    /// `q[ch][n * order + c]`.
    pub q: Vec<Vec<f64>>,
    pub log_q: Vec<Vec<f64>>,
    pub mean: Vec<Vec<Complex64>>,
    pub variance: Vec<Vec<f64>>,
}

impl PosteriorGrid {
    /// Build a grid from explicit probabilities (rows must sum to one).
    pub fn from_probabilities(q: Vec<Vec<f64>>, c: &Constellation) -> Result<Self> {
        let order = c.order();
        let n_symbols = q.first().map_or(0, |r| r.len() / order);
        for row in &q {
            if row.len() != n_symbols * order {
                return Err(Error::ShapeMismatch("ragged posterior grid".into()));
            }
            for p in row.chunks(order) {
                let s: f64 = p.iter().sum();
                if (s - 1.0).abs() > 1e-9 || p.iter().any(|v| *v < 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "categorical sums to {s}, expected 1"
                    )));
                }
            }
        }
        let log_q = q.iter().map(|r| r.iter().map(|v| v.ln()).collect()).collect();
        let mut grid = Self {
            n_symbols,
            order,
            q,
            log_q,
            mean: Vec::new(),
            variance: Vec::new(),
        };
        grid.fill_moments(c);
        Ok(grid)
    }

    pub fn n_channels(&self) -> usize {
        self.q.len()
    }

    pub fn probabilities(&self, ch: usize, n: usize) -> &[f64] {
        &self.q[ch][n * self.order..(n + 1) * self.order]
    }

    fn fill_moments(&mut self, c: &Constellation) {
        let order = self.order;
        self.mean = Vec::with_capacity(self.q.len());
        self.variance = Vec::with_capacity(self.q.len());
        for row in &self.q {
            let mut mu = Vec::with_capacity(self.n_symbols);
            let mut var = Vec::with_capacity(self.n_symbols);
            for p in row.chunks(order) {
                let (m, e) = moments(p, c.points());
                mu.push(m);
                var.push(e - m.norm_sqr());
            }
            self.mean.push(mu);
            self.variance.push(var);
        }
    }

    /// Bit LLRs `ln P(b=0) / P(b=1)`, `[ch][n * m + bit]`, from the same q.
    pub fn llrs(&self, c: &Constellation) -> Vec<Vec<f64>> {
        let m = c.bits_per_symbol();
        self.log_q
            .iter()
            .map(|row| {
                let mut out = Vec::with_capacity(self.n_symbols * m);
                for lq in row.chunks(self.order) {
                    for b in 0..m {
                        let mut zero = f64::NEG_INFINITY;
                        let mut one = f64::NEG_INFINITY;
                        for (k, &v) in lq.iter().enumerate() {
                            if c.bit(k, b) == 0 {
                                zero = log_add(zero, v);
                            } else {
                                one = log_add(one, v);
                            }
                        }
                        out.push(zero - one);
                    }
                }
                out
            })
            .collect()
    }
}

#[inline]
fn moments(p: &[f64], points: &[Complex64]) -> (Complex64, f64) {
    let mut m = ZERO;
    let mut e = 0.0;
    for (pk, c) in p.iter().zip(points) {
        m += c * *pk;
        e += pk * c.norm_sqr();
    }
    (m, e)
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Gaussian soft demapper `q_n(c) ∝ prior(c) exp(-|x_n - c|^2 / s^2)`.
pub fn soft_demap(x: &[Vec<Complex64>], c: &Constellation, s: &NoiseScale) -> Result<PosteriorGrid> {
    if s.len() < x.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} noise scales for {} channels",
            s.len(),
            x.len()
        )));
    }
    let order = c.order();
    let n_symbols = x.first().map_or(0, Vec::len);
    let log_prior: Vec<f64> = c.prior().iter().map(|p| p.ln()).collect();
    let mut q = Vec::with_capacity(x.len());
    let mut log_q = Vec::with_capacity(x.len());
    for (ch, xs) in x.iter().enumerate() {
        if xs.len() != n_symbols {
            return Err(Error::ShapeMismatch("channels differ in length".into()));
        }
        let inv = 1.0 / s.get(ch);
        let mut qr = vec![0.0; n_symbols * order];
        let mut lr = vec![0.0; n_symbols * order];
        for (n, &z) in xs.iter().enumerate() {
            let logits = &mut lr[n * order..(n + 1) * order];
            let mut top = f64::NEG_INFINITY;
            for ((l, p), lp) in logits.iter_mut().zip(c.points()).zip(&log_prior) {
                *l = lp - (z - p).norm_sqr() * inv;
                top = top.max(*l);
            }
            let probs = &mut qr[n * order..(n + 1) * order];
            let mut sum = 0.0;
            for (pk, l) in probs.iter_mut().zip(logits.iter()) {
                *pk = (l - top).exp();
                sum += *pk;
            }
            let lse = top + sum.ln();
            for (pk, l) in probs.iter_mut().zip(logits.iter_mut()) {
                *pk /= sum;
                *l -= lse;
            }
        }
        q.push(qr);
        log_q.push(lr);
    }
    let mut grid = PosteriorGrid {
        n_symbols,
        order,
        q,
        log_q,
        mean: Vec::new(),
        variance: Vec::new(),
    };
    grid.fill_moments(c);
    Ok(grid)
}

/// KL divergence `sum q ln(q / prior)` of every channel, in nats.
/// `q > 0` on a zero-prior point gives `+inf`.
pub fn kl_per_channel(q: &PosteriorGrid, c: &Constellation) -> Vec<f64> {
    let log_prior: Vec<f64> = c.prior().iter().map(|p| p.ln()).collect();
    q.q.iter()
        .zip(&q.log_q)
        .map(|(qr, lr)| {
            let mut a = 0.0;
            for (p, l) in qr.chunks(q.order).zip(lr.chunks(q.order)) {
                for k in 0..q.order {
                    if p[k] > 0.0 {
                        a += p[k] * (l[k] - log_prior[k]);
                    }
                }
            }
            a
        })
        .collect()
}

pub fn kl_term_a(q: &PosteriorGrid, c: &Constellation) -> f64 {
    kl_per_channel(q, c).iter().sum()
}

/// Expected reconstruction error and the number of samples it covers.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconTerm {
    pub per_channel: Vec<f64>,
    pub n_samples: usize,
}

impl ReconTerm {
    pub fn total(&self) -> f64 {
        self.per_channel.iter().sum()
    }
}

/// `C = sum_i sum_k |y_ik - y_hat_ik|^2 + v_hat_ik` over the valid part of
/// the batch, with the posterior means rotated by `e^{-j phase}` before
/// projection. `y` holds the batch's `2n` received samples per channel.
pub fn recon_term_c(
    y: &[Vec<Complex64>],
    est: &ButterflyFilterBank,
    q: &PosteriorGrid,
    phase: Option<&[Vec<f64>]>,
) -> Result<ReconTerm> {
    let mu = rotated_means(q, phase)?;
    Ok(recon_from_means(y, est, &mu, &q.variance)?.0)
}

fn rotated_means(q: &PosteriorGrid, phase: Option<&[Vec<f64>]>) -> Result<Vec<Vec<Complex64>>> {
    match phase {
        None => Ok(q.mean.clone()),
        Some(ph) => {
            if ph.len() != q.n_channels() || ph.iter().any(|p| p.len() != q.n_symbols) {
                return Err(Error::ShapeMismatch("phase must match the symbol grid".into()));
            }
            Ok(q.mean
                .iter()
                .zip(ph)
                .map(|(m, p)| {
                    m.iter().zip(p).map(|(z, a)| z * Complex64::from_polar(1.0, -a)).collect()
                })
                .collect())
        }
    }
}

/// Returns the reconstruction term and the residuals `y_hat - y`.
fn recon_from_means(
    y: &[Vec<Complex64>],
    est: &ButterflyFilterBank,
    mu: &[Vec<Complex64>],
    var: &[Vec<f64>],
) -> Result<(ReconTerm, Vec<Vec<Complex64>>)> {
    let n = mu.first().map_or(0, Vec::len);
    if y.len() != mu.len() || y.iter().any(|c| c.len() != 2 * n) {
        return Err(Error::ShapeMismatch(format!(
            "received batch must hold {} samples on {} channels",
            2 * n,
            mu.len()
        )));
    }
    let proj = estimate_channel_project(est, mu, var)?;
    let offset = est.center();
    let mut per_channel = Vec::with_capacity(y.len());
    let mut residual = Vec::with_capacity(y.len());
    for ((yc, mean), v) in y.iter().zip(&proj.mean).zip(&proj.variance) {
        let yv = &yc[offset..offset + mean.len()];
        let r: Vec<Complex64> = mean.iter().zip(yv).map(|(a, b)| a - b).collect();
        let c = r.iter().map(|z| z.norm_sqr()).sum::<f64>() + v.iter().sum::<f64>();
        per_channel.push(c);
        residual.push(r);
    }
    let n_samples = proj.mean.first().map_or(0, Vec::len);
    Ok((
        ReconTerm {
            per_channel,
            n_samples,
        },
        residual,
    ))
}

/// `sum_i N ln(C_i / N)`.
pub fn recon_objective(c: &ReconTerm) -> f64 {
    let n = c.n_samples as f64;
    c.per_channel.iter().map(|ci| n * (ci / n).ln()).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// KL term in nats.
    pub a: f64,
    /// Expected reconstruction error in received-power units.
    pub c: f64,
    pub a_per_channel: Vec<f64>,
    pub c_per_channel: Vec<f64>,
    /// Received samples entering each `C_i`.
    pub n_samples: usize,
    /// Objective value, `a + sum_i N ln(C_i / N)`.
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VaeVariant {
    /// Posterior straight from the equalizer output.
    Plain,
    /// Same objective as `Plain`; a hard CPR corrects the output for
    /// evaluation only.
    TrailingCpr,
    /// Differentiable CPR inside the objective; the projected symbols are
    /// rotated back by the estimated phase.
    TrainedCpr,
}

impl VaeVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::TrailingCpr => "trailing_cpr",
            Self::TrainedCpr => "trained_cpr",
        }
    }

    pub fn uses_cpr(self) -> bool {
        !matches!(self, Self::Plain)
    }
}

/// Equalizer input for one batch: `2 (n + 2 ctx - 1) + M_eq` samples that
/// start `(M_eq - 1) / 2` samples before the centre of the first context
/// symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchWindow {
    samples: Vec<Vec<Complex64>>,
    n_symbols: usize,
    context: usize,
    m_eq: usize,
}

impl BatchWindow {
    pub fn new(samples: Vec<Vec<Complex64>>, n_symbols: usize, context: usize, m_eq: usize) -> Result<Self> {
        let need = window_len(n_symbols + 2 * context, m_eq);
        if samples.is_empty() || samples.iter().any(|c| c.len() != need) {
            return Err(Error::ShapeMismatch(format!(
                "batch window needs {need} samples per channel"
            )));
        }
        Ok(Self {
            samples,
            n_symbols,
            context,
            m_eq,
        })
    }

    pub fn samples(&self) -> &[Vec<Complex64>] {
        &self.samples
    }

    pub fn n_symbols(&self) -> usize {
        self.n_symbols
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn n_outputs(&self) -> usize {
        self.n_symbols + 2 * self.context
    }

    /// The `2n` received samples of the batch proper.
    pub fn target(&self) -> Vec<Vec<Complex64>> {
        let start = 2 * self.context + self.m_eq / 2;
        self.samples
            .iter()
            .map(|c| c[start..start + 2 * self.n_symbols].to_vec())
            .collect()
    }

    fn check_bank(&self, eq: &ButterflyFilterBank) -> Result<()> {
        if eq.n_taps() != self.m_eq || eq.n_channels() != self.samples.len() {
            return Err(Error::ShapeMismatch("equalizer does not match the batch window".into()));
        }
        Ok(())
    }

    fn center<T: Clone>(&self, x: &[Vec<T>]) -> Vec<Vec<T>> {
        x.iter()
            .map(|c| c[self.context..self.context + self.n_symbols].to_vec())
            .collect()
    }
}

/// Gradients of a loss with respect to the equalizer and (where used) the
/// estimator taps.
#[derive(Clone, Debug, PartialEq)]
pub struct BankGrads {
    pub eq: Vec<Complex64>,
    pub est: Option<Vec<Complex64>>,
}

/// How the trained CPR forms the phase used in the forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum PhaseMode {
    /// Hard BPS angles, unwrapped.
    #[default]
    Hard,
    /// `phi_soft + offset`, with the offsets of a previous evaluation held
    /// fixed. At the point where the offsets were taken this equals `Hard`;
    /// around it, the function's derivative is the straight-through one.
    Frozen(Vec<Vec<f64>>),
}

/// Static part of the VAE objective.
#[derive(Clone, Debug)]
pub struct VaeLoss<'a> {
    pub constellation: &'a Constellation,
    pub noise: &'a NoiseScale,
    pub variant: VaeVariant,
    pub cpr: Option<&'a BpsConfig>,
}

/// Result of one forward pass, holding what the backward pass needs.
#[derive(Clone, Debug)]
pub struct VaeEvaluation {
    pub breakdown: LossBreakdown,
    /// Equalizer output including context symbols.
    pub equalized: Vec<Vec<Complex64>>,
    /// Posterior entering the objective.
    pub posterior: PosteriorGrid,
    /// Signal used for evaluation: the equalizer output, the trailing-CPR
    /// corrected output, or the derotated output of the trained CPR.
    pub scored: Vec<Vec<Complex64>>,
    /// CPR tracks over the extended range, one per channel.
    pub tracks: Option<Vec<PhaseTrack>>,
    /// Phase applied to the batch symbols (trained and trailing CPR).
    pub phase: Option<Vec<Vec<f64>>>,
    derotated: Vec<Vec<Complex64>>,
    rotated_mean: Vec<Vec<Complex64>>,
    residual: Vec<Vec<Complex64>>,
    recon: ReconTerm,
}

impl VaeEvaluation {
    /// `hard - soft` phase offsets, to be fed back as [`PhaseMode::Frozen`].
    pub fn straight_through_offsets(&self) -> Option<Vec<Vec<f64>>> {
        self.tracks.as_ref().map(|tracks| {
            tracks
                .iter()
                .map(|t| {
                    let soft = t.soft.as_ref().expect("trained CPR keeps the soft path");
                    t.unwrapped.iter().zip(soft).map(|(h, s)| h - s).collect()
                })
                .collect()
        })
    }

    /// Last batch phase of each channel, the unwrap reference for the next
    /// batch.
    pub fn last_phase(&self) -> Option<Vec<f64>> {
        self.phase
            .as_ref()
            .map(|p| p.iter().map(|c| *c.last().unwrap_or(&0.0)).collect())
    }
}

impl<'a> VaeLoss<'a> {
    pub fn new(
        constellation: &'a Constellation,
        noise: &'a NoiseScale,
        variant: VaeVariant,
        cpr: Option<&'a BpsConfig>,
    ) -> Result<Self> {
        if variant.uses_cpr() && cpr.is_none() {
            return Err(Error::MissingCprConfig(variant.name()));
        }
        Ok(Self {
            constellation,
            noise,
            variant,
            cpr,
        })
    }

    /// Forward pass. `reference` holds the per-channel phase of the symbol
    /// preceding the batch; each track is shifted by a multiple of `pi/2` so
    /// that its first batch symbol continues from it. The context symbols
    /// are not used for this because their averaging windows wrap around.
    pub fn evaluate(
        &self,
        window: &BatchWindow,
        eq: &ButterflyFilterBank,
        est: &ButterflyFilterBank,
        reference: Option<&[f64]>,
        mode: &PhaseMode,
    ) -> Result<VaeEvaluation> {
        window.check_bank(eq)?;
        let c = self.constellation;
        let equalized = equalize_window(eq, window.samples(), window.n_outputs())?;
        let center = window.center(&equalized);
        let n_ch = equalized.len();

        let mut tracks = None;
        let mut phase = None;
        let mut scored = None;
        let derotated = match self.variant {
            VaeVariant::Plain => center.clone(),
            VaeVariant::TrailingCpr => {
                let cfg = self.cpr.expect("checked in new");
                let t: Vec<PhaseTrack> = (0..n_ch)
                    .map(|ch| {
                        let m = cpr::bps_distances(&equalized[ch], c, cfg);
                        let mut t = cpr::bps_select_hard(&m, cfg, None);
                        if let Some(r) = reference {
                            cpr::anchor(&mut t.unwrapped, window.context(), r[ch]);
                        }
                        t
                    })
                    .collect();
                let ph = window.center(&t.iter().map(|t| t.unwrapped.clone()).collect::<Vec<_>>());
                scored = Some(
                    center
                        .iter()
                        .zip(&ph)
                        .map(|(x, p)| cpr::apply_cpr(x, p))
                        .collect::<Result<Vec<_>>>()?,
                );
                phase = Some(ph);
                center.clone()
            }
            VaeVariant::TrainedCpr => {
                let cfg = self.cpr.expect("checked in new");
                let t: Vec<PhaseTrack> = (0..n_ch)
                    .map(|ch| {
                        let m = cpr::bps_distances(&equalized[ch], c, cfg);
                        let mut t = cpr::bps_select_soft(&m, cfg, None);
                        if let Some(r) = reference {
                            cpr::anchor(&mut t.unwrapped, window.context(), r[ch]);
                        }
                        t
                    })
                    .collect();
                let used: Vec<Vec<f64>> = match mode {
                    PhaseMode::Hard => t.iter().map(|t| t.unwrapped.clone()).collect(),
                    PhaseMode::Frozen(offsets) => {
                        if offsets.len() != n_ch || offsets.iter().any(|o| o.len() != window.n_outputs()) {
                            return Err(Error::ShapeMismatch("frozen offsets do not match the window".into()));
                        }
                        t.iter()
                            .zip(offsets)
                            .map(|(t, o)| {
                                let soft = t.soft.as_ref().expect("soft path");
                                soft.iter().zip(o).map(|(s, o)| s + o).collect()
                            })
                            .collect()
                    }
                };
                let ph = window.center(&used);
                let d = center
                    .iter()
                    .zip(&ph)
                    .map(|(x, p)| cpr::apply_cpr(x, p))
                    .collect::<Result<Vec<_>>>()?;
                tracks = Some(t);
                phase = Some(ph);
                d
            }
        };

        let posterior = soft_demap(&derotated, c, self.noise)?;
        let a_per_channel = kl_per_channel(&posterior, c);
        // The projection re-applies the estimated carrier phase, i.e. the
        // means are rotated by the negative of the CPR correction.
        let rotated_mean = match (&self.variant, &phase) {
            (VaeVariant::TrainedCpr, Some(ph)) => {
                let neg: Vec<Vec<f64>> = ph.iter().map(|p| p.iter().map(|v| -v).collect()).collect();
                rotated_means(&posterior, Some(&neg))?
            }
            _ => posterior.mean.clone(),
        };
        let (recon, residual) = recon_from_means(&window.target(), est, &rotated_mean, &posterior.variance)?;
        let a: f64 = a_per_channel.iter().sum();
        let breakdown = LossBreakdown {
            a,
            c: recon.total(),
            a_per_channel,
            c_per_channel: recon.per_channel.clone(),
            n_samples: recon.n_samples,
            total: a + recon_objective(&recon),
        };
        let scored = scored.unwrap_or_else(|| derotated.clone());
        Ok(VaeEvaluation {
            breakdown,
            equalized,
            posterior,
            scored,
            tracks,
            phase,
            derotated,
            rotated_mean,
            residual,
            recon,
        })
    }

    /// Reverse pass for an evaluation produced by [`VaeLoss::evaluate`] with
    /// the same window and banks.
    pub fn gradients(
        &self,
        eval: &VaeEvaluation,
        window: &BatchWindow,
        eq: &ButterflyFilterBank,
        est: &ButterflyFilterBank,
    ) -> Result<BankGrads> {
        let c = self.constellation;
        let post = &eval.posterior;
        let n_ch = post.n_channels();
        let n = window.n_symbols();

        // d total / d C_i = N / C_i
        let nf = eval.recon.n_samples as f64;
        let mut g_mean = Vec::with_capacity(n_ch);
        let mut g_var = Vec::with_capacity(n_ch);
        for (r, ci) in eval.residual.iter().zip(&eval.recon.per_channel) {
            let w = nf / ci;
            g_mean.push(r.iter().map(|z| z * (2.0 * w)).collect::<Vec<_>>());
            g_var.push(vec![w; r.len()]);
        }
        let pg = project_backward(est, &eval.rotated_mean, &post.variance, &g_mean, &g_var);

        // Undo the projection-side rotation mu' = mu e^{j phi}.
        let mut g_mu = pg.mu;
        let mut g_phi = vec![vec![0.0; n]; n_ch];
        if let (VaeVariant::TrainedCpr, Some(ph)) = (self.variant, &eval.phase) {
            for ch in 0..n_ch {
                for k in 0..n {
                    let g = g_mu[ch][k];
                    let rotated = eval.rotated_mean[ch][k];
                    g_phi[ch][k] += (g.conj() * Complex64::i() * rotated).re;
                    g_mu[ch][k] = g * Complex64::from_polar(1.0, -ph[ch][k]);
                }
            }
        }

        let g_z = demap_backward(&eval.derotated, post, c, self.noise, &g_mu, &pg.var);

        let n_out = window.n_outputs();
        let ctx = window.context();
        let mut g_x = vec![vec![ZERO; n_out]; n_ch];
        match (self.variant, &eval.phase) {
            (VaeVariant::TrainedCpr, Some(ph)) => {
                let cfg = self.cpr.expect("checked in new");
                let tracks = eval.tracks.as_ref().expect("trained CPR keeps tracks");
                for ch in 0..n_ch {
                    let mut g_soft = vec![0.0; n_out];
                    for k in 0..n {
                        // z = x e^{-j phi}
                        let z = eval.derotated[ch][k];
                        let gz = g_z[ch][k];
                        g_x[ch][ctx + k] = gz * Complex64::from_polar(1.0, ph[ch][k]);
                        g_soft[ctx + k] = g_phi[ch][k] + (gz.conj() * (-Complex64::i()) * z).re;
                    }
                    let back = cpr::soft_phase_backward(&eval.equalized[ch], c, cfg, &tracks[ch], &g_soft)?;
                    for (g, b) in g_x[ch].iter_mut().zip(back) {
                        *g += b;
                    }
                }
                let eq_grad = equalize_window_backward(eq, window.samples(), 0, &g_x);
                Ok(BankGrads {
                    eq: eq_grad,
                    est: Some(pg.taps),
                })
            }
            _ => {
                let eq_grad = equalize_window_backward(eq, window.samples(), ctx, &g_z);
                Ok(BankGrads {
                    eq: eq_grad,
                    est: Some(pg.taps),
                })
            }
        }
    }
}

/// Gradient with respect to the demapper input of
/// `A + (terms in the posterior mean and variance)`.
fn demap_backward(
    z: &[Vec<Complex64>],
    post: &PosteriorGrid,
    c: &Constellation,
    noise: &NoiseScale,
    g_mu: &[Vec<Complex64>],
    g_var: &[Vec<f64>],
) -> Vec<Vec<Complex64>> {
    let order = post.order;
    let points = c.points();
    let log_prior: Vec<f64> = c.prior().iter().map(|p| p.ln()).collect();
    let mut out = Vec::with_capacity(z.len());
    let mut ds = vec![0.0; order];
    for ch in 0..z.len() {
        let inv = 1.0 / noise.get(ch);
        let mut row = Vec::with_capacity(post.n_symbols);
        for n in 0..post.n_symbols {
            let q = post.probabilities(ch, n);
            let lq = &post.log_q[ch][n * order..(n + 1) * order];
            let mu = post.mean[ch][n];
            let gv = g_var[ch][n];
            let big_g = g_mu[ch][n] - mu * (2.0 * gv);
            // Per-point upstream gradients: mean/variance part and KL part.
            let mut avg_q = 0.0;
            let mut kl = 0.0;
            for k in 0..order {
                if q[k] > 0.0 {
                    let gq = big_g.re * points[k].re + big_g.im * points[k].im + gv * points[k].norm_sqr();
                    let f = lq[k] - log_prior[k];
                    ds[k] = gq;
                    avg_q += q[k] * gq;
                    kl += q[k] * f;
                }
            }
            let x = z[ch][n];
            let mut g = ZERO;
            for k in 0..order {
                if q[k] > 0.0 {
                    let f = lq[k] - log_prior[k];
                    let d = q[k] * (ds[k] - avg_q) + q[k] * (f - kl);
                    g += (x - points[k]) * (-2.0 * inv * d);
                }
            }
            row.push(g);
        }
        out.push(row);
    }
    out
}

/// Godard constant-modulus loss `sum (|x|^2 - R)^2`.
pub fn cm_loss(x: &[Vec<Complex64>], c: &Constellation) -> f64 {
    let r = c.godard_radius();
    x.iter()
        .flatten()
        .map(|z| (z.norm_sqr() - r).powi(2))
        .sum()
}

/// `4 (|x|^2 - R) x` per symbol.
pub fn cm_loss_grad(x: &[Vec<Complex64>], c: &Constellation) -> Vec<Vec<Complex64>> {
    let r = c.godard_radius();
    x.iter()
        .map(|ch| ch.iter().map(|z| z * (4.0 * (z.norm_sqr() - r))).collect())
        .collect()
}

/// Supervised phase per channel, `arg sum x conj(pilot)`; zero for an
/// all-zero correlation.
pub fn pilot_phase(x: &[Vec<Complex64>], pilot: &[Vec<Complex64>]) -> Vec<f64> {
    x.iter()
        .zip(pilot)
        .map(|(a, b)| {
            let s: Complex64 = a.iter().zip(b).map(|(x, p)| x * p.conj()).sum();
            if s.norm() == 0.0 {
                0.0
            } else {
                s.arg()
            }
        })
        .collect()
}

/// Pilot-aided MSE after closed-form phase recovery per channel.
pub fn pilot_mse_loss(x: &[Vec<Complex64>], pilot: &[Vec<Complex64>]) -> Result<f64> {
    check_pilot(x, pilot)?;
    let theta = pilot_phase(x, pilot);
    Ok(x.iter()
        .zip(pilot)
        .zip(&theta)
        .map(|((a, b), t)| {
            let rot = Complex64::from_polar(1.0, -t);
            a.iter().zip(b).map(|(x, p)| (x * rot - p).norm_sqr()).sum::<f64>()
        })
        .sum())
}

/// Gradient of [`pilot_mse_loss`] with the recovered phase held constant.
pub fn pilot_mse_grad(x: &[Vec<Complex64>], pilot: &[Vec<Complex64>]) -> Result<Vec<Vec<Complex64>>> {
    check_pilot(x, pilot)?;
    let theta = pilot_phase(x, pilot);
    Ok(x.iter()
        .zip(pilot)
        .zip(&theta)
        .map(|((a, b), t)| {
            let rot = Complex64::from_polar(1.0, -t);
            a.iter().zip(b).map(|(x, p)| (x * rot - p) * rot.conj() * 2.0).collect()
        })
        .collect())
}

fn check_pilot(x: &[Vec<Complex64>], pilot: &[Vec<Complex64>]) -> Result<()> {
    if x.len() != pilot.len() || x.iter().zip(pilot).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::ShapeMismatch("pilot length must equal batch length".into()));
    }
    Ok(())
}

/// CM loss of one batch with its equalizer gradient.
pub fn cm_batch(
    window: &BatchWindow,
    eq: &ButterflyFilterBank,
    c: &Constellation,
) -> Result<(f64, Vec<Vec<Complex64>>, BankGrads)> {
    window.check_bank(eq)?;
    let x = window.center(&equalize_window(eq, window.samples(), window.n_outputs())?);
    let loss = cm_loss(&x, c);
    let g = cm_loss_grad(&x, c);
    let eq_grad = equalize_window_backward(eq, window.samples(), window.context(), &g);
    Ok((loss, x, BankGrads { eq: eq_grad, est: None }))
}

/// Pilot-aided MSE of one batch with its equalizer gradient.
pub fn pilot_batch(
    window: &BatchWindow,
    eq: &ButterflyFilterBank,
    pilot: &[Vec<Complex64>],
) -> Result<(f64, Vec<Vec<Complex64>>, BankGrads)> {
    window.check_bank(eq)?;
    let x = window.center(&equalize_window(eq, window.samples(), window.n_outputs())?);
    let loss = pilot_mse_loss(&x, pilot)?;
    let g = pilot_mse_grad(&x, pilot)?;
    let eq_grad = equalize_window_backward(eq, window.samples(), window.context(), &g);
    Ok((loss, x, BankGrads { eq: eq_grad, est: None }))
}

/// Bits per nat, for reporting KL terms in bits.
pub fn nats_to_bits(v: f64) -> f64 {
    v / LN_2
}
