//! Butterfly FIR banks for the equalizer (2 sps in, 1 sps out) and the
//! channel estimator (1 sps in, 2 sps out), batch windowing and Adam.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::signal::ComplexSequence;
use crate::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    /// Unit centre tap on the diagonal filters.
    CenterSpike,
    Zeros,
}

/// `n_ch x n_ch` matrix of complex FIR filters of odd length `m`, stored
/// row-major as `[i][j][m]`: output `i`, input `j`, tap `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ButterflyFilterBank {
    n_ch: usize,
    m: usize,
    taps: Vec<Complex64>,
}

/// Create a bank. Even tap counts are rejected since the centre tap anchors
/// the symbol timing.
pub fn init_bank(n_ch: usize, m: usize, mode: InitMode) -> Result<ButterflyFilterBank> {
    if m.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("tap count {m} must be odd")));
    }
    if n_ch == 0 {
        return Err(Error::InvalidParameter("bank needs at least one channel".into()));
    }
    let mut bank = ButterflyFilterBank {
        n_ch,
        m,
        taps: vec![ZERO; n_ch * n_ch * m],
    };
    if mode == InitMode::CenterSpike {
        for i in 0..n_ch {
            *bank.tap_mut(i, i, m / 2) = Complex64::new(1.0, 0.0);
        }
    }
    Ok(bank)
}

impl ButterflyFilterBank {
    pub fn n_channels(&self) -> usize {
        self.n_ch
    }

    pub fn n_taps(&self) -> usize {
        self.m
    }

    pub fn center(&self) -> usize {
        self.m / 2
    }

    pub fn taps(&self) -> &[Complex64] {
        &self.taps
    }

    pub fn taps_mut(&mut self) -> &mut [Complex64] {
        &mut self.taps
    }

    #[inline]
    pub fn filter(&self, i: usize, j: usize) -> &[Complex64] {
        let o = (i * self.n_ch + j) * self.m;
        &self.taps[o..o + self.m]
    }

    #[inline]
    pub fn tap_mut(&mut self, i: usize, j: usize, m: usize) -> &mut Complex64 {
        &mut self.taps[(i * self.n_ch + j) * self.m + m]
    }

    /// Little-endian f64 pairs (re, im) in `[i][j][m]` order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.taps.len() * 16);
        for t in &self.taps {
            out.extend_from_slice(&t.re.to_le_bytes());
            out.extend_from_slice(&t.im.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(n_ch: usize, m: usize, bytes: &[u8]) -> Result<Self> {
        let mut bank = init_bank(n_ch, m, InitMode::Zeros)?;
        if bytes.len() != bank.taps.len() * 16 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} bytes for a {n_ch}x{n_ch}x{m} bank, got {}",
                bank.taps.len() * 16,
                bytes.len()
            )));
        }
        for (t, chunk) in bank.taps.iter_mut().zip(bytes.chunks_exact(16)) {
            let re = f64::from_le_bytes(chunk[..8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(chunk[8..].try_into().expect("8 bytes"));
            *t = Complex64::new(re, im);
        }
        Ok(bank)
    }
}

/// Samples needed to equalize `n_out` symbols with an `m`-tap bank.
pub fn window_len(n_out: usize, m: usize) -> usize {
    2 * n_out.saturating_sub(1) + m
}

/// Equalize a window of 2-sps samples into `n_out` symbols.
///
/// Output `k` is `sum_j sum_m taps[i][j][m] * y[j][2k + M - 1 - m]`; the
/// window therefore starts `(M - 1) / 2` samples before the first symbol's
/// centre sample.
pub fn equalize_window(
    bank: &ButterflyFilterBank,
    window: &[Vec<Complex64>],
    n_out: usize,
) -> Result<Vec<Vec<Complex64>>> {
    check_window(bank, window, n_out)?;
    let m = bank.m;
    let mut out = vec![vec![ZERO; n_out]; bank.n_ch];
    for (i, out_i) in out.iter_mut().enumerate() {
        for (j, y) in window.iter().enumerate() {
            let h = bank.filter(i, j);
            if h.iter().all(|t| t.re == 0.0 && t.im == 0.0) {
                continue;
            }
            for (k, o) in out_i.iter_mut().enumerate() {
                let seg = &y[2 * k..2 * k + m];
                let mut acc = ZERO;
                for (t, s) in h.iter().zip(seg.iter().rev()) {
                    acc += t * s;
                }
                *o += acc;
            }
        }
    }
    Ok(out)
}

/// Gradient of a real loss with respect to the taps, given the loss
/// gradient `grad_out` with respect to the first `grad_out[i].len()`
/// outputs (real-pair convention: `dL/dRe + j dL/dIm`). `offset` is the
/// index of the first of those outputs within the window.
pub fn equalize_window_backward(
    bank: &ButterflyFilterBank,
    window: &[Vec<Complex64>],
    offset: usize,
    grad_out: &[Vec<Complex64>],
) -> Vec<Complex64> {
    let m = bank.m;
    let n = bank.n_ch;
    let mut g = vec![ZERO; bank.taps.len()];
    for (i, gi) in grad_out.iter().enumerate() {
        for (j, y) in window.iter().enumerate() {
            let gt = &mut g[(i * n + j) * m..(i * n + j + 1) * m];
            for (k, &go) in gi.iter().enumerate() {
                if go.re == 0.0 && go.im == 0.0 {
                    continue;
                }
                let kk = offset + k;
                let seg = &y[2 * kk..2 * kk + m];
                for (t, s) in gt.iter_mut().zip(seg.iter().rev()) {
                    *t += go * s.conj();
                }
            }
        }
    }
    g
}

fn check_window(bank: &ButterflyFilterBank, window: &[Vec<Complex64>], n_out: usize) -> Result<()> {
    if window.len() != bank.n_ch {
        return Err(Error::ShapeMismatch(format!(
            "bank has {} channels, window {}",
            bank.n_ch,
            window.len()
        )));
    }
    let need = window_len(n_out, bank.m);
    if window.iter().any(|c| c.len() < need) {
        return Err(Error::ShapeMismatch(format!(
            "window needs {need} samples per channel for {n_out} outputs"
        )));
    }
    Ok(())
}

/// Batch tiling of a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_symbols: usize,
    pub frame_symbols: usize,
    /// Extra input samples beyond `2 * batch_symbols` (`M - 1`).
    pub overlap_samples: usize,
}

impl BatchPlan {
    pub fn new(batch_symbols: usize, frame_symbols: usize, m_eq: usize) -> Result<Self> {
        if batch_symbols == 0 || !frame_symbols.is_multiple_of(batch_symbols) {
            return Err(Error::InvalidParameter(format!(
                "frame of {frame_symbols} symbols does not tile into batches of {batch_symbols}"
            )));
        }
        Ok(Self {
            batch_symbols,
            frame_symbols,
            overlap_samples: m_eq - 1,
        })
    }

    pub fn batches_per_frame(&self) -> usize {
        self.frame_symbols / self.batch_symbols
    }
}

/// Copy `len` samples starting at `start` (may be negative) with circular
/// wrap-around.
pub fn gather_circular(frame: &ComplexSequence, start: i64, len: usize) -> Vec<Vec<Complex64>> {
    let n = frame.len() as i64;
    frame
        .channels()
        .iter()
        .map(|ch| {
            (0..len as i64)
                .map(|t| ch[(start + t).rem_euclid(n) as usize])
                .collect()
        })
        .collect()
}

/// Equalize batch `index` of a periodic 2-sps frame. Batches wrap around
/// the frame ends, so concatenating all batch outputs equals filtering the
/// whole frame at once.
pub fn equalize_batch(
    bank: &ButterflyFilterBank,
    frame: &ComplexSequence,
    plan: &BatchPlan,
    index: usize,
) -> Result<ComplexSequence> {
    if frame.sps() != 2 {
        return Err(Error::InvalidParameter("equalizer input must be 2 sps".into()));
    }
    if frame.len() != 2 * plan.frame_symbols {
        return Err(Error::ShapeMismatch(format!(
            "frame has {} samples, plan expects {}",
            frame.len(),
            2 * plan.frame_symbols
        )));
    }
    if index >= plan.batches_per_frame() {
        return Err(Error::InvalidParameter(format!("batch {index} outside the frame")));
    }
    let nb = plan.batch_symbols;
    let start = (2 * index * nb) as i64 - bank.center() as i64;
    let window = gather_circular(frame, start, window_len(nb, bank.m));
    ComplexSequence::new(equalize_window(bank, &window, nb)?, 1)
}

/// Estimator output over the samples of a batch that are fully determined
/// by the batch's own symbols: batch samples `(M-1)/2 .. 2n - (M-1)/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub mean: Vec<Vec<Complex64>>,
    pub variance: Vec<Vec<f64>>,
}

/// Number of valid projected samples for `n` symbols and `m` taps.
pub fn projection_len(n: usize, m: usize) -> usize {
    (2 * n + 1).saturating_sub(m)
}

/// Project posterior means `mu` and variances `var` (1 sps) through the
/// estimator onto the 2-sps receive grid:
/// `y_hat = h * up(mu)`, `v_hat = |h|^2 * up(var)`.
pub fn estimate_channel_project(
    est: &ButterflyFilterBank,
    mu: &[Vec<Complex64>],
    var: &[Vec<f64>],
) -> Result<Projection> {
    let n_ch = est.n_ch;
    if mu.len() != n_ch || var.len() != n_ch {
        return Err(Error::ShapeMismatch(format!(
            "estimator has {n_ch} channels, got {} means and {} variances",
            mu.len(),
            var.len()
        )));
    }
    let n = mu[0].len();
    if mu.iter().any(|c| c.len() != n) || var.iter().any(|c| c.len() != n) {
        return Err(Error::ShapeMismatch("posterior statistics differ in length".into()));
    }
    let m = est.m;
    let len = projection_len(n, m);
    let mut mean = vec![vec![ZERO; len]; n_ch];
    let mut variance = vec![vec![0.0; len]; n_ch];
    for i in 0..n_ch {
        for j in 0..n_ch {
            let h = est.filter(i, j);
            let h2: Vec<f64> = h.iter().map(|t| t.norm_sqr()).collect();
            for k in 0..n {
                let (lo, hi) = tap_range(k, m, len);
                let base = 2 * k + 1;
                let (u, v) = (mu[j][k], var[j][k]);
                for t in lo..hi {
                    let s = base + t - m;
                    mean[i][s] += h[t] * u;
                    variance[i][s] += h2[t] * v;
                }
            }
        }
    }
    Ok(Projection { mean, variance })
}

/// Taps `t` for which symbol `k` lands on a valid output sample
/// `s = 2k + t - (m - 1)`.
#[inline]
fn tap_range(k: usize, m: usize, len: usize) -> (usize, usize) {
    let lo = (m - 1).saturating_sub(2 * k);
    let hi = (len + m - 1).saturating_sub(2 * k).min(m);
    (lo, hi.max(lo))
}

/// Gradients produced by [`project_backward`].
pub struct ProjectionGrads {
    pub taps: Vec<Complex64>,
    pub mu: Vec<Vec<Complex64>>,
    pub var: Vec<Vec<f64>>,
}

/// Back-propagate `grad_mean` (real-pair) and `grad_var` through the
/// projection.
pub fn project_backward(
    est: &ButterflyFilterBank,
    mu: &[Vec<Complex64>],
    var: &[Vec<f64>],
    grad_mean: &[Vec<Complex64>],
    grad_var: &[Vec<f64>],
) -> ProjectionGrads {
    let n_ch = est.n_ch;
    let m = est.m;
    let n = mu[0].len();
    let len = projection_len(n, m);
    let mut taps = vec![ZERO; est.taps.len()];
    let mut g_mu = vec![vec![ZERO; n]; n_ch];
    let mut g_var = vec![vec![0.0; n]; n_ch];
    for i in 0..n_ch {
        for j in 0..n_ch {
            let h = est.filter(i, j);
            let o = (i * n_ch + j) * m;
            let gt = &mut taps[o..o + m];
            for k in 0..n {
                let (lo, hi) = tap_range(k, m, len);
                let base = 2 * k + 1;
                let (u, v) = (mu[j][k], var[j][k]);
                let mut acc_mu = ZERO;
                let mut acc_var = 0.0;
                for t in lo..hi {
                    let s = base + t - m;
                    let gm = grad_mean[i][s];
                    let gv = grad_var[i][s];
                    gt[t] += gm * u.conj() + h[t] * (2.0 * v * gv);
                    acc_mu += h[t].conj() * gm;
                    acc_var += h[t].norm_sqr() * gv;
                }
                g_mu[j][k] += acc_mu;
                g_var[j][k] += acc_var;
            }
        }
    }
    ProjectionGrads {
        taps,
        mu: g_mu,
        var: g_var,
    }
}

/// Adam optimizer state; complex parameters are independent (re, im) pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Complex64>,
    /// Second moments of the real and imaginary parts, stored as re/im.
    second: Vec<Complex64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self::with_betas(n_params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(n_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
            first: vec![ZERO; n_params],
            second: vec![ZERO; n_params],
        }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Complex64], grads: &[Complex64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let update = |m: &mut f64, v: &mut f64, g: f64| -> f64 {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        if m_hat == 0.0 {
            return 0.0;
        }
        state.lr * m_hat / (v_hat.sqrt() + state.eps)
    };
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        p.re -= update(&mut m.re, &mut v.re, g.re);
        p.im -= update(&mut m.im, &mut v.im, g.im);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_c(rng: &mut ChaCha8Rng) -> Complex64 {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    }

    fn random_bank(n_ch: usize, m: usize, rng: &mut ChaCha8Rng) -> ButterflyFilterBank {
        let mut b = init_bank(n_ch, m, InitMode::Zeros).unwrap();
        b.taps_mut().iter_mut().for_each(|t| *t = rand_c(rng));
        b
    }

    fn random_frame(n_ch: usize, samples: usize, rng: &mut ChaCha8Rng) -> ComplexSequence {
        ComplexSequence::new(
            (0..n_ch).map(|_| (0..samples).map(|_| rand_c(rng)).collect()).collect(),
            2,
        )
        .unwrap()
    }

    #[test]
    fn init_modes() {
        let b = init_bank(2, 3, InitMode::CenterSpike).unwrap();
        assert_eq!(b.filter(0, 0), &[ZERO, Complex64::new(1.0, 0.0), ZERO]);
        assert_eq!(b.filter(0, 1), &[ZERO; 3]);
        assert_eq!(b.filter(1, 1)[1], Complex64::new(1.0, 0.0));
        assert!(init_bank(2, 4, InitMode::Zeros).is_err());
    }

    #[test]
    fn center_spike_decimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = random_frame(2, 64, &mut rng);
        let bank = init_bank(2, 7, InitMode::CenterSpike).unwrap();
        let plan = BatchPlan::new(8, 32, 7).unwrap();
        for b in 0..plan.batches_per_frame() {
            let out = equalize_batch(&bank, &frame, &plan, b).unwrap();
            for ch in 0..2 {
                for k in 0..8 {
                    assert_eq!(out.channel(ch)[k], frame.channel(ch)[2 * (b * 8 + k)]);
                }
            }
        }
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = random_bank(2, 5, &mut rng);
        let frame = ComplexSequence::zeros(2, 40, 2).unwrap();
        let plan = BatchPlan::new(10, 20, 5).unwrap();
        let out = equalize_batch(&bank, &frame, &plan, 1).unwrap();
        assert!(out.channels().iter().flatten().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn diagonal_bank_matches_scalar_fir_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 9;
        let mut bank = random_bank(2, m, &mut rng);
        for t in 0..m {
            *bank.tap_mut(0, 1, t) = ZERO;
            *bank.tap_mut(1, 0, t) = ZERO;
        }
        let frame = random_frame(2, 80, &mut rng);
        let plan = BatchPlan::new(40, 40, m).unwrap();
        let out = equalize_batch(&bank, &frame, &plan, 0).unwrap();
        let n = frame.len() as i64;
        let c = (m / 2) as i64;
        for ch in 0..2 {
            for k in 0..40i64 {
                // Direct convolution centred on sample 2k.
                let mut acc = ZERO;
                for t in 0..m as i64 {
                    let idx = (2 * k + c - t).rem_euclid(n) as usize;
                    acc += bank.filter(ch, ch)[t as usize] * frame.channel(ch)[idx];
                }
                assert!((acc - out.channel(ch)[k as usize]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn batches_tile_the_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = 11;
        let bank = random_bank(3, m, &mut rng);
        let frame = random_frame(3, 120, &mut rng);
        let whole = equalize_batch(&bank, &frame, &BatchPlan::new(60, 60, m).unwrap(), 0).unwrap();
        let plan = BatchPlan::new(12, 60, m).unwrap();
        let mut tiled = vec![Vec::new(); 3];
        for b in 0..plan.batches_per_frame() {
            let out = equalize_batch(&bank, &frame, &plan, b).unwrap();
            for ch in 0..3 {
                tiled[ch].extend_from_slice(out.channel(ch));
            }
        }
        for ch in 0..3 {
            for (a, b) in whole.channel(ch).iter().zip(&tiled[ch]) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn equalizer_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 5;
        let (a, b) = (random_bank(2, m, &mut rng), random_bank(2, m, &mut rng));
        let (x, y) = (random_frame(2, 40, &mut rng), random_frame(2, 40, &mut rng));
        let (alpha, beta) = (rand_c(&mut rng), rand_c(&mut rng));
        let plan = BatchPlan::new(20, 20, m).unwrap();
        let eq = |bank: &ButterflyFilterBank, f: &ComplexSequence| {
            equalize_batch(bank, f, &plan, 0).unwrap()
        };
        // Linear in the input.
        let mix = ComplexSequence::new(
            (0..2)
                .map(|c| {
                    x.channel(c)
                        .iter()
                        .zip(y.channel(c))
                        .map(|(p, q)| alpha * p + beta * q)
                        .collect()
                })
                .collect(),
            2,
        )
        .unwrap();
        let (ex, ey, em) = (eq(&a, &x), eq(&a, &y), eq(&a, &mix));
        for c in 0..2 {
            for k in 0..20 {
                let expect = alpha * ex.channel(c)[k] + beta * ey.channel(c)[k];
                assert!((expect - em.channel(c)[k]).norm() < 1e-10);
            }
        }
        // Linear in the taps.
        let mut ab = a.clone();
        for (t, (p, q)) in ab.taps_mut().iter_mut().zip(a.taps().iter().zip(b.taps())) {
            *t = alpha * p + beta * q;
        }
        let (ea, eb, eab) = (eq(&a, &x), eq(&b, &x), eq(&ab, &x));
        for c in 0..2 {
            for k in 0..20 {
                let expect = alpha * ea.channel(c)[k] + beta * eb.channel(c)[k];
                assert!((expect - eab.channel(c)[k]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn equalize_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = 5;
        let bank = random_bank(2, m, &mut rng);
        let n = 6;
        let window: Vec<Vec<Complex64>> = (0..2)
            .map(|_| (0..window_len(n, m)).map(|_| rand_c(&mut rng)).collect())
            .collect();
        let weights: Vec<Vec<Complex64>> =
            (0..2).map(|_| (0..n).map(|_| rand_c(&mut rng)).collect()).collect();
        // L = sum Re(conj(w) * x) has real-pair gradient w with respect to x.
        let loss = |b: &ButterflyFilterBank| -> f64 {
            let out = equalize_window(b, &window, n).unwrap();
            out.iter()
                .zip(&weights)
                .flat_map(|(o, w)| o.iter().zip(w).map(|(x, w)| (w.conj() * x).re))
                .sum()
        };
        let g = equalize_window_backward(&bank, &window, 0, &weights);
        let h = 1e-6;
        for p in 0..bank.taps().len() {
            for part in 0..2 {
                let d = if part == 0 { Complex64::new(h, 0.0) } else { Complex64::new(0.0, h) };
                let mut plus = bank.clone();
                plus.taps_mut()[p] += d;
                let mut minus = bank.clone();
                minus.taps_mut()[p] -= d;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let ad = if part == 0 { g[p].re } else { g[p].im };
                assert!((fd - ad).abs() < 1e-6, "tap {p}: {fd} vs {ad}");
            }
        }
    }

    #[test]
    fn projection_identity_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10;
        let mu: Vec<Vec<Complex64>> = (0..2).map(|_| (0..n).map(|_| rand_c(&mut rng)).collect()).collect();
        let var: Vec<Vec<f64>> = (0..2).map(|_| (0..n).map(|_| rng.random()).collect()).collect();
        let ident = init_bank(2, 1, InitMode::CenterSpike).unwrap();
        let zero_var = vec![vec![0.0; n]; 2];
        let p = estimate_channel_project(&ident, &mu, &zero_var).unwrap();
        for ch in 0..2 {
            for s in 0..2 * n {
                let expect = if s % 2 == 0 { mu[ch][s / 2] } else { ZERO };
                assert_eq!(p.mean[ch][s], expect);
                assert_eq!(p.variance[ch][s], 0.0);
            }
        }
        let g = Complex64::new(0.3, -1.2);
        let mut gain = init_bank(2, 1, InitMode::Zeros).unwrap();
        *gain.tap_mut(0, 0, 0) = g;
        *gain.tap_mut(1, 1, 0) = g;
        let p = estimate_channel_project(&gain, &mu, &var).unwrap();
        for ch in 0..2 {
            for k in 0..n {
                assert!((p.variance[ch][2 * k] - g.norm_sqr() * var[ch][k]).abs() < 1e-15);
            }
        }
        let zeros = init_bank(2, 5, InitMode::Zeros).unwrap();
        let p = estimate_channel_project(&zeros, &mu, &var).unwrap();
        assert!(p.mean.iter().flatten().all(|z| z.norm() == 0.0));
        assert_eq!(p.mean[0].len(), projection_len(n, 5));
    }

    #[test]
    fn projection_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, m) = (12, 7);
        let est = random_bank(2, m, &mut rng);
        let mu: Vec<Vec<Complex64>> = (0..2).map(|_| (0..n).map(|_| rand_c(&mut rng)).collect()).collect();
        let var = vec![vec![0.0; n]; 2];
        let p = estimate_channel_project(&est, &mu, &var).unwrap();
        let c = m / 2;
        for i in 0..2 {
            for (s, &got) in p.mean[i].iter().enumerate() {
                let sample = s + c; // batch sample index
                let mut acc = ZERO;
                for j in 0..2 {
                    for t in 0..m {
                        let idx = sample as i64 + c as i64 - t as i64;
                        if idx >= 0 && (idx as usize) < 2 * n && idx % 2 == 0 {
                            acc += est.filter(i, j)[t] * mu[j][idx as usize / 2];
                        }
                    }
                }
                assert!((acc - got).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn project_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, m) = (8, 5);
        let est = random_bank(2, m, &mut rng);
        let mu: Vec<Vec<Complex64>> = (0..2).map(|_| (0..n).map(|_| rand_c(&mut rng)).collect()).collect();
        let var: Vec<Vec<f64>> = (0..2).map(|_| (0..n).map(|_| rng.random()).collect()).collect();
        let len = projection_len(n, m);
        let wm: Vec<Vec<Complex64>> = (0..2).map(|_| (0..len).map(|_| rand_c(&mut rng)).collect()).collect();
        let wv: Vec<Vec<f64>> = (0..2).map(|_| (0..len).map(|_| rng.random()).collect()).collect();
        let loss = |e: &ButterflyFilterBank, mu: &[Vec<Complex64>], var: &[Vec<f64>]| -> f64 {
            let p = estimate_channel_project(e, mu, var).unwrap();
            let mut l = 0.0;
            for i in 0..2 {
                for s in 0..len {
                    l += (wm[i][s].conj() * p.mean[i][s]).re + wv[i][s] * p.variance[i][s];
                }
            }
            l
        };
        let g = project_backward(&est, &mu, &var, &wm, &wv);
        let h = 1e-6;
        for p in 0..est.taps().len() {
            for part in 0..2 {
                let d = if part == 0 { Complex64::new(h, 0.0) } else { Complex64::new(0.0, h) };
                let mut a = est.clone();
                a.taps_mut()[p] += d;
                let mut b = est.clone();
                b.taps_mut()[p] -= d;
                let fd = (loss(&a, &mu, &var) - loss(&b, &mu, &var)) / (2.0 * h);
                let ad = if part == 0 { g.taps[p].re } else { g.taps[p].im };
                assert!((fd - ad).abs() < 1e-6);
            }
        }
        for j in 0..2 {
            for k in 0..n {
                let mut a = mu.to_vec();
                a[j][k] += Complex64::new(h, 0.0);
                let mut b = mu.to_vec();
                b[j][k] -= Complex64::new(h, 0.0);
                let fd = (loss(&est, &a, &var) - loss(&est, &b, &var)) / (2.0 * h);
                assert!((fd - g.mu[j][k].re).abs() < 1e-6);
                let mut a = var.to_vec();
                a[j][k] += h;
                let mut b = var.to_vec();
                b[j][k] -= h;
                let fd = (loss(&est, &mu, &a) - loss(&est, &mu, &b)) / (2.0 * h);
                assert!((fd - g.var[j][k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bank_bytes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bank = random_bank(3, 5, &mut rng);
        let bytes = bank.to_bytes();
        assert_eq!(bytes.len(), 3 * 3 * 5 * 16);
        assert_eq!(&bytes[..8], &bank.taps()[0].re.to_le_bytes());
        assert_eq!(&bytes[8..16], &bank.taps()[0].im.to_le_bytes());
        assert_eq!(ButterflyFilterBank::from_bytes(3, 5, &bytes).unwrap(), bank);
        assert!(ButterflyFilterBank::from_bytes(3, 5, &bytes[1..]).is_err());
    }

    #[test]
    fn adam_zero_gradient() {
        let mut p = vec![Complex64::new(0.5, -0.25); 4];
        let before = p.clone();
        let mut st = AdamState::new(4, 0.1);
        adam_step(&mut p, &[ZERO; 4], &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
        assert!(adam_step(&mut p, &[ZERO; 3], &mut st).is_err());
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = vec![ZERO; 2];
        let g = [Complex64::new(3.0, -0.01), Complex64::new(-250.0, 1e-3)];
        let mut st = AdamState::new(2, 0.01);
        adam_step(&mut p, &g, &mut st).unwrap();
        // m_hat = g, v_hat = g^2, so each coordinate moves by lr * g / (|g| + eps).
        for (x, g) in p.iter().zip(&g) {
            for (xv, gv) in [(x.re, g.re), (x.im, g.im)] {
                let expect = -0.01 * gv / (gv.abs() + 1e-8);
                assert!((xv - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adam_two_steps_match_scalar_reference() {
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let grads = [0.7, -0.2];
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        let mut p = vec![Complex64::new(1.0, 1.0)];
        let mut st = AdamState::with_betas(1, lr, b1, b2, eps);
        for g in grads {
            adam_step(&mut p, &[Complex64::new(g, g)], &mut st).unwrap();
        }
        assert!((p[0].re - x).abs() < 1e-15);
        assert!((p[0].im - x).abs() < 1e-15);
    }

    #[test]
    fn adam_without_momentum_is_sign_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p: Vec<Complex64> = (0..16).map(|_| rand_c(&mut rng)).collect();
        let mut st = AdamState::with_betas(16, 0.02, 0.0, 0.0, 0.0);
        for _ in 0..3 {
            let g: Vec<Complex64> = (0..16).map(|_| rand_c(&mut rng)).collect();
            let before = p.clone();
            adam_step(&mut p, &g, &mut st).unwrap();
            for ((a, b), g) in p.iter().zip(&before).zip(&g) {
                assert!((a.re - (b.re - 0.02 * g.re.signum())).abs() < 1e-15);
                assert!((a.im - (b.im - 0.02 * g.im.signum())).abs() < 1e-15);
            }
        }
    }
}
