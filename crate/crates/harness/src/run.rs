//! One run: pilot-aided pre-convergence, blind adaptation frame by frame,
//! and per-frame scoring against the transmitted symbols.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vaee_core::cpr::{self, BpsConfig};
use vaee_core::equalizer::{
    adam_step, equalize_window, equalize_window_backward, init_bank, window_len, AdamState,
    ButterflyFilterBank, InitMode,
};
use vaee_core::losses::{
    cm_loss, cm_loss_grad, pilot_batch, pilot_phase, soft_demap, BatchWindow, NoiseScale, PhaseMode, VaeLoss,
};
use vaee_core::metrics::{align, bmi, decide, ser, snr_est, Alignment, RunRecord, RunStatus};
use vaee_core::signal::{make_qam, Constellation};

use crate::config::{ExperimentConfig, LearningRates};
use crate::error::{HarnessError, Result};
use crate::source::{Block, SignalSource};

/// Alignment correlation below which a run counts as not converged.
pub const ALIGNMENT_THRESHOLD: f64 = 0.1;

/// Symbol counts of the read sequence of one run: `lead`, `preconv`,
/// `frames` times `frame`, `tail`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub lead: usize,
    pub preconv: usize,
    pub frame: usize,
    pub frames: usize,
    pub tail: usize,
    /// CPR context symbols on each side of a batch.
    pub context: usize,
    /// Largest symbol delay searched by the alignment.
    pub max_delay: usize,
}

impl Schedule {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let context = cfg.cpr_context();
        let max_delay = cfg.m_eq;
        // Covers the equalizer and CPR look-back/ahead and the alignment
        // search range.
        let margin = context + cfg.m_eq.div_ceil(2) + max_delay + 2;
        Self {
            lead: margin,
            preconv: cfg.preconv_symbols,
            frame: cfg.frame_symbols,
            frames: cfg.frames,
            tail: margin,
            context,
            max_delay,
        }
    }

    pub fn total(&self) -> usize {
        self.lead + self.preconv + self.frame * self.frames + self.tail
    }

    /// Read sizes in order.
    pub fn reads(&self) -> Vec<usize> {
        let mut r = vec![self.lead, self.preconv];
        r.extend(std::iter::repeat_n(self.frame, self.frames));
        r.push(self.tail);
        r
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DumpOptions {
    pub taps: bool,
    pub phases: bool,
    pub losses: bool,
}

/// Loss of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub run: usize,
    pub stage: String,
    /// Frame index; -1 during pre-convergence.
    pub frame: i64,
    pub batch: usize,
    pub a: f64,
    pub c: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub run: usize,
    pub seed: u64,
    pub status: RunStatus,
    pub records: Vec<RunRecord>,
    pub alignment: Option<Alignment>,
    /// Digest of the tap trajectory up to the end of each frame.
    pub tap_digests: Vec<String>,
    pub losses: Vec<BatchLoss>,
    /// Equalizer then estimator taps at the end of each frame.
    pub taps: Vec<Vec<u8>>,
    /// Per-symbol CPR phase of every channel, per frame.
    pub phases: Vec<Vec<Vec<f64>>>,
}

/// Received samples and transmitted symbols seen so far, indexed by
/// absolute symbol number.
struct Stream {
    samples: Vec<Vec<Complex64>>,
    symbols: Option<Vec<Vec<u16>>>,
    /// Absolute symbol index of `symbols[_][0]` and of sample `samples[_][0] / 2`.
    base: usize,
    end: usize,
}

impl Stream {
    fn new(n_ch: usize, known: bool) -> Self {
        Self {
            samples: vec![Vec::new(); n_ch],
            symbols: known.then(|| vec![Vec::new(); n_ch]),
            base: 0,
            end: 0,
        }
    }

    fn push(&mut self, block: Block, n: usize) -> Result<()> {
        if block.samples.len() != self.samples.len() || block.samples.iter().any(|c| c.len() != 2 * n) {
            return Err(HarnessError::Config("source returned a malformed block".into()));
        }
        for (dst, src) in self.samples.iter_mut().zip(block.samples) {
            dst.extend(src);
        }
        match (&mut self.symbols, block.symbols) {
            (Some(dst), Some(src)) => {
                for (d, s) in dst.iter_mut().zip(src) {
                    d.extend(s);
                }
            }
            (Some(_), None) => self.symbols = None,
            _ => {}
        }
        self.end += n;
        Ok(())
    }

    /// Equalizer input for `n_out` outputs starting at symbol `first`.
    fn window(&self, first: usize, n_out: usize, m: usize) -> Vec<Vec<Complex64>> {
        let start = 2 * (first - self.base) - m / 2;
        let len = window_len(n_out, m);
        self.samples.iter().map(|c| c[start..start + len].to_vec()).collect()
    }

    fn symbols(&self, ch: usize, first: i64, len: usize) -> Option<&[u16]> {
        let s = self.symbols.as_ref()?;
        let lo = (first - self.base as i64) as usize;
        Some(&s[ch][lo..lo + len])
    }

    /// Forget everything before symbol `keep`.
    fn trim(&mut self, keep: usize) {
        if keep <= self.base {
            return;
        }
        let drop = keep - self.base;
        for c in &mut self.samples {
            c.drain(..2 * drop);
        }
        if let Some(s) = &mut self.symbols {
            for c in s {
                c.drain(..drop);
            }
        }
        self.base = keep;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Preconv,
    Blind,
}

/// Pilot assignment: output `i` is trained towards transmit channel
/// `source` delayed by `delay` symbols.
type PilotMap = Vec<(usize, i64)>;

struct FrameAcc {
    scored: Vec<Vec<Complex64>>,
    phase: Vec<Vec<f64>>,
    a: Vec<f64>,
    c: Vec<f64>,
    n_samples: usize,
    power: Vec<f64>,
    power_n: usize,
}

impl FrameAcc {
    fn new(n_ch: usize) -> Self {
        Self {
            scored: vec![Vec::new(); n_ch],
            phase: vec![Vec::new(); n_ch],
            a: vec![0.0; n_ch],
            c: vec![0.0; n_ch],
            n_samples: 0,
            power: vec![0.0; n_ch],
            power_n: 0,
        }
    }
}

struct BatchResult {
    scored: Vec<Vec<Complex64>>,
    phase: Option<Vec<Vec<f64>>>,
    a: Vec<f64>,
    c: Vec<f64>,
    n_samples: usize,
    total: f64,
    target: Vec<Vec<Complex64>>,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    schedule: Schedule,
    c: Constellation,
    noise: NoiseScale,
    bps: Option<BpsConfig>,
    eq: ButterflyFilterBank,
    est: ButterflyFilterBank,
    adam_eq: AdamState,
    adam_est: AdamState,
    adam_pilot: AdamState,
    rates: LearningRates,
    /// Supervised phase of the last pilot batch, per output.
    pilot_phase: Option<Vec<f64>>,
    reference: Option<Vec<f64>>,
    pilots: Option<PilotMap>,
    trajectory: Sha256,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ExperimentConfig, n_ch: usize, rates: LearningRates) -> Result<Self> {
        let c = make_qam(cfg.order, None)?;
        let eq = init_bank(n_ch, cfg.m_eq, InitMode::CenterSpike)?;
        let est = init_bank(n_ch, cfg.m_est, InitMode::Zeros)?;
        Ok(Self {
            cfg,
            schedule: Schedule::new(cfg),
            noise: NoiseScale::uniform(n_ch, cfg.demap_variance())?,
            bps: if cfg.algorithm.uses_cpr() { Some(cfg.bps()?) } else { None },
            adam_eq: AdamState::new(eq.taps().len(), rates.eq),
            adam_est: AdamState::new(est.taps().len(), rates.est),
            adam_pilot: AdamState::new(eq.taps().len(), rates.pilot),
            rates,
            pilot_phase: None,
            eq,
            est,
            c,
            reference: None,
            pilots: None,
            trajectory: Sha256::new(),
        })
    }

    fn n_ch(&self) -> usize {
        self.eq.n_channels()
    }

    fn points(&self, s: &[u16]) -> Vec<Complex64> {
        s.iter().map(|&i| self.c.points()[i as usize]).collect()
    }

    /// Transmitted symbols of every channel over `[first - d, first + len + d)`.
    fn reference_symbols(&self, stream: &Stream, first: usize, len: usize) -> Option<Vec<Vec<Complex64>>> {
        let d = self.schedule.max_delay;
        (0..self.n_ch())
            .map(|j| {
                stream
                    .symbols(j, first as i64 - d as i64, len + 2 * d)
                    .map(|s| self.points(s))
            })
            .collect()
    }

    fn pilot(&self, stream: &Stream, k0: usize, n: usize) -> Option<Vec<Vec<Complex64>>> {
        let map = self.pilots.as_ref()?;
        map.iter()
            .map(|&(src, delay)| stream.symbols(src, k0 as i64 + delay, n).map(|s| self.points(s)))
            .collect()
    }

    fn process_batch(&mut self, stream: &Stream, k0: usize, stage: Stage) -> Result<BatchResult> {
        let n = self.cfg.batch_symbols;
        let ctx = self.schedule.context;
        let window = BatchWindow::new(stream.window(k0 - ctx, n + 2 * ctx, self.cfg.m_eq), n, ctx, self.cfg.m_eq)?;
        let target = window.target();

        if stage == Stage::Preconv && self.pilots.is_none() {
            self.pilots = self.assign_pilots(stream, &window, k0)?;
        }
        let pilot = match stage {
            Stage::Preconv => self.pilot(stream, k0, n),
            Stage::Blind => None,
        };

        let result = match self.cfg.algorithm.vae_variant() {
            Some(variant) => {
                let loss = VaeLoss::new(&self.c, &self.noise, variant, self.bps.as_ref())?;
                let eval = loss.evaluate(&window, &self.eq, &self.est, self.reference.as_deref(), &PhaseMode::Hard)?;
                let grads = loss.gradients(&eval, &window, &self.eq, &self.est)?;
                match &pilot {
                    Some(p) => {
                        let (_, x, g) = pilot_batch(&window, &self.eq, p)?;
                        self.pilot_phase = Some(pilot_phase(&x, p));
                        adam_step(self.eq.taps_mut(), &g.eq, &mut self.adam_pilot)?;
                    }
                    None => adam_step(self.eq.taps_mut(), &grads.eq, &mut self.adam_eq)?,
                }
                let est_grad = grads.est.expect("VAE losses train the estimator");
                // The estimator starts from zero and follows the faster
                // pilot-stage step size until blind adaptation begins.
                self.adam_est.lr = if pilot.is_some() { self.rates.pilot } else { self.rates.est };
                adam_step(self.est.taps_mut(), &est_grad, &mut self.adam_est)?;
                let b = eval.breakdown;
                BatchResult {
                    scored: eval.scored,
                    phase: eval.phase,
                    a: b.a_per_channel,
                    c: b.c_per_channel,
                    n_samples: b.n_samples,
                    total: b.total,
                    target,
                }
            }
            None => {
                let bps = self.bps.as_ref().expect("CM is scored after phase search");
                let x = equalize_window(&self.eq, window.samples(), window.n_outputs())?;
                let center: Vec<Vec<Complex64>> = x.iter().map(|ch| ch[ctx..ctx + n].to_vec()).collect();
                let mut phase = Vec::with_capacity(x.len());
                let mut scored = Vec::with_capacity(x.len());
                for (ch, (xe, xc)) in x.iter().zip(&center).enumerate() {
                    let m = cpr::bps_distances(xe, &self.c, bps);
                    let mut t = cpr::bps_select_hard(&m, bps, None);
                    if let Some(r) = &self.reference {
                        cpr::anchor(&mut t.unwrapped, ctx, r[ch]);
                    }
                    let p = t.unwrapped[ctx..ctx + n].to_vec();
                    scored.push(cpr::apply_cpr(xc, &p)?);
                    phase.push(p);
                }
                let total = match &pilot {
                    Some(p) => {
                        let (l, x, g) = pilot_batch(&window, &self.eq, p)?;
                        self.pilot_phase = Some(pilot_phase(&x, p));
                        adam_step(self.eq.taps_mut(), &g.eq, &mut self.adam_pilot)?;
                        l
                    }
                    None => {
                        let g = cm_loss_grad(&center, &self.c);
                        let grad = equalize_window_backward(&self.eq, window.samples(), ctx, &g);
                        adam_step(self.eq.taps_mut(), &grad, &mut self.adam_eq)?;
                        cm_loss(&center, &self.c)
                    }
                };
                let nan = vec![f64::NAN; x.len()];
                BatchResult {
                    scored,
                    phase: Some(phase),
                    a: nan.clone(),
                    c: nan,
                    n_samples: 0,
                    total,
                    target,
                }
            }
        };
        if let Some(p) = &result.phase {
            self.reference = Some(p.iter().map(|ch| ch[n - 1]).collect());
        }
        self.trajectory.update(self.eq.to_bytes());
        self.trajectory.update(self.est.to_bytes());
        Ok(result)
    }

    /// Rotate every equalizer output by its last supervised phase, and the
    /// estimator inputs by the inverse, so that blind adaptation starts from
    /// the orientation the pilots established.
    fn absorb_pilot_phase(&mut self) {
        let Some(theta) = self.pilot_phase.take() else {
            return;
        };
        let n_ch = self.n_ch();
        for (i, t) in theta.iter().enumerate() {
            let r = Complex64::from_polar(1.0, -t);
            for j in 0..n_ch {
                for m in 0..self.cfg.m_eq {
                    *self.eq.tap_mut(i, j, m) *= r;
                }
                for m in 0..self.cfg.m_est {
                    *self.est.tap_mut(j, i, m) *= r.conj();
                }
            }
        }
    }

    /// Match equalizer outputs to transmit channels before pilot training.
    fn assign_pilots(&self, stream: &Stream, window: &BatchWindow, k0: usize) -> Result<Option<PilotMap>> {
        let n = window.n_symbols();
        let Some(tx) = self.reference_symbols(stream, k0, n) else {
            return Ok(None);
        };
        let ctx = window.context();
        let x = equalize_window(&self.eq, window.samples(), window.n_outputs())?;
        let center: Vec<Vec<Complex64>> = x.iter().map(|ch| ch[ctx..ctx + n].to_vec()).collect();
        let a = align(&center, &tx, self.schedule.max_delay)?;
        Ok(Some(a.channels.iter().map(|c| (c.source, c.delay)).collect()))
    }

    fn taps_finite(&self) -> bool {
        self.eq
            .taps()
            .iter()
            .chain(self.est.taps())
            .all(|t| t.re.is_finite() && t.im.is_finite())
    }

    fn tap_bytes(&self) -> Vec<u8> {
        let mut b = self.eq.to_bytes();
        b.extend(self.est.to_bytes());
        b
    }
}

/// Run one seeded experiment run over `source`.
pub fn run_one(
    cfg: &ExperimentConfig,
    run: usize,
    source: &mut dyn SignalSource,
    dumps: DumpOptions,
) -> Result<RunOutput> {
    cfg.validate()?;
    let rates = cfg.learning_rates()?;
    let n_ch = source.n_channels();
    let mut runner = Runner::new(cfg, n_ch, rates)?;
    let schedule = runner.schedule;
    let n = cfg.batch_symbols;

    let mut out = RunOutput {
        run,
        seed: cfg.run_seed(run),
        status: RunStatus::Ok,
        records: Vec::with_capacity(cfg.frames * n_ch),
        alignment: None,
        tap_digests: Vec::with_capacity(cfg.frames),
        losses: Vec::new(),
        taps: Vec::new(),
        phases: Vec::new(),
    };

    let reads = schedule.reads();
    let mut stream = Stream::new(n_ch, true);
    let first = source.read(reads[0])?;
    stream.push(first, reads[0])?;
    let mut next_read = 1;
    let read_next = |stream: &mut Stream, source: &mut dyn SignalSource, next: &mut usize| -> Result<()> {
        let k = reads[*next];
        let block = source.read(k)?;
        stream.push(block, k)?;
        *next += 1;
        Ok(())
    };
    let mut region_start = schedule.lead;
    let keep_margin = schedule.lead;

    // Pre-convergence, with the first frame read as look-ahead.
    read_next(&mut stream, source, &mut next_read)?;
    read_next(&mut stream, source, &mut next_read)?;
    let mut diverged = false;
    for b in 0..schedule.preconv / n {
        let r = runner.process_batch(&stream, region_start + b * n, Stage::Preconv)?;
        if dumps.losses {
            out.losses.push(loss_row(run, "preconv", -1, b, &r));
        }
        if !r.total.is_finite() || !runner.taps_finite() {
            diverged = true;
            break;
        }
    }
    region_start += schedule.preconv;
    runner.absorb_pilot_phase();

    for frame in 0..schedule.frames {
        // Look-ahead into the next frame (or the tail).
        read_next(&mut stream, source, &mut next_read)?;
        stream.trim(region_start.saturating_sub(keep_margin));
        if diverged {
            push_empty(&mut out, frame, n_ch, RunStatus::Diverged);
            continue;
        }
        let mut acc = FrameAcc::new(n_ch);
        for b in 0..schedule.frame / n {
            let r = runner.process_batch(&stream, region_start + b * n, Stage::Blind)?;
            if dumps.losses {
                out.losses.push(loss_row(run, "blind", frame as i64, b, &r));
            }
            if !r.total.is_finite() || !runner.taps_finite() {
                diverged = true;
                break;
            }
            accumulate(&mut acc, r);
        }
        if diverged {
            out.status = RunStatus::Diverged;
            push_empty(&mut out, frame, n_ch, RunStatus::Diverged);
            continue;
        }
        out.tap_digests.push(hex::encode(runner.trajectory.clone().finalize()));
        if dumps.taps {
            out.taps.push(runner.tap_bytes());
        }
        if dumps.phases && cfg.algorithm.uses_cpr() {
            out.phases.push(acc.phase.clone());
        }
        if out.alignment.is_none() {
            out.alignment = match runner.reference_symbols(&stream, region_start, schedule.frame) {
                Some(tx) => {
                    let a = align(&acc.scored, &tx, schedule.max_delay)?;
                    if !a.converged(ALIGNMENT_THRESHOLD) {
                        out.status = RunStatus::NonConverged;
                    }
                    Some(a)
                }
                None => None,
            };
        }
        score_frame(&runner, &stream, &acc, region_start, frame, &mut out)?;
        region_start += schedule.frame;
    }
    // Drain the tail so the read sequence is identical for every outcome.
    while next_read < reads.len() {
        read_next(&mut stream, source, &mut next_read)?;
    }
    Ok(out)
}

fn loss_row(run: usize, stage: &str, frame: i64, batch: usize, r: &BatchResult) -> BatchLoss {
    BatchLoss {
        run,
        stage: stage.to_string(),
        frame,
        batch,
        a: r.a.iter().sum(),
        c: r.c.iter().sum(),
        total: r.total,
    }
}

fn push_empty(out: &mut RunOutput, frame: usize, n_ch: usize, status: RunStatus) {
    out.status = status;
    for channel in 0..n_ch {
        out.records.push(RunRecord {
            run: out.run,
            frame,
            channel,
            bmi: f64::NAN,
            ser: f64::NAN,
            snr_est_db: f64::NAN,
            loss_a: f64::NAN,
            loss_c: f64::NAN,
            status,
        });
    }
}

fn accumulate(acc: &mut FrameAcc, r: BatchResult) {
    for (ch, x) in r.scored.into_iter().enumerate() {
        acc.scored[ch].extend(x);
        acc.a[ch] += r.a[ch];
        acc.c[ch] += r.c[ch];
        acc.power[ch] += r.target[ch].iter().map(|z| z.norm_sqr()).sum::<f64>();
    }
    if let Some(p) = r.phase {
        for (ch, x) in p.into_iter().enumerate() {
            acc.phase[ch].extend(x);
        }
    }
    acc.n_samples += r.n_samples;
    acc.power_n += r.target[0].len();
}

fn score_frame(
    runner: &Runner<'_>,
    stream: &Stream,
    acc: &FrameAcc,
    first: usize,
    frame: usize,
    out: &mut RunOutput,
) -> Result<()> {
    let c = &runner.c;
    let m = c.bits_per_symbol();
    let len = acc.scored[0].len();
    for (ch, x) in acc.scored.iter().enumerate() {
        let power = acc.power[ch] / acc.power_n as f64;
        let snr = if acc.n_samples > 0 {
            snr_est(power, acc.n_samples, acc.c[ch])
        } else {
            f64::NAN
        };
        let truth = out.alignment.as_ref().and_then(|a| {
            let al = a.channels[ch];
            stream
                .symbols(al.source, first as i64 + al.delay, len)
                .map(|s| (al.derotate(x), s.iter().map(|&v| v as usize).collect::<Vec<_>>()))
        });
        let (rate, errors) = match truth {
            Some((xr, idx)) => {
                let q = soft_demap(std::slice::from_ref(&xr), c, &runner.noise)?;
                let llr = q.llrs(c);
                let bits: Vec<u8> = idx.iter().flat_map(|&s| (0..m).map(move |b| c.bit(s, b))).collect();
                let rate = bmi(&llr[0], &bits, m)?.max(0.0);
                (rate, ser(&decide(&xr, c), &idx)?)
            }
            None => (f64::NAN, f64::NAN),
        };
        out.records.push(RunRecord {
            run: out.run,
            frame,
            channel: ch,
            bmi: rate,
            ser: errors,
            snr_est_db: snr,
            loss_a: acc.a[ch],
            loss_c: acc.c[ch],
            status: out.status,
        });
    }
    Ok(())
}
