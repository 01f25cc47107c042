//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 4`.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vaee_core::channel::{
    apply_link, core_frequency_response, fft_frequencies, CoreChannelParams, LinkConfig, LinkSimulator,
    PhaseNoiseParams,
};
use vaee_core::cpr::{bps_distances, bps_select_hard, BpsConfig};
use vaee_core::equalizer::{init_bank, window_len, ButterflyFilterBank, InitMode};
use vaee_core::losses::{
    cm_batch, kl_term_a, pilot_batch, recon_term_c, soft_demap, BatchWindow, NoiseScale, PhaseMode, PosteriorGrid,
    VaeLoss, VaeVariant,
};
use vaee_core::metrics::{bmi, RunRecord};
use vaee_core::signal::{make_qam, rrc_taps, ComplexSequence, Constellation};
use vaee_harness::experiment::{pooled_values, run_experiment, write_outputs, ExperimentOutput, RunnerOptions};
use vaee_harness::{Algorithm, ExperimentConfig};
use vaee_validation::{fold_quarter, numeric_gradient, qpsk_awgn_bmi, quarter_aligned_mse, relative_error};

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = fn() -> Outcome;

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("gradient correctness", gradients),
        ("reconstruction term equals enumeration", recon_enumeration),
        ("KL term properties", kl_properties),
        ("channel model", channel_model),
        ("phase search accuracy", phase_search),
        ("QPSK convergence", qpsk_convergence),
        ("64-QAM at 1 MHz linewidth", phase_noise_ordering),
        ("SNR underestimation before convergence", underestimation),
        ("pooling and determinism", accounting),
        ("BMI against integration", bmi_oracle),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if r.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {id:>2} {name}: {} [{:.1} s]", r.detail, start.elapsed().as_secs_f64());
        if !r.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

// 1 ------------------------------------------------------------------------

// Small enough to resolve the curvature of the temperature-0.01 softmax.
const FD_STEP: f64 = 1e-7;
const GRAD_TOL: f64 = 1e-4;

struct Instance {
    c: Constellation,
    window: BatchWindow,
    pilot: Vec<Vec<Complex64>>,
    eq: ButterflyFilterBank,
    est: ButterflyFilterBank,
}

/// 2x2 link, `m` taps, `n` batch symbols, perturbed identity banks.
fn instance(seed: u64, m: usize, n: usize, context: usize) -> Instance {
    let c = make_qam(16, None).unwrap();
    let f = rrc_taps(0.2, 16, 2).unwrap();
    let cfg = LinkConfig::with_random_permutation(
        1,
        CoreChannelParams::reference(),
        18.0,
        PhaseNoiseParams::new(100e3, 90e9).unwrap(),
        seed,
    )
    .unwrap();
    let mut sim = LinkSimulator::new(cfg, c.clone(), f).unwrap();
    let len = window_len(n + 2 * context, m);
    let chunk = sim.next_chunk(len.div_ceil(2) + 1);
    let samples = chunk.samples.channels().iter().map(|ch| ch[..len].to_vec()).collect();
    let pilot = chunk
        .symbols
        .iter()
        .map(|ch| ch[context..context + n].iter().map(|&s| c.points()[s as usize]).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xacce);
    let mut eq = init_bank(2, m, InitMode::CenterSpike).unwrap();
    let mut est = init_bank(2, m, InitMode::CenterSpike).unwrap();
    for t in eq.taps_mut().iter_mut().chain(est.taps_mut().iter_mut()) {
        *t += Complex64::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    }
    Instance {
        c,
        window: BatchWindow::new(samples, n, context, m).unwrap(),
        pilot,
        eq,
        est,
    }
}

fn with_taps(bank: &ButterflyFilterBank, taps: &[Complex64]) -> ButterflyFilterBank {
    let mut b = bank.clone();
    b.taps_mut().copy_from_slice(taps);
    b
}

/// Largest relative error over the equalizer and estimator banks.
fn vae_gradient_error(seed: u64, variant: VaeVariant) -> f64 {
    let inst = instance(seed, 5, 32, 4);
    let noise = NoiseScale::uniform(2, 0.05).unwrap();
    let bps = BpsConfig::new(8, 0.01, 9).unwrap();
    let loss = VaeLoss::new(&inst.c, &noise, variant, Some(&bps)).unwrap();
    let base = loss.evaluate(&inst.window, &inst.eq, &inst.est, None, &PhaseMode::Hard).unwrap();
    let grads = loss.gradients(&base, &inst.window, &inst.eq, &inst.est).unwrap();
    // The hard phase is piecewise constant; the straight-through surrogate
    // keeps the hard value at the base point and the soft slope around it.
    let mode = match base.straight_through_offsets() {
        Some(o) => PhaseMode::Frozen(o),
        None => PhaseMode::Hard,
    };
    let total = |eq: &ButterflyFilterBank, est: &ButterflyFilterBank| {
        loss.evaluate(&inst.window, eq, est, None, &mode).unwrap().breakdown.total
    };
    let fd_eq = numeric_gradient(inst.eq.taps(), FD_STEP, |t| total(&with_taps(&inst.eq, t), &inst.est));
    let fd_est = numeric_gradient(inst.est.taps(), FD_STEP, |t| total(&inst.eq, &with_taps(&inst.est, t)));
    relative_error(&grads.eq, &fd_eq).max(relative_error(grads.est.as_ref().unwrap(), &fd_est))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 4];
    for seed in 0..100 {
        worst[0] = worst[0].max(vae_gradient_error(seed, VaeVariant::Plain));
        worst[1] = worst[1].max(vae_gradient_error(seed, VaeVariant::TrainedCpr));
        let inst = instance(seed, 5, 32, 0);
        let (_, _, g) = cm_batch(&inst.window, &inst.eq, &inst.c).unwrap();
        let fd = numeric_gradient(inst.eq.taps(), FD_STEP, |t| {
            cm_batch(&inst.window, &with_taps(&inst.eq, t), &inst.c).unwrap().0
        });
        worst[2] = worst[2].max(relative_error(&g.eq, &fd));
        let (_, _, g) = pilot_batch(&inst.window, &inst.eq, &inst.pilot).unwrap();
        let fd = numeric_gradient(inst.eq.taps(), FD_STEP, |t| {
            pilot_batch(&inst.window, &with_taps(&inst.eq, t), &inst.pilot).unwrap().0
        });
        worst[3] = worst[3].max(relative_error(&g.eq, &fd));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|&e| e < GRAD_TOL) && secs < 60.0;
    outcome(
        pass,
        format!(
            "max relative error over 100 seeds: vae {:.1e}, trained CPR {:.1e}, CM {:.1e}, pilot {:.1e} (< {GRAD_TOL:.0e}); {secs:.1} s (< 60 s)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn random_simplex(rng: &mut ChaCha8Rng, order: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..order).map(|_| rng.random::<f64>().powi(3) + 1e-12).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn recon_enumeration() -> Outcome {
    let c = make_qam(4, None).unwrap();
    let n = 4;
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..n).flat_map(|_| random_simplex(&mut rng, 4)).collect();
        let grid = PosteriorGrid::from_probabilities(vec![q.clone()], &c).unwrap();
        let h = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let mut est = init_bank(1, 1, InitMode::Zeros).unwrap();
        est.taps_mut()[0] = h;
        let y: Vec<Complex64> = (0..2 * n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let got = recon_term_c(std::slice::from_ref(&y), &est, &grid, None).unwrap().total();

        // Expected squared error over all 4^4 symbol sequences weighted by
        // their factorized posterior probability; odd samples carry no
        // symbol at 2 samples per symbol.
        let mut expect = 0.0;
        for code in 0..4usize.pow(n as u32) {
            let idx: Vec<usize> = (0..n).map(|k| (code >> (2 * k)) & 3).collect();
            let p: f64 = idx.iter().enumerate().map(|(k, &i)| q[k * 4 + i]).product();
            let err: f64 = (0..2 * n)
                .map(|s| {
                    let model = if s % 2 == 0 { h * c.points()[idx[s / 2]] } else { Complex64::new(0.0, 0.0) };
                    (y[s] - model).norm_sqr()
                })
                .sum();
            expect += p * err;
        }
        worst = worst.max((got - expect).abs() / expect);
    }
    outcome(worst < 1e-10, format!("max relative deviation {worst:.1e} over 50 grids (< 1e-10)"))
}

// 3 ------------------------------------------------------------------------

fn kl_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut min_random = f64::INFINITY;
    for k in 0..10_000 {
        let order = [4, 16, 64][k % 3];
        let c = make_qam(order, None).unwrap();
        let rows = (0..2).map(|_| (0..4).flat_map(|_| random_simplex(&mut rng, order)).collect()).collect();
        let grid = PosteriorGrid::from_probabilities(rows, &c).unwrap();
        min_random = min_random.min(kl_term_a(&grid, &c));
    }
    let mut max_at_prior = 0.0f64;
    let mut min_near_prior = f64::INFINITY;
    let mut worst_one_hot = 0.0f64;
    for order in [4, 16, 64] {
        let c = make_qam(order, None).unwrap();
        let prior: Vec<f64> = (0..5).flat_map(|_| c.prior().to_vec()).collect();
        let grid = PosteriorGrid::from_probabilities(vec![prior.clone()], &c).unwrap();
        max_at_prior = max_at_prior.max(kl_term_a(&grid, &c).abs());
        // Any departure from the prior is strictly positive.
        let other = random_simplex(&mut rng, order);
        let near: Vec<f64> = prior
            .chunks(order)
            .flat_map(|p| p.iter().zip(&other).map(|(a, b)| 0.99 * a + 0.01 * b).collect::<Vec<_>>())
            .collect();
        let grid = PosteriorGrid::from_probabilities(vec![near], &c).unwrap();
        min_near_prior = min_near_prior.min(kl_term_a(&grid, &c));
        let one_hot: Vec<f64> = (0..order).flat_map(|s| (0..order).map(move |i| if i == s { 1.0 } else { 0.0 })).collect();
        let grid = PosteriorGrid::from_probabilities(vec![one_hot], &c).unwrap();
        let expect = order as f64 * (order as f64).ln();
        worst_one_hot = worst_one_hot.max((kl_term_a(&grid, &c) - expect).abs() / expect);
    }
    let pass = min_random >= 0.0 && max_at_prior < 1e-9 && min_near_prior > 1e-9 && worst_one_hot < 1e-12;
    outcome(
        pass,
        format!(
            "min A over 1e4 grids {min_random:.3e} (>= 0); |A| at prior {max_at_prior:.1e} (< 1e-9); \
             min A at 1% from prior {min_near_prior:.1e} (> 1e-9); one-hot vs ln M rel {worst_one_hot:.1e}"
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn gaussian_sequence(channels: usize, len: usize, seed: u64) -> ComplexSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = (0..channels)
        .map(|_| {
            (0..len)
                .map(|_| {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    Complex64::new(re, im) * FRAC_PI_4.cos()
                })
                .collect()
        })
        .collect();
    ComplexSequence::new(ch, 2).unwrap()
}

fn channel_model() -> Outcome {
    let mut unitary = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = vec![CoreChannelParams::reference()];
    for _ in 0..10 {
        params.push(CoreChannelParams {
            gamma_hv: rng.random_range(-3.0..3.0),
            tau_pmd: rng.random_range(0.0..20e-12),
            beta_cd_l: rng.random_range(-500e-24..500e-24),
            ..CoreChannelParams::reference()
        });
    }
    for p in &params {
        let f = fft_frequencies(4096, 2.0 * p.symbol_rate);
        for h in core_frequency_response(p, &f) {
            for i in 0..2 {
                for j in 0..2 {
                    let v: Complex64 = (0..2).map(|k| h[i][k] * h[j][k].conj()).sum();
                    let e = if i == j { 1.0 } else { 0.0 };
                    unitary = unitary.max((v - e).norm());
                }
            }
        }
    }

    let transparent = LinkConfig {
        cores: 2,
        core_params: vec![CoreChannelParams::transparent(90e9); 2],
        permutation: vec![0, 1, 2, 3],
        snr_db: f64::INFINITY,
        phase_noise: PhaseNoiseParams::new(0.0, 90e9).unwrap(),
        seed: 9,
    };
    let tx = gaussian_sequence(4, 4096, 5);
    let rx = apply_link(&tx, &transparent).unwrap();
    let identity = tx
        .channels()
        .iter()
        .zip(rx.channels())
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).norm()))
        .fold(0.0f64, f64::max);

    // 2 channels x 500 000 samples.
    let noisy_cfg = LinkConfig::with_random_permutation(
        1,
        CoreChannelParams::reference(),
        25.0,
        PhaseNoiseParams::new(0.0, 90e9).unwrap(),
        6,
    )
    .unwrap();
    let clean_cfg = LinkConfig {
        snr_db: f64::INFINITY,
        ..noisy_cfg.clone()
    };
    let tx = gaussian_sequence(2, 500_000, 7);
    let noisy = apply_link(&tx, &noisy_cfg).unwrap();
    let clean = apply_link(&tx, &clean_cfg).unwrap();
    let mut snr_err = 0.0f64;
    for (n, c) in noisy.channels().iter().zip(clean.channels()) {
        let ps: f64 = c.iter().map(|z| z.norm_sqr()).sum();
        let pn: f64 = n.iter().zip(c).map(|(a, b)| (a - b).norm_sqr()).sum();
        snr_err = snr_err.max((10.0 * (ps / pn).log10() - 25.0).abs());
    }
    let pass = unitary < 1e-12 && identity < 1e-12 && snr_err < 0.1;
    outcome(
        pass,
        format!(
            "max |H H^H - I| {unitary:.1e} (< 1e-12); transparent link error {identity:.1e} (< 1e-12); \
             SNR error at 25 dB over 1e6 samples {snr_err:.3} dB (< 0.1)"
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn qam_symbols(rng: &mut ChaCha8Rng, c: &Constellation, n: usize) -> Vec<Complex64> {
    (0..n).map(|_| c.points()[rng.random_range(0..c.order())]).collect()
}

fn phase_search() -> Outcome {
    let c = make_qam(64, None).unwrap();
    let cfg = BpsConfig::default();
    let spacing = cfg.spacing();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = qam_symbols(&mut rng, &c, 400);
    let mut static_err = 0.0f64;
    for k in 0..200 {
        let theta = -FRAC_PI_4 + (k as f64 + rng.random::<f64>()) * FRAC_PI_2 / 200.0;
        let rx: Vec<Complex64> = x.iter().map(|z| z * Complex64::from_polar(1.0, theta)).collect();
        let t = bps_select_hard(&bps_distances(&rx, &c, &cfg), &cfg, None);
        for &phi in &t.raw {
            static_err = static_err.max(fold_quarter(phi - theta).abs());
        }
    }

    let var = PhaseNoiseParams::new(1e6, 90e9).unwrap().per_symbol_variance();
    let n = 20_000;
    let x = qam_symbols(&mut rng, &c, n);
    let mut phase = 0.0f64;
    let truth: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(&mut rng);
            phase += var.sqrt() * w;
            phase
        })
        .collect();
    let rx: Vec<Complex64> = x.iter().zip(&truth).map(|(z, p)| z * Complex64::from_polar(1.0, *p)).collect();
    let t = bps_select_hard(&bps_distances(&rx, &c, &cfg), &cfg, None);
    // The averaging window wraps around at the ends of the block.
    let h = cfg.half_window();
    let mse = quarter_aligned_mse(&t.unwrapped[h..n - h], &truth[h..n - h]);
    let bound = 10.0 * spacing * spacing / 12.0;
    let pass = static_err <= spacing / 2.0 + 1e-12 && mse < bound;
    outcome(
        pass,
        format!(
            "static: max error {static_err:.4} rad (<= {:.4}); Wiener variance {var:.2e}: MSE {mse:.2e} (< {bound:.2e})",
            spacing / 2.0
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn qpsk_config(algorithm: Algorithm) -> ExperimentConfig {
    ExperimentConfig {
        algorithm,
        order: 4,
        cores: 1,
        snr_db: 20.0,
        linewidth_hz: 0.0,
        m_eq: 25,
        m_est: 25,
        frames: 50,
        frame_symbols: 2000,
        preconv_symbols: 2000,
        runs: 1,
        scored_frames: 1,
        seed: 1,
        ..Default::default()
    }
}

fn frame_mean(out: &ExperimentOutput, frame: usize, f: fn(&RunRecord) -> f64) -> f64 {
    let v: Vec<f64> = out.runs.iter().flat_map(|r| &r.records).filter(|r| r.frame == frame).map(f).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn qpsk_convergence() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for a in Algorithm::ALL {
        let start = Instant::now();
        let out = run_experiment(&qpsk_config(a), &RunnerOptions::default()).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let last = out.runs[0].records.iter().filter(|r| r.frame == 49);
        let ser = last.map(|r| r.ser).fold(0.0f64, f64::max);
        pass &= ser < 1e-3 && secs < 120.0;
        parts.push(format!("{a} SER {ser:.1e} in {secs:.1} s"));
    }
    outcome(pass, format!("{} (SER < 1e-3 at frame 50, < 120 s each)", parts.join(", ")))
}

// 7 ------------------------------------------------------------------------

fn phase_noise_config(algorithm: Algorithm) -> ExperimentConfig {
    ExperimentConfig {
        algorithm,
        order: 64,
        cores: 2,
        snr_db: 25.0,
        linewidth_hz: 1e6,
        m_eq: 51,
        m_est: 51,
        frames: 30,
        frame_symbols: 5000,
        preconv_symbols: 5000,
        runs: 3,
        scored_frames: 20,
        seed: 1,
        ..Default::default()
    }
}

fn pooled_mean(out: &ExperimentOutput, f: fn(&RunRecord) -> f64) -> f64 {
    let v = pooled_values(&out.config, &out.runs, f);
    v.iter().sum::<f64>() / v.len() as f64
}

fn phase_noise_ordering() -> Outcome {
    let start = Instant::now();
    let run = |a| run_experiment(&phase_noise_config(a), &RunnerOptions::default()).unwrap();
    let plain = run(Algorithm::Vaee);
    let trailing = run(Algorithm::VaeeCpr);
    let trained = run(Algorithm::VaeeTrainedCpr);
    let secs = start.elapsed().as_secs_f64();
    let bmi_plain = pooled_mean(&plain, |r| r.bmi);
    let bmi_trailing = pooled_mean(&trailing, |r| r.bmi);
    let bmi_trained = pooled_mean(&trained, |r| r.bmi);
    let snr = pooled_mean(&trained, |r| r.snr_est_db);
    let identical = plain.runs.iter().zip(&trailing.runs).all(|(a, b)| a.tap_digests == b.tap_digests);
    let a = bmi_trained >= bmi_plain + 0.2 && bmi_trailing > bmi_plain;
    let b = (snr - 25.0).abs() <= 1.0;
    let flag = |ok: bool| if ok { "ok" } else { "not met" };
    outcome(
        a && b && identical && secs < 1800.0,
        format!(
            "(a) BMI plain {bmi_plain:.3}, trailing CPR {bmi_trailing:.3}, trained CPR {bmi_trained:.3} \
             (trained >= plain + 0.2, trailing > plain): {}; (b) trained SNR_est {snr:.2} dB (25 +- 1): {}; \
             (c) plain/trailing tap trajectories identical: {}; {secs:.0} s (< 1800 s)",
            flag(a),
            flag(b),
            flag(identical)
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn underestimation() -> Outcome {
    let converged_cfg = ExperimentConfig {
        frames: 30,
        scored_frames: 5,
        ..qpsk_config(Algorithm::Vaee)
    };
    // Same seed, hence the same received stream; the equalizer barely moves.
    let frozen_cfg = ExperimentConfig {
        lr_eq: Some(1e-9),
        lr_pilot: Some(1e-9),
        ..converged_cfg.clone()
    };
    let converged = run_experiment(&converged_cfg, &RunnerOptions::default()).unwrap();
    let frozen = run_experiment(&frozen_cfg, &RunnerOptions::default()).unwrap();
    let mut pass = true;
    for frame in 25..30 {
        pass &= frame_mean(&frozen, frame, |r| r.snr_est_db) < frame_mean(&converged, frame, |r| r.snr_est_db);
    }
    let a = pooled_mean(&frozen, |r| r.snr_est_db);
    let b = pooled_mean(&converged, |r| r.snr_est_db);
    outcome(
        pass && a < b,
        format!("SNR_est unconverged {a:.2} dB < converged {b:.2} dB on every scored frame"),
    )
}

// 9 ------------------------------------------------------------------------

fn scratch_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("vaee-acceptance-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn accounting() -> Outcome {
    let cfg = ExperimentConfig {
        algorithm: Algorithm::VaeeTrainedCpr,
        order: 4,
        cores: 1,
        snr_db: 20.0,
        m_eq: 15,
        m_est: 15,
        cpr_window: 33,
        frames: 100,
        frame_symbols: 200,
        preconv_symbols: 200,
        batch_symbols: 100,
        runs: 2,
        scored_frames: 20,
        linewidth_hz: 100e3,
        seed: 9,
        ..Default::default()
    };
    let opts = RunnerOptions::default();
    let first = run_experiment(&cfg, &opts).unwrap();
    let second = run_experiment(&cfg, &opts).unwrap();
    let counts: Vec<usize> = first.summary.metrics.iter().map(|m| m.stats.as_ref().map_or(0, |s| s.n)).collect();
    let pooled = pooled_values(&cfg, &first.runs, |r| r.bmi).len();
    let pooled_ok = first.summary.expected_n == 40 && pooled == 40 && counts.iter().all(|&n| n == 40);

    let (a, b) = (scratch_dir("a"), scratch_dir("b"));
    write_outputs(&first, &a, opts.dumps).unwrap();
    write_outputs(&second, &b, opts.dumps).unwrap();
    let same = ["records.csv", "summary.json"]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    let _ = std::fs::remove_dir_all(&a);
    let _ = std::fs::remove_dir_all(&b);
    outcome(
        pooled_ok && same,
        format!(
            "2 runs x 100 frames pool {pooled} values per metric (counts {counts:?}, expected 40); rerun files identical: {same}"
        ),
    )
}

// 10 -----------------------------------------------------------------------

fn bmi_oracle() -> Outcome {
    let c = make_qam(4, None).unwrap();
    let es_n0_db = 10.0;
    let n0 = 10f64.powf(-es_n0_db / 10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 1_000_000;
    let mut x = Vec::with_capacity(n);
    let mut bits = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let idx = rng.random_range(0..4);
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        x.push(c.points()[idx] + Complex64::new(re, im) * (n0 / 2.0).sqrt());
        bits.extend((0..2).map(|b| c.bit(idx, b)));
    }
    let q = soft_demap(&[x], &c, &NoiseScale::uniform(1, n0).unwrap()).unwrap();
    let got = bmi(&q.llrs(&c)[0], &bits, 2).unwrap();
    let expect = qpsk_awgn_bmi(es_n0_db);
    outcome(
        (got - expect).abs() < 0.01,
        format!("BMI {got:.4} vs integrated {expect:.4} bit at 10 dB over 1e6 symbols (within 0.01)"),
    )
}
