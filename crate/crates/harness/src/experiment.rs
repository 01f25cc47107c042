//! Seeded parallel runs, sweeps, and result files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vaee_core::metrics::{aggregate, RunRecord, RunStatus, Summary};
use vaee_core::signal::make_qam;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::iq::CaptureWriter;
use crate::run::{run_one, DumpOptions, RunOutput, Schedule};
use crate::source::{symbols_to_bits, CaptureSource, SignalSource, SimSource};

#[derive(Clone, Debug, Default)]
pub struct RunnerOptions {
    /// Worker threads; `None` uses all cores.
    pub workers: Option<usize>,
    pub dumps: DumpOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    #[serde(flatten)]
    pub stats: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStatusEntry {
    pub run: usize,
    pub seed: u64,
    pub status: RunStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub algorithm: String,
    /// Values pooled per metric when every run completes.
    pub expected_n: usize,
    pub metrics: Vec<MetricSummary>,
    pub runs: Vec<RunStatusEntry>,
}

pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub runs: Vec<RunOutput>,
    pub summary: ExperimentSummary,
}

/// Per-record metric selected for pooling.
pub type Metric = fn(&RunRecord) -> f64;

/// Channel means of the last `scored_frames` frames of every run, one value
/// per frame.
pub fn pooled_values(cfg: &ExperimentConfig, runs: &[RunOutput], metric: Metric) -> Vec<f64> {
    let first = cfg.frames - cfg.scored_frames;
    let mut values = Vec::with_capacity(runs.len() * cfg.scored_frames);
    for r in runs {
        for frame in first..cfg.frames {
            let v: Vec<f64> = r.records.iter().filter(|x| x.frame == frame).map(metric).collect();
            if !v.is_empty() {
                values.push(v.iter().sum::<f64>() / v.len() as f64);
            }
        }
    }
    values
}

pub fn summarize(cfg: &ExperimentConfig, runs: &[RunOutput]) -> ExperimentSummary {
    let expected = cfg.runs * cfg.scored_frames;
    let metrics: [(&str, Metric); 5] = [
        ("bmi", |r| r.bmi),
        ("ser", |r| r.ser),
        ("snr_est_db", |r| r.snr_est_db),
        ("loss_a", |r| r.loss_a),
        ("loss_c", |r| r.loss_c),
    ];
    ExperimentSummary {
        config_hash: cfg.hash(),
        algorithm: cfg.algorithm.name().to_string(),
        expected_n: expected,
        metrics: metrics
            .iter()
            .map(|(name, f)| MetricSummary {
                metric: name.to_string(),
                stats: aggregate(&pooled_values(cfg, runs, *f), expected),
            })
            .collect(),
        runs: runs
            .iter()
            .map(|r| RunStatusEntry {
                run: r.run,
                seed: r.seed,
                status: r.status,
            })
            .collect(),
    }
}

fn source_for(cfg: &ExperimentConfig, run: usize) -> Result<Box<dyn SignalSource>> {
    let c = make_qam(cfg.order, None)?;
    Ok(match &cfg.input {
        Some(path) => Box::new(CaptureSource::open(path, cfg, &c)?),
        None => Box::new(SimSource::new(cfg, run, &c)?),
    })
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        b = b.num_threads(w.max(1));
    }
    b.build().map_err(|e| HarnessError::Config(format!("thread pool: {e}")))
}

/// Run several configurations; all (configuration, run) pairs share one
/// worker pool and results come back in input order.
pub fn execute(configs: &[ExperimentConfig], opts: &RunnerOptions) -> Result<Vec<ExperimentOutput>> {
    for cfg in configs {
        cfg.validate()?;
    }
    let jobs: Vec<(usize, usize)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, cfg)| (0..cfg.runs).map(move |r| (i, r)))
        .collect();
    let results: Vec<Result<RunOutput>> = pool(opts.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(i, run)| {
                let cfg = &configs[i];
                let mut source = source_for(cfg, run)?;
                let out = run_one(cfg, run, source.as_mut(), opts.dumps);
                if let Ok(o) = &out {
                    log::info!("{} run {run}: {:?}", cfg.algorithm, o.status);
                }
                out
            })
            .collect()
    });
    let mut per_config: Vec<Vec<RunOutput>> = configs.iter().map(|_| Vec::new()).collect();
    for ((i, _), r) in jobs.iter().zip(results) {
        per_config[*i].push(r?);
    }
    Ok(configs
        .iter()
        .zip(per_config)
        .map(|(cfg, runs)| ExperimentOutput {
            summary: summarize(cfg, &runs),
            config: cfg.clone(),
            runs,
        })
        .collect())
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunnerOptions) -> Result<ExperimentOutput> {
    Ok(execute(std::slice::from_ref(cfg), opts)?.remove(0))
}

/// One configuration per sweep value, all with the same base seed so runs
/// are paired across points.
pub fn sweep_configs(template: &ExperimentConfig, axis: &str, values: &[String]) -> Result<Vec<ExperimentConfig>> {
    if !ExperimentConfig::numeric_keys().iter().any(|k| k == axis) {
        return Err(HarnessError::Config(format!("'{axis}' is not a numeric configuration field")));
    }
    values
        .iter()
        .map(|v| {
            let mut cfg = template.clone();
            cfg.set(axis, v)?;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

#[derive(Serialize)]
struct CsvRecord<'a> {
    algorithm: &'a str,
    run: usize,
    seed: u64,
    frame: usize,
    channel: usize,
    bmi: f64,
    ser: f64,
    snr_est_db: f64,
    loss_a: f64,
    loss_c: f64,
    status: RunStatus,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| HarnessError::io(path, e))?))
}

/// Write `records.csv`, `summary.json`, `config.toml` and the requested
/// diagnostics into `dir`.
pub fn write_outputs(out: &ExperimentOutput, dir: &Path, dumps: DumpOptions) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let path = dir.join("records.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    for run in &out.runs {
        for r in &run.records {
            w.serialize(CsvRecord {
                algorithm: out.config.algorithm.name(),
                run: r.run,
                seed: run.seed,
                frame: r.frame,
                channel: r.channel,
                bmi: r.bmi,
                ser: r.ser,
                snr_est_db: r.snr_est_db,
                loss_a: r.loss_a,
                loss_c: r.loss_c,
                status: r.status,
            })?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;

    let path = dir.join("summary.json");
    let mut f = create(&path)?;
    serde_json::to_writer_pretty(&mut f, &out.summary)
        .map_err(|e| HarnessError::format(&path, e.to_string()))?;
    writeln!(f).and_then(|_| f.flush()).map_err(|e| HarnessError::io(&path, e))?;

    let path = dir.join("config.toml");
    std::fs::write(&path, out.config.to_toml()).map_err(|e| HarnessError::io(&path, e))?;

    if dumps.losses {
        let path = dir.join("losses.csv");
        let mut w = csv::Writer::from_writer(create(&path)?);
        for run in &out.runs {
            for l in &run.losses {
                w.serialize(l)?;
            }
        }
        w.flush().map_err(|e| HarnessError::io(&path, e))?;
    }
    for run in &out.runs {
        if dumps.taps {
            for (frame, bytes) in run.taps.iter().enumerate() {
                let path = dir.join(format!("taps_{}_{}.bin", run.run, frame));
                std::fs::write(&path, bytes).map_err(|e| HarnessError::io(&path, e))?;
            }
        }
        if dumps.phases {
            for (frame, phase) in run.phases.iter().enumerate() {
                let path = dir.join(format!("phase_{}_{}.csv", run.run, frame));
                let mut f = create(&path)?;
                let header: Vec<String> = (0..phase.len()).map(|c| format!("ch{c}")).collect();
                let mut text = format!("symbol,{}\n", header.join(","));
                for k in 0..phase.first().map_or(0, Vec::len) {
                    let row: Vec<String> = phase.iter().map(|ch| ch[k].to_string()).collect();
                    text.push_str(&format!("{k},{}\n", row.join(",")));
                }
                f.write_all(text.as_bytes())
                    .and_then(|_| f.flush())
                    .map_err(|e| HarnessError::io(&path, e))?;
            }
        }
    }
    Ok(())
}

/// Write the stream that run `run` of `cfg` would read from the simulator
/// as a capture with a bit sidecar.
pub fn write_simulated_capture(cfg: &ExperimentConfig, run: usize, header: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let c = make_qam(cfg.order, None)?;
    let mut source = SimSource::new(cfg, run, &c)?;
    let schedule = Schedule::new(cfg);
    let mut w = CaptureWriter::create(
        header,
        source.n_channels(),
        cfg.sps,
        schedule.total(),
        cfg.order,
        cfg.symbol_rate_hz,
        true,
    )?;
    for n in schedule.reads() {
        let block = source.read(n)?;
        let bits: Vec<Vec<u8>> = block
            .symbols
            .as_ref()
            .expect("simulated blocks carry symbols")
            .iter()
            .map(|s| symbols_to_bits(s, &c))
            .collect();
        w.append(&block.samples, Some(&bits))?;
    }
    w.finish()?;
    Ok(header.to_path_buf())
}
