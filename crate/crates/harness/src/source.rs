//! Streaming signal sources: the simulated link or a replayed capture.

use std::path::Path;

use num_complex::Complex64;
use vaee_core::channel::LinkSimulator;
use vaee_core::signal::{rrc_taps, Constellation};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::iq::CaptureReader;

/// Received samples of `n` consecutive symbols with, when known, the
/// transmitted constellation indices of every transmit channel.
#[derive(Clone, Debug)]
pub struct Block {
    pub samples: Vec<Vec<Complex64>>,
    pub symbols: Option<Vec<Vec<u16>>>,
}

pub trait SignalSource {
    fn n_channels(&self) -> usize;
    /// Next `n` symbols (2n samples per channel).
    fn read(&mut self, n: usize) -> Result<Block>;
}

pub struct SimSource {
    sim: LinkSimulator,
}

impl SimSource {
    pub fn new(cfg: &ExperimentConfig, run: usize, c: &Constellation) -> Result<Self> {
        let filter = rrc_taps(cfg.rolloff, cfg.rrc_span_symbols, cfg.sps)?;
        Ok(Self {
            sim: LinkSimulator::new(cfg.link(run)?, c.clone(), filter)?,
        })
    }
}

impl SignalSource for SimSource {
    fn n_channels(&self) -> usize {
        self.sim.config().n_channels()
    }

    fn read(&mut self, n: usize) -> Result<Block> {
        let chunk = self.sim.next_chunk(n);
        Ok(Block {
            samples: chunk.samples.into_channels(),
            symbols: Some(chunk.symbols),
        })
    }
}

pub struct CaptureSource {
    reader: CaptureReader,
    constellation: Constellation,
}

impl CaptureSource {
    pub fn open(path: &Path, cfg: &ExperimentConfig, c: &Constellation) -> Result<Self> {
        let reader = CaptureReader::open(path)?;
        let h = reader.header();
        if h.sps != cfg.sps {
            return Err(HarnessError::format(path, format!("capture has {} sps, config {}", h.sps, cfg.sps)));
        }
        if h.channels != 2 * cfg.cores {
            return Err(HarnessError::format(
                path,
                format!("capture has {} channels, config expects {}", h.channels, 2 * cfg.cores),
            ));
        }
        if h.order != cfg.order {
            return Err(HarnessError::format(path, format!("capture order {} differs from config {}", h.order, cfg.order)));
        }
        Ok(Self {
            reader,
            constellation: c.clone(),
        })
    }

    pub fn has_bits(&self) -> bool {
        self.reader.has_bits()
    }
}

impl SignalSource for CaptureSource {
    fn n_channels(&self) -> usize {
        self.reader.header().channels
    }

    fn read(&mut self, n: usize) -> Result<Block> {
        let (samples, bits) = self.reader.read(n)?;
        let m = self.constellation.bits_per_symbol();
        let symbols = bits.map(|bits| {
            bits.iter()
                .map(|ch| {
                    ch.chunks(m)
                        .map(|b| {
                            let label = b.iter().fold(0u32, |acc, &v| (acc << 1) | u32::from(v));
                            self.constellation.index_of_label(label) as u16
                        })
                        .collect()
                })
                .collect()
        });
        Ok(Block { samples, symbols })
    }
}

/// Bits (MSB first) of constellation indices.
pub fn symbols_to_bits(symbols: &[u16], c: &Constellation) -> Vec<u8> {
    let m = c.bits_per_symbol();
    symbols
        .iter()
        .flat_map(|&s| (0..m).map(move |b| c.bit(s as usize, b)))
        .collect()
}
