//! Capture files: a text header next to raw little-endian `f64` re/im
//! samples stored channel after channel, and an optional sidecar with one
//! byte (0 or 1) per transmitted bit, also channel-major.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

const SAMPLE_BYTES: u64 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureHeader {
    pub channels: usize,
    pub sps: usize,
    /// Symbols per channel; each channel holds `sps * symbols` samples.
    pub symbols: usize,
    pub order: usize,
    pub symbol_rate_hz: f64,
    /// Sample file, relative to the header.
    pub samples_file: String,
    /// Transmitted bits per transmit channel, relative to the header.
    pub bits_file: Option<String>,
}

impl CaptureHeader {
    pub fn samples_per_channel(&self) -> u64 {
        (self.sps * self.symbols) as u64
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.order.trailing_zeros() as usize
    }

    fn resolve(header_path: &Path, file: &str) -> PathBuf {
        header_path.parent().unwrap_or(Path::new(".")).join(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let h: Self = toml::from_str(&text).map_err(|e| HarnessError::format(path, e.to_string()))?;
        if h.channels == 0 || h.symbols == 0 || h.sps == 0 {
            return Err(HarnessError::format(path, "channels, sps and symbols must be positive"));
        }
        if h.order < 4 || !h.order.is_power_of_two() {
            return Err(HarnessError::format(path, format!("unsupported order {}", h.order)));
        }
        Ok(h)
    }
}

/// Writes a capture of known length; channels can be filled in any order
/// of chunks.
pub struct CaptureWriter {
    header: CaptureHeader,
    samples: BufWriter<File>,
    samples_path: PathBuf,
    bits: Option<(BufWriter<File>, PathBuf)>,
    written: u64,
}

impl CaptureWriter {
    /// Create `<stem>.hdr`, `<stem>.iq` and, with `with_bits`, `<stem>.bits`.
    pub fn create(
        header_path: &Path,
        channels: usize,
        sps: usize,
        symbols: usize,
        order: usize,
        symbol_rate_hz: f64,
        with_bits: bool,
    ) -> Result<Self> {
        let stem = header_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| HarnessError::format(header_path, "header path needs a file name"))?;
        let header = CaptureHeader {
            channels,
            sps,
            symbols,
            order,
            symbol_rate_hz,
            samples_file: format!("{stem}.iq"),
            bits_file: with_bits.then(|| format!("{stem}.bits")),
        };
        let text = toml::to_string(&header).expect("header serializes");
        std::fs::write(header_path, text).map_err(|e| HarnessError::io(header_path, e))?;
        let samples_path = CaptureHeader::resolve(header_path, &header.samples_file);
        let samples = create_sized(&samples_path, channels as u64 * header.samples_per_channel() * SAMPLE_BYTES)?;
        let bits = match &header.bits_file {
            Some(f) => {
                let p = CaptureHeader::resolve(header_path, f);
                let len = (channels * symbols * header.bits_per_symbol()) as u64;
                Some((create_sized(&p, len)?, p))
            }
            None => None,
        };
        Ok(Self {
            header,
            samples,
            samples_path,
            bits,
            written: 0,
        })
    }

    /// Append the next `n` symbols of every channel: `sps * n` samples and,
    /// when the capture has a sidecar, `n * m` bits per channel.
    pub fn append(&mut self, samples: &[Vec<Complex64>], bits: Option<&[Vec<u8>]>) -> Result<()> {
        let h = &self.header;
        if samples.len() != h.channels || samples.iter().any(|c| c.len() % h.sps != 0) {
            return Err(HarnessError::format(&self.samples_path, "chunk does not match the capture shape"));
        }
        let n_samples = samples[0].len() as u64;
        if self.written + n_samples > h.samples_per_channel() {
            return Err(HarnessError::format(&self.samples_path, "chunk exceeds the declared length"));
        }
        let per_channel = h.samples_per_channel();
        for (c, ch) in samples.iter().enumerate() {
            let offset = (c as u64 * per_channel + self.written) * SAMPLE_BYTES;
            self.samples
                .seek(SeekFrom::Start(offset))
                .map_err(|e| HarnessError::io(&self.samples_path, e))?;
            let mut buf = Vec::with_capacity(ch.len() * SAMPLE_BYTES as usize);
            for z in ch {
                buf.extend_from_slice(&z.re.to_le_bytes());
                buf.extend_from_slice(&z.im.to_le_bytes());
            }
            self.samples
                .write_all(&buf)
                .map_err(|e| HarnessError::io(&self.samples_path, e))?;
        }
        match (&mut self.bits, bits) {
            (Some((w, path)), Some(bits)) => {
                let m = h.bits_per_symbol() as u64;
                let symbols_done = self.written / h.sps as u64;
                let n_symbols = n_samples / h.sps as u64;
                if bits.len() != h.channels || bits.iter().any(|b| b.len() as u64 != n_symbols * m) {
                    return Err(HarnessError::format(path, "bit chunk does not match the sample chunk"));
                }
                for (c, b) in bits.iter().enumerate() {
                    let offset = (c as u64 * h.symbols as u64 + symbols_done) * m;
                    w.seek(SeekFrom::Start(offset)).map_err(|e| HarnessError::io(path, e))?;
                    w.write_all(b).map_err(|e| HarnessError::io(path, e))?;
                }
            }
            (None, None) => {}
            (Some((_, path)), None) => {
                return Err(HarnessError::format(path, "capture has a bit sidecar but no bits were given"))
            }
            (None, Some(_)) => {
                return Err(HarnessError::format(&self.samples_path, "capture has no bit sidecar"))
            }
        }
        self.written += n_samples;
        Ok(())
    }

    pub fn finish(mut self) -> Result<CaptureHeader> {
        if self.written != self.header.samples_per_channel() {
            return Err(HarnessError::format(
                &self.samples_path,
                format!(
                    "only {} of {} samples per channel written",
                    self.written,
                    self.header.samples_per_channel()
                ),
            ));
        }
        self.samples.flush().map_err(|e| HarnessError::io(&self.samples_path, e))?;
        if let Some((w, path)) = &mut self.bits {
            w.flush().map_err(|e| HarnessError::io(path, e))?;
        }
        Ok(self.header)
    }
}

fn create_sized(path: &Path, len: u64) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    f.set_len(len).map_err(|e| HarnessError::io(path, e))?;
    Ok(BufWriter::new(f))
}

/// Sequential reader over a validated capture.
pub struct CaptureReader {
    header: CaptureHeader,
    samples: File,
    samples_path: PathBuf,
    bits: Option<(File, PathBuf)>,
    /// Symbols consumed per channel.
    position: usize,
}

impl CaptureReader {
    pub fn open(header_path: &Path) -> Result<Self> {
        let header = CaptureHeader::load(header_path)?;
        let samples_path = CaptureHeader::resolve(header_path, &header.samples_file);
        let samples = File::open(&samples_path).map_err(|e| HarnessError::io(&samples_path, e))?;
        let len = samples
            .metadata()
            .map_err(|e| HarnessError::io(&samples_path, e))?
            .len();
        let frame = header.channels as u64 * SAMPLE_BYTES;
        if len % frame != 0 {
            return Err(HarnessError::format(
                &samples_path,
                format!(
                    "length {len} bytes is not a multiple of {} channels x {SAMPLE_BYTES} bytes; \
                     the incomplete tail starts at byte offset {}",
                    header.channels,
                    len - len % frame
                ),
            ));
        }
        let expected = frame * header.samples_per_channel();
        if len != expected {
            let per_channel = header.samples_per_channel() * SAMPLE_BYTES;
            let short_channel = (len / per_channel).min(header.channels as u64 - 1);
            return Err(HarnessError::format(
                &samples_path,
                format!(
                    "header declares {} symbols x {} channels ({expected} bytes) but the file has {len} bytes; \
                     channel {short_channel} would start at byte offset {}",
                    header.symbols,
                    header.channels,
                    short_channel * per_channel
                ),
            ));
        }
        let bits = match &header.bits_file {
            Some(f) => {
                let path = CaptureHeader::resolve(header_path, f);
                let file = File::open(&path).map_err(|e| HarnessError::io(&path, e))?;
                let len = file.metadata().map_err(|e| HarnessError::io(&path, e))?.len();
                let expected = (header.channels * header.symbols * header.bits_per_symbol()) as u64;
                if len != expected {
                    return Err(HarnessError::format(
                        &path,
                        format!("expected {expected} bytes (one per bit), found {len}"),
                    ));
                }
                Some((file, path))
            }
            None => None,
        };
        Ok(Self {
            header,
            samples,
            samples_path,
            bits,
            position: 0,
        })
    }

    pub fn header(&self) -> &CaptureHeader {
        &self.header
    }

    pub fn has_bits(&self) -> bool {
        self.bits.is_some()
    }

    pub fn remaining(&self) -> usize {
        self.header.symbols - self.position
    }

    /// Next `n` symbols: `sps * n` samples per channel and, when present,
    /// `n * m` bits per channel.
    #[allow(clippy::type_complexity)]
    pub fn read(&mut self, n: usize) -> Result<(Vec<Vec<Complex64>>, Option<Vec<Vec<u8>>>)> {
        let h = &self.header;
        if n > self.remaining() {
            return Err(HarnessError::format(
                &self.samples_path,
                format!(
                    "capture holds {} symbols, {} requested after symbol {}",
                    h.symbols, n, self.position
                ),
            ));
        }
        let per_channel = h.samples_per_channel();
        let mut out = Vec::with_capacity(h.channels);
        let mut buf = vec![0u8; n * h.sps * SAMPLE_BYTES as usize];
        for c in 0..h.channels {
            let offset = (c as u64 * per_channel + (self.position * h.sps) as u64) * SAMPLE_BYTES;
            self.samples
                .seek(SeekFrom::Start(offset))
                .and_then(|_| self.samples.read_exact(&mut buf))
                .map_err(|e| HarnessError::io(&self.samples_path, e))?;
            let ch = buf
                .chunks_exact(SAMPLE_BYTES as usize)
                .map(|b| {
                    Complex64::new(
                        f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
                        f64::from_le_bytes(b[8..].try_into().expect("8 bytes")),
                    )
                })
                .collect();
            out.push(ch);
        }
        let bits = match &mut self.bits {
            Some((file, path)) => {
                let m = h.bits_per_symbol();
                let mut all = Vec::with_capacity(h.channels);
                for c in 0..h.channels {
                    let offset = ((c * h.symbols + self.position) * m) as u64;
                    let mut b = vec![0u8; n * m];
                    file.seek(SeekFrom::Start(offset))
                        .and_then(|_| file.read_exact(&mut b))
                        .map_err(|e| HarnessError::io(path, e))?;
                    if let Some(bad) = b.iter().position(|&v| v > 1) {
                        return Err(HarnessError::format(
                            path,
                            format!("byte offset {} holds {}, expected 0 or 1", offset + bad as u64, b[bad]),
                        ));
                    }
                    all.push(b);
                }
                Some(all)
            }
            None => None,
        };
        self.position += n;
        Ok((out, bits))
    }
}
