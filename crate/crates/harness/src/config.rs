//! Experiment configuration: a flat `key = value` file with units in the
//! key names. Unset learning rates come from the committed defaults table.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vaee_core::channel::{CoreChannelParams, LinkConfig, PhaseNoiseParams};
use vaee_core::cpr::BpsConfig;
use vaee_core::losses::VaeVariant;

use crate::error::{HarnessError, Result};

const DEFAULT_RATES: &str = include_str!("../defaults/learning_rates.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// VAE equalizer without carrier phase recovery.
    Vaee,
    /// VAE equalizer, blind phase search applied to its output.
    VaeeCpr,
    /// VAE equalizer with the differentiable phase search in the loss.
    VaeeTrainedCpr,
    /// Constant-modulus baseline with blind phase search on its output.
    Cm,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Self::Vaee, Self::VaeeCpr, Self::VaeeTrainedCpr, Self::Cm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vaee => "vaee",
            Self::VaeeCpr => "vaee_cpr",
            Self::VaeeTrainedCpr => "vaee_trained_cpr",
            Self::Cm => "cm",
        }
    }

    /// Loss variant for the VAE algorithms.
    pub fn vae_variant(self) -> Option<VaeVariant> {
        match self {
            Self::Vaee => Some(VaeVariant::Plain),
            Self::VaeeCpr => Some(VaeVariant::TrailingCpr),
            Self::VaeeTrainedCpr => Some(VaeVariant::TrainedCpr),
            Self::Cm => None,
        }
    }

    pub fn uses_cpr(self) -> bool {
        !matches!(self, Self::Vaee)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown algorithm '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub order: usize,
    pub symbol_rate_hz: f64,
    pub sps: usize,
    pub rolloff: f64,
    pub rrc_span_symbols: usize,
    pub cores: usize,
    pub gamma_hv_rad: f64,
    pub tau_pmd_ps: f64,
    pub beta_cd_l_ps2: f64,
    pub linewidth_hz: f64,
    pub snr_db: f64,
    pub m_eq: usize,
    pub m_est: usize,
    pub batch_symbols: usize,
    pub cpr_window: usize,
    pub cpr_angles_per_quadrant: usize,
    pub cpr_temperature: f64,
    pub lr_eq: Option<f64>,
    pub lr_est: Option<f64>,
    pub lr_pilot: Option<f64>,
    /// Demapper noise variance; defaults to the per-sample noise variance
    /// implied by `snr_db`.
    pub demap_noise_var: Option<f64>,
    pub frames: usize,
    pub frame_symbols: usize,
    pub preconv_symbols: usize,
    pub runs: usize,
    /// Frames per run entering the summary, counted from the end.
    pub scored_frames: usize,
    pub seed: u64,
    /// Replay a capture instead of simulating the link.
    pub input: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let reference = CoreChannelParams::reference();
        Self {
            algorithm: Algorithm::VaeeTrainedCpr,
            order: 64,
            symbol_rate_hz: reference.symbol_rate,
            sps: 2,
            rolloff: 0.2,
            rrc_span_symbols: 32,
            cores: 4,
            gamma_hv_rad: reference.gamma_hv,
            tau_pmd_ps: reference.tau_pmd * 1e12,
            beta_cd_l_ps2: reference.beta_cd_l * 1e24,
            linewidth_hz: 0.0,
            snr_db: 25.0,
            m_eq: 51,
            m_est: 51,
            batch_symbols: 100,
            cpr_window: 65,
            cpr_angles_per_quadrant: 40,
            cpr_temperature: 0.01,
            lr_eq: None,
            lr_est: None,
            lr_pilot: None,
            demap_noise_var: None,
            frames: 100,
            frame_symbols: 10_000,
            preconv_symbols: 10_000,
            runs: 10,
            scored_frames: 20,
            seed: 1,
            input: None,
        }
    }
}

/// Learning rates actually used by a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub eq: f64,
    pub est: f64,
    pub pilot: f64,
}

#[derive(Deserialize)]
struct RateEntry {
    lr_eq: f64,
    lr_est: f64,
    lr_pilot: f64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the serialized configuration, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Set one field from its textual value, as given on the command line
    /// or as a sweep axis.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: BTreeMap<String, toml::Value> =
            toml::from_str(&self.to_toml()).expect("config round-trips");
        let template = Self::default();
        let known: BTreeMap<String, toml::Value> =
            toml::from_str(&template.to_toml()).expect("config round-trips");
        let parsed = match key {
            "algorithm" => toml::Value::String(value.to_string()),
            "input" => toml::Value::String(value.to_string()),
            "lr_eq" | "lr_est" | "lr_pilot" | "demap_noise_var" => toml::Value::Float(parse_f64(key, value)?),
            _ => match known.get(key) {
                Some(toml::Value::Integer(_)) => toml::Value::Integer(
                    value
                        .parse()
                        .map_err(|_| HarnessError::Config(format!("{key} expects an integer, got '{value}'")))?,
                ),
                Some(toml::Value::Float(_)) => toml::Value::Float(parse_f64(key, value)?),
                _ => return Err(HarnessError::Config(format!("unknown configuration key '{key}'"))),
            },
        };
        table.insert(key.to_string(), parsed);
        let text = toml::to_string(&table).expect("table serializes");
        *self = toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Names of the numeric fields usable as sweep axes.
    pub fn numeric_keys() -> Vec<String> {
        let table: BTreeMap<String, toml::Value> =
            toml::from_str(&Self::default().to_toml()).expect("config round-trips");
        let mut keys: Vec<String> = table
            .into_iter()
            .filter(|(_, v)| matches!(v, toml::Value::Integer(_) | toml::Value::Float(_)))
            .map(|(k, _)| k)
            .collect();
        keys.extend(["lr_eq", "lr_est", "lr_pilot", "demap_noise_var"].map(String::from));
        keys.sort();
        keys
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        let counts = [
            ("order", self.order),
            ("sps", self.sps),
            ("rrc_span_symbols", self.rrc_span_symbols),
            ("cores", self.cores),
            ("m_eq", self.m_eq),
            ("m_est", self.m_est),
            ("batch_symbols", self.batch_symbols),
            ("cpr_window", self.cpr_window),
            ("cpr_angles_per_quadrant", self.cpr_angles_per_quadrant),
            ("frames", self.frames),
            ("frame_symbols", self.frame_symbols),
            ("preconv_symbols", self.preconv_symbols),
            ("runs", self.runs),
            ("scored_frames", self.scored_frames),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.sps != 2 {
            return bad(format!("the equalizer runs at 2 samples per symbol, got sps = {}", self.sps));
        }
        if self.m_eq.is_multiple_of(2) || self.m_est.is_multiple_of(2) {
            return bad("m_eq and m_est must be odd".into());
        }
        if self.cpr_window.is_multiple_of(2) {
            return bad("cpr_window must be odd".into());
        }
        if !self.frame_symbols.is_multiple_of(self.batch_symbols) || !self.preconv_symbols.is_multiple_of(self.batch_symbols) {
            return bad("frame_symbols and preconv_symbols must be multiples of batch_symbols".into());
        }
        if self.cpr_context() > self.batch_symbols {
            return bad("cpr_window must not exceed twice batch_symbols".into());
        }
        if 2 * self.m_est >= 2 * self.batch_symbols {
            return bad("batch_symbols must exceed m_est".into());
        }
        if self.scored_frames > self.frames {
            return bad(format!("scored_frames {} exceeds frames {}", self.scored_frames, self.frames));
        }
        if self.frame_symbols <= 2 * self.m_eq {
            return bad("frame_symbols must exceed twice m_eq".into());
        }
        for (name, v) in [
            ("symbol_rate_hz", self.symbol_rate_hz),
            ("cpr_temperature", self.cpr_temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("lr_eq", self.lr_eq), ("lr_est", self.lr_est), ("lr_pilot", self.lr_pilot), ("demap_noise_var", self.demap_noise_var)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("{name} must be positive"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.rolloff) {
            return bad("rolloff must lie in [0, 1]".into());
        }
        if !(self.linewidth_hz >= 0.0) || self.snr_db.is_nan() {
            return bad("linewidth_hz must be non-negative and snr_db a number".into());
        }
        // TOML integers are signed 64-bit; larger seeds could not be written back.
        if self.seed.checked_add(self.runs as u64 - 1).and_then(|s| i64::try_from(s).ok()).is_none() {
            return bad("seed plus runs must fit a signed 64-bit integer".into());
        }
        vaee_core::signal::make_qam(self.order, None).map_err(HarnessError::from)?;
        Ok(())
    }

    /// Context symbols on each side of a batch needed by the CPR window.
    /// Algorithms without CPR read the same windows, so every algorithm
    /// sees identical batches for a given seed.
    pub fn cpr_context(&self) -> usize {
        (self.cpr_window - 1) / 2
    }

    pub fn bps(&self) -> Result<BpsConfig> {
        Ok(BpsConfig::new(self.cpr_angles_per_quadrant, self.cpr_temperature, self.cpr_window)?)
    }

    pub fn core_params(&self) -> CoreChannelParams {
        CoreChannelParams {
            gamma_hv: self.gamma_hv_rad,
            tau_pmd: self.tau_pmd_ps * 1e-12,
            beta_cd_l: self.beta_cd_l_ps2 * 1e-24,
            symbol_rate: self.symbol_rate_hz,
        }
    }

    /// Link of run `run`; runs use consecutive seeds from the base seed.
    pub fn link(&self, run: usize) -> Result<LinkConfig> {
        Ok(LinkConfig::with_random_permutation(
            self.cores,
            self.core_params(),
            self.snr_db,
            PhaseNoiseParams::new(self.linewidth_hz, self.symbol_rate_hz)?,
            self.run_seed(run),
        )?)
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }

    /// Demapper noise variance: the explicit value or the per-sample noise
    /// variance of a unit-energy pulse at the configured SNR.
    pub fn demap_variance(&self) -> f64 {
        self.demap_noise_var.unwrap_or_else(|| {
            let v = 10f64.powf(-self.snr_db / 10.0) / self.sps as f64;
            v.max(1e-6)
        })
    }

    pub fn learning_rates(&self) -> Result<LearningRates> {
        let table: BTreeMap<String, BTreeMap<String, RateEntry>> =
            toml::from_str(DEFAULT_RATES).map_err(|e| HarnessError::Config(e.to_string()))?;
        let scenario = format!("qam{}", self.order);
        let entry = table
            .get(&scenario)
            .and_then(|t| t.get(self.algorithm.name()))
            .or_else(|| table.get("fallback").and_then(|t| t.get(self.algorithm.name())));
        let (eq, est, pilot) = match entry {
            Some(e) => (e.lr_eq, e.lr_est, e.lr_pilot),
            None => {
                return Err(HarnessError::Config(format!(
                    "no default learning rates for {} / {}",
                    scenario, self.algorithm
                )))
            }
        };
        Ok(LearningRates {
            eq: self.lr_eq.unwrap_or(eq),
            est: self.lr_est.unwrap_or(est),
            pilot: self.lr_pilot.unwrap_or(pilot),
        })
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("{key} expects a number, got '{value}'")))
}
