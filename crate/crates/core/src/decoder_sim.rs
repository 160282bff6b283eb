//! Multiplexer-based index decoder model.
//!
//! Decoding efficiency is the number of activations a decoder bank can pick
//! out of an activation vector per clock cycle:
//!
//! * DARB: one small decoder per supported block size, each consuming a
//!   full row of length `L` per cycle, so `sum_b ceil(L / b)`.
//! * Block pruning: each decoder resolves one tile index per cycle and
//!   thereby selects `block_rows * block_cols` activations.
//! * Irregular CSR: each decoder resolves one index per cycle.
//!
//! Decoder counts are area-normalized calibration inputs and may be
//! fractional; products are rounded half-up to whole activations.
//!
//! Configuration files are TOML with one `[[decoder]]` table per scheme:
//!
//! ```toml
//! [[decoder]]
//! scheme = "darb"            # darb | block | irregular
//! label = "DARB"             # optional
//! row_len = 1500
//! sizes = [2, 4, 8, 16, 32, 64]   # darb only
//! pruning_ratio = 13.14      # optional
//!
//! [[decoder]]
//! scheme = "block"
//! row_len = 1500
//! decoder_count = 6.41       # block and irregular
//! block_rows = 4             # block only
//! block_cols = 4
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::pruning::round_half_up;

#[derive(Debug, Clone, PartialEq)]
pub enum DecoderScheme {
    Darb {
        supported_sizes: Vec<u32>,
    },
    Block {
        decoder_count: f64,
        block_rows: usize,
        block_cols: usize,
    },
    Irregular {
        decoder_count: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub label: String,
    pub row_len: usize,
    pub scheme: DecoderScheme,
}

impl DecoderConfig {
    pub fn darb(row_len: usize, supported_sizes: Vec<u32>) -> Result<Self> {
        Self::new(
            "darb".into(),
            row_len,
            DecoderScheme::Darb { supported_sizes },
        )
    }

    pub fn block(
        row_len: usize,
        decoder_count: f64,
        block_rows: usize,
        block_cols: usize,
    ) -> Result<Self> {
        Self::new(
            format!("block-{block_rows}x{block_cols}"),
            row_len,
            DecoderScheme::Block {
                decoder_count,
                block_rows,
                block_cols,
            },
        )
    }

    pub fn irregular(row_len: usize, decoder_count: f64) -> Result<Self> {
        Self::new(
            "irregular".into(),
            row_len,
            DecoderScheme::Irregular { decoder_count },
        )
    }

    pub fn new(label: String, row_len: usize, scheme: DecoderScheme) -> Result<Self> {
        let cfg = DecoderConfig {
            label,
            row_len,
            scheme,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.row_len == 0 {
            return Err(Error::InvalidParameter(
                "row length must be positive".into(),
            ));
        }
        let check_count = |n: f64| {
            if n.is_finite() && n >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!(
                    "decoder count {n} must be finite and >= 0"
                )))
            }
        };
        match &self.scheme {
            DecoderScheme::Darb { supported_sizes } => {
                if supported_sizes.is_empty() {
                    return Err(Error::InvalidParameter("no supported block sizes".into()));
                }
                if supported_sizes.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidParameter(
                        "block sizes must be strictly ascending".into(),
                    ));
                }
                if let Some(&b) = supported_sizes
                    .iter()
                    .find(|&&b| !b.is_power_of_two() || b as usize > self.row_len)
                {
                    return Err(Error::InvalidParameter(format!(
                        "block size {b} must be a power of two no larger than {}",
                        self.row_len
                    )));
                }
                Ok(())
            }
            DecoderScheme::Block {
                decoder_count,
                block_rows,
                block_cols,
            } => {
                if *block_rows == 0 || *block_cols == 0 {
                    return Err(Error::InvalidParameter(
                        "tile dimensions must be positive".into(),
                    ));
                }
                check_count(*decoder_count)
            }
            DecoderScheme::Irregular { decoder_count } => check_count(*decoder_count),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyResult {
    pub activations_per_cycle: u64,
    /// `(block size, activations)` per DARB decoder; empty otherwise.
    pub per_size: Vec<(u32, u64)>,
}

fn round_count(x: f64) -> u64 {
    round_half_up(x) as u64
}

pub fn darb_efficiency(cfg: &DecoderConfig) -> Result<EfficiencyResult> {
    cfg.validate()?;
    let DecoderScheme::Darb { supported_sizes } = &cfg.scheme else {
        return Err(Error::InvalidParameter(
            "expected a darb decoder config".into(),
        ));
    };
    let per_size: Vec<(u32, u64)> = supported_sizes
        .iter()
        .map(|&b| (b, cfg.row_len.div_ceil(b as usize) as u64))
        .collect();
    Ok(EfficiencyResult {
        activations_per_cycle: per_size.iter().map(|p| p.1).sum(),
        per_size,
    })
}

pub fn block_efficiency(cfg: &DecoderConfig) -> Result<EfficiencyResult> {
    cfg.validate()?;
    let DecoderScheme::Block {
        decoder_count,
        block_rows,
        block_cols,
    } = cfg.scheme
    else {
        return Err(Error::InvalidParameter(
            "expected a block decoder config".into(),
        ));
    };
    Ok(EfficiencyResult {
        activations_per_cycle: round_count(decoder_count * (block_rows * block_cols) as f64),
        per_size: Vec::new(),
    })
}

pub fn irregular_efficiency(cfg: &DecoderConfig) -> Result<EfficiencyResult> {
    cfg.validate()?;
    let DecoderScheme::Irregular { decoder_count } = cfg.scheme else {
        return Err(Error::InvalidParameter(
            "expected an irregular decoder config".into(),
        ));
    };
    Ok(EfficiencyResult {
        activations_per_cycle: round_count(decoder_count),
        per_size: Vec::new(),
    })
}

pub fn efficiency(cfg: &DecoderConfig) -> Result<EfficiencyResult> {
    match cfg.scheme {
        DecoderScheme::Darb { .. } => darb_efficiency(cfg),
        DecoderScheme::Block { .. } => block_efficiency(cfg),
        DecoderScheme::Irregular { .. } => irregular_efficiency(cfg),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub efficiency: u64,
    pub pruning_ratio: Option<f64>,
    /// Efficiency relative to the first row; `None` if that row is zero.
    pub gain: Option<f64>,
}

/// Efficiency of each config and its gain over the first entry.
pub fn compare(configs: &[DecoderConfig], ratios: &[Option<f64>]) -> Result<Vec<ComparisonRow>> {
    if configs.len() != ratios.len() {
        return Err(Error::InvalidParameter(format!(
            "{} configs but {} pruning ratios",
            configs.len(),
            ratios.len()
        )));
    }
    let effs = configs
        .iter()
        .map(|c| efficiency(c).map(|e| e.activations_per_cycle))
        .collect::<Result<Vec<_>>>()?;
    let base = effs.first().copied().unwrap_or(0);
    Ok(configs
        .iter()
        .zip(effs)
        .zip(ratios)
        .map(|((cfg, eff), ratio)| ComparisonRow {
            label: cfg.label.clone(),
            efficiency: eff,
            pruning_ratio: *ratio,
            gain: (base > 0).then(|| eff as f64 / base as f64),
        })
        .collect())
}

/// Gain of row `a` over row `b`, e.g. DARB over Block-4x4.
pub fn gain_over(a: &ComparisonRow, b: &ComparisonRow) -> Option<f64> {
    (b.efficiency > 0).then(|| a.efficiency as f64 / b.efficiency as f64)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDecoder {
    scheme: String,
    label: Option<String>,
    row_len: usize,
    sizes: Option<Vec<u32>>,
    decoder_count: Option<f64>,
    block_rows: Option<usize>,
    block_cols: Option<usize>,
    pruning_ratio: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfigFile {
    decoder: Vec<RawDecoder>,
}

/// Parsed decoder configurations with their optional pruning ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub decoders: Vec<DecoderConfig>,
    pub pruning_ratios: Vec<Option<f64>>,
}

impl SimulationConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if raw.decoder.is_empty() {
            return Err(Error::Config("no [[decoder]] entries".into()));
        }
        let mut decoders = Vec::with_capacity(raw.decoder.len());
        let mut pruning_ratios = Vec::with_capacity(raw.decoder.len());
        for (i, d) in raw.decoder.into_iter().enumerate() {
            let missing =
                |key: &str| Error::Config(format!("decoder {i} ({}): missing `{key}`", d.scheme));
            let scheme = match d.scheme.as_str() {
                "darb" => DecoderScheme::Darb {
                    supported_sizes: d.sizes.clone().ok_or_else(|| missing("sizes"))?,
                },
                "block" => DecoderScheme::Block {
                    decoder_count: d.decoder_count.ok_or_else(|| missing("decoder_count"))?,
                    block_rows: d.block_rows.ok_or_else(|| missing("block_rows"))?,
                    block_cols: d.block_cols.ok_or_else(|| missing("block_cols"))?,
                },
                "irregular" => DecoderScheme::Irregular {
                    decoder_count: d.decoder_count.ok_or_else(|| missing("decoder_count"))?,
                },
                other => {
                    return Err(Error::Config(format!(
                        "decoder {i}: unknown scheme {other:?}"
                    )))
                }
            };
            let label = d.label.clone().unwrap_or_else(|| match &scheme {
                DecoderScheme::Darb { .. } => "darb".to_string(),
                DecoderScheme::Block {
                    block_rows,
                    block_cols,
                    ..
                } => format!("block-{block_rows}x{block_cols}"),
                DecoderScheme::Irregular { .. } => "irregular".to_string(),
            });
            let cfg = DecoderConfig::new(label, d.row_len, scheme)
                .map_err(|e| Error::Config(format!("decoder {i}: {e}")))?;
            decoders.push(cfg);
            pruning_ratios.push(d.pruning_ratio);
        }
        Ok(SimulationConfig {
            decoders,
            pruning_ratios,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn compare(&self) -> Result<Vec<ComparisonRow>> {
        compare(&self.decoders, &self.pruning_ratios)
    }
}
