//! Flat key/value reports with an embedded run manifest.
//!
//! A report serializes as a single JSON object whose keys are dotted paths
//! (`occupancy.p_zero`, `manifest.command`, ...), sorted, one per line.
//! Floats use shortest round-trip formatting. Nothing time- or
//! host-dependent is recorded, so equal manifests give byte-identical
//! reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::analysis::{DensityHistogram, OccupancyStats, SalienceReport, StorageReport};
use crate::decoder_sim::ComparisonRow;
use crate::error::Result;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// What produced a report: command, parameters, and input digests.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub command: String,
    pub params: BTreeMap<String, String>,
    /// `(path, sha256 hex)` per input file, in argument order.
    pub inputs: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            ..Default::default()
        }
    }

    pub fn param(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    /// Records an input file and its SHA-256.
    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        let digest = file_digest(path)?;
        self.inputs.push((path.display().to_string(), digest));
        Ok(self)
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    entries: BTreeMap<String, Value>,
}

impl Report {
    pub fn new(manifest: &RunManifest) -> Self {
        let mut r = Report {
            entries: BTreeMap::new(),
        };
        r.set("manifest.command", manifest.command.as_str());
        r.set("manifest.tool_version", TOOL_VERSION);
        for (k, v) in &manifest.params {
            r.set(&format!("manifest.param.{k}"), v.as_str());
        }
        for (i, (path, digest)) in manifest.inputs.iter().enumerate() {
            r.set(&format!("manifest.input.{i}.path"), path.as_str());
            r.set(&format!("manifest.input.{i}.sha256"), digest.as_str());
        }
        r
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.entries.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(Value::as_f64)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.entries).expect("string keys serialize");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries: BTreeMap<String, Value> = serde_json::from_str(text)
            .map_err(|e| crate::Error::CorruptStream(format!("report: {e}")))?;
        Ok(Report { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn add_histogram(&mut self, h: &DensityHistogram) -> &mut Self {
        self.set("density.bins", h.counts.len());
        for (i, n) in h.counts.iter().enumerate() {
            self.set(&format!("density.bin.{i:03}"), *n);
        }
        self.set("density.min", h.min_density);
        self.set("density.max", h.max_density);
        self.set("density.max_min_ratio", h.max_min_ratio);
        self
    }

    pub fn add_occupancy(&mut self, o: &OccupancyStats) -> &mut Self {
        self.set("occupancy.block_size", o.block_size)
            .set("occupancy.blocks", o.blocks)
            .set("occupancy.count_zero", o.zero)
            .set("occupancy.count_one", o.one)
            .set("occupancy.count_multi", o.multi)
            .set("occupancy.p_zero", o.p_zero)
            .set("occupancy.p_one", o.p_one)
            .set("occupancy.p_multi", o.p_multi)
    }

    pub fn add_salience(&mut self, prefix: &str, s: &SalienceReport) -> &mut Self {
        self.set(&format!("{prefix}.mean_a"), s.mean_a)
            .set(&format!("{prefix}.mean_b"), s.mean_b)
            .set(&format!("{prefix}.count_a"), s.count_a)
            .set(&format!("{prefix}.count_b"), s.count_b)
            .set(&format!("{prefix}.rel_diff"), s.rel_diff)
    }

    pub fn add_storage(&mut self, s: &StorageReport) -> &mut Self {
        self.set("storage.format", s.format.name())
            .set("storage.retained", s.retained)
            .set("storage.stored_weights", s.stored_weights)
            .set("storage.weight_bits", s.weight_bits)
            .set("storage.weight_bytes", s.weight_bytes)
            .set("storage.index_count", s.index_count)
            .set("storage.index_bits", s.index_bits)
            .set("storage.index_bytes", s.index_bytes)
            .set("storage.total_bytes", s.total_bytes)
            .set("storage.avg_index_bits", s.avg_index_bits)
            .set(
                "storage.avg_index_bits_unaligned",
                s.avg_index_bits_unaligned,
            )
    }

    pub fn add_comparison(&mut self, rows: &[ComparisonRow]) -> &mut Self {
        self.set("simulate.count", rows.len());
        for (i, row) in rows.iter().enumerate() {
            let p = format!("simulate.{i}");
            self.set(&format!("{p}.label"), row.label.as_str())
                .set(&format!("{p}.efficiency"), row.efficiency)
                .set(&format!("{p}.pruning_ratio"), row.pruning_ratio)
                .set(&format!("{p}.gain"), row.gain);
        }
        self
    }
}
