//! Labeled feature datasets and their on-disk form.
//!
//! A dataset file holds one JSON object per line:
//!
//! ```text
//! {"id":"aerial-0001","label":"action_03","domain":"real_aerial","features":[0.25,1.5]}
//! ```
//!
//! Blank lines are ignored. Floats are written in shortest round-trip form,
//! so `load(save(d)) == d` holds bit-for-bit.

mod checkpoint;
mod split;
mod standardize;
mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{
    checkpoint_to_string, load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint,
    NetworkState, CHECKPOINT_VERSION,
};
pub use split::{kshot_sample, split, SplitSpec};
pub use standardize::Standardizer;
pub use synth::{synth_benchmark, SynthBenchConfig, SynthBenchmark};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    RealAerial,
    RealGround,
    GameAerial,
    GeneratedAerial,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Domain::RealAerial => "real_aerial",
            Domain::RealGround => "real_ground",
            Domain::GameAerial => "game_aerial",
            Domain::GeneratedAerial => "generated_aerial",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub label: String,
    pub domain: Domain,
    pub features: Vec<f64>,
}

/// An immutable collection of records sharing one feature dimension.
///
/// The label space is kept sorted; label indices used by the trainers are
/// positions in it. It may list labels that no record carries (a k-shot
/// subset keeps the label space of its parent).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<FeatureRecord>,
    label_space: Vec<String>,
    dim: usize,
}

impl Dataset {
    /// Build a dataset whose label space is the sorted set of record labels.
    pub fn from_records(records: Vec<FeatureRecord>) -> Result<Self> {
        let labels: BTreeSet<String> = records.iter().map(|r| r.label.clone()).collect();
        Self::with_label_space(records, labels.into_iter().collect())
    }

    pub fn with_label_space(records: Vec<FeatureRecord>, mut label_space: Vec<String>) -> Result<Self> {
        label_space.sort();
        label_space.dedup();
        let dim = records.first().map_or(0, |r| r.features.len());
        for r in &records {
            if r.features.len() != dim {
                return Err(Error::Dataset(format!(
                    "record {} has dimension {} but the dataset has {dim}",
                    r.id,
                    r.features.len()
                )));
            }
            if r.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Dataset(format!("record {} has non-finite features", r.id)));
            }
            if label_space.binary_search(&r.label).is_err() {
                return Err(Error::Dataset(format!(
                    "record {} has label {} outside the label space",
                    r.id, r.label
                )));
            }
        }
        if dim == 0 && !records.is_empty() {
            return Err(Error::Dataset("records have no features".into()));
        }
        Ok(Self {
            records,
            label_space,
            dim,
        })
    }

    pub fn empty(label_space: Vec<String>) -> Self {
        Self::with_label_space(Vec::new(), label_space).expect("empty dataset is always valid")
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<FeatureRecord> {
        self.records
    }

    pub fn label_space(&self) -> &[String] {
        &self.label_space
    }

    pub fn num_classes(&self) -> usize {
        self.label_space.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_space.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// Label index of every record, in record order.
    pub fn label_indices(&self) -> Vec<usize> {
        self.records
            .iter()
            .map(|r| self.label_index(&r.label).expect("validated on construction"))
            .collect()
    }

    /// Record positions grouped by label index.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.label_space.len()];
        for (i, y) in self.label_indices().into_iter().enumerate() {
            groups[y].push(i);
        }
        groups
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.indices_by_class().iter().map(Vec::len).collect()
    }

    /// Features as an `(records, dim)` matrix.
    pub fn features(&self) -> Array2<f64> {
        self.rows(&(0..self.records.len()).collect::<Vec<_>>())
    }

    /// Features of the selected records, in the given order.
    pub fn rows(&self, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((indices.len(), self.dim));
        for (mut row, &i) in out.rows_mut().into_iter().zip(indices) {
            row.assign(&ndarray::ArrayView1::from(&self.records[i].features[..]));
        }
        out
    }

    /// A new dataset with the selected records and the same label space.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            label_space: self.label_space.clone(),
            dim: self.dim,
        }
    }

    pub fn domains(&self) -> BTreeSet<Domain> {
        self.records.iter().map(|r| r.domain).collect()
    }

    /// Fail unless every record carries `domain`.
    pub fn require_domain(&self, domain: Domain, what: &str) -> Result<()> {
        match self.records.iter().find(|r| r.domain != domain) {
            Some(r) => Err(Error::Dataset(format!(
                "{what}: record {} is {} but {domain} is required",
                r.id, r.domain
            ))),
            None => Ok(()),
        }
    }

    /// Fail unless every label in the label space has at least one record.
    pub fn require_all_classes(&self, what: &str) -> Result<()> {
        for (label, count) in self.label_space.iter().zip(self.class_counts()) {
            if count == 0 {
                return Err(Error::Dataset(format!("{what}: class {label} has no records")));
            }
        }
        Ok(())
    }
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in &dataset.records {
        serde_json::to_writer(&mut out, r).expect("records always serialize");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

/// Parse the line-delimited dataset format.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: FeatureRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Dataset::from_records(records)
}

/// Concatenate datasets of the same dimension, unioning label spaces.
pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
    let mut labels: BTreeSet<String> = BTreeSet::new();
    let mut records = Vec::new();
    for d in parts {
        labels.extend(d.label_space.iter().cloned());
        records.extend(d.records.iter().cloned());
    }
    Dataset::with_label_space(records, labels.into_iter().collect())
}
