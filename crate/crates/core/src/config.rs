//! Run configuration: every tunable under one flat `key = value` namespace.
//!
//! Keys are the dotted field paths of [`RunConfig`], for example
//! `gan.lambda_gp`, `dml.weights.w2` or `synth.nuisance_scale`. Lists are
//! comma separated (`ks = 1,5,10`), paths may be left empty, and `#` starts
//! a comment line. [`RunConfig::to_text`] prints every key with its value, in
//! the same format [`RunConfig::apply_text`] reads.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::data::{SplitSpec, SynthBenchConfig};
use crate::dml::{DmlConfig, DmlMode};
use crate::error::{Error, Result};
use crate::eval::PipelineConfig;
use crate::gan::GanConfig;

/// File name of the resolved configuration written next to every output.
pub const RESOLVED_CONFIG_FILE: &str = "config.txt";

/// Keys that exist on the nested structs but are always derived from `seed`.
const DERIVED_KEYS: [&str; 2] = ["synth.seed", "split.seed"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub out: Option<PathBuf>,
    pub ground: Option<PathBuf>,
    /// Real aerial records: the full set for `split` and `kshot-sweep`, the
    /// k-shot training set for `train-gan`.
    pub aerial: Option<PathBuf>,
    pub real: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub games: Option<PathBuf>,
    pub generated: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub warm_start: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: DmlMode,
    pub k: usize,
    /// Shot counts of a k-shot sweep.
    pub ks: Vec<usize>,
    /// Seeds of a k-shot sweep.
    pub seeds: Vec<u64>,
    /// Modes of a k-shot sweep.
    pub modes: Vec<DmlMode>,
    pub per_record: usize,
    pub standardize: bool,
    pub synth: SynthBenchConfig,
    pub split: SplitSpec,
    pub gan: GanConfig,
    pub dml: DmlConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: DmlMode::GamesPlusGenerated,
            k: 5,
            ks: vec![1, 3, 5, 10, 15],
            seeds: (0..10).collect(),
            modes: vec![DmlMode::Baseline, DmlMode::GamesPlusGenerated],
            per_record: 1,
            standardize: false,
            synth: SynthBenchConfig::default(),
            split: SplitSpec::default(),
            gan: GanConfig::default(),
            dml: DmlConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn leaf_mut<'a>(tree: &'a mut Value, key: &str) -> &'a mut Value {
    key.split('.').fold(tree, |node, part| {
        node.as_object_mut()
            .and_then(|m: &mut Map<String, Value>| m.get_mut(part))
            .expect("key came from the flattened tree")
    })
}

fn parse_scalar(raw: &str) -> Value {
    if let Ok(v) = raw.parse::<u64>() {
        return Value::from(v);
    }
    if let Some(n) = raw.parse::<f64>().ok().and_then(serde_json::Number::from_f64) {
        return Value::Number(n);
    }
    Value::String(raw.to_string())
}

fn parse_as(existing: &Value, key: &str, raw: &str) -> Result<Value> {
    let bad = |what: &str| Error::Config(format!("key {key}: expected {what}, got {raw:?}"));
    Ok(match existing {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_f64() => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            Value::Number(serde_json::Number::from_f64(v).ok_or_else(|| bad("a finite number"))?)
        }
        Value::Number(_) => Value::from(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?),
        Value::Array(_) if raw.is_empty() => Value::Array(Vec::new()),
        Value::Array(_) => Value::Array(raw.split(',').map(|s| parse_scalar(s.trim())).collect()),
        Value::Null | Value::String(_) if raw.is_empty() => Value::Null,
        Value::Null | Value::String(_) => Value::String(raw.to_string()),
        Value::Object(_) => unreachable!("objects are never leaves"),
    })
}

fn render(value: &Value) -> String {
    match value {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

impl RunConfig {
    fn tree(&self) -> Value {
        serde_json::to_value(self).expect("config always serializes")
    }

    /// Every settable key with its current value.
    pub fn entries(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &self.tree(), &mut out);
        for k in DERIVED_KEYS {
            out.remove(k);
        }
        out
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let entries = self.entries();
        let existing = entries
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
        let value = parse_as(existing, key, raw.trim())?;
        let mut tree = self.tree();
        *leaf_mut(&mut tree, key) = value;
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("key {key}: invalid value {raw:?}: {e}")))?;
        Ok(())
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply_text(text)?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// One `key = value` line per key, sorted by key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {}", render(&v));
        }
        out
    }

    /// SHA-256 (hex) of the resolved configuration without its `paths.*`
    /// entries, so moving files around does not change the hash.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.entries() {
            if !k.starts_with("paths.") {
                hasher.update(format!("{k} = {}\n", render(&v)).as_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.per_record == 0 {
            return Err(Error::Config("k and per_record must be positive".into()));
        }
        self.synth.validate()?;
        self.split.validate()?;
        self.gan.validate()?;
        self.dml.validate()
    }

    /// Benchmark configuration seeded from `seed`.
    pub fn synth_config(&self) -> SynthBenchConfig {
        SynthBenchConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            split: self.split,
            gan: self.gan.clone(),
            dml: self.dml.clone(),
            per_record: self.per_record,
            standardize: self.standardize,
        }
    }

    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::Interpolation;
    use proptest::prelude::*;

    #[test]
    fn text_round_trip_of_defaults() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn keys_reach_nested_fields() {
        let c = RunConfig::from_text(
            "# comment\n\
             gan.lambda_gp = 5\n\
             gan.eq2_literal = true\n\
             gan.interpolation = generated-to-real-aerial\n\
             gan.generator_hidden = 16,16,8\n\
             dml.weights.w2 = 0.25\n\
             mode = games\n\
             ks = 15,5\n\
             paths.out = runs/a\n",
        )
        .unwrap();
        assert_eq!(c.gan.lambda_gp, 5.0);
        assert!(c.gan.eq2_literal);
        assert_eq!(c.gan.interpolation, Interpolation::GeneratedToRealAerial);
        assert_eq!(c.gan.generator_hidden, [16, 16, 8]);
        assert_eq!(c.dml.weights.w2, 0.25);
        assert_eq!(c.mode, DmlMode::Games);
        assert_eq!(c.ks, vec![15, 5]);
        assert_eq!(c.paths.out, Some(PathBuf::from("runs/a")));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_text("gan.lamda_gp = 3").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("gan.lamda_gp")), "{err}");
        assert!(RunConfig::from_text("gan = 3").is_err());
        assert!(RunConfig::from_text("synth.seed = 3").is_err());
        assert!(RunConfig::from_text("gan.generator_hidden.0 = 3").is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in ["k = -1", "k = 2.5", "gan.eq2_literal = yes", "mode = sideways", "gan.generator_hidden = 1,2", "spread = 1"] {
            assert!(RunConfig::from_text(text).is_err(), "{text}");
        }
        assert!(matches!(RunConfig::from_text("k 5"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_value_clears_a_path() {
        let mut c = RunConfig::from_text("paths.games = g.jsonl").unwrap();
        c.set("paths.games", "").unwrap();
        assert_eq!(c.paths.games, None);
    }

    #[test]
    fn later_lines_win() {
        let c = RunConfig::from_text("k = 3\nk = 7").unwrap();
        assert_eq!(c.k, 7);
    }

    #[test]
    fn hash_ignores_paths_but_not_tunables() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.set("paths.out", "elsewhere").unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set("dml.epochs", "3").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn pipeline_carries_the_tunables() {
        let c = RunConfig::from_text("per_record = 3\nstandardize = true\nsplit.val_frac = 0.2\nsplit.test_frac = 0.2").unwrap();
        let p = c.pipeline();
        assert_eq!(p.per_record, 3);
        assert!(p.standardize);
        assert_eq!(p.split.val_frac, 0.2);
        c.validate().unwrap();
    }

    proptest! {
        #[test]
        fn set_values_survive_text_round_trip(
            lambda in 0.0f64..100.0,
            epochs in 1usize..500,
            w3 in 0.0f64..2.0,
            soft in any::<bool>(),
            seeds in prop::collection::vec(0u64..1000, 0..5),
        ) {
            let mut c = RunConfig::default();
            c.gan.lambda_gp = lambda;
            c.dml.epochs = epochs;
            c.dml.weights.w3 = w3;
            c.dml.soft_labels = soft;
            c.seeds = seeds;
            prop_assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        }
    }
}
