use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Per-class stratified train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.6,
            val_frac: 0.1,
            test_frac: 0.3,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must sum to 1".into()));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes for a class of `n` records: floor for
    /// train and validation, the remainder to test.
    pub fn class_sizes(&self, n: usize) -> (usize, usize, usize) {
        // The small slack keeps exact products such as 50 · 0.6 from
        // flooring one short after rounding.
        let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
        let train = floor(self.train_frac);
        let val = floor(self.val_frac);
        (train, val, n - train - val)
    }
}

/// Stratified split into `(train, val, test)`.
///
/// Each output keeps the input's record order and label space.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = rng::stream_rng(spec.seed, rng::stream::SPLIT);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (class, mut members) in dataset.indices_by_class().into_iter().enumerate() {
        if members.len() < 3 {
            return Err(Error::Dataset(format!(
                "class {} has {} records; a split needs at least 3",
                dataset.label_space()[class],
                members.len()
            )));
        }
        let (n_train, n_val, _) = spec.class_sizes(members.len());
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..n_train]);
        val.extend_from_slice(&members[n_train..n_train + n_val]);
        test.extend_from_slice(&members[n_train + n_val..]);
    }
    for part in [&mut train, &mut val, &mut test] {
        part.sort_unstable();
    }
    Ok((dataset.subset(&train), dataset.subset(&val), dataset.subset(&test)))
}

/// Exactly `k` records per class, drawn uniformly without replacement.
pub fn kshot_sample(train: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    let mut rng = rng::stream_rng(seed, rng::stream::KSHOT);
    let mut chosen = Vec::new();
    for (class, mut members) in train.indices_by_class().into_iter().enumerate() {
        if members.len() < k {
            return Err(Error::Dataset(format!(
                "class {} has {} records, fewer than k = {k}",
                train.label_space()[class],
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..k]);
    }
    chosen.sort_unstable();
    Ok(train.subset(&chosen))
}
