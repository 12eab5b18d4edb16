use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Per-dimension affine map `x ↦ (x − mean) / std`.
///
/// Dimensions with zero variance keep a unit scale so they map to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit on the union of the records of `parts`.
    pub fn fit(parts: &[&Dataset]) -> Result<Self> {
        let dim = parts.iter().find(|d| !d.is_empty()).map(|d| d.dim()).unwrap_or(0);
        if dim == 0 {
            return Err(Error::Dataset("cannot fit a standardizer on empty data".into()));
        }
        if let Some(d) = parts.iter().find(|d| !d.is_empty() && d.dim() != dim) {
            return Err(Error::Shape(format!("dimension {} does not match {dim}", d.dim())));
        }
        let rows = || parts.iter().flat_map(|d| d.records()).map(|r| &r.features);
        let n = rows().count() as f64;
        let mut mean = vec![0.0; dim];
        for f in rows() {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for f in rows() {
            for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        if !dataset.is_empty() && dataset.dim() != self.mean.len() {
            return Err(Error::Shape(format!(
                "dataset dimension {} does not match standardizer dimension {}",
                dataset.dim(),
                self.mean.len()
            )));
        }
        let records = dataset
            .records()
            .iter()
            .map(|r| {
                let mut r = r.clone();
                for ((v, m), s) in r.features.iter_mut().zip(&self.mean).zip(&self.std) {
                    *v = (*v - m) / s;
                }
                r
            })
            .collect();
        Dataset::with_label_space(records, dataset.label_space().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, FeatureRecord};

    fn data(rows: &[[f64; 2]]) -> Dataset {
        Dataset::from_records(
            rows.iter()
                .enumerate()
                .map(|(i, f)| FeatureRecord {
                    id: format!("r{i}"),
                    label: "a".into(),
                    domain: Domain::RealGround,
                    features: f.to_vec(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn fitted_data_has_zero_mean_unit_variance() {
        let a = data(&[[1.0, 5.0], [3.0, 5.0]]);
        let b = data(&[[5.0, 5.0], [7.0, 5.0]]);
        let s = Standardizer::fit(&[&a, &b]).unwrap();
        assert_eq!(s.mean, vec![4.0, 5.0]);
        assert_eq!(s.std, vec![5.0f64.sqrt(), 1.0]);
        let out = s.apply(&a).unwrap();
        assert!((out.records()[0].features[0] + 3.0 / 5.0f64.sqrt()).abs() < 1e-15);
        assert_eq!(out.records()[1].features[1], 0.0);
    }

    #[test]
    fn empty_fit_is_an_error() {
        let e = Dataset::empty(vec!["a".into()]);
        assert!(Standardizer::fit(&[&e]).is_err());
    }
}
