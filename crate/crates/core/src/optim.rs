//! Adam with bias correction, plus the central-difference gradient checker
//! used to verify every analytic gradient in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamBundle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    /// Settings for generator and critic.
    pub fn gan() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Settings for the DML network and the softmax classifier.
    pub fn classifier() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn with_lr(mut self, learning_rate: f64) -> Self {
        self.learning_rate = learning_rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self::classifier()
    }
}

/// First and second moment estimates for one [`ParamBundle`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: ParamBundle,
    pub second_moment: ParamBundle,
}

impl AdamState {
    pub fn new(params: &ParamBundle) -> Self {
        Self {
            step_count: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }
}

/// One Adam update of `params` in place.
///
/// Nothing is modified when the call fails.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ParamBundle,
    grads: &ParamBundle,
    hyper: &AdamHyper,
) -> Result<()> {
    if !params.same_shape(grads)
        || !params.same_shape(&state.first_moment)
        || !params.same_shape(&state.second_moment)
    {
        return Err(Error::Shape(
            "parameters, gradients and moments must share one shape".into(),
        ));
    }
    if let Some(layer) = grads.first_non_finite_layer() {
        return Err(Error::Training(format!(
            "non-finite gradient in layer {layer}"
        )));
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let lr = hyper.learning_rate;
    let eps = hyper.epsilon;

    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for (((p, m), v), g) in params
        .layers
        .iter_mut()
        .zip(state.first_moment.layers.iter_mut())
        .zip(state.second_moment.layers.iter_mut())
        .zip(&grads.layers)
    {
        ndarray::Zip::from(&mut p.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .and(&g.weight)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        ndarray::Zip::from(&mut p.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .and(&g.bias)
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
    Ok(())
}

/// Anything whose parameters can be viewed as one flat vector.
pub trait FlatParams: Clone {
    fn to_flat(&self) -> Vec<f64>;
    fn set_flat(&mut self, values: &[f64]);
}

impl FlatParams for ParamBundle {
    fn to_flat(&self) -> Vec<f64> {
        ParamBundle::to_flat(self)
    }

    fn set_flat(&mut self, values: &[f64]) {
        ParamBundle::set_flat(self, values)
    }
}

impl<T: FlatParams> FlatParams for Vec<T> {
    fn to_flat(&self) -> Vec<f64> {
        self.iter().flat_map(|p| p.to_flat()).collect()
    }

    fn set_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        for p in self.iter_mut() {
            let n = p.to_flat().len();
            p.set_flat(&values[offset..offset + n]);
            offset += n;
        }
    }
}

/// Entries whose analytic and numeric gradients are both below this scale
/// are compared in absolute terms.
pub const GRADCHECK_SCALE_FLOOR: f64 = 1e-6;

/// Worst relative disagreement between `analytic` and a central-difference
/// estimate of the gradient of `loss` at `params`.
///
/// Per coordinate the error is `|a − n| / max(|a|, |n|, GRADCHECK_SCALE_FLOOR)`.
pub fn finite_diff_gradcheck<P, F>(loss: F, params: &P, analytic: &P, step: f64) -> Result<f64>
where
    P: FlatParams,
    F: Fn(&P) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::Input(format!("step {step} must be positive")));
    }
    let base = params.to_flat();
    let grad = analytic.to_flat();
    if base.len() != grad.len() {
        return Err(Error::Shape(
            "analytic gradient does not match parameters".into(),
        ));
    }
    let mut probe = params.clone();
    let mut values = base.clone();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        values[i] = base[i] + step;
        probe.set_flat(&values);
        let up = loss(&probe);
        values[i] = base[i] - step;
        probe.set_flat(&values);
        let down = loss(&probe);
        values[i] = base[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Input(format!(
                "non-finite loss while perturbing parameter {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * step);
        let denom = grad[i].abs().max(numeric.abs()).max(GRADCHECK_SCALE_FLOOR);
        worst = worst.max((grad[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
