use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, ParamStore, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Per-parameter AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState<T: Scalar> {
    pub step: u64,
    pub first: Tensor<T>,
    pub second: Tensor<T>,
}

/// Adam with decoupled weight decay. Parameters without a gradient in a step
/// are left untouched, including their decay.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar = f32> {
    config: AdamWConfig,
    state: BTreeMap<String, MomentState<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, state: BTreeMap::new() }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn state(&self) -> &BTreeMap<String, MomentState<T>> {
        &self.state
    }

    pub fn set_state(&mut self, state: BTreeMap<String, MomentState<T>>) {
        self.state = state;
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let one = T::one();
        let decay = one - T::from_f64(c.learning_rate * c.weight_decay);
        for (name, grad) in grads {
            let param = params.get_mut(name)?;
            if param.shape() != grad.shape() {
                return Err(Error::Topology(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| MomentState {
                step: 0,
                first: Tensor::zeros(grad.shape()),
                second: Tensor::zeros(grad.shape()),
            });
            st.step += 1;
            let t = st.step as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2_sqrt = (1.0 - c.beta2.powi(t)).sqrt();
            let step_size = T::from_f64(c.learning_rate / bc1);
            let bc2_sqrt = T::from_f64(bc2_sqrt);
            let eps = T::from_f64(c.eps);
            let (m, v) = (st.first.data_mut(), st.second.data_mut());
            for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                *p = *p * decay;
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                *p = *p - step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}
