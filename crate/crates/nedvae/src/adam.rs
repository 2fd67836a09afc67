//! Adam with bias correction.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::param::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamParams<T: Scalar> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> Default for AdamParams<T> {
    fn default() -> Self {
        AdamParams {
            learning_rate: T::from_f64(2e-4),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
        }
    }
}

/// Per-parameter moment estimates plus the shared step counter.
#[derive(Clone)]
pub struct AdamState<T: Scalar> {
    pub params: AdamParams<T>,
    pub step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

#[derive(Error, Debug)]
pub enum AdamError {
    #[error("non-finite gradient for parameter {0:?}")]
    NonFiniteGradient(String),
    #[error("gradient shape mismatch for parameter {0:?}")]
    ShapeMismatch(String),
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, params: AdamParams<T>) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, tensor) in store.iter() {
            m.insert(name.clone(), Tensor::zeros(tensor.shape().to_vec()));
            v.insert(name.clone(), Tensor::zeros(tensor.shape().to_vec()));
        }
        AdamState {
            params,
            step: 0,
            m,
            v,
        }
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor<T>>, &BTreeMap<String, Tensor<T>>) {
        (&self.m, &self.v)
    }

    /// Restore moments from a checkpoint. Shapes must match the store.
    pub fn restore(
        store: &ParamStore<T>,
        params: AdamParams<T>,
        step: u64,
        m: BTreeMap<String, Tensor<T>>,
        v: BTreeMap<String, Tensor<T>>,
    ) -> Self {
        for (name, tensor) in store.iter() {
            let ms = m.get(name).map(|t| t.shape());
            let vs = v.get(name).map(|t| t.shape());
            assert_eq!(ms, Some(tensor.shape()), "adam m shape for {name:?}");
            assert_eq!(vs, Some(tensor.shape()), "adam v shape for {name:?}");
        }
        AdamState {
            params,
            step,
            m,
            v,
        }
    }
}

/// One Adam update over every parameter in the store.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<(), AdamError> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(AdamError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let AdamParams {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.params;
    let t = state.step as f64;
    let bc1 = T::from_f64(1.0 - beta1.to_f64().powi(t as i32));
    let bc2 = T::from_f64(1.0 - beta2.to_f64().powi(t as i32));
    for (name, param) in store.iter_mut() {
        let Some(g) = grads.get(name) else {
            continue;
        };
        if g.shape() != param.shape() {
            return Err(AdamError::ShapeMismatch(name.clone()));
        }
        let m = state.m.get_mut(name).expect("adam m missing");
        let v = state.v.get_mut(name).expect("adam v missing");
        for i in 0..param.len() {
            let gi = g.data()[i];
            let mi = beta1 * m.data()[i] + (T::ONE - beta1) * gi;
            let vi = beta2 * v.data()[i] + (T::ONE - beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            param.data_mut()[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}
