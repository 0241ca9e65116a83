//! Named-group gradient accumulation and the Adam update.

use std::collections::BTreeMap;

use crate::model::ModelParams;
use crate::numerics::matrix::{Matrix, Real};

/// Gradients keyed by parameter-group name; accumulating.
#[derive(Clone, Debug, Default)]
pub struct Grads<T> {
    map: BTreeMap<String, Matrix<T>>,
}

impl<T: Real> Grads<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn accumulate(&mut self, name: &str, grad: Matrix<T>) {
        match self.map.get_mut(name) {
            Some(acc) => acc.add_assign(&grad),
            None => {
                self.map.insert(name.to_string(), grad);
            }
        }
    }

    pub fn accumulate_scaled(&mut self, name: &str, grad: Matrix<T>, scale: T) {
        self.accumulate(name, grad.scale(scale));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix<T>)> {
        self.map.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// First/second moment accumulators mirroring the model's named groups.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub first: BTreeMap<String, Matrix<T>>,
    pub second: BTreeMap<String, Matrix<T>>,
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(model: &ModelParams<T>, beta1: T, beta2: T, epsilon: T) -> Self {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for name in ModelParams::<T>::group_names() {
            let (r, c) = model.group(&name).expect("group exists").shape();
            first.insert(name.clone(), Matrix::zeros(r, c));
            second.insert(name, Matrix::zeros(r, c));
        }
        Self {
            first,
            second,
            step: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn to_f64(&self) -> OptimizerState<f64> {
        OptimizerState {
            first: self.first.iter().map(|(k, v)| (k.clone(), v.to_f64())).collect(),
            second: self
                .second
                .iter()
                .map(|(k, v)| (k.clone(), v.to_f64()))
                .collect(),
            step: self.step,
            beta1: self.beta1.as_f64(),
            beta2: self.beta2.as_f64(),
            epsilon: self.epsilon.as_f64(),
        }
    }
}

/// One bias-corrected Adam update over every named group. Groups absent
/// from `grads` see a zero gradient (their moments still decay).
pub fn adam_step<T: Real>(
    model: &mut ModelParams<T>,
    grads: &Grads<T>,
    state: &mut OptimizerState<T>,
    lr: T,
) {
    state.step += 1;
    let t = state.step as i32;
    let one = T::one();
    let correction1 = one - state.beta1.powi(t);
    let correction2 = one - state.beta2.powi(t);
    for name in ModelParams::<T>::group_names() {
        let params = model.group_mut(&name).expect("group exists");
        let m = state.first.get_mut(&name).expect("moment exists");
        let v = state.second.get_mut(&name).expect("moment exists");
        assert_eq!(m.shape(), params.shape(), "optimizer shape for {}", name);
        for i in 0..params.len() {
            let g = match grads.get(&name) {
                Some(gm) => {
                    assert_eq!(gm.shape(), params.shape(), "gradient shape for {}", name);
                    gm.as_slice()[i]
                }
                None => T::zero(),
            };
            let mi = state.beta1 * m.as_slice()[i] + (one - state.beta1) * g;
            let vi = state.beta2 * v.as_slice()[i] + (one - state.beta2) * g * g;
            m.as_mut_slice()[i] = mi;
            v.as_mut_slice()[i] = vi;
            let m_hat = mi / correction1;
            let v_hat = vi / correction2;
            params.as_mut_slice()[i] =
                params.as_slice()[i] - lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
}
