use std::collections::BTreeMap;

use super::{NumericError, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Named trainable tensors plus their gradients and Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    grads_ready: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, NumericError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NumericError::DuplicateParam(name));
        }
        if !value.is_finite() {
            return Err(NumericError::NonFinite("param init"));
        }
        let id = ParamId(self.params.len());
        let n = value.len();
        self.params.push(Param {
            name: name.clone(),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<(), NumericError> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(NumericError::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn step_count(&self, id: ParamId) -> u64 {
        self.params[id.0].step
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.params[id.0].grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub(crate) fn mark_grads_ready(&mut self) {
        self.grads_ready = true;
    }

    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.grads_ready = false;
    }

    /// `Σ_θ ‖θ‖²` over every parameter.
    pub fn squared_norm(&self) -> f64 {
        self.params.iter().map(|p| p.value.squared_norm()).sum()
    }

    /// `(name, value)` pairs in insertion order.
    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrites values from `(name, value)` pairs. Every stored parameter
    /// must be present with a matching shape.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)]) -> Result<(), NumericError> {
        let lookup: BTreeMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for i in 0..self.params.len() {
            let name = self.params[i].name.clone();
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| NumericError::MissingParam(name.clone()))?;
            self.set_value(ParamId(i), (*t).clone())?;
        }
        Ok(())
    }

    pub(crate) fn adam_update(&mut self, id: ParamId, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        let p = &mut self.params[id.0];
        p.step += 1;
        let bc1 = 1.0 - beta1.powi(p.step as i32);
        let bc2 = 1.0 - beta2.powi(p.step as i32);
        let data = p.value.data_mut();
        for i in 0..data.len() {
            let g = p.grad[i];
            p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g;
            p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g * g;
            let m_hat = p.m[i] / bc1;
            let v_hat = p.v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// One bias-corrected Adam update on every parameter, then zeroes gradients.
pub fn adam_step(store: &mut ParamStore, cfg: &Adam) -> Result<(), NumericError> {
    if !store.grads_ready {
        return Err(NumericError::MissingGradients);
    }
    for i in 0..store.params.len() {
        store.adam_update(ParamId(i), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    }
    store.zero_grad();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Graph;

    fn store_with(values: &[(&str, Vec<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, v) in values {
            s.add(*n, Tensor::vector(v.clone())).unwrap();
        }
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store_with(&[("a", vec![1.0])]);
        assert!(matches!(
            s.add("a", Tensor::scalar(0.0)),
            Err(NumericError::DuplicateParam(_))
        ));
    }

    #[test]
    fn adam_requires_gradients() {
        let mut s = store_with(&[("a", vec![1.0])]);
        assert!(matches!(adam_step(&mut s, &Adam::default()), Err(NumericError::MissingGradients)));
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store_with(&[("a", vec![1.0, -2.0])]);
        s.mark_grads_ready();
        adam_step(&mut s, &Adam::default()).unwrap();
        assert_eq!(s.value(ParamId(0)).data(), &[1.0, -2.0]);
    }

    #[test]
    fn one_step_moves_by_lr_against_gradient_sign() {
        let mut s = store_with(&[("a", vec![0.0, 0.0])]);
        s.add_grad(ParamId(0), &[3.0, -0.25]);
        s.mark_grads_ready();
        let cfg = Adam::with_lr(0.01);
        adam_step(&mut s, &cfg).unwrap();
        let v = s.value(ParamId(0)).data();
        // m̂/√v̂ = g/|g| after bias correction.
        assert!((v[0] + 0.01).abs() < 1e-10);
        assert!((v[1] - 0.01).abs() < 1e-9);
        assert_eq!(s.grad(ParamId(0)), &[0.0, 0.0]);
        assert!(!s.grads_ready());
    }

    #[test]
    fn identical_gradients_identical_updates() {
        let mut s = store_with(&[("z", vec![0.5]), ("a", vec![0.5])]);
        for _ in 0..3 {
            s.add_grad(ParamId(0), &[0.7]);
            s.add_grad(ParamId(1), &[0.7]);
            s.mark_grads_ready();
            adam_step(&mut s, &Adam::default()).unwrap();
        }
        assert_eq!(s.value(ParamId(0)), s.value(ParamId(1)));
    }

    #[test]
    fn graph_gradients_accumulate_into_store() {
        let mut s = store_with(&[("x", vec![1.0, 2.0])]);
        let id = s.id("x").unwrap();
        let mut g = Graph::new();
        let x = g.param(&s, id).unwrap();
        let l = g.l2_norm_sq(x).unwrap();
        g.backward(l).unwrap().accumulate_into(&mut s);
        assert_eq!(s.grad(id), &[2.0, 4.0]);
        assert!(s.grads_ready());
    }
}
