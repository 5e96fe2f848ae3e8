use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adam moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    pub adam: AdamState,
}

/// An ordered collection of named parameters.
///
/// Each store carries a process-unique id so that a [`Graph`](super::Graph)
/// can route gradients back to the store a leaf came from. Clones share
/// the id.
#[derive(Debug, Clone)]
pub struct ParamStore {
    id: u64,
    params: Vec<Parameter>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let shape = tensor.shape();
        self.params.push(Parameter {
            name: name.into(),
            tensor,
            trainable,
            adam: AdamState {
                m: Tensor::zeros(shape),
                v: Tensor::zeros(shape),
                step: 0,
            },
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.params.iter().filter(|p| !p.trainable).map(|p| p.tensor.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update((p.name.len() as u32).to_le_bytes());
            h.update(p.name.as_bytes());
            let s = p.tensor.shape();
            for d in [s.b, s.c, s.t] {
                h.update((d as u32).to_le_bytes());
            }
            h.update(p.tensor.to_le_bytes());
        }
        h.finalize().into()
    }

    /// Copy of every parameter value, in store order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Contract("snapshot does not match store".into()));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.tensor.shape() != v.shape() {
                return Err(Error::Contract(format!("snapshot shape mismatch for {}", p.name)));
            }
            p.tensor = v.clone();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
///
/// `grads` is aligned with the store. Frozen parameters are never touched;
/// a trainable parameter without a gradient is a contract violation.
pub fn adam_step(store: &mut ParamStore, grads: &[Option<Tensor>], cfg: &AdamConfig) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    for (p, g) in store.params.iter().zip(grads) {
        if !p.trainable {
            continue;
        }
        let g = g
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("adam_step: no gradient for trainable parameter {}", p.name)))?;
        if g.shape() != p.tensor.shape() {
            return Err(Error::Contract(format!("adam_step: gradient shape mismatch for {}", p.name)));
        }
    }
    for (p, g) in store.params.iter_mut().zip(grads) {
        if !p.trainable {
            continue;
        }
        let g = g.as_ref().expect("checked above");
        let st = &mut p.adam;
        st.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(st.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(st.step as i32);
        let data = p.tensor.data_mut();
        let (m, v) = (st.m.data_mut(), st.v.data_mut());
        for i in 0..data.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::Shape;

    fn store_with(values: &[f64], trainable: bool) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(Shape::new(1, 1, values.len()), values.to_vec()).unwrap(), trainable);
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let (mut s, id) = store_with(&[0.3, -1.2], true);
        let before = s.get(id).tensor.clone();
        adam_step(&mut s, &[Some(Tensor::zeros(before.shape()))], &AdamConfig::default()).unwrap();
        assert_eq!(s.get(id).tensor, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let (mut s, id) = store_with(&[1.0, 1.0, 1.0], true);
        let g = Tensor::new(Shape::new(1, 1, 3), vec![0.37, -4.0, 1e-3]).unwrap();
        adam_step(&mut s, &[Some(g.clone())], &AdamConfig::default()).unwrap();
        for (i, &gi) in g.data().iter().enumerate() {
            let expected = 1.0 - 1e-3 * gi / (gi.abs() + 1e-8);
            assert!((s.get(id).tensor.data()[i] - expected).abs() < 1e-15);
            assert!(((1.0 - s.get(id).tensor.data()[i]).abs() - 1e-3).abs() < 1e-8);
        }
    }

    #[test]
    fn frozen_parameters_are_bit_identical() {
        let (mut s, id) = store_with(&[0.1, 0.2], false);
        let digest = s.digest();
        adam_step(&mut s, &[Some(Tensor::full(Shape::new(1, 1, 2), 5.0))], &AdamConfig::default()).unwrap();
        assert_eq!(s.digest(), digest);
        assert_eq!(s.get(id).adam.step, 0);
    }

    #[test]
    fn missing_gradient_is_a_contract_violation() {
        let (mut s, _) = store_with(&[0.1], true);
        assert!(matches!(adam_step(&mut s, &[None], &AdamConfig::default()), Err(Error::Contract(_))));
    }
}
