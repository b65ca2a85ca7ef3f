//! Parameter storage and the small layers shared by the model modules.
//!
//! Layers hold only [`ParamId`]s; their values live in a [`ParamStore`].
//! A [`Session`] binds parameters into a [`Graph`] on first use, so a layer
//! can run at `f32` for training or, after [`ParamStore::cast`], at `f64`
//! for verification.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Named, ordered parameter table.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar = f32> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { entries: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Same table at another precision; ids stay valid.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), decay: e.decay })
                .collect(),
        }
    }

    /// Replaces every value from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!("expected {} parameters, found {}", self.len(), other.len())));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Format(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// A graph together with lazily bound parameters.
pub struct Session<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Scalar> Session<'a, T> {
    /// Parameters are bound as trainable leaves.
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>) -> Self {
        Session { g, store, bound: vec![None; store.len()], trainable: true }
    }

    /// Parameters are bound as constants (no gradients; cheaper backward).
    pub fn inference(g: &'a mut Graph<T>, store: &'a ParamStore<T>) -> Self {
        Session { g, store, bound: vec![None; store.len()], trainable: false }
    }

    /// Uses `var` for parameter `id` instead of the stored value.
    pub fn bind(&mut self, id: ParamId, var: Var) -> Result<()> {
        if self.g.shape(var) != self.store.get(id).shape() {
            return Err(Error::shape(format!(
                "binding {} {:?} to a value of shape {:?}",
                self.store.entry(id).name,
                self.store.get(id).shape(),
                self.g.shape(var)
            )));
        }
        self.bound[id.0] = Some(var);
        Ok(())
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = if self.trainable { self.g.param(t) } else { self.g.constant(t.clone()) };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients after `backward`, one slot per stored parameter; parameters
    /// never touched by the forward pass get zeros.
    pub fn grads(&self) -> Vec<Vec<T>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, b)| match b.and_then(|v| self.g.grad(v)) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); self.store.entries[i].value.numel()],
            })
            .collect()
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }
}

/// Uniform `±1/sqrt(fan_in)`.
pub fn fan_in_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::rand_uniform(shape.to_vec(), -bound, bound, rng)
}

/// `y = x · W + b` on the trailing axis; `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(&[fan_in, fan_out], fan_in, rng), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([fan_out]), false));
        Linear { weight, bias, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.p(self.weight);
        let b = self.bias.map(|b| s.p(b));
        s.g.linear(x, w, b)
    }
}

/// Standard 2-D convolution on `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(&[cout, cin, k, k], cin * k * k, rng), true);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([cout]), false));
        Conv2d { weight, bias, stride, pad }
    }

    /// Weight and bias start at zero (prediction heads).
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, pad: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([cout, cin, k, k]), true);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([cout]), false));
        Conv2d { weight, bias, stride: 1, pad }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.p(self.weight);
        let b = self.bias.map(|b| s.p(b));
        s.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Layer normalisation over the trailing axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([dim], T::one()), false);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([dim]), false);
        LayerNorm { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let g = s.p(self.gamma);
        let b = s.p(self.beta);
        s.g.layer_norm(x, g, b, LN_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let a = Linear::new(&mut store, "a", 3, 2, true, &mut rng);
        let _b = Linear::new(&mut store, "b", 3, 2, true, &mut rng);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store);
        let x = s.g.constant(Tensor::full([4, 3], 1.0));
        let y = a.forward(&mut s, x).unwrap();
        let l = s.g.sum(y).unwrap();
        s.g.backward(l).unwrap();
        let grads = s.grads();
        assert_eq!(grads.len(), 4);
        assert_eq!(grads[1], vec![4.0, 4.0]);
        assert!(grads[2].iter().chain(&grads[3]).all(|&v| v == 0.0));
    }

    #[test]
    fn cast_keeps_names_and_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let l = Linear::new(&mut store, "proj", 2, 2, false, &mut rng);
        let wide = store.cast::<f64>();
        assert_eq!(wide.entry(l.weight).name, "proj.weight");
        assert_eq!(wide.get(l.weight).data()[0] as f32, store.get(l.weight).data()[0]);
        assert_eq!(store.find("proj.weight"), Some(l.weight));
        assert!(store.entry(l.weight).decay);
    }
}
