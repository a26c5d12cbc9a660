use std::collections::BTreeMap;

use rand::Rng;

use super::{Real, Tensor};
use crate::error::{ClaspError, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named trainable arrays plus their gradient buffers.
///
/// Names are dotted paths whose first segment is the owning module
/// (`behavior.layer0.attn.wq`); a name can only be registered once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.rows, value.cols);
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        id
    }

    /// Uniform Kaiming-style init, bound `sqrt(3 / fan_in)`.
    pub fn register_kaiming<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (3.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::c(rng.random_range(-bound..bound)))
            .collect();
        self.register(name, Tensor::from_vec(fan_in, fan_out, data))
    }

    pub fn register_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| {
                let v: f64 = rng.sample(rand_distr::StandardNormal);
                T::c(v * std)
            })
            .collect();
        self.register(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn register_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.register(name, Tensor::zeros(rows, cols))
    }

    pub fn register_filled(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        v: T,
    ) -> ParamId {
        self.register(name, Tensor::from_vec(rows, cols, vec![v; rows * cols]))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Ids of all parameters whose owner (first name segment) is `owner`.
    pub fn owned_by(&self, owner: &str) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.split('.').next() == Some(owner))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let dst = &mut self.params[id.0].grad.data;
        debug_assert_eq!(dst.len(), g.len());
        for (d, &s) in dst.iter_mut().zip(g) {
            *d += s;
        }
    }

    /// Replaces every value with the same-named value from `other`.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .lookup(&p.name)
                .ok_or_else(|| ClaspError::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            let src = other.value(src);
            if src.shape() != p.value.shape() {
                return Err(ClaspError::Checkpoint(format!(
                    "shape mismatch for `{}`: {:?} vs {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.register(p.name.clone(), p.value.cast());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.register_zeros("a.w", 1, 1);
        s.register_zeros("a.w", 1, 1);
    }

    #[test]
    fn gradients_accumulate() {
        let mut s = ParamStore::<f64>::new();
        let id = s.register_zeros("m.w", 1, 2);
        s.accumulate_grad(id, &[1.0, 2.0]);
        s.accumulate_grad(id, &[0.5, 0.5]);
        assert_eq!(s.grad(id).data, vec![1.5, 2.5]);
        s.zero_grad();
        assert_eq!(s.grad(id).data, vec![0.0, 0.0]);
    }

    #[test]
    fn owner_filter_uses_first_segment() {
        let mut s = ParamStore::<f32>::new();
        s.register_zeros("text.a", 1, 1);
        s.register_zeros("textual.b", 1, 1);
        s.register_zeros("text.c", 1, 1);
        assert_eq!(s.owned_by("text").len(), 2);
    }
}
