use super::{ParamId, ParamStore, Real};
use crate::error::{ClaspError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter, indexed like
/// the store they were created for.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |s: &ParamStore<T>| {
            s.iter()
                .map(|p| vec![T::zero(); p.value.len()])
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    /// Applies one update to every parameter, then zeroes the gradients.
    ///
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.step_only(store, None)
    }

    /// Like [`Adam::step`] but only updates (and zeroes) the listed parameters.
    pub fn step_subset(&mut self, store: &mut ParamStore<T>, ids: &[ParamId]) -> Result<()> {
        self.step_only(store, Some(ids))
    }

    fn step_only(&mut self, store: &mut ParamStore<T>, ids: Option<&[ParamId]>) -> Result<()> {
        assert_eq!(
            self.m.len(),
            store.len(),
            "optimizer built for another store"
        );
        let selected: Vec<ParamId> = match ids {
            Some(ids) => ids.to_vec(),
            None => store.ids().collect(),
        };
        for &id in &selected {
            let p = store.get(id);
            if let Some(pos) = p.grad.data.iter().position(|g| !g.is_finite()) {
                return Err(ClaspError::NonFinite(format!(
                    "gradient of `{}` at index {pos} is {:?}",
                    p.name, p.grad.data[pos]
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let bc1 = T::c(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::c(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::c(c.lr), T::c(c.eps));
        for id in selected {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value.data[i] -= lr * mhat / (vhat.sqrt() + eps);
                p.grad.data[i] = T::zero();
            }
        }
        Ok(())
    }
}
