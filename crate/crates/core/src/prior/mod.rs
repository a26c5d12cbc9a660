//! State-conditioned prior over embeddings: a conditional RealNVP flow
//! `g = f(z, s0)` onto a standard Gaussian.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::blockworld::STATE_DIM;
use crate::error::{ClaspError, Result};
use crate::generator::centre_states;
use crate::substrate::{Activation, Graph, Mlp, NodeId, ParamStore, Real, Tensor};

pub const FLOW_LAYERS: usize = 4;
pub const FLOW_HIDDEN: usize = 64;
pub const SCALE_CAP: f64 = 3.0;

#[derive(Clone, Debug)]
struct Coupling {
    /// Dimensions passed through unchanged and fed to the networks.
    keep: Vec<usize>,
    /// Dimensions scaled and shifted.
    moved: Vec<usize>,
    scale: Mlp,
    shift: Mlp,
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    pub d: usize,
    layers: Vec<Coupling>,
}

fn ln_2pi() -> f64 {
    (2.0 * std::f64::consts::PI).ln()
}

impl FlowModel {
    /// Four couplings alternating between even and odd pass-through masks,
    /// each network's last layer at zero so the flow starts as the identity.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d < 2 {
            return Err(ClaspError::Config(format!("flow needs d >= 2, got {d}")));
        }
        let even: Vec<usize> = (0..d).step_by(2).collect();
        let odd: Vec<usize> = (1..d).step_by(2).collect();
        let mut layers = Vec::with_capacity(FLOW_LAYERS);
        for l in 0..FLOW_LAYERS {
            let (keep, moved) = if l % 2 == 0 {
                (even.clone(), odd.clone())
            } else {
                (odd.clone(), even.clone())
            };
            let sizes = [
                keep.len() + STATE_DIM,
                FLOW_HIDDEN,
                FLOW_HIDDEN,
                moved.len(),
            ];
            let scale = Mlp::new_zero_last(
                store,
                &format!("{name}.{l}.scale"),
                &sizes,
                Activation::Gelu,
                rng,
            )?;
            let shift = Mlp::new_zero_last(
                store,
                &format!("{name}.{l}.shift"),
                &sizes,
                Activation::Gelu,
                rng,
            )?;
            layers.push(Coupling {
                keep,
                moved,
                scale,
                shift,
            });
        }
        Ok(Self { d, layers })
    }

    /// Scale and shift for one coupling given the pass-through half.
    fn coupling_terms<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        c: &Coupling,
        kept: NodeId,
        cond: NodeId,
    ) -> (NodeId, NodeId) {
        let input = g.concat_cols(&[kept, cond]);
        let raw = c.scale.forward(g, store, input);
        let squashed = g.tanh(raw);
        let s = g.scale(squashed, T::c(SCALE_CAP));
        let t = c.shift.forward(g, store, input);
        (s, t)
    }

    /// Batched forward pass: `z` is `[n, d]`, `s0` is `[n, 18]` raw state
    /// rows. Returns `(g [n, d], logdet [n, 1])`.
    pub fn forward_nodes<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: NodeId,
        s0: NodeId,
    ) -> (NodeId, NodeId) {
        let cond = centre_states(g, s0);
        let mut x = z;
        let mut logdet = None;
        for c in &self.layers {
            let kept = g.select_cols(x, &c.keep);
            let moved = g.select_cols(x, &c.moved);
            let (s, t) = self.coupling_terms(g, store, c, kept, cond);
            let es = g.exp(s);
            let scaled = g.mul(moved, es);
            let y = g.add(scaled, t);
            x = g.place_cols(vec![(kept, c.keep.clone()), (y, c.moved.clone())], self.d);
            let ls = g.row_sum(s);
            logdet = Some(match logdet {
                Some(acc) => g.add(acc, ls),
                None => ls,
            });
        }
        (x, logdet.expect("flow has layers"))
    }

    /// Batch mean of `-(log N(f(z, s0); 0, I) + log|det df/dz|)`.
    pub fn prior_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: NodeId,
        s0: NodeId,
    ) -> NodeId {
        let (n, d) = g.shape(z);
        let (out, logdet) = self.forward_nodes(g, store, z, s0);
        let sq = g.square(out);
        let quad = g.weighted_sum(sq, vec![T::c(0.5 / n as f64); n * d]);
        let ld = g.weighted_sum(logdet, vec![T::c(-1.0 / n as f64); n]);
        let c = g.scalar(T::c(0.5 * d as f64 * ln_2pi()));
        let nll = g.add(quad, ld);
        g.add(nll, c)
    }

    /// Loss values for `z` rows `[n, d]` and state rows `[n, 18]`.
    pub fn prior_loss_value<T: Real>(
        &self,
        store: &ParamStore<T>,
        z: &Tensor<T>,
        s0: &Tensor<T>,
    ) -> Result<T> {
        let mut g = Graph::new();
        let zi = g.constant(z.clone());
        let si = g.constant(s0.clone());
        let l = self.prior_loss(&mut g, store, zi, si);
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(ClaspError::NonFinite("prior loss".into()));
        }
        Ok(v)
    }

    pub fn flow_forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        z: &[T],
        s0: &[T],
    ) -> Result<(Vec<T>, T)> {
        self.check_inputs(z, s0)?;
        let mut g = Graph::new();
        let zi = g.constant(Tensor::from_vec(1, self.d, z.to_vec()));
        let si = g.constant(Tensor::from_vec(1, STATE_DIM, s0.to_vec()));
        let (out, logdet) = self.forward_nodes(&mut g, store, zi, si);
        let out = g.value(out).data.clone();
        let logdet = g.value(logdet).item();
        if !out.iter().all(|v| v.is_finite()) || !logdet.is_finite() {
            return Err(ClaspError::NonFinite("flow forward".into()));
        }
        Ok((out, logdet))
    }

    /// Exact inverse, undoing the couplings in reverse order.
    pub fn flow_inverse<T: Real>(
        &self,
        store: &ParamStore<T>,
        gv: &[T],
        s0: &[T],
    ) -> Result<Vec<T>> {
        self.check_inputs(gv, s0)?;
        let mut x = gv.to_vec();
        let mut graph = Graph::new();
        let si = graph.constant(Tensor::from_vec(1, STATE_DIM, s0.to_vec()));
        let cond = centre_states(&mut graph, si);
        for c in self.layers.iter().rev() {
            let kept = graph.constant(Tensor::from_vec(
                1,
                c.keep.len(),
                c.keep.iter().map(|&i| x[i]).collect(),
            ));
            let (s, t) = self.coupling_terms(&mut graph, store, c, kept, cond);
            let (s, t) = (graph.value(s).data.clone(), graph.value(t).data.clone());
            for (j, &i) in c.moved.iter().enumerate() {
                x[i] = (x[i] - t[j]) * (-s[j]).exp();
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(ClaspError::NonFinite("flow inverse".into()));
            }
        }
        Ok(x)
    }

    /// Draws `g ~ N(0, I)`, inverts it through the flow and L2-normalizes.
    pub fn sample_prior<T: Real, R: Rng>(
        &self,
        store: &ParamStore<T>,
        s0: &[T],
        rng: &mut R,
    ) -> Result<Vec<T>> {
        let gv: Vec<T> = (0..self.d)
            .map(|_| T::c(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let z = self.flow_inverse(store, &gv, s0)?;
        let norm = z.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        if !(norm > T::zero()) {
            return Err(ClaspError::NonFinite("prior sample has zero norm".into()));
        }
        Ok(z.into_iter().map(|v| v / norm).collect())
    }

    fn check_inputs<T: Real>(&self, v: &[T], s0: &[T]) -> Result<()> {
        if v.len() != self.d || s0.len() != STATE_DIM {
            return Err(ClaspError::InvalidInput(format!(
                "flow expects {} + {STATE_DIM} values, got {} + {}",
                self.d,
                v.len(),
                s0.len()
            )));
        }
        if !v.iter().chain(s0).all(|x| x.is_finite()) {
            return Err(ClaspError::NonFinite("flow input".into()));
        }
        Ok(())
    }
}
