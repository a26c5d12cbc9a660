//! Closed-loop policy `a_t = pi(z, s_t)`, its teacher-forced regression
//! loss and simulator rollouts.

use rand::Rng;

use crate::blockworld::{
    step, Action, BoardState, Trajectory, Vec2, A_MAX, STATE_DIM, T_MAX, T_MIN,
};
use crate::datastore::{Batch, STEP_DIM};
use crate::error::{ClaspError, Result};
use crate::substrate::{Activation, Graph, Mlp, NodeId, ParamStore, Real, Tensor};

pub const POLICY_LAYERS: usize = 6;
pub const POLICY_WIDTH: usize = 128;

#[derive(Clone, Debug)]
pub struct Policy {
    pub d: usize,
    mlp: Mlp,
}

impl Policy {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![d + STATE_DIM];
        sizes.extend(std::iter::repeat_n(width, POLICY_LAYERS - 1));
        sizes.push(2);
        let mlp = Mlp::new(store, name, &sizes, Activation::Gelu, rng)?;
        Ok(Self { d, mlp })
    }

    /// Actions `[m, 2]` for rows of `z` (`[m, d]`) and states (`[m, 18]`).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: NodeId,
        states: NodeId,
    ) -> NodeId {
        let centred = centre_states(g, states);
        let x = g.concat_cols(&[z, centred]);
        let raw = self.mlp.forward(g, store, x);
        let squashed = g.tanh(raw);
        g.scale(squashed, T::c(A_MAX as f64))
    }

    /// Mean over the batch of the per-trajectory mean squared action error,
    /// with teacher-forced states. `z` holds one row per batch item.
    pub fn generation_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: NodeId,
        batch: &Batch,
    ) -> NodeId {
        let n = batch.len();
        let mut map = Vec::new();
        let mut states = Vec::new();
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for i in 0..n {
            let w = T::c(1.0 / (batch.lengths[i] * n) as f64);
            for t in 0..batch.lengths[i] {
                let row = batch.step(i, t);
                map.push(Some((0, i)));
                states.extend(row[..STATE_DIM].iter().map(|&v| T::c(v as f64)));
                targets.extend(row[STATE_DIM..STEP_DIM].iter().map(|&v| T::c(v as f64)));
                weights.extend([w, w]);
            }
        }
        let m = map.len();
        let zr = g.gather_rows(&[z], map);
        let s = g.constant(Tensor::from_vec(m, STATE_DIM, states));
        let pred = self.forward(g, store, zr, s);
        let target = g.constant(Tensor::from_vec(m, 2, targets));
        let diff = g.sub(pred, target);
        let sq = g.square(diff);
        g.weighted_sum(sq, weights)
    }

    pub fn action<T: Real>(&self, store: &ParamStore<T>, z: &[T], state: &BoardState) -> Action {
        let mut g = Graph::new();
        let zi = g.constant(Tensor::from_vec(1, z.len(), z.to_vec()));
        let s = g.constant(Tensor::from_vec(
            1,
            STATE_DIM,
            state.to_vector().iter().map(|&v| T::c(v as f64)).collect(),
        ));
        let a = self.forward(&mut g, store, zi, s);
        let v = g.value(a);
        // Round-off in the f32 product can step past the bound by one ulp.
        Action::clipped(Vec2::new(
            v.data[0].as_f64() as f32,
            v.data[1].as_f64() as f32,
        ))
    }

    /// Closed-loop rollout of `horizon` steps from `start`.
    pub fn rollout<T: Real>(
        &self,
        store: &ParamStore<T>,
        z: &[T],
        start: &BoardState,
        horizon: usize,
    ) -> Result<Trajectory> {
        if !(T_MIN..=T_MAX).contains(&horizon) {
            return Err(ClaspError::InvalidInput(format!(
                "horizon {horizon} outside [{T_MIN}, {T_MAX}]"
            )));
        }
        Ok(rollout_with(start, horizon, |s| self.action(store, z, s)))
    }
}

/// Maps board coordinates from `[0, 1]` to `[-1, 1]` before they enter a
/// network.
pub fn centre_states<T: Real>(g: &mut Graph<T>, states: NodeId) -> NodeId {
    let (m, w) = g.shape(states);
    let scaled = g.scale(states, T::c(2.0));
    let shift = g.constant(Tensor::from_vec(m, w, vec![T::c(-1.0); m * w]));
    g.add(scaled, shift)
}

/// Rolls the simulator forward under an arbitrary state-feedback controller.
pub fn rollout_with<F: FnMut(&BoardState) -> Action>(
    start: &BoardState,
    horizon: usize,
    mut policy: F,
) -> Trajectory {
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    states.push(*start);
    for _ in 0..horizon {
        let s = *states.last().unwrap();
        let a = policy(&s);
        actions.push(a);
        states.push(step(&s, &a));
    }
    Trajectory { states, actions }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::generate_records;
    use crate::substrate::{gradcheck_params, Adam, AdamConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy<T: Real>(s: &mut ParamStore<T>, d: usize, width: usize) -> Policy {
        Policy::new(s, "policy", d, width, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    #[test]
    fn actions_are_bounded_and_deterministic() {
        let mut s = ParamStore::<f32>::new();
        let p = policy(&mut s, 32, POLICY_WIDTH);
        // Saturate the output layer.
        let last = s.ids().last().unwrap();
        s.value_mut(last).data.iter_mut().for_each(|v| *v = 100.0);
        let board = crate::blockworld::sample_board(&mut ChaCha8Rng::seed_from_u64(1));
        let z = vec![0.1f32; 32];
        let a = p.action(&s, &z, &board);
        assert!(a.is_valid());
        assert_eq!(p.action(&s, &z, &board), a);
    }

    #[test]
    fn zero_output_loss_equals_mean_squared_action_norm() {
        let mut s = ParamStore::<f64>::new();
        let p = policy(&mut s, 4, 8);
        for id in s.ids().collect::<Vec<_>>() {
            if s.get(id).name.starts_with("policy.5") {
                s.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let (_, recs) = generate_records(3, 2).unwrap();
        let batch = Batch::from_records(&recs.iter().collect::<Vec<_>>());
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(3, 4));
        let l = p.generation_loss(&mut g, &s, z, &batch);
        let expected: f64 = recs
            .iter()
            .map(|r| {
                let t = &r.trajectory;
                t.actions
                    .iter()
                    .map(|a| (a.delta.x as f64).powi(2) + (a.delta.y as f64).powi(2))
                    .sum::<f64>()
                    / t.len() as f64
            })
            .sum::<f64>()
            / 3.0;
        assert!((g.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn padding_does_not_change_the_loss() {
        let mut s = ParamStore::<f64>::new();
        let p = policy(&mut s, 4, 8);
        let (_, recs) = generate_records(6, 4).unwrap();
        let z = Tensor::from_vec(1, 4, vec![0.5, -0.5, 0.5, 0.5]);
        let loss_of = |b: &Batch, row: usize| {
            let mut g = Graph::new();
            let zs = g.constant(Tensor::from_rows(&vec![z.data.clone(); b.len()]));
            let full = p.generation_loss(&mut g, &s, zs, b);
            (g.value(full).item(), row)
        };
        // Alone versus padded next to longer trajectories.
        let alone = Batch::from_records(&[&recs[0]]);
        let padded = Batch::from_records(&recs.iter().collect::<Vec<_>>());
        assert!(padded.t_max >= alone.t_max);
        let single = loss_of(&alone, 0).0;
        let mut total = 0.0;
        for r in &recs {
            total += loss_of(&Batch::from_records(&[r]), 0).0;
        }
        assert!((loss_of(&padded, 0).0 - total / 6.0).abs() < 1e-12);
        assert!(single.is_finite());
    }

    #[test]
    fn rollout_has_exact_length_and_stays_on_board() {
        let mut s = ParamStore::<f32>::new();
        let p = policy(&mut s, 32, 16);
        let board = crate::blockworld::sample_board(&mut ChaCha8Rng::seed_from_u64(2));
        let z = vec![0.2f32; 32];
        let t = p.rollout(&s, &z, &board, T_MAX).unwrap();
        assert_eq!(t.len(), T_MAX);
        assert!(t.states.iter().all(|st| st.effector.in_unit_square()));
        assert_eq!(p.rollout(&s, &z, &board, T_MAX).unwrap(), t);
        t.validate().unwrap();
        assert!(p.rollout(&s, &z, &board, 3).is_err());
    }

    #[test]
    fn generation_gradcheck() {
        let mut s = ParamStore::<f64>::new();
        let p = policy(&mut s, 4, 6);
        let (_, recs) = generate_records(2, 5).unwrap();
        let batch = Batch::from_records(&recs.iter().collect::<Vec<_>>());
        let ids: Vec<_> = s.ids().collect();
        let report = gradcheck_params(&mut s, &ids, 1e-6, 12, |st, g| {
            let z = g.constant(Tensor::from_vec(
                2,
                4,
                vec![0.5, -0.5, 0.5, 0.5, 0.1, 0.7, -0.7, 0.1],
            ));
            p.generation_loss(g, st, z, &batch)
        });
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn memorizes_one_trajectory() {
        let mut s = ParamStore::<f32>::new();
        let p = policy(&mut s, 32, POLICY_WIDTH);
        let (_, recs) = generate_records(1, 8).unwrap();
        let batch = Batch::from_records(&[&recs[0]]);
        let z: Vec<f32> = (0..32).map(|i| ((i as f32) * 0.7).cos() / 4.0).collect();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            &s,
        );
        let mut mse = f32::INFINITY;
        for it in 0..2000 {
            if it == 1500 {
                opt.config.lr = 3e-4;
            }
            let mut g = Graph::new();
            let zi = g.constant(Tensor::from_vec(1, 32, z.clone()));
            let l = p.generation_loss(&mut g, &s, zi, &batch);
            mse = g.value(l).item();
            g.backward(l, &mut s);
            opt.step(&mut s).unwrap();
        }
        // Per-step RMS over both components.
        let rms = (mse / 2.0).sqrt();
        assert!(rms < 1e-3, "rms {rms}");
    }
}
