use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DatasetRecord;
use crate::blockworld::{CaptionFactors, Trajectory, ACTION_DIM, STATE_DIM};
use crate::error::{ClaspError, Result};

/// Width of one encoder input step: state followed by action.
pub const STEP_DIM: usize = STATE_DIM + ACTION_DIM;

/// Minibatch of records, trajectories zero-padded to the longest one.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub record_ids: Vec<u64>,
    pub lengths: Vec<usize>,
    pub t_max: usize,
    /// `[n * t_max, STEP_DIM]` row-major, row `i * t_max + t` is `(s_t, a_t)`.
    pub steps: Vec<f32>,
    /// `[n * t_max]`, true on real timesteps.
    pub mask: Vec<bool>,
    pub captions: Vec<Vec<u32>>,
    pub factors: Vec<CaptionFactors>,
}

/// Zero-padded `(s_t, a_t)` rows and validity mask for stacked trajectories;
/// returns `(steps, mask, t_max)`.
pub fn stack_steps(trajs: &[&Trajectory]) -> (Vec<f32>, Vec<bool>, usize) {
    let n = trajs.len();
    let t_max = trajs.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut steps = vec![0.0; n * t_max * STEP_DIM];
    let mut mask = vec![false; n * t_max];
    for (i, tr) in trajs.iter().enumerate() {
        for (t, a) in tr.actions.iter().enumerate() {
            let row = &mut steps[(i * t_max + t) * STEP_DIM..(i * t_max + t + 1) * STEP_DIM];
            row[..STATE_DIM].copy_from_slice(&tr.states[t].to_vector());
            row[STATE_DIM] = a.delta.x;
            row[STATE_DIM + 1] = a.delta.y;
            mask[i * t_max + t] = true;
        }
    }
    (steps, mask, t_max)
}

impl Batch {
    pub fn from_records(records: &[&DatasetRecord]) -> Self {
        let trajs: Vec<&Trajectory> = records.iter().map(|r| &r.trajectory).collect();
        let (steps, mask, t_max) = stack_steps(&trajs);
        Self {
            record_ids: records.iter().map(|r| r.record_id).collect(),
            lengths: records.iter().map(|r| r.trajectory.len()).collect(),
            t_max,
            steps,
            mask,
            captions: records.iter().map(|r| r.caption.clone()).collect(),
            factors: records.iter().map(|r| r.factors).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_ids.is_empty()
    }

    pub fn step(&self, i: usize, t: usize) -> &[f32] {
        let r = i * self.t_max + t;
        &self.steps[r * STEP_DIM..(r + 1) * STEP_DIM]
    }

    /// First state of trajectory `i`.
    pub fn start_state(&self, i: usize) -> &[f32] {
        &self.step(i, 0)[..STATE_DIM]
    }
}

/// Shuffled index groups of size `n` over `len` items.
pub fn batch_order(len: usize, n: usize, seed: u64, drop_last: bool) -> Result<Vec<Vec<usize>>> {
    if n < 2 {
        return Err(ClaspError::InvalidInput(format!(
            "batch size must be at least 2, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx
        .chunks(n)
        .filter(|c| !drop_last || c.len() == n)
        .map(<[usize]>::to_vec)
        .collect())
}

/// One epoch of batches, shuffled by `seed`.
pub fn make_batches(
    records: &[DatasetRecord],
    n: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Vec<Batch>> {
    Ok(batch_order(records.len(), n, seed, drop_last)?
        .into_iter()
        .map(|group| {
            let rs: Vec<&DatasetRecord> = group.iter().map(|&i| &records[i]).collect();
            Batch::from_records(&rs)
        })
        .collect())
}
