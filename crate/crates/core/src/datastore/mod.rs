//! Dataset records, the `.clasp` container, deterministic splits and
//! minibatch assembly.

mod batch;
mod format;
mod split;

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blockworld::{
    generate_pair, parse_caption, render_caption, BlockSet, CaptionFactors, Trajectory, Vocab,
};
use crate::error::{ClaspError, Result};

pub use batch::{batch_order, make_batches, stack_steps, Batch, STEP_DIM};
pub use format::{load_dataset, save_dataset, FORMAT_VERSION, MAGIC};
pub use split::{split, HELDOUT_MIN_RECORDS};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub record_id: u64,
    pub trajectory: Trajectory,
    pub caption: Vec<u32>,
    pub factors: CaptionFactors,
}

impl DatasetRecord {
    /// Checks that the caption parses back to the factors and the trajectory
    /// is a simulator rollout within the length and action bounds.
    pub fn validate(&self) -> Result<()> {
        if parse_caption(&self.caption) != Some(self.factors) {
            return Err(ClaspError::Corrupt(format!(
                "record {}: caption does not parse to its factors",
                self.record_id
            )));
        }
        self.trajectory
            .validate()
            .map_err(|e| ClaspError::Corrupt(format!("record {}: {e}", self.record_id)))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Records stored in train, val, test order, with the shared vocabulary and
/// block attribute table.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub blocks: BlockSet,
    pub records: Vec<DatasetRecord>,
    pub splits: SplitSizes,
}

impl Dataset {
    /// A dataset whose records all count as training data.
    pub fn unsplit(vocab: Vocab, blocks: BlockSet, records: Vec<DatasetRecord>) -> Self {
        let splits = SplitSizes {
            train: records.len(),
            ..SplitSizes::default()
        };
        Self {
            vocab,
            blocks,
            records,
            splits,
        }
    }

    pub fn train(&self) -> &[DatasetRecord] {
        &self.records[..self.splits.train]
    }

    pub fn val(&self) -> &[DatasetRecord] {
        &self.records[self.splits.train..self.splits.train + self.splits.val]
    }

    pub fn test(&self) -> &[DatasetRecord] {
        &self.records[self.splits.train + self.splits.val..]
    }

    pub fn record(&self, id: u64) -> Option<&DatasetRecord> {
        self.records.iter().find(|r| r.record_id == id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeldoutMode {
    /// Test split holds whole `(color, shape, direction)` combinations that
    /// never occur in training.
    UnseenCombination,
    Random,
}

impl FromStr for HeldoutMode {
    type Err = ClaspError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unseen" | "unseen-combination" => Ok(Self::UnseenCombination),
            "random" => Ok(Self::Random),
            _ => Err(ClaspError::Config(format!(
                "unknown held-out mode {s:?} (expected unseen or random)"
            ))),
        }
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// Generates `num` records without splitting. Record `i` draws from its own
/// random stream, so records are independent of generation order.
pub fn generate_records(num: usize, seed: u64) -> Result<(BlockSet, Vec<DatasetRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = BlockSet::sample(&mut rng);
    let mut records = Vec::with_capacity(num);
    for i in 0..num {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let (trajectory, factors) = generate_pair(&blocks, &mut rng)?;
        let caption = render_caption(&factors, rand::Rng::random(&mut rng));
        records.push(DatasetRecord {
            record_id: i as u64,
            trajectory,
            caption,
            factors,
        });
    }
    Ok((blocks, records))
}

/// Generates and splits a dataset.
pub fn generate_dataset(
    num: usize,
    seed: u64,
    mode: HeldoutMode,
    ratios: [f64; 3],
) -> Result<Dataset> {
    let (blocks, records) = generate_records(num, seed)?;
    let (train, val, test) = split(records, ratios, seed, mode)?;
    let splits = SplitSizes {
        train: train.len(),
        val: val.len(),
        test: test.len(),
    };
    let mut records = train;
    records.extend(val);
    records.extend(test);
    Ok(Dataset {
        vocab: Vocab::standard(),
        blocks,
        records,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockworld::{is_useful, Direction, N_BLOCKS};
    use std::collections::BTreeSet;

    #[test]
    fn generated_records_are_valid() {
        let (_, recs) = generate_records(50, 3).unwrap();
        for r in &recs {
            r.validate().unwrap();
            assert!(is_useful(&r.trajectory));
        }
    }

    #[test]
    fn records_do_not_depend_on_count() {
        let (_, a) = generate_records(10, 9).unwrap();
        let (_, b) = generate_records(20, 9).unwrap();
        assert_eq!(a[..], b[..10]);
    }

    #[test]
    fn two_thousand_pairs_cover_every_combination() {
        let (blocks, recs) = generate_records(2000, 1).unwrap();
        let seen: BTreeSet<_> = recs.iter().map(|r| r.factors.triple()).collect();
        assert_eq!(seen.len(), N_BLOCKS * Direction::ALL.len());
        for (slot, d) in blocks.combinations() {
            assert!(seen.contains(&blocks.factors(slot, d).triple()));
        }
    }

    #[test]
    fn dataset_views_follow_split_sizes() {
        let ds = generate_dataset(300, 2, HeldoutMode::UnseenCombination, DEFAULT_RATIOS).unwrap();
        assert_eq!(ds.splits.total(), 300);
        assert_eq!(ds.train().len(), ds.splits.train);
        assert_eq!(ds.val().len(), ds.splits.val);
        assert_eq!(ds.test().len(), ds.splits.test);
        let id = ds.test()[0].record_id;
        assert_eq!(ds.record(id), Some(&ds.test()[0]));
    }

    #[test]
    fn heldout_mode_parses() {
        assert_eq!(
            "unseen".parse::<HeldoutMode>().unwrap(),
            HeldoutMode::UnseenCombination
        );
        assert_eq!(
            "random".parse::<HeldoutMode>().unwrap(),
            HeldoutMode::Random
        );
        assert!("bogus".parse::<HeldoutMode>().is_err());
    }
}
