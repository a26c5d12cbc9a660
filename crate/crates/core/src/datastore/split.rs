use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetRecord, HeldoutMode};
use crate::blockworld::Direction;
use crate::error::{ClaspError, Result};

/// Minimum test-split size under the unseen-combination mode.
pub const HELDOUT_MIN_RECORDS: usize = 15;

type Triple = (u8, u8, Direction);

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) {
        return Err(ClaspError::InvalidInput(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(ClaspError::InvalidInput(format!(
            "split ratios sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Picks held-out combinations, preferring ones whose block and direction
/// are not yet held out so every held-out triple stays composable from
/// training data.
fn choose_heldout(triples: &[Triple], k: usize) -> Vec<Triple> {
    let mut chosen = Vec::with_capacity(k);
    let mut blocks = BTreeSet::new();
    let mut dirs = BTreeSet::new();
    for &t in triples {
        if chosen.len() == k {
            return chosen;
        }
        if !blocks.contains(&(t.0, t.1)) && !dirs.contains(&t.2) {
            blocks.insert((t.0, t.1));
            dirs.insert(t.2);
            chosen.push(t);
        }
    }
    for &t in triples {
        if chosen.len() == k {
            break;
        }
        if !chosen.contains(&t) {
            chosen.push(t);
        }
    }
    chosen
}

/// Deterministic partition into train, val and test. Each part keeps the
/// input order.
///
/// Under [`HeldoutMode::UnseenCombination`] the test split consists of every
/// record of a set of held-out `(color, shape, direction)` combinations,
/// about `ratios[2]` of the distinct combinations and at least
/// [`HELDOUT_MIN_RECORDS`] records; val is drawn from the remainder.
pub fn split(
    records: Vec<DatasetRecord>,
    ratios: [f64; 3],
    seed: u64,
    mode: HeldoutMode,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    check_ratios(ratios)?;
    let n = records.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from_le_bytes(*b"split\0\0\0"));
    let mut part = vec![0u8; n];

    let n_val = (ratios[1] * n as f64).round() as usize;
    match mode {
        HeldoutMode::Random => {
            let n_test = (ratios[2] * n as f64).round() as usize;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            for &i in &idx[..n_test.min(n)] {
                part[i] = 2;
            }
            for &i in idx[n_test.min(n)..].iter().take(n_val) {
                part[i] = 1;
            }
        }
        HeldoutMode::UnseenCombination => {
            let mut triples: Vec<Triple> = records
                .iter()
                .map(|r| r.factors.triple())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            triples.shuffle(&mut rng);
            let k = ((ratios[2] * triples.len() as f64).round() as usize).max(1);
            let mut held = choose_heldout(&triples, k);
            let count = |held: &[Triple]| {
                records
                    .iter()
                    .filter(|r| held.contains(&r.factors.triple()))
                    .count()
            };
            let mut n_test = count(&held);
            for &t in &triples {
                if n_test >= HELDOUT_MIN_RECORDS || held.len() + 1 >= triples.len() {
                    break;
                }
                if !held.contains(&t) {
                    held.push(t);
                    n_test = count(&held);
                }
            }
            if n_test < HELDOUT_MIN_RECORDS || n_test >= n {
                return Err(ClaspError::InsufficientRecords(format!(
                    "{n} records over {} combinations cannot hold out {HELDOUT_MIN_RECORDS} \
                     unseen-combination test records and keep a training set",
                    triples.len()
                )));
            }
            let mut rest = Vec::with_capacity(n - n_test);
            for (i, r) in records.iter().enumerate() {
                if held.contains(&r.factors.triple()) {
                    part[i] = 2;
                } else {
                    rest.push(i);
                }
            }
            rest.shuffle(&mut rng);
            for &i in rest.iter().take(n_val.min(rest.len() - 1)) {
                part[i] = 1;
            }
        }
    }

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (r, p) in records.into_iter().zip(part) {
        match p {
            0 => train.push(r),
            1 => val.push(r),
            _ => test.push(r),
        }
    }
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::generate_records;

    fn recs(n: usize) -> Vec<DatasetRecord> {
        generate_records(n, 5).unwrap().1
    }

    fn ids(v: &[DatasetRecord]) -> Vec<u64> {
        v.iter().map(|r| r.record_id).collect()
    }

    #[test]
    fn split_is_deterministic_and_exhaustive() {
        let all = recs(2000);
        for mode in [HeldoutMode::UnseenCombination, HeldoutMode::Random] {
            let (a, b, c) = split(all.clone(), [0.8, 0.1, 0.1], 7, mode).unwrap();
            let (a2, b2, c2) = split(all.clone(), [0.8, 0.1, 0.1], 7, mode).unwrap();
            assert_eq!((ids(&a), ids(&b), ids(&c)), (ids(&a2), ids(&b2), ids(&c2)));
            assert_eq!(a.len() + b.len() + c.len(), 2000);
            let mut every: Vec<u64> = [ids(&a), ids(&b), ids(&c)].concat();
            every.sort_unstable();
            every.dedup();
            assert_eq!(every.len(), 2000);
        }
    }

    #[test]
    fn unseen_test_triples_never_appear_in_train() {
        let (train, val, test) = split(
            recs(2000),
            [0.8, 0.1, 0.1],
            7,
            HeldoutMode::UnseenCombination,
        )
        .unwrap();
        let train_triples: BTreeSet<_> = train.iter().map(|r| r.factors.triple()).collect();
        let val_triples: BTreeSet<_> = val.iter().map(|r| r.factors.triple()).collect();
        assert!(test.len() >= HELDOUT_MIN_RECORDS);
        for r in &test {
            assert!(!train_triples.contains(&r.factors.triple()));
            assert!(!val_triples.contains(&r.factors.triple()));
        }
        // 10% of 40 combinations, with distinct blocks and directions.
        let held: BTreeSet<_> = test.iter().map(|r| r.factors.triple()).collect();
        assert_eq!(held.len(), 4);
        let blocks: BTreeSet<_> = held.iter().map(|t| (t.0, t.1)).collect();
        let dirs: BTreeSet<_> = held.iter().map(|t| t.2).collect();
        assert_eq!((blocks.len(), dirs.len()), (4, 4));
        assert!((val.len() as i64 - 200).abs() <= 1);
    }

    #[test]
    fn small_datasets_grow_the_heldout_set() {
        let (_, _, test) = split(
            recs(120),
            [0.8, 0.1, 0.1],
            1,
            HeldoutMode::UnseenCombination,
        )
        .unwrap();
        assert!(test.len() >= HELDOUT_MIN_RECORDS);
    }

    #[test]
    fn too_few_records_is_an_error() {
        let err = split(recs(10), [0.8, 0.1, 0.1], 1, HeldoutMode::UnseenCombination).unwrap_err();
        assert!(matches!(err, ClaspError::InsufficientRecords(_)));
    }

    #[test]
    fn bad_ratios_are_rejected() {
        for r in [[0.8, 0.1, 0.2], [1.0, 0.0, 0.0], [0.9, -0.1, 0.2]] {
            assert!(split(recs(10), r, 1, HeldoutMode::Random).is_err());
        }
    }

    #[test]
    fn different_seeds_hold_out_different_combinations() {
        let all = recs(600);
        let (_, _, a) = split(
            all.clone(),
            [0.8, 0.1, 0.1],
            1,
            HeldoutMode::UnseenCombination,
        )
        .unwrap();
        let (_, _, b) = split(all, [0.8, 0.1, 0.1], 2, HeldoutMode::UnseenCombination).unwrap();
        assert_ne!(ids(&a), ids(&b));
    }
}
