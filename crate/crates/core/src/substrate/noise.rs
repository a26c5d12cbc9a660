use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Real;

/// Counter-based noise: every draw is keyed by `(seed, step, site)` so a
/// forward pass is reproducible from the training step alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub step: u64,
}

impl NoiseKey {
    pub fn new(seed: u64, step: u64) -> Self {
        Self { seed, step }
    }

    pub fn rng(&self, site: &str) -> ChaCha8Rng {
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&self.seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&self.step.to_le_bytes());
        bytes[16..24].copy_from_slice(&fnv1a(site.as_bytes()).to_le_bytes());
        bytes[24..].copy_from_slice(b"clasp-nz");
        ChaCha8Rng::from_seed(bytes)
    }

    pub fn normal<T: Real>(&self, site: &str, n: usize) -> Vec<T> {
        let mut rng = self.rng(site);
        (0..n)
            .map(|_| T::c(rng.sample::<f64, _>(StandardNormal)))
            .collect()
    }

    /// Inverted-dropout mask: kept entries scaled by `1 / (1 - p)`.
    pub fn dropout_mask<T: Real>(&self, site: &str, n: usize, p: f64) -> Vec<T> {
        let mut rng = self.rng(site);
        let keep = T::c(1.0 / (1.0 - p));
        (0..n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect()
    }
}

// Site names are short static labels; a 64-bit FNV-1a mix is ample to key them.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Forward-pass mode shared by every model head.
#[derive(Clone, Copy, Debug)]
pub enum Mode {
    /// Dropout active, noise drawn from the key.
    Train(NoiseKey),
    Eval,
}

impl Mode {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}
