//! Distributional behavior and text encoders, reparameterized sampling and
//! the symmetric contrastive alignment loss.

use rand::Rng;

use crate::blockworld::{Trajectory, A_MAX, PAD, STATE_DIM};
use crate::datastore::{stack_steps, STEP_DIM};
use crate::error::{ClaspError, Result};
use crate::substrate::{
    Activation, Graph, Mlp, Mode, NodeId, ParamId, ParamStore, Real, SeqEncoder, SeqEncoderConfig,
    Tensor,
};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 4.0;
pub const DEFAULT_TAU: f64 = 0.07;
/// Initial log-variance: samples start close to their means.
pub const LOGVAR_INIT: f64 = -4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Embedding dimension of the shared space.
    pub d: usize,
    /// When false the heads emit only a mean and samples ignore noise.
    pub distributional: bool,
    pub behavior: SeqEncoderConfig,
    pub text: SeqEncoderConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 32,
            distributional: true,
            behavior: SeqEncoderConfig {
                d_model: 64,
                n_layers: 2,
                n_heads: 2,
                ff_width: 128,
                dropout: 0.1,
            },
            text: SeqEncoderConfig {
                d_model: 32,
                n_layers: 2,
                n_heads: 2,
                ff_width: 64,
                dropout: 0.1,
            },
        }
    }
}

/// Mean and clamped log-variance of one embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEmbedding<T> {
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
}

/// Unit-norm sample from a [`GaussianEmbedding`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSample<T> {
    pub z: Vec<T>,
}

/// Graph nodes of a batch of Gaussian embeddings, `[n, d]` each. `logvar`
/// is absent for non-distributional encoders.
#[derive(Clone, Copy, Debug)]
pub struct GaussianNodes {
    pub mu: NodeId,
    pub logvar: Option<NodeId>,
}

impl GaussianNodes {
    pub fn read<T: Real>(&self, g: &Graph<T>) -> Vec<GaussianEmbedding<T>> {
        let mu = g.value(self.mu);
        (0..mu.rows)
            .map(|r| GaussianEmbedding {
                mu: mu.row(r).to_vec(),
                logvar: match self.logvar {
                    Some(lv) => g.value(lv).row(r).to_vec(),
                    None => vec![T::zero(); mu.cols],
                },
            })
            .collect()
    }
}

/// Builds the `(mu, logvar)` head with the log-variance bias at
/// [`LOGVAR_INIT`].
fn build_head<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    dm: usize,
    config: &EncoderConfig,
    rng: &mut R,
) -> Result<Mlp> {
    let head = Mlp::new(
        store,
        name,
        &head_sizes(dm, config.d, config.distributional),
        Activation::Gelu,
        rng,
    )?;
    if config.distributional {
        let b = head
            .layers
            .last()
            .and_then(|l| l.b)
            .expect("head output has a bias");
        store.value_mut(b).data[config.d..]
            .iter_mut()
            .for_each(|v| *v = T::c(LOGVAR_INIT));
    }
    Ok(head)
}

fn head_sizes(input: usize, d: usize, distributional: bool) -> [usize; 4] {
    let out = if distributional { 2 * d } else { d };
    [input, input, input, out]
}

fn split_head<T: Real>(
    g: &mut Graph<T>,
    out: NodeId,
    d: usize,
    distributional: bool,
) -> GaussianNodes {
    if !distributional {
        return GaussianNodes {
            mu: out,
            logvar: None,
        };
    }
    let mu = g.select_cols(out, &(0..d).collect::<Vec<_>>());
    let raw = g.select_cols(out, &(d..2 * d).collect::<Vec<_>>());
    let logvar = g.clamp(raw, T::c(LOGVAR_MIN), T::c(LOGVAR_MAX));
    GaussianNodes {
        mu,
        logvar: Some(logvar),
    }
}

/// Trajectory encoder: per-step `(state, action)` projection, `[CLS]`
/// transformer, 3-layer head to `(mu, logvar)`.
#[derive(Clone, Debug)]
pub struct BehaviorEncoder {
    pub d: usize,
    pub distributional: bool,
    input: Mlp,
    seq: SeqEncoder,
    head: Mlp,
}

impl BehaviorEncoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let dm = config.behavior.d_model;
        let input = Mlp::new(
            store,
            &format!("{name}.input"),
            &[STEP_DIM, dm, dm],
            Activation::Gelu,
            rng,
        )?;
        let seq = SeqEncoder::new(store, &format!("{name}.seq"), config.behavior, true, rng)?;
        let head = build_head(store, &format!("{name}.head"), dm, config, rng)?;
        Ok(Self {
            d: config.d,
            distributional: config.distributional,
            input,
            seq,
            head,
        })
    }

    /// Encodes `n` stacked trajectories given as padded `(s_t, a_t)` rows
    /// (`[n * t_max, STEP_DIM]`) with validity `mask`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        steps: &[f32],
        mask: &[bool],
        n: usize,
        t_max: usize,
        mode: Mode,
    ) -> Result<GaussianNodes> {
        if t_max == 0 || mask.chunks(t_max).any(|m| !m[0]) {
            return Err(ClaspError::InvalidInput("empty trajectory".into()));
        }
        // States to [-1, 1], actions to units of the action bound.
        let x = Tensor::from_vec(
            n * t_max,
            STEP_DIM,
            steps
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let v = v as f64;
                    T::c(if i % STEP_DIM < STATE_DIM {
                        2.0 * v - 1.0
                    } else {
                        v / A_MAX as f64
                    })
                })
                .collect(),
        );
        let x = g.constant(x);
        let h = self.input.forward(g, store, x);
        let cls = self.seq.encode_cls(g, store, h, n, t_max, mask, mode);
        let out = self.head.forward(g, store, cls);
        Ok(split_head(g, out, self.d, self.distributional))
    }

    pub fn forward_trajectories<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        trajs: &[&Trajectory],
        mode: Mode,
    ) -> Result<GaussianNodes> {
        let (steps, mask, t_max) = stack_steps(trajs);
        self.forward(g, store, &steps, &mask, trajs.len(), t_max, mode)
    }

    /// Eval-mode embedding of one trajectory.
    pub fn encode<T: Real>(
        &self,
        store: &ParamStore<T>,
        traj: &Trajectory,
    ) -> Result<GaussianEmbedding<T>> {
        let mut g = Graph::new();
        let nodes = self.forward_trajectories(&mut g, store, &[traj], Mode::Eval)?;
        Ok(nodes.read(&g).remove(0))
    }
}

/// Caption encoder: token embeddings, `[CLS]` transformer with padding
/// masked out, 3-layer head to `(mu, logvar)`.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub d: usize,
    pub distributional: bool,
    pub vocab_size: usize,
    embed: ParamId,
    seq: SeqEncoder,
    head: Mlp,
}

impl TextEncoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &EncoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dm = config.text.d_model;
        let embed = store.register_normal(format!("{name}.embed"), vocab_size, dm, 1.0, rng);
        let seq = SeqEncoder::new(store, &format!("{name}.seq"), config.text, true, rng)?;
        let head = build_head(store, &format!("{name}.head"), dm, config, rng)?;
        Ok(Self {
            d: config.d,
            distributional: config.distributional,
            vocab_size,
            embed,
            seq,
            head,
        })
    }

    /// Encodes equal-length token sequences; PAD positions are masked out.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        captions: &[Vec<u32>],
        mode: Mode,
    ) -> Result<GaussianNodes> {
        let n = captions.len();
        let len = captions.first().map_or(0, Vec::len);
        if len == 0 || captions.iter().any(|c| c.len() != len) {
            return Err(ClaspError::InvalidInput(
                "captions must be non-empty and equally long".into(),
            ));
        }
        let mut map = Vec::with_capacity(n * len);
        let mut mask = Vec::with_capacity(n * len);
        for c in captions {
            for &t in c {
                if t as usize >= self.vocab_size {
                    return Err(ClaspError::InvalidInput(format!(
                        "token id {t} outside vocabulary of {}",
                        self.vocab_size
                    )));
                }
                map.push(Some((0, t as usize)));
                mask.push(t != PAD);
            }
        }
        let e = g.param(store, self.embed);
        let x = g.gather_rows(&[e], map);
        let cls = self.seq.encode_cls(g, store, x, n, len, &mask, mode);
        let out = self.head.forward(g, store, cls);
        Ok(split_head(g, out, self.d, self.distributional))
    }

    /// Eval-mode embedding of one caption.
    pub fn encode<T: Real>(
        &self,
        store: &ParamStore<T>,
        tokens: &[u32],
    ) -> Result<GaussianEmbedding<T>> {
        let mut g = Graph::new();
        let nodes = self.forward(&mut g, store, &[tokens.to_vec()], Mode::Eval)?;
        Ok(nodes.read(&g).remove(0))
    }
}

/// Reparameterized, L2-normalized samples `[n, d]`. `eps` is row-major
/// `[n, d]`; `None` (or a non-distributional embedding) gives the
/// normalized mean.
pub fn sample_nodes<T: Real>(
    g: &mut Graph<T>,
    nodes: &GaussianNodes,
    eps: Option<Vec<T>>,
) -> NodeId {
    let raw = match (nodes.logvar, eps) {
        (Some(lv), Some(eps)) => {
            let half = g.scale(lv, T::c(0.5));
            let sigma = g.exp(half);
            let noise = g.mul_const(sigma, eps);
            g.add(nodes.mu, noise)
        }
        _ => nodes.mu,
    };
    g.l2_normalize_rows(raw)
}

/// `z = (mu + eps * exp(logvar / 2)) / ||.||`.
pub fn reparameterize<T: Real>(e: &GaussianEmbedding<T>, eps: &[T]) -> Result<EmbeddingSample<T>> {
    if eps.len() != e.mu.len() || e.logvar.len() != e.mu.len() {
        return Err(ClaspError::InvalidInput(
            "embedding and noise widths differ".into(),
        ));
    }
    let raw: Vec<T> =
        e.mu.iter()
            .zip(&e.logvar)
            .zip(eps)
            .map(|((&m, &lv), &n)| m + n * (lv * T::c(0.5)).exp())
            .collect();
    let norm = raw.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(ClaspError::NonFinite(
            "sample has zero or non-finite norm".into(),
        ));
    }
    Ok(EmbeddingSample {
        z: raw.into_iter().map(|v| v / norm).collect(),
    })
}

/// Symmetric InfoNCE over matched rows of `zb` and `zl` (`[n, d]`):
/// the mean of the behavior-to-text and text-to-behavior cross-entropies of
/// the similarity matrix scaled by `1 / tau`.
pub fn alignment_loss<T: Real>(
    g: &mut Graph<T>,
    zb: NodeId,
    zl: NodeId,
    tau: f64,
) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(ClaspError::InvalidInput(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let n = g.shape(zb).0;
    if n == 0 || g.shape(zl) != g.shape(zb) {
        return Err(ClaspError::InvalidInput(
            "alignment needs matched, non-empty batches".into(),
        ));
    }
    let sim = g.matmul_nt(zb, zl);
    let logits = g.scale(sim, T::c(1.0 / tau));
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    let b2t = g.xent_rows(logits, targets.clone());
    let logits_t = g.transpose(logits);
    let t2b = g.xent_rows(logits_t, targets);
    let both = g.add(b2t, t2b);
    Ok(g.scale(both, T::c(0.5 / n as f64)))
}

/// Value of [`alignment_loss`] for fixed sample matrices.
pub fn alignment_loss_value<T: Real>(zb: &Tensor<T>, zl: &Tensor<T>, tau: f64) -> Result<T> {
    let mut g = Graph::new();
    let a = g.constant(zb.clone());
    let b = g.constant(zl.clone());
    let l = alignment_loss(&mut g, a, b, tau)?;
    Ok(g.value(l).item())
}

/// Batch mean of `KL(N(mu, sigma^2) || N(0, I))`; zero for mean-only nodes.
pub fn kl_standard_normal<T: Real>(g: &mut Graph<T>, nodes: &GaussianNodes) -> NodeId {
    let n = g.shape(nodes.mu).0;
    let Some(lv) = nodes.logvar else {
        return g.scalar(T::zero());
    };
    let var = g.exp(lv);
    let mu2 = g.square(nodes.mu);
    let s = g.add(var, mu2);
    let s = g.sub(s, lv);
    let total = g.sum(s);
    let d = g.shape(nodes.mu).1;
    let ones = g.scalar(T::c((n * d) as f64));
    let total = g.sub(total, ones);
    g.scale(total, T::c(0.5 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockworld::{
        render_caption, scripted_demo, tokenize, BlockSet, BoardState, CaptionFactors, Direction,
        Vec2, Vocab, N_BLOCKS,
    };
    use crate::substrate::{gradcheck_params, NoiseKey};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn demo(seed: u64) -> Trajectory {
        let mut blocks = [Vec2::default(); N_BLOCKS];
        for (i, b) in blocks.iter_mut().enumerate() {
            *b = Vec2::new(0.1 + 0.11 * i as f32, 0.08);
        }
        blocks[0] = Vec2::new(0.5, 0.5);
        let board = BoardState {
            effector: Vec2::new(0.35, 0.45),
            blocks,
        };
        let set = BlockSet::sample(&mut ChaCha8Rng::seed_from_u64(0));
        scripted_demo(&board, &set, 0, Direction::Right, seed)
            .unwrap()
            .0
    }

    fn tiny() -> EncoderConfig {
        let seq = SeqEncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ff_width: 8,
            dropout: 0.0,
        };
        EncoderConfig {
            d: 4,
            distributional: true,
            behavior: seq,
            text: seq,
        }
    }

    #[test]
    fn zero_noise_gives_normalized_mean() {
        let e = GaussianEmbedding {
            mu: vec![3.0f64, 4.0],
            logvar: vec![1.0, -2.0],
        };
        let s = reparameterize(&e, &[0.0, 0.0]).unwrap();
        assert_eq!(s.z, vec![0.6, 0.8]);
        assert_eq!(reparameterize(&e, &[0.0, 0.0]).unwrap(), s);
    }

    #[test]
    fn reparameterize_worked_example() {
        let e = GaussianEmbedding {
            mu: vec![1.0f64, 2.0],
            logvar: vec![4f64.ln(), 9f64.ln()],
        };
        let s = reparameterize(&e, &[1.0, -1.0]).unwrap();
        let r = 10f64.sqrt();
        assert!((s.z[0] - 3.0 / r).abs() < 1e-12 && (s.z[1] + 1.0 / r).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_sample_is_an_error() {
        let e = GaussianEmbedding {
            mu: vec![1.0f64, 0.0],
            logvar: vec![0.0, 0.0],
        };
        assert!(reparameterize(&e, &[-1.0, 0.0]).is_err());
    }

    #[test]
    fn sample_mean_matches_mu() {
        // Pre-normalization mean over 1e5 draws within 3 standard errors.
        let mu = [0.3f64, -1.2, 2.0];
        let lv = [0.0f64, 1.0, -1.0];
        let n = 100_000;
        let mut r = rng();
        let mut sums = [0.0; 3];
        for _ in 0..n {
            for k in 0..3 {
                let eps: f64 = StandardNormal.sample(&mut r);
                sums[k] += mu[k] + eps * (lv[k] / 2.0).exp();
            }
        }
        for k in 0..3 {
            let se = (lv[k] / 2.0).exp() / (n as f64).sqrt();
            assert!(
                (sums[k] / n as f64 - mu[k]).abs() < 3.0 * se,
                "coordinate {k}"
            );
        }
    }

    #[test]
    fn graph_sampling_matches_reparameterize() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let lv = g.constant(Tensor::from_vec(1, 2, vec![4f64.ln(), 9f64.ln()]));
        let nodes = GaussianNodes {
            mu,
            logvar: Some(lv),
        };
        let z = sample_nodes(&mut g, &nodes, Some(vec![1.0, -1.0]));
        let r = 10f64.sqrt();
        let v = g.value(z);
        assert!((v.data[0] - 3.0 / r).abs() < 1e-12 && (v.data[1] + 1.0 / r).abs() < 1e-12);
    }

    #[test]
    fn single_pair_alignment_is_zero() {
        let z = Tensor::from_vec(1, 3, vec![0.6f64, 0.8, 0.0]);
        assert!(alignment_loss_value(&z, &z, 0.07).unwrap().abs() < 1e-12);
    }

    #[test]
    fn orthonormal_pairs_closed_form() {
        let z = Tensor::from_vec(2, 2, vec![1.0f64, 0.0, 0.0, 1.0]);
        let l = alignment_loss_value(&z, &z, 1.0).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn non_positive_tau_is_rejected() {
        let z = Tensor::from_vec(1, 1, vec![1.0f64]);
        assert!(alignment_loss_value(&z, &z, 0.0).is_err());
        assert!(alignment_loss_value(&z, &z, -1.0).is_err());
    }

    fn random_unit_rows(n: usize, d: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
        let mut t = Tensor::zeros(n, d);
        for i in 0..n {
            let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *r)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            t.row_mut(i)
                .iter_mut()
                .zip(row)
                .for_each(|(o, v)| *o = v / norm);
        }
        t
    }

    #[test]
    fn random_embeddings_sit_near_log_n() {
        // At unit temperature; at 0.07 the logit spread of random unit vectors
        // in 32 dimensions alone adds about 2.6 nats.
        let mut r = rng();
        let ln = 128f64.ln();
        for _ in 0..5 {
            let zb = random_unit_rows(128, 32, &mut r);
            let zl = random_unit_rows(128, 32, &mut r);
            let l = alignment_loss_value(&zb, &zl, 1.0).unwrap();
            assert!(l > 0.9 * ln && l < 1.1 * ln, "{l}");
            let sharp = alignment_loss_value(&zb, &zl, DEFAULT_TAU).unwrap();
            assert!(sharp > 1.3 * ln, "{sharp}");
        }
    }

    #[test]
    fn alignment_is_symmetric_and_permutation_invariant() {
        let mut r = rng();
        let zb = random_unit_rows(6, 4, &mut r);
        let zl = random_unit_rows(6, 4, &mut r);
        let l = alignment_loss_value(&zb, &zl, 0.5).unwrap();
        let swapped = alignment_loss_value(&zl, &zb, 0.5).unwrap();
        assert!((l - swapped).abs() < 1e-12);
        let perm = [3, 0, 5, 1, 4, 2];
        let pb = Tensor::from_rows(&perm.iter().map(|&i| zb.row(i).to_vec()).collect::<Vec<_>>());
        let pl = Tensor::from_rows(&perm.iter().map(|&i| zl.row(i).to_vec()).collect::<Vec<_>>());
        assert!((alignment_loss_value(&pb, &pl, 0.5).unwrap() - l).abs() < 1e-12);
        assert!(l >= 0.0);
    }

    #[test]
    fn dominant_matches_drive_loss_to_zero() {
        let z = Tensor::from_vec(3, 3, vec![1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(alignment_loss_value(&z, &z, 0.01).unwrap() < 1e-12);
    }

    #[test]
    fn behavior_shapes_and_eval_determinism() {
        let mut s = ParamStore::<f32>::new();
        let enc = BehaviorEncoder::new(&mut s, "behavior", &EncoderConfig::default(), &mut rng())
            .unwrap();
        let t = demo(0);
        let a = enc.encode(&s, &t).unwrap();
        assert_eq!((a.mu.len(), a.logvar.len()), (32, 32));
        assert_eq!(enc.encode(&s, &t).unwrap(), a);
        assert!(a
            .logvar
            .iter()
            .all(|v| (LOGVAR_MIN as f32..=LOGVAR_MAX as f32).contains(v)));
        let b = enc.encode(&s, &demo(1)).unwrap();
        assert!(a.mu.iter().zip(&b.mu).any(|(x, y)| x != y));
    }

    #[test]
    fn behavior_rejects_empty_trajectory() {
        let mut s = ParamStore::<f32>::new();
        let enc = BehaviorEncoder::new(&mut s, "behavior", &tiny(), &mut rng()).unwrap();
        let t = Trajectory {
            states: vec![BoardState::default()],
            actions: vec![],
        };
        assert!(enc.encode(&s, &t).is_err());
    }

    #[test]
    fn text_shapes_and_unknown_tokens() {
        let v = Vocab::standard();
        let mut s = ParamStore::<f32>::new();
        let enc = TextEncoder::new(
            &mut s,
            "text",
            &EncoderConfig::default(),
            v.len(),
            &mut rng(),
        )
        .unwrap();
        let f = CaptionFactors::new(0, 0, Direction::Left);
        let e = enc.encode(&s, &render_caption(&f, 0)).unwrap();
        assert_eq!((e.mu.len(), e.logvar.len()), (32, 32));
        let mut bad = tokenize(&v, "push the red cube left");
        bad[2] = v.len() as u32;
        assert!(enc.encode(&s, &bad).is_err());
    }

    #[test]
    fn non_distributional_ignores_noise() {
        let mut cfg = tiny();
        cfg.distributional = false;
        let mut s = ParamStore::<f64>::new();
        let enc = TextEncoder::new(&mut s, "text", &cfg, 40, &mut rng()).unwrap();
        let caps = vec![render_caption(&CaptionFactors::new(1, 1, Direction::Up), 3)];
        let run = |eps: Option<Vec<f64>>| {
            let mut g = Graph::new();
            let n = enc.forward(&mut g, &s, &caps, Mode::Eval).unwrap();
            assert!(n.logvar.is_none());
            let z = sample_nodes(&mut g, &n, eps);
            g.value(z).clone()
        };
        assert_eq!(run(None), run(Some(vec![5.0; 4])));
    }

    #[test]
    fn kl_is_zero_at_the_standard_normal() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(Tensor::zeros(3, 4));
        let lv = g.constant(Tensor::zeros(3, 4));
        let kl = kl_standard_normal(
            &mut g,
            &GaussianNodes {
                mu,
                logvar: Some(lv),
            },
        );
        assert!(g.value(kl).item().abs() < 1e-12);
        let mu = g.constant(Tensor::from_vec(1, 1, vec![2.0]));
        let lv = g.constant(Tensor::from_vec(1, 1, vec![0.0]));
        let kl = kl_standard_normal(
            &mut g,
            &GaussianNodes {
                mu,
                logvar: Some(lv),
            },
        );
        assert!((g.value(kl).item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_gradcheck_through_both_encoders() {
        let mut s = ParamStore::<f64>::new();
        let cfg = tiny();
        let be = BehaviorEncoder::new(&mut s, "behavior", &cfg, &mut rng()).unwrap();
        let te =
            TextEncoder::new(&mut s, "text", &cfg, Vocab::standard().len(), &mut rng()).unwrap();
        let trajs = [demo(0), demo(1)];
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        let caps = vec![
            render_caption(&CaptionFactors::new(0, 0, Direction::Right), 0),
            render_caption(&CaptionFactors::new(2, 1, Direction::Up), 7),
        ];
        let key = NoiseKey::new(5, 0);
        let ids: Vec<_> = s.ids().collect();
        let report = gradcheck_params(&mut s, &ids, 1e-6, 6, |st, g| {
            let b = be.forward_trajectories(g, st, &refs, Mode::Eval).unwrap();
            let l = te.forward(g, st, &caps, Mode::Eval).unwrap();
            let zb = sample_nodes(g, &b, Some(key.normal("b", 8)));
            let zl = sample_nodes(g, &l, Some(key.normal("l", 8)));
            alignment_loss(g, zb, zl, 0.5).unwrap()
        });
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
