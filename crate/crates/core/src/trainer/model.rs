use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::blockworld::Trajectory;
use crate::captioner::{Captioner, CaptionerConfig};
use crate::datastore::Batch;
use crate::encoders::{
    alignment_loss, kl_standard_normal, sample_nodes, BehaviorEncoder, EncoderConfig, TextEncoder,
};
use crate::error::{ClaspError, Result};
use crate::generator::Policy;
use crate::prior::FlowModel;
use crate::substrate::{Graph, Mode, NodeId, ParamStore, Real, SeqEncoderConfig, Tensor};

/// Rows encoded per graph when embedding a whole pool.
const EMBED_CHUNK: usize = 64;

pub fn encoder_config(c: &TrainConfig) -> EncoderConfig {
    EncoderConfig {
        d: c.d,
        distributional: c.distributional,
        behavior: SeqEncoderConfig {
            d_model: c.behavior_width,
            n_layers: c.layers,
            n_heads: c.heads,
            ff_width: c.behavior_ff,
            dropout: c.dropout,
        },
        text: SeqEncoderConfig {
            d_model: c.text_width,
            n_layers: c.layers,
            n_heads: c.heads,
            ff_width: c.text_ff,
            dropout: c.dropout,
        },
    }
}

pub fn captioner_config(c: &TrainConfig) -> CaptionerConfig {
    let seq = SeqEncoderConfig {
        d_model: c.caption_width,
        n_layers: c.layers,
        n_heads: c.heads,
        ff_width: c.caption_ff,
        dropout: c.dropout,
    };
    CaptionerConfig {
        prefix_len: c.prefix_len,
        mapper: seq,
        decoder: seq,
    }
}

/// Every learned head. Parameters live in one store under the owner
/// prefixes `behavior`, `text`, `caption`, `policy` and `flow`.
#[derive(Clone, Debug)]
pub struct ClaspModel {
    pub behavior: BehaviorEncoder,
    pub text: TextEncoder,
    pub captioner: Captioner,
    pub policy: Policy,
    pub flow: Option<FlowModel>,
}

/// Graph nodes of the per-term losses.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub align: NodeId,
    /// Summed caption NLL divided by the batch size.
    pub caption: NodeId,
    pub gen: NodeId,
    pub kl: NodeId,
    /// Non-PAD target tokens in the batch.
    pub caption_tokens: usize,
}

/// Loss weights in effect for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weights {
    pub align: f64,
    pub caption: f64,
    pub gen: f64,
    pub kl: f64,
}

impl Weights {
    pub fn of(c: &TrainConfig) -> Self {
        Self {
            align: c.beta_align,
            caption: c.beta_caption,
            gen: c.beta_gen,
            kl: c.beta_kl,
        }
    }
}

impl ClaspModel {
    /// Builds freshly initialized heads from `seed`, without a flow.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: &TrainConfig,
        vocab_size: usize,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let enc = encoder_config(config);
        let behavior = BehaviorEncoder::new(store, "behavior", &enc, &mut rng)?;
        let text = TextEncoder::new(store, "text", &enc, vocab_size, &mut rng)?;
        let captioner = Captioner::new(
            store,
            "caption",
            captioner_config(config),
            config.d,
            vocab_size,
            &mut rng,
        )?;
        let policy = Policy::new(store, "policy", config.d, config.policy_width, &mut rng)?;
        Ok(Self {
            behavior,
            text,
            captioner,
            policy,
            flow: None,
        })
    }

    pub fn add_flow<T: Real>(&mut self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        if self.flow.is_some() {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        self.flow = Some(FlowModel::new(store, "flow", self.behavior.d, &mut rng)?);
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.behavior.d
    }

    /// Weighted objective over one batch. Captioning consumes the behavior
    /// sample and generation the text sample. In train mode the noise and
    /// dropout are keyed by `mode`.
    pub fn total_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        w: Weights,
        tau: f64,
        mode: Mode,
    ) -> Result<LossNodes> {
        let n = batch.len();
        let d = self.d();
        let bn =
            self.behavior
                .forward(g, store, &batch.steps, &batch.mask, n, batch.t_max, mode)?;
        let tn = self.text.forward(g, store, &batch.captions, mode)?;
        let (eps_b, eps_l) = match mode {
            Mode::Train(key) => (
                Some(key.normal("eps.behavior", n * d)),
                Some(key.normal("eps.text", n * d)),
            ),
            Mode::Eval => (None, None),
        };
        let zb = sample_nodes(g, &bn, eps_b);
        let zl = sample_nodes(g, &tn, eps_l);
        let align = alignment_loss(g, zb, zl, tau)?;
        let prefix = self.captioner.map_prefix(g, store, zb, mode);
        let (cap_sum, caption_tokens) =
            self.captioner
                .caption_loss_sum(g, store, &prefix, &batch.captions, mode)?;
        let caption = g.scale(cap_sum, T::c(1.0 / n as f64));
        let gen = self.policy.generation_loss(g, store, zl, batch);
        let kl_b = kl_standard_normal(g, &bn);
        let kl_l = kl_standard_normal(g, &tn);
        let kl = g.add(kl_b, kl_l);
        let terms = [
            (align, w.align),
            (caption, w.caption),
            (gen, w.gen),
            (kl, w.kl),
        ];
        let mut total = g.scalar(T::zero());
        for (node, beta) in terms {
            let s = g.scale(node, T::c(beta));
            total = g.add(total, s);
        }
        Ok(LossNodes {
            total,
            align,
            caption,
            gen,
            kl,
            caption_tokens,
        })
    }

    /// Eval-mode `mu / ||mu||` rows for trajectories, `[n, d]`.
    pub fn embed_trajectories<T: Real>(
        &self,
        store: &ParamStore<T>,
        trajs: &[&Trajectory],
    ) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(trajs.len() * self.d());
        for chunk in trajs.chunks(EMBED_CHUNK) {
            let mut g = Graph::new();
            let nodes = self
                .behavior
                .forward_trajectories(&mut g, store, chunk, Mode::Eval)?;
            let z = sample_nodes(&mut g, &nodes, None);
            data.extend_from_slice(&g.value(z).data);
        }
        finite(
            Tensor::from_vec(trajs.len(), self.d(), data),
            "behavior embedding",
        )
    }

    /// Eval-mode `mu / ||mu||` rows for captions, `[n, d]`.
    pub fn embed_captions<T: Real>(
        &self,
        store: &ParamStore<T>,
        captions: &[Vec<u32>],
    ) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(captions.len() * self.d());
        for chunk in captions.chunks(EMBED_CHUNK) {
            let mut g = Graph::new();
            let nodes = self.text.forward(&mut g, store, chunk, Mode::Eval)?;
            let z = sample_nodes(&mut g, &nodes, None);
            data.extend_from_slice(&g.value(z).data);
        }
        finite(
            Tensor::from_vec(captions.len(), self.d(), data),
            "text embedding",
        )
    }
}

fn finite<T: Real>(t: Tensor<T>, what: &str) -> Result<Tensor<T>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(ClaspError::NonFinite(what.into()))
    }
}
