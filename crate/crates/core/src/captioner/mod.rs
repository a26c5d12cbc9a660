//! Behavior-to-language head: prefix mapping network, causal decoder with
//! tied token embeddings, teacher-forced loss and beam search.

use rand::Rng;

use crate::blockworld::{BOS, CAPTION_LEN, EOS, PAD};
use crate::error::{ClaspError, Result};
use crate::substrate::{
    tiled_positions, Graph, Linear, Mode, NodeId, ParamId, ParamStore, Real, SeqEncoder,
    SeqEncoderConfig, SeqLayout, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaptionerConfig {
    /// Number of prefix vectors.
    pub prefix_len: usize,
    pub mapper: SeqEncoderConfig,
    pub decoder: SeqEncoderConfig,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        let seq = SeqEncoderConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            ff_width: 64,
            dropout: 0.1,
        };
        Self {
            prefix_len: 10,
            mapper: seq,
            decoder: seq,
        }
    }
}

/// Prefix vectors of a batch, `[n * k, dim]` with `k` rows per item.
#[derive(Clone, Copy, Debug)]
pub struct Prefix {
    pub node: NodeId,
    pub n: usize,
    pub k: usize,
}

#[derive(Clone, Debug)]
pub struct Captioner {
    pub config: CaptionerConfig,
    pub vocab_size: usize,
    expand: Linear,
    mapper: SeqEncoder,
    embed: ParamId,
    decoder: SeqEncoder,
}

impl Captioner {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        config: CaptionerConfig,
        d: usize,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = config.decoder.d_model;
        if config.mapper.d_model != dim {
            return Err(ClaspError::Config(
                "mapper and decoder widths must agree".into(),
            ));
        }
        let expand = Linear::new(
            store,
            &format!("{name}.expand"),
            d,
            config.prefix_len * dim,
            rng,
        );
        let mapper = SeqEncoder::new(store, &format!("{name}.mapper"), config.mapper, false, rng)?;
        // Small enough that untrained logits are near uniform.
        let embed = store.register_normal(format!("{name}.embed"), vocab_size, dim, 0.1, rng);
        let decoder = SeqEncoder::new(
            store,
            &format!("{name}.decoder"),
            config.decoder,
            false,
            rng,
        )?;
        Ok(Self {
            config,
            vocab_size,
            expand,
            mapper,
            embed,
            decoder,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.decoder.d_model
    }

    /// Expands `z` (`[n, d]`) into `k` vectors per item and mixes them with
    /// self-attention.
    pub fn map_prefix<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: NodeId,
        mode: Mode,
    ) -> Prefix {
        let n = g.shape(z).0;
        let k = self.config.prefix_len;
        let seeds = self.expand.forward(g, store, z);
        let seeds = g.reshape(seeds, n * k, self.dim());
        let layout = SeqLayout::dense(n, k);
        let node = self
            .mapper
            .forward_rows(g, store, seeds, &layout, false, mode);
        Prefix { node, n, k }
    }

    /// Runs the causal decoder over `[prefix ‖ embed(tokens)]` and returns the
    /// final hidden rows, `[n * (k + len), dim]`.
    fn decode_hidden<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prefix: &Prefix,
        tokens: &[&[u32]],
        mode: Mode,
    ) -> Result<(NodeId, usize)> {
        let len = tokens.first().map_or(0, |t| t.len());
        if tokens.len() != prefix.n || tokens.iter().any(|t| t.len() != len) {
            return Err(ClaspError::InvalidInput(
                "one equal-length token row per prefix".into(),
            ));
        }
        let k = prefix.k;
        let l = k + len;
        let e = g.param(store, self.embed);
        let mut map = Vec::with_capacity(prefix.n * l);
        for (i, toks) in tokens.iter().enumerate() {
            for j in 0..k {
                map.push(Some((0, i * k + j)));
            }
            for &t in toks.iter() {
                if t as usize >= self.vocab_size {
                    return Err(ClaspError::InvalidInput(format!(
                        "token id {t} outside vocabulary of {}",
                        self.vocab_size
                    )));
                }
                map.push(Some((1, t as usize)));
            }
        }
        let x = g.gather_rows(&[prefix.node, e], map);
        let pos = g.constant(tiled_positions(prefix.n, l, self.dim()));
        let x = g.add(x, pos);
        let layout = SeqLayout::dense(prefix.n, l);
        Ok((
            self.decoder.forward_rows(g, store, x, &layout, true, mode),
            l,
        ))
    }

    /// Logits `[n * len, V]` where row `i * len + j` predicts the token after
    /// `tokens[i][j]`.
    pub fn logits<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prefix: &Prefix,
        tokens: &[&[u32]],
        mode: Mode,
    ) -> Result<NodeId> {
        let (h, l) = self.decode_hidden(g, store, prefix, tokens, mode)?;
        let len = l - prefix.k;
        let rows = (0..prefix.n)
            .flat_map(|i| (0..len).map(move |j| Some((0, i * l + prefix.k + j))))
            .collect();
        let h = g.gather_rows(&[h], rows);
        let e = g.param(store, self.embed);
        Ok(g.matmul_nt(h, e))
    }

    /// Summed next-token NLL over every non-PAD target of every caption.
    /// Captions must be BOS-prefixed and equally long.
    pub fn caption_loss_sum<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prefix: &Prefix,
        captions: &[Vec<u32>],
        mode: Mode,
    ) -> Result<(NodeId, usize)> {
        if captions.iter().any(|c| c.first() != Some(&BOS)) {
            return Err(ClaspError::InvalidInput(
                "captions must start with BOS".into(),
            ));
        }
        let inputs: Vec<&[u32]> = captions.iter().map(|c| &c[..c.len() - 1]).collect();
        let logits = self.logits(g, store, prefix, &inputs, mode)?;
        let targets: Vec<Option<usize>> = captions
            .iter()
            .flat_map(|c| c[1..].iter().map(|&t| (t != PAD).then_some(t as usize)))
            .collect();
        let count = targets.iter().flatten().count();
        Ok((g.xent_rows(logits, targets), count))
    }

    /// Batch caption loss: per-caption summed NLL, averaged over captions.
    pub fn caption_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prefix: &Prefix,
        captions: &[Vec<u32>],
        mode: Mode,
    ) -> Result<NodeId> {
        let (sum, _) = self.caption_loss_sum(g, store, prefix, captions, mode)?;
        Ok(g.scale(sum, T::c(1.0 / captions.len() as f64)))
    }

    /// Eval-mode log-probabilities of the next token after each sequence.
    /// All sequences share the prefix `prefix_value` (`[k, dim]`).
    fn next_log_probs<T: Real>(
        &self,
        store: &ParamStore<T>,
        prefix_value: &Tensor<T>,
        seqs: &[Vec<u32>],
    ) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let k = self.config.prefix_len;
        let mut tiled = Tensor::zeros(seqs.len() * k, self.dim());
        for i in 0..seqs.len() {
            tiled.data[i * k * self.dim()..(i + 1) * k * self.dim()]
                .copy_from_slice(&prefix_value.data);
        }
        let node = g.constant(tiled);
        let prefix = Prefix {
            node,
            n: seqs.len(),
            k,
        };
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let logits = self.logits(&mut g, store, &prefix, &refs, Mode::Eval)?;
        let len = seqs[0].len();
        let lv = g.value(logits);
        Ok((0..seqs.len())
            .map(|i| {
                let row: Vec<f64> = lv
                    .row(i * len + len - 1)
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                row.into_iter().map(|v| v - lse).collect()
            })
            .collect())
    }

    /// Eval-mode prefix for one embedding sample, `[k, dim]`.
    pub fn prefix_value<T: Real>(&self, store: &ParamStore<T>, z: &[T]) -> Tensor<T> {
        let mut g = Graph::new();
        let zi = g.constant(Tensor::from_vec(1, z.len(), z.to_vec()));
        let p = self.map_prefix(&mut g, store, zi, Mode::Eval);
        g.value(p.node).clone()
    }

    /// Length-normalized beam search from BOS. Candidates are ranked by mean
    /// token log-probability, ties by lower token ids. Returns the tokens
    /// from BOS through EOS, or `CAPTION_LEN` tokens if EOS never wins.
    pub fn beam_decode<T: Real>(
        &self,
        store: &ParamStore<T>,
        prefix_value: &Tensor<T>,
        beam_width: usize,
    ) -> Result<Vec<u32>> {
        if beam_width == 0 {
            return Err(ClaspError::InvalidInput(
                "beam width must be at least 1".into(),
            ));
        }
        #[derive(Clone)]
        struct Hyp {
            tokens: Vec<u32>,
            logp: f64,
            done: bool,
        }
        let score = |h: &Hyp| h.logp / (h.tokens.len() - 1) as f64;
        let mut beams = vec![Hyp {
            tokens: vec![BOS],
            logp: 0.0,
            done: false,
        }];
        while beams.iter().any(|h| !h.done) {
            let open: Vec<&Hyp> = beams.iter().filter(|h| !h.done).collect();
            let seqs: Vec<Vec<u32>> = open.iter().map(|h| h.tokens.clone()).collect();
            let lps = self.next_log_probs(store, prefix_value, &seqs)?;
            let mut cands: Vec<Hyp> = beams.iter().filter(|h| h.done).cloned().collect();
            for (h, lp) in open.iter().zip(&lps) {
                for (t, &l) in lp.iter().enumerate() {
                    let mut tokens = h.tokens.clone();
                    tokens.push(t as u32);
                    let done = t as u32 == EOS || tokens.len() == CAPTION_LEN;
                    cands.push(Hyp {
                        tokens,
                        logp: h.logp + l,
                        done,
                    });
                }
            }
            cands.sort_by(|a, b| {
                score(b)
                    .partial_cmp(&score(a))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.tokens.cmp(&b.tokens))
            });
            cands.truncate(beam_width);
            beams = cands;
        }
        Ok(beams.swap_remove(0).tokens)
    }

    /// Greedy decoding: most likely token at each step, lower id on ties.
    pub fn greedy_decode<T: Real>(
        &self,
        store: &ParamStore<T>,
        prefix_value: &Tensor<T>,
    ) -> Result<Vec<u32>> {
        let mut tokens = vec![BOS];
        while tokens.len() < CAPTION_LEN {
            let lp = self
                .next_log_probs(store, prefix_value, &[tokens.clone()])?
                .remove(0);
            let mut best = 0;
            for (t, &l) in lp.iter().enumerate() {
                if l > lp[best] {
                    best = t;
                }
            }
            tokens.push(best as u32);
            if best as u32 == EOS {
                break;
            }
        }
        Ok(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockworld::{parse_caption, render_caption, CaptionFactors, Direction, Vocab};
    use crate::substrate::{gradcheck_params, Adam, AdamConfig, NoiseKey};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab_len() -> usize {
        Vocab::standard().len()
    }

    fn tiny() -> CaptionerConfig {
        let seq = SeqEncoderConfig {
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            ff_width: 4,
            dropout: 0.0,
        };
        CaptionerConfig {
            prefix_len: 3,
            mapper: seq,
            decoder: seq,
        }
    }

    fn caption(c: u8, s: u8, d: Direction, seed: u64) -> Vec<u32> {
        render_caption(&CaptionFactors::new(c, s, d), seed)
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn prefix_shape_determinism_and_sensitivity() {
        let mut s = ParamStore::<f64>::new();
        let cap = Captioner::new(
            &mut s,
            "caption",
            CaptionerConfig::default(),
            32,
            vocab_len(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let z1 = unit((0..32).map(|i| i as f64).collect());
        let z2 = unit((0..32).map(|i| (i * i) as f64).collect());
        let p1 = cap.prefix_value(&s, &z1);
        assert_eq!(p1.shape(), (10, 32));
        assert_eq!(cap.prefix_value(&s, &z1), p1);
        assert_ne!(cap.prefix_value(&s, &z2), p1);
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let v = vocab_len() as f64;
        for seed in 0..5 {
            let mut s = ParamStore::<f64>::new();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let cap = Captioner::new(
                &mut s,
                "caption",
                CaptionerConfig::default(),
                32,
                vocab_len(),
                &mut r,
            )
            .unwrap();
            let caps = vec![
                caption(0, 0, Direction::Left, seed),
                caption(2, 3, Direction::Up, seed + 1),
            ];
            let mut g = Graph::new();
            let z = g.constant(Tensor::from_vec(
                2,
                32,
                (0..64)
                    .map(|i| ((i * 7 % 13) as f64 - 6.0) / 20.0)
                    .collect(),
            ));
            let p = cap.map_prefix(&mut g, &s, z, Mode::Eval);
            let (sum, count) = cap
                .caption_loss_sum(&mut g, &s, &p, &caps, Mode::Eval)
                .unwrap();
            let per_token = g.value(sum).item() / count as f64;
            assert!((per_token / v.ln() - 1.0).abs() < 0.1, "{per_token}");
            let total = g.value(sum).item() / 2.0;
            assert!(total >= 0.0 && total <= (CAPTION_LEN - 1) as f64 * v.ln() * 1.1);
        }
    }

    #[test]
    fn batched_loss_decomposes_into_single_positions() {
        let mut s = ParamStore::<f64>::new();
        let cap = Captioner::new(
            &mut s,
            "caption",
            tiny(),
            4,
            vocab_len(),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        let caps = vec![
            caption(1, 2, Direction::Down, 4),
            caption(3, 5, Direction::TowardCenter, 9),
        ];
        let zs = vec![
            unit(vec![1.0, 2.0, -1.0, 0.5]),
            unit(vec![-0.3, 0.2, 0.9, 0.1]),
        ];
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_rows(&zs));
        let p = cap.map_prefix(&mut g, &s, z, Mode::Eval);
        let (sum, _) = cap
            .caption_loss_sum(&mut g, &s, &p, &caps, Mode::Eval)
            .unwrap();
        let batched = g.value(sum).item();

        let mut independent = 0.0;
        for (zi, c) in zs.iter().zip(&caps) {
            let pv = cap.prefix_value(&s, zi);
            for j in 1..c.len() {
                if c[j] == PAD {
                    continue;
                }
                let lp = cap.next_log_probs(&s, &pv, &[c[..j].to_vec()]).unwrap();
                independent -= lp[0][c[j] as usize];
            }
        }
        assert!(
            (batched - independent).abs() < 1e-6,
            "{batched} vs {independent}"
        );
    }

    #[test]
    fn decoder_is_causal() {
        let mut s = ParamStore::<f64>::new();
        let cap = Captioner::new(
            &mut s,
            "caption",
            tiny(),
            4,
            vocab_len(),
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let a = caption(0, 1, Direction::Left, 0);
        let mut b = a.clone();
        b[4] = 7;
        let run = |toks: &Vec<u32>| {
            let mut g = Graph::new();
            let z = g.constant(Tensor::from_vec(1, 4, vec![0.5, 0.5, 0.5, 0.5]));
            let p = cap.map_prefix(&mut g, &s, z, Mode::Eval);
            let l = cap
                .logits(&mut g, &s, &p, &[toks.as_slice()], Mode::Eval)
                .unwrap();
            g.value(l).clone()
        };
        let (la, lb) = (run(&a), run(&b));
        for j in 0..4 {
            assert_eq!(la.row(j), lb.row(j), "position {j}");
        }
        assert_ne!(la.row(4), lb.row(4));
    }

    #[test]
    fn out_of_vocabulary_token_is_an_error() {
        let mut s = ParamStore::<f64>::new();
        let cap = Captioner::new(
            &mut s,
            "caption",
            tiny(),
            4,
            vocab_len(),
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let mut c = caption(0, 1, Direction::Left, 0);
        c[3] = 500;
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(1, 4, vec![0.5, 0.5, 0.5, 0.5]));
        let p = cap.map_prefix(&mut g, &s, z, Mode::Eval);
        assert!(cap.caption_loss(&mut g, &s, &p, &[c], Mode::Eval).is_err());
    }

    #[test]
    fn caption_gradcheck_through_the_mapper() {
        let mut s = ParamStore::<f64>::new();
        let cap = Captioner::new(
            &mut s,
            "caption",
            tiny(),
            4,
            vocab_len(),
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let caps = vec![
            caption(1, 2, Direction::Down, 4),
            caption(0, 0, Direction::Right, 2),
        ];
        let z = Tensor::from_rows(&[
            unit(vec![1.0, 2.0, -1.0, 0.5]),
            unit(vec![0.2, -0.4, 0.1, 0.9]),
        ]);
        let ids: Vec<_> = s.ids().collect();
        let report = gradcheck_params(&mut s, &ids, 1e-6, 8, |st, g| {
            let zi = g.constant(z.clone());
            let p = cap.map_prefix(g, st, zi, Mode::Eval);
            cap.caption_loss(g, st, &p, &caps, Mode::Eval).unwrap()
        });
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn beam_of_one_is_greedy_and_output_is_terminated() {
        for seed in 0..4 {
            let mut s = ParamStore::<f64>::new();
            let cap = Captioner::new(
                &mut s,
                "caption",
                tiny(),
                4,
                vocab_len(),
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            let pv = cap.prefix_value(&s, &unit(vec![1.0, -1.0, 0.5, 0.25]));
            let beam = cap.beam_decode(&s, &pv, 1).unwrap();
            assert_eq!(beam, cap.greedy_decode(&s, &pv).unwrap());
            let wide = cap.beam_decode(&s, &pv, 3).unwrap();
            assert!(wide.last() == Some(&EOS) || wide.len() == CAPTION_LEN);
            assert!(cap.beam_decode(&s, &pv, 0).is_err());
        }
    }

    #[test]
    fn memorizes_a_single_pair() {
        let mut s = ParamStore::<f32>::new();
        let mut cfg = CaptionerConfig::default();
        cfg.mapper.dropout = 0.0;
        cfg.decoder.dropout = 0.0;
        let cap = Captioner::new(
            &mut s,
            "caption",
            cfg,
            32,
            vocab_len(),
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let target = caption(3, 4, Direction::TowardCenter, 13);
        let z: Vec<f32> = (0..32).map(|i| ((i as f32) * 0.37).sin() / 4.0).collect();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            &s,
        );
        let mut last = f32::INFINITY;
        for step in 0..500 {
            let mut g = Graph::new();
            let zi = g.constant(Tensor::from_vec(1, 32, z.clone()));
            let p = cap.map_prefix(&mut g, &s, zi, Mode::Train(NoiseKey::new(0, step)));
            let l = cap
                .caption_loss(
                    &mut g,
                    &s,
                    &p,
                    &[target.clone()],
                    Mode::Train(NoiseKey::new(0, step)),
                )
                .unwrap();
            last = g.value(l).item();
            g.backward(l, &mut s);
            opt.step(&mut s).unwrap();
        }
        assert!(last < 0.05, "{last}");
        let pv = cap.prefix_value(&s, &z);
        let decoded = cap.beam_decode(&s, &pv, 3).unwrap();
        let end = target.iter().position(|&t| t == EOS).unwrap();
        assert_eq!(decoded, target[..=end].to_vec());
        assert_eq!(parse_caption(&decoded), parse_caption(&target));
    }
}
