//! Parameterized building blocks: affine maps, MLPs, layer norm and a
//! pre-norm self-attention sequence encoder.

use rand::Rng;

use super::{Graph, Mode, NodeId, ParamId, ParamStore, Real, SeqLayout, Tensor};
use crate::error::{ClaspError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Gelu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: NodeId) -> NodeId {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.register_kaiming(format!("{name}.w"), fan_in, fan_out, rng);
        let b = Some(store.register_zeros(format!("{name}.b"), 1, fan_out));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn zeroed<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.register_zeros(format!("{name}.w"), fan_in, fan_out);
        let b = Some(store.register_zeros(format!("{name}.b"), 1, fan_out));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn without_bias<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.register_kaiming(format!("{name}.w"), fan_in, fan_out, rng);
        Self {
            w,
            b: None,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Affine layers with `activation` between them and none after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes` lists the input width followed by every layer's output width.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(ClaspError::Config(format!(
                "mlp `{name}` needs at least one layer, got sizes {sizes:?}"
            )));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(Self { layers, activation })
    }

    /// Same as [`Mlp::new`] but the final layer starts at exactly zero.
    pub fn new_zero_last<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(ClaspError::Config(format!(
                "mlp `{name}` needs at least one layer, got sizes {sizes:?}"
            )));
        }
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let lname = format!("{name}.{i}");
                if i + 1 == n {
                    Linear::zeroed(store, &lname, w[0], w[1])
                } else {
                    Linear::new(store, &lname, w[0], w[1], rng)
                }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i != last {
                h = self.activation.apply(g, h);
            }
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.register_filled(format!("{name}.gain"), 1, width, T::one()),
            bias: store.register_zeros(format!("{name}.bias"), 1, width),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Standard sinusoidal position table, `len x d`.
pub fn sinusoidal_positions<T: Real>(len: usize, d: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            t.data[pos * d + i] = T::c(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// Sinusoidal positions tiled over `n_seq` stacked sequences of length `len`.
pub fn tiled_positions<T: Real>(n_seq: usize, len: usize, d: usize) -> Tensor<T> {
    let one = sinusoidal_positions::<T>(len, d);
    let mut data = Vec::with_capacity(n_seq * len * d);
    for _ in 0..n_seq {
        data.extend_from_slice(&one.data);
    }
    Tensor::from_vec(n_seq * len, d, data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeqEncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_width: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Pre-norm transformer encoder stack with optional learned `[CLS]` vector.
#[derive(Clone, Debug)]
pub struct SeqEncoder {
    pub config: SeqEncoderConfig,
    pub name: String,
    cls: Option<ParamId>,
    layers: Vec<EncoderLayer>,
    ln_final: LayerNorm,
}

impl SeqEncoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        config: SeqEncoderConfig,
        with_cls: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let SeqEncoderConfig {
            d_model: d,
            n_heads,
            ff_width,
            ..
        } = config;
        if n_heads == 0 || d % n_heads != 0 {
            return Err(ClaspError::Config(format!(
                "d_model {d} is not divisible by {n_heads} heads"
            )));
        }
        let cls = with_cls.then(|| store.register_normal(format!("{name}.cls"), 1, d, 0.5, rng));
        let layers = (0..config.n_layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                EncoderLayer {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d),
                    wq: Linear::new(store, &format!("{p}.wq"), d, d, rng),
                    // A key bias shifts every score in a row equally; softmax ignores it.
                    wk: Linear::without_bias(store, &format!("{p}.wk"), d, d, rng),
                    wv: Linear::new(store, &format!("{p}.wv"), d, d, rng),
                    wo: Linear::new(store, &format!("{p}.wo"), d, d, rng),
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d),
                    ff_in: Linear::new(store, &format!("{p}.ff_in"), d, ff_width, rng),
                    ff_out: Linear::new(store, &format!("{p}.ff_out"), ff_width, d, rng),
                }
            })
            .collect();
        let ln_final = LayerNorm::new(store, &format!("{name}.ln_final"), d);
        Ok(Self {
            config,
            name: name.to_string(),
            cls,
            layers,
            ln_final,
        })
    }

    fn dropout<T: Real>(&self, g: &mut Graph<T>, x: NodeId, mode: Mode, site: &str) -> NodeId {
        match mode {
            Mode::Train(key) if self.config.dropout > 0.0 => {
                let n = g.value(x).len();
                let mask =
                    key.dropout_mask(&format!("{}.{site}", self.name), n, self.config.dropout);
                g.mul_const(x, mask)
            }
            _ => x,
        }
    }

    /// Runs the layer stack over stacked sequences (no positions added here).
    pub fn forward_rows<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        layout: &SeqLayout,
        causal: bool,
        mode: Mode,
    ) -> NodeId {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let a_in = layer.ln_attn.forward(g, store, h);
            let q = layer.wq.forward(g, store, a_in);
            let k = layer.wk.forward(g, store, a_in);
            let v = layer.wv.forward(g, store, a_in);
            let att = g.attention(q, k, v, layout, causal, self.config.n_heads);
            let att = layer.wo.forward(g, store, att);
            let att = self.dropout(g, att, mode, &format!("l{i}.attn"));
            h = g.add(h, att);

            let f_in = layer.ln_ff.forward(g, store, h);
            let f = layer.ff_in.forward(g, store, f_in);
            let f = g.gelu(f);
            let f = layer.ff_out.forward(g, store, f);
            let f = self.dropout(g, f, mode, &format!("l{i}.ff"));
            h = g.add(h, f);
        }
        self.ln_final.forward(g, store, h)
    }

    /// Prepends `[CLS]`, adds sinusoidal positions, encodes, and returns the
    /// `[CLS]` output row of every sequence (`n_seq x d_model`).
    ///
    /// `x` holds `n_seq * steps` stacked rows; `valid` marks real steps.
    pub fn encode_cls<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        n_seq: usize,
        steps: usize,
        valid: &[bool],
        mode: Mode,
    ) -> NodeId {
        let cls_id = self.cls.expect("encoder built without [CLS]");
        let d = self.config.d_model;
        assert_eq!(g.shape(x), (n_seq * steps, d), "encode_cls input shape");
        assert_eq!(valid.len(), n_seq * steps);
        let cls = g.param(store, cls_id);
        let len = steps + 1;
        let mut map = Vec::with_capacity(n_seq * len);
        let mut mask = Vec::with_capacity(n_seq * len);
        for s in 0..n_seq {
            map.push(Some((0, 0)));
            mask.push(true);
            for t in 0..steps {
                map.push(Some((1, s * steps + t)));
                mask.push(valid[s * steps + t]);
            }
        }
        let rows = g.gather_rows(&[cls, x], map);
        let pos = g.constant(tiled_positions(n_seq, len, d));
        let rows = g.add(rows, pos);
        let layout = SeqLayout::new(n_seq, len, mask);
        let out = self.forward_rows(g, store, rows, &layout, false, mode);
        let cls_rows = (0..n_seq).map(|s| Some((0, s * len))).collect();
        g.gather_rows(&[out], cls_rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::gradcheck::{gradcheck, DEFAULT_STEP};
    use crate::substrate::NoiseKey;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn mlp_rejects_empty_layer_list() {
        let mut s = ParamStore::<f64>::new();
        assert!(Mlp::new(&mut s, "m", &[4], Activation::Gelu, &mut rng()).is_err());
        assert!(Mlp::new(&mut s, "m2", &[], Activation::Gelu, &mut rng()).is_err());
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let mut s = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut s, "m", &[4, 4], Activation::Gelu, &mut rng()).unwrap();
        let w = s.value_mut(mlp.layers[0].w);
        for r in 0..4 {
            for c in 0..4 {
                w.data[r * 4 + c] = if r == c { 1.0 } else { 0.0 };
            }
        }
        let x = Tensor::from_vec(2, 4, vec![0.1, -2.0, 3.5, 0.0, 1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let y = mlp.forward(&mut g, &s, xi);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn mlp_output_shape_follows_batch() {
        let mut s = ParamStore::<f32>::new();
        let mlp = Mlp::new(&mut s, "m", &[3, 7, 5], Activation::Tanh, &mut rng()).unwrap();
        for batch in [1, 4, 9] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros(batch, 3));
            let y = mlp.forward(&mut g, &s, x);
            assert_eq!(g.shape(y), (batch, 5));
        }
    }

    #[test]
    fn mlp_gradcheck_double_precision() {
        let mut s = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut s, "m", &[3, 6, 5, 2], Activation::Gelu, &mut rng()).unwrap();
        let x = Tensor::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.7).sin()).collect());
        let err = gradcheck(&mut s, DEFAULT_STEP, |s, g| {
            let xi = g.constant(x.clone());
            let y = mlp.forward(g, s, xi);
            let sq = g.square(y);
            g.sum(sq)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    fn small_encoder(s: &mut ParamStore<f64>, dropout: f64) -> SeqEncoder {
        let cfg = SeqEncoderConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ff_width: 12,
            dropout,
        };
        SeqEncoder::new(s, "enc", cfg, true, &mut rng()).unwrap()
    }

    fn steps(n: usize, seed: f64) -> Tensor<f64> {
        Tensor::from_vec(
            n,
            8,
            (0..n * 8)
                .map(|i| ((i as f64 + seed) * 0.37).sin())
                .collect(),
        )
    }

    fn cls_of(
        enc: &SeqEncoder,
        s: &ParamStore<f64>,
        x: &Tensor<f64>,
        valid: &[bool],
        mode: Mode,
    ) -> Vec<f64> {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let out = enc.encode_cls(&mut g, s, xi, 1, x.rows, valid, mode);
        g.value(out).data.clone()
    }

    #[test]
    fn head_divisibility_is_checked() {
        let mut s = ParamStore::<f64>::new();
        let cfg = SeqEncoderConfig {
            d_model: 10,
            n_layers: 1,
            n_heads: 3,
            ff_width: 4,
            dropout: 0.0,
        };
        assert!(SeqEncoder::new(&mut s, "e", cfg, true, &mut rng()).is_err());
    }

    #[test]
    fn swapping_timesteps_changes_cls_output() {
        let mut s = ParamStore::new();
        let enc = small_encoder(&mut s, 0.0);
        let x = steps(4, 0.0);
        let mut swapped = x.clone();
        swapped.row_mut(1).copy_from_slice(x.row(2));
        swapped.row_mut(2).copy_from_slice(x.row(1));
        let a = cls_of(&enc, &s, &x, &[true; 4], Mode::Eval);
        let b = cls_of(&enc, &s, &swapped, &[true; 4], Mode::Eval);
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6, "position-insensitive output");
    }

    #[test]
    fn masked_padding_leaves_cls_unchanged() {
        let mut s = ParamStore::new();
        let enc = small_encoder(&mut s, 0.0);
        let x = steps(3, 1.0);
        let mut padded = Tensor::zeros(6, 8);
        padded.data[..24].copy_from_slice(&x.data);
        padded.data[24..].iter_mut().for_each(|v| *v = 9.0);
        let a = cls_of(&enc, &s, &x, &[true; 3], Mode::Eval);
        let b = cls_of(
            &enc,
            &s,
            &padded,
            &[true, true, true, false, false, false],
            Mode::Eval,
        );
        assert_eq!(a, b);
    }

    #[test]
    fn eval_mode_is_deterministic_and_train_mode_uses_dropout() {
        let mut s = ParamStore::new();
        let enc = small_encoder(&mut s, 0.5);
        let x = steps(5, 2.0);
        let a = cls_of(&enc, &s, &x, &[true; 5], Mode::Eval);
        let b = cls_of(&enc, &s, &x, &[true; 5], Mode::Eval);
        assert_eq!(a, b);
        let t = cls_of(&enc, &s, &x, &[true; 5], Mode::Train(NoiseKey::new(1, 1)));
        assert_ne!(a, t);
    }

    #[test]
    fn encoder_gradcheck_with_pinned_dropout() {
        let mut s = ParamStore::new();
        let enc = small_encoder(&mut s, 0.2);
        let x = steps(5, 3.0);
        let valid = [true, true, true, true, false];
        let key = NoiseKey::new(4, 2);
        let ids: Vec<_> = s.ids().collect();
        let rep =
            crate::substrate::gradcheck_params(&mut s, &ids, DEFAULT_STEP, usize::MAX, |s, g| {
                let xi = g.constant(x.clone());
                let out = enc.encode_cls(g, s, xi, 1, 5, &valid, Mode::Train(key));
                let w = (0..8).map(|i| (i as f64 * 0.9).cos()).collect();
                g.weighted_sum(out, w)
            });
        assert!(rep.max_relative_error < 1e-4, "{rep:?}");
    }
}
