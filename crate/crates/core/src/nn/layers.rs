use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use super::NnError;

/// `x * w + b` for `x[n,d_in]`, `w[d_in,d_out]`, `b[d_out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

pub fn layer_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var, NnError> {
    g.layer_norm(x, gain, bias)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        let weight = store.add_uniform(format!("{name}.weight"), vec![d_in, d_out], d_in, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), vec![d_out], d_in, rng)?;
        Ok(Self { weight, bias, d_in, d_out })
    }

    /// Applies to a matrix `[n,d_in]` or a vector `[d_in]` (returning `[d_out]`).
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        if g.shape(x).len() == 1 {
            let d = g.shape(x)[0];
            let row = g.reshape(x, vec![1, d])?;
            let y = linear(g, row, w, b)?;
            g.reshape(y, vec![self.d_out])
        } else {
            linear(g, x, w, b)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self, NnError> {
        let gain = store.add(format!("{name}.gain"), Tensor::vector(vec![1.0; d]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![d]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        layer_norm(g, x, gain, bias)
    }
}

/// Unmasked multi-head self-attention with separate Q/K/V/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        if heads == 0 || d_model % heads != 0 {
            return Err(NnError::IndivisibleHeads { d_model, heads });
        }
        Self::with_head_dim(store, name, d_model, heads, d_model / heads, rng)
    }

    /// Attention whose heads each project to `head_dim`, independent of `d_model`.
    pub fn with_head_dim(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        if heads == 0 || head_dim == 0 {
            return Err(NnError::IndivisibleHeads { d_model, heads });
        }
        let inner = heads * head_dim;
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d_model, inner, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d_model, inner, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d_model, inner, rng)?,
            output: Linear::new(store, &format!("{name}.output"), inner, d_model, rng)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        multi_head_self_attention(g, x, self.heads, self)
    }
}

/// Scaled dot-product attention per head over all tokens of `x[n,d]`,
/// concatenated and passed through the output projection.
pub fn multi_head_self_attention(
    g: &mut Graph,
    x: Var,
    heads: usize,
    params: &MultiHeadAttention,
) -> Result<Var, NnError> {
    let &[_, d] = g.shape(x) else {
        return Err(NnError::Shape(format!("attention input {:?}", g.shape(x))));
    };
    let inner = params.query.d_out;
    if heads == 0 || inner % heads != 0 {
        return Err(NnError::IndivisibleHeads { d_model: d, heads });
    }
    let dh = inner / heads;
    let q = params.query.forward(g, x)?;
    let k = params.key.forward(g, x)?;
    let v = params.value.forward(g, x)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores);
        outs.push(g.matmul(weights, vh)?);
    }
    let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    params.output.forward(g, joined)
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d_model, d_ff, rng)?,
            down: Linear::new(store, &format!("{name}.down"), d_ff, d_model, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm encoder block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        head_dim: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        Ok(Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d_model)?,
            attn: MultiHeadAttention::with_head_dim(store, &format!("{name}.attn"), d_model, heads, head_dim, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), d_model)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, d_ff, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let h = self.attn_norm.forward(g, x)?;
        let h = self.attn.forward(g, h)?;
        let x = g.add(x, h)?;
        let h = self.ff_norm.forward(g, x)?;
        let h = self.ff.forward(g, h)?;
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add_uniform(format!("{name}.weight"), vec![c_out, c_in, kernel, kernel], fan_in, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), vec![c_out], fan_in, rng)?;
        Ok(Self { weight, bias, stride, pad })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}
