//! Global branch: depthwise downsampling, token flattening, multi-head
//! self-attention and a residual feed-forward network.
//!
//! No positional encoding is applied, so the attention stage is
//! equivariant under token permutations.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{dim_err, Result};
use crate::params::{Graph, Group, ParamId, ParamStore};
use crate::scalar::Scalar;

pub const FFN_EXPANSION: usize = 4;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub num_heads: usize,
    pub head_dim: usize,
    /// `[C, C]` each, applied as `x · W`.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    /// `[C, 4C]`, `[4C]`, `[4C, C]`, `[C]`.
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    /// Depthwise `[3, 3, 1, C]`.
    pub down_kernel: ParamId,
    /// Stride of the depthwise conv; 2 in the standard block.
    pub down_stride: usize,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl AttentionParams {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        group: Group,
        prefix: &str,
        channels: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 || channels % num_heads != 0 {
            return dim_err(
                "attention",
                format!("C={channels} not divisible into {num_heads} heads"),
            );
        }
        let c = channels;
        let hid = FFN_EXPANSION * c;
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(AttentionParams {
            num_heads,
            head_dim: c / num_heads,
            wq: store.kaiming(p("wq"), group, &[c, c], c, rng),
            wk: store.kaiming(p("wk"), group, &[c, c], c, rng),
            wv: store.kaiming(p("wv"), group, &[c, c], c, rng),
            wo: store.kaiming(p("wo"), group, &[c, c], c, rng),
            ffn_w1: store.kaiming(p("ffn_w1"), group, &[c, hid], c, rng),
            ffn_b1: store.zeros(p("ffn_b1"), group, &[hid]),
            ffn_w2: store.kaiming(p("ffn_w2"), group, &[hid, c], hid, rng),
            ffn_b2: store.zeros(p("ffn_b2"), group, &[c]),
            down_kernel: store.kaiming(p("down"), group, &[3, 3, 1, c], 9, rng),
            down_stride: 2,
            ln_gain: store.add(p("ln_gain"), group, crate::Tensor::ones(&[c])),
            ln_bias: store.zeros(p("ln_bias"), group, &[c]),
        })
    }

    pub fn channels(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

fn check_tokens<T: Scalar>(op: &'static str, x: &Var<'_, T>, p: &AttentionParams) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 2 || s[1] != p.channels() {
        return dim_err(
            op,
            format!("tokens {s:?} vs {} heads × {} dims", p.num_heads, p.head_dim),
        );
    }
    Ok((s[0], s[1]))
}

/// Per-head attention weights `softmax(Q_h K_hᵀ / √d)` as `[heads, T, T]`.
pub fn attention_weights<'t, T: Scalar>(
    g: &Graph<'t, T>,
    x: Var<'t, T>,
    p: &AttentionParams,
) -> Result<Var<'t, T>> {
    let (t, _) = check_tokens("multi_head_self_attention", &x, p)?;
    let (h, d) = (p.num_heads, p.head_dim);
    let q = x.matmul(g.param(p.wq))?.reshape(&[t, h, d])?.permute3([1, 0, 2])?;
    let kt = x.matmul(g.param(p.wk))?.reshape(&[t, h, d])?.permute3([1, 2, 0])?;
    let scale = T::one() / T::from_usize_lossy(d).sqrt();
    q.bmm(kt)?.scale(scale)?.softmax(2)
}

/// Heads of `softmax(Q Kᵀ/√d)·V`, concatenated and output-projected.
pub fn multi_head_self_attention<'t, T: Scalar>(
    g: &Graph<'t, T>,
    x: Var<'t, T>,
    p: &AttentionParams,
) -> Result<Var<'t, T>> {
    let (t, c) = check_tokens("multi_head_self_attention", &x, p)?;
    let (h, d) = (p.num_heads, p.head_dim);
    let heads = |w: ParamId| -> Result<Var<'t, T>> { x.matmul(g.param(w))?.reshape(&[t, h, d])?.permute3([1, 0, 2]) };
    let scale = T::one() / T::from_usize_lossy(d).sqrt();
    heads(p.wq)?
        .attention(heads(p.wk)?, heads(p.wv)?, scale)?
        .permute3([1, 0, 2])?
        .reshape(&[t, c])?
        .matmul(g.param(p.wo))
}

/// `x + W₂·relu(W₁·x + b₁) + b₂`.
pub fn feed_forward<'t, T: Scalar>(
    g: &Graph<'t, T>,
    x: Var<'t, T>,
    p: &AttentionParams,
) -> Result<Var<'t, T>> {
    check_tokens("feed_forward", &x, p)?;
    let hidden = x
        .matmul(g.param(p.ffn_w1))?
        .add_bias(g.param(p.ffn_b1))?
        .relu()?;
    let out = hidden.matmul(g.param(p.ffn_w2))?.add_bias(g.param(p.ffn_b2))?;
    x.add(out)
}

/// `S₁ = DWConv(F₀)`.
pub fn downsample<'t, T: Scalar>(
    g: &Graph<'t, T>,
    f0: Var<'t, T>,
    p: &AttentionParams,
) -> Result<Var<'t, T>> {
    let s = f0.shape();
    if s.len() != 3 {
        return dim_err("hybrid_encode", format!("expected [H,W,C], got {s:?}"));
    }
    if p.down_stride == 2 && (s[0] % 2 != 0 || s[1] % 2 != 0) {
        return dim_err("hybrid_encode", format!("odd extents {}×{}", s[0], s[1]));
    }
    f0.conv2d(g.param(p.down_kernel), p.down_stride, 1, s[2])
}

/// Tokens of `S₁` through pre-normalized residual attention, then the
/// feed-forward network, reshaped back onto the grid.
pub fn encode_tokens<'t, T: Scalar>(
    g: &Graph<'t, T>,
    s1: Var<'t, T>,
    p: &AttentionParams,
) -> Result<Var<'t, T>> {
    let s = s1.shape();
    let tokens = s1.reshape(&[s[0] * s[1], s[2]])?;
    let normed = tokens.layer_norm(g.param(p.ln_gain), g.param(p.ln_bias), LN_EPS)?;
    let attended = tokens.add(multi_head_self_attention(g, normed, p)?)?;
    feed_forward(g, attended, p)?.reshape(&s)
}

/// `F₃ = Reshape(FFN(Attn(Flatten(DWConv(F₀)))))`: `[H,W,C] → [H/2,W/2,C]`.
pub fn hybrid_encode<'t, T: Scalar>(
    g: &Graph<'t, T>,
    f0: Var<'t, T>,
    p: &AttentionParams,
) -> Result<Var<'t, T>> {
    let s1 = downsample(g, f0, p)?;
    encode_tokens(g, s1, p)
}
