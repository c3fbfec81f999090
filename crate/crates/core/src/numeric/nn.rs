//! Differentiable building blocks composed from [`Graph`] primitives.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// `x·W + bias` for `x[n×a]`, `W[a×b]`, `bias[b]`.
pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, bias)
}

/// Row-wise layer normalization with affine parameters.
pub fn layer_norm<T: Real>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
    let xhat = g.normalize_rows(x, eps);
    let y = g.mul_row(xhat, gamma)?;
    g.add_row(y, beta)
}

/// Inverted dropout. A no-op when `rng` is `None` or `p == 0`.
pub fn dropout<T: Real>(g: &mut Graph<T>, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    if p >= 1.0 {
        return Err(Error::Config(format!("dropout probability {p} must be < 1")));
    }
    let keep = T::of(1.0 / (1.0 - p));
    let shape = g.shape(x).to_vec();
    let mask = Tensor::from_fn(&shape, |_| {
        if rng.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    });
    let m = g.constant(mask);
    g.mul(x, m)
}

/// Projection weights of one attention layer, already bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Scaled dot-product self-attention over the rows of `x[n×h]` with
/// `num_heads` heads of width `h / num_heads`, no attention mask, followed by
/// the output projection.
pub fn multi_head_self_attention<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionVars,
    num_heads: usize,
) -> Result<Var> {
    let h = g.shape(p.wq)[1];
    if num_heads == 0 || !h.is_multiple_of(num_heads) {
        return Err(Error::Config(format!(
            "hidden size {h} is not divisible by {num_heads} heads"
        )));
    }
    let dh = h / num_heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let q = linear(g, x, p.wq, p.bq)?;
    let k = linear(g, x, p.wk, p.bk)?;
    let v = linear(g, x, p.wv, p.bv)?;
    let mut heads = Vec::with_capacity(num_heads);
    for hd in 0..num_heads {
        let (qh, kh, vh) = if num_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, hd * dh, dh)?,
                g.slice_cols(k, hd * dh, dh)?,
                g.slice_cols(v, hd * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = if num_heads == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    linear(g, cat, p.wo, p.bo)
}

/// One pre-LN transformer block, bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub attn: AttentionVars,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
}

/// `x + Drop(Attn(LN(x)))` then `x + Drop(FFN(LN(x)))` with a GELU FFN.
pub fn transformer_block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    b: &BlockVars,
    num_heads: usize,
    dropout_p: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let eps = T::of(LN_EPS);
    let n1 = layer_norm(g, x, b.ln1_g, b.ln1_b, eps)?;
    let a = multi_head_self_attention(g, n1, &b.attn, num_heads)?;
    let a = dropout(g, a, dropout_p, rng.as_deref_mut())?;
    let x = g.add(x, a)?;
    let n2 = layer_norm(g, x, b.ln2_g, b.ln2_b, eps)?;
    let f = linear(g, n2, b.ff1_w, b.ff1_b)?;
    let f = g.gelu(f);
    let f = linear(g, f, b.ff2_w, b.ff2_b)?;
    let f = dropout(g, f, dropout_p, rng)?;
    g.add(x, f)
}
