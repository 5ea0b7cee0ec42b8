//! Fusing position embeddings into attention: the query/key projections of
//! position embeddings, the three fused score formulas (add to q/k,
//! elementwise-scale q/k, or add a position-only bias term), and the
//! scaled-dot-product attention every model here shares.

use rand_chacha::ChaCha8Rng;

use crate::encoder::causal_mask;
use crate::error::{Result, SeqPeError};
use crate::numerics::rng::fill_normal;
use crate::numerics::tensor::Tensor;
use crate::numerics::ParamSet;

/// How position embeddings enter the attention score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseMode {
    /// `A[i,j] = (q_i + e_q_i) . (k_j + e_k_j)`
    Sum,
    /// `A[i,j] = (q_i * e_q_i) . (k_j * e_k_j)` (elementwise product)
    Mul,
    /// `A[i,j] = q_i . k_j + e_q_i . e_k_j`
    Bias,
}

/// Learned projections taking position embeddings to their query-side and
/// key-side forms.  One instance is shared across all layers of a model
/// (the language-model default), so gradients from every layer accumulate
/// on the same two matrices.
pub struct PeProjection {
    pub wq: Tensor,
    pub wk: Tensor,
}

impl PeProjection {
    /// Registers the two `[d, d]` projection matrices, N(0, 0.02) init.
    pub fn new(d: usize, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        if d == 0 {
            return Err(SeqPeError::ConfigInvalid(
                "projection width must be positive".into(),
            ));
        }
        let mut data = vec![0.0; d * d];
        fill_normal(rng, 0.02, &mut data);
        let wq = params.register("pe_proj.query", Tensor::leaf(&[d, d], data.clone())?, false)?;
        fill_normal(rng, 0.02, &mut data);
        let wk = params.register("pe_proj.key", Tensor::leaf(&[d, d], data)?, false)?;
        Ok(PeProjection { wq, wk })
    }

    /// Wraps existing matrices (checkpoint load path).
    pub fn from_weights(wq: Tensor, wk: Tensor) -> Result<Self> {
        let (sq, sk) = (wq.shape(), wk.shape());
        if sq.len() != 2 || sq[0] != sq[1] || sq != sk {
            return Err(SeqPeError::ShapeMismatch {
                op: "pe_projection",
                lhs: sq,
                rhs: sk,
            });
        }
        Ok(PeProjection { wq, wk })
    }

    /// Projects embeddings `[.., L, d]` to `(E_q, E_k)` of the same shape.
    pub fn project(&self, e: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((e.matmul(&self.wq)?, e.matmul(&self.wk)?))
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    // A rank-2 embedding slab may serve every slice of a batched input.
    let suffix_ok = sb.len() == 2 && sa.len() > 2 && sa[sa.len() - 2..] == sb[..];
    if sa != sb && !suffix_ok {
        return Err(SeqPeError::ShapeMismatch {
            op,
            lhs: sa,
            rhs: sb,
        });
    }
    Ok(())
}

/// Raw (unscaled, unmasked) attention scores with position embeddings
/// fused per `mode`.  All of `q`, `k`, `e_q`, `e_k` are `[.., L, d_head]`
/// slices split from the full width the same way; the result is
/// `[.., L, L]`.
pub fn attn_scores(
    q: &Tensor,
    k: &Tensor,
    e_q: &Tensor,
    e_k: &Tensor,
    mode: FuseMode,
) -> Result<Tensor> {
    check_same_shape("attn_scores", q, e_q)?;
    check_same_shape("attn_scores", k, e_k)?;
    match mode {
        FuseMode::Sum => q.add(e_q)?.matmul_nt(&k.add(e_k)?),
        FuseMode::Mul => q.mul(e_q)?.matmul_nt(&k.mul(e_k)?),
        FuseMode::Bias => q.matmul_nt(k)?.add(&e_q.matmul_nt(e_k)?),
    }
}

/// Scaled-dot-product attention over raw scores.
///
/// Any bias slab (the linear-distance penalty) is added to `A` first, the
/// causal mask sets future keys to -inf, the result is scaled by
/// `1/sqrt(d_head)` (taken from `V`'s width) and softmaxed per query row,
/// then applied to `V`.  Shapes: `A` is `[.., L, L]`, `V` is
/// `[.., L, d_head]`; a 2-D bias broadcasts across leading dimensions.
pub fn attention(a: &Tensor, v: &Tensor, causal: bool, bias: Option<&Tensor>) -> Result<Tensor> {
    let a_shape = a.shape();
    let v_shape = v.shape();
    let l = a_shape[a_shape.len() - 1];
    if a_shape.len() < 2 || a_shape[a_shape.len() - 2] != l {
        return Err(SeqPeError::BadShape {
            op: "attention",
            shape: a_shape,
            reason: "scores must be square per batch slice".into(),
        });
    }
    if v_shape.len() < 2 || v_shape[v_shape.len() - 2] != l {
        return Err(SeqPeError::ShapeMismatch {
            op: "attention",
            lhs: a_shape,
            rhs: v_shape,
        });
    }
    let d_head = v_shape[v_shape.len() - 1];
    let mut scores = match bias {
        Some(b) => a.add(b)?,
        None => a.clone(),
    };
    if causal {
        scores = scores.add(&causal_mask(l))?;
    }
    let weights = scores.mul_scalar(1.0 / (d_head as f64).sqrt()).softmax_last();
    weights.matmul(v)
}
