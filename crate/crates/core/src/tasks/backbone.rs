//! The transformer block shared by both task models: pre-norm attention
//! with the position-encoding method injected per head, then a pre-norm
//! GELU MLP at 4x width.  The same block serves causal language modeling
//! and bidirectional grid classification.

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SeqPeError};
use crate::integration::{attention, attn_scores};
use crate::numerics::rng::fill_normal;
use crate::numerics::tensor::Tensor;
use crate::numerics::ParamSet;
use crate::provider::PeAttn;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

fn linear(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<(Tensor, Tensor)> {
    let mut data = vec![0.0; rows * cols];
    fill_normal(rng, INIT_STD, &mut data);
    let w = params.register(&format!("{name}.weight"), Tensor::leaf(&[rows, cols], data)?, false)?;
    let b = params.register(&format!("{name}.bias"), Tensor::leaf(&[cols], vec![0.0; cols])?, false)?;
    Ok((w, b))
}

fn norm_pair(params: &mut ParamSet, name: &str, d: usize) -> Result<(Tensor, Tensor)> {
    let gain = params.register(&format!("{name}.gain"), Tensor::leaf(&[d], vec![1.0; d])?, false)?;
    let bias = params.register(&format!("{name}.bias"), Tensor::leaf(&[d], vec![0.0; d])?, false)?;
    Ok((gain, bias))
}

/// One pre-norm attention + MLP block.
pub struct TransformerBlock {
    heads: usize,
    attn_norm: (Tensor, Tensor),
    wq: (Tensor, Tensor),
    wk: (Tensor, Tensor),
    wv: (Tensor, Tensor),
    wo: (Tensor, Tensor),
    mlp_norm: (Tensor, Tensor),
    expand: (Tensor, Tensor),
    project: (Tensor, Tensor),
}

impl TransformerBlock {
    /// Registers parameters under `{prefix}.attn.*`, `{prefix}.mlp.*` etc.
    pub fn new(
        prefix: &str,
        d: usize,
        heads: usize,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(SeqPeError::UnevenSplit {
                what: "block width over heads",
                width: d,
                parts: heads,
            });
        }
        Ok(TransformerBlock {
            heads,
            attn_norm: norm_pair(params, &format!("{prefix}.attn_norm"), d)?,
            wq: linear(params, rng, &format!("{prefix}.attn.query"), d, d)?,
            wk: linear(params, rng, &format!("{prefix}.attn.key"), d, d)?,
            wv: linear(params, rng, &format!("{prefix}.attn.value"), d, d)?,
            wo: linear(params, rng, &format!("{prefix}.attn.output"), d, d)?,
            mlp_norm: norm_pair(params, &format!("{prefix}.mlp_norm"), d)?,
            expand: linear(params, rng, &format!("{prefix}.mlp.expand"), d, 4 * d)?,
            project: linear(params, rng, &format!("{prefix}.mlp.project"), 4 * d, d)?,
        })
    }

    /// `x` is `[.., L, d]`; the position-encoding application is shared by
    /// every head's score computation.
    pub fn forward(&self, x: &Tensor, pe: &PeAttn, causal: bool) -> Result<Tensor> {
        let d = *x.shape().last().unwrap();
        let dh = d / self.heads;
        let normed = x.layer_norm(&self.attn_norm.0, &self.attn_norm.1, LN_EPS)?;
        let q = normed.matmul(&self.wq.0)?.add(&self.wq.1)?;
        let k = normed.matmul(&self.wk.0)?.add(&self.wk.1)?;
        let v = normed.matmul(&self.wv.0)?.add(&self.wv.1)?;
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow_last(h * dh, dh)?;
            let kh = k.narrow_last(h * dh, dh)?;
            let vh = v.narrow_last(h * dh, dh)?;
            let (scores, bias) = match pe {
                PeAttn::Plain => (qh.matmul_nt(&kh)?, None),
                PeAttn::Fused { fuse, e_q, e_k } => {
                    let eqh = e_q.narrow_last(h * dh, dh)?;
                    let ekh = e_k.narrow_last(h * dh, dh)?;
                    (attn_scores(&qh, &kh, &eqh, &ekh, *fuse)?, None)
                }
                PeAttn::Rotary(map) => {
                    let qr = map.apply(&qh)?;
                    let kr = map.apply(&kh)?;
                    (qr.matmul_nt(&kr)?, None)
                }
                PeAttn::BiasPerHead(per_head) => {
                    (qh.matmul_nt(&kh)?, Some(&per_head[h]))
                }
            };
            head_outs.push(attention(&scores, &vh, causal, bias)?);
        }
        let merged = Tensor::concat_last(&head_outs)?;
        let attn_out = merged.matmul(&self.wo.0)?.add(&self.wo.1)?;
        let x = x.add(&attn_out)?;
        let normed = x.layer_norm(&self.mlp_norm.0, &self.mlp_norm.1, LN_EPS)?;
        let widened = normed.matmul(&self.expand.0)?.add(&self.expand.1)?.gelu();
        let mlp_out = widened.matmul(&self.project.0)?.add(&self.project.1)?;
        x.add(&mlp_out)
    }
}

/// Final layer norm + linear readout head, shared by both models.
pub struct ReadoutHead {
    norm: (Tensor, Tensor),
    head: (Tensor, Tensor),
}

impl ReadoutHead {
    pub fn new(
        d: usize,
        out: usize,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(ReadoutHead {
            norm: norm_pair(params, "out_norm", d)?,
            head: linear(params, rng, "head", d, out)?,
        })
    }

    /// Normalizes `x` and projects to logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = x.layer_norm(&self.norm.0, &self.norm.1, LN_EPS)?;
        normed.matmul(&self.head.0)?.add(&self.head.1)
    }

    /// Layer norm only (for pooling before the projection).
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.norm.0, &self.norm.1, LN_EPS)
    }

    /// Linear projection only.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.head.0)?.add(&self.head.1)
    }
}

/// Mean next-token / class cross-entropy from row logits.
/// `logits` is `[rows, classes]`, `targets` one class id per row.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(SeqPeError::BadShape {
            op: "cross_entropy",
            shape,
            reason: format!("expected one row per target ({} targets)", targets.len()),
        });
    }
    Ok(logits
        .log_softmax_last()
        .pick_last(targets)?
        .mean_all()
        .neg())
}
