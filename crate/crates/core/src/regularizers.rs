//! The two embedding-geometry training objectives and their batch
//! machinery: a contrastive loss aligning embedding similarity with
//! position distance, a distillation loss teaching shifted (out-of-range)
//! positions to mimic in-range similarity structure, the random start-shift
//! applied to main-task batches, and the batch-size floor that keeps the
//! contrastive set informative at large position ranges.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::SeqPeEncoder;
use crate::error::{Result, SeqPeError};
use crate::numerics::tensor::{no_grad, Tensor};
use crate::positions::{ContrastiveSet, PosSeqConfig, Position, Region};

/// Mixing weights for the two regularizers in the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the contrastive distance-alignment loss.
    pub alpha: f64,
    /// Weight of the shifted-position distillation loss.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || !self.alpha.is_finite() || !self.beta.is_finite()
        {
            return Err(SeqPeError::ConfigInvalid(format!(
                "loss weights must be finite and non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// One distillation batch: teacher positions inside the training region
/// and the shared shift producing their student counterparts.
#[derive(Clone, Debug)]
pub struct DistillBatch {
    pub teachers: Vec<Position>,
    pub shift: Vec<i64>,
    /// Heads the embeddings are split into before building similarity
    /// matrices.
    pub head_count: usize,
}

/// Contrastive loss from already-computed embeddings: cross-entropy of the
/// softmax over dot products `e_pivot . e_candidate` with the positive
/// candidate as the target class.
pub fn contrastive_from_embeddings(
    pivot: &Tensor,
    candidates: &Tensor,
    positive: usize,
) -> Result<Tensor> {
    let cshape = candidates.shape();
    if cshape.len() != 2 {
        return Err(SeqPeError::BadShape {
            op: "contrastive_loss",
            shape: cshape,
            reason: "candidate embeddings must be [m, d]".into(),
        });
    }
    let (m, d) = (cshape[0], cshape[1]);
    if positive >= m {
        return Err(SeqPeError::TokenOutOfRange {
            what: "contrastive positive",
            id: positive,
            rows: m,
        });
    }
    let pivot_row = if pivot.shape() == vec![d] {
        pivot.reshape(&[1, d])?
    } else if pivot.shape() == vec![1, d] {
        pivot.clone()
    } else {
        return Err(SeqPeError::ShapeMismatch {
            op: "contrastive_loss",
            lhs: pivot.shape(),
            rhs: cshape,
        });
    };
    let dots = pivot_row.matmul_nt(candidates)?; // [1, m]
    Ok(dots.log_softmax_last().pick_last(&[positive])?.neg())
}

/// Contrastive loss for a sampled candidate set, encoding the pivot and
/// all candidates in one batch so gradients reach the encoder tables.
pub fn contrastive_loss(
    encoder: &SeqPeEncoder,
    pivot: &[i64],
    set: &ContrastiveSet,
) -> Result<Tensor> {
    if set.positive >= set.candidates.len() {
        return Err(SeqPeError::TokenOutOfRange {
            what: "contrastive positive",
            id: set.positive,
            rows: set.candidates.len(),
        });
    }
    let mut all = Vec::with_capacity(set.candidates.len() + 1);
    all.push(pivot.to_vec());
    all.extend(set.candidates.iter().cloned());
    let embs = encoder.encode_batch(&all)?;
    let pivot_emb = embs.select_rows(&[0])?;
    let cand_ids: Vec<usize> = (1..=set.candidates.len()).collect();
    let cand_embs = embs.select_rows(&cand_ids)?;
    contrastive_from_embeddings(&pivot_emb, &cand_embs, set.positive)
}

/// Row-stochastic similarity: softmax over dot products of every row with
/// every row (the self pair included).
pub fn similarity_matrix(embeddings: &Tensor) -> Result<Tensor> {
    let shape = embeddings.shape();
    if shape.len() != 2 {
        return Err(SeqPeError::BadShape {
            op: "similarity_matrix",
            shape,
            reason: "expected [m, d_head] embeddings".into(),
        });
    }
    Ok(embeddings.matmul_nt(embeddings)?.softmax_last())
}

/// Distillation loss from embeddings: per head, the teacher similarity
/// matrix (treated as a constant) is matched by the student similarity
/// matrix under forward KL; the result is averaged over rows and heads.
/// Gradients flow only through the student side.
pub fn distill_from_embeddings(
    teacher: &Tensor,
    student: &Tensor,
    head_count: usize,
) -> Result<Tensor> {
    let tshape = teacher.shape();
    if tshape != student.shape() || tshape.len() != 2 {
        return Err(SeqPeError::ShapeMismatch {
            op: "distill_loss",
            lhs: tshape,
            rhs: student.shape(),
        });
    }
    let (m, d) = (tshape[0], tshape[1]);
    if m < 2 {
        return Err(SeqPeError::ConfigInvalid(format!(
            "distillation needs at least 2 positions, got {m}"
        )));
    }
    if head_count == 0 || d % head_count != 0 {
        return Err(SeqPeError::UnevenSplit {
            what: "distillation embedding width over heads",
            width: d,
            parts: head_count,
        });
    }
    let dh = d / head_count;
    let teacher = teacher.detach();
    let mut total: Option<Tensor> = None;
    for h in 0..head_count {
        let t_h = teacher.narrow_last(h * dh, dh)?;
        let s_h = student.narrow_last(h * dh, dh)?;
        let t_dots = no_grad(|| t_h.matmul_nt(&t_h))?;
        let p = t_dots.softmax_last();
        let log_p = t_dots.log_softmax_last();
        let log_s = s_h.matmul_nt(&s_h)?.log_softmax_last();
        let term = p.mul(&log_p.sub(&log_s)?)?.sum_all();
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total
        .expect("head_count >= 1")
        .mul_scalar(1.0 / (m * head_count) as f64))
}

/// Distillation loss for a sampled batch: teachers are encoded without
/// gradient tracking, students (`teacher + shift`) with it.
pub fn ood_distill_loss(encoder: &SeqPeEncoder, batch: &DistillBatch) -> Result<Tensor> {
    let teacher = no_grad(|| encoder.encode_batch(&batch.teachers))?;
    let students: Vec<Position> = batch
        .teachers
        .iter()
        .map(|p| p.iter().zip(&batch.shift).map(|(c, z)| c + z).collect())
        .collect();
    let student = encoder.encode_batch(&students)?;
    distill_from_embeddings(&teacher, &student, batch.head_count)
}

/// With probability `prob`, shifts every position in the batch by one
/// shared offset drawn like a distillation shift; otherwise returns the
/// positions unchanged.  The applied shift (if any) is returned for
/// logging.
pub fn apply_random_shift(
    cfg: &PosSeqConfig,
    region: &Region,
    positions: &[Position],
    prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Position>, Option<Vec<i64>>)> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(SeqPeError::ConfigInvalid(format!(
            "shift probability must lie in [0, 1], got {prob}"
        )));
    }
    if prob > 0.0 && rng.gen_range(0.0..1.0) < prob {
        let z = crate::positions::sample_shift(cfg, region, rng)?;
        let shifted = positions
            .iter()
            .map(|p| p.iter().zip(&z).map(|(c, zi)| c + zi).collect())
            .collect();
        Ok((shifted, Some(z)))
    } else {
        Ok((positions.to_vec(), None))
    }
}

/// Smallest regularizer batch size that keeps candidate sets informative
/// over a maximum position range: `ceil(16 * l_max / 10000)`.
pub fn min_reg_batch_size(l_max: i64) -> usize {
    assert!(l_max >= 1, "position range must be positive");
    ((16 * l_max + 9999) / 10000) as usize
}
