//! Tiny causal language model: token embeddings, the shared transformer
//! backbone with a pluggable position-encoding method, and mean
//! next-token cross-entropy.

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SeqPeError};
use crate::numerics::rng::fill_normal;
use crate::numerics::tensor::Tensor;
use crate::numerics::ParamSet;
use crate::positions::Position;
use crate::provider::PeProvider;
use crate::tasks::backbone::{cross_entropy, ReadoutHead, TransformerBlock};

/// Language-model shape.
#[derive(Clone, Copy, Debug)]
pub struct TinyLmConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Context length used for training batches.
    pub l_train: usize,
}

impl Default for TinyLmConfig {
    fn default() -> Self {
        TinyLmConfig {
            vocab: 128,
            d_model: 64,
            layers: 2,
            heads: 4,
            l_train: 64,
        }
    }
}

impl TinyLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(SeqPeError::ConfigInvalid(format!(
                "vocabulary needs at least 2 tokens, got {}",
                self.vocab
            )));
        }
        if self.layers == 0 || self.l_train < 2 {
            return Err(SeqPeError::ConfigInvalid(format!(
                "model needs layers >= 1 and train context >= 2, got {} / {}",
                self.layers, self.l_train
            )));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(SeqPeError::UnevenSplit {
                what: "model width over heads",
                width: self.d_model,
                parts: self.heads,
            });
        }
        Ok(())
    }
}

/// The model: embeddings, blocks, readout, and its position-encoding
/// method.
pub struct TinyLm {
    pub cfg: TinyLmConfig,
    embed: Tensor,
    blocks: Vec<TransformerBlock>,
    readout: ReadoutHead,
    provider: PeProvider,
}

impl TinyLm {
    /// Builds the model around an already-constructed position-encoding
    /// provider (whose parameters live in the same set).
    pub fn new(
        cfg: TinyLmConfig,
        provider: PeProvider,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut data = vec![0.0; cfg.vocab * cfg.d_model];
        fill_normal(rng, 0.02, &mut data);
        let embed = params.register(
            "embed.weight",
            Tensor::leaf(&[cfg.vocab, cfg.d_model], data)?,
            false,
        )?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            blocks.push(TransformerBlock::new(
                &format!("layer{i}"),
                cfg.d_model,
                cfg.heads,
                params,
                rng,
            )?);
        }
        let readout = ReadoutHead::new(cfg.d_model, cfg.vocab, params, rng)?;
        Ok(TinyLm {
            cfg,
            embed,
            blocks,
            readout,
            provider,
        })
    }

    pub fn provider(&self) -> &PeProvider {
        &self.provider
    }

    pub fn provider_mut(&mut self) -> &mut PeProvider {
        &mut self.provider
    }

    /// Logits `[batch, len, vocab]` for same-length token rows at the
    /// given (shared) position window.
    pub fn forward_logits(&self, tokens: &[Vec<usize>], positions: &[Position]) -> Result<Tensor> {
        let batch = tokens.len();
        let len = positions.len();
        if batch == 0 || len == 0 {
            return Err(SeqPeError::BadShape {
                op: "lm_forward",
                shape: vec![batch, len],
                reason: "empty batch or window".into(),
            });
        }
        let mut flat_ids = Vec::with_capacity(batch * len);
        for row in tokens {
            if row.len() != len {
                return Err(SeqPeError::BadShape {
                    op: "lm_forward",
                    shape: vec![row.len()],
                    reason: format!("token row length != {len} positions"),
                });
            }
            for &t in row {
                if t >= self.cfg.vocab {
                    return Err(SeqPeError::TokenOutOfRange {
                        what: "lm token",
                        id: t,
                        rows: self.cfg.vocab,
                    });
                }
                flat_ids.push(t);
            }
        }
        let pe = self.provider.forward(positions)?;
        let mut x = self
            .embed
            .select_rows(&flat_ids)?
            .reshape(&[batch, len, self.cfg.d_model])?;
        if let Some(rows) = &pe.input_rows {
            x = x.add(rows)?;
        }
        for block in &self.blocks {
            x = block.forward(&x, &pe.attn, true)?;
        }
        self.readout.forward(&x)
    }

    /// Mean next-token cross-entropy over every predicted slot.
    pub fn forward_loss(&self, tokens: &[Vec<usize>], positions: &[Position]) -> Result<Tensor> {
        if positions.len() < 2 {
            return Err(SeqPeError::BadShape {
                op: "lm_forward",
                shape: vec![positions.len()],
                reason: "need at least 2 tokens to predict one".into(),
            });
        }
        let batch = tokens.len();
        let len = positions.len();
        let logits = self.forward_logits(tokens, positions)?;
        let flat = logits.reshape(&[batch * len, self.cfg.vocab])?;
        let mut pred_rows = Vec::with_capacity(batch * (len - 1));
        let mut targets = Vec::with_capacity(batch * (len - 1));
        for (b, row) in tokens.iter().enumerate() {
            for t in 0..len - 1 {
                pred_rows.push(b * len + t);
                targets.push(row[t + 1]);
            }
        }
        cross_entropy(&flat.select_rows(&pred_rows)?, &targets)
    }

    /// Enforces the training context limit (evaluation may exceed it).
    pub fn check_train_context(&self, len: usize) -> Result<()> {
        if len > self.cfg.l_train {
            return Err(SeqPeError::ContextTooLong {
                scheme: "training batch",
                len,
                max: self.cfg.l_train,
            });
        }
        Ok(())
    }
}

/// The default zero-based window for a context of `len` tokens.
pub fn base_window(len: usize) -> Vec<Position> {
    (0..len as i64).map(|i| vec![i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{streams, StreamRng};
    use crate::numerics::tensor::no_grad;
    use crate::provider::{PeMode, ProviderConfig};

    fn rng(seed: u64) -> ChaCha8Rng {
        StreamRng::new(seed).stream(streams::INIT)
    }

    fn nope_lm(seed: u64) -> (TinyLm, ParamSet) {
        let cfg = TinyLmConfig {
            vocab: 16,
            d_model: 16,
            layers: 1,
            heads: 2,
            l_train: 8,
        };
        let mut params = ParamSet::new();
        let mut r = rng(seed);
        let provider = PeProvider::new(
            ProviderConfig::new(PeMode::Nope, 16, 2, vec![8]),
            &mut params,
            &mut r,
        )
        .unwrap();
        let lm = TinyLm::new(cfg, provider, &mut params, &mut r).unwrap();
        (lm, params)
    }

    #[test]
    fn untrained_loss_sits_at_uniform_entropy() {
        let cfg = TinyLmConfig::default();
        let mut params = ParamSet::new();
        let mut r = rng(1);
        let provider = PeProvider::new(
            ProviderConfig::new(PeMode::Alibi, cfg.d_model, cfg.heads, vec![cfg.l_train as i64]),
            &mut params,
            &mut r,
        )
        .unwrap();
        let lm = TinyLm::new(cfg, provider, &mut params, &mut r).unwrap();
        let mut dr = StreamRng::new(2).stream(streams::DATA);
        let tokens: Vec<Vec<usize>> = (0..4)
            .map(|_| {
                (0..cfg.l_train)
                    .map(|_| rand::Rng::gen_range(&mut dr, 0..cfg.vocab))
                    .collect()
            })
            .collect();
        let loss = no_grad(|| lm.forward_loss(&tokens, &base_window(cfg.l_train)))
            .unwrap()
            .item()
            .unwrap();
        let uniform = (cfg.vocab as f64).ln();
        assert!(
            (loss - uniform).abs() < 0.05,
            "untrained loss {loss} vs uniform {uniform}"
        );
    }

    #[test]
    fn future_tokens_leave_past_predictions_untouched() {
        let (lm, _params) = nope_lm(3);
        let mut tokens = vec![vec![1usize, 2, 3, 4, 5, 6]];
        let window = base_window(6);
        let before = no_grad(|| lm.forward_logits(&tokens, &window))
            .unwrap()
            .to_vec();
        tokens[0][5] = 9; // only the last token changes
        let after = no_grad(|| lm.forward_logits(&tokens, &window))
            .unwrap()
            .to_vec();
        let v = lm.cfg.vocab;
        assert_eq!(before[..5 * v], after[..5 * v], "past logits moved");
        assert_ne!(before[5 * v..], after[5 * v..], "last logits must move");
    }

    #[test]
    fn loss_gradient_ignores_future_token_embeddings() {
        // The prediction at slot t must not receive gradient from tokens
        // after t+1; with a single predicted slot, tokens beyond position
        // 1 contribute nothing at all.
        let (lm, params) = nope_lm(4);
        let tokens = vec![vec![1usize, 2, 7, 7]];
        // Loss restricted to the first predicted slot: logits row 0.
        let logits = lm.forward_logits(&tokens, &base_window(4)).unwrap();
        let flat = logits.reshape(&[4, 16]).unwrap();
        let first = flat.select_rows(&[0]).unwrap();
        let loss = cross_entropy(&first, &[2]).unwrap();
        loss.backward().unwrap();
        let g = params.get("embed.weight").unwrap().tensor.grad().unwrap();
        let row = |t: usize| &g[t * 16..(t + 1) * 16];
        assert!(row(1).iter().any(|&v| v != 0.0), "token 1 feeds slot 0");
        assert!(row(7).iter().all(|&v| v == 0.0), "future token leaked in");
    }

    #[test]
    fn token_and_shape_validation() {
        let (lm, _params) = nope_lm(5);
        assert!(matches!(
            lm.forward_loss(&[vec![99, 0]], &base_window(2)),
            Err(SeqPeError::TokenOutOfRange { .. })
        ));
        assert!(lm.forward_loss(&[vec![1]], &base_window(1)).is_err());
        assert!(lm.forward_loss(&[vec![1, 2, 3]], &base_window(2)).is_err());
        assert!(lm.check_train_context(8).is_ok());
        assert!(matches!(
            lm.check_train_context(9),
            Err(SeqPeError::ContextTooLong { len: 9, max: 8, .. })
        ));
    }
}
