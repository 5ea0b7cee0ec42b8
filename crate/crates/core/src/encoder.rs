//! The sequential position encoder: a position's digit tokens plus a
//! readout token run through a small causal transformer; the hidden state
//! at the readout token is the position's embedding.
//!
//! Storage is three small tables — token embeddings (digits + readout),
//! one row per digit slot, one row per dimension — so the parameter count
//! grows with `b + k + n`, never with the number of representable
//! positions.  A digit row's input embedding is the sum of its token row,
//! its slot row and its dimension row; the readout row is its token row
//! alone.  For 1-D positions the dimension table is a frozen zero row: it
//! is checkpointed for layout stability but never trained.

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SeqPeError};
use crate::numerics::checkpoint::{load_container, save_container, ContainerMeta, NamedArray};
use crate::numerics::rng::fill_normal;
use crate::numerics::tensor::{no_grad, Tensor};
use crate::numerics::ParamSet;
use crate::positions::{PosSeqConfig, Position, Region};

/// Layer-norm epsilon used throughout the encoder.
pub const LN_EPS: f64 = 1e-5;
/// Initialization scale for embeddings and linear weights.
pub const INIT_STD: f64 = 0.02;

/// Architecture of the position encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub pos: PosSeqConfig,
    /// Output width `d`; defaults to the host model's width.
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
}

impl EncoderConfig {
    /// Desk-scale defaults: width 64, 4 heads, 2 layers.
    pub fn desk(pos: PosSeqConfig) -> Self {
        EncoderConfig {
            pos,
            d_model: 64,
            heads: 4,
            layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pos.validate()?;
        if self.d_model == 0 || self.heads == 0 || self.layers == 0 {
            return Err(SeqPeError::ConfigInvalid(
                "encoder width, heads and layers must be positive".into(),
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(SeqPeError::UnevenSplit {
                what: "encoder width over heads",
                width: self.d_model,
                parts: self.heads,
            });
        }
        Ok(())
    }
}

struct Block {
    attn_norm_gain: Tensor,
    attn_norm_bias: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    mlp_norm_gain: Tensor,
    mlp_norm_bias: Tensor,
    w_expand: Tensor,
    b_expand: Tensor,
    w_project: Tensor,
    b_project: Tensor,
}

/// The position encoder network.  All parameters live in the [`ParamSet`]
/// passed at construction; encoding is deterministic given those values.
pub struct SeqPeEncoder {
    cfg: EncoderConfig,
    token_table: Tensor,
    slot_table: Tensor,
    dim_table: Tensor,
    blocks: Vec<Block>,
    final_norm_gain: Tensor,
    final_norm_bias: Tensor,
}

fn normal_leaf(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = vec![0.0; shape.iter().product()];
    fill_normal(rng, std, &mut data);
    Tensor::leaf(shape, data).expect("static shape")
}

fn register_linear(
    params: &mut ParamSet,
    prefix: &str,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    let w = params.register(
        &format!("{prefix}.weight"),
        normal_leaf(&[rows, cols], INIT_STD, rng),
        false,
    )?;
    let b = params.register(
        &format!("{prefix}.bias"),
        Tensor::leaf(&[cols], vec![0.0; cols])?,
        false,
    )?;
    Ok((w, b))
}

fn register_norm(params: &mut ParamSet, prefix: &str, d: usize) -> Result<(Tensor, Tensor)> {
    let g = params.register(&format!("{prefix}.gain"), Tensor::leaf(&[d], vec![1.0; d])?, false)?;
    let b = params.register(&format!("{prefix}.bias"), Tensor::leaf(&[d], vec![0.0; d])?, false)?;
    Ok((g, b))
}

impl SeqPeEncoder {
    /// Builds a freshly initialized encoder, registering every table and
    /// weight in `params`.  Embeddings and linear weights start at
    /// N(0, 0.02), biases at zero, norm gains at one; none opt into weight
    /// decay.
    pub fn new(cfg: EncoderConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let vocab = cfg.pos.vocab_size();
        let token_table =
            params.register("tables.token", normal_leaf(&[vocab, d], INIT_STD, rng), false)?;
        let slot_table = params.register(
            "tables.slot",
            normal_leaf(&[cfg.pos.digits_per_dim, d], INIT_STD, rng),
            false,
        )?;
        let dim_table = if cfg.pos.dims == 1 {
            // Single-dimension positions carry no dimension signal; keep the
            // row as a frozen zero so the stored layout stays uniform.
            params.register_frozen("tables.dim", Tensor::from_vec(&[1, d], vec![0.0; d])?)?
        } else {
            params.register(
                "tables.dim",
                normal_leaf(&[cfg.pos.dims, d], INIT_STD, rng),
                false,
            )?
        };
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("block{i}");
            let (attn_norm_gain, attn_norm_bias) =
                register_norm(params, &format!("{p}.attn_norm"), d)?;
            let (wq, bq) = register_linear(params, &format!("{p}.attn.query"), d, d, rng)?;
            let (wk, bk) = register_linear(params, &format!("{p}.attn.key"), d, d, rng)?;
            let (wv, bv) = register_linear(params, &format!("{p}.attn.value"), d, d, rng)?;
            let (wo, bo) = register_linear(params, &format!("{p}.attn.output"), d, d, rng)?;
            let (mlp_norm_gain, mlp_norm_bias) =
                register_norm(params, &format!("{p}.mlp_norm"), d)?;
            let (w_expand, b_expand) =
                register_linear(params, &format!("{p}.mlp.expand"), d, 4 * d, rng)?;
            let (w_project, b_project) =
                register_linear(params, &format!("{p}.mlp.project"), 4 * d, d, rng)?;
            blocks.push(Block {
                attn_norm_gain,
                attn_norm_bias,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                mlp_norm_gain,
                mlp_norm_bias,
                w_expand,
                b_expand,
                w_project,
                b_project,
            });
        }
        let (final_norm_gain, final_norm_bias) = register_norm(params, "final_norm", d)?;
        Ok(SeqPeEncoder {
            cfg,
            token_table,
            slot_table,
            dim_table,
            blocks,
            final_norm_gain,
            final_norm_bias,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Stored table rows: `(b + 1) + k + n`, independent of how many
    /// positions are representable.
    pub fn stored_table_rows(&self) -> usize {
        self.token_table.shape()[0] + self.slot_table.shape()[0] + self.dim_table.shape()[0]
    }

    /// Input embeddings for one digit sequence (readout row not included):
    /// each row is token + slot + dimension.
    pub fn embed_sequence(&self, digits: &[usize]) -> Result<Tensor> {
        let k = self.cfg.pos.digits_per_dim;
        let n = self.cfg.pos.dims;
        if digits.len() != n * k {
            return Err(SeqPeError::BadShape {
                op: "embed_sequence",
                shape: vec![digits.len()],
                reason: format!("expected {} digit tokens", n * k),
            });
        }
        for &id in digits {
            if id >= self.cfg.pos.base as usize {
                return Err(SeqPeError::TokenOutOfRange {
                    what: "embed_sequence",
                    id,
                    rows: self.cfg.pos.base as usize,
                });
            }
        }
        let tok = self.token_table.select_rows(digits)?;
        let slot_ids: Vec<usize> = (0..n * k).map(|t| t % k).collect();
        let dim_ids: Vec<usize> = (0..n * k).map(|t| t / k).collect();
        let slots = self.slot_table.select_rows(&slot_ids)?;
        let dims = self.dim_table.select_rows(&dim_ids)?;
        tok.add(&slots)?.add(&dims)
    }

    /// Slot/dimension offset rows for a full token sequence including the
    /// readout row (whose offsets are zero).
    fn offsets_with_readout(&self) -> Result<Tensor> {
        let k = self.cfg.pos.digits_per_dim;
        let n = self.cfg.pos.dims;
        let d = self.cfg.d_model;
        let zero = Tensor::from_vec(&[1, d], vec![0.0; d])?;
        let slot_pad = Tensor::concat_rows(&[self.slot_table.clone(), zero.clone()])?;
        let dim_pad = Tensor::concat_rows(&[self.dim_table.clone(), zero])?;
        let mut slot_ids: Vec<usize> = (0..n * k).map(|t| t % k).collect();
        let mut dim_ids: Vec<usize> = (0..n * k).map(|t| t / k).collect();
        slot_ids.push(k);
        dim_ids.push(n);
        slot_pad.select_rows(&slot_ids)?.add(&dim_pad.select_rows(&dim_ids)?)
    }

    /// Full forward pass over a batch of positions; returns every hidden
    /// state, shape `[batch, n*k + 1, d]`.
    pub fn forward_hidden(&self, ps: &[Position]) -> Result<Tensor> {
        if ps.is_empty() {
            return Err(SeqPeError::BadShape {
                op: "forward_hidden",
                shape: vec![0],
                reason: "empty position batch".into(),
            });
        }
        let seq_len = self.cfg.pos.seq_len();
        let d = self.cfg.d_model;
        let readout = self.cfg.pos.readout_id();
        let mut flat_ids = Vec::with_capacity(ps.len() * seq_len);
        for p in ps {
            flat_ids.extend(self.cfg.pos.to_digits(p)?);
            flat_ids.push(readout);
        }
        let tokens = self
            .token_table
            .select_rows(&flat_ids)?
            .reshape(&[ps.len(), seq_len, d])?;
        let offsets = self.offsets_with_readout()?; // [seq_len, d], broadcasts over batch
        let mut x = tokens.add(&offsets)?;
        let mask = causal_mask(seq_len);
        for block in &self.blocks {
            x = block.forward(&x, &mask, self.cfg.heads)?;
        }
        x.layer_norm(&self.final_norm_gain, &self.final_norm_bias, LN_EPS)
    }

    /// Embeddings for a batch of positions, shape `[batch, d]`.  Row `i` is
    /// bit-identical to `encode_position(ps[i])`.
    pub fn encode_batch(&self, ps: &[Position]) -> Result<Tensor> {
        let hidden = self.forward_hidden(ps)?;
        let shape = hidden.shape();
        let (batch, seq_len, d) = (shape[0], shape[1], shape[2]);
        let flat = hidden.reshape(&[batch * seq_len, d])?;
        let last_ids: Vec<usize> = (0..batch).map(|i| i * seq_len + seq_len - 1).collect();
        flat.select_rows(&last_ids)
    }

    /// The embedding of one position, shape `[d]`.
    pub fn encode_position(&self, p: &[i64]) -> Result<Tensor> {
        let rows = self.encode_batch(&[p.to_vec()])?;
        rows.reshape(&[self.cfg.d_model])
    }

    /// Encodes every position in `region` into a lookup table.  Runs
    /// without building autodiff tape.
    pub fn precompute_table(&self, region: &Region) -> Result<PeTable> {
        region.check_against(&self.cfg.pos)?;
        let d = self.cfg.d_model;
        let count = region.count();
        let mut data = Vec::with_capacity(count * d);
        no_grad(|| -> Result<()> {
            let positions: Vec<Position> = region.iter().collect();
            for chunk in positions.chunks(256) {
                let rows = self.encode_batch(chunk)?;
                data.extend_from_slice(&rows.to_vec());
            }
            Ok(())
        })?;
        Ok(PeTable {
            pos: self.cfg.pos,
            region: region.clone(),
            d_model: d,
            data,
        })
    }
}

impl Block {
    fn forward(&self, x: &Tensor, mask: &Tensor, heads: usize) -> Result<Tensor> {
        let shape = x.shape();
        let d = *shape.last().unwrap();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let a = x.layer_norm(&self.attn_norm_gain, &self.attn_norm_bias, LN_EPS)?;
        let q = a.matmul(&self.wq)?.add(&self.bq)?;
        let k = a.matmul(&self.wk)?.add(&self.bk)?;
        let v = a.matmul(&self.wv)?.add(&self.bv)?;
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.narrow_last(h * dh, dh)?;
            let kh = k.narrow_last(h * dh, dh)?;
            let vh = v.narrow_last(h * dh, dh)?;
            let scores = qh.matmul_nt(&kh)?.mul_scalar(scale).add(mask)?;
            let attn = scores.softmax_last();
            head_outs.push(attn.matmul(&vh)?);
        }
        let merged = Tensor::concat_last(&head_outs)?;
        let x = x.add(&merged.matmul(&self.wo)?.add(&self.bo)?)?;

        let m = x.layer_norm(&self.mlp_norm_gain, &self.mlp_norm_bias, LN_EPS)?;
        let expanded = m.matmul(&self.w_expand)?.add(&self.b_expand)?.gelu();
        let projected = expanded.matmul(&self.w_project)?.add(&self.b_project)?;
        x.add(&projected)
    }
}

/// Additive causal mask `[len, len]`: 0 where key index <= query index,
/// -inf above the diagonal.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::from_vec(&[len, len], data).expect("static shape")
}

/// A precomputed position-embedding lookup table over a region.
#[derive(Clone)]
pub struct PeTable {
    pub pos: PosSeqConfig,
    pub region: Region,
    pub d_model: usize,
    data: Vec<f64>,
}

impl PeTable {
    /// The embedding for `p`; errors if `p` is outside the covered region.
    pub fn lookup(&self, p: &[i64]) -> Result<&[f64]> {
        if !self.region.contains(p) {
            return Err(SeqPeError::UnsupportedExtent(format!(
                "position {p:?} outside precomputed region {:?}",
                self.region.bounds
            )));
        }
        let idx = self.region.flat_index(p)?;
        Ok(&self.data[idx * self.d_model..(idx + 1) * self.d_model])
    }

    /// All rows as a constant tensor `[count, d]` in region iteration
    /// order.
    pub fn rows(&self) -> Result<Tensor> {
        Tensor::from_vec(&[self.region.count(), self.d_model], self.data.clone())
    }

    /// Embeddings for a batch of positions, `[batch, d]`, as a constant
    /// tensor.
    pub fn encode_batch(&self, ps: &[Position]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ps.len() * self.d_model);
        for p in ps {
            data.extend_from_slice(self.lookup(p)?);
        }
        Tensor::from_vec(&[ps.len(), self.d_model], data)
    }

    /// Serializes the table to the checkpoint container format, tagging the
    /// digit config and region bounds in the metadata.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut meta = ContainerMeta::new("table", "");
        meta.extra.insert("base".into(), self.pos.base.to_string());
        meta.extra
            .insert("digits_per_dim".into(), self.pos.digits_per_dim.to_string());
        meta.extra.insert("dims".into(), self.pos.dims.to_string());
        meta.extra.insert(
            "region".into(),
            self.region
                .bounds
                .iter()
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        meta.extra.insert("d_model".into(), self.d_model.to_string());
        let arrays = vec![NamedArray {
            name: "table.rows".into(),
            shape: vec![self.region.count(), self.d_model],
            data: self.data.clone(),
        }];
        save_container(path, &meta, &arrays)
    }

    /// Loads a table previously written by [`PeTable::save`].
    pub fn load(path: &std::path::Path) -> Result<PeTable> {
        let (meta, arrays) = load_container(path)?;
        if meta.kind != "table" {
            return Err(SeqPeError::ContainerMismatch(format!(
                "expected a table container, found kind {:?}",
                meta.kind
            )));
        }
        let get = |key: &str| -> Result<&str> {
            meta.extra
                .get(key)
                .map(|s| s.as_str())
                .ok_or_else(|| SeqPeError::ContainerFormat(format!("missing metadata key {key:?}")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| SeqPeError::ContainerFormat(format!("bad metadata value for {key:?}")))
        };
        let pos = PosSeqConfig::new(
            parse_usize("base")? as u32,
            parse_usize("digits_per_dim")?,
            parse_usize("dims")?,
        )?;
        let bounds: Vec<i64> = get("region")?
            .split(',')
            .map(|s| {
                s.parse()
                    .map_err(|_| SeqPeError::ContainerFormat("bad region bound".into()))
            })
            .collect::<Result<_>>()?;
        let region = Region::new(bounds)?;
        let d_model = parse_usize("d_model")?;
        let rows = arrays
            .iter()
            .find(|a| a.name == "table.rows")
            .ok_or_else(|| SeqPeError::ContainerFormat("missing table.rows array".into()))?;
        if rows.shape != vec![region.count(), d_model] {
            return Err(SeqPeError::ContainerMismatch(format!(
                "table.rows shape {:?} does not match region {:?} x width {}",
                rows.shape, region.bounds, d_model
            )));
        }
        Ok(PeTable {
            pos,
            region,
            d_model,
            data: rows.data.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{grad_check, GradCheckOptions};
    use crate::numerics::rng::{streams, StreamRng};

    fn small_encoder(dims: usize) -> (SeqPeEncoder, ParamSet) {
        let pos = PosSeqConfig::new(10, 2, dims).unwrap();
        let cfg = EncoderConfig {
            pos,
            d_model: 16,
            heads: 2,
            layers: 2,
        };
        let mut params = ParamSet::new();
        let mut rng = StreamRng::new(7).stream(streams::INIT);
        let enc = SeqPeEncoder::new(cfg, &mut params, &mut rng).unwrap();
        (enc, params)
    }

    #[test]
    fn embed_sequence_zero_tables_give_zero_rows() {
        let (enc, params) = small_encoder(1);
        for p in params.iter() {
            if p.name.starts_with("tables.") {
                p.tensor.update_data(|d| d.fill(0.0));
            }
        }
        let u = enc.embed_sequence(&[1, 2]).unwrap();
        assert_eq!(u.shape(), vec![2, 16]);
        assert!(u.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_sequence_token_rows_without_offsets() {
        let (enc, params) = small_encoder(1);
        for p in params.iter() {
            if p.name == "tables.slot" {
                p.tensor.update_data(|d| d.fill(0.0));
            }
        }
        // Slot and dim offsets are zero (dim frozen for 1-D), so equal
        // digits give equal rows.
        let u = enc.embed_sequence(&[3, 3]).unwrap();
        let v = u.to_vec();
        assert_eq!(v[..16], v[16..]);
    }

    #[test]
    fn embed_sequence_dimension_rows_split_at_k() {
        let (enc, params) = small_encoder(2);
        // Zero out everything except the dimension table; rows 0..k-1 must
        // equal dim row 0, rows k..2k-1 dim row 1.
        for p in params.iter() {
            if p.name == "tables.token" || p.name == "tables.slot" {
                p.tensor.update_data(|d| d.fill(0.0));
            }
        }
        let u = enc.embed_sequence(&[0, 1, 2, 3]).unwrap();
        let v = u.to_vec();
        let dims = enc.dim_table.to_vec();
        assert_eq!(v[0..16], dims[0..16]);
        assert_eq!(v[16..32], dims[0..16]);
        assert_eq!(v[32..48], dims[16..32]);
        assert_eq!(v[48..64], dims[16..32]);
    }

    #[test]
    fn embed_sequence_rejects_bad_tokens() {
        let (enc, _) = small_encoder(1);
        // The readout id (10) is not a digit.
        assert!(matches!(
            enc.embed_sequence(&[1, 10]),
            Err(SeqPeError::TokenOutOfRange { id: 10, .. })
        ));
        assert!(enc.embed_sequence(&[1]).is_err());
    }

    #[test]
    fn encoding_is_deterministic() {
        let (enc, _) = small_encoder(1);
        let a = enc.encode_position(&[42]).unwrap();
        let b = enc.encode_position(&[42]).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        assert_eq!(a.shape(), vec![16]);
    }

    #[test]
    fn batch_rows_equal_single_calls_bit_exact() {
        let (enc, _) = small_encoder(1);
        let mut rng = StreamRng::new(3).stream(streams::BATCH);
        use rand::Rng;
        let ps: Vec<Position> = (0..64).map(|_| vec![rng.gen_range(0..100)]).collect();
        let batch = enc.encode_batch(&ps).unwrap();
        let flat = batch.to_vec();
        for (i, p) in ps.iter().enumerate() {
            let single = enc.encode_position(p).unwrap().to_vec();
            assert_eq!(flat[i * 16..(i + 1) * 16], single[..], "row {i} differs");
        }
        // Duplicate positions give identical rows.
        let two = enc.encode_batch(&[vec![7], vec![7]]).unwrap().to_vec();
        assert_eq!(two[..16], two[16..]);
    }

    #[test]
    fn causal_mask_blocks_readout_from_earlier_rows() {
        let (enc, params) = small_encoder(1);
        let before = enc.forward_hidden(&[vec![55]]).unwrap().to_vec();
        // Perturb the readout token's embedding row; earlier rows must not
        // move (they cannot attend forward), the readout row must.
        let readout = enc.cfg.pos.readout_id();
        for p in params.iter() {
            if p.name == "tables.token" {
                p.tensor.update_data(|d| {
                    for v in &mut d[readout * 16..(readout + 1) * 16] {
                        *v += 0.5;
                    }
                });
            }
        }
        let after = enc.forward_hidden(&[vec![55]]).unwrap().to_vec();
        let seq = enc.cfg.pos.seq_len();
        assert_eq!(before[..(seq - 1) * 16], after[..(seq - 1) * 16]);
        assert_ne!(before[(seq - 1) * 16..], after[(seq - 1) * 16..]);
    }

    #[test]
    fn encode_rejects_unrepresentable_positions() {
        let (enc, _) = small_encoder(1);
        assert!(matches!(
            enc.encode_position(&[100]),
            Err(SeqPeError::PositionOutOfRange { .. })
        ));
        assert!(enc.encode_batch(&[vec![1], vec![-1]]).is_err());
    }

    #[test]
    fn squared_norm_gradients_pass_finite_difference() {
        let (enc, params) = small_encoder(1);
        let opts = GradCheckOptions {
            samples_per_param: 4,
            seed: 5,
            ..GradCheckOptions::default()
        };
        let report = grad_check(&params, &opts, || {
            let e = enc.encode_position(&[37])?;
            Ok(e.mul(&e)?.sum_all())
        })
        .unwrap();
        assert!(
            report.passes(1e-4),
            "worst coordinate: {:?}",
            report.worst
        );
    }

    #[test]
    fn frozen_dim_row_never_updates_for_one_dim() {
        let (enc, params) = small_encoder(1);
        let loss = enc.encode_position(&[12]).unwrap().sum_all();
        loss.backward().unwrap();
        let dim = params.get("tables.dim").unwrap();
        assert!(!dim.trainable);
        assert!(dim.tensor.grad().is_none(), "frozen row accumulated grads");
        assert_eq!(dim.tensor.to_vec(), vec![0.0; 16]);
    }

    #[test]
    fn stored_rows_grow_with_digits_not_positions() {
        let pos = PosSeqConfig::new(10, 5, 1).unwrap();
        let mut params = ParamSet::new();
        let mut rng = StreamRng::new(1).stream(streams::INIT);
        let enc = SeqPeEncoder::new(EncoderConfig::desk(pos), &mut params, &mut rng).unwrap();
        assert_eq!(enc.stored_table_rows(), 10 + 1 + 5 + 1);
        let table_params: usize = params
            .iter()
            .filter(|p| p.name.starts_with("tables."))
            .map(|p| p.tensor.numel())
            .sum();
        assert_eq!(table_params, (10 + 1 + 5 + 1) * 64);
    }

    #[test]
    fn precomputed_table_matches_live_encoding() {
        let (enc, _) = small_encoder(1);
        let region = Region::new(vec![40]).unwrap();
        let table = enc.precompute_table(&region).unwrap();
        for p in region.iter() {
            let live = enc.encode_position(&p).unwrap().to_vec();
            assert_eq!(table.lookup(&p).unwrap(), &live[..], "mismatch at {p:?}");
        }
        assert!(table.lookup(&[40]).is_err());
        assert_eq!(table.rows().unwrap().shape(), vec![40, 16]);
    }

    #[test]
    fn table_round_trips_through_container() {
        let (enc, _) = small_encoder(2);
        let region = Region::new(vec![5, 6]).unwrap();
        let table = enc.precompute_table(&region).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pe.table");
        table.save(&path).unwrap();
        let back = PeTable::load(&path).unwrap();
        assert_eq!(back.pos, table.pos);
        assert_eq!(back.region, table.region);
        for p in region.iter() {
            assert_eq!(back.lookup(&p).unwrap(), table.lookup(&p).unwrap());
        }
        // A checkpoint-kind container is refused.
        let mut meta = ContainerMeta::new("checkpoint", "");
        meta.extra.insert("base".into(), "10".into());
        let bad = dir.path().join("bad.table");
        save_container(&bad, &meta, &[]).unwrap();
        assert!(PeTable::load(&bad).is_err());
    }
}
