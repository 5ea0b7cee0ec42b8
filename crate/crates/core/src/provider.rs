//! One interface over every position-encoding method so the task models
//! stay method-agnostic: each mode describes what it contributes to the
//! input embeddings and what it does inside attention, computed from the
//! actual position values (not list indices) so shifted and extended
//! windows work wherever the method allows them.

use rand_chacha::ChaCha8Rng;

use crate::baselines::{
    alibi_bias, rope2d_rotate, rope_rotate, sinusoidal_rows, ApeLearnTable, RopeParams,
};
use crate::encoder::{EncoderConfig, PeTable, SeqPeEncoder};
use crate::error::{Result, SeqPeError};
use crate::integration::{FuseMode, PeProjection};
use crate::numerics::tensor::Tensor;
use crate::numerics::ParamSet;
use crate::positions::{PosSeqConfig, Position};

/// Every position-encoding method the models can run with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PeMode {
    /// No positional information at all.
    Nope,
    /// Fixed sinusoidal rows added to the input embeddings.
    ApeSin,
    /// A learned per-position table added to the input embeddings,
    /// linearly resized for longer evaluation windows.
    ApeLearn,
    /// Rotary rotation of queries and keys (1-D).
    Rope { base: f64 },
    /// Axial rotary rotation for grids (2-D).
    Rope2d { base: f64 },
    /// Linear-distance attention bias per head.
    Alibi,
    /// Sequential-digit encoder, embeddings added to queries/keys.
    SeqSum,
    /// Sequential-digit encoder, embeddings multiplied into queries/keys.
    SeqMul,
    /// Sequential-digit encoder, embedding dot products added as a score
    /// bias.
    SeqBias,
}

/// Default rotary frequency base.
pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

impl PeMode {
    /// Stable identifier used in configs and container metadata.
    pub fn name(&self) -> &'static str {
        match self {
            PeMode::Nope => "nope",
            PeMode::ApeSin => "ape-sin",
            PeMode::ApeLearn => "ape-learn",
            PeMode::Rope { .. } => "rope",
            PeMode::Rope2d { .. } => "rope2d",
            PeMode::Alibi => "alibi",
            PeMode::SeqSum => "seq-sum",
            PeMode::SeqMul => "seq-mul",
            PeMode::SeqBias => "seq-bias",
        }
    }

    /// Parses a mode identifier; rotary modes get the default base.
    pub fn parse(s: &str) -> Result<PeMode> {
        Ok(match s {
            "nope" => PeMode::Nope,
            "ape-sin" => PeMode::ApeSin,
            "ape-learn" => PeMode::ApeLearn,
            "rope" => PeMode::Rope {
                base: DEFAULT_ROPE_BASE,
            },
            "rope2d" => PeMode::Rope2d {
                base: DEFAULT_ROPE_BASE,
            },
            "alibi" => PeMode::Alibi,
            "seq-sum" => PeMode::SeqSum,
            "seq-mul" => PeMode::SeqMul,
            "seq-bias" => PeMode::SeqBias,
            other => {
                return Err(SeqPeError::ConfigInvalid(format!(
                    "unknown position-encoding mode '{other}' (expected one of nope, ape-sin, \
                     ape-learn, rope, rope2d, alibi, seq-sum, seq-mul, seq-bias)"
                )))
            }
        })
    }

    /// Whether this mode runs the sequential-digit encoder.
    pub fn is_seq(&self) -> bool {
        matches!(self, PeMode::SeqSum | PeMode::SeqMul | PeMode::SeqBias)
    }

    /// How the encoder embeddings fuse into attention, for seq modes.
    pub fn fuse(&self) -> Option<FuseMode> {
        match self {
            PeMode::SeqSum => Some(FuseMode::Sum),
            PeMode::SeqMul => Some(FuseMode::Mul),
            PeMode::SeqBias => Some(FuseMode::Bias),
            _ => None,
        }
    }

    /// Whether batches may be moved to shifted position windows.  Only
    /// the learned table is pinned to its trained range.
    pub fn supports_shift(&self) -> bool {
        !matches!(self, PeMode::ApeLearn)
    }
}

/// What a mode does inside each attention layer.
pub enum PeAttn {
    /// Scores are plain `q . k`.
    Plain,
    /// Projected encoder embeddings `[L, d_model]`, fused per head by the
    /// model (split the same way as queries/keys).
    Fused {
        fuse: FuseMode,
        e_q: Tensor,
        e_k: Tensor,
    },
    /// Rotation applied to each query/key head slice.
    Rotary(RotaryMap),
    /// One constant `[L, L]` score bias per head.
    BiasPerHead(Vec<Tensor>),
}

/// Positions plus rotation config, applied lazily to head slices.
pub struct RotaryMap {
    base: f64,
    axial: bool,
    positions: Vec<Position>,
}

impl RotaryMap {
    /// Rotates `x` (`[.., L, d_head]`) by the stored positions' angles.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if self.axial {
            rope2d_rotate(x, &self.positions, self.base)
        } else {
            let scalars: Vec<i64> = self.positions.iter().map(|p| p[0]).collect();
            let params = RopeParams::new(self.base, *x.shape().last().unwrap())?;
            rope_rotate(x, &scalars, &params)
        }
    }
}

/// Per-forward position-encoding contributions.
pub struct PeForward {
    /// Rows `[L, d_model]` to add to the input embeddings, if any.
    pub input_rows: Option<Tensor>,
    /// What attention does with positions.
    pub attn: PeAttn,
}

/// Where sequential-digit embeddings come from.
enum SeqSource {
    Live(SeqPeEncoder),
    Table(PeTable),
}

enum Backend {
    Stateless,
    Seq {
        source: SeqSource,
        projection: PeProjection,
    },
    Learned(ApeLearnTable),
}

/// Provider construction parameters.
pub struct ProviderConfig {
    pub mode: PeMode,
    /// Model width the PE contributions must match.
    pub d_model: usize,
    /// Model head count (alibi slopes, per-head rotary widths).
    pub heads: usize,
    /// Trained position extent: `[l_train]` or `[grid_h, grid_w]`.
    pub train_extent: Vec<i64>,
    /// Digit codec for seq modes.
    pub pos: Option<PosSeqConfig>,
    /// Depth of the digit encoder (seq modes).
    pub encoder_layers: usize,
    /// Head count of the digit encoder (seq modes).
    pub encoder_heads: usize,
}

impl ProviderConfig {
    pub fn new(mode: PeMode, d_model: usize, heads: usize, train_extent: Vec<i64>) -> Self {
        ProviderConfig {
            mode,
            d_model,
            heads,
            train_extent,
            pos: None,
            encoder_layers: 2,
            encoder_heads: 4,
        }
    }
}

/// A constructed position-encoding method bound to a model shape.
pub struct PeProvider {
    mode: PeMode,
    d_model: usize,
    heads: usize,
    train_extent: Vec<i64>,
    backend: Backend,
}

impl PeProvider {
    pub fn new(cfg: ProviderConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        let dims = cfg.train_extent.len();
        if dims == 0 || dims > 2 {
            return Err(SeqPeError::ConfigInvalid(format!(
                "train extent must have 1 or 2 dimensions, got {dims}"
            )));
        }
        if cfg.train_extent.iter().any(|&b| b <= 0) {
            return Err(SeqPeError::ConfigInvalid(format!(
                "train extent bounds must be positive, got {:?}",
                cfg.train_extent
            )));
        }
        if cfg.heads == 0 || cfg.d_model % cfg.heads != 0 {
            return Err(SeqPeError::UnevenSplit {
                what: "model width over heads",
                width: cfg.d_model,
                parts: cfg.heads,
            });
        }
        let d_head = cfg.d_model / cfg.heads;
        let dims_needed = |need: usize| -> Result<()> {
            if dims != need {
                return Err(SeqPeError::ConfigInvalid(format!(
                    "{} expects a {need}-dimensional extent, got {dims} dims",
                    cfg.mode.name()
                )));
            }
            Ok(())
        };
        let backend = match cfg.mode {
            PeMode::Nope => Backend::Stateless,
            PeMode::ApeSin => {
                dims_needed(1)?;
                if cfg.d_model % 2 != 0 {
                    return Err(SeqPeError::UnevenSplit {
                        what: "sinusoidal width",
                        width: cfg.d_model,
                        parts: 2,
                    });
                }
                Backend::Stateless
            }
            PeMode::Alibi => {
                dims_needed(1)?;
                Backend::Stateless
            }
            PeMode::Rope { base } => {
                dims_needed(1)?;
                // Validates the base and head width once, up front.
                RopeParams::new(base, d_head)?;
                Backend::Stateless
            }
            PeMode::Rope2d { base } => {
                dims_needed(2)?;
                if d_head % 4 != 0 {
                    return Err(SeqPeError::UnevenSplit {
                        what: "axial rotary head width",
                        width: d_head,
                        parts: 4,
                    });
                }
                RopeParams::new(base, d_head / 2)?;
                Backend::Stateless
            }
            PeMode::ApeLearn => {
                let rows: i64 = cfg.train_extent.iter().product();
                Backend::Learned(ApeLearnTable::new(rows as usize, cfg.d_model, params, rng)?)
            }
            PeMode::SeqSum | PeMode::SeqMul | PeMode::SeqBias => {
                let pos = cfg.pos.ok_or_else(|| {
                    SeqPeError::ConfigInvalid(
                        "sequential modes need a digit codec (base, digits, dims)".into(),
                    )
                })?;
                if pos.dims != dims {
                    return Err(SeqPeError::DimMismatch {
                        expected: dims,
                        got: pos.dims,
                    });
                }
                for &bound in &cfg.train_extent {
                    if bound > pos.coord_bound() {
                        return Err(SeqPeError::PositionOutOfRange {
                            value: bound - 1,
                            base: pos.base,
                            digits: pos.digits_per_dim,
                            max: pos.coord_bound() - 1,
                        });
                    }
                }
                let enc_cfg = EncoderConfig {
                    pos,
                    d_model: cfg.d_model,
                    heads: cfg.encoder_heads,
                    layers: cfg.encoder_layers,
                };
                let encoder = SeqPeEncoder::new(enc_cfg, params, rng)?;
                let projection = PeProjection::new(cfg.d_model, params, rng)?;
                Backend::Seq {
                    source: SeqSource::Live(encoder),
                    projection,
                }
            }
        };
        Ok(PeProvider {
            mode: cfg.mode,
            d_model: cfg.d_model,
            heads: cfg.heads,
            train_extent: cfg.train_extent,
            backend,
        })
    }

    pub fn mode(&self) -> PeMode {
        self.mode
    }

    pub fn train_extent(&self) -> &[i64] {
        &self.train_extent
    }

    /// Rows this method stores per parameter table (digit vocabulary for
    /// the sequential encoder, one per trained position for the learned
    /// table, none for formula methods).
    pub fn stored_rows(&self) -> Option<usize> {
        match &self.backend {
            Backend::Seq {
                source: SeqSource::Live(enc),
                ..
            } => Some(enc.stored_table_rows()),
            Backend::Seq {
                source: SeqSource::Table(table),
                ..
            } => Some(table.pos.vocab_size() + table.pos.digits_per_dim + table.pos.dims),
            Backend::Learned(t) => Some(t.train_len()),
            Backend::Stateless => None,
        }
    }

    /// The live digit encoder, when this provider runs one.
    pub fn seq_encoder(&self) -> Option<&SeqPeEncoder> {
        match &self.backend {
            Backend::Seq {
                source: SeqSource::Live(enc),
                ..
            } => Some(enc),
            _ => None,
        }
    }

    /// Swaps the live digit encoder for a precomputed lookup table.
    /// Positions outside the table's region become errors.
    pub fn attach_table(&mut self, table: PeTable) -> Result<()> {
        match &mut self.backend {
            Backend::Seq { source, .. } => {
                if let SeqSource::Live(enc) = source {
                    if enc.config().pos != table.pos || enc.config().d_model != table.d_model {
                        return Err(SeqPeError::ContainerMismatch(format!(
                            "table built for base {} / {} digits / {} dims at width {}, model \
                             expects base {} / {} digits / {} dims at width {}",
                            table.pos.base,
                            table.pos.digits_per_dim,
                            table.pos.dims,
                            table.d_model,
                            enc.config().pos.base,
                            enc.config().pos.digits_per_dim,
                            enc.config().pos.dims,
                            enc.config().d_model,
                        )));
                    }
                }
                *source = SeqSource::Table(table);
                Ok(())
            }
            _ => Err(SeqPeError::ConfigInvalid(format!(
                "mode {} has no embedding table to precompute",
                self.mode.name()
            ))),
        }
    }

    fn seq_rows(&self, positions: &[Position]) -> Result<Tensor> {
        match &self.backend {
            Backend::Seq { source, .. } => match source {
                SeqSource::Live(enc) => enc.encode_batch(positions),
                SeqSource::Table(table) => table.encode_batch(positions),
            },
            _ => unreachable!("seq_rows is only called for seq modes"),
        }
    }

    /// Checks 1-D positions form a contiguous run and returns the start.
    fn contiguous_start(positions: &[Position]) -> Result<i64> {
        let first = positions
            .first()
            .ok_or_else(|| SeqPeError::ConfigInvalid("empty position list".into()))?;
        if first.len() != 1 {
            return Err(SeqPeError::DimMismatch {
                expected: 1,
                got: first.len(),
            });
        }
        let start = first[0];
        for (i, p) in positions.iter().enumerate() {
            if p.len() != 1 || p[0] != start + i as i64 {
                return Err(SeqPeError::ConfigInvalid(
                    "this mode needs one contiguous ascending position window".into(),
                ));
            }
        }
        Ok(start)
    }

    /// Learned-table rows for the requested window (verbatim at the
    /// trained extent, linearly resized beyond it).
    fn learned_rows(&self, table: &ApeLearnTable, positions: &[Position]) -> Result<Tensor> {
        let dims = self.train_extent.len();
        if dims == 1 {
            let start = Self::contiguous_start(positions)?;
            if start != 0 {
                return Err(SeqPeError::UnsupportedExtent(format!(
                    "learned position table serves windows starting at 0, got start {start}"
                )));
            }
            table.interpolated(positions.len())
        } else {
            // Expect the row-major grid covering [0, eh) x [0, ew).
            let (mut eh, mut ew) = (0i64, 0i64);
            for p in positions {
                if p.len() != 2 {
                    return Err(SeqPeError::DimMismatch {
                        expected: 2,
                        got: p.len(),
                    });
                }
                eh = eh.max(p[0] + 1);
                ew = ew.max(p[1] + 1);
            }
            let (eh, ew) = (eh as usize, ew as usize);
            if positions.len() != eh * ew {
                return Err(SeqPeError::UnsupportedExtent(format!(
                    "learned grid table needs a full {eh}x{ew} grid, got {} positions",
                    positions.len()
                )));
            }
            for (idx, p) in positions.iter().enumerate() {
                let (want_y, want_x) = ((idx / ew) as i64, (idx % ew) as i64);
                if p[0] != want_y || p[1] != want_x {
                    return Err(SeqPeError::UnsupportedExtent(
                        "learned grid table needs row-major grid order from (0,0)".into(),
                    ));
                }
            }
            let train_hw = (self.train_extent[0] as usize, self.train_extent[1] as usize);
            table.interpolated_grid(train_hw, (eh, ew))
        }
    }

    /// Position-encoding contributions for one forward pass.  The result
    /// is shared by every layer (and every batch element, since a batch
    /// shares its position window).
    pub fn forward(&self, positions: &[Position]) -> Result<PeForward> {
        if positions.is_empty() {
            return Err(SeqPeError::ConfigInvalid("empty position list".into()));
        }
        let plain = |input_rows| PeForward {
            input_rows,
            attn: PeAttn::Plain,
        };
        Ok(match self.mode {
            PeMode::Nope => plain(None),
            PeMode::ApeSin => {
                Self::contiguous_start(positions)?; // any start; formula extends
                let scalars: Vec<i64> = positions.iter().map(|p| p[0]).collect();
                plain(Some(sinusoidal_rows(&scalars, self.d_model)?))
            }
            PeMode::ApeLearn => {
                let Backend::Learned(table) = &self.backend else {
                    unreachable!("learned mode constructs a learned backend")
                };
                plain(Some(self.learned_rows(table, positions)?))
            }
            PeMode::Rope { base } => PeForward {
                input_rows: None,
                attn: PeAttn::Rotary(RotaryMap {
                    base,
                    axial: false,
                    positions: positions.to_vec(),
                }),
            },
            PeMode::Rope2d { base } => PeForward {
                input_rows: None,
                attn: PeAttn::Rotary(RotaryMap {
                    base,
                    axial: true,
                    positions: positions.to_vec(),
                }),
            },
            PeMode::Alibi => {
                // The bias depends only on index distance, which equals
                // position distance exactly because the window is one
                // contiguous run.
                Self::contiguous_start(positions)?;
                let l = positions.len();
                let all = alibi_bias(l, self.heads)?.reshape(&[self.heads, l * l])?;
                let mut per_head = Vec::with_capacity(self.heads);
                for h in 0..self.heads {
                    per_head.push(all.select_rows(&[h])?.reshape(&[l, l])?);
                }
                PeForward {
                    input_rows: None,
                    attn: PeAttn::BiasPerHead(per_head),
                }
            }
            PeMode::SeqSum | PeMode::SeqMul | PeMode::SeqBias => {
                let Backend::Seq { projection, .. } = &self.backend else {
                    unreachable!("seq modes construct a seq backend")
                };
                let rows = self.seq_rows(positions)?;
                let (e_q, e_k) = projection.project(&rows)?;
                PeForward {
                    input_rows: None,
                    attn: PeAttn::Fused {
                        fuse: self.mode.fuse().expect("seq mode"),
                        e_q,
                        e_k,
                    },
                }
            }
        })
    }

    /// Raw position-embedding rows `[L, d_model]`, for similarity heatmaps
    /// and geometry probes.  Only methods with addressable embeddings have
    /// them.
    pub fn embeddings(&self, positions: &[Position]) -> Result<Tensor> {
        match self.mode {
            PeMode::SeqSum | PeMode::SeqMul | PeMode::SeqBias => self.seq_rows(positions),
            PeMode::ApeSin => {
                let mut scalars = Vec::with_capacity(positions.len());
                for p in positions {
                    if p.len() != 1 {
                        return Err(SeqPeError::DimMismatch {
                            expected: 1,
                            got: p.len(),
                        });
                    }
                    scalars.push(p[0]);
                }
                sinusoidal_rows(&scalars, self.d_model)
            }
            PeMode::ApeLearn => {
                let Backend::Learned(table) = &self.backend else {
                    unreachable!("learned mode constructs a learned backend")
                };
                self.learned_rows(table, positions)
            }
            _ => Err(SeqPeError::ConfigInvalid(format!(
                "mode {} has no addressable position embeddings",
                self.mode.name()
            ))),
        }
    }
}
