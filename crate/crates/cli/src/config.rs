//! Run configuration: a TOML file describing the task, the
//! position-encoding method, the model shape, and the training /
//! evaluation settings shared by every subcommand.
//!
//! ```toml
//! task = "lm"
//! pe = "seq-sum"
//! seed = 1
//!
//! [model]
//! d_model = 64
//! layers = 2
//! heads = 4
//! vocab = 128
//!
//! [positions]
//! base = 10
//! digits = 5
//! l_train = 64
//! l_max = [2048]
//!
//! [train]
//! steps = 2000
//! batch = 16
//! alpha = 0.1
//! beta = 0.1
//!
//! [eval]
//! extents = [64, 256]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqpe::positions::PosSeqConfig;
use seqpe::provider::PeMode;
use seqpe::regularizers::min_reg_batch_size;
use seqpe::{Result, SeqPeError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Next-token language modelling over 1-D positions.
    Lm,
    /// Marker-arrangement classification over a 2-D grid.
    Grid2d,
}

impl TaskKind {
    pub fn dims(self) -> usize {
        match self {
            TaskKind::Lm => 1,
            TaskKind::Grid2d => 2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Token vocabulary (language model only).
    pub vocab: usize,
    /// Class count (grid task only).
    pub classes: usize,
    /// Per-cell feature width (grid task only).
    pub feat_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 64,
            layers: 2,
            heads: 4,
            vocab: 128,
            classes: 4,
            feat_dim: 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PositionSection {
    /// Digit base for the sequential encoder.
    pub base: u32,
    /// Digits per coordinate.
    pub digits: usize,
    /// Training context length (language model).
    pub l_train: usize,
    /// Training grid (grid task).
    pub grid: [i64; 2],
    /// Regularizer position range per dimension; defaults to the training
    /// extent.
    pub l_max: Option<Vec<i64>>,
    /// Frequency base for the rotary modes.
    pub rope_base: f64,
    /// Digit-encoder depth (sequential modes).
    pub encoder_layers: usize,
    /// Digit-encoder head count (sequential modes).
    pub encoder_heads: usize,
}

impl Default for PositionSection {
    fn default() -> Self {
        PositionSection {
            base: 10,
            digits: 5,
            l_train: 64,
            grid: [8, 8],
            l_max: None,
            rope_base: seqpe::provider::DEFAULT_ROPE_BASE,
            encoder_layers: 2,
            encoder_heads: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Contrastive regularizer weight.
    pub alpha: f64,
    /// Out-of-range distillation weight.
    pub beta: f64,
    pub contrastive_batch: usize,
    pub distill_batch: usize,
    pub distill_heads: usize,
    /// Probability of training on a shifted position window.
    pub shift_prob: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 200,
            batch: 16,
            lr: 1e-3,
            warmup: 0,
            alpha: 0.0,
            beta: 0.0,
            contrastive_batch: 32,
            distill_batch: 32,
            distill_heads: 4,
            shift_prob: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `"periodic"` for the synthetic copy corpus, `"bytes"` for a raw
    /// byte file (256-token vocabulary).
    pub source: String,
    /// Byte file for `source = "bytes"`.
    pub path: Option<PathBuf>,
    /// Synthetic corpus length in tokens.
    pub length: usize,
    /// Copy distance of the periodic corpus.
    pub period: usize,
    /// Probability each token is the permuted copy of the one `period`
    /// back.
    pub copy_prob: f64,
    /// Generator seed for training data.
    pub seed: u64,
    /// Training-set size for the grid task.
    pub samples: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: "periodic".into(),
            path: None,
            length: 100_000,
            period: 16,
            copy_prob: 0.9,
            seed: 7,
            samples: 2048,
        }
    }
}

/// One evaluation extent: a context length for the language model or an
/// `[h, w]` grid for the classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExtentSpec {
    Len(i64),
    Grid([i64; 2]),
}

impl ExtentSpec {
    pub fn dims(&self) -> usize {
        match self {
            ExtentSpec::Len(_) => 1,
            ExtentSpec::Grid(_) => 2,
        }
    }

    pub fn bounds(&self) -> Vec<i64> {
        match self {
            ExtentSpec::Len(l) => vec![*l],
            ExtentSpec::Grid(g) => g.to_vec(),
        }
    }

    /// `"256"` or `"14x14"`, as written in evaluation CSV rows.
    pub fn label(&self) -> String {
        match self {
            ExtentSpec::Len(l) => l.to_string(),
            ExtentSpec::Grid([h, w]) => format!("{h}x{w}"),
        }
    }

    /// Parses a command-line extent: `256` or `14x14`.
    pub fn parse(s: &str) -> Result<ExtentSpec> {
        let bad = || {
            SeqPeError::ConfigInvalid(format!(
                "extent '{s}' is neither a length nor HxW"
            ))
        };
        if let Some((h, w)) = s.split_once('x') {
            let h: i64 = h.trim().parse().map_err(|_| bad())?;
            let w: i64 = w.trim().parse().map_err(|_| bad())?;
            Ok(ExtentSpec::Grid([h, w]))
        } else {
            Ok(ExtentSpec::Len(s.trim().parse().map_err(|_| bad())?))
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Extents to evaluate at; the training extent is a natural first
    /// entry.
    pub extents: Vec<ExtentSpec>,
    /// Held-out corpus length (language model).
    pub tokens: usize,
    /// Held-out sample count per extent (grid task).
    pub samples: usize,
    /// Held-out generator seed.
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            extents: vec![],
            tokens: 20_000,
            samples: 512,
            seed: 4242,
        }
    }
}

/// The whole run configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    /// Position-encoding mode name (see `PeMode::parse`).
    pub pe: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub positions: PositionSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_seed() -> u64 {
    1
}

impl RunConfig {
    /// Reads and validates a TOML run config.  Parse problems keep the
    /// line/column information from the TOML parser.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SeqPeError::ConfigInvalid(format!("cannot read {}: {e}", path.display()))
        })?;
        // The TOML error Display already carries line/column context.
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            SeqPeError::ConfigInvalid(format!("{}: {e}", path.display()))
        })?;
        if cfg.eval.extents.is_empty() {
            cfg.eval.extents = vec![cfg.train_extent_spec()];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The extent training runs at.
    pub fn train_extent(&self) -> Vec<i64> {
        match self.task {
            TaskKind::Lm => vec![self.positions.l_train as i64],
            TaskKind::Grid2d => self.positions.grid.to_vec(),
        }
    }

    pub fn train_extent_spec(&self) -> ExtentSpec {
        match self.task {
            TaskKind::Lm => ExtentSpec::Len(self.positions.l_train as i64),
            TaskKind::Grid2d => ExtentSpec::Grid(self.positions.grid),
        }
    }

    /// Regularizer position range (defaults to the training extent).
    pub fn reg_range(&self) -> Vec<i64> {
        self.positions
            .l_max
            .clone()
            .unwrap_or_else(|| self.train_extent())
    }

    pub fn mode(&self) -> Result<PeMode> {
        Ok(match PeMode::parse(&self.pe)? {
            PeMode::Rope { .. } => PeMode::Rope {
                base: self.positions.rope_base,
            },
            PeMode::Rope2d { .. } => PeMode::Rope2d {
                base: self.positions.rope_base,
            },
            m => m,
        })
    }

    /// Cross-field checks; returns human-readable warnings for settings
    /// that are legal but probably undersized.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mode = self.mode()?;
        let t = &self.train;
        if t.alpha < 0.0 || t.beta < 0.0 || !t.alpha.is_finite() || !t.beta.is_finite() {
            return Err(SeqPeError::ConfigInvalid(format!(
                "regularizer weights must be finite and non-negative, got alpha {} beta {}",
                t.alpha, t.beta
            )));
        }
        if (t.alpha > 0.0 || t.beta > 0.0) && !mode.is_seq() {
            return Err(SeqPeError::ConfigInvalid(format!(
                "embedding regularizers only apply to the sequential encoder; set alpha and \
                 beta to 0 for mode '{}'",
                mode.name()
            )));
        }
        if t.steps == 0 || t.batch == 0 {
            return Err(SeqPeError::ConfigInvalid(
                "training needs steps >= 1 and batch >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&t.shift_prob) {
            return Err(SeqPeError::ConfigInvalid(format!(
                "shift probability must lie in [0, 1], got {}",
                t.shift_prob
            )));
        }
        match self.data.source.as_str() {
            "periodic" => {}
            "bytes" => {
                if self.task != TaskKind::Lm {
                    return Err(SeqPeError::ConfigInvalid(
                        "byte corpora only feed the language-model task".into(),
                    ));
                }
                if self.data.path.is_none() {
                    return Err(SeqPeError::ConfigInvalid(
                        "data.source = \"bytes\" needs data.path".into(),
                    ));
                }
                if self.model.vocab != 256 {
                    return Err(SeqPeError::ConfigInvalid(format!(
                        "byte corpora use all 256 byte values; set model.vocab = 256 (got {})",
                        self.model.vocab
                    )));
                }
            }
            other => {
                return Err(SeqPeError::ConfigInvalid(format!(
                    "unknown data source '{other}' (expected 'periodic' or 'bytes')"
                )));
            }
        }
        let dims = self.task.dims();
        let reg = self.reg_range();
        if reg.len() != dims || reg.iter().any(|&b| b <= 0) {
            return Err(SeqPeError::ConfigInvalid(format!(
                "positions.l_max must list {dims} positive bound(s), got {reg:?}"
            )));
        }
        for e in &self.eval.extents {
            if e.dims() != dims {
                return Err(SeqPeError::ConfigInvalid(format!(
                    "eval extent {} does not fit a {dims}-dimensional task",
                    e.label()
                )));
            }
            if e.bounds().iter().any(|&b| b < 2) {
                return Err(SeqPeError::ConfigInvalid(format!(
                    "eval extent {} is too small (every bound must be >= 2)",
                    e.label()
                )));
            }
        }

        let mut warnings = Vec::new();
        if mode.is_seq() {
            let codec = PosSeqConfig::new(self.positions.base, self.positions.digits, dims)?;
            let bound = codec.coord_bound();
            let extents: Vec<(&str, Vec<i64>)> = std::iter::once(("training extent", self.train_extent()))
                .chain(std::iter::once(("regularizer range", reg.clone())))
                .chain(self.eval.extents.iter().map(|e| ("eval extent", e.bounds())))
                .collect();
            for (what, bs) in &extents {
                if bs.iter().any(|&b| b > bound) {
                    return Err(SeqPeError::ConfigInvalid(format!(
                        "{what} {bs:?} exceeds the largest representable bound {bound} \
                         (base {} with {} digits per coordinate)",
                        self.positions.base, self.positions.digits
                    )));
                }
            }
            // Distillation shifts draw from [0, base^digits - range]; with
            // no headroom the only shift is zero and the loss is inert.
            if t.beta > 0.0 && reg.iter().all(|&b| b >= bound) {
                warnings.push(format!(
                    "distillation shifts are all zero: the regularizer range {reg:?} fills the \
                     representable bound {bound}; leave headroom (l_max < base^digits)"
                ));
            }
        }
        if t.alpha > 0.0 || t.beta > 0.0 {
            let widest = reg.iter().copied().max().unwrap_or(1);
            let floor = min_reg_batch_size(widest);
            if t.alpha > 0.0 && t.contrastive_batch < floor {
                warnings.push(format!(
                    "contrastive batch {} is below the recommended floor {} for a position \
                     range of {}",
                    t.contrastive_batch, floor, widest
                ));
            }
            if t.beta > 0.0 && t.distill_batch < floor {
                warnings.push(format!(
                    "distillation batch {} is below the recommended floor {} for a position \
                     range of {}",
                    t.distill_batch, floor, widest
                ));
            }
        }
        Ok(warnings)
    }

    /// Canonical serialization used to fingerprint checkpoints and tables
    /// against the config that made them.  Evaluation settings are left
    /// out on purpose: they never influence the trained parameters, so
    /// measuring a checkpoint at new extents keeps the same fingerprint.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct DigestView<'a> {
            task: TaskKind,
            pe: &'a str,
            seed: u64,
            model: &'a ModelSection,
            positions: &'a PositionSection,
            train: &'a TrainSection,
            data: &'a DataSection,
        }
        let view = DigestView {
            task: self.task,
            pe: &self.pe,
            seed: self.seed,
            model: &self.model,
            positions: &self.positions,
            train: &self.train,
            data: &self.data,
        };
        let canonical = serde_json::to_string(&view).expect("config serializes");
        seqpe::numerics::checkpoint::config_hash(&canonical)
    }
}
