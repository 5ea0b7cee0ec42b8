//! Turns a [`RunConfig`] into live objects: the task model with its
//! position-encoding provider, the optimizer, data, regularizer settings,
//! and checkpoint save/load.

use std::path::Path;

use seqpe::numerics::adam::{Adam, AdamConfig};
use seqpe::numerics::checkpoint::{
    arrays_into_params, load_container, params_to_arrays, save_container, ContainerMeta,
};
use seqpe::numerics::rng::{streams, StreamRng};
use seqpe::numerics::ParamSet;
use seqpe::positions::PosSeqConfig;
use seqpe::provider::{PeProvider, ProviderConfig};
use seqpe::tasks::{
    Corpus, GridClassifier, GridClassifierConfig, GridDataset, RegConfig, TinyLm, TinyLmConfig,
};
use seqpe::{Result, SeqPeError};

use crate::config::{RunConfig, TaskKind};

/// A built task model (either flavor) plus its parameter set.
pub struct Built {
    pub params: ParamSet,
    pub model: TaskModel,
}

pub enum TaskModel {
    Lm(TinyLm),
    Grid(GridClassifier),
}

impl TaskModel {
    pub fn provider(&self) -> &PeProvider {
        match self {
            TaskModel::Lm(m) => m.provider(),
            TaskModel::Grid(m) => m.provider(),
        }
    }

    pub fn provider_mut(&mut self) -> &mut PeProvider {
        match self {
            TaskModel::Lm(m) => m.provider_mut(),
            TaskModel::Grid(m) => m.provider_mut(),
        }
    }
}

/// Constructs the model described by `cfg` with fresh initialization.
pub fn build(cfg: &RunConfig) -> Result<Built> {
    let mode = cfg.mode()?;
    let mut params = ParamSet::new();
    let root = StreamRng::new(cfg.seed);
    let mut init = root.stream(streams::INIT);
    let mut pcfg = ProviderConfig::new(
        mode,
        cfg.model.d_model,
        cfg.model.heads,
        cfg.train_extent(),
    );
    if mode.is_seq() {
        pcfg.pos = Some(PosSeqConfig {
            base: cfg.positions.base,
            digits_per_dim: cfg.positions.digits,
            dims: cfg.task.dims(),
        });
        pcfg.encoder_layers = cfg.positions.encoder_layers;
        pcfg.encoder_heads = cfg.positions.encoder_heads;
    }
    let provider = PeProvider::new(pcfg, &mut params, &mut init)?;
    let model = match cfg.task {
        TaskKind::Lm => {
            let mcfg = TinyLmConfig {
                vocab: cfg.model.vocab,
                d_model: cfg.model.d_model,
                layers: cfg.model.layers,
                heads: cfg.model.heads,
                l_train: cfg.positions.l_train,
            };
            TaskModel::Lm(TinyLm::new(mcfg, provider, &mut params, &mut init)?)
        }
        TaskKind::Grid2d => {
            let mcfg = GridClassifierConfig {
                classes: cfg.model.classes,
                feat_dim: cfg.model.feat_dim,
                d_model: cfg.model.d_model,
                layers: cfg.model.layers,
                heads: cfg.model.heads,
                grid: (cfg.positions.grid[0] as usize, cfg.positions.grid[1] as usize),
            };
            TaskModel::Grid(GridClassifier::new(mcfg, provider, &mut params, &mut init)?)
        }
    };
    Ok(Built { params, model })
}

pub fn optimizer(cfg: &RunConfig, params: &ParamSet) -> Adam {
    Adam::new(
        params,
        AdamConfig {
            lr: cfg.train.lr,
            warmup: cfg.train.warmup,
            ..AdamConfig::default()
        },
    )
}

pub fn reg_config(cfg: &RunConfig) -> RegConfig {
    RegConfig {
        weights: seqpe::regularizers::LossWeights {
            alpha: cfg.train.alpha,
            beta: cfg.train.beta,
        },
        l_max: cfg.reg_range(),
        contrastive_size: cfg.train.contrastive_batch,
        distill_size: cfg.train.distill_batch,
        distill_heads: cfg.train.distill_heads,
        shift_prob: cfg.train.shift_prob,
    }
}

/// Training corpus for the language model.
pub fn train_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match cfg.data.source.as_str() {
        "periodic" => Corpus::period_copy(
            cfg.data.seed,
            cfg.data.length,
            cfg.model.vocab,
            cfg.data.period,
            cfg.data.copy_prob,
        ),
        "bytes" => {
            let path = cfg.data.path.as_ref().expect("validated");
            Corpus::from_bytes_file(path)
        }
        other => Err(SeqPeError::ConfigInvalid(format!(
            "unknown data source '{other}'"
        ))),
    }
}

/// Held-out corpus for evaluation.  The synthetic generator reruns with
/// the evaluation seed; a byte corpus evaluates on the same file (the
/// non-overlapping evaluation chunks differ from the training windows).
pub fn eval_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match cfg.data.source.as_str() {
        "periodic" => Corpus::period_copy(
            cfg.eval.seed,
            cfg.eval.tokens,
            cfg.model.vocab,
            cfg.data.period,
            cfg.data.copy_prob,
        ),
        _ => train_corpus(cfg),
    }
}

/// Training set for the grid task at the training resolution.
pub fn train_dataset(cfg: &RunConfig) -> Result<GridDataset> {
    seqpe::tasks::synth2d_generate(
        cfg.data.seed,
        cfg.positions.grid[0] as usize,
        cfg.positions.grid[1] as usize,
        cfg.model.classes,
        cfg.model.feat_dim,
        cfg.data.samples,
    )
}

/// Saves the parameter set as a checkpoint stamped with the config
/// digest.
pub fn save_checkpoint(path: &Path, cfg: &RunConfig, params: &ParamSet, steps: usize) -> Result<()> {
    let mut meta = ContainerMeta::new("checkpoint", &cfg.digest());
    meta.extra.insert("steps".into(), steps.to_string());
    meta.extra.insert("pe".into(), cfg.pe.clone());
    save_container(path, &meta, &params_to_arrays(params))
}

/// Loads a checkpoint into an already-built parameter set, refusing files
/// made under a different config.
pub fn load_checkpoint(path: &Path, cfg: &RunConfig, params: &ParamSet) -> Result<()> {
    let (meta, arrays) = load_container(path)?;
    if meta.kind != "checkpoint" {
        return Err(SeqPeError::ContainerMismatch(format!(
            "{} holds a '{}' container, not a checkpoint",
            path.display(),
            meta.kind
        )));
    }
    if meta.config_hash != cfg.digest() {
        return Err(SeqPeError::ContainerMismatch(format!(
            "checkpoint {} was trained under a different config",
            path.display()
        )));
    }
    arrays_into_params(&arrays, params)
}
