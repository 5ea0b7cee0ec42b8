//! Combined-objective training steps for both tasks, and the evaluation
//! routines (chunked perplexity, accuracy at a grid resolution).
//!
//! Randomness discipline: every step derives a child generator from the
//! run seed and the step index, with separate streams for main batches,
//! window shifts, contrastive sets and distillation batches.  Disabling a
//! regularizer therefore never perturbs the main-task data, which is what
//! makes the zero-weight path bit-identical to main-only training.

use rand::Rng;

use crate::error::{Result, SeqPeError};
use crate::numerics::adam::Adam;
use crate::numerics::rng::{streams, StreamRng};
use crate::numerics::tensor::{no_grad, Tensor};
use crate::numerics::ParamSet;
use crate::positions::{
    sample_contrastive_set, sample_ood_batch, Position, Region, SampleStrategy,
};
use crate::regularizers::{
    apply_random_shift, contrastive_loss, ood_distill_loss, DistillBatch, LossWeights,
};
use crate::tasks::corpus::Corpus;
use crate::tasks::grid2d::{GridClassifier, GridDataset, GridSample};
use crate::tasks::lm::{base_window, TinyLm};

/// Regularizer settings for a training run.
#[derive(Clone, Debug)]
pub struct RegConfig {
    pub weights: LossWeights,
    /// Position range the regularizers cover, per dimension.
    pub l_max: Vec<i64>,
    /// Contrastive candidate-set size.
    pub contrastive_size: usize,
    /// Distillation batch size.
    pub distill_size: usize,
    /// Head split used for distillation similarity matrices.
    pub distill_heads: usize,
    /// Probability of moving a main batch to a shifted window.
    pub shift_prob: f64,
}

impl RegConfig {
    /// Paper-shaped defaults over a 1-D range.
    pub fn new_1d(l_max: i64) -> Self {
        RegConfig {
            weights: LossWeights::default(),
            l_max: vec![l_max],
            contrastive_size: 32,
            distill_size: 32,
            distill_heads: 4,
            shift_prob: 0.1,
        }
    }

    /// Both regularizers off (baseline training).
    pub fn disabled(l_max: Vec<i64>) -> Self {
        RegConfig {
            weights: LossWeights {
                alpha: 0.0,
                beta: 0.0,
            },
            l_max,
            contrastive_size: 32,
            distill_size: 32,
            distill_heads: 4,
            shift_prob: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.l_max.is_empty() || self.l_max.iter().any(|&b| b <= 0) {
            return Err(SeqPeError::ConfigInvalid(format!(
                "regularizer range must have positive bounds, got {:?}",
                self.l_max
            )));
        }
        if self.contrastive_size < 2 || self.distill_size < 2 || self.distill_heads == 0 {
            return Err(SeqPeError::ConfigInvalid(format!(
                "regularizer batch sizes need contrastive >= 2, distill >= 2, heads >= 1; got \
                 {} / {} / {}",
                self.contrastive_size, self.distill_size, self.distill_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.shift_prob) {
            return Err(SeqPeError::ConfigInvalid(format!(
                "shift probability must lie in [0, 1], got {}",
                self.shift_prob
            )));
        }
        Ok(())
    }

    fn region(&self) -> Result<Region> {
        Region::new(self.l_max.clone())
    }
}

/// Loss values reported by one training step.  The stored `total` is the
/// value actually backpropagated: `l_main + alpha * l_delta + beta *
/// l_ood` in that association order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub l_main: f64,
    pub l_delta: f64,
    pub l_ood: f64,
    pub total: f64,
}

/// Builds the weighted objective and the two regularizer losses (when
/// their weights are nonzero) around an already-computed main loss.
fn combine_objective(
    main: Tensor,
    encoder_source: Option<&crate::encoder::SeqPeEncoder>,
    reg: &RegConfig,
    step_rng: &StreamRng,
) -> Result<(Tensor, f64, f64)> {
    let alpha = reg.weights.alpha;
    let beta = reg.weights.beta;
    if alpha == 0.0 && beta == 0.0 {
        return Ok((main, 0.0, 0.0));
    }
    let encoder = encoder_source.ok_or_else(|| {
        SeqPeError::ConfigInvalid(
            "embedding regularizers need the sequential-digit encoder".into(),
        )
    })?;
    let pos_cfg = encoder.config().pos;
    let region = reg.region()?;
    region.check_against(&pos_cfg)?;
    let mut total = main;
    let mut delta_value = 0.0;
    if alpha > 0.0 {
        let mut rng = step_rng.stream(streams::CONTRASTIVE);
        let pivot: Position = region
            .bounds
            .iter()
            .map(|&b| rng.gen_range(0..b))
            .collect();
        let set = sample_contrastive_set(
            &pos_cfg,
            &pivot,
            reg.contrastive_size,
            &region,
            SampleStrategy::default_global(reg.contrastive_size),
            &mut rng,
        )?;
        let delta = contrastive_loss(encoder, &pivot, &set)?;
        delta_value = delta.item()?;
        total = total.add(&delta.mul_scalar(alpha))?;
    }
    let mut ood_value = 0.0;
    if beta > 0.0 {
        let mut rng = step_rng.stream(streams::DISTILL);
        let (teachers, shift) = sample_ood_batch(&pos_cfg, &region, reg.distill_size, &mut rng)?;
        let batch = DistillBatch {
            teachers,
            shift,
            head_count: reg.distill_heads,
        };
        let ood = ood_distill_loss(encoder, &batch)?;
        ood_value = ood.item()?;
        total = total.add(&ood.mul_scalar(beta))?;
    }
    Ok((total, delta_value, ood_value))
}

fn optimize(
    total: Tensor,
    params: &ParamSet,
    adam: &mut Adam,
    step: u64,
    l_main: f64,
    l_delta: f64,
    l_ood: f64,
) -> Result<StepMetrics> {
    let total_value = total.item()?;
    if !total_value.is_finite() {
        return Err(SeqPeError::Numeric(format!(
            "loss diverged at step {step}: {total_value}"
        )));
    }
    params.zero_grad();
    total.backward()?;
    adam.step(params)?;
    Ok(StepMetrics {
        step,
        l_main,
        l_delta,
        l_ood,
        total: total_value,
    })
}

/// The training window for this step: the zero-based window, moved as one
/// piece when the method supports shifted windows.
fn training_window(
    provider: &crate::provider::PeProvider,
    extent: &[i64],
    len_positions: Vec<Position>,
    shift_prob: f64,
    step_rng: &StreamRng,
) -> Result<Vec<Position>> {
    let Some(encoder) = provider.seq_encoder() else {
        return Ok(len_positions); // formula methods train on the base window
    };
    if !provider.mode().supports_shift() {
        return Ok(len_positions);
    }
    let mut rng = step_rng.stream(streams::SHIFT);
    let region = Region::new(extent.to_vec())?;
    let (shifted, _) = apply_random_shift(
        &encoder.config().pos,
        &region,
        &len_positions,
        shift_prob,
        &mut rng,
    )?;
    Ok(shifted)
}

/// One language-model training step on `corpus`.
pub fn lm_train_step(
    lm: &TinyLm,
    params: &ParamSet,
    adam: &mut Adam,
    corpus: &Corpus,
    batch_size: usize,
    reg: &RegConfig,
    run_rng: &StreamRng,
) -> Result<StepMetrics> {
    reg.validate()?;
    if batch_size == 0 {
        return Err(SeqPeError::ConfigInvalid("batch size must be positive".into()));
    }
    if corpus.vocab > lm.cfg.vocab {
        return Err(SeqPeError::Dataset(format!(
            "corpus vocabulary {} exceeds model vocabulary {}",
            corpus.vocab, lm.cfg.vocab
        )));
    }
    let len = lm.cfg.l_train;
    lm.check_train_context(len)?;
    let step = adam.step_count();
    let step_rng = run_rng.child(step);
    let windows = corpus.sample_windows(batch_size, len, &mut step_rng.stream(streams::BATCH))?;
    let positions = training_window(
        lm.provider(),
        &[len as i64],
        base_window(len),
        reg.shift_prob,
        &step_rng,
    )?;
    let main = lm.forward_loss(&windows, &positions)?;
    let l_main = main.item()?;
    let (total, l_delta, l_ood) =
        combine_objective(main, lm.provider().seq_encoder(), reg, &step_rng)?;
    optimize(total, params, adam, step, l_main, l_delta, l_ood)
}

/// One grid-classification training step on `dataset`.
pub fn grid_train_step(
    model: &GridClassifier,
    params: &ParamSet,
    adam: &mut Adam,
    dataset: &GridDataset,
    batch_size: usize,
    reg: &RegConfig,
    run_rng: &StreamRng,
) -> Result<StepMetrics> {
    reg.validate()?;
    if batch_size == 0 {
        return Err(SeqPeError::ConfigInvalid("batch size must be positive".into()));
    }
    if dataset.samples.is_empty() {
        return Err(SeqPeError::Dataset("empty dataset".into()));
    }
    let (h, w) = model.cfg.grid;
    if (dataset.h, dataset.w) != (h, w) || dataset.feat_dim != model.cfg.feat_dim {
        return Err(SeqPeError::Dataset(format!(
            "dataset is {}x{}x{}, model trains at {h}x{w}x{}",
            dataset.h, dataset.w, dataset.feat_dim, model.cfg.feat_dim
        )));
    }
    let step = adam.step_count();
    let step_rng = run_rng.child(step);
    let mut batch_rng = step_rng.stream(streams::BATCH);
    let batch: Vec<&GridSample> = (0..batch_size)
        .map(|_| &dataset.samples[batch_rng.gen_range(0..dataset.samples.len())])
        .collect();
    let positions = training_window(
        model.provider(),
        &[h as i64, w as i64],
        GridClassifier::grid_positions(h, w)?,
        reg.shift_prob,
        &step_rng,
    )?;
    let main = model.forward_loss_at(&batch, &positions, h, w)?;
    let l_main = main.item()?;
    let (total, l_delta, l_ood) =
        combine_objective(main, model.provider().seq_encoder(), reg, &step_rng)?;
    optimize(total, params, adam, step, l_main, l_delta, l_ood)
}

/// Perplexity over non-overlapping chunks of `chunk_len` tokens; the last
/// partial chunk is dropped.
pub fn eval_perplexity(lm: &TinyLm, corpus: &Corpus, chunk_len: usize) -> Result<f64> {
    if chunk_len < 2 {
        return Err(SeqPeError::ConfigInvalid(format!(
            "chunk length must be at least 2, got {chunk_len}"
        )));
    }
    if corpus.is_empty() {
        return Err(SeqPeError::Dataset("empty corpus".into()));
    }
    if corpus.len() < chunk_len {
        return Err(SeqPeError::Dataset(format!(
            "corpus of {} tokens has no complete chunk of {chunk_len}",
            corpus.len()
        )));
    }
    let window = base_window(chunk_len);
    let mut nlls = Vec::new();
    for chunk in corpus.tokens.chunks_exact(chunk_len) {
        let loss = no_grad(|| lm.forward_loss(&[chunk.to_vec()], &window))?;
        nlls.push(loss.item()?);
    }
    let mean = nlls.iter().sum::<f64>() / nlls.len() as f64;
    Ok(mean.exp())
}

/// Top-1 accuracy of the classifier on `dataset`, evaluated at the
/// dataset's own resolution.
pub fn eval_accuracy(model: &GridClassifier, dataset: &GridDataset) -> Result<f64> {
    if dataset.samples.is_empty() {
        return Err(SeqPeError::Dataset("empty dataset".into()));
    }
    let c = model.cfg.classes;
    let mut correct = 0usize;
    for group in dataset.samples.chunks(16) {
        let refs: Vec<&GridSample> = group.iter().collect();
        let logits = no_grad(|| model.forward_logits(&refs, dataset.h, dataset.w))?.to_vec();
        for (i, s) in group.iter().enumerate() {
            let row = &logits[i * c..(i + 1) * c];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .expect("non-empty row")
                .0;
            if pred == s.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.samples.len() as f64)
}

/// Generates a fresh held-out set at `h_eval x w_eval` and measures
/// accuracy there.  Methods that cannot serve the larger grid fail with
/// the underlying extent error.
pub fn eval_accuracy_at_resolution(
    model: &GridClassifier,
    seed: u64,
    h_eval: usize,
    w_eval: usize,
    count: usize,
) -> Result<f64> {
    let ds = crate::tasks::grid2d::synth2d_generate(
        seed,
        h_eval,
        w_eval,
        model.cfg.classes,
        model.cfg.feat_dim,
        count,
    )?;
    eval_accuracy(model, &ds)
}
