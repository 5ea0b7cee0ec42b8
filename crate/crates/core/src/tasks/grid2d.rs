//! Synthetic 2-D patch classification: three labelled marker patches are
//! planted on a noise grid in a class-specific orientation (rotations and
//! reflections of one fixed L-shaped constellation), so the label depends
//! on spatial arrangement rather than patch content.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SeqPeError};
use crate::numerics::rng::{fill_normal, streams, StreamRng};
use crate::numerics::tensor::Tensor;
use crate::numerics::ParamSet;
use crate::positions::{Position, Region};
use crate::provider::PeProvider;
use crate::tasks::backbone::{cross_entropy, ReadoutHead, TransformerBlock};

/// Marker amplitude; far above the noise floor so arrangement, not
/// detection, is the hard part.
const MARKER_GAIN: f64 = 3.0;
const NOISE_STD: f64 = 0.25;
/// The base constellation: marker 0 at (0,0), 1 at (0,1), 2 at (1,0).
const CONSTELLATION: [(i64, i64); 3] = [(0, 0), (0, 1), (1, 0)];
/// Rotations and reflections distinguishable once markers are labelled.
pub const MAX_CLASSES: usize = 8;

/// One grid of patch features with its arrangement class.
#[derive(Clone, Debug)]
pub struct GridSample {
    /// Row-major `h * w * feat_dim` values.
    pub features: Vec<f64>,
    pub label: usize,
}

/// A generated dataset at one resolution.
#[derive(Clone, Debug)]
pub struct GridDataset {
    pub h: usize,
    pub w: usize,
    pub feat_dim: usize,
    pub classes: usize,
    pub samples: Vec<GridSample>,
}

/// Marker cells for class `c`: the base constellation rotated `c % 4`
/// quarter turns, transposed first when `c >= 4`, then translated to
/// non-negative coordinates.
fn class_constellation(c: usize) -> [(i64, i64); 3] {
    let mut pts = CONSTELLATION;
    if c >= 4 {
        for p in &mut pts {
            *p = (p.1, p.0);
        }
    }
    for _ in 0..c % 4 {
        for p in &mut pts {
            *p = (p.1, -p.0);
        }
    }
    let min_y = pts.iter().map(|p| p.0).min().unwrap();
    let min_x = pts.iter().map(|p| p.1).min().unwrap();
    for p in &mut pts {
        *p = (p.0 - min_y, p.1 - min_x);
    }
    pts
}

/// Deterministic arrangement dataset: balanced labels, markers placed at
/// a uniform offset per sample, noise everywhere.
pub fn synth2d_generate(
    seed: u64,
    h: usize,
    w: usize,
    classes: usize,
    feat_dim: usize,
    count: usize,
) -> Result<GridDataset> {
    if h < 2 || w < 2 {
        return Err(SeqPeError::Dataset(format!(
            "grid must be at least 2x2, got {h}x{w}"
        )));
    }
    if classes < 2 || classes > MAX_CLASSES {
        return Err(SeqPeError::Dataset(format!(
            "classes must lie in [2, {MAX_CLASSES}], got {classes}"
        )));
    }
    if feat_dim < 3 {
        return Err(SeqPeError::Dataset(format!(
            "markers need at least 3 feature dims, got {feat_dim}"
        )));
    }
    let mut rng = StreamRng::new(seed).stream(streams::DATA);
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % classes;
        let pts = class_constellation(label);
        let span_y = pts.iter().map(|p| p.0).max().unwrap() as usize + 1;
        let span_x = pts.iter().map(|p| p.1).max().unwrap() as usize + 1;
        let off_y = rng.gen_range(0..=(h - span_y)) as i64;
        let off_x = rng.gen_range(0..=(w - span_x)) as i64;
        let mut features = vec![0.0; h * w * feat_dim];
        fill_normal(&mut rng, NOISE_STD, &mut features);
        for (marker, &(y, x)) in pts.iter().enumerate() {
            let cell = ((y + off_y) as usize * w + (x + off_x) as usize) * feat_dim;
            features[cell + marker] += MARKER_GAIN;
        }
        samples.push(GridSample { features, label });
    }
    Ok(GridDataset {
        h,
        w,
        feat_dim,
        classes,
        samples,
    })
}

/// Classifier shape.
#[derive(Clone, Copy, Debug)]
pub struct GridClassifierConfig {
    pub classes: usize,
    pub feat_dim: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Grid resolution used for training batches.
    pub grid: (usize, usize),
}

impl Default for GridClassifierConfig {
    fn default() -> Self {
        GridClassifierConfig {
            classes: 4,
            feat_dim: 8,
            d_model: 64,
            layers: 2,
            heads: 4,
            grid: (8, 8),
        }
    }
}

impl GridClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > MAX_CLASSES || self.feat_dim < 3 {
            return Err(SeqPeError::ConfigInvalid(format!(
                "classifier needs 2..={MAX_CLASSES} classes and >= 3 feature dims, got {} / {}",
                self.classes, self.feat_dim
            )));
        }
        if self.layers == 0 || self.grid.0 < 2 || self.grid.1 < 2 {
            return Err(SeqPeError::ConfigInvalid(format!(
                "classifier needs layers >= 1 and a >= 2x2 grid, got {} / {:?}",
                self.layers, self.grid
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

/// Bidirectional transformer over grid patches with mean-pooled readout.
pub struct GridClassifier {
    pub cfg: GridClassifierConfig,
    input: (Tensor, Tensor),
    blocks: Vec<TransformerBlock>,
    readout: ReadoutHead,
    provider: PeProvider,
}

impl GridClassifier {
    pub fn new(
        cfg: GridClassifierConfig,
        provider: PeProvider,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut data = vec![0.0; cfg.feat_dim * cfg.d_model];
        fill_normal(rng, 0.02, &mut data);
        let w = params.register(
            "input.weight",
            Tensor::leaf(&[cfg.feat_dim, cfg.d_model], data)?,
            false,
        )?;
        let b = params.register(
            "input.bias",
            Tensor::leaf(&[cfg.d_model], vec![0.0; cfg.d_model])?,
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
        let readout = ReadoutHead::new(cfg.d_model, cfg.classes, params, rng)?;
        Ok(GridClassifier {
            cfg,
            input: (w, b),
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

    /// Row-major positions of an `h x w` grid.
    pub fn grid_positions(h: usize, w: usize) -> Result<Vec<Position>> {
        Ok(Region::new(vec![h as i64, w as i64])?.iter().collect())
    }

    /// Class logits `[batch, classes]` for same-resolution samples.
    pub fn forward_logits(&self, samples: &[&GridSample], h: usize, w: usize) -> Result<Tensor> {
        self.forward_logits_at(samples, &Self::grid_positions(h, w)?, h, w)
    }

    /// Like [`forward_logits`](Self::forward_logits), with the cell
    /// positions given explicitly (row-major over the grid) so a training
    /// step can move the whole window.
    pub fn forward_logits_at(
        &self,
        samples: &[&GridSample],
        positions: &[Position],
        h: usize,
        w: usize,
    ) -> Result<Tensor> {
        let batch = samples.len();
        let cells = h * w;
        let f = self.cfg.feat_dim;
        if batch == 0 {
            return Err(SeqPeError::BadShape {
                op: "grid_forward",
                shape: vec![0],
                reason: "empty batch".into(),
            });
        }
        if positions.len() != cells {
            return Err(SeqPeError::BadShape {
                op: "grid_forward",
                shape: vec![positions.len()],
                reason: format!("need one position per cell of the {h}x{w} grid"),
            });
        }
        let mut flat = Vec::with_capacity(batch * cells * f);
        for s in samples {
            if s.features.len() != cells * f {
                return Err(SeqPeError::BadShape {
                    op: "grid_forward",
                    shape: vec![s.features.len()],
                    reason: format!("sample is not {h}x{w}x{f}"),
                });
            }
            flat.extend_from_slice(&s.features);
        }
        let pe = self.provider.forward(positions)?;
        let x = Tensor::from_vec(&[batch, cells, f], flat)?;
        let mut x = x.matmul(&self.input.0)?.add(&self.input.1)?;
        if let Some(rows) = &pe.input_rows {
            x = x.add(rows)?;
        }
        for block in &self.blocks {
            x = block.forward(&x, &pe.attn, false)?;
        }
        let hidden = self.readout.normalize(&x)?;
        // Mean over cells via a constant ones row per batch slice.
        let ones = Tensor::from_vec(&[batch, 1, cells], vec![1.0; batch * cells])?;
        let pooled = ones
            .matmul(&hidden)?
            .reshape(&[batch, self.cfg.d_model])?
            .mul_scalar(1.0 / cells as f64);
        self.readout.project(&pooled)
    }

    /// Mean classification cross-entropy.
    pub fn forward_loss(&self, samples: &[&GridSample], h: usize, w: usize) -> Result<Tensor> {
        self.forward_loss_at(samples, &Self::grid_positions(h, w)?, h, w)
    }

    /// [`forward_loss`](Self::forward_loss) with explicit cell positions.
    pub fn forward_loss_at(
        &self,
        samples: &[&GridSample],
        positions: &[Position],
        h: usize,
        w: usize,
    ) -> Result<Tensor> {
        let logits = self.forward_logits_at(samples, positions, h, w)?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        for &l in &labels {
            if l >= self.cfg.classes {
                return Err(SeqPeError::TokenOutOfRange {
                    what: "grid label",
                    id: l,
                    rows: self.cfg.classes,
                });
            }
        }
        cross_entropy(&logits, &labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::no_grad;
    use crate::provider::{PeMode, PeProvider, ProviderConfig};
    use rand::seq::SliceRandom;

    /// Reads the arrangement back out of the features: locate each
    /// marker's strongest cell, normalize the triangle, and match it
    /// against the class table.  `None` when the geometry matches no
    /// class.
    fn decode_arrangement(
        sample: &GridSample,
        h: usize,
        w: usize,
        feat_dim: usize,
    ) -> Option<usize> {
        let mut found = [(0i64, 0i64); 3];
        for marker in 0..3 {
            let (mut best, mut best_v) = (0usize, f64::NEG_INFINITY);
            for cell in 0..h * w {
                let v = sample.features[cell * feat_dim + marker];
                if v > best_v {
                    best_v = v;
                    best = cell;
                }
            }
            found[marker] = ((best / w) as i64, (best % w) as i64);
        }
        let min_y = found.iter().map(|p| p.0).min().unwrap();
        let min_x = found.iter().map(|p| p.1).min().unwrap();
        for p in &mut found {
            *p = (p.0 - min_y, p.1 - min_x);
        }
        (0..MAX_CLASSES).find(|&c| class_constellation(c) == found)
    }

    #[test]
    fn class_constellations_are_distinct_and_in_bounds() {
        let all: Vec<_> = (0..MAX_CLASSES).map(class_constellation).collect();
        for (i, a) in all.iter().enumerate() {
            for p in a {
                assert!(p.0 >= 0 && p.0 <= 1 && p.1 >= 0 && p.1 <= 1, "class {i} leaves 2x2");
            }
            for (j, b) in all.iter().enumerate().skip(i + 1) {
                assert_ne!(a, b, "classes {i} and {j} collide");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = synth2d_generate(5, 6, 6, 4, 8, 101).unwrap();
        let b = synth2d_generate(5, 6, 6, 4, 8, 101).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.features, y.features);
            assert_eq!(x.label, y.label);
        }
        let mut counts = [0usize; 4];
        for s in &a.samples {
            counts[s.label] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1, "label counts {counts:?}");
        assert!(synth2d_generate(1, 1, 6, 4, 8, 10).is_err());
        assert!(synth2d_generate(1, 6, 6, 9, 8, 10).is_err());
        assert!(synth2d_generate(1, 6, 6, 4, 2, 10).is_err());
    }

    #[test]
    fn labels_are_recoverable_from_geometry() {
        let ds = synth2d_generate(9, 8, 8, 8, 8, 200).unwrap();
        for s in &ds.samples {
            assert_eq!(decode_arrangement(s, 8, 8, 8), Some(s.label));
        }
    }

    #[test]
    fn shuffling_cells_breaks_the_arrangement() {
        // The same multiset of patches in a different arrangement must
        // stop decoding to the original label almost always.
        let ds = synth2d_generate(11, 6, 6, 8, 8, 300).unwrap();
        let mut rng = StreamRng::new(12).stream(streams::DATA);
        let mut changed = 0usize;
        for s in &ds.samples {
            let mut order: Vec<usize> = (0..36).collect();
            order.shuffle(&mut rng);
            let mut shuffled = vec![0.0; s.features.len()];
            for (dst, &src) in order.iter().enumerate() {
                shuffled[dst * 8..(dst + 1) * 8].copy_from_slice(&s.features[src * 8..(src + 1) * 8]);
            }
            let moved = GridSample {
                features: shuffled,
                label: s.label,
            };
            if decode_arrangement(&moved, 6, 6, 8) != Some(s.label) {
                changed += 1;
            }
        }
        let rate = changed as f64 / ds.samples.len() as f64;
        assert!(rate >= 0.9, "only {rate} of shuffles changed the label");
    }

    #[test]
    fn untrained_classifier_sits_at_uniform_entropy() {
        let cfg = GridClassifierConfig {
            d_model: 64,
            layers: 2,
            heads: 4,
            classes: 4,
            feat_dim: 8,
            grid: (6, 6),
        };
        let mut params = ParamSet::new();
        let mut r = StreamRng::new(3).stream(streams::INIT);
        let provider = PeProvider::new(
            ProviderConfig::new(PeMode::Rope2d { base: 100.0 }, 64, 4, vec![6, 6]),
            &mut params,
            &mut r,
        )
        .unwrap();
        let model = GridClassifier::new(cfg, provider, &mut params, &mut r).unwrap();
        let ds = synth2d_generate(4, 6, 6, 4, 8, 32).unwrap();
        let refs: Vec<&GridSample> = ds.samples.iter().collect();
        let loss = no_grad(|| model.forward_loss(&refs, 6, 6))
            .unwrap()
            .item()
            .unwrap();
        assert!((loss - 4f64.ln()).abs() < 0.05, "untrained loss {loss}");
    }

    #[test]
    fn pooling_makes_logits_cell_count_invariant_in_scale() {
        // Mean pooling: duplicating a batch row changes nothing.
        let cfg = GridClassifierConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            classes: 4,
            feat_dim: 8,
            grid: (4, 4),
        };
        let mut params = ParamSet::new();
        let mut r = StreamRng::new(5).stream(streams::INIT);
        let provider = PeProvider::new(
            ProviderConfig::new(PeMode::Nope, 16, 2, vec![4, 4]),
            &mut params,
            &mut r,
        )
        .unwrap();
        let model = GridClassifier::new(cfg, provider, &mut params, &mut r).unwrap();
        let ds = synth2d_generate(6, 4, 4, 4, 8, 2).unwrap();
        let one = no_grad(|| model.forward_logits(&[&ds.samples[0]], 4, 4))
            .unwrap()
            .to_vec();
        let twice = no_grad(|| model.forward_logits(&[&ds.samples[0], &ds.samples[0]], 4, 4))
            .unwrap()
            .to_vec();
        assert_eq!(twice[..4], one[..], "first copy");
        assert_eq!(twice[4..], one[..], "second copy");
    }
}
