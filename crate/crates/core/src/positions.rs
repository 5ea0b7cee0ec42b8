//! Positions as digit sequences, distances between them, and the sampling
//! procedures that feed the embedding-geometry regularizers.
//!
//! An n-dimensional position is spelled out, coordinate by coordinate, as
//! fixed-width base-`b` digit strings (most significant digit first, left
//! padded with zeros) and concatenated in dimension order.  With `b = 10`,
//! `k = 2`, the 2-D position `(2, 3)` becomes the digit row
//! `[0, 2, 0, 3]`.  The layout is positional and fixed width, so slot
//! `t < n*k` always holds digit place `t % k` of dimension `t / k`.
//!
//! The sampling half of the module draws the candidate sets used to shape
//! embedding geometry: lexically perturbed neighbours, global/local
//! contrastive candidate sets with their nearest-positive, teacher batches
//! with a random shift, all driven by an explicit RNG for reproducibility.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::error::{Result, SeqPeError};

/// An n-dimensional position; all coordinates are non-negative.
pub type Position = Vec<i64>;

/// Digit-rendering parameters: base, digits per dimension, dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosSeqConfig {
    /// Numeral base `b >= 2`; digit token ids are `0..b`, the readout token
    /// id is `b`.
    pub base: u32,
    /// Fixed digit count `k >= 1` per coordinate.
    pub digits_per_dim: usize,
    /// Number of coordinates `n >= 1`.
    pub dims: usize,
}

impl PosSeqConfig {
    pub fn new(base: u32, digits_per_dim: usize, dims: usize) -> Result<Self> {
        let cfg = PosSeqConfig {
            base,
            digits_per_dim,
            dims,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base < 2 {
            return Err(SeqPeError::ConfigInvalid(format!(
                "digit base must be at least 2, got {}",
                self.base
            )));
        }
        if self.digits_per_dim == 0 || self.dims == 0 {
            return Err(SeqPeError::ConfigInvalid(
                "digits_per_dim and dims must be positive".into(),
            ));
        }
        // The per-dimension range must fit i64 arithmetic comfortably.
        let bound = (self.base as i64).checked_pow(self.digits_per_dim as u32);
        if bound.is_none() {
            return Err(SeqPeError::ConfigInvalid(format!(
                "base {} with {} digits overflows the coordinate range",
                self.base, self.digits_per_dim
            )));
        }
        Ok(())
    }

    /// Token id of the readout token (one past the largest digit).
    pub fn readout_id(&self) -> usize {
        self.base as usize
    }

    /// Digit-token vocabulary size including the readout token: `b + 1`.
    pub fn vocab_size(&self) -> usize {
        self.base as usize + 1
    }

    /// Tokens per rendered position including the readout token.
    pub fn seq_len(&self) -> usize {
        self.dims * self.digits_per_dim + 1
    }

    /// Exclusive upper bound of one coordinate: `b^k`.
    pub fn coord_bound(&self) -> i64 {
        (self.base as i64).pow(self.digits_per_dim as u32)
    }

    /// Largest representable coordinate, `b^k - 1`.
    pub fn max_coord(&self) -> i64 {
        self.coord_bound() - 1
    }

    /// Renders a position as its digit ids: per dimension, `k` digits most
    /// significant first, dimensions concatenated in coordinate order.
    pub fn to_digits(&self, pos: &[i64]) -> Result<Vec<usize>> {
        if pos.len() != self.dims {
            return Err(SeqPeError::DimMismatch {
                expected: self.dims,
                got: pos.len(),
            });
        }
        let mut digits = Vec::with_capacity(self.dims * self.digits_per_dim);
        for &c in pos {
            if c < 0 || c > self.max_coord() {
                return Err(SeqPeError::PositionOutOfRange {
                    value: c,
                    base: self.base,
                    digits: self.digits_per_dim,
                    max: self.max_coord(),
                });
            }
            let b = self.base as i64;
            let start = digits.len();
            digits.resize(start + self.digits_per_dim, 0usize);
            let mut rest = c;
            for slot in (0..self.digits_per_dim).rev() {
                digits[start + slot] = (rest % b) as usize;
                rest /= b;
            }
        }
        Ok(digits)
    }

    /// Exact inverse of [`PosSeqConfig::to_digits`].
    pub fn from_digits(&self, digits: &[usize]) -> Result<Position> {
        if digits.len() != self.dims * self.digits_per_dim {
            return Err(SeqPeError::BadShape {
                op: "from_digits",
                shape: vec![digits.len()],
                reason: format!("expected {} digit tokens", self.dims * self.digits_per_dim),
            });
        }
        let b = self.base as i64;
        let mut pos = Vec::with_capacity(self.dims);
        for d in 0..self.dims {
            let mut c: i64 = 0;
            for j in 0..self.digits_per_dim {
                let id = digits[d * self.digits_per_dim + j];
                if id >= self.base as usize {
                    return Err(SeqPeError::TokenOutOfRange {
                        what: "from_digits",
                        id,
                        rows: self.base as usize,
                    });
                }
                c = c * b + id as i64;
            }
            pos.push(c);
        }
        Ok(pos)
    }
}

/// Euclidean distance between two positions of equal dimensionality.
pub fn distance(p: &[i64], q: &[i64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(SeqPeError::DimMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    let mut acc = 0.0f64;
    for (a, b) in p.iter().zip(q) {
        let d = (a - b) as f64;
        acc += d * d;
    }
    Ok(acc.sqrt())
}

/// An axis-aligned box of positions: per-dimension exclusive upper bounds,
/// all lower bounds at zero.  Serves as both the training range for the
/// regularizers and the coverage of precomputed tables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub bounds: Vec<i64>,
}

impl Region {
    pub fn new(bounds: Vec<i64>) -> Result<Self> {
        if bounds.is_empty() || bounds.iter().any(|&b| b <= 0) {
            return Err(SeqPeError::ConfigInvalid(format!(
                "region bounds must be positive, got {bounds:?}"
            )));
        }
        Ok(Region { bounds })
    }

    /// Checks the region is addressable under the codec: same rank, bounds
    /// within `b^k`.
    pub fn check_against(&self, cfg: &PosSeqConfig) -> Result<()> {
        if self.bounds.len() != cfg.dims {
            return Err(SeqPeError::DimMismatch {
                expected: cfg.dims,
                got: self.bounds.len(),
            });
        }
        for &b in &self.bounds {
            if b > cfg.coord_bound() {
                return Err(SeqPeError::ConfigInvalid(format!(
                    "region bound {b} exceeds representable range {}",
                    cfg.coord_bound()
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.bounds.len()
    }

    /// Number of positions in the region.
    pub fn count(&self) -> usize {
        self.bounds.iter().map(|&b| b as usize).product()
    }

    pub fn contains(&self, pos: &[i64]) -> bool {
        pos.len() == self.bounds.len()
            && pos.iter().zip(&self.bounds).all(|(&c, &b)| c >= 0 && c < b)
    }

    /// Row-major rank of a position inside the region (last dimension
    /// fastest), matching [`Region::iter`] order.
    pub fn flat_index(&self, pos: &[i64]) -> Result<usize> {
        if !self.contains(pos) {
            return Err(SeqPeError::ConfigInvalid(format!(
                "position {pos:?} outside region {:?}",
                self.bounds
            )));
        }
        let mut idx = 0usize;
        for (c, b) in pos.iter().zip(&self.bounds) {
            idx = idx * *b as usize + *c as usize;
        }
        Ok(idx)
    }

    /// The position at a given row-major rank.
    pub fn position_at(&self, mut idx: usize) -> Result<Position> {
        if idx >= self.count() {
            return Err(SeqPeError::ConfigInvalid(format!(
                "flat index {idx} outside region of {}",
                self.count()
            )));
        }
        let mut pos = vec![0i64; self.bounds.len()];
        for d in (0..self.bounds.len()).rev() {
            let b = self.bounds[d] as usize;
            pos[d] = (idx % b) as i64;
            idx /= b;
        }
        Ok(pos)
    }

    /// All positions in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = Position> + '_ {
        (0..self.count()).map(move |i| self.position_at(i).expect("index in range"))
    }
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

/// How a contrastive candidate set is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleStrategy {
    /// Lexically perturbed neighbours plus uniform draws over the whole
    /// region; the positive comes from the uniform part.
    Global {
        /// Number of lexically perturbed candidates (`m/4` by default, see
        /// [`SampleStrategy::default_global`]); must be < m.
        lexical: usize,
    },
    /// All candidates drawn from a random window of width `max(256, m)` per
    /// dimension.
    Local,
}

impl SampleStrategy {
    /// Global sampling with the default lexical share of `m/4`.
    pub fn default_global(m: usize) -> SampleStrategy {
        SampleStrategy::Global { lexical: m / 4 }
    }
}

/// A contrastive candidate set: `candidates[positive]` is the nearest
/// (eligible) candidate to the pivot.
#[derive(Clone, Debug)]
pub struct ContrastiveSet {
    pub candidates: Vec<Position>,
    pub positive: usize,
}

fn natural_digits(mut value: i64, base: i64) -> Vec<i64> {
    // Most significant first, no padding; 0 renders as [0].
    if value == 0 {
        return vec![0];
    }
    let mut rev = Vec::new();
    while value > 0 {
        rev.push(value % base);
        value /= base;
    }
    rev.reverse();
    rev
}

/// Applies one random string edit (swap two digits, remove a digit, or add
/// a digit) to the *unpadded* digit string of one coordinate, re-parses and
/// clamps into `[0, b^k)`.  Total by construction: degenerate edits clamp
/// (empty string parses to 0, overflow clamps to the max coordinate), and
/// the result may equal the input.
pub fn lexical_perturb(cfg: &PosSeqConfig, p: &[i64], rng: &mut ChaCha8Rng) -> Result<Position> {
    if p.len() != cfg.dims {
        return Err(SeqPeError::DimMismatch {
            expected: cfg.dims,
            got: p.len(),
        });
    }
    let dim = if cfg.dims == 1 {
        0
    } else {
        rng.gen_range(0..cfg.dims)
    };
    let b = cfg.base as i64;
    let mut digits = natural_digits(p[dim], b);
    match rng.gen_range(0..3u32) {
        0 => {
            // Swap two distinct slots; a 1-digit string has nothing to swap.
            if digits.len() >= 2 {
                let i = rng.gen_range(0..digits.len());
                let mut j = rng.gen_range(0..digits.len() - 1);
                if j >= i {
                    j += 1;
                }
                digits.swap(i, j);
            }
        }
        1 => {
            let i = rng.gen_range(0..digits.len());
            digits.remove(i);
        }
        2 => {
            let i = rng.gen_range(0..=digits.len());
            let d = rng.gen_range(0..b);
            digits.insert(i, d);
        }
        _ => unreachable!(),
    }
    let mut value: i64 = 0;
    for &d in &digits {
        value = value * b + d;
        if value > cfg.max_coord() {
            value = cfg.max_coord();
            break;
        }
    }
    let mut out = p.to_vec();
    out[dim] = value;
    Ok(out)
}

/// Draws one uniform position from a per-dimension box `[lo_i, hi_i)`.
fn uniform_in_box(lo: &[i64], hi: &[i64], rng: &mut ChaCha8Rng) -> Position {
    lo.iter()
        .zip(hi)
        .map(|(&l, &h)| rng.gen_range(l..h))
        .collect()
}

/// Rejection-samples `count` distinct positions from the box, skipping
/// anything in `taken`; inserts accepted draws into `taken`.
fn distinct_from_box(
    lo: &[i64],
    hi: &[i64],
    count: usize,
    taken: &mut HashSet<Position>,
    out: &mut Vec<Position>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let available: usize = lo
        .iter()
        .zip(hi)
        .map(|(&l, &h)| (h - l) as usize)
        .product();
    let blocked = taken
        .iter()
        .filter(|p| p.iter().zip(lo.iter().zip(hi)).all(|(&c, (&l, &h))| c >= l && c < h))
        .count();
    if available < blocked + count {
        return Err(SeqPeError::RegionTooSmall {
            wanted: count,
            available: available.saturating_sub(blocked),
        });
    }
    let mut attempts = 0usize;
    let max_attempts = 64 * count.max(1) + 64;
    let mut produced = 0usize;
    while produced < count {
        if attempts >= max_attempts {
            // Dense exclusion made rejection sampling impractical.
            return Err(SeqPeError::RegionTooSmall {
                wanted: count,
                available: available - blocked,
            });
        }
        attempts += 1;
        let cand = uniform_in_box(lo, hi, rng);
        if taken.insert(cand.clone()) {
            out.push(cand);
            produced += 1;
        }
    }
    Ok(())
}

/// Index of the candidate minimising Euclidean distance to `pivot` among
/// `eligible` indices; ties broken by lexicographically smallest position.
fn argmin_delta(pivot: &[i64], candidates: &[Position], eligible: std::ops::Range<usize>) -> usize {
    let mut best = eligible.start;
    let mut best_d = f64::INFINITY;
    for i in eligible {
        let d = distance(pivot, &candidates[i]).expect("same dims");
        if d < best_d || (d == best_d && candidates[i] < candidates[best]) {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Draws the candidate set for one contrastive example.
///
/// Global: `lexical` perturbed neighbours of the pivot (anywhere
/// representable) followed by `m - lexical` uniform distinct draws from the
/// region; the positive is the distance-argmin over the uniform part only.
/// Local: a window of width `max(256, m)` per dimension is placed uniformly
/// inside the region, all `m` candidates drawn from it, and the positive is
/// the argmin over the whole set.  The pivot itself never appears among the
/// candidates; distance ties break toward the lexicographically smallest
/// candidate.
pub fn sample_contrastive_set(
    cfg: &PosSeqConfig,
    pivot: &[i64],
    m: usize,
    region: &Region,
    strategy: SampleStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<ContrastiveSet> {
    region.check_against(cfg)?;
    if pivot.len() != cfg.dims {
        return Err(SeqPeError::DimMismatch {
            expected: cfg.dims,
            got: pivot.len(),
        });
    }
    if m < 2 {
        return Err(SeqPeError::ConfigInvalid(format!(
            "contrastive set needs m >= 2, got {m}"
        )));
    }
    let mut taken: HashSet<Position> = HashSet::new();
    taken.insert(pivot.to_vec());
    let mut candidates: Vec<Position> = Vec::with_capacity(m);
    let zeros = vec![0i64; cfg.dims];

    match strategy {
        SampleStrategy::Global { lexical } => {
            if lexical >= m {
                return Err(SeqPeError::ConfigInvalid(format!(
                    "lexical share {lexical} must leave at least one uniform candidate of {m}"
                )));
            }
            let full_hi = vec![cfg.coord_bound(); cfg.dims];
            for _ in 0..lexical {
                let mut placed = false;
                for _ in 0..16 {
                    let q = lexical_perturb(cfg, pivot, rng)?;
                    if taken.insert(q.clone()) {
                        candidates.push(q);
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    // Perturbations keep colliding (tiny ranges); fall back
                    // to a uniform representable draw so the call stays
                    // total.
                    distinct_from_box(&zeros, &full_hi, 1, &mut taken, &mut candidates, rng)?;
                }
            }
            let uniform_start = candidates.len();
            distinct_from_box(
                &zeros,
                &region.bounds,
                m - lexical,
                &mut taken,
                &mut candidates,
                rng,
            )?;
            let positive = argmin_delta(pivot, &candidates, uniform_start..candidates.len());
            Ok(ContrastiveSet {
                candidates,
                positive,
            })
        }
        SampleStrategy::Local => {
            let w = 256.max(m) as i64;
            let mut lo = Vec::with_capacity(cfg.dims);
            let mut hi = Vec::with_capacity(cfg.dims);
            for &limit in &region.bounds {
                let start = if limit > w {
                    rng.gen_range(0..=(limit - w))
                } else {
                    0
                };
                lo.push(start);
                hi.push((start + w).min(limit));
            }
            distinct_from_box(&lo, &hi, m, &mut taken, &mut candidates, rng)?;
            let positive = argmin_delta(pivot, &candidates, 0..candidates.len());
            Ok(ContrastiveSet {
                candidates,
                positive,
            })
        }
    }
}

/// Samples a start-shift `z` with each `z_i` uniform over
/// `[0, b^k - L_i]` inclusive, so any position in the region stays
/// representable after the shift.
pub fn sample_shift(cfg: &PosSeqConfig, region: &Region, rng: &mut ChaCha8Rng) -> Result<Vec<i64>> {
    region.check_against(cfg)?;
    Ok(region
        .bounds
        .iter()
        .map(|&limit| rng.gen_range(0..=(cfg.coord_bound() - limit)))
        .collect())
}

/// Draws `m` distinct teacher positions from the region plus one shift
/// vector; student positions `p + z` are representable by the shift bound.
pub fn sample_ood_batch(
    cfg: &PosSeqConfig,
    region: &Region,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Position>, Vec<i64>)> {
    region.check_against(cfg)?;
    if region.count() < m {
        return Err(SeqPeError::RegionTooSmall {
            wanted: m,
            available: region.count(),
        });
    }
    let idxs = crate::numerics::rng::sample_distinct(rng, region.count(), m);
    let teachers: Vec<Position> = idxs
        .into_iter()
        .map(|i| region.position_at(i).expect("index in range"))
        .collect();
    let z = sample_shift(cfg, region, rng)?;
    Ok((teachers, z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::StreamRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        StreamRng::new(seed).stream(0)
    }

    #[test]
    fn two_dim_digits_are_left_padded() {
        let cfg = PosSeqConfig::new(10, 2, 2).unwrap();
        assert_eq!(cfg.to_digits(&[2, 3]).unwrap(), vec![0, 2, 0, 3]);
    }

    #[test]
    fn one_dim_digits_no_padding_needed() {
        let cfg = PosSeqConfig::new(10, 3, 1).unwrap();
        assert_eq!(cfg.to_digits(&[123]).unwrap(), vec![1, 2, 3]);
        assert_eq!(cfg.to_digits(&[7]).unwrap(), vec![0, 0, 7]);
    }

    #[test]
    fn out_of_range_rejected() {
        let cfg = PosSeqConfig::new(10, 3, 1).unwrap();
        assert!(matches!(
            cfg.to_digits(&[1000]),
            Err(SeqPeError::PositionOutOfRange { max: 999, .. })
        ));
        assert!(cfg.to_digits(&[-1]).is_err());
        assert!(matches!(
            cfg.to_digits(&[1, 2]),
            Err(SeqPeError::DimMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn from_digits_inverts_to_digits() {
        let cfg = PosSeqConfig::new(10, 2, 2).unwrap();
        assert_eq!(cfg.from_digits(&[0, 2, 0, 3]).unwrap(), vec![2, 3]);
        let cfg5 = PosSeqConfig::new(10, 5, 1).unwrap();
        assert_eq!(cfg5.from_digits(&[0, 0, 0, 0, 0]).unwrap(), vec![0]);
        assert!(cfg5.from_digits(&[0, 0, 0, 0, 10]).is_err());
        assert!(cfg5.from_digits(&[0, 0, 0]).is_err());
    }

    #[test]
    fn codec_roundtrip_exhaustive_10x10() {
        let cfg = PosSeqConfig::new(10, 2, 2).unwrap();
        let region = Region::new(vec![100, 100]).unwrap();
        for p in region.iter() {
            let digits = cfg.to_digits(&p).unwrap();
            assert_eq!(cfg.from_digits(&digits).unwrap(), p);
        }
    }

    #[test]
    fn distance_is_euclidean() {
        assert_eq!(distance(&[0, 0], &[3, 4]).unwrap(), 5.0);
        assert_eq!(distance(&[100], &[123]).unwrap(), 23.0);
        assert_eq!(distance(&[100], &[1000]).unwrap(), 900.0);
        assert_eq!(distance(&[7], &[7]).unwrap(), 0.0);
        assert!(distance(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn region_flat_index_roundtrip_row_major() {
        let r = Region::new(vec![3, 4]).unwrap();
        assert_eq!(r.count(), 12);
        assert_eq!(r.flat_index(&[0, 1]).unwrap(), 1);
        assert_eq!(r.flat_index(&[1, 0]).unwrap(), 4);
        for i in 0..r.count() {
            let p = r.position_at(i).unwrap();
            assert_eq!(r.flat_index(&p).unwrap(), i);
        }
        assert!(!r.contains(&[3, 0]));
        assert!(r.flat_index(&[0, 4]).is_err());
    }

    #[test]
    fn lexical_perturb_stays_in_range() {
        let cfg = PosSeqConfig::new(10, 5, 1).unwrap();
        let mut r = rng(1);
        for _ in 0..1000 {
            let q = lexical_perturb(&cfg, &[123], &mut r).unwrap();
            assert_eq!(q.len(), 1);
            assert!(q[0] >= 0 && q[0] < cfg.coord_bound(), "escaped range: {q:?}");
        }
    }

    #[test]
    fn lexical_perturb_produces_known_edit_classes() {
        // Over many draws of 123 we must see swaps (321, 213, 132),
        // removals (23, 13, 12) and insertions (4-digit strings).
        let cfg = PosSeqConfig::new(10, 5, 1).unwrap();
        let mut r = rng(2);
        let mut seen_swap = false;
        let mut seen_short = false;
        let mut seen_long = false;
        for _ in 0..500 {
            let q = lexical_perturb(&cfg, &[123], &mut r).unwrap()[0];
            if [321, 213, 132].contains(&q) {
                seen_swap = true;
            }
            if q < 100 {
                seen_short = true;
            }
            if q >= 1000 {
                seen_long = true;
            }
        }
        assert!(seen_swap && seen_short && seen_long);
    }

    #[test]
    fn lexical_perturb_degenerate_single_digit() {
        // Removing the only digit of 5 parses the empty string to 0.
        let cfg = PosSeqConfig::new(10, 5, 1).unwrap();
        let mut r = rng(3);
        let mut seen_zero = false;
        for _ in 0..200 {
            let q = lexical_perturb(&cfg, &[5], &mut r).unwrap()[0];
            assert!((0..cfg.coord_bound()).contains(&q));
            if q == 0 {
                seen_zero = true;
            }
        }
        assert!(seen_zero, "remove-digit edit never hit the empty string");
    }

    #[test]
    fn contrastive_positive_is_brute_force_argmin() {
        let cfg = PosSeqConfig::new(10, 5, 1).unwrap();
        let region = Region::new(vec![2000]).unwrap();
        let mut r = rng(4);
        for trial in 0..1000 {
            let pivot = vec![r.gen_range(0..2000)];
            let strategy = if trial % 2 == 0 {
                SampleStrategy::default_global(8)
            } else {
                SampleStrategy::Local
            };
            let set = sample_contrastive_set(&cfg, &pivot, 8, &region, strategy, &mut r).unwrap();
            assert_eq!(set.candidates.len(), 8);
            assert!(!set.candidates.contains(&pivot), "pivot inside candidates");
            let distinct: HashSet<_> = set.candidates.iter().collect();
            assert_eq!(distinct.len(), 8, "duplicate candidates");
            let eligible = match strategy {
                SampleStrategy::Global { lexical } => lexical..8,
                SampleStrategy::Local => 0..8,
            };
            let chosen = &set.candidates[set.positive];
            let d_chosen = distance(&pivot, chosen).unwrap();
            for i in eligible {
                let d = distance(&pivot, &set.candidates[i]).unwrap();
                assert!(
                    d_chosen < d
                        || (d_chosen == d && chosen <= &set.candidates[i]),
                    "candidate {i} beats the chosen positive"
                );
            }
        }
    }

    #[test]
    fn contrastive_global_with_max_lexical_forces_single_uniform_positive() {
        let cfg = PosSeqConfig::new(10, 5, 1).unwrap();
        let region = Region::new(vec![512]).unwrap();
        let mut r = rng(5);
        for _ in 0..50 {
            let set = sample_contrastive_set(
                &cfg,
                &[100],
                4,
                &region,
                SampleStrategy::Global { lexical: 3 },
                &mut r,
            )
            .unwrap();
            assert_eq!(set.positive, 3, "positive must be the lone uniform draw");
        }
    }

    #[test]
    fn contrastive_local_candidates_share_a_window() {
        let cfg = PosSeqConfig::new(10, 5, 1).unwrap();
        let region = Region::new(vec![20000]).unwrap();
        let mut r = rng(6);
        for _ in 0..100 {
            let set =
                sample_contrastive_set(&cfg, &[1234], 16, &region, SampleStrategy::Local, &mut r)
                    .unwrap();
            let min = set.candidates.iter().map(|p| p[0]).min().unwrap();
            let max = set.candidates.iter().map(|p| p[0]).max().unwrap();
            assert!(max - min < 256, "window wider than 256: [{min}, {max}]");
        }
    }

    #[test]
    fn contrastive_rejects_impossible_requests() {
        let cfg = PosSeqConfig::new(10, 2, 1).unwrap();
        let region = Region::new(vec![4]).unwrap();
        let mut r = rng(7);
        // Uniform part cannot supply 7 distinct candidates from 4 positions.
        assert!(matches!(
            sample_contrastive_set(
                &cfg,
                &[0],
                8,
                &region,
                SampleStrategy::Global { lexical: 1 },
                &mut r
            ),
            Err(SeqPeError::RegionTooSmall { .. })
        ));
        assert!(sample_contrastive_set(&cfg, &[0], 1, &region, SampleStrategy::Local, &mut r)
            .is_err());
    }

    #[test]
    fn ood_batch_teachers_distinct_and_students_representable() {
        let cfg = PosSeqConfig::new(10, 5, 1).unwrap();
        let region = Region::new(vec![512]).unwrap();
        let mut r = rng(8);
        for _ in 0..200 {
            let (teachers, z) = sample_ood_batch(&cfg, &region, 16, &mut r).unwrap();
            assert_eq!(teachers.len(), 16);
            let set: HashSet<_> = teachers.iter().collect();
            assert_eq!(set.len(), 16);
            assert_eq!(z.len(), 1);
            assert!((0..=99488).contains(&z[0]), "shift bound violated: {}", z[0]);
            for t in &teachers {
                assert!(region.contains(t));
                assert!(t[0] + z[0] < cfg.coord_bound());
            }
        }
    }

    #[test]
    fn ood_batch_region_too_small() {
        let cfg = PosSeqConfig::new(10, 2, 1).unwrap();
        let region = Region::new(vec![4]).unwrap();
        let mut r = rng(9);
        assert!(matches!(
            sample_ood_batch(&cfg, &region, 5, &mut r),
            Err(SeqPeError::RegionTooSmall {
                wanted: 5,
                available: 4
            })
        ));
    }

    #[test]
    fn shift_covers_full_bound_inclusive() {
        // For L=99999 of b^k=100000 the only shifts are 0 and 1; both must
        // appear, never anything else.
        let cfg = PosSeqConfig::new(10, 5, 1).unwrap();
        let region = Region::new(vec![99999]).unwrap();
        let mut r = rng(10);
        let mut seen = HashSet::new();
        for _ in 0..100 {
            let z = sample_shift(&cfg, &region, &mut r).unwrap();
            seen.insert(z[0]);
        }
        assert_eq!(seen, HashSet::from([0, 1]));
    }
}
