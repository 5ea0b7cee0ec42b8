//! Comparison position encodings: sinusoidal and learned absolute tables,
//! rotary rotation (1-D and axial 2-D), and the linear-distance attention
//! bias.  "No position encoding" needs no code here — it is the provider
//! that contributes nothing, and attention scores then equal raw q·k.

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SeqPeError};
use crate::numerics::rng::fill_normal;
use crate::numerics::tensor::Tensor;
use crate::numerics::ParamSet;
use crate::positions::Position;

/// Fixed sinusoidal table: `e[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `e[pos, 2i+1] = cos(pos / 10000^(2i/d))`.
pub fn ape_sinusoidal(len: usize, d: usize) -> Result<Tensor> {
    sinusoidal_rows(&(0..len as i64).collect::<Vec<_>>(), d)
}

/// Sinusoidal rows for arbitrary (possibly shifted) positions.
pub fn sinusoidal_rows(positions: &[i64], d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(SeqPeError::UnevenSplit {
            what: "sinusoidal embedding width",
            width: d,
            parts: 2,
        });
    }
    if positions.is_empty() {
        return Err(SeqPeError::BadShape {
            op: "sinusoidal_rows",
            shape: vec![0],
            reason: "empty position list".into(),
        });
    }
    let mut data = Vec::with_capacity(positions.len() * d);
    for &pos in positions {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::from_vec(&[positions.len(), d], data)
}

/// Learnable absolute position table with a fixed number of rows (the
/// training context length).
pub struct ApeLearnTable {
    pub rows: Tensor,
}

impl ApeLearnTable {
    /// Registers an `[l_train, d]` table initialized at N(0, 0.02).
    pub fn new(
        l_train: usize,
        d: usize,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if l_train == 0 || d == 0 {
            return Err(SeqPeError::ConfigInvalid(
                "learned position table needs at least one row and column".into(),
            ));
        }
        let mut data = vec![0.0; l_train * d];
        fill_normal(rng, 0.02, &mut data);
        let rows = params.register("learned_pos.rows", Tensor::leaf(&[l_train, d], data)?, false)?;
        Ok(ApeLearnTable { rows })
    }

    /// Wraps an existing `[l_train, d]` table (used after checkpoint load).
    pub fn from_rows(rows: Tensor) -> Result<Self> {
        let shape = rows.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(SeqPeError::BadShape {
                op: "learned_pos",
                shape,
                reason: "expected a non-empty [rows, d] table".into(),
            });
        }
        Ok(ApeLearnTable { rows })
    }

    pub fn train_len(&self) -> usize {
        self.rows.shape()[0]
    }

    /// Rows for an evaluation length: verbatim prefix when it fits in the
    /// table, otherwise linear interpolation of the whole table onto
    /// `l_eval` evenly spaced points with endpoints mapped to endpoints.
    pub fn interpolated(&self, l_eval: usize) -> Result<Tensor> {
        if l_eval == 0 {
            return Err(SeqPeError::BadShape {
                op: "learned_pos.interpolated",
                shape: vec![0],
                reason: "evaluation length must be positive".into(),
            });
        }
        let l_train = self.train_len();
        let d = self.rows.shape()[1];
        if l_eval <= l_train {
            let ids: Vec<usize> = (0..l_eval).collect();
            return self.rows.select_rows(&ids);
        }
        // Query point i maps to source index i * (l_train-1) / (l_eval-1).
        let mut lo_ids = Vec::with_capacity(l_eval);
        let mut hi_ids = Vec::with_capacity(l_eval);
        let mut lo_w = Vec::with_capacity(l_eval * d);
        let mut hi_w = Vec::with_capacity(l_eval * d);
        for i in 0..l_eval {
            let t = if l_eval == 1 {
                0.0
            } else {
                i as f64 * (l_train - 1) as f64 / (l_eval - 1) as f64
            };
            let lo = (t.floor() as usize).min(l_train - 1);
            let hi = (lo + 1).min(l_train - 1);
            let w = t - lo as f64;
            lo_ids.push(lo);
            hi_ids.push(hi);
            lo_w.extend(std::iter::repeat(1.0 - w).take(d));
            hi_w.extend(std::iter::repeat(w).take(d));
        }
        let shape = [l_eval, d];
        let lo_rows = self.rows.select_rows(&lo_ids)?;
        let hi_rows = self.rows.select_rows(&hi_ids)?;
        let lo_scaled = lo_rows.mul(&Tensor::from_vec(&shape, lo_w)?)?;
        let hi_scaled = hi_rows.mul(&Tensor::from_vec(&shape, hi_w)?)?;
        lo_scaled.add(&hi_scaled)
    }

    /// Bilinear resize of a table trained on a `train_h x train_w` grid
    /// (rows stored row-major) to an `eval_h x eval_w` grid.  The train
    /// resolution itself is returned verbatim.
    pub fn interpolated_grid(
        &self,
        train_hw: (usize, usize),
        eval_hw: (usize, usize),
    ) -> Result<Tensor> {
        let (th, tw) = train_hw;
        let (eh, ew) = eval_hw;
        if th * tw != self.train_len() {
            return Err(SeqPeError::BadShape {
                op: "learned_pos.interpolated_grid",
                shape: self.rows.shape(),
                reason: format!("table holds {} rows, grid claims {th}x{tw}", self.train_len()),
            });
        }
        if eh == 0 || ew == 0 {
            return Err(SeqPeError::BadShape {
                op: "learned_pos.interpolated_grid",
                shape: vec![eh, ew],
                reason: "evaluation grid must be non-empty".into(),
            });
        }
        if (eh, ew) == (th, tw) {
            let ids: Vec<usize> = (0..th * tw).collect();
            return self.rows.select_rows(&ids);
        }
        let d = self.rows.shape()[1];
        // Axis mapping as in the 1-D case, applied separably.
        let axis = |i: usize, train: usize, eval: usize| -> (usize, usize, f64) {
            let t = if eval == 1 || train == 1 {
                0.0
            } else {
                i as f64 * (train - 1) as f64 / (eval - 1) as f64
            };
            let lo = (t.floor() as usize).min(train - 1);
            let hi = (lo + 1).min(train - 1);
            (lo, hi, t - lo as f64)
        };
        let cells = eh * ew;
        let mut corner_ids = [(); 4].map(|_| Vec::with_capacity(cells));
        let mut corner_w = [(); 4].map(|_| Vec::with_capacity(cells * d));
        for i in 0..eh {
            let (y0, y1, ty) = axis(i, th, eh);
            for j in 0..ew {
                let (x0, x1, tx) = axis(j, tw, ew);
                let ids = [y0 * tw + x0, y0 * tw + x1, y1 * tw + x0, y1 * tw + x1];
                let ws = [
                    (1.0 - ty) * (1.0 - tx),
                    (1.0 - ty) * tx,
                    ty * (1.0 - tx),
                    ty * tx,
                ];
                for c in 0..4 {
                    corner_ids[c].push(ids[c]);
                    corner_w[c].extend(std::iter::repeat(ws[c]).take(d));
                }
            }
        }
        let shape = [cells, d];
        let mut acc: Option<Tensor> = None;
        for c in 0..4 {
            let rows = self.rows.select_rows(&corner_ids[c])?;
            let scaled = rows.mul(&Tensor::from_vec(&shape, corner_w[c].clone())?)?;
            acc = Some(match acc {
                Some(a) => a.add(&scaled)?,
                None => scaled,
            });
        }
        Ok(acc.expect("four corners"))
    }
}

/// Rotary-rotation frequency schedule: `theta_t = base^(-2t/d)` for
/// `t` in `[0, d/2)`, strictly decreasing.
#[derive(Clone, Debug)]
pub struct RopeParams {
    pub base: f64,
    pub d: usize,
    pub freqs: Vec<f64>,
}

impl RopeParams {
    pub fn new(base: f64, d: usize) -> Result<Self> {
        if d == 0 || d % 2 != 0 {
            return Err(SeqPeError::UnevenSplit {
                what: "rotary width",
                width: d,
                parts: 2,
            });
        }
        if base <= 1.0 {
            return Err(SeqPeError::ConfigInvalid(format!(
                "rotary base must exceed 1, got {base}"
            )));
        }
        let freqs: Vec<f64> = (0..d / 2)
            .map(|t| base.powf(-2.0 * t as f64 / d as f64))
            .collect();
        debug_assert!(freqs.windows(2).all(|w| w[0] > w[1]) || freqs.len() < 2);
        Ok(RopeParams { base, d, freqs })
    }

    /// Cos/sin tables for a list of positions, each `len(positions) x d/2`
    /// flattened.
    pub fn angle_tables(&self, positions: &[i64]) -> (Vec<f64>, Vec<f64>) {
        let half = self.d / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &pos in positions {
            for &f in &self.freqs {
                let angle = pos as f64 * f;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        (cos, sin)
    }
}

/// Rotates coordinate pairs `(2t, 2t+1)` of each row by its position's
/// angles.  `x` is `[..., L, d]` with `len(positions) == L`; position 0 is
/// the identity.
pub fn rope_rotate(x: &Tensor, positions: &[i64], params: &RopeParams) -> Result<Tensor> {
    let shape = x.shape();
    if *shape.last().unwrap() != params.d {
        return Err(SeqPeError::BadShape {
            op: "rope_rotate",
            shape,
            reason: format!("last dim must equal rotary width {}", params.d),
        });
    }
    if shape.len() < 2 || shape[shape.len() - 2] != positions.len() {
        return Err(SeqPeError::BadShape {
            op: "rope_rotate",
            shape,
            reason: format!("expected {} rows of positions", positions.len()),
        });
    }
    let (cos, sin) = params.angle_tables(positions);
    x.rope_rotate(&cos, &sin)
}

/// Axial 2-D rotation: the first `d/2` coordinates rotate by the
/// first-axis angle schedule, the last `d/2` by the second-axis schedule,
/// each using the 1-D frequency vector at width `d/2`.
pub fn rope2d_rotate(x: &Tensor, positions: &[Position], base: f64) -> Result<Tensor> {
    let shape = x.shape();
    let d = *shape.last().unwrap();
    if d % 4 != 0 {
        return Err(SeqPeError::UnevenSplit {
            what: "axial rotary width",
            width: d,
            parts: 4,
        });
    }
    if shape.len() < 2 || shape[shape.len() - 2] != positions.len() {
        return Err(SeqPeError::BadShape {
            op: "rope2d_rotate",
            shape,
            reason: format!("expected {} rows of positions", positions.len()),
        });
    }
    let mut xs = Vec::with_capacity(positions.len());
    let mut ys = Vec::with_capacity(positions.len());
    for p in positions {
        if p.len() != 2 {
            return Err(SeqPeError::DimMismatch {
                expected: 2,
                got: p.len(),
            });
        }
        xs.push(p[0]);
        ys.push(p[1]);
    }
    let half_params = RopeParams::new(base, d / 2)?;
    let first = rope_rotate(&x.narrow_last(0, d / 2)?, &xs, &half_params)?;
    let second = rope_rotate(&x.narrow_last(d / 2, d / 2)?, &ys, &half_params)?;
    Tensor::concat_last(&[first, second])
}

/// Per-head slopes `m_h = 2^(-8(h+1)/H)`: strictly positive, strictly
/// decreasing across heads.
pub fn alibi_slopes(heads: usize) -> Vec<f64> {
    (0..heads)
        .map(|h| 2f64.powf(-8.0 * (h + 1) as f64 / heads as f64))
        .collect()
}

/// Linear-distance attention bias `[heads, L, L]`:
/// `M[h,i,j] = -m_h * (i - j)` for `i >= j`, masked (-inf) above the
/// diagonal.  Depends only on `i - j`, so any shifted window produces the
/// identical matrix.
pub fn alibi_bias(len: usize, heads: usize) -> Result<Tensor> {
    if len == 0 || heads == 0 {
        return Err(SeqPeError::ConfigInvalid(
            "bias needs at least one row and one head".into(),
        ));
    }
    let slopes = alibi_slopes(heads);
    let mut data = Vec::with_capacity(heads * len * len);
    for &m in &slopes {
        for i in 0..len {
            for j in 0..len {
                if j <= i {
                    data.push(-m * (i - j) as f64);
                } else {
                    data.push(f64::NEG_INFINITY);
                }
            }
        }
    }
    Tensor::from_vec(&[heads, len, len], data)
}
