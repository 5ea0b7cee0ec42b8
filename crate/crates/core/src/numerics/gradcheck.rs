//! Finite-difference gradient checking.
//!
//! `grad_check` rebuilds a scalar loss from scratch through a caller
//! closure, compares the tape's gradients against central differences, and
//! reports the worst relative error over a deterministic sample of
//! coordinates.  The loss closure must be a pure function of the registered
//! parameters: freeze batches, candidate sets and any teacher-side values
//! *outside* the closure.
//!
//! A deliberate-sabotage hook (negate one analytic gradient before
//! comparing) lets callers prove the harness would actually catch a wrong
//! derivative.

use crate::error::{Result, SeqPeError};
use crate::numerics::params::ParamSet;
use crate::numerics::rng::StreamRng;
use crate::numerics::tensor::Tensor;

/// Options for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Coordinates sampled per parameter (all coordinates if the parameter
    /// is smaller than this).
    pub samples_per_param: usize,
    /// Seed for the coordinate sampler.
    pub seed: u64,
    /// If set, the analytic gradient of this `(parameter, flat index)` is
    /// negated before comparison — a self-test that must make the check
    /// fail.
    pub sabotage: Option<(String, usize)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            samples_per_param: 8,
            seed: 0,
            sabotage: None,
        }
    }
}

/// One compared coordinate.
#[derive(Clone, Debug)]
pub struct CoordError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordError>,
    /// Worst relative error per checked parameter, in registration order.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1.0, numeric.abs())
}

/// Compares tape gradients of `loss()` against central finite differences.
///
/// The closure is invoked once for the analytic pass and twice per sampled
/// coordinate for the numeric pass; parameter data is restored exactly
/// afterwards.
pub fn grad_check(
    params: &ParamSet,
    opts: &GradCheckOptions,
    mut loss: impl FnMut() -> Result<Tensor>,
) -> Result<GradCheckReport> {
    if params.is_empty() {
        return Err(SeqPeError::ParamRegistry(
            "grad_check needs at least one parameter".into(),
        ));
    }
    params.zero_grad();
    let l = loss()?;
    l.backward()?;
    let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(params.len());
    for p in params.iter() {
        analytic.push(
            p.tensor
                .grad()
                .unwrap_or_else(|| vec![0.0; p.tensor.numel()]),
        );
    }
    params.zero_grad();
    if let Some((name, idx)) = &opts.sabotage {
        let pos = params
            .iter()
            .position(|p| &p.name == name)
            .ok_or_else(|| SeqPeError::ParamRegistry(format!("no parameter named {name:?}")))?;
        if *idx >= analytic[pos].len() {
            return Err(SeqPeError::ParamRegistry(format!(
                "sabotage index {idx} out of range for {name:?}"
            )));
        }
        // Flip the sign; if the entry is exactly zero, shove it instead so
        // the corruption is visible either way.
        let g = &mut analytic[pos][*idx];
        *g = if *g == 0.0 { 1.0 } else { -*g };
    }

    let rng_root = StreamRng::new(opts.seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        per_param: Vec::new(),
    };
    for (pidx, p) in params.iter().enumerate() {
        if !p.trainable {
            // Frozen constants are checkpointed but take no gradients;
            // perturbing them would compare against a tape that never sees
            // them.
            continue;
        }
        let n = p.tensor.numel();
        let mut coords: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            let mut rng = rng_root.stream(pidx as u64);
            crate::numerics::rng::sample_distinct(&mut rng, n, opts.samples_per_param)
        };
        // A sabotaged coordinate must actually be compared, whatever the
        // sampler picked.
        if let Some((name, idx)) = &opts.sabotage {
            if name == &p.name && !coords.contains(idx) {
                coords.push(*idx);
            }
        }
        let mut param_max = 0.0f64;
        for &i in &coords {
            let orig = p.tensor.to_vec()[i];
            p.tensor.update_data(|d| d[i] = orig + opts.h);
            let up = loss()?.item()?;
            p.tensor.update_data(|d| d[i] = orig - opts.h);
            let dn = loss()?.item()?;
            p.tensor.update_data(|d| d[i] = orig);
            let numeric = (up - dn) / (2.0 * opts.h);
            let a = analytic[pidx][i];
            let e = rel_err(a, numeric);
            report.checked += 1;
            param_max = param_max.max(e);
            if e >= report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some(CoordError {
                    param: p.name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err: e,
                });
            }
        }
        report.per_param.push((p.name.clone(), param_max));
    }
    params.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_setup() -> (ParamSet, Tensor, Tensor) {
        let mut ps = ParamSet::new();
        let w = ps
            .register("w", Tensor::leaf(&[3], vec![0.5, -1.5, 2.0]).unwrap(), true)
            .unwrap();
        let b = ps
            .register("b", Tensor::leaf(&[1], vec![0.25]).unwrap(), false)
            .unwrap();
        (ps, w, b)
    }

    #[test]
    fn quadratic_loss_passes() {
        let (ps, w, b) = quadratic_setup();
        let report = grad_check(&ps, &GradCheckOptions::default(), || {
            let sq = w.mul(&w)?;
            Ok(sq.sum_all().add(&b.mul(&b)?.sum_all())?)
        })
        .unwrap();
        assert_eq!(report.checked, 4);
        assert!(
            report.passes(1e-4),
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn sabotage_makes_the_check_fail() {
        let (ps, w, b) = quadratic_setup();
        let opts = GradCheckOptions {
            sabotage: Some(("w".into(), 2)),
            ..GradCheckOptions::default()
        };
        let report = grad_check(&ps, &opts, || {
            let sq = w.mul(&w)?;
            Ok(sq.sum_all().add(&b.mul(&b)?.sum_all())?)
        })
        .unwrap();
        assert!(
            !report.passes(1e-4),
            "sabotaged gradient slipped through: {report:?}"
        );
        let worst = report.worst.unwrap();
        assert_eq!(worst.param, "w");
        assert_eq!(worst.index, 2);
    }

    #[test]
    fn parameters_restored_after_check() {
        let (ps, w, b) = quadratic_setup();
        let before = ps.snapshot();
        grad_check(&ps, &GradCheckOptions::default(), || {
            Ok(w.mul(&w)?.sum_all().add(&b.sum_all())?)
        })
        .unwrap();
        let after = ps.snapshot();
        for (x, y) in before.iter().zip(&after) {
            for (a, b) in x.iter().zip(y) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
