//! Finite-difference verification of tape gradients.
//!
//! The checker rebuilds the graph from scratch for every probe, so the
//! supplied builder must be deterministic: same parameter values, same loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, TensorId};
use super::Tensor;
use crate::error::{Error, Result};

/// Builds a scalar loss on `tape` from registered parameter leaves.
pub type LossBuilder<'a> = dyn FnMut(&mut Tape, &[TensorId]) -> Result<TensorId> + 'a;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step; must lie in `[1e-7, 1e-3]`.
    pub epsilon: f64,
    /// Cap on probed components per parameter group; `None` checks all.
    /// Groups at or under the cap are always checked exhaustively.
    pub max_components_per_group: Option<usize>,
    /// Seed for choosing which components to probe when capped.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            max_components_per_group: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over all probed components.
    pub max_rel_error: f64,
    /// Parameter group holding the worst component.
    pub worst_group: usize,
    /// Flat index of the worst component within its group.
    pub worst_component: usize,
    pub components_checked: usize,
}

/// Compare analytic gradients of `build` against central finite differences
/// `(f(x+ε) − f(x−ε)) / 2ε`, componentwise over every parameter group.
///
/// Relative error per component is `|a − n| / max(|a|, |n|, 1e-6)`; the
/// report carries the worst one. Non-finite losses or gradients are errors.
pub fn grad_check(
    params: &[Tensor],
    opts: &GradCheckOptions,
    build: &mut LossBuilder,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&opts.epsilon) {
        return Err(Error::Data(format!(
            "grad_check: epsilon {} outside [1e-7, 1e-3]",
            opts.epsilon
        )));
    }
    if params.is_empty() {
        return Err(Error::Data("grad_check: no parameter groups".into()));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|p| tape.leaf(p.clone(), true))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &ids)?;
    let loss_value = tape.value(loss).item()?;
    if !loss_value.is_finite() {
        return Err(Error::Numerical(format!(
            "grad_check: non-finite loss {loss_value}"
        )));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| match tape.grad(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; p.numel()],
        })
        .collect();
    for (gi, g) in analytic.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "grad_check: non-finite analytic gradient in group {gi}"
            )));
        }
    }
    drop(tape);

    let eval = |probe: &[Tensor], build: &mut LossBuilder| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = probe
            .iter()
            .map(|p| tape.leaf(p.clone(), false))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &ids)?;
        let v = tape.value(loss).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical(format!(
                "grad_check: non-finite probe loss {v}"
            )))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_group: 0,
        worst_component: 0,
        components_checked: 0,
    };
    let mut probe: Vec<Tensor> = params.to_vec();

    for (gi, param) in params.iter().enumerate() {
        let numel = param.numel();
        let components: Vec<usize> = match opts.max_components_per_group {
            Some(cap) if numel > cap => {
                let mut all: Vec<usize> = (0..numel).collect();
                all.shuffle(&mut rng);
                let mut picked: Vec<usize> = all.into_iter().take(cap).collect();
                picked.sort_unstable();
                picked
            }
            _ => (0..numel).collect(),
        };
        for ci in components {
            let original = probe[gi].data()[ci];
            probe[gi].data_mut()[ci] = original + opts.epsilon;
            let plus = eval(&probe, build)?;
            probe[gi].data_mut()[ci] = original - opts.epsilon;
            let minus = eval(&probe, build)?;
            probe[gi].data_mut()[ci] = original;

            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic[gi][ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.components_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_group = gi;
                report.worst_component = ci;
            }
        }
    }
    Ok(report)
}
