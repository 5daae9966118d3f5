//! Central finite-difference verification of recorded gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::Serialize;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Finite-difference half step.
    pub step: f64,
    /// Pass iff every checked entry has relative error below this.
    pub threshold: f64,
    /// Check at most this many entries per input (sampled without replacement).
    pub max_entries: Option<usize>,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is ~0 are measured against round-off scale instead of zero.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            threshold: 1e-4,
            max_entries: None,
            floor: 1e-6,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InputError {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub inputs: Vec<InputError>,
    pub threshold: f64,
}

impl GradcheckReport {
    pub fn max_rel(&self) -> f64 {
        self.inputs.iter().map(|e| e.max_rel).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel() < self.threshold
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `f` against central differences.
///
/// Non-scalar outputs are contracted with a fixed pseudo-random weight
/// tensor, so every output entry contributes to the checked objective.
pub fn gradcheck<F>(f: F, inputs: &[(String, Tensor<f64>)], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = Pcg64::seed_from_u64(opts.seed);

    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let out_shape = tape.shape(out).to_vec();
    let weights = Tensor::<f64>::from_parts(
        out_shape.clone(),
        (0..tape.value(out).len())
            .map(|_| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * rng.random_range(0.5..1.5)
            })
            .collect(),
    );
    let loss = contract(&mut tape, out, &weights)?;
    tape.backward(loss)?;

    let objective = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let o = f(&mut t, &vs)?;
        if t.shape(o) != out_shape.as_slice() {
            return Err(Error::shape("gradcheck", &out_shape, t.shape(o)));
        }
        let l = contract(&mut t, o, &weights)?;
        Ok(t.value(l).data()[0])
    };

    let mut current: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = Vec::with_capacity(inputs.len());
    for (idx, (name, input)) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[idx])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < input.len() => {
                let mut e = sample(&mut rng, input.len(), k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..input.len()).collect(),
        };
        let mut max_rel: f64 = 0.0;
        let mut total = 0.0;
        for &e in &entries {
            let base = input.data()[e];
            let mut buf = input.to_vec();
            buf[e] = base + opts.step;
            current[idx] = Tensor::from_parts(input.shape().to_vec(), buf.clone());
            let plus = objective(&current)?;
            buf[e] = base - opts.step;
            current[idx] = Tensor::from_parts(input.shape().to_vec(), buf);
            let minus = objective(&current)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let rel = relative_error(analytic[e], numeric, opts.floor);
            max_rel = max_rel.max(rel);
            total += rel;
        }
        current[idx] = input.clone();
        report.push(InputError {
            name: name.clone(),
            checked: entries.len(),
            max_rel,
            mean_rel: if entries.is_empty() { 0.0 } else { total / entries.len() as f64 },
        });
    }
    Ok(GradcheckReport {
        inputs: report,
        threshold: opts.threshold,
    })
}

fn contract(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}
