//! Central-difference verification of the gradient buffers in a set of [`ParamSet`]s.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamPart, ParamSet};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per weight or bias tensor.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub set: String,
    pub entry: String,
    pub part: ParamPart,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<Worst>,
}

/// Symmetric relative error `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the gradient buffers already held in `params` against central
/// differences of `eval`, perturbing one sampled coordinate at a time by `±eps`.
///
/// `eval` must be deterministic. Every set in `params` is checked; values are
/// restored bit-exactly after each probe.
pub fn check_gradient<F>(
    params: &mut [ParamSet],
    mut eval: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[ParamSet]) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };

    for s in 0..params.len() {
        for e in 0..params[s].len() {
            for part in [ParamPart::Weight, ParamPart::Bias] {
                let n = params[s].entry(e).tensor(part).len();
                let coords: Vec<usize> = if n <= opts.max_coords {
                    (0..n).collect()
                } else {
                    index::sample(&mut rng, n, opts.max_coords).into_vec()
                };
                for i in coords {
                    let analytic = params[s].entry(e).grad(part).values()[i];
                    let original = params[s].entry(e).tensor(part).values()[i];

                    params[s].entry_mut(e).tensor_mut(part).values_mut()[i] = original + opts.eps;
                    let plus = eval(params);
                    params[s].entry_mut(e).tensor_mut(part).values_mut()[i] = original - opts.eps;
                    let minus = eval(params);
                    params[s].entry_mut(e).tensor_mut(part).values_mut()[i] = original;
                    let (plus, minus) = (plus?, minus?);

                    let numeric = (plus - minus) / (2.0 * opts.eps);
                    let err = relative_error(analytic, numeric);
                    report.coords_checked += 1;
                    if err > report.max_rel_error || report.worst.is_none() {
                        report.max_rel_error = report.max_rel_error.max(err);
                        report.worst = Some(Worst {
                            set: params[s].name().to_owned(),
                            entry: params[s].entry_name(e).to_owned(),
                            part,
                            index: i,
                            analytic,
                            numeric,
                        });
                    }
                }
            }
        }
    }
    Ok(report)
}
