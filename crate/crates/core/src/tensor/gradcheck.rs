//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, Params};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Check at most this many coordinates, sampled uniformly with `seed`.
    /// `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Denominator floor for the relative error, so coordinates with
    /// near-zero gradients are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: None,
            seed: 0,
            floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordinateError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordinateError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares `analytic` against `(f(θ+h) - f(θ-h)) / 2h` coordinate by
/// coordinate. Relative error is `|a - n| / max(|a|, |n|, floor)`.
/// Parameters are restored exactly after each probe.
pub fn finite_diff_check<F>(
    params: &mut Params,
    analytic: &Gradients,
    mut loss: F,
    tolerance: f64,
    opts: GradCheckOptions,
) -> GradCheckReport
where
    F: FnMut(&Params) -> f64,
{
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, t) in params.iter() {
        coords.extend((0..t.len()).map(|i| (name.to_string(), i)));
    }
    if let Some(max) = opts.max_coords {
        if coords.len() > max {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picks = rand::seq::index::sample(&mut rng, coords.len(), max).into_vec();
            picks.sort_unstable();
            coords = picks.into_iter().map(|i| coords[i].clone()).collect();
        }
    }

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance,
    };
    for (name, idx) in coords {
        let original = flat(params, &name)[idx];
        flat(params, &name)[idx] = original + opts.step;
        let plus = loss(params);
        flat(params, &name)[idx] = original - opts.step;
        let minus = loss(params);
        flat(params, &name)[idx] = original;

        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic
            .get(&name)
            .and_then(|t| t.as_slice_memory_order())
            .map_or(0.0, |s| s[idx]);
        let denom = a.abs().max(numeric.abs()).max(opts.floor);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some(CoordinateError {
                param: name,
                index: idx,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    report
}

fn flat<'a>(params: &'a mut Params, name: &str) -> &'a mut [f64] {
    params
        .get_mut(name)
        .and_then(|t| t.as_slice_memory_order_mut())
        .expect("contiguous parameter")
}
