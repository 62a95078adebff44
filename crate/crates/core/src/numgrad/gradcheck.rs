//! Central finite-difference oracle for analytic gradients.

use rand::seq::index;

use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug)]
pub struct FdConfig {
    pub epsilon: f64,
    /// Number of coordinates sampled; every coordinate is checked when the
    /// set holds fewer.
    pub coordinates: usize,
    pub seed: u64,
    /// Skip coordinates whose `±epsilon` probes land on different pieces of
    /// a piecewise op (absolute value, rectifier, clamp).
    pub skip_kinks: bool,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            epsilon: 1e-5,
            coordinates: 64,
            seed: 0,
            skip_kinks: true,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_relative_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Coordinate with the largest relative error.
    pub worst: Option<(String, usize)>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(params: &ParamSet, loss_fn: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = loss_fn(&mut tape, params)?;
    Ok((tape.item(root), tape.branch_signature()))
}

/// Compares the tape gradient of `loss_fn` with `(f(θ+ε) - f(θ-ε)) / 2ε` on a
/// random subsample of coordinates and returns the worst relative error.
///
/// Gradients in `params` are reset before and after the check.
pub fn finite_diff_check<F>(params: &mut ParamSet, cfg: &FdConfig, loss_fn: F) -> Result<FdReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&cfg.epsilon) {
        return Err(Error::invalid(format!("epsilon {} outside [1e-7, 1e-3]", cfg.epsilon)));
    }
    let total = params.num_values();
    if total == 0 {
        return Err(Error::invalid("no parameters to check"));
    }
    if cfg.coordinates < 50 && cfg.coordinates < total {
        return Err(Error::invalid("sample at least 50 coordinates"));
    }

    params.zero_grad();
    let (base, base_sig) = {
        let mut tape = Tape::new();
        let root = loss_fn(&mut tape, params)?;
        tape.backward(root, params)?;
        (tape.item(root), tape.branch_signature())
    };
    if !base.is_finite() {
        return Err(Error::domain("finite_diff_check", format!("base loss {base}")));
    }

    // flat index -> (name, offset)
    let layout: Vec<(String, usize)> = params.iter().map(|(n, p)| (n.to_string(), p.value().len())).collect();
    let mut rng = seed::rng(&[cfg.seed, seed::tag("finite-diff")]);
    let mut picks = index::sample(&mut rng, total, cfg.coordinates.min(total)).into_vec();
    picks.sort_unstable();

    let mut report = FdReport::default();
    let mut cursor = 0;
    let mut start = 0;
    for flat in picks {
        while flat >= start + layout[cursor].1 {
            start += layout[cursor].1;
            cursor += 1;
        }
        let (name, offset) = (&layout[cursor].0, flat - start);
        let analytic = params.grad(name)?[offset];
        let original = params.value(name)?.data()[offset];

        params.values_mut(name)?[offset] = original + cfg.epsilon;
        let plus = evaluate(params, &loss_fn);
        params.values_mut(name)?[offset] = original - cfg.epsilon;
        let minus = evaluate(params, &loss_fn);
        params.values_mut(name)?[offset] = original;
        let ((fp, sp), (fm, sm)) = (plus?, minus?);

        if !fp.is_finite() || !fm.is_finite() {
            params.zero_grad();
            return Err(Error::NonFinite {
                name: name.clone(),
                index: offset,
            });
        }
        if cfg.skip_kinks && (sp != base_sig || sm != base_sig) {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * cfg.epsilon);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = err.max(report.max_relative_error);
            report.worst = Some((name.clone(), offset));
        }
    }
    params.zero_grad();
    Ok(report)
}
