//! Central-difference gradient verification.

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Parameterized};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error, as `name[index]`.
    pub worst: Option<String>,
    pub coordinates: usize,
}

impl GradReport {
    fn new() -> Self {
        GradReport {
            max_rel_error: 0.0,
            worst: None,
            coordinates: 0,
        }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.coordinates += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some(format!("{name}[{index}]"));
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tolerance
    }
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    match tape.value(v) {
        [s] => Ok(*s),
        _ => Err(Error::InvalidArgument(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.shape(v)
        ))),
    }
}

/// Checks `d f / d x` for a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradReport>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let input = x.clone().requiring_grad(true);
    let analytic = {
        let mut tape = Tape::new();
        let v = tape.leaf(&input);
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)?;
        tape.backward(out)?;
        tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()])
    };
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };
    let mut report = GradReport::new();
    let mut probe = input.clone();
    for (i, &grad) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        report.record("x", i, grad, (up - down) / (2.0 * step));
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug)]
pub struct ParamCheckOptions {
    pub step: f64,
    /// Upper bound on probed coordinates per tensor (evenly strided); `None`
    /// probes all of them.
    pub max_coords_per_tensor: Option<usize>,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for ParamCheckOptions {
    fn default() -> Self {
        ParamCheckOptions {
            step: DEFAULT_STEP,
            max_coords_per_tensor: None,
            mode: Mode::Eval,
            seed: 0,
        }
    }
}

/// Checks the gradient of a scalar loss with respect to every trainable
/// parameter of `module`. Each evaluation gets a fresh context with the same
/// seed, so stochastic layers draw identical masks throughout.
pub fn check_parameters<M, F>(module: &mut M, loss: F, opts: ParamCheckOptions) -> Result<GradReport>
where
    M: Parameterized,
    F: for<'a> Fn(&'a M, &mut Ctx<'a>) -> Result<Var>,
{
    let analytic: Vec<(String, Vec<f64>)> = {
        let mut ctx = Ctx::new(opts.mode, opts.seed);
        let out = loss(module, &mut ctx)?;
        scalar_of(&ctx.tape, out)?;
        ctx.tape.backward(out)?;
        let mut grads = Vec::new();
        module.visit("", &mut |name, t| {
            if t.requires_grad() {
                let g = ctx.grad_of(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
                grads.push((name.to_string(), g));
            }
        });
        grads
    };
    let eval = |m: &M| -> Result<f64> {
        let mut ctx = Ctx::new(opts.mode, opts.seed);
        let out = loss(m, &mut ctx)?;
        scalar_of(&ctx.tape, out)
    };
    let mut report = GradReport::new();
    for (name, grad) in &analytic {
        let n = grad.len();
        let stride = opts.max_coords_per_tensor.map_or(1, |k| n.div_ceil(k.max(1)));
        for i in (0..n).step_by(stride) {
            let original = perturb(module, name, i, None);
            perturb(module, name, i, Some(original + opts.step));
            let up = eval(module)?;
            perturb(module, name, i, Some(original - opts.step));
            let down = eval(module)?;
            perturb(module, name, i, Some(original));
            report.record(name, i, grad[i], (up - down) / (2.0 * opts.step));
        }
    }
    Ok(report)
}

/// Returns the current value at `name[index]`, optionally overwriting it.
fn perturb<M: Parameterized>(module: &mut M, name: &str, index: usize, value: Option<f64>) -> f64 {
    let mut seen = None;
    module.visit_mut("", &mut |n, t| {
        if n == name {
            seen = Some(t.data()[index]);
            if let Some(v) = value {
                t.data_mut()[index] = v;
            }
        }
    });
    seen.expect("parameter names come from the same module")
}
