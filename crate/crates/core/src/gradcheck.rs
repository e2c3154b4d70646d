//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward passes; it shares nothing
//! with the backward rules it audits.
//!
//! Relative error per entry is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`,
//! so gradients below 1e-3 are effectively held to an absolute bound.
//! Entries whose finite-difference window straddles a kink of a piecewise-linear
//! op (relu, abs, max) are detected by comparing step `h` against `h/2` and
//! counted as skipped rather than compared.

use crate::error::Result;
use crate::nn::{Forward, Mode, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-3;
const KINK_TOL: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// `(tensor index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol && self.skipped_kinks * 100 <= self.checked.max(1)
    }

    fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }

    fn record(&mut self, tensor: usize, elem: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((tensor, elem, analytic, numeric));
        }
    }
}

fn central(f: &mut impl FnMut(f64) -> Result<f64>, x0: f64, h: f64) -> Result<f64> {
    Ok((f(x0 + h)? - f(x0 - h)?) / (2.0 * h))
}

/// Returns the step-`h` estimate, or `None` when the function is not smooth in the window.
fn smooth_derivative(mut f: impl FnMut(f64) -> Result<f64>, x0: f64, h: f64) -> Result<Option<f64>> {
    let full = central(&mut f, x0, h)?;
    let half = central(&mut f, x0, h / 2.0)?;
    if (full - half).abs() > KINK_TOL * full.abs().max(1.0) {
        return Ok(None);
    }
    Ok(Some(full))
}

/// Checks the gradient of a scalar function of several input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let x0 = input.data()[ei];
            let numeric = smooth_derivative(
                |x| {
                    work[ti].data_mut()[ei] = x;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = work.iter().map(|w| t.constant(w.clone())).collect();
                    let l = build(&mut t, &vs)?;
                    t.value(l).item()
                },
                x0,
                h,
            )?;
            work[ti].data_mut()[ei] = x0;
            match numeric {
                Some(n) => report.record(ti, ei, analytic[ti][ei], n),
                None => report.skipped_kinks += 1,
            }
        }
    }
    Ok(report)
}

/// Checks the gradient of a scalar loss with respect to every trainable
/// parameter in `store`. At most `max_per_tensor` evenly spaced entries are
/// probed per tensor (`None` probes all).
pub fn check_params<F>(store: &ParamStore, mode: Mode, h: f64, max_per_tensor: Option<usize>, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Forward) -> Result<Var>,
{
    let grads = {
        let mut f = Forward::new(store, mode, true);
        let l = loss(&mut f)?;
        f.backward(l)?;
        f.param_grads()
    };
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for (id, analytic) in grads {
        let n = analytic.len();
        let stride = max_per_tensor.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        let mut sub = GradCheckReport::default();
        for ei in (0..n).step_by(stride) {
            let x0 = store.get(id).data()[ei];
            let numeric = smooth_derivative(
                |x| {
                    work.get_mut(id).data_mut()[ei] = x;
                    let mut f = Forward::new(&work, mode, false);
                    let l = loss(&mut f)?;
                    f.tape.value(l).item()
                },
                x0,
                h,
            )?;
            work.get_mut(id).data_mut()[ei] = x0;
            match numeric {
                Some(num) => sub.record(id.index(), ei, analytic[ei], num),
                None => sub.skipped_kinks += 1,
            }
        }
        report.merge(sub);
    }
    Ok(report)
}
