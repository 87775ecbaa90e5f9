use alloc::string::String;
use alloc::vec::Vec;

use super::{ComputeError, ParamStore, Tape, Var};
use crate::rng::SplitMix64;

/// Denominator floor for the relative error, multiplied by `max(1, |f(θ)|)`
/// so coordinates whose true gradient is ~0 are judged against the
/// round-off level of `f` rather than against zero.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// `(parameter, index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences `(f(θ+h) - f(θ-h)) / 2h`.
///
/// Tensors with more than `coords_per_tensor` entries are sampled (seeded).
/// `f` must be deterministic, i.e. dropout disabled.
pub fn gradient_check<F, E>(
    params: &ParamStore,
    h: f64,
    coords_per_tensor: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, E>,
    E: From<ComputeError>,
{
    let (analytic, value) = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        let grads = tape.backward(loss)?;
        (tape.param_grads(&grads), tape.scalar(loss))
    };
    let floor = RELATIVE_ERROR_FLOOR * value.abs().max(1.0);

    let eval = |store: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut rng = SplitMix64::derive(seed, "gradient-check");
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for id in params.ids() {
        let len = params.get(id).len();
        let coords: Vec<usize> = if len <= coords_per_tensor {
            (0..len).collect()
        } else {
            let mut p = rng.permutation(len);
            p.truncate(coords_per_tensor);
            p
        };
        for idx in coords {
            let orig = params.get(id).data()[idx];
            probe.get_mut(id).data_mut()[idx] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[idx] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id.0][idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((params.name(id).into(), idx, a, numeric));
            }
        }
    }
    Ok(report)
}
