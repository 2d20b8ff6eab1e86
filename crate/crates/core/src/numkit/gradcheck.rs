use super::tape::{Tape, Var};
use super::tensor::ParamTensor;
use crate::error::{Error, Result};

/// Denominator floor for the per-coordinate relative error.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Coordinate attaining `max_rel_err`.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares the tape gradient of a scalar map against central differences.
///
/// `f` receives a fresh tape and the leaf holding `x` and must return a
/// single-element node.
pub fn grad_check<F>(f: F, x: &ParamTensor, eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Argument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let value = tape.scalar_value(out);
    if !value.is_finite() {
        return Err(Error::Evaluation(format!("f(x) = {value}")));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: &ParamTensor| -> Result<f64> {
        let mut t = Tape::new();
        let l = t.leaf(probe.clone());
        let o = f(&mut t, l)?;
        let v = t.scalar_value(o);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation(format!("f(x ± eps) = {v}")))
        }
    };

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }

    let (worst_index, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}
