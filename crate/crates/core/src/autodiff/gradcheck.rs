use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

const DENOM_FLOOR: f64 = 1e-12;

/// Compares `backward` against central differences `(f(θ+ε) − f(θ−ε)) / 2ε`
/// for every entry of every parameter.
///
/// `build` receives a fresh tape with `params` registered (trainable, in
/// order) and must return the scalar loss. It is called `2·entries + 1` times.
pub fn grad_check<'a, F>(params: &[(&str, Matrix)], eps: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidInput(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |values: &[Matrix], want_grad: bool| -> Result<(f64, Option<super::Gradients>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            params.iter().zip(values).map(|((name, _), v)| tape.param(*name, v.clone(), true)).collect();
        let loss = build(&mut tape, &vars)?;
        let value = tape.value(loss).get(0, 0);
        let grads = if want_grad { Some(tape.backward(loss)?) } else { None };
        Ok((value, grads))
    };

    let mut values: Vec<Matrix> = params.iter().map(|(_, m)| m.clone()).collect();
    let (_, grads) = eval(&values, true)?;
    let grads = grads.expect("requested");

    let mut report = GradCheck { max_rel_error: 0.0, worst: None, entries: 0 };
    for (pi, (name, _)) in params.iter().enumerate() {
        let analytic = grads.get(*name);
        for k in 0..values[pi].len() {
            let orig = values[pi].data()[k];
            values[pi].data_mut()[k] = orig + eps;
            let (fp, _) = eval(&values, false)?;
            values[pi].data_mut()[k] = orig - eps;
            let (fm, _) = eval(&values, false)?;
            values[pi].data_mut()[k] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g.data()[k]);
            let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.entries += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((name.to_string(), k));
                }
            }
        }
    }
    Ok(report)
}
