//! Central finite-difference checking of tape gradients.

use crate::error::Result;
use crate::tape::{Matrix, Tape, Var};

/// Worst-case disagreement between reverse-mode and finite-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_abs_error: f64,
    /// `|ad - fd| / max(|ad|, |fd|, 1)`, maximised over every input entry.
    pub max_rel_error: f64,
    pub entries: usize,
}

/// Evaluates `f` on fresh tapes, once with reverse mode and `2 * entries`
/// times with central differences of step `h` on every input entry.
pub fn check_gradients<F>(inputs: &[Matrix], h: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let root = f(&tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Matrix> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |perturbed: &[Matrix]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|m| tape.constant(m.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheck {
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        entries: 0,
    };
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            work[k][idx] = input[idx] + h;
            let plus = eval(&work)?;
            work[k][idx] = input[idx] - h;
            let minus = eval(&work)?;
            work[k][idx] = input[idx];
            let fd = (plus - minus) / (2.0 * h);
            let ad = analytic[k][idx];
            let abs = (ad - fd).abs();
            let rel = abs / ad.abs().max(fd.abs()).max(1.0);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.entries += 1;
        }
    }
    Ok(report)
}
