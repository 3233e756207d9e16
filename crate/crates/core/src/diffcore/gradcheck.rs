//! Central finite differences against reverse-mode gradients.

use super::tape::{Tape, Var};

/// Relative error with a floor on the denominator so that entries that are
/// zero in both estimates do not divide by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare the backward pass of the scalar built by `build` with central
/// differences of step `h` on every entry of every input.
pub fn check<F>(inputs: &[(Vec<f64>, Vec<usize>)], h: f64, build: F) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .zip(inputs)
            .map(|(v, (_, shape))| tape.leaf(v.clone(), shape))
            .collect();
        let out = build(&mut tape, &vars);
        tape.scalar(out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(v, s)| tape.leaf(v.clone(), s)).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out);

    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (k, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; values[k].len()]);
        for i in 0..values[k].len() {
            let orig = values[k][i];
            values[k][i] = orig + h;
            let plus = eval(&values);
            values[k][i] = orig - h;
            let minus = eval(&values);
            values[k][i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_rel_err = max_rel_err.max(relative_error(analytic[i], numeric));
            checked += 1;
        }
    }
    GradCheck { max_rel_err, checked }
}
