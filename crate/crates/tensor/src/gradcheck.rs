//! Central finite-difference and adjoint checks against the tape's
//! reverse-mode gradients. Always runs in `f64`.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so entries whose true gradient is
/// zero are judged on absolute error at this scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compare tape gradients of a scalar function of `inputs` against central
/// differences with step `h`, over every input element.
///
/// `build` receives a fresh tape and one variable per input and returns the
/// scalar loss.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.variable(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report = GradCheckReport { max_rel_error: err, worst: (which, i), analytic: analytic[i], numeric, ..report };
            }
        }
    }
    Ok(report)
}

/// `|⟨A x, y⟩ − ⟨x, Aᵀ y⟩|` for a linear map `A` given by `forward`, with
/// `Aᵀ y` obtained by back-propagating `sum(A(x) ⊙ y)`.
pub fn adjoint_gap<F>(x: &Tensor<f64>, y: &Tensor<f64>, forward: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let ax = forward(&mut tape, xv)?;
    let weighted = tape.mul_const(ax, y.clone())?;
    let loss = tape.sum(weighted);
    let lhs = tape.value(ax).dot(y);
    tape.backward(loss)?;
    let aty = tape.grad(xv).expect("input gradient");
    Ok((lhs - x.dot(aty)).abs())
}
