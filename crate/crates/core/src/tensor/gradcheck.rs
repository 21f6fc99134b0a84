//! Central finite-difference gradient checking.
//!
//! The numeric side only re-evaluates the forward function, so it is
//! independent of every backward rule it checks.

use crate::error::Result;
use crate::tensor::{Matrix, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<Matrix>,
    pub numeric: Vec<Matrix>,
}

impl GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all inputs.
    pub fn relative_error(&self) -> f64 {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        for (a, n) in self.analytic.iter().zip(&self.numeric) {
            for (x, y) in a.data().iter().zip(n.data()) {
                diff += (x - y).powi(2);
                na += x * x;
                nn += y * y;
            }
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale < 1e-300 {
            0.0
        } else {
            diff.sqrt() / scale
        }
    }

    /// True when some gradient entry is nonzero (guards against vacuous checks).
    pub fn nontrivial(&self) -> bool {
        self.analytic.iter().any(|m| m.data().iter().any(|&x| x.abs() > 1e-12))
    }
}

/// Compares tape gradients of the scalar `f(inputs)` with central differences of step `h`.
pub fn check<F>(inputs: &[Matrix], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic = inputs
        .iter()
        .zip(&vars)
        .map(|(m, &v)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
        })
        .collect();

    let mut work: Vec<Matrix> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Matrix::zeros(inputs[i].rows(), inputs[i].cols());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }
    Ok(GradCheck { analytic, numeric })
}
