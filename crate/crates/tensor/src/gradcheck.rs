//! Central-difference validation of the backward pass.

use crate::array::DenseArray;
use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares analytic gradients against central differences at f64.
///
/// `f` must build a scalar loss from the given leaves and be deterministic.
/// Inputs should sit away from kinks (for instance keep magnitudes above
/// the step size for piecewise-linear ops). The relative error uses
/// |a − n| / max(1e-6, |a| + |n|), which tolerates both gradients being
/// near zero without masking a real mismatch.
pub fn grad_check<F>(inputs: &[DenseArray<f64>], f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let run = |arrays: &[DenseArray<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = arrays
            .iter()
            .map(|a| tape.leaf(a.clone().with_grad()))
            .collect();
        let loss = f(&mut tape, &vars)?;
        if tape.data(loss).len() != 1 {
            return Err(TensorError::Contract(
                "grad_check wants a scalar loss".into(),
            ));
        }
        Ok(tape.data(loss)[0])
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|a| tape.leaf(a.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.data(v).len()])
        })
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut work: Vec<DenseArray<f64>> = inputs.to_vec();
    for (vi, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let orig = input.data()[ei];
            work[vi].data_mut()[ei] = orig + h;
            let up = run(&work)?;
            work[vi].data_mut()[ei] = orig - h;
            let down = run(&work)?;
            work[vi].data_mut()[ei] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[vi][ei];
            let rel = (a - numeric).abs() / f64::max(1e-6, a.abs() + numeric.abs());
            if rel > tol {
                return Err(TensorError::Numeric(format!(
                    "gradient mismatch at input {vi} element {ei}: analytic {a:.9e}, numeric {numeric:.9e}, rel {rel:.3e}"
                )));
            }
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_a_correct_gradient() {
        let x = DenseArray::from_vec(vec![0.3, -0.8, 1.2], &[3]).unwrap();
        let report = grad_check(
            &[x],
            |t, vs| {
                let sq = t.mul(vs[0], vs[0])?;
                t.sum_all(sq)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_err < 1e-4);
    }

    #[test]
    fn flags_a_wrong_gradient() {
        // straight_through forwards different values than its input, so its
        // identity backward disagrees with finite differences by design.
        let x = DenseArray::from_vec(vec![0.5, 1.5], &[2]).unwrap();
        let out = grad_check(
            &[x],
            |t, vs| {
                let doubled: Vec<f64> = t.data(vs[0]).iter().map(|v| v * 3.0).collect();
                let st = t.straight_through(vs[0], &doubled)?;
                let sq = t.mul(st, st)?;
                t.sum_all(sq)
            },
            1e-5,
            1e-4,
        );
        assert!(matches!(out, Err(TensorError::Numeric(_))));
    }
}
