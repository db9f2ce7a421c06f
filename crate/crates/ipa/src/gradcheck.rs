//! Central-difference verification of tape gradients, run in f64.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares analytic gradients of `loss_fn` against central finite
/// differences and returns the maximum relative error over all parameter
/// components: |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
///
/// `loss_fn` must be deterministic; it is re-evaluated 2N times for N total
/// parameter components.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::Domain(format!("epsilon must be > 0, got {epsilon}")));
    }

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = ps.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        let v = tape.value(loss);
        if v.numel() != 1 {
            return Err(Error::Shape("grad_check: loss must be scalar".into()));
        }
        let val = v.data()[0];
        if !val.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {val}")));
        }
        Ok(val)
    };

    // analytic pass
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    if !tape.value(loss).data()[0].is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[pi])
            .ok_or_else(|| Error::State("missing gradient for leaf".into()))?
            .data()
            .to_vec();
        for j in 0..p.numel() {
            let orig = p.data()[j];
            perturbed[pi].data_mut()[j] = orig + epsilon;
            let up = eval(&perturbed)?;
            perturbed[pi].data_mut()[j] = orig - epsilon;
            let down = eval(&perturbed)?;
            perturbed[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let denom = analytic[j].abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic[j] - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let w = Tensor::from_vec(vec![4], vec![0.3, -1.7, 2.0, 0.01]).unwrap();
        let err = grad_check(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0])?;
                tape.sum_all(sq)
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn constant_loss_reports_zero() {
        let w = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |tape, _vars| {
                let c = tape.constant(Tensor::scalar(3.0));
                tape.sum_all(c)
            },
            &[w],
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn composed_expression_passes() {
        // softmax -> log_softmax -> gather-style composition
        let w = Tensor::from_vec(vec![2, 3], vec![0.5, -0.2, 1.0, 0.0, 0.3, -1.1]).unwrap();
        let err = grad_check(
            |tape, vars| {
                let l = tape.log_softmax(vars[0])?;
                let picked = tape.take_per_row(l, &[2, 0])?;
                let s = tape.sum_all(picked)?;
                tape.scale(s, -1.0)
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let w = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let res = grad_check(
            |tape, vars| {
                let inf = tape.constant(Tensor::from_vec(vec![1], vec![f64::INFINITY])?);
                let x = tape.mul(vars[0], inf)?;
                tape.sum_all(x)
            },
            &[w],
            1e-4,
        );
        assert!(matches!(res, Err(Error::Numerical(_))));
    }
}
