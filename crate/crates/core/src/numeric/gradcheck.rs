//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};

use super::{Scalar, Tape, Tensor, Var};

/// Compares the tape gradient of `f` at `inputs` with central differences.
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar.
/// The result is the largest `|analytic − numeric| / max(1, |numeric|)` over
/// every coordinate of every input.
pub fn finite_diff_check_many<S, F>(f: F, inputs: &[Tensor<S>], h: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    if h <= S::zero() {
        return Err(Error::Contract(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let eval = |xs: &[Tensor<S>]| -> Result<S> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Contract(format!(
                "checked function must be scalar, got shape {:?}",
                tape.shape(out)
            )));
        }
        if !v[0].is_finite() {
            return Err(Error::Numeric {
                op: "finite_diff_check",
                detail: "function value is not finite".into(),
            });
        }
        Ok(v[0])
    };

    let mut tape = Tape::new();
    let leaves: Vec<Tensor<S>> = inputs.iter().map(|x| x.clone().with_grad()).collect();
    let vars: Vec<Var> = leaves.iter().map(|x| tape.leaf(x)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<S>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            tape.grad(v)
                .map(<[S]>::to_vec)
                .unwrap_or_else(|| vec![S::zero(); x.numel()])
        })
        .collect();

    let two_h = h + h;
    let mut worst = S::zero();
    let mut probe: Vec<Tensor<S>> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for (coord, &a) in grad.iter().enumerate() {
            let orig = probe[which].data()[coord];
            probe[which].data_mut()[coord] = orig + h;
            let plus = eval(&probe)?;
            probe[which].data_mut()[coord] = orig - h;
            let minus = eval(&probe)?;
            probe[which].data_mut()[coord] = orig;
            let numeric = (plus - minus) / two_h;
            let err = (a - numeric).abs() / S::one().max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<S, F>(f: F, x: &Tensor<S>, h: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let err = finite_diff_check(|t, v| t.mul(v, v), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // clamp kills the gradient outside its range while the function
        // still moves under the probe when the kink sits inside the step
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let c = t.clamp(v, 1.0, 2.0)?;
                t.sum(c)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn rejects_bad_step_and_non_scalar() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert!(finite_diff_check(|t, v| t.sum(v), &x, 0.0).is_err());
        assert!(finite_diff_check(|_, v| Ok(v), &x, 1e-5).is_err());
    }

    #[test]
    fn non_finite_value_is_a_numeric_error() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let r = finite_diff_check(|t, v| t.ln(v), &x, 1e-5);
        assert!(matches!(r, Err(Error::Numeric { .. })));
    }
}
