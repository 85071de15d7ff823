use super::params::NamedParamSet;
use super::tape::{NodeId, Tape};
use super::tensor::{Real, Tensor};
use super::TapeError;

/// Compare recorded gradients of a scalar function against central finite
/// differences over every trainable component. Returns the worst relative
/// error, with denominator max(|analytic|, |numeric|, 1e-12).
pub fn grad_check<F>(f: F, params: &NamedParamSet, step: Real) -> Result<Real, TapeError>
where
    F: Fn(&NamedParamSet) -> Result<(Tape, NodeId), TapeError>,
{
    if !(step > 0.0) {
        return Err(TapeError::BadStep);
    }
    let (tape, out) = f(params)?;
    let out_val = tape.value(out);
    if out_val.len() != 1 {
        return Err(TapeError::ShapeMismatch {
            op: "grad-check",
            detail: format!("function output must be scalar, got {:?}", out_val.shape()),
        });
    }
    if !out_val.all_finite() {
        return Err(TapeError::NonFinite { op: "grad-check" });
    }
    let analytic = tape.backprop(out, &Tensor::scalar(1.0), params)?;

    let eval = |p: &NamedParamSet| -> Result<Real, TapeError> {
        let (tape, out) = f(p)?;
        let v = tape.value(out);
        if !v.all_finite() {
            return Err(TapeError::NonFinite { op: "grad-check" });
        }
        Ok(v.data()[0])
    };

    let mut worst: Real = 0.0;
    for (name, tensor) in params.trainable_iter() {
        let grad = &analytic[name];
        for i in 0..tensor.len() {
            let mut plus = params.clone();
            let mut t = tensor.clone();
            t.data_mut()[i] += step;
            plus.set_values(name, t)?;
            let f_plus = eval(&plus)?;

            let mut minus = params.clone();
            let mut t = tensor.clone();
            t.data_mut()[i] -= step;
            minus.set_values(name, t)?;
            let f_minus = eval(&minus)?;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            let err = (a - numeric).abs() / denom;
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let mut params = NamedParamSet::new();
        params.insert("w", Tensor::vector(vec![0.3, -0.7, 1.1]), true).unwrap();
        let f = |p: &NamedParamSet| {
            let mut tape = Tape::new();
            let ids = tape.register_params(p)?;
            let w = ids["w"];
            let s = tape.sum(w)?;
            tape.scale(s, 2.5).map(|out| (tape, out))
        };
        let err = grad_check(f, &params, 1e-5).unwrap();
        assert!(err <= 1e-10, "error {}", err);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut params = NamedParamSet::new();
        params.insert("w", Tensor::vector(vec![0.5, 0.5]), true).unwrap();
        let f = |p: &NamedParamSet| {
            let mut tape = Tape::new();
            tape.register_params(p)?;
            let c = tape.leaf(Tensor::scalar(4.0));
            let out = tape.scale(c, 1.0)?;
            Ok((tape, out))
        };
        let err = grad_check(f, &params, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn nonpositive_step_rejected() {
        let params = NamedParamSet::new();
        let f = |_: &NamedParamSet| {
            let mut tape = Tape::new();
            let c = tape.leaf(Tensor::scalar(1.0));
            Ok((tape, c))
        };
        assert!(matches!(grad_check(f, &params, 0.0), Err(TapeError::BadStep)));
    }
}
