use super::params::ParameterVector;
use crate::error::{FlowError, Result};

/// Central-difference gradient of `f`, one coordinate at a time.
pub fn finite_diff_gradient<F>(f: F, params: &ParameterVector, h: f64) -> Result<ParameterVector>
where
    F: Fn(&ParameterVector) -> f64,
{
    if !(h > 0.0) {
        return Err(FlowError::InvalidArgument(format!("step size must be positive, got {h}")));
    }
    let mut grad = params.zeros_like();
    let mut probe = params.clone();
    for i in 0..params.len() {
        let orig = params.values()[i];
        probe.values_mut()[i] = orig + h;
        let up = f(&probe);
        probe.values_mut()[i] = orig - h;
        let down = f(&probe);
        probe.values_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(FlowError::NonFinite(format!(
                "objective at coordinate {i} ({})",
                params.segment_name_of(i)
            )));
        }
        grad.values_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// `max_i |a_i - b_i| / max(||b||_inf, floor)`.
pub fn relative_error(analytic: &ParameterVector, reference: &ParameterVector, floor: f64) -> f64 {
    let scale = reference
        .values()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(floor);
    analytic.max_abs_diff(reference) / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ParameterVector {
        let mut p = ParameterVector::zeros(&[("p".to_string(), 1)]);
        p.values_mut()[0] = v;
        p
    }

    #[test]
    fn quadratic() {
        let g = finite_diff_gradient(|p| p.values()[0].powi(2), &scalar(3.0), 1e-5).unwrap();
        assert!((g.values()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = ParameterVector::zeros(&[("a".to_string(), 4)]);
        let g = finite_diff_gradient(|_| 1.25, &p, 1e-4).unwrap();
        assert!(g.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_evaluation_names_coordinate() {
        let layout = [("a".to_string(), 1), ("b".to_string(), 1)];
        let p = ParameterVector::zeros(&layout);
        let err = finite_diff_gradient(
            |q| if q.values()[1] != 0.0 { f64::NAN } else { 0.0 },
            &p,
            1e-3,
        )
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 1 (b)"), "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_diff_gradient(|_| 0.0, &scalar(0.0), 0.0).is_err());
    }
}
