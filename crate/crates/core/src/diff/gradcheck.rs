use super::{DiffError, ParamId, ParamStore};

/// Outcome of comparing analytic gradients to central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Relative error used throughout: |a - n| / max(|a|, |n|, 1e-8).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` gradients (already accumulated in `store`) against
/// central differences of `loss` for every entry of the listed parameters.
///
/// `loss` must be a pure function of the store's current values.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    mut loss: F,
) -> Result<GradCheckReport, DiffError>
where
    F: FnMut(&ParamStore) -> Result<f64, DiffError>,
{
    if !(eps > 0.0) {
        return Err(DiffError::NonFiniteValue("eps must be positive".into()));
    }
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for &id in params {
        let analytic = store.get(id).grad();
        for j in 0..analytic.len() {
            let original = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = original + eps;
            let plus = loss(store)?;
            store.get_mut(id).value.data_mut()[j] = original - eps;
            let minus = loss(store)?;
            store.get_mut(id).value.data_mut()[j] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(DiffError::NonFiniteValue(store.get(id).name.clone()));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            if !a.is_finite() {
                return Err(DiffError::NonFiniteValue(store.get(id).name.clone()));
            }
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((store.get(id).name.clone(), j));
            }
        }
    }
    Ok(report)
}

/// Convenience wrapper: evaluates the recorded analytic gradient with
/// `record` (which must build the loss on a fresh tape and call backward)
/// and then runs [`grad_check`] against the value-only `loss`.
pub fn grad_check_with<R, F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    record: R,
    loss: F,
) -> Result<GradCheckReport, DiffError>
where
    R: FnOnce(&mut ParamStore) -> Result<(), DiffError>,
    F: FnMut(&ParamStore) -> Result<f64, DiffError>,
{
    store.zero_grad();
    record(store)?;
    grad_check(store, params, eps, loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{Tape, Tensor};

    #[test]
    fn quadratic_bowl_matches() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::matrix(1, 3, vec![0.5, -1.5, 2.0]).unwrap());
        let build = |store: &ParamStore, tape: &mut Tape| {
            let x = tape.param(store, id);
            let sq = tape.square(x);
            tape.sum(sq)
        };
        let report = grad_check_with(
            &mut store,
            &[id],
            1e-5,
            |s| {
                let mut tape = Tape::new();
                let l = build(s, &mut tape);
                tape.backward(l, s)
            },
            |s| {
                let mut tape = Tape::new();
                let l = build(s, &mut tape);
                Ok(tape.value(l).item())
            },
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-8, "{report:?}");
        assert_eq!(report.entries_checked, 3);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(1.0));
        let report = grad_check(&mut store, &[id], 1e-5, |_| Ok(4.2)).unwrap();
        assert_eq!(report.max_relative_error, 0.0);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(1.0));
        let r = grad_check(&mut store, &[id], 1e-5, |_| Ok(f64::NAN));
        assert!(matches!(r, Err(DiffError::NonFiniteValue(_))));
    }
}
