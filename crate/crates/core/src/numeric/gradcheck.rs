use super::{Graph, NumericError, ParamId, ParamStore, Var};

/// Outcome of comparing autodiff gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates_checked: usize,
    /// Per parameter tensor: `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-8)`.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    /// Largest tensor-level relative error.
    pub fn max_param_rel_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<F>(f: &mut F, store: &ParamStore) -> Result<f64, NumericError>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, NumericError>,
{
    let mut g = Graph::no_grad();
    let out = f(&mut g, store)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(NumericError::NonScalarLoss(v.shape().to_vec()));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(NumericError::NonFinite("gradient_check"));
    }
    Ok(x)
}

/// Checks every coordinate of every parameter in `store`.
pub fn gradient_check<F>(store: &mut ParamStore, h: f64, f: F) -> Result<GradCheckReport, NumericError>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, NumericError>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    gradient_check_params(store, h, &ids, f)
}

/// Checks every coordinate of the listed parameters. `f` builds the scalar
/// on the supplied graph from the supplied store and must be deterministic.
/// Gradients in `store` are zeroed on return.
pub fn gradient_check_params<F>(
    store: &mut ParamStore,
    h: f64,
    ids: &[ParamId],
    mut f: F,
) -> Result<GradCheckReport, NumericError>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, NumericError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?.accumulate_into(store);
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates_checked: 0,
        per_param: Vec::with_capacity(ids.len()),
    };
    for &id in ids {
        let analytic = store.grad(id).to_vec();
        let (mut diff_sq, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
        for (k, &a) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let plus = evaluate(&mut f, store);
            store.value_mut(id).data_mut()[k] = orig - h;
            let minus = evaluate(&mut f, store);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let err = relative_error(a, numeric);
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
            report.coordinates_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), k));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
        let scale = a_sq.sqrt().max(n_sq.sqrt()).max(1e-8);
        report.per_param.push((store.name(id).to_string(), diff_sq.sqrt() / scale));
    }
    store.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    #[test]
    fn square_at_three() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::scalar(3.0)).unwrap();
        let r = gradient_check(&mut s, 1e-5, |g, s| {
            let v = g.param(s, x)?;
            let sq = g.mul(v, v)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert!((r.worst_analytic - 6.0).abs() < 1e-12);
        assert!(r.max_param_rel_error() < 1e-8);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::vector(vec![1e-6])).unwrap();
        // log(x - h) hits the domain boundary for h > x.
        let r = gradient_check(&mut s, 1e-5, |g, s| {
            let v = g.param(s, x)?;
            let l = g.log(v)?;
            g.sum(l)
        });
        assert!(r.is_err());
    }
}
