//! Central finite-difference check of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Compares the gradient of the scalar built by `f` at `x` against central
/// differences with step `h`, returning
/// `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
///
/// `f` is evaluated twice at `x` first; any disagreement is reported as
/// [`Error::NonDeterministic`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::invalid("grad_check", format!("step {h} outside [1e-7, 1e-3]")));
    }
    let eval = |t: Tensor| -> Result<f64> {
        let g = Graph::inference();
        let v = g.constant(t);
        let out = f(&g, v)?;
        let val = g.value(out);
        if val.len() != 1 {
            return Err(Error::NonScalarLoss(val.shape().to_vec()));
        }
        Ok(val.item())
    };

    let first = eval(x.detached())?;
    let second = eval(x.detached())?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic((first - second).abs()));
    }

    let g = Graph::new();
    let v = g.variable(x.detached());
    let loss = f(&g, v)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .get(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.detached();
        plus.data_mut()[i] += h;
        let mut minus = x.detached();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Like [`grad_check`] but differentiates with respect to named entries of
/// `store`. At most `per_param` evenly spaced elements of each named tensor
/// are perturbed (all when `None`).
pub fn grad_check_params<F>(f: F, store: &ParamStore, names: &[&str], h: f64, per_param: Option<usize>) -> Result<f64>
where
    F: for<'p> Fn(&Graph<'p>, &'p ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::invalid("grad_check", format!("step {h} outside [1e-7, 1e-3]")));
    }
    let mut work = store.clone();
    work.apply_mask(|n| names.contains(&n));
    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::inference();
        let out = f(&g, s)?;
        let val = g.value(out);
        if val.len() != 1 {
            return Err(Error::NonScalarLoss(val.shape().to_vec()));
        }
        Ok(val.item())
    };
    let first = eval(&work)?;
    let second = eval(&work)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic((first - second).abs()));
    }

    let analytic: Vec<(String, Vec<f64>)> = {
        let g = Graph::new();
        let loss = f(&g, &work)?;
        let grads = g.backward(loss)?;
        names
            .iter()
            .map(|&n| {
                let len = work.get(n).map(|t| t.len())?;
                Ok((n.to_string(), grads.param(n).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)))
            })
            .collect::<Result<_>>()?
    };

    let mut worst: f64 = 0.0;
    for (name, grad) in &analytic {
        let len = grad.len();
        let stride = per_param.map_or(1, |k| len.div_ceil(k.max(1)).max(1));
        for i in (0..len).step_by(stride) {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max((grad[i] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}
