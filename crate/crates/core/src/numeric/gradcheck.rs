use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Entries whose gradients are both smaller than this are compared
/// absolutely, so round-off on vanishing gradients cannot dominate.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error for each parameter tensor, in input order.
    pub per_param: Vec<f64>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f` rebuilds the computation from scratch on every call, receiving one
/// trainable leaf per entry of `params`, and must return a scalar loss.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).data()[0].is_finite() {
        return Err(Error::NonFinite("loss is not finite".into()));
    }
    g.backward(loss)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        let mut worst: f64 = 0.0;
        for (k, &a) in analytic.iter().enumerate() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(a, numeric));
        }
        per_param.push(worst);
    }
    let max_rel_err = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        tol,
        passed: max_rel_err < tol,
    })
}
