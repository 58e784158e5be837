//! Central finite-difference verification of analytic gradients.
//!
//! The one door every differentiable operation must pass through: build a
//! scalar loss from a set of parameter tensors, compare the tape's gradients
//! elementwise against (f(θ+h) − f(θ−h)) / 2h.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Per-parameter maximum relative error, in `params` order.
    pub per_param: Vec<f64>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Relative error convention used throughout: |a−n| / max(|a|,|n|,1e-8).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Check the gradient of a deterministic scalar loss over `params`.
///
/// `build` reconstructs the loss on a fresh graph from leaves bound in
/// `params` order, so the same closure serves the analytic pass and every
/// finite-difference evaluation.
pub fn grad_check<F>(params: &[Tensor], build: F, h: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Contract("grad_check requires h > 0".into()));
    }
    let mut work: Vec<Tensor> = params.to_vec();

    let eval = |work: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = work.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&mut g, &vars)?;
        if g.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "grad_check loss must be scalar, got shape {:?}",
                g.shape(loss)
            )));
        }
        Ok(g.scalar(loss))
    };

    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = work.iter().map(|t| g.leaf(t)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).to_vec()).collect();

    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;
    for pi in 0..params.len() {
        let mut param_max = 0.0f64;
        for ei in 0..params[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[ei] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let e = rel_err(analytic[pi][ei], numeric);
            param_max = param_max.max(e);
        }
        max_rel = max_rel.max(param_max);
        per_param.push(param_max);
    }

    Ok(GradReport {
        per_param,
        max_rel_err: max_rel,
        tol,
        pass: max_rel <= tol,
    })
}
