//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::graph::{Graph, NodeId};
use super::param::ParamStore;
use super::Tensor;
use crate::error::{MitpError, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared on an absolute scale:
/// the relative error is `|a - n| / max(|a|, |n|, FLOOR)`.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Number of coordinates compared.
    pub checked: usize,
}

impl GradCheckReport {
    fn new(tolerance: f64) -> Self {
        Self {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            tolerance,
            passed: true,
            checked: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        self.max_abs_error = self.max_abs_error.max(abs);
        self.max_rel_error = self.max_rel_error.max(rel);
        self.passed = self.max_rel_error < self.tolerance;
        self.checked += 1;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn scalar_loss(g: &Graph, loss: NodeId) -> Result<f64> {
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(MitpError::NotScalar(v.shape().to_vec()));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(MitpError::NonFinite { op: "loss" });
    }
    Ok(x)
}

/// Checks d(loss)/d(input) for every entry of every input tensor.
///
/// `build` receives one variable node per input and returns a scalar loss.
pub fn grad_check<F>(inputs: &[Tensor], build: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.variable(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        scalar_loss(&g, loss)
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    scalar_loss(&g, loss)?;
    g.backward(loss)?;

    let mut report = GradCheckReport::new(tolerance);
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (slot, &id) in ids.iter().enumerate() {
        let analytic = g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(inputs[slot].shape()));
        for k in 0..inputs[slot].len() {
            let orig = inputs[slot].data()[k];
            work[slot].data_mut()[k] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[slot].data_mut()[k] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[slot].data_mut()[k] = orig;
            report.record(analytic.data()[k], (plus - minus) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

/// Checks the gradient of every trainable parameter in `store`.
pub fn grad_check_params<F>(store: &mut ParamStore, build: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    scalar_loss(&g, loss)?;
    g.backward(loss)?;

    let targets: Vec<_> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(id, p)| {
            let grad = g
                .param_node(id)
                .and_then(|n| g.grad(n).cloned())
                .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()));
            (id, grad)
        })
        .collect();
    drop(g);

    let mut report = GradCheckReport::new(tolerance);
    for (id, analytic) in targets {
        for k in 0..analytic.len() {
            let orig = store.tensor(id).data()[k];
            store.get_mut(id).tensor.data_mut()[k] = orig + FD_STEP;
            let plus = {
                let mut g = Graph::new();
                let l = build(&mut g, store)?;
                scalar_loss(&g, l)?
            };
            store.get_mut(id).tensor.data_mut()[k] = orig - FD_STEP;
            let minus = {
                let mut g = Graph::new();
                let l = build(&mut g, store)?;
                scalar_loss(&g, l)?
            };
            store.get_mut(id).tensor.data_mut()[k] = orig;
            report.record(analytic.data()[k], (plus - minus) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_norm() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let mut g = Graph::new();
        let id = g.variable(x.clone());
        let sq = g.mul(id, id).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(id).unwrap().data(), &[2.0, 4.0]);

        let report = grad_check(
            &[x],
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                g.sum(sq)
            },
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_abs_error < 1e-6);
    }

    #[test]
    fn softmax_log_at_uniform_point() {
        let x = Tensor::vector(vec![0.0; 5]);
        let report = grad_check(
            &[x],
            |g, ids| {
                let p = g.softmax(ids[0], 0)?;
                let lp = g.ln(p, 1e-30)?;
                let w = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 3.0, 0.0]));
                let m = g.mul(lp, w)?;
                g.sum(m)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::vector(vec![800.0]);
        let err = grad_check(&[x], |g, ids| {
            let e = g.exp(ids[0])?;
            g.sum(e)
        }, 1e-4)
        .unwrap_err();
        assert!(matches!(err, MitpError::NonFinite { op: "exp" }));
    }
}
