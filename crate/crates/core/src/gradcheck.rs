//! Central finite-difference gradient checking.
//!
//! The checker only evaluates forward values, so it stays independent of
//! the backward rules it verifies.

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Worst elementwise disagreement found by a check.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradReport {
    pub max_rel_error: Real,
    pub max_abs_error: Real,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, analytic: Real, numeric: Real, floor: Real) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.max_abs_error = self.max_abs_error.max(abs);
        self.max_rel_error = self.max_rel_error.max(rel);
        self.checked += 1;
    }

    fn merge(&mut self, other: GradReport) {
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
    }
}

/// Step and denominator floor of the relative error
/// `|a - n| / max(|a|, |n|, floor)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub step: Real,
    pub floor: Real,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-3,
        }
    }
}

impl GradCheck {
    /// Checks `d loss / d inputs` for a graph built from plain input tensors.
    pub fn inputs<F>(&self, inputs: &[Tensor], build: F) -> Result<GradReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let mut empty = ParamStore::new();
        g.backward(loss, &mut empty)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();

        let eval = |probe: &[Tensor]| -> Result<Real> {
            let mut g = Graph::new();
            let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
            let loss = build(&mut g, &vars)?;
            g.value(loss).item()
        };

        let mut report = GradReport::default();
        let mut probe = inputs.to_vec();
        for (i, grad) in analytic.iter().enumerate() {
            for j in 0..probe[i].len() {
                let orig = probe[i].data()[j];
                probe[i].data_mut()[j] = orig + self.step;
                let plus = eval(&probe)?;
                probe[i].data_mut()[j] = orig - self.step;
                let minus = eval(&probe)?;
                probe[i].data_mut()[j] = orig;
                report.record(grad.data()[j], (plus - minus) / (2.0 * self.step), self.floor);
            }
        }
        Ok(report)
    }

    /// Checks `d loss / d param` for every parameter in `store`, visiting at
    /// most `per_param` evenly spaced entries of each tensor.
    pub fn params<F>(&self, store: &ParamStore, per_param: usize, build: F) -> Result<GradReport>
    where
        F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    {
        let mut work = store.clone();
        work.zero_grads();
        let mut g = Graph::new();
        let loss = build(&mut g, &work)?;
        g.backward(loss, &mut work)?;

        let mut report = GradReport::default();
        let ids: Vec<_> = work.ids().collect();
        for id in ids {
            let analytic = work.grad(id).clone();
            let len = analytic.len();
            let stride = (len / per_param.max(1)).max(1);
            let mut sub = GradReport::default();
            for j in (0..len).step_by(stride).take(per_param.max(1)) {
                let orig = work.value(id).data()[j];
                work.value_mut(id).data_mut()[j] = orig + self.step;
                let plus = eval_params(&work, &build)?;
                work.value_mut(id).data_mut()[j] = orig - self.step;
                let minus = eval_params(&work, &build)?;
                work.value_mut(id).data_mut()[j] = orig;
                sub.record(analytic.data()[j], (plus - minus) / (2.0 * self.step), self.floor);
            }
            report.merge(sub);
        }
        Ok(report)
    }
}

fn eval_params<F>(store: &ParamStore, build: &F) -> Result<Real>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.value(loss).item()
}

/// `sum(weights * x)`: a generic scalar probe of a tensor-valued op.
pub fn weighted_sum(g: &mut Graph, x: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(x, w)?;
    Ok(g.sum(prod))
}
