//! Central finite-difference verification of analytic gradients.

use alloc::vec::Vec;

use super::graph::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over every probed element.
    pub max_rel_error: f64,
    pub worst_leaf: usize,
    pub worst_index: usize,
    pub probed: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences, probing every element of every leaf.
///
/// The relative error of an element is `|a - n| / max(|a|, |n|, floor)` where
/// `floor = 1e-6 * max|a| + 1e-12` keeps elements whose true gradient is
/// numerically zero from dominating. A function with identically zero
/// gradients reports an error of 0.
pub fn grad_check<F>(f: F, leaves: &[Tensor<f64>], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, leaves, epsilon, usize::MAX)
}

/// Like [`grad_check`], but probes at most `per_leaf` evenly strided elements
/// of each leaf.
pub fn grad_check_sampled<F>(
    f: F,
    leaves: &[Tensor<f64>],
    epsilon: f64,
    per_leaf: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::contract("grad_check epsilon must be positive"));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(leaves)
        .map(|(v, t)| {
            g.grad(*v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| alloc::vec![0.0; t.numel()])
        })
        .collect();
    let scale = analytic
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-6 * scale + 1e-12;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_leaf: 0,
        worst_index: 0,
        probed: 0,
    };
    let mut probe = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let stride = if per_leaf >= n { 1 } else { n.div_ceil(per_leaf) };
        for idx in (0..n).step_by(stride.max(1)) {
            let orig = leaf.data()[idx];
            probe[li].data_mut()[idx] = orig + epsilon;
            let plus = eval(&probe)?;
            probe[li].data_mut()[idx] = orig - epsilon;
            let minus = eval(&probe)?;
            probe[li].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[li][idx];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = if a == 0.0 && numeric == 0.0 {
                0.0
            } else {
                (a - numeric).abs() / denom
            };
            report.probed += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst_leaf = li;
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
