//! Central finite-difference gradient verification.

use super::{GradStore, Tensor};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compare analytic gradients of `f` against central finite differences.
///
/// `f` maps the leaf inputs to a scalar loss; it is re-invoked with perturbed
/// copies of the leaves. `sample` limits how many elements per input are
/// probed (`None` probes all). Relative error uses an absolute floor so
/// near-zero gradients compare sanely.
pub fn finite_difference_check(
    name: &str,
    inputs: &[Tensor],
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    h: f64,
    tolerance: f64,
    sample: Option<usize>,
) -> Result<GradCheckReport> {
    let loss = f(inputs)?;
    let mut store = GradStore::new();
    loss.backward_into(&mut store)?;

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (which, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic: Vec<f64> = store
            .get(input)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let n = input.numel();
        let stride = match sample {
            Some(s) if s < n => (n + s - 1) / s,
            _ => 1,
        };
        for i in (0..n).step_by(stride.max(1)) {
            let eval = |delta: f64| -> Result<f64> {
                let perturbed: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        if k == which {
                            let mut d = t.to_vec();
                            d[i] += delta;
                            Tensor::leaf(t.shape(), d).unwrap()
                        } else {
                            t.clone()
                        }
                    })
                    .collect();
                Ok(f(&perturbed)?.item())
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            let rel = (analytic[i] - fd).abs() / denom;
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        checked,
        tolerance,
    })
}
