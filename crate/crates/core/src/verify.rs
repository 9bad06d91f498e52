//! Independent brute-force oracles: central finite differences for weight
//! gradients and a full-pipeline perturbation check for the architecture
//! hypergradient. These never go through the reverse-mode path they verify.

use serde::{Deserialize, Serialize};

use crate::engine::{self, EngineConfig, HypergradMode, Task};
use crate::error::{Error, Result};
use crate::supernet::{ArchParams, CellSpec};
use crate::tensor::{rel_err, GradMap, ParamSet, Tensor};

/// Default step for weight-gradient finite differences.
pub const WEIGHT_EPS: f64 = 1e-5;
/// Default step for hypergradient finite differences; the longer chain
/// amplifies roundoff, so the step is larger.
pub const HYPER_EPS: f64 = 1e-4;

/// Outcome of one gradient comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub label: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckReport {
    pub fn from_errors(label: &str, errs: &[f64], tolerance: f64) -> Self {
        let max = errs.iter().cloned().fold(0.0, f64::max);
        let mean = if errs.is_empty() {
            0.0
        } else {
            errs.iter().sum::<f64>() / errs.len() as f64
        };
        CheckReport {
            label: label.to_string(),
            coords: errs.len(),
            max_rel_err: max,
            mean_rel_err: mean,
            tolerance,
            pass: max <= tolerance,
        }
    }

    pub fn render(&self) -> String {
        format!(
            "{}: {} over {} coords, max rel err {:.3e} (mean {:.3e}, tol {:.1e})",
            self.label,
            if self.pass { "pass" } else { "FAIL" },
            self.coords,
            self.max_rel_err,
            self.mean_rel_err,
            self.tolerance
        )
    }
}

/// Central finite differences `(f(x+eps e) - f(x-eps e)) / 2 eps`, one
/// coordinate at a time, over every tensor in `params`.
pub fn finite_diff_gradient<F>(f: F, params: &ParamSet, eps: f64) -> Result<GradMap>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Verify(format!("eps must be positive, got {eps}")));
    }
    let mut grads = GradMap::new();
    for (name, tensor) in params {
        let mut g = Tensor::zeros(tensor.shape().to_vec());
        for i in 0..tensor.numel() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= eps;
            let fp = f(&plus)?;
            let fm = f(&minus)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite("finite_diff_gradient".into()));
            }
            g.data_mut()[i] = (fp - fm) / (2.0 * eps);
        }
        grads.insert(name.clone(), g);
    }
    Ok(grads)
}

/// Elementwise relative-error comparison of two gradient maps.
pub fn compare_grads(label: &str, a: &GradMap, b: &GradMap, tolerance: f64) -> CheckReport {
    let mut errs = Vec::new();
    for (name, ta) in a {
        let zero = Tensor::zeros(ta.shape().to_vec());
        let tb = b.get(name).unwrap_or(&zero);
        for (x, y) in ta.data().iter().zip(tb.data()) {
            errs.push(rel_err(*x, *y));
        }
    }
    CheckReport::from_errors(label, &errs, tolerance)
}

/// Perturb each architecture coordinate, rerun the full frozen-seed stage
/// chain plus validation loss, and compare the finite-difference slope to
/// the engine's unrolled architecture gradient.
pub fn hypergrad_check(
    config: &EngineConfig,
    tasks: &[Task],
    cell: &CellSpec,
    alpha: &ArchParams,
    eps: f64,
    tolerance: f64,
) -> Result<CheckReport> {
    let mut unrolled = config.clone();
    unrolled.hypergrad_mode = HypergradMode::Unrolled;
    let probe = engine::arch_gradient_at(&unrolled, tasks, cell, alpha, 0)?;

    // The pipeline must be replayable: identical seeds must reproduce the
    // validation loss bit-for-bit before perturbation results mean anything.
    let replay = engine::val_loss_at(&unrolled, tasks, cell, alpha, 0)?;
    if replay.to_bits() != probe.val_loss.to_bits() {
        return Err(Error::Verify(
            "pipeline is not replayable: validation loss differs between runs".into(),
        ));
    }

    let mut errs = Vec::new();
    for (edge, vec) in alpha.per_edge.iter().enumerate() {
        for i in 0..vec.numel() {
            let mut plus = alpha.clone();
            plus.per_edge[edge].data_mut()[i] += eps;
            let mut minus = alpha.clone();
            minus.per_edge[edge].data_mut()[i] -= eps;
            let fp = engine::val_loss_at(&unrolled, tasks, cell, &plus, 0)?;
            let fm = engine::val_loss_at(&unrolled, tasks, cell, &minus, 0)?;
            let fd = (fp - fm) / (2.0 * eps);
            let g = probe.grad.per_edge[edge].data()[i];
            errs.push(rel_err(g, fd));
        }
    }
    Ok(CheckReport::from_errors("hypergrad", &errs, tolerance))
}
