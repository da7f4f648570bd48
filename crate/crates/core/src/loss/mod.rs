//! Training objectives with analytic gradients.
//!
//! Every pixel loss is a mean over pixels, so weights do not depend on the
//! resolution. Gradients are returned with respect to the prediction only;
//! targets (including distilled teacher outputs) are constants.

pub mod checks;
mod gradcheck;
pub mod sinkhorn;

use thiserror::Error;

pub use checks::{check_loss, CheckKind};
pub use gradcheck::{gradcheck, gradcheck_indices, GradReport, FD_STEP};
pub use sinkhorn::{grid_cost, sinkhorn, SinkhornError, TransportPlan};

use crate::focus::{GlobalDensityLabel, SegMask};
use crate::grid::{Grid, ShapeMismatch};

/// Probability clamp for every log term.
pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_LAMBDA_SEG: f64 = 0.1;
pub const DEFAULT_LAMBDA_GD: f64 = 0.01;
pub const DEFAULT_LAMBDA_OT: f64 = 0.1;
pub const DEFAULT_LAMBDA_TV: f64 = 0.01;
/// Below this predicted mass the OT and TV terms are undefined.
pub const MIN_PRED_MASS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    ShapeMismatch(#[from] ShapeMismatch),
    #[error("segmentation target is not binary at pixel {0}")]
    NonBinaryMask(usize),
    #[error("probabilities must be non-negative and sum to 1 (sum = {0})")]
    ProbsNotNormalized(f64),
    #[error("level {level} out of range for {classes} classes")]
    LevelOutOfRange { level: usize, classes: usize },
    #[error("unsupported norm p = {0}; expected 1 or 2")]
    UnsupportedNorm(u32),
    #[error(transparent)]
    Sinkhorn(#[from] SinkhornError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// Gradient with respect to the prediction, same layout.
    pub grad: Vec<f64>,
}

impl LossResult {
    pub fn zero(len: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

impl TryFrom<u32> for Norm {
    type Error = LossError;
    fn try_from(p: u32) -> Result<Self, LossError> {
        match p {
            1 => Ok(Norm::L1),
            2 => Ok(Norm::L2),
            other => Err(LossError::UnsupportedNorm(other)),
        }
    }
}

/// Mean absolute (`L1`) or mean squared (`L2`) error. The L1 subgradient is
/// 0 at exact ties.
pub fn lp_loss(pred: &Grid, target: &Grid, norm: Norm) -> Result<LossResult, LossError> {
    target.check_same_shape(pred)?;
    Ok(lp_slices(pred.data(), target.data(), norm))
}

pub(crate) fn lp_slices(pred: &[f64], target: &[f64], norm: Norm) -> LossResult {
    let n = pred.len().max(1) as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            match norm {
                Norm::L1 => {
                    value += d.abs();
                    if d > 0.0 {
                        1.0 / n
                    } else if d < 0.0 {
                        -1.0 / n
                    } else {
                        0.0
                    }
                }
                Norm::L2 => {
                    value += d * d;
                    2.0 * d / n
                }
            }
        })
        .collect();
    LossResult {
        value: value / n,
        grad,
    }
}

/// Auxiliary objective: the teacher's prediction on the background-blacked
/// image against the Gaussian density target.
pub fn auxiliary_loss(pred_on_masked_input: &Grid, gaussian_target: &Grid, norm: Norm) -> Result<LossResult, LossError> {
    lp_loss(pred_on_masked_input, gaussian_target, norm)
}

/// Student prediction against the frozen teacher output.
pub fn distillation_loss(pred: &Grid, distilled_target: &Grid, norm: Norm) -> Result<LossResult, LossError> {
    lp_loss(pred, distilled_target, norm)
}

/// Per-pixel class-balanced focal loss for the foreground mask.
///
/// Class weights are `alpha_l = 1 - |S_l| / |S|`. Predictions are clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`; the gradient is zero where clamping is active.
pub fn focal_seg_loss(pred_prob: &Grid, gt: &SegMask, gamma: f64) -> Result<LossResult, LossError> {
    gt.check_same_shape(pred_prob)?;
    focal_seg_slices(pred_prob.data(), gt.data(), gamma)
}

pub(crate) fn focal_seg_slices(pred: &[f64], gt: &[f64], gamma: f64) -> Result<LossResult, LossError> {
    if let Some(i) = gt.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(LossError::NonBinaryMask(i));
    }
    let n = pred.len().max(1) as f64;
    let fg = gt.iter().filter(|&&v| v == 1.0).count() as f64;
    let alpha = [1.0 - (n - fg) / n, 1.0 - fg / n]; // [background, foreground]
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(&raw, &label)| {
            let p1 = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let clamped = p1 != raw;
            let (p, sign, a) = if label == 1.0 {
                (p1, 1.0, alpha[1])
            } else {
                (1.0 - p1, -1.0, alpha[0])
            };
            let q = 1.0 - p;
            value += -a * q.powf(gamma) * p.ln();
            if clamped {
                return 0.0;
            }
            // d/dp of -a q^g ln p, then chain through p = p1 or 1 - p1.
            let modulating = if gamma == 0.0 {
                0.0
            } else {
                gamma * q.powf(gamma - 1.0) * p.ln()
            };
            sign * a * (modulating - q.powf(gamma) / p) / n
        })
        .collect();
    Ok(LossResult {
        value: value / n,
        grad,
    })
}

/// Focal loss over global density classes for one patch.
///
/// `pred_probs` must already be a distribution (e.g. a softmax output); the
/// gradient is with respect to the probabilities. Use [`softmax_backward`]
/// to continue to logits.
pub fn global_density_loss(pred_probs: &[f64], gt: GlobalDensityLabel, gamma: f64) -> Result<LossResult, LossError> {
    let sum: f64 = pred_probs.iter().sum();
    if pred_probs.iter().any(|&p| !(p >= 0.0)) || !((sum - 1.0).abs() <= 1e-6) {
        return Err(LossError::ProbsNotNormalized(sum));
    }
    let g = gt.0;
    if g >= pred_probs.len() {
        return Err(LossError::LevelOutOfRange {
            level: g,
            classes: pred_probs.len(),
        });
    }
    let raw = pred_probs[g];
    let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let q = 1.0 - p;
    let value = -q.powf(gamma) * p.ln();
    let mut grad = vec![0.0; pred_probs.len()];
    if p == raw {
        let modulating = if gamma == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * p.ln()
        };
        grad[g] = modulating - q.powf(gamma) / p;
    }
    Ok(LossResult { value, grad })
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - top).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Chain rule through softmax: `dL/dz_k = p_k (dL/dp_k - sum_j p_j dL/dp_j)`.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs.iter().zip(grad_probs).map(|(p, g)| p * (g - dot)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmParams {
    pub lambda_ot: f64,
    pub lambda_tv: f64,
    pub reg_eps: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for DmParams {
    fn default() -> Self {
        Self {
            lambda_ot: DEFAULT_LAMBDA_OT,
            lambda_tv: DEFAULT_LAMBDA_TV,
            reg_eps: sinkhorn::DEFAULT_REG_EPS,
            max_iter: sinkhorn::DEFAULT_MAX_ITER,
            tol: sinkhorn::DEFAULT_TOL,
        }
    }
}

/// Distribution-matching loss with its three terms broken out.
#[derive(Debug, Clone, PartialEq)]
pub struct DmLoss {
    pub result: LossResult,
    pub count_term: f64,
    pub ot_term: f64,
    pub tv_term: f64,
    /// Predicted mass below [`MIN_PRED_MASS`]: only the count term is used.
    pub zero_mass_prediction: bool,
    /// `false` when Sinkhorn hit `max_iter` before its tolerance.
    pub ot_converged: bool,
}

/// `|C(pred) - C(target)| + l_ot * OT(pred, target) + l_tv * TV(pred, distilled)`.
///
/// OT is the entropic transport value between the count-normalized maps on
/// the pixel grid (squared-Euclidean cost, coordinates in `[0, 1]²`); its
/// gradient comes from the source dual potential. TV is half the L1 distance
/// between count-normalized prediction and distilled map. A zero-mass target
/// or distilled map disables the corresponding term.
pub fn dm_loss(pred: &Grid, target: &Grid, distilled: &Grid, params: &DmParams) -> Result<DmLoss, LossError> {
    pred.check_same_shape(target)?;
    pred.check_same_shape(distilled)?;
    let (w, h) = pred.shape();
    let n = pred.len();
    let cp: f64 = pred.sum();
    let ct: f64 = target.sum();
    let cd: f64 = distilled.sum();

    let diff = cp - ct;
    let count_term = diff.abs();
    let s = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    let mut grad = vec![s; n];
    let mut out = DmLoss {
        result: LossResult::zero(n),
        count_term,
        ot_term: 0.0,
        tv_term: 0.0,
        zero_mass_prediction: cp < MIN_PRED_MASS,
        ot_converged: true,
    };
    if out.zero_mass_prediction {
        out.result = LossResult {
            value: count_term,
            grad,
        };
        return Ok(out);
    }
    let a: Vec<f64> = pred.data().iter().map(|v| v / cp).collect();

    if ct > 0.0 {
        let b: Vec<f64> = target.data().iter().map(|v| v / ct).collect();
        let t = sinkhorn(&a, &b, &grid_cost(w, h), params.reg_eps, params.max_iter, params.tol)?;
        out.ot_term = t.objective;
        out.ot_converged = t.converged;
        // d/dpred_k of F(pred / cp) = (f_k - <f, a>) / cp
        let mean_f: f64 = a.iter().zip(&t.dual_u).map(|(x, f)| x * f).sum();
        for (gk, fk) in grad.iter_mut().zip(&t.dual_u) {
            *gk += params.lambda_ot * (fk - mean_f) / cp;
        }
    }
    if cd > 0.0 {
        let mut tv = 0.0;
        let signs: Vec<f64> = a
            .iter()
            .zip(distilled.data())
            .map(|(x, d)| {
                let e = x - d / cd;
                tv += e.abs();
                if e > 0.0 {
                    1.0
                } else if e < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        out.tv_term = 0.5 * tv;
        let mean_s: f64 = a.iter().zip(&signs).map(|(x, s)| x * s).sum();
        for (gk, sk) in grad.iter_mut().zip(&signs) {
            *gk += params.lambda_tv * 0.5 * (sk - mean_s) / cp;
        }
    }
    out.result = LossResult {
        value: count_term + params.lambda_ot * out.ot_term + params.lambda_tv * out.tv_term,
        grad,
    };
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeWeights {
    pub lambda_seg: f64,
    pub lambda_gd: f64,
}

impl Default for CompositeWeights {
    fn default() -> Self {
        Self {
            lambda_seg: DEFAULT_LAMBDA_SEG,
            lambda_gd: DEFAULT_LAMBDA_GD,
        }
    }
}

/// Weighted total with per-head gradients already scaled by their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeLoss {
    pub value: f64,
    pub grad_density: Vec<f64>,
    pub grad_seg: Vec<f64>,
    pub grad_gd: Vec<f64>,
}

/// `distill + lambda_seg * seg + lambda_gd * gd`.
pub fn composite_loss(
    distill: &LossResult,
    seg: &LossResult,
    gd: &LossResult,
    weights: CompositeWeights,
) -> CompositeLoss {
    let scale = |g: &[f64], k: f64| g.iter().map(|v| v * k).collect();
    CompositeLoss {
        value: distill.value + weights.lambda_seg * seg.value + weights.lambda_gd * gd.value,
        grad_density: distill.grad.clone(),
        grad_seg: scale(&seg.grad, weights.lambda_seg),
        grad_gd: scale(&gd.grad, weights.lambda_gd),
    }
}
