//! Seeded gradient-check problems for each loss.

use super::gradcheck::{gradcheck_indices, GradReport, FD_STEP};
use super::{dm_loss, focal_seg_slices, global_density_loss, lp_slices, softmax, softmax_backward, DmParams, LossError, Norm};
use crate::focus::GlobalDensityLabel;
use crate::grid::Grid;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    L1,
    L2,
    FocalSeg,
    GlobalDensity,
    Dm,
}

impl CheckKind {
    /// Tolerance each kind is expected to meet in 64-bit arithmetic.
    pub fn tolerance(self) -> f64 {
        match self {
            CheckKind::L2 => 1e-6,
            CheckKind::L1 | CheckKind::FocalSeg | CheckKind::GlobalDensity => 1e-4,
            CheckKind::Dm => 1e-3,
        }
    }
}

impl std::str::FromStr for CheckKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "l1" => Ok(CheckKind::L1),
            "l2" => Ok(CheckKind::L2),
            "focal-seg" => Ok(CheckKind::FocalSeg),
            "gd" => Ok(CheckKind::GlobalDensity),
            "dm" => Ok(CheckKind::Dm),
            other => Err(format!("unknown loss kind {other:?}")),
        }
    }
}

/// Minimum `|pred - target|` in the L1 problem, far above the FD step.
const L1_GAP: f64 = 0.01;
/// Focal-loss predictions stay this far from the clamp boundaries.
const PROB_MARGIN: f64 = 0.05;
const DM_TOL: f64 = 1e-12;
const DM_MAX_ITER: usize = 20_000;

/// Random problem of the given kind on a `side x side` grid (or
/// `side + 1` classes for the global-density loss), checked at every
/// coordinate with central differences.
pub fn check_loss(kind: CheckKind, seed: u64, side: usize) -> Result<GradReport, LossError> {
    let mut rng = SplitMix64::new(seed);
    let n = side * side;
    let mut uniform = |lo: f64, hi: f64, len: usize| -> Vec<f64> { (0..len).map(|_| rng.uniform_range(lo, hi)).collect() };
    let all: Vec<usize> = (0..n).collect();
    let tol = kind.tolerance();
    let report = match kind {
        CheckKind::L1 | CheckKind::L2 => {
            let pred = uniform(0.0, 1.0, n);
            let target: Vec<f64> = if kind == CheckKind::L1 {
                let gaps = uniform(L1_GAP, 0.5, n);
                let signs = uniform(-1.0, 1.0, n);
                pred.iter().zip(&gaps).zip(&signs).map(|((p, g), s)| p + g * s.signum()).collect()
            } else {
                uniform(0.0, 1.0, n)
            };
            let norm = if kind == CheckKind::L1 { Norm::L1 } else { Norm::L2 };
            gradcheck_indices(
                |x| {
                    let r = lp_slices(x, &target, norm);
                    (r.value, r.grad)
                },
                &pred,
                &all,
                FD_STEP,
                tol,
            )
        }
        CheckKind::FocalSeg => {
            let pred = uniform(PROB_MARGIN, 1.0 - PROB_MARGIN, n);
            let mut mask: Vec<f64> = uniform(0.0, 1.0, n).into_iter().map(|v| (v < 0.3) as u8 as f64).collect();
            // Both classes present.
            mask[0] = 1.0;
            mask[n - 1] = 0.0;
            focal_seg_slices(&pred, &mask, 2.0)?;
            gradcheck_indices(
                |x| {
                    let r = focal_seg_slices(x, &mask, 2.0).expect("binary mask");
                    (r.value, r.grad)
                },
                &pred,
                &all,
                FD_STEP,
                tol,
            )
        }
        CheckKind::GlobalDensity => {
            let classes = side + 1;
            let logits = uniform(-1.0, 1.0, classes);
            let label = GlobalDensityLabel(rng.below(classes));
            let idx: Vec<usize> = (0..classes).collect();
            gradcheck_indices(
                |z| {
                    let p = softmax(z);
                    let r = global_density_loss(&p, label, 2.0).expect("normalized probabilities");
                    (r.value, softmax_backward(&p, &r.grad))
                },
                &logits,
                &idx,
                FD_STEP,
                tol,
            )
        }
        CheckKind::Dm => {
            let pred = uniform(0.1, 1.0, n);
            let target = Grid::from_vec(side, side, uniform(0.0, 1.0, n)).expect("shape");
            // Keep the TV term away from its kinks: the distilled map is the
            // normalized prediction pushed by at least 1% per pixel.
            let cp: f64 = pred.iter().sum();
            let gaps = uniform(0.01, 0.5, n);
            let signs = uniform(-1.0, 1.0, n);
            let distilled_raw: Vec<f64> = pred
                .iter()
                .zip(&gaps)
                .zip(&signs)
                .map(|((p, g), s)| (p / cp) * (1.0 + g * s.signum()))
                .collect();
            let distilled = Grid::from_vec(side, side, distilled_raw).expect("shape");
            let ct = target.sum();
            let pred = {
                // Match the counts up to a small offset so the count term is smooth.
                let k = (ct + 0.5) / cp;
                pred.iter().map(|v| v * k).collect::<Vec<_>>()
            };
            let params = DmParams {
                tol: DM_TOL,
                max_iter: DM_MAX_ITER,
                ..DmParams::default()
            };
            let eval = |x: &[f64]| {
                let g = Grid::from_vec(side, side, x.to_vec()).expect("shape");
                let r = dm_loss(&g, &target, &distilled, &params).expect("valid maps");
                (r.result.value, r.result.grad)
            };
            gradcheck_indices(eval, &pred, &all, FD_STEP, tol)
        }
    };
    Ok(report)
}
