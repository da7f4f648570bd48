//! End-to-end gradient check of the distillation objective through the network.

use super::{image_to_input, loss_and_grad, prepare_sample, Stage, ToyNet, TrainConfig};
use crate::annot::{Point, PointSet, SigmaPolicy};
use crate::grid::Grid;
use crate::loss::{gradcheck_indices, GradReport, Norm, FD_STEP};
use crate::raster::GrayImage;
use crate::rng::SplitMix64;

/// Coordinates sampled from each parameter tensor (all of them if smaller).
const COORDS_PER_TENSOR: usize = 24;
/// Minimum gap between the student's masked output and the teacher map.
const TEACHER_GAP: f64 = 0.01;
const LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeCheck {
    pub report: GradReport,
    /// Coordinates dropped because a ±h step crosses a ReLU kink.
    pub skipped: usize,
}

/// Random network, `side x side` scene and teacher map; checks the gradient
/// of the full distillation objective with respect to sampled parameters.
///
/// # Panics
/// If `side < 4`.
pub fn check_composite(seed: u64, side: usize, rel_tol: f64) -> CompositeCheck {
    assert!(side >= 4, "side must be at least 4");
    let mut rng = SplitMix64::new(seed);
    let mut net = ToyNet::new(LEVELS, rng.next_u64());
    // Non-trivial biases so every bias gradient is exercised.
    for t in net.params_mut().iter_mut().skip(1).step_by(2) {
        t.data.iter_mut().for_each(|b| *b = rng.uniform_range(-0.2, 0.2));
    }

    let pixels = (0..side * side).map(|_| rng.below(256) as u8).collect();
    let image = GrayImage::new(side, side, pixels).expect("buffer matches shape");
    let n_points = 1 + rng.below(3);
    let pts = (0..n_points)
        .map(|_| Point::new(rng.uniform_range(0.5, side as f64 - 0.5), rng.uniform_range(0.5, side as f64 - 0.5)))
        .collect();
    let points = PointSet::new(side, side, pts).expect("points inside the image");
    let prep = prepare_sample(&image, &points, SigmaPolicy::Fixed(1.0)).expect("valid sample");
    debug_assert_eq!(prep.input, image_to_input(&image));

    let out = net.forward(&prep.input);
    let teacher: Vec<f64> = out
        .density
        .data()
        .iter()
        .zip(out.seg.data())
        .map(|(d, s)| {
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            d * s + sign * rng.uniform_range(TEACHER_GAP, 0.1)
        })
        .collect();
    let teacher = Grid::from_vec(side, side, teacher).expect("shape");

    let cfg = TrainConfig {
        stage: Stage::Distill,
        norm: Norm::L1,
        levels: LEVELS,
        ..Default::default()
    };
    let step = 1 + rng.below(3) as u64;

    let offsets = net.tensor_offsets();
    let total = net.num_params();
    let mut candidates = Vec::new();
    for (k, &start) in offsets.iter().enumerate() {
        let end = offsets.get(k + 1).copied().unwrap_or(total);
        let mut idx: Vec<usize> = (start..end).collect();
        rng.shuffle(&mut idx);
        idx.truncate(COORDS_PER_TENSOR);
        candidates.extend(idx);
    }

    let flat = net.flatten();
    let pattern_at = |net: &mut ToyNet, x: &[f64]| {
        net.set_flat(x);
        net.forward_cached(&prep.input).relu_pattern()
    };
    let mut probe = net.clone();
    let base_pattern = pattern_at(&mut probe, &flat);
    let mut x = flat.clone();
    let mut kept = Vec::with_capacity(candidates.len());
    for &i in &candidates {
        x[i] = flat[i] + FD_STEP;
        let up = pattern_at(&mut probe, &x);
        x[i] = flat[i] - FD_STEP;
        let down = pattern_at(&mut probe, &x);
        x[i] = flat[i];
        if up == base_pattern && down == base_pattern {
            kept.push(i);
        }
    }

    let report = gradcheck_indices(
        |p| {
            probe.set_flat(p);
            let (value, grads) = loss_and_grad(&probe, &prep, Some(&teacher), &cfg, step).expect("valid sample");
            (value, grads.into_iter().flat_map(|t| t.data).collect())
        },
        &flat,
        &kept,
        FD_STEP,
        rel_tol,
    );
    CompositeCheck {
        skipped: candidates.len() - kept.len(),
        report,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_gradient_matches() {
        for seed in 0..3 {
            let c = check_composite(seed, 8, 1e-3);
            assert!(c.report.passed, "seed {seed}: {}", c.report);
            assert!(c.report.checked > 200);
        }
    }
}
