//! Auxiliary supervision derived from point annotations: foreground masks,
//! occlusion maps and levels, global-density labels and crowding levels.

use std::ops::Deref;

use thiserror::Error;

use crate::annot::{ObjectDisc, PointSet};
use crate::grid::Grid;

/// Default number of global density levels (classes are `0..=M`).
pub const DEFAULT_DENSITY_LEVELS: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FocusError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("number of density levels must be at least 1")]
    ZeroLevels,
    #[error("patch area must be positive")]
    ZeroPatch,
}

/// Binary foreground mask (values exactly 0.0 or 1.0).
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask(Grid);

impl SegMask {
    /// Wraps a grid after checking it is binary.
    pub fn from_grid(grid: Grid) -> Option<Self> {
        grid.data()
            .iter()
            .all(|&v| v == 0.0 || v == 1.0)
            .then_some(Self(grid))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn foreground_pixels(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }
}

impl Deref for SegMask {
    type Target = Grid;
    fn deref(&self) -> &Grid {
        &self.0
    }
}

/// Per-pixel count of object regions covering the pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMap(Grid);

impl OcclusionMap {
    pub fn from_grid(grid: Grid) -> Self {
        Self(grid)
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }
}

impl Deref for OcclusionMap {
    type Target = Grid;
    fn deref(&self) -> &Grid {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct GlobalDensityLabel(pub usize);

/// Visits every pixel whose center lies within `radius` of the disc center
/// (`dx² + dy² <= radius²`).
fn for_each_covered(
    cx: f64,
    cy: f64,
    radius: f64,
    width: usize,
    height: usize,
    mut f: impl FnMut(usize, usize),
) {
    let r2 = radius * radius;
    let lo_r = (cy - radius).ceil().max(0.0) as i64;
    let hi_r = ((cy + radius).floor() as i64).min(height as i64 - 1);
    let lo_c = (cx - radius).ceil().max(0.0) as i64;
    let hi_c = ((cx + radius).floor() as i64).min(width as i64 - 1);
    for r in lo_r..=hi_r {
        let dy = r as f64 - cy;
        for c in lo_c..=hi_c {
            let dx = c as f64 - cx;
            if dx * dx + dy * dy <= r2 {
                f(r as usize, c as usize);
            }
        }
    }
}

/// Foreground mask: a pixel is 1 when some point lies within its own sigma.
///
/// Note the radius here is `sigma`, while the occlusion map uses `2 sigma`.
pub fn seg_mask(discs: &[ObjectDisc], width: usize, height: usize) -> SegMask {
    let mut g = Grid::zeros(width, height);
    for d in discs {
        for_each_covered(d.cx, d.cy, d.sigma, width, height, |r, c| g.set(r, c, 1.0));
    }
    SegMask(g)
}

pub fn occlusion_map(discs: &[ObjectDisc], width: usize, height: usize) -> OcclusionMap {
    let mut g = Grid::zeros(width, height);
    for d in discs {
        for_each_covered(d.cx, d.cy, d.radius, width, height, |r, c| {
            g.set(r, c, g.get(r, c) + 1.0)
        });
    }
    OcclusionMap(g)
}

/// Mean of the strictly positive entries; 0.0 when nothing is covered.
pub fn occlusion_level(m: &OcclusionMap) -> f64 {
    let (sum, n) = m
        .data()
        .iter()
        .filter(|&&v| v > 0.0)
        .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Global density step size `L = floor(max_i(N_i / Z_i * Z_patch_i) / M) + 1`.
///
/// Each entry pairs an image's annotations with the pixel area of the patch
/// labels are computed on. Evaluated in exact integer arithmetic:
/// `floor(max(x_i) / M) = max(floor(x_i / M))`.
pub fn density_step(dataset: &[(&PointSet, usize)], levels: usize) -> Result<u64, FocusError> {
    if dataset.is_empty() {
        return Err(FocusError::EmptyDataset);
    }
    if levels == 0 {
        return Err(FocusError::ZeroLevels);
    }
    let mut best: u128 = 0;
    for &(ps, patch_area) in dataset {
        if patch_area == 0 {
            return Err(FocusError::ZeroPatch);
        }
        let num = ps.len() as u128 * patch_area as u128;
        let den = ps.area() as u128 * levels as u128;
        best = best.max(num / den);
    }
    Ok(best as u64 + 1)
}

/// `min(floor(points / step), levels)`.
pub fn global_density_label(points_in_patch: usize, step: u64, levels: usize) -> GlobalDensityLabel {
    let step = step.max(1);
    let level = (points_in_patch as u64 / step).min(levels as u64);
    GlobalDensityLabel(level as usize)
}

/// Objects per pixel, `N / (width * height)`.
pub fn crowding_level(ps: &PointSet) -> f64 {
    ps.len() as f64 / ps.area() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annot::Point;
    use proptest::prelude::*;

    fn disc(x: f64, y: f64, s: f64) -> ObjectDisc {
        ObjectDisc::new(x, y, s).unwrap()
    }

    #[test]
    fn empty_mask() {
        assert_eq!(seg_mask(&[], 5, 5).foreground_pixels(), 0);
    }

    #[test]
    fn plus_shaped_mask() {
        let m = seg_mask(&[disc(2.0, 2.0, 1.4)], 5, 5);
        assert_eq!(m.foreground_pixels(), 5);
        for (r, c) in [(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)] {
            assert_eq!(m.get(r, c), 1.0);
        }
        assert_eq!(m.get(1, 1), 0.0);
    }

    #[test]
    fn duplicate_discs_same_mask() {
        let one = seg_mask(&[disc(2.0, 2.0, 1.4)], 5, 5);
        let two = seg_mask(&[disc(2.0, 2.0, 1.4), disc(2.0, 2.0, 1.4)], 5, 5);
        assert_eq!(one, two);
    }

    #[test]
    fn occlusion_single_and_empty() {
        let m = occlusion_map(&[disc(3.0, 3.0, 1.0)], 7, 7);
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(m.get(3, 5), 1.0);
        assert_eq!(m.get(3, 6), 0.0);
        assert!(occlusion_map(&[], 4, 4).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overlapping_discs_count_twice() {
        let m = occlusion_map(&[disc(3.0, 3.0, 1.0), disc(4.0, 3.0, 1.0)], 8, 7);
        // Both centers within 2 of (3,3) and (3,4): enumerated by hand.
        assert_eq!(m.get(3, 3), 2.0);
        assert_eq!(m.get(3, 4), 2.0);
        assert_eq!(m.get(3, 2), 2.0);
        assert_eq!(m.get(3, 1), 1.0);
        assert_eq!(m.get(3, 6), 1.0);
    }

    #[test]
    fn occlusion_level_examples() {
        let g = |v: Vec<f64>| OcclusionMap::from_grid(Grid::from_vec(2, 2, v).unwrap());
        assert_eq!(occlusion_level(&g(vec![0.0, 0.0, 1.0, 1.0])), 1.0);
        assert!((occlusion_level(&g(vec![0.0, 2.0, 1.0, 1.0])) - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(occlusion_level(&g(vec![0.0; 4])), 0.0);
    }

    #[test]
    fn step_examples() {
        let pts: Vec<Point> = (0..1000).map(|i| Point::new((i % 100) as f64, (i / 100) as f64)).collect();
        let big = PointSet::new(100, 100, pts).unwrap();
        assert_eq!(density_step(&[(&big, 2500)], 8).unwrap(), 32);
        let empty = PointSet::new(10, 10, vec![]).unwrap();
        assert_eq!(density_step(&[(&empty, 100), (&empty, 25)], 8).unwrap(), 1);
        let few = PointSet::new(10, 10, vec![Point::new(1.0, 1.0); 7]).unwrap();
        assert_eq!(density_step(&[(&few, 100)], 8).unwrap(), 1);
        assert_eq!(density_step(&[], 8), Err(FocusError::EmptyDataset));
    }

    #[test]
    fn label_examples() {
        assert_eq!(global_density_label(7, 3, 8), GlobalDensityLabel(2));
        assert_eq!(global_density_label(0, 5, 8), GlobalDensityLabel(0));
        assert_eq!(global_density_label(1000, 3, 8), GlobalDensityLabel(8));
    }

    #[test]
    fn crowding_examples() {
        assert_eq!(crowding_level(&PointSet::new(10, 10, vec![]).unwrap()), 0.0);
        let p50 = PointSet::new(100, 100, vec![Point::new(1.0, 1.0); 50]).unwrap();
        assert_eq!(crowding_level(&p50), 0.005);
        let p100 = PointSet::new(100, 100, vec![Point::new(1.0, 1.0); 100]).unwrap();
        assert_eq!(crowding_level(&p100), 2.0 * crowding_level(&p50));
    }

    fn arb_discs() -> impl Strategy<Value = Vec<ObjectDisc>> {
        prop::collection::vec((0.0f64..16.0, 0.0f64..12.0, 0.3f64..4.0), 0..12)
            .prop_map(|v| v.into_iter().map(|(x, y, s)| disc(x, y, s)).collect())
    }

    proptest! {
        #[test]
        fn mask_inside_occlusion_support(ds in arb_discs()) {
            let s = seg_mask(&ds, 16, 12);
            let m = occlusion_map(&ds, 16, 12);
            for i in 0..s.len() {
                prop_assert!(s.data()[i] <= (m.data()[i] > 0.0) as u8 as f64);
            }
            let covered = m.data().iter().any(|&v| v > 0.0);
            prop_assert_eq!(occlusion_level(&m) >= 1.0, covered);
        }

        #[test]
        fn occlusion_additive(a in arb_discs(), b in arb_discs()) {
            let both: Vec<_> = a.iter().chain(&b).copied().collect();
            let ma = occlusion_map(&a, 16, 12);
            let mb = occlusion_map(&b, 16, 12);
            let mab = occlusion_map(&both, 16, 12);
            for i in 0..mab.len() {
                prop_assert_eq!(mab.data()[i], ma.data()[i] + mb.data()[i]);
            }
        }

        #[test]
        fn label_monotone(n in 0usize..500, step in 1u64..50, levels in 1usize..12) {
            let base = global_density_label(n, step, levels);
            prop_assert!(global_density_label(n + 1, step, levels) >= base);
            prop_assert!(global_density_label(n, step + 1, levels) <= base);
            prop_assert!(base.0 <= levels);
        }
    }
}
