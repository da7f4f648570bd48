//! Synthetic cluttered scenes with bright disc objects.

use crate::annot::{Point, PointSet};
use crate::raster::GrayImage;
use crate::rng::SplitMix64;

/// Spacing of the value-noise lattice in pixels.
const NOISE_CELL: usize = 8;
const NOISE_SPAN: f64 = 235.0;
const OBJECT_INTENSITY: (f64, f64) = (200.0, 255.0);
const DISTRACTOR_INTENSITY: (f64, f64) = (60.0, 140.0);
/// Rejection-sampling attempts per object before separation is relaxed.
const PLACEMENT_TRIES: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub n_objects: usize,
    pub object_radius_range: (f64, f64),
    /// Clutter amplitude in `[0, 1]`: noise contrast and distractor count.
    pub background: f64,
    pub seed: u64,
    /// Minimum distance between object centers. Relaxed for an object that
    /// cannot be placed after a fixed number of tries.
    pub min_separation: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 32,
            n_objects: 10,
            object_radius_range: (1.5, 2.5),
            background: 0.5,
            seed: 0,
            min_separation: 1.0,
        }
    }
}

fn fill_disc(pixels: &mut [u8], size: usize, cx: f64, cy: f64, rx: f64, ry: f64, value: u8, keep_max: bool) {
    let r0 = (cy - ry).floor().max(0.0) as usize;
    let r1 = ((cy + ry).ceil() as usize).min(size - 1);
    let c0 = (cx - rx).floor().max(0.0) as usize;
    let c1 = ((cx + rx).ceil() as usize).min(size - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let dx = (c as f64 - cx) / rx;
            let dy = (r as f64 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                let p = &mut pixels[r * size + c];
                *p = if keep_max { (*p).max(value) } else { value };
            }
        }
    }
}

/// Deterministic scene for `spec`; points are the object centers.
///
/// # Panics
/// If `spec.size < 8` or the radius range is empty or non-positive.
pub fn synth_scene(spec: &SceneSpec) -> (GrayImage, PointSet) {
    let size = spec.size;
    assert!(size >= 8, "scene side must be at least 8");
    let (rmin, rmax) = spec.object_radius_range;
    assert!(rmin > 0.0 && rmax >= rmin, "bad radius range");
    let amp = spec.background.clamp(0.0, 1.0);
    let mut rng = SplitMix64::new(spec.seed);

    // Bilinear value noise in [20, 20 + NOISE_SPAN amp].
    let cells = size / NOISE_CELL + 2;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.uniform()).collect();
    let mut pixels = vec![0u8; size * size];
    for r in 0..size {
        for c in 0..size {
            let (fy, fx) = (r as f64 / NOISE_CELL as f64, c as f64 / NOISE_CELL as f64);
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |y: usize, x: usize| lattice[y * cells + x];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            let v = top * (1.0 - ty) + bottom * ty;
            pixels[r * size + c] = (20.0 + NOISE_SPAN * amp * v).round() as u8;
        }
    }

    let distractors = (amp * (size * size) as f64 / 128.0).round() as usize;
    for _ in 0..distractors {
        let cx = rng.uniform_range(0.0, size as f64);
        let cy = rng.uniform_range(0.0, size as f64);
        let rx = rng.uniform_range(1.0, 3.5);
        let ry = rng.uniform_range(1.0, 3.5);
        let v = rng.uniform_range(DISTRACTOR_INTENSITY.0, DISTRACTOR_INTENSITY.1 + 1.0).floor() as u8;
        fill_disc(&mut pixels, size, cx, cy, rx, ry, v, false);
    }

    let margin = 1.0;
    let hi = size as f64 - margin;
    let mut points: Vec<Point> = Vec::with_capacity(spec.n_objects);
    for _ in 0..spec.n_objects {
        let mut p = Point::new(rng.uniform_range(margin, hi), rng.uniform_range(margin, hi));
        for _ in 0..PLACEMENT_TRIES {
            if points.iter().all(|q| q.dist(p) >= spec.min_separation) {
                break;
            }
            p = Point::new(rng.uniform_range(margin, hi), rng.uniform_range(margin, hi));
        }
        let radius = rng.uniform_range(rmin, rmax);
        let v = rng.uniform_range(OBJECT_INTENSITY.0, OBJECT_INTENSITY.1 + 1.0).floor().min(255.0) as u8;
        fill_disc(&mut pixels, size, p.x, p.y, radius, radius, v, true);
        points.push(p);
    }

    // Mild pixel noise on top.
    let jitter = 8.0 * amp;
    for px in &mut pixels {
        let n = rng.uniform_range(-jitter, jitter);
        *px = (*px as f64 + n).round().clamp(0.0, 255.0) as u8;
    }

    let image = GrayImage::new(size, size, pixels).expect("buffer matches size");
    let points = PointSet::new(size, size, points).expect("centers lie inside the image");
    (image, points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_has_no_points() {
        let (img, ps) = synth_scene(&SceneSpec {
            n_objects: 0,
            ..Default::default()
        });
        assert!(ps.is_empty());
        assert_eq!((img.width(), img.height()), (32, 32));
        assert!(img.pixels().iter().all(|&p| p < 200));
    }

    #[test]
    fn deterministic_and_counted() {
        let spec = SceneSpec {
            n_objects: 5,
            seed: 77,
            ..Default::default()
        };
        let a = synth_scene(&spec);
        assert_eq!(a, synth_scene(&spec));
        assert_eq!(a.1.len(), 5);
        let other = synth_scene(&SceneSpec { seed: 78, ..spec });
        assert_ne!(a.0, other.0);
    }

    #[test]
    fn objects_are_bright() {
        let spec = SceneSpec {
            n_objects: 6,
            seed: 3,
            ..Default::default()
        };
        let (img, ps) = synth_scene(&spec);
        for p in ps.points() {
            let v = img.get(p.y.round() as usize, p.x.round() as usize);
            assert!(v >= 190, "center pixel {v}");
        }
    }
}
