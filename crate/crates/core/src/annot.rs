//! Point annotations, circular object model and Gaussian bandwidth estimation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bandwidth used when a point has no neighbor to measure against.
pub const FALLBACK_SIGMA: f64 = 4.0;
/// Lower clamp for every estimated bandwidth.
pub const MIN_SIGMA: f64 = 0.5;
pub const DEFAULT_KNN: usize = 3;
pub const DEFAULT_KNN_SCALE: f64 = 0.3;

#[derive(Debug, Error)]
pub enum AnnotError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed annotation file: {0}")]
    MalformedFile(String),
    #[error("point {index} at ({x}, {y}) is outside the {width}x{height} image")]
    OutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: usize, height: usize },
    #[error("point set is empty")]
    EmptyPointSet,
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("k must be at least 1")]
    ZeroNeighbors,
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Annotated points of one image. Order is significant and preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    width: usize,
    height: usize,
    points: Vec<Point>,
}

impl PointSet {
    /// Validates dimensions, finiteness and the half-open bounds
    /// `[0, width) x [0, height)`.
    pub fn new(width: usize, height: usize, points: Vec<Point>) -> Result<Self, AnnotError> {
        if width == 0 || height == 0 {
            return Err(AnnotError::EmptyImage { width, height });
        }
        for (index, p) in points.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(AnnotError::NonFinite { index });
            }
            if !(0.0..width as f64).contains(&p.x) || !(0.0..height as f64).contains(&p.y) {
                return Err(AnnotError::OutOfBounds {
                    index,
                    x: p.x,
                    y: p.y,
                    width,
                    height,
                });
            }
        }
        Ok(Self {
            width,
            height,
            points,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Pixel count of the image, `width * height`.
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..self.width as f64).contains(&x) && (0.0..self.height as f64).contains(&y)
    }

    pub(crate) fn push_unchecked(&mut self, p: Point) {
        debug_assert!(self.contains(p.x, p.y));
        self.points.push(p);
    }
}

/// Circular object: center, Gaussian bandwidth and radius `2 * sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectDisc {
    pub cx: f64,
    pub cy: f64,
    pub sigma: f64,
    pub radius: f64,
}

impl ObjectDisc {
    pub fn new(cx: f64, cy: f64, sigma: f64) -> Result<Self, AnnotError> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(AnnotError::NonPositiveSigma(sigma));
        }
        Ok(Self {
            cx,
            cy,
            sigma,
            radius: 2.0 * sigma,
        })
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    width: usize,
    height: usize,
    points: Vec<[f64; 2]>,
}

pub fn parse_annotations(text: &str) -> Result<PointSet, AnnotError> {
    let file: AnnotationFile =
        serde_json::from_str(text).map_err(|e| AnnotError::MalformedFile(e.to_string()))?;
    let points = file.points.iter().map(|&[x, y]| Point::new(x, y)).collect();
    PointSet::new(file.width, file.height, points)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<PointSet, AnnotError> {
    parse_annotations(&fs::read_to_string(path)?)
}

pub fn annotations_to_json(ps: &PointSet) -> String {
    let file = AnnotationFile {
        width: ps.width,
        height: ps.height,
        points: ps.points.iter().map(|p| [p.x, p.y]).collect(),
    };
    serde_json::to_string(&file).expect("annotation serialization cannot fail")
}

pub fn save_annotations(ps: &PointSet, path: impl AsRef<Path>) -> Result<(), AnnotError> {
    fs::write(path, annotations_to_json(ps))?;
    Ok(())
}

/// Unclamped geometry-adaptive bandwidths: `scale` times the mean distance to
/// the `min(k, N-1)` nearest other points, or `None` for a lone point.
///
/// Exact brute force, O(N² log N).
pub fn raw_knn_sigmas(points: &[Point], k: usize, scale: f64) -> Vec<Option<f64>> {
    let n = points.len();
    let kk = k.min(n.saturating_sub(1));
    let mut dists = Vec::with_capacity(n.saturating_sub(1));
    points
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if kk == 0 {
                return None;
            }
            dists.clear();
            dists.extend(
                points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &q)| p.dist(q)),
            );
            dists.select_nth_unstable_by(kk - 1, f64::total_cmp);
            let nearest = &mut dists[..kk];
            // Fixed summation order so permuted inputs give identical sums.
            nearest.sort_unstable_by(f64::total_cmp);
            Some(scale * nearest.iter().sum::<f64>() / kk as f64)
        })
        .collect()
}

/// Upper clamp for an image: a quarter of its shorter side, never below
/// [`MIN_SIGMA`].
pub fn max_sigma(width: usize, height: usize) -> f64 {
    (width.min(height) as f64 / 4.0).max(MIN_SIGMA)
}

/// Geometry-adaptive discs, one per point in input order.
pub fn estimate_sigmas(ps: &PointSet, k: usize, scale: f64) -> Result<Vec<ObjectDisc>, AnnotError> {
    if ps.is_empty() {
        return Err(AnnotError::EmptyPointSet);
    }
    if k == 0 {
        return Err(AnnotError::ZeroNeighbors);
    }
    if !(scale > 0.0) {
        return Err(AnnotError::NonPositiveScale(scale));
    }
    let hi = max_sigma(ps.width, ps.height);
    raw_knn_sigmas(&ps.points, k, scale)
        .into_iter()
        .zip(&ps.points)
        .map(|(s, p)| {
            let sigma = s.unwrap_or(FALLBACK_SIGMA).clamp(MIN_SIGMA, hi);
            // All-duplicate inputs give 0 before the clamp; the clamp keeps it positive.
            ObjectDisc::new(p.x, p.y, sigma)
        })
        .collect()
}

pub fn fixed_sigmas(ps: &PointSet, sigma: f64) -> Result<Vec<ObjectDisc>, AnnotError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(AnnotError::NonPositiveSigma(sigma));
    }
    ps.points
        .iter()
        .map(|p| ObjectDisc::new(p.x, p.y, sigma))
        .collect()
}

/// How discs are derived from a point set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaPolicy {
    Adaptive { k: usize, scale: f64 },
    Fixed(f64),
}

impl Default for SigmaPolicy {
    fn default() -> Self {
        SigmaPolicy::Adaptive {
            k: DEFAULT_KNN,
            scale: DEFAULT_KNN_SCALE,
        }
    }
}

impl SigmaPolicy {
    /// Like the underlying estimators, except an empty set yields no discs.
    pub fn discs(&self, ps: &PointSet) -> Result<Vec<ObjectDisc>, AnnotError> {
        match *self {
            _ if ps.is_empty() => Ok(Vec::new()),
            SigmaPolicy::Adaptive { k, scale } => estimate_sigmas(ps, k, scale),
            SigmaPolicy::Fixed(s) => fixed_sigmas(ps, s),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ps(w: usize, h: usize, pts: &[(f64, f64)]) -> PointSet {
        PointSet::new(w, h, pts.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap()
    }

    #[test]
    fn parse_single_point() {
        let p = parse_annotations(r#"{"width":5,"height":5,"points":[[2,2]]}"#).unwrap();
        assert_eq!((p.width(), p.height(), p.len()), (5, 5, 1));
    }

    #[test]
    fn parse_empty_and_unknown_keys() {
        let p = parse_annotations(r#"{"width":5,"height":5,"points":[],"source":"x"}"#).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn parse_rejects_x_equal_width() {
        let err = parse_annotations(r#"{"width":5,"height":5,"points":[[5,2]]}"#).unwrap_err();
        assert!(matches!(err, AnnotError::OutOfBounds { index: 0, .. }));
    }

    #[test]
    fn parse_rejects_missing_key_and_bad_syntax() {
        assert!(matches!(
            parse_annotations(r#"{"width":5,"points":[]}"#),
            Err(AnnotError::MalformedFile(_))
        ));
        assert!(matches!(
            parse_annotations("{"),
            Err(AnnotError::MalformedFile(_))
        ));
        assert!(matches!(
            parse_annotations(r#"{"width":5.5,"height":5,"points":[]}"#),
            Err(AnnotError::MalformedFile(_))
        ));
    }

    #[test]
    fn non_finite_rejected_at_construction() {
        let err = PointSet::new(5, 5, vec![Point::new(f64::NAN, 1.0)]).unwrap_err();
        assert!(matches!(err, AnnotError::NonFinite { index: 0 }));
    }

    #[test]
    fn json_round_trip() {
        let p = ps(7, 4, &[(0.5, 1.25), (6.0, 3.0)]);
        assert_eq!(parse_annotations(&annotations_to_json(&p)).unwrap(), p);
    }

    #[test]
    fn single_point_uses_fallback() {
        let discs = estimate_sigmas(&ps(100, 100, &[(50.0, 50.0)]), 3, 0.3).unwrap();
        assert_eq!(discs[0].sigma, 4.0);
        assert_eq!(discs[0].radius, 8.0);
    }

    #[test]
    fn two_points_one_neighbor() {
        let discs = estimate_sigmas(&ps(100, 100, &[(10.0, 10.0), (20.0, 10.0)]), 3, 0.3).unwrap();
        for d in &discs {
            assert!((d.sigma - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_middle_point() {
        let discs = estimate_sigmas(
            &ps(100, 100, &[(0.0, 50.0), (3.0, 50.0), (9.0, 50.0)]),
            2,
            0.3,
        )
        .unwrap();
        // Middle point: neighbors at 3 and 6.
        assert!((discs[1].sigma - 1.35).abs() < 1e-12);
        // End points, from the same pairwise table: (3+9)/2 and (6+9)/2.
        assert!((discs[0].sigma - 0.3 * 6.0).abs() < 1e-12);
        assert!((discs[2].sigma - 0.3 * 7.5).abs() < 1e-12);
    }

    #[test]
    fn empty_set_is_an_error() {
        let err = estimate_sigmas(&ps(5, 5, &[]), 3, 0.3).unwrap_err();
        assert!(matches!(err, AnnotError::EmptyPointSet));
    }

    #[test]
    fn duplicates_contribute_zero_distance() {
        let raw = raw_knn_sigmas(
            &[Point::new(1.0, 1.0), Point::new(1.0, 1.0), Point::new(5.0, 1.0)],
            2,
            1.0,
        );
        assert_eq!(raw[0], Some(2.0));
        // Clamped result stays positive.
        let discs = estimate_sigmas(&ps(10, 10, &[(1.0, 1.0), (1.0, 1.0)]), 1, 0.3).unwrap();
        assert_eq!(discs[0].sigma, MIN_SIGMA);
    }

    #[test]
    fn clamps_to_quarter_side() {
        let discs = estimate_sigmas(&ps(8, 8, &[(0.0, 0.0), (7.0, 7.0)]), 1, 1.0).unwrap();
        assert_eq!(discs[0].sigma, 2.0);
    }

    #[test]
    fn fixed_sigma_cases() {
        let five = ps(10, 10, &[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0), (4.0, 4.0), (5.0, 5.0)]);
        let discs = fixed_sigmas(&five, 2.0).unwrap();
        assert_eq!(discs.len(), 5);
        assert!(discs.iter().all(|d| d.sigma == 2.0 && d.radius == 4.0));
        assert!(fixed_sigmas(&ps(10, 10, &[]), 2.0).unwrap().is_empty());
        assert_eq!(fixed_sigmas(&ps(10, 10, &[(1.0, 1.0)]), 1.5).unwrap()[0].radius, 3.0);
        assert!(matches!(
            fixed_sigmas(&five, 0.0),
            Err(AnnotError::NonPositiveSigma(_))
        ));
    }

    fn arb_points() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((0.0f64..60.0, 0.0f64..60.0), 1..25)
    }

    proptest! {
        #[test]
        fn permutation_equivariant(pts in arb_points(), seed in any::<u64>()) {
            let a = ps(64, 64, &pts);
            let mut order: Vec<usize> = (0..pts.len()).collect();
            crate::rng::SplitMix64::new(seed).shuffle(&mut order);
            let permuted: Vec<(f64, f64)> = order.iter().map(|&i| pts[i]).collect();
            let b = ps(64, 64, &permuted);
            let da = estimate_sigmas(&a, 3, 0.3).unwrap();
            let db = estimate_sigmas(&b, 3, 0.3).unwrap();
            for (pos, &i) in order.iter().enumerate() {
                prop_assert_eq!(db[pos].sigma, da[i].sigma);
            }
        }

        #[test]
        fn scale_covariant_before_clamp(pts in arb_points(), c in 0.1f64..10.0) {
            let p: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
            let q: Vec<Point> = p.iter().map(|pt| Point::new(pt.x * c, pt.y * c)).collect();
            let a = raw_knn_sigmas(&p, 3, 0.3);
            let b = raw_knn_sigmas(&q, 3, 0.3);
            prop_assert_eq!(a.len(), p.len());
            for (sa, sb) in a.iter().zip(&b) {
                match (sa, sb) {
                    (Some(sa), Some(sb)) => prop_assert!((sb - c * sa).abs() <= 1e-9 * (1.0 + sb.abs())),
                    (None, None) => {}
                    _ => prop_assert!(false),
                }
            }
        }
    }
}
