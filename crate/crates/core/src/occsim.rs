//! Copy-paste occlusion augmentation driven by point annotations.
//!
//! An object `occ` is chosen, one of its nearest neighbors `copy` is copied
//! and pasted at a polar offset from `occ` so that it partially covers it.
//! The pasted square is alpha-blended through a Gaussian-smoothed disc mask
//! and the density map gains one unit-mass kernel at the paste position.
//! The number of pastes adapts to how occluded the image already is.

use std::f64::consts::TAU;
use std::ops::Deref;

use thiserror::Error;

use crate::annot::{ObjectDisc, Point, PointSet};
use crate::density::{render_density, DensityMap};
use crate::focus::{occlusion_level, occlusion_map};
use crate::grid::Grid;
use crate::raster::GrayImage;
use crate::rng::SplitMix64;

pub const DEFAULT_BETA: f64 = 0.3;
/// Candidate pool for the copied object: this many nearest neighbors of `occ`.
pub const COPY_NEIGHBORS: usize = 5;
/// Extra attempts for a plan whose paste lands outside the image.
pub const MAX_RESAMPLES: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum OcclusionError {
    #[error("paste position ({x}, {y}) is outside the image")]
    PasteOutOfBounds { x: f64, y: f64 },
    #[error("disc index {0} out of range")]
    BadIndex(usize),
    #[error("occluded and copied object must differ")]
    SameObject,
    #[error("image is {image:?} but density map is {density:?}")]
    ShapeMismatch {
        image: (usize, usize),
        density: (usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PastePlan {
    pub occ_index: usize,
    pub copy_index: usize,
    pub paste_x: f64,
    pub paste_y: f64,
    pub eps_r: f64,
    pub eps_theta: f64,
}

impl PastePlan {
    pub fn new(
        discs: &[ObjectDisc],
        occ_index: usize,
        copy_index: usize,
        eps_r: f64,
        eps_theta: f64,
    ) -> Result<Self, OcclusionError> {
        let occ = discs.get(occ_index).ok_or(OcclusionError::BadIndex(occ_index))?;
        let copy = discs.get(copy_index).ok_or(OcclusionError::BadIndex(copy_index))?;
        if occ_index == copy_index {
            return Err(OcclusionError::SameObject);
        }
        let (paste_x, paste_y) = paste_position(occ, copy, eps_r, eps_theta);
        Ok(Self {
            occ_index,
            copy_index,
            paste_x,
            paste_y,
            eps_r,
            eps_theta,
        })
    }
}

/// Smoothed paste mask, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendMask(Grid);

impl BlendMask {
    pub fn from_grid(grid: Grid) -> Self {
        Self(grid.map(|v| v.clamp(0.0, 1.0)))
    }
}

impl Deref for BlendMask {
    type Target = Grid;
    fn deref(&self) -> &Grid {
        &self.0
    }
}

/// `r = r_copy + r_occ * eps_r`, `theta = 2 pi eps_theta`; each offset term
/// is floored before adding the occluded center.
pub fn paste_position(occ: &ObjectDisc, copy: &ObjectDisc, eps_r: f64, eps_theta: f64) -> (f64, f64) {
    let r = copy.radius + occ.radius * eps_r;
    let theta = TAU * eps_theta;
    (
        (r * theta.cos()).floor() + occ.cx,
        (r * theta.sin()).floor() + occ.cy,
    )
}

fn gaussian_offsets(sigma: f64) -> (i64, Vec<f64>) {
    let reach = (crate::density::KERNEL_CUTOFF * sigma).floor() as i64;
    let side = (2 * reach + 1) as usize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut k = Vec::with_capacity(side * side);
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            k.push((-((dx * dx + dy * dy) as f64) * inv).exp());
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= total);
    (reach, k)
}

/// Binary disc of radius `paste.radius` around the paste center, convolved
/// with a normalized Gaussian of std `blur_sigma` truncated at `4 blur_sigma`.
/// Pixels outside the image count as zero.
pub fn blend_mask(paste: &ObjectDisc, width: usize, height: usize, blur_sigma: f64) -> BlendMask {
    let r2 = paste.radius * paste.radius;
    let inside = |r: i64, c: i64| {
        let (dx, dy) = (c as f64 - paste.cx, r as f64 - paste.cy);
        dx * dx + dy * dy <= r2
    };
    let (reach, kernel) = gaussian_offsets(blur_sigma);
    let side = 2 * reach + 1;
    let mut out = Grid::zeros(width, height);
    // Only pixels near the disc can receive weight.
    let extent = paste.radius + reach as f64 + 1.0;
    let rows = ((paste.cy - extent).floor().max(0.0) as i64)..=((paste.cy + extent).ceil() as i64).min(height as i64 - 1);
    let cols = ((paste.cx - extent).floor().max(0.0) as i64)..=((paste.cx + extent).ceil() as i64).min(width as i64 - 1);
    for r in rows {
        for c in cols.clone() {
            let mut acc = 0.0;
            for dy in -reach..=reach {
                let sr = r - dy;
                if sr < 0 || sr >= height as i64 {
                    continue;
                }
                for dx in -reach..=reach {
                    let sc = c - dx;
                    if sc < 0 || sc >= width as i64 || !inside(sr, sc) {
                        continue;
                    }
                    acc += kernel[((dy + reach) * side + dx + reach) as usize];
                }
            }
            out.set(r as usize, c as usize, acc);
        }
    }
    BlendMask::from_grid(out)
}

/// `round((1 - alpha) * base + alpha * pasted)` per pixel.
pub fn blend_images(base: &GrayImage, pasted: &GrayImage, alpha: &Grid) -> GrayImage {
    let mut out = base.clone();
    for (i, o) in out.pixels_mut().iter_mut().enumerate() {
        let a = alpha.data()[i];
        if a > 0.0 {
            let v = (1.0 - a) * base.pixels()[i] as f64 + a * pasted.pixels()[i] as f64;
            *o = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Copies the square of half-side `ceil(radius)` around `copy` so that its
/// center lands on `(to_x, to_y)`; both ends are clipped to the image.
fn paste_patch(img: &GrayImage, copy: &ObjectDisc, to_x: f64, to_y: f64) -> GrayImage {
    let mut out = img.clone();
    let half = copy.radius.ceil() as i64;
    let (cr, cc) = (copy.cy.round() as i64, copy.cx.round() as i64);
    let shift_r = (to_y - copy.cy).round() as i64;
    let shift_c = (to_x - copy.cx).round() as i64;
    let (w, h) = (img.width() as i64, img.height() as i64);
    for sr in (cr - half)..=(cr + half) {
        for sc in (cc - half)..=(cc + half) {
            let (dr, dc) = (sr + shift_r, sc + shift_c);
            let src_ok = (0..h).contains(&sr) && (0..w).contains(&sc);
            let dst_ok = (0..h).contains(&dr) && (0..w).contains(&dc);
            if src_ok && dst_ok {
                out.set(dr as usize, dc as usize, img.get(sr as usize, sc as usize));
            }
        }
    }
    out
}

/// Applies one paste. The returned disc list ends with the pasted object,
/// which keeps the copied object's sigma and radius.
pub fn apply_occlusion(
    img: &GrayImage,
    density: &DensityMap,
    discs: &[ObjectDisc],
    plan: &PastePlan,
    blur_sigma: f64,
) -> Result<(GrayImage, DensityMap, Vec<ObjectDisc>), OcclusionError> {
    let (w, h) = (img.width(), img.height());
    if density.shape() != (w, h) {
        return Err(OcclusionError::ShapeMismatch {
            image: (w, h),
            density: density.shape(),
        });
    }
    if plan.occ_index == plan.copy_index {
        return Err(OcclusionError::SameObject);
    }
    discs.get(plan.occ_index).ok_or(OcclusionError::BadIndex(plan.occ_index))?;
    let copy = *discs
        .get(plan.copy_index)
        .ok_or(OcclusionError::BadIndex(plan.copy_index))?;
    let (px, py) = (plan.paste_x, plan.paste_y);
    if !((0.0..w as f64).contains(&px) && (0.0..h as f64).contains(&py)) {
        return Err(OcclusionError::PasteOutOfBounds { x: px, y: py });
    }
    let pasted_disc = ObjectDisc {
        cx: px,
        cy: py,
        ..copy
    };
    let pasted = paste_patch(img, &copy, px, py);
    let alpha = blend_mask(&pasted_disc, w, h, blur_sigma);
    let out_img = blend_images(img, &pasted, &alpha);
    let mut out_density = density.clone();
    let kernel = render_density(&[pasted_disc], w, h).expect("paste center checked in bounds");
    out_density.add_assign(&kernel);
    let mut out_discs = discs.to_vec();
    out_discs.push(pasted_disc);
    Ok((out_img, out_density, out_discs))
}

/// Fraction of objects to occlude: `min(beta / max(level, 1), 1)`.
pub fn adaptive_budget(level: f64, beta: f64) -> f64 {
    (beta / level.max(1.0)).min(1.0)
}

/// Result of [`augment_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: GrayImage,
    pub points: PointSet,
    pub discs: Vec<ObjectDisc>,
    pub density: DensityMap,
    /// Paste operations the budget asked for.
    pub attempts: usize,
    pub pastes: usize,
}

/// Indices of the `k` nearest other discs, nearest first (ties by index).
fn nearest_neighbors(discs: &[ObjectDisc], i: usize, k: usize) -> Vec<usize> {
    let p = discs[i].center();
    let mut others: Vec<(f64, usize)> = discs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, d)| (p.dist(d.center()), j))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.truncate(k);
    others.into_iter().map(|(_, j)| j).collect()
}

/// Adaptive occlusion augmentation of one sample, deterministic in `seed`.
///
/// `discs` must correspond one-to-one with `points`. `blur_sigma = None`
/// uses a quarter of the copied object's radius for each paste.
pub fn augment_sample(
    img: &GrayImage,
    points: &PointSet,
    discs: &[ObjectDisc],
    seed: u64,
    beta: f64,
    blur_sigma: Option<f64>,
) -> Augmented {
    let (w, h) = (img.width(), img.height());
    let density = render_density(discs, w, h).expect("annotation points lie inside the image");
    let mut out = Augmented {
        image: img.clone(),
        points: points.clone(),
        discs: discs.to_vec(),
        density,
        attempts: 0,
        pastes: 0,
    };
    let n = discs.len();
    if n < 2 {
        return out;
    }
    let level = occlusion_level(&occlusion_map(discs, w, h));
    let budget = (adaptive_budget(level, beta) * n as f64).round() as usize;
    out.attempts = budget;
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| nearest_neighbors(discs, i, COPY_NEIGHBORS)).collect();
    let mut rng = SplitMix64::new(seed);
    for _ in 0..budget {
        let mut plan = None;
        for _ in 0..=MAX_RESAMPLES {
            let occ = rng.below(n);
            let copy = neighbors[occ][rng.below(neighbors[occ].len())];
            let eps_r = rng.uniform();
            let eps_theta = rng.uniform();
            let candidate = PastePlan::new(discs, occ, copy, eps_r, eps_theta).expect("valid indices");
            if points.contains(candidate.paste_x, candidate.paste_y) {
                plan = Some(candidate);
                break;
            }
        }
        let Some(plan) = plan else { continue };
        let blur = blur_sigma.unwrap_or(discs[plan.copy_index].radius / 4.0);
        let (image, density, new_discs) =
            apply_occlusion(&out.image, &out.density, &out.discs, &plan, blur).expect("plan checked in bounds");
        out.image = image;
        out.density = density;
        out.discs = new_discs;
        out.points.push_unchecked(Point::new(plan.paste_x, plan.paste_y));
        out.pastes += 1;
    }
    out
}
