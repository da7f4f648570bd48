//! Gaussian density maps whose pixel sum is the object count.
//!
//! Each kernel is evaluated at integer pixel centers inside a square window
//! of half-width `4 sigma` clipped to the image, then divided by its own
//! discrete sum. Every object therefore contributes exactly one unit of mass,
//! including objects whose window is cut by the image border.

use std::ops::Deref;

use thiserror::Error;

use crate::annot::ObjectDisc;
use crate::grid::{Grid, ShapeMismatch};

/// Kernel half-width in multiples of sigma.
pub const KERNEL_CUTOFF: f64 = 4.0;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("disc {index} center ({cx}, {cy}) is outside the {width}x{height} grid")]
    CenterOutOfBounds {
        index: usize,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    },
    #[error("grid must be at least 1x1")]
    EmptyGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap(Grid);

impl DensityMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self(Grid::zeros(width, height))
    }

    pub fn from_grid(grid: Grid) -> Self {
        Self(grid)
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn mass(&self) -> f64 {
        count(self.grid())
    }

    pub(crate) fn add_assign(&mut self, other: &DensityMap) {
        for (a, b) in self.0.data_mut().iter_mut().zip(other.0.data()) {
            *a += b;
        }
    }
}

impl Deref for DensityMap {
    type Target = Grid;
    fn deref(&self) -> &Grid {
        &self.0
    }
}

/// Normalized weights of one kernel over its clipped window.
struct Kernel {
    r0: usize,
    c0: usize,
    cols: usize,
    weights: Vec<f64>,
}

impl Kernel {
    fn new(disc: &ObjectDisc, width: usize, height: usize) -> Self {
        let reach = KERNEL_CUTOFF * disc.sigma;
        // The window always contains the nearest pixel, even when the reach
        // is below half a pixel.
        let span = |center: f64, len: usize| {
            let near = (center.round() as usize).min(len - 1);
            let lo = ((center - reach).ceil().max(0.0) as usize).min(near);
            let hi = (((center + reach).floor() as i64).min(len as i64 - 1).max(0) as usize).max(near);
            (lo, hi)
        };
        let (r0, r1) = span(disc.cy, height);
        let (c0, c1) = span(disc.cx, width);
        let cols = c1 - c0 + 1;
        let inv = 1.0 / (2.0 * disc.sigma * disc.sigma);
        let mut weights = Vec::with_capacity((r1 - r0 + 1) * cols);
        for r in r0..=r1 {
            let dy = r as f64 - disc.cy;
            for c in c0..=c1 {
                let dx = c as f64 - disc.cx;
                weights.push((-(dx * dx + dy * dy) * inv).exp());
            }
        }
        let total: f64 = weights.iter().sum();
        if total > 0.0 && total.is_finite() {
            for w in &mut weights {
                *w /= total;
            }
        } else {
            // Sigma so small every weight underflowed: put the unit mass on
            // the nearest pixel.
            weights.iter_mut().for_each(|w| *w = 0.0);
            let r = (disc.cy.round() as usize).clamp(r0, r1);
            let c = (disc.cx.round() as usize).clamp(c0, c1);
            weights[(r - r0) * cols + (c - c0)] = 1.0;
        }
        Self {
            r0,
            c0,
            cols,
            weights,
        }
    }

    fn rows(&self) -> std::ops::Range<usize> {
        self.r0..self.r0 + self.weights.len() / self.cols
    }

    fn add_row(&self, r: usize, out_row: &mut [f64]) {
        let k = (r - self.r0) * self.cols;
        for (o, w) in out_row[self.c0..self.c0 + self.cols]
            .iter_mut()
            .zip(&self.weights[k..k + self.cols])
        {
            *o += w;
        }
    }
}

fn check_centers(discs: &[ObjectDisc], width: usize, height: usize) -> Result<(), DensityError> {
    if width == 0 || height == 0 {
        return Err(DensityError::EmptyGrid);
    }
    for (index, d) in discs.iter().enumerate() {
        let inside = (0.0..width as f64).contains(&d.cx) && (0.0..height as f64).contains(&d.cy);
        if !inside {
            return Err(DensityError::CenterOutOfBounds {
                index,
                cx: d.cx,
                cy: d.cy,
                width,
                height,
            });
        }
    }
    Ok(())
}

/// Renders one unit-mass kernel per disc.
pub fn render_density(
    discs: &[ObjectDisc],
    width: usize,
    height: usize,
) -> Result<DensityMap, DensityError> {
    render_density_threaded(discs, width, height, 1)
}

/// Same result as [`render_density`], bit for bit, computed over `threads`
/// horizontal bands. Each pixel accumulates kernels in disc order regardless
/// of the partition.
pub fn render_density_threaded(
    discs: &[ObjectDisc],
    width: usize,
    height: usize,
    threads: usize,
) -> Result<DensityMap, DensityError> {
    check_centers(discs, width, height)?;
    let kernels: Vec<Kernel> = discs.iter().map(|d| Kernel::new(d, width, height)).collect();
    let mut grid = Grid::zeros(width, height);
    let threads = threads.clamp(1, height);
    let band = height.div_ceil(threads);
    let fill_band = |first_row: usize, rows: &mut [f64]| {
        let n_rows = rows.len() / width;
        for k in &kernels {
            let kr = k.rows();
            let lo = kr.start.max(first_row);
            let hi = kr.end.min(first_row + n_rows);
            for r in lo..hi {
                let local = r - first_row;
                k.add_row(r, &mut rows[local * width..(local + 1) * width]);
            }
        }
    };
    if threads == 1 {
        fill_band(0, grid.data_mut());
    } else {
        std::thread::scope(|s| {
            for (i, chunk) in grid.data_mut().chunks_mut(band * width).enumerate() {
                let fill_band = &fill_band;
                s.spawn(move || fill_band(i * band, chunk));
            }
        });
    }
    Ok(DensityMap(grid))
}

/// Total mass, accumulated in 64 bits.
pub fn count(map: &Grid) -> f64 {
    map.sum()
}

/// Element-wise product, e.g. blacking out background pixels.
pub fn apply_mask(map: &Grid, mask: &Grid) -> Result<Grid, ShapeMismatch> {
    map.check_same_shape(mask)?;
    let data = map
        .data()
        .iter()
        .zip(mask.data())
        .map(|(a, m)| a * m)
        .collect();
    Ok(Grid::from_vec(map.width(), map.height(), data).expect("shape checked"))
}
