//! Row-major 64-bit working grid shared by the density, mask and loss code.
//!
//! Row 0 is the image top; pixel `(row, col)` samples the continuous
//! location `x = col, y = row`. Files carry 32-bit floats (see
//! [`crate::raster::FloatMap`]); conversion happens only at the I/O boundary.

use thiserror::Error;

use crate::raster::FloatMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("shape mismatch: expected {expected:?}, found {found:?}")]
pub struct ShapeMismatch {
    pub expected: (usize, usize),
    pub found: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ShapeMismatch> {
        if data.len() != width * height {
            return Err(ShapeMismatch {
                expected: (width, height),
                found: (data.len(), 1),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn check_same_shape(&self, other: &Grid) -> Result<(), ShapeMismatch> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(ShapeMismatch {
                expected: self.shape(),
                found: other.shape(),
            })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rounds every value to single precision.
    pub fn to_float_map(&self) -> FloatMap {
        FloatMap::from_raw(
            self.width,
            self.height,
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn from_float_map(map: &FloatMap) -> Self {
        Self {
            width: map.width(),
            height: map.height(),
            data: map.values().iter().map(|&v| v as f64).collect(),
        }
    }
}
