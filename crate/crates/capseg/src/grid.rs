//! Dense 2D buffers shared by the whole pipeline.
//!
//! Real-valued planes (images, probabilities, logits, loss maps) are plain
//! `ndarray` arrays; binary masks get a newtype so that "mask" arguments are
//! binary by construction and non-binary data is rejected at the boundary.

use ndarray::Array2;
use thiserror::Error;

/// Real-valued 2D plane in row-major (row, col) order.
pub type Grid = Array2<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("mask value at ({row}, {col}) is {value}, expected exactly 0.0 or 1.0")]
    NonBinaryValue { row: usize, col: usize, value: f64 },
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
}

/// Binary segmentation mask over a (rows, cols) pixel grid.
///
/// `true` is foreground. Constructors guarantee binarity, so downstream code
/// never re-validates mask contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask(Array2<bool>);

impl Mask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mask(Array2::from_elem((rows, cols), false))
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl FnMut((usize, usize)) -> bool) -> Self {
        Mask(Array2::from_shape_fn((rows, cols), f))
    }

    pub fn from_bools(data: Array2<bool>) -> Self {
        Mask(data)
    }

    /// Interprets a real grid as a mask, requiring every value to be exactly
    /// 0.0 or 1.0. This is the door through which untyped data must pass.
    pub fn from_grid(grid: &Grid) -> Result<Self, MaskError> {
        for ((row, col), &value) in grid.indexed_iter() {
            if value != 0.0 && value != 1.0 {
                return Err(MaskError::NonBinaryValue { row, col, value });
            }
        }
        Ok(Mask(grid.mapv(|v| v == 1.0)))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.0[(row, col)]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.0[(row, col)] = value;
    }

    pub fn data(&self) -> &Array2<bool> {
        &self.0
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    /// Foreground fraction; 0.0 for an all-background mask.
    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.count() as f64 / self.0.len() as f64
    }

    /// Pixelwise exclusive-or, the raw disagreement map between two masks.
    pub fn xor(&self, other: &Mask) -> Result<Mask, MaskError> {
        if self.dims() != other.dims() {
            return Err(MaskError::ShapeMismatch(self.dims(), other.dims()));
        }
        let mut out = self.0.clone();
        out.zip_mut_with(&other.0, |a, &b| *a ^= b);
        Ok(Mask(out))
    }

    /// Pixelwise complement.
    pub fn complement(&self) -> Mask {
        Mask(self.0.mapv(|v| !v))
    }

    /// 0.0/1.0 representation for arithmetic against real grids.
    pub fn to_grid(&self) -> Grid {
        self.0.mapv(|v| if v { 1.0 } else { 0.0 })
    }
}
