//! Dense voxel grids of real and complex scalars.
//!
//! Layout is row-major with the last axis fastest. Every field carries its
//! [`GridSpec`]; operations that combine fields check that the grids agree.

use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_EXTENT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Periodic,
}

/// Shape, spacing and boundary of a 2D or 3D voxel grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    boundary: Boundary,
}

impl GridSpec {
    /// Unit-spacing periodic grid.
    pub fn new(dims: &[usize]) -> Result<Self> {
        Self::with_spacing(dims, &vec![1.0; dims.len()])
    }

    pub fn with_spacing(dims: &[usize], spacing: &[f64]) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(Error::Argument(format!(
                "grid rank must be 2 or 3, got {}",
                dims.len()
            )));
        }
        if spacing.len() != dims.len() {
            return Err(Error::Argument(format!(
                "spacing has {} entries for a rank-{} grid",
                spacing.len(),
                dims.len()
            )));
        }
        if let Some(d) = dims.iter().find(|&&d| d < MIN_EXTENT) {
            return Err(Error::Argument(format!(
                "grid extent {d} is below the minimum of {MIN_EXTENT}"
            )));
        }
        if let Some(h) = spacing.iter().find(|&&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::Argument(format!("grid spacing {h} must be positive")));
        }
        Ok(Self {
            dims: dims.to_vec(),
            spacing: spacing.to_vec(),
            boundary: Boundary::Periodic,
        })
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.rank()];
        for a in (0..self.rank() - 1).rev() {
            strides[a] = strides[a + 1] * self.dims[a + 1];
        }
        strides
    }

    /// Splits the flat index space around `axis` into `(outer, extent, inner)`.
    pub fn axis_blocks(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.dims[..axis].iter().product();
        let inner = self.dims[axis + 1..].iter().product();
        (outer, self.dims[axis], inner)
    }

    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.rank()];
        for a in (0..self.rank()).rev() {
            idx[a] = flat % self.dims[a];
            flat /= self.dims[a];
        }
        idx
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::Argument(format!(
                "axis {axis} out of range for rank-{} grid",
                self.rank()
            )));
        }
        Ok(())
    }

    pub fn check_same(&self, other: &GridSpec, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::Argument(format!(
                "{what}: grid mismatch {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Scalar types a [`Field`] can hold.
pub trait Scalar:
    Copy + Default + PartialEq + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self>
{
    fn is_finite(&self) -> bool;
    fn norm_sqr(&self) -> f64;
}

impl Scalar for f64 {
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
    fn norm_sqr(&self) -> f64 {
        self * self
    }
}

impl Scalar for Complex64 {
    fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
    fn norm_sqr(&self) -> f64 {
        Complex64::norm_sqr(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field<T> {
    grid: GridSpec,
    data: Vec<T>,
}

pub type RealField = Field<f64>;
pub type ComplexField = Field<Complex64>;

impl<T: Scalar> Field<T> {
    /// Builds a field, validating length and finiteness.
    pub fn new(grid: GridSpec, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Argument(format!(
                "data length {} does not match grid size {}",
                data.len(),
                grid.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite value at voxel {i}")));
        }
        Ok(Self { grid, data })
    }

    /// Construction for values already known to satisfy the invariants.
    pub(crate) fn from_parts(grid: GridSpec, data: Vec<T>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        Self { grid, data }
    }

    pub fn zeros(grid: &GridSpec) -> Self {
        Self::filled(grid, T::default())
    }

    pub fn filled(grid: &GridSpec, value: T) -> Self {
        Self {
            grid: grid.clone(),
            data: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: &GridSpec, mut f: impl FnMut(&[usize]) -> T) -> Self {
        let data = (0..grid.len()).map(|i| f(&grid.unravel(i))).collect();
        Self {
            grid: grid.clone(),
            data,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.grid.ravel(idx)]
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Field<U> {
        Field {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(Scalar::is_finite)
    }

    /// Cyclic shift: `out[.., i, ..] = in[.., (i - shift) mod n, ..]` along `axis`.
    pub fn roll(&self, axis: usize, shift: isize) -> Result<Self> {
        self.grid.check_axis(axis)?;
        Ok(roll_unchecked(self, axis, shift))
    }

    /// `sqrt(sum |f|^2 * cell_volume)`.
    pub fn l2_norm(&self) -> f64 {
        let sum: f64 = self.data.iter().map(Scalar::norm_sqr).sum();
        (sum * self.grid.cell_volume()).sqrt()
    }
}

pub(crate) fn roll_unchecked<T: Scalar>(f: &Field<T>, axis: usize, shift: isize) -> Field<T> {
    let (outer, n, inner) = f.grid.axis_blocks(axis);
    let s = shift.rem_euclid(n as isize) as usize;
    if s == 0 {
        return f.clone();
    }
    let mut out = vec![T::default(); f.data.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..n {
            let src = base + ((i + n - s) % n) * inner;
            let dst = base + i * inner;
            out[dst..dst + inner].copy_from_slice(&f.data[src..src + inner]);
        }
    }
    Field::from_parts(f.grid.clone(), out)
}

impl RealField {
    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn to_complex(&self) -> ComplexField {
        self.map(|v| Complex64::new(v, 0.0))
    }
}

impl ComplexField {
    pub fn abs(&self) -> RealField {
        self.map(|z| z.norm())
    }

    pub fn abs_sqr(&self) -> RealField {
        self.map(|z| z.norm_sqr())
    }

    pub fn scale_complex(&self, s: Complex64) -> Self {
        self.map(|z| z * s)
    }
}

/// Unnormalized forward multi-dimensional DFT.
pub fn dft(f: &ComplexField) -> ComplexField {
    transform(f, false)
}

/// Inverse of [`dft`], including the `1/N` normalization.
pub fn idft(f: &ComplexField) -> ComplexField {
    let mut out = transform(f, true);
    let scale = 1.0 / f.len() as f64;
    out.data.iter_mut().for_each(|z| *z *= scale);
    out
}

fn transform(f: &ComplexField, inverse: bool) -> ComplexField {
    let mut data = f.data.clone();
    let mut planner = FftPlanner::<f64>::new();
    for axis in 0..f.grid.rank() {
        let (outer, n, inner) = f.grid.axis_blocks(axis);
        let fft = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        let mut line = vec![Complex64::default(); n];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * n * inner + j;
                for (k, z) in line.iter_mut().enumerate() {
                    *z = data[base + k * inner];
                }
                fft.process(&mut line);
                for (k, z) in line.iter().enumerate() {
                    data[base + k * inner] = *z;
                }
            }
        }
    }
    Field::from_parts(f.grid.clone(), data)
}
