//! Local polynomial partition dictionaries.
//!
//! A dictionary splits the domain box `[-B, B]^d` into `cells_per_axis^d`
//! axis-aligned cells and attaches, per cell, the tensor product of shifted
//! Legendre polynomials up to a fixed degree. Legendre polynomials have
//! sup-norm one on `[-1, 1]`, so every basis function has sup-norm one on its
//! supporting cell. Degree zero recovers the indicator partition.
//!
//! Cell assignment is total and deterministic: a point exactly on an interior
//! cell boundary belongs to the cell on its right, and the rightmost cell is
//! closed.

use nalgebra::{DMatrix, DMatrixView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// Largest basis dimension `build_dictionary` accepts by default.
pub const MAX_BASIS_DIM: usize = 1_000_000;

/// Dictionary family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DictionaryKind {
    /// Indicator of each partition cell (degree 0).
    #[serde(rename = "indicator-partition")]
    IndicatorPartition,
    /// Per-cell tensor-product Legendre polynomials up to `degree`.
    #[serde(rename = "piecewise-polynomial-partition")]
    PiecewisePolynomialPartition,
}

/// A fully specified basis dictionary. Construct through [`build_dictionary`]
/// so the invariants (`k` formula, degree/kind consistency, size guard) hold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dictionary<T: Scalar = f64> {
    pub kind: DictionaryKind,
    /// Covariate dimension `d`.
    pub dim_d: usize,
    pub cells_per_axis: usize,
    /// Polynomial degree per axis within each cell (0 for indicator).
    pub degree: usize,
    /// Half-width `B` of the domain box `[-B, B]^d`.
    pub domain_half_width: T,
    /// Total number of basis functions: `cells_per_axis^d * (degree+1)^d`.
    pub k: usize,
}

/// Row-per-sample evaluation of a dictionary: row `i` is `z_k(X_i)^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix<T: Scalar = f64> {
    pub values: DMatrix<T>,
}

impl<T: Scalar> BasisMatrix<T> {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }

    pub fn view(&self) -> DMatrixView<'_, T> {
        self.values.as_view()
    }
}

/// Builds a partition dictionary.
///
/// Errors with [`Error::DimensionTooLarge`] when the product formula for `k`
/// exceeds [`MAX_BASIS_DIM`], and with [`Error::ArgumentError`] on degenerate
/// parameters (`d = 0`, `cells = 0`, `B <= 0`, or a nonzero degree paired with
/// the indicator kind).
pub fn build_dictionary<T: Scalar>(
    kind: DictionaryKind,
    dim_d: usize,
    cells_per_axis: usize,
    degree: usize,
    domain_half_width: T,
) -> Result<Dictionary<T>> {
    if dim_d == 0 {
        return Err(Error::ArgumentError("covariate dimension d must be >= 1".into()));
    }
    if cells_per_axis == 0 {
        return Err(Error::ArgumentError("cells_per_axis must be >= 1".into()));
    }
    if domain_half_width <= T::zero() {
        return Err(Error::ArgumentError("domain half-width B must be positive".into()));
    }
    if kind == DictionaryKind::IndicatorPartition && degree != 0 {
        return Err(Error::ArgumentError(
            "indicator-partition dictionaries must have degree 0".into(),
        ));
    }
    let per_axis = cells_per_axis
        .checked_mul(degree + 1)
        .ok_or(Error::DimensionTooLarge { k: usize::MAX, max: MAX_BASIS_DIM })?;
    let mut k: usize = 1;
    for _ in 0..dim_d {
        k = k
            .checked_mul(per_axis)
            .ok_or(Error::DimensionTooLarge { k: usize::MAX, max: MAX_BASIS_DIM })?;
        if k > MAX_BASIS_DIM {
            return Err(Error::DimensionTooLarge { k, max: MAX_BASIS_DIM });
        }
    }
    Ok(Dictionary { kind, dim_d, cells_per_axis, degree, domain_half_width, k })
}

impl<T: Scalar> Dictionary<T> {
    /// Number of basis functions that are nonzero at any interior point:
    /// `(degree + 1)^d`.
    pub fn nonzeros_per_point(&self) -> usize {
        (self.degree + 1).pow(self.dim_d as u32)
    }

    /// Cell index along one axis for coordinate `x`, with right-inclusive
    /// interior boundaries and a closed rightmost cell.
    fn axis_cell(&self, x: T) -> usize {
        let b = self.domain_half_width;
        let cells = T::from_usize(self.cells_per_axis).unwrap();
        let t = (x + b) / (b + b) * cells;
        let idx = t.floor().to_usize().unwrap_or(0);
        idx.min(self.cells_per_axis - 1)
    }

    /// Evaluates the dictionary on a single point, writing into `row`.
    /// The point must already be inside the domain box.
    fn evaluate_point(&self, x: &[T], row: &mut [T]) {
        let q = self.degree + 1;
        // Per-axis cell index and Legendre values on the cell-local coordinate.
        let mut cell = vec![0usize; self.dim_d];
        let mut leg = vec![T::zero(); self.dim_d * q];
        for (axis, &xi) in x.iter().enumerate() {
            let c = self.axis_cell(xi);
            cell[axis] = c;
            let b = self.domain_half_width;
            let cells = T::from_usize(self.cells_per_axis).unwrap();
            let width = (b + b) / cells;
            let left = -b + width * T::from_usize(c).unwrap();
            // Map the cell to [-1, 1].
            let t = ((xi - left) / width) * T::c(2.0) - T::one();
            let dst = &mut leg[axis * q..(axis + 1) * q];
            legendre_values(t, dst);
        }
        for v in row.iter_mut() {
            *v = T::zero();
        }
        // Flat cell index (row-major over axes), then the tensor polynomial block.
        let mut cell_flat = 0usize;
        for axis in 0..self.dim_d {
            cell_flat = cell_flat * self.cells_per_axis + cell[axis];
        }
        let block = q.pow(self.dim_d as u32);
        for p in 0..block {
            let mut prod = T::one();
            let mut rem = p;
            for axis in (0..self.dim_d).rev() {
                let qi = rem % q;
                rem /= q;
                prod *= leg[axis * q + qi];
            }
            row[cell_flat * block + p] = prod;
        }
    }
}

/// Legendre polynomial values `P_0(t) .. P_degree(t)` via the three-term
/// recurrence `(q+1) P_{q+1} = (2q+1) t P_q - q P_{q-1}`.
fn legendre_values<T: Scalar>(t: T, out: &mut [T]) {
    out[0] = T::one();
    if out.len() > 1 {
        out[1] = t;
    }
    for q in 1..out.len().saturating_sub(1) {
        let qf = T::from_usize(q).unwrap();
        let a = (qf + qf + T::one()) * t * out[q];
        let b = qf * out[q - 1];
        out[q + 1] = (a - b) / (qf + T::one());
    }
}

/// Evaluates `dict` on every row of `x` (an `n x d` matrix).
///
/// Errors with [`Error::DomainViolation`] naming the offending row when any
/// coordinate falls outside the closed domain box.
pub fn evaluate_basis<T: Scalar>(dict: &Dictionary<T>, x: &DMatrix<T>) -> Result<BasisMatrix<T>> {
    if x.ncols() != dict.dim_d {
        return Err(Error::ShapeError(format!(
            "covariate matrix has {} columns, dictionary expects d = {}",
            x.ncols(),
            dict.dim_d
        )));
    }
    let n = x.nrows();
    let b = dict.domain_half_width;
    for i in 0..n {
        for j in 0..dict.dim_d {
            let v = x[(i, j)];
            if !(v >= -b && v <= b) {
                return Err(Error::DomainViolation {
                    row: i,
                    coord: j,
                    value: v.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
    }
    let mut values = DMatrix::<T>::zeros(n, dict.k);
    let mut point = vec![T::zero(); dict.dim_d];
    let mut row = vec![T::zero(); dict.k];
    for i in 0..n {
        for j in 0..dict.dim_d {
            point[j] = x[(i, j)];
        }
        dict.evaluate_point(&point, &mut row);
        for (j, &v) in row.iter().enumerate() {
            values[(i, j)] = v;
        }
    }
    Ok(BasisMatrix { values })
}

/// Serializable mirror of [`Dictionary`] used in JSON configs; `k` is derived
/// on construction rather than trusted from the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DictionarySpec {
    pub kind: DictionaryKind,
    pub d: usize,
    pub cells_per_axis: usize,
    pub degree: usize,
    #[serde(rename = "B")]
    pub b: f64,
}

impl DictionarySpec {
    pub fn build(&self) -> Result<Dictionary<f64>> {
        build_dictionary(self.kind, self.d, self.cells_per_axis, self.degree, self.b)
    }
}

impl From<&Dictionary<f64>> for DictionarySpec {
    fn from(d: &Dictionary<f64>) -> Self {
        DictionarySpec {
            kind: d.kind,
            d: d.dim_d,
            cells_per_axis: d.cells_per_axis,
            degree: d.degree,
            b: d.domain_half_width,
        }
    }
}
