//! Weighted sample Gram matrices and the SVD-stabilized projection kernel.
//!
//! The estimators never need the inverse Gram `Omega_hat = Sigma_hat^{-1}`
//! itself, only kernel entries `z_k(X_i)^T Omega_hat z_k(X_j)`. Writing
//! `Z^R = diag(|S|^{1/2}) Z` and taking its thin SVD `Z^R = U D V^T`, every
//! kernel entry becomes `sign(S) * n * <w_i, w_j>` with `w_i` the rows of
//! `W = Z V D^{-1}`. The entries are therefore invariant under invertible
//! reparameterizations of the dictionary and insensitive to the eigenvalues
//! of the Gram matrix; forming `Omega_hat` explicitly is confined to a debug
//! path used by the deliberately unstable empirical-Gram comparator.

use nalgebra::{DMatrix, DVector};
use std::cell::OnceCell;

use crate::error::{Error, Result};
use crate::dictionary::BasisMatrix;
use crate::Scalar;

/// Default relative rank tolerance: the k-th singular value of the weighted
/// basis matrix must exceed `1e-10` times the largest one.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;

/// Classification of the Gram weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    /// All weights in {0, 1}.
    BinaryA,
    /// All weights identically 1.
    UnitS,
    /// General real weights of a single sign.
    GeneralS,
}

/// The weighted sample Gram matrix `Sigma_hat = n^{-1} Z^T diag(S) Z`.
#[derive(Debug, Clone)]
pub struct GramPair<T: Scalar = f64> {
    pub sigma_hat: DMatrix<T>,
    pub n: usize,
    pub weight_kind: WeightKind,
}

fn classify_weights<T: Scalar>(s: &DVector<T>) -> WeightKind {
    let mut unit = true;
    let mut binary = true;
    for &v in s.iter() {
        if v != T::one() {
            unit = false;
        }
        if v != T::one() && v != T::zero() {
            binary = false;
        }
    }
    if unit {
        WeightKind::UnitS
    } else if binary {
        WeightKind::BinaryA
    } else {
        WeightKind::GeneralS
    }
}

/// `Sigma_hat = n^{-1} sum_i S_i z(X_i) z(X_i)^T`, symmetric by construction.
pub fn weighted_gram<T: Scalar>(basis: &BasisMatrix<T>, s: &DVector<T>) -> Result<GramPair<T>> {
    let n = basis.n();
    if s.len() != n {
        return Err(Error::ShapeError(format!(
            "weight vector has length {} but the basis has {} rows",
            s.len(),
            n
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::ShapeError("weights must be finite".into()));
    }
    let k = basis.k();
    let mut sigma = DMatrix::<T>::zeros(k, k);
    for i in 0..n {
        let z = basis.values.row(i);
        let w = s[i];
        if w == T::zero() {
            continue;
        }
        // rank-one update S_i z z^T; fill both triangles to stay exactly symmetric
        for a in 0..k {
            let za = z[a] * w;
            if za == T::zero() {
                continue;
            }
            for b in a..k {
                let v = za * z[b];
                sigma[(a, b)] += v;
            }
        }
    }
    let nf = T::from_usize(n).unwrap();
    for a in 0..k {
        for b in a..k {
            let v = sigma[(a, b)] / nf;
            sigma[(a, b)] = v;
            sigma[(b, a)] = v;
        }
    }
    Ok(GramPair { sigma_hat: sigma, n, weight_kind: classify_weights(s) })
}

/// SVD factorization of the weighted basis matrix exposing projection-kernel
/// entries without forming the inverse Gram.
#[derive(Debug, Clone)]
pub struct StableKernel<T: Scalar = f64> {
    /// Orthonormal-column left factor of `diag(|S|^{1/2}) Z` (n x k).
    left_factor: DMatrix<T>,
    /// `Z V D^{-1}` (n x k): kernel entries are `sign * n * w_i . w_j`.
    whitened: DMatrix<T>,
    /// Unweighted basis matrix (kept for raw-Gram queries and debug paths).
    basis: DMatrix<T>,
    weights: DVector<T>,
    /// Overall sign of the weights (+1 unless all nonzero weights are negative).
    sign: T,
    singular_values: DVector<T>,
    rank_tolerance: T,
    n: usize,
    k: usize,
    kappa_cache: OnceCell<DMatrix<T>>,
}

impl<T: Scalar> StableKernel<T> {
    /// Factorizes `diag(|S|^{1/2}) Z` by SVD. Fails with
    /// [`Error::SingularGram`] when the numerical rank falls below `k` at the
    /// given relative tolerance; there is no pseudo-inverse fallback.
    pub fn new(basis: &BasisMatrix<T>, s: &DVector<T>, rank_tolerance: T) -> Result<Self> {
        let n = basis.n();
        let k = basis.k();
        if s.len() != n {
            return Err(Error::ShapeError(format!(
                "weight vector has length {} but the basis has {} rows",
                s.len(),
                n
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeError("weights must be finite".into()));
        }
        let mut pos = false;
        let mut neg = false;
        for &v in s.iter() {
            if v > T::zero() {
                pos = true;
            } else if v < T::zero() {
                neg = true;
            }
        }
        if pos && neg {
            return Err(Error::MixedSignWeights);
        }
        let sign = if neg { -T::one() } else { T::one() };

        let mut weighted = basis.values.clone();
        for i in 0..n {
            let r = s[i].abs().sqrt();
            if r != T::one() {
                for j in 0..k {
                    weighted[(i, j)] *= r;
                }
            }
        }
        #[cfg(debug_assertions)]
        if n <= 512 && classify_weights(s) == WeightKind::BinaryA {
            // Binary weights satisfy Z^T Z^A = Z^{A T} Z^A exactly (A^2 = A).
            let za = &weighted;
            let lhs = basis.values.transpose() * za;
            let rhs = za.transpose() * za;
            let scale = rhs.amax().max(T::one());
            debug_assert!((lhs - rhs).amax() <= T::c(1e-12) * scale);
        }
        let svd = weighted.clone().svd(true, true);
        let u = svd.u.expect("svd requested u");
        let vt = svd.v_t.expect("svd requested v_t");
        let d = svd.singular_values;
        let d_max = d.max();
        let floor = d_max * rank_tolerance;
        let rank = d.iter().filter(|v| **v > floor).count();
        let d_min = d.min();
        if rank < k || d_min <= T::zero() {
            return Err(Error::SingularGram {
                rank,
                k,
                smallest: d_min.to_f64().unwrap_or(0.0),
                tolerance: rank_tolerance.to_f64().unwrap_or(f64::NAN),
            });
        }
        // W = Z V D^{-1}; for rows with |S_i| = 1 this reproduces U's rows.
        let mut v_dinv = vt.transpose();
        for j in 0..k {
            let inv = T::one() / d[j];
            for a in 0..k {
                v_dinv[(a, j)] *= inv;
            }
        }
        let whitened = &basis.values * &v_dinv;
        Ok(StableKernel {
            left_factor: u,
            whitened,
            basis: basis.values.clone(),
            weights: s.clone(),
            sign,
            singular_values: d,
            rank_tolerance,
            n,
            k,
            kappa_cache: OnceCell::new(),
        })
    }

    /// Builds with the default rank tolerance.
    pub fn with_default_tolerance(basis: &BasisMatrix<T>, s: &DVector<T>) -> Result<Self> {
        Self::new(basis, s, T::c(DEFAULT_RANK_TOLERANCE))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn weights(&self) -> &DVector<T> {
        &self.weights
    }

    pub fn basis(&self) -> &DMatrix<T> {
        &self.basis
    }

    pub fn left_factor(&self) -> &DMatrix<T> {
        &self.left_factor
    }

    pub fn singular_values(&self) -> &DVector<T> {
        &self.singular_values
    }

    pub fn rank_tolerance(&self) -> T {
        self.rank_tolerance
    }

    /// Condition number of `Sigma_hat`, i.e. the squared singular-value ratio
    /// of the weighted basis matrix.
    pub fn sigma_condition_number(&self) -> T {
        let r = self.singular_values.max() / self.singular_values.min();
        r * r
    }

    /// Unweighted kernel entry `z(X_i)^T Omega_hat z(X_j)`.
    pub fn kernel_entry(&self, i: usize, j: usize) -> T {
        let mut acc = T::zero();
        for c in 0..self.k {
            acc += self.whitened[(i, c)] * self.whitened[(j, c)];
        }
        self.sign * T::from_usize(self.n).unwrap() * acc
    }

    /// Weighted kernel entry `z(X_i)^T Omega_hat z(X_j) S_j`.
    pub fn kernel_weighted(&self, i: usize, j: usize) -> T {
        self.kernel_entry(i, j) * self.weights[j]
    }

    /// Diagonal of the unweighted kernel matrix.
    pub fn kernel_diag(&self) -> DVector<T> {
        let nf = T::from_usize(self.n).unwrap();
        DVector::from_fn(self.n, |i, _| {
            let mut acc = T::zero();
            for c in 0..self.k {
                let w = self.whitened[(i, c)];
                acc += w * w;
            }
            self.sign * nf * acc
        })
    }

    /// Matrix-free product `v -> K v` with `K[i][j] = kernel_entry(i, j)`,
    /// costing `O(n k)`.
    pub fn kernel_matvec(&self, v: &DVector<T>) -> DVector<T> {
        let coeffs = self.whitened.transpose() * v;
        let mut out = &self.whitened * coeffs;
        let scale = self.sign * T::from_usize(self.n).unwrap();
        out *= scale;
        out
    }

    /// Full unweighted kernel matrix, cached after the first call.
    pub fn kernel_matrix(&self) -> &DMatrix<T> {
        self.kappa_cache.get_or_init(|| {
            let mut m = &self.whitened * self.whitened.transpose();
            let scale = self.sign * T::from_usize(self.n).unwrap();
            m *= scale;
            m
        })
    }

    /// The n x n weighted kernel matrix with entries
    /// `z(X_i)^T Omega_hat z(X_j) S_j` (equals `n U^A U^{A T}` for unit or
    /// binary weights).
    pub fn kernel_weighted_matrix(&self) -> DMatrix<T> {
        let kappa = self.kernel_matrix();
        DMatrix::from_fn(self.n, self.n, |i, j| kappa[(i, j)] * self.weights[j])
    }

    /// The factor `W = Z V D^{-1}` with `kappa = sign * n * W W^T`; used by
    /// the U-statistic engines to contract kernel chains in factor space.
    pub(crate) fn whitened_factor(&self) -> &DMatrix<T> {
        &self.whitened
    }

    /// Overall sign of the weights (`-1` when all nonzero weights are
    /// negative).
    pub(crate) fn weight_sign(&self) -> T {
        self.sign
    }

    /// Debug path: the explicit inverse Gram `Omega_hat`. Production code
    /// never calls this; comparisons against it are recorded, not asserted.
    pub fn explicit_omega_debug(&self) -> Result<DMatrix<T>> {
        let mut zr = self.basis.clone();
        for i in 0..self.n {
            let r = self.weights[i].abs().sqrt();
            for j in 0..self.k {
                zr[(i, j)] *= r;
            }
        }
        let nf = T::from_usize(self.n).unwrap();
        let mut sigma = zr.transpose() * &zr;
        sigma *= self.sign / nf;
        explicit_inverse(&sigma)
    }
}

/// Plain matrix inversion used by the empirical-Gram (unstable) comparator
/// and by the debug path.
pub fn explicit_inverse<T: Scalar>(sigma: &DMatrix<T>) -> Result<DMatrix<T>> {
    let k = sigma.nrows();
    sigma.clone().try_inverse().ok_or(Error::SingularGram {
        rank: 0,
        k,
        smallest: 0.0,
        tolerance: 0.0,
    })
}
