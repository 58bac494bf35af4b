//! Doubly robust functionals, nuisance residuals, the first-order estimator
//! and the correction hierarchy.
//!
//! Two functionals are implemented: the mean outcome among the treated and
//! the expected conditional covariance. Each supplies the Gram weight `S`,
//! the residual maps feeding the sandwich U-statistics, and the first-order
//! contribution.
//!
//! Sign convention: the left residual is oriented so that the order-2
//! correction with the true inverse Gram is an unbiased estimator of
//! `-bias_k`, i.e. adding the corrections to the first-order estimate removes
//! the projected bias instead of doubling it. Concretely the treated-mean
//! residuals are `eps_a = 1 - A a_hat(X)` and `eps_b = A (Y - b_hat(X))`, and
//! the expected-conditional-covariance residuals are `eps_a = a_hat(X) - A`
//! and `eps_b = Y - b_hat(X)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::dictionary::{evaluate_basis, Dictionary};
use crate::error::{Error, Result};
use crate::kernels::{weighted_gram, StableKernel};
use crate::ustats::{partition_moebius_ustat, ExplicitKernel, KernelSource, SandwichKernelSpec};
use crate::Scalar;

/// Default sup-norm bound on nuisance values, checked on the sample.
pub const NUISANCE_BOUND: f64 = 100.0;

/// Which doubly robust functional is being estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Functional {
    /// Mean of the outcome among the treated; `A` is binary, the Gram weight
    /// is `A`, and `a` is the inverse propensity.
    #[serde(rename = "treated-mean")]
    TreatedMean,
    /// Expected conditional covariance of `A` and `Y` given `X`; `A` may be
    /// continuous and the Gram weight is 1.
    #[serde(rename = "ecc")]
    ExpectedConditionalCovariance,
}

/// Prefactor convention for the order-`j` corrections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Convention {
    /// The general definition: no order-dependent prefactor.
    #[default]
    #[serde(rename = "canonical")]
    Canonical,
    /// Orders `j >= 3` carry the factor `(n - j + 1) / n`.
    #[serde(rename = "s31")]
    Section31Prefactors,
}

/// One data set of `n` observations `(X, A, Y)`.
#[derive(Debug, Clone)]
pub struct ObservationSet<T: Scalar = f64> {
    /// `n x d` covariates.
    pub x: DMatrix<T>,
    /// Treatment (binary for the treated mean, real for the covariance
    /// functional).
    pub a: DVector<T>,
    /// Outcome.
    pub y: DVector<T>,
}

impl<T: Scalar> ObservationSet<T> {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn validate(&self, functional: Functional) -> Result<()> {
        let n = self.n();
        if self.a.len() != n || self.y.len() != n {
            return Err(Error::ShapeError(format!(
                "observation columns disagree: x has {n} rows, a has {}, y has {}",
                self.a.len(),
                self.y.len()
            )));
        }
        for i in 0..n {
            if !self.a[i].is_finite() || !self.y[i].is_finite() {
                return Err(Error::ShapeError(format!("non-finite value in row {i}")));
            }
            if functional == Functional::TreatedMean
                && self.a[i] != T::zero()
                && self.a[i] != T::one()
            {
                return Err(Error::ArgumentError(format!(
                    "treated-mean requires binary a; row {i} has a = {:?}",
                    self.a[i].to_f64()
                )));
            }
        }
        Ok(())
    }
}

/// Nuisance estimates evaluated on the sample rows. These are inputs, never
/// fitted here: the frozen-sample protocol keeps nuisance fitting outside the
/// estimation path.
#[derive(Debug, Clone)]
pub struct NuisanceValues<T: Scalar = f64> {
    pub a_hat: DVector<T>,
    pub b_hat: DVector<T>,
}

impl<T: Scalar> NuisanceValues<T> {
    /// Boundedness checks; violations are hard errors.
    pub fn validate(&self, functional: Functional, n: usize) -> Result<()> {
        if self.a_hat.len() != n || self.b_hat.len() != n {
            return Err(Error::ShapeError(format!(
                "nuisance vectors have lengths {} and {}, expected n = {n}",
                self.a_hat.len(),
                self.b_hat.len()
            )));
        }
        let bound = T::c(NUISANCE_BOUND);
        for i in 0..n {
            let (a, b) = (self.a_hat[i], self.b_hat[i]);
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::NuisanceBounds(format!("non-finite nuisance at row {i}")));
            }
            if a.abs() > bound || b.abs() > bound {
                return Err(Error::NuisanceBounds(format!(
                    "nuisance at row {i} exceeds the bound {NUISANCE_BOUND}"
                )));
            }
            if functional == Functional::TreatedMean && a < T::one() {
                return Err(Error::NuisanceBounds(format!(
                    "treated-mean requires a_hat >= 1 (inverse propensity); row {i} has {:?}",
                    a.to_f64()
                )));
            }
        }
        Ok(())
    }
}

impl Functional {
    /// Gram weight `S` for each observation.
    pub fn gram_weights<T: Scalar>(&self, data: &ObservationSet<T>) -> DVector<T> {
        match self {
            Functional::TreatedMean => data.a.clone(),
            Functional::ExpectedConditionalCovariance => {
                DVector::from_element(data.n(), T::one())
            }
        }
    }

    /// Left residual vector.
    pub fn residual_a<T: Scalar>(
        &self,
        fit: &NuisanceValues<T>,
        data: &ObservationSet<T>,
    ) -> DVector<T> {
        let n = data.n();
        match self {
            Functional::TreatedMean => {
                DVector::from_fn(n, |i, _| T::one() - data.a[i] * fit.a_hat[i])
            }
            Functional::ExpectedConditionalCovariance => {
                DVector::from_fn(n, |i, _| fit.a_hat[i] - data.a[i])
            }
        }
    }

    /// Right residual vector.
    pub fn residual_b<T: Scalar>(
        &self,
        fit: &NuisanceValues<T>,
        data: &ObservationSet<T>,
    ) -> DVector<T> {
        let n = data.n();
        match self {
            Functional::TreatedMean => {
                DVector::from_fn(n, |i, _| data.a[i] * (data.y[i] - fit.b_hat[i]))
            }
            Functional::ExpectedConditionalCovariance => {
                DVector::from_fn(n, |i, _| data.y[i] - fit.b_hat[i])
            }
        }
    }

    /// Per-observation contribution to the first-order estimator.
    pub fn first_order_contributions<T: Scalar>(
        &self,
        fit: &NuisanceValues<T>,
        data: &ObservationSet<T>,
    ) -> DVector<T> {
        let n = data.n();
        match self {
            Functional::TreatedMean => DVector::from_fn(n, |i, _| {
                data.a[i] * fit.a_hat[i] * (data.y[i] - fit.b_hat[i]) + fit.b_hat[i]
            }),
            Functional::ExpectedConditionalCovariance => DVector::from_fn(n, |i, _| {
                (data.a[i] - fit.a_hat[i]) * (data.y[i] - fit.b_hat[i])
            }),
        }
    }
}

/// Sample mean of the first-order contributions.
pub fn first_order_estimate<T: Scalar>(
    functional: Functional,
    fit: &NuisanceValues<T>,
    data: &ObservationSet<T>,
) -> Result<T> {
    let n = data.n();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    data.validate(functional)?;
    fit.validate(functional, n)?;
    let contribs = functional.first_order_contributions(fit, data);
    Ok(contribs.sum() / T::from_usize(n).unwrap())
}

fn convention_factor<T: Scalar>(convention: Convention, n: usize, order: usize) -> T {
    match convention {
        Convention::Canonical => T::one(),
        Convention::Section31Prefactors => {
            if order <= 2 {
                T::one()
            } else {
                T::from_usize(n - order + 1).unwrap() / T::from_usize(n).unwrap()
            }
        }
    }
}

fn correction_orders<T: Scalar>(
    source: &KernelSource<'_, T>,
    eps_a: &DVector<T>,
    eps_b: &DVector<T>,
    m: usize,
    convention: Convention,
    n: usize,
) -> Result<BTreeMap<usize, T>> {
    let mut out = BTreeMap::new();
    for order in 2..=m {
        let spec = SandwichKernelSpec {
            eps_a,
            eps_b,
            order,
            source: match source {
                KernelSource::Stable(k) => KernelSource::Stable(k),
                KernelSource::Explicit(k) => KernelSource::Explicit(k),
            },
        };
        let raw = partition_moebius_ustat(&spec)?;
        out.insert(order, raw * convention_factor::<T>(convention, n, order));
    }
    Ok(out)
}

fn check_order_and_size(m: usize, n: usize, k: usize) -> Result<()> {
    if !(2..=8).contains(&m) {
        return Err(Error::OrderTooHigh(m));
    }
    if k >= n {
        return Err(Error::Underdetermined { k, n });
    }
    Ok(())
}

/// sHOIF corrections of orders `2..=m`: inverse Gram from the estimation
/// sample itself, reached through the SVD factorization.
pub fn shoif_correction<T: Scalar>(
    functional: Functional,
    fit: &NuisanceValues<T>,
    data: &ObservationSet<T>,
    dict: &Dictionary<T>,
    m: usize,
    convention: Convention,
) -> Result<BTreeMap<usize, T>> {
    let n = data.n();
    data.validate(functional)?;
    fit.validate(functional, n)?;
    check_order_and_size(m, n, dict.k)?;
    let basis = evaluate_basis(dict, &data.x)?;
    let s = functional.gram_weights(data);
    let kernel = StableKernel::with_default_tolerance(&basis, &s)?;
    let eps_a = functional.residual_a(fit, data);
    let eps_b = functional.residual_b(fit, data);
    correction_orders(&KernelSource::Stable(&kernel), &eps_a, &eps_b, m, convention, n)
}

/// Result of the empirical-Gram comparator.
#[derive(Debug, Clone)]
pub struct EhoifResult<T: Scalar = f64> {
    pub corrections: BTreeMap<usize, T>,
    /// Condition number of the nuisance-sample Gram matrix.
    pub nuisance_condition_number: T,
}

/// eHOIF corrections: identical kernel structure, but the Gram matrix and its
/// inverse come from a separate nuisance sample and the inverse is formed
/// explicitly. This estimator is deliberately the unstable comparator.
pub fn ehoif_correction<T: Scalar>(
    functional: Functional,
    fit: &NuisanceValues<T>,
    data: &ObservationSet<T>,
    dict: &Dictionary<T>,
    m: usize,
    convention: Convention,
    nuisance_data: &ObservationSet<T>,
) -> Result<EhoifResult<T>> {
    let n = data.n();
    if nuisance_data.n() == 0 {
        return Err(Error::EmptyData);
    }
    data.validate(functional)?;
    nuisance_data.validate(functional)?;
    fit.validate(functional, n)?;
    check_order_and_size(m, n, dict.k)?;
    let nuis_basis = evaluate_basis(dict, &nuisance_data.x)?;
    let nuis_s = functional.gram_weights(nuisance_data);
    let sigma_nuis = weighted_gram(&nuis_basis, &nuis_s)?.sigma_hat;
    let svals = sigma_nuis.clone().svd(false, false).singular_values;
    let cond = svals.max() / svals.min();
    let omega_nuis = crate::kernels::explicit_inverse(&sigma_nuis)?;
    let basis = evaluate_basis(dict, &data.x)?;
    let s = functional.gram_weights(data);
    let kernel = ExplicitKernel::new(&omega_nuis, &basis, &s)?;
    let eps_a = functional.residual_a(fit, data);
    let eps_b = functional.residual_b(fit, data);
    let corrections =
        correction_orders(&KernelSource::Explicit(&kernel), &eps_a, &eps_b, m, convention, n)?;
    Ok(EhoifResult { corrections, nuisance_condition_number: cond })
}

/// Oracle corrections: the supplied `omega` plays the role of the true
/// inverse Gram. Requires a symmetric positive definite matrix.
pub fn oracle_hoif_correction<T: Scalar>(
    functional: Functional,
    fit: &NuisanceValues<T>,
    data: &ObservationSet<T>,
    dict: &Dictionary<T>,
    m: usize,
    convention: Convention,
    omega: &DMatrix<T>,
) -> Result<BTreeMap<usize, T>> {
    let n = data.n();
    data.validate(functional)?;
    fit.validate(functional, n)?;
    check_order_and_size(m, n, dict.k)?;
    if omega.clone().cholesky().is_none() {
        return Err(Error::ArgumentError(
            "oracle omega must be symmetric positive definite".into(),
        ));
    }
    let basis = evaluate_basis(dict, &data.x)?;
    let s = functional.gram_weights(data);
    let kernel = ExplicitKernel::new(omega, &basis, &s)?;
    let eps_a = functional.residual_a(fit, data);
    let eps_b = functional.residual_b(fit, data);
    correction_orders(&KernelSource::Explicit(&kernel), &eps_a, &eps_b, m, convention, n)
}

/// Both sides of the alternative characterization of the correction sum.
#[derive(Debug, Clone, Copy)]
pub struct PathwiseCheck<T: Scalar = f64> {
    pub lhs: T,
    pub rhs: T,
    pub abs_discrepancy: T,
    pub rel_discrepancy: T,
}

/// Evaluates both sides of the identity
///
/// ```text
/// IF_2(I) - sum_{j=2..m} IF_j(Omega_hat)
///   = U_{n,2}[ eps_a z_1^T { sum_{j=1}^{m-1} (-1)^j C(m-1,j)
///       U-avg( Omega_hat Q .. Q Omega_hat - I ) } z_2 eps_b ]
/// ```
///
/// where the inner average runs over ordered distinct `(j-1)`-tuples drawn
/// from the remaining `n - 2` observations, the interleaved product has
/// `j - 1` factors `Q`, and `I` is the literal identity. The left side pairs
/// the explicit-identity kernel with the Möbius engine; the right side is
/// direct enumeration, so the check exercises both engine paths.
pub fn pathwise_alternative_identity_check<T: Scalar>(
    functional: Functional,
    fit: &NuisanceValues<T>,
    data: &ObservationSet<T>,
    dict: &Dictionary<T>,
    m: usize,
) -> Result<PathwiseCheck<T>> {
    let n = data.n();
    data.validate(functional)?;
    fit.validate(functional, n)?;
    check_order_and_size(m, n, dict.k)?;
    if m > 4 {
        return Err(Error::ArgumentError(
            "the pathwise identity check is limited to m <= 4".into(),
        ));
    }
    let basis = evaluate_basis(dict, &data.x)?;
    let s = functional.gram_weights(data);
    let kernel = StableKernel::with_default_tolerance(&basis, &s)?;
    let eps_a = functional.residual_a(fit, data);
    let eps_b = functional.residual_b(fit, data);

    // left side: the identity-kernel order-2 statistic minus the correction sum
    let identity = DMatrix::<T>::identity(dict.k, dict.k);
    let id_kernel = ExplicitKernel::new(&identity, &basis, &s)?;
    let if2_identity = partition_moebius_ustat(&SandwichKernelSpec {
        eps_a: &eps_a,
        eps_b: &eps_b,
        order: 2,
        source: KernelSource::Explicit(&id_kernel),
    })?;
    let mut corr_sum = T::zero();
    for order in 2..=m {
        corr_sum += partition_moebius_ustat(&SandwichKernelSpec {
            eps_a: &eps_a,
            eps_b: &eps_b,
            order,
            source: KernelSource::Stable(&kernel),
        })?;
    }
    let lhs = if2_identity - corr_sum;

    // right side: direct enumeration
    let z = kernel.basis();
    let raw_gram = |i: usize, j: usize| {
        let mut acc = T::zero();
        for c in 0..dict.k {
            acc += z[(i, c)] * z[(j, c)];
        }
        acc
    };
    let kp = |i: usize, j: usize| kernel.kernel_entry(i, j);
    let mut outer = T::zero();
    for i1 in 0..n {
        for i2 in 0..n {
            if i1 == i2 || eps_a[i1] == T::zero() || eps_b[i2] == T::zero() {
                continue;
            }
            let mut inner = T::zero();
            for j in 1..m {
                // average of the interleaved chain with j-1 middle factors
                // over ordered distinct tuples avoiding {i1, i2}
                let mid = j - 1;
                let mut chain_sum = T::zero();
                let mut count = 0usize;
                match mid {
                    0 => {
                        chain_sum = kp(i1, i2);
                        count = 1;
                    }
                    1 => {
                        for a in 0..n {
                            if a == i1 || a == i2 {
                                continue;
                            }
                            chain_sum += kp(i1, a) * s[a] * kp(a, i2);
                            count += 1;
                        }
                    }
                    2 => {
                        for a in 0..n {
                            if a == i1 || a == i2 {
                                continue;
                            }
                            for b in 0..n {
                                if b == i1 || b == i2 || b == a {
                                    continue;
                                }
                                chain_sum += kp(i1, a) * s[a] * kp(a, b) * s[b] * kp(b, i2);
                                count += 1;
                            }
                        }
                    }
                    _ => unreachable!("m <= 4 implies at most two middle factors"),
                }
                let avg = chain_sum / T::from_usize(count.max(1)).unwrap();
                let term = avg - raw_gram(i1, i2);
                let mut binom = T::one();
                for t in 0..j {
                    binom *= T::from_usize(m - 1 - t).unwrap() / T::from_usize(t + 1).unwrap();
                }
                let signed = if j % 2 == 1 { -binom } else { binom };
                inner += signed * term;
            }
            outer += eps_a[i1] * inner * eps_b[i2];
        }
    }
    let nf = T::from_usize(n).unwrap();
    let rhs = outer / (nf * (nf - T::one()));
    let abs = (lhs - rhs).abs();
    let denom = lhs.abs().max(rhs.abs()).max(T::c(1e-30));
    Ok(PathwiseCheck { lhs, rhs, abs_discrepancy: abs, rel_discrepancy: abs / denom })
}

/// Full estimate assembled for reporting: the first-order estimate, the
/// per-order corrections, and the running totals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReport {
    pub functional: Functional,
    pub convention: Convention,
    pub n: usize,
    pub k: usize,
    pub m_max: usize,
    pub psi_1: f64,
    /// Order j -> correction value.
    pub corrections: BTreeMap<usize, f64>,
    /// Order m -> psi_1 plus all corrections up to m, exactly as accumulated.
    pub psi_m: BTreeMap<usize, f64>,
    pub se_psi1: Option<f64>,
    pub se_corrections: Option<BTreeMap<usize, f64>>,
    /// Condition number of the sample Gram matrix.
    pub sigma_condition_number: f64,
}

/// Builds the report from the stable-kernel estimate.
pub fn estimate_report(
    functional: Functional,
    fit: &NuisanceValues<f64>,
    data: &ObservationSet<f64>,
    dict: &Dictionary<f64>,
    m: usize,
    convention: Convention,
) -> Result<EstimateReport> {
    let n = data.n();
    let psi_1 = first_order_estimate(functional, fit, data)?;
    check_order_and_size(m, n, dict.k)?;
    let basis = evaluate_basis(dict, &data.x)?;
    let s = functional.gram_weights(data);
    let kernel = StableKernel::with_default_tolerance(&basis, &s)?;
    let cond = kernel.sigma_condition_number();
    let eps_a = functional.residual_a(fit, data);
    let eps_b = functional.residual_b(fit, data);
    let corrections =
        correction_orders(&KernelSource::Stable(&kernel), &eps_a, &eps_b, m, convention, n)?;
    let mut psi_m = BTreeMap::new();
    let mut running = psi_1;
    for (&order, &c) in &corrections {
        running += c;
        psi_m.insert(order, running);
    }
    Ok(EstimateReport {
        functional,
        convention,
        n,
        k: dict.k,
        m_max: m,
        psi_1,
        corrections,
        psi_m,
        se_psi1: None,
        se_corrections: None,
        sigma_condition_number: cond,
    })
}
