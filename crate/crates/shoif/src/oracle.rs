//! Exact ground truth on finite-state data generating processes.
//!
//! Every population quantity is a finite sum over covariate atoms, so the
//! target functional, the first-order bias, its dictionary projection, the
//! population Gram matrix and its inverse, the Cauchy-Schwarz bias envelope
//! and the efficiency bound are all computed without sampling error. The
//! Monte Carlo harness attaches these values to its result tables as the
//! reference the estimators are judged against.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::{evaluate_basis, Dictionary};
use crate::error::{Error, Result};
use crate::estimators::NuisanceValues;
use crate::Scalar;

/// One covariate atom of a finite-state treated-mean process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Atom {
    /// Covariate value (length d).
    pub x: Vec<f64>,
    /// Marginal probability of the atom.
    pub prob: f64,
    /// Propensity P(A = 1 | X = x); the inverse propensity plays the role of
    /// the `a` nuisance.
    pub propensity: f64,
    /// Outcome mean b(x) = E[Y | X = x, A = 1].
    pub outcome_mean: f64,
    /// Outcome noise standard deviation at this atom.
    #[serde(default)]
    pub outcome_sd: f64,
}

/// Finite-support data generating process for the treated-mean functional.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteDgp {
    pub atoms: Vec<Atom>,
    /// Overlap constant: propensities must stay at or above `c`. The upper
    /// end is left open so deterministic-treatment atoms (propensity 1) are
    /// allowed; only propensities near zero break the inverse weighting.
    pub overlap_c: f64,
}

impl DiscreteDgp {
    pub fn validate(&self) -> Result<()> {
        if self.atoms.is_empty() {
            return Err(Error::EmptyData);
        }
        if !(self.overlap_c > 0.0 && self.overlap_c < 0.5) {
            return Err(Error::ArgumentError(format!(
                "overlap constant must lie in (0, 0.5), got {}",
                self.overlap_c
            )));
        }
        let total: f64 = self.atoms.iter().map(|a| a.prob).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::ArgumentError(format!(
                "atom probabilities sum to {total}, expected 1"
            )));
        }
        let d = self.atoms[0].x.len();
        for (i, a) in self.atoms.iter().enumerate() {
            if a.x.len() != d {
                return Err(Error::ShapeError(format!(
                    "atom {i} has covariate dimension {}, expected {d}",
                    a.x.len()
                )));
            }
            if a.prob < 0.0 {
                return Err(Error::ArgumentError(format!("atom {i} has negative probability")));
            }
            if !(a.propensity >= self.overlap_c && a.propensity <= 1.0) {
                return Err(Error::ArgumentError(format!(
                    "atom {i} propensity {} violates the overlap bound [{}, 1]",
                    a.propensity, self.overlap_c
                )));
            }
            if a.outcome_sd < 0.0 {
                return Err(Error::ArgumentError(format!("atom {i} has negative outcome sd")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].x.len()
    }

    /// Covariate matrix of the atoms (one row per atom), the shape the
    /// dictionary evaluator expects.
    pub fn atom_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(self.atoms.len(), d, |i, j| self.atoms[i].x[j])
    }

    /// True inverse propensities `a(x) = 1 / pi(x)` per atom.
    pub fn inverse_propensities(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| 1.0 / a.propensity).collect()
    }

    /// True outcome means per atom.
    pub fn outcome_means(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.outcome_mean).collect()
    }

    /// `psi = E[b(X)]`.
    pub fn psi(&self) -> f64 {
        self.atoms.iter().map(|a| a.prob * a.outcome_mean).sum()
    }
}

/// Nuisance fit specified at atom level (one value per atom).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtomNuisance {
    pub a_hat: Vec<f64>,
    pub b_hat: Vec<f64>,
}

impl AtomNuisance {
    /// The exact truth as a fit.
    pub fn truth(dgp: &DiscreteDgp) -> Self {
        AtomNuisance { a_hat: dgp.inverse_propensities(), b_hat: dgp.outcome_means() }
    }

    /// Expands atom-level values to per-row values given atom indices.
    pub fn at_rows(&self, atom_idx: &[usize]) -> NuisanceValues<f64> {
        NuisanceValues {
            a_hat: DVector::from_fn(atom_idx.len(), |i, _| self.a_hat[atom_idx[i]]),
            b_hat: DVector::from_fn(atom_idx.len(), |i, _| self.b_hat[atom_idx[i]]),
        }
    }
}

/// Exact population quantities for a (process, fit, dictionary) triple.
#[derive(Debug, Clone)]
pub struct ExactFunctionals<T: Scalar = f64> {
    /// The target `psi = E[b(X)]`.
    pub psi: T,
    /// First-order bias `E[(a_hat/a - 1)(b - b_hat)]`.
    pub bias_psi1: T,
    /// Dictionary projection of the bias:
    /// `E[(a_hat/a - 1) z^T] Omega E[A z (b - b_hat)]`.
    pub bias_k: T,
    /// Population Gram matrix `Sigma = E[A z z^T]`.
    pub sigma: DMatrix<T>,
    /// Its inverse.
    pub omega: DMatrix<T>,
    /// Cauchy-Schwarz bias envelope
    /// `sqrt(E[|lambda|(a_hat - a)^2] E[|lambda|(b_hat - b)^2])` with
    /// `|lambda| = 1/a`.
    pub cs_bias: T,
    /// Semiparametric efficiency bound `E[IF_1(theta)^2]`.
    pub eff_bound: T,
}

/// Computes every population quantity by finite sums over the atoms.
pub fn exact_functionals(
    dgp: &DiscreteDgp,
    fit: &AtomNuisance,
    dict: &Dictionary<f64>,
) -> Result<ExactFunctionals<f64>> {
    dgp.validate()?;
    let n_atoms = dgp.atoms.len();
    if fit.a_hat.len() != n_atoms || fit.b_hat.len() != n_atoms {
        return Err(Error::ShapeError(format!(
            "atom nuisance lengths {} / {} do not match the {} atoms",
            fit.a_hat.len(),
            fit.b_hat.len(),
            n_atoms
        )));
    }
    let basis = evaluate_basis(dict, &dgp.atom_matrix())?;
    let k = dict.k;

    let mut psi = 0.0;
    let mut bias = 0.0;
    let mut u = DVector::<f64>::zeros(k); // E[(a_hat/a - 1) z]
    let mut v = DVector::<f64>::zeros(k); // E[A z (b - b_hat)]
    let mut sigma = DMatrix::<f64>::zeros(k, k);
    let mut cs_a = 0.0;
    let mut cs_b = 0.0;
    let mut eff = 0.0;
    for (i, atom) in dgp.atoms.iter().enumerate() {
        let p = atom.prob;
        let pi = atom.propensity;
        let a_true = 1.0 / pi;
        let b_true = atom.outcome_mean;
        let ratio_err = fit.a_hat[i] / a_true - 1.0;
        let b_err = b_true - fit.b_hat[i];
        psi += p * b_true;
        bias += p * ratio_err * b_err;
        let z = basis.values.row(i);
        for c in 0..k {
            u[c] += p * ratio_err * z[c];
            v[c] += p * pi * b_err * z[c];
            for c2 in 0..k {
                sigma[(c, c2)] += p * pi * z[c] * z[c2];
            }
        }
        // |lambda| = 1/a = pi
        cs_a += p * pi * (fit.a_hat[i] - a_true).powi(2);
        cs_b += p * pi * (fit.b_hat[i] - b_true).powi(2);
        // E[IF_1^2] with IF_1 = A a (Y - b) + b - psi: the cross term
        // vanishes, leaving a(x) sigma(x)^2 + (b(x) - psi)^2 pieces
        eff += p * (a_true * atom.outcome_sd.powi(2));
    }
    let psi_val = psi;
    for atom in &dgp.atoms {
        eff += atom.prob * (atom.outcome_mean - psi_val).powi(2);
    }
    let omega = sigma.clone().try_inverse().ok_or_else(|| {
        let svals = sigma.clone().svd(false, false).singular_values;
        Error::SingularGram {
            rank: svals.iter().filter(|v| **v > 1e-12 * svals.max()).count(),
            k,
            smallest: svals.min(),
            tolerance: 1e-12,
        }
    })?;
    let bias_k = (u.transpose() * &omega * &v)[(0, 0)];
    Ok(ExactFunctionals {
        psi,
        bias_psi1: bias,
        bias_k,
        sigma,
        omega,
        cs_bias: (cs_a * cs_b).sqrt(),
        eff_bound: eff,
    })
}

/// The worked two-atom fixture: probabilities (1/2, 1/2), propensities
/// (1/2, 1), outcome means (1, 0). With the fit `a_hat = (3, 1)`,
/// `b_hat = (0, 1)` its first-order bias and saturated projected bias are
/// both exactly 1/4.
pub fn two_atom_fixture() -> (DiscreteDgp, AtomNuisance) {
    let dgp = DiscreteDgp {
        atoms: vec![
            Atom { x: vec![-0.5], prob: 0.5, propensity: 0.5, outcome_mean: 1.0, outcome_sd: 0.0 },
            Atom { x: vec![0.5], prob: 0.5, propensity: 1.0, outcome_mean: 0.0, outcome_sd: 0.0 },
        ],
        overlap_c: 0.1,
    };
    let fit = AtomNuisance { a_hat: vec![3.0, 1.0], b_hat: vec![0.0, 1.0] };
    (dgp, fit)
}
