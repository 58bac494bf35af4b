//! Synthetic data generation, controlled nuisance perturbation, and the
//! replication runner that produces the stability, bias, variance and
//! coverage evidence.
//!
//! All randomness is reproducible: replication `r` of an experiment draws
//! from a stream seeded with `base_seed + r`, so any subset of replications
//! reproduces identically regardless of scheduling, and the result tables do
//! not depend on the degree of parallelism.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::dictionary::{evaluate_basis, Dictionary, DictionarySpec};
use crate::error::{Error, Result};
use crate::estimators::{
    ehoif_correction, first_order_estimate, oracle_hoif_correction, shoif_correction, Convention,
    Functional, NuisanceValues, ObservationSet,
};
use crate::kernels::StableKernel;
use crate::oracle::{exact_functionals, AtomNuisance, DiscreteDgp};

/// Smooth outcome-mean shapes available to continuous processes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "shape")]
pub enum OutcomeFn {
    /// `b(x) = sin(pi x_1) (1 + x_2) / 2` (the default fixture; with d = 1
    /// the second factor is 1/2).
    #[serde(rename = "sine-ramp")]
    SineRamp,
    /// Linear form `b(x) = w . x + intercept`.
    #[serde(rename = "linear")]
    Linear { w: Vec<f64>, intercept: f64 },
}

impl OutcomeFn {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            OutcomeFn::SineRamp => {
                let x2 = if x.len() > 1 { x[1] } else { 0.0 };
                (std::f64::consts::PI * x[0]).sin() * (1.0 + x2) / 2.0
            }
            OutcomeFn::Linear { w, intercept } => {
                intercept + w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>()
            }
        }
    }
}

/// Continuous data generating process: `X` uniform on `[-1, 1]^d`, a clipped
/// logistic propensity (or mean treatment for the covariance functional),
/// and a configurable smooth outcome mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinuousDgp {
    pub d: usize,
    pub functional: Functional,
    /// Logistic weights for the propensity / treatment-mean function.
    pub prop_w: Vec<f64>,
    pub prop_intercept: f64,
    /// Clip range for the propensity, `(c, 1 - c)` style.
    pub clip: (f64, f64),
    pub outcome: OutcomeFn,
    pub noise_sd: f64,
    /// Treatment noise standard deviation (covariance functional only).
    #[serde(default)]
    pub treatment_noise_sd: f64,
    /// Smoothness tags describing the configured functions (metadata).
    #[serde(default)]
    pub s_a: f64,
    #[serde(default)]
    pub s_b: f64,
}

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl ContinuousDgp {
    /// Default fixture: d = 2, propensity `clip(expit(x1 - x2/2), 0.1, 0.9)`,
    /// outcome `sin(pi x1)(1 + x2)/2`, noise sd 0.5.
    pub fn default_fixture(functional: Functional) -> Self {
        ContinuousDgp {
            d: 2,
            functional,
            prop_w: vec![1.0, -0.5],
            prop_intercept: 0.0,
            clip: (0.1, 0.9),
            outcome: OutcomeFn::SineRamp,
            noise_sd: 0.5,
            treatment_noise_sd: 0.5,
            s_a: 2.0,
            s_b: 2.0,
        }
    }

    /// Propensity (or treatment mean) at a point.
    pub fn propensity(&self, x: &[f64]) -> f64 {
        let lin = self.prop_intercept
            + self.prop_w.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        expit(lin).clamp(self.clip.0, self.clip.1)
    }

    pub fn outcome_mean(&self, x: &[f64]) -> f64 {
        self.outcome.eval(x)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.prop_w.len() != self.d {
            return Err(Error::ArgumentError(format!(
                "propensity weights must have length d = {}",
                self.d
            )));
        }
        if !(self.clip.0 > 0.0 && self.clip.1 < 1.0 && self.clip.0 < self.clip.1) {
            return Err(Error::ArgumentError("clip range must satisfy 0 < lo < hi < 1".into()));
        }
        if self.noise_sd < 0.0 || self.treatment_noise_sd < 0.0 {
            return Err(Error::ArgumentError("noise standard deviations must be >= 0".into()));
        }
        // clip bounds respected on a dense probe
        let mut rng = ChaCha8Rng::seed_from_u64(0xC11B);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..self.d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let p = self.propensity(&x);
            if !(p >= self.clip.0 && p <= self.clip.1) {
                return Err(Error::ArgumentError("propensity escapes the clip range".into()));
            }
        }
        Ok(())
    }
}

/// Either kind of data generating process.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Dgp {
    #[serde(rename = "discrete")]
    Discrete(DiscreteDgp),
    #[serde(rename = "continuous")]
    Continuous(ContinuousDgp),
}

impl Dgp {
    pub fn functional(&self) -> Functional {
        match self {
            Dgp::Discrete(_) => Functional::TreatedMean,
            Dgp::Continuous(c) => c.functional,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Dgp::Discrete(d) => d.dim(),
            Dgp::Continuous(c) => c.d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Dgp::Discrete(d) => d.validate(),
            Dgp::Continuous(c) => c.validate(),
        }
    }
}

/// One sampled data set plus, for discrete processes, the atom index of each
/// row (atom-level nuisances are expanded through it).
#[derive(Debug, Clone)]
pub struct SampleDraw {
    pub data: ObservationSet<f64>,
    pub atom_idx: Option<Vec<usize>>,
}

/// Draws `n` observations; deterministic given the seed.
pub fn sample(dgp: &Dgp, n: usize, seed: u64) -> Result<SampleDraw> {
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match dgp {
        Dgp::Discrete(d) => {
            let cum: Vec<f64> = d
                .atoms
                .iter()
                .scan(0.0, |acc, a| {
                    *acc += a.prob;
                    Some(*acc)
                })
                .collect();
            let mut x = DMatrix::zeros(n, d.dim());
            let mut a = DVector::zeros(n);
            let mut y = DVector::zeros(n);
            let mut idx = Vec::with_capacity(n);
            for i in 0..n {
                let u: f64 = rng.gen_range(0.0..1.0);
                let j = cum.iter().position(|c| u < *c).unwrap_or(d.atoms.len() - 1);
                idx.push(j);
                let atom = &d.atoms[j];
                for c in 0..d.dim() {
                    x[(i, c)] = atom.x[c];
                }
                let treated = rng.gen_bool(atom.propensity);
                a[i] = if treated { 1.0 } else { 0.0 };
                let noise: f64 = rng.sample(StandardNormal);
                y[i] = atom.outcome_mean + atom.outcome_sd * noise;
            }
            Ok(SampleDraw { data: ObservationSet { x, a, y }, atom_idx: Some(idx) })
        }
        Dgp::Continuous(c) => {
            let mut x = DMatrix::zeros(n, c.d);
            let mut a = DVector::zeros(n);
            let mut y = DVector::zeros(n);
            let mut point = vec![0.0; c.d];
            for i in 0..n {
                for j in 0..c.d {
                    point[j] = rng.gen_range(-1.0..=1.0);
                    x[(i, j)] = point[j];
                }
                let p = c.propensity(&point);
                match c.functional {
                    Functional::TreatedMean => {
                        a[i] = if rng.gen_bool(p) { 1.0 } else { 0.0 };
                    }
                    Functional::ExpectedConditionalCovariance => {
                        let na: f64 = rng.sample(StandardNormal);
                        a[i] = p + c.treatment_noise_sd * na;
                    }
                }
                let nb: f64 = rng.sample(StandardNormal);
                y[i] = c.outcome_mean(&point) + c.noise_sd * nb;
            }
            Ok(SampleDraw { data: ObservationSet { x, a, y }, atom_idx: None })
        }
    }
}

/// Direction of the nuisance perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbDirection {
    /// Random combination of the leading dictionary functions.
    #[serde(rename = "basis-noise")]
    BasisNoise,
    /// Constant shift.
    #[serde(rename = "constant-shift")]
    ConstantShift,
}

/// Controlled-rate perturbation: the fitted nuisances are the truth plus
/// `scale * n^{-beta}` times a fixed-seed direction of unit sample-L2 norm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub rate_exponent: f64,
    pub direction: PerturbDirection,
    pub scale: f64,
    pub seed: u64,
}

/// Applies the perturbation to the true nuisances evaluated on a sample.
/// Clipping keeps the treated-mean constraint `a_hat >= 1` and the sup bound;
/// if clipping destroys more than half of the perturbation mass the spec is
/// infeasible.
pub fn perturbed_nuisance(
    dgp: &Dgp,
    spec: &PerturbationSpec,
    draw: &SampleDraw,
    dict: &Dictionary<f64>,
) -> Result<NuisanceValues<f64>> {
    if spec.rate_exponent < 0.0 || spec.scale < 0.0 {
        return Err(Error::ArgumentError("perturbation needs beta >= 0 and scale >= 0".into()));
    }
    let n = draw.data.n();
    let functional = dgp.functional();
    // truth on the sample
    let (a_true, b_true): (DVector<f64>, DVector<f64>) = match dgp {
        Dgp::Discrete(d) => {
            let idx = draw.atom_idx.as_ref().expect("discrete draw keeps atom indices");
            let inv = d.inverse_propensities();
            let means = d.outcome_means();
            (
                DVector::from_fn(n, |i, _| inv[idx[i]]),
                DVector::from_fn(n, |i, _| means[idx[i]]),
            )
        }
        Dgp::Continuous(c) => {
            let mut at = DVector::zeros(n);
            let mut bt = DVector::zeros(n);
            let mut point = vec![0.0; c.d];
            for i in 0..n {
                for j in 0..c.d {
                    point[j] = draw.data.x[(i, j)];
                }
                let p = c.propensity(&point);
                at[i] = match functional {
                    Functional::TreatedMean => 1.0 / p,
                    Functional::ExpectedConditionalCovariance => p,
                };
                bt[i] = c.outcome_mean(&point);
            }
            (at, bt)
        }
    };
    if spec.scale == 0.0 {
        return Ok(NuisanceValues { a_hat: a_true, b_hat: b_true });
    }
    let magnitude = spec.scale * (n as f64).powf(-spec.rate_exponent);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let direction = |rng: &mut ChaCha8Rng| -> Result<DVector<f64>> {
        match spec.direction {
            PerturbDirection::ConstantShift => Ok(DVector::from_element(n, 1.0)),
            PerturbDirection::BasisNoise => {
                let basis = evaluate_basis(dict, &draw.data.x)?;
                let l = dict.k.min(8);
                let coeffs: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut eta = DVector::zeros(n);
                for i in 0..n {
                    for (c, w) in coeffs.iter().enumerate() {
                        eta[i] += w * basis.values[(i, c)];
                    }
                }
                // unit sample-L2 norm so the error magnitude is exact pre-clip
                let norm = (eta.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
                if norm < 1e-12 {
                    return Err(Error::PerturbationInfeasible { lost_fraction: 1.0 });
                }
                Ok(eta / norm)
            }
        }
    };
    let eta_a = direction(&mut rng)?;
    let eta_b = direction(&mut rng)?;
    let mut a_hat = DVector::from_fn(n, |i, _| a_true[i] + magnitude * eta_a[i]);
    let mut b_hat = DVector::from_fn(n, |i, _| b_true[i] + magnitude * eta_b[i]);
    // clip to the admissible region
    let bound = crate::estimators::NUISANCE_BOUND;
    for i in 0..n {
        if functional == Functional::TreatedMean && a_hat[i] < 1.0 {
            a_hat[i] = 1.0;
        }
        a_hat[i] = a_hat[i].clamp(-bound, bound);
        b_hat[i] = b_hat[i].clamp(-bound, bound);
    }
    let intended = magnitude * magnitude * 2.0;
    let kept: f64 = (0..n)
        .map(|i| (a_hat[i] - a_true[i]).powi(2) + (b_hat[i] - b_true[i]).powi(2))
        .sum::<f64>()
        / n as f64;
    if kept < 0.5 * intended {
        return Err(Error::PerturbationInfeasible { lost_fraction: 1.0 - kept / intended });
    }
    Ok(NuisanceValues { a_hat, b_hat })
}

/// Estimator variants the runner can evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "shoif")]
    Shoif,
    #[serde(rename = "ehoif")]
    Ehoif,
    #[serde(rename = "oracle")]
    OracleOmega,
}

/// How a grid `k` maps onto dictionary parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum KMapping {
    /// `cells_per_axis = k / (degree+1)^d` (dimension 1 only).
    #[default]
    #[serde(rename = "cells")]
    Cells,
    /// `degree = k / cells_per_axis^d - 1` (dimension 1 only).
    #[serde(rename = "degree")]
    Degree,
}

/// Nuisance source for the runner.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum NuisanceSource {
    /// The exact truth.
    #[serde(rename = "truth")]
    Truth,
    /// Fixed values per atom (discrete processes only).
    #[serde(rename = "atom-values")]
    AtomValues { a_hat: Vec<f64>, b_hat: Vec<f64> },
    /// Controlled-rate perturbation of the truth.
    #[serde(rename = "perturbation")]
    Perturbation(PerturbationSpec),
}

/// Full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dgp: Dgp,
    /// Dictionary template; `cells_per_axis` or `degree` is overridden per
    /// grid point according to `k_mapping`.
    pub dictionary: DictionarySpec,
    #[serde(default)]
    pub k_mapping: KMapping,
    pub grid_n: Vec<usize>,
    pub grid_k: Vec<usize>,
    pub grid_m: Vec<usize>,
    pub replications: usize,
    pub base_seed: u64,
    pub estimators: Vec<EstimatorKind>,
    pub nuisance: NuisanceSource,
    #[serde(default)]
    pub convention: Convention,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.grid_n.is_empty() || self.grid_k.is_empty() || self.grid_m.is_empty() {
            return Err(Error::InvalidConfig {
                pointer: "/grid".into(),
                message: "the (n, k, m) grid must be nonempty".into(),
            });
        }
        for &n in &self.grid_n {
            for &k in &self.grid_k {
                if k >= n {
                    return Err(Error::InvalidConfig {
                        pointer: "/grid".into(),
                        message: format!("k = {k} must be below n = {n} at every grid point"),
                    });
                }
            }
        }
        for &m in &self.grid_m {
            if !(2..=8).contains(&m) {
                return Err(Error::InvalidConfig {
                    pointer: "/grid_m".into(),
                    message: format!("orders must lie in 2..=8, got {m}"),
                });
            }
        }
        if self.replications == 0 {
            return Err(Error::InvalidConfig {
                pointer: "/replications".into(),
                message: "need at least one replication".into(),
            });
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidConfig {
                pointer: "/estimators".into(),
                message: "need at least one estimator".into(),
            });
        }
        if matches!(self.estimators.iter().find(|e| **e == EstimatorKind::OracleOmega), Some(_))
            && matches!(self.dgp, Dgp::Continuous(_))
        {
            return Err(Error::InvalidConfig {
                pointer: "/estimators".into(),
                message: "the oracle estimator needs a discrete process".into(),
            });
        }
        if matches!(self.nuisance, NuisanceSource::AtomValues { .. })
            && matches!(self.dgp, Dgp::Continuous(_))
        {
            return Err(Error::InvalidConfig {
                pointer: "/nuisance".into(),
                message: "atom-value nuisances need a discrete process".into(),
            });
        }
        Ok(())
    }

    /// Dictionary for a grid `k`, derived from the template.
    pub fn dictionary_for_k(&self, k: usize) -> Result<Dictionary<f64>> {
        let mut spec = self.dictionary.clone();
        if spec.d != 1 && self.grid_k.len() > 1 {
            return Err(Error::InvalidConfig {
                pointer: "/dictionary".into(),
                message: "k grids are supported for one-dimensional dictionaries only".into(),
            });
        }
        match self.k_mapping {
            KMapping::Cells => {
                let block = spec.degree + 1;
                if k % block != 0 {
                    return Err(Error::InvalidConfig {
                        pointer: "/grid_k".into(),
                        message: format!("k = {k} is not a multiple of degree+1 = {block}"),
                    });
                }
                spec.cells_per_axis = k / block;
            }
            KMapping::Degree => {
                if k % spec.cells_per_axis != 0 {
                    return Err(Error::InvalidConfig {
                        pointer: "/grid_k".into(),
                        message: format!(
                            "k = {k} is not a multiple of cells_per_axis = {}",
                            spec.cells_per_axis
                        ),
                    });
                }
                spec.degree = k / spec.cells_per_axis - 1;
            }
        }
        let dict = spec.build()?;
        debug_assert_eq!(dict.k, k);
        Ok(dict)
    }
}

/// One row of the long-format result table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub estimator: EstimatorKind,
    /// 1 = first-order estimate, j >= 2 = order-j correction.
    pub order: usize,
    pub replication: usize,
    pub value: f64,
    pub cond_number: f64,
    pub status: String,
}

/// Per-cell summary attached to `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub estimator: EstimatorKind,
    pub successes: usize,
    pub failures: usize,
    pub mc_mean_psi_m: f64,
    pub mc_sd_psi_m: f64,
    pub mc_se_psi_m: f64,
    pub mc_mean_corrections: BTreeMap<usize, f64>,
    pub mc_mean_psi_1: f64,
    pub median_cond_number: f64,
}

/// Full experiment output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub summaries: Vec<CellSummary>,
    /// Exact oracle values for discrete processes (per grid k).
    pub oracle_values: BTreeMap<usize, OracleAttachment>,
}

/// Exact population references attached to discrete-process runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleAttachment {
    pub psi: f64,
    pub bias_psi1: f64,
    pub bias_k: f64,
    pub cs_bias: f64,
    pub eff_bound: f64,
}

struct RepOutcome {
    rows: Vec<ResultRow>,
    // per estimator: psi_1 and the corrections, when successful
    per_estimator: Vec<(EstimatorKind, Option<(f64, BTreeMap<usize, f64>, f64)>)>,
}

fn nuisance_for_draw(
    cfg: &ExperimentConfig,
    draw: &SampleDraw,
    dict: &Dictionary<f64>,
) -> Result<NuisanceValues<f64>> {
    match &cfg.nuisance {
        NuisanceSource::Truth => {
            let spec = PerturbationSpec {
                rate_exponent: 0.0,
                direction: PerturbDirection::ConstantShift,
                scale: 0.0,
                seed: 0,
            };
            perturbed_nuisance(&cfg.dgp, &spec, draw, dict)
        }
        NuisanceSource::AtomValues { a_hat, b_hat } => {
            let idx = draw
                .atom_idx
                .as_ref()
                .expect("atom-value nuisances validated against discrete processes");
            Ok(AtomNuisance { a_hat: a_hat.clone(), b_hat: b_hat.clone() }.at_rows(idx))
        }
        NuisanceSource::Perturbation(spec) => perturbed_nuisance(&cfg.dgp, spec, draw, dict),
    }
}

fn run_one_replication(
    cfg: &ExperimentConfig,
    n: usize,
    k: usize,
    m: usize,
    dict: &Dictionary<f64>,
    oracle_omega: Option<&DMatrix<f64>>,
    rep: usize,
) -> RepOutcome {
    let functional = cfg.dgp.functional();
    let seed = cfg.base_seed.wrapping_add(rep as u64);
    let mut rows = Vec::new();
    let mut per_estimator = Vec::new();
    let draw = match sample(&cfg.dgp, n, seed) {
        Ok(d) => d,
        Err(e) => {
            for &est in &cfg.estimators {
                rows.push(ResultRow {
                    n,
                    k,
                    m,
                    estimator: est,
                    order: 0,
                    replication: rep,
                    value: f64::NAN,
                    cond_number: f64::NAN,
                    status: format!("sample-error:{}", e.kind()),
                });
                per_estimator.push((est, None));
            }
            return RepOutcome { rows, per_estimator };
        }
    };
    let fit = match nuisance_for_draw(cfg, &draw, dict) {
        Ok(f) => f,
        Err(e) => {
            for &est in &cfg.estimators {
                rows.push(ResultRow {
                    n,
                    k,
                    m,
                    estimator: est,
                    order: 0,
                    replication: rep,
                    value: f64::NAN,
                    cond_number: f64::NAN,
                    status: format!("nuisance-error:{}", e.kind()),
                });
                per_estimator.push((est, None));
            }
            return RepOutcome { rows, per_estimator };
        }
    };
    // condition number of the sample Gram, recorded for every estimator
    let cond = evaluate_basis(dict, &draw.data.x)
        .ok()
        .and_then(|basis| {
            let s = functional.gram_weights(&draw.data);
            StableKernel::with_default_tolerance(&basis, &s)
                .ok()
                .map(|kern| kern.sigma_condition_number())
        })
        .unwrap_or(f64::INFINITY);
    for &est in &cfg.estimators {
        let result: Result<(f64, BTreeMap<usize, f64>, f64)> = (|| {
            let psi_1 = first_order_estimate(functional, &fit, &draw.data)?;
            let (corrections, cond_used) = match est {
                EstimatorKind::Shoif => (
                    shoif_correction(functional, &fit, &draw.data, dict, m, cfg.convention)?,
                    cond,
                ),
                EstimatorKind::Ehoif => {
                    // disjoint nuisance sample drawn from a shifted stream
                    let nuis_seed = seed ^ 0x9E37_79B9_7F4A_7C15;
                    let nuis = sample(&cfg.dgp, n, nuis_seed)?;
                    let r = ehoif_correction(
                        functional,
                        &fit,
                        &draw.data,
                        dict,
                        m,
                        cfg.convention,
                        &nuis.data,
                    )?;
                    (r.corrections, r.nuisance_condition_number)
                }
                EstimatorKind::OracleOmega => {
                    let omega = oracle_omega
                        .ok_or_else(|| Error::ArgumentError("missing oracle omega".into()))?;
                    (
                        oracle_hoif_correction(
                            functional,
                            &fit,
                            &draw.data,
                            dict,
                            m,
                            cfg.convention,
                            omega,
                        )?,
                        cond,
                    )
                }
            };
            Ok((psi_1, corrections, cond_used))
        })();
        match result {
            Ok((psi_1, corrections, cond_used)) => {
                rows.push(ResultRow {
                    n,
                    k,
                    m,
                    estimator: est,
                    order: 1,
                    replication: rep,
                    value: psi_1,
                    cond_number: cond_used,
                    status: "ok".into(),
                });
                for (&order, &v) in &corrections {
                    rows.push(ResultRow {
                        n,
                        k,
                        m,
                        estimator: est,
                        order,
                        replication: rep,
                        value: v,
                        cond_number: cond_used,
                        status: "ok".into(),
                    });
                }
                per_estimator.push((est, Some((psi_1, corrections, cond_used))));
            }
            Err(e) => {
                rows.push(ResultRow {
                    n,
                    k,
                    m,
                    estimator: est,
                    order: 0,
                    replication: rep,
                    value: f64::NAN,
                    cond_number: cond,
                    status: format!("failed:{}", e.kind()),
                });
                per_estimator.push((est, None));
            }
        }
    }
    RepOutcome { rows, per_estimator }
}

/// Runs the full grid. Failures (for instance a singular Gram on one
/// replication) are recorded as failure rows and never abort the grid.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let functional = cfg.dgp.functional();
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut oracle_values = BTreeMap::new();
    for &k in &cfg.grid_k {
        let dict = cfg.dictionary_for_k(k)?;
        // oracle quantities per k (discrete only)
        let oracle_omega: Option<DMatrix<f64>> = match &cfg.dgp {
            Dgp::Discrete(d) => {
                let fit = match &cfg.nuisance {
                    NuisanceSource::AtomValues { a_hat, b_hat } => {
                        AtomNuisance { a_hat: a_hat.clone(), b_hat: b_hat.clone() }
                    }
                    _ => AtomNuisance::truth(d),
                };
                let ex = exact_functionals(d, &fit, &dict)?;
                oracle_values.insert(
                    k,
                    OracleAttachment {
                        psi: ex.psi,
                        bias_psi1: ex.bias_psi1,
                        bias_k: ex.bias_k,
                        cs_bias: ex.cs_bias,
                        eff_bound: ex.eff_bound,
                    },
                );
                Some(ex.omega)
            }
            Dgp::Continuous(_) => None,
        };
        for &n in &cfg.grid_n {
            for &m in &cfg.grid_m {
                let outcomes: Vec<RepOutcome> = (0..cfg.replications)
                    .into_par_iter()
                    .map(|rep| {
                        run_one_replication(cfg, n, k, m, &dict, oracle_omega.as_ref(), rep)
                    })
                    .collect();
                // deterministic aggregation in replication order
                for &est in &cfg.estimators {
                    let mut psi_m_values = Vec::new();
                    let mut psi_1_values = Vec::new();
                    let mut corr_sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
                    let mut conds = Vec::new();
                    let mut failures = 0usize;
                    for outcome in &outcomes {
                        let slot = outcome
                            .per_estimator
                            .iter()
                            .find(|(e, _)| *e == est)
                            .map(|(_, v)| v);
                        match slot {
                            Some(Some((psi_1, corrections, cond))) => {
                                let mut total = *psi_1;
                                for (&order, &c) in corrections {
                                    total += c;
                                    let e = corr_sums.entry(order).or_insert((0.0, 0));
                                    e.0 += c;
                                    e.1 += 1;
                                }
                                psi_m_values.push(total);
                                psi_1_values.push(*psi_1);
                                conds.push(*cond);
                            }
                            _ => failures += 1,
                        }
                    }
                    let successes = psi_m_values.len();
                    let mean = if successes > 0 {
                        psi_m_values.iter().sum::<f64>() / successes as f64
                    } else {
                        f64::NAN
                    };
                    let sd = if successes > 1 {
                        (psi_m_values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                            / (successes as f64 - 1.0))
                            .sqrt()
                    } else {
                        f64::NAN
                    };
                    conds.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                    let median_cond =
                        if conds.is_empty() { f64::NAN } else { conds[conds.len() / 2] };
                    summaries.push(CellSummary {
                        n,
                        k,
                        m,
                        estimator: est,
                        successes,
                        failures,
                        mc_mean_psi_m: mean,
                        mc_sd_psi_m: sd,
                        mc_se_psi_m: if successes > 1 {
                            sd / (successes as f64).sqrt()
                        } else {
                            f64::NAN
                        },
                        mc_mean_corrections: corr_sums
                            .into_iter()
                            .map(|(o, (s, c))| (o, s / c.max(1) as f64))
                            .collect(),
                        mc_mean_psi_1: if successes > 0 {
                            psi_1_values.iter().sum::<f64>() / successes as f64
                        } else {
                            f64::NAN
                        },
                        median_cond_number: median_cond,
                    });
                }
                for outcome in outcomes {
                    rows.extend(outcome.rows);
                }
            }
        }
    }
    let _ = functional;
    Ok(ExperimentResult { rows, summaries, oracle_values })
}

/// Writes the long-format `results.csv`.
pub fn write_results_csv<W: std::io::Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "n",
        "k",
        "m",
        "estimator",
        "order",
        "replication",
        "value",
        "cond_number",
        "status",
    ])?;
    for r in rows {
        let est = match r.estimator {
            EstimatorKind::Shoif => "shoif",
            EstimatorKind::Ehoif => "ehoif",
            EstimatorKind::OracleOmega => "oracle",
        };
        w.write_record([
            r.n.to_string(),
            r.k.to_string(),
            r.m.to_string(),
            est.to_string(),
            r.order.to_string(),
            r.replication.to_string(),
            format!("{:.16e}", r.value),
            format!("{:.16e}", r.cond_number),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
