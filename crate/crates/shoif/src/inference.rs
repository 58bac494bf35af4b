//! Standard errors, Wald intervals and the one-sided bias test.
//!
//! Standard errors come from a seeded nonparametric bootstrap that re-runs
//! the full statistic (including the inverse-Gram factorization) on each
//! resample. Resamples on which the kernel construction fails are rejected
//! and redrawn from the same per-resample stream, and the rejection count is
//! reported; more than 50% rejections aborts.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// Configuration of the bias test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasTestConfig {
    /// Test level in (0, 1).
    pub alpha: f64,
    /// Null threshold; `f64::INFINITY` is the configured never-reject cap.
    pub delta: f64,
    /// Correction order the test statistic is built from.
    pub order: usize,
    /// Number of bootstrap resamples (at least 100).
    pub bootstrap_b: usize,
    pub seed: u64,
    /// Use `|correction|` instead of the signed correction (the one-sided
    /// display is the default).
    #[serde(default)]
    pub two_sided_magnitude: bool,
}

impl BiasTestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::ArgumentError(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.delta < 0.0 {
            return Err(Error::ArgumentError("delta must be nonnegative".into()));
        }
        if self.bootstrap_b < 100 {
            return Err(Error::ArgumentError(format!(
                "bootstrap_b must be at least 100, got {}",
                self.bootstrap_b
            )));
        }
        if !(2..=8).contains(&self.order) {
            return Err(Error::OrderTooHigh(self.order));
        }
        Ok(())
    }
}

/// Standard normal quantile (inverse CDF), Wichura's AS 241 rational
/// approximation; absolute accuracy far below the 1e-8 contract.
pub fn normal_quantile<T: Scalar>(p: T) -> T {
    let pf = p.to_f64().expect("probability convertible to f64");
    assert!(pf > 0.0 && pf < 1.0, "normal_quantile requires p in (0, 1)");
    let q = pf - 0.5;
    let r;
    let value: f64;
    if q.abs() <= 0.425 {
        r = 0.180625 - q * q;
        // already carries the sign of q
        return T::c(
            q
            * (((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_812_8e4) * r
                + 6.726_577_092_700_87e4)
                * r
                + 4.592_195_393_154_987e4)
                * r
                + 1.373_169_376_550_946e4)
                * r
                + 1.971_590_950_306_551_3e3)
                * r
                + 1.331_416_678_917_843_8e2)
                * r
                + 3.387_132_872_796_366_5)
            / (((((((5.226_495_278_852_545_4e3 * r + 2.872_908_573_572_194_3e4) * r
                + 3.930_789_580_009_271e4)
                * r
                + 2.121_379_430_158_659_7e4)
                * r
                + 5.394_196_021_424_751e3)
                * r
                + 6.871_870_074_920_579e2)
                * r
                + 4.231_333_070_160_091e1)
                * r
                + 1.0),
        );
    } else {
        let mut rr = if q < 0.0 { pf } else { 1.0 - pf };
        rr = (-rr.ln()).sqrt();
        if rr <= 5.0 {
            let s = rr - 1.6;
            value = (((((((7.745_450_142_783_414e-4 * s + 2.272_384_498_926_918_4e-2) * s
                + 2.417_807_251_774_506e-1)
                * s
                + 1.270_458_252_452_368_4)
                * s
                + 3.647_848_324_763_204_5)
                * s
                + 5.769_497_221_460_691)
                * s
                + 4.630_337_846_156_546)
                * s
                + 1.423_437_110_749_683_5)
                / (((((((1.050_750_071_644_416_9e-9 * s + 5.475_938_084_995_345e-4) * s
                    + 1.519_866_656_361_645_7e-2)
                    * s
                    + 1.481_039_764_274_800_8e-1)
                    * s
                    + 6.897_673_349_851e-1)
                    * s
                    + 1.676_384_830_183_803_8)
                    * s
                    + 2.053_191_626_637_759)
                    * s
                    + 1.0);
        } else {
            let s = rr - 5.0;
            value = (((((((2.010_334_399_292_288_1e-7 * s + 2.711_555_568_743_487_6e-5) * s
                + 1.242_660_947_388_078_4e-3)
                * s
                + 2.653_218_952_657_612_4e-2)
                * s
                + 2.965_605_718_285_048_7e-1)
                * s
                + 1.784_826_539_917_291_3)
                * s
                + 5.463_784_911_164_114)
                * s
                + 6.657_904_643_501_103)
                / (((((((2.044_263_103_389_939_7e-15 * s + 1.421_511_758_316_446e-7) * s
                    + 1.846_318_317_510_054_8e-5)
                    * s
                    + 7.868_691_311_456_133e-4)
                    * s
                    + 1.487_536_129_085_061_5e-2)
                    * s
                    + 1.369_298_809_227_358)
                    * s
                    + 5.998_322_065_558_88e-1)
                    * s
                    + 1.0);
        }
    }
    let signed = if q < 0.0 { -value } else { value };
    T::c(signed)
}

/// Two-sided Wald interval `psi_hat +/- z_{alpha/2} se`.
pub fn wald_ci<T: Scalar>(psi_hat: T, se: T, alpha: f64) -> Result<(T, T)> {
    if se < T::zero() {
        return Err(Error::ArgumentError("standard error must be nonnegative".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::ArgumentError(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let z = normal_quantile::<T>(T::c(1.0 - alpha / 2.0));
    Ok((psi_hat - z * se, psi_hat + z * se))
}

/// Outcome of a bootstrap standard-error computation.
#[derive(Debug, Clone, Copy)]
pub struct BootstrapSe<T: Scalar = f64> {
    pub se: T,
    /// Number of rejected-and-redrawn resamples.
    pub rejections: usize,
}

/// Seeded nonparametric bootstrap of an arbitrary statistic: `statistic`
/// receives the resampled row indices (size `n`, drawn with replacement) and
/// may fail, in which case the resample is redrawn. Deterministic given
/// `(n, b, seed)`: resample `b` draws from a stream seeded with `seed + b`.
pub fn bootstrap_se<T, F>(statistic: F, n: usize, b: usize, seed: u64) -> Result<BootstrapSe<T>>
where
    T: Scalar,
    F: Fn(&[usize]) -> Result<T>,
{
    if n == 0 {
        return Err(Error::EmptyData);
    }
    if b < 100 {
        return Err(Error::ArgumentError(format!(
            "bootstrap requires at least 100 resamples, got {b}"
        )));
    }
    let mut values = Vec::with_capacity(b);
    let mut rejections = 0usize;
    let max_rejections = b / 2;
    let mut indices = vec![0usize; n];
    for rep in 0..b {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(rep as u64));
        loop {
            for slot in indices.iter_mut() {
                *slot = rng.gen_range(0..n);
            }
            match statistic(&indices) {
                Ok(v) => {
                    values.push(v);
                    break;
                }
                Err(Error::SingularGram { .. }) => {
                    rejections += 1;
                    if rejections > max_rejections {
                        return Err(Error::UnstableResampling {
                            rejected: rejections,
                            attempted: rep + 1 + rejections,
                        });
                    }
                    // redraw from the same stream
                }
                Err(e) => return Err(e),
            }
        }
    }
    let bf = T::from_usize(b).unwrap();
    let mean = values.iter().fold(T::zero(), |acc, v| acc + *v) / bf;
    let mut ss = T::zero();
    for v in &values {
        let d = *v - mean;
        ss += d * d;
    }
    let se = (ss / (bf - T::one())).sqrt();
    Ok(BootstrapSe { se, rejections })
}

/// Decision of the bias test.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BiasTestOutcome {
    pub statistic: f64,
    pub reject: bool,
}

/// One-sided test statistic
/// `correction / se_psi1 - z_{alpha/2} * se_correction / se_psi1`, rejecting
/// when it exceeds `delta`. Pure decision, no side effects.
pub fn bias_test<T: Scalar>(
    correction_value: T,
    se_correction: T,
    se_psi1: T,
    cfg: &BiasTestConfig,
) -> Result<BiasTestOutcome> {
    cfg.validate()?;
    if se_psi1 <= T::zero() {
        return Err(Error::DegenerateScale);
    }
    if se_correction < T::zero() {
        return Err(Error::ArgumentError("se_correction must be nonnegative".into()));
    }
    let z = normal_quantile::<T>(T::c(1.0 - cfg.alpha / 2.0));
    let corr = if cfg.two_sided_magnitude { correction_value.abs() } else { correction_value };
    let statistic = corr / se_psi1 - z * se_correction / se_psi1;
    let stat_f = statistic.to_f64().unwrap_or(f64::NAN);
    Ok(BiasTestOutcome { statistic: stat_f, reject: stat_f > cfg.delta })
}

/// Classical influence-function standard error of a sample mean:
/// `sd(values) / sqrt(n)`.
pub fn if_based_se<T: Scalar>(values: &DVector<T>) -> T {
    let n = values.len();
    if n < 2 {
        return T::zero();
    }
    let nf = T::from_usize(n).unwrap();
    let mean = values.sum() / nf;
    let mut ss = T::zero();
    for v in values.iter() {
        let d = *v - mean;
        ss += d * d;
    }
    (ss / (nf - T::one())).sqrt() / nf.sqrt()
}
