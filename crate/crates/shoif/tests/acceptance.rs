//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the
//! per-criterion lines and the recorded (non-asserted) diagnostics.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::time::Instant;

use shoif::dictionary::{build_dictionary, BasisMatrix, DictionaryKind, DictionarySpec};
use shoif::estimators::{
    first_order_estimate, pathwise_alternative_identity_check, shoif_correction, Convention,
    Functional, NuisanceValues, ObservationSet,
};
use shoif::inference::{bias_test, bootstrap_se, if_based_se, normal_quantile, BiasTestConfig};
use shoif::kernels::StableKernel;
use shoif::oracle::{exact_functionals, two_atom_fixture, Atom, AtomNuisance, DiscreteDgp};
use shoif::sim::{
    run_experiment, ContinuousDgp, Dgp, EstimatorKind, ExperimentConfig, KMapping,
    NuisanceSource, OutcomeFn, PerturbDirection, PerturbationSpec, ResultRow,
};
use shoif::ustats::{
    brute_force_ustat, cancellation_coefficient, cancellation_vanishes, partition_moebius_ustat,
    soif_closed_form, u_to_v_coefficients, KernelSource, SandwichKernelSpec,
};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!("criterion {criterion}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Random sandwich-statistic instance with a nonsingular weighted basis.
fn random_instance(
    rng: &mut ChaCha8Rng,
    n: usize,
    k: usize,
    binary: bool,
) -> (BasisMatrix<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
    loop {
        let z = DMatrix::from_fn(n, k, |_, j| {
            if j == 0 {
                rng.gen_range(0.5..1.5)
            } else {
                rng.gen_range(-1.0..1.0)
            }
        });
        let s = if binary {
            DVector::from_fn(n, |_, _| if rng.gen_bool(0.7) { 1.0 } else { 0.0 })
        } else {
            DVector::from_element(n, 1.0)
        };
        let basis = BasisMatrix { values: z };
        if StableKernel::with_default_tolerance(&basis, &s).is_ok() {
            let ea = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let eb = if binary {
                DVector::from_fn(n, |i, _| s[i] * rng.gen_range(-1.0..1.0))
            } else {
                DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
            };
            return (basis, s, ea, eb);
        }
    }
}

/// 1. The partition-Möbius engine matches the brute-force oracle on 200
///    seeded random instances to 1e-10 relative error in under a minute.
#[test]
fn criterion_01_engine_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0001);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let n = rng.gen_range(4..=9);
        let m = 2 + trial % 3;
        let k = rng.gen_range(1..=3.min(n - 1));
        if m > n {
            continue;
        }
        let binary = trial % 2 == 0;
        let (basis, s, ea, eb) = random_instance(&mut rng, n, k, binary);
        let kernel = StableKernel::with_default_tolerance(&basis, &s).unwrap();
        let spec = SandwichKernelSpec {
            eps_a: &ea,
            eps_b: &eb,
            order: m,
            source: KernelSource::Stable(&kernel),
        };
        let bf = brute_force_ustat(&spec).unwrap();
        let eng = partition_moebius_ustat(&spec).unwrap();
        worst = worst.max(rel_err(bf, eng));
    }
    let elapsed = start.elapsed();
    report(
        "01 engine-equivalence",
        worst <= 1e-10 && elapsed.as_secs() < 60,
        &format!("max rel err {worst:.2e} over 200 instances in {elapsed:.2?}"),
    );
}

/// 2. The order-2 statistic equals the closed matrix form to 1e-12 on 100
///    random instances.
#[test]
fn criterion_02_closed_form_soif() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0002);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let n = rng.gen_range(12..=40);
        let k = rng.gen_range(1..=5);
        let binary = trial % 2 == 0;
        let (basis, s, ea, eb) = random_instance(&mut rng, n, k, binary);
        let kernel = StableKernel::with_default_tolerance(&basis, &s).unwrap();
        let spec = SandwichKernelSpec {
            eps_a: &ea,
            eps_b: &eb,
            order: 2,
            source: KernelSource::Stable(&kernel),
        };
        let eng = partition_moebius_ustat(&spec).unwrap();
        let cf = soif_closed_form(&basis, &s, &ea, &eb).unwrap();
        worst = worst.max(rel_err(eng, cf));
    }
    report(
        "02 closed-form-soif",
        worst <= 1e-12,
        &format!("max rel discrepancy {worst:.2e} over 100 instances"),
    );
}

fn random_transform(k: usize, cond: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g1 = DMatrix::from_fn(k, k, |_, _| rng.gen_range(-1.0..1.0));
    let g2 = DMatrix::from_fn(k, k, |_, _| rng.gen_range(-1.0..1.0));
    let q1 = g1.qr().q();
    let q2 = g2.qr().q();
    let d = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            cond.powf(-(i as f64) / ((k - 1).max(1) as f64))
        } else {
            0.0
        }
    });
    q1 * d * q2
}

/// 3. Reparameterizing the dictionary by an invertible matrix with condition
///    number up to 1e8 changes no correction of order <= 4 by more than 1e-6
///    relative. The explicit-inverse debug path is recorded, not asserted.
#[test]
fn criterion_03_stability_as_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0003);
    let mut worst: f64 = 0.0;
    let mut debug_path_worst: f64 = 0.0;
    for trial in 0..12 {
        let cond = 10f64.powf(2.0 + 6.0 * (trial as f64 / 11.0)); // 1e2 .. 1e8
        let n = 30;
        let k = 4;
        let (basis, s, ea, eb) = random_instance(&mut rng, n, k, trial % 2 == 0);
        let t = random_transform(k, cond, &mut rng);
        let transformed = BasisMatrix { values: &basis.values * t.transpose() };
        let k0 = StableKernel::with_default_tolerance(&basis, &s).unwrap();
        let k1 = match StableKernel::with_default_tolerance(&transformed, &s) {
            Ok(k) => k,
            Err(_) => continue, // below the rank floor at extreme conditioning
        };
        for order in 2..=4 {
            let v0 = partition_moebius_ustat(&SandwichKernelSpec {
                eps_a: &ea,
                eps_b: &eb,
                order,
                source: KernelSource::Stable(&k0),
            })
            .unwrap();
            let v1 = partition_moebius_ustat(&SandwichKernelSpec {
                eps_a: &ea,
                eps_b: &eb,
                order,
                source: KernelSource::Stable(&k1),
            })
            .unwrap();
            worst = worst.max(rel_err(v0, v1));
        }
        // explicit-inverse debug path on the transformed basis
        if let Ok(omega) = k1.explicit_omega_debug() {
            if let Ok(ek) = shoif::ustats::ExplicitKernel::new(&omega, &transformed, &s) {
                let v_dbg = partition_moebius_ustat(&SandwichKernelSpec {
                    eps_a: &ea,
                    eps_b: &eb,
                    order: 2,
                    source: KernelSource::Explicit(&ek),
                })
                .unwrap();
                let v_stable = partition_moebius_ustat(&SandwichKernelSpec {
                    eps_a: &ea,
                    eps_b: &eb,
                    order: 2,
                    source: KernelSource::Stable(&k1),
                })
                .unwrap();
                debug_path_worst = debug_path_worst.max(rel_err(v_dbg, v_stable));
            }
        }
    }
    println!(
        "criterion 03 note: explicit-inverse debug path worst rel discrepancy {debug_path_worst:.2e} (recorded, not asserted)"
    );
    report(
        "03 stability-as-invariance",
        worst <= 1e-6,
        &format!("max rel change {worst:.2e} across transforms up to condition 1e8"),
    );
}

fn per_rep(rows: &[ResultRow], estimator: EstimatorKind, order: usize) -> BTreeMap<usize, f64> {
    rows.iter()
        .filter(|r| r.estimator == estimator && r.order == order && r.status == "ok")
        .map(|r| (r.replication, r.value))
        .collect()
}

/// Bounded smooth feature family with geometric column scaling: the scale
/// decay (as in a multiresolution basis) drives the Gram condition number to
/// the 1e6..1e10 range at k = 190 without crossing the rank floor, which no
/// partition dictionary can do at n = 200 (with 190 cells some are empty
/// almost surely, and degree-189 local polynomials collapse numerically).
fn scaled_wave_basis(x: &DMatrix<f64>, k: usize) -> BasisMatrix<f64> {
    let n = x.nrows();
    let values = DMatrix::from_fn(n, k, |i, c| {
        let xi = x[(i, 0)];
        let omega = 0.5 + 1.5 * c as f64;
        let phase = 0.7 * c as f64;
        let tau = 10f64.powf(-3.2 * c as f64 / 189.0);
        tau * (omega * xi + phase).cos()
    });
    BasisMatrix { values }
}

/// 4. Stability sweep: covariance functional at n = 200 with k up to 190.
///    Order-2 estimates stay bounded by ten k=50 interquartile ranges while
///    the recorded Gram condition numbers at k = 190 exceed 1e6 in at least
///    90% of replications.
#[test]
fn criterion_04_stability_sweep() {
    let start = Instant::now();
    let dgp = Dgp::Continuous(ContinuousDgp {
        d: 1,
        functional: Functional::ExpectedConditionalCovariance,
        prop_w: vec![0.8],
        prop_intercept: 0.0,
        clip: (0.1, 0.9),
        outcome: OutcomeFn::SineRamp,
        noise_sd: 0.5,
        treatment_noise_sd: 0.5,
        s_a: 2.0,
        s_b: 2.0,
    });
    let n = 200usize;
    let reps = 200usize;
    let ks = [50usize, 100, 150, 190];
    // frozen nuisance functions: smooth distortions of the truth
    let a_fn = |x: f64, truth: f64| truth + 0.3 * (2.0 * x).cos();
    let b_fn = |x: f64, truth: f64| truth + 0.3 * (3.0 * x).sin();
    let mut estimates: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut conds: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let inner = match &dgp {
        Dgp::Continuous(c) => c.clone(),
        _ => unreachable!(),
    };
    for rep in 0..reps {
        let draw = shoif::sim::sample(&dgp, n, 0xACCE_0004 + rep as u64).unwrap();
        let fit = NuisanceValues {
            a_hat: DVector::from_fn(n, |i, _| {
                let x = draw.data.x[(i, 0)];
                a_fn(x, inner.propensity(&[x]))
            }),
            b_hat: DVector::from_fn(n, |i, _| {
                let x = draw.data.x[(i, 0)];
                b_fn(x, inner.outcome_mean(&[x]))
            }),
        };
        for &k in &ks {
            let basis = scaled_wave_basis(&draw.data.x, k);
            let s = DVector::from_element(n, 1.0);
            let kernel = match StableKernel::with_default_tolerance(&basis, &s) {
                Ok(kr) => kr,
                Err(_) => continue,
            };
            conds.entry(k).or_default().push(kernel.sigma_condition_number());
            let eps_a = Functional::ExpectedConditionalCovariance.residual_a(&fit, &draw.data);
            let eps_b = Functional::ExpectedConditionalCovariance.residual_b(&fit, &draw.data);
            let if2 = partition_moebius_ustat(&SandwichKernelSpec {
                eps_a: &eps_a,
                eps_b: &eps_b,
                order: 2,
                source: KernelSource::Stable(&kernel),
            })
            .unwrap();
            let psi_1 = first_order_estimate(
                Functional::ExpectedConditionalCovariance,
                &fit,
                &draw.data,
            )
            .unwrap();
            estimates.entry(k).or_default().push(psi_1 + if2);
        }
    }
    let mut sorted50 = estimates[&50].clone();
    sorted50.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |v: &[f64], p: f64| v[((v.len() - 1) as f64 * p) as usize];
    let iqr = q(&sorted50, 0.75) - q(&sorted50, 0.25);
    let mut max_abs: f64 = 0.0;
    let mut all_complete = true;
    for &k in &ks {
        let values = &estimates[&k];
        let m = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        max_abs = max_abs.max(m);
        all_complete &= values.len() == reps;
        let cond_med = {
            let mut c = conds[&k].clone();
            c.sort_by(|a, b| a.partial_cmp(b).unwrap());
            c[c.len() / 2]
        };
        println!(
            "criterion 04 note: k={k} successes={} max|psi_2|={m:.4} median cond(Sigma)={cond_med:.2e}",
            values.len()
        );
    }
    let frac_ill = conds[&190].iter().filter(|c| **c > 1e6).count() as f64
        / conds[&190].len().max(1) as f64;
    let elapsed = start.elapsed();
    report(
        "04 stability-sweep",
        max_abs <= 10.0 * iqr && frac_ill >= 0.9 && all_complete && elapsed.as_secs() < 600,
        &format!(
            "max|psi_2| = {max_abs:.4} vs 10*IQR(k=50) = {:.4}; cond>1e6 at k=190 in {:.0}% of reps; {elapsed:.2?}",
            10.0 * iqr,
            100.0 * frac_ill
        ),
    );
}

/// 5. Exact combinatorial identities: the Stirling falling-factorial
///    expansion over the full grid and the cancellation coefficient sweep
///    with nonzero boundary witnesses, all in exact arithmetic.
#[test]
fn criterion_05_combinatorial_identities() {
    let start = Instant::now();
    let mut ok = true;
    for m in 2..=10usize {
        let coeffs = u_to_v_coefficients(m).unwrap();
        for n in m..=50usize {
            let mut falling: i128 = 1;
            for t in 0..m {
                falling *= (n - t) as i128;
            }
            let mut sum: i128 = 0;
            for &(j, c) in &coeffs {
                let mut p: i128 = 1;
                for _ in 0..j {
                    p *= n as i128;
                }
                sum += c * p;
            }
            ok &= sum == falling;
        }
    }
    let mut witnesses = 0;
    for m in 2..=8usize {
        let mut found = false;
        for c in 1..m {
            for c_dag in 0..=c {
                if c + c_dag < m - 1 {
                    ok &= num::Zero::is_zero(&cancellation_coefficient(m, c, c_dag));
                    ok &= cancellation_vanishes(m, c, c_dag);
                } else if c + c_dag == m - 1
                    && !num::Zero::is_zero(&cancellation_coefficient(m, c, c_dag))
                {
                    found = true;
                }
            }
        }
        ok &= found;
        witnesses += found as usize;
    }
    let elapsed = start.elapsed();
    report(
        "05 combinatorial-identities",
        ok && elapsed.as_secs() < 5,
        &format!("all exact checks hold; {witnesses}/7 boundary witnesses; {elapsed:.2?}"),
    );
}

/// 6. Oracle unbiasedness: on the two-atom fixture with exact projected bias
///    1/4, the Monte Carlo mean of the order-2 oracle correction lies within
///    four MC standard errors of -1/4.
#[test]
fn criterion_06_oracle_unbiasedness() {
    let start = Instant::now();
    let (dgp, fit) = two_atom_fixture();
    let dict = build_dictionary(DictionaryKind::IndicatorPartition, 1, 2, 0, 1.0).unwrap();
    let exact = exact_functionals(&dgp, &fit, &dict).unwrap();
    assert!((exact.bias_k - 0.25).abs() < 1e-14, "fixture bias_k must be exactly 1/4");
    let cfg = ExperimentConfig {
        dgp: Dgp::Discrete(dgp),
        dictionary: DictionarySpec {
            kind: DictionaryKind::IndicatorPartition,
            d: 1,
            cells_per_axis: 2,
            degree: 0,
            b: 1.0,
        },
        k_mapping: KMapping::Cells,
        grid_n: vec![500],
        grid_k: vec![2],
        grid_m: vec![2],
        replications: 2000,
        base_seed: 0xACCE_0006,
        estimators: vec![EstimatorKind::OracleOmega],
        nuisance: NuisanceSource::AtomValues { a_hat: fit.a_hat, b_hat: fit.b_hat },
        convention: Convention::Canonical,
    };
    let result = run_experiment(&cfg).unwrap();
    let values: Vec<f64> =
        per_rep(&result.rows, EstimatorKind::OracleOmega, 2).values().copied().collect();
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt();
    let se = sd / r.sqrt();
    let elapsed = start.elapsed();
    report(
        "06 oracle-unbiasedness",
        (mean - (-0.25)).abs() <= 4.0 * se && elapsed.as_secs() < 120,
        &format!("MC mean {mean:.5} vs -0.25 (4*se = {:.5}); {elapsed:.2?}", 4.0 * se),
    );
}

/// 64-atom fixture with deliberately biased smooth nuisances for the
/// kernel-bias scaling check.
fn k64_fixture() -> (DiscreteDgp, AtomNuisance) {
    let n_atoms = 64usize;
    let atoms: Vec<Atom> = (0..n_atoms)
        .map(|j| {
            let x = -1.0 + (2.0 * j as f64 + 1.0) / n_atoms as f64;
            Atom {
                x: vec![x],
                prob: 1.0 / n_atoms as f64,
                propensity: 0.3 + 0.2 * (1.0 + (std::f64::consts::PI * x).sin()),
                outcome_mean: (std::f64::consts::PI * x).sin(),
                outcome_sd: 0.3,
            }
        })
        .collect();
    let dgp = DiscreteDgp { atoms, overlap_c: 0.1 };
    let a_hat: Vec<f64> = dgp.inverse_propensities().iter().map(|a| 1.4 * a).collect();
    let b_hat: Vec<f64> = dgp.outcome_means().iter().map(|b| b - 0.6).collect();
    (dgp, AtomNuisance { a_hat, b_hat })
}

/// 7. Kernel-estimation-bias scaling: on a 64-atom process, the gap between
///    the feasible and the oracle order-2 corrections scales at least
///    linearly in k/n (log-log slope >= 0.8 over k in {8, 16, 32, 64}).
#[test]
fn criterion_07_kernel_bias_scaling() {
    let start = Instant::now();
    let (dgp, fit) = k64_fixture();
    let n = 2000usize;
    let ks = vec![8usize, 16, 32, 64];
    let cfg = ExperimentConfig {
        dgp: Dgp::Discrete(dgp),
        dictionary: DictionarySpec {
            kind: DictionaryKind::IndicatorPartition,
            d: 1,
            cells_per_axis: 64,
            degree: 0,
            b: 1.0,
        },
        k_mapping: KMapping::Cells,
        grid_n: vec![n],
        grid_k: ks.clone(),
        grid_m: vec![2],
        replications: 5000,
        base_seed: 0xACCE_0007,
        estimators: vec![EstimatorKind::Shoif, EstimatorKind::OracleOmega],
        nuisance: NuisanceSource::AtomValues { a_hat: fit.a_hat, b_hat: fit.b_hat },
        convention: Convention::Canonical,
    };
    let result = run_experiment(&cfg).unwrap();
    let mut log_x = Vec::new();
    let mut log_y = Vec::new();
    for &k in &ks {
        let rows_k: Vec<ResultRow> =
            result.rows.iter().filter(|r| r.k == k).cloned().collect();
        let feasible = per_rep(&rows_k, EstimatorKind::Shoif, 2);
        let oracle = per_rep(&rows_k, EstimatorKind::OracleOmega, 2);
        // paired differences per replication
        let diffs: Vec<f64> = feasible
            .iter()
            .filter_map(|(rep, v)| oracle.get(rep).map(|o| v - o))
            .collect();
        let r = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / r;
        let sd = (diffs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt();
        let se = sd / r.sqrt();
        println!(
            "criterion 07 note: k={k} |kern-bias| = {:.3e} +/- {:.3e} (paired, {} reps)",
            mean.abs(),
            se,
            diffs.len()
        );
        log_x.push((k as f64 / n as f64).ln());
        log_y.push(mean.abs().ln());
    }
    // least-squares slope over the four points
    let mx = log_x.iter().sum::<f64>() / log_x.len() as f64;
    let my = log_y.iter().sum::<f64>() / log_y.len() as f64;
    let sxy: f64 = log_x.iter().zip(&log_y).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = log_x.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let elapsed = start.elapsed();
    report(
        "07 kernel-bias-scaling",
        slope >= 0.8 && elapsed.as_secs() < 1800,
        &format!("log-log slope {slope:.3} (threshold 0.8); {elapsed:.2?}"),
    );
}

/// 8. The alternative characterization of the correction sum holds to 1e-9
///    relative on 50 random datasets for m in {2, 3, 4}.
#[test]
fn criterion_08_pathwise_alternative() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0008);
    let dict = build_dictionary::<f64>(
        DictionaryKind::PiecewisePolynomialPartition,
        1,
        1,
        1,
        1.0,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 50 {
        let n = 8;
        let data = ObservationSet {
            x: DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0)),
            a: DVector::from_fn(n, |_, _| if rng.gen_bool(0.75) { 1.0 } else { 0.0 }),
            y: DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
        };
        let fit = NuisanceValues {
            a_hat: DVector::from_fn(n, |_, _| rng.gen_range(1.0..3.0)),
            b_hat: DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
        };
        let basis = shoif::dictionary::evaluate_basis(&dict, &data.x).unwrap();
        if StableKernel::with_default_tolerance(&basis, &data.a).is_err() {
            continue;
        }
        for m in 2..=4 {
            let check = pathwise_alternative_identity_check(
                Functional::TreatedMean,
                &fit,
                &data,
                &dict,
                m,
            )
            .unwrap();
            worst = worst.max(check.rel_discrepancy);
        }
        done += 1;
    }
    report(
        "08 pathwise-alternative",
        worst <= 1e-9,
        &format!("max rel discrepancy {worst:.2e} over 50 datasets, m in 2..=4"),
    );
}

/// 250-atom fixture with deliberately biased nuisances for the order sweep.
fn k250_fixture() -> (DiscreteDgp, AtomNuisance) {
    let n_atoms = 250usize;
    let atoms: Vec<Atom> = (0..n_atoms)
        .map(|j| {
            let x = -1.0 + (2.0 * j as f64 + 1.0) / n_atoms as f64;
            Atom {
                x: vec![x],
                prob: 1.0 / n_atoms as f64,
                propensity: 0.35 + 0.15 * (1.0 + (2.0 * std::f64::consts::PI * x).sin()),
                outcome_mean: (std::f64::consts::PI * x).sin(),
                outcome_sd: 0.15,
            }
        })
        .collect();
    let dgp = DiscreteDgp { atoms, overlap_c: 0.1 };
    let a_hat: Vec<f64> = dgp.inverse_propensities().iter().map(|a| 1.35 * a).collect();
    let b_hat: Vec<f64> = dgp.outcome_means().iter().map(|b| b - 0.35).collect();
    (dgp, AtomNuisance { a_hat, b_hat })
}

/// 9. Bias reduction with order: with deliberately biased nuisances at
///    k = n/4, the absolute Monte Carlo bias of the corrected estimate is
///    nonincreasing over orders 2, 3, 4 up to one MC standard error of slack
///    per step.
#[test]
fn criterion_09_bias_reduction_with_order() {
    let start = Instant::now();
    let (dgp, fit) = k250_fixture();
    let psi = dgp.psi();
    let cfg = ExperimentConfig {
        dgp: Dgp::Discrete(dgp),
        dictionary: DictionarySpec {
            kind: DictionaryKind::IndicatorPartition,
            d: 1,
            cells_per_axis: 250,
            degree: 0,
            b: 1.0,
        },
        k_mapping: KMapping::Cells,
        grid_n: vec![1000],
        grid_k: vec![250],
        grid_m: vec![4],
        replications: 2000,
        base_seed: 0xACCE_0009,
        estimators: vec![EstimatorKind::Shoif],
        nuisance: NuisanceSource::AtomValues { a_hat: fit.a_hat, b_hat: fit.b_hat },
        convention: Convention::Canonical,
    };
    let result = run_experiment(&cfg).unwrap();
    let psi1 = per_rep(&result.rows, EstimatorKind::Shoif, 1);
    let mut bias_by_order = Vec::new();
    let mut se_by_order = Vec::new();
    for m in 2..=4usize {
        // psi_m per replication = psi_1 + corrections up to m
        let mut totals: BTreeMap<usize, f64> = psi1.clone();
        for order in 2..=m {
            let corr = per_rep(&result.rows, EstimatorKind::Shoif, order);
            for (rep, v) in corr {
                if let Some(t) = totals.get_mut(&rep) {
                    *t += v;
                }
            }
        }
        let values: Vec<f64> = totals.values().copied().collect();
        let r = values.len() as f64;
        let mean = values.iter().sum::<f64>() / r;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt();
        let se = sd / r.sqrt();
        println!(
            "criterion 09 note: m={m} |MC bias| = {:.4e} (se {:.1e}, {} reps)",
            (mean - psi).abs(),
            se,
            values.len()
        );
        bias_by_order.push((mean - psi).abs());
        se_by_order.push(se);
    }
    let step_ok = |lo: usize, hi: usize| {
        bias_by_order[hi] <= bias_by_order[lo] + se_by_order[lo].max(se_by_order[hi])
    };
    let elapsed = start.elapsed();
    report(
        "09 bias-reduction-with-order",
        step_ok(0, 1) && step_ok(1, 2),
        &format!(
            "|bias| m=2 {:.2e}, m=3 {:.2e}, m=4 {:.2e}; {elapsed:.2?}",
            bias_by_order[0], bias_by_order[1], bias_by_order[2]
        ),
    );
}

/// 50-atom fixture with moderately biased nuisances for the coverage check.
fn k50_fixture() -> (DiscreteDgp, AtomNuisance) {
    let n_atoms = 50usize;
    let atoms: Vec<Atom> = (0..n_atoms)
        .map(|j| {
            let x = -1.0 + (2.0 * j as f64 + 1.0) / n_atoms as f64;
            Atom {
                x: vec![x],
                prob: 1.0 / n_atoms as f64,
                propensity: 0.4 + 0.2 * (1.0 + (std::f64::consts::PI * x).cos()) / 2.0,
                outcome_mean: 0.5 * (std::f64::consts::PI * x).sin() + 0.3 * x,
                outcome_sd: 0.5,
            }
        })
        .collect();
    let dgp = DiscreteDgp { atoms, overlap_c: 0.1 };
    // errors aligned so the first-order bias is about one first-order se
    let a_hat: Vec<f64> = dgp.inverse_propensities().iter().map(|a| 1.25 * a).collect();
    let b_hat: Vec<f64> = dgp.outcome_means().iter().map(|b| b - 0.14).collect();
    (dgp, AtomNuisance { a_hat, b_hat })
}

/// 10. Coverage: the 95% Wald interval centered at the order-3 estimate with
///     the first-order influence-function standard error covers the truth
///     with empirical frequency in [0.91, 0.98].
#[test]
fn criterion_10_coverage() {
    let start = Instant::now();
    let (dgp, fit) = k50_fixture();
    let psi = dgp.psi();
    let dict = build_dictionary(DictionaryKind::IndicatorPartition, 1, 50, 0, 1.0).unwrap();
    let n = 1000usize;
    let reps = 500usize;
    let dgp_enum = Dgp::Discrete(dgp);
    let hits: usize = (0..reps)
        .map(|rep| {
            let draw = shoif::sim::sample(&dgp_enum, n, 0xACCE_0010 + rep as u64).unwrap();
            let idx = draw.atom_idx.as_ref().unwrap();
            let values = fit.at_rows(idx);
            let psi_1 =
                first_order_estimate(Functional::TreatedMean, &values, &draw.data).unwrap();
            let corr = shoif_correction(
                Functional::TreatedMean,
                &values,
                &draw.data,
                &dict,
                3,
                Convention::Canonical,
            )
            .unwrap();
            let psi_3: f64 = psi_1 + corr.values().sum::<f64>();
            let se = if_based_se(
                &Functional::TreatedMean.first_order_contributions(&values, &draw.data),
            );
            let z = normal_quantile::<f64>(0.975);
            ((psi_3 - psi).abs() <= z * se) as usize
        })
        .sum();
    let coverage = hits as f64 / reps as f64;
    let elapsed = start.elapsed();
    report(
        "10 coverage",
        (0.91..=0.98).contains(&coverage) && elapsed.as_secs() < 900,
        &format!("empirical coverage {coverage:.3} over {reps} reps; {elapsed:.2?}"),
    );
}

/// Two-atom fixture with tightly aligned errors scaled so the exact
/// cs-bias / se ratio equals the requested value.
fn calibrated_fit(dgp: &DiscreteDgp, target_ratio: f64, n: usize) -> (AtomNuisance, f64) {
    let dict = build_dictionary(DictionaryKind::IndicatorPartition, 1, 2, 0, 1.0).unwrap();
    let mut c: f64 = 0.5;
    for _ in 0..60 {
        let fit = AtomNuisance {
            a_hat: vec![2.0 + c, 1.0],
            b_hat: vec![1.0 + c, 0.0],
        };
        let exact = exact_functionals(dgp, &fit, &dict).unwrap();
        // exact variance of the first-order contribution under the fit
        let mut mean = 0.0;
        let mut second = 0.0;
        for (i, atom) in dgp.atoms.iter().enumerate() {
            let (p, pi) = (atom.prob, atom.propensity);
            let (ah, bh) = (fit.a_hat[i], fit.b_hat[i]);
            // A = 1: contribution ah (Y - bh) + bh with Y ~ (mean, sd)
            let c1_mean = ah * (atom.outcome_mean - bh) + bh;
            let c1_var = (ah * atom.outcome_sd).powi(2);
            // A = 0: contribution bh
            mean += p * (pi * c1_mean + (1.0 - pi) * bh);
            second += p * (pi * (c1_var + c1_mean * c1_mean) + (1.0 - pi) * bh * bh);
        }
        let var = second - mean * mean;
        let se = (var / n as f64).sqrt();
        let ratio = exact.cs_bias / se;
        if (ratio - target_ratio).abs() < 1e-12 {
            return (fit, exact.cs_bias / se);
        }
        // cs scales as c^2 while se moves slowly: adjust multiplicatively
        c *= (target_ratio / ratio).sqrt();
    }
    let fit = AtomNuisance { a_hat: vec![2.0 + c, 1.0], b_hat: vec![1.0 + c, 0.0] };
    let dict2 = build_dictionary(DictionaryKind::IndicatorPartition, 1, 2, 0, 1.0).unwrap();
    let exact = exact_functionals(dgp, &fit, &dict2).unwrap();
    (fit, exact.cs_bias)
}

/// 11. Bias-test level and power: at the calibrated null boundary the
///     rejection rate stays within the binomial bound of alpha; at triple the
///     boundary the test rejects at least half the time.
#[test]
fn criterion_11_bias_test_level_and_power() {
    let start = Instant::now();
    let dgp = DiscreteDgp {
        atoms: vec![
            Atom { x: vec![-0.5], prob: 0.5, propensity: 0.5, outcome_mean: 1.0, outcome_sd: 0.3 },
            Atom { x: vec![0.5], prob: 0.5, propensity: 1.0, outcome_mean: 0.0, outcome_sd: 0.3 },
        ],
        overlap_c: 0.1,
    };
    let dict = build_dictionary(DictionaryKind::IndicatorPartition, 1, 2, 0, 1.0).unwrap();
    let n = 200usize;
    let reps = 1000usize;
    let alpha = 0.05;
    let b = 150usize;
    // alternative first: its cs/se ratio fixes delta at a third of it
    let (fit_alt, ratio_alt) = calibrated_fit(&dgp, 0.9, n);
    let delta = ratio_alt / 3.0;
    let (fit_null, ratio_null) = calibrated_fit(&dgp, delta, n);
    println!(
        "criterion 11 note: delta = {delta:.4}, null ratio {ratio_null:.4}, alternative ratio {ratio_alt:.4}"
    );
    let dgp_enum = Dgp::Discrete(dgp);
    let run_case = |fit: &AtomNuisance, seed_base: u64| -> f64 {
        let rejections: usize = (0..reps)
            .map(|rep| {
                let draw = shoif::sim::sample(&dgp_enum, n, seed_base + rep as u64).unwrap();
                let idx = draw.atom_idx.as_ref().unwrap();
                let values = fit.at_rows(idx);
                let corr_stat = |sel: &[usize]| {
                    let d = ObservationSet {
                        x: DMatrix::from_fn(sel.len(), 1, |i, j| draw.data.x[(sel[i], j)]),
                        a: DVector::from_fn(sel.len(), |i, _| draw.data.a[sel[i]]),
                        y: DVector::from_fn(sel.len(), |i, _| draw.data.y[sel[i]]),
                    };
                    let f = NuisanceValues {
                        a_hat: DVector::from_fn(sel.len(), |i, _| values.a_hat[sel[i]]),
                        b_hat: DVector::from_fn(sel.len(), |i, _| values.b_hat[sel[i]]),
                    };
                    let corr = shoif_correction(
                        Functional::TreatedMean,
                        &f,
                        &d,
                        &dict,
                        3,
                        Convention::Canonical,
                    )?;
                    Ok(corr.values().sum::<f64>())
                };
                let psi_stat = |sel: &[usize]| {
                    let d = ObservationSet {
                        x: DMatrix::from_fn(sel.len(), 1, |i, j| draw.data.x[(sel[i], j)]),
                        a: DVector::from_fn(sel.len(), |i, _| draw.data.a[sel[i]]),
                        y: DVector::from_fn(sel.len(), |i, _| draw.data.y[sel[i]]),
                    };
                    let f = NuisanceValues {
                        a_hat: DVector::from_fn(sel.len(), |i, _| values.a_hat[sel[i]]),
                        b_hat: DVector::from_fn(sel.len(), |i, _| values.b_hat[sel[i]]),
                    };
                    first_order_estimate(Functional::TreatedMean, &f, &d)
                };
                let corr = shoif_correction(
                    Functional::TreatedMean,
                    &values,
                    &draw.data,
                    &dict,
                    3,
                    Convention::Canonical,
                )
                .map(|c| c.values().sum::<f64>());
                let corr = match corr {
                    Ok(c) => c,
                    Err(_) => return 0usize,
                };
                let se_corr = match bootstrap_se(corr_stat, n, b, seed_base + 7919 * rep as u64)
                {
                    Ok(s) => s.se,
                    Err(_) => return 0usize,
                };
                let se_psi =
                    match bootstrap_se(psi_stat, n, b, seed_base + 104729 * rep as u64) {
                        Ok(s) => s.se,
                        Err(_) => return 0usize,
                    };
                let cfg = BiasTestConfig {
                    alpha,
                    delta,
                    order: 3,
                    bootstrap_b: b,
                    seed: seed_base,
                    two_sided_magnitude: false,
                };
                bias_test(corr, se_corr, se_psi, &cfg)
                    .map(|o| o.reject as usize)
                    .unwrap_or(0)
            })
            .sum();
        rejections as f64 / reps as f64
    };
    let level = run_case(&fit_null, 0xACCE_0011);
    let power = run_case(&fit_alt, 0xBCCE_0011);
    let bound = alpha + 3.0 * (alpha * (1.0 - alpha) / reps as f64).sqrt();
    let elapsed = start.elapsed();
    report(
        "11 bias-test-level-and-power",
        level <= bound && power >= 0.5,
        &format!(
            "null rejection {level:.3} (bound {bound:.3}); alternative rejection {power:.3}; {elapsed:.2?}"
        ),
    );
}
