//! The `shoif` command line: dataset and nuisance ingestion, config loading,
//! estimation, simulation, identity suites and the bias test.
//!
//! Exit codes: 0 success, 2 validation error, 3 singular Gram matrix. Every
//! error path prints a machine-readable JSON object on standard error. The
//! environment variable `SHOIF_SEED` overrides any `--seed` flag.

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::json;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dictionary::{evaluate_basis, Dictionary, DictionarySpec};
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_report, first_order_estimate, shoif_correction, Convention, Functional,
    NuisanceValues, ObservationSet,
};
use crate::inference::{bootstrap_se, bias_test, if_based_se, BiasTestConfig};
use crate::kernels::StableKernel;
use crate::sim::{run_experiment, write_results_csv, ExperimentConfig};
use crate::ustats::{
    cancellation_coefficient, cancellation_vanishes, stirling_first_unsigned,
    u_to_v_coefficients, partition_table,
};

/// Numerically stable higher-order influence function estimators.
#[derive(Parser, Debug)]
#[command(name = "shoif", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Estimate a doubly robust functional with higher-order corrections.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo experiment grid from a JSON config.
    Simulate(SimulateArgs),
    /// Run the exact combinatorial identity suites.
    Identities(IdentitiesArgs),
    /// Test whether the first-order bias is dominated by its standard error.
    TestBias(TestBiasArgs),
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    /// Dataset CSV with header x1..xd,a,y.
    #[arg(long)]
    pub data: PathBuf,
    /// Nuisance CSV aligned row-for-row: a_hat,b_hat.
    #[arg(long)]
    pub nuisance: PathBuf,
    #[arg(long, value_parser = parse_functional)]
    pub functional: Functional,
    /// Dictionary JSON: {"kind", "d", "cells_per_axis", "degree", "B"}.
    #[arg(long)]
    pub dict: String,
    /// Highest correction order (2..=8).
    #[arg(long)]
    pub order: usize,
    #[arg(long, default_value = "canonical", value_parser = parse_convention)]
    pub convention: Convention,
    /// Report output path.
    #[arg(long)]
    pub out: PathBuf,
    /// When set, bootstrap standard errors with this many resamples.
    #[arg(long = "bootstrap-B")]
    pub bootstrap_b: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Debug: export the weighted kernel matrix as CSV.
    #[arg(long)]
    pub dump_kernel: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Experiment config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads (0 = rayon default).
    #[arg(long, default_value_t = 0)]
    pub parallel: usize,
    /// Output directory for results.csv and summary.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct IdentitiesArgs {
    /// Highest order to sweep (2..=10).
    #[arg(long = "max-m")]
    pub max_m: usize,
    /// Report output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TestBiasArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub nuisance: PathBuf,
    #[arg(long, value_parser = parse_functional, default_value = "treated-mean")]
    pub functional: Functional,
    /// Dictionary JSON.
    #[arg(long)]
    pub dict: String,
    #[arg(long)]
    pub alpha: f64,
    #[arg(long)]
    pub delta: f64,
    #[arg(long)]
    pub order: usize,
    #[arg(long = "bootstrap-B")]
    pub bootstrap_b: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use |correction| in the test statistic.
    #[arg(long, default_value_t = false)]
    pub two_sided_magnitude: bool,
    /// Verdict output path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_functional(s: &str) -> std::result::Result<Functional, String> {
    match s {
        "treated-mean" => Ok(Functional::TreatedMean),
        "ecc" => Ok(Functional::ExpectedConditionalCovariance),
        other => Err(format!("unknown functional '{other}' (expected treated-mean or ecc)")),
    }
}

fn parse_convention(s: &str) -> std::result::Result<Convention, String> {
    match s {
        "canonical" => Ok(Convention::Canonical),
        "s31" => Ok(Convention::Section31Prefactors),
        other => Err(format!("unknown convention '{other}' (expected canonical or s31)")),
    }
}

/// `SHOIF_SEED` overrides any seed flag when set.
pub fn effective_seed(flag: u64) -> u64 {
    match std::env::var("SHOIF_SEED") {
        Ok(v) => v.parse().unwrap_or(flag),
        Err(_) => flag,
    }
}

/// Reads the dataset CSV (header `x1..xd,a,y`).
pub fn read_dataset_csv(path: &Path) -> Result<ObservationSet<f64>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let cols = headers.len();
    if cols < 3 {
        return Err(Error::ShapeError(format!(
            "dataset needs at least x1, a, y columns; found {cols}"
        )));
    }
    let d = cols - 2;
    for (j, name) in headers.iter().take(d).enumerate() {
        let expected = format!("x{}", j + 1);
        if name != expected {
            return Err(Error::ShapeError(format!(
                "dataset column {j} is '{name}', expected '{expected}'"
            )));
        }
    }
    if &headers[d] != "a" || &headers[d + 1] != "y" {
        return Err(Error::ShapeError("dataset must end with columns 'a','y'".into()));
    }
    let mut xs: Vec<f64> = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != cols {
            return Err(Error::ShapeError(format!(
                "dataset row {row} has {} fields, expected {cols}",
                record.len()
            )));
        }
        let parse = |field: &str, name: &str| -> Result<f64> {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::ShapeError(format!("dataset row {row}, column {name}: cannot parse '{field}'"))
            })?;
            if !v.is_finite() {
                return Err(Error::ShapeError(format!(
                    "dataset row {row}, column {name}: non-finite value"
                )));
            }
            Ok(v)
        };
        for j in 0..d {
            xs.push(parse(&record[j], &format!("x{}", j + 1))?);
        }
        a.push(parse(&record[d], "a")?);
        y.push(parse(&record[d + 1], "y")?);
    }
    let n = a.len();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let x = DMatrix::from_fn(n, d, |i, j| xs[i * d + j]);
    Ok(ObservationSet { x, a: DVector::from_vec(a), y: DVector::from_vec(y) })
}

/// Reads the nuisance CSV (`a_hat,b_hat`), enforcing row alignment.
pub fn read_nuisance_csv(path: &Path, n: usize) -> Result<NuisanceValues<f64>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "a_hat" || &headers[1] != "b_hat" {
        return Err(Error::ShapeError(
            "nuisance file must have exactly the columns 'a_hat','b_hat'".into(),
        ));
    }
    let mut a_hat = Vec::new();
    let mut b_hat = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |field: &str, name: &str| -> Result<f64> {
            field.trim().parse().map_err(|_| {
                Error::ShapeError(format!(
                    "nuisance row {row}, column {name}: cannot parse '{field}'"
                ))
            })
        };
        a_hat.push(parse(&record[0], "a_hat")?);
        b_hat.push(parse(&record[1], "b_hat")?);
    }
    if a_hat.len() != n {
        return Err(Error::ShapeError(format!(
            "nuisance file has {} rows but the dataset has {n}",
            a_hat.len()
        )));
    }
    Ok(NuisanceValues { a_hat: DVector::from_vec(a_hat), b_hat: DVector::from_vec(b_hat) })
}

/// Writes a dataset with 17-significant-digit decimals so a re-read is
/// bit-identical.
pub fn write_dataset_csv<W: Write>(data: &ObservationSet<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = data.x.ncols();
    let mut header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    header.push("a".into());
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec: Vec<String> = (0..d).map(|j| format!("{:.16e}", data.x[(i, j)])).collect();
        rec.push(format!("{:.16e}", data.a[i]));
        rec.push(format!("{:.16e}", data.y[i]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_dictionary(spec_json: &str) -> Result<Dictionary<f64>> {
    let spec: DictionarySpec = serde_json::from_str(spec_json)?;
    spec.build()
}

/// `shoif estimate`: writes the estimate report as JSON.
pub fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    let data = read_dataset_csv(&args.data)?;
    let fit = read_nuisance_csv(&args.nuisance, data.n())?;
    let dict = parse_dictionary(&args.dict)?;
    let mut report =
        estimate_report(args.functional, &fit, &data, &dict, args.order, args.convention)?;
    report.se_psi1 =
        Some(if_based_se(&args.functional.first_order_contributions(&fit, &data)));
    if let Some(b) = args.bootstrap_b {
        let seed = effective_seed(args.seed);
        let n = data.n();
        let mut se_corr = std::collections::BTreeMap::new();
        for order in 2..=args.order {
            let stat = |idx: &[usize]| -> Result<f64> {
                let (rd, rf) = resample(&data, &fit, idx);
                let corr =
                    shoif_correction(args.functional, &rf, &rd, &dict, order, args.convention)?;
                Ok(corr.values().sum())
            };
            let boot = bootstrap_se(stat, n, b, seed.wrapping_add(order as u64))?;
            se_corr.insert(order, boot.se);
        }
        let psi_stat = |idx: &[usize]| -> Result<f64> {
            let (rd, rf) = resample(&data, &fit, idx);
            first_order_estimate(args.functional, &rf, &rd)
        };
        let boot_psi = bootstrap_se(psi_stat, n, b, seed)?;
        report.se_psi1 = Some(boot_psi.se);
        report.se_corrections = Some(se_corr);
    }
    if let Some(dump) = &args.dump_kernel {
        let basis = evaluate_basis(&dict, &data.x)?;
        let s = args.functional.gram_weights(&data);
        let kernel = StableKernel::with_default_tolerance(&basis, &s)?;
        let m = kernel.kernel_weighted_matrix();
        let mut w = csv::Writer::from_path(dump)?;
        for i in 0..m.nrows() {
            let rec: Vec<String> = (0..m.ncols()).map(|j| format!("{:.16e}", m[(i, j)])).collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(&args.out, json)?;
    Ok(())
}

fn resample(
    data: &ObservationSet<f64>,
    fit: &NuisanceValues<f64>,
    idx: &[usize],
) -> (ObservationSet<f64>, NuisanceValues<f64>) {
    let d = data.x.ncols();
    let rd = ObservationSet {
        x: DMatrix::from_fn(idx.len(), d, |i, j| data.x[(idx[i], j)]),
        a: DVector::from_fn(idx.len(), |i, _| data.a[idx[i]]),
        y: DVector::from_fn(idx.len(), |i, _| data.y[idx[i]]),
    };
    let rf = NuisanceValues {
        a_hat: DVector::from_fn(idx.len(), |i, _| fit.a_hat[idx[i]]),
        b_hat: DVector::from_fn(idx.len(), |i, _| fit.b_hat[idx[i]]),
    };
    (rd, rf)
}

/// `shoif simulate`: runs the experiment grid and writes results.csv and
/// summary.json into the output directory.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let raw = fs::read_to_string(&args.config)?;
    let cfg: ExperimentConfig = serde_json::from_str(&raw).map_err(|e| Error::InvalidConfig {
        pointer: format!("/line/{}", e.line()),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    let result = if args.parallel > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(args.parallel)
            .build()
            .map_err(|e| Error::ArgumentError(e.to_string()))?;
        pool.install(|| run_experiment(&cfg))?
    } else {
        run_experiment(&cfg)?
    };
    fs::create_dir_all(&args.out)?;
    let csv_path = args.out.join("results.csv");
    let file = fs::File::create(&csv_path)?;
    write_results_csv(&result.rows, file)?;
    let summary = json!({
        "summaries": result.summaries,
        "oracle": result.oracle_values,
    });
    fs::write(args.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CancellationCase {
    m: usize,
    c: usize,
    c_dag: usize,
    value: String,
    expected_zero: bool,
    is_zero: bool,
    pass: bool,
}

/// `shoif identities`: exact Stirling / U-to-V / cancellation / Möbius
/// suites; exits nonzero unless every check passes.
pub fn cmd_identities(args: &IdentitiesArgs) -> Result<bool> {
    if !(2..=10).contains(&args.max_m) {
        return Err(Error::ArgumentError(format!(
            "--max-m must lie in 2..=10, got {}",
            args.max_m
        )));
    }
    let mut all_pass = true;

    // falling-factorial identity, exact integers
    let mut stirling_cases = Vec::new();
    for m in 2..=args.max_m {
        let coeffs = u_to_v_coefficients(m)?;
        let mut pass = true;
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
            if sum != falling {
                pass = false;
            }
        }
        // row sums are m!
        let mut fact: u128 = 1;
        for t in 2..=m {
            fact *= t as u128;
        }
        let row: u128 = (1..=m).map(|j| stirling_first_unsigned(m, j).unwrap()).sum();
        if row != fact {
            pass = false;
        }
        all_pass &= pass;
        stirling_cases.push(json!({"m": m, "n_max": 50, "pass": pass}));
    }

    // cancellation sweep up to order 8
    let mut cancel_cases = Vec::new();
    let cancel_max = args.max_m.min(8);
    for m in 2..=cancel_max {
        let mut boundary_nonzero = false;
        for c in 1..m {
            for c_dag in 0..=c {
                if c + c_dag > m - 1 {
                    continue;
                }
                let v = cancellation_coefficient(m, c, c_dag);
                let expected_zero = cancellation_vanishes(m, c, c_dag);
                let is_zero = num::Zero::is_zero(&v);
                let pass = !expected_zero || is_zero;
                if c + c_dag == m - 1 && !is_zero {
                    boundary_nonzero = true;
                }
                all_pass &= pass;
                cancel_cases.push(CancellationCase {
                    m,
                    c,
                    c_dag,
                    value: v.to_string(),
                    expected_zero,
                    is_zero,
                    pass,
                });
            }
        }
        if !boundary_nonzero {
            all_pass = false;
        }
    }

    // Möbius weight sanity for desk-scale orders
    let mut moebius_pass = true;
    for m in 2..=args.max_m.min(6) {
        let table = partition_table(m)?;
        for n in m..=12usize {
            let mut total: i128 = 0;
            for (p, w) in &table.entries {
                let mut pw: i128 = 1;
                for _ in 0..p.num_blocks {
                    pw *= n as i128;
                }
                total += (*w as i128) * pw;
            }
            let mut falling: i128 = 1;
            for t in 0..m {
                falling *= (n - t) as i128;
            }
            if total != falling {
                moebius_pass = false;
            }
        }
    }
    all_pass &= moebius_pass;

    let report = json!({
        "max_m": args.max_m,
        "stirling_falling_factorial": stirling_cases,
        "cancellation": cancel_cases,
        "moebius_weights_pass": moebius_pass,
        "overall_pass": all_pass,
    });
    fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
    Ok(all_pass)
}

/// Verdict emitted by `shoif test-bias`.
#[derive(Debug, Serialize)]
pub struct BiasTestVerdict {
    pub reject: bool,
    pub statistic: f64,
    pub correction: f64,
    pub se_correction: f64,
    pub se_psi1: f64,
    pub alpha: f64,
    pub delta: f64,
    pub order: usize,
    pub bootstrap_rejections: usize,
}

/// `shoif test-bias`: bootstrap the first-order estimate and the correction
/// sum (re-evaluating the inverse Gram per resample), then apply the
/// one-sided test.
pub fn cmd_test_bias(args: &TestBiasArgs) -> Result<BiasTestVerdict> {
    let data = read_dataset_csv(&args.data)?;
    let fit = read_nuisance_csv(&args.nuisance, data.n())?;
    let dict = parse_dictionary(&args.dict)?;
    let seed = effective_seed(args.seed);
    let cfg = BiasTestConfig {
        alpha: args.alpha,
        delta: args.delta,
        order: args.order,
        bootstrap_b: args.bootstrap_b,
        seed,
        two_sided_magnitude: args.two_sided_magnitude,
    };
    cfg.validate()?;
    let corr_map =
        shoif_correction(args.functional, &fit, &data, &dict, args.order, Convention::Canonical)?;
    let correction: f64 = corr_map.values().sum();
    let n = data.n();
    let corr_stat = |idx: &[usize]| -> Result<f64> {
        let (rd, rf) = resample(&data, &fit, idx);
        let corr =
            shoif_correction(args.functional, &rf, &rd, &dict, args.order, Convention::Canonical)?;
        Ok(corr.values().sum())
    };
    let boot_corr = bootstrap_se(corr_stat, n, args.bootstrap_b, seed)?;
    let psi_stat = |idx: &[usize]| -> Result<f64> {
        let (rd, rf) = resample(&data, &fit, idx);
        first_order_estimate(args.functional, &rf, &rd)
    };
    let boot_psi = bootstrap_se(psi_stat, n, args.bootstrap_b, seed.wrapping_add(1))?;
    let outcome = bias_test(correction, boot_corr.se, boot_psi.se, &cfg)?;
    Ok(BiasTestVerdict {
        reject: outcome.reject,
        statistic: outcome.statistic,
        correction,
        se_correction: boot_corr.se,
        se_psi1: boot_psi.se,
        alpha: args.alpha,
        delta: args.delta,
        order: args.order,
        bootstrap_rejections: boot_corr.rejections + boot_psi.rejections,
    })
}

/// Runs a parsed command, returning the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let outcome: Result<i32> = match &cli.command {
        Command::Estimate(args) => cmd_estimate(args).map(|_| 0),
        Command::Simulate(args) => cmd_simulate(args).map(|_| 0),
        Command::Identities(args) => cmd_identities(args).map(|ok| if ok { 0 } else { 1 }),
        Command::TestBias(args) => cmd_test_bias(args).and_then(|verdict| {
            let text = serde_json::to_string_pretty(&verdict)?;
            match &args.out {
                Some(path) => fs::write(path, text)?,
                None => println!("{text}"),
            }
            Ok(0)
        }),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let obj = json!({
                "error": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{obj}");
            e.exit_code()
        }
    }
}
