//! Exact combinatorial identities: unsigned Stirling numbers of the first
//! kind, the U-to-V statistic conversion coefficients they induce, and the
//! rational cancellation coefficient whose vanishing drives the bias
//! telescoping of the correction hierarchy.

use num::{BigInt, BigRational, One, Zero};

use crate::error::{Error, Result};

/// Unsigned Stirling number of the first kind `s(m, j)`, the number of
/// permutations of `m` elements with `j` cycles, via the recurrence
/// `s(m, j) = s(m-1, j-1) + (m-1) s(m-1, j)`.
///
/// Exact for `1 <= j <= m <= 20` (the row sums are `m! <= 20!`, inside
/// `u128`).
pub fn stirling_first_unsigned(m: usize, j: usize) -> Result<u128> {
    if m == 0 || j == 0 || j > m || m > 20 {
        return Err(Error::ArgumentError(format!(
            "stirling_first_unsigned requires 1 <= j <= m <= 20, got m={m} j={j}"
        )));
    }
    // row-by-row table; row[r] holds s(row_index, r)
    let mut row = vec![0u128; m + 1];
    row[1] = 1; // s(1, 1)
    for mm in 2..=m {
        let mut next = vec![0u128; m + 1];
        for jj in 1..=mm {
            next[jj] = row[jj - 1] + (mm as u128 - 1) * row[jj];
        }
        row = next;
    }
    Ok(row[j])
}

/// Coefficients expanding an `m`-th order distinct-index (U-statistic) sum
/// into unrestricted (V-statistic) sums: the ordered-distinct tuple count
/// satisfies `n!/(n-m)! = sum_j (-1)^{m-j} s(m,j) n^j`.
///
/// Returns `(order j, signed coefficient)` pairs for `j = m, m-1, .., 1`.
pub fn u_to_v_coefficients(m: usize) -> Result<Vec<(usize, i128)>> {
    if !(2..=10).contains(&m) {
        return Err(Error::ArgumentError(format!(
            "u_to_v_coefficients requires 2 <= m <= 10, got {m}"
        )));
    }
    let mut out = Vec::with_capacity(m);
    for j in (1..=m).rev() {
        let s = stirling_first_unsigned(m, j)? as i128;
        let c = if (m - j) % 2 == 0 { s } else { -s };
        out.push((j, c));
    }
    Ok(out)
}

fn big_binomial(n: usize, k: usize) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let mut num = BigInt::one();
    let mut den = BigInt::one();
    for t in 0..k {
        num *= BigInt::from(n - t);
        den *= BigInt::from(t + 1);
    }
    num / den
}

fn big_factorial(n: usize) -> BigInt {
    let mut f = BigInt::one();
    for t in 2..=n {
        f *= BigInt::from(t);
    }
    f
}

/// The exact cancellation coefficient
///
/// ```text
/// ((-1)^{c_dag} / (c_dag! c!)) * sum_{j=0}^{m-1} (-1)^j C(m-1, j) * j *
///     prod_{l = -c_dag+1}^{c-1} (j + l)
/// ```
///
/// The inner summand is a polynomial in `j` of degree `c + c_dag + 1` with a
/// vanishing constant term, so repeated differencing of the binomial
/// expansion forces the whole sum to zero whenever `m - 1 - (c + c_dag) > 0`.
///
/// Requires `m >= 2`, `c >= 1`, `0 <= c_dag <= c`.
pub fn cancellation_coefficient(m: usize, c: usize, c_dag: usize) -> BigRational {
    assert!(m >= 2, "cancellation_coefficient requires m >= 2");
    assert!(c >= 1, "cancellation_coefficient requires c >= 1");
    assert!(c_dag <= c, "cancellation_coefficient requires c_dag <= c");
    let mut total = BigInt::zero();
    for j in 0..m {
        let mut term = big_binomial(m - 1, j) * BigInt::from(j);
        // prod over l in [-c_dag + 1, c - 1] of (j + l)
        let lo: i64 = 1 - c_dag as i64;
        let hi: i64 = c as i64 - 1;
        let mut l = lo;
        while l <= hi {
            term *= BigInt::from(j as i64 + l);
            l += 1;
        }
        if j % 2 == 1 {
            term = -term;
        }
        total += term;
    }
    if c_dag % 2 == 1 {
        total = -total;
    }
    BigRational::new(total, big_factorial(c_dag) * big_factorial(c))
}

/// True when the cancellation condition `m - 1 - (c + c_dag) > 0` forces the
/// coefficient to vanish.
pub fn cancellation_vanishes(m: usize, c: usize, c_dag: usize) -> bool {
    m >= 1 + c + c_dag + 1
}

/// Convenience: is the coefficient exactly zero?
pub fn cancellation_is_zero(m: usize, c: usize, c_dag: usize) -> bool {
    cancellation_coefficient(m, c, c_dag).is_zero()
}
