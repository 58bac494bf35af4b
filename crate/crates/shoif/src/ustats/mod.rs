//! Exact evaluation of the distinct-index U-statistics underlying the
//! correction hierarchy.
//!
//! The order-`m` statistic is
//!
//! ```text
//! (-1)^m * (n-m)!/n! * sum over distinct (i1, .., im) of
//!     eps_a[i1] * z(i1)^T Omega prod_{s=3..m} {(Q_{is} - Sigma) Omega} z(i2) * eps_b[i2]
//! ```
//!
//! Two engines compute it: a brute-force sum over ordered tuples (the test
//! oracle, `O(n^m)`) and a Möbius-inversion engine that rewrites the
//! distinct-index sum over coincidence partitions of the index slots. For a
//! partition, middle factors with a free (singleton) index vanish because
//! `sum_i (Q_i - Sigma) = 0`; the surviving terms expand into chains of
//! projection-kernel entries that contract in `O(n^2)` or better. All kernel
//! entries come from an SVD factorization (or a supplied explicit inverse),
//! never from inverting the sample Gram in the stable path.

pub mod combin;
pub mod partitions;

pub use combin::{
    cancellation_coefficient, cancellation_is_zero, cancellation_vanishes,
    stirling_first_unsigned, u_to_v_coefficients,
};
pub use partitions::{bell_number, enumerate_partitions, partition_table, PartitionTable};

use nalgebra::{DMatrix, DVector};
use std::cell::OnceCell;

use crate::dictionary::BasisMatrix;
use crate::error::{Error, Result};
use crate::kernels::StableKernel;
use crate::Scalar;

/// Compensated (Kahan) accumulator; the engines sum in a fixed order so
/// results are bit-reproducible across runs.
#[derive(Clone, Copy)]
pub(crate) struct Kahan<T: Scalar> {
    sum: T,
    c: T,
}

impl<T: Scalar> Kahan<T> {
    pub fn new() -> Self {
        Kahan { sum: T::zero(), c: T::zero() }
    }

    pub fn add(&mut self, v: T) {
        let y = v - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> T {
        self.sum
    }
}

/// Projection kernel built from a supplied k x k inverse-Gram matrix. This is
/// the route used by the empirical-Gram comparator and by oracle corrections;
/// the stable estimators use [`StableKernel`] instead.
#[derive(Debug, Clone)]
pub struct ExplicitKernel<T: Scalar = f64> {
    basis: DMatrix<T>,
    weights: DVector<T>,
    /// `Z L` with `omega = sign * L L^T`.
    factor: DMatrix<T>,
    sign: T,
    kappa_cache: OnceCell<DMatrix<T>>,
}

impl<T: Scalar> ExplicitKernel<T> {
    /// Wraps an explicit symmetric definite `omega`. Fails with
    /// [`Error::ArgumentError`] when `omega` is not symmetric or not
    /// (positive or negative) definite.
    pub fn new(omega: &DMatrix<T>, basis: &BasisMatrix<T>, weights: &DVector<T>) -> Result<Self> {
        let k = basis.k();
        if omega.nrows() != k || omega.ncols() != k {
            return Err(Error::ShapeError(format!(
                "omega is {}x{} but the basis has k = {k}",
                omega.nrows(),
                omega.ncols()
            )));
        }
        if weights.len() != basis.n() {
            return Err(Error::ShapeError("weight vector length mismatch".into()));
        }
        let asym = (omega - omega.transpose()).amax();
        if asym > T::c(1e-8) * omega.amax().max(T::c(1e-300)) {
            return Err(Error::ArgumentError("omega must be symmetric".into()));
        }
        let sym = (omega + omega.transpose()) * T::c(0.5);
        let (sign, chol) = match sym.clone().cholesky() {
            Some(c) => (T::one(), c),
            None => match (-sym).cholesky() {
                Some(c) => (-T::one(), c),
                None => {
                    return Err(Error::ArgumentError(
                        "omega must be positive or negative definite".into(),
                    ))
                }
            },
        };
        let factor = &basis.values * chol.l();
        Ok(ExplicitKernel {
            basis: basis.values.clone(),
            weights: weights.clone(),
            factor,
            sign,
            kappa_cache: OnceCell::new(),
        })
    }

    fn kappa_matrix(&self) -> &DMatrix<T> {
        self.kappa_cache.get_or_init(|| {
            let mut m = &self.factor * self.factor.transpose();
            m *= self.sign;
            m
        })
    }
}

/// Where the sandwich chain takes its kernel entries from.
pub enum KernelSource<'a, T: Scalar = f64> {
    /// SVD-stabilized kernel on the estimation sample.
    Stable(&'a StableKernel<T>),
    /// Explicit inverse-Gram kernel (empirical comparator / oracle).
    Explicit(&'a ExplicitKernel<T>),
}

impl<'a, T: Scalar> KernelSource<'a, T> {
    pub fn n(&self) -> usize {
        match self {
            KernelSource::Stable(k) => k.n(),
            KernelSource::Explicit(k) => k.basis.nrows(),
        }
    }

    pub fn weights(&self) -> &DVector<T> {
        match self {
            KernelSource::Stable(k) => k.weights(),
            KernelSource::Explicit(k) => &k.weights,
        }
    }

    /// Unweighted basis rows (needed by the alternative-characterization
    /// identity, whose constant term contracts raw basis inner products).
    pub fn basis(&self) -> &DMatrix<T> {
        match self {
            KernelSource::Stable(k) => k.basis(),
            KernelSource::Explicit(k) => &k.basis,
        }
    }

    /// `kappa = scale * F F^T`; returns `(F, scale)`.
    fn factored(&self) -> (&DMatrix<T>, T) {
        match self {
            KernelSource::Stable(k) =>

                (k_whitened(k), k_sign(k) * T::from_usize(k.n()).unwrap()),
            KernelSource::Explicit(k) => (&k.factor, k.sign),
        }
    }

    pub fn kappa_entry(&self, i: usize, j: usize) -> T {
        match self {
            KernelSource::Stable(k) => k.kernel_entry(i, j),
            KernelSource::Explicit(k) => {
                let (f, s) = (&k.factor, k.sign);
                let mut acc = T::zero();
                for c in 0..f.ncols() {
                    acc += f[(i, c)] * f[(j, c)];
                }
                s * acc
            }
        }
    }

    pub fn kappa_matvec(&self, v: &DVector<T>) -> DVector<T> {
        match self {
            KernelSource::Stable(k) => k.kernel_matvec(v),
            KernelSource::Explicit(k) => {
                let coeffs = k.factor.transpose() * v;
                let mut out = &k.factor * coeffs;
                out *= k.sign;
                out
            }
        }
    }

    pub fn kappa_diag(&self) -> DVector<T> {
        match self {
            KernelSource::Stable(k) => k.kernel_diag(),
            KernelSource::Explicit(k) => {
                let f = &k.factor;
                DVector::from_fn(f.nrows(), |i, _| {
                    let mut acc = T::zero();
                    for c in 0..f.ncols() {
                        let v = f[(i, c)];
                        acc += v * v;
                    }
                    k.sign * acc
                })
            }
        }
    }

    pub fn kappa_matrix(&self) -> &DMatrix<T> {
        match self {
            KernelSource::Stable(k) => k.kernel_matrix(),
            KernelSource::Explicit(k) => k.kappa_matrix(),
        }
    }
}

// StableKernel keeps its factor private; these accessors live here to keep
// the factored representation an implementation detail of the engines.
fn k_whitened<T: Scalar>(k: &StableKernel<T>) -> &DMatrix<T> {
    k.whitened_factor()
}

fn k_sign<T: Scalar>(k: &StableKernel<T>) -> T {
    k.weight_sign()
}

/// Inputs of one order-`m` sandwich U-statistic: the residual vectors at the
/// two endpoints and the kernel middle implied by the source.
pub struct SandwichKernelSpec<'a, T: Scalar = f64> {
    pub eps_a: &'a DVector<T>,
    pub eps_b: &'a DVector<T>,
    pub order: usize,
    pub source: KernelSource<'a, T>,
}

impl<'a, T: Scalar> SandwichKernelSpec<'a, T> {
    fn validate(&self) -> Result<(usize, usize)> {
        let n = self.source.n();
        if self.eps_a.len() != n || self.eps_b.len() != n {
            return Err(Error::ShapeError(format!(
                "residual vectors must have length n = {n} (got {} and {})",
                self.eps_a.len(),
                self.eps_b.len()
            )));
        }
        if self.order < 2 {
            return Err(Error::ArgumentError("order must be at least 2".into()));
        }
        if self.order > n {
            return Err(Error::ArgumentError(format!(
                "order m = {} exceeds the sample size n = {n}",
                self.order
            )));
        }
        Ok((n, self.order))
    }
}

fn falling_factorial<T: Scalar>(n: usize, m: usize) -> T {
    let mut f = T::one();
    for t in 0..m {
        f *= T::from_usize(n - t).unwrap();
    }
    f
}

fn order_sign<T: Scalar>(m: usize) -> T {
    if m % 2 == 0 {
        T::one()
    } else {
        -T::one()
    }
}

/// Exact `O(n^m)` sum over all ordered tuples of distinct indices, in
/// lexicographic order with compensated accumulation. Guarded at `n <= 14`
/// and `m <= 6`.
pub fn brute_force_ustat<T: Scalar>(spec: &SandwichKernelSpec<'_, T>) -> Result<T> {
    let (n, m) = spec.validate()?;
    if n > 14 || m > 6 {
        return Err(Error::TooLargeForBruteForce { n, m });
    }
    let kappa = spec.source.kappa_matrix();
    let s = spec.source.weights();
    let mut acc = Kahan::new();
    let mut tuple = vec![0usize; m];
    let mut used = vec![false; n];
    // chain state: coefficients over sample indices representing the current
    // row vector as sum_l coef_l * z(l)^T Omega
    fn chain_value<T: Scalar>(
        tuple: &[usize],
        kappa: &DMatrix<T>,
        s: &DVector<T>,
    ) -> T {
        let m = tuple.len();
        let mut coef: Vec<(usize, T)> = vec![(tuple[0], T::one())];
        for &t in &tuple[2..m] {
            // apply (Q_t - Sigma) Omega = Q_t Omega - I from the right
            let mut dot = T::zero();
            for &(l, c) in &coef {
                dot += c * kappa[(l, t)];
            }
            let head = s[t] * dot;
            for e in coef.iter_mut() {
                e.1 = -e.1;
            }
            if let Some(e) = coef.iter_mut().find(|e| e.0 == t) {
                e.1 += head;
            } else {
                coef.push((t, head));
            }
        }
        let mut out = T::zero();
        for &(l, c) in &coef {
            out += c * kappa[(l, tuple[1])];
        }
        out
    }
    // lexicographic enumeration of ordered distinct tuples
    fn recurse<T: Scalar>(
        depth: usize,
        n: usize,
        m: usize,
        tuple: &mut Vec<usize>,
        used: &mut Vec<bool>,
        kappa: &DMatrix<T>,
        s: &DVector<T>,
        eps_a: &DVector<T>,
        eps_b: &DVector<T>,
        acc: &mut Kahan<T>,
    ) {
        if depth == m {
            let c = chain_value(tuple, kappa, s);
            acc.add(eps_a[tuple[0]] * c * eps_b[tuple[1]]);
            return;
        }
        for i in 0..n {
            if used[i] {
                continue;
            }
            used[i] = true;
            tuple[depth] = i;
            recurse(depth + 1, n, m, tuple, used, kappa, s, eps_a, eps_b, acc);
            used[i] = false;
        }
    }
    recurse(0, n, m, &mut tuple, &mut used, kappa, s, spec.eps_a, spec.eps_b, &mut acc);
    Ok(order_sign::<T>(m) * acc.value() / falling_factorial::<T>(n, m))
}

#[derive(Clone, Copy, PartialEq)]
enum NodeW {
    EpsA,
    Mid,
    EpsB,
}

struct PathCtx<'a, T: Scalar> {
    factor: &'a DMatrix<T>,
    scale: T,
    kappa: &'a DMatrix<T>,
    eps_a: &'a DVector<T>,
    eps_b: &'a DVector<T>,
    s: &'a DVector<T>,
    n: usize,
}

impl<'a, T: Scalar> PathCtx<'a, T> {
    fn weight(&self, w: NodeW, i: usize) -> T {
        match w {
            NodeW::EpsA => self.eps_a[i],
            NodeW::Mid => self.s[i],
            NodeW::EpsB => self.eps_b[i],
        }
    }

    fn weight_vec(&self, w: NodeW) -> DVector<T> {
        match w {
            NodeW::EpsA => self.eps_a.clone(),
            NodeW::Mid => self.s.clone(),
            NodeW::EpsB => self.eps_b.clone(),
        }
    }
}

enum SegFactor<T: Scalar> {
    /// Adjacent pinned nodes: a plain kernel lookup.
    Empty,
    /// Free nodes between pinned nodes, contracted in factor space:
    /// `eval(j, j') = scale_pow * <left[j, :], F[j', :]>`.
    Sandwich { left: DMatrix<T>, scale_pow: T },
}

impl<T: Scalar> SegFactor<T> {
    fn eval(&self, ctx: &PathCtx<'_, T>, j: usize, jp: usize) -> T {
        match self {
            SegFactor::Empty => ctx.kappa[(j, jp)],
            SegFactor::Sandwich { left, scale_pow } => {
                let mut acc = T::zero();
                for c in 0..left.ncols() {
                    acc += left[(j, c)] * ctx.factor[(jp, c)];
                }
                *scale_pow * acc
            }
        }
    }
}

/// Contracts one chain `w_0(i_0) kappa(i_0,i_1) w_1(i_1) .. w_L(i_L)` where
/// node indices sharing a block are equal and each block index is summed over
/// the full sample. Blocks occurring once are summed out by chain
/// propagation; blocks occurring more than once ("pinned") are enumerated
/// explicitly (at most four can occur for m <= 8).
fn path_sum<T: Scalar>(path: &[(usize, NodeW)], ctx: &PathCtx<'_, T>) -> Result<T> {
    let len = path.len();
    // occurrence counts per block id
    let mut occurrences: Vec<(usize, usize)> = Vec::new();
    for &(b, _) in path {
        match occurrences.iter_mut().find(|e| e.0 == b) {
            Some(e) => e.1 += 1,
            None => occurrences.push((b, 1)),
        }
    }
    let pinned: Vec<usize> =
        occurrences.iter().filter(|e| e.1 >= 2).map(|e| e.0).collect();

    if pinned.is_empty() {
        // pure chain: v <- w_0; repeat v <- kappa v, v <- D(w) v; end with dot
        let mut v = ctx.weight_vec(path[0].1);
        for t in 1..len {
            v = ctx.kappa * &v;
            if t < len - 1 {
                for i in 0..ctx.n {
                    v[i] *= ctx.weight(path[t].1, i);
                }
            }
        }
        let w_last = ctx.weight_vec(path[len - 1].1);
        return Ok(v.dot(&w_last));
    }

    let rank_of = |b: usize| pinned.iter().position(|&p| p == b);
    let pinned_positions: Vec<usize> =
        (0..len).filter(|&p| rank_of(path[p].0).is_some()).collect();

    // lead vector over the first pinned node's index
    let first = pinned_positions[0];
    let lead: Option<DVector<T>> = if first == 0 {
        None
    } else {
        let mut v = ctx.weight_vec(path[0].1);
        for t in 1..first {
            v = ctx.kappa * &v;
            for i in 0..ctx.n {
                v[i] *= ctx.weight(path[t].1, i);
            }
        }
        Some(ctx.kappa * &v)
    };
    // trail vector over the last pinned node's index
    let last = *pinned_positions.last().unwrap();
    let trail: Option<DVector<T>> = if last == len - 1 {
        None
    } else {
        let mut v = ctx.weight_vec(path[len - 1].1);
        for t in (last + 1..len - 1).rev() {
            v = ctx.kappa * &v;
            for i in 0..ctx.n {
                v[i] *= ctx.weight(path[t].1, i);
            }
        }
        Some(ctx.kappa * &v)
    };

    // mid segments between consecutive pinned positions
    let mut segments: Vec<SegFactor<T>> = Vec::new();
    for w in pinned_positions.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b == a + 1 {
            segments.push(SegFactor::Empty);
        } else {
            let k = ctx.factor.ncols();
            let mut m = DMatrix::<T>::identity(k, k);
            for t in a + 1..b {
                // m <- m * (F^T D(w_t) F)
                let mut scaled = ctx.factor.clone();
                for i in 0..ctx.n {
                    let wv = ctx.weight(path[t].1, i);
                    for c in 0..k {
                        scaled[(i, c)] *= wv;
                    }
                }
                let sandwich = ctx.factor.transpose() * scaled;
                m *= sandwich;
            }
            let mut scale_pow = ctx.scale;
            for _ in a + 1..b {
                scale_pow *= ctx.scale;
            }
            segments.push(SegFactor::Sandwich { left: ctx.factor * m, scale_pow });
        }
    }

    // node weights attach to their block's rank
    let r = pinned.len();
    let mut rank_weight: Vec<DVector<T>> = vec![DVector::from_element(ctx.n, T::one()); r];
    for &(b, w) in path {
        if let Some(rk) = rank_of(b) {
            for i in 0..ctx.n {
                rank_weight[rk][i] *= ctx.weight(w, i);
            }
        }
    }
    if let Some(v) = &lead {
        let rk = rank_of(path[first].0).unwrap();
        for i in 0..ctx.n {
            rank_weight[rk][i] *= v[i];
        }
    }
    if let Some(v) = &trail {
        let rk = rank_of(path[last].0).unwrap();
        for i in 0..ctx.n {
            rank_weight[rk][i] *= v[i];
        }
    }

    // segment endpoints as ranks, in path order
    let seg_ranks: Vec<(usize, usize)> = pinned_positions
        .windows(2)
        .map(|w| (rank_of(path[w[0]].0).unwrap(), rank_of(path[w[1]].0).unwrap()))
        .collect();

    let n = ctx.n;
    let mut acc = Kahan::new();
    let mut assign = vec![0usize; r];
    match r {
        1 => {
            for j in 0..n {
                assign[0] = j;
                let mut p = rank_weight[0][j];
                for (seg, &(ra, rb)) in segments.iter().zip(&seg_ranks) {
                    p *= seg.eval(ctx, assign[ra], assign[rb]);
                }
                acc.add(p);
            }
        }
        2 => {
            for j0 in 0..n {
                assign[0] = j0;
                let w0 = rank_weight[0][j0];
                if w0 == T::zero() {
                    continue;
                }
                for j1 in 0..n {
                    assign[1] = j1;
                    let mut p = w0 * rank_weight[1][j1];
                    if p == T::zero() {
                        continue;
                    }
                    for (seg, &(ra, rb)) in segments.iter().zip(&seg_ranks) {
                        p *= seg.eval(ctx, assign[ra], assign[rb]);
                    }
                    acc.add(p);
                }
            }
        }
        3 | 4 => {
            // only reachable for m >= 6, which the engine restricts to small n
            let mut stack = vec![0usize; r];
            fn rec<T: Scalar>(
                depth: usize,
                r: usize,
                n: usize,
                stack: &mut Vec<usize>,
                rank_weight: &[DVector<T>],
                segments: &[SegFactor<T>],
                seg_ranks: &[(usize, usize)],
                ctx: &PathCtx<'_, T>,
                acc: &mut Kahan<T>,
            ) {
                if depth == r {
                    let mut p = T::one();
                    for (rk, w) in rank_weight.iter().enumerate() {
                        p *= w[stack[rk]];
                    }
                    for (seg, &(ra, rb)) in segments.iter().zip(seg_ranks) {
                        p *= seg.eval(ctx, stack[ra], stack[rb]);
                    }
                    acc.add(p);
                    return;
                }
                for i in 0..n {
                    stack[depth] = i;
                    rec(depth + 1, r, n, stack, rank_weight, segments, seg_ranks, ctx, acc);
                }
            }
            rec(0, r, n, &mut stack, &rank_weight, &segments, &seg_ranks, ctx, &mut acc);
        }
        _ => {
            return Err(Error::ArgumentError(format!(
                "path contraction with {r} pinned blocks is not supported"
            )))
        }
    }
    Ok(acc.value())
}

/// Order-2 statistic without materializing the n x n kernel:
/// `(eps_a^T K eps_b - sum_i eps_a_i K_ii eps_b_i) / (n (n-1))`.
fn order2_fast<T: Scalar>(spec: &SandwichKernelSpec<'_, T>, n: usize) -> T {
    let t = spec.source.kappa_matvec(spec.eps_b);
    let full = spec.eps_a.dot(&t);
    let diag = spec.source.kappa_diag();
    let mut d = Kahan::new();
    for i in 0..n {
        d.add(spec.eps_a[i] * diag[i] * spec.eps_b[i]);
    }
    (full - d.value()) / falling_factorial::<T>(n, 2)
}

/// Möbius-inversion engine: exact on every instance where the brute-force
/// oracle is defined, with cost `O(Bell(m))` partition terms each contracting
/// in at most `O(n^2)` for `m <= 4`. Orders above 8 are refused.
pub fn partition_moebius_ustat<T: Scalar>(spec: &SandwichKernelSpec<'_, T>) -> Result<T> {
    let (n, m) = spec.validate()?;
    if m > 8 {
        return Err(Error::OrderTooHigh(m));
    }
    if m == 2 {
        return Ok(order2_fast(spec, n));
    }
    let kappa = spec.source.kappa_matrix();
    let (factor, scale) = spec.source.factored();
    let ctx = PathCtx {
        factor,
        scale,
        kappa,
        eps_a: spec.eps_a,
        eps_b: spec.eps_b,
        s: spec.source.weights(),
        n,
    };
    let mm = m - 2; // number of middle slots
    let parts = enumerate_partitions(m)?;
    let mut total = Kahan::new();
    for part in &parts {
        // slots: 0 = left endpoint, 1 = right endpoint, 2.. = middles in
        // chain order. A middle-only singleton block forces the whole
        // V-statistic term to vanish.
        let blocks = part.blocks();
        if blocks.iter().any(|b| b.len() == 1 && b[0] >= 2) {
            continue;
        }
        let mu = T::from_i64(part.moebius_weight()).unwrap();
        let mut v_sigma = Kahan::new();
        for pattern in 0u32..(1u32 << mm) {
            let mut path: Vec<(usize, NodeW)> =
                vec![(part.rgs[0] as usize, NodeW::EpsA)];
            for s in 0..mm {
                if pattern & (1 << s) != 0 {
                    path.push((part.rgs[2 + s] as usize, NodeW::Mid));
                }
            }
            path.push((part.rgs[1] as usize, NodeW::EpsB));
            let visited: Vec<bool> = {
                let mut v = vec![false; part.num_blocks];
                for &(b, _) in &path {
                    v[b] = true;
                }
                v
            };
            let vanished = visited.iter().filter(|x| !**x).count();
            let q_branches = pattern.count_ones() as usize;
            let sign = if (mm - q_branches) % 2 == 0 { T::one() } else { -T::one() };
            let mut weight = sign;
            for _ in 0..vanished {
                weight *= T::from_usize(n).unwrap();
            }
            let psum = path_sum(&path, &ctx)?;
            v_sigma.add(weight * psum);
        }
        total.add(mu * v_sigma.value());
    }
    Ok(order_sign::<T>(m) * total.value() / falling_factorial::<T>(n, m))
}

/// The order-2 statistic through its closed matrix form
/// `(n-1)^{-1} eps_a^T [I - Diag] { Z (Z^T Z^S)^{-1} Z^{S T} } eps_b`,
/// computed by an LU solve. This is the independent oracle route for the
/// engines; it coincides with the order-2 sandwich statistic whenever the
/// right residual already carries the weight (binary or unit `S`).
pub fn soif_closed_form<T: Scalar>(
    basis: &BasisMatrix<T>,
    s: &DVector<T>,
    eps_a: &DVector<T>,
    eps_b: &DVector<T>,
) -> Result<T> {
    let n = basis.n();
    let k = basis.k();
    if s.len() != n || eps_a.len() != n || eps_b.len() != n {
        return Err(Error::ShapeError("length mismatch in soif_closed_form".into()));
    }
    let z = &basis.values;
    let mut zs = z.clone();
    for i in 0..n {
        for j in 0..k {
            zs[(i, j)] *= s[i];
        }
    }
    let gram = z.transpose() * &zs; // Z^T Z^S
    let lu = gram.lu();
    let solved = lu
        .solve(&zs.transpose())
        .ok_or(Error::SingularGram { rank: 0, k, smallest: 0.0, tolerance: 0.0 })?;
    let proj = z * solved; // n x n
    let mut acc = Kahan::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc.add(eps_a[i] * proj[(i, j)] * eps_b[j]);
            }
        }
    }
    Ok(acc.value() / T::from_usize(n - 1).unwrap())
}
