//! Factorization of a finitely supported filter into short filters.
//!
//! A filter `u` on `{0, ..., S}` is the coefficient list of its symbol
//! `p(z) = sum u_k z^k`, and convolution of filters is multiplication of
//! symbols. Splitting `p` into real factors of degree at most `s` therefore
//! splits `u` into filters of length `s`. Roots come from the eigenvalues of
//! the balanced companion matrix, are polished by Newton steps on `p`, and
//! are grouped into real linear and quadratic pieces that are packed
//! greedily.

use std::cmp::Ordering;

use nalgebra::{DMatrix, Schur};
use num_complex::Complex64;

use crate::conv::Filter;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Imaginary residue allowed when a conjugate pair is multiplied out.
const CONJUGATE_RESIDUE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationResult<T> {
    factors: Vec<Filter<T>>,
    support_bound: usize,
    filter_len: usize,
    reconstruction_error: T,
}

impl<T: Scalar> FactorizationResult<T> {
    /// Factors in application order: `factors()[0]` is applied first.
    pub fn factors(&self) -> &[Filter<T>] {
        &self.factors
    }

    pub fn into_factors(self) -> Vec<Filter<T>> {
        self.factors
    }

    /// Number of factors.
    pub fn depth(&self) -> usize {
        self.factors.len()
    }

    /// Effective support bound `S` of the factorized filter.
    pub fn support_bound(&self) -> usize {
        self.support_bound
    }

    /// The length parameter `s` every factor respects.
    pub fn filter_len(&self) -> usize {
        self.filter_len
    }

    /// Relative max-norm error of the re-convolved product.
    pub fn reconstruction_error(&self) -> T {
        self.reconstruction_error
    }

    /// Whether the factor count satisfies `depth < S/(s-1) + 1`.
    pub fn within_depth_bound(&self) -> bool {
        depth_within_bound(self.depth(), self.support_bound, self.filter_len)
    }
}

/// `depth < S/(s-1) + 1`, evaluated in integers as `(depth-1)(s-1) < S`,
/// with the single-factor case always admissible.
pub fn depth_within_bound(depth: usize, support: usize, s: usize) -> bool {
    depth <= 1 || (depth - 1) * (s - 1) < support
}

/// The full convolution product of `factors`.
pub fn reconstruct<T: Scalar>(factors: &[Filter<T>]) -> Result<Filter<T>> {
    let (first, rest) = factors
        .split_first()
        .ok_or_else(|| Error::invalid("cannot reconstruct from an empty factor list"))?;
    Ok(rest.iter().fold(first.clone(), |acc, f| f.convolve(&acc)))
}

/// Relative max-norm distance `max|a - b| / max|b|`, comparing on the union
/// of both supports.
pub fn relative_max_error<T: Scalar>(a: &Filter<T>, b: &Filter<T>) -> T {
    let n = a.bound().max(b.bound()) as isize;
    let scale = b.max_norm().max(T::min_positive_value());
    (0..=n).fold(T::zero(), |m, j| m.max((a.at(j) - b.at(j)).abs())) / scale
}

/// Splits `u` into filters supported on `{0, ..., s}` whose convolution
/// reproduces `u` within [`Scalar::factor_tolerance`].
pub fn factorize_filter<T: Scalar>(u: &Filter<T>, s: usize) -> Result<FactorizationResult<T>> {
    if s < 2 {
        return Err(Error::invalid(format!("filter length s must be >= 2, got {s}")));
    }
    let support = u
        .effective_bound()
        .ok_or_else(|| Error::invalid("cannot factorize the zero filter"))?;
    let target = u.trimmed();
    if support <= s {
        return Ok(FactorizationResult {
            factors: vec![target],
            support_bound: support,
            filter_len: s,
            reconstruction_error: T::zero(),
        });
    }

    let shift = target.leading_zeros();
    let coeffs: Vec<f64> = target.coeffs()[shift..]
        .iter()
        .map(|c| c.to_f64_lossy())
        .collect();
    let leading = *coeffs.last().expect("trimmed filter ends in a nonzero");

    let mut groups: Vec<RootGroup> = (0..shift).map(|_| RootGroup::Linear(0.0)).collect();
    groups.extend(root_groups(&coeffs)?);
    groups.sort_by(RootGroup::order);
    let groups = leja_order(groups);

    let mut packed: Vec<Vec<f64>> = Vec::new();
    let mut current = vec![1.0];
    for g in &groups {
        if current.len() - 1 + g.degree() > s {
            packed.push(std::mem::replace(&mut current, vec![1.0]));
        }
        current = poly_mul(&current, &g.monic());
    }
    packed.push(current);
    packed[0].iter_mut().for_each(|c| *c *= leading);

    let factors = packed
        .into_iter()
        .map(|c| Filter::new(c.into_iter().map(T::lit).collect()))
        .collect::<Result<Vec<_>>>()?;
    let err = relative_max_error(&reconstruct(&factors)?, &target);
    if !(err <= T::factor_tolerance()) {
        return Err(Error::Numerical(format!(
            "factorization of a degree-{support} filter into length-{s} pieces reconstructs with \
             relative error {:e} (threshold {:e}, {} factors)",
            err.to_f64_lossy(),
            T::factor_tolerance().to_f64_lossy(),
            factors.len()
        )));
    }
    let result = FactorizationResult {
        factors,
        support_bound: support,
        filter_len: s,
        reconstruction_error: err,
    };
    if !result.within_depth_bound() {
        return Err(Error::Invariant {
            layer: result.depth(),
            what: format!("factor count exceeds S/(s-1)+1 for S={support}, s={s}"),
            discrepancy: result.depth() as f64,
        });
    }
    Ok(result)
}

/// Appends delta factors until there are exactly `target` factors.
pub fn pad_with_deltas<T: Scalar>(
    result: FactorizationResult<T>,
    target: usize,
) -> Result<FactorizationResult<T>> {
    if target < result.depth() {
        return Err(Error::invalid(format!(
            "cannot pad {} factors down to {target}",
            result.depth()
        )));
    }
    let mut result = result;
    result.factors.resize(target, Filter::delta(0));
    Ok(result)
}

/// Real irreducible piece of the symbol: `z - r` or `(z - r)(z - conj r)`.
#[derive(Debug, Clone, Copy)]
enum RootGroup {
    Linear(f64),
    Quadratic(Complex64),
}

impl RootGroup {
    fn degree(&self) -> usize {
        match self {
            RootGroup::Linear(_) => 1,
            RootGroup::Quadratic(_) => 2,
        }
    }

    fn monic(&self) -> Vec<f64> {
        match *self {
            RootGroup::Linear(r) => vec![-r, 1.0],
            RootGroup::Quadratic(r) => vec![r.norm_sqr(), -2.0 * r.re, 1.0],
        }
    }

    fn key(&self) -> (f64, f64) {
        match *self {
            RootGroup::Linear(r) => (r.abs(), if r < 0.0 { std::f64::consts::PI } else { 0.0 }),
            RootGroup::Quadratic(r) => (r.norm(), r.arg().abs()),
        }
    }

    /// Magnitude, then angle.
    fn order(a: &Self, b: &Self) -> Ordering {
        let (ma, aa) = a.key();
        let (mb, ab) = b.key();
        ma.total_cmp(&mb).then(aa.total_cmp(&ab))
    }
}

/// Leja ordering: start from the largest root, then repeatedly take the group
/// whose root is farthest, in product of distances, from all roots taken so
/// far. Partial products of Leja-ordered roots stay well scaled, which keeps
/// cancellation between consecutive factors small.
fn leja_order(groups: Vec<RootGroup>) -> Vec<RootGroup> {
    let rep = |g: &RootGroup| match *g {
        RootGroup::Linear(r) => Complex64::new(r, 0.0),
        RootGroup::Quadratic(r) => r,
    };
    let mut score = vec![0.0f64; groups.len()];
    let mut taken = vec![false; groups.len()];
    let mut out = Vec::with_capacity(groups.len());
    let first = (0..groups.len()).fold(0, |b, i| if rep(&groups[i]).norm() > rep(&groups[b]).norm() { i } else { b });
    let mut next = Some(first);
    while let Some(i) = next {
        taken[i] = true;
        let g = groups[i];
        out.push(g);
        let roots: Vec<Complex64> = match g {
            RootGroup::Linear(r) => vec![Complex64::new(r, 0.0)],
            RootGroup::Quadratic(r) => vec![r, r.conj()],
        };
        for (j, sc) in score.iter_mut().enumerate() {
            if !taken[j] {
                *sc += roots.iter().map(|c| (rep(&groups[j]) - c).norm().ln()).sum::<f64>();
            }
        }
        next = (0..groups.len())
            .filter(|&j| !taken[j])
            .fold(None, |b: Option<usize>, j| match b {
                Some(b) if score[b] >= score[j] => Some(b),
                _ => Some(j),
            });
    }
    out
}

/// Roots of `coeffs` (ascending powers, nonzero constant and leading terms)
/// grouped into real factors.
fn root_groups(coeffs: &[f64]) -> Result<Vec<RootGroup>> {
    let degree = coeffs.len() - 1;
    if degree == 0 {
        return Ok(Vec::new());
    }
    let roots = companion_roots(coeffs)?;
    let scale = roots.iter().fold(1.0f64, |m, r| m.max(r.norm()));
    let is_real = |r: &Complex64| r.im.abs() <= 1e-14 * scale;

    let mut groups = Vec::with_capacity(degree);
    let mut upper = Vec::new();
    let mut lower = Vec::new();
    for r in roots {
        if is_real(&r) {
            groups.push(RootGroup::Linear(polish_real(coeffs, r.re)));
        } else if r.im > 0.0 {
            upper.push(r);
        } else {
            lower.push(r);
        }
    }
    if upper.len() != lower.len() {
        return Err(Error::Numerical(format!(
            "unbalanced complex roots: {} in the upper half-plane, {} in the lower",
            upper.len(),
            lower.len()
        )));
    }
    for r in upper {
        let (idx, partner) = lower
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| (**a - r.conj()).norm().total_cmp(&(**b - r.conj()).norm()))
            .map(|(i, p)| (i, *p))
            .expect("lower has as many entries as upper");
        lower.swap_remove(idx);
        // (z - r)(z - partner) must be real up to rounding
        let product = r * partner;
        let sum = r + partner;
        let residue = product.im.abs().max(sum.im.abs()) / product.norm().max(sum.norm()).max(1.0);
        if residue > CONJUGATE_RESIDUE {
            return Err(Error::Numerical(format!(
                "conjugate pairing left imaginary residue {residue:e} for root {r}"
            )));
        }
        groups.push(RootGroup::Quadratic(polish_complex(coeffs, r)));
    }
    Ok(groups)
}

/// Eigenvalues of the companion matrix of `coeffs`, after diagonal balancing.
fn companion_roots(coeffs: &[f64]) -> Result<Vec<Complex64>> {
    let n = coeffs.len() - 1;
    let lead = coeffs[n];
    let mut c = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        c[(i, i - 1)] = 1.0;
    }
    for i in 0..n {
        c[(i, n - 1)] = -coeffs[i] / lead;
    }
    balance(&mut c);
    let schur = Schur::try_new(c, f64::EPSILON, 1000 * n.max(10)).ok_or_else(|| {
        Error::Numerical(format!("companion eigenvalue iteration did not converge (degree {n})"))
    })?;
    let roots: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    if roots.iter().any(|r| !r.re.is_finite() || !r.im.is_finite()) {
        return Err(Error::Numerical("companion eigenvalues are not finite".into()));
    }
    Ok(roots)
}

/// Parlett–Reinsch diagonal similarity scaling with powers of two.
fn balance(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    let radix = 2.0f64;
    let mut converged = false;
    while !converged {
        converged = true;
        for i in 0..n {
            let mut col = 0.0;
            let mut row = 0.0;
            for j in 0..n {
                if j != i {
                    col += a[(j, i)].abs();
                    row += a[(i, j)].abs();
                }
            }
            if col == 0.0 || row == 0.0 {
                continue;
            }
            let total = col + row;
            let mut f = 1.0;
            let mut g = row / radix;
            while col < g {
                f *= radix;
                col *= radix * radix;
            }
            g = row * radix;
            while col > g {
                f /= radix;
                col /= radix * radix;
            }
            if (col + row) / f < 0.95 * total {
                converged = false;
                for j in 0..n {
                    a[(i, j)] /= f;
                    a[(j, i)] *= f;
                }
            }
        }
    }
}

fn horner(coeffs: &[f64], z: Complex64) -> (Complex64, Complex64) {
    let mut p = Complex64::new(0.0, 0.0);
    let mut dp = Complex64::new(0.0, 0.0);
    for &c in coeffs.iter().rev() {
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp)
}

/// A few Newton steps on the full symbol, kept only while `|p|` shrinks.
fn polish_complex(coeffs: &[f64], mut z: Complex64) -> Complex64 {
    let (mut p, mut dp) = horner(coeffs, z);
    for _ in 0..3 {
        if dp.norm() == 0.0 {
            break;
        }
        let cand = z - p / dp;
        let (pc, dpc) = horner(coeffs, cand);
        if !(pc.norm() < p.norm()) {
            break;
        }
        z = cand;
        p = pc;
        dp = dpc;
    }
    z
}

fn polish_real(coeffs: &[f64], r: f64) -> f64 {
    polish_complex(coeffs, Complex64::new(r, 0.0)).re
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}
