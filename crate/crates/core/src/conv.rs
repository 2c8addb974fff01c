//! One-dimensional, one-channel convolution primitives on real vectors.
//!
//! Vectors are plain slices; filters carry an explicit support bound so that
//! the width bookkeeping of zero-padded networks stays visible. Indices in the
//! doc comments are 1-based to match the usual layer notation, the code is
//! 0-based throughout.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Finitely supported filter `w_0, ..., w_S`; entries outside are zero.
///
/// The support bound `S` is the stored length minus one. Trailing zeros are
/// kept unless [`Filter::trimmed`] is called, so a filter declared with bound
/// `s` always widens a padded convolution by exactly `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter<T> {
    coeffs: Vec<T>,
}

impl<T: Scalar> Filter<T> {
    pub fn new(coeffs: Vec<T>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::invalid("filter needs at least one coefficient"));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("filter coefficients must be finite"));
        }
        Ok(Self { coeffs })
    }

    /// The convolution identity `(1, 0, ..., 0)` with the given bound.
    pub fn delta(bound: usize) -> Self {
        Self::shifted_delta(0, bound).expect("shift 0 fits any bound")
    }

    /// `e_shift` declared on `{0, ..., bound}`.
    pub fn shifted_delta(shift: usize, bound: usize) -> Result<Self> {
        if shift > bound {
            return Err(Error::invalid(format!(
                "delta shift {shift} exceeds bound {bound}"
            )));
        }
        let mut coeffs = vec![T::zero(); bound + 1];
        coeffs[shift] = T::one();
        Ok(Self { coeffs })
    }

    #[inline]
    pub fn bound(&self) -> usize {
        self.coeffs.len() - 1
    }

    #[inline]
    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<T> {
        self.coeffs
    }

    /// `w_j`, reading zero for indices outside `{0, ..., S}`.
    #[inline]
    pub fn at(&self, j: isize) -> T {
        if j < 0 {
            return T::zero();
        }
        self.coeffs.get(j as usize).copied().unwrap_or_else(T::zero)
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_zero())
    }

    pub fn is_delta(&self) -> bool {
        self.coeffs[0] == T::one() && self.coeffs[1..].iter().all(|c| c.is_zero())
    }

    /// Largest index with a nonzero coefficient, `None` for the zero filter.
    pub fn effective_bound(&self) -> Option<usize> {
        self.coeffs.iter().rposition(|c| !c.is_zero())
    }

    /// Number of zero coefficients before the first nonzero one.
    pub fn leading_zeros(&self) -> usize {
        self.coeffs
            .iter()
            .position(|c| !c.is_zero())
            .unwrap_or(self.coeffs.len())
    }

    /// Drops trailing zeros; the zero filter trims to `(0)`.
    pub fn trimmed(&self) -> Self {
        let end = self.effective_bound().unwrap_or(0);
        Self {
            coeffs: self.coeffs[..=end].to_vec(),
        }
    }

    /// Re-declares the filter on `{0, ..., bound}`, padding with zeros.
    /// Fails if a nonzero coefficient would be cut off.
    pub fn with_bound(&self, bound: usize) -> Result<Self> {
        if let Some(eff) = self.effective_bound() {
            if eff > bound {
                return Err(Error::invalid(format!(
                    "filter has support up to {eff}, cannot declare bound {bound}"
                )));
            }
        }
        let mut coeffs = self.coeffs.clone();
        coeffs.resize(bound + 1, T::zero());
        Ok(Self { coeffs })
    }

    pub fn scaled(&self, c: T) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|&x| x * c).collect(),
        }
    }

    pub fn l1_norm(&self) -> T {
        self.coeffs.iter().map(|c| c.abs()).sum()
    }

    pub fn max_norm(&self) -> T {
        self.coeffs.iter().fold(T::zero(), |m, c| m.max(c.abs()))
    }

    /// Full convolution `self * other`; the bound is the sum of both bounds.
    pub fn convolve(&self, other: &Filter<T>) -> Filter<T> {
        let mut out = vec![T::zero(); self.coeffs.len() + other.coeffs.len() - 1];
        for (i, &a) in self.coeffs.iter().enumerate() {
            if a.is_zero() {
                continue;
            }
            for (j, &b) in other.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Filter { coeffs: out }
    }
}

/// Zero-padded convolution: `(w * v)_j = sum_{k=1}^{d'} w_{j-k} v_k` for
/// `j = 1, ..., d' + S`.
pub fn conv_padded<T: Scalar>(w: &Filter<T>, v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::invalid("padded convolution of an empty vector"));
    }
    let mut out = vec![T::zero(); v.len() + w.bound()];
    conv_padded_into(w.coeffs(), v, &mut out);
    Ok(out)
}

/// Unchecked kernel behind [`conv_padded`]; `out.len()` must be
/// `v.len() + w.len() - 1` and is overwritten.
#[inline]
pub(crate) fn conv_padded_into<T: Scalar>(w: &[T], v: &[T], out: &mut [T]) {
    debug_assert_eq!(out.len(), v.len() + w.len() - 1);
    out.iter_mut().for_each(|o| *o = T::zero());
    for (k, &vk) in v.iter().enumerate() {
        if vk.is_zero() {
            continue;
        }
        for (t, &wt) in w.iter().enumerate() {
            out[k + t] += wt * vk;
        }
    }
}

/// Contracting convolution without padding:
/// `(w ⋆ v)_j = sum_{k=j-s}^{j} w_{j-k} v_{k+s}` for `j = 1, ..., d' - s`.
///
/// With the offset written out, output `j` reads `v_j, ..., v_{j+s}` with
/// weights `w_s, ..., w_0`, so the window starts at `v_j`, not `v_{j-s}`.
pub fn conv_classic<T: Scalar>(w: &Filter<T>, v: &[T]) -> Result<Vec<T>> {
    let s = w.bound();
    if v.len() <= s {
        return Err(Error::dim(format!(
            "contracting convolution needs input length > {s}, got {}",
            v.len()
        )));
    }
    Ok((0..v.len() - s)
        .map(|j| (0..=s).map(|t| w.coeffs[t] * v[j + s - t]).sum())
        .collect())
}

/// The `(d' + S) x d'` Toeplitz matrix with entries `w_{i-k}`.
pub fn toeplitz_matrix<T: Scalar>(w: &Filter<T>, cols: usize) -> Result<Matrix<T>> {
    if cols == 0 {
        return Err(Error::invalid("Toeplitz matrix needs at least one column"));
    }
    let rows = cols + w.bound();
    let mut m = Matrix::zeros(rows, cols);
    for k in 0..cols {
        for (t, &wt) in w.coeffs().iter().enumerate() {
            m.set(k + t, k, wt);
        }
    }
    Ok(m)
}

#[inline]
pub fn relu<T: Scalar>(v: &[T]) -> Vec<T> {
    v.iter().map(|&t| t.max(T::zero())).collect()
}

/// Block maximum with block size `u`; trailing entries past `u * floor(d'/u)`
/// are discarded.
pub fn max_pool<T: Scalar>(v: &[T], u: usize) -> Result<Vec<T>> {
    max_pool_argmax(v, u).map(|(out, _)| out)
}

/// [`max_pool`] plus the winning index of each block (lowest index on ties).
pub fn max_pool_argmax<T: Scalar>(v: &[T], u: usize) -> Result<(Vec<T>, Vec<usize>)> {
    if u == 0 {
        return Err(Error::invalid("pooling size must be at least 1"));
    }
    if v.len() < u {
        return Err(Error::dim(format!(
            "pooling size {u} exceeds vector length {}",
            v.len()
        )));
    }
    let blocks = v.len() / u;
    let mut out = Vec::with_capacity(blocks);
    let mut arg = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let mut best = b * u;
        for i in b * u + 1..(b + 1) * u {
            if v[i] > v[best] {
                best = i;
            }
        }
        out.push(v[best]);
        arg.push(best);
    }
    Ok((out, arg))
}

/// Dimensions of the length-triggered max-pooling schedule for input
/// dimension `d` and filter length `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolParams {
    pub d: usize,
    pub s: usize,
    /// `ceil((2d+10) d / (s-1))`
    pub l1_max: usize,
    /// `d + l1_max * s`
    pub d1_max: usize,
    /// `2d+10 + ceil((2d+10)^2 / (s-1)) * s`
    pub d_max: usize,
}

impl PoolParams {
    pub fn new(d: usize, s: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("input dimension must be positive"));
        }
        if s < 2 {
            return Err(Error::invalid(format!("filter length s must be >= 2, got {s}")));
        }
        let overflow = || Error::invalid(format!("pooling dimensions overflow for d={d}, s={s}"));
        let width = d.checked_mul(2).and_then(|x| x.checked_add(10)).ok_or_else(overflow)?;
        let l1_max = width.checked_mul(d).ok_or_else(overflow)?.div_ceil(s - 1);
        let d1_max = l1_max
            .checked_mul(s)
            .and_then(|x| x.checked_add(d))
            .ok_or_else(overflow)?;
        let d_max = width
            .checked_mul(width)
            .map(|x| x.div_ceil(s - 1))
            .and_then(|x| x.checked_mul(s))
            .and_then(|x| x.checked_add(width))
            .ok_or_else(overflow)?;
        Ok(Self {
            d,
            s,
            l1_max,
            d1_max,
            d_max,
        })
    }

    /// Hidden width `2d + 10` of the fully connected networks being emulated.
    pub fn hidden_width(&self) -> usize {
        2 * self.d + 10
    }

    /// Pooling size selected for a vector of the given length at 1-based
    /// layer `layer`; 1 means no pooling.
    pub fn pool_size(&self, len: usize, layer: usize) -> usize {
        if len == self.d1_max && layer <= self.l1_max {
            self.d
        } else if len == self.d_max {
            self.hidden_width()
        } else {
            1
        }
    }
}

/// The schedule operator: pools by `d` at length `d1_max` within the first
/// `l1_max` layers, by `2d+10` at length `d_max`, otherwise identity.
pub fn pmax<T: Scalar>(v: &[T], layer: usize, p: &PoolParams) -> Vec<T> {
    match p.pool_size(v.len(), layer) {
        1 => v.to_vec(),
        u => max_pool(v, u).expect("schedule only pools at lengths that are >= the pool size"),
    }
}
