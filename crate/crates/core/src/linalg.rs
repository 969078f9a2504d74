//! Numerical kernels behind the prototype classifier.
//!
//! Everything here is a pure function over owned or borrowed values. All
//! accumulation happens in `f64` regardless of how the inputs were stored,
//! because merging second moments is prone to cancellation.

use std::ops::Deref;

use thiserror::Error;

/// Relative pivot floor for the Cholesky factorization. A pivot at or below
/// `PIVOT_RTOL * max|diag|` is treated as zero.
pub const PIVOT_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("vector must have at least one component")]
    ZeroDim,
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("matrix data has {len} entries, expected {dim}x{dim}")]
    BadShape { dim: usize, len: usize },
    #[error("diagonal entry {index} is negative ({value}); input is not a covariance")]
    NegativeDiagonal { index: usize, value: f64 },
    #[error("matrix is not positive definite: smallest pivot {pivot:e} at row {index}")]
    Singular { index: usize, pivot: f64 },
    #[error("zero-norm vector has no direction")]
    DegenerateVector,
}

pub type Result<T, E = LinalgError> = std::result::Result<T, E>;

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(LinalgError::NonFinite { index }),
        None => Ok(()),
    }
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(LinalgError::DimensionMismatch { expected, found })
    }
}

/// A finite, non-empty feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FVec(Vec<f64>);

impl FVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(LinalgError::ZeroDim);
        }
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for FVec {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for FVec {
    type Error = LinalgError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

/// Dense square matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SqMat {
    dim: usize,
    data: Vec<f64>,
}

impl SqMat {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(LinalgError::ZeroDim);
        }
        if data.len() != dim * dim {
            return Err(LinalgError::BadShape {
                dim,
                len: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { dim, data })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "matrix dimension must be positive");
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn diagonal_from(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, v) in values.iter().enumerate() {
            m.data[i * values.len() + i] = *v;
        }
        m
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m.data[i * dim + j] = f(i, j);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.dim + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.data
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn is_symmetric(&self) -> bool {
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                let (a, b) = (self.get(i, j), self.get(j, i));
                if (a - b).abs() > 1e-9 * a.abs().max(1.0) {
                    return false;
                }
            }
        }
        true
    }

    pub fn matmul(&self, other: &SqMat) -> Result<SqMat> {
        check_dim(self.dim, other.dim)?;
        let n = self.dim;
        let mut out = SqMat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * n..(k + 1) * n];
                let dst = &mut out.data[i * n..(i + 1) * n];
                for (d, b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &SqMat) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn mirror_upper(&mut self) {
        let n = self.dim;
        for i in 0..n {
            for j in (i + 1)..n {
                self.data[j * n + i] = self.data[i * n + j];
            }
        }
    }
}

/// Count, mean and centred second moment of a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPack {
    count: u64,
    mean: Vec<f64>,
    m2: SqMat,
}

impl MomentPack {
    pub fn empty(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: SqMat::zeros(dim),
        }
    }

    /// Rebuilds a pack from stored parts, e.g. when loading a persisted store.
    pub fn from_parts(count: u64, mean: Vec<f64>, m2: SqMat) -> Result<Self> {
        check_dim(m2.dim(), mean.len())?;
        check_finite(&mean)?;
        if count == 0 && (mean.iter().any(|v| *v != 0.0) || m2.data.iter().any(|v| *v != 0.0)) {
            return Err(LinalgError::EmptyBatch);
        }
        Ok(Self { count, mean, m2 })
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn m2(&self) -> &SqMat {
        &self.m2
    }

    /// Unbiased sample covariance; the zero matrix for fewer than two samples.
    pub fn covariance(&self) -> SqMat {
        if self.count < 2 {
            return SqMat::zeros(self.dim());
        }
        self.m2.scaled(1.0 / (self.count - 1) as f64)
    }
}

/// Two-pass moments of a batch.
pub fn batch_moments<V: AsRef<[f64]>>(batch: &[V]) -> Result<MomentPack> {
    let first = batch.first().ok_or(LinalgError::EmptyBatch)?;
    let dim = first.as_ref().len();
    if dim == 0 {
        return Err(LinalgError::ZeroDim);
    }
    let mut mean = vec![0.0; dim];
    for v in batch {
        let v = v.as_ref();
        check_dim(dim, v.len())?;
        check_finite(v)?;
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let n = batch.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);

    let mut m2 = SqMat::zeros(dim);
    let mut dev = vec![0.0; dim];
    for v in batch {
        for ((d, x), m) in dev.iter_mut().zip(v.as_ref()).zip(&mean) {
            *d = x - m;
        }
        for i in 0..dim {
            let di = dev[i];
            let row = &mut m2.data[i * dim..(i + 1) * dim];
            for j in i..dim {
                row[j] += di * dev[j];
            }
        }
    }
    m2.mirror_upper();
    Ok(MomentPack {
        count: batch.len() as u64,
        mean,
        m2,
    })
}

/// Exact pooled moments of the union of the samples behind `a` and `b`.
pub fn merge_moments(a: &MomentPack, b: &MomentPack) -> Result<MomentPack> {
    check_dim(a.dim(), b.dim())?;
    if b.is_empty() {
        return Ok(a.clone());
    }
    if a.is_empty() {
        return Ok(b.clone());
    }
    let dim = a.dim();
    let (na, nb) = (a.count as f64, b.count as f64);
    let count = a.count + b.count;
    let n = count as f64;
    let delta: Vec<f64> = b.mean.iter().zip(&a.mean).map(|(mb, ma)| mb - ma).collect();
    let mean = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(ma, mb)| (na * ma + nb * mb) / n)
        .collect();
    let w = na * nb / n;
    let mut m2 = SqMat::zeros(dim);
    for i in 0..dim {
        for j in i..dim {
            m2.data[i * dim + j] = a.m2.get(i, j) + b.m2.get(i, j) + delta[i] * delta[j] * w;
        }
    }
    m2.mirror_upper();
    Ok(MomentPack { count, mean, m2 })
}

/// Equal-weight merge: mean and covariance are each averaged with weight 1/2
/// regardless of counts. The count still accumulates, and `m2` is rescaled so
/// that `covariance()` returns the averaged matrix.
pub fn merge_moments_equal_weight(a: &MomentPack, b: &MomentPack) -> Result<MomentPack> {
    check_dim(a.dim(), b.dim())?;
    if b.is_empty() {
        return Ok(a.clone());
    }
    if a.is_empty() {
        return Ok(b.clone());
    }
    let count = a.count + b.count;
    let mean = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| 0.5 * (x + y))
        .collect();
    let (ca, cb) = (a.covariance(), b.covariance());
    let dof = (count - 1) as f64;
    let data = ca
        .data
        .iter()
        .zip(&cb.data)
        .map(|(x, y)| 0.5 * (x + y) * dof)
        .collect();
    Ok(MomentPack {
        count,
        mean,
        m2: SqMat { dim: a.dim(), data },
    })
}

/// `cov + gamma1·V1·I + gamma2·V2·(J − I)` where V1 is the mean diagonal entry
/// and V2 the mean off-diagonal entry.
pub fn shrink(cov: &SqMat, gamma1: f64, gamma2: f64) -> SqMat {
    debug_assert!(gamma1 >= 0.0 && gamma2 >= 0.0);
    let n = cov.dim;
    let v1 = cov.trace() / n as f64;
    let v2 = if n > 1 {
        let total: f64 = cov.data.iter().sum();
        (total - cov.trace()) / (n * (n - 1)) as f64
    } else {
        0.0
    };
    let mut out = cov.clone();
    for i in 0..n {
        for j in 0..n {
            let bump = if i == j { gamma1 * v1 } else { gamma2 * v2 };
            out.data[i * n + j] += bump;
        }
    }
    out
}

/// Rescales a covariance by its diagonal standard deviations:
/// `N[i][j] = cov[i][j] / (sqrt(cov[i][i])·sqrt(cov[j][j]) + epsilon)`.
pub fn normalize_corr(cov: &SqMat, epsilon: f64) -> Result<SqMat> {
    let n = cov.dim;
    let mut sd = Vec::with_capacity(n);
    for i in 0..n {
        let v = cov.get(i, i);
        if v < 0.0 {
            return Err(LinalgError::NegativeDiagonal { index: i, value: v });
        }
        sd.push(v.sqrt());
    }
    let mut out = SqMat::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let denom = sd[i] * sd[j] + epsilon;
            out.data[i * n + j] = if denom == 0.0 {
                0.0
            } else {
                cov.get(i, j) / denom
            };
        }
    }
    Ok(out)
}

/// Inverse of a symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdInverse {
    source_dim: usize,
    inverse: SqMat,
    min_pivot: f64,
}

impl SpdInverse {
    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    pub fn matrix(&self) -> &SqMat {
        &self.inverse
    }

    /// Smallest diagonal pivot of the Cholesky factor (squared).
    pub fn min_pivot(&self) -> f64 {
        self.min_pivot
    }
}

/// Lower Cholesky factor, row-major. Fails on the first pivot below the
/// relative floor.
fn cholesky(m: &SqMat) -> Result<(Vec<f64>, f64)> {
    let n = m.dim;
    let scale = m.diagonal().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let floor = PIVOT_RTOL * scale.max(f64::MIN_POSITIVE);
    let mut l = vec![0.0; n * n];
    let mut min_pivot = f64::INFINITY;
    for j in 0..n {
        let mut pivot = m.get(j, j);
        for k in 0..j {
            pivot -= l[j * n + k] * l[j * n + k];
        }
        if !(pivot > floor) {
            return Err(LinalgError::Singular {
                index: j,
                pivot: pivot.min(min_pivot),
            });
        }
        min_pivot = min_pivot.min(pivot);
        let d = pivot.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok((l, min_pivot))
}

pub fn invert_spd(m: &SqMat) -> Result<SpdInverse> {
    let n = m.dim;
    let (l, min_pivot) = cholesky(m)?;

    // W = L^{-1}, lower triangular, by forward substitution column by column.
    let mut w = vec![0.0; n * n];
    for c in 0..n {
        w[c * n + c] = 1.0 / l[c * n + c];
        for i in (c + 1)..n {
            let mut s = 0.0;
            for k in c..i {
                s -= l[i * n + k] * w[k * n + c];
            }
            w[i * n + c] = s / l[i * n + i];
        }
    }

    // inverse = W^T W; only k >= max(i, j) contribute.
    let mut inverse = SqMat::zeros(n);
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for k in j..n {
                s += w[k * n + i] * w[k * n + j];
            }
            inverse.data[i * n + j] = s;
        }
    }
    inverse.mirror_upper();
    Ok(SpdInverse {
        source_dim: n,
        inverse,
        min_pivot,
    })
}

/// Squared Mahalanobis distance `(x − mean)^T inv (x − mean)`.
pub fn mahalanobis(x: &[f64], mean: &[f64], inv: &SpdInverse) -> Result<f64> {
    check_dim(inv.source_dim, x.len())?;
    check_dim(inv.source_dim, mean.len())?;
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let mut total = 0.0;
    for (i, di) in diff.iter().enumerate() {
        if *di == 0.0 {
            continue;
        }
        let row = inv.inverse.row(i);
        let dot: f64 = row.iter().zip(&diff).map(|(r, d)| r * d).sum();
        total += di * dot;
    }
    Ok(total.max(0.0))
}

pub fn cosine_sim(x1: &[f64], x2: &[f64]) -> Result<f64> {
    check_dim(x1.len(), x2.len())?;
    let mut dot = 0.0;
    let mut n1 = 0.0;
    let mut n2 = 0.0;
    for (a, b) in x1.iter().zip(x2) {
        dot += a * b;
        n1 += a * a;
        n2 += b * b;
    }
    if n1 == 0.0 || n2 == 0.0 {
        return Err(LinalgError::DegenerateVector);
    }
    Ok((dot / (n1.sqrt() * n2.sqrt())).clamp(-1.0, 1.0))
}

/// Affine map onto `[0, 1]`; a constant vector maps to zeros.
pub fn minmax01(x: &[f64]) -> Vec<f64> {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - lo) / range).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook two-pass covariance, kept separate from `batch_moments`.
    fn naive_cov(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = samples.len();
        let d = samples[0].len();
        let mean: Vec<f64> = (0..d)
            .map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n as f64)
            .collect();
        let mut cov = vec![vec![0.0; d]; d];
        if n > 1 {
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] = samples
                        .iter()
                        .map(|s| (s[i] - mean[i]) * (s[j] - mean[j]))
                        .sum::<f64>()
                        / (n - 1) as f64;
                }
            }
        }
        (mean, cov)
    }

    fn fv(v: &[f64]) -> FVec {
        FVec::new(v.to_vec()).unwrap()
    }

    #[test]
    fn fvec_rejects_empty_and_nan() {
        assert_eq!(FVec::new(vec![]), Err(LinalgError::ZeroDim));
        assert_eq!(
            FVec::new(vec![1.0, f64::NAN]),
            Err(LinalgError::NonFinite { index: 1 })
        );
    }

    #[test]
    fn batch_moments_two_points() {
        let batch = [fv(&[1.0, 2.0]), fv(&[3.0, 4.0])];
        let m = batch_moments(&batch).unwrap();
        assert_eq!(m.count(), 2);
        assert_eq!(m.mean(), &[2.0, 3.0]);
        assert_eq!(m.covariance().as_slice(), &[2.0, 2.0, 2.0, 2.0]);
        let (mean, cov) = naive_cov(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(mean, vec![2.0, 3.0]);
        assert_eq!(cov, vec![vec![2.0, 2.0], vec![2.0, 2.0]]);
    }

    #[test]
    fn batch_moments_single_and_constant() {
        let m = batch_moments(&[fv(&[5.0, 5.0])]).unwrap();
        assert_eq!(m.count(), 1);
        assert_eq!(m.mean(), &[5.0, 5.0]);
        assert!(m.covariance().as_slice().iter().all(|v| *v == 0.0));

        let v = fv(&[0.3, -1.25, 7.0]);
        let copies = vec![v.clone(); 9];
        let m = batch_moments(&copies).unwrap();
        for (a, b) in m.mean().iter().zip(v.iter()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-15);
        }
        assert!(m.covariance().as_slice().iter().all(|x| x.abs() < 1e-24));
    }

    #[test]
    fn batch_moments_errors() {
        let empty: [FVec; 0] = [];
        assert_eq!(batch_moments(&empty), Err(LinalgError::EmptyBatch));
        let mixed = [fv(&[1.0, 2.0]), fv(&[1.0])];
        assert_eq!(
            batch_moments(&mixed),
            Err(LinalgError::DimensionMismatch {
                expected: 2,
                found: 1
            })
        );
    }

    #[test]
    fn merge_matches_single_pass_1d() {
        let a = batch_moments(&[[0.0], [2.0]]).unwrap();
        let b = batch_moments(&[[4.0], [6.0]]).unwrap();
        let merged = merge_moments(&a, &b).unwrap();
        assert_eq!(merged.count(), 4);
        assert_eq!(merged.mean(), &[3.0]);
        assert_relative_eq!(merged.m2().get(0, 0), 20.0, epsilon = 1e-12);
        assert_relative_eq!(merged.covariance().get(0, 0), 20.0 / 3.0, epsilon = 1e-12);

        let samples: Vec<Vec<f64>> = [0.0, 2.0, 4.0, 6.0].iter().map(|v| vec![*v]).collect();
        let (_, cov) = naive_cov(&samples);
        assert_relative_eq!(merged.covariance().get(0, 0), cov[0][0], epsilon = 1e-12);
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let a = batch_moments(&[[1.0, 4.0], [2.0, -1.0], [0.5, 0.5]]).unwrap();
        let e = MomentPack::empty(2);
        assert_eq!(merge_moments(&a, &e).unwrap(), a);
        assert_eq!(merge_moments(&e, &a).unwrap(), a);
        assert_eq!(merge_moments_equal_weight(&a, &e).unwrap(), a);
        assert!(merge_moments(&a, &MomentPack::empty(3)).is_err());
    }

    #[test]
    fn merge_equal_counts_symmetric_mean() {
        let a = batch_moments(&[[0.0]]).unwrap();
        let b = batch_moments(&[[2.0]]).unwrap();
        assert_eq!(merge_moments(&a, &b).unwrap().mean(), &[1.0]);
    }

    #[test]
    fn equal_weight_merge_averages_mean_and_cov() {
        let a = batch_moments(&[[0.0], [2.0]]).unwrap();
        let b = batch_moments(&[[4.0], [6.0]]).unwrap();
        let merged = merge_moments_equal_weight(&a, &b).unwrap();
        assert_eq!(merged.mean(), &[3.0]);
        assert_relative_eq!(merged.covariance().get(0, 0), 2.0, epsilon = 1e-12);
        assert_eq!(merged.count(), 4);
    }

    #[test]
    fn shrink_examples() {
        let cov = SqMat::diagonal_from(&[2.0, 4.0]);
        assert_eq!(shrink(&cov, 1.0, 1.0), SqMat::diagonal_from(&[5.0, 7.0]));
        assert_eq!(shrink(&cov, 0.0, 0.0), cov);
        let zero = SqMat::zeros(2);
        assert_eq!(shrink(&zero, 1.0, 1.0), zero);
    }

    #[test]
    fn shrink_off_diagonal_uses_mean_off_diagonal() {
        // V1 = (2 + 2) / 2 = 2, V2 = (1 + 1) / 2 = 1.
        let cov = SqMat::new(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let s = shrink(&cov, 0.5, 2.0);
        assert_eq!(s.as_slice(), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn normalize_corr_examples() {
        let cov = SqMat::new(2, vec![4.0, 2.0, 2.0, 9.0]).unwrap();
        let n = normalize_corr(&cov, 0.0).unwrap();
        assert_relative_eq!(n.get(0, 0), 1.0);
        assert_relative_eq!(n.get(1, 1), 1.0);
        assert_relative_eq!(n.get(0, 1), 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(n.get(1, 0), 1.0 / 3.0, epsilon = 1e-15);

        assert_eq!(
            normalize_corr(&SqMat::identity(3), 0.0).unwrap(),
            SqMat::identity(3)
        );

        let n = normalize_corr(&SqMat::diagonal_from(&[0.0, 1.0]), 1e-6).unwrap();
        assert_eq!(n.get(0, 0), 0.0);

        let bad = SqMat::diagonal_from(&[1.0, -0.5]);
        assert_eq!(
            normalize_corr(&bad, 1e-8),
            Err(LinalgError::NegativeDiagonal {
                index: 1,
                value: -0.5
            })
        );
    }

    #[test]
    fn invert_spd_examples() {
        let inv = invert_spd(&SqMat::diagonal_from(&[2.0, 4.0])).unwrap();
        assert_relative_eq!(inv.matrix().get(0, 0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(inv.matrix().get(1, 1), 0.25, epsilon = 1e-15);
        assert_eq!(inv.matrix().get(0, 1), 0.0);

        let inv = invert_spd(&SqMat::identity(4)).unwrap();
        assert_eq!(inv.matrix(), &SqMat::identity(4));

        // Closed-form 2x2 inverse: adj(m) / det(m).
        let m = SqMat::new(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let det = m.get(0, 0) * m.get(1, 1) - m.get(0, 1) * m.get(1, 0);
        let oracle = SqMat::new(
            2,
            vec![
                m.get(1, 1) / det,
                -m.get(0, 1) / det,
                -m.get(1, 0) / det,
                m.get(0, 0) / det,
            ],
        )
        .unwrap();
        let inv = invert_spd(&m).unwrap();
        assert!(inv.matrix().max_abs_diff(&oracle) < 1e-15);
        assert!(
            inv.matrix().max_abs_diff(
                &SqMat::new(2, vec![2.0, -1.0, -1.0, 2.0])
                    .unwrap()
                    .scaled(1.0 / 3.0)
            ) < 1e-15
        );
    }

    #[test]
    fn invert_spd_rejects_singular() {
        let m = SqMat::new(2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        match invert_spd(&m) {
            Err(LinalgError::Singular { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected singular, got {other:?}"),
        }
        assert!(matches!(
            invert_spd(&SqMat::zeros(3)),
            Err(LinalgError::Singular { index: 0, .. })
        ));
    }

    #[test]
    fn mahalanobis_examples() {
        let id = invert_spd(&SqMat::identity(2)).unwrap();
        assert_eq!(mahalanobis(&[1.0, 0.0], &[0.0, 0.0], &id).unwrap(), 1.0);
        assert_eq!(mahalanobis(&[3.0, -2.0], &[3.0, -2.0], &id).unwrap(), 0.0);

        let inv = invert_spd(&SqMat::diagonal_from(&[4.0, 1.0])).unwrap();
        let d = mahalanobis(&[2.0, 1.0], &[0.0, 0.0], &inv).unwrap();
        assert_relative_eq!(d, 2.0, epsilon = 1e-14);
        assert!(mahalanobis(&[1.0], &[0.0, 0.0], &inv).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_relative_eq!(
            cosine_sim(&[1.0, 1.0], &[2.0, 2.0]).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-15
        );
        assert_eq!(
            cosine_sim(&[0.0, 0.0], &[1.0, 1.0]),
            Err(LinalgError::DegenerateVector)
        );
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax01(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax01(&[5.0, 5.0, 5.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(minmax01(&[0.0, 0.25, 1.0]), vec![0.0, 0.25, 1.0]);
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> SqMat {
        let a = SqMat::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let mut ata = SqMat::from_fn(n, |i, j| (0..n).map(|k| a.get(k, i) * a.get(k, j)).sum());
        for i in 0..n {
            ata.set(i, i, ata.get(i, i) + 1.0);
        }
        ata
    }

    /// Smallest eigenvalue by bisection on the inertia of `m - lambda I`
    /// (number of negative pivots of an unpivoted LDL^T).
    fn smallest_eigenvalue(m: &SqMat) -> f64 {
        let n = m.dim();
        let negatives = |lambda: f64| {
            let mut a: Vec<f64> = m.as_slice().to_vec();
            for i in 0..n {
                a[i * n + i] -= lambda;
            }
            let mut count = 0;
            for k in 0..n {
                let mut p = a[k * n + k];
                if p == 0.0 {
                    p = -1e-300;
                }
                if p < 0.0 {
                    count += 1;
                }
                for i in (k + 1)..n {
                    let f = a[i * n + k] / p;
                    for j in (k + 1)..n {
                        a[i * n + j] -= f * a[k * n + j];
                    }
                }
            }
            count
        };
        let bound: f64 = (0..n)
            .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let (mut lo, mut hi) = (-bound - 1.0, bound + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if negatives(mid) >= 1 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn inverse_recovers_identity_for_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 2, 5, 17, 40] {
            let m = random_spd(&mut rng, n);
            let inv = invert_spd(&m).unwrap();
            let prod = m.matmul(inv.matrix()).unwrap();
            assert!(prod.max_abs_diff(&SqMat::identity(n)) < 1e-6, "n = {n}");
            assert!(inv.matrix().is_symmetric());
        }
    }

    #[test]
    fn shrink_raises_smallest_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [2, 4, 9] {
            // Rank-deficient PSD: few samples.
            let samples: Vec<Vec<f64>> = (0..n / 2 + 1)
                .map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let cov = batch_moments(&samples).unwrap().covariance();
            let v1 = cov.trace() / n as f64;
            for gamma1 in [0.1, 1.0, 3.0] {
                let s = shrink(&cov, gamma1, 0.0);
                assert!(s.is_symmetric());
                let gain = smallest_eigenvalue(&s) - smallest_eigenvalue(&cov);
                assert!(gain >= gamma1 * v1 - 1e-8, "gain {gain} < {}", gamma1 * v1);
            }
        }
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, dim)
    }

    fn batches(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(vec_strategy(dim), 1..40)
    }

    fn assert_pack_close(a: &MomentPack, b: &MomentPack) {
        assert_eq!(a.count(), b.count());
        let scale = |v: f64| v.abs().max(1.0);
        for (x, y) in a.mean().iter().zip(b.mean()) {
            assert!((x - y).abs() <= 1e-9 * scale(*y), "mean {x} vs {y}");
        }
        let tr = b.m2().trace().abs().max(1.0);
        for (x, y) in a.m2().as_slice().iter().zip(b.m2().as_slice()) {
            assert!((x - y).abs() <= 1e-9 * tr, "m2 {x} vs {y}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn merge_is_associative_and_commutative(
            (a, b, c) in (1usize..8).prop_flat_map(|d| (batches(d), batches(d), batches(d)))
        ) {
            let (ma, mb, mc) = (batch_moments(&a).unwrap(), batch_moments(&b).unwrap(), batch_moments(&c).unwrap());
            let left = merge_moments(&merge_moments(&ma, &mb).unwrap(), &mc).unwrap();
            let right = merge_moments(&ma, &merge_moments(&mb, &mc).unwrap()).unwrap();
            let swapped = merge_moments(&mc, &merge_moments(&mb, &ma).unwrap()).unwrap();
            let all: Vec<Vec<f64>> = a.iter().chain(&b).chain(&c).cloned().collect();
            let single = batch_moments(&all).unwrap();
            assert_pack_close(&left, &single);
            assert_pack_close(&right, &single);
            assert_pack_close(&swapped, &single);
        }

        #[test]
        fn streaming_partition_equals_single_pass(
            (samples, cuts) in (1usize..64).prop_flat_map(|d| {
                (prop::collection::vec(vec_strategy(d), 2..300), prop::collection::vec(1usize..60, 1..20))
            })
        ) {
            let mut acc = MomentPack::empty(samples[0].len());
            let mut start = 0;
            let mut i = 0;
            while start < samples.len() {
                let end = (start + cuts[i % cuts.len()]).min(samples.len());
                acc = merge_moments(&acc, &batch_moments(&samples[start..end]).unwrap()).unwrap();
                start = end;
                i += 1;
            }
            assert_pack_close(&acc, &batch_moments(&samples).unwrap());
        }

        #[test]
        fn normalized_diagonal_is_unit(samples in (2usize..10).prop_flat_map(|d| prop::collection::vec(vec_strategy(d), 20..40))) {
            let cov = batch_moments(&samples).unwrap().covariance();
            prop_assume!(cov.diagonal().iter().all(|v| *v > 0.0));
            let n = normalize_corr(&cov, 0.0).unwrap();
            for v in n.diagonal() {
                prop_assert!((v - 1.0).abs() < 1e-12);
            }
            prop_assert!(n.is_symmetric());
        }

        #[test]
        fn identity_mahalanobis_is_squared_euclidean(
            (x, m) in (1usize..32).prop_flat_map(|d| (vec_strategy(d), vec_strategy(d)))
        ) {
            let inv = invert_spd(&SqMat::identity(x.len())).unwrap();
            let d = mahalanobis(&x, &m, &inv).unwrap();
            let e: f64 = x.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum();
            prop_assert!((d - e).abs() <= 1e-10 * e.max(1.0));
        }

        #[test]
        fn cosine_scale_invariance(x in vec_strategy(6), c in 0.001f64..1000.0) {
            prop_assume!(x.iter().any(|v| v.abs() > 1e-6));
            let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            prop_assert!((cosine_sim(&x, &scaled).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!((cosine_sim(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        }

        #[test]
        fn spd_inverse_property(seed in 0u64..1000, n in 1usize..24) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_spd(&mut rng, n);
            let inv = invert_spd(&m).unwrap();
            prop_assert!(m.matmul(inv.matrix()).unwrap().max_abs_diff(&SqMat::identity(n)) < 1e-6);
        }
    }
}
