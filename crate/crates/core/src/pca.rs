//! PCA fitting and projection, plus the paired-set alignment diagnostic used
//! to justify fitting on one modality and applying to another.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::embedding_store::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::matrix::Matrix;
use crate::scalar::Real;
use crate::soup::{Checkpoint, TensorEntry};

/// Rows per leaf of the covariance reduction tree. The tree shape depends only
/// on `n`, so the sum is bit-identical for any thread count.
pub const COVARIANCE_BLOCK_ROWS: usize = 256;

/// Orthonormality bound enforced on freshly fitted models.
pub const ORTHONORMALITY_TOLERANCE: f64 = 1e-6;
/// Looser bound for models round-tripped through 32-bit storage.
pub const STORED_ORTHONORMALITY_TOLERANCE: f64 = 1e-4;

pub const TENSOR_MEAN: &str = "pca.mean";
pub const TENSOR_COMPONENTS: &str = "pca.components";
pub const TENSOR_EIGENVALUES: &str = "pca.eigenvalues";

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel<T> {
    mean: Vec<T>,
    /// `k x d`, one principal direction per row.
    components: Matrix<T>,
    /// Descending variances along each component.
    eigenvalues: Vec<T>,
}

impl<T: Real> PcaModel<T> {
    /// Assembles a model from parts, checking shapes, spectrum order and orthonormality.
    pub fn from_parts(mean: Vec<T>, components: Matrix<T>, eigenvalues: Vec<T>) -> Result<Self> {
        Self::from_parts_with_tolerance(mean, components, eigenvalues, T::lit(ORTHONORMALITY_TOLERANCE))
    }

    fn from_parts_with_tolerance(mean: Vec<T>, components: Matrix<T>, eigenvalues: Vec<T>, tol: T) -> Result<Self> {
        let (k, d) = (components.rows(), components.cols());
        if mean.len() != d || eigenvalues.len() != k {
            return Err(Error::Shape(format!(
                "pca parts: mean {} / components {k}x{d} / eigenvalues {}",
                mean.len(),
                eigenvalues.len()
            )));
        }
        if k == 0 || k > d {
            return Err(Error::OutOfRange(format!("pca output dim {k} for input dim {d}")));
        }
        if eigenvalues.iter().any(|&v| v < T::zero() || !v.is_finite()) {
            return Err(Error::Invalid("pca eigenvalues must be finite and non-negative".into()));
        }
        if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Invalid("pca eigenvalues must be sorted descending".into()));
        }
        let model = Self {
            mean,
            components,
            eigenvalues,
        };
        let err = model.orthonormality_error();
        if !(err <= tol) {
            return Err(Error::Invalid(format!(
                "pca components not orthonormal (max error {err})"
            )));
        }
        Ok(model)
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn components(&self) -> &Matrix<T> {
        &self.components
    }

    pub fn eigenvalues(&self) -> &[T] {
        &self.eigenvalues
    }

    pub fn input_dim(&self) -> usize {
        self.components.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }

    /// `max |C Cᵀ - I|`.
    pub fn orthonormality_error(&self) -> T {
        let k = self.output_dim();
        let mut worst = T::zero();
        for i in 0..k {
            for j in i..k {
                let dot = crate::matrix::dot(self.components.row(i), self.components.row(j));
                let target = if i == j { T::one() } else { T::zero() };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    /// `components · (row - mean)` into `out`.
    pub fn project_row_into(&self, row: &[f32], centered: &mut [T], out: &mut [T]) {
        for ((c, &x), &m) in centered.iter_mut().zip(row).zip(&self.mean) {
            *c = T::lit(f64::from(x)) - m;
        }
        for (o, comp) in out.iter_mut().zip(self.components.row_iter()) {
            *o = crate::matrix::dot(comp, centered);
        }
    }

    /// Projects the rows of a matrix without rounding to `f32`.
    pub fn project_matrix(&self, rows: &Matrix<T>) -> Result<Matrix<T>> {
        if rows.cols() != self.input_dim() {
            return Err(dim_mismatch(rows.cols(), self.input_dim()));
        }
        let k = self.output_dim();
        let mut out = Matrix::zeros(rows.rows(), k);
        for r in 0..rows.rows() {
            let centered: Vec<T> = rows.row(r).iter().zip(&self.mean).map(|(&x, &m)| x - m).collect();
            for (o, comp) in out.row_mut(r).iter_mut().zip(self.components.row_iter()) {
                *o = crate::matrix::dot(comp, &centered);
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let f = |v: &[T]| v.iter().map(|x| x.to_f32_lossy()).collect::<Vec<f32>>();
        let (k, d) = (self.output_dim() as u32, self.input_dim() as u32);
        Checkpoint::from_tensors(vec![
            TensorEntry::new(TENSOR_MEAN, vec![d], f(&self.mean))?,
            TensorEntry::new(TENSOR_COMPONENTS, vec![k, d], f(self.components.as_slice()))?,
            TensorEntry::new(TENSOR_EIGENVALUES, vec![k], f(&self.eigenvalues))?,
        ])
    }

    /// Reads a model stored by [`PcaModel::to_checkpoint`]. Other tensors are ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |name: &str| {
            ckpt.get(name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint has no tensor {name:?}")))
        };
        let (mean, comps, eig) = (get(TENSOR_MEAN)?, get(TENSOR_COMPONENTS)?, get(TENSOR_EIGENVALUES)?);
        if comps.dims().len() != 2 {
            return Err(Error::Shape(format!("{TENSOR_COMPONENTS} must be rank 2")));
        }
        let lift = |v: &[f32]| v.iter().map(|&x| T::lit(f64::from(x))).collect::<Vec<T>>();
        let components = Matrix::from_vec(comps.dims()[0] as usize, comps.dims()[1] as usize, lift(comps.data()))?;
        Self::from_parts_with_tolerance(
            lift(mean.data()),
            components,
            lift(eig.data()),
            T::lit(STORED_ORTHONORMALITY_TOLERANCE),
        )
    }
}

fn dim_mismatch(got: usize, expected: usize) -> Error {
    Error::Shape(format!("input dim {got}, model expects {expected}"))
}

/// Fits a `k`-component PCA with population covariance (divide by `n`).
///
/// Uses the `d x d` covariance when `n >= d` and the `n x n` Gram matrix
/// otherwise. Each component is sign-normalized so its largest-magnitude entry
/// is positive (lowest index wins ties).
pub fn fit_pca<T: Real>(train: &EmbeddingSet, k: usize) -> Result<PcaModel<T>> {
    let (n, d) = (train.len(), train.dim());
    if n < 2 {
        return Err(Error::OutOfRange(format!("pca needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > d.min(n) {
        return Err(Error::OutOfRange(format!("k = {k} must be in 1..={}", d.min(n))));
    }

    let mean = column_mean::<T>(train);
    let centered = Matrix::from_fn(n, d, |r, c| T::lit(f64::from(train.row(r)[c])) - mean[c]);
    if centered.as_slice().iter().all(|&v| v == T::zero()) {
        return Err(Error::ZeroCovariance);
    }
    let inv_n = T::one() / T::from_usize_lossy(n);

    let (mut components, mut eigenvalues) = if n >= d {
        let mut cov = covariance_sum(&centered);
        cov.as_mut_slice().iter_mut().for_each(|v| *v *= inv_n);
        let eig = symmetric_eigen(&cov);
        let comps = Matrix::from_fn(k, d, |r, c| eig.vectors[(r, c)]);
        (comps, eig.values[..k].to_vec())
    } else {
        gram_route(&centered, k, inv_n)
    };

    if eigenvalues[0] <= T::zero() {
        return Err(Error::ZeroCovariance);
    }
    for v in eigenvalues.iter_mut() {
        *v = v.max(T::zero());
    }
    for r in 0..k {
        normalize_sign(components.row_mut(r));
    }
    PcaModel::from_parts(mean, components, eigenvalues)
}

fn column_mean<T: Real>(set: &EmbeddingSet) -> Vec<T> {
    let mut mean = vec![T::zero(); set.dim()];
    for row in set.rows() {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += T::lit(f64::from(x));
        }
    }
    let n = T::from_usize_lossy(set.len());
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// `Σ c cᵀ` over the rows of `centered`, summed over a fixed binary tree of row blocks.
fn covariance_sum<T: Real>(centered: &Matrix<T>) -> Matrix<T> {
    let blocks = centered.rows().div_ceil(COVARIANCE_BLOCK_ROWS);
    let mut sum = tree_sum(centered, 0, blocks);
    let d = centered.cols();
    for i in 0..d {
        for j in 0..i {
            sum[(i, j)] = sum[(j, i)];
        }
    }
    sum
}

fn tree_sum<T: Real>(centered: &Matrix<T>, lo: usize, hi: usize) -> Matrix<T> {
    if hi - lo == 1 {
        let d = centered.cols();
        let mut acc = Matrix::zeros(d, d);
        let end = ((lo + 1) * COVARIANCE_BLOCK_ROWS).min(centered.rows());
        for r in lo * COVARIANCE_BLOCK_ROWS..end {
            let row = centered.row(r);
            for i in 0..d {
                let ri = row[i];
                let acc_row = &mut acc.row_mut(i)[i..];
                for (a, &rj) in acc_row.iter_mut().zip(&row[i..]) {
                    *a += ri * rj;
                }
            }
        }
        return acc;
    }
    let mid = lo + (hi - lo) / 2;
    let (mut left, right) = rayon::join(|| tree_sum(centered, lo, mid), || tree_sum(centered, mid, hi));
    left.as_mut_slice()
        .par_iter_mut()
        .zip(right.as_slice().par_iter())
        .for_each(|(a, &b)| *a += b);
    left
}

fn gram_route<T: Real>(centered: &Matrix<T>, k: usize, inv_n: T) -> (Matrix<T>, Vec<T>) {
    let (n, d) = (centered.rows(), centered.cols());
    let mut gram = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            gram[(i, j)] = crate::matrix::dot(centered.row(i), centered.row(j)) * inv_n;
        }
    }
    let eig = symmetric_eigen(&gram);
    let top = eig.values[0];
    let rank_floor = top * T::epsilon() * T::from_usize_lossy(n.max(d)) * T::lit(16.0);

    let mut comps: Vec<Vec<T>> = Vec::with_capacity(k);
    let mut values = Vec::with_capacity(k);
    let n_t = T::one() / inv_n;
    for i in 0..k {
        let lambda = eig.values[i];
        if lambda > rank_floor {
            // v = Xᵀ u / sqrt(n λ)
            let u = eig.vectors.row(i);
            let mut v = vec![T::zero(); d];
            for (r, &ur) in u.iter().enumerate() {
                for (vc, &x) in v.iter_mut().zip(centered.row(r)) {
                    *vc += ur * x;
                }
            }
            let s = (n_t * lambda).sqrt();
            v.iter_mut().for_each(|x| *x /= s);
            orthonormalize_against(&mut v, &comps);
            comps.push(v);
            values.push(lambda);
        } else {
            comps.push(complete_basis(&comps, d));
            values.push(T::zero());
        }
    }
    let flat = comps.into_iter().flatten().collect();
    (Matrix::from_vec(k, d, flat).expect("k x d"), values)
}

fn orthonormalize_against<T: Real>(v: &mut [T], basis: &[Vec<T>]) {
    for b in basis {
        let p = crate::matrix::dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, &y)| *x -= p * y);
    }
    let nrm = crate::matrix::norm(v);
    v.iter_mut().for_each(|x| *x /= nrm);
}

/// A unit vector orthogonal to `basis`, from the first standard axis with a usable residual.
fn complete_basis<T: Real>(basis: &[Vec<T>], d: usize) -> Vec<T> {
    let mut best: Option<(T, Vec<T>)> = None;
    for axis in 0..d {
        let mut v = vec![T::zero(); d];
        v[axis] = T::one();
        for _ in 0..2 {
            for b in basis {
                let p = crate::matrix::dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, &y)| *x -= p * y);
            }
        }
        let nrm = crate::matrix::norm(&v);
        if nrm > T::lit(0.5) {
            v.iter_mut().for_each(|x| *x /= nrm);
            return v;
        }
        if best.as_ref().is_none_or(|(b, _)| nrm > *b) {
            best = Some((nrm, v));
        }
    }
    let (nrm, mut v) = best.expect("d > 0");
    v.iter_mut().for_each(|x| *x /= nrm);
    v
}

fn normalize_sign<T: Real>(v: &mut [T]) {
    let mut pivot = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[pivot].abs() {
            pivot = i;
        }
    }
    if v[pivot] < T::zero() {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Applies `model` to every row. The output is never flagged normalized.
pub fn project<T: Real>(model: &PcaModel<T>, set: &EmbeddingSet) -> Result<EmbeddingSet> {
    if set.dim() != model.input_dim() {
        return Err(dim_mismatch(set.dim(), model.input_dim()));
    }
    let (d, k) = (model.input_dim(), model.output_dim());
    let mut data = vec![0f32; set.len() * k];
    data.par_chunks_mut(k).zip(set.data().par_chunks(d)).for_each_init(
        || (vec![T::zero(); d], vec![T::zero(); k]),
        |(centered, out), (dst, row)| {
            model.project_row_into(row, centered, out);
            for (o, v) in dst.iter_mut().zip(out.iter()) {
                *o = v.to_f32_lossy();
            }
        },
    );
    EmbeddingSet::new(set.ids().to_vec(), k, data, false)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentStats {
    pub mean: f64,
    pub max: f64,
    pub pairs: usize,
}

/// Mean and max Euclidean distance between rows of `a` and `b` paired by id.
pub fn validate_alignment(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<AlignmentStats> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "alignment between dims {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let index: HashMap<&str, usize> = b.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    if a.len() != b.len() {
        return Err(Error::IdMismatch(format!("{} ids vs {} ids", a.len(), b.len())));
    }
    let mut sum = 0f64;
    let mut max = 0f64;
    for (i, id) in a.ids().iter().enumerate() {
        let j = *index.get(id.as_str()).ok_or_else(|| Error::IdMismatch(id.clone()))?;
        let dist = a
            .row(i)
            .iter()
            .zip(b.row(j))
            .map(|(&x, &y)| {
                let diff = f64::from(x) - f64::from(y);
                diff * diff
            })
            .sum::<f64>()
            .sqrt();
        sum += dist;
        max = max.max(dist);
    }
    let pairs = a.len();
    Ok(AlignmentStats {
        mean: if pairs == 0 { 0.0 } else { sum / pairs as f64 },
        max,
        pairs,
    })
}
