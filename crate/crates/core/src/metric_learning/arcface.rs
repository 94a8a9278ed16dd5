//! Sub-center ArcFace: cosine pooling, margin logits, loss and analytic gradients.

use std::f64::consts::PI;

use crate::embedding_store::EmbeddingSet;
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::scalar::Real;

/// Cosines are clamped to `[-1 + CLAMP, 1 - CLAMP]` where the margin derivative needs `1 / sin θ`.
pub const COS_CLAMP: f64 = 1e-7;

/// Weights hold `n_classes * sub_centers` rows; class `c` owns rows
/// `c * sub_centers .. (c + 1) * sub_centers`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcFaceHead<T> {
    weights: Matrix<T>,
    sub_centers: usize,
    scale: T,
    margins: Vec<T>,
}

impl<T: Real> ArcFaceHead<T> {
    pub fn new(weights: Matrix<T>, sub_centers: usize, scale: T, margins: Vec<T>) -> Result<Self> {
        if sub_centers == 0 {
            return Err(Error::Config("sub_centers must be at least 1".into()));
        }
        if weights.rows() == 0 || !weights.rows().is_multiple_of(sub_centers) {
            return Err(Error::Shape(format!(
                "{} weight rows is not a positive multiple of {sub_centers} sub-centers",
                weights.rows()
            )));
        }
        let n_classes = weights.rows() / sub_centers;
        if margins.len() != n_classes {
            return Err(Error::Shape(format!(
                "{} margins for {n_classes} classes",
                margins.len()
            )));
        }
        if !(scale > T::zero()) {
            return Err(Error::Config(format!("scale must be positive, got {scale}")));
        }
        if let Some(m) = margins.iter().find(|&&m| !(m >= T::zero() && m < T::lit(PI / 2.0))) {
            return Err(Error::Config(format!("margin {m} outside [0, pi/2)")));
        }
        Ok(Self {
            weights,
            sub_centers,
            scale,
            margins,
        })
    }

    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix<T> {
        &mut self.weights
    }

    pub fn sub_centers(&self) -> usize {
        self.sub_centers
    }

    pub fn n_classes(&self) -> usize {
        self.weights.rows() / self.sub_centers
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn margins(&self) -> &[T] {
        &self.margins
    }
}

/// Class cosines pooled over sub-centers.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledCosines<T> {
    /// `n x C`.
    pub cosines: Matrix<T>,
    /// Weight row that won the max for each `(sample, class)`; lowest row on ties.
    pub argmax: Vec<usize>,
}

fn unit_rows<T: Real>(m: &Matrix<T>, what: &str) -> Result<(Matrix<T>, Vec<T>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let n = norm(m.row(r));
        if !(n > T::zero()) {
            return Err(Error::ZeroNorm {
                id: format!("{what} row {r}"),
            });
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// `cos θ[i][c] = max over sub-centers of class c` of the cosine between
/// sample `i` and that sub-center.
pub fn subcenter_cosines_matrix<T: Real>(head: &ArcFaceHead<T>, embeddings: &Matrix<T>) -> Result<PooledCosines<T>> {
    if embeddings.cols() != head.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs head dim {}",
            embeddings.cols(),
            head.dim()
        )));
    }
    let (e_hat, _) = unit_rows(embeddings, "embedding")?;
    let (w_hat, _) = unit_rows(&head.weights, "weight")?;
    Ok(pool(head, &e_hat, &w_hat))
}

fn pool<T: Real>(head: &ArcFaceHead<T>, e_hat: &Matrix<T>, w_hat: &Matrix<T>) -> PooledCosines<T> {
    let (n, c, k) = (e_hat.rows(), head.n_classes(), head.sub_centers);
    let mut cosines = Matrix::zeros(n, c);
    let mut argmax = vec![0usize; n * c];
    let one = T::one();
    for i in 0..n {
        let e = e_hat.row(i);
        for class in 0..c {
            let mut best = T::neg_infinity();
            let mut best_row = class * k;
            for r in class * k..(class + 1) * k {
                let v = dot(e, w_hat.row(r));
                if v > best {
                    best = v;
                    best_row = r;
                }
            }
            cosines[(i, class)] = best.max(-one).min(one);
            argmax[i * c + class] = best_row;
        }
    }
    PooledCosines { cosines, argmax }
}

/// [`subcenter_cosines_matrix`] for an embedding set (rows widened to `T`).
pub fn subcenter_cosines<T: Real>(head: &ArcFaceHead<T>, embeddings: &EmbeddingSet) -> Result<Matrix<T>> {
    let m = Matrix::from_vec(
        embeddings.len(),
        embeddings.dim(),
        embeddings.data().iter().map(|&v| T::lit(f64::from(v))).collect(),
    )?;
    Ok(subcenter_cosines_matrix(head, &m)?.cosines)
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::OutOfRange(format!("label {bad} with {classes} classes")));
    }
    Ok(())
}

/// Target logit and its derivative with respect to `cos θ`.
///
/// The value uses `cos(θ + m) = cos θ cos m - sin θ sin m`, exact at
/// `cos θ = ±1`; the derivative clamps `cos θ` away from ±1 where `1 / sin θ`
/// blows up.
fn target_logit<T: Real>(cos: T, margin: T, scale: T) -> (T, T) {
    let eps = T::lit(COS_CLAMP);
    let one = T::one();
    let threshold = (T::lit(PI) - margin).cos();
    if cos > threshold {
        let sin = (one - cos * cos).max(T::zero()).sqrt();
        let value = scale * (cos * margin.cos() - sin * margin.sin());
        let grad = if cos > -one + eps && cos < one - eps {
            // d cos(θ + m) / d cos θ = cos m + sin m · cos θ / sin θ
            scale * (margin.cos() + margin.sin() * cos / sin)
        } else {
            let c = cos.max(-one + eps).min(one - eps);
            scale * (margin.cos() + margin.sin() * c / (one - c * c).sqrt())
        };
        (value, grad)
    } else {
        (scale * (cos - margin * margin.sin()), scale)
    }
}

/// Margin logits and mean cross-entropy.
///
/// Target logit is `s·cos(θ_y + m_y)` while `cos θ_y > cos(π - m_y)`, else
/// `s·(cos θ_y - m_y sin m_y)`; other logits are `s·cos θ`.
pub fn arcface_loss<T: Real>(cosines: &Matrix<T>, labels: &[usize], scale: T, margins: &[T]) -> Result<(T, Matrix<T>)> {
    let (n, c) = (cosines.rows(), cosines.cols());
    check_labels(labels, n, c)?;
    if margins.len() != c {
        return Err(Error::Shape(format!("{} margins for {c} classes", margins.len())));
    }
    if n == 0 {
        return Err(Error::Invalid("arcface loss over zero samples".into()));
    }
    let mut logits = cosines.map(|v| v * scale);
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        logits[(i, y)] = target_logit(cosines[(i, y)], margins[y], scale).0;
        total += log_sum_exp(logits.row(i)) - logits[(i, y)];
    }
    Ok((total / T::from_usize_lossy(n), logits))
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

#[derive(Debug, Clone)]
pub struct ArcFaceGradients<T> {
    pub loss: T,
    /// `n x d`, gradient of the mean loss with respect to the raw embeddings.
    pub embeddings: Matrix<T>,
    /// Same shape as the head weights.
    pub weights: Matrix<T>,
}

/// Mean loss of raw (unnormalized) embeddings under `head`.
pub fn arcface_forward<T: Real>(embeddings: &Matrix<T>, head: &ArcFaceHead<T>, labels: &[usize]) -> Result<T> {
    let pooled = subcenter_cosines_matrix(head, embeddings)?;
    Ok(arcface_loss(&pooled.cosines, labels, head.scale, &head.margins)?.0)
}

/// Analytic gradients through normalization, sub-center max pooling (to the
/// winning row only), the margin rotation and the softmax cross-entropy.
pub fn arcface_gradients<T: Real>(
    embeddings: &Matrix<T>,
    head: &ArcFaceHead<T>,
    labels: &[usize],
) -> Result<ArcFaceGradients<T>> {
    if embeddings.cols() != head.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs head dim {}",
            embeddings.cols(),
            head.dim()
        )));
    }
    let (n, c, d) = (embeddings.rows(), head.n_classes(), head.dim());
    check_labels(labels, n, c)?;
    let (e_hat, e_norms) = unit_rows(embeddings, "embedding")?;
    let (w_hat, w_norms) = unit_rows(&head.weights, "weight")?;
    let pooled = pool(head, &e_hat, &w_hat);
    let (loss, logits) = arcface_loss(&pooled.cosines, labels, head.scale, &head.margins)?;

    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut g_e_hat = Matrix::<T>::zeros(n, d);
    let mut g_w_hat = Matrix::<T>::zeros(head.weights.rows(), d);
    let mut probs = vec![T::zero(); c];
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for (p, &l) in probs.iter_mut().zip(row) {
            *p = (l - m).exp();
            z += *p;
        }
        let y = labels[i];
        for (class, &p) in probs.iter().enumerate() {
            let mut g_logit = p / z;
            if class == y {
                g_logit -= T::one();
            }
            g_logit *= inv_n;
            let dlogit_dcos = if class == y {
                target_logit(pooled.cosines[(i, y)], head.margins[y], head.scale).1
            } else {
                head.scale
            };
            let g_cos = g_logit * dlogit_dcos;
            if g_cos == T::zero() {
                continue;
            }
            let r = pooled.argmax[i * c + class];
            for j in 0..d {
                g_e_hat[(i, j)] += g_cos * w_hat[(r, j)];
                g_w_hat[(r, j)] += g_cos * e_hat[(i, j)];
            }
        }
    }

    Ok(ArcFaceGradients {
        loss,
        embeddings: unnormalize_grad(&g_e_hat, &e_hat, &e_norms),
        weights: unnormalize_grad(&g_w_hat, &w_hat, &w_norms),
    })
}

/// Chain rule through `x̂ = x / ‖x‖`: `(g - x̂ (x̂·g)) / ‖x‖`.
fn unnormalize_grad<T: Real>(g_hat: &Matrix<T>, x_hat: &Matrix<T>, norms: &[T]) -> Matrix<T> {
    let mut out = g_hat.clone();
    for (r, &n) in norms.iter().enumerate() {
        let proj = dot(x_hat.row(r), g_hat.row(r));
        for (o, &xh) in out.row_mut(r).iter_mut().zip(x_hat.row(r)) {
            *o = (*o - xh * proj) / n;
        }
    }
    out
}
