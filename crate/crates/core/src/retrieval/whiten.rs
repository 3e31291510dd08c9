//! PCA whitening with dimension reduction.

use nalgebra::{DMatrix, SymmetricEigen};

use super::DescriptorSet;
use crate::error::{Error, Result};

/// Default eigenvalue floor.
pub const WHITEN_EPS: f64 = 1e-8;

/// `x ↦ P·(x − μ)` where the rows of `P` are principal axes scaled by
/// `1/sqrt(λ + eps)`. Axes with `λ ≤ eps` are kept as zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenTransform {
    pub mean: Vec<f64>,
    /// `d×D`, row-major.
    pub projection: Vec<f64>,
    /// Sample-covariance eigenvalues of the kept axes, descending.
    pub eigenvalues: Vec<f64>,
    pub eps: f64,
}

impl WhitenTransform {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Projects one descriptor without re-normalizing.
    pub fn project(&self, x: &[f32]) -> Result<Vec<f64>> {
        let dim = self.input_dim();
        if x.len() != dim {
            return Err(Error::dim(format!(
                "whitening expects dimension {dim}, got {}",
                x.len()
            )));
        }
        let centred: Vec<f64> = x.iter().zip(&self.mean).map(|(&v, &m)| v as f64 - m).collect();
        Ok(self
            .projection
            .chunks_exact(dim)
            .map(|row| row.iter().zip(&centred).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Fits whitening to the rows of `set`, keeping the `d` leading axes.
///
/// Uses the `N×N` Gram matrix instead of the `D×D` covariance when `N < D`.
pub fn fit_whiten(set: &DescriptorSet, d: usize, eps: f64) -> Result<WhitenTransform> {
    let (n, dim) = (set.len(), set.dim());
    if n < 2 {
        return Err(Error::config(format!("whitening needs at least 2 descriptors, got {n}")));
    }
    let bound = (n - 1).min(dim);
    if d == 0 || d > bound {
        return Err(Error::config(format!(
            "whitening dimension {d} must lie in 1..={bound} (min(N−1, D) with N={n}, D={dim})"
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::config(format!("whitening eps must be positive, got {eps}")));
    }
    let mut mean = vec![0.0f64; dim];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(set.row(i)) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let x = DMatrix::from_fn(n, dim, |i, j| set.row(i)[j] as f64 - mean[j]);
    let mut axes = principal_axes(&x, d, eps, n < dim);

    let mut projection = Vec::with_capacity(d * dim);
    let mut eigenvalues = Vec::with_capacity(d);
    for (lambda, axis) in &mut axes {
        // Deterministic orientation: the largest-magnitude entry is positive.
        let pivot = axis
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1.abs() { (i, v) } else { best });
        let sign = if pivot.1 < 0.0 { -1.0 } else { 1.0 };
        let scale = if *lambda > eps { sign / (*lambda + eps).sqrt() } else { 0.0 };
        projection.extend(axis.iter().map(|a| a * scale));
        eigenvalues.push(*lambda);
    }
    Ok(WhitenTransform {
        mean,
        projection,
        eigenvalues,
        eps,
    })
}

/// Leading `d` (eigenvalue, unit axis) pairs of the sample covariance of the
/// centred rows of `x`, descending. With `via_gram` the `N×N` Gram matrix is
/// decomposed and its eigenvectors mapped back through `xᵀ`.
fn principal_axes(x: &DMatrix<f64>, d: usize, eps: f64, via_gram: bool) -> Vec<(f64, Vec<f64>)> {
    let (n, dim) = x.shape();
    let denom = (n - 1) as f64;
    let descending = |values: &nalgebra::DVector<f64>| {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
        order.truncate(d);
        order
    };
    if via_gram {
        let eig = SymmetricEigen::new((x * x.transpose()) / denom);
        descending(&eig.eigenvalues)
            .into_iter()
            .map(|k| {
                let lambda = eig.eigenvalues[k].max(0.0);
                let v = x.transpose() * eig.eigenvectors.column(k);
                let norm = v.norm();
                let axis = if norm > 0.0 && lambda > eps {
                    v.iter().map(|a| a / norm).collect()
                } else {
                    vec![0.0; dim]
                };
                (lambda, axis)
            })
            .collect()
    } else {
        let eig = SymmetricEigen::new((x.transpose() * x) / denom);
        descending(&eig.eigenvalues)
            .into_iter()
            .map(|k| {
                let lambda = eig.eigenvalues[k].max(0.0);
                (lambda, eig.eigenvectors.column(k).iter().copied().collect())
            })
            .collect()
    }
}

/// Whitens every row of `set` and re-normalizes to unit length.
pub fn apply_whiten(t: &WhitenTransform, set: &DescriptorSet) -> Result<DescriptorSet> {
    let d = t.output_dim();
    let mut data = Vec::with_capacity(set.len() * d);
    for i in 0..set.len() {
        let y = t.project(set.row(i))?;
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        data.extend(y.iter().map(|v| (v * inv) as f32));
    }
    let mut out = DescriptorSet::new(d, data, set.records().to_vec())?;
    out.meta = set.meta.clone();
    out.meta.insert("whiten_dim".into(), d.to_string());
    Ok(out)
}
