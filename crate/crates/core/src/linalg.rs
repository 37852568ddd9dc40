//! Dense row-major matrices, PCA, and the vector normalizations shared by the
//! Fisher-Vector, hybrid and transfer pipelines.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Stacks equally long rows. An empty iterator gives a `0 × 0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: impl IntoIterator<Item = R>) -> Result<Self> {
        let mut data = Vec::new();
        let mut cols = None;
        let mut n = 0;
        for r in rows {
            let r = r.as_ref();
            match cols {
                None => cols = Some(r.len()),
                Some(c) if c != r.len() => {
                    return Err(Error::DimensionMismatch {
                        expected: c,
                        found: r.len(),
                    })
                }
                _ => {}
            }
            data.extend_from_slice(r);
            n += 1;
        }
        Ok(Matrix {
            rows: n,
            cols: cols.unwrap_or(0),
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn l2_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Scales `x` to unit L2 norm in place; the zero vector is left unchanged.
pub fn l2_normalize_in_place(x: &mut [f64]) {
    let n = l2_norm(x);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
}

pub fn l2_normalize(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    l2_normalize_in_place(&mut out);
    out
}

/// Signed square root, `sign(x)·sqrt(|x|)`, component-wise in place.
pub fn power_normalize_in_place(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.signum() * v.abs().sqrt());
}

pub fn power_normalize(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    power_normalize_in_place(&mut out);
    out
}

/// Principal component projection without whitening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// `out_dim × input_dim`, orthonormal rows.
    components: Matrix,
    explained_variances: Vec<f64>,
}

impl PcaModel {
    /// Assembles a model from parts, checking shapes and variance ordering.
    /// Orthonormality is the caller's responsibility; see
    /// [`PcaModel::orthonormality_error`].
    pub fn from_parts(
        mean: Vec<f64>,
        components: Matrix,
        explained_variances: Vec<f64>,
    ) -> Result<Self> {
        if components.cols() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: components.cols(),
            });
        }
        if explained_variances.len() != components.rows() {
            return Err(Error::DimensionMismatch {
                expected: components.rows(),
                found: explained_variances.len(),
            });
        }
        if explained_variances.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("explained variances must be non-negative"));
        }
        if explained_variances.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::invalid("explained variances must be non-increasing"));
        }
        Ok(PcaModel {
            mean,
            components,
            explained_variances,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.components.rows()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &Matrix {
        &self.components
    }

    pub fn explained_variances(&self) -> &[f64] {
        &self.explained_variances
    }

    /// Largest deviation of `C·Cᵀ` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.out_dim();
        let mut worst: f64 = 0.0;
        for i in 0..k {
            for j in i..k {
                let d = dot(self.components.row(i), self.components.row(j));
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d - target).abs());
            }
        }
        worst
    }

    /// `components · (x − mean)`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self
            .components
            .iter_rows()
            .map(|c| dot(c, &centered))
            .collect())
    }

    /// `mean + componentsᵀ · y`.
    pub fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.out_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.out_dim(),
                found: y.len(),
            });
        }
        let mut out = self.mean.clone();
        for (c, &w) in self.components.iter_rows().zip(y) {
            out.iter_mut().zip(c).for_each(|(o, ci)| *o += w * ci);
        }
        Ok(out)
    }
}

pub fn pca_project(x: &[f64], model: &PcaModel) -> Result<Vec<f64>> {
    model.project(x)
}

/// Relative eigenvalue cutoff below which a direction counts as rank-deficient.
const RANK_TOL: f64 = 1e-12;

/// Fits PCA by eigendecomposition of the sample covariance, or of the Gram
/// matrix when there are fewer samples than dimensions.
///
/// Each component's largest-magnitude entry is made positive so model files
/// are reproducible.
pub fn fit_pca(data: &Matrix, out_dim: usize) -> Result<PcaModel> {
    let n = data.rows();
    let d = data.cols();
    if n < 2 {
        return Err(Error::invalid("PCA needs at least 2 samples"));
    }
    if out_dim == 0 {
        return Err(Error::invalid("PCA output dimension must be >= 1"));
    }
    let structural = (n - 1).min(d);
    if out_dim > structural {
        return Err(Error::RankDeficient {
            requested: out_dim,
            achievable: structural,
        });
    }
    if data.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("PCA input contains non-finite values"));
    }

    let mut mean = vec![0.0; d];
    for r in data.iter_rows() {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let xc = DMatrix::from_fn(n, d, |i, j| data.get(i, j) - mean[j]);
    let denom = (n - 1) as f64;

    let (values, vectors) = if n > d {
        let cov = xc.tr_mul(&xc) / denom;
        let eig = SymmetricEigen::new(cov);
        let order = descending_order(eig.eigenvalues.as_slice());
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let vecs: Vec<Vec<f64>> = order
            .iter()
            .take(out_dim)
            .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
            .collect();
        (vals, vecs)
    } else {
        let gram = &xc * xc.transpose() / denom;
        let eig = SymmetricEigen::new(gram);
        let order = descending_order(eig.eigenvalues.as_slice());
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let top = vals[0].max(0.0);
        let vecs: Vec<Vec<f64>> = order
            .iter()
            .take(out_dim)
            .map(|&i| {
                let lam = eig.eigenvalues[i];
                if lam <= top * RANK_TOL || lam <= 0.0 {
                    return vec![0.0; d];
                }
                let u = eig.eigenvectors.column(i);
                let v = xc.tr_mul(&u);
                let scale = 1.0 / (lam * denom).sqrt();
                v.iter().map(|x| x * scale).collect()
            })
            .collect();
        (vals, vecs)
    };

    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let rank = values.iter().filter(|&&v| top > 0.0 && v > top * RANK_TOL).count();
    if rank < out_dim {
        return Err(Error::RankDeficient {
            requested: out_dim,
            achievable: rank,
        });
    }

    let mut comps = Vec::with_capacity(out_dim * d);
    for mut v in vectors {
        fix_sign(&mut v);
        comps.extend_from_slice(&v);
    }
    let variances = values[..out_dim].iter().map(|v| v.max(0.0)).collect();
    PcaModel::from_parts(mean, Matrix::new(out_dim, d, comps)?, variances)
}

fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}
