//! Unified embedding construction: per-modality standardization,
//! equal-weight concatenation, and PCA reduction.
//!
//! All statistics use the population convention (divide by N) so that
//! results are deterministic and oracle tests can recompute them exactly.

use ndarray::{Array1, Array2, Axis};

use crate::error::{AuditError, Result};
use crate::ingest::Dataset;

/// Fused per-sample embeddings, row i belonging to `sample_ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMatrix {
    pub rows: Array2<f64>,
    pub sample_ids: Vec<String>,
}

/// Per-column statistics captured by `standardize`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub mean: Array1<f64>,
    pub stddev: Array1<f64>,
}

/// Fitted PCA: `components` rows are principal directions (k x D).
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    pub components: Array2<f64>,
    pub explained_variance: Array1<f64>,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.components.ncols()
    }
}

/// Centers and scales each column to mean 0, stddev 1 (population
/// convention). Constant columns become all zeros.
pub fn standardize(matrix: &Array2<f64>) -> Result<(Array2<f64>, ColumnStats)> {
    let n = matrix.nrows();
    if n < 2 {
        return Err(AuditError::InvalidArgument(format!(
            "standardize needs at least 2 rows, got {n}"
        )));
    }
    check_finite(matrix, "standardize input")?;
    let mean = matrix.mean_axis(Axis(0)).expect("non-empty");
    let mut stddev = Array1::zeros(matrix.ncols());
    for (j, col) in matrix.axis_iter(Axis(1)).enumerate() {
        let var = col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n as f64;
        stddev[j] = var.sqrt();
    }
    let mut out = matrix.clone();
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        if stddev[j] > 0.0 {
            col.mapv_inplace(|v| (v - mean[j]) / stddev[j]);
        } else {
            col.fill(0.0);
        }
    }
    Ok((out, ColumnStats { mean, stddev }))
}

/// Builds the unified embedding: each requested modality standardized
/// independently, then concatenated in the requested order.
pub fn fuse(dataset: &Dataset, modalities: &[String], scale: bool) -> Result<FusedMatrix> {
    if modalities.is_empty() {
        return Err(AuditError::InvalidArgument("no modalities requested".into()));
    }
    let n = dataset.len();
    let mut blocks = Vec::with_capacity(modalities.len());
    for modality in modalities {
        let dim = *dataset
            .modality_dims
            .get(modality)
            .ok_or_else(|| AuditError::UnknownModality(modality.clone()))?;
        let mut block = Array2::zeros((n, dim));
        for (i, s) in dataset.samples.iter().enumerate() {
            for (j, v) in s.views[modality].iter().enumerate() {
                block[[i, j]] = *v;
            }
        }
        if scale {
            block = standardize(&block)?.0;
        } else {
            check_finite(&block, &format!("modality '{modality}'"))?;
        }
        blocks.push(block);
    }
    let total_dim: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut rows = Array2::zeros((n, total_dim));
    let mut offset = 0;
    for block in &blocks {
        rows.slice_mut(ndarray::s![.., offset..offset + block.ncols()])
            .assign(block);
        offset += block.ncols();
    }
    Ok(FusedMatrix {
        rows,
        sample_ids: dataset.ids(),
    })
}

/// Fits PCA via eigendecomposition of the (population) covariance matrix.
///
/// Components are ordered by eigenvalue descending, and each is sign-fixed
/// so its largest-magnitude entry is positive.
pub fn fit_pca(matrix: &Array2<f64>, k: usize) -> Result<PcaModel> {
    let (n, d) = matrix.dim();
    if k == 0 || k > n.min(d) {
        return Err(AuditError::InvalidArgument(format!(
            "pca components k={k} out of range 1..={}",
            n.min(d)
        )));
    }
    check_finite(matrix, "pca input")?;

    let mean = matrix.mean_axis(Axis(0)).expect("non-empty");
    let centered = matrix - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / n as f64;

    let cov_na = nalgebra::DMatrix::from_fn(d, d, |r, c| cov[[r, c]]);
    let eigen = cov_na.symmetric_eigen();

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .total_cmp(&eigen.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut components = Array2::zeros((k, d));
    let mut explained_variance = Array1::zeros(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        explained_variance[row] = eigen.eigenvalues[idx].max(0.0);
        let col = eigen.eigenvectors.column(idx);
        let mut max_abs = 0.0;
        let mut max_val = 0.0;
        for &v in col.iter() {
            if v.abs() > max_abs {
                max_abs = v.abs();
                max_val = v;
            }
        }
        let flip = if max_val < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[row, j]] = flip * col[j];
        }
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}

/// Projects rows onto the fitted components: `(x - mean) . components^T`.
pub fn transform_pca(model: &PcaModel, matrix: &Array2<f64>) -> Result<Array2<f64>> {
    if matrix.ncols() != model.input_dim() {
        return Err(AuditError::DimensionMismatch(format!(
            "pca transform expects {} columns, got {}",
            model.input_dim(),
            matrix.ncols()
        )));
    }
    let centered = matrix - &model.mean.view().insert_axis(Axis(0));
    Ok(centered.dot(&model.components.t()))
}

fn check_finite(matrix: &Array2<f64>, what: &str) -> Result<()> {
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(AuditError::NonFinite(what.to_string()));
    }
    Ok(())
}
