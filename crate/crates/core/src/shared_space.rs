//! Joint object/category embedding matrix, z-score standardization and the
//! truncated SVD score projection `scores = U_k Σ_k`.

use nalgebra::DMatrix;

use crate::encoders::Embedding;
use crate::error::{Error, Result};

/// Guard for columns whose population std vanishes.
pub const STD_EPS: f64 = 1e-8;

/// Objects stacked above categories: rows `0..N` then `N..N+C`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMatrix {
    pub rows: DMatrix<f64>,
    pub n_objects: usize,
    pub n_categories: usize,
}

pub fn concat(objects: &[Embedding], categories: &[Embedding]) -> Result<JointMatrix> {
    if categories.is_empty() {
        return Err(Error::invalid("joint matrix needs at least one category"));
    }
    let dim = categories[0].dim();
    let all = objects.iter().chain(categories);
    if let Some((i, e)) = all.clone().enumerate().find(|(_, e)| e.dim() != dim) {
        return Err(Error::invalid(format!("row {i} has dim {}, expected {dim}", e.dim())));
    }
    let n = objects.len() + categories.len();
    let rows = DMatrix::from_row_iterator(n, dim, all.flat_map(|e| e.values().iter().map(|&v| v as f64)));
    Ok(JointMatrix { rows, n_objects: objects.len(), n_categories: categories.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub z: DMatrix<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Per-column `(x - mean) / max(std, eps)` with the population std.
/// Exactly constant columns become zeros.
pub fn zscore(m: &DMatrix<f64>) -> Result<Standardized> {
    let (rows, cols) = m.shape();
    if rows < 2 {
        return Err(Error::invalid(format!("z-score needs at least 2 rows, got {rows}")));
    }
    let mut z = DMatrix::zeros(rows, cols);
    let mut means = Vec::with_capacity(cols);
    let mut stds = Vec::with_capacity(cols);
    for j in 0..cols {
        let col = m.column(j);
        let mean = col.sum() / rows as f64;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / rows as f64;
        let std = var.sqrt();
        means.push(mean);
        stds.push(std);
        let first = col[0];
        if col.iter().all(|&x| x == first) {
            continue;
        }
        let scale = std.max(STD_EPS);
        for i in 0..rows {
            z[(i, j)] = (col[i] - mean) / scale;
        }
    }
    Ok(Standardized { z, means, stds })
}

/// Truncated SVD of a standardized matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdScores {
    /// `U_k Σ_k`, rows x k.
    pub scores: DMatrix<f64>,
    /// All singular values, nonincreasing.
    pub singular_values: Vec<f64>,
    /// Left singular vectors, rows x k.
    pub u: DMatrix<f64>,
    /// Right singular vectors, cols x k.
    pub v: DMatrix<f64>,
}

impl SvdScores {
    pub fn k(&self) -> usize {
        self.scores.ncols()
    }
}

/// Computes `Z = U Σ Vᵀ` and keeps the top `k` components.
///
/// Each retained column is sign-flipped so that its largest-magnitude score
/// is positive, which makes the output reproducible.
pub fn svd_scores(z: &DMatrix<f64>, k: usize) -> Result<SvdScores> {
    let (rows, cols) = z.shape();
    let rank_cap = rows.min(cols);
    if k < 1 || k > rank_cap {
        return Err(Error::invalid(format!("k = {k} outside 1..={rank_cap} for a {rows}x{cols} matrix")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("SVD input contains non-finite values".into()));
    }
    let svd = faer::Mat::<f64>::from_fn(rows, cols, |i, j| z[(i, j)])
        .thin_svd()
        .map_err(|e| Error::Numeric(format!("SVD of {rows}x{cols} matrix did not converge: {e:?}")))?;
    let (u_full, v_full) = (svd.U(), svd.V());
    let sv: Vec<f64> = (0..rank_cap).map(|i| svd.S()[i]).collect();

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));

    let singular_values: Vec<f64> = order.iter().map(|&i| sv[i]).collect();
    let mut u = DMatrix::zeros(rows, k);
    let mut v = DMatrix::zeros(cols, k);
    let mut scores = DMatrix::zeros(rows, k);
    for (dst, &src) in order.iter().take(k).enumerate() {
        let s = sv[src];
        let ucol: Vec<f64> = (0..rows).map(|i| u_full[(i, src)]).collect();
        let pivot = ucol
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |best, (i, &x)| if x.abs() > best.1.abs() { (i, x) } else { best })
            .1;
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..rows {
            u[(i, dst)] = sign * ucol[i];
            scores[(i, dst)] = sign * ucol[i] * s;
        }
        for j in 0..cols {
            v[(j, dst)] = sign * v_full[(j, src)];
        }
    }
    Ok(SvdScores { scores, singular_values, u, v })
}

/// `k` clamped to what a rows x cols matrix supports; the flag reports clamping.
pub fn effective_k(requested: usize, rows: usize, cols: usize) -> (usize, bool) {
    let cap = rows.min(cols);
    let k = requested.clamp(1, cap.max(1));
    (k, k != requested)
}

/// Standardization statistics together with the retained scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentScores {
    pub svd: SvdScores,
    pub column_mean: Vec<f64>,
    pub column_std: Vec<f64>,
    pub n_objects: usize,
    pub n_categories: usize,
}

impl LatentScores {
    pub fn k(&self) -> usize {
        self.svd.k()
    }

    pub fn scores(&self) -> &DMatrix<f64> {
        &self.svd.scores
    }
}

/// z-score then SVD of a joint matrix, with `k` clamped to the matrix rank cap.
pub fn project(joint: &JointMatrix, k: usize) -> Result<LatentScores> {
    let (rows, cols) = joint.rows.shape();
    let (k_eff, clamped) = effective_k(k, rows, cols);
    if clamped {
        log::warn!("k = {k} clamped to {k_eff} for a {rows}x{cols} joint matrix");
    }
    let std = zscore(&joint.rows)?;
    let svd = svd_scores(&std.z, k_eff)?;
    Ok(LatentScores {
        svd,
        column_mean: std.means,
        column_std: std.stds,
        n_objects: joint.n_objects,
        n_categories: joint.n_categories,
    })
}

/// Splits score rows into the object block and the category block.
pub fn split_scores(scores: &DMatrix<f64>, n_objects: usize, n_categories: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if n_objects + n_categories != scores.nrows() {
        return Err(Error::invalid(format!(
            "{n_objects} objects + {n_categories} categories != {} score rows",
            scores.nrows()
        )));
    }
    let objects = scores.rows(0, n_objects).into_owned();
    let categories = scores.rows(n_objects, n_categories).into_owned();
    Ok((objects, categories))
}
