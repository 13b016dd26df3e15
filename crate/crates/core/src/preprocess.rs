//! Matrix conditioning: sample centering, variance normalization, variance
//! filtering and group mean-centering. All variances use the N−1 denominator.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::Factor;
use crate::error::{Error, Result};

/// One conditioning step, as recorded in a session log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PreprocessStep {
    Center,
    Standardize,
    VarianceFilter { keep: usize },
    GroupCenter { factor: String },
}

impl PreprocessStep {
    pub fn validate(&self) -> Result<()> {
        match self {
            PreprocessStep::VarianceFilter { keep: 0 } => {
                Err(Error::InvalidParameter("variance filter must keep at least one variable".into()))
            }
            PreprocessStep::GroupCenter { factor } if factor.is_empty() => {
                Err(Error::InvalidParameter("group centering needs a factor name".into()))
            }
            _ => Ok(()),
        }
    }
}

fn require_samples(x: &DMatrix<f64>) -> Result<()> {
    if x.ncols() < 2 {
        return Err(Error::InvalidParameter(format!(
            "needs at least 2 samples, got {}",
            x.ncols()
        )));
    }
    Ok(())
}

pub fn row_means(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.ncols() as f64;
    x.row_iter().map(|r| r.sum() / n).collect()
}

/// Sample variance (N−1 denominator) of every row.
pub fn row_variances(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.ncols();
    x.row_iter()
        .map(|r| {
            if n < 2 {
                return 0.0;
            }
            let mean = r.sum() / n as f64;
            r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
        })
        .collect()
}

/// Subtract every variable's mean across samples.
pub fn center_samples(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_samples(x)?;
    let means = row_means(x);
    Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |j, k| x[(j, k)] - means[j]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub values: DMatrix<f64>,
    /// Indices of the retained rows in the input.
    pub kept: Vec<usize>,
    /// Indices of zero-variance rows removed from the output.
    pub dropped: Vec<usize>,
}

/// Center and scale every row to unit sample variance, dropping constant rows.
pub fn standardize_variables(x: &DMatrix<f64>) -> Result<Standardized> {
    require_samples(x)?;
    let n = x.ncols();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (j, row) in x.row_iter().enumerate() {
        let mean = row.sum() / n as f64;
        let centered: Vec<f64> = row.iter().map(|v| v - mean).collect();
        let var = centered.iter().map(|c| c * c).sum::<f64>() / (n - 1) as f64;
        let scale = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let sd = var.sqrt();
        // Constant up to rounding of the mean.
        if sd <= 1e-13 * scale || sd == 0.0 {
            dropped.push(j);
            continue;
        }
        kept.push(j);
        rows.push(centered.into_iter().map(|c| c / sd).collect());
    }
    if kept.is_empty() {
        return Err(Error::Degenerate("every variable has zero variance".into()));
    }
    let values = DMatrix::from_fn(rows.len(), n, |j, k| rows[j][k]);
    Ok(Standardized {
        values,
        kept,
        dropped,
    })
}

/// Indices of the `keep` rows with the largest sample variance, in input order.
/// Ties at the cutoff go to the lower index.
pub fn variance_filter_indices(x: &DMatrix<f64>, keep: usize) -> Vec<usize> {
    let vars = row_variances(x);
    let mut order: Vec<usize> = (0..vars.len()).collect();
    order.sort_by(|&a, &b| vars[b].total_cmp(&vars[a]).then(a.cmp(&b)));
    order.truncate(keep.min(vars.len()));
    order.sort_unstable();
    order
}

pub fn variance_filter(x: &DMatrix<f64>, keep: usize) -> Result<(DMatrix<f64>, Vec<usize>)> {
    if keep == 0 {
        return Err(Error::InvalidParameter("variance filter must keep at least one variable".into()));
    }
    let kept = variance_filter_indices(x, keep);
    Ok((x.select_rows(&kept), kept))
}

/// Subtract, within each level of `factor`, that level's mean of every variable.
pub fn group_mean_center(x: &DMatrix<f64>, factor: &Factor) -> Result<DMatrix<f64>> {
    if factor.len() != x.ncols() {
        return Err(Error::Dimension(format!(
            "factor `{}` covers {} samples, matrix has {}",
            factor.name,
            factor.len(),
            x.ncols()
        )));
    }
    let mut out = x.clone();
    for level in 0..factor.levels.len() {
        let members = factor.members(level);
        if members.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "level `{}` of factor `{}` has no samples",
                factor.levels[level], factor.name
            )));
        }
        for j in 0..x.nrows() {
            let mean = members.iter().map(|&k| x[(j, k)]).sum::<f64>() / members.len() as f64;
            for &k in &members {
                out[(j, k)] = x[(j, k)] - mean;
            }
        }
    }
    Ok(out)
}

/// Degrees of freedom consumed by a conditioning step: one per centering,
/// one per level for group centering, none for filtering.
pub fn dof_cost(step: &PreprocessStep, levels: usize) -> usize {
    match step {
        PreprocessStep::Center | PreprocessStep::Standardize => 1,
        PreprocessStep::GroupCenter { .. } => levels,
        PreprocessStep::VarianceFilter { .. } => 0,
    }
}
