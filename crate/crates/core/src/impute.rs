//! K-nearest-neighbor imputation of missing entries.
//!
//! A missing entry of variable `j` in sample `k` is replaced by the plain
//! average of sample `k`'s values over the `k` variables nearest to `j`.
//! Distances are root-mean-square differences over the coordinates both
//! variables observe; only variables observed in sample `k` and sharing at
//! least one observed coordinate with `j` are candidates.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

pub const DEFAULT_NEIGHBORS: usize = 10;

/// An entry that fell back to the variable mean because fewer than `k`
/// candidate neighbors were available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeWarning {
    pub variable: String,
    pub sample: String,
    pub candidates: usize,
}

#[derive(Debug, Clone)]
pub struct Imputed {
    pub dataset: Dataset,
    pub warnings: Vec<ImputeWarning>,
}

fn rms_distance(values: &DMatrix<f64>, missing: &DMatrix<bool>, a: usize, b: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in 0..values.ncols() {
        if !missing[(a, k)] && !missing[(b, k)] {
            let d = values[(a, k)] - values[(b, k)];
            sum += d * d;
            count += 1;
        }
    }
    (count > 0).then(|| (sum / count as f64).sqrt())
}

pub fn impute_knn(d: &Dataset, k: usize) -> Result<Imputed> {
    if k == 0 {
        return Err(Error::InvalidParameter("neighbor count must be at least 1".into()));
    }
    let (p, n) = (d.p(), d.n());
    let values = d.values();
    let missing = d.missing();

    let mut means = Vec::with_capacity(p);
    for j in 0..p {
        let observed: Vec<f64> = (0..n).filter(|&c| !missing[(j, c)]).map(|c| values[(j, c)]).collect();
        if observed.is_empty() {
            return Err(Error::NoObservedValues(d.variable_ids()[j].clone()));
        }
        means.push(observed.iter().sum::<f64>() / observed.len() as f64);
    }
    if !d.has_missing() {
        return Ok(Imputed {
            dataset: d.clone(),
            warnings: Vec::new(),
        });
    }

    let mut out = values.clone();
    let mut warnings = Vec::new();
    for j in 0..p {
        let holes: Vec<usize> = (0..n).filter(|&c| missing[(j, c)]).collect();
        if holes.is_empty() {
            continue;
        }
        // Distances from j to every other variable, computed once per variable.
        let distances: Vec<Option<f64>> = (0..p)
            .map(|i| if i == j { None } else { rms_distance(values, missing, j, i) })
            .collect();
        for c in holes {
            let mut candidates: Vec<(f64, usize)> = distances
                .iter()
                .enumerate()
                .filter_map(|(i, dist)| dist.filter(|_| !missing[(i, c)]).map(|dist| (dist, i)))
                .collect();
            if candidates.len() < k {
                log::warn!(
                    "variable `{}`, sample `{}`: {} candidate neighbors < k={k}; using the variable mean",
                    d.variable_ids()[j],
                    d.sample_ids()[c],
                    candidates.len()
                );
                warnings.push(ImputeWarning {
                    variable: d.variable_ids()[j].clone(),
                    sample: d.sample_ids()[c].clone(),
                    candidates: candidates.len(),
                });
                out[(j, c)] = means[j];
                continue;
            }
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let sum: f64 = candidates[..k].iter().map(|&(_, i)| values[(i, c)]).sum();
            out[(j, c)] = sum / k as f64;
        }
    }
    Ok(Imputed {
        dataset: Dataset::complete(out, d.variable_ids().to_vec(), d.sample_ids().to_vec())?,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{parse_matrix, MatrixFormat};

    #[test]
    fn complete_input_is_returned_unchanged() {
        let d = Dataset::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let out = impute_knn(&d, 10).unwrap();
        assert!(out.dataset.bitwise_eq(&d));
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn fully_missing_variable_is_an_error() {
        let d = parse_matrix("id\ta\tb\ng1\tNA\tNA\ng2\t1\t2\n", &MatrixFormat::default()).unwrap();
        assert_eq!(impute_knn(&d, 1).unwrap_err(), Error::NoObservedValues("g1".into()));
    }

    #[test]
    fn nearest_neighbor_value_is_used() {
        // g1 tracks g2 closely; g3 is far away.
        let text = "id\ta\tb\tc\ng1\t1\t2\tNA\ng2\t1.1\t2.1\t3.1\ng3\t10\t20\t30\n";
        let d = parse_matrix(text, &MatrixFormat::default()).unwrap();
        let out = impute_knn(&d, 1).unwrap();
        assert_eq!(out.dataset.values()[(0, 2)], 3.1);
        assert!(!out.dataset.has_missing());
    }

    #[test]
    fn too_few_candidates_falls_back_to_mean_with_warning() {
        let text = "id\ta\tb\tc\ng1\t1\t3\tNA\ng2\t1.1\t2.1\t3.1\n";
        let d = parse_matrix(text, &MatrixFormat::default()).unwrap();
        let out = impute_knn(&d, 5).unwrap();
        assert_eq!(out.dataset.values()[(0, 2)], 2.0);
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(out.warnings[0].candidates, 1);
    }

    #[test]
    fn distance_ties_prefer_lower_index() {
        // g2 and g3 are equidistant from g1; k=1 must pick g2.
        let text = "id\ta\tb\tc\ng1\t0\t0\tNA\ng2\t1\t0\t5\ng3\t0\t1\t7\n";
        let d = parse_matrix(text, &MatrixFormat::default()).unwrap();
        let out = impute_knn(&d, 1).unwrap();
        assert_eq!(out.dataset.values()[(0, 2)], 5.0);
    }
}
