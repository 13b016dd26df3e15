//! Dual singular value decomposition of a data matrix and the quantities built
//! on it: synchronized biplot coordinates, S-approximations, projection content
//! and approximation errors.
//!
//! With `X` the p×N matrix of a map `L: R^N -> R^p`, a dual system holds
//! singular values `λ_1 >= ... >= λ_r > 0`, sample-side vectors `u^k` in `R^N`
//! and variable-side vectors `v^k` in `R^p` with `X u^k = λ_k v^k` and
//! `Xᵀ v^k = λ_k u^k`, so that `X = V diag(λ) Uᵀ`.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RANK_TOL: f64 = 1e-12;

/// Singular values within this relative distance of each other are treated as
/// one degenerate cluster when ordering the basis.
const CLUSTER_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DualSvdSystem {
    singular_values: Vec<f64>,
    /// N×r, column k is `u^k`.
    sample_basis: DMatrix<f64>,
    /// p×r, column k is `v^k`.
    variable_basis: DMatrix<f64>,
}

/// Compute the dual system of `x`, keeping singular values above
/// `rank_tol · λ_1`.
///
/// Signs are fixed so the largest-magnitude coordinate of every `v^k` is
/// positive (first such coordinate on ties); `u^k` flips with it.
pub fn compute_dual_svd(x: &DMatrix<f64>, rank_tol: f64) -> Result<DualSvdSystem> {
    if !(rank_tol > 0.0 && rank_tol < 1.0) {
        return Err(Error::InvalidParameter(format!("rank_tol must lie in (0, 1), got {rank_tol}")));
    }
    if x.is_empty() {
        return Err(Error::Degenerate("empty matrix".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("matrix has non-finite entries".into()));
    }
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("all-zero matrix has rank 0".into()));
    }

    let xf = faer::Mat::<f64>::from_fn(x.nrows(), x.ncols(), |j, k| x[(j, k)]);
    let svd = xf
        .thin_svd()
        .map_err(|_| Error::Degenerate("singular value iteration did not converge".into()))?;
    let (left, right, sigma) = (svd.U(), svd.V(), svd.S().column_vector());

    let top = (0..sigma.nrows()).map(|i| sigma[i]).fold(0.0, f64::max);
    let (p, n) = x.shape();
    let mut triples: Vec<(f64, DVector<f64>, DVector<f64>)> = (0..sigma.nrows())
        .map(|i| (i, sigma[i]))
        .filter(|&(_, s)| s > rank_tol * top)
        .map(|(i, s)| {
            let mut v = DVector::from_fn(p, |j, _| left[(j, i)]);
            let mut u = DVector::from_fn(n, |k, _| right[(k, i)]);
            let pivot = (1..v.len()).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
            if v[pivot] < 0.0 {
                v.neg_mut();
                u.neg_mut();
            }
            (s, u, v)
        })
        .collect();
    if triples.is_empty() {
        return Err(Error::Degenerate("no singular value above the rank threshold".into()));
    }

    triples.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Within clusters of equal singular values the basis is arbitrary; order it
    // lexicographically by the sign-fixed variable vector.
    let mut start = 0;
    while start < triples.len() {
        let mut end = start + 1;
        while end < triples.len() && triples[end - 1].0 - triples[end].0 <= CLUSTER_TOL * top {
            end += 1;
        }
        if end - start > 1 {
            triples[start..end].sort_by(|a, b| lexicographic(&a.2, &b.2));
        }
        start = end;
    }

    let r = triples.len();
    let singular_values = triples.iter().map(|t| t.0).collect();
    let sample_basis = DMatrix::from_fn(n, r, |k, m| triples[m].1[k]);
    let variable_basis = DMatrix::from_fn(p, r, |j, m| triples[m].2[j]);
    Ok(DualSvdSystem {
        singular_values,
        sample_basis,
        variable_basis,
    })
}

fn lexicographic(a: &DVector<f64>, b: &DVector<f64>) -> Ordering {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Squared singular values of `x` (all of them, including zeros), largest first.
///
/// Computed from the eigenvalues of the smaller Gram matrix `XᵀX` or `XXᵀ`;
/// cheaper than [`compute_dual_svd`] when only the spectrum is needed.
pub fn squared_singular_values(x: &DMatrix<f64>) -> Vec<f64> {
    let gram = if x.nrows() >= x.ncols() {
        x.tr_mul(x)
    } else {
        x * x.transpose()
    };
    let mut eig: Vec<f64> = gram
        .symmetric_eigenvalues()
        .iter()
        .map(|&e| e.max(0.0))
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig
}

/// A non-empty, sorted set of 1-based component indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::InvalidParameter("index set is empty".into()));
        }
        if indices[0] == 0 {
            return Err(Error::InvalidParameter("component indices start at 1".into()));
        }
        Ok(IndexSet(indices))
    }

    /// `{1, ..., s}`.
    pub fn leading(s: usize) -> Result<Self> {
        Self::new((1..=s).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("non-empty")
    }

    pub fn contains(&self, m: usize) -> bool {
        self.0.binary_search(&m).is_ok()
    }

    fn check(&self, rank: usize) -> Result<()> {
        if self.max() > rank {
            Err(Error::IndexOutOfRange {
                index: self.max(),
                rank,
            })
        } else {
            Ok(())
        }
    }

    /// Parse `"1,2,3"`.
    pub fn parse(text: &str) -> Result<Self> {
        let indices = text
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidParameter(format!("bad component index `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(indices)
    }
}

impl TryFrom<Vec<usize>> for IndexSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        IndexSet::new(v)
    }
}

impl From<IndexSet> for Vec<usize> {
    fn from(s: IndexSet) -> Self {
        s.0
    }
}

/// Synchronized coordinates for one index set.
///
/// Row `k` of `sample_coords` is `((L(e_k), v^m))_{m∈S}` and row `j` of
/// `variable_coords` is `((L*(f_j), u^m))_{m∈S}`. Pairing a variable row with a
/// sample row under [`lambda_inner_product`] with `weights` gives `X^S_{jk}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiplotCoords {
    pub components: IndexSet,
    pub sample_coords: DMatrix<f64>,
    pub variable_coords: DMatrix<f64>,
    pub weights: Vec<f64>,
}

impl BiplotCoords {
    pub fn pairing(&self, variable: usize, sample: usize) -> f64 {
        let a: Vec<f64> = self.variable_coords.row(variable).iter().copied().collect();
        let b: Vec<f64> = self.sample_coords.row(sample).iter().copied().collect();
        lambda_inner_product(&a, &b, &self.weights)
    }
}

/// `Σ a_m b_m / λ_m`.
pub fn lambda_inner_product(a: &[f64], b: &[f64], weights: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "coordinate lengths differ");
    assert_eq!(a.len(), weights.len(), "weight length differs");
    a.iter()
        .zip(b)
        .zip(weights)
        .map(|((x, y), w)| x * y / w)
        .sum()
}

impl DualSvdSystem {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `(p, N)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.variable_basis.nrows(), self.sample_basis.nrows())
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn sample_basis(&self) -> &DMatrix<f64> {
        &self.sample_basis
    }

    pub fn variable_basis(&self) -> &DMatrix<f64> {
        &self.variable_basis
    }

    /// `V diag(λ) Uᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.variable_basis.clone();
        for (m, &l) in self.singular_values.iter().enumerate() {
            scaled.column_mut(m).scale_mut(l);
        }
        scaled * self.sample_basis.transpose()
    }

    pub fn biplot_coordinates(&self, s: &IndexSet) -> Result<BiplotCoords> {
        s.check(self.rank())?;
        let cols: Vec<usize> = s.indices().iter().map(|m| m - 1).collect();
        let weights: Vec<f64> = cols.iter().map(|&m| self.singular_values[m]).collect();
        let mut sample_coords = self.sample_basis.select_columns(&cols);
        let mut variable_coords = self.variable_basis.select_columns(&cols);
        for (c, &w) in weights.iter().enumerate() {
            sample_coords.column_mut(c).scale_mut(w);
            variable_coords.column_mut(c).scale_mut(w);
        }
        Ok(BiplotCoords {
            components: s.clone(),
            sample_coords,
            variable_coords,
            weights,
        })
    }

    /// The S-approximative matrix `X^S`, assembled from the biplot pairing.
    pub fn approx_entries(&self, s: &IndexSet) -> Result<DMatrix<f64>> {
        let coords = self.biplot_coordinates(s)?;
        let mut weighted = coords.variable_coords.clone();
        for (c, &w) in coords.weights.iter().enumerate() {
            weighted.column_mut(c).unscale_mut(w);
        }
        Ok(weighted * coords.sample_coords.transpose())
    }

    /// L²-projection content `Σ_{i∈S} λ_i² / Σ_i λ_i²`.
    pub fn projection_content(&self, s: &IndexSet) -> Result<f64> {
        s.check(self.rank())?;
        Ok(projection_content_of_spectrum(
            &self.singular_values.iter().map(|l| l * l).collect::<Vec<_>>(),
            s,
        ))
    }

    /// `(‖X − X^S‖_F, max_{i∉S} λ_i)`; both zero when S is the full index set.
    pub fn approximation_error(&self, s: &IndexSet) -> Result<ApproximationError> {
        s.check(self.rank())?;
        let rest = self
            .singular_values
            .iter()
            .enumerate()
            .filter(|(i, _)| !s.contains(i + 1))
            .map(|(_, &l)| l);
        let (sq, sup) = rest.fold((0.0, 0.0f64), |(sq, sup), l| (sq + l * l, sup.max(l)));
        Ok(ApproximationError {
            frobenius: sq.sqrt(),
            sup_bound: sup,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproximationError {
    pub frobenius: f64,
    pub sup_bound: f64,
}

/// Projection content from a list of squared singular values (largest first).
/// Indices beyond the list contribute nothing.
pub fn projection_content_of_spectrum(squared: &[f64], s: &IndexSet) -> f64 {
    let total: f64 = squared.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let captured: f64 = s
        .indices()
        .iter()
        .filter_map(|&m| squared.get(m - 1))
        .sum();
    captured / total
}

#[derive(Serialize, Deserialize)]
struct SystemRepr {
    dims: (usize, usize),
    rank: usize,
    singular_values: Vec<f64>,
    /// N×r, row-major.
    sample_basis: Vec<Vec<f64>>,
    /// p×r, row-major.
    variable_basis: Vec<Vec<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], ncols: usize) -> std::result::Result<DMatrix<f64>, String> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged basis rows".into());
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl Serialize for DualSvdSystem {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SystemRepr {
            dims: self.dims(),
            rank: self.rank(),
            singular_values: self.singular_values.clone(),
            sample_basis: rows(&self.sample_basis),
            variable_basis: rows(&self.variable_basis),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DualSvdSystem {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = SystemRepr::deserialize(d)?;
        let r = repr.singular_values.len();
        if repr.rank != r || repr.sample_basis.len() != repr.dims.1 || repr.variable_basis.len() != repr.dims.0 {
            return Err(D::Error::custom("inconsistent dual system dimensions"));
        }
        Ok(DualSvdSystem {
            singular_values: repr.singular_values,
            sample_basis: from_rows(&repr.sample_basis, r).map_err(D::Error::custom)?,
            variable_basis: from_rows(&repr.variable_basis, r).map_err(D::Error::custom)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn diag21() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0])
    }

    #[test]
    fn diagonal_matrix_gives_canonical_basis() {
        let s = compute_dual_svd(&diag21(), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(s.singular_values(), &[2.0, 1.0]);
        assert_eq!(s.variable_basis(), &DMatrix::identity(2, 2));
        assert_eq!(s.sample_basis(), &DMatrix::identity(2, 2));
        assert_eq!(s.reconstruct(), diag21());
    }

    #[test]
    fn rank_one_column_matrix() {
        // XᵀX = diag(25, 0): λ₁ = 5, u¹ = e₁, v¹ = X u¹ / 5 = (3/5, 4/5).
        let x = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 4.0, 0.0]);
        let s = compute_dual_svd(&x, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(s.rank(), 1);
        assert!(close(s.singular_values()[0], 5.0, 1e-14));
        assert!(close(s.variable_basis()[(0, 0)], 0.6, 1e-14));
        assert!(close(s.variable_basis()[(1, 0)], 0.8, 1e-14));
        assert!(close(s.sample_basis()[(0, 0)], 1.0, 1e-14));
        assert!(close(s.sample_basis()[(1, 0)], 0.0, 1e-14));
        assert!((s.reconstruct() - x).norm() < 1e-14);
    }

    #[test]
    fn identity_has_flat_spectrum() {
        let x = DMatrix::<f64>::identity(3, 3);
        let s = compute_dual_svd(&x, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(s.rank(), 3);
        for &l in s.singular_values() {
            assert!(close(l, 1.0, 1e-14));
        }
        let u = s.sample_basis();
        assert!((u.tr_mul(u) - DMatrix::identity(3, 3)).norm() < 1e-13);
        assert!((s.reconstruct() - x).norm() < 1e-13);
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        let err = compute_dual_svd(&DMatrix::zeros(3, 2), DEFAULT_RANK_TOL).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn rejects_bad_tolerance() {
        assert!(compute_dual_svd(&diag21(), 0.0).is_err());
        assert!(compute_dual_svd(&diag21(), 1.0).is_err());
    }

    #[test]
    fn biplot_single_component_on_diagonal() {
        let s = compute_dual_svd(&diag21(), DEFAULT_RANK_TOL).unwrap();
        let b = s.biplot_coordinates(&IndexSet::new(vec![1]).unwrap()).unwrap();
        assert_eq!(b.sample_coords[(0, 0)], 2.0);
        assert_eq!(b.variable_coords[(0, 0)], 2.0);
        assert_eq!(b.pairing(0, 0), 2.0);
        assert_eq!(b.pairing(1, 1), 0.0);
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let s = compute_dual_svd(&diag21(), DEFAULT_RANK_TOL).unwrap();
        let err = s.biplot_coordinates(&IndexSet::new(vec![3]).unwrap()).unwrap_err();
        assert_eq!(err, Error::IndexOutOfRange { index: 3, rank: 2 });
        assert!(IndexSet::new(vec![]).is_err());
        assert!(IndexSet::new(vec![0, 1]).is_err());
    }

    #[test]
    fn lambda_product_examples() {
        assert_eq!(lambda_inner_product(&[2.0, 0.0], &[2.0, 0.0], &[2.0, 1.0]), 2.0);
        assert_eq!(lambda_inner_product(&[2.0, 1.0], &[2.0, 1.0], &[2.0, 1.0]), 3.0);
        assert_eq!(lambda_inner_product(&[1.0, 0.0], &[0.0, 1.0], &[2.0, 1.0]), 0.0);
    }

    #[test]
    fn approx_entries_on_diagonal() {
        let s = compute_dual_svd(&diag21(), DEFAULT_RANK_TOL).unwrap();
        let x1 = s.approx_entries(&IndexSet::new(vec![1]).unwrap()).unwrap();
        assert_eq!(x1, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        let full = s.approx_entries(&IndexSet::leading(2).unwrap()).unwrap();
        assert_eq!(full, diag21());
    }

    #[test]
    fn projection_content_and_error_on_diagonal() {
        let s = compute_dual_svd(&diag21(), DEFAULT_RANK_TOL).unwrap();
        let one = IndexSet::new(vec![1]).unwrap();
        assert!(close(s.projection_content(&one).unwrap(), 0.8, 1e-15));
        assert_eq!(s.projection_content(&IndexSet::leading(2).unwrap()).unwrap(), 1.0);
        let e = s.approximation_error(&one).unwrap();
        assert_eq!((e.frobenius, e.sup_bound), (1.0, 1.0));
        let e = s.approximation_error(&IndexSet::leading(2).unwrap()).unwrap();
        assert_eq!((e.frobenius, e.sup_bound), (0.0, 0.0));
    }

    #[test]
    fn rank_one_content_is_one() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        let s = compute_dual_svd(&x, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(s.rank(), 1);
        assert_eq!(s.projection_content(&IndexSet::leading(1).unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn spectrum_matches_svd() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.0]);
        let s = compute_dual_svd(&x, DEFAULT_RANK_TOL).unwrap();
        let sq = squared_singular_values(&x);
        for (a, l) in sq.iter().zip(s.singular_values()) {
            assert!(close(*a, l * l, 1e-12));
        }
    }

    #[test]
    fn json_round_trip() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.1]);
        let s = compute_dual_svd(&x, DEFAULT_RANK_TOL).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: DualSvdSystem = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rank_deficient_square_roots_reconstruct() {
        use crate::mds::{gram_from_points, reconstruct_points};
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        use rand_distr::StandardNormal;

        // PSD square roots of low-rank Gram matrices have many exact zero
        // singular values, which trip up some bidiagonal SVD implementations.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let dim = rng.random_range(2..=5);
            let n = rng.random_range(dim + 2..=20);
            let x = DMatrix::from_fn(dim, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let root = reconstruct_points(&gram_from_points(&x).unwrap(), n).unwrap();
            let sys = compute_dual_svd(&root, DEFAULT_RANK_TOL).unwrap();
            assert_eq!(sys.rank(), dim);
            assert!((sys.reconstruct() - &root).norm() <= 1e-10 * root.norm());
        }
    }
}
