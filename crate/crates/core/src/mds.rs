//! Distance/covariance duality, point reconstruction from a covariance
//! matrix, projection onto valid covariance structures, k-nearest-neighbor
//! graph geodesics and the resulting ISOMAP embedding.
//!
//! "Covariance" here is the N×N centered Gram matrix `C = YᵀY` of the
//! sample-centered points `Y`, and "distance" the matrix of squared euclidean
//! distances. Valid covariance matrices are exactly the symmetric, positive
//! semidefinite matrices annihilating the all-ones vector.

use std::collections::VecDeque;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::center_samples;
use crate::svd::{compute_dual_svd, DualSvdSystem, DEFAULT_RANK_TOL};

/// Relative tolerance for the structural checks on covariance and distance matrices.
pub const STRUCTURE_TOL: f64 = 1e-10;

pub const DEFAULT_NEIGHBORS: usize = 2;

fn scale_of(m: &DMatrix<f64>) -> f64 {
    m.norm().max(1.0)
}

fn mirror_upper(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for k in 0..j {
            m[(j, k)] = m[(k, j)];
        }
    }
}

fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = eig.eigenvectors.select_columns(&order);
    (values, vectors)
}

/// A valid centered Gram matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DMatrix<f64>", into = "DMatrix<f64>")]
pub struct CovarianceMatrix(DMatrix<f64>);

impl CovarianceMatrix {
    pub fn new(c: DMatrix<f64>) -> Result<Self> {
        Self::check(&c)?;
        Ok(CovarianceMatrix(c))
    }

    fn check(c: &DMatrix<f64>) -> Result<()> {
        let invalid = |reason: String| Error::InvalidMatrix {
            kind: "covariance matrix",
            reason,
        };
        if !c.is_square() || c.nrows() == 0 {
            return Err(invalid(format!("shape {:?} is not square", c.shape())));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite entry".into()));
        }
        let tol = STRUCTURE_TOL * scale_of(c);
        let asym = (c - c.transpose()).amax();
        if asym > tol {
            return Err(invalid(format!("asymmetry {asym:e}")));
        }
        let row_sum = c.column_sum().amax();
        if row_sum > tol {
            return Err(invalid(format!("C·1 has magnitude {row_sum:e}")));
        }
        let min_eig = SymmetricEigen::new(c.clone()).eigenvalues.min();
        if min_eig < -tol {
            return Err(invalid(format!("negative eigenvalue {min_eig:e}")));
        }
        Ok(())
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

impl TryFrom<DMatrix<f64>> for CovarianceMatrix {
    type Error = Error;
    fn try_from(m: DMatrix<f64>) -> Result<Self> {
        Self::new(m)
    }
}

impl From<CovarianceMatrix> for DMatrix<f64> {
    fn from(c: CovarianceMatrix) -> Self {
        c.0
    }
}

/// Squared euclidean distances: symmetric, zero diagonal, non-negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DMatrix<f64>", into = "DMatrix<f64>")]
pub struct DistanceMatrix(DMatrix<f64>);

impl DistanceMatrix {
    pub fn new(d: DMatrix<f64>) -> Result<Self> {
        let invalid = |reason: String| Error::InvalidMatrix {
            kind: "distance matrix",
            reason,
        };
        if !d.is_square() || d.nrows() == 0 {
            return Err(invalid(format!("shape {:?} is not square", d.shape())));
        }
        if d.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite entry".into()));
        }
        let tol = STRUCTURE_TOL * scale_of(&d);
        if (&d - d.transpose()).amax() > tol {
            return Err(invalid("not symmetric".into()));
        }
        if d.diagonal().iter().any(|&v| v != 0.0) {
            return Err(invalid("non-zero diagonal".into()));
        }
        if d.min() < -tol {
            return Err(invalid(format!("negative entry {:e}", d.min())));
        }
        Ok(DistanceMatrix(d))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }
}

impl TryFrom<DMatrix<f64>> for DistanceMatrix {
    type Error = Error;
    fn try_from(m: DMatrix<f64>) -> Result<Self> {
        Self::new(m)
    }
}

impl From<DistanceMatrix> for DMatrix<f64> {
    fn from(d: DistanceMatrix) -> Self {
        d.0
    }
}

/// Centered Gram matrix of the columns of `x`.
pub fn gram_from_points(x: &DMatrix<f64>) -> Result<CovarianceMatrix> {
    if x.ncols() == 1 {
        return CovarianceMatrix::new(DMatrix::zeros(1, 1));
    }
    let y = center_samples(x)?;
    let mut c = y.tr_mul(&y);
    mirror_upper(&mut c);
    CovarianceMatrix::new(c)
}

pub fn distance_from_points(x: &DMatrix<f64>) -> Result<DistanceMatrix> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("points have non-finite coordinates".into()));
    }
    let n = x.ncols();
    let mut d = DMatrix::zeros(n, n);
    for j in 0..n {
        for k in (j + 1)..n {
            let v = (x.column(j) - x.column(k)).norm_squared();
            d[(j, k)] = v;
            d[(k, j)] = v;
        }
    }
    DistanceMatrix::new(d)
}

/// `D_jk = C_jj + C_kk − 2 C_jk`.
pub fn covariance_to_distance(c: &CovarianceMatrix) -> DistanceMatrix {
    let c = c.matrix();
    let n = c.nrows();
    let d = DMatrix::from_fn(n, n, |j, k| {
        if j == k {
            0.0
        } else {
            let (a, b) = if j < k { (j, k) } else { (k, j) };
            c[(a, a)] + c[(b, b)] - 2.0 * c[(a, b)]
        }
    });
    DistanceMatrix(d)
}

/// Double centering `C = −½ J D J` with `J = I − 11ᵀ/N`.
///
/// The result is returned unchecked: for distances that do not come from a
/// point cloud it may have negative eigenvalues. Pass it to
/// [`CovarianceMatrix::new`] or [`project_to_valid_covariance`].
pub fn distance_to_covariance(d: &DistanceMatrix) -> DMatrix<f64> {
    double_center(d.matrix(), -0.5)
}

fn double_center(a: &DMatrix<f64>, factor: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|j| a.row(j).sum() / nf).collect();
    let col_means: Vec<f64> = (0..n).map(|k| a.column(k).sum() / nf).collect();
    let grand = row_means.iter().sum::<f64>() / nf;
    let mut c = DMatrix::from_fn(n, n, |j, k| factor * (a[(j, k)] - row_means[j] - col_means[k] + grand));
    mirror_upper(&mut c);
    c
}

/// Points in `R^dim` whose centered Gram matrix is `c`, built from the positive
/// semidefinite square root of `c`.
///
/// For `dim >= N` the columns of the square root are used directly, padded with
/// zero coordinates; otherwise they are expressed in the leading eigenbasis,
/// which is an isometric image of the same columns.
pub fn reconstruct_points(c: &CovarianceMatrix, dim: usize) -> Result<DMatrix<f64>> {
    let n = c.n();
    let (values, vectors) = sorted_eigen(c.matrix());
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let roots: Vec<f64> = values
        .iter()
        .map(|&l| if l > 1e-13 * top { l.sqrt() } else { 0.0 })
        .collect();
    let rank = roots.iter().filter(|&&r| r > 0.0).count();
    if dim < rank {
        return Err(Error::InvalidParameter(format!(
            "target dimension {dim} is below the covariance rank {rank}"
        )));
    }
    if dim >= n {
        let mut scaled = vectors.clone();
        for (i, &r) in roots.iter().enumerate() {
            scaled.column_mut(i).scale_mut(r);
        }
        let root = scaled * vectors.transpose();
        let mut out = DMatrix::zeros(dim, n);
        out.view_mut((0, 0), (n, n)).copy_from(&root);
        Ok(out)
    } else {
        Ok(DMatrix::from_fn(dim, n, |i, k| roots[i] * vectors[(k, i)]))
    }
}

/// Nearest valid covariance matrix: symmetrize, double-center, then clip
/// negative eigenvalues to zero.
pub fn project_to_valid_covariance(a: &DMatrix<f64>) -> Result<CovarianceMatrix> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(Error::Dimension(format!("shape {:?} is not square", a.shape())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("matrix has non-finite entries".into()));
    }
    let sym = (a + a.transpose()) * 0.5;
    let centered = double_center(&sym, 1.0);
    let (values, vectors) = sorted_eigen(&centered);
    let mut scaled = vectors.clone();
    for (i, &l) in values.iter().enumerate() {
        scaled.column_mut(i).scale_mut(l.max(0.0));
    }
    let mut c = scaled * vectors.transpose();
    mirror_upper(&mut c);
    CovarianceMatrix::new(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Disconnection {
    #[default]
    Fail,
    LargestComponent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Undirected k-nearest-neighbor graph. Edge endpoints are positions in
/// `nodes`, which maps them back to indices of the input distance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborGraph {
    pub k: usize,
    pub nodes: Vec<usize>,
    pub edges: Vec<Edge>,
}

impl NeighborGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// `(i, j, weight)` triples in input indices, for overlays.
    pub fn edge_list(&self) -> Vec<(usize, usize, f64)> {
        self.edges
            .iter()
            .map(|e| (self.nodes[e.a], self.nodes[e.b], e.weight))
            .collect()
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            adj[e.a].push(e.b);
            adj[e.b].push(e.a);
        }
        adj
    }

    /// Connected components as sorted lists of input indices, ordered by
    /// their smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency();
        let mut label = vec![usize::MAX; self.nodes.len()];
        let mut comps = Vec::new();
        for start in 0..self.nodes.len() {
            if label[start] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut members = vec![start];
            label[start] = id;
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &w in &adj[v] {
                    if label[w] == usize::MAX {
                        label[w] = id;
                        members.push(w);
                        queue.push_back(w);
                    }
                }
            }
            let mut ids: Vec<usize> = members.into_iter().map(|v| self.nodes[v]).collect();
            ids.sort_unstable();
            comps.push(ids);
        }
        comps
    }

    fn restrict(&self, keep: &[usize]) -> NeighborGraph {
        let local: std::collections::HashMap<usize, usize> =
            keep.iter().enumerate().map(|(i, &orig)| (orig, i)).collect();
        let edges = self
            .edges
            .iter()
            .filter_map(|e| {
                let a = *local.get(&self.nodes[e.a])?;
                let b = *local.get(&self.nodes[e.b])?;
                Some(Edge { a, b, weight: e.weight })
            })
            .collect();
        NeighborGraph {
            k: self.k,
            nodes: keep.to_vec(),
            edges,
        }
    }
}

/// Symmetrized union of each point's `k` nearest neighbors, weighted by the
/// (unsquared) euclidean distance. Distance ties go to the lower index.
pub fn knn_graph(d: &DistanceMatrix, k: usize, policy: Disconnection) -> Result<NeighborGraph> {
    let n = d.n();
    if k == 0 || k >= n {
        return Err(Error::InvalidParameter(format!(
            "neighbor count must lie in 1..{n} for {n} points, got {k}"
        )));
    }
    let dm = d.matrix();
    let mut adjacent = vec![vec![false; n]; n];
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| dm[(i, a)].total_cmp(&dm[(i, b)]).then(a.cmp(&b)));
        for &j in &others[..k] {
            adjacent[i][j] = true;
            adjacent[j][i] = true;
        }
    }
    let mut edges = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            if adjacent[a][b] {
                let weight = dm[(a, b)].max(0.0).sqrt();
                if weight <= 0.0 {
                    return Err(Error::Degenerate(format!(
                        "points {a} and {b} coincide; neighbor graph edges need positive length"
                    )));
                }
                edges.push(Edge { a, b, weight });
            }
        }
    }
    let graph = NeighborGraph {
        k,
        nodes: (0..n).collect(),
        edges,
    };
    let components = graph.components();
    if components.len() == 1 {
        return Ok(graph);
    }
    match policy {
        Disconnection::Fail => Err(Error::DisconnectedGraph { components }),
        Disconnection::LargestComponent => {
            let largest = components
                .iter()
                .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
                .expect("at least one component");
            log::warn!(
                "neighbor graph has {} components; keeping {} of {n} points",
                components.len(),
                largest.len()
            );
            Ok(graph.restrict(largest))
        }
    }
}

/// Squared shortest-path lengths between all node pairs (Floyd–Warshall).
pub fn geodesic_distances(g: &NeighborGraph) -> Result<DistanceMatrix> {
    let n = g.node_count();
    let mut dist = DMatrix::from_element(n, n, f64::INFINITY);
    for i in 0..n {
        dist[(i, i)] = 0.0;
    }
    for e in &g.edges {
        dist[(e.a, e.b)] = e.weight;
        dist[(e.b, e.a)] = e.weight;
    }
    for via in 0..n {
        for i in 0..n {
            let head = dist[(i, via)];
            if head.is_infinite() {
                continue;
            }
            for j in 0..n {
                let cand = head + dist[(via, j)];
                if cand < dist[(i, j)] {
                    dist[(i, j)] = cand;
                }
            }
        }
    }
    if dist.iter().any(|v| v.is_infinite()) {
        return Err(Error::DisconnectedGraph {
            components: g.components(),
        });
    }
    // Paths are built in both directions; keep the upper triangle's value.
    mirror_upper(&mut dist);
    DistanceMatrix::new(dist.map(|v| v * v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsomapEmbedding {
    /// Input indices of the embedded points (all of them unless the largest
    /// component was selected).
    pub nodes: Vec<usize>,
    pub graph: NeighborGraph,
    pub geodesic: DistanceMatrix,
    pub covariance: CovarianceMatrix,
    /// Dual system of the reconstructed geodesic point cloud.
    pub system: DualSvdSystem,
    /// `nodes.len() × dims` leading principal coordinates.
    pub coords: DMatrix<f64>,
}

pub fn isomap_from_points(
    x: &DMatrix<f64>,
    k: usize,
    dims: usize,
    policy: Disconnection,
) -> Result<IsomapEmbedding> {
    isomap_from_distances(&distance_from_points(x)?, k, dims, policy)
}

/// Neighbor graph, geodesics, double centering, projection onto valid
/// covariances, point reconstruction and PCA, in that order.
///
/// `dims` is capped at the rank of the geodesic covariance.
pub fn isomap_from_distances(
    d: &DistanceMatrix,
    k: usize,
    dims: usize,
    policy: Disconnection,
) -> Result<IsomapEmbedding> {
    if dims == 0 {
        return Err(Error::InvalidParameter("embedding needs at least one dimension".into()));
    }
    let graph = knn_graph(d, k, policy)?;
    let geodesic = geodesic_distances(&graph)?;
    let covariance = project_to_valid_covariance(&distance_to_covariance(&geodesic))?;
    let points = reconstruct_points(&covariance, covariance.n())?;
    let system = compute_dual_svd(&points, DEFAULT_RANK_TOL)?;
    let dims = dims.min(system.rank());
    let mut coords = system.sample_basis().columns(0, dims).into_owned();
    for (m, &l) in system.singular_values()[..dims].iter().enumerate() {
        coords.column_mut(m).scale_mut(l);
    }
    Ok(IsomapEmbedding {
        nodes: graph.nodes.clone(),
        graph,
        geodesic,
        covariance,
        system,
        coords,
    })
}
