//! Region graph construction: weighted adjacency from centroid distance and
//! static-feature similarity, the combinatorial Laplacian, its rescaling to
//! the `[-1, 1]` spectrum and the Chebyshev polynomial basis.
//!
//! Spectral graph filtering `g(L) x = U g(Λ) Uᵀ x` is never evaluated through
//! an eigendecomposition at runtime; the model uses the truncated Chebyshev
//! expansion `Σ_k θ_k T_k(L̃) x` built here.
//!
//! All matrices are computed with the nodes sorted by id and then mapped back
//! to the caller's order, so relabelling the input permutes every output
//! exactly (no floating-point drift from a different summation order).

use std::collections::HashSet;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticFeatures {
    pub in_floodplain: bool,
    /// Fraction of residential land use in `[0, 1]`.
    pub residential_ratio: f64,
    pub watershed_id: String,
    /// Meters.
    pub dist_coast: f64,
    /// Meters.
    pub dist_stream: f64,
}

impl StaticFeatures {
    fn numeric(&self) -> [f64; 4] {
        [
            if self.in_floodplain { 1.0 } else { 0.0 },
            self.residential_ratio,
            self.dist_coast,
            self.dist_stream,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.residential_ratio) {
            return Err(Error::domain(format!(
                "residential_ratio {} outside [0, 1]",
                self.residential_ratio
            )));
        }
        for (name, d) in [("dist_coast", self.dist_coast), ("dist_stream", self.dist_stream)] {
            if !(d.is_finite() && d >= 0.0) {
                return Err(Error::domain(format!("{name} must be finite and >= 0, got {d}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitNode {
    pub id: String,
    /// Planar centroid in meters.
    pub x: f64,
    pub y: f64,
    pub static_features: StaticFeatures,
}

impl UnitNode {
    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        (self.x - x).hypot(self.y - y)
    }
}

/// Mean/std of the four numeric static fields; a field with zero spread is
/// dropped from the distance.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticNormStats {
    fields: [Option<(f64, f64)>; 4],
}

impl StaticNormStats {
    pub fn fit(features: &[&StaticFeatures]) -> Self {
        let mut fields = [None; 4];
        for (f, slot) in fields.iter_mut().enumerate() {
            let values: Vec<f64> = features.iter().map(|s| s.numeric()[f]).collect();
            let (mean, std) = population_mean_std(&values);
            if std > 0.0 {
                *slot = Some((mean, std));
            }
        }
        Self { fields }
    }

    /// Fit on a whole node set.
    pub fn from_nodes(nodes: &[UnitNode]) -> Self {
        Self::fit(&nodes.iter().map(|n| &n.static_features).collect::<Vec<_>>())
    }
}

/// Euclidean distance over `[z(floodplain), z(residential), watershed mismatch,
/// z(dist_coast), z(dist_stream)]`.
pub fn pairwise_static_distance(a: &StaticFeatures, b: &StaticFeatures, stats: &StaticNormStats) -> f64 {
    let (na, nb) = (a.numeric(), b.numeric());
    let mut sq = 0.0;
    for (f, field) in stats.fields.iter().enumerate() {
        if let Some((_, std)) = field {
            // z(a) - z(b); the mean cancels.
            let d = (na[f] - nb[f]) / std;
            sq += d * d;
        }
    }
    if a.watershed_id != b.watershed_id {
        sq += 1.0;
    }
    sq.sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyConfig {
    /// Weight of the centroid-distance kernel.
    pub w_dist: f64,
    /// Weight of the static-feature kernel.
    pub w_feat: f64,
    /// Weights below this are set to zero.
    pub epsilon: f64,
}

impl Default for AdjacencyConfig {
    fn default() -> Self {
        Self {
            w_dist: 0.9,
            w_feat: 0.1,
            epsilon: 1e-4,
        }
    }
}

impl AdjacencyConfig {
    fn validate(&self) -> Result<()> {
        if self.w_dist < 0.0 || self.w_feat < 0.0 || (self.w_dist + self.w_feat - 1.0).abs() > 1e-12 {
            return Err(Error::usage(format!(
                "adjacency weights must be non-negative and sum to 1, got {} + {}",
                self.w_dist, self.w_feat
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::usage("sparsification threshold must be >= 0"));
        }
        Ok(())
    }
}

/// `A_ij = w_dist exp(-(d_ij/σ_d)²) + w_feat exp(-(s_ij/σ_s)²)` for `i != j`,
/// with bandwidths set to the population std of the off-diagonal distances.
pub fn build_adjacency(nodes: &[UnitNode], cfg: &AdjacencyConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let n = nodes.len();
    if n < 2 {
        return Err(Error::usage(format!("adjacency needs at least 2 nodes, got {n}")));
    }
    for node in nodes {
        if !(node.x.is_finite() && node.y.is_finite()) {
            return Err(Error::domain(format!("node {} has non-finite centroid", node.id)));
        }
        node.static_features.validate().map_err(|e| e.context(&node.id))?;
    }
    let stats = StaticNormStats::from_nodes(nodes);
    let mut phys = Array2::zeros((n, n));
    let mut feat = Array2::zeros((n, n));
    let mut phys_off = Vec::with_capacity(n * (n - 1) / 2);
    let mut feat_off = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d = nodes[i].distance_to(nodes[j].x, nodes[j].y);
            let s = pairwise_static_distance(&nodes[i].static_features, &nodes[j].static_features, &stats);
            phys[[i, j]] = d;
            feat[[i, j]] = s;
            phys_off.push(d);
            feat_off.push(s);
        }
    }
    let sigma_d = bandwidth(&phys_off, "centroid distance");
    let sigma_s = bandwidth(&feat_off, "static-feature distance");

    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let kd = (-(phys[[i, j]] / sigma_d).powi(2)).exp();
            let ks = (-(feat[[i, j]] / sigma_s).powi(2)).exp();
            let mut w = cfg.w_dist * kd + cfg.w_feat * ks;
            if w < cfg.epsilon {
                w = 0.0;
            }
            a[[i, j]] = w;
            a[[j, i]] = w;
        }
    }
    Ok(a)
}

fn bandwidth(values: &[f64], what: &str) -> f64 {
    let (_, std) = population_mean_std(values);
    if std > 0.0 {
        std
    } else {
        warn!("all pairwise {what} values are identical; using bandwidth 1");
        1.0
    }
}

/// Population mean and std, summed in sorted order so the result does not
/// depend on the order of `values`.
pub(crate) fn population_mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = sorted.iter().map(|v| (v - mean).powi(2)).collect();
    dev.sort_by(f64::total_cmp);
    (mean, (dev.iter().sum::<f64>() / n).sqrt())
}

/// `L = D - A`.
pub fn laplacian(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::usage(format!("adjacency must be square, got {:?}", a.dim())));
    }
    for i in 0..n {
        if a[[i, i]] != 0.0 {
            return Err(Error::usage(format!("adjacency diagonal entry {i} is nonzero")));
        }
        for j in 0..n {
            if a[[i, j]] < 0.0 || !a[[i, j]].is_finite() {
                return Err(Error::usage(format!("adjacency entry ({i}, {j}) = {} is invalid", a[[i, j]])));
            }
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-12 {
                return Err(Error::usage(format!("adjacency is not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut l = -a.clone();
    for i in 0..n {
        l[[i, i]] = a.row(i).sum();
    }
    Ok(l)
}

const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITERS: usize = 10_000;

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
///
/// Stops once the eigen-residual `‖Lv − μv‖` drops below `1e-9 μ`.
pub fn lambda_max(l: &Array2<f64>) -> f64 {
    let n = l.nrows();
    // Irrational-step start vector: never aligned with the constant null vector.
    let mut v: ndarray::Array1<f64> = (0..n).map(|i| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract()).collect();
    let norm = v.dot(&v).sqrt();
    v /= norm;
    let mut mu = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let w = l.dot(&v);
        mu = v.dot(&w);
        let norm = w.dot(&w).sqrt();
        if norm < 1e-300 {
            return 0.0;
        }
        let residual = (&w - &(&v * mu)).mapv(|x| x * x).sum().sqrt();
        if residual <= POWER_TOL * mu.abs() {
            break;
        }
        v = w / norm;
    }
    mu
}

/// `L̃ = (2 / λ_max) L − I`. An edgeless graph (λ_max < 1e-12) falls back to
/// λ_max = 2, so `L̃ = L − I = −I`.
pub fn scaled_laplacian(l: &Array2<f64>) -> Result<(Array2<f64>, f64)> {
    let n = l.nrows();
    if l.ncols() != n {
        return Err(Error::usage(format!("laplacian must be square, got {:?}", l.dim())));
    }
    let mut lambda = lambda_max(l);
    if lambda < 1e-12 {
        warn!("laplacian has no positive eigenvalue (edgeless graph); using lambda_max = 2");
        lambda = 2.0;
    }
    let mut scaled = l * (2.0 / lambda);
    for i in 0..n {
        scaled[[i, i]] -= 1.0;
    }
    Ok((scaled, lambda))
}

/// `T_0 = I`, `T_1 = L̃`, `T_k = 2 L̃ T_{k−1} − T_{k−2}`.
pub fn chebyshev_basis(scaled: &Array2<f64>, k: usize) -> Result<Vec<Array2<f64>>> {
    if k < 1 {
        return Err(Error::usage("Chebyshev order K must be >= 1"));
    }
    let n = scaled.nrows();
    let mut basis = vec![Array2::eye(n)];
    if k > 1 {
        basis.push(scaled.clone());
    }
    for i in 2..k {
        let next = scaled.dot(&basis[i - 1]) * 2.0 - &basis[i - 2];
        basis.push(next);
    }
    Ok(basis)
}

/// Node set plus every matrix the graph convolution needs.
#[derive(Clone, Debug)]
pub struct RegionGraph {
    nodes: Vec<UnitNode>,
    adjacency: Array2<f64>,
    laplacian: Array2<f64>,
    scaled_laplacian: Array2<f64>,
    lambda_max: f64,
    cheb_basis: Vec<Array2<f64>>,
    cheb_tensors: Vec<Tensor>,
    /// The basis with rows and columns in id-sorted order.
    cheb_sorted: Vec<Tensor>,
    canonical: Vec<usize>,
}

impl RegionGraph {
    pub fn build(nodes: Vec<UnitNode>, cfg: &AdjacencyConfig, k: usize) -> Result<Self> {
        let canonical = canonical_order(&nodes)?;
        let sorted: Vec<UnitNode> = canonical.iter().map(|&i| nodes[i].clone()).collect();
        let a = build_adjacency(&sorted, cfg)?;
        Self::from_canonical(nodes, canonical, a, k)
    }

    /// The same node set with no edges: `L = 0`, `L̃ = −I`, so every `T_k` is
    /// `±I` and graph convolution reduces to per-node channel mixing.
    pub fn edgeless(nodes: Vec<UnitNode>, k: usize) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::usage("graph needs at least 2 nodes"));
        }
        let canonical = canonical_order(&nodes)?;
        let n = nodes.len();
        Self::from_canonical(nodes, canonical, Array2::zeros((n, n)), k)
    }

    fn from_canonical(nodes: Vec<UnitNode>, canonical: Vec<usize>, a_sorted: Array2<f64>, k: usize) -> Result<Self> {
        let l = laplacian(&a_sorted)?;
        let (lt, lambda_max) = scaled_laplacian(&l)?;
        let basis = chebyshev_basis(&lt, k)?;
        // Sorted position of each original node.
        let mut rank = vec![0; canonical.len()];
        for (pos, &orig) in canonical.iter().enumerate() {
            rank[orig] = pos;
        }
        let back = |m: &Array2<f64>| permute_matrix(m, &rank);
        let cheb_basis: Vec<Array2<f64>> = basis.iter().map(back).collect();
        let cheb_tensors = cheb_basis.iter().map(array_to_tensor).collect();
        let cheb_sorted = basis.iter().map(array_to_tensor).collect();
        Ok(Self {
            adjacency: back(&a_sorted),
            laplacian: back(&l),
            scaled_laplacian: back(&lt),
            lambda_max,
            cheb_basis,
            cheb_tensors,
            cheb_sorted,
            nodes,
            canonical,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[UnitNode] {
        &self.nodes
    }

    pub fn node_ids(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.id.clone()).collect()
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn laplacian(&self) -> &Array2<f64> {
        &self.laplacian
    }

    pub fn scaled_laplacian(&self) -> &Array2<f64> {
        &self.scaled_laplacian
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn cheb_basis(&self) -> &[Array2<f64>] {
        &self.cheb_basis
    }

    pub fn cheb_order(&self) -> usize {
        self.cheb_basis.len()
    }

    /// The basis as tensors, in node order.
    pub fn cheb_tensors(&self) -> &[Tensor] {
        &self.cheb_tensors
    }

    /// The basis in [`Self::canonical_order`] frame.
    pub fn cheb_tensors_sorted(&self) -> &[Tensor] {
        &self.cheb_sorted
    }

    /// Node indices sorted by id.
    pub fn canonical_order(&self) -> &[usize] {
        &self.canonical
    }

    /// Degree vector `D_ii`.
    pub fn degrees(&self) -> Vec<f64> {
        self.adjacency.rows().into_iter().map(|r| r.sum()).collect()
    }

    /// Upper-triangle nonzero edges `(i, j, weight)`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let w = self.adjacency[[i, j]];
                if w != 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }
}

fn canonical_order(nodes: &[UnitNode]) -> Result<Vec<usize>> {
    let mut seen = HashSet::new();
    for node in nodes {
        if !seen.insert(node.id.as_str()) {
            return Err(Error::usage(format!("duplicate node id {}", node.id)));
        }
    }
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by(|&a, &b| nodes[a].id.cmp(&nodes[b].id));
    Ok(order)
}

/// `out[i, j] = m[p[i], p[j]]`.
pub fn permute_matrix(m: &Array2<f64>, p: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((p.len(), p.len()), |(i, j)| m[[p[i], p[j]]])
}

pub fn array_to_tensor(m: &Array2<f64>) -> Tensor {
    Tensor::new(vec![m.nrows(), m.ncols()], m.iter().copied().collect()).expect("finite matrix")
}
