//! Per-bag hybrid graph: a diffused, sparsified latent graph over feature similarity plus a
//! spatial k-nearest-neighbour graph over tile coordinates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bagio::Bag;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Latent,
    Spatial,
}

impl GraphKind {
    fn tag(self) -> &'static str {
        match self {
            GraphKind::Latent => "latent",
            GraphKind::Spatial => "spatial",
        }
    }
}

/// Undirected weighted graph without self-loops.
///
/// Adjacency lists hold both directions of every edge, each list sorted by weight
/// descending and then by neighbour index.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGraph {
    n: usize,
    kind: GraphKind,
    adj: Vec<Vec<(usize, f64)>>,
}

impl SparseGraph {
    pub fn empty(n: usize, kind: GraphKind) -> Self {
        Self {
            n,
            kind,
            adj: vec![Vec::new(); n],
        }
    }

    /// Builds from undirected edges. Duplicate pairs keep their maximum weight.
    pub fn from_edges(
        n: usize,
        kind: GraphKind,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut pairs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::Graph(format!("edge ({i},{j}) out of range for n={n}")));
            }
            if i == j {
                return Err(Error::Graph(format!("self-loop at node {i}")));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Graph(format!("edge ({i},{j}) has invalid weight {w}")));
            }
            let key = (i.min(j), i.max(j));
            let e = pairs.entry(key).or_insert(w);
            *e = e.max(w);
        }
        let mut adj = vec![Vec::new(); n];
        for (&(i, j), &w) in &pairs {
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
        for list in &mut adj {
            list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        }
        Ok(Self { n, kind, adj })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].len()
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Undirected edges `(i, j, w)` with `i < j`, sorted by `(i, j)`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out: Vec<_> = self
            .adj
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().filter(move |(j, _)| *j > i).map(move |&(j, w)| (i, j, w)))
            .collect();
        out.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        out
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i].iter().any(|&(k, _)| k == j)
    }

    /// Same topology with nodes relabelled: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let edges = self.edges().into_iter().map(|(i, j, w)| (perm[i], perm[j], w));
        Self::from_edges(self.n, self.kind, edges).expect("permutation preserves validity")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentWeight {
    /// `1 - d`: more similar neighbours receive more random-walk mass.
    #[default]
    Similarity,
    /// The raw cosine distance `d`.
    Distance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionMode {
    /// Closed form for `n <= 512`, truncated series beyond.
    #[default]
    Auto,
    Series,
    ClosedForm,
}

pub const CLOSED_FORM_MAX_NODES: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    /// Restart probability of the personalized PageRank walk.
    pub alpha: f64,
    /// The series stops at the first coefficient `alpha (1 - alpha)^k` below this value.
    pub truncation_tol: f64,
    pub top_m: usize,
    /// Sparsification threshold; entries `<= delta` are dropped.
    pub delta: f64,
    pub k_latent: usize,
    pub k_spatial: usize,
    pub latent_weight: LatentWeight,
    pub mode: DiffusionMode,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            truncation_tol: 1e-10,
            top_m: 5,
            delta: 0.02,
            k_latent: 8,
            k_spatial: 8,
            latent_weight: LatentWeight::Similarity,
            mode: DiffusionMode::Auto,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        if !(self.truncation_tol > 0.0) {
            return Err(Error::InvalidParameter("truncation_tol must be positive".into()));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::InvalidParameter(format!("delta must be >= 0, got {}", self.delta)));
        }
        if self.k_latent == 0 || self.k_spatial == 0 || self.top_m == 0 {
            return Err(Error::InvalidParameter("k_latent, k_spatial and top_m must be >= 1".into()));
        }
        Ok(())
    }
}

/// `1 - cos(f_i, f_j)`, in `[0, 2]`.
pub fn cosine_distance(fi: &[f64], fj: &[f64]) -> Result<f64> {
    if fi.len() != fj.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", fi.len(), fj.len())));
    }
    let ni = fi.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nj = fj.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ni == 0.0 || nj == 0.0 {
        return Err(Error::Graph("cosine distance of a zero vector".into()));
    }
    let dot: f64 = fi.iter().zip(fj).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (ni * nj)).clamp(0.0, 2.0))
}

/// Dense pairwise cosine distances between rows.
pub fn cosine_distance_matrix(features: &Array2<f64>) -> Result<Array2<f64>> {
    let n = features.nrows();
    let norms: Vec<f64> = features.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::Graph(format!("patch {i} has an all-zero feature vector")));
    }
    let gram = features.dot(&features.t());
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else {
            (1.0 - gram[[i, j]] / (norms[i] * norms[j])).clamp(0.0, 2.0)
        }
    }))
}

/// The `k` nearest other nodes of every node, by ascending distance then index.
pub fn knn(n: usize, k: usize, dist: impl Fn(usize, usize) -> f64) -> Result<Vec<Vec<usize>>> {
    if k >= n {
        return Err(Error::InvalidParameter(format!("k={k} must be < n={n}")));
    }
    Ok((0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist(i, j), j)).collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.truncate(k);
            others.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

/// Mutual-neighbour gating: `j` survives in `i`'s set iff `i` is also in `j`'s set.
pub fn reciprocal_knn(neighbors: &[Vec<usize>]) -> Vec<Vec<usize>> {
    neighbors
        .iter()
        .enumerate()
        .map(|(i, ni)| {
            let mut r: Vec<usize> = ni.iter().copied().filter(|&j| neighbors[j].contains(&i)).collect();
            r.sort_unstable();
            r
        })
        .collect()
}

/// Column-stochastic transition matrix `T = A D^-1` with `D_jj = sum_i A_ij`.
/// Nodes without edges get a unit self-loop.
pub fn transition_matrix(graph: &SparseGraph) -> Result<Array2<f64>> {
    let n = graph.n();
    let mut a = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for &(j, w) in graph.neighbors(i) {
            a[[i, j]] = w;
        }
    }
    for j in 0..n {
        let col: f64 = a.column(j).sum();
        if col == 0.0 {
            if graph.degree(j) > 0 {
                return Err(Error::Graph(format!("node {j} has edges but zero total weight")));
            }
            a[[j, j]] = 1.0;
            continue;
        }
        if !col.is_finite() {
            return Err(Error::Graph(format!("column {j} does not sum to a finite value")));
        }
        a.column_mut(j).mapv_inplace(|v| v / col);
    }
    Ok(a)
}

/// Personalized PageRank diffusion `sum_k alpha (1 - alpha)^k T^k`.
pub fn ppr_diffuse(graph: &SparseGraph, cfg: &DiffusionConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let t = transition_matrix(graph)?;
    let closed = match cfg.mode {
        DiffusionMode::ClosedForm => true,
        DiffusionMode::Series => false,
        DiffusionMode::Auto => graph.n() <= CLOSED_FORM_MAX_NODES,
    };
    if closed {
        ppr_closed_form(&t, cfg.alpha)
    } else {
        Ok(ppr_series(&t, cfg.alpha, cfg.truncation_tol))
    }
}

/// Truncated power series; stops at the first `theta_k < tol`.
pub fn ppr_series(t: &Array2<f64>, alpha: f64, tol: f64) -> Array2<f64> {
    let n = t.nrows();
    // Sparse rows of T: T is the normalized kNN adjacency, so most entries are zero.
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| (0..n).filter(|&j| t[[i, j]] != 0.0).map(|j| (j, t[[i, j]])).collect())
        .collect();
    let mut power = Array2::<f64>::eye(n);
    let mut out = Array2::<f64>::eye(n) * alpha;
    let mut theta = alpha;
    loop {
        theta *= 1.0 - alpha;
        if theta < tol {
            break;
        }
        let mut next = Array2::<f64>::zeros((n, n));
        for (i, row) in rows.iter().enumerate() {
            let mut dst = next.row_mut(i);
            for &(j, v) in row {
                dst.scaled_add(v, &power.row(j));
            }
        }
        power = next;
        out.scaled_add(theta, &power);
    }
    out
}

/// `alpha (I - (1 - alpha) T)^-1` via LU decomposition.
pub fn ppr_closed_form(t: &Array2<f64>, alpha: f64) -> Result<Array2<f64>> {
    let n = t.nrows();
    let m = DMatrix::from_fn(n, n, |i, j| f64::from(i == j) - (1.0 - alpha) * t[[i, j]]);
    let rhs = DMatrix::<f64>::identity(n, n) * alpha;
    let x = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Graph("singular diffusion system".into()))?;
    Ok(Array2::from_shape_fn((n, n), |(i, j)| x[(i, j)]))
}

/// Keeps each node's `top_m` strongest incident entries, drops those `<= delta`, and merges
/// the per-node selections into an undirected graph.
///
/// An entry's strength is `max(A_ij, A_ji)`, which is also the kept edge weight; this makes
/// the operation idempotent.
pub fn sparsify(diffused: &Array2<f64>, cfg: &DiffusionConfig) -> SparseGraph {
    let n = diffused.nrows();
    let mut edges = Vec::new();
    for i in 0..n {
        edges.extend(
            strongest_entries(diffused, i, cfg.top_m)
                .into_iter()
                .filter(|&(_, w)| w > cfg.delta)
                .map(|(j, w)| (i, j, w)),
        );
    }
    SparseGraph::from_edges(n, GraphKind::Latent, edges).expect("diffusion weights are finite and >= 0")
}

/// Node `i`'s `top_m` strongest entries by `max(A_ij, A_ji)`, before thresholding.
pub fn strongest_entries(diffused: &Array2<f64>, i: usize, top_m: usize) -> Vec<(usize, f64)> {
    let n = diffused.nrows();
    let mut cand: Vec<(usize, f64)> = (0..n)
        .filter(|&j| j != i)
        .map(|j| (j, diffused[[i, j]].max(diffused[[j, i]])))
        .collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(top_m);
    cand
}

/// Mutual-kNN latent graph before diffusion, weighted per `cfg.latent_weight`.
pub fn latent_initial_graph(features: &Array2<f64>, cfg: &DiffusionConfig) -> Result<SparseGraph> {
    let n = features.nrows();
    if n < 2 {
        return Ok(SparseGraph::empty(n, GraphKind::Latent));
    }
    let d = cosine_distance_matrix(features)?;
    let nk = knn(n, cfg.k_latent.min(n - 1), |i, j| d[[i, j]])?;
    let r = reciprocal_knn(&nk);
    let mut edges = Vec::new();
    for (i, ri) in r.iter().enumerate() {
        for &j in ri {
            let w = match cfg.latent_weight {
                LatentWeight::Similarity => 1.0 - d[[i, j]],
                LatentWeight::Distance => d[[i, j]],
            };
            if w > 0.0 {
                edges.push((i, j, w));
            }
        }
    }
    SparseGraph::from_edges(n, GraphKind::Latent, edges)
}

/// Full latent pipeline: mutual kNN, diffusion, sparsification.
pub fn latent_graph(features: &Array2<f64>, cfg: &DiffusionConfig) -> Result<SparseGraph> {
    cfg.validate()?;
    let initial = latent_initial_graph(features, cfg)?;
    if initial.n() < 2 {
        return Ok(initial);
    }
    let diffused = ppr_diffuse(&initial, cfg)?;
    Ok(sparsify(&diffused, cfg))
}

/// Euclidean kNN over grid coordinates, unweighted (`w = 1`), symmetrized by union.
pub fn spatial_knn(coords: &[(u32, u32)], k: usize) -> Result<SparseGraph> {
    let n = coords.len();
    if n < 2 {
        return Ok(SparseGraph::empty(n, GraphKind::Spatial));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("k_spatial must be >= 1".into()));
    }
    let dist = |i: usize, j: usize| {
        let ds = coords[i].0 as f64 - coords[j].0 as f64;
        let dt = coords[i].1 as f64 - coords[j].1 as f64;
        (ds * ds + dt * dt).sqrt()
    };
    let nk = knn(n, k.min(n - 1), dist)?;
    let edges = nk
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.iter().map(move |&j| (i, j, 1.0)));
    SparseGraph::from_edges(n, GraphKind::Spatial, edges)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridGraph {
    pub latent: SparseGraph,
    pub spatial: SparseGraph,
}

impl HybridGraph {
    pub fn n(&self) -> usize {
        self.latent.n()
    }

    pub fn empty(n: usize) -> Self {
        Self {
            latent: SparseGraph::empty(n, GraphKind::Latent),
            spatial: SparseGraph::empty(n, GraphKind::Spatial),
        }
    }
}

pub fn build_hybrid_graph(bag: &Bag, cfg: &DiffusionConfig) -> Result<HybridGraph> {
    let features = bag.feature_matrix();
    Ok(HybridGraph {
        latent: latent_graph(&features, cfg)?,
        spatial: spatial_knn(&bag.coords, cfg.k_spatial)?,
    })
}

/// Serializes both graphs as text: a `n=<N>` header, then `kind i j weight` per undirected edge.
pub fn format_graph_cache(g: &HybridGraph) -> String {
    let mut s = format!("n={}\n", g.n());
    for graph in [&g.latent, &g.spatial] {
        for (i, j, w) in graph.edges() {
            let _ = writeln!(s, "{} {} {} {:?}", graph.kind().tag(), i, j, w);
        }
    }
    s
}

pub fn parse_graph_cache(text: &str) -> Result<HybridGraph> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Graph("empty graph cache".into()))?;
    let n: usize = header
        .strip_prefix("n=")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Graph(format!("bad header {header:?}")))?;
    let mut lat = Vec::new();
    let mut spa = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Graph(format!("line {}: cannot parse {line:?}", lineno + 2));
        if parts.len() != 4 {
            return Err(bad());
        }
        let i: usize = parts[1].parse().map_err(|_| bad())?;
        let j: usize = parts[2].parse().map_err(|_| bad())?;
        let w: f64 = parts[3].parse().map_err(|_| bad())?;
        match parts[0] {
            "latent" => lat.push((i, j, w)),
            "spatial" => spa.push((i, j, w)),
            _ => return Err(bad()),
        }
    }
    Ok(HybridGraph {
        latent: SparseGraph::from_edges(n, GraphKind::Latent, lat)?,
        spatial: SparseGraph::from_edges(n, GraphKind::Spatial, spa)?,
    })
}

pub fn write_graph_cache(path: &Path, g: &HybridGraph) -> Result<()> {
    fs::write(path, format_graph_cache(g)).map_err(|e| Error::io(path, e))
}

pub fn read_graph_cache(path: &Path) -> Result<HybridGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph_cache(&text)
}
