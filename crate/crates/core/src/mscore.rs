//! Degree-corrected mixed-membership networks and the MSCORE estimator.
//!
//! Pipeline: top-K eigenpairs of the adjacency (or of `Ω` in noiseless
//! mode), entrywise ratios against the leading eigenvector, vertex hunting
//! in the ratio space, and barycentric reconstruction of the memberships.

use std::io::BufRead;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::membership::MembershipMatrix;
use crate::rng::{stream, CounterRng};
use crate::{Error, Result};

/// Largest network handled by the dense routines.
pub const DEFAULT_MAX_NODES: usize = 5000;
const KMEANS_ITERATIONS: usize = 100;
const KMEANS_RESTARTS: u64 = 10;
/// Below this size the dense eigensolver is used directly.
const DENSE_EIGEN_LIMIT: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct DcmmModel {
    pub gamma: MembershipMatrix,
    pub theta: Vec<f64>,
    pub p_net: DMatrix<f64>,
}

/// `Ω` together with what clipping did to it.
#[derive(Clone, Debug)]
pub struct Omega {
    pub matrix: DMatrix<f64>,
    /// Largest amount by which an entry left `[0,1]` before clipping.
    pub max_excess: f64,
    pub warnings: Vec<String>,
}

impl DcmmModel {
    pub fn new(gamma: MembershipMatrix, theta: Vec<f64>, p_net: DMatrix<f64>) -> Result<Self> {
        let (n, k) = (gamma.n(), gamma.k());
        if theta.len() != n {
            return Err(Error::Shape(format!("{} degree parameters for {n} nodes", theta.len())));
        }
        if theta.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidArgument("degree parameters must be positive".into()));
        }
        if p_net.nrows() != k || p_net.ncols() != k {
            return Err(Error::Shape(format!("connectivity must be {k}×{k}")));
        }
        for a in 0..k {
            for b in 0..k {
                let x = p_net[(a, b)];
                if !(0.0..=1.0).contains(&x) || (x - p_net[(b, a)]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument("connectivity must be symmetric with entries in [0,1]".into()));
                }
            }
        }
        if n > DEFAULT_MAX_NODES {
            return Err(Error::InvalidArgument(format!("{n} nodes exceeds the cap of {DEFAULT_MAX_NODES}")));
        }
        Ok(Self { gamma, theta, p_net })
    }

    /// `P = (1−off)·I + off·11'`.
    pub fn connectivity(k: usize, off: f64) -> DMatrix<f64> {
        DMatrix::from_fn(k, k, |a, b| if a == b { 1.0 } else { off })
    }

    /// Test-bed model: the first `pure_per_community·K` nodes are pure
    /// (cycling through communities), the rest are `Dirichlet(1,…,1)`.
    /// Degrees are uniform on `theta_range`.
    pub fn with_pure_nodes(n: usize, k: usize, pure_per_community: usize, theta_range: (f64, f64), p_net: DMatrix<f64>, seed: u64) -> Result<Self> {
        let pure = pure_per_community * k;
        if pure > n {
            return Err(Error::InvalidArgument(format!("{pure} pure nodes do not fit in {n}")));
        }
        let mixed = MembershipMatrix::dirichlet(n - pure, &vec![1.0; k], seed)?;
        let mut rows: Vec<Vec<f64>> = (0..pure)
            .map(|i| (0..k).map(|c| if c == i % k { 1.0 } else { 0.0 }).collect())
            .collect();
        rows.extend((0..n - pure).map(|i| mixed.row(i)));
        let gen = CounterRng::new(seed, stream::NETWORK);
        let (lo, hi) = theta_range;
        let theta = (0..n as u64).map(|i| lo + (hi - lo) * gen.uniform_at(&[u64::MAX, i])).collect();
        Self::new(MembershipMatrix::from_rows(&rows)?, theta, p_net)
    }

    pub fn n(&self) -> usize {
        self.theta.len()
    }

    pub fn k(&self) -> usize {
        self.gamma.k()
    }

    /// `Ω(i,j) = θ_i θ_j γ_i'Pγ_j`, clipped to `[0,1]`. The diagonal is kept
    /// so that `Ω` has rank `K` (noiseless mode); sampling ignores it.
    pub fn omega(&self) -> Omega {
        let g = self.gamma.matrix();
        let theta = DVector::from_column_slice(&self.theta);
        let tg = DMatrix::from_fn(self.n(), self.k(), |i, c| theta[i] * g[(i, c)]);
        let mut matrix = &tg * &self.p_net * tg.transpose();
        let mut max_excess: f64 = 0.0;
        for x in matrix.iter_mut() {
            let excess = (*x - 1.0).max(-*x).max(0.0);
            max_excess = max_excess.max(excess);
            *x = x.clamp(0.0, 1.0);
        }
        let warnings = if max_excess > 0.0 {
            vec![format!("edge probabilities left [0,1] by up to {max_excess:.3e} and were clipped")]
        } else {
            Vec::new()
        };
        Omega { matrix, max_excess, warnings }
    }
}

/// Symmetric 0/1 adjacency with an empty diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    pub matrix: DMatrix<f64>,
}

impl Adjacency {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return Err(Error::Shape("adjacency must be square".into()));
        }
        for i in 0..n {
            if matrix[(i, i)] != 0.0 {
                return Err(Error::InvalidArgument(format!("self-edge at node {i}")));
            }
            for j in 0..i {
                let x = matrix[(i, j)];
                if (x != 0.0 && x != 1.0) || x != matrix[(j, i)] {
                    return Err(Error::InvalidArgument(format!("entry ({i},{j}) is not a symmetric 0/1 value")));
                }
            }
        }
        Ok(Self { matrix })
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut matrix = DMatrix::zeros(n, n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidArgument(format!("edge ({i},{j}) outside {n} nodes")));
            }
            if i != j {
                matrix[(i, j)] = 1.0;
                matrix[(j, i)] = 1.0;
            }
        }
        Ok(Self { matrix })
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| self.matrix[(i, j)] == 1.0).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    /// Edge list, one `i j` pair per line.
    pub fn to_edge_list(&self) -> String {
        self.edges().iter().map(|(i, j)| format!("{i} {j}\n")).collect()
    }

    /// Reads an edge list or a dense 0/1 matrix. A square, symmetric,
    /// hollow 0/1 table is taken as dense; anything else as an edge list
    /// whose node count is the largest index plus one.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut rows: Vec<Vec<String>> = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let line = line.split('#').next().unwrap_or("").trim().to_string();
            if !line.is_empty() {
                rows.push(line.split_whitespace().map(str::to_string).collect());
            }
        }
        if rows.is_empty() {
            return Err(Error::InvalidArgument("empty adjacency input".into()));
        }
        let n = rows.len();
        let square = rows.iter().all(|r| r.len() == n);
        if square && rows.iter().flatten().all(|t| t == "0" || t == "1") {
            let m = DMatrix::from_fn(n, n, |i, j| if rows[i][j] == "1" { 1.0 } else { 0.0 });
            if let Ok(adj) = Self::from_matrix(m) {
                return Ok(adj);
            }
        }
        let mut edges = Vec::with_capacity(rows.len());
        for (ln, r) in rows.iter().enumerate() {
            if r.len() != 2 {
                return Err(Error::InvalidArgument(format!("edge list line {} has {} fields", ln + 1, r.len())));
            }
            let parse = |t: &str| t.parse::<usize>().map_err(|e| Error::InvalidArgument(format!("edge list line {}: {e}", ln + 1)));
            edges.push((parse(&r[0])?, parse(&r[1])?));
        }
        let n = edges.iter().map(|&(i, j)| i.max(j) + 1).max().unwrap_or(0);
        if n > DEFAULT_MAX_NODES {
            return Err(Error::InvalidArgument(format!("{n} nodes exceeds the cap of {DEFAULT_MAX_NODES}")));
        }
        Self::from_edges(n, &edges)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// `A(i,j) ~ Bernoulli(Ω(i,j))` for `i < j`, mirrored, with draws keyed by
/// `(i, j)` so that the graph depends only on the model and the seed.
pub fn generate_dcmm(model: &DcmmModel, seed: u64) -> (Adjacency, Vec<String>) {
    let omega = model.omega();
    let n = model.n();
    let gen = CounterRng::new(seed, stream::NETWORK);
    let mut matrix = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            if gen.uniform_at(&[i as u64, j as u64]) < omega.matrix[(i, j)] {
                matrix[(i, j)] = 1.0;
                matrix[(j, i)] = 1.0;
            }
        }
    }
    (Adjacency { matrix }, omega.warnings)
}

#[derive(Clone, Debug)]
pub struct ScoreRatios {
    /// `N×(K−1)` thresholded ratios.
    pub ratios: DMatrix<f64>,
    pub threshold: f64,
    /// Top-K eigenvalues by magnitude, descending.
    pub eigenvalues: Vec<f64>,
    /// Matching eigenvectors as columns, `Σ_i ξ_1(i) > 0`.
    pub eigenvectors: DMatrix<f64>,
    pub warnings: Vec<String>,
}

/// Top `count` eigenpairs by magnitude, plus the next eigenvalue when it
/// exists (for the tie check).
fn top_eigenpairs(m: &DMatrix<f64>, count: usize) -> (Vec<f64>, DMatrix<f64>, Option<f64>) {
    let n = m.nrows();
    if n > DENSE_EIGEN_LIMIT {
        if let Some(found) = subspace_iteration(m, count) {
            return found;
        }
    }
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].abs().total_cmp(&eig.eigenvalues[a].abs()).then(a.cmp(&b)));
    let vals = order[..count].iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(n, count, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs, order.get(count).map(|&i| eig.eigenvalues[i]))
}

/// Block power iteration with Rayleigh-Ritz; `None` if it has not
/// converged, in which case the caller falls back to the dense solver.
fn subspace_iteration(m: &DMatrix<f64>, count: usize) -> Option<(Vec<f64>, DMatrix<f64>, Option<f64>)> {
    let n = m.nrows();
    let p = (count + 10).min(n);
    let gen = CounterRng::new(0, stream::VERTEX_HUNTING);
    let mut y = DMatrix::from_fn(n, p, |r, c| gen.uniform_at(&[u64::MAX, r as u64, c as u64]) - 0.5);
    for _ in 0..2000 {
        let q = y.qr().q();
        let z = m * &q;
        let t = q.transpose() * &z;
        let t = (&t + t.transpose()) * 0.5;
        let eig = SymmetricEigen::new(t);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].abs().total_cmp(&eig.eigenvalues[a].abs()).then(a.cmp(&b)));
        let u = DMatrix::from_fn(p, p, |r, c| eig.eigenvectors[(r, order[c])]);
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let x = &q * &u;
        let ax = &z * &u;
        let scale = vals[0].abs().max(f64::MIN_POSITIVE);
        let converged = (0..count).all(|c| (ax.column(c) - x.column(c) * vals[c]).norm() <= 1e-11 * scale);
        if converged {
            let vecs = x.columns(0, count).into_owned();
            return Some((vals[..count].to_vec(), vecs, vals.get(count).copied()));
        }
        y = ax;
    }
    None
}

/// SCORE ratios `sign(ξ_{k+1}/ξ_1)·min(|ξ_{k+1}/ξ_1|, H)` of a symmetric
/// matrix. `threshold = None` uses `H = log N`.
pub fn score_ratios(m: &DMatrix<f64>, k: usize, threshold: Option<f64>) -> Result<ScoreRatios> {
    let n = m.nrows();
    if m.ncols() != n || n == 0 {
        return Err(Error::Shape("score ratios need a non-empty square matrix".into()));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("K = {k} must lie in 1..={n}")));
    }
    let h = threshold.unwrap_or((n as f64).ln());
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("ratio threshold must be positive".into()));
    }
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 {
                return Err(Error::InvalidArgument("input matrix is not symmetric".into()));
            }
        }
    }
    let mut warnings = Vec::new();
    let (eigenvalues, mut vecs, next) = top_eigenpairs(m, k);
    if let Some(next) = next {
        if (eigenvalues[k - 1].abs() - next.abs()).abs() <= 1e-12 {
            warnings.push(format!("degenerate spectrum: |λ_K| and |λ_(K+1)| tie at {:.6e}", next.abs()));
        }
    }
    if vecs.column(0).sum() < 0.0 {
        vecs.column_mut(0).neg_mut();
    }
    let mut zero_lead = 0;
    let ratios = DMatrix::from_fn(n, k - 1, |i, c| {
        let lead = vecs[(i, 0)];
        let x = vecs[(i, c + 1)];
        if lead == 0.0 {
            if c == 0 {
                zero_lead += 1;
            }
            return if x == 0.0 { 0.0 } else { x.signum() * h };
        }
        let r = x / lead;
        r.signum() * r.abs().min(h)
    });
    if zero_lead > 0 {
        warnings.push(format!("{zero_lead} nodes have a zero leading-eigenvector entry"));
    }
    Ok(ScoreRatios { ratios, threshold: h, eigenvalues, eigenvectors: vecs, warnings })
}

/// How the simplex vertices are located in the ratio space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VertexHunter {
    /// Successive projection on the lifted rows `[1, r_i]`: picks actual
    /// rows, exact when pure nodes are present and there is no noise.
    #[default]
    Spa,
    /// Seeded k-means with farthest-point initialization.
    KMeans,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn canonical(mut centers: Vec<Vec<f64>>) -> DMatrix<f64> {
    centers.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    let k = centers.len();
    let d = centers.first().map_or(0, Vec::len);
    DMatrix::from_fn(k, d, |r, c| centers[r][c])
}

fn distinct_rows(rows: &[Vec<f64>]) -> usize {
    let mut sorted: Vec<&Vec<f64>> = rows.iter().collect();
    sorted.sort_by(|a, b| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    sorted.dedup();
    sorted.len()
}

/// Seeded k-means over the rows of `R̂`: farthest-point initialization from
/// a seeded first center, 100 Lloyd iterations, best of 10 restarts by
/// inertia. Centers are returned in lexicographic order, one per row.
pub fn vertex_hunting(ratios: &DMatrix<f64>, k: usize, seed: u64) -> Result<DMatrix<f64>> {
    if k < 2 {
        return Err(Error::InvalidArgument("vertex hunting needs K ≥ 2".into()));
    }
    let rows = rows_of(ratios);
    if distinct_rows(&rows) < k {
        return Err(Error::Degenerate(format!("fewer than {k} distinct ratio rows")));
    }
    let n = rows.len();
    // Seeding from a canonical row order makes the result independent of input order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        rows[a].iter().zip(&rows[b]).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let gen = CounterRng::new(seed, stream::VERTEX_HUNTING);
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let first = order[(gen.u64_at(&[restart]) % n as u64) as usize];
        let mut centers = vec![rows[first].clone()];
        let mut dmin: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0])).collect();
        while centers.len() < k {
            let far = order.iter().copied().fold(order[0], |b, i| if dmin[i] > dmin[b] { i } else { b });
            centers.push(rows[far].clone());
            for (d, r) in dmin.iter_mut().zip(&rows) {
                *d = d.min(sq_dist(r, centers.last().unwrap()));
            }
        }
        let mut assign = vec![usize::MAX; n];
        for _ in 0..KMEANS_ITERATIONS {
            let mut changed = false;
            for (i, r) in rows.iter().enumerate() {
                let c = (0..k).fold(0, |b, c| if sq_dist(r, &centers[c]) < sq_dist(r, &centers[b]) { c } else { b });
                if assign[i] != c {
                    assign[i] = c;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
                if members.is_empty() {
                    continue;
                }
                for (d, x) in center.iter_mut().enumerate() {
                    *x = members.iter().map(|&i| rows[i][d]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let inertia: f64 = rows.iter().zip(&assign).map(|(r, &c)| sq_dist(r, &centers[c])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, centers));
        }
    }
    Ok(canonical(best.expect("at least one restart").1))
}

/// Successive projection on `[1, r_i]`: repeatedly take the row of largest
/// norm and project every row onto its orthogonal complement.
pub fn successive_projection(ratios: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    if k < 2 {
        return Err(Error::InvalidArgument("vertex hunting needs K ≥ 2".into()));
    }
    let n = ratios.nrows();
    let mut y = DMatrix::from_fn(n, k, |i, c| if c == 0 { 1.0 } else { ratios[(i, c - 1)] });
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let norms: Vec<f64> = (0..n).map(|i| y.row(i).norm_squared()).collect();
        let best = (0..n).fold(0, |b, i| if norms[i] > norms[b] { i } else { b });
        if norms[best] <= 1e-20 {
            return Err(Error::Degenerate(format!("ratio rows span fewer than {k} affine directions")));
        }
        picked.push(best);
        let u = y.row(best).transpose() / norms[best].sqrt();
        let proj = &y * &u;
        y -= proj * u.transpose();
    }
    Ok(canonical(picked.iter().map(|&i| ratios.row(i).iter().copied().collect()).collect()))
}

/// Estimated memberships plus the nodes that needed a fallback.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub gamma: MembershipMatrix,
    pub b1: Vec<f64>,
    /// Nodes whose truncated weights were all zero (set to uniform).
    pub uniform_nodes: Vec<usize>,
    /// Communities whose `b̂_1` square-root argument was clamped.
    pub clamped: Vec<usize>,
    pub least_squares: bool,
}

/// Barycentric reconstruction `r̂_i = Σ_k c_i(k) v̂_k`, `Σc = 1`, then
/// `γ̃ = max(0, c/b̂_1)` normalized. `b̂_1(k)` assumes a unit-diagonal
/// connectivity matrix.
pub fn reconstruct_membership(scores: &ScoreRatios, vertices: &DMatrix<f64>) -> Result<Reconstruction> {
    let k = scores.eigenvalues.len();
    let n = scores.ratios.nrows();
    if vertices.nrows() != k || vertices.ncols() + 1 != k {
        return Err(Error::Shape(format!("expected {k} vertices in {} dimensions", k - 1)));
    }
    let mut clamped = Vec::new();
    let b1: Vec<f64> = (0..k)
        .map(|c| {
            let arg = scores.eigenvalues[0] + (1..k).map(|m| scores.eigenvalues[m] * vertices[(c, m - 1)].powi(2)).sum::<f64>();
            if arg <= 1e-12 {
                clamped.push(c);
            }
            arg.max(1e-12).powf(-0.5)
        })
        .collect();
    // Column c is [1, v̂_c].
    let system = DMatrix::from_fn(k, k, |r, c| if r == 0 { 1.0 } else { vertices[(c, r - 1)] });
    let lu = system.clone().lu();
    let invertible = lu.is_invertible() && {
        let svd = system.clone().svd(false, false);
        svd.singular_values.min() > 1e-12 * svd.singular_values.max()
    };
    let pinv = if invertible { None } else { Some(system.clone().pseudo_inverse(1e-12).map_err(|e| Error::Singular(e.to_string()))?) };
    let mut rows = Vec::with_capacity(n);
    let mut uniform_nodes = Vec::new();
    for i in 0..n {
        let rhs = DVector::from_fn(k, |r, _| if r == 0 { 1.0 } else { scores.ratios[(i, r - 1)] });
        let c = match &pinv {
            None => lu.solve(&rhs).ok_or_else(|| Error::Singular("barycentric system".into()))?,
            Some(p) => p * rhs,
        };
        let tilde: Vec<f64> = (0..k).map(|m| (c[m] / b1[m]).max(0.0)).collect();
        let total: f64 = tilde.iter().sum();
        if total > 0.0 && total.is_finite() {
            rows.push(tilde.iter().map(|x| x / total).collect());
        } else {
            uniform_nodes.push(i);
            rows.push(vec![1.0 / k as f64; k]);
        }
    }
    Ok(Reconstruction { gamma: MembershipMatrix::from_rows(&rows)?, b1, uniform_nodes, clamped, least_squares: !invertible })
}

#[derive(Clone, Debug)]
pub struct MscoreEstimate {
    pub gamma: MembershipMatrix,
    pub vertices: Option<DMatrix<f64>>,
    pub scores: Option<ScoreRatios>,
    pub warnings: Vec<String>,
}

/// Full pipeline on an adjacency matrix, or on `Ω` itself in noiseless mode.
pub fn estimate(m: &DMatrix<f64>, k: usize, threshold: Option<f64>, seed: u64, hunter: VertexHunter) -> Result<MscoreEstimate> {
    let n = m.nrows();
    if n > DEFAULT_MAX_NODES {
        return Err(Error::InvalidArgument(format!("{n} nodes exceeds the cap of {DEFAULT_MAX_NODES}")));
    }
    if k == 1 {
        let gamma = MembershipMatrix::new(DMatrix::from_element(n, 1, 1.0))?;
        return Ok(MscoreEstimate { gamma, vertices: None, scores: None, warnings: Vec::new() });
    }
    let scores = score_ratios(m, k, threshold)?;
    let vertices = match hunter {
        VertexHunter::Spa => successive_projection(&scores.ratios, k)?,
        VertexHunter::KMeans => vertex_hunting(&scores.ratios, k, seed)?,
    };
    let rec = reconstruct_membership(&scores, &vertices)?;
    let mut warnings = scores.warnings.clone();
    if !rec.clamped.is_empty() {
        warnings.push(format!("b̂_1 argument clamped for communities {:?}", rec.clamped));
    }
    if !rec.uniform_nodes.is_empty() {
        warnings.push(format!("{} nodes fell back to uniform membership", rec.uniform_nodes.len()));
    }
    if rec.least_squares {
        warnings.push("vertices are nearly affinely dependent; used least squares".into());
    }
    Ok(MscoreEstimate { gamma: rec.gamma, vertices: Some(vertices), scores: Some(scores), warnings })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Aligned column `j` is estimated column `perm[j]`.
    pub perm: Vec<usize>,
    pub mean_l1: f64,
    /// False when `K > 8` and greedy matching was used.
    pub exhaustive: bool,
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(cur, used, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Column permutation of `est` minimizing the mean per-row L1 distance to
/// `reference`. Exhaustive for `K ≤ 8`, greedy above.
pub fn align(est: &MembershipMatrix, reference: &MembershipMatrix) -> Result<Alignment> {
    let (n, k) = (reference.n(), reference.k());
    if est.n() != n || est.k() != k {
        return Err(Error::Shape("memberships to align differ in shape".into()));
    }
    // cost[j][l]: L1 distance between reference column j and estimated column l.
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|j| (0..k).map(|l| (0..n).map(|i| (reference.weight(i, j) - est.weight(i, l)).abs()).sum()).collect())
        .collect();
    let total = |perm: &[usize]| perm.iter().enumerate().map(|(j, &l)| cost[j][l]).sum::<f64>();
    let (perm, exhaustive) = if k <= 8 {
        let best = permutations(k).into_iter().fold(None::<(f64, Vec<usize>)>, |b, p| {
            let c = total(&p);
            match b {
                Some((bc, _)) if bc <= c => b,
                _ => Some((c, p)),
            }
        });
        (best.expect("K ≥ 1").1, true)
    } else {
        (greedy_assignment(&cost), false)
    };
    let mean_l1 = total(&perm) / n as f64;
    Ok(Alignment { perm, mean_l1, exhaustive })
}

fn greedy_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let k = cost.len();
    let mut perm = vec![usize::MAX; k];
    let mut used = vec![false; k];
    let mut cells: Vec<(f64, usize, usize)> = (0..k).flat_map(|j| (0..k).map(move |l| (j, l))).map(|(j, l)| (cost[j][l], j, l)).collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, j, l) in cells {
        if perm[j] == usize::MAX && !used[l] {
            perm[j] = l;
            used[l] = true;
        }
    }
    perm
}

/// Mean per-row L1 error after alignment, per row.
pub fn aligned_row_errors(est: &MembershipMatrix, reference: &MembershipMatrix, perm: &[usize]) -> Vec<f64> {
    (0..reference.n())
        .map(|i| (0..reference.k()).map(|j| (reference.weight(i, j) - est.weight(i, perm[j])).abs()).sum())
        .collect()
}
