//! Agent–community membership matrix `Γ` and the maps between agent-level
//! and community-level quantities.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::rng::{stream, StreamRng};
use crate::{Error, Result};

/// Default ridge for callers that opt into auto-perturbation.
pub const DEFAULT_RIDGE: f64 = 1e-8;

const ROW_TOL: f64 = 1e-12;
const RANK_TOL: f64 = 1e-10;

/// Row-stochastic `Γ ∈ ℝ^{N×K}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MembershipMatrix {
    gamma: DMatrix<f64>,
}

/// JSON form `{"N": .., "K": .., "rows": [[..], ..]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipJson {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub rows: Vec<Vec<f64>>,
}

/// Validation report for a candidate membership matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostics {
    pub n: usize,
    pub k: usize,
    /// Rows whose sum differs from 1 by more than 1e-12.
    pub row_sum_violations: Vec<usize>,
    pub negative_entries: Vec<(usize, usize)>,
    pub rank_gram: usize,
    pub min_gram_eigenvalue: f64,
    pub pure_nodes: usize,
}

impl Diagnostics {
    pub fn is_valid(&self) -> bool {
        self.row_sum_violations.is_empty() && self.negative_entries.is_empty()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank_gram == self.k
    }
}

/// Inspects `Γ` without mutating or rejecting it.
pub fn validate(gamma: &DMatrix<f64>) -> Diagnostics {
    let (n, k) = gamma.shape();
    let row_sum_violations = (0..n)
        .filter(|&i| (gamma.row(i).sum() - 1.0).abs() > ROW_TOL)
        .collect();
    let mut negative_entries = Vec::new();
    for i in 0..n {
        for j in 0..k {
            if gamma[(i, j)] < 0.0 {
                negative_entries.push((i, j));
            }
        }
    }
    let gram = gamma.transpose() * gamma;
    let eig = gram.symmetric_eigenvalues();
    let min_gram_eigenvalue = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let rank_gram = eig.iter().filter(|&&e| e >= RANK_TOL).count();
    let pure_nodes = (0..n).filter(|&i| is_pure(gamma.row(i).iter())).count();
    Diagnostics { n, k, row_sum_violations, negative_entries, rank_gram, min_gram_eigenvalue, pure_nodes }
}

fn is_pure<'a>(row: impl Iterator<Item = &'a f64>) -> bool {
    let mut ones = 0;
    let mut zeros = 0;
    let mut len = 0;
    for &x in row {
        len += 1;
        if (x - 1.0).abs() <= ROW_TOL {
            ones += 1;
        } else if x.abs() <= ROW_TOL {
            zeros += 1;
        }
    }
    ones == 1 && zeros == len - 1
}

impl MembershipMatrix {
    pub fn new(gamma: DMatrix<f64>) -> Result<Self> {
        if gamma.nrows() == 0 || gamma.ncols() == 0 {
            return Err(Error::Shape("membership matrix must be non-empty".into()));
        }
        let diag = validate(&gamma);
        if !diag.is_valid() {
            return Err(Error::InvalidArgument(format!(
                "membership rows must be nonnegative and sum to 1 (row-sum violations {:?}, negative entries {:?})",
                diag.row_sum_violations, diag.negative_entries
            )));
        }
        Ok(Self { gamma })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("membership rows have unequal lengths".into()));
        }
        Self::new(DMatrix::from_fn(n, k, |i, j| rows[i][j]))
    }

    /// `Γ = I_K` (every agent pure in its own community).
    pub fn identity(k: usize) -> Self {
        Self { gamma: DMatrix::identity(k, k) }
    }

    /// Rows drawn i.i.d. from `Dirichlet(alpha)` as normalized Gamma draws.
    pub fn dirichlet(n: usize, alpha: &[f64], seed: u64) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidArgument("dirichlet needs at least one concentration".into()));
        }
        let dists = alpha
            .iter()
            .map(|&a| Gamma::new(a, 1.0).map_err(|e| Error::InvalidArgument(format!("dirichlet concentration {a}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = StreamRng::new(seed, stream::MEMBERSHIP);
        let k = alpha.len();
        let mut gamma = DMatrix::zeros(n, k);
        let mut row = vec![0.0; k];
        for i in 0..n {
            loop {
                for (x, d) in row.iter_mut().zip(&dists) {
                    *x = d.sample(&mut rng);
                }
                let sum: f64 = row.iter().sum();
                if sum > 0.0 {
                    for j in 0..k {
                        gamma[(i, j)] = row[j] / sum;
                    }
                    break;
                }
            }
            let sum: f64 = gamma.row(i).sum();
            gamma.row_mut(i).iter_mut().for_each(|x| *x /= sum);
        }
        Self::new(gamma)
    }

    pub fn n(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn k(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    #[inline]
    pub fn weight(&self, i: usize, k: usize) -> f64 {
        self.gamma[(i, k)]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.gamma.row(i).iter().cloned().collect()
    }

    pub fn is_pure(&self, i: usize) -> bool {
        is_pure(self.gamma.row(i).iter())
    }

    pub fn diagnostics(&self) -> Diagnostics {
        validate(&self.gamma)
    }

    /// Agent scalars `Γ c`.
    pub fn aggregate(&self, community: &[f64]) -> Result<Vec<f64>> {
        if community.len() != self.k() {
            return Err(Error::Shape(format!("expected {} community values, got {}", self.k(), community.len())));
        }
        Ok((0..self.n()).map(|i| self.aggregate_row(i, community)).collect())
    }

    /// `Σ_k γ_i(k) c_k` for one agent.
    #[inline]
    pub fn aggregate_row(&self, i: usize, community: &[f64]) -> f64 {
        self.gamma.row(i).iter().zip(community).map(|(g, c)| g * c).sum()
    }

    /// Agent vectors `Σ_k γ_i(k) v^(k)` for equal-length community vectors.
    pub fn aggregate_vectors(&self, community: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if community.len() != self.k() {
            return Err(Error::Shape(format!("expected {} community vectors, got {}", self.k(), community.len())));
        }
        let dim = community.first().map_or(0, Vec::len);
        if community.iter().any(|v| v.len() != dim) {
            return Err(Error::Shape("community vectors have unequal lengths".into()));
        }
        Ok((0..self.n())
            .map(|i| {
                let mut out = vec![0.0; dim];
                self.aggregate_vector_into(i, community, &mut out);
                out
            })
            .collect())
    }

    pub fn aggregate_vector_into(&self, i: usize, community: &[Vec<f64>], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (k, v) in community.iter().enumerate() {
            let g = self.gamma[(i, k)];
            if g != 0.0 {
                for (o, x) in out.iter_mut().zip(v) {
                    *o += g * x;
                }
            }
        }
    }

    /// Least-squares community vector `(Γ'Γ + εI)^{-1} Γ' r`.
    pub fn invert(&self, agent: &[f64], ridge: f64) -> Result<Vec<f64>> {
        Inverter::new(self, ridge)?.apply(agent)
    }

    /// `γ_it = (1 − c/t) γ_i + (c/t)·(1/K)`, with the weight capped at 1.
    pub fn drifted(&self, t: u64, c: f64) -> Self {
        let w = if t == 0 { 1.0 } else { (c / t as f64).clamp(0.0, 1.0) };
        let k = self.k() as f64;
        Self { gamma: self.gamma.map(|g| (1.0 - w) * g + w / k) }
    }

    pub fn to_json(&self) -> MembershipJson {
        MembershipJson {
            n: self.n(),
            k: self.k(),
            rows: (0..self.n()).map(|i| self.row(i)).collect(),
        }
    }

    pub fn from_json(json: &MembershipJson) -> Result<Self> {
        if json.rows.len() != json.n || json.rows.iter().any(|r| r.len() != json.k) {
            return Err(Error::Shape("membership JSON dimensions disagree with N/K".into()));
        }
        Self::from_rows(&json.rows)
    }

    /// Columns permuted so that new column `j` is old column `perm[j]`.
    pub fn permuted_columns(&self, perm: &[usize]) -> Self {
        Self { gamma: DMatrix::from_fn(self.n(), self.k(), |i, j| self.gamma[(i, perm[j])]) }
    }
}

/// Cached linear map `r ↦ argmin_c ‖Γc − r‖² + ε‖c‖²`.
///
/// The map is computed once by a QR solve on the stacked system
/// `[Γ; √ε I] c = [r; 0]` and then applied as a `K×N` matrix.
#[derive(Clone, Debug)]
pub struct Inverter {
    map: DMatrix<f64>,
}

impl Inverter {
    pub fn new(gamma: &MembershipMatrix, ridge: f64) -> Result<Self> {
        let (n, k) = (gamma.n(), gamma.k());
        if !(ridge >= 0.0) {
            return Err(Error::InvalidArgument("ridge must be nonnegative".into()));
        }
        let g = gamma.matrix();
        if ridge == 0.0 {
            let sv = g.singular_values();
            let min_sv = if n < k { 0.0 } else { sv.iter().cloned().fold(f64::INFINITY, f64::min) };
            let min_eig = min_sv * min_sv;
            if min_eig < RANK_TOL {
                return Err(Error::RankDeficient { min_eig });
            }
        }
        let rows = n + if ridge > 0.0 { k } else { 0 };
        let mut stacked = DMatrix::zeros(rows, k);
        stacked.view_mut((0, 0), (n, k)).copy_from(g);
        let mut rhs = DMatrix::zeros(rows, n);
        rhs.view_mut((0, 0), (n, n)).fill_with_identity();
        if ridge > 0.0 {
            let r = ridge.sqrt();
            for j in 0..k {
                stacked[(n + j, j)] = r;
            }
        }
        let qr = stacked.qr();
        let qt_rhs = qr.q().transpose() * rhs;
        let map = qr
            .r()
            .solve_upper_triangular(&qt_rhs)
            .ok_or_else(|| Error::Singular("triangular factor of Γ is singular".into()))?;
        Ok(Self { map })
    }

    pub fn k(&self) -> usize {
        self.map.nrows()
    }

    pub fn apply(&self, agent: &[f64]) -> Result<Vec<f64>> {
        if agent.len() != self.map.ncols() {
            return Err(Error::Shape(format!("expected {} agent values, got {}", self.map.ncols(), agent.len())));
        }
        let mut out = vec![0.0; self.k()];
        self.apply_into(agent, &mut out);
        Ok(out)
    }

    #[inline]
    pub fn apply_into(&self, agent: &[f64], out: &mut [f64]) {
        let x = DVector::from_column_slice(agent);
        let c = &self.map * x;
        out.copy_from_slice(c.as_slice());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_gamma(n: usize, k: usize, seed: u64) -> MembershipMatrix {
        MembershipMatrix::dirichlet(n, &vec![1.0; k], seed).unwrap()
    }

    #[test]
    fn identity_membership_passes_values_through() {
        let g = MembershipMatrix::identity(3);
        assert_eq!(g.aggregate(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let c = g.invert(&[4.0, -1.0, 0.5], 0.0).unwrap();
        for (a, b) in c.iter().zip([4.0, -1.0, 0.5]) {
            assert_abs_diff_eq!(a, &b, epsilon = 1e-14);
        }
    }

    #[test]
    fn convex_combination() {
        let g = MembershipMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(g.aggregate(&[1.0, 3.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn aggregate_matches_direct_product() {
        let g = random_gamma(7, 3, 11);
        let c = [0.3, -2.0, 5.5];
        let got = g.aggregate(&c).unwrap();
        for i in 0..7 {
            let mut expect = 0.0;
            for k in 0..3 {
                expect += g.matrix()[(i, k)] * c[k];
            }
            assert_abs_diff_eq!(got[i], expect, epsilon = 1e-12);
        }
        let vecs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]];
        let agg = g.aggregate_vectors(&vecs).unwrap();
        for i in 0..7 {
            let row = g.row(i);
            assert_abs_diff_eq!(agg[i][0], row[0] + 2.0 * row[2], epsilon = 1e-12);
            assert_abs_diff_eq!(agg[i][1], row[1] + 2.0 * row[2], epsilon = 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let g = random_gamma(4, 2, 1);
        assert!(matches!(g.aggregate(&[1.0]), Err(Error::Shape(_))));
        assert!(matches!(g.invert(&[1.0, 2.0], 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn invert_recovers_planted_community_vector() {
        let g = random_gamma(12, 4, 5);
        let truth = [1.5, -0.25, 3.0, 0.75];
        let agent = g.aggregate(&truth).unwrap();
        let c = g.invert(&agent, 0.0).unwrap();
        for (a, b) in c.iter().zip(truth) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-10);
        }
    }

    fn duplicated() -> MembershipMatrix {
        MembershipMatrix::from_rows(&[
            vec![0.5, 0.5, 0.0],
            vec![0.2, 0.2, 0.6],
            vec![0.4, 0.4, 0.2],
            vec![0.1, 0.1, 0.8],
        ])
        .unwrap()
    }

    #[test]
    fn duplicated_columns_need_ridge() {
        let g = duplicated();
        let r = [1.0, 2.0, 0.5, 3.0];
        assert!(matches!(g.invert(&r, 0.0), Err(Error::RankDeficient { .. })));
        let eps = 1e-6;
        let c = g.invert(&r, eps).unwrap();
        assert!(c.iter().all(|x| x.is_finite()));
        // Dense normal-equation solve of the ridge objective.
        let m = g.matrix();
        let lhs = m.transpose() * m + DMatrix::identity(3, 3) * eps;
        let rhs = m.transpose() * DVector::from_column_slice(&r);
        let dense = lhs.lu().solve(&rhs).unwrap();
        let obj = |c: &[f64]| {
            let cv = DVector::from_column_slice(c);
            (m * &cv - DVector::from_column_slice(&r)).norm_squared() + eps * cv.norm_squared()
        };
        assert!((obj(&c) - obj(dense.as_slice())).abs() <= 1e-9 * (1.0 + obj(dense.as_slice())));
    }

    #[test]
    fn ridge_solution_converges_as_eps_shrinks() {
        let g = random_gamma(10, 3, 8);
        let r: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        let exact = g.invert(&r, 0.0).unwrap();
        let mut last = f64::INFINITY;
        for eps in [1e-2, 1e-4, 1e-6] {
            let c = g.invert(&r, eps).unwrap();
            let err = c.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < last, "error {err} did not decrease at ε = {eps}");
            last = err;
        }
    }

    #[test]
    fn validate_flags_bad_rows_and_rank() {
        let good = random_gamma(20, 4, 3);
        let d = good.diagnostics();
        assert!(d.is_valid() && d.is_full_rank());

        let bad = DMatrix::from_row_slice(2, 2, &[0.6, 0.3, 0.5, 0.5]);
        let d = validate(&bad);
        assert_eq!(d.row_sum_violations, vec![0]);
        assert!(MembershipMatrix::new(bad).is_err());

        let dup = DMatrix::from_row_slice(4, 4, &[
            0.25, 0.25, 0.5, 0.0, //
            0.1, 0.1, 0.2, 0.6, //
            0.3, 0.3, 0.1, 0.3, //
            0.0, 0.0, 0.5, 0.5,
        ]);
        let d = validate(&dup);
        assert!(d.is_valid());
        assert_eq!(d.rank_gram, 3);
        assert!(d.min_gram_eigenvalue < 1e-10);
    }

    #[test]
    fn pure_flags() {
        let g = MembershipMatrix::from_rows(&[vec![1.0, 0.0], vec![0.3, 0.7]]).unwrap();
        assert!(g.is_pure(0));
        assert!(!g.is_pure(1));
        assert_eq!(g.diagnostics().pure_nodes, 1);
    }

    #[test]
    fn json_round_trip() {
        let g = random_gamma(5, 3, 2);
        let text = serde_json::to_string(&g.to_json()).unwrap();
        assert!(text.starts_with("{\"N\":5,\"K\":3,\"rows\":"));
        let back: MembershipJson = serde_json::from_str(&text).unwrap();
        assert_eq!(MembershipMatrix::from_json(&back).unwrap(), g);
    }

    #[test]
    fn drift_moves_toward_target() {
        let g = random_gamma(6, 3, 4);
        let early = g.drifted(1, 2.0);
        assert!(early.matrix().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
        let late = g.drifted(1_000_000, 2.0);
        assert!((late.matrix() - g.matrix()).abs().max() < 1e-5);
        assert!(late.diagnostics().is_valid());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn round_trip_through_aggregate(seed in 0u64..10_000, c in proptest::collection::vec(-5.0f64..5.0, 3)) {
                let g = random_gamma(9, 3, seed);
                prop_assume!(g.diagnostics().min_gram_eigenvalue > 1e-3);
                let back = g.invert(&g.aggregate(&c).unwrap(), 0.0).unwrap();
                for (a, b) in back.iter().zip(&c) {
                    prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
                }
            }

            #[test]
            fn aggregate_stays_within_community_range(seed in 0u64..10_000, c in proptest::collection::vec(-5.0f64..5.0, 4)) {
                let g = random_gamma(6, 4, seed);
                let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for v in g.aggregate(&c).unwrap() {
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }
}
