//! No-arbitrage analysis at a node and across a tree.
//!
//! Everything is expressed through the quasi-sure support of the price
//! increment: the increments at children that carry positive probability under
//! at least one extreme measure. The span `L` of the support is represented by
//! an orthonormal basis; strategies are searched in `L` coordinates since
//! directions in `L⊥` never change any payoff.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{maximize_free, LpError};
use crate::model::{MeasureSet, NodeId, ScenarioTree};

/// Rank cutoff for the span of the support.
pub const RANK_TOL: f64 = 1e-10;
/// NA holds iff the arbitrage LP optimum is at most this.
pub const NA_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NaError {
    #[error("node {node}: arbitrage LP failed: {source}")]
    Solver { node: NodeId, source: LpError },
    #[error("node {0}: margin undefined, NA fails")]
    MarginUndefined(NodeId),
    #[error("node {0} is terminal")]
    Terminal(NodeId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportData {
    pub node: NodeId,
    /// Non-polar children in child order.
    pub nonpolar_children: Vec<NodeId>,
    /// Positions of the non-polar children in the node's child list.
    pub positions: Vec<usize>,
    pub support_vectors: Vec<Vec<f64>>,
    /// Orthonormal basis of `L`, one row per basis vector.
    pub basis_l: Vec<Vec<f64>>,
    pub projector_l: Vec<Vec<f64>>,
}

impl SupportData {
    /// Support from explicit increments; `measures` decides polarity.
    pub fn from_increments(node: NodeId, children: &[NodeId], increments: &[Vec<f64>], measures: &MeasureSet) -> Self {
        let d = increments.first().map_or(0, Vec::len);
        let mut positions = Vec::new();
        for pos in 0..children.len() {
            if measures.charges(pos) {
                positions.push(pos);
            }
        }
        let nonpolar_children = positions.iter().map(|&p| children[p]).collect();
        let support_vectors: Vec<Vec<f64>> = positions.iter().map(|&p| increments[p].clone()).collect();
        let basis_l = span_basis(&support_vectors, d);
        let projector_l = (0..d)
            .map(|i| (0..d).map(|j| basis_l.iter().map(|b| b[i] * b[j]).sum()).collect())
            .collect();
        Self {
            node,
            nonpolar_children,
            positions,
            support_vectors,
            basis_l,
            projector_l,
        }
    }

    pub fn asset_count(&self) -> usize {
        self.projector_l.len()
    }

    pub fn dim_l(&self) -> usize {
        self.basis_l.len()
    }

    /// Coordinates `Bh` of `h` in the basis of `L`.
    pub fn to_coords(&self, h: &[f64]) -> Vec<f64> {
        self.basis_l.iter().map(|b| dot(b, h)).collect()
    }

    /// `Bᵀc`, the point of `L` with coordinates `c`.
    pub fn from_coords(&self, c: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.asset_count()];
        for (b, &ck) in self.basis_l.iter().zip(c) {
            for (hi, bi) in h.iter_mut().zip(b) {
                *hi += ck * bi;
            }
        }
        h
    }

    /// Support vectors in `L` coordinates.
    pub fn coord_vectors(&self) -> Vec<Vec<f64>> {
        self.support_vectors.iter().map(|v| self.to_coords(v)).collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn span_basis(vectors: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
    if vectors.is_empty() || d == 0 {
        return Vec::new();
    }
    let m = DMatrix::from_fn(vectors.len(), d, |i, j| vectors[i][j]);
    let svd = m.svd(false, true);
    let vt = svd.v_t.expect("requested V");
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &s| a.max(s));
    let cutoff = RANK_TOL * smax.max(1.0);
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    if rank == d {
        // full span: the identity basis keeps coordinates equal to holdings
        return (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
    }
    let mut basis = Vec::with_capacity(rank);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            basis.push((0..d).map(|j| vt[(k, j)]).collect());
        }
    }
    basis
}

/// Support data of a non-terminal node.
pub fn compute_support(tree: &ScenarioTree, node: NodeId) -> Result<SupportData, NaError> {
    let n = tree.node(node);
    let ms = n.measures.as_ref().ok_or(NaError::Terminal(node))?;
    let incs: Vec<Vec<f64>> = n.children.iter().map(|&c| tree.increment(node, c)).collect();
    Ok(SupportData::from_increments(node, &n.children, &incs, ms))
}

/// `P_L h`.
pub fn project_to_l(support: &SupportData, h: &[f64]) -> Vec<f64> {
    support.projector_l.iter().map(|row| dot(row, h)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaStatus {
    Holds,
    Violated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaResult {
    pub status: NaStatus,
    /// Unit vector in `L` with nonnegative payoff everywhere on the support
    /// and positive payoff somewhere.
    pub witness: Option<Vec<f64>>,
}

impl NaResult {
    pub fn holds(&self) -> bool {
        self.status == NaStatus::Holds
    }
}

/// Node-level NA by linear programming over `L` coordinates.
pub fn check_na_node(support: &SupportData) -> Result<NaResult, NaError> {
    let k = support.dim_l();
    let holds = NaResult {
        status: NaStatus::Holds,
        witness: None,
    };
    if k == 0 {
        return Ok(holds);
    }
    let w = support.coord_vectors();
    let n = w.len();
    let nv = k + n;
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for (i, wi) in w.iter().enumerate() {
        let norm = dot(wi, wi).sqrt();
        // s_i − c·ŵ_i ≤ 0
        let mut r = vec![0.0; nv];
        if norm > 0.0 {
            for j in 0..k {
                r[j] = -wi[j] / norm;
            }
        }
        r[k + i] = 1.0;
        rows.push(r);
        rhs.push(0.0);
        let mut r = vec![0.0; nv];
        r[k + i] = 1.0;
        rows.push(r);
        rhs.push(1.0);
        let mut r = vec![0.0; nv];
        r[k + i] = -1.0;
        rows.push(r);
        rhs.push(0.0);
    }
    // a box on c only fixes the scale of the witness
    for j in 0..k {
        for sgn in [1.0, -1.0] {
            let mut r = vec![0.0; nv];
            r[j] = sgn;
            rows.push(r);
            rhs.push(1.0);
        }
    }
    let mut obj = vec![0.0; nv];
    for o in obj.iter_mut().skip(k) {
        *o = 1.0;
    }
    let sol = maximize_free(&obj, &rows, &rhs).map_err(|source| NaError::Solver {
        node: support.node,
        source,
    })?;
    if sol.value <= NA_TOL {
        return Ok(holds);
    }
    let c = &sol.y[..k];
    let norm = dot(c, c).sqrt();
    let h: Vec<f64> = support.from_coords(c).into_iter().map(|v| v / norm).collect();
    Ok(NaResult {
        status: NaStatus::Violated,
        witness: Some(h),
    })
}

/// NA at every non-polar decision node.
pub fn check_na_tree(tree: &ScenarioTree) -> Result<BTreeMap<NodeId, NaResult>, NaError> {
    let mask = tree.nonpolar_mask();
    let mut out = BTreeMap::new();
    for id in tree.decision_nodes() {
        if mask[id.0] {
            out.insert(id, check_na_node(&compute_support(tree, id)?)?);
        }
    }
    Ok(out)
}

pub fn tree_na_holds(results: &BTreeMap<NodeId, NaResult>) -> bool {
    results.values().all(NaResult::holds)
}

/// `K_x = {h ∈ L : x + h·v_i ≥ 0}` in H-representation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissiblePolytope {
    pub node: NodeId,
    pub capital: f64,
    /// Each `v` stands for the constraint `x + h·v ≥ 0`.
    pub constraints: Vec<Vec<f64>>,
    pub basis_l: Vec<Vec<f64>>,
    pub bounded: bool,
}

pub fn admissible_polytope(support: &SupportData, x: f64) -> Result<AdmissiblePolytope, NaError> {
    let bounded = check_na_node(support)?.holds();
    Ok(AdmissiblePolytope {
        node: support.node,
        capital: x,
        constraints: support.support_vectors.clone(),
        basis_l: support.basis_l.clone(),
        bounded,
    })
}

impl AdmissiblePolytope {
    pub fn contains(&self, h: &[f64], tol: f64) -> bool {
        self.constraints.iter().all(|v| self.capital + dot(h, v) >= -tol)
    }

    /// Coordinate-wise bounds `[lo_j, hi_j]` of the polytope in `L`
    /// coordinates. Requires `bounded`.
    pub fn coord_bounds(&self) -> Result<Vec<(f64, f64)>, NaError> {
        let k = self.basis_l.len();
        let rows: Vec<Vec<f64>> = self
            .constraints
            .iter()
            .map(|v| self.basis_l.iter().map(|b| -dot(b, v)).collect())
            .collect();
        let rhs = vec![self.capital; rows.len()];
        let mut out = Vec::with_capacity(k);
        for j in 0..k {
            let mut obj = vec![0.0; k];
            obj[j] = 1.0;
            let err = |source| NaError::Solver {
                node: self.node,
                source,
            };
            let hi = maximize_free(&obj, &rows, &rhs).map_err(err)?.value;
            obj[j] = -1.0;
            let lo = -maximize_free(&obj, &rows, &rhs).map_err(err)?.value;
            out.push((lo.min(0.0), hi.max(0.0)));
        }
        Ok(out)
    }
}

/// Largest `r` with the radius-`r` ball of `L` inside `conv{v_i}`, by
/// enumerating the facets of the hull in `L` coordinates. `+∞` when
/// `L = {0}`.
pub fn nondegeneracy_margin(support: &SupportData) -> Result<f64, NaError> {
    if !check_na_node(support)?.holds() {
        return Err(NaError::MarginUndefined(support.node));
    }
    let k = support.dim_l();
    if k == 0 {
        return Ok(f64::INFINITY);
    }
    let w = support.coord_vectors();
    let scale = w.iter().map(|v| dot(v, v).sqrt()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(1.0);
    let mut best = f64::INFINITY;
    let mut subset: Vec<usize> = (0..k).collect();
    loop {
        if let Some((a, b)) = hyperplane_through(&w, &subset) {
            let below = w.iter().all(|p| dot(&a, p) <= b + tol);
            let above = w.iter().all(|p| dot(&a, p) >= b - tol);
            if below {
                best = best.min(b);
            }
            if above {
                best = best.min(-b);
            }
        }
        if !next_subset(&mut subset, w.len()) {
            break;
        }
    }
    Ok(best.max(0.0))
}

/// Unit normal `a` and offset `b` of the hyperplane `a·p = b` through the
/// points indexed by `idx` (exactly `k` of them).
fn hyperplane_through(points: &[Vec<f64>], idx: &[usize]) -> Option<(Vec<f64>, f64)> {
    let k = idx.len();
    let base = &points[idx[0]];
    if k == 1 {
        return Some((vec![1.0], base[0]));
    }
    // null space of the k−1 difference vectors
    let m = DMatrix::from_fn(k - 1, k, |i, j| points[idx[i + 1]][j] - base[j]);
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &s| a.max(s));
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * smax.max(1e-300))
        .count();
    if smax == 0.0 || rank < k - 1 {
        return None;
    }
    // the normal spans the kernel of M: smallest eigenvector of MᵀM
    let mtm = m.transpose() * &m;
    let eig = mtm.symmetric_eigen();
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let a: Vec<f64> = (0..k).map(|j| eig.eigenvectors[(j, imin)]).collect();
    let b = dot(&a, base);
    Some((a, b))
}

fn next_subset(s: &mut [usize], n: usize) -> bool {
    let k = s.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if s[i] < n - k + i {
            s[i] += 1;
            for j in i + 1..k {
                s[j] = s[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TreeBuilder;
    use proptest::prelude::{prop_assert, proptest};

    fn support(vs: Vec<Vec<f64>>) -> SupportData {
        let n = vs.len();
        let ids: Vec<NodeId> = (1..=n).map(NodeId).collect();
        SupportData::from_increments(NodeId(0), &ids, &vs, &MeasureSet::single(vec![1.0 / n as f64; n]))
    }

    #[test]
    fn support_excludes_polar_children() {
        let ms = MeasureSet::new(vec![vec![0.5, 0.0, 0.5], vec![0.2, 0.0, 0.8]]);
        let ids = [NodeId(1), NodeId(2), NodeId(3)];
        let s = SupportData::from_increments(NodeId(0), &ids, &[vec![-1.0], vec![5.0], vec![1.0]], &ms);
        assert_eq!(s.nonpolar_children, vec![NodeId(1), NodeId(3)]);
        assert_eq!(s.support_vectors, vec![vec![-1.0], vec![1.0]]);
    }

    #[test]
    fn full_support_in_the_plane() {
        let s = support(vec![vec![1.0, -1.0], vec![-1.0, -1.0], vec![1.0, 2.0], vec![-1.0, 2.0]]);
        assert_eq!(s.dim_l(), 2);
        assert!(check_na_node(&s).unwrap().holds());
    }

    #[test]
    fn axis_support_projects_out_second_coordinate() {
        let s = support(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]);
        assert_eq!(s.dim_l(), 1);
        let p = project_to_l(&s, &[3.0, 5.0]);
        assert!((p[0] - 3.0).abs() < 1e-12 && p[1].abs() < 1e-12);
        let q = project_to_l(&s, &p);
        assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn na_examples() {
        assert!(check_na_node(&support(vec![vec![-1.0], vec![1.0]])).unwrap().holds());
        let r = check_na_node(&support(vec![vec![1.0], vec![2.0]])).unwrap();
        assert_eq!(r.status, NaStatus::Violated);
        assert!((r.witness.unwrap()[0] - 1.0).abs() < 1e-12);
        let r = check_na_node(&support(vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![0.0, 2.0]])).unwrap();
        let h = r.witness.unwrap();
        assert!((dot(&h, &h) - 1.0).abs() < 1e-12);
        for v in [[1.0, 1.0], [-1.0, 1.0], [0.0, 2.0]] {
            assert!(dot(&h, &v) >= -1e-9);
        }
    }

    #[test]
    fn polytope_interval_and_boundedness() {
        let s = support(vec![vec![-1.0], vec![2.0]]);
        let k = admissible_polytope(&s, 1.0).unwrap();
        assert!(k.bounded);
        let b = k.coord_bounds().unwrap();
        assert!((b[0].0 + 0.5).abs() < 1e-12 && (b[0].1 - 1.0).abs() < 1e-12);
        let k0 = admissible_polytope(&s, 0.0).unwrap();
        let b0 = k0.coord_bounds().unwrap();
        assert!(b0[0].0.abs() < 1e-12 && b0[0].1.abs() < 1e-12);
        assert!(
            !admissible_polytope(&support(vec![vec![1.0], vec![2.0]]), 1.0)
                .unwrap()
                .bounded
        );
    }

    #[test]
    fn polytope_scales_with_capital() {
        let s = support(vec![vec![-1.0, -0.5], vec![2.0, -1.0], vec![0.3, 1.0]]);
        let a = admissible_polytope(&s, 1.0).unwrap().coord_bounds().unwrap();
        let b = admissible_polytope(&s, 3.0).unwrap().coord_bounds().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((3.0 * x.0 - y.0).abs() < 1e-10 && (3.0 * x.1 - y.1).abs() < 1e-10);
        }
    }

    #[test]
    fn margins() {
        let m = |vs| nondegeneracy_margin(&support(vs)).unwrap();
        assert!((m(vec![vec![-1.0], vec![1.0]]) - 1.0).abs() < 1e-12);
        assert!((m(vec![vec![-0.5], vec![2.0]]) - 0.5).abs() < 1e-12);
        let sq = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]];
        assert!((m(sq) - 1.0).abs() < 1e-12);
        assert_eq!(
            nondegeneracy_margin(&support(vec![vec![1.0], vec![2.0]])),
            Err(NaError::MarginUndefined(NodeId(0)))
        );
    }

    #[test]
    fn margin_of_square_matches_circle_grid() {
        let sq = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]];
        let mut inf = f64::INFINITY;
        for i in 0..100_000 {
            let a = i as f64 * std::f64::consts::TAU / 100_000.0;
            let h = [a.cos(), a.sin()];
            let worst = sq.iter().map(|v| -dot(&h, v)).fold(f64::NEG_INFINITY, f64::max);
            inf = inf.min(worst);
        }
        let e = nondegeneracy_margin(&support(sq)).unwrap();
        assert!((e - inf).abs() < 1e-8);
    }

    #[test]
    fn tree_na_is_local() {
        let mut b = TreeBuilder::new(2, vec![1.0]);
        let half = MeasureSet::single(vec![0.5, 0.5]);
        let kids = b.branch(b.root(), vec![vec![0.5], vec![2.0]], half.clone());
        b.branch(kids[0], vec![vec![0.25], vec![1.0]], half.clone());
        b.branch(kids[1], vec![vec![2.5], vec![3.0]], half);
        let tree = b.build();
        let res = check_na_tree(&tree).unwrap();
        assert_eq!(res.len(), 3);
        let bad: Vec<_> = res.iter().filter(|(_, r)| !r.holds()).map(|(&id, _)| id).collect();
        assert_eq!(bad, vec![kids[1]]);
    }

    #[test]
    fn arbitrage_behind_polar_edge_is_ignored() {
        let mut b = TreeBuilder::new(2, vec![1.0]);
        let kids = b.branch(
            b.root(),
            vec![vec![0.5], vec![2.0], vec![1.0]],
            MeasureSet::single(vec![0.5, 0.5, 0.0]),
        );
        let half = MeasureSet::single(vec![0.5, 0.5]);
        b.branch(kids[0], vec![vec![0.25], vec![1.0]], half.clone());
        b.branch(kids[1], vec![vec![1.0], vec![4.0]], half.clone());
        b.branch(kids[2], vec![vec![2.0], vec![3.0]], half);
        let tree = b.build();
        let res = check_na_tree(&tree).unwrap();
        assert!(!res.contains_key(&kids[2]));
        assert!(tree_na_holds(&res));
    }

    proptest! {
        #[test]
        fn payoffs_survive_projection(
            vs in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 3), 1..5),
            h in proptest::collection::vec(-5.0f64..5.0, 3),
            degenerate in proptest::bool::ANY,
        ) {
            let vs: Vec<Vec<f64>> = if degenerate {
                vs.into_iter().map(|v| vec![v[0], v[1], v[0] - v[1]]).collect()
            } else { vs };
            let s = support(vs.clone());
            let p = project_to_l(&s, &h);
            for v in &vs {
                prop_assert!((dot(&h, v) - dot(&p, v)).abs() < 1e-9);
            }
            let r: Vec<f64> = h.iter().zip(&p).map(|(a, b)| a - b).collect();
            let q = project_to_l(&s, &r);
            prop_assert!(q.iter().all(|x| x.abs() < 1e-9));
        }

        #[test]
        fn margin_is_attained_by_some_loss(
            vs in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 2), 3..7),
            angle in 0.0f64..std::f64::consts::TAU,
        ) {
            let s = support(vs.clone());
            if let Ok(eps) = nondegeneracy_margin(&s) {
                if s.dim_l() == 2 {
                    let h = [angle.cos(), angle.sin()];
                    let min = vs.iter().map(|v| dot(&h, v)).fold(f64::INFINITY, f64::min);
                    prop_assert!(min <= -eps + 1e-8);
                }
            }
        }
    }
}
