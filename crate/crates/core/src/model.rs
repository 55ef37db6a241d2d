//! Market data model: scenario trees, node-local measure sets, strategies.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a node in a [`ScenarioTree`]. Ids are dense, `0..len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Finitely many extreme probability vectors over a node's children. The
/// represented model set is their convex hull; expectations are linear in the
/// measure, so infima over the hull are minima over the extremes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeasureSet {
    pub extremes: Vec<Vec<f64>>,
}

impl MeasureSet {
    pub fn new(extremes: Vec<Vec<f64>>) -> Self {
        Self { extremes }
    }

    pub fn single(p: Vec<f64>) -> Self {
        Self { extremes: vec![p] }
    }

    pub fn len(&self) -> usize {
        self.extremes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.extremes.is_empty()
    }

    /// A child is charged iff some extreme gives it positive mass (exact test).
    pub fn charges(&self, child_pos: usize) -> bool {
        self.extremes.iter().any(|p| p.get(child_pos).is_some_and(|&q| q > 0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub t: usize,
    /// Asset prices, one per asset.
    pub price: Vec<f64>,
    pub children: Vec<NodeId>,
    /// Present iff `t < T`.
    pub measures: Option<MeasureSet>,
    /// Terminal nodes only.
    pub endowment: Option<f64>,
}

impl Node {
    pub fn is_terminal(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("node at position {pos} carries id {id}; ids must be dense and ordered")]
    NodeIndex { pos: usize, id: usize },
    #[error("root id {0} out of range")]
    Root(usize),
    #[error("child {child} of node {node} out of range")]
    DanglingChild { node: NodeId, child: usize },
    #[error("path is not a root-to-descendant chain: {0}")]
    NotAPath(String),
}

/// Rooted tree of depth `horizon` with per-node prices and measure sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    pub horizon: usize,
    pub asset_count: usize,
    pub nodes: Vec<Node>,
    pub root: NodeId,
    parents: Vec<Option<NodeId>>,
    extra_parents: Vec<(NodeId, NodeId)>,
}

impl ScenarioTree {
    /// Assembles a tree. Only index consistency is enforced here; everything
    /// else is reported by [`validate_tree`].
    pub fn new(horizon: usize, asset_count: usize, nodes: Vec<Node>, root: NodeId) -> Result<Self, ModelError> {
        for (pos, n) in nodes.iter().enumerate() {
            if n.id.0 != pos {
                return Err(ModelError::NodeIndex { pos, id: n.id.0 });
            }
        }
        if root.0 >= nodes.len() {
            return Err(ModelError::Root(root.0));
        }
        let mut parents = vec![None; nodes.len()];
        let mut extra_parents = Vec::new();
        for n in &nodes {
            for &c in &n.children {
                if c.0 >= nodes.len() {
                    return Err(ModelError::DanglingChild { node: n.id, child: c.0 });
                }
                if parents[c.0].is_some() {
                    extra_parents.push((c, n.id));
                } else {
                    parents[c.0] = Some(n.id);
                }
            }
        }
        Ok(Self {
            horizon,
            asset_count,
            nodes,
            root,
            parents,
            extra_parents,
        })
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.parents[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Price increment `S(child) − S(parent)`.
    pub fn increment(&self, parent: NodeId, child: NodeId) -> Vec<f64> {
        let p = &self.node(parent).price;
        let c = &self.node(child).price;
        c.iter().zip(p).map(|(a, b)| a - b).collect()
    }

    /// Nodes in breadth-first order from the root.
    pub fn bfs(&self) -> Vec<NodeId> {
        let mut order = vec![self.root];
        let mut i = 0;
        while i < order.len() {
            let id = order[i];
            order.extend(self.node(id).children.iter().copied());
            i += 1;
        }
        order
    }

    /// Nodes at depth `t`, in breadth-first order.
    pub fn slice(&self, t: usize) -> Vec<NodeId> {
        self.bfs().into_iter().filter(|&id| self.node(id).t == t).collect()
    }

    /// `nonpolar[i]` is true iff every edge on node i's root path has
    /// positive probability under some extreme at the edge's parent.
    pub fn nonpolar_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.nodes.len()];
        mask[self.root.0] = true;
        for id in self.bfs() {
            if !mask[id.0] {
                continue;
            }
            let node = self.node(id);
            if let Some(ms) = &node.measures {
                for (pos, &c) in node.children.iter().enumerate() {
                    if ms.charges(pos) {
                        mask[c.0] = true;
                    }
                }
            }
        }
        mask
    }

    /// Root-to-`id` path.
    pub fn path_to(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn terminals(&self) -> Vec<NodeId> {
        self.bfs()
            .into_iter()
            .filter(|&id| self.node(id).is_terminal())
            .collect()
    }

    pub fn decision_nodes(&self) -> Vec<NodeId> {
        self.bfs()
            .into_iter()
            .filter(|&id| !self.node(id).is_terminal())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    NonUniformDepth,
    TimeMismatch,
    MultipleParents,
    Unreachable,
    PriceDimension,
    NegativePrice,
    MissingMeasures,
    UnexpectedMeasures,
    EmptyMeasureSet,
    MeasureLength,
    NegativeProbability,
    MeasureNotNormalized,
    MisplacedEndowment,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub node: Option<NodeId>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    fn push(&mut self, kind: ViolationKind, node: Option<NodeId>, message: String) {
        self.violations.push(Violation { kind, node, message });
    }
}

const NORMALIZATION_TOL: f64 = 1e-12;

/// Structural checks; an empty report means the tree is usable.
pub fn validate_tree(tree: &ScenarioTree) -> ValidationReport {
    let mut report = ValidationReport::default();
    for &(child, extra) in &tree.extra_parents {
        report.push(
            ViolationKind::MultipleParents,
            Some(child),
            format!("node {child} also listed as child of {extra}"),
        );
    }
    let reachable = {
        let mut r = vec![false; tree.len()];
        for id in tree.bfs() {
            r[id.0] = true;
        }
        r
    };
    if tree.node(tree.root).t != 0 {
        report.push(
            ViolationKind::TimeMismatch,
            Some(tree.root),
            "root must have t = 0".into(),
        );
    }
    for node in &tree.nodes {
        let id = Some(node.id);
        if !reachable[node.id.0] {
            report.push(
                ViolationKind::Unreachable,
                id,
                format!("node {} is not reachable from the root", node.id),
            );
        }
        if node.price.len() != tree.asset_count {
            report.push(
                ViolationKind::PriceDimension,
                id,
                format!(
                    "node {} has {} prices, expected {}",
                    node.id,
                    node.price.len(),
                    tree.asset_count
                ),
            );
        }
        if node.price.iter().any(|p| !p.is_finite()) {
            report.push(
                ViolationKind::NonFinite,
                id,
                format!("node {} price not finite", node.id),
            );
        }
        for &c in &node.children {
            if tree.node(c).t != node.t + 1 {
                report.push(
                    ViolationKind::TimeMismatch,
                    Some(c),
                    format!("child {c} of node {} must have t = {}", node.id, node.t + 1),
                );
            }
        }
        if node.is_terminal() && node.t != tree.horizon {
            report.push(
                ViolationKind::NonUniformDepth,
                id,
                format!("terminal node {} at depth {} != T = {}", node.id, node.t, tree.horizon),
            );
        }
        if !node.is_terminal() && node.t >= tree.horizon {
            report.push(
                ViolationKind::NonUniformDepth,
                id,
                format!("node {} at depth {} has children beyond T", node.id, node.t),
            );
        }
        if node.endowment.is_some() && !node.is_terminal() {
            report.push(
                ViolationKind::MisplacedEndowment,
                id,
                format!("endowment on non-terminal node {}", node.id),
            );
        }
        if let Some(e) = node.endowment {
            if !e.is_finite() {
                report.push(
                    ViolationKind::NonFinite,
                    id,
                    format!("node {} endowment not finite", node.id),
                );
            }
        }
        match (&node.measures, node.is_terminal()) {
            (None, false) => report.push(
                ViolationKind::MissingMeasures,
                id,
                format!("non-terminal node {} has no measure set", node.id),
            ),
            (Some(_), true) => report.push(
                ViolationKind::UnexpectedMeasures,
                id,
                format!("terminal node {} carries a measure set", node.id),
            ),
            (Some(ms), false) => check_measures(&mut report, node, ms),
            (None, true) => {}
        }
    }
    let mask = tree.nonpolar_mask();
    for node in &tree.nodes {
        if mask[node.id.0] && node.price.iter().any(|&p| p < 0.0) {
            report.push(
                ViolationKind::NegativePrice,
                Some(node.id),
                format!("negative price at non-polar node {}", node.id),
            );
        }
    }
    report
}

fn check_measures(report: &mut ValidationReport, node: &Node, ms: &MeasureSet) {
    let id = Some(node.id);
    if ms.is_empty() {
        report.push(
            ViolationKind::EmptyMeasureSet,
            id,
            format!("node {} has an empty measure set", node.id),
        );
    }
    for (j, p) in ms.extremes.iter().enumerate() {
        if p.len() != node.children.len() {
            report.push(
                ViolationKind::MeasureLength,
                id,
                format!(
                    "node {} measure {j} has {} entries for {} children",
                    node.id,
                    p.len(),
                    node.children.len()
                ),
            );
            continue;
        }
        if p.iter().any(|q| !q.is_finite()) {
            report.push(
                ViolationKind::NonFinite,
                id,
                format!("node {} measure {j} not finite", node.id),
            );
            continue;
        }
        if p.iter().any(|&q| q < 0.0) {
            report.push(
                ViolationKind::NegativeProbability,
                id,
                format!("node {} measure {j} has a negative entry", node.id),
            );
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            report.push(
                ViolationKind::MeasureNotNormalized,
                id,
                format!("node {} measure {j} not normalized: sums to {total}", node.id),
            );
        }
    }
}

/// Predictable holdings: the vector at a node is held over the following
/// period. Nodes without an entry hold nothing.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Strategy {
    pub holdings: BTreeMap<NodeId, Vec<f64>>,
}

impl Strategy {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn set(&mut self, node: NodeId, h: Vec<f64>) {
        self.holdings.insert(node, h);
    }

    pub fn get(&self, node: NodeId) -> Option<&[f64]> {
        self.holdings.get(&node).map(Vec::as_slice)
    }

    /// Gain `h(parent)·ΔS(parent → child)`.
    pub fn gain(&self, tree: &ScenarioTree, parent: NodeId, child: NodeId) -> f64 {
        match self.get(parent) {
            None => 0.0,
            Some(h) => {
                let p = &tree.node(parent).price;
                let c = &tree.node(child).price;
                h.iter().zip(c.iter().zip(p)).map(|(hi, (a, b))| hi * (a - b)).sum()
            }
        }
    }

    /// Wealth at every node, `x0 + H•S_t` along each root path.
    pub fn wealth_by_node(&self, tree: &ScenarioTree, x0: f64) -> Vec<f64> {
        let mut w = vec![0.0; tree.len()];
        w[tree.root.0] = x0;
        for id in tree.bfs() {
            for &c in &tree.node(id).children {
                w[c.0] = w[id.0] + self.gain(tree, id, c);
            }
        }
        w
    }
}

/// The wealth sequence `x0 + H•S_t` along `path`, which must start at the
/// root and follow parent/child links.
pub fn wealth_along_path(
    tree: &ScenarioTree,
    strategy: &Strategy,
    x0: f64,
    path: &[NodeId],
) -> Result<Vec<f64>, ModelError> {
    let describe = || path.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("→");
    match path.first() {
        Some(&first) if first == tree.root => {}
        _ => return Err(ModelError::NotAPath(describe())),
    }
    let mut out = Vec::with_capacity(path.len());
    let mut w = x0;
    out.push(w);
    for pair in path.windows(2) {
        let (p, c) = (pair[0], pair[1]);
        if c.0 >= tree.len() || tree.parent(c) != Some(p) {
            return Err(ModelError::NotAPath(describe()));
        }
        w += strategy.gain(tree, p, c);
        out.push(w);
    }
    Ok(out)
}

/// Incremental construction for code and tests.
#[derive(Debug, Clone)]
pub struct TreeBuilder {
    horizon: usize,
    asset_count: usize,
    nodes: Vec<Node>,
}

impl TreeBuilder {
    /// Starts with a root at `t = 0`.
    pub fn new(horizon: usize, root_price: Vec<f64>) -> Self {
        let asset_count = root_price.len();
        Self {
            horizon,
            asset_count,
            nodes: vec![Node {
                id: NodeId(0),
                t: 0,
                price: root_price,
                children: vec![],
                measures: None,
                endowment: None,
            }],
        }
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    /// Adds one child per price under `parent` and attaches the measure set.
    pub fn branch(&mut self, parent: NodeId, prices: Vec<Vec<f64>>, measures: MeasureSet) -> Vec<NodeId> {
        let t = self.nodes[parent.0].t + 1;
        let mut ids = Vec::with_capacity(prices.len());
        for price in prices {
            let id = NodeId(self.nodes.len());
            self.nodes.push(Node {
                id,
                t,
                price,
                children: vec![],
                measures: None,
                endowment: None,
            });
            ids.push(id);
        }
        let p = &mut self.nodes[parent.0];
        p.children.extend(ids.iter().copied());
        p.measures = Some(measures);
        ids
    }

    pub fn endowment(&mut self, node: NodeId, e: f64) -> &mut Self {
        self.nodes[node.0].endowment = Some(e);
        self
    }

    pub fn price(&self, node: NodeId) -> &[f64] {
        &self.nodes[node.0].price
    }

    pub fn build(self) -> ScenarioTree {
        ScenarioTree::new(self.horizon, self.asset_count, self.nodes, NodeId(0)).expect("builder keeps ids dense")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn binomial() -> ScenarioTree {
        let mut b = TreeBuilder::new(1, vec![1.0]);
        b.branch(
            NodeId(0),
            vec![vec![0.5], vec![2.0]],
            MeasureSet::single(vec![0.5, 0.5]),
        );
        b.build()
    }

    fn two_period() -> ScenarioTree {
        let mut b = TreeBuilder::new(2, vec![1.0]);
        let kids = b.branch(
            NodeId(0),
            vec![vec![0.5], vec![2.0]],
            MeasureSet::single(vec![0.5, 0.5]),
        );
        for k in kids {
            let s = b.price(k)[0];
            b.branch(
                k,
                vec![vec![0.5 * s], vec![2.0 * s]],
                MeasureSet::single(vec![0.5, 0.5]),
            );
        }
        b.build()
    }

    #[test]
    fn binomial_is_valid() {
        let r = validate_tree(&binomial());
        assert!(r.is_valid(), "{r:?}");
    }

    #[test]
    fn unnormalized_measure_flagged() {
        let mut b = TreeBuilder::new(1, vec![1.0]);
        b.branch(
            NodeId(0),
            vec![vec![0.5], vec![2.0]],
            MeasureSet::single(vec![0.5, 0.4]),
        );
        let r = validate_tree(&b.build());
        assert!(r.has(ViolationKind::MeasureNotNormalized));
        assert!(r.violations[0].message.contains("not normalized"));
    }

    #[test]
    fn shallow_terminal_flagged() {
        let mut b = TreeBuilder::new(2, vec![1.0]);
        let kids = b.branch(
            NodeId(0),
            vec![vec![0.5], vec![2.0]],
            MeasureSet::single(vec![0.5, 0.5]),
        );
        b.branch(kids[1], vec![vec![1.0], vec![3.0]], MeasureSet::single(vec![0.5, 0.5]));
        let r = validate_tree(&b.build());
        assert!(r.has(ViolationKind::NonUniformDepth));
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].node, Some(kids[0]));
    }

    #[test]
    fn measures_and_endowments_placement() {
        let mut t = binomial();
        t.nodes[1].measures = Some(MeasureSet::single(vec![]));
        t.nodes[0].endowment = Some(1.0);
        let r = validate_tree(&t);
        assert!(r.has(ViolationKind::UnexpectedMeasures));
        assert!(r.has(ViolationKind::MisplacedEndowment));
        let mut t = binomial();
        t.nodes[0].measures = None;
        assert!(validate_tree(&t).has(ViolationKind::MissingMeasures));
    }

    #[test]
    fn negative_price_only_matters_off_polar_nodes() {
        let mut b = TreeBuilder::new(1, vec![1.0]);
        b.branch(
            NodeId(0),
            vec![vec![0.5], vec![2.0], vec![-1.0]],
            MeasureSet::new(vec![vec![0.5, 0.5, 0.0], vec![0.2, 0.8, 0.0]]),
        );
        assert!(validate_tree(&b.build()).is_valid());
        let mut b = TreeBuilder::new(1, vec![1.0]);
        b.branch(
            NodeId(0),
            vec![vec![0.5], vec![2.0], vec![-1.0]],
            MeasureSet::new(vec![vec![0.5, 0.5, 0.0], vec![0.2, 0.7, 0.1]]),
        );
        assert!(validate_tree(&b.build()).has(ViolationKind::NegativePrice));
    }

    #[test]
    fn polarity_follows_edges() {
        let mut b = TreeBuilder::new(2, vec![1.0]);
        let kids = b.branch(
            NodeId(0),
            vec![vec![0.5], vec![2.0]],
            MeasureSet::new(vec![vec![1.0, 0.0], vec![0.7, 0.3]]),
        );
        let g0 = b.branch(kids[0], vec![vec![0.2], vec![1.0]], MeasureSet::single(vec![0.0, 1.0]));
        let g1 = b.branch(kids[1], vec![vec![1.0], vec![3.0]], MeasureSet::single(vec![0.5, 0.5]));
        let t = b.build();
        let m = t.nonpolar_mask();
        assert!(m[kids[0].0] && m[kids[1].0]);
        assert!(!m[g0[0].0] && m[g0[1].0]);
        assert!(m[g1[0].0] && m[g1[1].0]);
    }

    #[test]
    fn wealth_zero_strategy_and_binomial() {
        let t = binomial();
        let zero = Strategy::zero();
        assert_eq!(
            wealth_along_path(&t, &zero, 1.0, &[NodeId(0), NodeId(1)]).unwrap(),
            vec![1.0, 1.0]
        );
        let mut h = Strategy::zero();
        h.set(NodeId(0), vec![1.0]);
        assert_eq!(
            wealth_along_path(&t, &h, 1.0, &[NodeId(0), NodeId(1)]).unwrap(),
            vec![1.0, 0.5]
        );
        assert_eq!(
            wealth_along_path(&t, &h, 1.0, &[NodeId(0), NodeId(2)]).unwrap(),
            vec![1.0, 2.0]
        );
        assert!(wealth_along_path(&t, &h, 1.0, &[NodeId(1)]).is_err());
        assert!(wealth_along_path(&t, &h, 1.0, &[NodeId(0), NodeId(0)]).is_err());
    }

    #[test]
    fn wealth_half_wealth_rule_two_periods() {
        // h = 0.5·w/s units at every node; hand table per edge:
        // root w=1,s=1,h=0.5 → down w=0.75 (s=0.5), up w=1.5 (s=2)
        // down: h=0.75 → dd 0.75−0.1875=0.5625, du 0.75+0.375=1.125
        // up:   h=0.375 → ud 1.5−0.375=1.125, uu 1.5+0.75=2.25
        let t = two_period();
        let mut h = Strategy::zero();
        h.set(NodeId(0), vec![0.5]);
        h.set(NodeId(1), vec![0.75]);
        h.set(NodeId(2), vec![0.375]);
        let leaves = t.terminals();
        let expected = [0.5625, 1.125, 1.125, 2.25];
        for (leaf, e) in leaves.iter().zip(expected) {
            let path = t.path_to(*leaf);
            let ws = wealth_along_path(&t, &h, 1.0, &path).unwrap();
            assert!((ws[2] - e).abs() < 1e-15, "{ws:?} vs {e}");
        }
    }

    proptest! {
        #[test]
        fn wealth_is_affine_in_capital(x0 in 0.0f64..10.0, d in -5.0f64..5.0, h0 in -2.0f64..2.0, h1 in -2.0f64..2.0) {
            let t = two_period();
            let mut h = Strategy::zero();
            h.set(NodeId(0), vec![h0]);
            h.set(NodeId(1), vec![h1]);
            for leaf in t.terminals() {
                let path = t.path_to(leaf);
                let a = wealth_along_path(&t, &h, x0, &path).unwrap();
                let b = wealth_along_path(&t, &h, x0 + d, &path).unwrap();
                for (wa, wb) in a.iter().zip(&b) {
                    prop_assert!((wb - wa - d).abs() < 1e-12);
                }
            }
        }
    }
}
