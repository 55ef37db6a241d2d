//! Backward recursion for the robust value functions `U_t(ω, ·)`.
//!
//! Each non-polar decision node gets a concave piecewise-linear value
//! function on a shared geometric wealth grid. At every knot the one-period
//! problem is solved against the children's value functions (the utility
//! itself at the last step); samples are then repaired into a concave
//! nondecreasing interpolant. The interpolation error budget `ε_grid` is
//! estimated per node from the repair size and midpoint probes, and summed
//! over time slices.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maxmin::{solve_one_period_from, Continuation, MaxminError, OnePeriodProblem, SolverOptions};
use crate::model::{validate_tree, NodeId, ScenarioTree, Strategy};
use crate::na::{check_na_tree, compute_support, dot, nondegeneracy_margin, NaError, SupportData};
use crate::plf::{wealth_grid, ConcavePLF, LeftTail};
use crate::utility::{is_floor, UtilitySpec, VALUE_FLOOR};

/// Largest relative certified gap accepted from a solve that hit its
/// iteration cap.
pub const STALL_ACCEPT: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpError {
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("NA fails at node {0}")]
    Arbitrage(NodeId),
    #[error(transparent)]
    Na(#[from] NaError),
    #[error("utility is unbounded above; pass allow_unbounded to solve anyway")]
    UnboundedUtility,
    #[error("solver failed at node {node}, wealth {wealth}: {source}")]
    Solver {
        node: NodeId,
        wealth: f64,
        source: MaxminError,
    },
    #[error("node {0}: value is -inf on the whole grid")]
    EmptyDomain(NodeId),
    #[error("wealth {wealth} at node {node} is negative")]
    Infeasible { node: NodeId, wealth: f64 },
    #[error("no value function stored for node {0}")]
    MissingNode(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub knots: usize,
    /// Lowest knot as a fraction of `x0`.
    pub lo_factor: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            knots: 257,
            lo_factor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DpOptions {
    pub grid: GridSpec,
    pub solver: SolverOptions,
    pub allow_unbounded: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DpStats {
    pub solves: usize,
    pub iterations: usize,
    pub max_gap: f64,
    /// Solves that hit the iteration cap with a certified gap small enough
    /// to carry into `eps`.
    #[serde(default)]
    pub stalled: usize,
}

impl DpStats {
    fn absorb(&mut self, other: &DpStats) {
        self.solves += other.solves;
        self.iterations += other.iterations;
        self.max_gap = self.max_gap.max(other.max_gap);
        self.stalled += other.stalled;
    }
}

#[derive(Debug, Clone)]
pub struct ValueField {
    pub x0: f64,
    pub utility: UtilitySpec,
    pub knots: Vec<f64>,
    /// Wealth is bounded by `x0·bound_factor` along admissible strategies
    /// when every margin is positive.
    pub bound_factor: f64,
    pub margins: BTreeMap<NodeId, f64>,
    pub plfs: BTreeMap<NodeId, ConcavePLF>,
    pub node_eps: BTreeMap<NodeId, f64>,
    pub eps_grid: f64,
    pub stats: DpStats,
}

impl ValueField {
    /// `U_t(node, x)`; the utility at terminal nodes.
    pub fn eval(&self, tree: &ScenarioTree, node: NodeId, x: f64) -> Result<f64, DpError> {
        let n = tree.node(node);
        if n.is_terminal() {
            return Ok(self.utility.evaluate(x, endowment_of(tree, &self.utility, node)));
        }
        self.plfs
            .get(&node)
            .map(|f| f.eval(x))
            .ok_or(DpError::MissingNode(node))
    }

    pub fn root_value(&self, tree: &ScenarioTree) -> f64 {
        self.plfs[&tree.root].eval(self.x0)
    }
}

fn endowment_of(tree: &ScenarioTree, utility: &UtilitySpec, node: NodeId) -> f64 {
    if utility.endowment_enabled {
        tree.node(node).endowment.unwrap_or(0.0)
    } else {
        0.0
    }
}

fn continuations<'a>(
    tree: &ScenarioTree,
    support: &SupportData,
    utility: &'a UtilitySpec,
    plfs: &'a BTreeMap<NodeId, ConcavePLF>,
) -> Result<Vec<Continuation<'a>>, DpError> {
    support
        .nonpolar_children
        .iter()
        .map(|&c| {
            if tree.node(c).is_terminal() {
                Ok(Continuation::Terminal {
                    utility,
                    endowment: endowment_of(tree, utility, c),
                })
            } else {
                plfs.get(&c).map(Continuation::Plf).ok_or(DpError::MissingNode(c))
            }
        })
        .collect()
}

/// `Π_t (1 + max‖ΔS‖/ε_t)` over time slices, or the fallback
/// `2^T·(1 + max relative move)` when some margin is zero.
fn bound_factor(tree: &ScenarioTree, supports: &BTreeMap<NodeId, SupportData>, margins: &BTreeMap<NodeId, f64>) -> f64 {
    let mut factor = 1.0;
    let mut rel = 0.0f64;
    for t in 0..tree.horizon {
        let mut eps = f64::INFINITY;
        let mut moves = 0.0f64;
        for id in tree.slice(t) {
            let (Some(s), Some(&e)) = (supports.get(&id), margins.get(&id)) else {
                continue;
            };
            eps = eps.min(e);
            let pnorm = dot(&tree.node(id).price, &tree.node(id).price).sqrt();
            for v in &s.support_vectors {
                let m = dot(v, v).sqrt();
                moves = moves.max(m);
                rel = rel.max(m / pnorm.max(1e-12));
            }
        }
        if eps.is_finite() {
            factor *= 1.0 + moves / eps;
        }
    }
    if factor.is_finite() && factor <= 1e12 {
        factor
    } else {
        2f64.powi(tree.horizon as i32) * (1.0 + rel)
    }
}

struct NodeFit {
    plf: ConcavePLF,
    eps: f64,
    stats: DpStats,
}

fn fit_node(
    tree: &ScenarioTree,
    support: &SupportData,
    utility: &UtilitySpec,
    plfs: &BTreeMap<NodeId, ConcavePLF>,
    knots: &[f64],
    opts: &DpOptions,
) -> Result<NodeFit, DpError> {
    let node = support.node;
    let measures = tree.node(node).measures.as_ref().expect("decision node");
    let conts = continuations(tree, support, utility, plfs)?;
    let base = OnePeriodProblem::new(support, knots[0], conts, measures);
    let mut stats = DpStats::default();
    let mut solve = |x: f64, hint: Option<&[f64]>| {
        let p = base.with_capital(x);
        let sol = match solve_one_period_from(&p, &opts.solver, hint) {
            Ok(sol) => sol,
            Err(MaxminError::Stalled { best, .. }) if best.gap <= STALL_ACCEPT * (1.0 + best.value.abs()) => {
                stats.stalled += 1;
                *best
            }
            Err(source) => {
                return Err(DpError::Solver {
                    node,
                    wealth: x,
                    source,
                })
            }
        };
        stats.solves += 1;
        stats.iterations += sol.iterations;
        stats.max_gap = stats.max_gap.max(sol.gap);
        Ok::<_, DpError>(sol)
    };
    let mut samples = Vec::with_capacity(knots.len());
    let mut hint: Option<Vec<f64>> = None;
    let mut prev_x = knots[0];
    for &x in knots {
        let scaled = hint
            .as_ref()
            .map(|h| h.iter().map(|v| v * x / prev_x).collect::<Vec<_>>());
        let sol = solve(x, scaled.as_deref())?;
        samples.push(sol.value);
        hint = Some(sol.h_opt);
        prev_x = x;
    }
    let first = samples
        .iter()
        .position(|v| !is_floor(*v))
        .ok_or(DpError::EmptyDomain(node))?;
    if first + 2 > knots.len() {
        return Err(DpError::EmptyDomain(node));
    }
    let tail = if first > 0 {
        LeftTail::Cut
    } else if utility.diverges_at_zero() && !utility.endowment_enabled {
        LeftTail::Log
    } else {
        LeftTail::Linear
    };
    let kn = knots[first..].to_vec();
    let (plf, adjust) = ConcavePLF::fit(kn.clone(), &samples[first..], tail);
    // midpoint probes: every fourth segment plus the two ends
    let segs = kn.len() - 1;
    let mut defect = 0.0f64;
    for s in 0..segs {
        if s % 4 != 0 && s != segs - 1 {
            continue;
        }
        let m = 0.5 * (kn[s] + kn[s + 1]);
        let sol = solve(m, None)?;
        if !is_floor(sol.value) {
            defect = defect.max((sol.value - plf.eval(m)).abs());
        }
    }
    let eps = adjust + defect + stats.max_gap;
    Ok(NodeFit { plf, eps, stats })
}

/// Value functions at every non-polar decision node.
pub fn backward_induction(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    x0: f64,
    opts: &DpOptions,
) -> Result<ValueField, DpError> {
    let report = validate_tree(tree);
    if let Some(v) = report.violations.first() {
        return Err(DpError::InvalidTree(v.message.clone()));
    }
    if !utility.bounded_above() && !opts.allow_unbounded {
        return Err(DpError::UnboundedUtility);
    }
    let na = check_na_tree(tree)?;
    if let Some((&id, _)) = na.iter().find(|(_, r)| !r.holds()) {
        return Err(DpError::Arbitrage(id));
    }
    let mask = tree.nonpolar_mask();
    let mut supports = BTreeMap::new();
    let mut margins = BTreeMap::new();
    for id in tree.decision_nodes() {
        if mask[id.0] {
            let s = compute_support(tree, id)?;
            margins.insert(id, nondegeneracy_margin(&s)?);
            supports.insert(id, s);
        }
    }
    let factor = bound_factor(tree, &supports, &margins);
    let hi = x0 * factor.max(2.0);
    let knots = wealth_grid(x0 * opts.grid.lo_factor, x0, hi, opts.grid.knots.max(3));
    let mut plfs = BTreeMap::new();
    let mut node_eps = BTreeMap::new();
    let mut stats = DpStats::default();
    let mut eps_grid = 0.0;
    for t in (0..tree.horizon).rev() {
        let ids: Vec<NodeId> = tree.slice(t).into_iter().filter(|id| mask[id.0]).collect();
        let fits: Vec<Result<(NodeId, NodeFit), DpError>> = ids
            .par_iter()
            .map(|&id| fit_node(tree, &supports[&id], utility, &plfs, &knots, opts).map(|f| (id, f)))
            .collect();
        let mut slice_eps = 0.0f64;
        for r in fits {
            let (id, fit) = r?;
            slice_eps = slice_eps.max(fit.eps);
            stats.absorb(&fit.stats);
            node_eps.insert(id, fit.eps);
            plfs.insert(id, fit.plf);
        }
        eps_grid += slice_eps;
    }
    Ok(ValueField {
        x0,
        utility: utility.clone(),
        knots,
        bound_factor: factor,
        margins,
        plfs,
        node_eps,
        eps_grid,
        stats,
    })
}

/// Robust expected utility of a fixed strategy: at each decision node the
/// worst extreme is chosen independently, backward from the leaves.
pub fn worst_case_by_backward_min(tree: &ScenarioTree, strategy: &Strategy, utility: &UtilitySpec, x0: f64) -> f64 {
    let wealth = strategy.wealth_by_node(tree, x0);
    backward_min(tree, tree.horizon, &|id| {
        utility.evaluate(wealth[id.0], endowment_of(tree, utility, id))
    })
}

/// `min over selectors of E[f(node at time t)]`, by per-node minimization.
fn backward_min(tree: &ScenarioTree, t: usize, f: &dyn Fn(NodeId) -> f64) -> f64 {
    let mut val = vec![0.0; tree.len()];
    let order = tree.bfs();
    for &id in order.iter().rev() {
        let n = tree.node(id);
        if n.t > t {
            continue;
        }
        if n.t == t {
            val[id.0] = f(id);
            continue;
        }
        let ms = n.measures.as_ref().expect("decision node");
        let mut worst = f64::INFINITY;
        for p in &ms.extremes {
            let mut s = 0.0;
            let mut floor = false;
            for (&pi, c) in p.iter().zip(&n.children) {
                if pi > 0.0 {
                    if is_floor(val[c.0]) {
                        floor = true;
                        break;
                    }
                    s += pi * val[c.0];
                }
            }
            worst = worst.min(if floor { VALUE_FLOOR } else { s });
        }
        val[id.0] = worst;
    }
    val[tree.root.0]
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub strategy: Strategy,
    pub value: f64,
    pub wealth: Vec<f64>,
}

/// Forward pass re-solving the one-period problem at the exact wealth of
/// each non-polar node; polar decision nodes hold nothing.
pub fn extract_strategy(
    tree: &ScenarioTree,
    field: &ValueField,
    x0: f64,
    opts: &SolverOptions,
) -> Result<Extraction, DpError> {
    let utility = &field.utility;
    let mask = tree.nonpolar_mask();
    let d = tree.asset_count;
    let mut strategy = Strategy::zero();
    let mut wealth = vec![0.0; tree.len()];
    wealth[tree.root.0] = x0;
    for id in tree.bfs() {
        let n = tree.node(id);
        if n.is_terminal() {
            continue;
        }
        let mut w = wealth[id.0];
        let h = if mask[id.0] {
            if w < -1e-9 {
                return Err(DpError::Infeasible { node: id, wealth: w });
            }
            w = w.max(0.0);
            let support = compute_support(tree, id)?;
            let conts = continuations(tree, &support, utility, &field.plfs)?;
            let p = OnePeriodProblem::new(&support, w, conts, n.measures.as_ref().unwrap());
            solve_one_period_from(&p, opts, None)
                .map_err(|source| DpError::Solver {
                    node: id,
                    wealth: w,
                    source,
                })?
                .h_opt
        } else {
            vec![0.0; d]
        };
        for &c in &n.children {
            let inc = tree.increment(id, c);
            wealth[c.0] = w + dot(&h, &inc);
        }
        strategy.set(id, h);
    }
    let value = worst_case_by_backward_min(tree, &strategy, utility, x0);
    Ok(Extraction {
        strategy,
        value,
        wealth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    /// `c_t = inf over models of E[U_t(x0 + H•S_t)]`, `t = 0..=T`.
    pub chain: Vec<f64>,
    pub tolerance: f64,
    pub nonincreasing: bool,
    /// `c_T ≥ U_0(x0) − ε_grid`, checked only for an optimal strategy.
    pub attains_value: Option<bool>,
}

impl InequalityReport {
    pub fn passed(&self) -> bool {
        self.nonincreasing && self.attains_value.unwrap_or(true)
    }
}

pub fn verify_value_inequalities(
    tree: &ScenarioTree,
    field: &ValueField,
    strategy: &Strategy,
    x0: f64,
    optimal: bool,
) -> Result<InequalityReport, DpError> {
    let wealth = strategy.wealth_by_node(tree, x0);
    let mask = tree.nonpolar_mask();
    let mut chain = Vec::with_capacity(tree.horizon + 1);
    for t in 0..=tree.horizon {
        let c = backward_min(tree, t, &|id| {
            if !mask[id.0] {
                return 0.0;
            }
            field.eval(tree, id, wealth[id.0]).unwrap_or(VALUE_FLOOR)
        });
        chain.push(c);
    }
    let tol = field.eps_grid.max(1e-9);
    let nonincreasing = chain.windows(2).all(|w| w[1] <= w[0] + tol);
    let attains_value = optimal.then(|| chain[tree.horizon] >= chain[0] - tol);
    Ok(InequalityReport {
        chain,
        tolerance: tol,
        nonincreasing,
        attains_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maxmin::solve_one_period;
    use crate::model::{MeasureSet, TreeBuilder};

    fn binomial(t: usize, p: MeasureSet) -> ScenarioTree {
        let mut b = TreeBuilder::new(t, vec![1.0]);
        let mut frontier = vec![b.root()];
        for _ in 0..t {
            let mut next = Vec::new();
            for id in frontier {
                let s = b.price(id)[0];
                next.extend(b.branch(id, vec![vec![0.5 * s], vec![2.0 * s]], p.clone()));
            }
            frontier = next;
        }
        b.build()
    }

    fn unbounded() -> DpOptions {
        DpOptions {
            allow_unbounded: true,
            ..DpOptions::default()
        }
    }

    #[test]
    fn one_period_matches_solver_at_knots() {
        let tree = binomial(1, MeasureSet::new(vec![vec![0.5, 0.5], vec![0.6, 0.4]]));
        let u = UtilitySpec::exponential(1.0).unwrap();
        let field = backward_induction(&tree, &u, 1.0, &DpOptions::default()).unwrap();
        let f = &field.plfs[&tree.root];
        let s = compute_support(&tree, tree.root).unwrap();
        let conts = vec![
            Continuation::Terminal {
                utility: &u,
                endowment: 0.0
            };
            2
        ];
        let base = OnePeriodProblem::new(&s, 1.0, conts, tree.node(tree.root).measures.as_ref().unwrap());
        for &x in field.knots.iter().step_by(16) {
            let v = solve_one_period(&base.with_capital(x), &SolverOptions::default())
                .unwrap()
                .value;
            assert!((f.eval(x) - v).abs() <= field.eps_grid + 1e-9);
        }
        assert!(f.is_concave_nondecreasing(1e-12));
    }

    #[test]
    fn log_binomial_two_periods() {
        let tree = binomial(2, MeasureSet::single(vec![0.5, 0.5]));
        let u = UtilitySpec::log();
        let field = backward_induction(&tree, &u, 1.0, &unbounded()).unwrap();
        let v = field.root_value(&tree);
        assert!((v - 1.125f64.ln()).abs() < 1e-3, "{v}");
        let ex = extract_strategy(&tree, &field, 1.0, &SolverOptions::default()).unwrap();
        // the root argmax sees the interpolated continuation, so it is only
        // as sharp as the grid
        assert!((ex.strategy.get(tree.root).unwrap()[0] - 0.5).abs() < 2e-2);
        for &c in &tree.node(tree.root).children {
            let w = ex.wealth[c.0];
            let s = tree.node(c).price[0];
            let h = ex.strategy.get(c).unwrap()[0];
            assert!((h - 0.5 * w / s).abs() < 1e-3);
        }
        assert!(ex.value >= v - field.eps_grid - 1e-9);
        let rep = verify_value_inequalities(&tree, &field, &ex.strategy, 1.0, true).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn perturbed_strategy_loses_value() {
        let tree = binomial(2, MeasureSet::single(vec![0.5, 0.5]));
        let u = UtilitySpec::log();
        let field = backward_induction(&tree, &u, 1.0, &unbounded()).unwrap();
        let mut s = extract_strategy(&tree, &field, 1.0, &SolverOptions::default())
            .unwrap()
            .strategy;
        let h = s.get(tree.root).unwrap()[0];
        s.set(tree.root, vec![h + 0.2]);
        let rep = verify_value_inequalities(&tree, &field, &s, 1.0, false).unwrap();
        assert!(rep.nonincreasing);
        assert!(rep.chain[1] < rep.chain[0] - 1e-3);
        let zero = verify_value_inequalities(&tree, &field, &Strategy::zero(), 1.0, false).unwrap();
        assert!(zero.passed());
    }

    #[test]
    fn unbounded_utility_needs_flag() {
        let tree = binomial(1, MeasureSet::single(vec![0.5, 0.5]));
        let err = backward_induction(&tree, &UtilitySpec::log(), 1.0, &DpOptions::default());
        assert_eq!(err.unwrap_err(), DpError::UnboundedUtility);
    }

    #[test]
    fn refinement_is_cauchy() {
        let tree = binomial(2, MeasureSet::new(vec![vec![0.4, 0.6], vec![0.5, 0.5]]));
        let u = UtilitySpec::log();
        let exact = 1.125f64.ln();
        let mut prev: Option<f64> = None;
        let mut prev_change = f64::INFINITY;
        let mut root_err = Vec::new();
        for knots in [65, 129, 257, 513] {
            let mut o = unbounded();
            o.grid.knots = knots;
            let field = backward_induction(&tree, &u, 1.0, &o).unwrap();
            let v = field.root_value(&tree);
            if let Some(p) = prev {
                let change = (v - p).abs();
                assert!(change < prev_change, "{knots}: {change} vs {prev_change}");
                prev_change = change;
            }
            prev = Some(v);
            let ex = extract_strategy(&tree, &field, 1.0, &SolverOptions::default()).unwrap();
            root_err.push((ex.strategy.get(tree.root).unwrap()[0] - 0.5).abs());
            assert!((v - exact).abs() <= field.eps_grid);
        }
        assert!(root_err[3] < root_err[0], "{root_err:?}");
    }
}
