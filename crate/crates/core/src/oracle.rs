//! Brute-force ground truth for small trees.
//!
//! Nothing here calls the one-period solver or the value-function code:
//! wealth, expectations and minima over models are recomputed from scratch.
//! Searches are exhaustive over explicit finite sets and fail loudly when a
//! cap would be exceeded.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::model::{NodeId, ScenarioTree, Strategy};
use crate::na::{check_na_tree, compute_support, nondegeneracy_margin, NaError};
use crate::utility::{is_floor, UtilitySpec, VALUE_FLOOR};

pub const DEFAULT_SELECTOR_CAP: usize = 1_000_000;
pub const DEFAULT_EVAL_CAP: usize = 50_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("{what}: {count} exceeds the cap {cap}")]
    CapExceeded { what: &'static str, count: u128, cap: u128 },
    #[error("NA fails at node {0}; an explicit grid radius is required")]
    NeedsRadius(NodeId),
    #[error(transparent)]
    Na(#[from] NaError),
}

/// One extreme measure per decision node and the induced law of the leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorProduct {
    pub choice: BTreeMap<NodeId, usize>,
    pub terminal_probs: BTreeMap<NodeId, f64>,
}

pub fn enumerate_selectors(tree: &ScenarioTree, cap: usize) -> Result<Vec<SelectorProduct>, OracleError> {
    let decisions: Vec<NodeId> = tree
        .bfs()
        .into_iter()
        .filter(|&id| !tree.node(id).children.is_empty())
        .collect();
    let sizes: Vec<usize> = decisions
        .iter()
        .map(|&id| tree.node(id).measures.as_ref().map_or(1, |m| m.extremes.len()))
        .collect();
    let count: u128 = sizes.iter().map(|&s| s as u128).product();
    if count > cap as u128 {
        return Err(OracleError::CapExceeded {
            what: "selector products",
            count,
            cap: cap as u128,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut idx = vec![0usize; decisions.len()];
    loop {
        let choice: BTreeMap<NodeId, usize> = decisions.iter().copied().zip(idx.iter().copied()).collect();
        let mut terminal_probs = BTreeMap::new();
        let mut stack = vec![(tree.root, 1.0f64)];
        while let Some((id, p)) = stack.pop() {
            let n = tree.node(id);
            if n.children.is_empty() {
                terminal_probs.insert(id, p);
                continue;
            }
            let probs = &n.measures.as_ref().expect("decision node").extremes[choice[&id]];
            for (&c, &q) in n.children.iter().zip(probs) {
                stack.push((c, p * q));
            }
        }
        out.push(SelectorProduct { choice, terminal_probs });
        let mut a = 0;
        loop {
            if a == idx.len() {
                return Ok(out);
            }
            idx[a] += 1;
            if idx[a] < sizes[a] {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
    }
}

fn polar_free(tree: &ScenarioTree) -> Vec<bool> {
    let mut charged = vec![false; tree.len()];
    charged[tree.root.0] = true;
    let mut stack = vec![tree.root];
    while let Some(id) = stack.pop() {
        let n = tree.node(id);
        if let Some(ms) = &n.measures {
            for (pos, &c) in n.children.iter().enumerate() {
                if ms.extremes.iter().any(|p| p[pos] > 0.0) {
                    charged[c.0] = true;
                    stack.push(c);
                }
            }
        }
    }
    charged
}

fn endowment(tree: &ScenarioTree, u: &UtilitySpec, id: NodeId) -> f64 {
    if u.endowment_enabled {
        tree.node(id).endowment.unwrap_or(0.0)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCase {
    pub value: f64,
    /// Index into [`enumerate_selectors`] order; first on ties.
    pub argmin: usize,
    /// Root path to the first non-polar node where wealth went negative.
    pub violating_path: Option<Vec<NodeId>>,
}

/// `min over selector products of E[U(x0 + H•S_T)]`.
pub fn worst_case_expected_utility(
    tree: &ScenarioTree,
    strategy: &Strategy,
    utility: &UtilitySpec,
    x0: f64,
) -> Result<WorstCase, OracleError> {
    let charged = polar_free(tree);
    let mut wealth = vec![f64::NAN; tree.len()];
    let mut violating = None;
    let mut stack = vec![(tree.root, x0, vec![tree.root])];
    while let Some((id, w, path)) = stack.pop() {
        wealth[id.0] = w;
        let n = tree.node(id);
        if charged[id.0] && !n.children.is_empty() && w < 0.0 && violating.is_none() {
            violating = Some(path.clone());
        }
        let h = strategy.get(id);
        for &c in n.children.iter().rev() {
            let mut g = 0.0;
            if let Some(h) = h {
                for ((hi, a), b) in h.iter().zip(&tree.node(c).price).zip(&n.price) {
                    g += hi * (a - b);
                }
            }
            let mut p = path.clone();
            p.push(c);
            stack.push((c, w + g, p));
        }
    }
    let products = enumerate_selectors(tree, DEFAULT_SELECTOR_CAP)?;
    if let Some(path) = violating {
        return Ok(WorstCase {
            value: VALUE_FLOOR,
            argmin: 0,
            violating_path: Some(path),
        });
    }
    let mut best = (f64::INFINITY, 0);
    for (k, sp) in products.iter().enumerate() {
        let mut s = 0.0;
        let mut floor = false;
        for (&leaf, &p) in &sp.terminal_probs {
            if p > 0.0 {
                let v = utility.evaluate(wealth[leaf.0], endowment(tree, utility, leaf));
                if is_floor(v) {
                    floor = true;
                    break;
                }
                s += p * v;
            }
        }
        let s = if floor { VALUE_FLOOR } else { s };
        if s < best.0 {
            best = (s, k);
        }
    }
    // a terminal at −∞ on a charged path is the other way to be inadmissible
    let violating_path = (is_floor(best.0)).then(|| {
        tree.bfs()
            .into_iter()
            .find(|&id| {
                tree.node(id).children.is_empty()
                    && charged[id.0]
                    && is_floor(utility.evaluate(wealth[id.0], endowment(tree, utility, id)))
            })
            .map(|id| tree.path_to(id))
            .unwrap_or_default()
    });
    Ok(WorstCase {
        value: best.0,
        argmin: best.1,
        violating_path,
    })
}

/// Holdings lattice `step·ℤᵈ`, with points `i/n` when `1/step = n` is an
/// integer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleGrid {
    pub step: f64,
    /// Box half-width; by default `w / ε` at each node, which contains every
    /// admissible holding.
    pub radius: Option<f64>,
    pub eval_cap: usize,
}

impl OracleGrid {
    pub fn new(step: f64) -> Self {
        Self {
            step,
            radius: None,
            eval_cap: DEFAULT_EVAL_CAP,
        }
    }

    fn point(&self, i: i64) -> f64 {
        let inv = 1.0 / self.step;
        let n = inv.round();
        if n >= 1.0 && (inv - n).abs() <= 1e-9 * n {
            i as f64 / n
        } else {
            i as f64 * self.step
        }
    }

    /// Lattice coordinates inside `[−r, r]`.
    fn range(&self, r: f64) -> (i64, i64) {
        let k = ((r / self.step) * (1.0 + 1e-12)).floor() as i64;
        (-k, k)
    }
}

#[derive(Debug, Clone)]
pub struct BruteForce {
    pub value: f64,
    pub strategy: Strategy,
    pub evaluations: usize,
    pub warning: Option<String>,
}

struct Search<'a> {
    tree: &'a ScenarioTree,
    utility: &'a UtilitySpec,
    charged: Vec<bool>,
    margins: Vec<f64>,
    grid: OracleGrid,
    evals: usize,
    memo: HashMap<(usize, u64), (f64, Vec<f64>)>,
}

impl Search<'_> {
    fn value(&mut self, id: NodeId, w: f64) -> Result<f64, OracleError> {
        let n = self.tree.node(id);
        if n.children.is_empty() {
            return Ok(self.utility.evaluate(w, endowment(self.tree, self.utility, id)));
        }
        if w < 0.0 {
            return Ok(VALUE_FLOOR);
        }
        if let Some((v, _)) = self.memo.get(&(id.0, w.to_bits())) {
            return Ok(*v);
        }
        let d = self.tree.asset_count;
        let r = self.grid.radius.unwrap_or_else(|| {
            let e = self.margins[id.0];
            if e.is_infinite() {
                0.0
            } else {
                w / e
            }
        });
        let (lo, hi) = self.grid.range(r);
        let ms = n.measures.as_ref().expect("decision node");
        let incs: Vec<Vec<f64>> = n
            .children
            .iter()
            .map(|&c| {
                self.tree
                    .node(c)
                    .price
                    .iter()
                    .zip(&n.price)
                    .map(|(a, b)| a - b)
                    .collect()
            })
            .collect();
        let live: Vec<usize> = (0..n.children.len())
            .filter(|&i| self.charged[n.children[i].0])
            .collect();
        let mut idx = vec![lo; d];
        let mut h = vec![0.0; d];
        let mut best = (f64::NEG_INFINITY, vec![0.0; d]);
        let mut child_vals = vec![0.0; n.children.len()];
        'outer: loop {
            for (hv, &i) in h.iter_mut().zip(&idx) {
                *hv = self.grid.point(i);
            }
            let mut admissible = true;
            let mut next = Vec::with_capacity(live.len());
            for &i in &live {
                let g: f64 = h.iter().zip(&incs[i]).map(|(a, b)| a * b).sum();
                let wc = w + g;
                if !self.tree.node(n.children[i]).children.is_empty() && wc < 0.0 {
                    admissible = false;
                    break;
                }
                next.push((i, wc));
            }
            if admissible {
                self.evals += 1;
                if self.evals > self.grid.eval_cap {
                    return Err(OracleError::CapExceeded {
                        what: "oracle evaluations",
                        count: self.evals as u128,
                        cap: self.grid.eval_cap as u128,
                    });
                }
                for &(i, wc) in &next {
                    child_vals[i] = self.value(n.children[i], wc)?;
                }
                let mut worst = f64::INFINITY;
                for p in &ms.extremes {
                    let mut s = 0.0;
                    let mut floor = false;
                    for &(i, _) in &next {
                        if p[i] > 0.0 {
                            if is_floor(child_vals[i]) {
                                floor = true;
                                break;
                            }
                            s += p[i] * child_vals[i];
                        }
                    }
                    worst = worst.min(if floor { VALUE_FLOOR } else { s });
                }
                if worst > best.0 {
                    best = (worst, h.clone());
                }
            }
            let mut a = 0;
            loop {
                if a == d {
                    break 'outer;
                }
                idx[a] += 1;
                if idx[a] <= hi {
                    break;
                }
                idx[a] = lo;
                a += 1;
            }
        }
        if best.0 == f64::NEG_INFINITY {
            best.0 = VALUE_FLOOR;
        }
        self.memo.insert((id.0, w.to_bits()), best.clone());
        Ok(best.0)
    }
}

/// `max over lattice strategies of min over models of E[U(x0 + H•S_T)]`.
///
/// Holdings are searched node by node given the wealth reached on the way,
/// which is the same as searching over all predictable lattice strategies:
/// the worst case over product models decomposes node by node, and the
/// decomposition is monotone in the children's values.
pub fn brute_force_value(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    x0: f64,
    grid: &OracleGrid,
) -> Result<BruteForce, OracleError> {
    let charged = polar_free(tree);
    let na = check_na_tree(tree)?;
    let mut warning = None;
    if let Some((&bad, _)) = na.iter().find(|(_, r)| !r.holds()) {
        if grid.radius.is_none() {
            return Err(OracleError::NeedsRadius(bad));
        }
        warning = Some(format!(
            "NA fails at node {bad}: the value grows with the grid radius and has no finite bound"
        ));
    }
    let mut margins = vec![f64::INFINITY; tree.len()];
    if grid.radius.is_none() {
        for id in tree.decision_nodes() {
            if charged[id.0] {
                margins[id.0] = nondegeneracy_margin(&compute_support(tree, id)?)?;
            }
        }
    }
    let mut s = Search {
        tree,
        utility,
        charged,
        margins,
        grid: *grid,
        evals: 0,
        memo: HashMap::new(),
    };
    let value = s.value(tree.root, x0)?;
    // replay the argmax along the reached wealth
    let mut strategy = Strategy::zero();
    let mut stack = vec![(tree.root, x0)];
    while let Some((id, w)) = stack.pop() {
        let n = tree.node(id);
        if n.children.is_empty() {
            continue;
        }
        let h = s
            .memo
            .get(&(id.0, w.to_bits()))
            .map(|(_, h)| h.clone())
            .unwrap_or_else(|| vec![0.0; tree.asset_count]);
        for &c in &n.children {
            let g: f64 = h
                .iter()
                .zip(tree.node(c).price.iter().zip(&n.price))
                .map(|(hi, (a, b))| hi * (a - b))
                .sum();
            stack.push((c, w + g));
        }
        strategy.set(id, h);
    }
    Ok(BruteForce {
        value,
        strategy,
        evaluations: s.evals,
        warning,
    })
}

/// Moves each node's holding to a lattice corner, forward along the tree,
/// keeping wealth at non-polar children nonnegative (strictly positive when
/// `strict`). Holdings are rescaled by the ratio of reached to original
/// wealth before rounding; the corner closest to the target wins.
pub fn round_to_lattice(tree: &ScenarioTree, strategy: &Strategy, x0: f64, step: f64, strict: bool) -> Strategy {
    let grid = OracleGrid::new(step);
    let charged = polar_free(tree);
    let d = tree.asset_count;
    let mut orig = vec![0.0; tree.len()];
    let mut out = Strategy::zero();
    let mut stack = vec![(tree.root, x0, x0)];
    while let Some((id, w_orig, w)) = stack.pop() {
        orig[id.0] = w_orig;
        let n = tree.node(id);
        if n.children.is_empty() {
            continue;
        }
        let h0 = strategy.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; d]);
        let scale = if w_orig > 0.0 { w / w_orig } else { 0.0 };
        let target: Vec<f64> = h0.iter().map(|v| v * scale).collect();
        let base: Vec<i64> = target.iter().map(|v| (v / step).floor() as i64).collect();
        let incs: Vec<Vec<f64>> = n
            .children
            .iter()
            .map(|&c| tree.node(c).price.iter().zip(&n.price).map(|(a, b)| a - b).collect())
            .collect();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 0..(1usize << d) {
            let h: Vec<f64> = (0..d).map(|a| grid.point(base[a] + ((mask >> a) & 1) as i64)).collect();
            let ok = n.children.iter().zip(&incs).all(|(&c, inc)| {
                if !charged[c.0] {
                    return true;
                }
                let wc = w + h.iter().zip(inc).map(|(a, b)| a * b).sum::<f64>();
                if strict {
                    wc > 0.0
                } else {
                    wc >= 0.0
                }
            });
            if ok {
                let dist: f64 = h.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
                if best.as_ref().is_none_or(|(bd, _)| dist < *bd) {
                    best = Some((dist, h));
                }
            }
        }
        let h = best.map(|(_, h)| h).unwrap_or_else(|| vec![0.0; d]);
        for (&c, inc) in n.children.iter().zip(&incs) {
            let g0: f64 = h0.iter().zip(inc).map(|(a, b)| a * b).sum();
            let g: f64 = h.iter().zip(inc).map(|(a, b)| a * b).sum();
            stack.push((c, w_orig + g0, w + g));
        }
        out.set(id, h);
    }
    out
}

/// Unit directions on a grid over the sphere of a `k`-dimensional space:
/// `±1` for `k = 1`, angular step `step` for `k = 2, 3`.
pub fn sphere_grid(k: usize, step: f64) -> Vec<Vec<f64>> {
    use std::f64::consts::PI;
    match k {
        0 => vec![],
        1 => vec![vec![1.0], vec![-1.0]],
        2 => {
            let n = (2.0 * PI / step).ceil() as usize;
            (0..n)
                .map(|i| {
                    let a = 2.0 * PI * i as f64 / n as f64;
                    vec![a.cos(), a.sin()]
                })
                .collect()
        }
        3 => {
            let rings = (PI / step).ceil() as usize;
            let mut out = Vec::new();
            for r in 0..=rings {
                let th = PI * r as f64 / rings as f64;
                let m = ((2.0 * PI * th.sin()) / step).ceil().max(1.0) as usize;
                for i in 0..m {
                    let ph = 2.0 * PI * i as f64 / m as f64;
                    out.push(vec![th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()]);
                }
            }
            out
        }
        _ => panic!("sphere grid supports dimension ≤ 3"),
    }
}

/// Grid search for a one-period arbitrage: the best worst normalized payoff
/// `max_h min_i h·v_i/|v_i|` over grid directions `h` (given in the
/// coordinates of `vectors`). Arbitrage is reported when it is at least
/// `−step`, the first-order error of the grid.
pub fn na_grid_search(vectors: &[Vec<f64>], step: f64) -> (bool, f64, Vec<f64>) {
    let k = vectors.first().map_or(0, Vec::len);
    let unit: Vec<Vec<f64>> = vectors
        .iter()
        .filter_map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
        })
        .collect();
    let mut best = (f64::NEG_INFINITY, vec![0.0; k]);
    for h in sphere_grid(k, step) {
        let worst = unit
            .iter()
            .map(|v| v.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        if worst > best.0 {
            best = (worst, h);
        }
    }
    (best.0 >= -step, best.0, best.1)
}

/// Exhaustive search for a whole-tree arbitrage over strategies with every
/// holding coordinate in `values`: gains `≥ −1e−9` at all non-polar leaves
/// and `≥ 1e−6` at one of them.
pub fn tree_arbitrage_search(tree: &ScenarioTree, values: &[f64], cap: usize) -> Result<Option<Strategy>, OracleError> {
    let charged = polar_free(tree);
    let nodes: Vec<NodeId> = tree
        .bfs()
        .into_iter()
        .filter(|&id| charged[id.0] && !tree.node(id).children.is_empty())
        .collect();
    let d = tree.asset_count;
    let slots = nodes.len() * d;
    let count = (values.len() as u128).checked_pow(slots as u32).unwrap_or(u128::MAX);
    if count > cap as u128 {
        return Err(OracleError::CapExceeded {
            what: "tree strategies",
            count,
            cap: cap as u128,
        });
    }
    let leaves: Vec<NodeId> = tree
        .bfs()
        .into_iter()
        .filter(|&id| charged[id.0] && tree.node(id).children.is_empty())
        .collect();
    let mut idx = vec![0usize; slots];
    loop {
        let mut s = Strategy::zero();
        for (k, &id) in nodes.iter().enumerate() {
            s.set(id, (0..d).map(|a| values[idx[k * d + a]]).collect());
        }
        let mut gain = vec![0.0; tree.len()];
        for id in tree.bfs() {
            let n = tree.node(id);
            let h = s.get(id);
            for &c in &n.children {
                let g: f64 = h.map_or(0.0, |h| {
                    h.iter()
                        .zip(tree.node(c).price.iter().zip(&n.price))
                        .map(|(hi, (a, b))| hi * (a - b))
                        .sum()
                });
                gain[c.0] = gain[id.0] + g;
            }
        }
        let nonneg = leaves.iter().all(|l| gain[l.0] >= -1e-9);
        if nonneg && leaves.iter().any(|l| gain[l.0] >= 1e-6) {
            return Ok(Some(s));
        }
        let mut a = 0;
        loop {
            if a == slots {
                return Ok(None);
            }
            idx[a] += 1;
            if idx[a] < values.len() {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
    }
}

/// The DP value next to the brute-force value, with the tolerance
/// `max(1e−4, ε_grid + h-grid bound)`. The h-grid bound is the worst-case
/// loss from rounding the extracted strategy onto the oracle's lattice; the
/// lattice optimum is at least the rounded strategy's value.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct OracleComparison {
    pub dp_value: f64,
    pub strategy_value: f64,
    pub eps_grid: f64,
    pub oracle_value: f64,
    pub h_grid_bound: f64,
    pub difference: f64,
    pub tolerance: f64,
    pub within: bool,
    pub evaluations: usize,
    pub warning: Option<String>,
}

#[derive(Debug, Error)]
pub enum CompareError {
    #[error(transparent)]
    Dp(#[from] crate::dp::DpError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

pub fn compare_with_dp(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    x0: f64,
    opts: &crate::dp::DpOptions,
    grid: &OracleGrid,
) -> Result<OracleComparison, CompareError> {
    let field = crate::dp::backward_induction(tree, utility, x0, opts)?;
    compare_with_field(tree, &field, x0, &opts.solver, grid)
}

/// As [`compare_with_dp`] for a value field that is already solved.
pub fn compare_with_field(
    tree: &ScenarioTree,
    field: &crate::dp::ValueField,
    x0: f64,
    solver: &crate::maxmin::SolverOptions,
    grid: &OracleGrid,
) -> Result<OracleComparison, CompareError> {
    let utility = &field.utility;
    let ex = crate::dp::extract_strategy(tree, field, x0, solver)?;
    let bf = brute_force_value(tree, utility, x0, grid)?;
    let wc = worst_case_expected_utility(tree, &ex.strategy, utility, x0)?.value;
    let rounded = round_to_lattice(tree, &ex.strategy, x0, grid.step, utility.diverges_at_zero());
    let wc_round = worst_case_expected_utility(tree, &rounded, utility, x0)?.value;
    let h_grid_bound = (wc - wc_round).max(0.0);
    let dp_value = field.root_value(tree);
    let difference = (dp_value - bf.value).abs();
    let tolerance = (field.eps_grid + h_grid_bound).max(1e-4);
    Ok(OracleComparison {
        dp_value,
        strategy_value: wc,
        eps_grid: field.eps_grid,
        oracle_value: bf.value,
        h_grid_bound,
        difference,
        tolerance,
        within: difference <= tolerance,
        evaluations: bf.evaluations,
        warning: bf.warning,
    })
}
