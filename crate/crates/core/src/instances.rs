//! Seeded random trees, supports, utilities and strategies for tests and
//! the lab.

use rand::Rng;

use crate::model::{MeasureSet, NodeId, ScenarioTree, Strategy, TreeBuilder};
use crate::na::{check_na_node, nondegeneracy_margin, SupportData};
use crate::utility::UtilitySpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeShape {
    pub asset_count: usize,
    pub horizon: usize,
    /// Inclusive range of children per node.
    pub children: (usize, usize),
    /// Inclusive range of extreme measures per node.
    pub extremes: (usize, usize),
    /// Chance that a child gets probability 0 under every measure.
    pub polar_prob: f64,
    /// Margin required at every node, relative to the longest increment.
    pub min_margin: f64,
}

impl TreeShape {
    pub fn new(asset_count: usize, horizon: usize) -> Self {
        Self {
            asset_count,
            horizon,
            children: (asset_count + 1, asset_count + 2),
            extremes: (1, 3),
            polar_prob: 0.0,
            min_margin: 0.05,
        }
    }
}

fn random_measures(rng: &mut impl Rng, n: usize, k: usize, polar: &[bool]) -> MeasureSet {
    let extremes = (0..k)
        .map(|_| {
            let w: Vec<f64> = (0..n)
                .map(|i| if polar[i] { 0.0 } else { rng.gen_range(0.1..1.0) })
                .collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
        .collect();
    MeasureSet::new(extremes)
}

/// A tree satisfying NA at every node with margin at least
/// `min_margin·max‖ΔS‖`. Panics if a node cannot be drawn in 10 000 tries.
pub fn random_tree(rng: &mut impl Rng, shape: &TreeShape) -> ScenarioTree {
    let d = shape.asset_count;
    let root: Vec<f64> = (0..d).map(|_| rng.gen_range(0.8..1.2)).collect();
    let mut b = TreeBuilder::new(shape.horizon, root);
    let mut frontier = vec![b.root()];
    for _ in 0..shape.horizon {
        let mut next = Vec::new();
        for id in frontier {
            let s = b.price(id).to_vec();
            let (prices, ms) = draw_node(rng, shape, &s, id);
            next.extend(b.branch(id, prices, ms));
        }
        frontier = next;
    }
    b.build()
}

fn draw_node(rng: &mut impl Rng, shape: &TreeShape, s: &[f64], id: NodeId) -> (Vec<Vec<f64>>, MeasureSet) {
    for _ in 0..10_000 {
        let n = rng.gen_range(shape.children.0..=shape.children.1);
        let k = rng.gen_range(shape.extremes.0..=shape.extremes.1);
        let mut polar: Vec<bool> = (0..n).map(|_| rng.gen_bool(shape.polar_prob)).collect();
        if polar.iter().all(|&p| p) {
            polar[0] = false;
        }
        let prices: Vec<Vec<f64>> = (0..n)
            .map(|_| s.iter().map(|p| p * (1.0 + rng.gen_range(-0.5..0.8))).collect())
            .collect();
        let incs: Vec<Vec<f64>> = prices
            .iter()
            .map(|q| q.iter().zip(s).map(|(a, b)| a - b).collect())
            .collect();
        let ms = random_measures(rng, n, k, &polar);
        let kids: Vec<NodeId> = (0..n).map(NodeId).collect();
        let sup = SupportData::from_increments(id, &kids, &incs, &ms);
        if sup.dim_l() == 0 {
            continue;
        }
        let Ok(true) = check_na_node(&sup).map(|r| r.holds()) else {
            continue;
        };
        let scale = sup
            .support_vectors
            .iter()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        match nondegeneracy_margin(&sup) {
            Ok(e) if e >= shape.min_margin * scale => return (prices, ms),
            _ => continue,
        }
    }
    panic!("could not draw an NA node for {shape:?}");
}

/// How a one-period support is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupportKind {
    /// Independent uniform vectors in `[−1, 1]ᵈ`.
    Generic,
    /// A pair `v, −v` plus vectors on one side of `v⊥`; an arbitrage exists
    /// exactly when the one-sided vectors miss the other side.
    Boundary,
    /// Vectors inside a random line, so `L` has dimension 1.
    Deficient,
}

pub fn random_support(rng: &mut impl Rng, d: usize, n: usize, kind: SupportKind) -> Vec<Vec<f64>> {
    let unif = |rng: &mut dyn rand::RngCore| -> Vec<f64> { (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    match kind {
        SupportKind::Generic => (0..n).map(|_| unif(rng)).collect(),
        SupportKind::Boundary => {
            let v = unif(rng);
            let mut out = vec![v.clone(), v.iter().map(|x| -x).collect()];
            let normal = unif(rng);
            let vv: f64 = v.iter().map(|x| x * x).sum();
            let nv: f64 = normal.iter().zip(&v).map(|(a, b)| a * b).sum();
            // normal ⟂ v
            let normal: Vec<f64> = normal.iter().zip(&v).map(|(a, b)| a - nv / vv * b).collect();
            let flip_last = rng.gen_bool(0.5);
            for i in 2..n.max(3) {
                let mut w = unif(rng);
                let side: f64 = w.iter().zip(&normal).map(|(a, b)| a * b).sum();
                let want = if flip_last && i == n.max(3) - 1 { -1.0 } else { 1.0 };
                if side * want < 0.0 {
                    w = w
                        .iter()
                        .zip(&normal)
                        .map(|(a, b)| a - 2.0 * side / normal.iter().map(|x| x * x).sum::<f64>() * b)
                        .collect();
                }
                out.push(w);
            }
            out
        }
        SupportKind::Deficient => {
            let dir = unif(rng);
            (0..n)
                .map(|_| {
                    let t = rng.gen_range(-1.0..1.0);
                    dir.iter().map(|x| t * x).collect()
                })
                .collect()
        }
    }
}

/// Log, power `γ ∈ {0.3, 0.5, 0.7}` or exponential `α ∈ [0.5, 2]`.
pub fn random_utility(rng: &mut impl Rng) -> UtilitySpec {
    match rng.gen_range(0..3) {
        0 => UtilitySpec::log(),
        1 => UtilitySpec::power([0.3, 0.5, 0.7][rng.gen_range(0..3)]).expect("valid gamma"),
        _ => UtilitySpec::exponential(rng.gen_range(0.5..2.0)).expect("valid alpha"),
    }
}

/// A random strategy keeping wealth strictly positive on every non-polar
/// path: at each node a random direction scaled to a random fraction (below
/// `reach < 1`) of the distance to the boundary of the admissible set.
pub fn random_admissible_strategy(rng: &mut impl Rng, tree: &ScenarioTree, x0: f64, reach: f64) -> Strategy {
    let d = tree.asset_count;
    let mask = tree.nonpolar_mask();
    let mut wealth = vec![0.0; tree.len()];
    wealth[tree.root.0] = x0;
    let mut s = Strategy::zero();
    for id in tree.bfs() {
        let n = tree.node(id);
        if n.is_terminal() {
            continue;
        }
        let w = wealth[id.0];
        let ms = n.measures.as_ref().expect("decision node");
        let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tmax = f64::INFINITY;
        for (pos, &c) in n.children.iter().enumerate() {
            if !ms.charges(pos) {
                continue;
            }
            let g: f64 = u.iter().zip(tree.increment(id, c)).map(|(a, b)| a * b).sum();
            if g < 0.0 {
                tmax = tmax.min(w / -g);
            }
        }
        if !tmax.is_finite() {
            tmax = w;
        }
        let t = rng.gen_range(0.0..reach) * tmax;
        let h: Vec<f64> = if mask[id.0] {
            u.iter().map(|x| t * x).collect()
        } else {
            vec![0.0; d]
        };
        for &c in &n.children {
            let g: f64 = h.iter().zip(tree.increment(id, c)).map(|(a, b)| a * b).sum();
            wealth[c.0] = w + g;
        }
        s.set(id, h);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::na::{check_na_tree, compute_support};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trees_are_valid_and_arbitrage_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (d, t) in [(1, 3), (2, 2), (3, 1)] {
            let shape = TreeShape {
                polar_prob: 0.1,
                ..TreeShape::new(d, t)
            };
            let tree = random_tree(&mut rng, &shape);
            assert!(crate::model::validate_tree(&tree).is_valid());
            assert!(check_na_tree(&tree).unwrap().values().all(|r| r.holds()));
            for id in tree.decision_nodes() {
                if tree.nonpolar_mask()[id.0] {
                    assert!(nondegeneracy_margin(&compute_support(&tree, id).unwrap()).unwrap() > 0.0);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_tree() {
        let shape = TreeShape::new(2, 2);
        let a = random_tree(&mut ChaCha8Rng::seed_from_u64(3), &shape);
        let b = random_tree(&mut ChaCha8Rng::seed_from_u64(3), &shape);
        assert_eq!(a, b);
    }

    #[test]
    fn strategies_stay_admissible() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tree = random_tree(&mut rng, &TreeShape::new(2, 2));
        let mask = tree.nonpolar_mask();
        for _ in 0..20 {
            let s = random_admissible_strategy(&mut rng, &tree, 1.0, 0.9);
            let w = s.wealth_by_node(&tree, 1.0);
            assert!(tree.bfs().iter().all(|id| !mask[id.0] || w[id.0] > 0.0));
        }
    }

    #[test]
    fn deficient_supports_span_a_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_support(&mut rng, 3, 4, SupportKind::Deficient);
        let kids: Vec<NodeId> = (0..4).map(NodeId).collect();
        let s = SupportData::from_increments(NodeId(0), &kids, &v, &MeasureSet::single(vec![0.25; 4]));
        assert_eq!(s.dim_l(), 1);
    }
}
