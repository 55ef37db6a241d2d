//! Counterexample family for utilities unbounded above, and the `d = 1`
//! attainment demo.
//!
//! Two models on the same one-period market with `S₀ = (1, 1)`:
//! `P₁` makes `ΔS¹ ∈ {±1}` and `ΔS² ∈ {−1, 2}` independent fair coins;
//! `P₂,N` keeps `ΔS² = 0`, puts `½` on `ΔS¹ = −1` and spreads the other half
//! over `ΔS¹ = 4ⁿ`, `n ≤ N`, with weights `2^{−(n+1)}` and the leftover tail
//! mass on the largest atom. Under `√` the `P₂,N` upside grows without bound
//! in `N`, so the truncated optimizers drift to the boundary `h¹ = 0` where
//! the value drops to `U(x)`.
//!
//! Every finite level has an optimizer; nonexistence shows up as a limit
//! diagnosis: `ĥ¹_N ↓ 0` while the value stays bounded away from the value
//! at the limit point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maxmin::{
    grid_resolution_bound, rational_grid_value, solve_one_period, Continuation, MaxminError, MaxminSolution,
    OnePeriodProblem, SolverOptions,
};
use crate::model::{MeasureSet, NodeId, ScenarioTree, TreeBuilder};
use crate::na::{check_na_node, compute_support, NaError, SupportData};
use crate::utility::UtilitySpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("utility is bounded above; the truncated family needs an unbounded one")]
    BoundedUtility,
    #[error("truncation level must be at least 1")]
    ZeroLevel,
    #[error("level {level}: {source}")]
    Solver { level: usize, source: MaxminError },
    #[error(transparent)]
    Na(#[from] NaError),
}

const P1_ATOMS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 2.0), (1.0, 2.0)];

/// `P₂,N` weights of the atoms `4ⁿ`, `n = 1..=N`; they sum to `½`.
pub fn p2_tail(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|k| {
            if k < n {
                0.5f64.powi(k as i32 + 1)
            } else {
                0.5f64.powi(n as i32)
            }
        })
        .collect()
}

fn check_level(n: usize, utility: &UtilitySpec) -> Result<(), LabError> {
    if utility.bounded_above() {
        return Err(LabError::BoundedUtility);
    }
    if n == 0 {
        return Err(LabError::ZeroLevel);
    }
    Ok(())
}

fn measures(n: usize) -> MeasureSet {
    let mut p1 = vec![0.25; 4];
    p1.extend(std::iter::repeat_n(0.0, n + 1));
    let mut p2 = vec![0.0; 4];
    p2.push(0.5);
    p2.extend(p2_tail(n));
    MeasureSet::new(vec![p1, p2])
}

/// The two-asset market at level `N`: children are the four `P₁` atoms,
/// then `(−1, 0)` and `(4ⁿ, 0)` for `n = 1..=N`.
pub fn build_truncated_example(n: usize, utility: &UtilitySpec) -> Result<ScenarioTree, LabError> {
    check_level(n, utility)?;
    let mut prices: Vec<Vec<f64>> = P1_ATOMS.iter().map(|&(a, b)| vec![1.0 + a, 1.0 + b]).collect();
    prices.push(vec![0.0, 1.0]);
    for k in 1..=n {
        prices.push(vec![1.0 + 4f64.powi(k as i32), 1.0]);
    }
    let mut b = TreeBuilder::new(1, vec![1.0, 1.0]);
    b.branch(b.root(), prices, measures(n));
    Ok(b.build())
}

/// The one-asset market in `S¹` with terminal endowment `g·ΔS²`.
pub fn build_endowment_example(n: usize, utility: &UtilitySpec, g: f64) -> Result<ScenarioTree, LabError> {
    check_level(n, utility)?;
    let mut prices: Vec<Vec<f64>> = P1_ATOMS.iter().map(|&(a, _)| vec![1.0 + a]).collect();
    prices.push(vec![0.0]);
    for k in 1..=n {
        prices.push(vec![1.0 + 4f64.powi(k as i32)]);
    }
    let mut b = TreeBuilder::new(1, vec![1.0]);
    let kids = b.branch(b.root(), prices, measures(n));
    for (&c, &(_, s2)) in kids.iter().zip(&P1_ATOMS) {
        b.endowment(c, g * s2);
    }
    Ok(b.build())
}

fn solve_root(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    x: f64,
    opts: &SolverOptions,
) -> Result<(SupportData, MaxminSolution), MaxminError> {
    let support = compute_support(tree, tree.root).expect("root is a decision node");
    let sol = {
        let conts = root_continuations(tree, &support, utility);
        let p = OnePeriodProblem::new(&support, x, conts, tree.node(tree.root).measures.as_ref().unwrap());
        solve_one_period(&p, opts)?
    };
    Ok((support, sol))
}

fn root_continuations<'a>(
    tree: &ScenarioTree,
    support: &SupportData,
    utility: &'a UtilitySpec,
) -> Vec<Continuation<'a>> {
    support
        .nonpolar_children
        .iter()
        .map(|&c| Continuation::Terminal {
            utility,
            endowment: if utility.endowment_enabled {
                tree.node(c).endowment.unwrap_or(0.0)
            } else {
                0.0
            },
        })
        .collect()
}

/// `sup_h E_{P₁}[U(x + h·ΔS)]` on the two-asset market.
pub fn p1_subproblem(utility: &UtilitySpec, x: f64, opts: &SolverOptions) -> Result<MaxminSolution, MaxminError> {
    let mut b = TreeBuilder::new(1, vec![1.0, 1.0]);
    let prices = P1_ATOMS.iter().map(|&(a, c)| vec![1.0 + a, 1.0 + c]).collect();
    b.branch(b.root(), prices, MeasureSet::single(vec![0.25; 4]));
    Ok(solve_root(&b.build(), utility, x, opts)?.1)
}

/// `h¹ ↦ E_{P₁}[U(x + h¹ΔS¹ + h²ΔS²)]` on `[0, 1]`.
pub fn p1_slice(utility: &UtilitySpec, x: f64, h2: f64, samples: usize) -> Vec<f64> {
    (0..=samples)
        .map(|i| {
            let h1 = i as f64 / samples as f64;
            P1_ATOMS
                .iter()
                .map(|&(a, b)| 0.25 * utility.value(x + h1 * a + h2 * b))
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationRow {
    pub n: usize,
    pub h1: f64,
    /// `None` in the one-asset variant.
    pub h2: Option<f64>,
    pub value: f64,
    pub value_at_limit_point: f64,
    pub gap: f64,
    /// Largest forward difference of the `P₁` slice at `ĥ²_N` over `[0, 1]`.
    pub slice_max_increase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationStudy {
    pub levels: Vec<usize>,
    pub rows: Vec<TruncationRow>,
}

impl TruncationStudy {
    pub fn h1_strictly_decreasing(&self) -> bool {
        self.rows.iter().all(|r| r.h1 > 0.0) && self.rows.windows(2).all(|w| w[1].h1 < w[0].h1)
    }

    pub fn value_strictly_increasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].value > w[0].value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,h1,h2,value,value_at_limit_point,gap\n");
        for r in &self.rows {
            let h2 = r.h2.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.n, r.h1, h2, r.value, r.value_at_limit_point, r.gap
            ));
        }
        s
    }
}

/// `min(E_{P₁}[U(x + ĝ²ΔS²)], U(x))`: the `h¹ = 0` branch at the `P₁`
/// optimizer.
pub fn value_at_limit_point(utility: &UtilitySpec, x: f64, g2: f64) -> f64 {
    let p1: f64 = [-1.0, 2.0].iter().map(|b| 0.5 * utility.value(x + g2 * b)).sum();
    p1.min(utility.value(x))
}

fn slice_increase(utility: &UtilitySpec, x: f64, h2: f64) -> f64 {
    p1_slice(utility, x, h2, 1000)
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn run_nonexistence_study(
    levels: &[usize],
    utility: &UtilitySpec,
    x: f64,
    tol: f64,
) -> Result<TruncationStudy, LabError> {
    let opts = SolverOptions {
        tol,
        ..SolverOptions::default()
    };
    let g = p1_subproblem(utility, x, &opts).map_err(|source| LabError::Solver { level: 0, source })?;
    let limit = value_at_limit_point(utility, x, g.h_opt[1]);
    let mut rows = Vec::with_capacity(levels.len());
    for &n in levels {
        let tree = build_truncated_example(n, utility)?;
        let (_, sol) = solve_root(&tree, utility, x, &opts).map_err(|source| LabError::Solver { level: n, source })?;
        rows.push(TruncationRow {
            n,
            h1: sol.h_opt[0],
            h2: Some(sol.h_opt[1]),
            value: sol.value,
            value_at_limit_point: limit,
            gap: sol.value - limit,
            slice_max_increase: slice_increase(utility, x, sol.h_opt[1]),
        });
    }
    Ok(TruncationStudy {
        levels: levels.to_vec(),
        rows,
    })
}

/// The same study with only `S¹` tradable and `ĝ²ΔS²` paid as
/// terminal endowment.
pub fn random_utility_variant(
    levels: &[usize],
    utility: &UtilitySpec,
    x: f64,
    tol: f64,
) -> Result<TruncationStudy, LabError> {
    let opts = SolverOptions {
        tol,
        ..SolverOptions::default()
    };
    let g = p1_subproblem(utility, x, &opts).map_err(|source| LabError::Solver { level: 0, source })?;
    let g2 = g.h_opt[1];
    let limit = value_at_limit_point(utility, x, g2);
    let u = utility.clone().with_endowments(true);
    let mut rows = Vec::with_capacity(levels.len());
    for &n in levels {
        let tree = build_endowment_example(n, &u, g2)?;
        let (_, sol) = solve_root(&tree, &u, x, &opts).map_err(|source| LabError::Solver { level: n, source })?;
        rows.push(TruncationRow {
            n,
            h1: sol.h_opt[0],
            h2: None,
            value: sol.value,
            value_at_limit_point: limit,
            gap: sol.value - limit,
            slice_max_increase: slice_increase(utility, x, g2),
        });
    }
    Ok(TruncationStudy {
        levels: levels.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExistenceRow {
    pub seed: u64,
    pub atoms: Vec<f64>,
    pub measures: Vec<Vec<f64>>,
    /// Draws discarded by the NA filter before this instance.
    pub rejected: usize,
    pub h: f64,
    pub value: f64,
    pub grid_value: f64,
    pub grid_bound: f64,
    pub attained: bool,
}

pub const EXISTENCE_STEP: f64 = 1e-3;

/// One random `d = 1` one-period instance: 2 to 5 atoms in `[−1, 3]`, 1 to
/// 3 extreme measures, redrawn until NA holds; `√` utility at `x = 1`.
/// Attained means the solver value is within `tol` of the best lattice
/// value from above and within `tol` plus the lattice bound from below.
pub fn one_dim_existence_demo(seed: u64, tol: f64) -> Result<ExistenceRow, LabError> {
    let utility = UtilitySpec::power(0.5).expect("valid gamma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejected = 0;
    let (atoms, ms, support) = loop {
        let n = rng.gen_range(2..=5);
        let atoms: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..3.0)).collect();
        let k = rng.gen_range(1..=3);
        let ms = MeasureSet::new(
            (0..k)
                .map(|_| {
                    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
                    let s: f64 = w.iter().sum();
                    w.into_iter().map(|v| v / s).collect()
                })
                .collect(),
        );
        let incs: Vec<Vec<f64>> = atoms.iter().map(|&a| vec![a]).collect();
        let kids: Vec<NodeId> = (1..=n).map(NodeId).collect();
        let support = SupportData::from_increments(NodeId(0), &kids, &incs, &ms);
        if check_na_node(&support)?.holds() {
            break (atoms, ms, support);
        }
        rejected += 1;
    };
    let conts = vec![
        Continuation::Terminal {
            utility: &utility,
            endowment: 0.0
        };
        atoms.len()
    ];
    let p = OnePeriodProblem::new(&support, 1.0, conts, &ms);
    let opts = SolverOptions {
        tol,
        ..SolverOptions::default()
    };
    let sol = solve_one_period(&p, &opts).map_err(|source| LabError::Solver { level: 0, source })?;
    let (grid_value, _) =
        rational_grid_value(&p, EXISTENCE_STEP).map_err(|source| LabError::Solver { level: 0, source })?;
    let grid_bound = grid_resolution_bound(&p, &sol.h_opt, EXISTENCE_STEP);
    let attained = sol.value >= grid_value - tol && sol.value <= grid_value + tol + grid_bound;
    Ok(ExistenceRow {
        seed,
        atoms,
        measures: ms.extremes,
        rejected,
        h: sol.h_opt[0],
        value: sol.value,
        grid_value,
        grid_bound,
        attained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::na::check_na_tree;

    fn sqrt_u() -> UtilitySpec {
        UtilitySpec::power(0.5).unwrap()
    }

    #[test]
    fn tail_mass_is_one_half() {
        for n in 1..12 {
            let t = p2_tail(n);
            assert!((t.iter().sum::<f64>() - 0.5).abs() < 1e-15);
            // E[√(ΔS¹)⁺] = Σ p_n 2ⁿ = (N + 1)/2
            let e: f64 = t.iter().enumerate().map(|(k, p)| p * 2f64.powi(k as i32 + 1)).sum();
            assert!((e - (n as f64 + 1.0) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn construction_errors_and_shape() {
        let u = sqrt_u();
        assert_eq!(build_truncated_example(0, &u).unwrap_err(), LabError::ZeroLevel);
        assert_eq!(
            build_truncated_example(1, &UtilitySpec::exponential(1.0).unwrap()).unwrap_err(),
            LabError::BoundedUtility
        );
        let tree = build_truncated_example(1, &u).unwrap();
        assert_eq!(tree.node(tree.root).children.len(), 6);
        assert!(check_na_tree(&tree).unwrap().values().all(|r| r.holds()));
        let one = build_endowment_example(3, &u.clone().with_endowments(true), 0.5).unwrap();
        assert!(check_na_tree(&one).unwrap().values().all(|r| r.holds()));
        let mut es: Vec<f64> = one.node(one.root).children[..4]
            .iter()
            .map(|&c| one.node(c).endowment.unwrap())
            .collect();
        es.sort_by(f64::total_cmp);
        es.dedup();
        assert_eq!(es, vec![-0.5, 1.0]);
    }

    #[test]
    fn p1_closed_form() {
        let g = p1_subproblem(
            &sqrt_u(),
            1.0,
            &SolverOptions {
                tol: 1e-14,
                ..Default::default()
            },
        )
        .unwrap();
        let exact = 0.5 * 0.5f64.sqrt() + 0.5 * 2f64.sqrt();
        assert!((g.value - exact).abs() < 1e-10);
        assert!(g.h_opt[0].abs() < 1e-6 && (g.h_opt[1] - 0.5).abs() < 1e-6);
        assert_eq!(value_at_limit_point(&sqrt_u(), 1.0, 0.5), 1.0);
    }

    #[test]
    fn truncation_signature() {
        let u = sqrt_u();
        let s = run_nonexistence_study(&[1, 2, 4, 8], &u, 1.0, 1e-10).unwrap();
        assert!(s.h1_strictly_decreasing(), "{:?}", s.rows);
        assert!(s.value_strictly_increasing());
        let last = s.rows.last().unwrap();
        assert_eq!(last.value_at_limit_point, 1.0);
        assert!(last.gap >= 0.05 && last.value < 1.0607);
        assert!(s.rows.iter().all(|r| r.slice_max_increase <= 1e-9));
        assert_eq!(s.to_csv().lines().count(), 5);

        let v = random_utility_variant(&[1, 2, 4, 8], &u, 1.0, 1e-10).unwrap();
        assert!(v.h1_strictly_decreasing(), "{:?}", v.rows);
        assert!(
            (v.rows[3].gap - last.gap).abs() < 1e-3,
            "{} vs {}",
            v.rows[3].gap,
            last.gap
        );
    }

    #[test]
    fn existence_demo_attains() {
        for seed in 0..10 {
            let r = one_dim_existence_demo(seed, 1e-8).unwrap();
            assert!(r.attained, "{r:?}");
        }
    }
}
