//! Market files and solve reports, both JSON.
//!
//! A market file:
//!
//! ```json
//! {
//!   "version": 1, "d": 1, "T": 1,
//!   "utility": {"family": "power", "params": {"gamma": 0.5}, "endowments": false},
//!   "nodes": [
//!     {"id": 0, "t": 0, "S": [1.0], "children": [1, 2], "measures": [[0.5, 0.5]]},
//!     {"id": 1, "t": 1, "S": [0.5]},
//!     {"id": 2, "t": 1, "S": [2.0]}
//!   ],
//!   "endowments": {"2": 0.25}
//! }
//! ```
//!
//! Unknown keys are rejected. Floats are written in shortest round-trip
//! form, so parsing a written file gives back the same bits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dp::{
    backward_induction, extract_strategy, verify_value_inequalities, DpError, DpOptions, DpStats, GridSpec,
    InequalityReport,
};
use crate::model::{validate_tree, MeasureSet, ModelError, Node, NodeId, ScenarioTree, Strategy};
use crate::na::NaResult;
use crate::utility::{UtilityError, UtilityFamily, UtilitySpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error at line {line}, column {column}: {message}")]
    Schema {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("unknown utility family {0:?}")]
    UnknownFamily(String),
    #[error("utility params: {0}")]
    Params(String),
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{}", describe(.0))]
    Invalid(Vec<(Option<NodeId>, String)>),
    #[error(transparent)]
    File(#[from] std::io::Error),
}

fn describe(v: &[(Option<NodeId>, String)]) -> String {
    let (node, msg) = &v[0];
    let at = node.map(|n| format!("node {n}: ")).unwrap_or_default();
    if v.len() > 1 {
        format!("{at}{msg} (and {} more)", v.len() - 1)
    } else {
        format!("{at}{msg}")
    }
}

impl From<serde_json::Error> for IoError {
    fn from(e: serde_json::Error) -> Self {
        use serde_json::error::Category;
        let (line, column) = (e.line(), e.column());
        let message = e.to_string();
        match e.classify() {
            Category::Data => IoError::Schema { line, column, message },
            _ => IoError::Syntax { line, column, message },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtilityBlock {
    family: String,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    params: serde_json::Map<String, Value>,
    #[serde(default)]
    endowments: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: usize,
    t: usize,
    #[serde(rename = "S")]
    price: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    children: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    measures: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarketFile {
    version: u32,
    d: usize,
    #[serde(rename = "T")]
    horizon: usize,
    utility: UtilityBlock,
    nodes: Vec<NodeRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    endowments: BTreeMap<usize, f64>,
}

/// A parsed market: the tree and its utility.
#[derive(Debug, Clone, PartialEq)]
pub struct Market {
    pub tree: ScenarioTree,
    pub utility: UtilitySpec,
}

fn family_from(block: &UtilityBlock) -> Result<UtilityFamily, IoError> {
    let allowed: &[&str] = match block.family.as_str() {
        "log" => &[],
        "power" => &["gamma"],
        "exponential" => &["alpha"],
        "piecewise_linear" => &["knots", "values"],
        other => return Err(IoError::UnknownFamily(other.to_string())),
    };
    if let Some(k) = block.params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(IoError::Params(format!("unknown parameter {k:?} for {}", block.family)));
    }
    let mut obj = block.params.clone();
    obj.insert("family".into(), Value::String(block.family.clone()));
    serde_json::from_value(Value::Object(obj)).map_err(|e| IoError::Params(e.to_string()))
}

fn block_from(u: &UtilitySpec) -> UtilityBlock {
    let Value::Object(mut obj) = serde_json::to_value(&u.family).expect("family serializes") else {
        unreachable!("tagged enum serializes to an object")
    };
    let family = match obj.remove("family") {
        Some(Value::String(s)) => s,
        _ => unreachable!("tag present"),
    };
    UtilityBlock {
        family,
        params: obj,
        endowments: u.endowment_enabled,
    }
}

pub fn parse_market(text: &str) -> Result<Market, IoError> {
    let file: MarketFile = serde_json::from_str(text)?;
    if file.version != FORMAT_VERSION {
        return Err(IoError::Version(file.version));
    }
    let utility = UtilitySpec::new(family_from(&file.utility)?)?.with_endowments(file.utility.endowments);
    let mut nodes: Vec<Node> = file
        .nodes
        .into_iter()
        .map(|r| Node {
            id: NodeId(r.id),
            t: r.t,
            price: r.price,
            children: r.children.into_iter().map(NodeId).collect(),
            measures: (!r.measures.is_empty()).then(|| MeasureSet::new(r.measures)),
            endowment: None,
        })
        .collect();
    for (&id, &e) in &file.endowments {
        let n = nodes
            .get_mut(id)
            .ok_or_else(|| IoError::Invalid(vec![(Some(NodeId(id)), "endowment for unknown node".into())]))?;
        n.endowment = Some(e);
    }
    let tree = ScenarioTree::new(file.horizon, file.d, nodes, NodeId(0))?;
    let report = validate_tree(&tree);
    if !report.is_valid() {
        return Err(IoError::Invalid(
            report.violations.into_iter().map(|v| (v.node, v.message)).collect(),
        ));
    }
    Ok(Market { tree, utility })
}

pub fn write_market(market: &Market) -> String {
    let tree = &market.tree;
    let file = MarketFile {
        version: FORMAT_VERSION,
        d: tree.asset_count,
        horizon: tree.horizon,
        utility: block_from(&market.utility),
        nodes: tree
            .nodes
            .iter()
            .map(|n| NodeRecord {
                id: n.id.0,
                t: n.t,
                price: n.price.clone(),
                children: n.children.iter().map(|c| c.0).collect(),
                measures: n.measures.as_ref().map(|m| m.extremes.clone()).unwrap_or_default(),
            })
            .collect(),
        endowments: tree
            .nodes
            .iter()
            .filter_map(|n| n.endowment.map(|e| (n.id.0, e)))
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("market serializes") + "\n"
}

/// Optional non-deterministic block; absent unless requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub generated_unix: u64,
    pub tool_version: String,
}

impl Metadata {
    pub fn now() -> Self {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            generated_unix: secs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveReport {
    pub x0: f64,
    /// `U₀(x0)` from the value functions.
    pub value: f64,
    /// Worst-case expected utility of the extracted strategy.
    pub strategy_value: f64,
    pub eps_grid: f64,
    pub grid: GridSpec,
    pub solver_tol: f64,
    pub strategy: Strategy,
    pub na_holds: bool,
    pub na: BTreeMap<NodeId, NaResult>,
    /// `None` where `L = {0}` (no risky direction, infinite margin).
    pub margins: BTreeMap<NodeId, Option<f64>>,
    pub verification: InequalityReport,
    pub stats: DpStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<Metadata>,
}

pub fn solve_report(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    x0: f64,
    opts: &DpOptions,
) -> Result<SolveReport, DpError> {
    let na = crate::na::check_na_tree(tree)?;
    let field = backward_induction(tree, utility, x0, opts)?;
    let ex = extract_strategy(tree, &field, x0, &opts.solver)?;
    let verification = verify_value_inequalities(tree, &field, &ex.strategy, x0, true)?;
    Ok(SolveReport {
        x0,
        value: field.root_value(tree),
        strategy_value: ex.value,
        eps_grid: field.eps_grid,
        grid: opts.grid,
        solver_tol: opts.solver.tol,
        strategy: ex.strategy,
        na_holds: na.values().all(NaResult::holds),
        na,
        margins: field
            .margins
            .iter()
            .map(|(&k, &m)| (k, m.is_finite().then_some(m)))
            .collect(),
        verification,
        stats: field.stats,
        metadata: None,
    })
}

pub fn write_report(r: &SolveReport) -> String {
    serde_json::to_string_pretty(r).expect("report serializes") + "\n"
}

pub fn parse_report(text: &str) -> Result<SolveReport, IoError> {
    Ok(serde_json::from_str(text)?)
}

/// `x,value` rows at the knots of a stored value function.
pub fn value_function_csv(knots: &[f64], values: &[f64]) -> String {
    let mut s = String::from("x,value\n");
    for (x, v) in knots.iter().zip(values) {
        s.push_str(&format!("{x},{v}\n"));
    }
    s
}
