//! Command-line surface.
//!
//! Exit codes: 0 success (NA holds), 1 negative domain result (arbitrage),
//! 2 input error, 3 numerical failure. Failures print one line
//! `ERROR <code> <message>` on stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::dp::{backward_induction, DpError, DpOptions, GridSpec};
use crate::io::{parse_market, solve_report, value_function_csv, write_report, IoError, Market, Metadata};
use crate::lab::{one_dim_existence_demo, random_utility_variant, run_nonexistence_study, LabError};
use crate::maxmin::SolverOptions;
use crate::model::NodeId;
use crate::na::{check_na_tree, compute_support, nondegeneracy_margin, NaError};
use crate::oracle::{compare_with_dp, CompareError, OracleError, OracleGrid};
use crate::utility::UtilitySpec;

#[derive(Debug, Parser)]
#[command(name = "rum", version, about = "Robust utility maximization on scenario trees")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct SolveArgs {
    /// Initial capital.
    #[arg(long)]
    pub x: f64,
    /// Knots per value function.
    #[arg(long, default_value_t = GridSpec::default().knots)]
    pub grid: usize,
    /// One-period solver tolerance.
    #[arg(long, default_value_t = SolverOptions::default().tol)]
    pub tol: f64,
    /// Solve even when the utility is unbounded above.
    #[arg(long)]
    pub allow_unbounded: bool,
}

impl SolveArgs {
    fn options(&self) -> DpOptions {
        DpOptions {
            grid: GridSpec {
                knots: self.grid,
                ..GridSpec::default()
            },
            solver: SolverOptions {
                tol: self.tol,
                ..SolverOptions::default()
            },
            allow_unbounded: self.allow_unbounded,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Node-by-node no-arbitrage check.
    CheckNa { file: PathBuf },
    /// Backward induction, strategy extraction and verification.
    Solve {
        file: PathBuf,
        #[command(flatten)]
        args: SolveArgs,
        #[arg(long)]
        out: PathBuf,
        /// Add a timestamped metadata block.
        #[arg(long)]
        metadata: bool,
    },
    /// Compare the DP value with the brute-force lattice value.
    Oracle {
        file: PathBuf,
        #[arg(long)]
        x: f64,
        #[arg(long)]
        step: f64,
        /// Box half-width for the lattice; required when NA fails.
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        allow_unbounded: bool,
    },
    /// Write a stored value function as CSV.
    ValueFunction {
        file: PathBuf,
        #[arg(long)]
        node: usize,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        x: f64,
        #[arg(long, default_value_t = GridSpec::default().knots)]
        grid: usize,
        #[arg(long)]
        allow_unbounded: bool,
    },
    /// Counterexample studies.
    Lab {
        #[command(subcommand)]
        study: LabCommand,
    },
    /// Nondegeneracy margin per node.
    Margin { file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum LabCommand {
    /// Truncated nonexistence family.
    Truncation {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        levels: Vec<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        x: f64,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// One tradable asset with the second paid as endowment.
        #[arg(long)]
        endowment: bool,
    },
    /// Attainment on seeded one-asset instances.
    Existence {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
}

/// A failed command: exit code, error code and message.
#[derive(Debug)]
pub struct Failure {
    pub exit: i32,
    pub code: &'static str,
    pub message: String,
}

impl Failure {
    fn input(code: &'static str, message: impl ToString) -> Self {
        Self {
            exit: 2,
            code,
            message: message.to_string(),
        }
    }

    fn numerical(message: impl ToString) -> Self {
        Self {
            exit: 3,
            code: "numerical",
            message: message.to_string(),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        let code = match e {
            IoError::Syntax { .. } => "syntax",
            IoError::File(_) => "file",
            IoError::Invalid(_) | IoError::Model(_) => "invalid_tree",
            _ => "schema",
        };
        Failure::input(code, e)
    }
}

impl From<NaError> for Failure {
    fn from(e: NaError) -> Self {
        Failure::numerical(e)
    }
}

impl From<DpError> for Failure {
    fn from(e: DpError) -> Self {
        match e {
            DpError::Arbitrage(_) => Failure {
                exit: 1,
                code: "arbitrage",
                message: e.to_string(),
            },
            DpError::InvalidTree(_) => Failure::input("invalid_tree", e),
            DpError::UnboundedUtility => Failure::input("unbounded_utility", e),
            DpError::Infeasible { .. } => Failure::input("infeasible", e),
            _ => Failure::numerical(e),
        }
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::NeedsRadius(_) => Failure {
                exit: 1,
                code: "arbitrage",
                message: e.to_string(),
            },
            OracleError::CapExceeded { .. } => Failure::input("cap_exceeded", e),
            OracleError::Na(e) => e.into(),
        }
    }
}

impl From<CompareError> for Failure {
    fn from(e: CompareError) -> Self {
        match e {
            CompareError::Dp(e) => e.into(),
            CompareError::Oracle(e) => e.into(),
        }
    }
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        match e {
            LabError::BoundedUtility | LabError::ZeroLevel => Failure::input("lab", e),
            _ => Failure::numerical(e),
        }
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::input("file", format!("{}: {e}", path.display()))
}

fn load(path: &Path) -> Result<Market, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
    Ok(parse_market(&text)?)
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| io_fail(path, e))
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

/// Runs one command, writing normal output to `out`; returns the exit code.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<i32, Failure> {
    let w = |out: &mut dyn Write, s: String| {
        let _ = writeln!(out, "{s}");
    };
    match cli.command {
        Command::CheckNa { file } => {
            let m = load(&file)?;
            let res = check_na_tree(&m.tree)?;
            let mut ok = true;
            for (id, r) in &res {
                match &r.witness {
                    None => w(out, format!("node {id}: holds")),
                    Some(h) => {
                        ok = false;
                        w(out, format!("node {id}: violated witness {}", fmt_vec(h)));
                    }
                }
            }
            w(out, format!("na {}", if ok { "holds" } else { "fails" }));
            Ok(if ok { 0 } else { 1 })
        }
        Command::Solve {
            file,
            args,
            out: path,
            metadata,
        } => {
            let m = load(&file)?;
            let mut r = solve_report(&m.tree, &m.utility, args.x, &args.options())?;
            if metadata {
                r.metadata = Some(Metadata::now());
            }
            write_file(&path, &write_report(&r))?;
            w(out, format!("value {}", r.value));
            w(out, format!("eps_grid {}", r.eps_grid));
            w(
                out,
                format!(
                    "verification {}",
                    if r.verification.passed() { "passed" } else { "failed" }
                ),
            );
            Ok(0)
        }
        Command::Oracle {
            file,
            x,
            step,
            radius,
            allow_unbounded,
        } => {
            let m = load(&file)?;
            let opts = DpOptions {
                allow_unbounded,
                ..DpOptions::default()
            };
            let grid = OracleGrid {
                radius,
                ..OracleGrid::new(step)
            };
            let c = compare_with_dp(&m.tree, &m.utility, x, &opts, &grid)?;
            if let Some(msg) = &c.warning {
                w(out, format!("warning {msg}"));
            }
            for (k, v) in [
                ("dp_value", c.dp_value),
                ("strategy_value", c.strategy_value),
                ("eps_grid", c.eps_grid),
                ("oracle_value", c.oracle_value),
                ("h_grid_bound", c.h_grid_bound),
                ("difference", c.difference),
                ("tolerance", c.tolerance),
            ] {
                w(out, format!("{k:<16}{v}"));
            }
            w(out, format!("{:<16}{}", "evaluations", c.evaluations));
            w(out, format!("{:<16}{}", "within", c.within));
            Ok(if c.within { 0 } else { 3 })
        }
        Command::ValueFunction {
            file,
            node,
            csv,
            x,
            grid,
            allow_unbounded,
        } => {
            let m = load(&file)?;
            let opts = DpOptions {
                grid: GridSpec {
                    knots: grid,
                    ..GridSpec::default()
                },
                allow_unbounded,
                ..DpOptions::default()
            };
            let id = NodeId(node);
            if node >= m.tree.len() {
                return Err(Failure::input("bad_node", format!("no node {node}")));
            }
            let field = backward_induction(&m.tree, &m.utility, x, &opts)?;
            let text = if m.tree.node(id).is_terminal() {
                let e = if m.utility.endowment_enabled {
                    m.tree.node(id).endowment.unwrap_or(0.0)
                } else {
                    0.0
                };
                let vals: Vec<f64> = field.knots.iter().map(|&k| m.utility.evaluate(k, e)).collect();
                value_function_csv(&field.knots, &vals)
            } else {
                let f = field.plfs.get(&id).ok_or_else(|| {
                    Failure::input("bad_node", format!("node {node} is polar; no value function stored"))
                })?;
                value_function_csv(&f.knots, &f.values)
            };
            write_file(&csv, &text)?;
            w(out, format!("wrote {} rows", text.lines().count() - 1));
            Ok(0)
        }
        Command::Lab { study } => match study {
            LabCommand::Truncation {
                levels,
                csv,
                gamma,
                x,
                tol,
                endowment,
            } => {
                let u = UtilitySpec::power(gamma).map_err(|e| Failure::input("lab", e))?;
                let s = if endowment {
                    random_utility_variant(&levels, &u, x, tol)?
                } else {
                    run_nonexistence_study(&levels, &u, x, tol)?
                };
                let text = s.to_csv();
                if let Some(path) = csv {
                    write_file(&path, &text)?;
                }
                let _ = out.write_all(text.as_bytes());
                Ok(0)
            }
            LabCommand::Existence { seeds, tol } => {
                let mut attained = 0;
                w(out, "seed,h,value,grid_value,grid_bound,attained".into());
                for seed in 0..seeds {
                    let r = one_dim_existence_demo(seed, tol)?;
                    attained += r.attained as u64;
                    w(
                        out,
                        format!(
                            "{},{},{},{},{},{}",
                            r.seed, r.h, r.value, r.grid_value, r.grid_bound, r.attained
                        ),
                    );
                }
                w(out, format!("attained {attained}/{seeds}"));
                Ok(if attained == seeds { 0 } else { 3 })
            }
        },
        Command::Margin { file } => {
            let m = load(&file)?;
            let mask = m.tree.nonpolar_mask();
            let mut code = 0;
            for id in m.tree.decision_nodes() {
                if !mask[id.0] {
                    w(out, format!("node {id}: polar"));
                    continue;
                }
                match nondegeneracy_margin(&compute_support(&m.tree, id)?) {
                    Ok(e) if e.is_infinite() => w(out, format!("node {id}: inf")),
                    Ok(e) => w(out, format!("node {id}: {e}")),
                    Err(NaError::MarginUndefined(_)) => {
                        code = 1;
                        w(out, format!("node {id}: undefined (NA fails)"));
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            Ok(code)
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("RUM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Failure::input("env", format!("RUM_THREADS must be an integer, got {v:?}")))?;
        // a second configuration attempt in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            let _ = writeln!(err, "ERROR usage {first}");
            return 2;
        }
    };
    match configure_threads().and_then(|()| execute(cli, out)) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "ERROR {} {}", f.code, f.message.replace('\n', " "));
            f.exit
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("rum").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_are_structured() {
        let (code, _, err) = call(&["solve"]);
        assert_eq!(code, 2);
        assert!(err.starts_with("ERROR usage "));
        let (code, _, err) = call(&["check-na", "/nonexistent/market.json"]);
        assert_eq!(code, 2);
        assert!(err.starts_with("ERROR file "));
    }

    #[test]
    fn lab_truncation_rows() {
        let (code, out, _) = call(&["lab", "truncation", "--levels", "1,2"]);
        assert_eq!(code, 0);
        let rows: Vec<&str> = out.lines().skip(1).collect();
        assert_eq!(rows.len(), 2);
        for r in rows {
            let gap: f64 = r.split(',').nth(5).unwrap().parse().unwrap();
            assert!(gap > 0.0);
        }
    }
}
