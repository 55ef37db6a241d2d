//! Small dense linear programs.
//!
//! The workhorse is a revised primal simplex on standard form
//! `min c·x  s.t.  A x = b, x ≥ 0` with an explicit basis inverse, two phases
//! and Bland's anti-cycling rule. Problems with few free variables and many
//! inequality rows (`max obj·y  s.t.  M y ≤ r`) are solved through their dual,
//! which keeps the basis as small as the number of variables.

#![allow(clippy::needless_range_loop)]

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("linear program infeasible")]
    Infeasible,
    #[error("linear program unbounded")]
    Unbounded,
    #[error("simplex iteration limit reached")]
    IterationLimit,
    #[error("basis matrix became singular")]
    Singular,
}

/// Feasibility tolerance for phase one and reduced-cost tolerance.
pub const FEAS_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-11;
const PIVOT_TOL: f64 = 1e-11;
const REINVERT_EVERY: usize = 25;
const MAX_PIVOTS: usize = 50_000;

/// Standard-form program; `columns[j]` is the j-th column of `A`.
#[derive(Debug, Clone)]
pub struct StandardLp {
    pub columns: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StandardSolution {
    pub x: Vec<f64>,
    /// Simplex multipliers of the equality rows, `c_B B⁻¹`.
    pub duals: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
}

struct Tableau<'a> {
    lp: &'a StandardLp,
    sign: Vec<f64>,
    m: usize,
    n: usize,
    basis: Vec<usize>,
    binv: Vec<f64>,
    xb: Vec<f64>,
    bprime: Vec<f64>,
    pivots: usize,
    since_reinvert: usize,
}

impl<'a> Tableau<'a> {
    fn new(lp: &'a StandardLp) -> Self {
        let m = lp.b.len();
        let n = lp.columns.len();
        let sign: Vec<f64> = lp.b.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect();
        let bprime: Vec<f64> = lp.b.iter().zip(&sign).map(|(v, s)| v * s).collect();
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            binv[i * m + i] = 1.0;
        }
        Self {
            lp,
            m,
            n,
            basis: (n..n + m).collect(),
            binv,
            xb: bprime.clone(),
            bprime,
            sign,
            pivots: 0,
            since_reinvert: 0,
        }
    }

    fn col_entry(&self, j: usize, i: usize) -> f64 {
        if j < self.n {
            self.lp.columns[j][i] * self.sign[i]
        } else if j - self.n == i {
            1.0
        } else {
            0.0
        }
    }

    fn ftran(&self, j: usize) -> Vec<f64> {
        let m = self.m;
        let mut u = vec![0.0; m];
        if j >= self.n {
            let k = j - self.n;
            for i in 0..m {
                u[i] = self.binv[i * m + k];
            }
            return u;
        }
        let col = &self.lp.columns[j];
        for i in 0..m {
            let row = &self.binv[i * m..(i + 1) * m];
            let mut s = 0.0;
            for k in 0..m {
                s += row[k] * col[k] * self.sign[k];
            }
            u[i] = s;
        }
        u
    }

    fn multipliers(&self, cost: &dyn Fn(usize) -> f64) -> Vec<f64> {
        let m = self.m;
        let mut pi = vec![0.0; m];
        for i in 0..m {
            let cb = cost(self.basis[i]);
            if cb != 0.0 {
                for k in 0..m {
                    pi[k] += cb * self.binv[i * m + k];
                }
            }
        }
        pi
    }

    fn reduced_cost(&self, j: usize, pi: &[f64], cost: &dyn Fn(usize) -> f64) -> f64 {
        let mut d = cost(j);
        if j < self.n {
            let col = &self.lp.columns[j];
            for k in 0..self.m {
                d -= pi[k] * col[k] * self.sign[k];
            }
        } else {
            d -= pi[j - self.n];
        }
        d
    }

    fn pivot(&mut self, r: usize, j: usize, u: &[f64]) -> Result<(), LpError> {
        let m = self.m;
        let ur = u[r];
        let theta = self.xb[r] / ur;
        for i in 0..m {
            if i != r {
                self.xb[i] -= theta * u[i];
                if self.xb[i] < 0.0 && self.xb[i] > -FEAS_TOL {
                    self.xb[i] = 0.0;
                }
            }
        }
        self.xb[r] = theta.max(0.0);
        for k in 0..m {
            self.binv[r * m + k] /= ur;
        }
        for i in 0..m {
            if i != r && u[i] != 0.0 {
                let f = u[i];
                for k in 0..m {
                    self.binv[i * m + k] -= f * self.binv[r * m + k];
                }
            }
        }
        self.basis[r] = j;
        self.pivots += 1;
        self.since_reinvert += 1;
        if self.since_reinvert >= REINVERT_EVERY {
            self.reinvert()?;
        }
        Ok(())
    }

    fn reinvert(&mut self) -> Result<(), LpError> {
        let m = self.m;
        let bmat = DMatrix::from_fn(m, m, |i, k| self.col_entry(self.basis[k], i));
        let inv = bmat.try_inverse().ok_or(LpError::Singular)?;
        for i in 0..m {
            for k in 0..m {
                self.binv[i * m + k] = inv[(i, k)];
            }
        }
        for i in 0..m {
            let mut s = 0.0;
            for k in 0..m {
                s += self.binv[i * m + k] * self.bprime[k];
            }
            self.xb[i] = if s < 0.0 && s > -FEAS_TOL { 0.0 } else { s };
        }
        self.since_reinvert = 0;
        Ok(())
    }

    /// Runs simplex iterations with Bland's rule until optimal.
    fn run(&mut self, cost: &dyn Fn(usize) -> f64, allow_artificial: bool) -> Result<(), LpError> {
        let total = if allow_artificial { self.n + self.m } else { self.n };
        loop {
            if self.pivots > MAX_PIVOTS {
                return Err(LpError::IterationLimit);
            }
            let pi = self.multipliers(cost);
            let mut entering = None;
            for j in 0..total {
                if self.basis.contains(&j) {
                    continue;
                }
                if self.reduced_cost(j, &pi, cost) < -COST_TOL {
                    entering = Some(j);
                    break;
                }
            }
            let Some(j) = entering else { return Ok(()) };
            let u = self.ftran(j);
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                if u[i] > PIVOT_TOL {
                    let ratio = self.xb[i] / u[i];
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((r, best)) => {
                            let tie = (ratio - best).abs() <= 1e-12 * (1.0 + best.abs());
                            if ratio < best && !tie || tie && self.basis[i] < self.basis[r] {
                                Some((i, ratio))
                            } else {
                                Some((r, best))
                            }
                        }
                    };
                }
            }
            let Some((r, _)) = leave else {
                return Err(LpError::Unbounded);
            };
            self.pivot(r, j, &u)?;
        }
    }

    fn drive_out_artificials(&mut self) -> Result<(), LpError> {
        for r in 0..self.m {
            if self.basis[r] < self.n {
                continue;
            }
            let m = self.m;
            let mut chosen = None;
            for j in 0..self.n {
                if self.basis.contains(&j) {
                    continue;
                }
                let col = &self.lp.columns[j];
                let mut v = 0.0;
                for k in 0..m {
                    v += self.binv[r * m + k] * col[k] * self.sign[k];
                }
                if v.abs() > 1e-9 {
                    chosen = Some(j);
                    break;
                }
            }
            if let Some(j) = chosen {
                let u = self.ftran(j);
                self.pivot(r, j, &u)?;
            }
        }
        Ok(())
    }
}

/// Solves `min c·x  s.t.  A x = b, x ≥ 0`.
pub fn solve_standard(lp: &StandardLp) -> Result<StandardSolution, LpError> {
    let mut tab = Tableau::new(lp);
    let n = tab.n;
    let phase1 = |j: usize| if j >= n { 1.0 } else { 0.0 };
    tab.run(&phase1, true)?;
    let residual: f64 = tab
        .basis
        .iter()
        .zip(&tab.xb)
        .filter(|(&j, _)| j >= n)
        .map(|(_, &v)| v)
        .sum();
    let scale = 1.0 + lp.b.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if residual > FEAS_TOL * scale {
        return Err(LpError::Infeasible);
    }
    tab.drive_out_artificials()?;
    let phase2 = |j: usize| if j >= n { 0.0 } else { lp.c[j] };
    tab.run(&phase2, false)?;
    tab.reinvert()?;
    let mut x = vec![0.0; n];
    for (i, &j) in tab.basis.iter().enumerate() {
        if j < n {
            x[j] = tab.xb[i].max(0.0);
        }
    }
    let pi = tab.multipliers(&phase2);
    let duals = pi.iter().zip(&tab.sign).map(|(p, s)| p * s).collect();
    let objective = x.iter().zip(&lp.c).map(|(a, b)| a * b).sum();
    Ok(StandardSolution {
        x,
        duals,
        objective,
        pivots: tab.pivots,
    })
}

#[derive(Debug, Clone)]
pub struct FreeSolution {
    pub y: Vec<f64>,
    pub value: f64,
    pub pivots: usize,
}

/// `max obj·y  s.t.  rows[j]·y ≤ rhs[j]` over free `y`.
///
/// Rows are normalized to unit length before the dual is formed. A zero row
/// with negative right-hand side makes the program infeasible.
pub fn maximize_free(obj: &[f64], rows: &[Vec<f64>], rhs: &[f64]) -> Result<FreeSolution, LpError> {
    let nvar = obj.len();
    let mut columns = Vec::with_capacity(rows.len());
    let mut costs = Vec::with_capacity(rows.len());
    for (row, &r) in rows.iter().zip(rhs) {
        debug_assert_eq!(row.len(), nvar);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            if r < -FEAS_TOL {
                return Err(LpError::Infeasible);
            }
            continue;
        }
        columns.push(row.iter().map(|v| v / norm).collect::<Vec<_>>());
        costs.push(r / norm);
    }
    let lp = StandardLp {
        columns,
        b: obj.to_vec(),
        c: costs,
    };
    // dual infeasible ⇔ primal unbounded (primal feasibility is the caller's
    // contract); dual unbounded ⇔ primal infeasible
    let sol = solve_standard(&lp).map_err(|e| match e {
        LpError::Infeasible => LpError::Unbounded,
        LpError::Unbounded => LpError::Infeasible,
        other => other,
    })?;
    let value = sol.objective;
    Ok(FreeSolution {
        y: sol.duals,
        value,
        pivots: sol.pivots,
    })
}
