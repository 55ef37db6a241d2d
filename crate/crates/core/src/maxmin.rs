//! One-period robust problem `sup_{h ∈ K_x} min_j Σ_i P_j(i) V_i(x + h·v_i)`.
//!
//! The objective `φ` is concave, so each evaluation yields a supergradient
//! cut and the cut model bounds `φ` from above. All search happens in `L`
//! coordinates. With `dim L = 1` the solver bisects on the sign of the
//! supergradient; otherwise it runs Kelley's method with a box trust region.
//! Either way the returned gap is certified by the cuts.

use thiserror::Error;

use crate::lp::{maximize_free, LpError};
use crate::model::{MeasureSet, NodeId};
use crate::na::{dot, SupportData};
use crate::plf::ConcavePLF;
use crate::utility::{is_floor, UtilitySpec, VALUE_FLOOR};

/// Continuation value at a child.
#[derive(Debug, Clone, Copy)]
pub enum Continuation<'a> {
    Terminal { utility: &'a UtilitySpec, endowment: f64 },
    Plf(&'a ConcavePLF),
}

impl Continuation<'_> {
    pub fn value(&self, w: f64) -> f64 {
        match self {
            Continuation::Terminal { utility, endowment } => utility.evaluate(w, *endowment),
            Continuation::Plf(f) => f.eval(w),
        }
    }

    pub fn left_slope(&self, w: f64) -> f64 {
        match self {
            Continuation::Terminal { utility, endowment } => utility.left_slope(w + endowment),
            Continuation::Plf(f) => f.left_slope(w),
        }
    }

    /// Wealth below which the value is `−∞`.
    pub fn domain_floor(&self) -> f64 {
        match self {
            Continuation::Terminal { endowment, .. } => -endowment,
            Continuation::Plf(f) => f.domain_floor(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OnePeriodProblem<'a> {
    pub support: &'a SupportData,
    pub capital: f64,
    /// One per non-polar child, in support order.
    pub continuations: Vec<Continuation<'a>>,
    /// Extreme measures restricted to the non-polar children.
    pub probs: Vec<Vec<f64>>,
    coords: Vec<Vec<f64>>,
}

impl<'a> OnePeriodProblem<'a> {
    pub fn new(
        support: &'a SupportData,
        capital: f64,
        continuations: Vec<Continuation<'a>>,
        measures: &MeasureSet,
    ) -> Self {
        assert_eq!(continuations.len(), support.support_vectors.len());
        let probs = measures
            .extremes
            .iter()
            .map(|p| support.positions.iter().map(|&i| p[i]).collect())
            .collect();
        Self {
            support,
            capital,
            continuations,
            probs,
            coords: support.coord_vectors(),
        }
    }

    pub fn with_capital(&self, x: f64) -> Self {
        let mut p = self.clone();
        p.capital = x;
        p
    }

    fn node(&self) -> NodeId {
        self.support.node
    }

    fn phi_c(&self, c: &[f64]) -> (f64, usize) {
        let wealth: Vec<f64> = self.coords.iter().map(|w| self.capital + dot(c, w)).collect();
        self.phi_wealth(&wealth)
    }

    fn phi_wealth(&self, wealth: &[f64]) -> (f64, usize) {
        let vals: Vec<f64> = self
            .continuations
            .iter()
            .zip(wealth)
            .map(|(v, &w)| v.value(w))
            .collect();
        let mut best = (f64::INFINITY, 0);
        for (j, p) in self.probs.iter().enumerate() {
            let mut s = 0.0;
            let mut floor = false;
            for (&pi, &vi) in p.iter().zip(&vals) {
                if pi > 0.0 {
                    if is_floor(vi) {
                        floor = true;
                        break;
                    }
                    s += pi * vi;
                }
            }
            let s = if floor { VALUE_FLOOR } else { s.max(VALUE_FLOOR) };
            if s < best.0 {
                best = (s, j);
            }
        }
        best
    }

    /// Supergradient of measure `j`'s expectation, in the basis given by
    /// `vectors` (coordinates or full holdings).
    fn grad(&self, wealth: &[f64], j: usize, vectors: &[Vec<f64>]) -> Vec<f64> {
        let dim = vectors.first().map_or(0, Vec::len);
        let mut g = vec![0.0; dim];
        for ((&p, v), (&w, vec)) in self.probs[j]
            .iter()
            .zip(&self.continuations)
            .zip(wealth.iter().zip(vectors))
        {
            if p == 0.0 {
                continue;
            }
            let s = p * v.left_slope(w);
            for (gk, &vk) in g.iter_mut().zip(vec) {
                if vk != 0.0 {
                    *gk += s * vk;
                }
            }
        }
        g
    }

    fn eval_c(&self, c: &[f64]) -> (f64, usize, Vec<f64>) {
        let wealth: Vec<f64> = self.coords.iter().map(|w| self.capital + dot(c, w)).collect();
        let (v, j) = self.phi_wealth(&wealth);
        let g = self.grad(&wealth, j, &self.coords);
        (v, j, g)
    }

    /// `(x − floor_i, margin_i)` for every child constraint.
    fn slacks(&self) -> Vec<(f64, f64)> {
        self.continuations
            .iter()
            .map(|v| {
                let r = self.capital - v.domain_floor();
                (r, 1e-12 * r.max(0.0))
            })
            .collect()
    }

    /// The (slightly shrunk) domain as rows `A c ≤ b` in coordinates.
    fn domain_rows(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let rows = self.coords.iter().map(|w| w.iter().map(|v| -v).collect()).collect();
        let rhs = self.slacks().iter().map(|(r, d)| r - d).collect();
        (rows, rhs)
    }
}

/// `φ(h)` and the lowest-index worst extreme.
pub fn phi_eval(prob: &OnePeriodProblem, h: &[f64]) -> (f64, usize) {
    let wealth: Vec<f64> = prob
        .support
        .support_vectors
        .iter()
        .map(|v| prob.capital + dot(h, v))
        .collect();
    prob.phi_wealth(&wealth)
}

/// `φ(h)`, worst extreme and a supergradient in holdings space.
pub fn phi_supergradient(prob: &OnePeriodProblem, h: &[f64]) -> (f64, usize, Vec<f64>) {
    let vs = &prob.support.support_vectors;
    let wealth: Vec<f64> = vs.iter().map(|v| prob.capital + dot(h, v)).collect();
    let (val, j) = prob.phi_wealth(&wealth);
    (val, j, prob.grad(&wealth, j, vs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxminSolution {
    pub h_opt: Vec<f64>,
    pub value: f64,
    pub gap: f64,
    pub active_measure: usize,
    pub iterations: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaxminError {
    #[error("node {0}: admissible set unbounded (NA fails)")]
    Unbounded(NodeId),
    #[error("node {node}: gap {:e} above tolerance after {} iterations", best.gap, best.iterations)]
    Stalled { node: NodeId, best: Box<MaxminSolution> },
    #[error("node {node}: inner LP failed: {source}")]
    Lp { node: NodeId, source: LpError },
    #[error("lattice of {0} points exceeds the cap")]
    GridTooLarge(u128),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

pub fn solve_one_period(prob: &OnePeriodProblem, opts: &SolverOptions) -> Result<MaxminSolution, MaxminError> {
    solve_one_period_from(prob, opts, None)
}

/// As [`solve_one_period`], starting from holdings `hint` when admissible.
pub fn solve_one_period_from(
    prob: &OnePeriodProblem,
    opts: &SolverOptions,
    hint: Option<&[f64]>,
) -> Result<MaxminSolution, MaxminError> {
    let k = prob.support.dim_l();
    let finish = |c: &[f64], value: f64, gap: f64, iterations: usize| {
        let (_, j) = prob.phi_c(c);
        MaxminSolution {
            h_opt: prob.support.from_coords(c),
            value,
            gap: gap.max(0.0),
            active_measure: j,
            iterations,
        }
    };
    if k == 0 {
        let (v, _) = prob.phi_c(&[]);
        return Ok(finish(&[], v, 0.0, 0));
    }
    let node = prob.node();
    let lp_err = |source| MaxminError::Lp { node, source };
    let (rows, rhs) = prob.domain_rows();
    let mut bounds = Vec::with_capacity(k);
    for j in 0..k {
        let mut obj = vec![0.0; k];
        let mut side = [0.0; 2];
        for (s, sgn) in side.iter_mut().zip([1.0, -1.0]) {
            obj[j] = sgn;
            *s = match maximize_free(&obj, &rows, &rhs) {
                Ok(sol) => sgn * sol.value,
                Err(LpError::Infeasible) => {
                    let zero = vec![0.0; k];
                    return Ok(finish(&zero, VALUE_FLOOR, 0.0, 0));
                }
                Err(LpError::Unbounded) => return Err(MaxminError::Unbounded(node)),
                Err(e) => return Err(lp_err(e)),
            };
        }
        bounds.push((side[1], side[0].max(side[1])));
    }
    let scale = 1.0 + prob.capital.abs();
    let width = bounds.iter().map(|(a, b)| b - a).fold(0.0, f64::max);
    if width <= 1e-14 * scale {
        let c: Vec<f64> = bounds.iter().map(|(a, b)| 0.5 * (a + b)).collect();
        let (v, _) = prob.phi_c(&c);
        return Ok(finish(&c, v, 0.0, 0));
    }
    if k == 1 {
        return Ok(bisect(prob, bounds[0], opts, &finish));
    }
    let feasible = |c: &[f64]| rows.iter().zip(&rhs).all(|(r, &b)| dot(r, c) <= b);
    let start = hint
        .map(|h| prob.support.to_coords(h))
        .filter(|c| feasible(c))
        .or_else(|| Some(vec![0.0; k]).filter(|c| feasible(c)))
        .map(Ok)
        .unwrap_or_else(|| interior_point(&rows, &rhs).map_err(lp_err))?;
    kelley(prob, &rows, &rhs, &bounds, start, opts, &finish)
}

fn interior_point(rows: &[Vec<f64>], rhs: &[f64]) -> Result<Vec<f64>, LpError> {
    let k = rows[0].len();
    let mut ext: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let mut e = r.clone();
            e.push(dot(r, r).sqrt());
            e
        })
        .collect();
    let mut cap = vec![0.0; k + 1];
    cap[k] = 1.0;
    ext.push(cap);
    let mut b = rhs.to_vec();
    b.push(1.0);
    let mut obj = vec![0.0; k + 1];
    obj[k] = 1.0;
    let sol = maximize_free(&obj, &ext, &b)?;
    Ok(sol.y[..k].to_vec())
}

/// Relative resolution of the upper bound from the cut LP.
pub const CERT_FLOOR: f64 = 1e-11;

type Finish<'f> = dyn Fn(&[f64], f64, f64, usize) -> MaxminSolution + 'f;

fn bisect(prob: &OnePeriodProblem, (lo, hi): (f64, f64), opts: &SolverOptions, finish: &Finish) -> MaxminSolution {
    let eval = |c: f64| {
        let (v, _, g) = prob.eval_c(&[c]);
        (v, g[0])
    };
    let (fa, ga) = eval(lo);
    if ga <= 0.0 {
        return finish(&[lo], fa, 0.0, 1);
    }
    let (fb, gb) = eval(hi);
    if gb >= 0.0 {
        return finish(&[hi], fb, 0.0, 2);
    }
    let (mut a, mut fa, mut ga) = (lo, fa, ga);
    let (mut b, mut fb, mut gb) = (hi, fb, gb);
    let (mut best, mut fbest) = if fa >= fb { (a, fa) } else { (b, fb) };
    let mut it = 2;
    loop {
        // the two bracket tangents bound φ on [a, b]
        let ub = if ga.is_finite() && gb.is_finite() {
            let c = ((fb - fa + ga * a - gb * b) / (ga - gb)).clamp(a, b);
            (fa + ga * (c - a)).min(fb + gb * (c - b))
        } else if gb.is_finite() {
            fb + gb * (a - b)
        } else if ga.is_finite() {
            fa + ga * (b - a)
        } else {
            f64::INFINITY
        };
        let gap = ub - fbest;
        if gap <= opts.tol || b - a <= f64::EPSILON * (a.abs() + b.abs()) || it >= opts.max_iter {
            return finish(&[best], fbest, if gap.is_finite() { gap } else { 0.0 }, it);
        }
        let m = 0.5 * (a + b);
        let (fm, gm) = eval(m);
        it += 1;
        if fm > fbest {
            best = m;
            fbest = fm;
        }
        if gm > 0.0 {
            (a, fa, ga) = (m, fm, gm);
        } else if gm < 0.0 {
            (b, fb, gb) = (m, fm, gm);
        } else {
            return finish(&[m], fm, 0.0, it);
        }
    }
}

struct Cut {
    at: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
}

/// `max_{c, z} z` subject to the cuts, the domain and an optional box.
fn master(cuts: &[Cut], rows: &[Vec<f64>], rhs: &[f64], bx: Option<(&[f64], f64)>) -> Result<(Vec<f64>, f64), LpError> {
    let k = rows[0].len();
    let mut a = Vec::with_capacity(cuts.len() + rows.len() + 2 * k);
    let mut b = Vec::with_capacity(a.capacity());
    for cut in cuts {
        let mut r: Vec<f64> = cut.grad.iter().map(|g| -g).collect();
        r.push(1.0);
        a.push(r);
        b.push(cut.value - dot(&cut.grad, &cut.at));
    }
    for (r, &q) in rows.iter().zip(rhs) {
        let mut e = r.clone();
        e.push(0.0);
        a.push(e);
        b.push(q);
    }
    if let Some((center, rho)) = bx {
        for j in 0..k {
            for sgn in [1.0, -1.0] {
                let mut e = vec![0.0; k + 1];
                e[j] = sgn;
                a.push(e);
                b.push(sgn * center[j] + rho);
            }
        }
    }
    let mut obj = vec![0.0; k + 1];
    obj[k] = 1.0;
    let sol = maximize_free(&obj, &a, &b)?;
    Ok((sol.y[..k].to_vec(), sol.value))
}

fn kelley(
    prob: &OnePeriodProblem,
    rows: &[Vec<f64>],
    rhs: &[f64],
    bounds: &[(f64, f64)],
    start: Vec<f64>,
    opts: &SolverOptions,
    finish: &Finish,
) -> Result<MaxminSolution, MaxminError> {
    let node = prob.node();
    let lp_err = |source| MaxminError::Lp { node, source };
    // work in y = c / width with values offset by φ(start), so the cut LP
    // sees O(1) numbers even at tiny capital
    let width = bounds.iter().map(|(a, b)| b - a).fold(0.0, f64::max);
    let rows_y: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * width).collect()).collect();
    let to_c = |y: &[f64]| -> Vec<f64> { y.iter().map(|v| v * width).collect() };
    let y0: Vec<f64> = start.iter().map(|v| v / width).collect();
    let (v0, _, _) = prob.eval_c(&start);
    let eval = |y: &[f64]| {
        let (v, _, g) = prob.eval_c(&to_c(y));
        (v, v - v0, g.iter().map(|x| x * width).collect::<Vec<f64>>())
    };
    let mut rho = 0.25;
    let rho_min = 1e-15;
    let (_, z0, g0) = eval(&y0);
    let mut center = y0.clone();
    let mut fcenter = z0;
    let mut best = (y0.clone(), v0);
    let mut cuts = vec![Cut {
        at: y0,
        value: z0,
        grad: g0,
    }];
    let mut gap = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let (top, ub) = master(&cuts, &rows_y, rhs, None).map_err(lp_err)?;
        gap = ub + v0 - best.1;
        // below this the cut LP cannot certify anything finer
        let floor = CERT_FLOOR * (1.0 + best.1.abs());
        if gap <= opts.tol || (gap <= floor && rho <= 1e-9) {
            return Ok(finish(&to_c(&best.0), best.1, gap, it));
        }
        // a cut at the model's maximizer, pulled toward the best point when
        // that lands on the boundary, keeps the bound moving
        for t in [1.0, 1.0 - 1e-6, 1.0 - 1e-3] {
            let p: Vec<f64> = best.0.iter().zip(&top).map(|(b, y)| b + t * (y - b)).collect();
            let (v, z, g) = eval(&p);
            if is_floor(v) || !g.iter().all(|x| x.is_finite()) {
                continue;
            }
            if v > best.1 {
                best = (p.clone(), v);
            }
            cuts.push(Cut {
                at: p,
                value: z,
                grad: g,
            });
            break;
        }
        let (cand, model) = master(&cuts, &rows_y, rhs, Some((&center, rho))).map_err(lp_err)?;
        let predicted = model - fcenter;
        let (v, z, g) = eval(&cand);
        if is_floor(v) {
            rho = (0.5 * rho).max(rho_min);
            continue;
        }
        if v > best.1 {
            best = (cand.clone(), v);
        }
        if predicted > 0.0 && z - fcenter >= 0.1 * predicted {
            let step = cand.iter().zip(&center).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if step >= 0.99 * rho {
                rho = (2.0 * rho).min(1.0);
            }
            center = cand.clone();
            fcenter = z;
        } else {
            rho = (0.5 * rho).max(rho_min);
        }
        cuts.push(Cut {
            at: cand,
            value: z,
            grad: g,
        });
    }
    Err(MaxminError::Stalled {
        node,
        best: Box::new(finish(&to_c(&best.0), best.1, gap, opts.max_iter)),
    })
}

/// Best `φ` over the lattice `step·ℤᵈ` inside the admissible set, with its
/// maximizer. When `1/step` is an integer `n` the lattice points are `i/n`,
/// so grids `1/n` and `1/(nm)` are exactly nested.
pub fn rational_grid_value(prob: &OnePeriodProblem, step: f64) -> Result<(f64, Vec<f64>), MaxminError> {
    rational_grid_value_capped(prob, step, 200_000_000)
}

/// As [`rational_grid_value`] with an explicit cap on the lattice size.
pub fn rational_grid_value_capped(
    prob: &OnePeriodProblem,
    step: f64,
    cap: u128,
) -> Result<(f64, Vec<f64>), MaxminError> {
    let d = prob.support.asset_count();
    let k = prob.support.dim_l();
    let node = prob.node();
    if k == 0 {
        let h = vec![0.0; d];
        return Ok((phi_eval(prob, &h).0, h));
    }
    let slacks = prob.slacks();
    let rows: Vec<Vec<f64>> = prob.coords.iter().map(|w| w.iter().map(|v| -v).collect()).collect();
    let rhs: Vec<f64> = slacks.iter().map(|(r, _)| *r).collect();
    let inv = 1.0 / step;
    let n = inv.round();
    let rational = (inv - n).abs() <= 1e-9 * n && n >= 1.0;
    let point = |i: i64| if rational { i as f64 / n } else { i as f64 * step };
    let mut ranges = Vec::with_capacity(d);
    for a in 0..d {
        // extent of holdings coordinate a over K_x
        let obj: Vec<f64> = prob.support.basis_l.iter().map(|b| b[a]).collect();
        let mut ext = [0.0; 2];
        for (s, sgn) in ext.iter_mut().zip([1.0, -1.0]) {
            let o: Vec<f64> = obj.iter().map(|v| sgn * v).collect();
            *s = match maximize_free(&o, &rows, &rhs) {
                Ok(sol) => sgn * sol.value,
                Err(LpError::Infeasible) => return Ok((VALUE_FLOOR, vec![0.0; d])),
                Err(LpError::Unbounded) => return Err(MaxminError::Unbounded(node)),
                Err(source) => return Err(MaxminError::Lp { node, source }),
            };
        }
        let (lo, hi) = (ext[1] - step, ext[0] + step);
        ranges.push(((lo / step).ceil() as i64, (hi / step).floor() as i64));
    }
    let total: u128 = ranges.iter().map(|(a, b)| (b - a + 1).max(0) as u128).product();
    if total > cap {
        return Err(MaxminError::GridTooLarge(total));
    }
    let mut idx: Vec<i64> = ranges.iter().map(|r| r.0).collect();
    let mut best = (f64::NEG_INFINITY, vec![0.0; d]);
    let mut h = vec![0.0; d];
    loop {
        for (hv, &i) in h.iter_mut().zip(&idx) {
            *hv = point(i);
        }
        let (v, _) = phi_eval(prob, &h);
        if v > best.0 {
            best = (v, h.clone());
        }
        let mut a = 0;
        loop {
            if a == d {
                return Ok(best);
            }
            idx[a] += 1;
            if idx[a] <= ranges[a].1 {
                break;
            }
            idx[a] = ranges[a].0;
            a += 1;
        }
    }
}

/// A posteriori bound on `φ(h) − (lattice sup)` from the lattice corners
/// around `h`: concavity gives `φ(h) ≤ φ(c) + g_c·(h − c)` at every corner
/// `c` with finite value.
pub fn grid_resolution_bound(prob: &OnePeriodProblem, h: &[f64], step: f64) -> f64 {
    let d = h.len();
    let inv = 1.0 / step;
    let n = inv.round();
    let rational = (inv - n).abs() <= 1e-9 * n && n >= 1.0;
    let point = |i: i64| if rational { i as f64 / n } else { i as f64 * step };
    let base: Vec<i64> = h.iter().map(|v| (v / step).floor() as i64).collect();
    let mut best = f64::INFINITY;
    for mask in 0..(3usize.pow(d as u32)) {
        let mut m = mask;
        let c: Vec<f64> = base
            .iter()
            .map(|&b| {
                let off = (m % 3) as i64 - 1;
                m /= 3;
                point(b + off)
            })
            .collect();
        let (vc, _, g) = phi_supergradient(prob, &c);
        if is_floor(vc) {
            continue;
        }
        let diff: Vec<f64> = h.iter().zip(&c).map(|(a, b)| a - b).collect();
        let bound = dot(&g, &diff);
        if bound.is_finite() {
            best = best.min(bound.max(0.0));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NodeId;
    use crate::na::SupportData;

    fn setup(vs: Vec<Vec<f64>>, extremes: Vec<Vec<f64>>) -> (SupportData, MeasureSet) {
        let ids: Vec<NodeId> = (1..=vs.len()).map(NodeId).collect();
        let ms = MeasureSet::new(extremes);
        (SupportData::from_increments(NodeId(0), &ids, &vs, &ms), ms)
    }

    fn terminal(u: &UtilitySpec, n: usize) -> Vec<Continuation<'_>> {
        vec![
            Continuation::Terminal {
                utility: u,
                endowment: 0.0
            };
            n
        ]
    }

    #[test]
    fn phi_examples() {
        let u = UtilitySpec::log();
        let (s, ms) = setup(vec![vec![-1.0], vec![1.0]], vec![vec![0.5, 0.5], vec![0.6, 0.4]]);
        let p = OnePeriodProblem::new(&s, 1.0, terminal(&u, 2), &ms);
        assert_eq!(phi_eval(&p, &[0.0]), (0.0, 0));
        let (v, j) = phi_eval(&p, &[0.5]);
        let expect = 0.6 * 0.5f64.ln() + 0.4 * 1.5f64.ln();
        assert!((v - expect).abs() < 1e-15 && j == 1);
        assert!((v + 0.2537).abs() < 1e-4);
        assert_eq!(phi_eval(&p, &[2.0]).0, VALUE_FLOOR);
    }

    #[test]
    fn symmetric_coin_keeps_zero() {
        let u = UtilitySpec::log();
        let (s, ms) = setup(vec![vec![-1.0], vec![1.0]], vec![vec![0.5, 0.5]]);
        let p = OnePeriodProblem::new(&s, 1.0, terminal(&u, 2), &ms);
        let sol = solve_one_period(&p, &SolverOptions::default()).unwrap();
        assert!(sol.h_opt[0].abs() < 1e-6 && sol.value.abs() < 1e-8 && sol.gap <= 1e-8);
    }

    #[test]
    fn ambiguous_coin_matches_fine_grid() {
        let u = UtilitySpec::log();
        let (s, ms) = setup(vec![vec![-1.0], vec![1.0]], vec![vec![0.5, 0.5], vec![0.6, 0.4]]);
        let p = OnePeriodProblem::new(&s, 1.0, terminal(&u, 2), &ms);
        let sol = solve_one_period(&p, &SolverOptions::default()).unwrap();
        assert!(sol.h_opt[0].abs() < 1e-4);
        assert!(sol.value.abs() <= 1e-8);
        let mut grid = f64::NEG_INFINITY;
        for i in -9999..=9999 {
            grid = grid.max(phi_eval(&p, &[i as f64 * 1e-4]).0);
        }
        assert!((grid - sol.value).abs() < 1e-8);
        let (g, _) = rational_grid_value(&p, 0.01).unwrap();
        assert!((g - sol.value).abs() < 1e-3);
    }

    #[test]
    fn two_asset_closed_form() {
        let u = UtilitySpec::power(0.5).unwrap();
        let vs = vec![vec![1.0, -1.0], vec![-1.0, -1.0], vec![1.0, 2.0], vec![-1.0, 2.0]];
        let (s, ms) = setup(vs, vec![vec![0.25; 4]]);
        let p = OnePeriodProblem::new(&s, 1.0, terminal(&u, 4), &ms);
        let opts = SolverOptions {
            tol: 1e-14,
            max_iter: 10_000,
        };
        let sol = solve_one_period(&p, &opts).unwrap();
        let exact = 0.5 * 0.5f64.sqrt() + 0.5 * 2.0f64.sqrt();
        assert!((sol.value - exact).abs() < 1e-10, "{}", sol.value);
        assert!(
            sol.h_opt[0].abs() < 1e-6 && (sol.h_opt[1] - 0.5).abs() < 1e-6,
            "{:?}",
            sol.h_opt
        );
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        // √ is ½-homogeneous and K_x = x·K_1, so u(x) = √x·u(1); small capital
        // pushes the optimum against steep boundary slopes
        #[test]
        fn sqrt_scales_at_small_capital(
            th in 0.0f64..std::f64::consts::TAU,
            a in 1.6f64..3.0,
            b in 1.6f64..3.0,
            x in 1e-4f64..1e-2,
            p in 0.2f64..0.8,
        ) {
            let angles = [th, th + a, th + a + b];
            let vs: Vec<Vec<f64>> = angles.iter().map(|t| vec![t.cos(), t.sin()]).collect();
            let u = UtilitySpec::power(0.5).unwrap();
            let (s, ms) = setup(vs, vec![vec![p, 0.5 * (1.0 - p), 0.5 * (1.0 - p)], vec![1.0 / 3.0; 3]]);
            let opts = SolverOptions::default();
            let one = solve_one_period(&OnePeriodProblem::new(&s, 1.0, terminal(&u, 3), &ms), &opts).unwrap();
            let small = solve_one_period(&OnePeriodProblem::new(&s, x, terminal(&u, 3), &ms), &opts).unwrap();
            proptest::prop_assert!(small.gap <= opts.tol);
            proptest::prop_assert!((small.value - x.sqrt() * one.value).abs() <= 2.0 * opts.tol);
        }
    }

    #[test]
    fn nested_grids_increase() {
        let u = UtilitySpec::power(0.5).unwrap();
        let (s, ms) = setup(
            vec![vec![-1.0, -0.5], vec![2.0, -1.0], vec![0.3, 1.0]],
            vec![vec![0.3, 0.3, 0.4], vec![0.5, 0.2, 0.3]],
        );
        let p = OnePeriodProblem::new(&s, 1.0, terminal(&u, 3), &ms);
        let a = rational_grid_value(&p, 0.1).unwrap().0;
        let b = rational_grid_value(&p, 0.01).unwrap().0;
        let c = rational_grid_value(&p, 0.001).unwrap().0;
        assert!(a <= b && b <= c);
        let sol = solve_one_period(&p, &SolverOptions::default()).unwrap();
        assert!(c <= sol.value + 1e-8 + 1e-12);
        let bound = grid_resolution_bound(&p, &sol.h_opt, 0.001);
        assert!(sol.value - c <= bound + 1e-12);
    }

    #[test]
    fn grid_through_optimum_is_exact() {
        let u = UtilitySpec::log();
        let (s, ms) = setup(vec![vec![-1.0], vec![1.0]], vec![vec![0.5, 0.5]]);
        let p = OnePeriodProblem::new(&s, 1.0, terminal(&u, 2), &ms);
        let (g, h) = rational_grid_value(&p, 0.25).unwrap();
        assert_eq!(h, vec![0.0]);
        assert!(g.abs() < 1e-9);
    }

    #[test]
    fn unbounded_domain_is_an_error() {
        let u = UtilitySpec::log();
        let (s, ms) = setup(vec![vec![1.0], vec![2.0]], vec![vec![0.5, 0.5]]);
        let p = OnePeriodProblem::new(&s, 1.0, terminal(&u, 2), &ms);
        assert_eq!(
            solve_one_period(&p, &SolverOptions::default()),
            Err(MaxminError::Unbounded(NodeId(0)))
        );
    }

    #[test]
    fn zero_capital_without_endowment() {
        let u = UtilitySpec::power(0.5).unwrap();
        let (s, ms) = setup(
            vec![vec![-1.0, 0.0], vec![1.0, 1.0], vec![0.0, -1.0]],
            vec![vec![0.2, 0.5, 0.3]],
        );
        let p = OnePeriodProblem::new(&s, 0.0, terminal(&u, 3), &ms);
        let sol = solve_one_period(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.value, 0.0);
        assert!(sol.h_opt.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn phi_is_concave_on_samples() {
        let u = UtilitySpec::log();
        let (s, ms) = setup(
            vec![vec![-1.0, -0.5], vec![2.0, -1.0], vec![0.3, 1.0]],
            vec![vec![0.3, 0.3, 0.4], vec![0.5, 0.2, 0.3]],
        );
        let p = OnePeriodProblem::new(&s, 1.0, terminal(&u, 3), &ms);
        for i in 0..50 {
            let a = [0.01 * i as f64 - 0.2, 0.1];
            let b = [0.1, -0.005 * i as f64];
            let m = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
            let (fa, fb, fm) = (phi_eval(&p, &a).0, phi_eval(&p, &b).0, phi_eval(&p, &m).0);
            if !is_floor(fa) && !is_floor(fb) {
                assert!(fm >= 0.5 * (fa + fb) - 1e-9);
            }
        }
    }
}
