//! Concave piecewise-linear functions of wealth.

use serde::{Deserialize, Serialize};

use crate::utility::{is_floor, VALUE_FLOOR};

/// Behavior of a [`ConcavePLF`] left of its first knot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeftTail {
    /// First segment extended down to 0 inclusive.
    Linear,
    /// `v₁ + s₁·x₁·ln(x/x₁)` on `(0, x₁)`, matching value and slope at `x₁`
    /// and diverging at 0 (for utilities with `U(0⁺) = −∞`).
    Log,
    /// `−∞` below the first knot (wealth below it is inadmissible).
    Cut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcavePLF {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
    pub left: LeftTail,
}

impl ConcavePLF {
    /// Takes knots and values as given; use [`ConcavePLF::fit`] to repair
    /// noisy samples.
    pub fn new(knots: Vec<f64>, values: Vec<f64>, left: LeftTail) -> Self {
        assert!(knots.len() >= 2 && knots.len() == values.len());
        Self { knots, values, left }
    }

    pub fn slopes(&self) -> Vec<f64> {
        self.knots
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0]))
            .collect()
    }

    fn last_slope(&self) -> f64 {
        let m = self.knots.len() - 1;
        ((self.values[m] - self.values[m - 1]) / (self.knots[m] - self.knots[m - 1])).max(0.0)
    }

    fn first_slope(&self) -> f64 {
        (self.values[1] - self.values[0]) / (self.knots[1] - self.knots[0])
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x.is_nan() || x < 0.0 {
            return VALUE_FLOOR;
        }
        let m = self.knots.len() - 1;
        let x1 = self.knots[0];
        if x < x1 {
            return match self.left {
                LeftTail::Cut => VALUE_FLOOR,
                LeftTail::Log if x == 0.0 => VALUE_FLOOR,
                LeftTail::Log => (self.values[0] + self.first_slope() * x1 * (x / x1).ln()).max(VALUE_FLOOR),
                LeftTail::Linear => (self.values[0] + self.first_slope() * (x - x1)).max(VALUE_FLOOR),
            };
        }
        if x >= self.knots[m] {
            return self.values[m] + self.last_slope() * (x - self.knots[m]);
        }
        let i = self.knots.partition_point(|&k| k <= x) - 1;
        let t = (x - self.knots[i]) / (self.knots[i + 1] - self.knots[i]);
        self.values[i] + t * (self.values[i + 1] - self.values[i])
    }

    /// Left derivative (the first slope at or left of `x₁`, scaled by
    /// `x₁/x` on a log tail).
    pub fn left_slope(&self, x: f64) -> f64 {
        let m = self.knots.len() - 1;
        if x < self.knots[0] && self.left == LeftTail::Log && x > 0.0 {
            return self.first_slope() * self.knots[0] / x;
        }
        if x <= self.knots[0] {
            return self.first_slope();
        }
        if x > self.knots[m] {
            return self.last_slope();
        }
        let i = self.knots.partition_point(|&k| k < x) - 1;
        (self.values[i + 1] - self.values[i]) / (self.knots[i + 1] - self.knots[i])
    }

    /// Smallest wealth with a finite value (inclusive unless the tail is open).
    pub fn domain_floor(&self) -> f64 {
        match self.left {
            LeftTail::Cut => self.knots[0],
            _ => 0.0,
        }
    }

    pub fn value_at_zero(&self) -> f64 {
        self.eval(0.0)
    }

    /// Fits a concave nondecreasing interpolant to samples. Slopes are made
    /// nonincreasing by weighted pool-adjacent-violators, then clipped at 0;
    /// values are re-anchored to minimize the largest change. Returns the
    /// function and that largest change.
    pub fn fit(knots: Vec<f64>, samples: &[f64], left: LeftTail) -> (Self, f64) {
        let n = knots.len();
        assert!(n >= 2 && samples.len() == n);
        debug_assert!(samples.iter().all(|v| !is_floor(*v)));
        let widths: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        let raw: Vec<f64> = samples
            .windows(2)
            .zip(&widths)
            .map(|(y, w)| (y[1] - y[0]) / w)
            .collect();
        let mut slopes = pav_nonincreasing(&raw, &widths);
        for s in &mut slopes {
            *s = s.max(0.0);
        }
        let mut z = vec![0.0; n];
        for k in 1..n {
            z[k] = z[k - 1] + slopes[k - 1] * widths[k - 1];
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for k in 0..n {
            let r = samples[k] - z[k];
            lo = lo.min(r);
            hi = hi.max(r);
        }
        let offset = 0.5 * (lo + hi);
        let values: Vec<f64> = z.iter().map(|v| v + offset).collect();
        let adj = values
            .iter()
            .zip(samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        (Self::new(knots, values, left), adj)
    }

    /// Slopes nonincreasing and nonnegative within `tol`.
    pub fn is_concave_nondecreasing(&self, tol: f64) -> bool {
        let s = self.slopes();
        s.iter().all(|&v| v >= -tol) && s.windows(2).all(|w| w[1] <= w[0] + tol)
    }
}

/// Weighted isotonic (nonincreasing) regression.
fn pav_nonincreasing(y: &[f64], w: &[f64]) -> Vec<f64> {
    // blocks of (mean, weight, count)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&v, &wt) in y.iter().zip(w) {
        blocks.push((v, wt, 1));
        while blocks.len() >= 2 {
            let b = blocks[blocks.len() - 1];
            let a = blocks[blocks.len() - 2];
            if a.0 >= b.0 {
                break;
            }
            let wsum = a.1 + b.1;
            let merged = ((a.0 * a.1 + b.0 * b.1) / wsum, wsum, a.2 + b.2);
            blocks.pop();
            *blocks.last_mut().unwrap() = merged;
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, _, c)| std::iter::repeat_n(m, c))
        .collect()
}

/// Two geometric pieces on `[lo, mid]` and `[mid, hi]` so that `mid` is a
/// knot; `m` knots in total.
pub fn wealth_grid(lo: f64, mid: f64, hi: f64, m: usize) -> Vec<f64> {
    assert!(m >= 3 && lo > 0.0 && lo < mid && mid < hi);
    let la = (mid / lo).ln();
    let lb = (hi / mid).ln();
    // split the m−1 intervals in proportion to the log lengths
    let intervals = m - 1;
    let left = (((la / (la + lb)) * intervals as f64).round() as usize).clamp(1, intervals - 1);
    let right = intervals - left;
    let mut g = Vec::with_capacity(m);
    for i in 0..left {
        g.push(lo * (la * i as f64 / left as f64).exp());
    }
    g.push(mid);
    for i in 1..right {
        g.push(mid * (lb * i as f64 / right as f64).exp());
    }
    g.push(hi);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn interpolation_and_extensions() {
        let f = ConcavePLF::new(vec![1.0, 2.0], vec![0.0, 1.0], LeftTail::Linear);
        assert_eq!(f.eval(1.5), 0.5);
        assert_eq!(f.eval(3.0), 2.0);
        assert_eq!(f.eval(-0.1), VALUE_FLOOR);
        assert_eq!(f.eval(0.0), -1.0);
        assert_eq!(f.eval(0.5), -0.5);
        let open = ConcavePLF::new(vec![1.0, 2.0], vec![0.0, 1.0], LeftTail::Log);
        assert_eq!(open.eval(0.0), VALUE_FLOOR);
        assert!((open.eval(0.5) - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(open.left_slope(0.5), 2.0);
        let cut = ConcavePLF::new(vec![1.0, 2.0], vec![0.0, 1.0], LeftTail::Cut);
        assert_eq!(cut.eval(0.5), VALUE_FLOOR);
        assert_eq!(cut.domain_floor(), 1.0);
    }

    #[test]
    fn right_extension_is_clamped() {
        let f = ConcavePLF::new(vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.5], LeftTail::Linear);
        assert_eq!(f.eval(5.0), 0.5);
    }

    #[test]
    fn left_slopes() {
        let f = ConcavePLF::new(vec![1.0, 2.0, 4.0], vec![0.0, 2.0, 3.0], LeftTail::Linear);
        assert_eq!(f.left_slope(0.5), 2.0);
        assert_eq!(f.left_slope(2.0), 2.0);
        assert_eq!(f.left_slope(2.5), 0.5);
        assert_eq!(f.left_slope(10.0), 0.5);
    }

    #[test]
    fn fit_repairs_small_violations() {
        let knots = vec![1.0, 2.0, 3.0, 4.0];
        let (f, adj) = ConcavePLF::fit(knots, &[0.0, 1.0, 1.5, 2.1], LeftTail::Linear);
        assert!(f.is_concave_nondecreasing(1e-15));
        assert!(adj > 0.0 && adj < 0.1);
        let (g, adj) = ConcavePLF::fit(vec![1.0, 2.0, 3.0], &[0.0, 1.0, 1.5], LeftTail::Linear);
        assert_eq!(adj, 0.0);
        assert_eq!(g.values, vec![0.0, 1.0, 1.5]);
    }

    #[test]
    fn grid_contains_the_middle() {
        let g = wealth_grid(1e-3, 1.0, 20.0, 257);
        assert_eq!(g.len(), 257);
        assert!(g.contains(&1.0));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(g[0], 1e-3);
        assert_eq!(g[256], 20.0);
    }

    proptest! {
        #[test]
        fn fit_is_always_concave(ys in proptest::collection::vec(-3.0f64..3.0, 3..20)) {
            let knots: Vec<f64> = (1..=ys.len()).map(|k| k as f64 * 0.7).collect();
            let (f, adj) = ConcavePLF::fit(knots, &ys, LeftTail::Linear);
            prop_assert!(f.is_concave_nondecreasing(1e-12));
            let err = f.values.iter().zip(&ys).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!((err - adj).abs() < 1e-12);
        }

        #[test]
        fn eval_is_concave(a in 0.0f64..10.0, b in 0.0f64..10.0, lam in 0.0f64..=1.0) {
            let f = ConcavePLF::new(vec![0.5, 1.0, 2.0, 4.0], vec![-1.0, 0.0, 0.6, 1.0], LeftTail::Linear);
            let mid = f.eval(lam * a + (1.0 - lam) * b);
            prop_assert!(mid >= lam * f.eval(a) + (1.0 - lam) * f.eval(b) - 1e-12);
        }
    }
}
