use crate::error::{invalid, Result};
use crate::model::ChangePointVector;
use crate::rng::rng_from_seed;
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Largest candidate set `enumerate_configs` will materialize.
pub const MAX_CONFIGS: usize = 5_000_000;

/// Prior over change-point configurations.
///
/// Within each count class the prior is uniform over admissible configurations:
/// change points lie on the grid `{eta : (eta - 1) % grid_stride == 0}` and every
/// segment, including the first and last, is at least `min_separation` long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangePointPrior {
    pub n: usize,
    pub l: usize,
    pub min_separation: usize,
    /// Probability of 0, 1, ..., L-1 change points.
    pub count_weights: Vec<f64>,
    pub grid_stride: usize,
}

/// Default enumeration stride: max(1, n / 200).
pub fn default_grid_stride(n: usize) -> usize {
    (n / 200).max(1)
}

impl ChangePointPrior {
    pub fn new(n: usize, l: usize, min_separation: usize, count_weights: Vec<f64>, grid_stride: usize) -> Result<Self> {
        let prior = ChangePointPrior { n, l, min_separation, count_weights, grid_stride };
        prior.validate()?;
        Ok(prior)
    }

    /// Exactly `k` change points.
    pub fn exactly(n: usize, l: usize, k: usize, min_separation: usize, grid_stride: usize) -> Result<Self> {
        if k >= l {
            return invalid(format!("{k} change points need L > {k}"));
        }
        let mut w = vec![0.0; l];
        w[k] = 1.0;
        Self::new(n, l, min_separation, w, grid_stride)
    }

    /// Every admissible configuration (any count) equally likely.
    pub fn uniform_over_configs(n: usize, l: usize, min_separation: usize, grid_stride: usize) -> Result<Self> {
        let probe = ChangePointPrior { n, l, min_separation, count_weights: vec![1.0 / l as f64; l], grid_stride };
        probe.check_shape()?;
        let counts = probe.class_counts();
        let total: f64 = counts.iter().sum();
        if total == 0.0 {
            return invalid("no admissible configuration");
        }
        let w = counts.iter().map(|c| c / total).collect();
        Self::new(n, l, min_separation, w, grid_stride)
    }

    /// Uniform over the number of change points, then uniform within each class.
    pub fn uniform_over_counts(n: usize, l: usize, min_separation: usize, grid_stride: usize) -> Result<Self> {
        Self::new(n, l, min_separation, vec![1.0 / l as f64; l], grid_stride)
    }

    fn check_shape(&self) -> Result<()> {
        if self.n == 0 || self.l == 0 {
            return invalid("n and L must be positive");
        }
        if self.min_separation == 0 {
            return invalid("min_separation must be at least 1");
        }
        if self.grid_stride == 0 {
            return invalid("grid_stride must be at least 1");
        }
        if self.count_weights.len() != self.l {
            return invalid(format!(
                "count_weights has {} entries, expected L = {}",
                self.count_weights.len(),
                self.l
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_shape()?;
        if self.count_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return invalid("count_weights must be nonnegative");
        }
        let s: f64 = self.count_weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return invalid(format!("count_weights sum to {s}, not 1"));
        }
        let counts = self.class_counts();
        for (k, (&w, &c)) in self.count_weights.iter().zip(&counts).enumerate() {
            if w > 0.0 && c == 0.0 {
                return invalid(format!(
                    "no admissible configuration with {k} change points (n = {}, min_separation = {}, stride = {})",
                    self.n, self.min_separation, self.grid_stride
                ));
            }
        }
        Ok(())
    }

    /// Admissible 0-based boundaries c = eta - 1.
    fn grid(&self) -> Vec<usize> {
        (1..self.n).filter(|c| c % self.grid_stride == 0).collect()
    }

    // forward[j][g]: placements of j change points ending exactly at grid[g].
    // backward[m][g]: placements of m further change points after one at grid[g].
    fn tables(&self) -> (Vec<usize>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let grid = self.grid();
        let gn = grid.len();
        let d = self.min_separation;
        let kmax = self.l.saturating_sub(1);
        let mut forward = vec![vec![0.0; gn]; kmax + 1];
        let mut backward = vec![vec![0.0; gn]; kmax + 1];
        if kmax == 0 {
            return (grid, forward, backward);
        }
        for g in 0..gn {
            forward[1][g] = if grid[g] >= d { 1.0 } else { 0.0 };
            backward[0][g] = if self.n - grid[g] >= d { 1.0 } else { 0.0 };
        }
        for j in 2..=kmax {
            let mut acc = 0.0;
            let mut lo = 0;
            for g in 0..gn {
                while lo < gn && grid[lo] + d <= grid[g] {
                    acc += forward[j - 1][lo];
                    lo += 1;
                }
                forward[j][g] = acc;
            }
        }
        for m in 1..kmax {
            let mut acc = 0.0;
            let mut hi = gn;
            for g in (0..gn).rev() {
                while hi > 0 && grid[hi - 1] >= grid[g] + d {
                    hi -= 1;
                    acc += backward[m - 1][hi];
                }
                backward[m][g] = acc;
            }
        }
        (grid, forward, backward)
    }

    /// Number of admissible configurations with k = 0..L-1 change points.
    pub fn class_counts(&self) -> Vec<f64> {
        let (_, forward, backward) = self.tables();
        let mut counts = vec![0.0; self.l];
        counts[0] = if self.n >= self.min_separation { 1.0 } else { 0.0 };
        for (k, count) in counts.iter_mut().enumerate().skip(1) {
            *count = forward[k].iter().zip(&backward[0]).map(|(a, b)| a * b).sum();
        }
        counts
    }

    /// n x L matrix whose row i-1 is the marginal law of the label at sample i.
    pub fn marginals(&self) -> DMatrix<f64> {
        let n = self.n;
        let l = self.l;
        let (grid, forward, backward) = self.tables();
        let counts = self.class_counts();
        let mut out = DMatrix::zeros(n, l);
        for k in 0..l {
            let w = self.count_weights[k];
            if w == 0.0 {
                continue;
            }
            if k == 0 {
                out.column_mut(0).add_scalar_mut(w);
                continue;
            }
            // cdf[j][r] = P(c_j <= r) for the j-th change point, j = 1..k.
            let mut cdf = vec![vec![0.0; n]; k + 2];
            cdf[0].iter_mut().for_each(|v| *v = 1.0);
            for j in 1..=k {
                let mut acc = 0.0;
                let mut g = 0;
                for r in 0..n {
                    while g < grid.len() && grid[g] <= r {
                        acc += forward[j][g] * backward[k - j][g] / counts[k];
                        g += 1;
                    }
                    cdf[j][r] = acc;
                }
            }
            for r in 0..n {
                for lab in 0..=k {
                    let pr = cdf[lab][r] - cdf[lab + 1][r];
                    out[(r, lab)] += w * pr.max(0.0);
                }
            }
        }
        out
    }

    /// Marginal law of the label at 1-based sample i.
    pub fn marginal(&self, i: usize) -> Result<Vec<f64>> {
        if i == 0 || i > self.n {
            return invalid(format!("index {i} outside [1, {}]", self.n));
        }
        let m = self.marginals();
        Ok(m.row(i - 1).iter().cloned().collect())
    }

    /// All admissible configurations with positive prior mass, in lexicographic order of eta.
    pub fn enumerate_configs(&self) -> Result<Vec<(ChangePointVector, f64)>> {
        self.validate()?;
        let counts = self.class_counts();
        let total: f64 = counts
            .iter()
            .zip(&self.count_weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(c, _)| c)
            .sum();
        if total > MAX_CONFIGS as f64 {
            return invalid(format!("{total} configurations exceed the enumeration cap {MAX_CONFIGS}"));
        }
        let grid = self.grid();
        let mut out = Vec::with_capacity(total as usize);
        let mut stack = Vec::new();
        self.enumerate_rec(&grid, 0, &counts, &mut stack, &mut out);
        out.sort_by(|a, b| a.0.eta.cmp(&b.0.eta));
        Ok(out)
    }

    fn enumerate_rec(
        &self,
        grid: &[usize],
        start: usize,
        counts: &[f64],
        stack: &mut Vec<usize>,
        out: &mut Vec<(ChangePointVector, f64)>,
    ) {
        let k = stack.len();
        let d = self.min_separation;
        let last = stack.last().copied().unwrap_or(0);
        if self.count_weights[k] > 0.0 && self.n - last >= d {
            let eta = stack.iter().map(|c| c + 1).collect();
            out.push((ChangePointVector { eta, n: self.n }, self.count_weights[k] / counts[k]));
        }
        if k + 1 >= self.l || !self.count_weights[k + 1..].iter().any(|&w| w > 0.0) {
            return;
        }
        for g in start..grid.len() {
            let c = grid[g];
            if c < last + d {
                continue;
            }
            if self.n - c < d {
                break;
            }
            stack.push(c);
            self.enumerate_rec(grid, g + 1, counts, stack, out);
            stack.pop();
        }
    }

    /// Whether eta is in the support of the prior.
    pub fn admits(&self, eta: &ChangePointVector) -> bool {
        let k = eta.len();
        if eta.n != self.n || k >= self.l || self.count_weights[k] == 0.0 {
            return false;
        }
        let mut prev = 0;
        for c in eta.boundaries() {
            if c % self.grid_stride != 0 || c < prev + self.min_separation {
                return false;
            }
            prev = c;
        }
        self.n - prev >= self.min_separation
    }

    /// One draw from the prior.
    pub fn sample(&self, seed: u64) -> Result<ChangePointVector> {
        let configs = self.enumerate_configs()?;
        let u: f64 = rng_from_seed(seed).random();
        let mut acc = 0.0;
        for (eta, w) in &configs {
            acc += w;
            if u < acc {
                return Ok(eta.clone());
            }
        }
        match configs.last() {
            Some((eta, _)) => Ok(eta.clone()),
            None => invalid("no admissible configuration"),
        }
    }

    /// Prior log-probability of an admissible configuration (-inf otherwise).
    pub fn log_prob(&self, eta: &ChangePointVector) -> f64 {
        if !self.admits(eta) {
            return f64::NEG_INFINITY;
        }
        let counts = self.class_counts();
        (self.count_weights[eta.len()] / counts[eta.len()]).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(n: usize, k: usize, d: usize, s: usize) -> Vec<Vec<usize>> {
        // Every increasing k-tuple of boundaries, filtered by the admissibility rule.
        fn rec(n: usize, k: usize, from: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for c in from..n {
                cur.push(c);
                rec(n, k, c + 1, cur, out);
                cur.pop();
            }
        }
        let mut all = Vec::new();
        rec(n, k, 1, &mut Vec::new(), &mut all);
        all.into_iter()
            .filter(|cs| {
                let mut edges = vec![0];
                edges.extend(cs.iter().cloned());
                edges.push(n);
                cs.iter().all(|c| c % s == 0) && edges.windows(2).all(|w| w[1] - w[0] >= d)
            })
            .collect()
    }

    #[test]
    fn single_change_point_counting() {
        let p = ChangePointPrior::exactly(10, 2, 1, 1, 1).unwrap();
        let cfgs = p.enumerate_configs().unwrap();
        assert_eq!(cfgs.len(), 9);
        for (_, pr) in &cfgs {
            assert!((pr - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_change_points_match_brute_force() {
        // Segments of length >= 4 cannot host two change points in n = 10.
        assert!(brute_force(10, 2, 4, 1).is_empty());
        assert!(ChangePointPrior::exactly(10, 3, 2, 4, 1).is_err());
        let p = ChangePointPrior::exactly(10, 3, 2, 3, 1).unwrap();
        let cfgs = p.enumerate_configs().unwrap();
        let brute = brute_force(10, 2, 3, 1);
        assert_eq!(cfgs.len(), brute.len());
        assert_eq!(brute.len(), 3);
        for ((e, _), b) in cfgs.iter().zip(&brute) {
            assert_eq!(e.boundaries(), *b);
        }
    }

    #[test]
    fn class_counts_match_brute_force_grid() {
        for &(n, l, d, s) in &[(17, 4, 3, 1), (30, 4, 5, 2), (25, 3, 2, 3), (12, 2, 1, 1)] {
            let p = ChangePointPrior::uniform_over_counts(n, l, d, s).unwrap();
            let counts = p.class_counts();
            for k in 1..l {
                assert_eq!(counts[k] as usize, brute_force(n, k, d, s).len(), "n={n} k={k}");
            }
        }
    }

    #[test]
    fn zero_change_point_prior() {
        let p = ChangePointPrior::new(8, 3, 1, vec![1.0, 0.0, 0.0], 1).unwrap();
        let cfgs = p.enumerate_configs().unwrap();
        assert_eq!(cfgs.len(), 1);
        assert!(cfgs[0].0.is_empty());
        assert_eq!(cfgs[0].1, 1.0);
        let m = p.marginals();
        for i in 0..8 {
            assert_eq!(m[(i, 0)], 1.0);
        }
    }

    #[test]
    fn marginal_examples() {
        let p = ChangePointPrior::exactly(4, 2, 1, 1, 1).unwrap();
        let m = p.marginal(3).unwrap();
        assert!((m[0] - 1.0 / 3.0).abs() < 1e-15 && (m[1] - 2.0 / 3.0).abs() < 1e-15);
        let q = ChangePointPrior::exactly(50, 2, 1, 1, 1).unwrap();
        assert_eq!(q.marginal(1).unwrap(), vec![1.0, 0.0]);
        assert!(q.marginal(0).is_err() && q.marginal(51).is_err());
    }

    #[test]
    fn marginals_match_enumeration() {
        let p = ChangePointPrior::new(23, 4, 3, vec![0.1, 0.2, 0.3, 0.4], 2).unwrap();
        let m = p.marginals();
        let cfgs = p.enumerate_configs().unwrap();
        let mut brute = DMatrix::zeros(23, 4);
        for (e, pr) in &cfgs {
            let psi = crate::model::eta_to_psi(e, 23, 4).unwrap();
            for (i, &lab) in psi.psi.iter().enumerate() {
                brute[(i, lab - 1)] += pr;
            }
        }
        assert!((m - brute).abs().max() < 1e-12);
        let total: f64 = cfgs.iter().map(|c| c.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn impossible_class_is_rejected() {
        assert!(ChangePointPrior::exactly(10, 2, 1, 10, 1).is_err());
        assert!(ChangePointPrior::exactly(10, 2, 1, 6, 1).is_err());
        assert!(ChangePointPrior::new(10, 2, 1, vec![0.5, 0.6], 1).is_err());
    }

    #[test]
    fn admits_and_log_prob() {
        let p = ChangePointPrior::exactly(10, 2, 1, 1, 1).unwrap();
        let e = ChangePointVector::new(vec![5], 10).unwrap();
        assert!((p.log_prob(&e) - (1.0f64 / 9.0).ln()).abs() < 1e-15);
        let none = ChangePointVector::new(vec![], 10).unwrap();
        assert_eq!(p.log_prob(&none), f64::NEG_INFINITY);
    }

    #[test]
    fn samples_follow_the_count_weights() {
        let prior = ChangePointPrior::new(60, 3, 10, vec![0.2, 0.3, 0.5], 1).unwrap();
        let mut freq = [0.0; 3];
        let draws = 4000;
        for s in 0..draws {
            let eta = prior.sample(s).unwrap();
            assert!(prior.admits(&eta));
            freq[eta.len()] += 1.0 / draws as f64;
        }
        for (f, w) in freq.iter().zip(&prior.count_weights) {
            // Binomial standard error at 4000 draws is below 0.008.
            assert!((f - w).abs() < 0.03, "{freq:?}");
        }
        assert_eq!(prior.sample(11).unwrap(), prior.sample(11).unwrap());
    }
}
