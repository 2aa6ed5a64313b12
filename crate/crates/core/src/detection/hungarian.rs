//! Minimum-cost one-to-one assignment (Kuhn-Munkres with potentials).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major cost matrix: rows are queries, columns ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("cost_matrix", &[rows, cols], &[data.len()]));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged cost matrix"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_empty(&self) -> bool {
        self.cols == 0 || self.rows == 0
    }
}

/// `(query, gt)` pairs, sorted by gt index.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(q, g)| cost.get(q, g)).sum()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Assigns every column to a distinct row at minimum total cost.
pub fn hungarian_match(cost: &CostMatrix) -> Result<MatchResult> {
    let (n_q, n_g) = (cost.rows, cost.cols);
    if n_q < n_g {
        return Err(Error::contract(format!(
            "cannot match {n_g} targets to {n_q} queries"
        )));
    }
    if n_g == 0 {
        return Ok(MatchResult::default());
    }
    for v in &cost.data {
        if !v.is_finite() {
            return Err(Error::NonFinite("matching cost".into()));
        }
    }
    // Workers are gt (n rows), jobs are queries (m columns); 1-based with a
    // virtual column 0.
    let (n, m) = (n_g, n_q);
    let a = |i: usize, j: usize| cost.get(j - 1, i - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (j - 1, p[j] - 1)).collect();
    pairs.sort_by_key(|&(_, g)| g);
    Ok(MatchResult { pairs })
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::rng::{stream_rng, Stream};

    /// Minimum over all injections of columns into rows.
    fn brute_force(cost: &CostMatrix) -> f64 {
        fn go(cost: &CostMatrix, g: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if g == cost.cols {
                *best = best.min(acc);
                return;
            }
            for q in 0..cost.rows {
                if !used[q] {
                    used[q] = true;
                    go(cost, g + 1, used, acc + cost.get(q, g), best);
                    used[q] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(cost, 0, &mut vec![false; cost.rows], 0.0, &mut best);
        best
    }

    #[test]
    fn diagonal() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let m = hungarian_match(&c).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total_cost(&c), 2.0);
    }

    #[test]
    fn one_by_one() {
        let c = CostMatrix::from_rows(&[vec![3.5]]).unwrap();
        assert_eq!(hungarian_match(&c).unwrap().pairs, vec![(0, 0)]);
    }

    #[test]
    fn more_targets_than_queries_is_an_error() {
        let c = CostMatrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(hungarian_match(&c).is_err());
    }

    #[test]
    fn empty_targets() {
        let c = CostMatrix::new(4, 0, vec![]).unwrap();
        assert!(hungarian_match(&c).unwrap().is_empty());
    }

    #[test]
    fn five_by_three_integers() {
        let mut rng = stream_rng(5, Stream::Eval, 3);
        let data = (0..15).map(|_| rng.gen_range(0..20) as f64).collect();
        let c = CostMatrix::new(5, 3, data).unwrap();
        let m = hungarian_match(&c).unwrap();
        assert_eq!(m.total_cost(&c), brute_force(&c));
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = stream_rng(0, Stream::Eval, 4);
        for _ in 0..100 {
            let rows = rng.gen_range(1..=8);
            let cols = rng.gen_range(1..=rows.min(5));
            let data = (0..rows * cols).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c = CostMatrix::new(rows, cols, data).unwrap();
            let m = hungarian_match(&c).unwrap();
            assert_eq!(m.len(), cols);
            let mut qs: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
            qs.sort_unstable();
            qs.dedup();
            assert_eq!(qs.len(), cols);
            // Both sums run in gt order, so equal assignments give equal bits.
            assert_eq!(m.total_cost(&c), brute_force(&c));
        }
    }
}
