//! Bipartite matching: an exact shortest-augmenting-path Hungarian solver for
//! set losses, and the greedy score-ordered center-distance matcher used by
//! detection metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignmentError {
    #[error("cost matrix contains a non-finite entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("cost matrix shape {rows}x{cols} does not match {len} entries")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
}

/// Dense row-major cost matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, costs: Vec<f64>) -> Result<Self, AssignmentError> {
        if rows * cols != costs.len() {
            return Err(AssignmentError::ShapeMismatch { rows, cols, len: costs.len() });
        }
        if let Some(i) = costs.iter().position(|c| !c.is_finite()) {
            return Err(AssignmentError::NonFiniteCost { row: i / cols.max(1), col: i % cols.max(1) });
        }
        Ok(Self { rows, cols, costs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AssignmentError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(AssignmentError::ShapeMismatch { rows: r, cols: c, len: rows.iter().map(Vec::len).sum() });
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.costs[r * self.cols + c]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(row, col)` pairs, sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    fn from_pairs(c: &CostMatrix, mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        let total_cost = pairs.iter().map(|&(r, k)| c.get(r, k)).sum();
        Assignment { pairs, total_cost }
    }

    pub fn col_for_row(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }
}

/// Minimum-cost injective assignment of size `min(rows, cols)`.
///
/// Rectangular inputs are padded to square with a constant cost of
/// `1e6 · max|c|`; dummy pairs are dropped from the result.
pub fn hungarian(c: &CostMatrix) -> Assignment {
    let n = c.rows.max(c.cols);
    if c.rows == 0 || c.cols == 0 {
        return Assignment { pairs: Vec::new(), total_cost: 0.0 };
    }
    let max_abs = c.costs.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let pad = 1e6 * if max_abs > 0.0 { max_abs } else { 1.0 };
    let cost = |i: usize, j: usize| if i < c.rows && j < c.cols { c.get(i, j) } else { pad };

    // Potentials u (rows) and v (cols); p[j] = row matched to column j.
    // Index 0 is a sentinel column, real indices are 1-based.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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

    let pairs = (1..=n)
        .filter_map(|j| {
            let i = p[j];
            (i > 0 && i - 1 < c.rows && j - 1 < c.cols).then(|| (i - 1, j - 1))
        })
        .collect();
    Assignment::from_pairs(c, pairs)
}

/// Greedy assignment: repeatedly take the globally cheapest remaining entry.
/// Used as an upper-bound reference for [`hungarian`].
pub fn greedy_assignment(c: &CostMatrix) -> Assignment {
    let mut order: Vec<(usize, usize)> = (0..c.rows).flat_map(|r| (0..c.cols).map(move |k| (r, k))).collect();
    order.sort_by(|a, b| c.get(a.0, a.1).total_cmp(&c.get(b.0, b.1)).then(a.cmp(b)));
    let mut row_used = vec![false; c.rows];
    let mut col_used = vec![false; c.cols];
    let mut pairs = Vec::new();
    for (r, k) in order {
        if !row_used[r] && !col_used[k] {
            row_used[r] = true;
            col_used[k] = true;
            pairs.push((r, k));
        }
    }
    Assignment::from_pairs(c, pairs)
}

/// A scored detection center for greedy matching.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCenter<'a> {
    pub class_name: &'a str,
    pub center: Point2,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtCenter<'a> {
    pub class_name: &'a str,
    pub center: Point2,
}

/// Score-ordered greedy matching on BEV center distance.
///
/// Detections are visited by descending score (ties by lower index); each
/// takes the nearest unmatched same-class ground truth strictly closer than
/// `center_threshold`. Returns `(det_index, gt_index)` pairs in visit order.
pub fn greedy_match(dets: &[ScoredCenter<'_>], gts: &[GtCenter<'_>], center_threshold: f64) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::new();
    for di in order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.class_name != d.class_name {
                continue;
            }
            let dist = d.center.distance(g.center);
            if dist < center_threshold && best.map_or(true, |(_, bd)| dist < bd) {
                best = Some((gi, dist));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            out.push((di, gi));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anti_diagonal() {
        let c = CostMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let a = hungarian(&c);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn identity_cost_matrix() {
        let rows: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        assert_eq!(hungarian(&CostMatrix::from_rows(&rows).unwrap()).total_cost, 0.0);
    }

    #[test]
    fn rectangular() {
        let c = CostMatrix::from_rows(&[vec![5.0, 1.0, 9.0]]).unwrap();
        let a = hungarian(&c);
        assert_eq!(a.pairs, vec![(0, 1)]);
        let c = CostMatrix::from_rows(&[vec![3.0], vec![1.0], vec![2.0]]).unwrap();
        let a = hungarian(&c);
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.total_cost, 1.0);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            CostMatrix::new(1, 2, vec![0.0, f64::NAN]),
            Err(AssignmentError::NonFiniteCost { row: 0, col: 1 })
        ));
        assert!(CostMatrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn empty_matrix() {
        let a = hungarian(&CostMatrix::new(0, 3, vec![]).unwrap());
        assert!(a.pairs.is_empty());
    }

    fn gt(c: &str, x: f64) -> GtCenter<'_> {
        GtCenter { class_name: c, center: Point2::new(x, 0.0) }
    }
    fn det(c: &str, x: f64, s: f64) -> ScoredCenter<'_> {
        ScoredCenter { class_name: c, center: Point2::new(x, 0.0), score: s }
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy_match(&[det("car", 0.3, 0.5)], &[gt("car", 0.0)], 0.5), vec![(0, 0)]);
        assert!(greedy_match(&[det("car", 3.0, 0.5)], &[gt("car", 0.0)], 2.0).is_empty());
        let m = greedy_match(&[det("car", 0.1, 0.4), det("car", 0.2, 0.9)], &[gt("car", 0.0)], 1.0);
        assert_eq!(m, vec![(1, 0)]);
        assert!(greedy_match(&[det("ped", 0.0, 0.9)], &[gt("car", 0.0)], 1.0).is_empty());
    }

    #[test]
    fn greedy_ties_prefer_lower_index() {
        let m = greedy_match(&[det("car", 0.2, 0.5), det("car", 0.1, 0.5)], &[gt("car", 0.0)], 1.0);
        assert_eq!(m, vec![(0, 0)]);
    }
}
