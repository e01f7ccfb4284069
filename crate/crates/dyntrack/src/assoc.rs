//! Similarity measures (OKS, IOU), Hungarian assignment, and pose-based
//! non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BoundingBox, Pose};

/// Which measure filled a similarity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Measure {
    Oks,
    Iou,
}

/// Rectangular similarity matrix, rows = predicted poses, cols = estimated
/// poses, entries in [0, 1].
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    pub measure: Measure,
}

impl SimilarityMatrix {
    pub fn new(rows: usize, cols: usize, measure: Measure) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            measure,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::Invalid("similarity entries must be finite".into()));
        }
        self.data[r * self.cols + c] = v;
        Ok(())
    }
}

/// One-to-one assignment plus the leftovers on each side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

/// Object keypoint similarity: mean over jointly visible joints of
/// `exp(-d^2 / (2 * scale * k^2))`, where `scale` is an area-like scalar of
/// the reference pose and `k` the per-type constant. Pose pairs sharing no
/// visible joint score 0.
pub fn oks(a: &Pose, b: &Pose, scale: f64, per_joint_k: &[f64]) -> Result<f64> {
    if a.joint_count() != b.joint_count() {
        return Err(Error::ShapeMismatch(format!(
            "oks poses with {} vs {} joints",
            a.joint_count(),
            b.joint_count()
        )));
    }
    if per_joint_k.len() != a.joint_count() {
        return Err(Error::ShapeMismatch(format!(
            "oks constants {} vs {} joints",
            per_joint_k.len(),
            a.joint_count()
        )));
    }
    if !(scale > 0.0) {
        return Err(Error::Invalid("oks scale must be positive".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (ja, jb) in a.joints().iter().zip(b.joints()) {
        if !(ja.visible && jb.visible) {
            continue;
        }
        let d2 = (ja.position.x - jb.position.x).powi(2) + (ja.position.y - jb.position.y).powi(2);
        let k = per_joint_k[ja.joint_type];
        sum += (-d2 / (2.0 * scale * k * k)).exp();
        count += 1;
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.right().min(b.right()) - a.left().max(b.left())).max(0.0);
    let iy = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

// Square min-cost assignment via the potentials (shortest augmenting path)
// method. `cost` is n x n; returns the column assigned to each row.
fn solve_square(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Minimum-cost one-to-one pairs of a rectangular cost matrix. The matrix is
/// padded square with zero-cost dummies; pairs with cost above `forbid_above`
/// are dropped from the result.
pub fn min_cost_pairs(costs: &[Vec<f64>], forbid_above: f64) -> Vec<(usize, usize)> {
    let rows = costs.len();
    let cols = costs.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let n = rows.max(cols);
    let mut square = vec![vec![0.0; n]; n];
    for (i, row) in costs.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            square[i][j] = c;
        }
    }
    let assignment = solve_square(&square);
    let mut pairs: Vec<(usize, usize)> = assignment
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < rows && j < cols && costs[i][j] <= forbid_above)
        .map(|(i, &j)| (i, j))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Maximum-total-similarity one-to-one assignment (solved as min-cost on the
/// negated, square-padded matrix). Pairs whose similarity falls below
/// `min_similarity` are demoted to unmatched after solving, which keeps the
/// solver total-optimal.
pub fn hungarian(sim: &SimilarityMatrix, min_similarity: f64) -> Assignment {
    let rows = sim.rows();
    let cols = sim.cols();
    let costs: Vec<Vec<f64>> = (0..rows)
        .map(|r| (0..cols).map(|c| -sim.get(r, c)).collect())
        .collect();
    let raw = min_cost_pairs(&costs, f64::INFINITY);
    let pairs: Vec<(usize, usize)> = raw
        .into_iter()
        .filter(|&(r, c)| sim.get(r, c) >= min_similarity)
        .collect();
    let mut row_used = vec![false; rows];
    let mut col_used = vec![false; cols];
    for &(r, c) in &pairs {
        row_used[r] = true;
        col_used[c] = true;
    }
    Assignment {
        pairs,
        unmatched_rows: (0..rows).filter(|&r| !row_used[r]).collect(),
        unmatched_cols: (0..cols).filter(|&c| !col_used[c]).collect(),
    }
}

/// Pose-based NMS: greedy by descending pose score, suppressing any pose
/// whose OKS against an already-kept pose reaches `threshold`. Returns the
/// indices of the survivors in input order.
pub fn pnms(poses: &[Pose], threshold: f64, per_joint_k: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..poses.len()).collect();
    order.sort_by(|&a, &b| {
        poses[b]
            .score()
            .partial_cmp(&poses[a].score())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &idx in &order {
        let mut suppressed = false;
        for &kidx in &kept {
            let keeper = &poses[kidx];
            let scale = match crate::types::pose_to_box(keeper, 0.0) {
                Ok(b) => b.area(),
                Err(_) => continue,
            };
            let s = oks(keeper, &poses[idx], scale, per_joint_k).unwrap_or(0.0);
            if s >= threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(idx);
        }
    }
    kept.sort_unstable();
    kept
}
