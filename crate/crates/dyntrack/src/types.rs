//! Shared domain vocabulary: joints, poses, boxes, tracklets, heatmap stacks.
//!
//! All types here are plain value records. `Tracklet` is the only one with
//! interior mutation and is owned by exactly one tracker at a time.

use std::collections::VecDeque;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2D point in frame pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: Point2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

/// One body joint: pixel position, confidence score, type index, visibility.
///
/// Visibility is explicit rather than encoded as zero confidence so that
/// ground truth can mark occluded joints without destroying their position
/// labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub position: Point2,
    pub confidence: f64,
    pub joint_type: usize,
    pub visible: bool,
}

impl Joint {
    pub fn new(position: Point2, confidence: f64, joint_type: usize, visible: bool) -> Self {
        Self {
            position,
            confidence,
            joint_type,
            visible,
        }
    }
}

/// A full-body pose: exactly one joint per joint type, in type order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    joints: Vec<Joint>,
}

impl Pose {
    /// Builds a pose, validating the per-joint invariants: one joint per
    /// type in order, finite positions, confidences in [0, 1].
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::Invalid("pose must have at least one joint".into()));
        }
        for (k, j) in joints.iter().enumerate() {
            if j.joint_type != k {
                return Err(Error::Invalid(format!(
                    "joint at index {k} has type {}, expected {k}",
                    j.joint_type
                )));
            }
            if !j.position.is_finite() {
                return Err(Error::Invalid(format!("joint {k} position not finite")));
            }
            if !(0.0..=1.0).contains(&j.confidence) || !j.confidence.is_finite() {
                return Err(Error::Invalid(format!(
                    "joint {k} confidence {} outside [0, 1]",
                    j.confidence
                )));
            }
        }
        Ok(Self { joints })
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn joint(&self, k: usize) -> &Joint {
        &self.joints[k]
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// Aggregate confidence: mean over visible joints, 0 when none visible.
    pub fn score(&self) -> f64 {
        let vis: Vec<f64> = self
            .joints
            .iter()
            .filter(|j| j.visible)
            .map(|j| j.confidence)
            .collect();
        if vis.is_empty() {
            0.0
        } else {
            vis.iter().sum::<f64>() / vis.len() as f64
        }
    }

    pub fn visible_count(&self) -> usize {
        self.joints.iter().filter(|j| j.visible).count()
    }

    /// Returns a copy with every joint position mapped through `f`.
    pub fn map_positions(&self, mut f: impl FnMut(Point2) -> Point2) -> Pose {
        let joints = self
            .joints
            .iter()
            .map(|j| Joint {
                position: f(j.position),
                ..*j
            })
            .collect();
        Pose { joints }
    }

    pub fn translated(&self, delta: Point2) -> Pose {
        self.map_positions(|p| p + delta)
    }
}

/// Axis-aligned box given by center and extents, in frame pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center: Point2,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn new(center: Point2, width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0 && center.is_finite()) {
            return Err(Error::DegenerateBox);
        }
        Ok(Self {
            center,
            width,
            height,
        })
    }

    pub fn left(&self) -> f64 {
        self.center.x - self.width / 2.0
    }

    pub fn right(&self) -> f64 {
        self.center.x + self.width / 2.0
    }

    pub fn top(&self) -> f64 {
        self.center.y - self.height / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.center.y + self.height / 2.0
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn diagonal(&self) -> f64 {
        (self.width * self.width + self.height * self.height).sqrt()
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.left() && p.x <= self.right() && p.y >= self.top() && p.y <= self.bottom()
    }

    /// Clips the box to `[0, frame_w] x [0, frame_h]`, keeping a minimum
    /// 1x1 extent. The center shifts when the box overflows the frame.
    pub fn clip_to_frame(&self, frame_w: f64, frame_h: f64) -> BoundingBox {
        let l = self.left().max(0.0);
        let r = self.right().min(frame_w).max(l + 1.0);
        let t = self.top().max(0.0);
        let b = self.bottom().min(frame_h).max(t + 1.0);
        BoundingBox {
            center: Point2::new((l + r) / 2.0, (t + b) / 2.0),
            width: r - l,
            height: b - t,
        }
    }
}

/// Visible-joint hull expanded by `margin` (a fraction of the hull extent
/// on each side). Degenerate hulls are clamped to a 1x1 pixel box so that
/// downstream box scaling always has positive extents to work with.
pub fn pose_to_box(pose: &Pose, margin: f64) -> Result<BoundingBox> {
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    let mut any = false;
    for j in pose.joints() {
        if !j.visible {
            continue;
        }
        any = true;
        min_x = min_x.min(j.position.x);
        max_x = max_x.max(j.position.x);
        min_y = min_y.min(j.position.y);
        max_y = max_y.max(j.position.y);
    }
    if !any {
        return Err(Error::NoVisibleJoints);
    }
    let w = max_x - min_x;
    let h = max_y - min_y;
    let center = Point2::new((min_x + max_x) / 2.0, (min_y + max_y) / 2.0);
    Ok(BoundingBox {
        center,
        width: (w * (1.0 + 2.0 * margin)).max(1.0),
        height: (h * (1.0 + 2.0 * margin)).max(1.0),
    })
}

/// One tracked identity: an id plus a bounded FIFO of recent poses.
#[derive(Debug, Clone)]
pub struct Tracklet {
    id: u64,
    capacity: usize,
    history: VecDeque<(usize, Pose)>,
    pub missed_frames: usize,
}

impl Tracklet {
    pub fn new(id: u64, capacity: usize) -> Self {
        assert!(capacity >= 1, "tracklet capacity must be >= 1");
        Self {
            id,
            capacity,
            history: VecDeque::with_capacity(capacity),
            missed_frames: 0,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends a pose, evicting the oldest entry when at capacity.
    /// Frame indices must be strictly increasing.
    pub fn push(&mut self, frame: usize, pose: Pose) -> Result<()> {
        if let Some((last, _)) = self.history.back() {
            if frame <= *last {
                return Err(Error::Invalid(format!(
                    "tracklet {} push with frame {frame} <= last frame {last}",
                    self.id
                )));
            }
        }
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back((frame, pose));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    /// History entries, oldest first.
    pub fn history(&self) -> impl Iterator<Item = &(usize, Pose)> {
        self.history.iter()
    }

    pub fn last(&self) -> Option<&(usize, Pose)> {
        self.history.back()
    }
}

/// Per-joint score grids over a crop box. Channel `k` holds the scores for
/// joint type `k`; the crop maps grid cells to frame pixels affinely.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    channels: usize,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    crop: BoundingBox,
}

impl HeatmapStack {
    pub fn zeros(channels: usize, rows: usize, cols: usize, crop: BoundingBox) -> Result<Self> {
        if channels == 0 || rows == 0 || cols == 0 {
            return Err(Error::Invalid("heatmap dimensions must be positive".into()));
        }
        Ok(Self {
            channels,
            rows,
            cols,
            values: vec![0.0; channels * rows * cols],
            crop,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn crop(&self) -> BoundingBox {
        self.crop
    }

    pub fn cell_width(&self) -> f64 {
        self.crop.width / self.cols as f64
    }

    pub fn cell_height(&self) -> f64 {
        self.crop.height / self.rows as f64
    }

    #[inline]
    fn idx(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.rows + i) * self.cols + j
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.values[self.idx(k, i, j)]
    }

    #[inline]
    pub fn set(&mut self, k: usize, i: usize, j: usize, v: f64) {
        let idx = self.idx(k, i, j);
        self.values[idx] = v;
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let start = k * self.rows * self.cols;
        &self.values[start..start + self.rows * self.cols]
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut [f64] {
        let start = k * self.rows * self.cols;
        let len = self.rows * self.cols;
        &mut self.values[start..start + len]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn same_shape(&self, other: &HeatmapStack) -> bool {
        self.channels == other.channels && self.rows == other.rows && self.cols == other.cols
    }

    /// Frame-pixel position of the center of cell `(i, j)`.
    pub fn grid_to_frame(&self, i: usize, j: usize) -> Result<Point2> {
        if i >= self.rows || j >= self.cols {
            return Err(Error::OutOfGrid {
                row: i as i64,
                col: j as i64,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(self.grid_to_frame_unchecked(i as f64, j as f64))
    }

    /// Affine cell-to-frame map for fractional (possibly out-of-grid) cells.
    pub fn grid_to_frame_unchecked(&self, i: f64, j: f64) -> Point2 {
        Point2::new(
            self.crop.left() + (j + 0.5) * self.cell_width(),
            self.crop.top() + (i + 0.5) * self.cell_height(),
        )
    }

    /// Nearest grid cell for a frame point; errors when the rounded cell
    /// falls outside the grid.
    pub fn frame_to_grid(&self, p: Point2) -> Result<(usize, usize)> {
        let (fi, fj) = self.frame_to_grid_f(p);
        let i = fi.round() as i64;
        let j = fj.round() as i64;
        if i < 0 || j < 0 || i >= self.rows as i64 || j >= self.cols as i64 {
            return Err(Error::OutOfGrid {
                row: i,
                col: j,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok((i as usize, j as usize))
    }

    /// Continuous (row, col) cell coordinates of a frame point, unclamped.
    pub fn frame_to_grid_f(&self, p: Point2) -> (f64, f64) {
        (
            (p.y - self.crop.top()) / self.cell_height() - 0.5,
            (p.x - self.crop.left()) / self.cell_width() - 0.5,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn joint(x: f64, y: f64, k: usize, visible: bool) -> Joint {
        Joint::new(Point2::new(x, y), 0.8, k, visible)
    }

    fn pose(points: &[(f64, f64, bool)]) -> Pose {
        Pose::new(
            points
                .iter()
                .enumerate()
                .map(|(k, &(x, y, v))| joint(x, y, k, v))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pose_rejects_wrong_type_order() {
        let joints = vec![joint(0.0, 0.0, 1, true), joint(1.0, 1.0, 0, true)];
        assert!(Pose::new(joints).is_err());
    }

    #[test]
    fn pose_rejects_non_finite_position() {
        let joints = vec![joint(f64::NAN, 0.0, 0, true)];
        assert!(Pose::new(joints).is_err());
    }

    #[test]
    fn pose_score_is_mean_of_visible() {
        let joints = vec![
            Joint::new(Point2::new(0.0, 0.0), 0.4, 0, true),
            Joint::new(Point2::new(1.0, 0.0), 0.8, 1, true),
            Joint::new(Point2::new(2.0, 0.0), 0.1, 2, false),
        ];
        let p = Pose::new(joints).unwrap();
        assert!((p.score() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn pose_to_box_two_visible_joints() {
        let p = pose(&[(0.0, 0.0, true), (10.0, 20.0, true)]);
        let b = pose_to_box(&p, 0.0).unwrap();
        assert_eq!(b.center, Point2::new(5.0, 10.0));
        assert_eq!(b.width, 10.0);
        assert_eq!(b.height, 20.0);
    }

    #[test]
    fn pose_to_box_single_joint_clamps_to_unit() {
        let p = pose(&[(7.0, 9.0, true)]);
        let b = pose_to_box(&p, 0.0).unwrap();
        assert_eq!(b.center, Point2::new(7.0, 9.0));
        assert_eq!(b.width, 1.0);
        assert_eq!(b.height, 1.0);
    }

    #[test]
    fn pose_to_box_no_visible_joints_errors() {
        let p = pose(&[(0.0, 0.0, false), (1.0, 1.0, false)]);
        assert!(matches!(pose_to_box(&p, 0.0), Err(Error::NoVisibleJoints)));
    }

    #[test]
    fn pose_to_box_matches_min_max_scan_with_margin() {
        // Independent oracle: direct min/max hull expanded by 10% per side.
        let coords: Vec<(f64, f64)> = (0..15)
            .map(|k| {
                let x = (k as f64 * 13.7).sin() * 50.0 + 100.0;
                let y = (k as f64 * 7.3).cos() * 80.0 + 200.0;
                (x, y)
            })
            .collect();
        let p = pose(&coords.iter().map(|&(x, y)| (x, y, true)).collect::<Vec<_>>());
        let b = pose_to_box(&p, 0.1).unwrap();

        let min_x = coords.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        let max_x = coords.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = coords.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        let max_y = coords.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        let w = (max_x - min_x) * 1.2;
        let h = (max_y - min_y) * 1.2;
        assert!((b.width - w).abs() < 1e-9);
        assert!((b.height - h).abs() < 1e-9);
        assert!((b.center.x - (min_x + max_x) / 2.0).abs() < 1e-9);
        assert!((b.center.y - (min_y + max_y) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn tracklet_fifo_evicts_oldest() {
        let p = pose(&[(0.0, 0.0, true)]);
        let mut t = Tracklet::new(1, 3);
        for f in 0..5 {
            t.push(f, p.clone()).unwrap();
        }
        assert_eq!(t.len(), 3);
        let frames: Vec<usize> = t.history().map(|(f, _)| *f).collect();
        assert_eq!(frames, vec![2, 3, 4]);
    }

    #[test]
    fn tracklet_rejects_non_increasing_frames() {
        let p = pose(&[(0.0, 0.0, true)]);
        let mut t = Tracklet::new(1, 3);
        t.push(4, p.clone()).unwrap();
        assert!(t.push(4, p.clone()).is_err());
        assert!(t.push(3, p).is_err());
    }

    #[test]
    fn grid_center_cell_maps_to_crop_center() {
        let crop = BoundingBox::new(Point2::new(100.0, 50.0), 32.0, 24.0).unwrap();
        // Odd dims so there is an exact center cell.
        let s = HeatmapStack::zeros(1, 3, 3, crop).unwrap();
        let p = s.grid_to_frame(1, 1).unwrap();
        assert!((p.x - 100.0).abs() < 1e-12);
        assert!((p.y - 50.0).abs() < 1e-12);
    }

    #[test]
    fn grid_corner_cell_maps_to_top_left_plus_half_cell() {
        let crop = BoundingBox::new(Point2::new(100.0, 50.0), 32.0, 24.0).unwrap();
        let s = HeatmapStack::zeros(1, 6, 8, crop).unwrap();
        let p = s.grid_to_frame(0, 0).unwrap();
        assert!((p.x - (crop.left() + 2.0)).abs() < 1e-12); // cell width 4
        assert!((p.y - (crop.top() + 2.0)).abs() < 1e-12); // cell height 4
    }

    #[test]
    fn grid_roundtrip_is_exact_on_centers() {
        let crop = BoundingBox::new(Point2::new(13.7, -8.1), 53.0, 37.0).unwrap();
        let s = HeatmapStack::zeros(2, 11, 17, crop).unwrap();
        for i in 0..11 {
            for j in 0..17 {
                let p = s.grid_to_frame(i, j).unwrap();
                assert_eq!(s.frame_to_grid(p).unwrap(), (i, j));
            }
        }
    }

    #[test]
    fn out_of_grid_errors() {
        let crop = BoundingBox::new(Point2::new(0.0, 0.0), 10.0, 10.0).unwrap();
        let s = HeatmapStack::zeros(1, 4, 4, crop).unwrap();
        assert!(matches!(
            s.grid_to_frame(4, 0),
            Err(Error::OutOfGrid { .. })
        ));
        assert!(s.frame_to_grid(Point2::new(100.0, 0.0)).is_err());
    }

    #[test]
    fn clip_to_frame_shifts_center() {
        let b = BoundingBox::new(Point2::new(5.0, 5.0), 20.0, 20.0).unwrap();
        let c = b.clip_to_frame(640.0, 480.0);
        assert_eq!(c.left(), 0.0);
        assert_eq!(c.right(), 15.0);
        assert!((c.center.x - 7.5).abs() < 1e-12);
    }
}
