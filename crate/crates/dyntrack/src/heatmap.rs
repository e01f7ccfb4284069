//! Gaussian heatmap rendering, argmax decoding, L2 loss, and center-aligned
//! heatmap fusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BoundingBox, HeatmapStack, Joint, Point2, Pose};

/// Parameters of the ground-truth Gaussian renderer. `sigma` is measured in
/// grid cells.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GaussianConfig {
    pub sigma: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GaussianConfig {
    pub fn new(sigma: f64, rows: usize, cols: usize) -> Result<Self> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::ConfigInvalid("sigma must be positive".into()));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::ConfigInvalid(
                "heatmap resolution must be positive".into(),
            ));
        }
        Ok(Self { sigma, rows, cols })
    }
}

/// Renders one channel per joint type: `exp(-dist^2 / sigma^2)` around the
/// given grid coordinate, all-zero for absent joints. Out-of-grid centers
/// leave their in-grid tail.
pub fn render_gaussian(
    joint_cells: &[Option<(f64, f64)>],
    crop: BoundingBox,
    cfg: &GaussianConfig,
) -> Result<HeatmapStack> {
    let mut stack = HeatmapStack::zeros(joint_cells.len(), cfg.rows, cfg.cols, crop)?;
    let inv = 1.0 / (cfg.sigma * cfg.sigma);
    for (k, cell) in joint_cells.iter().enumerate() {
        let Some((ci, cj)) = *cell else { continue };
        for i in 0..cfg.rows {
            for j in 0..cfg.cols {
                let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                stack.set(k, i, j, (-d2 * inv).exp());
            }
        }
    }
    Ok(stack)
}

/// Per-channel argmax decode. The winning cell maps to frame pixels through
/// the crop; confidence is the peak value clamped to [0, 1]. Ties break to
/// the smallest row-major index.
pub fn decode_argmax(stack: &HeatmapStack) -> Pose {
    let mut joints = Vec::with_capacity(stack.channels());
    for k in 0..stack.channels() {
        let mut best = f64::NEG_INFINITY;
        let mut best_ij = (0usize, 0usize);
        for i in 0..stack.rows() {
            for j in 0..stack.cols() {
                let v = stack.get(k, i, j);
                if v > best {
                    best = v;
                    best_ij = (i, j);
                }
            }
        }
        let position = stack
            .grid_to_frame(best_ij.0, best_ij.1)
            .expect("argmax cell is in-grid");
        joints.push(Joint::new(position, best.clamp(0.0, 1.0), k, true));
    }
    Pose::new(joints).expect("decoded joints are valid by construction")
}

/// Sum of squared per-cell differences over all channels.
pub fn l2_loss(pred: &HeatmapStack, gt: &HeatmapStack) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::ShapeMismatch(format!(
            "pred {}x{}x{} vs gt {}x{}x{}",
            pred.channels(),
            pred.rows(),
            pred.cols(),
            gt.channels(),
            gt.rows(),
            gt.cols()
        )));
    }
    Ok(pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Fuses two stacks by overlaying `b` onto `a`'s grid in frame coordinates
/// (nearest cell, translation only) and averaging element-wise. Cells of `a`
/// that `b` does not cover are copied from `a`, so fusion never discards
/// evidence present in only one source. The output keeps `a`'s crop.
pub fn align_and_average(a: &HeatmapStack, b: &HeatmapStack) -> Result<HeatmapStack> {
    if a.channels() != b.channels() {
        return Err(Error::ShapeMismatch(format!(
            "channel count {} vs {}",
            a.channels(),
            b.channels()
        )));
    }
    let mut out = HeatmapStack::zeros(a.channels(), a.rows(), a.cols(), a.crop())?;
    // Constant translation between the grids, in b's cell units.
    let origin = a.grid_to_frame_unchecked(0.0, 0.0);
    let (bi0, bj0) = b.frame_to_grid_f(origin);
    let di = bi0.round() as i64;
    let dj = bj0.round() as i64;
    let ri = a.cell_height() / b.cell_height();
    let rj = a.cell_width() / b.cell_width();
    for k in 0..a.channels() {
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                let av = a.get(k, i, j);
                let bi = if (ri - 1.0).abs() < 1e-9 {
                    di + i as i64
                } else {
                    (bi0 + i as f64 * ri).round() as i64
                };
                let bj = if (rj - 1.0).abs() < 1e-9 {
                    dj + j as i64
                } else {
                    (bj0 + j as f64 * rj).round() as i64
                };
                let v = if bi >= 0 && bj >= 0 && (bi as usize) < b.rows() && (bj as usize) < b.cols()
                {
                    (av + b.get(k, bi as usize, bj as usize)) / 2.0
                } else {
                    av
                };
                out.set(k, i, j, v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn crop(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(Point2::new(cx, cy), w, h).unwrap()
    }

    #[test]
    fn gaussian_peak_is_one_at_center() {
        let cfg = GaussianConfig::new(3.0, 20, 20).unwrap();
        let s = render_gaussian(&[Some((10.0, 10.0))], crop(0.0, 0.0, 20.0, 20.0), &cfg).unwrap();
        assert_eq!(s.get(0, 10, 10), 1.0);
    }

    #[test]
    fn gaussian_value_three_cells_away() {
        let cfg = GaussianConfig::new(3.0, 20, 20).unwrap();
        let s = render_gaussian(&[Some((10.0, 10.0))], crop(0.0, 0.0, 20.0, 20.0), &cfg).unwrap();
        let expected = (-9.0f64 / 9.0).exp();
        assert!((s.get(0, 13, 10) - expected).abs() < 1e-12);
        assert!((expected - 0.367_879_441_171_442_3).abs() < 1e-12);
    }

    #[test]
    fn gaussian_matches_per_cell_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = GaussianConfig::new(2.5, 12, 9).unwrap();
        let cells: Vec<Option<(f64, f64)>> = (0..5)
            .map(|_| {
                Some((
                    rng.gen_range(-3.0..15.0_f64),
                    rng.gen_range(-3.0..12.0_f64),
                ))
            })
            .collect();
        let s = render_gaussian(&cells, crop(5.0, 5.0, 9.0, 12.0), &cfg).unwrap();
        for (k, c) in cells.iter().enumerate() {
            let (ci, cj) = c.unwrap();
            for i in 0..12 {
                for j in 0..9 {
                    let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                    let want = (-d2 / (2.5 * 2.5)).exp();
                    assert!((s.get(k, i, j) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gaussian_absent_joint_renders_zero_channel() {
        let cfg = GaussianConfig::new(3.0, 4, 4).unwrap();
        let s = render_gaussian(&[None, Some((1.0, 1.0))], crop(0.0, 0.0, 4.0, 4.0), &cfg).unwrap();
        assert!(s.channel(0).iter().all(|&v| v == 0.0));
        assert!(s.channel(1).iter().any(|&v| v > 0.0));
    }

    #[test]
    fn gaussian_monotone_along_ray() {
        let cfg = GaussianConfig::new(3.0, 30, 30).unwrap();
        let s = render_gaussian(&[Some((15.0, 15.0))], crop(0.0, 0.0, 30.0, 30.0), &cfg).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..14 {
            let v = s.get(0, 15 + step, 15 + step);
            assert!(v < prev);
            assert!(v > 0.0);
            prev = v;
        }
    }

    #[test]
    fn decode_single_peak() {
        let c = crop(0.0, 0.0, 16.0, 16.0);
        let mut s = HeatmapStack::zeros(1, 16, 16, c).unwrap();
        s.set(0, 5, 7, 1.0);
        let pose = decode_argmax(&s);
        let expected = s.grid_to_frame(5, 7).unwrap();
        assert_eq!(pose.joint(0).position, expected);
        assert_eq!(pose.joint(0).confidence, 1.0);
    }

    #[test]
    fn decode_uniform_channel_tie_breaks_to_origin() {
        let c = crop(0.0, 0.0, 8.0, 8.0);
        let mut s = HeatmapStack::zeros(1, 8, 8, c).unwrap();
        for v in s.values_mut() {
            *v = 0.25;
        }
        let pose = decode_argmax(&s);
        assert_eq!(pose.joint(0).position, s.grid_to_frame(0, 0).unwrap());
    }

    #[test]
    fn decode_agrees_with_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = crop(30.0, 40.0, 24.0, 18.0);
        let mut s = HeatmapStack::zeros(4, 9, 12, c).unwrap();
        for v in s.values_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let pose = decode_argmax(&s);
        for k in 0..4 {
            let mut best = f64::NEG_INFINITY;
            let mut at = (0, 0);
            for i in 0..9 {
                for j in 0..12 {
                    if s.get(k, i, j) > best {
                        best = s.get(k, i, j);
                        at = (i, j);
                    }
                }
            }
            assert_eq!(pose.joint(k).position, s.grid_to_frame(at.0, at.1).unwrap());
            assert!((pose.joint(k).confidence - best.clamp(0.0, 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn decode_recovers_rendered_joints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = GaussianConfig::new(3.0, 24, 18).unwrap();
        for _ in 0..50 {
            let cells: Vec<Option<(f64, f64)>> = (0..3)
                .map(|_| {
                    Some((
                        rng.gen_range(0..24) as f64,
                        rng.gen_range(0..18) as f64,
                    ))
                })
                .collect();
            let s = render_gaussian(&cells, crop(10.0, 20.0, 36.0, 48.0), &cfg).unwrap();
            let pose = decode_argmax(&s);
            for (k, c) in cells.iter().enumerate() {
                let (ci, cj) = c.unwrap();
                let expected = s.grid_to_frame(ci as usize, cj as usize).unwrap();
                assert_eq!(pose.joint(k).position, expected);
            }
        }
    }

    #[test]
    fn l2_identity_is_zero() {
        let c = crop(0.0, 0.0, 8.0, 8.0);
        let cfg = GaussianConfig::new(3.0, 8, 8).unwrap();
        let s = render_gaussian(&[Some((3.0, 3.0))], c, &cfg).unwrap();
        assert_eq!(l2_loss(&s, &s).unwrap(), 0.0);
    }

    #[test]
    fn l2_constant_offset() {
        let c = crop(0.0, 0.0, 8.0, 8.0);
        let a = HeatmapStack::zeros(3, 8, 6, c).unwrap();
        let mut b = HeatmapStack::zeros(3, 8, 6, c).unwrap();
        for v in b.values_mut() {
            *v = 0.5;
        }
        let want = 3.0 * 8.0 * 6.0 * 0.25;
        assert!((l2_loss(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn l2_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = crop(0.0, 0.0, 8.0, 8.0);
        let mut a = HeatmapStack::zeros(2, 5, 7, c).unwrap();
        let mut b = HeatmapStack::zeros(2, 5, 7, c).unwrap();
        for v in a.values_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in b.values_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut want = 0.0;
        for k in 0..2 {
            for i in 0..5 {
                for j in 0..7 {
                    want += (a.get(k, i, j) - b.get(k, i, j)).powi(2);
                }
            }
        }
        assert!((l2_loss(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn l2_shape_mismatch_errors() {
        let c = crop(0.0, 0.0, 8.0, 8.0);
        let a = HeatmapStack::zeros(2, 5, 7, c).unwrap();
        let b = HeatmapStack::zeros(2, 5, 8, c).unwrap();
        assert!(matches!(l2_loss(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn align_identical_stacks_is_identity() {
        let cfg = GaussianConfig::new(3.0, 10, 10).unwrap();
        let c = crop(50.0, 50.0, 20.0, 20.0);
        let s = render_gaussian(&[Some((4.0, 6.0))], c, &cfg).unwrap();
        let fused = align_and_average(&s, &s).unwrap();
        for (x, y) in fused.values().iter().zip(s.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn align_all_zero_stays_zero() {
        let a = HeatmapStack::zeros(2, 6, 6, crop(0.0, 0.0, 12.0, 12.0)).unwrap();
        let b = HeatmapStack::zeros(2, 6, 6, crop(3.0, 1.0, 12.0, 12.0)).unwrap();
        let fused = align_and_average(&a, &b).unwrap();
        assert!(fused.values().iter().all(|&v| v == 0.0));
    }

    /// Oracle: rasterize both stacks into one shared frame grid and average
    /// where both cover; compare fused peak locations.
    #[test]
    fn align_shifted_peaks_match_common_frame_oracle() {
        let cell = 2.0;
        // a: crop centered (50, 50), 10x10 cells; b shifted by 3 cells x.
        let ca = crop(50.0, 50.0, 10.0 * cell, 10.0 * cell);
        let cb = crop(50.0 + 3.0 * cell, 50.0, 10.0 * cell, 10.0 * cell);
        let mut a = HeatmapStack::zeros(1, 10, 10, ca).unwrap();
        let mut b = HeatmapStack::zeros(1, 10, 10, cb).unwrap();
        a.set(0, 4, 6, 1.0);
        b.set(0, 4, 5, 0.9); // frame position: col 5 in b == col 8 in a
        let fused = align_and_average(&a, &b).unwrap();

        // Common-frame oracle over a's cells.
        let mut oracle = vec![0.0; 100];
        for i in 0..10 {
            for j in 0..10 {
                let p = a.grid_to_frame(i, j).unwrap();
                let av = a.get(0, i, j);
                oracle[i * 10 + j] = match b.frame_to_grid(p) {
                    Ok((bi, bj)) => (av + b.get(0, bi, bj)) / 2.0,
                    Err(_) => av,
                };
            }
        }
        for i in 0..10 {
            for j in 0..10 {
                assert!((fused.get(0, i, j) - oracle[i * 10 + j]).abs() < 1e-12);
            }
        }
        // b's peak lands 3 cells to the right in a's grid.
        assert!((fused.get(0, 4, 8) - 0.45).abs() < 1e-12);
        assert!((fused.get(0, 4, 6) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn align_commutes_when_crops_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = crop(10.0, 10.0, 16.0, 12.0);
        let mut a = HeatmapStack::zeros(2, 6, 8, c).unwrap();
        let mut b = HeatmapStack::zeros(2, 6, 8, c).unwrap();
        for v in a.values_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        for v in b.values_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let ab = align_and_average(&a, &b).unwrap();
        let ba = align_and_average(&b, &a).unwrap();
        for (x, y) in ab.values().iter().zip(ba.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn align_channel_mismatch_errors() {
        let a = HeatmapStack::zeros(2, 6, 6, crop(0.0, 0.0, 12.0, 12.0)).unwrap();
        let b = HeatmapStack::zeros(3, 6, 6, crop(0.0, 0.0, 12.0, 12.0)).unwrap();
        assert!(align_and_average(&a, &b).is_err());
    }
}
