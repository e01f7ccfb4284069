//! Baseline pose predictors under a common contract: zero-velocity repeat,
//! per-joint constant-velocity Kalman filters, and per-joint particle
//! filters.
//!
//! Each joint is filtered independently; no cross-joint coupling. That keeps
//! the baselines honest as contrasts to the graph model, which couples
//! joints by construction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::types::{Joint, Pose, Tracklet};

/// Contract shared by all pose predictors: `predict` depends only on history
/// and internal state, never on current-frame observations.
pub trait PosePredictor {
    /// One-step-ahead pose for the tracklet. Pure: identical state yields an
    /// identical pose.
    fn predict(&self, tracklet: &Tracklet, frame_index: usize) -> Result<Pose>;

    /// Feeds the matched measurement back into internal state.
    fn observe(&mut self, pose: &Pose, frame_index: usize);

    /// Advances internal state across a frame with no measurement.
    fn coast(&mut self, frame_index: usize);
}

/// Repeats the last tracked pose, confidences retained.
#[derive(Debug, Clone, Default)]
pub struct ZeroVelocity;

impl PosePredictor for ZeroVelocity {
    fn predict(&self, tracklet: &Tracklet, _frame_index: usize) -> Result<Pose> {
        tracklet
            .last()
            .map(|(_, p)| p.clone())
            .ok_or(Error::EmptyHistory)
    }

    fn observe(&mut self, _pose: &Pose, _frame_index: usize) {}

    fn coast(&mut self, _frame_index: usize) {}
}

// --- small fixed-size linear algebra for the 4-state CV model ---

type Mat4 = [[f64; 4]; 4];

fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for k in 0..4 {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..4 {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

fn mat4_transpose(a: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[j][i] = a[i][j];
        }
    }
    out
}

const F_CV: Mat4 = [
    [1.0, 0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0, 1.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// White-acceleration process noise for dt = 1, unit intensity.
const Q_UNIT: Mat4 = [
    [0.25, 0.0, 0.5, 0.0],
    [0.0, 0.25, 0.0, 0.5],
    [0.5, 0.0, 1.0, 0.0],
    [0.0, 0.5, 0.0, 1.0],
];

const PRIOR_VEL_VAR: f64 = 100.0;

/// Per-joint constant-velocity Kalman state: (x, y, vx, vy) and 4x4
/// covariance.
#[derive(Debug, Clone)]
pub struct KalmanJointState {
    pub state: [f64; 4],
    pub covariance: Mat4,
    pub process_noise: f64,
    pub measurement_noise: f64,
}

impl KalmanJointState {
    pub fn new(x: f64, y: f64, process_noise: f64, measurement_noise: f64) -> Self {
        Self {
            state: [x, y, 0.0, 0.0],
            covariance: Self::prior_covariance(measurement_noise),
            process_noise,
            measurement_noise,
        }
    }

    fn prior_covariance(r: f64) -> Mat4 {
        let p0 = r.max(1e-9);
        [
            [p0, 0.0, 0.0, 0.0],
            [0.0, p0, 0.0, 0.0],
            [0.0, 0.0, PRIOR_VEL_VAR, 0.0],
            [0.0, 0.0, 0.0, PRIOR_VEL_VAR],
        ]
    }

    /// One-step extrapolated position, no state mutation.
    pub fn predicted_position(&self) -> (f64, f64) {
        (
            self.state[0] + self.state[2],
            self.state[1] + self.state[3],
        )
    }

    /// Time update: `x = F x`, `P = F P F^T + Q`.
    pub fn advance(&mut self) {
        let s = &mut self.state;
        s[0] += s[2];
        s[1] += s[3];
        let fp = mat4_mul(&F_CV, &self.covariance);
        let mut p = mat4_mul(&fp, &mat4_transpose(&F_CV));
        for i in 0..4 {
            for j in 0..4 {
                p[i][j] += self.process_noise * Q_UNIT[i][j];
            }
        }
        self.covariance = p;
        self.symmetrize_or_reset();
    }

    /// Measurement update observing position only.
    pub fn update(&mut self, zx: f64, zy: f64) {
        let p = &self.covariance;
        let r = self.measurement_noise;
        // S = H P H^T + R (2x2, H selects position).
        let s00 = p[0][0] + r;
        let s01 = p[0][1];
        let s10 = p[1][0];
        let s11 = p[1][1] + r;
        let det = s00 * s11 - s01 * s10;
        if !(det.abs() > 1e-300) || !det.is_finite() {
            self.covariance = Self::prior_covariance(self.measurement_noise);
            return;
        }
        let inv = [
            [s11 / det, -s01 / det],
            [-s10 / det, s00 / det],
        ];
        // K = P H^T S^-1 (4x2).
        let mut k = [[0.0; 2]; 4];
        for i in 0..4 {
            for j in 0..2 {
                k[i][j] = p[i][0] * inv[0][j] + p[i][1] * inv[1][j];
            }
        }
        let yx = zx - self.state[0];
        let yy = zy - self.state[1];
        for i in 0..4 {
            self.state[i] += k[i][0] * yx + k[i][1] * yy;
        }
        // P = (I - K H) P.
        let mut new_p = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                new_p[i][j] = p[i][j] - k[i][0] * p[0][j] - k[i][1] * p[1][j];
            }
        }
        self.covariance = new_p;
        self.symmetrize_or_reset();
    }

    fn symmetrize_or_reset(&mut self) {
        let p = &mut self.covariance;
        for i in 0..4 {
            for j in (i + 1)..4 {
                let avg = (p[i][j] + p[j][i]) / 2.0;
                p[i][j] = avg;
                p[j][i] = avg;
            }
        }
        let bad = (0..4).any(|i| !(p[i][i] >= 0.0) || !p[i][i].is_finite());
        if bad {
            self.covariance = Self::prior_covariance(self.measurement_noise);
        }
    }
}

/// Independent CV Kalman filters, one per joint type.
#[derive(Debug, Clone)]
pub struct KalmanPredictor {
    joints: Vec<Option<KalmanJointState>>,
    process_noise: f64,
    measurement_noise: f64,
}

impl KalmanPredictor {
    pub fn new(joint_count: usize, process_noise: f64, measurement_noise: f64) -> Self {
        Self {
            joints: vec![None; joint_count],
            process_noise,
            measurement_noise,
        }
    }

    pub fn joint_state(&self, k: usize) -> Option<&KalmanJointState> {
        self.joints[k].as_ref()
    }
}

impl PosePredictor for KalmanPredictor {
    fn predict(&self, tracklet: &Tracklet, _frame_index: usize) -> Result<Pose> {
        let (_, last) = tracklet.last().ok_or(Error::EmptyHistory)?;
        let joints = last
            .joints()
            .iter()
            .enumerate()
            .map(|(k, j)| {
                let mut out = *j;
                if let Some(state) = &self.joints[k] {
                    let (x, y) = state.predicted_position();
                    out.position = crate::types::Point2::new(x, y);
                }
                out
            })
            .collect();
        Pose::new(joints)
    }

    fn observe(&mut self, pose: &Pose, _frame_index: usize) {
        for (k, j) in pose.joints().iter().enumerate() {
            if !j.visible {
                if let Some(state) = &mut self.joints[k] {
                    state.advance();
                }
                continue;
            }
            match &mut self.joints[k] {
                Some(state) => {
                    state.advance();
                    state.update(j.position.x, j.position.y);
                }
                slot @ None => {
                    *slot = Some(KalmanJointState::new(
                        j.position.x,
                        j.position.y,
                        self.process_noise,
                        self.measurement_noise,
                    ));
                }
            }
        }
    }

    fn coast(&mut self, _frame_index: usize) {
        for state in self.joints.iter_mut().flatten() {
            state.advance();
        }
    }
}

/// Weighted particle cloud for one joint: N particles of (x, y, vx, vy).
#[derive(Debug, Clone)]
pub struct ParticleJoint {
    pub particles: Vec<[f64; 4]>,
    pub weights: Vec<f64>,
}

impl ParticleJoint {
    /// All particles at an exact state; used for cold starts around a
    /// measurement and by tests that pin the cloud to the truth.
    pub fn from_state(x: f64, y: f64, vx: f64, vy: f64, n: usize) -> Self {
        Self {
            particles: vec![[x, y, vx, vy]; n],
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn spread(
        x: f64,
        y: f64,
        pos_sigma: f64,
        vel_sigma: f64,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let pos = Normal::new(0.0, pos_sigma.max(1e-12)).unwrap();
        let vel = Normal::new(0.0, vel_sigma.max(1e-12)).unwrap();
        let particles = (0..n)
            .map(|_| {
                [
                    x + pos.sample(rng),
                    y + pos.sample(rng),
                    vel.sample(rng),
                    vel.sample(rng),
                ]
            })
            .collect();
        Self {
            particles,
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// CV propagation with white-acceleration noise of std `q_sigma`.
    pub fn propagate(&mut self, q_sigma: f64, rng: &mut ChaCha8Rng) {
        if q_sigma > 0.0 {
            let accel = Normal::new(0.0, q_sigma).unwrap();
            for p in &mut self.particles {
                let ax = accel.sample(rng);
                let ay = accel.sample(rng);
                p[0] += p[2] + ax / 2.0;
                p[1] += p[3] + ay / 2.0;
                p[2] += ax;
                p[3] += ay;
            }
        } else {
            for p in &mut self.particles {
                p[0] += p[2];
                p[1] += p[3];
            }
        }
    }

    /// Reweights by the Gaussian likelihood of the measurement (variance
    /// `r`) and normalizes; an all-zero weight vector resets to uniform.
    pub fn reweight(&mut self, zx: f64, zy: f64, r: f64) {
        let inv = 1.0 / (2.0 * r.max(1e-12));
        // Subtract the min distance before exponentiating so clouds far from
        // the measurement keep finite relative weights.
        let d2: Vec<f64> = self
            .particles
            .iter()
            .map(|p| (p[0] - zx).powi(2) + (p[1] - zy).powi(2))
            .collect();
        let d2_min = d2.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for (w, d) in self.weights.iter_mut().zip(&d2) {
            *w *= (-(d - d2_min) * inv).exp();
            sum += *w;
        }
        let n = self.weights.len() as f64;
        if !(sum > 0.0) || !sum.is_finite() {
            self.weights.fill(1.0 / n);
        } else {
            for w in &mut self.weights {
                *w /= sum;
            }
        }
    }

    pub fn effective_sample_size(&self) -> f64 {
        let s: f64 = self.weights.iter().map(|w| w * w).sum();
        if s > 0.0 {
            1.0 / s
        } else {
            0.0
        }
    }

    /// Systematic resampling; preserves the particle count and resets
    /// weights to uniform.
    pub fn resample(&mut self, rng: &mut ChaCha8Rng) {
        let n = self.particles.len();
        let u0: f64 = rng.gen_range(0.0..1.0);
        let mut out = Vec::with_capacity(n);
        let mut cum = 0.0;
        let mut idx = 0usize;
        for i in 0..n {
            let target = (u0 + i as f64) / n as f64;
            while cum + self.weights[idx] < target && idx + 1 < n {
                cum += self.weights[idx];
                idx += 1;
            }
            out.push(self.particles[idx]);
        }
        self.particles = out;
        self.weights.fill(1.0 / n as f64);
    }

    /// Weighted mean state.
    pub fn mean(&self) -> [f64; 4] {
        let mut m = [0.0; 4];
        for (p, w) in self.particles.iter().zip(&self.weights) {
            for i in 0..4 {
                m[i] += p[i] * w;
            }
        }
        m
    }
}

/// Independent bootstrap particle filters, one per joint type.
///
/// Clouds are created on a joint's second measurement with velocities drawn
/// around the two-point displacement, which avoids the long burn-in of a
/// zero-centered velocity prior.
#[derive(Debug, Clone)]
pub struct ParticlePredictor {
    joints: Vec<Option<ParticleJoint>>,
    pending: Vec<Option<(usize, f64, f64)>>,
    n: usize,
    q_sigma: f64,
    measurement_noise: f64,
    rng: ChaCha8Rng,
}

impl ParticlePredictor {
    pub fn new(joint_count: usize, n: usize, q_sigma: f64, measurement_noise: f64, seed: u64) -> Self {
        assert!(n >= 1);
        Self {
            joints: vec![None; joint_count],
            pending: vec![None; joint_count],
            n,
            q_sigma,
            measurement_noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn joint_cloud(&self, k: usize) -> Option<&ParticleJoint> {
        self.joints[k].as_ref()
    }

    pub fn joint_cloud_mut(&mut self, k: usize) -> &mut Option<ParticleJoint> {
        &mut self.joints[k]
    }
}

impl PosePredictor for ParticlePredictor {
    fn predict(&self, tracklet: &Tracklet, _frame_index: usize) -> Result<Pose> {
        let (_, last) = tracklet.last().ok_or(Error::EmptyHistory)?;
        let joints = last
            .joints()
            .iter()
            .enumerate()
            .map(|(k, j)| {
                let mut out = *j;
                if let Some(cloud) = &self.joints[k] {
                    let m = cloud.mean();
                    out.position = crate::types::Point2::new(m[0] + m[2], m[1] + m[3]);
                }
                out
            })
            .collect();
        Pose::new(joints)
    }

    fn observe(&mut self, pose: &Pose, frame_index: usize) {
        for (k, j) in pose.joints().iter().enumerate() {
            if !j.visible {
                if let Some(cloud) = &mut self.joints[k] {
                    cloud.propagate(self.q_sigma, &mut self.rng);
                }
                continue;
            }
            let (zx, zy) = (j.position.x, j.position.y);
            match &mut self.joints[k] {
                Some(cloud) => {
                    cloud.propagate(self.q_sigma, &mut self.rng);
                    cloud.reweight(zx, zy, self.measurement_noise);
                    if cloud.effective_sample_size() < self.n as f64 / 2.0 {
                        cloud.resample(&mut self.rng);
                    }
                }
                slot @ None => {
                    if let Some((pf, px, py)) = self.pending[k] {
                        let dt = (frame_index.saturating_sub(pf)).max(1) as f64;
                        let vx = (zx - px) / dt;
                        let vy = (zy - py) / dt;
                        let pos_sigma = self.measurement_noise.sqrt();
                        // Differencing noise on the velocity estimate.
                        let vel_sigma =
                            (2.0 * self.measurement_noise).sqrt() / dt + self.q_sigma;
                        let pos = Normal::new(0.0, pos_sigma.max(1e-12)).unwrap();
                        let vel = Normal::new(0.0, vel_sigma.max(1e-12)).unwrap();
                        let particles = (0..self.n)
                            .map(|_| {
                                [
                                    zx + pos.sample(&mut self.rng),
                                    zy + pos.sample(&mut self.rng),
                                    vx + vel.sample(&mut self.rng),
                                    vy + vel.sample(&mut self.rng),
                                ]
                            })
                            .collect();
                        *slot = Some(ParticleJoint {
                            particles,
                            weights: vec![1.0 / self.n as f64; self.n],
                        });
                        self.pending[k] = None;
                    } else {
                        self.pending[k] = Some((frame_index, zx, zy));
                    }
                }
            }
        }
    }

    fn coast(&mut self, _frame_index: usize) {
        for cloud in self.joints.iter_mut().flatten() {
            cloud.propagate(self.q_sigma, &mut self.rng);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Point2;

    fn pose_at(points: &[(f64, f64)]) -> Pose {
        Pose::new(
            points
                .iter()
                .enumerate()
                .map(|(k, &(x, y))| Joint::new(Point2::new(x, y), 0.9, k, true))
                .collect(),
        )
        .unwrap()
    }

    fn line_tracklet(frames: usize, vx: f64, vy: f64) -> Tracklet {
        let mut t = Tracklet::new(0, 10);
        for f in 0..frames {
            let x = 10.0 + vx * f as f64;
            let y = 20.0 + vy * f as f64;
            t.push(f, pose_at(&[(x, y)])).unwrap();
        }
        t
    }

    #[test]
    fn zero_velocity_returns_last_pose() {
        let t = line_tracklet(4, 2.0, -1.0);
        let p = ZeroVelocity.predict(&t, 4).unwrap();
        assert_eq!(p, t.last().unwrap().1);
    }

    #[test]
    fn zero_velocity_single_entry() {
        let t = line_tracklet(1, 0.0, 0.0);
        let p = ZeroVelocity.predict(&t, 1).unwrap();
        assert_eq!(p.joint(0).position, Point2::new(10.0, 20.0));
    }

    #[test]
    fn zero_velocity_error_equals_displacement_on_random_tracklets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let vx = rng.gen_range(-4.0..4.0);
            let vy = rng.gen_range(-4.0..4.0);
            let t = line_tracklet(5, vx, vy);
            let pred = ZeroVelocity.predict(&t, 5).unwrap();
            // Oracle: last element of the history.
            assert_eq!(pred, t.history().last().unwrap().1);
            let truth = Point2::new(10.0 + vx * 5.0, 20.0 + vy * 5.0);
            let err = pred.joint(0).position.distance(truth);
            assert!((err - (vx * vx + vy * vy).sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_velocity_empty_history_errors() {
        let t = Tracklet::new(0, 3);
        assert!(matches!(
            ZeroVelocity.predict(&t, 0),
            Err(Error::EmptyHistory)
        ));
    }

    #[test]
    fn kalman_noiseless_line_converges() {
        let mut kf = KalmanPredictor::new(1, 1e-12, 1e-12);
        let mut t = Tracklet::new(0, 10);
        for f in 0..4 {
            let pose = pose_at(&[(5.0 + 3.0 * f as f64, 7.0 - 2.0 * f as f64)]);
            kf.observe(&pose, f);
            t.push(f, pose).unwrap();
        }
        let pred = kf.predict(&t, 4).unwrap();
        let truth = Point2::new(5.0 + 3.0 * 4.0, 7.0 - 2.0 * 4.0);
        assert!(pred.joint(0).position.distance(truth) < 1e-9);
    }

    #[test]
    fn kalman_stationary_joint_predicts_position() {
        let mut kf = KalmanPredictor::new(1, 1e-9, 1e-9);
        let mut t = Tracklet::new(0, 10);
        for f in 0..5 {
            let pose = pose_at(&[(42.0, 17.0)]);
            kf.observe(&pose, f);
            t.push(f, pose).unwrap();
        }
        let pred = kf.predict(&t, 5).unwrap();
        assert!(pred.joint(0).position.distance(Point2::new(42.0, 17.0)) < 1e-9);
    }

    /// Textbook-equation oracle: re-run the same updates with explicit
    /// matrix arithmetic written independently.
    #[test]
    fn kalman_matches_equation_oracle_on_noisy_track() {
        let q = 0.7;
        let r = 2.3;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let measurements: Vec<(f64, f64)> = (0..12)
            .map(|f| {
                (
                    3.0 * f as f64 + rng.gen_range(-1.0..1.0),
                    -2.0 * f as f64 + rng.gen_range(-1.0..1.0),
                )
            })
            .collect();

        let mut kf = KalmanPredictor::new(1, q, r);
        for (f, &(zx, zy)) in measurements.iter().enumerate() {
            kf.observe(&pose_at(&[(zx, zy)]), f);
        }
        let got = kf.joint_state(0).unwrap();

        // Oracle via generic n x n matrix ops.
        let f_mat = vec![
            vec![1.0, 0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        let matmul = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let n = a.len();
            let m = b[0].len();
            let kk = b.len();
            let mut out = vec![vec![0.0; m]; n];
            for i in 0..n {
                for k in 0..kk {
                    for j in 0..m {
                        out[i][j] += a[i][k] * b[k][j];
                    }
                }
            }
            out
        };
        let transpose = |a: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let mut out = vec![vec![0.0; a.len()]; a[0].len()];
            for i in 0..a.len() {
                for j in 0..a[0].len() {
                    out[j][i] = a[i][j];
                }
            }
            out
        };
        let mut x = vec![measurements[0].0, measurements[0].1, 0.0, 0.0];
        let mut p = vec![
            vec![r, 0.0, 0.0, 0.0],
            vec![0.0, r, 0.0, 0.0],
            vec![0.0, 0.0, 100.0, 0.0],
            vec![0.0, 0.0, 0.0, 100.0],
        ];
        for &(zx, zy) in &measurements[1..] {
            // Predict.
            let new_x = vec![x[0] + x[2], x[1] + x[3], x[2], x[3]];
            x = new_x;
            p = matmul(&matmul(&f_mat, &p), &transpose(&f_mat));
            let qm = [
                [0.25, 0.0, 0.5, 0.0],
                [0.0, 0.25, 0.0, 0.5],
                [0.5, 0.0, 1.0, 0.0],
                [0.0, 0.5, 0.0, 1.0],
            ];
            for i in 0..4 {
                for j in 0..4 {
                    p[i][j] += q * qm[i][j];
                }
            }
            // Update.
            let s = [
                [p[0][0] + r, p[0][1]],
                [p[1][0], p[1][1] + r],
            ];
            let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
            let sinv = [
                [s[1][1] / det, -s[0][1] / det],
                [-s[1][0] / det, s[0][0] / det],
            ];
            let mut k_gain = vec![vec![0.0; 2]; 4];
            for i in 0..4 {
                for j in 0..2 {
                    k_gain[i][j] = p[i][0] * sinv[0][j] + p[i][1] * sinv[1][j];
                }
            }
            let innov = [zx - x[0], zy - x[1]];
            for i in 0..4 {
                x[i] += k_gain[i][0] * innov[0] + k_gain[i][1] * innov[1];
            }
            let mut new_p = vec![vec![0.0; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    new_p[i][j] =
                        p[i][j] - k_gain[i][0] * p[0][j] - k_gain[i][1] * p[1][j];
                }
            }
            // Same symmetrization as the implementation.
            for i in 0..4 {
                for j in (i + 1)..4 {
                    let avg = (new_p[i][j] + new_p[j][i]) / 2.0;
                    new_p[i][j] = avg;
                    new_p[j][i] = avg;
                }
            }
            p = new_p;
        }
        for i in 0..4 {
            assert!(
                (got.state[i] - x[i]).abs() < 1e-10,
                "state[{i}]: {} vs {}",
                got.state[i],
                x[i]
            );
            for j in 0..4 {
                assert!((got.covariance[i][j] - p[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn kalman_covariance_stays_symmetric_over_1000_steps() {
        let mut kf = KalmanPredictor::new(1, 1.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for f in 0..1000 {
            if rng.gen_bool(0.8) {
                let pose = pose_at(&[(
                    f as f64 + rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                )]);
                kf.observe(&pose, f);
            } else {
                kf.coast(f);
            }
            if let Some(s) = kf.joint_state(0) {
                for i in 0..4 {
                    for j in 0..4 {
                        assert!((s.covariance[i][j] - s.covariance[j][i]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn particle_zero_noise_from_truth_is_exact_cv() {
        let mut pf = ParticlePredictor::new(1, 64, 0.0, 1.0, 7);
        *pf.joint_cloud_mut(0) = Some(ParticleJoint::from_state(10.0, 20.0, 3.0, -1.0, 64));
        let mut t = Tracklet::new(0, 5);
        t.push(0, pose_at(&[(10.0, 20.0)])).unwrap();
        let pred = pf.predict(&t, 1).unwrap();
        assert!(pred.joint(0).position.distance(Point2::new(13.0, 19.0)) < 1e-12);
        // Propagate without noise: still exact CV.
        pf.coast(1);
        let pred = pf.predict(&t, 2).unwrap();
        assert!(pred.joint(0).position.distance(Point2::new(16.0, 18.0)) < 1e-12);
    }

    #[test]
    fn particle_resampling_preserves_count_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cloud = ParticleJoint::spread(0.0, 0.0, 2.0, 1.0, 128, &mut rng);
        cloud.reweight(1.0, -1.0, 2.0);
        cloud.resample(&mut rng);
        assert_eq!(cloud.particles.len(), 128);
        assert!((cloud.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(cloud.weights.iter().all(|&w| (w - 1.0 / 128.0).abs() < 1e-15));
    }

    #[test]
    fn particle_all_zero_weights_reset_uniform() {
        let mut cloud = ParticleJoint::from_state(0.0, 0.0, 0.0, 0.0, 8);
        cloud.weights.fill(0.0);
        cloud.reweight(5.0, 5.0, 1.0);
        assert!(cloud.weights.iter().all(|&w| (w - 0.125).abs() < 1e-15));
    }

    #[test]
    fn particle_linear_track_error_below_measurement_sigma() {
        // Monte-Carlo over 5 seeds: prediction error on a linear track with
        // noisy measurements stays below the measurement noise sigma on
        // average across seeds.
        let r_sigma = 2.0;
        let mut seed_means = Vec::new();
        for seed in 0..5u64 {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let normal = Normal::new(0.0, r_sigma).unwrap();
            let mut pf = ParticlePredictor::new(1, 256, 0.3, r_sigma * r_sigma, seed);
            let mut t = Tracklet::new(0, 5);
            let mut errs = Vec::new();
            for f in 0..20 {
                let truth = Point2::new(5.0 + 4.0 * f as f64, 100.0 - 2.0 * f as f64);
                // Skip the initialization transient: the two-point velocity
                // estimate needs a few updates to tighten.
                if f >= 6 {
                    let pred = pf.predict(&t, f).unwrap();
                    errs.push(pred.joint(0).position.distance(truth));
                }
                let z = pose_at(&[(
                    truth.x + normal.sample(&mut noise_rng),
                    truth.y + normal.sample(&mut noise_rng),
                )]);
                pf.observe(&z, f);
                t.push(f, z).unwrap();
            }
            seed_means.push(errs.iter().sum::<f64>() / errs.len() as f64);
        }
        let overall = seed_means.iter().sum::<f64>() / seed_means.len() as f64;
        assert!(
            overall < r_sigma,
            "mean error over seeds {overall}: {seed_means:?}"
        );
    }

    #[test]
    fn predictors_are_pure_given_state() {
        let t = line_tracklet(4, 1.5, 0.5);
        let mut kf = KalmanPredictor::new(1, 1.0, 2.0);
        for (f, (_, p)) in t.history().enumerate() {
            kf.observe(p, f);
        }
        let a = kf.predict(&t, 4).unwrap();
        let b = kf.predict(&t, 4).unwrap();
        assert_eq!(a, b);

        let mut pf = ParticlePredictor::new(1, 64, 0.5, 2.0, 9);
        for (f, (_, p)) in t.history().enumerate() {
            pf.observe(p, f);
        }
        let a = pf.predict(&t, 4).unwrap();
        let b = pf.predict(&t, 4).unwrap();
        assert_eq!(a, b);
    }
}
