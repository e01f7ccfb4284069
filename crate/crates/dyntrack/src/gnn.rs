//! Graph dynamics model: tracklet joints become graph nodes, attention
//! message passing runs over alternating spatial/temporal edges, and a
//! classification head scores every candidate cell of a propagated search
//! box to form next-frame joint heatmaps.
//!
//! Gradients are written out explicitly (no tape); `train_step` and the
//! finite-difference checks in the test suites keep them honest.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{decode_argmax, GaussianConfig};
use crate::nn::{softmax, softmax_backward, Activation, AdamState, Mat, Mlp, MlpCache};
use crate::types::{pose_to_box, BoundingBox, HeatmapStack, Point2, Pose};

/// Model and candidate-grid hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    /// Joint types per pose (K).
    pub joint_count: usize,
    /// Node feature width (D).
    pub feature_dim: usize,
    /// Type-embedding width (D_c).
    pub type_dim: usize,
    /// Message-passing layers (L), alternating spatial/temporal from spatial.
    pub layers: usize,
    /// Visual cue width; 0 disables the visual encoder.
    pub visual_dim: usize,
    pub activation: Activation,
    /// Fixed divisor applied to centered positions so encoder inputs sit
    /// near unit scale.
    pub position_scale: f64,
    /// Additionally divide positions by the last-pose box diagonal.
    pub normalize_scale: bool,
    /// Heatmap cell size in frame pixels (shared with the estimator stacks).
    pub cell_px: f64,
    /// Candidate stride in cells over the search box.
    pub grid_stride: usize,
    /// Gaussian sigma (cells) of training targets.
    pub sigma: f64,
    /// Safety cap on candidate cells; the stride doubles until it fits.
    pub max_cells: usize,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            joint_count: 15,
            feature_dim: 64,
            type_dim: 16,
            layers: 4,
            visual_dim: 0,
            activation: Activation::Relu,
            position_scale: 100.0,
            normalize_scale: false,
            cell_px: 4.0,
            grid_stride: 1,
            sigma: 3.0,
            max_cells: 8192,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.joint_count == 0
            || self.feature_dim == 0
            || self.type_dim == 0
            || self.layers == 0
        {
            return Err(Error::ConfigInvalid(
                "joint_count, feature_dim, type_dim, layers must be positive".into(),
            ));
        }
        if !(self.cell_px > 0.0) || !(self.sigma > 0.0) || !(self.position_scale > 0.0) {
            return Err(Error::ConfigInvalid(
                "cell_px, sigma, position_scale must be positive".into(),
            ));
        }
        if self.grid_stride == 0 || self.max_cells == 0 {
            return Err(Error::ConfigInvalid(
                "grid_stride and max_cells must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Supplies per-point visual features; `None` hooks run the model on
/// positions and types only.
pub trait FeatureProvider: Sync {
    fn dim(&self) -> usize;
    fn feature(&self, frame_index: usize, point: Point2) -> Vec<f64>;
}

pub type Hook<'a> = Option<&'a dyn FeatureProvider>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Spatial,
    Temporal,
}

/// Node identity inside one graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    HistoryJoint {
        frame_slot: usize,
        joint_type: usize,
    },
    CandidateCell {
        row: usize,
        col: usize,
    },
}

impl NodeKind {
    /// Compact label for the attention export.
    pub fn label(&self) -> String {
        match self {
            NodeKind::HistoryJoint {
                frame_slot,
                joint_type,
            } => format!("h:{frame_slot}:{joint_type}"),
            NodeKind::CandidateCell { row, col } => format!("c:{row}:{col}"),
        }
    }
}

/// Graph over joint/candidate nodes with separate spatial and temporal
/// adjacency. Neighbor lists are sorted by node index so summation order is
/// stable.
#[derive(Debug, Clone)]
pub struct PoseGraph {
    pub kinds: Vec<NodeKind>,
    pub features: Vec<Vec<f64>>,
    pub spatial: Vec<Vec<usize>>,
    pub temporal: Vec<Vec<usize>>,
}

impl PoseGraph {
    pub fn node_count(&self) -> usize {
        self.kinds.len()
    }

    /// Undirected edge count of the given kind.
    pub fn edge_count(&self, kind: EdgeKind) -> usize {
        let adj = match kind {
            EdgeKind::Spatial => &self.spatial,
            EdgeKind::Temporal => &self.temporal,
        };
        adj.iter().map(|n| n.len()).sum::<usize>() / 2
    }

    fn add_edge(adj: &mut [Vec<usize>], a: usize, b: usize) {
        adj[a].push(b);
        adj[b].push(a);
    }

    fn sort_adjacency(&mut self) {
        for n in self.spatial.iter_mut().chain(self.temporal.iter_mut()) {
            n.sort_unstable();
        }
    }
}

/// One attention message-passing layer: query/key/value projections plus the
/// residual update MLP, bound to one edge kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub kind_is_spatial: bool,
    pub query: Mlp,
    pub key: Mlp,
    pub value: Mlp,
    pub update: Mlp,
}

impl AttentionLayer {
    pub fn kind(&self) -> EdgeKind {
        if self.kind_is_spatial {
            EdgeKind::Spatial
        } else {
            EdgeKind::Temporal
        }
    }
}

/// All learnable parameters of the dynamics model.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    pub cfg: GnnConfig,
    pub pos_encoder: Mlp,
    pub type_encoder: Mlp,
    pub vis_encoder: Option<Mlp>,
    pub type_table: Mat,
    pub layers: Vec<AttentionLayer>,
    pub head: Mlp,
}

impl DynamicsModel {
    /// Zero-parameter model of the configured shape.
    pub fn zeros(cfg: GnnConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.feature_dim;
        let act = cfg.activation;
        let layers = (0..cfg.layers)
            .map(|l| {
                Ok(AttentionLayer {
                    kind_is_spatial: l % 2 == 0,
                    query: Mlp::zeros(&[d, d], Activation::Identity)?,
                    key: Mlp::zeros(&[d, d], Activation::Identity)?,
                    value: Mlp::zeros(&[d, d], Activation::Identity)?,
                    update: Mlp::zeros(&[2 * d, d, d], act)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pos_encoder: Mlp::zeros(&[3, d, d], act)?,
            type_encoder: Mlp::zeros(&[cfg.type_dim, d, d], act)?,
            vis_encoder: if cfg.visual_dim > 0 {
                Some(Mlp::zeros(&[cfg.visual_dim, d, d], act)?)
            } else {
                None
            },
            type_table: Mat::zeros(cfg.joint_count, cfg.type_dim),
            layers,
            head: Mlp::zeros(&[d, d, cfg.joint_count], act)?,
            cfg,
        })
    }

    /// Randomly initialized model, deterministic in the seed.
    pub fn init(cfg: GnnConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::nn::init_mlp(&mut model.pos_encoder, &mut rng);
        crate::nn::init_mlp(&mut model.type_encoder, &mut rng);
        if let Some(vis) = &mut model.vis_encoder {
            crate::nn::init_mlp(vis, &mut rng);
        }
        for v in model.type_table.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for layer in &mut model.layers {
            crate::nn::init_mlp(&mut layer.query, &mut rng);
            crate::nn::init_mlp(&mut layer.key, &mut rng);
            crate::nn::init_mlp(&mut layer.value, &mut rng);
            crate::nn::init_mlp(&mut layer.update, &mut rng);
        }
        crate::nn::init_mlp(&mut model.head, &mut rng);
        Ok(model)
    }

    /// Same-shape zero model used as a gradient accumulator.
    pub fn zeros_like(&self) -> DynamicsModel {
        Self::zeros(self.cfg.clone()).expect("own config is valid")
    }

    /// Parameter blocks in canonical order: encoders, type table, layer
    /// projections, head.
    pub fn param_blocks(&self) -> Vec<&[f64]> {
        let mut blocks: Vec<&[f64]> = Vec::new();
        for l in &self.pos_encoder.layers {
            blocks.push(l.weights.data());
            blocks.push(&l.bias);
        }
        for l in &self.type_encoder.layers {
            blocks.push(l.weights.data());
            blocks.push(&l.bias);
        }
        if let Some(v) = &self.vis_encoder {
            for l in &v.layers {
                blocks.push(l.weights.data());
                blocks.push(&l.bias);
            }
        }
        blocks.push(self.type_table.data());
        for layer in &self.layers {
            for mlp in [&layer.query, &layer.key, &layer.value, &layer.update] {
                for l in &mlp.layers {
                    blocks.push(l.weights.data());
                    blocks.push(&l.bias);
                }
            }
        }
        for l in &self.head.layers {
            blocks.push(l.weights.data());
            blocks.push(&l.bias);
        }
        blocks
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut blocks: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.pos_encoder.layers {
            blocks.push(l.weights.data_mut());
            blocks.push(&mut l.bias);
        }
        for l in &mut self.type_encoder.layers {
            blocks.push(l.weights.data_mut());
            blocks.push(&mut l.bias);
        }
        if let Some(v) = &mut self.vis_encoder {
            for l in &mut v.layers {
                blocks.push(l.weights.data_mut());
                blocks.push(&mut l.bias);
            }
        }
        blocks.push(self.type_table.data_mut());
        for layer in &mut self.layers {
            for mlp in [
                &mut layer.query,
                &mut layer.key,
                &mut layer.value,
                &mut layer.update,
            ] {
                for l in &mut mlp.layers {
                    blocks.push(l.weights.data_mut());
                    blocks.push(&mut l.bias);
                }
            }
        }
        for l in &mut self.head.layers {
            blocks.push(l.weights.data_mut());
            blocks.push(&mut l.bias);
        }
        blocks
    }

    pub fn block_lens(&self) -> Vec<usize> {
        self.param_blocks().iter().map(|b| b.len()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_blocks().iter().map(|b| b.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in self.param_blocks() {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "flat params {} vs model {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for b in self.param_blocks_mut() {
            b.copy_from_slice(&flat[at..at + b.len()]);
            at += b.len();
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Position normalization and joint encoding
// ---------------------------------------------------------------------------

/// Center of the last tracked pose, the reference every position in the
/// graph is normalized against.
pub fn reference_center(last_pose: &Pose) -> Result<Point2> {
    Ok(pose_to_box(last_pose, 0.0)?.center)
}

/// Translates by the reference center and divides by the fixed unit scale;
/// also by the reference box diagonal when `normalize_scale` is set.
pub fn normalize_position(
    p: Point2,
    reference: Point2,
    ref_diagonal: f64,
    cfg: &GnnConfig,
) -> (f64, f64) {
    let mut s = cfg.position_scale;
    if cfg.normalize_scale {
        s *= ref_diagonal.max(1.0) / 100.0;
    }
    ((p.x - reference.x) / s, (p.y - reference.y) / s)
}

struct EncodeCache {
    pos: Option<MlpCache>,
    type_index: Option<usize>,
    type_cache: Option<MlpCache>,
    vis: Option<MlpCache>,
    cue_count: usize,
}

fn encode_joint_cached(
    model: &DynamicsModel,
    visual: Option<&[f64]>,
    pos: Option<[f64; 3]>,
    type_index: Option<usize>,
) -> Result<(Vec<f64>, EncodeCache)> {
    let d = model.cfg.feature_dim;
    let mut sum = vec![0.0; d];
    let mut cache = EncodeCache {
        pos: None,
        type_index: None,
        type_cache: None,
        vis: None,
        cue_count: 0,
    };
    if let Some(p) = pos {
        let (y, c) = model.pos_encoder.forward(&p)?;
        for (s, v) in sum.iter_mut().zip(&y) {
            *s += v;
        }
        cache.pos = Some(c);
        cache.cue_count += 1;
    }
    if let Some(t) = type_index {
        if t >= model.cfg.joint_count {
            return Err(Error::DimMismatch(format!(
                "type index {t} >= joint count {}",
                model.cfg.joint_count
            )));
        }
        let row: Vec<f64> = (0..model.cfg.type_dim)
            .map(|j| model.type_table.get(t, j))
            .collect();
        let (y, c) = model.type_encoder.forward(&row)?;
        for (s, v) in sum.iter_mut().zip(&y) {
            *s += v;
        }
        cache.type_index = Some(t);
        cache.type_cache = Some(c);
        cache.cue_count += 1;
    }
    if let Some(v) = visual {
        let enc = model
            .vis_encoder
            .as_ref()
            .ok_or_else(|| Error::DimMismatch("visual cue without visual encoder".into()))?;
        let (y, c) = enc.forward(v)?;
        for (s, val) in sum.iter_mut().zip(&y) {
            *s += val;
        }
        cache.vis = Some(c);
        cache.cue_count += 1;
    }
    if cache.cue_count == 0 {
        return Err(Error::NoCues);
    }
    let inv = 1.0 / cache.cue_count as f64;
    for s in &mut sum {
        *s *= inv;
    }
    Ok((sum, cache))
}

/// Average-pool of the per-cue encoder outputs over whichever cues are
/// present.
pub fn encode_joint(
    model: &DynamicsModel,
    visual: Option<&[f64]>,
    pos: Option<[f64; 3]>,
    type_index: Option<usize>,
) -> Result<Vec<f64>> {
    Ok(encode_joint_cached(model, visual, pos, type_index)?.0)
}

fn encode_backward(
    model: &DynamicsModel,
    cache: &EncodeCache,
    upstream: &[f64],
    grads: &mut DynamicsModel,
) -> Result<()> {
    let inv = 1.0 / cache.cue_count as f64;
    let du: Vec<f64> = upstream.iter().map(|v| v * inv).collect();
    if let Some(c) = &cache.pos {
        model.pos_encoder.backward(c, &du, &mut grads.pos_encoder)?;
    }
    if let (Some(t), Some(c)) = (cache.type_index, &cache.type_cache) {
        let drow = model
            .type_encoder
            .backward(c, &du, &mut grads.type_encoder)?;
        for (j, g) in drow.iter().enumerate() {
            let cur = grads.type_table.get(t, j);
            grads.type_table.set(t, j, cur + g);
        }
    }
    if let Some(c) = &cache.vis {
        let enc = model.vis_encoder.as_ref().expect("cached vis cue");
        let genc = grads.vis_encoder.as_mut().expect("grads mirror model");
        enc.backward(c, &du, genc)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

/// Complete within-frame graphs plus complete bipartite graphs between
/// consecutive frames, over every history joint. Invisible joints still
/// appear as nodes; their confidence carries the signal.
pub fn build_history_graph(
    history: &[Pose],
    frame_indices: &[usize],
    model: &DynamicsModel,
    hook: Hook,
) -> Result<PoseGraph> {
    let (graph, _) = build_history_graph_cached(history, frame_indices, model, hook)?;
    Ok(graph)
}

fn build_history_graph_cached(
    history: &[Pose],
    frame_indices: &[usize],
    model: &DynamicsModel,
    hook: Hook,
) -> Result<(PoseGraph, Vec<EncodeCache>)> {
    if history.len() < 2 {
        return Err(Error::EmptyHistory);
    }
    if frame_indices.len() != history.len() {
        return Err(Error::DimMismatch(
            "frame indices must match history length".into(),
        ));
    }
    let k = model.cfg.joint_count;
    for p in history {
        if p.joint_count() != k {
            return Err(Error::ShapeMismatch(format!(
                "pose with {} joints, model expects {k}",
                p.joint_count()
            )));
        }
    }
    let last = history.last().unwrap();
    let reference = reference_center(last)?;
    let ref_diag = pose_to_box(last, 0.0)?.diagonal();

    let frames = history.len();
    let n = frames * k;
    let mut kinds = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    for (slot, pose) in history.iter().enumerate() {
        for j in pose.joints() {
            let (nx, ny) = normalize_position(j.position, reference, ref_diag, &model.cfg);
            let vis_vec = hook.map(|h| h.feature(frame_indices[slot], j.position));
            let (f, c) = encode_joint_cached(
                model,
                vis_vec.as_deref(),
                Some([nx, ny, j.confidence]),
                Some(j.joint_type),
            )?;
            kinds.push(NodeKind::HistoryJoint {
                frame_slot: slot,
                joint_type: j.joint_type,
            });
            features.push(f);
            caches.push(c);
        }
    }
    let mut graph = PoseGraph {
        kinds,
        features,
        spatial: vec![Vec::new(); n],
        temporal: vec![Vec::new(); n],
    };
    for slot in 0..frames {
        let base = slot * k;
        for a in 0..k {
            for b in (a + 1)..k {
                PoseGraph::add_edge(&mut graph.spatial, base + a, base + b);
            }
        }
        if slot + 1 < frames {
            let next = (slot + 1) * k;
            for a in 0..k {
                for b in 0..k {
                    PoseGraph::add_edge(&mut graph.temporal, base + a, next + b);
                }
            }
        }
    }
    graph.sort_adjacency();
    Ok((graph, caches))
}

/// Scales a box by the fixed search factors: width x2, height x1.5, same
/// center.
pub fn scale_search_box(b: &BoundingBox) -> BoundingBox {
    BoundingBox {
        center: b.center,
        width: b.width * 2.0,
        height: b.height * 1.5,
    }
}

/// Propagates the last tracked pose's box to the current frame and scales it
/// up to cover fast motion. Clipped to the frame when bounds are given, with
/// a 1x1 minimum.
pub fn propagate_search_box(
    last_pose: &Pose,
    frame_size: Option<(f64, f64)>,
) -> Result<BoundingBox> {
    let b = scale_search_box(&pose_to_box(last_pose, 0.0)?);
    Ok(match frame_size {
        Some((w, h)) => b.clip_to_frame(w, h),
        None => b,
    })
}

/// Candidate grid geometry for a search box: square cells of
/// `cell_px * stride` pixels covering the box, crop snapped outward to whole
/// cells. Returns (rows, cols, crop, effective stride).
pub fn candidate_grid(
    search_box: &BoundingBox,
    cfg: &GnnConfig,
) -> Result<(usize, usize, BoundingBox, usize)> {
    if !(search_box.width > 0.0 && search_box.height > 0.0) {
        return Err(Error::DegenerateBox);
    }
    let mut stride = cfg.grid_stride;
    loop {
        let cell = cfg.cell_px * stride as f64;
        let rows = (search_box.height / cell).ceil().max(1.0) as usize;
        let cols = (search_box.width / cell).ceil().max(1.0) as usize;
        if rows * cols <= cfg.max_cells {
            let crop = BoundingBox {
                center: search_box.center,
                width: cols as f64 * cell,
                height: rows as f64 * cell,
            };
            return Ok((rows, cols, crop, stride));
        }
        stride *= 2;
    }
}

/// Candidate-cell nodes over the search box, each wired (temporal edges) to
/// all joints of the last pose; the last-pose joints are mutually connected
/// (spatial edges). When `joint_features` is given the joint nodes reuse
/// those vectors instead of re-encoding, which is how the aggregated history
/// features enter the prediction pass.
pub fn build_prediction_graph(
    last_pose: &Pose,
    search_box: &BoundingBox,
    model: &DynamicsModel,
    hook: Hook,
    frame_index: usize,
    joint_features: Option<&[Vec<f64>]>,
) -> Result<PoseGraph> {
    let (graph, _, _) = build_prediction_graph_cached(
        last_pose,
        search_box,
        model,
        hook,
        frame_index,
        joint_features,
    )?;
    Ok(graph)
}

#[allow(clippy::type_complexity)]
fn build_prediction_graph_cached(
    last_pose: &Pose,
    search_box: &BoundingBox,
    model: &DynamicsModel,
    hook: Hook,
    frame_index: usize,
    joint_features: Option<&[Vec<f64>]>,
) -> Result<(PoseGraph, Vec<Option<EncodeCache>>, HeatmapStack)> {
    let k = model.cfg.joint_count;
    if last_pose.joint_count() != k {
        return Err(Error::ShapeMismatch(format!(
            "pose with {} joints, model expects {k}",
            last_pose.joint_count()
        )));
    }
    let (rows, cols, crop, _) = candidate_grid(search_box, &model.cfg)?;
    let template = HeatmapStack::zeros(k, rows, cols, crop)?;
    let reference = reference_center(last_pose)?;
    let ref_diag = pose_to_box(last_pose, 0.0)?.diagonal();

    let n = k + rows * cols;
    let mut kinds = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    let mut caches: Vec<Option<EncodeCache>> = Vec::with_capacity(n);

    for j in last_pose.joints() {
        kinds.push(NodeKind::HistoryJoint {
            frame_slot: 0,
            joint_type: j.joint_type,
        });
        match joint_features {
            Some(fs) => {
                features.push(fs[j.joint_type].clone());
                caches.push(None);
            }
            None => {
                let (nx, ny) = normalize_position(j.position, reference, ref_diag, &model.cfg);
                let vis_vec = hook.map(|h| h.feature(frame_index, j.position));
                let (f, c) = encode_joint_cached(
                    model,
                    vis_vec.as_deref(),
                    Some([nx, ny, j.confidence]),
                    Some(j.joint_type),
                )?;
                features.push(f);
                caches.push(Some(c));
            }
        }
    }
    for row in 0..rows {
        for col in 0..cols {
            let p = template.grid_to_frame(row, col)?;
            let (nx, ny) = normalize_position(p, reference, ref_diag, &model.cfg);
            let vis_vec = hook.map(|h| h.feature(frame_index, p));
            // Candidate confidence is fixed to 1; the type cue is omitted.
            let (f, c) =
                encode_joint_cached(model, vis_vec.as_deref(), Some([nx, ny, 1.0]), None)?;
            kinds.push(NodeKind::CandidateCell { row, col });
            features.push(f);
            caches.push(Some(c));
        }
    }
    let mut graph = PoseGraph {
        kinds,
        features,
        spatial: vec![Vec::new(); n],
        temporal: vec![Vec::new(); n],
    };
    for a in 0..k {
        for b in (a + 1)..k {
            PoseGraph::add_edge(&mut graph.spatial, a, b);
        }
    }
    for c in k..n {
        for a in 0..k {
            PoseGraph::add_edge(&mut graph.temporal, a, c);
        }
    }
    graph.sort_adjacency();
    Ok((graph, caches, template))
}

// ---------------------------------------------------------------------------
// Attention message passing
// ---------------------------------------------------------------------------

/// Attention over one center node's neighbors: softmax of query-key dot
/// products weighting the neighbor values. Neighbors are sorted by id so the
/// summation order is stable under permutation. Returns the message and the
/// attention weights (in sorted-neighbor order).
pub fn attention_aggregate(
    center: &[f64],
    neighbors: &[(usize, &[f64])],
    layer: &AttentionLayer,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if neighbors.is_empty() {
        return Err(Error::NoNeighbors);
    }
    let mut sorted: Vec<&(usize, &[f64])> = neighbors.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    let q = layer.query.eval(center)?;
    let mut scores = Vec::with_capacity(sorted.len());
    let mut values = Vec::with_capacity(sorted.len());
    for (_, nf) in &sorted {
        let key = layer.key.eval(nf)?;
        values.push(layer.value.eval(nf)?);
        scores.push(q.iter().zip(&key).map(|(a, b)| a * b).sum::<f64>());
    }
    let alphas = softmax(&scores)?;
    let mut message = vec![0.0; layer.value.out_dim()];
    for (a, v) in alphas.iter().zip(&values) {
        for (m, x) in message.iter_mut().zip(v) {
            *m += a * x;
        }
    }
    Ok((message, alphas))
}

struct LayerCache {
    /// Node features entering this layer.
    features_in: Vec<Vec<f64>>,
    /// Per center node: query vector and its projection cache.
    q: Vec<Option<(Vec<f64>, MlpCache)>>,
    /// Per neighbor node: key/value vectors and caches.
    kv: Vec<Option<(Vec<f64>, MlpCache, Vec<f64>, MlpCache)>>,
    /// Per center node: attention weights over its sorted neighbor list.
    att: Vec<Option<Vec<f64>>>,
    /// Per center node: update MLP cache.
    upd: Vec<Option<MlpCache>>,
}

fn layer_forward(
    graph: &PoseGraph,
    features_in: Vec<Vec<f64>>,
    layer: &AttentionLayer,
) -> Result<(Vec<Vec<f64>>, LayerCache)> {
    let adj = match layer.kind() {
        EdgeKind::Spatial => &graph.spatial,
        EdgeKind::Temporal => &graph.temporal,
    };
    let n = features_in.len();
    let d = layer.value.out_dim();
    let mut is_neighbor = vec![false; n];
    for nbrs in adj.iter() {
        for &m in nbrs {
            is_neighbor[m] = true;
        }
    }
    let mut kv: Vec<Option<(Vec<f64>, MlpCache, Vec<f64>, MlpCache)>> = Vec::with_capacity(n);
    for (m, flag) in is_neighbor.iter().enumerate() {
        if *flag {
            let (kvec, kc) = layer.key.forward(&features_in[m])?;
            let (vvec, vc) = layer.value.forward(&features_in[m])?;
            kv.push(Some((kvec, kc, vvec, vc)));
        } else {
            kv.push(None);
        }
    }
    let mut q: Vec<Option<(Vec<f64>, MlpCache)>> = Vec::with_capacity(n);
    let mut att: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut upd: Vec<Option<MlpCache>> = Vec::with_capacity(n);
    let mut features_out = Vec::with_capacity(n);
    for node in 0..n {
        if adj[node].is_empty() {
            // No edges of this kind: pure residual skip.
            q.push(None);
            att.push(None);
            upd.push(None);
            features_out.push(features_in[node].clone());
            continue;
        }
        let (qvec, qc) = layer.query.forward(&features_in[node])?;
        let mut scores = Vec::with_capacity(adj[node].len());
        for &m in &adj[node] {
            let (kvec, _, _, _) = kv[m].as_ref().expect("neighbor has kv");
            scores.push(qvec.iter().zip(kvec).map(|(a, b)| a * b).sum::<f64>());
        }
        let alphas = softmax(&scores)?;
        let mut message = vec![0.0; d];
        for (a, &m) in alphas.iter().zip(&adj[node]) {
            let (_, _, vvec, _) = kv[m].as_ref().expect("neighbor has kv");
            for (acc, x) in message.iter_mut().zip(vvec) {
                *acc += a * x;
            }
        }
        let mut concat = Vec::with_capacity(2 * d);
        concat.extend_from_slice(&features_in[node]);
        concat.extend_from_slice(&message);
        let (u, uc) = layer.update.forward(&concat)?;
        let out: Vec<f64> = features_in[node]
            .iter()
            .zip(&u)
            .map(|(a, b)| a + b)
            .collect();
        q.push(Some((qvec, qc)));
        att.push(Some(alphas));
        upd.push(Some(uc));
        features_out.push(out);
    }
    Ok((
        features_out,
        LayerCache {
            features_in,
            q,
            kv,
            att,
            upd,
        },
    ))
}

struct LayerGrads<'a> {
    query: &'a mut Mlp,
    key: &'a mut Mlp,
    value: &'a mut Mlp,
    update: &'a mut Mlp,
}

fn layer_backward(
    graph: &PoseGraph,
    layer: &AttentionLayer,
    cache: &LayerCache,
    d_out: &[Vec<f64>],
    grads: LayerGrads,
) -> Result<Vec<Vec<f64>>> {
    let adj = match layer.kind() {
        EdgeKind::Spatial => &graph.spatial,
        EdgeKind::Temporal => &graph.temporal,
    };
    let n = cache.features_in.len();
    let d = layer.value.out_dim();
    // Residual path.
    let mut d_in: Vec<Vec<f64>> = d_out.to_vec();
    // Gradients flowing into each neighbor's key/value vectors.
    let mut dk: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut dv: Vec<Option<Vec<f64>>> = vec![None; n];
    for node in 0..n {
        if adj[node].is_empty() {
            continue;
        }
        let alphas = cache.att[node].as_ref().expect("center cache");
        let upd_cache = cache.upd[node].as_ref().expect("center cache");
        let dconcat = layer
            .update
            .backward(upd_cache, &d_out[node], grads.update)?;
        for (acc, g) in d_in[node].iter_mut().zip(&dconcat[..d]) {
            *acc += g;
        }
        let dmsg = &dconcat[d..];
        // message = sum_m alpha_m * v_m
        let mut dalpha = vec![0.0; adj[node].len()];
        for (idx, &m) in adj[node].iter().enumerate() {
            let (_, _, vvec, _) = cache.kv[m].as_ref().expect("neighbor kv");
            dalpha[idx] = vvec.iter().zip(dmsg).map(|(a, b)| a * b).sum();
            let slot = dv[m].get_or_insert_with(|| vec![0.0; d]);
            for (acc, g) in slot.iter_mut().zip(dmsg) {
                *acc += alphas[idx] * g;
            }
        }
        let dscores = softmax_backward(alphas, &dalpha);
        let (qvec, qcache) = cache.q[node].as_ref().expect("center cache");
        let mut dq = vec![0.0; d];
        for (idx, &m) in adj[node].iter().enumerate() {
            let (kvec, _, _, _) = cache.kv[m].as_ref().expect("neighbor kv");
            let s = dscores[idx];
            if s == 0.0 {
                continue;
            }
            for (acc, kk) in dq.iter_mut().zip(kvec) {
                *acc += s * kk;
            }
            let slot = dk[m].get_or_insert_with(|| vec![0.0; d]);
            for (acc, qq) in slot.iter_mut().zip(qvec) {
                *acc += s * qq;
            }
        }
        let dx = layer.query.backward(qcache, &dq, grads.query)?;
        for (acc, g) in d_in[node].iter_mut().zip(&dx) {
            *acc += g;
        }
    }
    for m in 0..n {
        if let Some(g) = &dk[m] {
            let (_, kcache, _, _) = cache.kv[m].as_ref().expect("neighbor kv");
            let dx = layer.key.backward(kcache, g, grads.key)?;
            for (acc, v) in d_in[m].iter_mut().zip(&dx) {
                *acc += v;
            }
        }
        if let Some(g) = &dv[m] {
            let (_, _, _, vcache) = cache.kv[m].as_ref().expect("neighbor kv");
            let dx = layer.value.backward(vcache, g, grads.value)?;
            for (acc, v) in d_in[m].iter_mut().zip(&dx) {
                *acc += v;
            }
        }
    }
    Ok(d_in)
}

/// Forward-only application of one message-passing layer to a graph's
/// features. `edge_kind` must match the layer's tag.
pub fn message_passing_layer(
    graph: &PoseGraph,
    features: &[Vec<f64>],
    layer: &AttentionLayer,
    edge_kind: EdgeKind,
) -> Result<Vec<Vec<f64>>> {
    if layer.kind() != edge_kind {
        return Err(Error::DimMismatch(
            "edge kind does not match the layer tag".into(),
        ));
    }
    if features.len() != graph.node_count() {
        return Err(Error::DimMismatch(
            "feature count does not match node count".into(),
        ));
    }
    let (out, _) = layer_forward(graph, features.to_vec(), layer)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Full model forward/backward
// ---------------------------------------------------------------------------

/// One attention weight observed during a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    /// 0 = history aggregation pass, 1 = prediction pass.
    pub pass: u8,
    pub layer: usize,
    pub center: NodeKind,
    pub neighbor: NodeKind,
    pub alpha: f64,
}

pub type AttentionTrace = Vec<AttentionRecord>;

/// Everything the backward pass needs from one full forward run.
pub struct ForwardCache {
    history_graph: PoseGraph,
    history_caches: Vec<EncodeCache>,
    history_layers: Vec<LayerCache>,
    pred_graph: PoseGraph,
    pred_caches: Vec<Option<EncodeCache>>,
    pred_layers: Vec<LayerCache>,
    head_caches: Vec<MlpCache>,
    /// Node index of the first candidate cell in the prediction graph.
    candidate_base: usize,
}

/// Output of a full prediction: the stack over the search box, the decoded
/// pose, and optionally the attention weights.
pub struct PredictionOutput {
    pub stack: HeatmapStack,
    pub pose: Pose,
    pub attention: Option<AttentionTrace>,
}

fn collect_attention(
    trace: &mut AttentionTrace,
    graph: &PoseGraph,
    layer_caches: &[LayerCache],
    layers: &[AttentionLayer],
    pass: u8,
) {
    for (li, (layer, cache)) in layers.iter().zip(layer_caches).enumerate() {
        let adj = match layer.kind() {
            EdgeKind::Spatial => &graph.spatial,
            EdgeKind::Temporal => &graph.temporal,
        };
        for (node, nbrs) in adj.iter().enumerate() {
            if let Some(alphas) = &cache.att[node] {
                for (a, &m) in alphas.iter().zip(nbrs) {
                    trace.push(AttentionRecord {
                        pass,
                        layer: li,
                        center: graph.kinds[node],
                        neighbor: graph.kinds[m],
                        alpha: *a,
                    });
                }
            }
        }
    }
}

fn forward_full(
    model: &DynamicsModel,
    history: &[Pose],
    frame_indices: &[usize],
    current_frame: usize,
    hook: Hook,
    frame_size: Option<(f64, f64)>,
    want_attention: bool,
) -> Result<(HeatmapStack, ForwardCache, Option<AttentionTrace>)> {
    let (history_graph, history_caches) =
        build_history_graph_cached(history, frame_indices, model, hook)?;

    // History aggregation pass.
    let mut feats = history_graph.features.clone();
    let mut history_layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let (out, cache) = layer_forward(&history_graph, feats, layer)?;
        history_layers.push(cache);
        feats = out;
    }
    // Aggregated features of the last history pose, by joint type.
    let last = history.last().unwrap();
    let k = model.cfg.joint_count;
    let last_base = (history.len() - 1) * k;
    let joint_features: Vec<Vec<f64>> = (0..k).map(|j| feats[last_base + j].clone()).collect();

    let search_box = propagate_search_box(last, frame_size)?;
    let (pred_graph, pred_caches, template) = build_prediction_graph_cached(
        last,
        &search_box,
        model,
        hook,
        current_frame,
        Some(&joint_features),
    )?;

    let mut pfeats = pred_graph.features.clone();
    let mut pred_layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let (out, cache) = layer_forward(&pred_graph, pfeats, layer)?;
        pred_layers.push(cache);
        pfeats = out;
    }

    // Head scores per candidate cell.
    let mut stack = template;
    let cols = stack.cols();
    let mut head_caches = Vec::with_capacity(pfeats.len() - k);
    for (ci, f) in pfeats[k..].iter().enumerate() {
        let (scores, cache) = model.head.forward(f)?;
        let (row, col) = (ci / cols, ci % cols);
        for (t, s) in scores.iter().enumerate() {
            stack.set(t, row, col, *s);
        }
        head_caches.push(cache);
    }

    let attention = if want_attention {
        let mut trace = Vec::new();
        collect_attention(
            &mut trace,
            &history_graph,
            &history_layers,
            &model.layers,
            0,
        );
        collect_attention(&mut trace, &pred_graph, &pred_layers, &model.layers, 1);
        Some(trace)
    } else {
        None
    };

    Ok((
        stack,
        ForwardCache {
            history_graph,
            history_caches,
            history_layers,
            pred_graph,
            pred_caches,
            pred_layers,
            head_caches,
            candidate_base: k,
        },
        attention,
    ))
}

fn backward_full(
    model: &DynamicsModel,
    cache: &ForwardCache,
    d_stack: &HeatmapStack,
    grads: &mut DynamicsModel,
) -> Result<()> {
    let k = model.cfg.joint_count;
    let d = model.cfg.feature_dim;
    let n_pred = cache.pred_graph.node_count();

    // Head backward into candidate features.
    let mut d_feats: Vec<Vec<f64>> = vec![vec![0.0; d]; n_pred];
    let cols = d_stack.cols();
    for ci in 0..(n_pred - cache.candidate_base) {
        let (row, col) = (ci / cols, ci % cols);
        let upstream: Vec<f64> = (0..k).map(|t| d_stack.get(t, row, col)).collect();
        let dx = model
            .head
            .backward(&cache.head_caches[ci], &upstream, &mut grads.head)?;
        d_feats[cache.candidate_base + ci] = dx;
    }

    // Prediction pass layers, reversed.
    for (li, layer) in model.layers.iter().enumerate().rev() {
        let lc = &cache.pred_layers[li];
        let lg = LayerGrads {
            query: &mut grads.layers[li].query,
            key: &mut grads.layers[li].key,
            value: &mut grads.layers[li].value,
            update: &mut grads.layers[li].update,
        };
        d_feats = layer_backward(&cache.pred_graph, layer, lc, &d_feats, lg)?;
    }

    // Split: candidate encodings vs. joint features from the history pass.
    for (node, enc) in cache.pred_caches.iter().enumerate() {
        if let Some(enc) = enc {
            encode_backward(model, enc, &d_feats[node], grads)?;
        }
    }
    // Joint nodes (0..k) carry gradients back into the history pass output.
    let n_hist = cache.history_graph.node_count();
    let last_base = n_hist - k;
    let mut d_hist: Vec<Vec<f64>> = vec![vec![0.0; d]; n_hist];
    for j in 0..k {
        d_hist[last_base + j] = d_feats[j].clone();
    }
    for (li, layer) in model.layers.iter().enumerate().rev() {
        let lc = &cache.history_layers[li];
        let lg = LayerGrads {
            query: &mut grads.layers[li].query,
            key: &mut grads.layers[li].key,
            value: &mut grads.layers[li].value,
            update: &mut grads.layers[li].update,
        };
        d_hist = layer_backward(&cache.history_graph, layer, lc, &d_hist, lg)?;
    }
    for (node, enc) in cache.history_caches.iter().enumerate() {
        encode_backward(model, enc, &d_hist[node], grads)?;
    }
    Ok(())
}

/// Runs the full model on a tracklet history: history aggregation, search
/// box propagation, candidate scoring, heatmap assembly, argmax decode.
pub fn predict_heatmaps(
    model: &DynamicsModel,
    history: &[Pose],
    frame_indices: &[usize],
    current_frame: usize,
    hook: Hook,
    frame_size: Option<(f64, f64)>,
    want_attention: bool,
) -> Result<PredictionOutput> {
    let (stack, _, attention) = forward_full(
        model,
        history,
        frame_indices,
        current_frame,
        hook,
        frame_size,
        want_attention,
    )?;
    let pose = decode_argmax(&stack);
    Ok(PredictionOutput {
        stack,
        pose,
        attention,
    })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One supervised sample: a tracklet history and the labeled next pose.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub history: Vec<Pose>,
    pub frame_indices: Vec<usize>,
    pub target: Pose,
    pub target_frame: usize,
    pub frame_size: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    /// Mean per-sample L2 loss over the used samples.
    pub loss: f64,
    pub used: usize,
    /// Samples with no visible target joint inside their search box.
    pub skipped_samples: usize,
    /// Individual target joints outside their search box (zero target).
    pub clipped_joints: usize,
}

/// Gaussian target layout for the sample's grid: visible joints inside the
/// crop render at sigma; joints outside contribute a zero channel and are
/// counted.
fn target_cells(stack: &HeatmapStack, target: &Pose) -> (Vec<Option<(f64, f64)>>, usize, usize) {
    let mut cells = vec![None; target.joint_count()];
    let mut visible_in_box = 0;
    let mut clipped = 0;
    for j in target.joints() {
        if !j.visible {
            continue;
        }
        if stack.crop().contains(j.position) {
            cells[j.joint_type] = Some(stack.frame_to_grid_f(j.position));
            visible_in_box += 1;
        } else {
            clipped += 1;
        }
    }
    (cells, visible_in_box, clipped)
}

fn sample_loss_and_grads(
    model: &DynamicsModel,
    sample: &TrainSample,
    hook: Hook,
) -> Result<Option<(f64, DynamicsModel, usize)>> {
    let (stack, cache, _) = forward_full(
        model,
        &sample.history,
        &sample.frame_indices,
        sample.target_frame,
        hook,
        sample.frame_size,
        false,
    )?;
    let (cells, visible_in_box, clipped) = target_cells(&stack, &sample.target);
    if visible_in_box == 0 {
        return Ok(None);
    }
    let gcfg = GaussianConfig::new(model.cfg.sigma, stack.rows(), stack.cols())?;
    let gt = crate::heatmap::render_gaussian(&cells, stack.crop(), &gcfg)?;
    let loss = crate::heatmap::l2_loss(&stack, &gt)?;

    let mut d_stack =
        HeatmapStack::zeros(stack.channels(), stack.rows(), stack.cols(), stack.crop())?;
    for (dv, (p, g)) in d_stack
        .values_mut()
        .iter_mut()
        .zip(stack.values().iter().zip(gt.values()))
    {
        *dv = 2.0 * (p - g);
    }
    let mut grads = model.zeros_like();
    backward_full(model, &cache, &d_stack, &mut grads)?;
    Ok(Some((loss, grads, clipped)))
}

/// Mean loss and accumulated gradients over a batch. Pure: no parameter
/// update happens here.
pub fn loss_and_grads(
    model: &DynamicsModel,
    batch: &[TrainSample],
    hook: Hook,
) -> Result<(TrainStats, DynamicsModel)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let per_sample: Vec<Option<(f64, DynamicsModel, usize)>> = batch
        .par_iter()
        .map(|s| sample_loss_and_grads(model, s, hook))
        .collect::<Result<Vec<_>>>()?;

    let mut total = model.zeros_like();
    let mut stats = TrainStats::default();
    for item in per_sample.into_iter().flatten() {
        let (loss, grads, clipped) = item;
        stats.loss += loss;
        stats.used += 1;
        stats.clipped_joints += clipped;
        let mut tb = total.param_blocks_mut();
        let gb = grads.param_blocks();
        for (t, g) in tb.iter_mut().zip(gb) {
            for (a, b) in t.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    stats.skipped_samples = batch.len() - stats.used;
    if stats.used == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv = 1.0 / stats.used as f64;
    stats.loss *= inv;
    for b in total.param_blocks_mut() {
        for g in b.iter_mut() {
            *g *= inv;
        }
    }
    Ok((stats, total))
}

/// Batch loss without gradients (used by finite-difference checks).
pub fn loss_only(model: &DynamicsModel, batch: &[TrainSample], hook: Hook) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for sample in batch {
        let (stack, _, _) = forward_full(
            model,
            &sample.history,
            &sample.frame_indices,
            sample.target_frame,
            hook,
            sample.frame_size,
            false,
        )?;
        let (cells, visible_in_box, _) = target_cells(&stack, &sample.target);
        if visible_in_box == 0 {
            continue;
        }
        let gcfg = GaussianConfig::new(model.cfg.sigma, stack.rows(), stack.cols())?;
        let gt = crate::heatmap::render_gaussian(&cells, stack.crop(), &gcfg)?;
        total += crate::heatmap::l2_loss(&stack, &gt)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(total / used as f64)
}

/// One training step: batch gradients plus one Adam update.
pub fn train_step(
    model: &mut DynamicsModel,
    batch: &[TrainSample],
    hook: Hook,
    adam: &mut AdamState,
) -> Result<TrainStats> {
    let (stats, grads) = loss_and_grads(model, batch, hook)?;
    let mut params = model.param_blocks_mut();
    let gblocks = grads.param_blocks();
    adam.step(&mut params, &gblocks)?;
    Ok(stats)
}

/// Finite-difference check of the full training loss on the given batch.
/// Checks `sample_count` randomly chosen parameters (all when 0) and returns
/// the worst relative error.
pub fn grad_check_model(
    model: &DynamicsModel,
    batch: &[TrainSample],
    hook: Hook,
    epsilon: f64,
    sample_count: usize,
    seed: u64,
) -> Result<f64> {
    let (_, grads) = loss_and_grads(model, batch, hook)?;
    let analytic = grads.flatten();
    let mut params = model.flatten();
    let total = params.len();
    let indices: Vec<usize> = if sample_count == 0 || sample_count >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = std::collections::BTreeSet::new();
        while seen.len() < sample_count {
            seen.insert(rng.gen_range(0..total));
        }
        seen.into_iter().collect()
    };
    let mut probe = model.clone();
    crate::nn::grad_check(
        |p| {
            probe.load_flat(p)?;
            loss_only(&probe, batch, hook)
        },
        &mut params,
        &analytic,
        epsilon,
        &indices,
    )
}
