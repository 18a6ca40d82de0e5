//! Bipartite matching, losses, and the optimization step.
//!
//! Training unrolls the tracker over a short snippet of consecutive frames.
//! Track continuation is teacher-forced: ground-truth instances define which
//! detection queries become track queries, so supervision targets stay
//! well-defined from the first step. Denoising sets are generated at each
//! frame transition and enter the next frame's forward pass; their loss has
//! the same term structure as the track-query loss.

use rand::Rng;
use thiserror::Error;

use crate::dngen::{
    assign_denoising_targets, generate, propagate_queries, BevBox, DenoisingGroupSpec,
    DenoisingMode, DenoisingQuerySet, FalsePositiveSet, FeatureSource, Polarity, TrackQueryView,
};
use crate::numeric::{Graph, Matrix, NodeId, ParamStore};
use crate::rng::SeedPath;
use crate::sim::{render_observations, Scene, ScenarioConfig};
use crate::tracker::{
    box_target_params, decode_box, detection_reference_grid, forward_frame, BoundParams, DnInput,
    FrameInput, FrameOutput, Paradigm, TrackerModel,
};

// ---------------------------------------------------------------------------
// Hungarian matching
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("cost matrix entry ({row},{col}) is not finite: {value}")]
    NonFinite { row: usize, col: usize, value: f64 },
}

/// Minimum-cost injective assignment between rows and columns.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Per row: assigned column, None when rows outnumber columns.
    pub assignment: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl MatchResult {
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| (r, c)))
            .collect()
    }
}

/// Kuhn-Munkres via shortest augmenting paths with potentials; handles any
/// rectangular shape and returns a full matching of the smaller side.
pub fn hungarian_match(cost: &Matrix) -> Result<MatchResult, MatchError> {
    for i in 0..cost.rows() {
        for j in 0..cost.cols() {
            let v = cost.get(i, j);
            if !v.is_finite() {
                return Err(MatchError::NonFinite {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
    }
    if cost.rows() == 0 || cost.cols() == 0 {
        return Ok(MatchResult {
            assignment: vec![None; cost.rows()],
            total_cost: 0.0,
        });
    }
    if cost.rows() > cost.cols() {
        // Solve on the transpose; a transposed row is an original column.
        let t = crate::numeric::matrix::transpose(cost);
        let sol = solve_rows_le_cols(&t);
        let mut assignment = vec![None; cost.rows()];
        for (t_row, t_col) in sol.iter().enumerate() {
            if let Some(r) = t_col {
                assignment[*r] = Some(t_row);
            }
        }
        let total = assignment
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| cost.get(r, c)))
            .sum();
        return Ok(MatchResult {
            assignment,
            total_cost: total,
        });
    }
    let sol = solve_rows_le_cols(cost);
    let assignment: Vec<Option<usize>> = sol;
    let total = assignment
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| cost.get(r, c)))
        .sum();
    Ok(MatchResult {
        assignment,
        total_cost: total,
    })
}

/// Row -> column assignment for rows <= cols (every row matched).
fn solve_rows_le_cols(cost: &Matrix) -> Vec<Option<usize>> {
    let n = cost.rows();
    let m = cost.cols();
    debug_assert!(n <= m);
    // Potentials; p[j] holds the row (1-based) assigned to column j.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
    let mut assignment = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = Some(j - 1);
        }
    }
    assignment
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_dn: f64,
    pub w_box: f64,
    pub w_cls: f64,
    pub w_assoc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_dn: 1.0,
            w_box: 1.0,
            w_cls: 1.0,
            w_assoc: 1.0,
        }
    }
}

/// sum(|pred - target| * mask) / norm as a graph node.
fn l1_masked(g: &mut Graph, pred: NodeId, targets: Matrix, mask: Matrix, norm: f64) -> NodeId {
    let t = g.input(targets);
    let diff = g.sub(pred, t);
    let a = g.abs(diff);
    let m = g.input(mask);
    let w = g.mul_elem(a, m);
    let s = g.sum(w);
    g.scale(s, 1.0 / norm)
}

/// sum((softplus(z) - z*y) * mask) / norm: binary cross-entropy on logits.
fn bce_masked(g: &mut Graph, logits: NodeId, targets: Matrix, mask: Matrix, norm: f64) -> NodeId {
    let y = g.input(targets);
    let sp = g.softplus(logits);
    let zy = g.mul_elem(logits, y);
    let per = g.sub(sp, zy);
    let m = g.input(mask);
    let w = g.mul_elem(per, m);
    let s = g.sum(w);
    g.scale(s, 1.0 / norm)
}

fn add_chain(g: &mut Graph, terms: &[NodeId]) -> NodeId {
    assert!(!terms.is_empty());
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    acc
}

/// Pairs farther apart than this are never supervised as matches: a query
/// cannot gather evidence for an object beyond its attention locality, so
/// forcing the match would only inject label noise.
pub const MATCH_GATE_RADIUS: f64 = 20.0;

/// Matches detection queries to ground truth on
/// w_box * L1(center) + w_cls * (1 - score), with pairs beyond
/// [`MATCH_GATE_RADIUS`] gated off. `candidates` are indices into `gt`;
/// returns per-detection assignment as indices into `gt`.
pub fn match_detections(
    det_boxes: &[BevBox],
    gt: &[BevBox],
    candidates: &[usize],
    weights: &LossWeights,
) -> Vec<Option<usize>> {
    let mut assignment = vec![None; det_boxes.len()];
    if det_boxes.is_empty() || candidates.is_empty() {
        return assignment;
    }
    // A finite penalty keeps the matrix solvable; gated pairs are dropped
    // after the assignment.
    let penalty = 1e6;
    let gated = |d: usize, k: usize| -> bool {
        det_boxes[d].center_distance_2d(&gt[candidates[k]]) > MATCH_GATE_RADIUS
    };
    let cost = Matrix::from_fn(det_boxes.len(), candidates.len(), |d, k| {
        if gated(d, k) {
            return penalty;
        }
        let gt_box = &gt[candidates[k]];
        let l1 = (det_boxes[d].center[0] - gt_box.center[0]).abs()
            + (det_boxes[d].center[1] - gt_box.center[1]).abs()
            + (det_boxes[d].center[2] - gt_box.center[2]).abs();
        weights.w_box * l1 + weights.w_cls * (1.0 - det_boxes[d].score)
    });
    let result = hungarian_match(&cost).expect("decoded boxes are finite");
    for (d, c) in result.assignment.iter().enumerate() {
        if let Some(k) = c {
            if !gated(d, *k) {
                assignment[d] = Some(candidates[*k]);
            }
        }
    }
    assignment
}

/// Scalar losses for one frame.
pub struct FrameLosses {
    pub tracker: NodeId,
    pub dn: Option<NodeId>,
}

/// Everything the loss needs to know about one decoded frame.
pub struct FrameSupervision<'a> {
    pub gt: &'a [BevBox],
    /// Instance ID per track row.
    pub track_instances: &'a [u64],
    /// Per detection row, the assigned GT index (from [`match_detections`]).
    pub det_assignment: &'a [Option<usize>],
    pub dn: Option<&'a DenoisingQuerySet>,
    pub dn_assoc_loss: bool,
}

/// Builds the tracker loss (and the denoising loss when a set is present)
/// for one frame. Box and classification terms are applied per decoder layer
/// and averaged; the association term uses the final-layer scores.
pub fn compute_frame_losses(
    g: &mut Graph,
    out: &FrameOutput,
    sup: &FrameSupervision<'_>,
    weights: &LossWeights,
) -> FrameLosses {
    let layout = &out.layout;
    let w = layout.total();
    let n_dn = layout.n_dn_all();
    let (track_start, n_track) = layout.track_span();
    let (det_start, n_det) = layout.det_span();
    assert_eq!(sup.track_instances.len(), n_track);
    assert_eq!(sup.det_assignment.len(), n_det);

    let alive = |instance: u64| sup.gt.iter().any(|b| b.instance_id == Some(instance));
    let gt_of = |instance: u64| sup.gt.iter().find(|b| b.instance_id == Some(instance));

    // Tracker targets: track rows reconstruct their own instance, detection
    // rows their Hungarian-assigned GT; denoising rows are weighted zero here.
    let mut box_targets = Matrix::zeros(w, 10);
    let mut box_mask = Matrix::zeros(w, 10);
    let mut cls_targets = Matrix::zeros(w, 1);
    let mut cls_mask = Matrix::zeros(w, 1);
    let mut n_box = 0usize;
    for (t, &instance) in sup.track_instances.iter().enumerate() {
        let row = track_start + t;
        cls_mask.set(row, 0, 1.0);
        if let Some(gt_box) = gt_of(instance) {
            cls_targets.set(row, 0, 1.0);
            let params = box_target_params(gt_box, &out.refs[row]);
            for (j, &p) in params.iter().enumerate() {
                box_targets.set(row, j, p);
                box_mask.set(row, j, 1.0);
            }
            n_box += 1;
        }
    }
    for (d, assigned) in sup.det_assignment.iter().enumerate() {
        let row = det_start + d;
        cls_mask.set(row, 0, 1.0);
        if let Some(k) = assigned {
            cls_targets.set(row, 0, 1.0);
            let params = box_target_params(&sup.gt[*k], &out.refs[row]);
            for (j, &p) in params.iter().enumerate() {
                box_targets.set(row, j, p);
                box_mask.set(row, j, 1.0);
            }
            n_box += 1;
        }
    }
    let box_norm = 10.0 * n_box.max(1) as f64;
    let cls_norm = (n_track + n_det).max(1) as f64;

    let n_layers = out.layers.len() as f64;
    let mut box_terms = Vec::new();
    let mut cls_terms = Vec::new();
    for layer in &out.layers {
        box_terms.push(l1_masked(
            g,
            layer.box_params,
            box_targets.clone(),
            box_mask.clone(),
            box_norm,
        ));
        cls_terms.push(bce_masked(
            g,
            layer.cls_logits,
            cls_targets.clone(),
            cls_mask.clone(),
            cls_norm,
        ));
    }
    let box_mean = {
        let s = add_chain(g, &box_terms);
        g.scale(s, 1.0 / n_layers)
    };
    let cls_mean = {
        let s = add_chain(g, &cls_terms);
        g.scale(s, 1.0 / n_layers)
    };

    // Association supervision on the track rows of the final-layer scores.
    let det_instance: Vec<Option<u64>> = sup
        .det_assignment
        .iter()
        .map(|a| a.and_then(|k| sup.gt[k].instance_id))
        .collect();
    let assoc_term = out.assoc_logits.map(|assoc| {
        let track_rows = g.slice_rows(assoc, n_dn, n_track);
        let mut labels = Matrix::zeros(n_track, n_det);
        for (t, &instance) in sup.track_instances.iter().enumerate() {
            for (d, det_inst) in det_instance.iter().enumerate() {
                if *det_inst == Some(instance) {
                    labels.set(t, d, 1.0);
                }
            }
        }
        let mask = Matrix::from_fn(n_track, n_det, |_, _| 1.0);
        let norm = (n_track * n_det).max(1) as f64;
        bce_masked(g, track_rows, labels, mask, norm)
    });

    let box_w = g.scale(box_mean, weights.w_box);
    let cls_w = g.scale(cls_mean, weights.w_cls);
    let mut tracker = g.add(box_w, cls_w);
    if let Some(a) = assoc_term {
        let a_w = g.scale(a, weights.w_assoc);
        tracker = g.add(tracker, a_w);
    }

    // Denoising loss: identical term structure, fixed targets (no matching),
    // normalized per query within each group and averaged over groups.
    let dn = sup.dn.map(|dn_set| {
        assert_eq!(dn_set.len(), n_dn);
        let n_groups = dn_set.group_sizes.len().max(1) as f64;
        let mut group_box_terms: Vec<NodeId> = Vec::new();
        let mut group_cls_terms: Vec<NodeId> = Vec::new();

        let mut dn_box_targets = Matrix::zeros(w, 10);
        let mut per_group_box_mask: Vec<Matrix> = (0..dn_set.group_sizes.len())
            .map(|_| Matrix::zeros(w, 10))
            .collect();
        let mut per_group_box_count = vec![0usize; dn_set.group_sizes.len()];
        let mut dn_cls_targets = Matrix::zeros(w, 1);
        let mut per_group_cls_mask: Vec<Matrix> = (0..dn_set.group_sizes.len())
            .map(|_| Matrix::zeros(w, 1))
            .collect();
        for q in 0..dn_set.len() {
            let grp = dn_set.group_id[q];
            per_group_cls_mask[grp].set(q, 0, 1.0);
            if let Some(instance) = dn_set.target_instance[q] {
                debug_assert!(alive(instance));
                if let Some(gt_box) = gt_of(instance) {
                    dn_cls_targets.set(q, 0, 1.0);
                    let params = box_target_params(gt_box, &out.refs[q]);
                    for (j, &p) in params.iter().enumerate() {
                        dn_box_targets.set(q, j, p);
                        per_group_box_mask[grp].set(q, j, 1.0);
                    }
                    per_group_box_count[grp] += 1;
                }
            }
        }

        for grp in 0..dn_set.group_sizes.len() {
            let size = dn_set.group_sizes[grp];
            let box_norm = 10.0 * per_group_box_count[grp].max(1) as f64;
            let cls_norm = size.max(1) as f64;
            let mut layer_box = Vec::new();
            let mut layer_cls = Vec::new();
            for layer in &out.layers {
                layer_box.push(l1_masked(
                    g,
                    layer.box_params,
                    dn_box_targets.clone(),
                    per_group_box_mask[grp].clone(),
                    box_norm,
                ));
                layer_cls.push(bce_masked(
                    g,
                    layer.cls_logits,
                    dn_cls_targets.clone(),
                    per_group_cls_mask[grp].clone(),
                    cls_norm,
                ));
            }
            let b = add_chain(g, &layer_box);
            group_box_terms.push(g.scale(b, 1.0 / n_layers));
            let c = add_chain(g, &layer_cls);
            group_cls_terms.push(g.scale(c, 1.0 / n_layers));
        }

        let dn_box = {
            let s = add_chain(g, &group_box_terms);
            g.scale(s, 1.0 / n_groups)
        };
        let dn_cls = {
            let s = add_chain(g, &group_cls_terms);
            g.scale(s, 1.0 / n_groups)
        };

        let dn_assoc = match (out.assoc_logits, sup.dn_assoc_loss) {
            (Some(assoc), true) if n_dn > 0 => {
                let dn_rows = g.slice_rows(assoc, 0, n_dn);
                let mut labels = Matrix::zeros(n_dn, n_det);
                for q in 0..n_dn {
                    if dn_set.polarity[q] != Polarity::Positive {
                        continue;
                    }
                    if let Some(instance) = dn_set.target_instance[q] {
                        for (dcol, det_inst) in det_instance.iter().enumerate() {
                            if *det_inst == Some(instance) {
                                labels.set(q, dcol, 1.0);
                            }
                        }
                    }
                }
                let mut group_terms = Vec::new();
                for grp in 0..dn_set.group_sizes.len() {
                    let (start, len) = dn_set
                        .layout(0, 0)
                        .group_span(grp);
                    let mask = Matrix::from_fn(n_dn, n_det, |i, _| {
                        if i >= start && i < start + len {
                            1.0
                        } else {
                            0.0
                        }
                    });
                    let norm = (len * n_det).max(1) as f64;
                    group_terms.push(bce_masked(g, dn_rows, labels.clone(), mask, norm));
                }
                let s = add_chain(g, &group_terms);
                Some(g.scale(s, 1.0 / n_groups))
            }
            _ => None,
        };

        let b_w = g.scale(dn_box, weights.w_box);
        let c_w = g.scale(dn_cls, weights.w_cls);
        let mut dn_total = g.add(b_w, c_w);
        if let Some(a) = dn_assoc {
            let a_w = g.scale(a, weights.w_assoc);
            dn_total = g.add(dn_total, a_w);
        }
        dn_total
    });

    FrameLosses { tracker, dn }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive moment estimation with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        let v = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, id) in store.ids().enumerate().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let grads = p.grad.data();
            let values = p.value.data();
            let mut new_values = Vec::with_capacity(values.len());
            for i in 0..values.len() {
                // Canonicalize signed zeros so trajectories that differ only
                // in unused branches stay bit-identical.
                let g = if grads[i] == 0.0 { 0.0 } else { grads[i] };
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                new_values.push(values[i] - self.lr * mh / (vh.sqrt() + self.eps));
            }
            p.value.data_mut().copy_from_slice(&new_values);
        }
    }
}

// ---------------------------------------------------------------------------
// Snippet unrolling
// ---------------------------------------------------------------------------

/// Whether and how denoising queries are generated during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DnMode {
    Off,
    Static,
    Temporal,
}

impl DnMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DnMode::Off => "off",
            DnMode::Static => "static",
            DnMode::Temporal => "temporal",
        }
    }

    pub fn parse(s: &str) -> Option<DnMode> {
        match s {
            "off" => Some(DnMode::Off),
            "static" => Some(DnMode::Static),
            "temporal" => Some(DnMode::Temporal),
            _ => None,
        }
    }

    pub fn generation_mode(&self) -> Option<DenoisingMode> {
        match self {
            DnMode::Off => None,
            DnMode::Static => Some(DenoisingMode::Static),
            DnMode::Temporal => Some(DenoisingMode::Temporal),
        }
    }
}

pub struct TrainContext<'a> {
    pub scenario: &'a ScenarioConfig,
    pub dn_mode: DnMode,
    pub dn_specs: &'a [DenoisingGroupSpec],
    pub weights: &'a LossWeights,
    pub dn_assoc_loss: bool,
    /// Ablation knob: initialize denoising features from zero vectors
    /// instead of copying the matching track query.
    pub dn_zero_init: bool,
}

/// Scalar loss nodes for one unrolled snippet.
pub struct SnippetLosses {
    pub total: NodeId,
    pub tracker: NodeId,
    /// Mean denoising loss over the frames that carried a set; None when
    /// denoising is off or never generated.
    pub dn: Option<NodeId>,
}

/// Frozen bookkeeping of one frame: everything the unroll decides from
/// decoded values rather than through the graph. Reference points, matching
/// results, and noise draws are stop-gradients (detached anchors); freezing
/// them makes the loss a pure differentiable function of the parameters,
/// which is what the finite-difference checks verify.
#[derive(Clone, Debug, Default)]
pub struct FramePlan {
    det_assignment: Vec<Option<usize>>,
    /// Feature rows (into the frame's W x d output) carried into the next
    /// frame's track set.
    next_rows: Vec<usize>,
    next_instances: Vec<u64>,
    next_refs: Vec<[f64; 3]>,
    /// Detection indices forming the false-positive pool.
    fp_dets: Vec<usize>,
    /// Denoising set entering the next frame.
    dn_next: Option<DenoisingQuerySet>,
    /// Locality centers of the refined decoder layers.
    bias_centers: Vec<Vec<[f64; 3]>>,
}

#[derive(Clone, Debug, Default)]
pub struct SnippetPlan {
    frames: Vec<FramePlan>,
}

/// Records the full forward and loss graph for one snippet; the first frame
/// never carries a denoising set.
pub fn run_snippet(
    g: &mut Graph,
    model: &TrackerModel,
    ctx: &TrainContext<'_>,
    scene: &Scene,
    scene_seed: SeedPath,
    start_frame: usize,
    snippet_len: usize,
    step_seed: SeedPath,
) -> SnippetLosses {
    run_snippet_planned(
        g,
        model,
        ctx,
        scene,
        scene_seed,
        start_frame,
        snippet_len,
        step_seed,
        None,
    )
    .0
}

/// As [`run_snippet`], optionally replaying a frozen [`SnippetPlan`] instead
/// of re-deriving bookkeeping from the decoded values. Always returns the
/// plan that was used.
pub fn run_snippet_planned(
    g: &mut Graph,
    model: &TrackerModel,
    ctx: &TrainContext<'_>,
    scene: &Scene,
    scene_seed: SeedPath,
    start_frame: usize,
    snippet_len: usize,
    step_seed: SeedPath,
    frozen: Option<&SnippetPlan>,
) -> (SnippetLosses, SnippetPlan) {
    assert!(snippet_len >= 2, "temporal denoising needs at least 2 frames");
    assert!(start_frame + snippet_len <= scene.n_frames());
    let d = model.config.feature_dim;
    let n_det = model.config.n_det_queries;
    let paradigm = model.config.paradigm;
    let dt = ctx.scenario.dt;
    let bound = BoundParams::bind(model, g);

    let mut plan = SnippetPlan::default();
    let mut track_instances: Vec<u64> = Vec::new();
    let mut track_refs: Vec<[f64; 3]> = Vec::new();
    let mut track_features = g.input(Matrix::zeros(0, d));
    let mut pending_dn: Option<(DenoisingQuerySet, NodeId)> = None;

    let mut tracker_terms: Vec<NodeId> = Vec::new();
    let mut dn_terms: Vec<NodeId> = Vec::new();

    for tau in 0..snippet_len {
        let f = start_frame + tau;
        let gt = &scene.frames[f];
        let frame_seed = step_seed.child("frame").child_idx(tau as u64);
        let obs = render_observations(gt, ctx.scenario, scene_seed.child_idx(f as u64));
        let det_refs = detection_reference_grid(n_det, ctx.scenario.arena);

        let dn_input = pending_dn.as_ref().map(|(set, node)| DnInput {
            set,
            features: *node,
        });
        let frozen_bias = frozen.map(|p| p.frames[tau].bias_centers.as_slice());
        let input = FrameInput {
            track_features,
            track_refs: &track_refs,
            dn: dn_input,
            obs: &obs,
            det_refs: &det_refs,
            bias_centers: frozen_bias,
        };
        let out = forward_frame(g, model, &bound, &input);

        // Decode the final layer for matching and bookkeeping.
        let (det_start, _) = out.layout.det_span();
        let (track_start, n_track) = out.layout.track_span();
        let det_boxes = decode_rows(g, &out, det_start, n_det);
        let track_boxes = decode_rows(g, &out, track_start, n_track);

        let det_assignment = match frozen {
            Some(p) => p.frames[tau].det_assignment.clone(),
            None => {
                // TBA detection queries handle only new-born instances;
                // paradigms with an explicit association module detect all.
                let candidates: Vec<usize> = match paradigm {
                    Paradigm::Tba => (0..gt.len())
                        .filter(|&k| {
                            let id = gt[k].instance_id.expect("GT has instance IDs");
                            !track_instances.contains(&id)
                        })
                        .collect(),
                    _ => (0..gt.len()).collect(),
                };
                match_detections(&det_boxes, gt, &candidates, ctx.weights)
            }
        };

        let losses = compute_frame_losses(
            g,
            &out,
            &FrameSupervision {
                gt,
                track_instances: &track_instances,
                det_assignment: &det_assignment,
                dn: pending_dn.as_ref().map(|(set, _)| set),
                dn_assoc_loss: ctx.dn_assoc_loss,
            },
            ctx.weights,
        );
        tracker_terms.push(losses.tracker);
        if let Some(dn) = losses.dn {
            dn_terms.push(dn);
        }

        let mut frame_plan = FramePlan {
            det_assignment: det_assignment.clone(),
            bias_centers: out.bias_centers.clone(),
            ..FramePlan::default()
        };

        if tau + 1 == snippet_len {
            plan.frames.push(frame_plan);
            break;
        }

        // Teacher-forced continuation: instances alive now become the track
        // set for the next frame. With an association module the track
        // adopts its matched detection query, mirroring the inference-time
        // track update; TBA tracks continue from their own rows.
        let (next_rows, next_instances, next_refs, fp_dets) = match frozen {
            Some(p) => {
                let fp = &p.frames[tau];
                (
                    fp.next_rows.clone(),
                    fp.next_instances.clone(),
                    fp.next_refs.clone(),
                    fp.fp_dets.clone(),
                )
            }
            None => {
                let mut next_rows = Vec::new();
                let mut next_instances = Vec::new();
                let mut next_refs = Vec::new();
                let adopt_detections = paradigm.has_association_module();
                for (k, gt_box) in gt.iter().enumerate() {
                    let instance = gt_box.instance_id.expect("GT has instance IDs");
                    let existing = track_instances.iter().position(|&id| id == instance);
                    let det_for_instance = det_assignment.iter().position(|a| *a == Some(k));
                    let (row, bbox) = match existing {
                        Some(t) => {
                            if adopt_detections {
                                match det_for_instance {
                                    Some(dd) => (det_start + dd, det_boxes[dd].clone()),
                                    None => (track_start + t, track_boxes[t].clone()),
                                }
                            } else {
                                (track_start + t, track_boxes[t].clone())
                            }
                        }
                        None => match det_for_instance {
                            Some(dd) => (det_start + dd, det_boxes[dd].clone()),
                            // No detection query matched the new-born
                            // instance; it stays untracked this transition.
                            None => continue,
                        },
                    };
                    next_rows.push(row);
                    next_instances.push(instance);
                    next_refs.push(bbox.propagated(dt).center);
                }
                let fp_dets: Vec<usize> = (0..n_det)
                    .filter(|&dd| det_assignment[dd].is_none())
                    .collect();
                (next_rows, next_instances, next_refs, fp_dets)
            }
        };

        let next_features = g.gather_rows(out.features, &next_rows);
        let fp_feature_rows: Vec<usize> = fp_dets.iter().map(|&dd| det_start + dd).collect();
        let fp_features_node = g.gather_rows(out.features, &fp_feature_rows);

        pending_dn = match ctx.dn_mode.generation_mode() {
            None => None,
            Some(gen_mode) => {
                let set = match frozen {
                    Some(p) => p.frames[tau]
                        .dn_next
                        .clone()
                        .expect("frozen plan carries the denoising set"),
                    None => {
                        let dn_seed = frame_seed.child("dn");
                        let gt_next = &scene.frames[f + 1];
                        let source_gt = match gen_mode {
                            DenoisingMode::Temporal => gt.as_slice(),
                            DenoisingMode::Static => gt_next.as_slice(),
                        };
                        let mut specs = ctx.dn_specs.to_vec();
                        for s in &mut specs {
                            s.mode = gen_mode;
                        }
                        let fp_set = FalsePositiveSet {
                            features: g.value(fp_features_node).clone(),
                            boxes: fp_dets.iter().map(|&dd| det_boxes[dd].clone()).collect(),
                        };
                        let track_values = g.value(next_features).clone();
                        let empty = Matrix::zeros(0, d);
                        // Hiding the track view from the generator makes
                        // every positive fall back to zero initialization.
                        let view = if ctx.dn_zero_init {
                            TrackQueryView {
                                features: &empty,
                                instance_ids: &[],
                            }
                        } else {
                            TrackQueryView {
                                features: &track_values,
                                instance_ids: &next_instances,
                            }
                        };
                        let set = generate(source_gt, &view, &fp_set, &specs, d, dn_seed);
                        let mut set = propagate_queries(&set, dt);
                        assign_denoising_targets(&mut set, gt_next);
                        set
                    }
                };
                let node = assemble_dn_features(g, &set, next_features, fp_features_node, d);
                debug_assert!(
                    frozen.is_some() || g.value(node).bit_eq(&set.features),
                    "graph feature assembly must reproduce the generated set"
                );
                Some((set, node))
            }
        };

        frame_plan.next_rows = next_rows;
        frame_plan.next_instances = next_instances.clone();
        frame_plan.next_refs = next_refs.clone();
        frame_plan.fp_dets = fp_dets;
        frame_plan.dn_next = pending_dn.as_ref().map(|(set, _)| set.clone());
        plan.frames.push(frame_plan);

        track_instances = next_instances;
        track_refs = next_refs;
        track_features = next_features;
    }

    let tracker = {
        let s = add_chain(g, &tracker_terms);
        g.scale(s, 1.0 / tracker_terms.len() as f64)
    };
    let dn = if dn_terms.is_empty() {
        None
    } else {
        let s = add_chain(g, &dn_terms);
        Some(g.scale(s, 1.0 / dn_terms.len() as f64))
    };
    let total = match dn {
        Some(dn_node) => {
            let weighted = g.scale(dn_node, ctx.weights.lambda_dn);
            g.add(weighted, tracker)
        }
        None => tracker,
    };

    (SnippetLosses { total, tracker, dn }, plan)
}

fn decode_rows(g: &Graph, out: &FrameOutput, start: usize, len: usize) -> Vec<BevBox> {
    let preds = out.final_layer();
    let box_params = g.value(preds.box_params);
    let cls = g.value(preds.cls_logits);
    (start..start + len)
        .map(|i| decode_box(box_params.row(i), cls.row(i)[0], &out.refs[i]))
        .collect()
}

/// Rebuilds the denoising feature rows as graph nodes: gather the source row
/// (track feature, zero, or false positive) and add the recorded noise.
fn assemble_dn_features(
    g: &mut Graph,
    set: &DenoisingQuerySet,
    track_features: NodeId,
    fp_features: NodeId,
    d: usize,
) -> NodeId {
    let n_track = g.shape(track_features).0;
    let zero_row = g.input(Matrix::zeros(1, d));
    let combined = g.concat_rows(&[track_features, zero_row, fp_features]);
    let idx: Vec<usize> = set
        .feature_sources
        .iter()
        .map(|s| match s {
            FeatureSource::Track(i) => *i,
            FeatureSource::Zero => n_track,
            FeatureSource::FalsePositive(j) => n_track + 1 + j,
        })
        .collect();
    let base = g.gather_rows(combined, &idx);
    let noise = g.input(set.feature_noise.clone());
    g.add(base, noise)
}

// ---------------------------------------------------------------------------
// Train step
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub total: f64,
    pub tracker: f64,
    pub dn: f64,
}

/// Unrolls one snippet, backpropagates, and applies one optimizer update.
pub fn train_step(
    model: &mut TrackerModel,
    opt: &mut Adam,
    ctx: &TrainContext<'_>,
    scene: &Scene,
    scene_seed: SeedPath,
    start_frame: usize,
    snippet_len: usize,
    step_seed: SeedPath,
) -> StepLoss {
    let mut g = Graph::new();
    let losses = run_snippet(
        &mut g,
        model,
        ctx,
        scene,
        scene_seed,
        start_frame,
        snippet_len,
        step_seed,
    );
    let total = g.scalar(losses.total);
    let tracker = g.scalar(losses.tracker);
    let dn = losses.dn.map_or(0.0, |n| g.scalar(n));
    model.store.zero_grads();
    g.backward(losses.total, Matrix::from_vec(1, 1, vec![1.0]), &mut model.store);
    opt.step(&mut model.store);
    StepLoss { total, tracker, dn }
}

/// Training-log line: step, total, tracker, denoising, learning rate.
pub fn format_log_line(step: usize, loss: &StepLoss, lr: f64) -> String {
    format!(
        "{step},{},{},{},{}",
        crate::sim::fmt_f64(loss.total),
        crate::sim::fmt_f64(loss.tracker),
        crate::sim::fmt_f64(loss.dn),
        crate::sim::fmt_f64(lr)
    )
}

pub const TRAIN_LOG_HEADER: &str = "step,loss_total,loss_tracker,loss_dn,lr";

/// Picks the training snippet for a step: a scene and a start frame.
pub fn pick_snippet(
    n_scenes: usize,
    n_frames: usize,
    snippet_len: usize,
    step_seed: SeedPath,
) -> (usize, usize) {
    let mut rng = step_seed.child("pick").rng();
    let scene = rng.random_range(0..n_scenes);
    let start = rng.random_range(0..=(n_frames - snippet_len));
    (scene, start)
}
