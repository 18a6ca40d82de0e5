//! The decoder stack: masked self-attention over the concatenated query set,
//! cross-attention to observation tokens, edge-augmented cross-attention for
//! the association module, and the task heads.
//!
//! Queries are ordered denoising groups, then track, then detection, matching
//! the mask builders. Masking is renormalizing (masked keys contribute
//! exactly zero), which keeps track/detection outputs bitwise independent of
//! any denoising rows.

use rand::Rng;

use super::encoding::{encode_point, POINT_ENCODING_DIM};
use super::model::{AttnParams, BoundParams, EdgeParams, HeadParams, TrackerModel};
use crate::dngen::{BevBox, DenoisingQuerySet};
use crate::masks::{build_association_mask, build_self_attention_mask, AttnMask, QueryLayout};
use crate::numeric::{ffn_residual, mlp2, Graph, Matrix, NodeId};
use crate::sim::ObsFrame;

/// Denoising rows entering a frame: the generated set plus its feature rows
/// as a graph node (so training can differentiate through the copied track
/// features).
pub struct DnInput<'a> {
    pub set: &'a DenoisingQuerySet,
    pub features: NodeId,
}

pub struct FrameInput<'a> {
    /// n_track x d_k carried track features.
    pub track_features: NodeId,
    pub track_refs: &'a [[f64; 3]],
    pub dn: Option<DnInput<'a>>,
    /// Observation evidence for the frame.
    pub obs: &'a ObsFrame,
    pub det_refs: &'a [[f64; 3]],
    /// Frozen per-layer locality centers (one entry per decoder layer after
    /// the first). None derives them from the decoded boxes; gradient checks
    /// freeze them alongside the other detached bookkeeping.
    pub bias_centers: Option<&'a [Vec<[f64; 3]>]>,
}

/// Locality scales (meters) of the observation cross-attention bias. Real
/// detectors sample image features at each query's reference point; the
/// desk-scale analog favors tokens near a per-query center while still
/// attending everything. The first decoder layer reaches over a whole anchor
/// cell; later layers focus tightly around the previous layer's decoded
/// center (iterative refinement).
pub const OBS_SIGMA_COARSE: f64 = 14.0;
pub const OBS_SIGMA_FINE: f64 = 4.0;

/// bias(i, j) = -||center_i - pos_j||^2 / (2 sigma^2) over the BEV plane.
pub fn obs_locality_bias(centers: &[[f64; 3]], positions: &[[f64; 3]], sigma: f64) -> Matrix {
    let inv = 1.0 / (2.0 * sigma * sigma);
    Matrix::from_fn(centers.len(), positions.len(), |i, j| {
        let dx = centers[i][0] - positions[j][0];
        let dy = centers[i][1] - positions[j][1];
        -(dx * dx + dy * dy) * inv
    })
}

#[derive(Clone, Copy)]
pub struct LayerPreds {
    /// W x 10 box regression parameters.
    pub box_params: NodeId,
    /// W x 1 objectness logits.
    pub cls_logits: NodeId,
}

pub struct FrameOutput {
    pub layout: QueryLayout,
    /// Reference points in query order.
    pub refs: Vec<[f64; 3]>,
    /// Per decoder layer head outputs, in layer order.
    pub layers: Vec<LayerPreds>,
    /// (N_DN,all + N_T) x N_D association logits from the final edges;
    /// None for paradigms without an association module.
    pub assoc_logits: Option<NodeId>,
    /// W x d_k final query features.
    pub features: NodeId,
    /// Locality centers used by decoder layers after the first.
    pub bias_centers: Vec<Vec<[f64; 3]>>,
}

impl FrameOutput {
    pub fn final_layer(&self) -> &LayerPreds {
        self.layers.last().expect("decoder has at least one layer")
    }
}

/// Residual masked self-attention. Track and detection outputs depend only
/// on track and detection keys; denoising rows may additionally see their
/// own group.
pub fn masked_self_attention(
    g: &mut Graph,
    x: NodeId,
    mask: &AttnMask,
    params: &AttnParams,
    bound: &BoundParams,
    d_k: usize,
) -> NodeId {
    let q = g.matmul(x, bound.node(params.wq));
    let k = g.matmul(x, bound.node(params.wk));
    let v = g.matmul(x, bound.node(params.wv));
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let probs = g.masked_softmax(scores, mask.entries.clone());
    let upd = g.matmul(probs, v);
    g.add(x, upd)
}

/// Residual cross-attention from every query to the observation tokens.
///
/// Keys come from the absolute token encodings (`tokens`, already projected
/// to d_k); values come from query-relative token encodings (`rel`, a
/// (W * n_tok) x RELATIVE_ENCODING_DIM constant in query-major pair order),
/// mirroring how the real detectors sample evidence relative to each query's
/// reference point. `bias` is a constant per (query, token) score offset
/// (the locality prior). An empty token set degenerates to the identity
/// update.
pub fn observation_cross_attention(
    g: &mut Graph,
    x: NodeId,
    tokens: NodeId,
    rel: NodeId,
    bias: Matrix,
    params: &AttnParams,
    bound: &BoundParams,
    d_k: usize,
) -> NodeId {
    let n_tok = g.shape(tokens).0;
    let w = g.shape(x).0;
    assert_eq!(bias.shape(), (w, n_tok), "bias shape mismatch");
    assert_eq!(g.shape(rel).0, w * n_tok, "relative encoding rows mismatch");
    let q = g.matmul(x, bound.node(params.wq));
    let k = g.matmul(tokens, bound.node(params.wk));
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let bias_node = g.input(bias);
    let scores = g.add(scores, bias_node);
    let open = Matrix::zeros(w, n_tok);
    let probs = g.masked_softmax(scores, open);

    // Per-query weighted sum of its own relative values: expand the
    // attention weights over columns, scale the value rows, then collapse
    // each query's block of n_tok rows.
    let v = g.matmul(rel, bound.node(params.wv));
    let p_col = g.reshape(probs, w * n_tok, 1);
    let ones = g.input(Matrix::from_fn(1, d_k, |_, _| 1.0));
    let p_exp = g.matmul(p_col, ones);
    let weighted = g.mul_elem(v, p_exp);
    let blocksum = g.input(Matrix::from_fn(w, w * n_tok, |i, j| {
        if j >= i * n_tok && j < (i + 1) * n_tok {
            1.0
        } else {
            0.0
        }
    }));
    let upd = g.matmul(blocksum, weighted);
    g.add(x, upd)
}

/// Query-relative encodings for every (query, token) pair, query-major.
pub fn relative_token_encodings(refs: &[[f64; 3]], obs: &ObsFrame) -> Matrix {
    use super::encoding::{encode_relative, RELATIVE_ENCODING_DIM};
    if refs.is_empty() || obs.is_empty() {
        return Matrix::zeros(refs.len() * obs.len(), RELATIVE_ENCODING_DIM);
    }
    let mut rows = Vec::with_capacity(refs.len() * obs.len());
    for r in refs {
        for b in &obs.boxes {
            rows.push(encode_relative(r, b));
        }
    }
    Matrix::from_rows(&rows)
}

/// Edge-augmented cross-attention between detection queries and the unified
/// source set (denoising groups then track).
///
/// The attention is A = (Q_D Wq)(Q_U Wk)^T / sqrt(d_k) + reshape(E We1);
/// detection features aggregate only track values through the masked softmax
/// of A, while edges are updated from the pre-mask A for every pair. Both
/// updates are followed by a residual feed-forward.
pub fn edge_augmented_cross_attention(
    g: &mut Graph,
    q_det: NodeId,
    q_src: NodeId,
    edges: NodeId,
    assoc_mask: &AttnMask,
    params: &EdgeParams,
    bound: &BoundParams,
    d_k: usize,
    n_dn: usize,
    n_track: usize,
) -> (NodeId, NodeId) {
    let n_det = g.shape(q_det).0;
    let n_src = g.shape(q_src).0;
    assert_eq!(n_src, n_dn + n_track, "source rows {n_src} != {n_dn} DN + {n_track} track");
    assert_eq!(
        g.shape(edges),
        (n_src * n_det, d_k),
        "edge matrix is {:?}, expected {}x{}",
        g.shape(edges),
        n_src * n_det,
        d_k
    );

    let qp = g.matmul(q_det, bound.node(params.wq));
    let kp = g.matmul(q_src, bound.node(params.wk));
    let kt = g.transpose(kp);
    let scores = g.matmul(qp, kt);
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    // Edge bias: (u, d)-major column vector reshaped to sources x detections.
    let e_bias = g.matmul(edges, bound.node(params.we1));
    let e_bias = g.reshape(e_bias, n_src, n_det);
    let e_bias = g.transpose(e_bias);
    let attn = g.add(scores, e_bias);

    // Query update: normalize over track columns only, aggregate track values.
    let probs = g.masked_softmax(attn, assoc_mask.entries.clone());
    let probs_track = g.slice_cols(probs, n_dn, n_track);
    let q_track = g.slice_rows(q_src, n_dn, n_track);
    let v_track = g.matmul(q_track, bound.node(params.wv));
    let upd = g.matmul(probs_track, v_track);
    let q_det = g.add(q_det, upd);
    let q_det = ffn_residual(
        g,
        q_det,
        bound.node(params.ffn_d.w1),
        bound.node(params.ffn_d.b1),
        bound.node(params.ffn_d.w2),
        bound.node(params.ffn_d.b2),
    );

    // Edge update from the pre-mask attention, all pairs including denoising.
    let attn_t = g.transpose(attn);
    let attn_col = g.reshape(attn_t, n_src * n_det, 1);
    let e_upd = g.matmul(attn_col, bound.node(params.we2));
    let edges = g.add(edges, e_upd);
    let edges = ffn_residual(
        g,
        edges,
        bound.node(params.ffn_e.w1),
        bound.node(params.ffn_e.b1),
        bound.node(params.ffn_e.w2),
        bound.node(params.ffn_e.b2),
    );

    (q_det, edges)
}

/// Box regression parameters and objectness logits for every query row.
pub fn task_heads(
    g: &mut Graph,
    x: NodeId,
    heads: &HeadParams,
    bound: &BoundParams,
) -> LayerPreds {
    let box_params = mlp2(
        g,
        x,
        bound.node(heads.box_mlp.w1),
        bound.node(heads.box_mlp.b1),
        bound.node(heads.box_mlp.w2),
        bound.node(heads.box_mlp.b2),
    );
    let cls_logits = mlp2(
        g,
        x,
        bound.node(heads.cls_mlp.w1),
        bound.node(heads.cls_mlp.b1),
        bound.node(heads.cls_mlp.w2),
        bound.node(heads.cls_mlp.b2),
    );
    LayerPreds {
        box_params,
        cls_logits,
    }
}

/// Per-pair association logits from the final edge features, reshaped to
/// (N_DN,all + N_T) x N_D in pair order.
pub fn association_head(
    g: &mut Graph,
    edges: NodeId,
    heads: &HeadParams,
    bound: &BoundParams,
    n_src: usize,
    n_det: usize,
) -> NodeId {
    let logits = mlp2(
        g,
        edges,
        bound.node(heads.assoc_mlp.w1),
        bound.node(heads.assoc_mlp.b1),
        bound.node(heads.assoc_mlp.w2),
        bound.node(heads.assoc_mlp.b2),
    );
    g.reshape(logits, n_src, n_det)
}

fn point_encoding_matrix(points: &[[f64; 3]]) -> Matrix {
    if points.is_empty() {
        return Matrix::zeros(0, POINT_ENCODING_DIM);
    }
    let rows: Vec<Vec<f64>> = points.iter().map(encode_point).collect();
    Matrix::from_rows(&rows)
}

fn edge_init_encoding(src_refs: &[[f64; 3]], det_refs: &[[f64; 3]]) -> Matrix {
    let mut rows = Vec::with_capacity(src_refs.len() * det_refs.len());
    for s in src_refs {
        for d in det_refs {
            let diff = [s[0] - d[0], s[1] - d[1], s[2] - d[2]];
            rows.push(encode_point(&diff));
        }
    }
    if rows.is_empty() {
        Matrix::zeros(0, POINT_ENCODING_DIM)
    } else {
        Matrix::from_rows(&rows)
    }
}

/// Runs one frame through the decoder for the configured paradigm.
pub fn forward_frame(
    g: &mut Graph,
    model: &TrackerModel,
    bound: &BoundParams,
    input: &FrameInput<'_>,
) -> FrameOutput {
    let d = model.config.feature_dim;
    let n_track = input.track_refs.len();
    let n_det = input.det_refs.len();
    assert_eq!(g.shape(input.track_features), (n_track, d));

    let (group_sizes, dn_refs): (Vec<usize>, Vec<[f64; 3]>) = match &input.dn {
        Some(dn) => (dn.set.group_sizes.clone(), dn.set.reference_points()),
        None => (Vec::new(), Vec::new()),
    };
    let layout = QueryLayout::new(group_sizes, n_track, n_det);
    let n_dn = layout.n_dn_all();
    let n_src = layout.n_sources();

    let mut refs: Vec<[f64; 3]> = Vec::with_capacity(layout.total());
    refs.extend_from_slice(&dn_refs);
    refs.extend_from_slice(input.track_refs);
    refs.extend_from_slice(input.det_refs);

    // Input assembly: normalized carried features plus projected reference
    // point encodings. Detection queries start from their encoding alone.
    let det_zero = g.input(Matrix::zeros(n_det, d));
    let carried = match &input.dn {
        Some(dn) => g.concat_rows(&[dn.features, input.track_features, det_zero]),
        None => g.concat_rows(&[input.track_features, det_zero]),
    };
    let normed = g.layer_norm(carried);
    let pos_raw = g.input(point_encoding_matrix(&refs));
    let pos = g.matmul(pos_raw, bound.node(model.ref_proj));
    let mut x = g.add(normed, pos);

    let sa_mask = build_self_attention_mask(&layout);
    let assoc_mask = build_association_mask(&layout);

    let tokens_raw = g.input(input.obs.tokens.clone());
    let tokens = g.matmul(tokens_raw, bound.node(model.obs_proj));
    let rel = g.input(relative_token_encodings(&refs, input.obs));
    let tok_positions = input.obs.positions();

    let has_assoc = model.config.paradigm.has_association_module();
    let mut edges = if has_assoc {
        let enc = g.input(edge_init_encoding(&refs[..n_src], input.det_refs));
        Some(g.matmul(enc, bound.node(model.edge_init_proj)))
    } else {
        None
    };

    let mut layers: Vec<LayerPreds> = Vec::with_capacity(model.layers.len());
    let mut bias_centers: Vec<Vec<[f64; 3]>> = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let locality = if l == 0 {
            obs_locality_bias(&refs, &tok_positions, OBS_SIGMA_COARSE)
        } else {
            let centers = match input.bias_centers {
                Some(frozen) => frozen[l - 1].clone(),
                None => decode_centers(g, layers.last().expect("previous layer recorded"), &refs),
            };
            let bias = obs_locality_bias(&centers, &tok_positions, OBS_SIGMA_FINE);
            bias_centers.push(centers);
            bias
        };
        x = masked_self_attention(g, x, &sa_mask, &layer.self_attn, bound, d);
        x = observation_cross_attention(g, x, tokens, rel, locality, &layer.obs_attn, bound, d);
        x = ffn_residual(
            g,
            x,
            bound.node(layer.ffn.w1),
            bound.node(layer.ffn.b1),
            bound.node(layer.ffn.w2),
            bound.node(layer.ffn.b2),
        );
        if let Some(edge_params) = &layer.edge {
            let q_src = g.slice_rows(x, 0, n_src);
            let q_det = g.slice_rows(x, n_src, n_det);
            let (q_det, new_edges) = edge_augmented_cross_attention(
                g,
                q_det,
                q_src,
                edges.expect("ADA layers carry edges"),
                &assoc_mask,
                edge_params,
                bound,
                d,
                n_dn,
                n_track,
            );
            edges = Some(new_edges);
            x = g.concat_rows(&[q_src, q_det]);
        }
        layers.push(task_heads(g, x, &model.heads, bound));
    }

    // TBD: the association decoder is stacked after the detector.
    for edge_params in &model.assoc_layers {
        let q_src = g.slice_rows(x, 0, n_src);
        let q_det = g.slice_rows(x, n_src, n_det);
        let (q_det, new_edges) = edge_augmented_cross_attention(
            g,
            q_det,
            q_src,
            edges.expect("TBD association layers carry edges"),
            &assoc_mask,
            edge_params,
            bound,
            d,
            n_dn,
            n_track,
        );
        edges = Some(new_edges);
        x = g.concat_rows(&[q_src, q_det]);
    }

    let assoc_logits =
        edges.map(|e| association_head(g, e, &model.heads, bound, n_src, n_det));

    FrameOutput {
        layout,
        refs,
        layers,
        assoc_logits,
        features: x,
        bias_centers,
    }
}

/// Detached per-row decoded centers from one layer's box parameters.
fn decode_centers(g: &Graph, preds: &LayerPreds, refs: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let params = g.value(preds.box_params);
    refs.iter()
        .enumerate()
        .map(|(i, r)| {
            [
                r[0] + params.get(i, 0),
                r[1] + params.get(i, 1),
                r[2] + params.get(i, 2),
            ]
        })
        .collect()
}

/// Detection reference points sampled uniformly over the tracking space as a
/// near-square lattice of cell centers, so every query owns a stable
/// territory across frames.
pub fn detection_reference_grid(n: usize, arena: f64) -> Vec<[f64; 3]> {
    assert!(n >= 1);
    // Largest divisor of n at or below sqrt(n) gives an exact lattice for the
    // usual query counts; fall back to a truncated grid otherwise.
    let mut rows = 1;
    for r in 1..=n {
        if r * r > n {
            break;
        }
        if n % r == 0 {
            rows = r;
        }
    }
    let cols = n.div_ceil(rows);
    let mut refs = Vec::with_capacity(n);
    'fill: for i in 0..rows {
        for j in 0..cols {
            if refs.len() == n {
                break 'fill;
            }
            let y = -arena + 2.0 * arena * (i as f64 + 0.5) / rows as f64;
            let x = -arena + 2.0 * arena * (j as f64 + 0.5) / cols as f64;
            refs.push([x, y, 0.75]);
        }
    }
    refs
}

/// Uniformly sampled random detection reference points.
pub fn sample_detection_refs(n: usize, arena: f64, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-arena..arena),
                rng.random_range(-arena..arena),
                rng.random_range(0.4..1.2),
            ]
        })
        .collect()
}

/// Decodes one head row into a box: center offsets from the reference point,
/// log sizes, yaw as a (sin, cos) pair, velocity, plus a logistic score.
pub fn decode_box(params: &[f64], cls_logit: f64, ref_point: &[f64; 3]) -> BevBox {
    assert_eq!(params.len(), 10, "box head emits 10 parameters");
    let center = [
        ref_point[0] + params[0],
        ref_point[1] + params[1],
        ref_point[2] + params[2],
    ];
    // Clamp log sizes so decoded extents stay positive and finite.
    let size = [
        params[3].clamp(-20.0, 20.0).exp(),
        params[4].clamp(-20.0, 20.0).exp(),
        params[5].clamp(-20.0, 20.0).exp(),
    ];
    let yaw = if params[6] == 0.0 && params[7] == 0.0 {
        0.0
    } else {
        params[6].atan2(params[7])
    };
    let velocity = [params[8], params[9]];
    let score = crate::numeric::matrix::sigmoid_scalar(cls_logit);
    BevBox::new(center, size, yaw, velocity).with_score(score)
}

/// Regression target in head-parameter space for a ground-truth box.
pub fn box_target_params(gt: &BevBox, ref_point: &[f64; 3]) -> [f64; 10] {
    [
        gt.center[0] - ref_point[0],
        gt.center[1] - ref_point[1],
        gt.center[2] - ref_point[2],
        gt.size[0].ln(),
        gt.size[1].ln(),
        gt.size[2].ln(),
        gt.yaw.sin(),
        gt.yaw.cos(),
        gt.velocity[0],
        gt.velocity[1],
    ]
}

/// Decoded boxes for a contiguous row span of a frame output's final layer.
pub fn decode_span(
    g: &Graph,
    out: &FrameOutput,
    start: usize,
    len: usize,
) -> Vec<BevBox> {
    let preds = out.final_layer();
    let box_params = g.value(preds.box_params);
    let cls = g.value(preds.cls_logits);
    (start..start + len)
        .map(|i| decode_box(box_params.row(i), cls.row(i)[0], &out.refs[i]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::ParamStore;
    use crate::rng::SeedPath;
    use crate::tracker::model::{Paradigm, TrackerConfig};

    fn tiny_model(paradigm: Paradigm) -> TrackerModel {
        TrackerModel::new(
            TrackerConfig {
                paradigm,
                decoder_layers: 1,
                feature_dim: 8,
                n_det_queries: 3,
                ..TrackerConfig::default()
            },
            SeedPath::root(77),
        )
    }

    #[test]
    fn zero_head_weights_decode_to_reference_defaults() {
        let b = decode_box(&[0.0; 10], 0.0, &[1.0, 2.0, 0.5]);
        assert_eq!(b.center, [1.0, 2.0, 0.5]);
        assert_eq!(b.size, [1.0, 1.0, 1.0]);
        assert_eq!(b.yaw, 0.0);
        assert_eq!(b.velocity, [0.0, 0.0]);
        assert_eq!(b.score, 0.5);
    }

    #[test]
    fn target_params_round_trip_through_decode() {
        let ref_point = [3.0, -1.0, 0.8];
        let gt = BevBox::new([4.0, 0.5, 0.7], [2.0, 4.5, 1.6], 0.9, [1.2, -0.3]);
        let params = box_target_params(&gt, &ref_point);
        let decoded = decode_box(&params, 0.0, &ref_point);
        assert!(decoded.center_distance_2d(&gt) < 1e-12);
        for a in 0..3 {
            assert!((decoded.size[a] - gt.size[a]).abs() < 1e-12);
        }
        assert!((decoded.yaw - gt.yaw).abs() < 1e-12);
    }

    #[test]
    fn observation_cross_attention_with_zero_values_is_identity() {
        let model = tiny_model(Paradigm::Tba);
        let d = model.config.feature_dim;
        let mut store = ParamStore::new();
        let wq = store.add("wq", Matrix::from_fn(d, d, |i, j| ((i + j) as f64).sin() * 0.2));
        let wk = store.add("wk", Matrix::from_fn(d, d, |i, j| ((i * j) as f64).cos() * 0.2));
        let wv = store.add("wv", Matrix::zeros(d, d));
        let mut g = Graph::new();
        let bound_ids: Vec<NodeId> = store.ids().map(|id| g.param(&store, id)).collect();
        // Reuse BoundParams shape by binding the tiny store manually.
        let params = AttnParams { wq, wk, wv };
        let bound = BoundParams::from_nodes(bound_ids);
        let x = g.input(Matrix::from_fn(4, d, |i, j| (i * d + j) as f64 * 0.1));
        let tokens = g.input(Matrix::from_fn(2, d, |i, j| (i + j) as f64 * 0.3));
        let rel = g.input(Matrix::from_fn(8, d, |i, j| (i * d + j) as f64 * 0.05));
        let bias = Matrix::from_fn(4, 2, |i, j| (i + j) as f64 * -0.1);
        let y = observation_cross_attention(&mut g, x, tokens, rel, bias, &params, &bound, d);
        assert!(g.value(y).bit_eq(g.value(x)));
        let _ = model;
    }

    #[test]
    fn single_token_attention_is_uniform() {
        let d = 4;
        let mut store = ParamStore::new();
        let wq = store.add("wq", Matrix::from_fn(d, d, |i, j| ((i + 2 * j) as f64).sin()));
        let wk = store.add("wk", Matrix::from_fn(d, d, |i, j| ((2 * i + j) as f64).cos()));
        let wv = store.add("wv", Matrix::identity(d));
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = store.ids().map(|id| g.param(&store, id)).collect();
        let bound = BoundParams::from_nodes(nodes);
        let params = AttnParams { wq, wk, wv };
        let x = g.input(Matrix::from_fn(3, d, |i, j| (i * d + j) as f64));
        let tok = g.input(Matrix::from_fn(1, d, |_, j| j as f64 * 0.5 - 1.0));
        // One relative value row per (query, token) pair.
        let rel_rows = Matrix::from_fn(3, d, |i, j| (i * d + j) as f64 * 0.25 - 1.0);
        let rel = g.input(rel_rows.clone());
        let bias = Matrix::from_fn(3, 1, |i, _| i as f64 * -2.0);
        let y = observation_cross_attention(&mut g, x, tok, rel, bias, &params, &bound, d);
        // With one token the attention weight is 1 regardless of scores, so
        // the update is exactly the query's own relative value row.
        for i in 0..3 {
            for j in 0..d {
                let expect = g.value(x).get(i, j) + rel_rows.get(i, j);
                assert!((g.value(y).get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_token_set_is_identity() {
        let d = 4;
        let mut store = ParamStore::new();
        let wq = store.add("wq", Matrix::identity(d));
        let wk = store.add("wk", Matrix::identity(d));
        let wv = store.add("wv", Matrix::identity(d));
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = store.ids().map(|id| g.param(&store, id)).collect();
        let bound = BoundParams::from_nodes(nodes);
        let params = AttnParams { wq, wk, wv };
        let x = g.input(Matrix::from_fn(3, d, |i, j| (i + j) as f64));
        let tok = g.input(Matrix::zeros(0, d));
        let rel = g.input(Matrix::zeros(0, d));
        let y = observation_cross_attention(&mut g, x, tok, rel, Matrix::zeros(3, 0), &params, &bound, d);
        assert!(g.value(y).bit_eq(g.value(x)));
    }

    #[test]
    fn tbd_and_ada_single_layer_have_equal_op_counts() {
        let seed = SeedPath::root(5);
        let mk = |paradigm| {
            TrackerModel::new(
                TrackerConfig {
                    paradigm,
                    decoder_layers: 1,
                    feature_dim: 8,
                    n_det_queries: 3,
                    ..TrackerConfig::default()
                },
                seed,
            )
        };
        let run = |model: &TrackerModel| {
            let mut g = Graph::new();
            let bound = BoundParams::bind(model, &mut g);
            let track_features = g.input(Matrix::from_fn(2, 8, |i, j| (i + j) as f64 * 0.1));
            let obs = ObsFrame::empty();
            let input = FrameInput {
                track_features,
                track_refs: &[[0.0, 0.0, 0.5], [2.0, 1.0, 0.5]],
                dn: None,
                obs: &obs,
                det_refs: &[[1.0, 1.0, 0.5], [-1.0, 0.0, 0.5], [3.0, -2.0, 0.5]],
                bias_centers: None,
            };
            let out = forward_frame(&mut g, model, &bound, &input);
            let _ = out;
            g.op_histogram()
        };
        let tbd = run(&mk(Paradigm::Tbd));
        let ada = run(&mk(Paradigm::Ada));
        assert_eq!(tbd, ada);
    }
}
