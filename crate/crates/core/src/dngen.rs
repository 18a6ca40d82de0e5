//! Temporal denoising query generation.
//!
//! Denoising queries are built from the ground truth of a source frame:
//! boxes are cloned from GT, features are copied from the track query with
//! the same instance ID (zero vector for instances that have no track query
//! yet), four noise families are injected, top-scoring false-positive
//! detections are appended as negatives, and the set is optionally propagated
//! to the next frame by a linear motion model before reconstruction targets
//! are assigned.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::masks::QueryLayout;
use crate::numeric::Matrix;
use crate::rng::SeedPath;

/// One object hypothesis or ground-truth box in bird's-eye view.
#[derive(Clone, Debug, PartialEq)]
pub struct BevBox {
    /// Center (x, y, z) in meters; also the reference point.
    pub center: [f64; 3],
    /// Size (w, l, h) in meters.
    pub size: [f64; 3],
    /// Yaw in radians, wrapped to (-pi, pi].
    pub yaw: f64,
    /// BEV velocity (vx, vy) in meters/second.
    pub velocity: [f64; 2],
    pub instance_id: Option<u64>,
    pub score: f64,
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_yaw(yaw: f64) -> f64 {
    let mut y = yaw % (2.0 * PI);
    if y <= -PI {
        y += 2.0 * PI;
    } else if y > PI {
        y -= 2.0 * PI;
    }
    y
}

impl BevBox {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, velocity: [f64; 2]) -> Self {
        assert!(size.iter().all(|&s| s > 0.0), "box size must be positive, got {size:?}");
        BevBox {
            center,
            size,
            yaw: wrap_yaw(yaw),
            velocity,
            instance_id: None,
            score: 1.0,
        }
    }

    pub fn with_instance(mut self, id: u64) -> Self {
        self.instance_id = Some(id);
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        assert!((0.0..=1.0).contains(&score), "score must be in [0,1], got {score}");
        self.score = score;
        self
    }

    /// Center advanced by the linear motion model over `dt` seconds.
    pub fn propagated(&self, dt: f64) -> BevBox {
        let mut b = self.clone();
        b.center[0] += b.velocity[0] * dt;
        b.center[1] += b.velocity[1] * dt;
        b
    }

    pub fn center_distance_2d(&self, other: &BevBox) -> f64 {
        let dx = self.center[0] - other.center[0];
        let dy = self.center[1] - other.center[1];
        (dx * dx + dy * dy).sqrt()
    }
}

/// Whether denoising queries reconstruct the generation frame (static) or are
/// propagated and reconstruct the next frame (temporal).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenoisingMode {
    Static,
    Temporal,
}

/// Per-group noise configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoisingGroupSpec {
    /// Uniform center-noise scale relative to box size.
    pub lambda_center: f64,
    /// Variance of the Gaussian velocity noise (per BEV axis).
    pub sigma_velo: f64,
    /// Variance of the Gaussian query-feature noise (per coordinate).
    pub sigma_query: f64,
    /// Ratio of appended false positives to GT count.
    pub alpha_fp: f64,
    /// Probability of dropping each positive query.
    pub alpha_drop: f64,
    pub mode: DenoisingMode,
}

impl DenoisingGroupSpec {
    pub fn validate(&self) -> Result<(), GroupConfigError> {
        let fields = [
            ("lambda_center", self.lambda_center),
            ("sigma_velo", self.sigma_velo),
            ("sigma_query", self.sigma_query),
            ("alpha_fp", self.alpha_fp),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(GroupConfigError::BadScale {
                    field: name,
                    value: v,
                });
            }
        }
        if !(0.0..=1.0).contains(&self.alpha_drop) {
            return Err(GroupConfigError::BadScale {
                field: "alpha_drop",
                value: self.alpha_drop,
            });
        }
        Ok(())
    }
}

impl Default for DenoisingGroupSpec {
    /// The operating point: lambda = 1, sigma_velo = 4, sigma_query = 0.1,
    /// alpha_fp = 0.1, random drop disabled.
    fn default() -> Self {
        DenoisingGroupSpec {
            lambda_center: 1.0,
            sigma_velo: 4.0,
            sigma_query: 0.1,
            alpha_fp: 0.1,
            alpha_drop: 0.0,
            mode: DenoisingMode::Temporal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupStrategy {
    /// Every group carries all noise families.
    General,
    /// Three groups, one noise family each: center / velocity / query.
    Dedicated,
    /// The dedicated triple plus two general groups.
    Hybrid,
}

#[derive(Debug, Error)]
pub enum GroupConfigError {
    #[error("strategy {strategy:?} requires {required} groups, got {given}")]
    GroupCountMismatch {
        strategy: GroupStrategy,
        required: &'static str,
        given: usize,
    },
    #[error("{field} must be finite and in range, got {value}")]
    BadScale { field: &'static str, value: f64 },
}

/// Expands a grouping strategy into per-group noise configurations.
/// Instance-level noise (alpha_fp) stays on in every group.
pub fn make_group_specs(
    strategy: GroupStrategy,
    n_groups: usize,
    base: &DenoisingGroupSpec,
) -> Result<Vec<DenoisingGroupSpec>, GroupConfigError> {
    base.validate()?;
    if n_groups == 0 {
        return Err(GroupConfigError::GroupCountMismatch {
            strategy,
            required: ">= 1",
            given: 0,
        });
    }
    let dedicated_triple = |base: &DenoisingGroupSpec| {
        let center_only = DenoisingGroupSpec {
            sigma_velo: 0.0,
            sigma_query: 0.0,
            ..base.clone()
        };
        let velo_only = DenoisingGroupSpec {
            lambda_center: 0.0,
            sigma_query: 0.0,
            ..base.clone()
        };
        let query_only = DenoisingGroupSpec {
            lambda_center: 0.0,
            sigma_velo: 0.0,
            ..base.clone()
        };
        vec![center_only, velo_only, query_only]
    };
    match strategy {
        GroupStrategy::General => Ok(vec![base.clone(); n_groups]),
        GroupStrategy::Dedicated => {
            if n_groups != 3 {
                return Err(GroupConfigError::GroupCountMismatch {
                    strategy,
                    required: "exactly 3",
                    given: n_groups,
                });
            }
            Ok(dedicated_triple(base))
        }
        GroupStrategy::Hybrid => {
            if n_groups != 5 {
                return Err(GroupConfigError::GroupCountMismatch {
                    strategy,
                    required: "exactly 5",
                    given: n_groups,
                });
            }
            let mut specs = dedicated_triple(base);
            specs.push(base.clone());
            specs.push(base.clone());
            Ok(specs)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

/// Where a denoising query's feature vector comes from, so the training graph
/// can rebuild the same assembly differentiably.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    /// Row of the track-query feature matrix (same instance ID).
    Track(usize),
    /// Instance had no track query yet; zero vector.
    Zero,
    /// Row of the false-positive feature matrix.
    FalsePositive(usize),
}

/// Track queries visible to the generator: one feature row and one instance
/// ID per track.
pub struct TrackQueryView<'a> {
    pub features: &'a Matrix,
    pub instance_ids: &'a [u64],
}

/// Pool of false-positive detections (unmatched at the generation frame).
#[derive(Clone, Debug)]
pub struct FalsePositiveSet {
    /// n_fp x d_k query features.
    pub features: Matrix,
    /// Predicted boxes with scores and velocities.
    pub boxes: Vec<BevBox>,
}

impl FalsePositiveSet {
    pub fn empty(d_k: usize) -> Self {
        FalsePositiveSet {
            features: Matrix::zeros(0, d_k),
            boxes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// A generated set of denoising queries, concatenated group by group.
#[derive(Clone, Debug)]
pub struct DenoisingQuerySet {
    /// n x d_k materialized features (source features plus noise).
    pub features: Matrix,
    /// Per-query provenance of the feature row (before noise).
    pub feature_sources: Vec<FeatureSource>,
    /// n x d_k additive feature noise (zero rows for negatives).
    pub feature_noise: Matrix,
    /// Noised (and possibly propagated) boxes; centers are reference points.
    pub boxes: Vec<BevBox>,
    pub group_id: Vec<usize>,
    pub polarity: Vec<Polarity>,
    /// Instance each query must reconstruct; None = background. Filled by
    /// [`assign_denoising_targets`].
    pub target_instance: Vec<Option<u64>>,
    pub group_sizes: Vec<usize>,
    pub mode: DenoisingMode,
}

impl DenoisingQuerySet {
    pub fn empty(d_k: usize, mode: DenoisingMode) -> Self {
        DenoisingQuerySet {
            features: Matrix::zeros(0, d_k),
            feature_sources: Vec::new(),
            feature_noise: Matrix::zeros(0, d_k),
            boxes: Vec::new(),
            group_id: Vec::new(),
            polarity: Vec::new(),
            target_instance: Vec::new(),
            group_sizes: Vec::new(),
            mode,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn reference_points(&self) -> Vec<[f64; 3]> {
        self.boxes.iter().map(|b| b.center).collect()
    }

    /// Layout this set occupies in front of `n_track` + `n_det` queries.
    pub fn layout(&self, n_track: usize, n_det: usize) -> QueryLayout {
        QueryLayout::new(self.group_sizes.clone(), n_track, n_det)
    }
}

/// Uniform center noise: each axis shifted by a draw from
/// (-lambda*extent/2, lambda*extent/2) for extents (w, l, h).
pub fn apply_center_noise(bbox: &BevBox, lambda: f64, rng: &mut impl Rng) -> BevBox {
    assert!(lambda >= 0.0 && lambda.is_finite(), "lambda must be >= 0, got {lambda}");
    let mut out = bbox.clone();
    for axis in 0..3 {
        let bound = lambda * bbox.size[axis] / 2.0;
        out.center[axis] += uniform_open(bound, rng);
    }
    out
}

/// Draw from the open interval (-bound, bound); zero when bound is zero.
fn uniform_open(bound: f64, rng: &mut impl Rng) -> f64 {
    if bound == 0.0 {
        return 0.0;
    }
    loop {
        let v = rng.random_range(-bound..bound);
        if v > -bound {
            return v;
        }
    }
}

/// Gaussian feature noise with covariance sigma_query * I (sigma_query is the
/// per-coordinate variance).
pub fn apply_query_noise(feature: &mut [f64], sigma_query: f64, rng: &mut impl Rng) {
    assert!(sigma_query >= 0.0 && sigma_query.is_finite());
    if sigma_query == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma_query.sqrt()).expect("valid std");
    for v in feature.iter_mut() {
        *v += normal.sample(rng);
    }
}

/// Gaussian BEV velocity noise with covariance sigma_velo * I2.
pub fn apply_velocity_noise(bbox: &BevBox, sigma_velo: f64, rng: &mut impl Rng) -> BevBox {
    assert!(sigma_velo >= 0.0 && sigma_velo.is_finite());
    let mut out = bbox.clone();
    if sigma_velo == 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, sigma_velo.sqrt()).expect("valid std");
    out.velocity[0] += normal.sample(rng);
    out.velocity[1] += normal.sample(rng);
    out
}

/// k = round-half-up(alpha_fp * n_gt).
pub fn negative_count(alpha_fp: f64, n_gt: usize) -> usize {
    (alpha_fp * n_gt as f64 + 0.5).floor() as usize
}

/// Appends the top-k highest-score false positives as negative queries for
/// group `group`. Appends all of them when fewer than k exist.
pub fn append_negative_queries(
    set: &mut DenoisingQuerySet,
    fps: &FalsePositiveSet,
    alpha_fp: f64,
    n_gt: usize,
    group: usize,
) {
    let k = negative_count(alpha_fp, n_gt);
    if k == 0 || fps.is_empty() {
        return;
    }
    let mut order: Vec<usize> = (0..fps.len()).collect();
    order.sort_by(|&a, &b| {
        fps.boxes[b]
            .score
            .partial_cmp(&fps.boxes[a].score)
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    let d_k = set.features.cols();
    for &fp_idx in &order {
        let fp_row = Matrix::from_vec(1, d_k, fps.features.row(fp_idx).to_vec());
        set.features = crate::numeric::matrix::concat_rows(&[&set.features, &fp_row]);
        set.feature_noise =
            crate::numeric::matrix::concat_rows(&[&set.feature_noise, &Matrix::zeros(1, d_k)]);
        set.feature_sources.push(FeatureSource::FalsePositive(fp_idx));
        let mut bx = fps.boxes[fp_idx].clone();
        bx.instance_id = None;
        set.boxes.push(bx);
        set.group_id.push(group);
        set.polarity.push(Polarity::Negative);
        set.target_instance.push(None);
        if set.group_sizes.len() <= group {
            set.group_sizes.resize(group + 1, 0);
        }
        set.group_sizes[group] += 1;
    }
}

/// Removes each positive query independently with probability alpha_drop.
/// Negative queries are never dropped.
pub fn drop_positive_queries(
    set: &DenoisingQuerySet,
    alpha_drop: f64,
    rng: &mut impl Rng,
) -> DenoisingQuerySet {
    assert!((0.0..=1.0).contains(&alpha_drop), "alpha_drop in [0,1], got {alpha_drop}");
    if alpha_drop == 0.0 {
        return set.clone();
    }
    let keep: Vec<usize> = (0..set.len())
        .filter(|&q| set.polarity[q] == Polarity::Negative || !rng.random_bool(alpha_drop))
        .collect();
    retain_queries(set, &keep)
}

fn retain_queries(set: &DenoisingQuerySet, keep: &[usize]) -> DenoisingQuerySet {
    let mut out = DenoisingQuerySet::empty(set.features.cols(), set.mode);
    out.group_sizes = vec![0; set.group_sizes.len()];
    out.features = crate::numeric::matrix::gather_rows(&set.features, keep);
    out.feature_noise = crate::numeric::matrix::gather_rows(&set.feature_noise, keep);
    for &q in keep {
        out.feature_sources.push(set.feature_sources[q]);
        out.boxes.push(set.boxes[q].clone());
        out.group_id.push(set.group_id[q]);
        out.polarity.push(set.polarity[q]);
        out.target_instance.push(set.target_instance[q]);
        out.group_sizes[set.group_id[q]] += 1;
    }
    out
}

/// Advances every query by its own (noised) velocity over `dt` seconds.
/// Static sets are returned unchanged.
pub fn propagate_queries(set: &DenoisingQuerySet, dt: f64) -> DenoisingQuerySet {
    if set.mode == DenoisingMode::Static {
        return set.clone();
    }
    assert!(dt > 0.0, "dt must be positive, got {dt}");
    let mut out = set.clone();
    for b in &mut out.boxes {
        *b = b.propagated(dt);
    }
    out
}

/// Assigns reconstruction targets against the ground truth of the target
/// frame: positives whose instance is still present reconstruct that box,
/// everything else is background.
pub fn assign_denoising_targets(set: &mut DenoisingQuerySet, gt_frame: &[BevBox]) {
    for q in 0..set.len() {
        set.target_instance[q] = match set.polarity[q] {
            Polarity::Negative => None,
            Polarity::Positive => set.boxes[q].instance_id.filter(|id| {
                gt_frame
                    .iter()
                    .any(|g| g.instance_id == Some(*id))
            }),
        };
    }
}

/// Generates all denoising groups for one frame transition.
///
/// Per group: clone the GT boxes, copy features from the track query sharing
/// the instance ID (zero vector when the instance has no track query yet),
/// inject the group's noise, append negatives, apply random drop. Groups draw
/// from independent substreams of `seed` and are concatenated in group order.
pub fn generate(
    gt: &[BevBox],
    tracks: &TrackQueryView<'_>,
    fps: &FalsePositiveSet,
    specs: &[DenoisingGroupSpec],
    d_k: usize,
    seed: SeedPath,
) -> DenoisingQuerySet {
    assert_eq!(tracks.features.rows(), tracks.instance_ids.len());
    let mode = specs.first().map_or(DenoisingMode::Temporal, |s| s.mode);
    let mut groups: Vec<DenoisingQuerySet> = Vec::with_capacity(specs.len());
    for (g, spec) in specs.iter().enumerate() {
        spec.validate().expect("group spec validated upstream");
        let group_seed = seed.child_idx(g as u64);
        let mut center_rng = group_seed.child("center").rng();
        let mut query_rng = group_seed.child("query").rng();
        let mut velo_rng = group_seed.child("velo").rng();
        let mut drop_rng = group_seed.child("drop").rng();

        let mut set = DenoisingQuerySet::empty(d_k, mode);
        set.group_sizes = vec![0];
        let mut feat_rows: Vec<Vec<f64>> = Vec::new();
        let mut noise_rows: Vec<Vec<f64>> = Vec::new();
        for gt_box in gt {
            let instance = gt_box
                .instance_id
                .expect("ground-truth boxes carry instance IDs");
            let source = match tracks.instance_ids.iter().position(|&id| id == instance) {
                Some(i) => FeatureSource::Track(i),
                None => FeatureSource::Zero,
            };
            let base_feat = match source {
                FeatureSource::Track(i) => tracks.features.row(i).to_vec(),
                _ => vec![0.0; d_k],
            };
            let mut noise = vec![0.0; d_k];
            apply_query_noise(&mut noise, spec.sigma_query, &mut query_rng);
            let feat: Vec<f64> = base_feat.iter().zip(&noise).map(|(a, b)| a + b).collect();

            let noised = apply_center_noise(gt_box, spec.lambda_center, &mut center_rng);
            let noised = apply_velocity_noise(&noised, spec.sigma_velo, &mut velo_rng);

            feat_rows.push(feat);
            noise_rows.push(noise);
            set.feature_sources.push(source);
            set.boxes.push(noised);
            set.group_id.push(0);
            set.polarity.push(Polarity::Positive);
            set.target_instance.push(Some(instance));
            set.group_sizes[0] += 1;
        }
        set.features = if feat_rows.is_empty() {
            Matrix::zeros(0, d_k)
        } else {
            Matrix::from_rows(&feat_rows)
        };
        set.feature_noise = if noise_rows.is_empty() {
            Matrix::zeros(0, d_k)
        } else {
            Matrix::from_rows(&noise_rows)
        };

        append_negative_queries(&mut set, fps, spec.alpha_fp, gt.len(), 0);
        let set = drop_positive_queries(&set, spec.alpha_drop, &mut drop_rng);
        groups.push(set);
    }

    concat_groups(groups, d_k, mode)
}

fn concat_groups(
    groups: Vec<DenoisingQuerySet>,
    d_k: usize,
    mode: DenoisingMode,
) -> DenoisingQuerySet {
    let mut out = DenoisingQuerySet::empty(d_k, mode);
    for (g, part) in groups.into_iter().enumerate() {
        out.features = crate::numeric::matrix::concat_rows(&[&out.features, &part.features]);
        out.feature_noise =
            crate::numeric::matrix::concat_rows(&[&out.feature_noise, &part.feature_noise]);
        out.feature_sources.extend(part.feature_sources);
        out.boxes.extend(part.boxes);
        out.group_id.extend(part.group_id.iter().map(|_| g));
        out.polarity.extend(part.polarity);
        out.target_instance.extend(part.target_instance);
        out.group_sizes.push(part.group_sizes.iter().sum());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(id: u64) -> BevBox {
        BevBox::new([1.0, 2.0, 0.5], [2.0, 2.0, 2.0], 0.3, [1.0, -0.5]).with_instance(id)
    }

    #[test]
    fn yaw_wrapping() {
        assert!((wrap_yaw(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_yaw(-PI) - PI).abs() < 1e-12);
        assert_eq!(wrap_yaw(0.25), 0.25);
    }

    #[test]
    fn center_noise_zero_lambda_is_identity() {
        let b = unit_box(1);
        let mut rng = SeedPath::root(1).rng();
        let out = apply_center_noise(&b, 0.0, &mut rng);
        assert_eq!(out, b);
    }

    #[test]
    fn center_noise_bounds_and_mean() {
        // lambda = 1 with w = l = h = 2 bounds every |delta| by 1.
        let b = unit_box(1);
        let mut rng = SeedPath::root(2).child("center").rng();
        let n = 100_000;
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let out = apply_center_noise(&b, 1.0, &mut rng);
            for a in 0..3 {
                let d = out.center[a] - b.center[a];
                assert!(d.abs() < 1.0, "delta {d} out of open bound");
                sums[a] += d;
            }
        }
        // Uniform(-1,1): mean 0, sd 1/sqrt(3); 3 sigma over n samples.
        let tol = 3.0 / (3.0_f64).sqrt() / (n as f64).sqrt();
        for s in sums {
            assert!((s / n as f64).abs() < tol, "mean {} beyond {tol}", s / n as f64);
        }
    }

    #[test]
    fn query_noise_moments() {
        let sigma = 0.1; // variance at the operating point
        let d = 8;
        let n = 100_000;
        let mut rng = SeedPath::root(3).child("query").rng();
        let mut sum = vec![0.0; d];
        let mut sumsq = vec![0.0; d];
        let mut cross = 0.0; // coordinates 0 and 1
        for _ in 0..n {
            let mut row = vec![0.0; d];
            apply_query_noise(&mut row, sigma, &mut rng);
            for j in 0..d {
                sum[j] += row[j];
                sumsq[j] += row[j] * row[j];
            }
            cross += row[0] * row[1];
        }
        for j in 0..d {
            let mean = sum[j] / n as f64;
            let var = sumsq[j] / n as f64 - mean * mean;
            assert!((var - sigma).abs() < 0.05 * sigma, "var {var} vs {sigma}");
        }
        let cov = cross / n as f64;
        // 3 sigma bound for the empirical covariance of independent N(0, s).
        let bound = 3.0 * sigma / (n as f64).sqrt();
        assert!(cov.abs() < bound, "cov {cov} beyond {bound}");
    }

    #[test]
    fn velocity_noise_moments_and_isolation() {
        let sigma = 4.0;
        let n = 100_000;
        let b = unit_box(9);
        let mut rng = SeedPath::root(4).child("velo").rng();
        let mut sumsq = [0.0; 2];
        for _ in 0..n {
            let out = apply_velocity_noise(&b, sigma, &mut rng);
            assert_eq!(out.center, b.center);
            assert_eq!(out.yaw, b.yaw);
            assert_eq!(out.size, b.size);
            for a in 0..2 {
                let d = out.velocity[a] - b.velocity[a];
                sumsq[a] += d * d;
            }
        }
        for s in sumsq {
            let var = s / n as f64;
            assert!((var - sigma).abs() < 0.05 * sigma, "var {var} vs {sigma}");
        }
    }

    #[test]
    fn velocity_noise_zero_sigma_identity() {
        let b = unit_box(2);
        let mut rng = SeedPath::root(5).rng();
        assert_eq!(apply_velocity_noise(&b, 0.0, &mut rng), b);
    }

    #[test]
    fn negative_count_rounding() {
        assert_eq!(negative_count(0.1, 20), 2);
        assert_eq!(negative_count(0.0, 100), 0);
        assert_eq!(negative_count(0.1, 5), 1); // 0.5 rounds half-up
        assert_eq!(negative_count(0.1, 4), 0);
    }

    fn fp_set(scores: &[f64], d_k: usize) -> FalsePositiveSet {
        let features = Matrix::from_fn(scores.len(), d_k, |i, j| (i * d_k + j) as f64);
        let boxes = scores
            .iter()
            .map(|&s| BevBox::new([s, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, [0.0, 0.0]).with_score(s))
            .collect();
        FalsePositiveSet { features, boxes }
    }

    #[test]
    fn negatives_appended_in_score_order() {
        let d_k = 4;
        let mut set = DenoisingQuerySet::empty(d_k, DenoisingMode::Temporal);
        set.group_sizes = vec![0];
        let fps = fp_set(&[0.2, 0.9, 0.1, 0.7, 0.8], d_k);
        // alpha 0.3 of 10 GT -> k = 3.
        append_negative_queries(&mut set, &fps, 0.3, 10, 0);
        assert_eq!(set.len(), 3);
        let picked: Vec<f64> = set.boxes.iter().map(|b| b.score).collect();
        assert_eq!(picked, vec![0.9, 0.8, 0.7]);
        assert!(set.polarity.iter().all(|&p| p == Polarity::Negative));
        assert!(set.target_instance.iter().all(|t| t.is_none()));
        assert_eq!(set.feature_sources[0], FeatureSource::FalsePositive(1));
    }

    #[test]
    fn drop_rates() {
        let d_k = 2;
        let mut set = DenoisingQuerySet::empty(d_k, DenoisingMode::Temporal);
        set.group_sizes = vec![0];
        for i in 0..10 {
            set.features = crate::numeric::matrix::concat_rows(&[&set.features, &Matrix::zeros(1, d_k)]);
            set.feature_noise = crate::numeric::matrix::concat_rows(&[&set.feature_noise, &Matrix::zeros(1, d_k)]);
            set.feature_sources.push(FeatureSource::Zero);
            set.boxes.push(unit_box(i));
            set.group_id.push(0);
            set.polarity.push(Polarity::Positive);
            set.target_instance.push(Some(i));
            set.group_sizes[0] += 1;
        }
        let alpha = 0.3;
        let trials = 10_000;
        let mut dropped = 0usize;
        let mut rng = SeedPath::root(6).child("drop").rng();
        for _ in 0..trials {
            let out = drop_positive_queries(&set, alpha, &mut rng);
            dropped += set.len() - out.len();
        }
        let rate = dropped as f64 / (trials * set.len()) as f64;
        assert!((rate - alpha).abs() < 0.02, "drop rate {rate} vs {alpha}");

        let all = drop_positive_queries(&set, 1.0, &mut rng);
        assert!(all.is_empty());
        let none = drop_positive_queries(&set, 0.0, &mut rng);
        assert_eq!(none.len(), set.len());
    }

    #[test]
    fn group_spec_strategies() {
        let base = DenoisingGroupSpec::default();
        let general = make_group_specs(GroupStrategy::General, 5, &base).unwrap();
        assert_eq!(general.len(), 5);
        assert!(general.iter().all(|s| *s == base));

        let dedicated = make_group_specs(GroupStrategy::Dedicated, 3, &base).unwrap();
        assert_eq!(dedicated.len(), 3);
        assert!(dedicated[0].lambda_center > 0.0 && dedicated[0].sigma_velo == 0.0 && dedicated[0].sigma_query == 0.0);
        assert!(dedicated[1].lambda_center == 0.0 && dedicated[1].sigma_velo > 0.0 && dedicated[1].sigma_query == 0.0);
        assert!(dedicated[2].lambda_center == 0.0 && dedicated[2].sigma_velo == 0.0 && dedicated[2].sigma_query > 0.0);
        assert!(dedicated.iter().all(|s| s.alpha_fp == base.alpha_fp));

        let hybrid = make_group_specs(GroupStrategy::Hybrid, 5, &base).unwrap();
        assert_eq!(hybrid.len(), 5);
        assert_eq!(hybrid[..3], dedicated[..]);
        assert_eq!(hybrid[3], base);
        assert_eq!(hybrid[4], base);

        assert!(make_group_specs(GroupStrategy::Dedicated, 5, &base).is_err());
        assert!(make_group_specs(GroupStrategy::Hybrid, 3, &base).is_err());
        assert!(make_group_specs(GroupStrategy::General, 0, &base).is_err());
    }

    #[test]
    fn propagation_moves_centers_by_velocity() {
        let mut set = DenoisingQuerySet::empty(2, DenoisingMode::Temporal);
        set.group_sizes = vec![1];
        set.features = Matrix::zeros(1, 2);
        set.feature_noise = Matrix::zeros(1, 2);
        set.feature_sources.push(FeatureSource::Zero);
        set.boxes.push(BevBox::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, [1.0, 0.0]));
        set.group_id.push(0);
        set.polarity.push(Polarity::Positive);
        set.target_instance.push(Some(0));

        let out = propagate_queries(&set, 0.5);
        assert_eq!(out.boxes[0].center, [0.5, 0.0, 0.0]);
        assert!(out.features.bit_eq(&set.features));

        let mut static_set = set.clone();
        static_set.mode = DenoisingMode::Static;
        let out = propagate_queries(&static_set, 0.5);
        assert_eq!(out.boxes[0].center, [0.0, 0.0, 0.0]);

        set.boxes[0].velocity = [0.0, 0.0];
        let out = propagate_queries(&set, 0.5);
        assert_eq!(out.boxes[0].center, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn target_assignment_handles_death_and_negatives() {
        let d_k = 2;
        let mut set = DenoisingQuerySet::empty(d_k, DenoisingMode::Temporal);
        set.group_sizes = vec![3];
        set.features = Matrix::zeros(3, d_k);
        set.feature_noise = Matrix::zeros(3, d_k);
        set.feature_sources = vec![FeatureSource::Zero; 3];
        set.boxes = vec![
            unit_box(1),
            unit_box(2),
            unit_box(3), // negative below
        ];
        set.boxes[2].instance_id = None;
        set.group_id = vec![0; 3];
        set.polarity = vec![Polarity::Positive, Polarity::Positive, Polarity::Negative];
        set.target_instance = vec![Some(1), Some(2), None];

        // Instance 2 died between frames.
        let gt_t = vec![unit_box(1)];
        assign_denoising_targets(&mut set, &gt_t);
        assert_eq!(set.target_instance, vec![Some(1), None, None]);
    }

    #[test]
    fn generate_identity_when_noise_free() {
        let d_k = 4;
        let gt = vec![unit_box(10), unit_box(11), unit_box(12)];
        let track_feats = Matrix::from_fn(2, d_k, |i, j| (i * d_k + j) as f64 * 0.1);
        let tracks = TrackQueryView {
            features: &track_feats,
            instance_ids: &[10, 12],
        };
        let spec = DenoisingGroupSpec {
            lambda_center: 0.0,
            sigma_velo: 0.0,
            sigma_query: 0.0,
            alpha_fp: 0.0,
            alpha_drop: 0.0,
            mode: DenoisingMode::Temporal,
        };
        let set = generate(
            &gt,
            &tracks,
            &FalsePositiveSet::empty(d_k),
            &[spec],
            d_k,
            SeedPath::root(7),
        );
        assert_eq!(set.len(), 3);
        assert_eq!(set.boxes, gt);
        assert_eq!(set.features.row(0), track_feats.row(0));
        assert_eq!(set.features.row(1), vec![0.0; d_k].as_slice());
        assert_eq!(set.features.row(2), track_feats.row(1));
        assert_eq!(
            set.feature_sources,
            vec![FeatureSource::Track(0), FeatureSource::Zero, FeatureSource::Track(1)]
        );
    }

    #[test]
    fn generate_counts_and_layout() {
        // 2 groups, 3 GT, 1 FP each -> group sizes [4, 4].
        let d_k = 4;
        let gt = vec![unit_box(1), unit_box(2), unit_box(3)];
        let tracks = TrackQueryView {
            features: &Matrix::zeros(0, d_k),
            instance_ids: &[],
        };
        let fps = fp_set(&[0.9, 0.3], d_k);
        let spec = DenoisingGroupSpec {
            alpha_fp: 0.34, // k = round(0.34 * 3) = 1
            ..DenoisingGroupSpec::default()
        };
        let set = generate(&gt, &tracks, &fps, &[spec.clone(), spec], d_k, SeedPath::root(8));
        assert_eq!(set.group_sizes, vec![4, 4]);
        let layout = set.layout(2, 5);
        assert_eq!(layout.total(), 8 + 2 + 5);
    }

    #[test]
    fn generate_is_deterministic_with_distinct_group_streams() {
        let d_k = 4;
        let gt = vec![unit_box(1), unit_box(2)];
        let tracks = TrackQueryView {
            features: &Matrix::zeros(0, d_k),
            instance_ids: &[],
        };
        let specs = vec![DenoisingGroupSpec::default(); 2];
        let a = generate(&gt, &tracks, &FalsePositiveSet::empty(d_k), &specs, d_k, SeedPath::root(9));
        let b = generate(&gt, &tracks, &FalsePositiveSet::empty(d_k), &specs, d_k, SeedPath::root(9));
        assert!(a.features.bit_eq(&b.features));
        assert_eq!(a.boxes, b.boxes);
        // Same spec, different substreams: the two groups are noised differently.
        assert_ne!(a.boxes[0].center, a.boxes[2].center);
    }

    #[test]
    fn noise_families_are_orthogonal() {
        let d_k = 3;
        let gt = vec![unit_box(1)];
        let feats = Matrix::from_fn(1, d_k, |_, j| j as f64);
        let tracks = TrackQueryView {
            features: &feats,
            instance_ids: &[1],
        };
        let center_only = DenoisingGroupSpec {
            lambda_center: 1.0,
            sigma_velo: 0.0,
            sigma_query: 0.0,
            alpha_fp: 0.0,
            alpha_drop: 0.0,
            mode: DenoisingMode::Temporal,
        };
        let set = generate(&gt, &tracks, &FalsePositiveSet::empty(d_k), &[center_only.clone()], d_k, SeedPath::root(10));
        assert_eq!(set.boxes[0].velocity, gt[0].velocity);
        assert_eq!(set.boxes[0].size, gt[0].size);
        assert_eq!(set.boxes[0].yaw, gt[0].yaw);
        assert_eq!(set.features.row(0), feats.row(0));
        assert_ne!(set.boxes[0].center, gt[0].center);

        let velo_only = DenoisingGroupSpec {
            lambda_center: 0.0,
            sigma_velo: 4.0,
            ..center_only.clone()
        };
        let set = generate(&gt, &tracks, &FalsePositiveSet::empty(d_k), &[velo_only], d_k, SeedPath::root(11));
        assert_eq!(set.boxes[0].center, gt[0].center);
        assert_eq!(set.features.row(0), feats.row(0));
        assert_ne!(set.boxes[0].velocity, gt[0].velocity);

        let query_only = DenoisingGroupSpec {
            lambda_center: 0.0,
            sigma_velo: 0.0,
            sigma_query: 0.5,
            ..center_only
        };
        let set = generate(&gt, &tracks, &FalsePositiveSet::empty(d_k), &[query_only], d_k, SeedPath::root(12));
        assert_eq!(set.boxes[0], gt[0].clone());
        assert_ne!(set.features.row(0), feats.row(0));
    }
}
