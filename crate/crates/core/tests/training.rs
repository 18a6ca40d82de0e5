//! Training-loop level checks: denoising neutrality at zero loss weight,
//! exactness of the linear motion model, descent on a fixed batch, and live
//! deep-supervision layers.

use tqd_core::dngen::{
    assign_denoising_targets, generate, propagate_queries, DenoisingGroupSpec, DenoisingMode,
    FalsePositiveSet, TrackQueryView,
};
use tqd_core::numeric::{Graph, Matrix};
use tqd_core::rng::SeedPath;
use tqd_core::sim::{generate_scene, ScenarioConfig};
use tqd_core::tracker::{box_target_params, Paradigm, TrackerConfig, TrackerModel};
use tqd_core::train::{
    format_log_line, run_snippet, train_step, Adam, DnMode, LossWeights, StepLoss, TrainContext,
};

fn small_scenario() -> ScenarioConfig {
    ScenarioConfig {
        arena: 20.0,
        n_objects_init: 4,
        birth_rate: 0.1,
        death_prob: 0.02,
        n_frames: 8,
        ..ScenarioConfig::default()
    }
}

fn small_tracker() -> TrackerConfig {
    TrackerConfig {
        paradigm: Paradigm::Ada,
        decoder_layers: 2,
        feature_dim: 16,
        n_det_queries: 8,
        ..TrackerConfig::default()
    }
}

fn run_training(dn_mode: DnMode, lambda_dn: f64, steps: usize) -> (TrackerModel, Vec<StepLoss>) {
    let scenario = small_scenario();
    let scene = generate_scene(&scenario, SeedPath::root(50));
    let mut model = TrackerModel::new(small_tracker(), SeedPath::root(51));
    let mut opt = Adam::new(&model.store, 1e-3);
    let weights = LossWeights {
        lambda_dn,
        ..LossWeights::default()
    };
    let specs = vec![DenoisingGroupSpec::default(); 2];
    let ctx = TrainContext {
        scenario: &scenario,
        dn_mode,
        dn_specs: &specs,
        weights: &weights,
        dn_assoc_loss: true,
        dn_zero_init: false,
    };
    let mut losses = Vec::new();
    for step in 0..steps {
        let step_seed = SeedPath::root(52).child("step").child_idx(step as u64);
        let loss = train_step(
            &mut model,
            &mut opt,
            &ctx,
            &scene,
            SeedPath::root(50),
            (step % 5) as usize,
            3,
            step_seed,
        );
        losses.push(loss);
    }
    (model, losses)
}

/// With lambda_dn = 0 the whole training trajectory is bit-identical to
/// running with denoising off: denoising draws live in their own stream and
/// masked rows contribute exactly zero.
#[test]
fn zero_weighted_denoising_is_bitwise_neutral() {
    let steps = 10;
    let (model_dn, losses_dn) = run_training(DnMode::Temporal, 0.0, steps);
    let (model_off, losses_off) = run_training(DnMode::Off, 0.0, steps);
    for (a, b) in losses_dn.iter().zip(&losses_off) {
        assert_eq!(
            a.tracker.to_bits(),
            b.tracker.to_bits(),
            "tracker loss diverged: {} vs {}",
            a.tracker,
            b.tracker
        );
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }
    for (pa, pb) in model_dn.store.iter().zip(model_off.store.iter()) {
        assert!(
            pa.1.value.bit_eq(&pb.1.value),
            "parameter {} diverged",
            pa.1.name
        );
    }
}

/// Denoising on with nonzero weight must change the trajectory (the sets are
/// actually supervised).
#[test]
fn weighted_denoising_changes_the_trajectory() {
    let (model_dn, losses_dn) = run_training(DnMode::Temporal, 1.0, 4);
    let (model_off, _) = run_training(DnMode::Off, 1.0, 4);
    assert!(losses_dn.iter().any(|l| l.dn > 0.0));
    let diverged = model_dn
        .store
        .iter()
        .zip(model_off.store.iter())
        .any(|(a, b)| !a.1.value.bit_eq(&b.1.value));
    assert!(diverged);
}

/// Noise-free temporal generation over an exactly linear world reconstructs
/// the next frame's ground truth with zero residual.
#[test]
fn linear_world_noise_free_propagation_has_zero_residual() {
    let scenario = ScenarioConfig {
        accel_noise: 0.0,
        birth_rate: 0.0,
        death_prob: 0.0,
        n_frames: 4,
        ..small_scenario()
    };
    let scene = generate_scene(&scenario, SeedPath::root(60));
    let gt_prev = &scene.frames[1];
    let gt_next = &scene.frames[2];
    let spec = DenoisingGroupSpec {
        lambda_center: 0.0,
        sigma_velo: 0.0,
        sigma_query: 0.0,
        alpha_fp: 0.0,
        alpha_drop: 0.0,
        mode: DenoisingMode::Temporal,
    };
    let d = 8;
    let tracks = TrackQueryView {
        features: &Matrix::zeros(0, d),
        instance_ids: &[],
    };
    let set = generate(
        gt_prev,
        &tracks,
        &FalsePositiveSet::empty(d),
        &[spec],
        d,
        SeedPath::root(61),
    );
    let mut set = propagate_queries(&set, scenario.dt);
    assign_denoising_targets(&mut set, gt_next);
    assert!(!set.is_empty());
    for q in 0..set.len() {
        let instance = set.target_instance[q].expect("alive in a linear world");
        let target = gt_next
            .iter()
            .find(|b| b.instance_id == Some(instance))
            .unwrap();
        let params = box_target_params(target, &set.boxes[q].center);
        // Center deltas are exactly zero: the propagation applies the same
        // c + v*dt arithmetic the simulator used.
        assert_eq!(params[0], 0.0);
        assert_eq!(params[1], 0.0);
        assert_eq!(params[2], 0.0);
        assert_eq!(params[8], target.velocity[0]);
        assert_eq!(params[9], target.velocity[1]);
    }
}

/// Loss on a fixed batch falls by more than half within 200 steps.
#[test]
fn fixed_batch_loss_halves() {
    let scenario = small_scenario();
    let scene = generate_scene(&scenario, SeedPath::root(70));
    let mut model = TrackerModel::new(small_tracker(), SeedPath::root(71));
    let mut opt = Adam::new(&model.store, 1e-3);
    let weights = LossWeights::default();
    let specs = vec![DenoisingGroupSpec::default(); 2];
    let ctx = TrainContext {
        scenario: &scenario,
        dn_mode: DnMode::Temporal,
        dn_specs: &specs,
        weights: &weights,
        dn_assoc_loss: true,
        dn_zero_init: false,
    };
    let step_seed = SeedPath::root(72);
    let mut first = 0.0;
    let mut last = 0.0;
    for step in 0..200 {
        let loss = train_step(&mut model, &mut opt, &ctx, &scene, SeedPath::root(70), 0, 3, step_seed);
        if step == 0 {
            first = loss.total;
        }
        last = loss.total;
    }
    assert!(
        last < 0.5 * first,
        "loss only moved from {first} to {last} on a fixed batch"
    );
}

/// Every decoder layer's head receives gradient (deep supervision is live).
#[test]
fn all_layers_receive_gradient() {
    let scenario = small_scenario();
    let scene = generate_scene(&scenario, SeedPath::root(80));
    let mut model = TrackerModel::new(small_tracker(), SeedPath::root(81));
    let weights = LossWeights::default();
    let specs = vec![DenoisingGroupSpec::default(); 2];
    let ctx = TrainContext {
        scenario: &scenario,
        dn_mode: DnMode::Temporal,
        dn_specs: &specs,
        weights: &weights,
        dn_assoc_loss: true,
        dn_zero_init: false,
    };
    let mut g = Graph::new();
    let losses = run_snippet(
        &mut g,
        &model,
        &ctx,
        &scene,
        SeedPath::root(80),
        0,
        3,
        SeedPath::root(82),
    );
    model.store.zero_grads();
    g.backward(losses.total, Matrix::from_vec(1, 1, vec![1.0]), &mut model.store);
    for l in 0..model.config.decoder_layers {
        for suffix in ["self_attn.wq", "obs_attn.wv", "ffn.w1", "edge.we2"] {
            let name = format!("layer{l}.{suffix}");
            let max = model
                .store
                .iter()
                .find(|(_, p)| p.name == name)
                .map(|(_, p)| p.grad.data().iter().fold(0.0f64, |a, &v| a.max(v.abs())))
                .unwrap_or_else(|| panic!("missing parameter {name}"));
            assert!(max > 0.0, "layer parameter {name} received no gradient");
        }
    }
}

#[test]
fn log_line_format() {
    let loss = StepLoss {
        total: 1.5,
        tracker: 1.0,
        dn: 0.5,
    };
    let line = format_log_line(3, &loss, 1e-3);
    let fields: Vec<&str> = line.split(',').collect();
    assert_eq!(fields.len(), 5);
    assert_eq!(fields[0], "3");
    assert_eq!(fields[1].parse::<f64>().unwrap(), 1.5);
    assert_eq!(fields[4].parse::<f64>().unwrap(), 1e-3);
}

/// An empty ground-truth frame leaves only background classification terms.
#[test]
fn empty_gt_frame_yields_background_loss_only() {
    use tqd_core::masks::QueryLayout;
    use tqd_core::sim::ObsFrame;
    use tqd_core::tracker::{forward_frame, BoundParams, FrameInput};
    use tqd_core::train::{compute_frame_losses, FrameSupervision};

    let model = TrackerModel::new(small_tracker(), SeedPath::root(91));
    let mut g = Graph::new();
    let bound = BoundParams::bind(&model, &mut g);
    let d = model.config.feature_dim;
    let track_features = g.input(Matrix::zeros(0, d));
    let obs = ObsFrame::empty();
    let det_refs = tqd_core::tracker::detection_reference_grid(model.config.n_det_queries, 20.0);
    let input = FrameInput {
        track_features,
        track_refs: &[],
        dn: None,
        obs: &obs,
        det_refs: &det_refs,
        bias_centers: None,
    };
    let out = forward_frame(&mut g, &model, &bound, &input);
    assert_eq!(out.layout, QueryLayout::inference(0, model.config.n_det_queries));
    let losses = compute_frame_losses(
        &mut g,
        &out,
        &FrameSupervision {
            gt: &[],
            track_instances: &[],
            det_assignment: &vec![None; model.config.n_det_queries],
            dn: None,
            dn_assoc_loss: true,
        },
        &LossWeights::default(),
    );
    let v = g.scalar(losses.tracker);
    assert!(v.is_finite() && v >= 0.0);
    // All classification targets are background; the box term is zero.
    // Perfectly confident background everywhere would drive this to zero.
    assert!(v > 0.0);
}
