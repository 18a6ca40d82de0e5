//! Training and evaluation runs: scene generation, the training loop,
//! inference over evaluation scenes, and artifact writing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use tqd_core::metrics::{
    evaluate, metrics_csv_row, write_track_result, MetricReport, TrackResult, TrackedBox,
    METRICS_CSV_HEADER,
};
use tqd_core::numeric::Graph;
use tqd_core::rng::SeedPath;
use tqd_core::sim::{generate_scene, render_observations, write_scene, Scene};
use tqd_core::tracker::{
    decode_box, detection_reference_grid, forward_frame, save_checkpoint_file, BoundParams,
    FrameEstimates, FrameInput, TrackState, TrackerModel,
};
use tqd_core::train::{
    format_log_line, pick_snippet, train_step, Adam, StepLoss, TrainContext,
    TRAIN_LOG_HEADER,
};

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] tqd_core::tracker::CheckpointError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Seed path of one training scene. Training and evaluation scenes live in
/// disjoint labeled subtrees.
pub fn train_scene_seed(data_seed: u64, idx: usize) -> SeedPath {
    SeedPath::root(data_seed).child("train-scene").child_idx(idx as u64)
}

pub fn eval_scene_seed(eval_seed: u64, idx: usize) -> SeedPath {
    SeedPath::root(eval_seed).child("eval-scene").child_idx(idx as u64)
}

pub fn generate_training_scenes(cfg: &RunConfig) -> Vec<(Scene, SeedPath)> {
    (0..cfg.training.scenes)
        .map(|i| {
            let seed = train_scene_seed(cfg.training.seed, i);
            (generate_scene(&cfg.scenario, seed), seed)
        })
        .collect()
}

pub fn generate_eval_scenes(cfg: &RunConfig) -> Vec<(Scene, SeedPath)> {
    (0..cfg.eval.scenes)
        .map(|i| {
            let seed = eval_scene_seed(cfg.eval.seed, i);
            (generate_scene(&cfg.scenario, seed), seed)
        })
        .collect()
}

/// Trains a model from scratch; returns the model and the training log lines
/// (header included).
pub fn train_model(cfg: &RunConfig) -> (TrackerModel, Vec<String>) {
    let scenes = generate_training_scenes(cfg);
    let mut model = TrackerModel::new(
        cfg.tracker.clone(),
        SeedPath::root(cfg.training.seed).child("model"),
    );
    let mut opt = Adam::new(&model.store, cfg.training.lr);
    let weights = cfg.training.weights();
    let dn_specs = cfg.denoising.group_specs().expect("config validated upstream");
    let ctx = TrainContext {
        scenario: &cfg.scenario,
        dn_mode: cfg.denoising.mode,
        dn_specs: &dn_specs,
        weights: &weights,
        dn_assoc_loss: cfg.denoising.assoc_loss,
        dn_zero_init: cfg.denoising.query_init == crate::config::QueryInit::Zero,
    };
    let mut log = Vec::with_capacity(cfg.training.steps + 1);
    log.push(TRAIN_LOG_HEADER.to_string());
    let run_root = SeedPath::root(cfg.training.seed).child("train");
    for step in 0..cfg.training.steps {
        let step_seed = run_root.child_idx(step as u64);
        let (scene_idx, start) = pick_snippet(
            scenes.len(),
            cfg.scenario.n_frames,
            cfg.training.snippet_length,
            step_seed,
        );
        let (scene, scene_seed) = &scenes[scene_idx];
        let loss: StepLoss = train_step(
            &mut model,
            &mut opt,
            &ctx,
            scene,
            *scene_seed,
            start,
            cfg.training.snippet_length,
            step_seed,
        );
        log.push(format_log_line(step, &loss, cfg.training.lr));
    }
    (model, log)
}

/// Runs inference over one scene. Denoising queries are never constructed
/// here; evaluation ignores the denoising configuration entirely.
pub fn eval_scene(
    model: &TrackerModel,
    cfg: &RunConfig,
    scene: &Scene,
    scene_seed: SeedPath,
) -> TrackResult {
    let mut state = TrackState::new();
    let mut result = TrackResult::default();
    for f in 0..scene.frames.len() {
        let report = eval_frame(model, cfg, scene, scene_seed, f, &mut state);
        result.frames.push(
            report
                .into_iter()
                .map(|(track_id, bbox)| TrackedBox { track_id, bbox })
                .collect(),
        );
    }
    result
}

fn eval_frame(
    model: &TrackerModel,
    cfg: &RunConfig,
    scene: &Scene,
    scene_seed: SeedPath,
    f: usize,
    state: &mut TrackState,
) -> Vec<(u64, tqd_core::dngen::BevBox)> {
    let d = model.config.feature_dim;
    let n_det = model.config.n_det_queries;
    let dt = cfg.scenario.dt;
    let gt = &scene.frames[f];
    let obs = render_observations(gt, &cfg.scenario, scene_seed.child_idx(f as u64));
    let det_refs = detection_reference_grid(n_det, cfg.scenario.arena);
    let track_refs = state.propagated_refs(dt);
    let track_feats = state.features_matrix(d);

    let mut g = Graph::new();
    let bound = BoundParams::bind(model, &mut g);
    let track_features = g.input(track_feats);
    let input = FrameInput {
        track_features,
        track_refs: &track_refs,
        dn: None,
        obs: &obs,
        det_refs: &det_refs,
        bias_centers: None,
    };
    let out = forward_frame(&mut g, model, &bound, &input);

    let (track_start, n_track) = out.layout.track_span();
    let (det_start, _) = out.layout.det_span();
    let preds = out.final_layer();
    let box_params = g.value(preds.box_params);
    let cls = g.value(preds.cls_logits);
    let decode_rows = |start: usize, len: usize| -> Vec<_> {
        (start..start + len)
            .map(|i| decode_box(box_params.row(i), cls.row(i)[0], &out.refs[i]))
            .collect()
    };
    let track_boxes = decode_rows(track_start, n_track);
    let det_boxes = decode_rows(det_start, n_det);
    let features = g.value(out.features);
    let track_features_out = tqd_core::numeric::matrix::slice_rows(features, track_start, n_track);
    let det_features_out = tqd_core::numeric::matrix::slice_rows(features, det_start, n_det);
    let assoc = out.assoc_logits.map(|node| {
        let logits = g.value(node);
        // Track rows of S as probabilities.
        let track_rows =
            tqd_core::numeric::matrix::slice_rows(logits, out.layout.n_dn_all(), n_track);
        tqd_core::numeric::matrix::sigmoid(&track_rows)
    });

    let est = FrameEstimates {
        track_boxes,
        track_features: track_features_out,
        det_boxes,
        det_features: det_features_out,
        assoc,
    };
    tqd_core::tracker::update_tracks(state, &est, &model.config)
}

pub fn eval_model(model: &TrackerModel, cfg: &RunConfig) -> (Vec<TrackResult>, Vec<Scene>) {
    let scenes = generate_eval_scenes(cfg);
    let results: Vec<TrackResult> = scenes
        .iter()
        .map(|(scene, seed)| eval_scene(model, cfg, scene, *seed))
        .collect();
    (results, scenes.into_iter().map(|(s, _)| s).collect())
}

pub struct ExperimentOutput {
    pub report: MetricReport,
    pub csv_row: String,
    pub out_dir: PathBuf,
}

/// Full experiment: train, evaluate, and write checkpoint + training log +
/// per-scene track results + a one-row metrics CSV under `out_dir`.
pub fn run_experiment(
    cfg: &RunConfig,
    run_id: &str,
    out_dir: &Path,
) -> Result<ExperimentOutput, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let (model, log) = train_model(cfg);

    let log_path = out_dir.join("train_log.csv");
    fs::write(&log_path, log.join("\n") + "\n").map_err(io_err(&log_path))?;

    let ckpt_path = out_dir.join("checkpoint.ckpt");
    save_checkpoint_file(&model.store, &ckpt_path).map_err(io_err(&ckpt_path))?;

    let (results, scenes) = eval_model(&model, cfg);
    write_results(&results, out_dir)?;

    let report = evaluate(&results, &scenes, cfg.eval.threshold);
    let csv_row = metrics_csv_row(
        run_id,
        model.config.paradigm.as_str(),
        cfg.denoising.mode.as_str(),
        cfg.training.seed,
        &report,
    );
    let metrics_path = out_dir.join("metrics.csv");
    fs::write(&metrics_path, format!("{METRICS_CSV_HEADER}\n{csv_row}\n"))
        .map_err(io_err(&metrics_path))?;

    Ok(ExperimentOutput {
        report,
        csv_row,
        out_dir: out_dir.to_path_buf(),
    })
}

pub fn write_results(results: &[TrackResult], out_dir: &Path) -> Result<(), ExperimentError> {
    let results_dir = out_dir.join("results");
    fs::create_dir_all(&results_dir).map_err(io_err(&results_dir))?;
    for (i, result) in results.iter().enumerate() {
        let path = results_dir.join(format!("scene_{i:04}.txt"));
        let f = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = std::io::BufWriter::new(f);
        write_track_result(result, &mut w).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
    }
    Ok(())
}

/// Writes the generated scene files (gen-data subcommand).
pub fn write_scene_files(cfg: &RunConfig, out_dir: &Path) -> Result<(), ExperimentError> {
    for (sub, scenes) in [
        ("train", generate_training_scenes(cfg)),
        ("eval", generate_eval_scenes(cfg)),
    ] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (i, (scene, _)) in scenes.iter().enumerate() {
            let path = dir.join(format!("scene_{i:04}.txt"));
            let f = fs::File::create(&path).map_err(io_err(&path))?;
            let mut w = std::io::BufWriter::new(f);
            write_scene(scene, &mut w).map_err(io_err(&path))?;
            w.flush().map_err(io_err(&path))?;
        }
    }
    Ok(())
}

/// Evaluates a saved checkpoint without retraining: load the weights into a
/// fresh architecture and score it on the evaluation scenes.
pub fn eval_checkpoint(
    cfg: &RunConfig,
    ckpt: &Path,
    run_id: &str,
    out_dir: &Path,
) -> Result<ExperimentOutput, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut model = TrackerModel::new(
        cfg.tracker.clone(),
        SeedPath::root(cfg.training.seed).child("model"),
    );
    tqd_core::tracker::load_checkpoint_file(&mut model.store, ckpt)?;
    let (results, scenes) = eval_model(&model, cfg);
    write_results(&results, out_dir)?;
    let report = evaluate(&results, &scenes, cfg.eval.threshold);
    let csv_row = metrics_csv_row(
        run_id,
        model.config.paradigm.as_str(),
        cfg.denoising.mode.as_str(),
        cfg.training.seed,
        &report,
    );
    let metrics_path = out_dir.join("metrics.csv");
    fs::write(&metrics_path, format!("{METRICS_CSV_HEADER}\n{csv_row}\n"))
        .map_err(io_err(&metrics_path))?;
    Ok(ExperimentOutput {
        report,
        csv_row,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Per-step total losses from a training log (header skipped).
pub fn loss_trajectory(log: &[String]) -> Vec<f64> {
    log.iter()
        .skip(1)
        .map(|line| {
            line.split(',')
                .nth(1)
                .expect("loss_total column")
                .parse()
                .expect("loss value")
        })
        .collect()
}
