//! Tracking evaluation: CLEAR-MOT counts plus AMOTA/AMOTP over a 40-point
//! recall sweep.
//!
//! Matching is greedy in prediction-score order on 2D center distance, with
//! carried-over identity preferred on distance ties so ID-switch counting is
//! stable. The recall sweep picks, for each target recall, the confidence of
//! the k-th highest-scoring true positive from a full matching pass, re-runs
//! the matching above that threshold, and evaluates
//! MOTAR = max(0, 1 - (IDS + FP + FN - (1-r) GT) / (r GT)) at the achieved
//! recall. Unreached recall points contribute 0 to AMOTA and are excluded
//! from the AMOTP mean.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::dngen::BevBox;
use crate::sim::{fmt_f64, Scene};

/// One reported box: a stable track id plus the box (score included).
#[derive(Clone, Debug)]
pub struct TrackedBox {
    pub track_id: u64,
    pub bbox: BevBox,
}

/// Tracker output for one scene.
#[derive(Clone, Debug, Default)]
pub struct TrackResult {
    pub frames: Vec<Vec<TrackedBox>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub amota: f64,
    pub amotp: f64,
    pub mota: f64,
    pub recall: f64,
    pub id_switches: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_positives: usize,
}

/// Accumulated counts from one matching pass over all scenes.
#[derive(Clone, Debug, Default)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub ids: usize,
    pub gt_total: usize,
    /// Sum of matched 2D center distances; divide by tp for MOTP.
    pub dist_sum: f64,
    /// Scores of matched predictions, unordered.
    pub tp_scores: Vec<f64>,
}

impl MatchCounts {
    pub fn recall(&self) -> f64 {
        if self.gt_total == 0 {
            0.0
        } else {
            self.tp as f64 / self.gt_total as f64
        }
    }

    pub fn mota(&self) -> f64 {
        if self.gt_total == 0 {
            0.0
        } else {
            1.0 - (self.fp + self.fn_count + self.ids) as f64 / self.gt_total as f64
        }
    }
}

/// Greedy score-ordered matching of one frame. Returns (pred_idx, gt_idx)
/// pairs. `last_track` maps GT instance to the track id it was last matched
/// with, used to prefer the carried identity on exact distance ties.
pub fn match_frame(
    preds: &[TrackedBox],
    gts: &[BevBox],
    dist_threshold: f64,
    last_track: &BTreeMap<u64, u64>,
) -> Vec<(usize, usize)> {
    assert!(dist_threshold > 0.0, "distance threshold must be positive");
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // Stable by insertion order on score ties, so metrics are invariant to
    // track-id relabeling.
    order.sort_by(|&a, &b| {
        preds[b]
            .bbox
            .score
            .partial_cmp(&preds[a].bbox.score)
            .expect("finite scores")
    });
    let mut gt_taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for &p in &order {
        let mut best: Option<(f64, bool, usize)> = None;
        for (k, gt) in gts.iter().enumerate() {
            if gt_taken[k] {
                continue;
            }
            let dist = preds[p].bbox.center_distance_2d(gt);
            if dist > dist_threshold {
                continue;
            }
            let instance = gt.instance_id.expect("GT has instance IDs");
            let carried = last_track.get(&instance) == Some(&preds[p].track_id);
            // Rank by distance, then prefer the carried identity.
            let key = (dist, !carried, k);
            if best.map_or(true, |b| key < (b.0, b.1, b.2)) {
                best = Some(key);
            }
        }
        if let Some((_, _, k)) = best {
            gt_taken[k] = true;
            pairs.push((p, k));
        }
    }
    pairs
}

/// Full matching pass over scenes with an optional score threshold.
pub fn accumulate(
    results: &[TrackResult],
    scenes: &[Scene],
    dist_threshold: f64,
    score_threshold: Option<f64>,
) -> MatchCounts {
    assert_eq!(results.len(), scenes.len(), "one result per scene");
    let mut counts = MatchCounts::default();
    for (result, scene) in results.iter().zip(scenes) {
        assert_eq!(result.frames.len(), scene.frames.len());
        let mut last_track: BTreeMap<u64, u64> = BTreeMap::new();
        for (preds_all, gts) in result.frames.iter().zip(&scene.frames) {
            let preds: Vec<TrackedBox> = match score_threshold {
                Some(th) => preds_all
                    .iter()
                    .filter(|p| p.bbox.score >= th)
                    .cloned()
                    .collect(),
                None => preds_all.clone(),
            };
            let pairs = match_frame(&preds, gts, dist_threshold, &last_track);
            counts.gt_total += gts.len();
            counts.tp += pairs.len();
            counts.fp += preds.len() - pairs.len();
            counts.fn_count += gts.len() - pairs.len();
            for &(p, k) in &pairs {
                let dist = preds[p].bbox.center_distance_2d(&gts[k]);
                counts.dist_sum += dist;
                counts.tp_scores.push(preds[p].bbox.score);
                let instance = gts[k].instance_id.expect("GT has instance IDs");
                if let Some(&prev) = last_track.get(&instance) {
                    if prev != preds[p].track_id {
                        counts.ids += 1;
                    }
                }
                last_track.insert(instance, preds[p].track_id);
            }
        }
    }
    counts
}

/// CLEAR-MOT counts over all reported predictions.
pub fn clear_mot(results: &[TrackResult], scenes: &[Scene], dist_threshold: f64) -> MatchCounts {
    accumulate(results, scenes, dist_threshold, None)
}

pub const AMOTA_RECALL_POINTS: usize = 40;

/// AMOTA and AMOTP over the 40-point recall sweep.
pub fn amota_amotp(
    results: &[TrackResult],
    scenes: &[Scene],
    dist_threshold: f64,
) -> (f64, f64) {
    let full = accumulate(results, scenes, dist_threshold, None);
    if full.gt_total == 0 {
        return (0.0, 0.0);
    }
    let mut tp_scores = full.tp_scores.clone();
    tp_scores.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));

    let mut motar_sum = 0.0;
    let mut motp_sum = 0.0;
    let mut achieved = 0usize;
    for i in 1..=AMOTA_RECALL_POINTS {
        let target = i as f64 * (1.0 / AMOTA_RECALL_POINTS as f64);
        let need = (target * full.gt_total as f64).ceil() as usize;
        if need == 0 || need > tp_scores.len() {
            continue; // unachieved: MOTAR contributes 0
        }
        let threshold = tp_scores[need - 1];
        let counts = accumulate(results, scenes, dist_threshold, Some(threshold));
        if counts.tp == 0 {
            continue;
        }
        let rec = counts.recall();
        let gt = full.gt_total as f64;
        let penal = (counts.ids + counts.fp + counts.fn_count) as f64 - (1.0 - rec) * gt;
        let motar = (1.0 - penal / (rec * gt)).max(0.0);
        motar_sum += motar;
        motp_sum += counts.dist_sum / counts.tp as f64;
        achieved += 1;
    }
    let amota = motar_sum / AMOTA_RECALL_POINTS as f64;
    let amotp = if achieved == 0 {
        0.0
    } else {
        motp_sum / achieved as f64
    };
    (amota, amotp)
}

/// Full evaluation: CLEAR-MOT counts on everything reported plus the sweep.
pub fn evaluate(results: &[TrackResult], scenes: &[Scene], dist_threshold: f64) -> MetricReport {
    let counts = clear_mot(results, scenes, dist_threshold);
    let (amota, amotp) = amota_amotp(results, scenes, dist_threshold);
    MetricReport {
        amota,
        amotp,
        mota: counts.mota(),
        recall: counts.recall(),
        id_switches: counts.ids,
        false_positives: counts.fp,
        false_negatives: counts.fn_count,
        true_positives: counts.tp,
    }
}

pub const METRICS_CSV_HEADER: &str =
    "run_id,paradigm,denoising_mode,seed,AMOTA,AMOTP,MOTA,Recall,IDS,FP,FN,TP";

pub fn metrics_csv_row(
    run_id: &str,
    paradigm: &str,
    denoising_mode: &str,
    seed: u64,
    report: &MetricReport,
) -> String {
    format!(
        "{run_id},{paradigm},{denoising_mode},{seed},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
        report.amota,
        report.amotp,
        report.mota,
        report.recall,
        report.id_switches,
        report.false_positives,
        report.false_negatives,
        report.true_positives
    )
}

/// One frame per line: frame_index then repeated
/// (track_id, x, y, z, w, l, h, yaw, vx, vy, score) tuples.
pub fn write_track_result(result: &TrackResult, mut w: impl Write) -> std::io::Result<()> {
    for (t, frame) in result.frames.iter().enumerate() {
        let mut line = t.to_string();
        for tb in frame {
            let b = &tb.bbox;
            line.push_str(&format!(
                " {} {} {} {} {} {} {} {} {} {} {}",
                tb.track_id,
                fmt_f64(b.center[0]),
                fmt_f64(b.center[1]),
                fmt_f64(b.center[2]),
                fmt_f64(b.size[0]),
                fmt_f64(b.size[1]),
                fmt_f64(b.size[2]),
                fmt_f64(b.yaw),
                fmt_f64(b.velocity[0]),
                fmt_f64(b.velocity[1]),
                fmt_f64(b.score),
            ));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_track_result(r: impl BufRead) -> Result<TrackResult, String> {
    let mut frames = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| format!("line {lineno}: {e}"))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let frame_idx: usize = toks
            .next()
            .ok_or_else(|| format!("line {lineno}: missing frame index"))?
            .parse()
            .map_err(|e| format!("line {lineno}: bad frame index: {e}"))?;
        if frame_idx != frames.len() {
            return Err(format!("line {lineno}: out-of-order frame {frame_idx}"));
        }
        let rest: Vec<&str> = toks.collect();
        if rest.len() % 11 != 0 {
            return Err(format!("line {lineno}: {} fields is not a multiple of 11", rest.len()));
        }
        let mut frame = Vec::with_capacity(rest.len() / 11);
        for chunk in rest.chunks(11) {
            let track_id: u64 = chunk[0]
                .parse()
                .map_err(|e| format!("line {lineno}: bad track id: {e}"))?;
            let nums: Vec<f64> = chunk[1..]
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| format!("line {lineno}: bad number: {e}"))?;
            frame.push(TrackedBox {
                track_id,
                bbox: BevBox::new(
                    [nums[0], nums[1], nums[2]],
                    [nums[3], nums[4], nums[5]],
                    nums[6],
                    [nums[7], nums[8]],
                )
                .with_score(nums[9].max(0.0).min(1.0)),
            });
        }
        frames.push(frame);
    }
    Ok(TrackResult { frames })
}
