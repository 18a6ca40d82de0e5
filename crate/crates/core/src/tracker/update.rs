//! Inference-time track state and the track update.

use super::model::{Paradigm, TrackerConfig};
use crate::dngen::BevBox;
use crate::numeric::Matrix;
use crate::train::hungarian_match;

/// Minimum distance between a new birth and every live track; keeps an
/// object that failed to claim its detection from spawning a duplicate.
const BIRTH_RADIUS: f64 = 2.0;

/// Confidence decay per coasted frame, so unmatched tracks stop being
/// reported before they age out.
const MISS_SCORE_DECAY: f64 = 0.5;

/// Matches required before a track is reported. One-frame clutter births
/// never confirm, so they are never output.
const MIN_HITS: usize = 2;

#[derive(Clone, Debug)]
pub struct Track {
    pub id: u64,
    pub feature: Vec<f64>,
    /// Last accepted box; score is the track's current confidence.
    pub bbox: BevBox,
    pub miss: usize,
    /// Frames this track has been matched (births count as the first).
    pub hits: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrackState {
    pub tracks: Vec<Track>,
    next_id: u64,
}

impl TrackState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn features_matrix(&self, d_k: usize) -> Matrix {
        if self.tracks.is_empty() {
            return Matrix::zeros(0, d_k);
        }
        let rows: Vec<Vec<f64>> = self.tracks.iter().map(|t| t.feature.clone()).collect();
        Matrix::from_rows(&rows)
    }

    /// Reference points for the next frame: box centers advanced by the
    /// linear motion model.
    pub fn propagated_refs(&self, dt: f64) -> Vec<[f64; 3]> {
        self.tracks.iter().map(|t| t.bbox.propagated(dt).center).collect()
    }

    fn spawn(&mut self, feature: Vec<f64>, bbox: BevBox) {
        let id = self.next_id;
        self.next_id += 1;
        self.tracks.push(Track {
            id,
            feature,
            bbox,
            miss: 0,
            hits: 1,
        });
    }
}

/// Final-layer decodes for one frame, split by query segment.
pub struct FrameEstimates {
    /// Track rows' own predictions (score included).
    pub track_boxes: Vec<BevBox>,
    pub track_features: Matrix,
    pub det_boxes: Vec<BevBox>,
    pub det_features: Matrix,
    /// N_T x N_D association probabilities (track rows of S); None for TBA.
    pub assoc: Option<Matrix>,
}

/// One frame of reported tracks.
pub type FrameReport = Vec<(u64, BevBox)>;

/// Updates the track state from one frame's estimates and reports active
/// tracks above the output threshold.
///
/// TBD/ADA: Hungarian matching on cost 1 - S with S < 0.5 gated off; matched
/// tracks adopt the detection's query and box, unmatched tracks coast on
/// their own prediction and age out after `max_miss` misses; unmatched
/// detections above tau_birth spawn tracks. TBA: track queries keep their
/// identity by construction and detections only initialize new-born tracks.
pub fn update_tracks(
    state: &mut TrackState,
    est: &FrameEstimates,
    config: &TrackerConfig,
) -> FrameReport {
    assert_eq!(est.track_boxes.len(), state.tracks.len());
    match config.paradigm {
        Paradigm::Tba => update_tba(state, est, config),
        Paradigm::Tbd | Paradigm::Ada => update_with_association(state, est, config),
    }
}

fn update_with_association(
    state: &mut TrackState,
    est: &FrameEstimates,
    config: &TrackerConfig,
) -> FrameReport {
    let s = est.assoc.as_ref().expect("TBD/ADA update needs association scores");
    let n_t = state.tracks.len();
    let n_d = est.det_boxes.len();
    assert_eq!(s.shape(), (n_t, n_d), "association scores are {:?}", s.shape());

    let mut track_match: Vec<Option<usize>> = vec![None; n_t];
    let mut det_taken = vec![false; n_d];
    if n_t > 0 && n_d > 0 {
        let cost = Matrix::from_fn(n_t, n_d, |i, j| 1.0 - s.get(i, j));
        let result = hungarian_match(&cost).expect("association scores are finite");
        for (t, d) in result.pairs() {
            if s.get(t, d) >= 0.5 {
                track_match[t] = Some(d);
                det_taken[d] = true;
            }
        }
    }

    for (t, track) in state.tracks.iter_mut().enumerate() {
        match track_match[t] {
            Some(d) => {
                track.bbox = est.det_boxes[d].clone();
                track.feature = est.det_features.row(d).to_vec();
                track.miss = 0;
                track.hits += 1;
            }
            None => {
                let mut coasted = est.track_boxes[t].clone();
                coasted.score = (est.track_boxes[t].score * MISS_SCORE_DECAY.powi(track.miss as i32 + 1)).min(1.0);
                track.bbox = coasted;
                track.feature = est.track_features.row(t).to_vec();
                track.miss += 1;
            }
        }
    }
    let max_miss = config.max_miss;
    state.tracks.retain(|t| t.miss < max_miss);

    for d in 0..n_d {
        if det_taken[d] || est.det_boxes[d].score <= config.tau_birth {
            continue;
        }
        let near_existing = state
            .tracks
            .iter()
            .any(|t| t.bbox.center_distance_2d(&est.det_boxes[d]) < BIRTH_RADIUS);
        if !near_existing {
            state.spawn(est.det_features.row(d).to_vec(), est.det_boxes[d].clone());
        }
    }

    report(state, config.tau_out)
}

fn update_tba(state: &mut TrackState, est: &FrameEstimates, config: &TrackerConfig) -> FrameReport {
    for (t, track) in state.tracks.iter_mut().enumerate() {
        track.bbox = est.track_boxes[t].clone();
        track.feature = est.track_features.row(t).to_vec();
        if track.bbox.score > config.tau_out {
            track.miss = 0;
            track.hits += 1;
        } else {
            track.miss += 1;
        }
    }
    let max_miss = config.max_miss;
    state.tracks.retain(|t| t.miss < max_miss);

    for (d, det) in est.det_boxes.iter().enumerate() {
        if det.score <= config.tau_birth {
            continue;
        }
        let near_existing = state
            .tracks
            .iter()
            .any(|t| t.bbox.center_distance_2d(det) < BIRTH_RADIUS);
        if !near_existing {
            state.spawn(est.det_features.row(d).to_vec(), det.clone());
        }
    }

    report(state, config.tau_out)
}

fn report(state: &TrackState, tau_out: f64) -> FrameReport {
    state
        .tracks
        .iter()
        .filter(|t| t.bbox.score > tau_out && t.hits >= MIN_HITS)
        .map(|t| (t.id, t.bbox.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, score: f64) -> BevBox {
        BevBox::new([x, 0.0, 0.5], [2.0, 4.0, 1.5], 0.0, [1.0, 0.0]).with_score(score)
    }

    fn config() -> TrackerConfig {
        TrackerConfig::default()
    }

    fn seeded_state(n: usize) -> TrackState {
        let mut state = TrackState::new();
        for i in 0..n {
            state.spawn(vec![0.0; 4], det(i as f64 * 10.0, 0.9));
        }
        state
    }

    fn estimates(state: &TrackState, det_boxes: Vec<BevBox>, s: Option<Matrix>) -> FrameEstimates {
        FrameEstimates {
            track_boxes: state.tracks.iter().map(|t| t.bbox.clone()).collect(),
            track_features: state.features_matrix(4),
            det_features: Matrix::zeros(det_boxes.len(), 4),
            det_boxes,
            assoc: s,
        }
    }

    #[test]
    fn diagonal_association_matches_identity() {
        let mut state = seeded_state(3);
        let dets = vec![det(0.2, 0.95), det(10.2, 0.95), det(20.2, 0.95)];
        let s = Matrix::from_fn(3, 3, |i, j| if i == j { 0.9 } else { 0.1 });
        let est = estimates(&state, dets, Some(s));
        let report = update_tracks(&mut state, &est, &config());
        assert_eq!(report.len(), 3);
        for (t, track) in state.tracks.iter().enumerate() {
            assert!((track.bbox.center[0] - (t as f64 * 10.0 + 0.2)).abs() < 1e-12);
            assert_eq!(track.miss, 0);
        }
    }

    #[test]
    fn gating_blocks_low_scores_and_births_happen() {
        let mut state = seeded_state(2);
        let dets = vec![det(30.0, 0.95), det(40.0, 0.7)];
        let s = Matrix::from_fn(2, 2, |_, _| 0.2);
        let est = estimates(&state, dets, Some(s));
        let _ = update_tracks(&mut state, &est, &config());
        // Both tracks aged, both confident detections became new tracks.
        assert_eq!(state.tracks.len(), 4);
        assert_eq!(state.tracks.iter().filter(|t| t.miss == 1).count(), 2);
        assert_eq!(state.tracks.iter().filter(|t| t.miss == 0).count(), 2);
        // Coasting decays confidence, so zombies stop being reported.
        for t in state.tracks.iter().filter(|t| t.miss == 1) {
            assert!(t.bbox.score < 0.5);
        }
    }

    #[test]
    fn births_deduplicate_on_top_of_live_tracks() {
        let mut state = seeded_state(1);
        // One detection claims the track, a second lands on top of it.
        let dets = vec![det(0.3, 0.95), det(0.6, 0.9)];
        let s = Matrix::from_fn(1, 2, |_, j| if j == 0 { 0.9 } else { 0.1 });
        let est = estimates(&state, dets, Some(s));
        let _ = update_tracks(&mut state, &est, &config());
        assert_eq!(state.tracks.len(), 1);
    }

    #[test]
    fn tracks_die_after_max_miss() {
        let mut state = seeded_state(1);
        let cfg = config();
        for age in 1..=cfg.max_miss {
            let est = estimates(&state, vec![], Some(Matrix::zeros(state.len(), 0)));
            let _ = update_tracks(&mut state, &est, &cfg);
            if age < cfg.max_miss {
                assert_eq!(state.tracks.len(), 1);
                assert_eq!(state.tracks[0].miss, age);
            }
        }
        assert!(state.tracks.is_empty());
    }

    #[test]
    fn tba_births_deduplicate_near_tracks() {
        let mut state = seeded_state(1);
        let cfg = TrackerConfig {
            paradigm: Paradigm::Tba,
            ..config()
        };
        // One detection sits on the live track, one is far away.
        let dets = vec![det(0.5, 0.9), det(30.0, 0.9)];
        let est = estimates(&state, dets, None);
        let _ = update_tracks(&mut state, &est, &cfg);
        assert_eq!(state.tracks.len(), 2);
    }
}
