//! Property tests for the numeric kernels, mask builders, and metrics.

use proptest::prelude::*;

use tqd_core::dngen::BevBox;
use tqd_core::masks::{build_association_mask, build_self_attention_mask, QueryLayout};
use tqd_core::metrics::{evaluate, TrackResult, TrackedBox};
use tqd_core::numeric::{masked_softmax, Matrix};
use tqd_core::sim::Scene;

fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-10.0f64..10.0, rows * cols)
        .prop_map(move |data| Matrix::from_vec(rows, cols, data))
}

fn mask_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(proptest::bool::ANY, rows * cols).prop_map(move |bits| {
        Matrix::from_vec(
            rows,
            cols,
            bits.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect(),
        )
    })
}

proptest! {
    /// Rows with at least one unmasked entry sum to one; fully masked rows
    /// are exactly zero.
    #[test]
    fn masked_softmax_rows_normalize((scores, mask) in (3usize..6, 3usize..7).prop_flat_map(|(r, c)| {
        (matrix_strategy(r, c), mask_strategy(r, c))
    })) {
        let out = masked_softmax(&scores, &mask);
        for i in 0..scores.rows() {
            let row_sum: f64 = out.probs.row(i).iter().sum();
            let any_open = mask.row(i).iter().any(|&m| m == 0.0);
            if any_open {
                prop_assert!((row_sum - 1.0).abs() <= 1e-12, "row {i} sums to {row_sum}");
                prop_assert!(!out.all_masked[i]);
            } else {
                prop_assert!(out.probs.row(i).iter().all(|&v| v == 0.0));
                prop_assert!(out.all_masked[i]);
            }
            for j in 0..scores.cols() {
                if mask.get(i, j) == 1.0 {
                    prop_assert_eq!(out.probs.get(i, j), 0.0);
                }
            }
        }
    }

    /// With an all-zero mask the result matches a plain softmax entrywise.
    #[test]
    fn masked_softmax_with_open_mask_is_plain_softmax(scores in (2usize..5, 2usize..6).prop_flat_map(|(r, c)| matrix_strategy(r, c))) {
        let open = Matrix::zeros(scores.rows(), scores.cols());
        let out = masked_softmax(&scores, &open);
        for i in 0..scores.rows() {
            let row = scores.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..scores.cols() {
                let plain = (scores.get(i, j) - max).exp() / denom;
                prop_assert!((out.probs.get(i, j) - plain).abs() <= 1e-15);
            }
        }
    }

    /// Self-attention mask structure for random layouts: DN rows open only
    /// on their own group among DN columns, real-query rows block every DN
    /// column, and the real sub-block is fully open.
    #[test]
    fn self_attention_mask_structure(
        group_sizes in proptest::collection::vec(1usize..4, 0..4),
        n_track in 0usize..4,
        n_det in 0usize..4,
    ) {
        let layout = QueryLayout::new(group_sizes, n_track, n_det);
        let mask = build_self_attention_mask(&layout);
        let n_dn = layout.n_dn_all();
        let w = layout.total();
        for g in 0..layout.n_groups() {
            let (start, len) = layout.group_span(g);
            for i in start..start + len {
                for j in 0..w {
                    let expected = j < n_dn && !(start..start + len).contains(&j);
                    prop_assert_eq!(mask.blocked(i, j), expected);
                }
            }
        }
        for i in n_dn..w {
            for j in 0..w {
                prop_assert_eq!(mask.blocked(i, j), j < n_dn);
            }
        }
    }

    /// The association mask depends only on the total DN count, never on the
    /// per-group split.
    #[test]
    fn association_mask_depends_only_on_totals(
        split_a in proptest::collection::vec(1usize..4, 1..4),
        n_track in 0usize..4,
        n_det in 1usize..4,
    ) {
        let n_dn: usize = split_a.iter().sum();
        let merged = QueryLayout::new(vec![n_dn], n_track, n_det);
        let split = QueryLayout::new(split_a, n_track, n_det);
        prop_assert_eq!(
            build_association_mask(&merged),
            build_association_mask(&split)
        );
    }

    /// Metrics are invariant under bijective relabeling of track ids.
    #[test]
    fn metrics_invariant_to_track_relabeling(
        offsets in proptest::collection::vec((0u64..4, -1.5f64..1.5, 0.3f64..1.0), 1..12),
    ) {
        // Two GT objects over three frames; predictions derived from the
        // sampled (track, dx, score) triples spread across frames.
        let gt = |id: u64, x: f64| {
            BevBox::new([x, 0.0, 0.75], [2.0, 4.0, 1.5], 0.0, [0.0, 0.0]).with_instance(id)
        };
        let frames: Vec<Vec<BevBox>> = (0..3)
            .map(|t| vec![gt(0, t as f64), gt(1, 10.0 + t as f64)])
            .collect();
        let scenes = vec![Scene { frames }];

        let mut result = TrackResult::default();
        for t in 0..3usize {
            let mut frame = Vec::new();
            for (i, (track, dx, score)) in offsets.iter().enumerate() {
                if i % 3 == t {
                    let base = if track % 2 == 0 { t as f64 } else { 10.0 + t as f64 };
                    frame.push(TrackedBox {
                        track_id: *track,
                        bbox: BevBox::new([base + dx, 0.0, 0.75], [2.0, 4.0, 1.5], 0.0, [0.0, 0.0])
                            .with_score(*score),
                    });
                }
            }
            result.frames.push(frame);
        }
        let results = vec![result.clone()];
        let baseline = evaluate(&results, &scenes, 2.0);

        // Bijective relabeling: id -> 4 * id + 17.
        let mut relabeled = result;
        for frame in &mut relabeled.frames {
            for tb in frame {
                tb.track_id = 4 * tb.track_id + 17;
            }
        }
        let renamed = evaluate(&[relabeled], &scenes, 2.0);
        prop_assert_eq!(baseline, renamed);
    }
}
