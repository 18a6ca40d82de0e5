//! Attention mask construction for denoising-augmented query sets.
//!
//! Queries are concatenated in the canonical order: denoising groups (in
//! group order), then track queries, then detection queries. Masks use
//! 1 = blocked, 0 = allowed.

use crate::numeric::Matrix;

/// Sizes of every segment of the concatenated query set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryLayout {
    pub group_sizes: Vec<usize>,
    pub n_track: usize,
    pub n_det: usize,
}

/// Classification of one row/column index of the concatenated set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryKind {
    Denoising { group: usize },
    Track,
    Detection,
}

impl QueryLayout {
    pub fn new(group_sizes: Vec<usize>, n_track: usize, n_det: usize) -> Self {
        QueryLayout {
            group_sizes,
            n_track,
            n_det,
        }
    }

    /// Layout with no denoising queries (the inference layout).
    pub fn inference(n_track: usize, n_det: usize) -> Self {
        QueryLayout::new(Vec::new(), n_track, n_det)
    }

    pub fn n_dn_all(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    pub fn n_groups(&self) -> usize {
        self.group_sizes.len()
    }

    /// Total query count W.
    pub fn total(&self) -> usize {
        self.n_dn_all() + self.n_track + self.n_det
    }

    /// Number of source queries seen by the association module (DN + track).
    pub fn n_sources(&self) -> usize {
        self.n_dn_all() + self.n_track
    }

    pub fn kind_of(&self, index: usize) -> QueryKind {
        assert!(index < self.total(), "index {index} out of {} queries", self.total());
        let mut cursor = 0;
        for (g, &size) in self.group_sizes.iter().enumerate() {
            cursor += size;
            if index < cursor {
                return QueryKind::Denoising { group: g };
            }
        }
        if index < cursor + self.n_track {
            QueryKind::Track
        } else {
            QueryKind::Detection
        }
    }

    /// Row range [start, start+len) for denoising group `g`.
    pub fn group_span(&self, g: usize) -> (usize, usize) {
        let start: usize = self.group_sizes[..g].iter().sum();
        (start, self.group_sizes[g])
    }

    pub fn track_span(&self) -> (usize, usize) {
        (self.n_dn_all(), self.n_track)
    }

    pub fn det_span(&self) -> (usize, usize) {
        (self.n_dn_all() + self.n_track, self.n_det)
    }
}

/// A binary attention mask; 1 = blocked, 0 = allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub entries: Matrix,
}

impl AttnMask {
    pub fn blocked(&self, i: usize, j: usize) -> bool {
        self.entries.get(i, j) == 1.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.shape()
    }

    /// Serializes as one line of 0/1 characters per row.
    pub fn to_text_grid(&self) -> String {
        let mut out = String::new();
        for i in 0..self.entries.rows() {
            for j in 0..self.entries.cols() {
                out.push(if self.blocked(i, j) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text_grid(text: &str) -> Result<Self, String> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let rows = lines.len();
        let cols = lines.first().map_or(0, |l| l.trim().len());
        let mut m = Matrix::zeros(rows, cols);
        for (i, line) in lines.iter().enumerate() {
            let line = line.trim();
            if line.len() != cols {
                return Err(format!("row {i} has {} entries, expected {cols}", line.len()));
            }
            for (j, ch) in line.chars().enumerate() {
                match ch {
                    '0' => {}
                    '1' => m.set(i, j, 1.0),
                    other => return Err(format!("invalid mask char '{other}' at ({i},{j})")),
                }
            }
        }
        Ok(AttnMask { entries: m })
    }
}

/// W x W self-attention mask.
///
/// Entry (i, j) blocks iff key j is a denoising query and query i either is
/// not a denoising query or belongs to a different denoising group. Denoising
/// queries may still attend to track and detection queries.
pub fn build_self_attention_mask(layout: &QueryLayout) -> AttnMask {
    let w = layout.total();
    let mut m = Matrix::zeros(w, w);
    for j in 0..w {
        let QueryKind::Denoising { group: gj } = layout.kind_of(j) else {
            continue;
        };
        for i in 0..w {
            let blocked = match layout.kind_of(i) {
                QueryKind::Denoising { group: gi } => gi != gj,
                QueryKind::Track | QueryKind::Detection => true,
            };
            if blocked {
                m.set(i, j, 1.0);
            }
        }
    }
    AttnMask { entries: m }
}

/// N_D x (N_DN,all + N_T) association mask: detection-query feature updates
/// may aggregate only track-query values, so every denoising column blocks.
pub fn build_association_mask(layout: &QueryLayout) -> AttnMask {
    let n_dn = layout.n_dn_all();
    let mut m = Matrix::zeros(layout.n_det, layout.n_sources());
    for i in 0..layout.n_det {
        for j in 0..n_dn {
            m.set(i, j, 1.0);
        }
    }
    AttnMask { entries: m }
}

/// Audit that a self-attention mask never lets denoising keys reach track or
/// detection rows, and that the track/detection sub-block is fully open.
pub fn audit_self_attention_mask(layout: &QueryLayout, mask: &AttnMask) -> Result<(), String> {
    let w = layout.total();
    if mask.shape() != (w, w) {
        return Err(format!("mask shape {:?} does not match layout total {w}", mask.shape()));
    }
    for i in 0..w {
        for j in 0..w {
            let want = match (layout.kind_of(i), layout.kind_of(j)) {
                (QueryKind::Denoising { group: gi }, QueryKind::Denoising { group: gj }) => gi != gj,
                (_, QueryKind::Denoising { .. }) => true,
                _ => false,
            };
            if mask.blocked(i, j) != want {
                return Err(format!(
                    "entry ({i},{j}) is {}, expected {}",
                    mask.blocked(i, j) as u8,
                    want as u8
                ));
            }
        }
    }
    Ok(())
}
