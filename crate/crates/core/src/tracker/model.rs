//! Model parameters, initialization, and checkpoint I/O.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use super::encoding::{BOX_ENCODING_DIM, POINT_ENCODING_DIM};
use crate::numeric::{Graph, Matrix, NodeId, ParamId, ParamStore};
use crate::rng::SeedPath;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Paradigm {
    /// Tracking by attention: association is implicit in self-attention.
    Tba,
    /// Tracking by detection: detector layers, then association layers.
    Tbd,
    /// Alternating detection and association per decoder layer.
    Ada,
}

impl Paradigm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Paradigm::Tba => "tba",
            Paradigm::Tbd => "tbd",
            Paradigm::Ada => "ada",
        }
    }

    pub fn parse(s: &str) -> Option<Paradigm> {
        match s {
            "tba" => Some(Paradigm::Tba),
            "tbd" => Some(Paradigm::Tbd),
            "ada" => Some(Paradigm::Ada),
            _ => None,
        }
    }

    pub fn has_association_module(&self) -> bool {
        !matches!(self, Paradigm::Tba)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub paradigm: Paradigm,
    pub decoder_layers: usize,
    pub feature_dim: usize,
    pub n_det_queries: usize,
    /// Unmatched detections above this score spawn tracks.
    pub tau_birth: f64,
    /// Tracks below this score are not reported.
    pub tau_out: f64,
    /// Consecutive misses before a track dies.
    pub max_miss: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            paradigm: Paradigm::Ada,
            decoder_layers: 2,
            feature_dim: 32,
            n_det_queries: 32,
            tau_birth: 0.6,
            tau_out: 0.4,
            max_miss: 3,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.decoder_layers < 1 {
            return Err(format!("decoder_layers must be >= 1, got {}", self.decoder_layers));
        }
        if self.feature_dim < 4 {
            return Err(format!("feature_dim must be >= 4, got {}", self.feature_dim));
        }
        if self.n_det_queries < 1 {
            return Err(format!("n_det_queries must be >= 1, got {}", self.n_det_queries));
        }
        for (name, v) in [("tau_birth", self.tau_birth), ("tau_out", self.tau_out)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must be in [0,1], got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct EdgeParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// d_k x 1: edge features to attention bias.
    pub we1: ParamId,
    /// 1 x d_k: pre-mask attention to edge update.
    pub we2: ParamId,
    pub ffn_d: MlpParams,
    pub ffn_e: MlpParams,
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub self_attn: AttnParams,
    pub obs_attn: AttnParams,
    pub ffn: MlpParams,
    pub edge: Option<EdgeParams>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub box_mlp: MlpParams,
    pub cls_mlp: MlpParams,
    pub assoc_mlp: MlpParams,
}

/// Weights for one tracker. Construction order is fixed so checkpoints map
/// one to one onto parameter names.
pub struct TrackerModel {
    pub config: TrackerConfig,
    pub store: ParamStore,
    /// POINT_ENCODING_DIM x d_k: reference-point encoding into query space.
    pub ref_proj: ParamId,
    /// BOX_ENCODING_DIM x d_k: observation tokens into key/value space.
    pub obs_proj: ParamId,
    /// POINT_ENCODING_DIM x d_k: pairwise box differences into edge space.
    pub edge_init_proj: ParamId,
    pub layers: Vec<LayerParams>,
    /// TBD only: association decoder stacked after the detector.
    pub assoc_layers: Vec<EdgeParams>,
    pub heads: HeadParams,
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: SeedPath,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let mut rng = self.seed.child(&name).rng();
        let value = xavier(rows, cols, &mut rng);
        self.store.add(name, value)
    }

    fn bias(&mut self, name: String, cols: usize) -> ParamId {
        self.store.add(name, Matrix::zeros(1, cols))
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnParams {
        AttnParams {
            wq: self.weight(format!("{prefix}.wq"), d, d),
            wk: self.weight(format!("{prefix}.wk"), d, d),
            wv: self.weight(format!("{prefix}.wv"), d, d),
        }
    }

    /// Observation attention: values project the query-relative encodings.
    fn obs_attn(&mut self, prefix: &str, d: usize) -> AttnParams {
        AttnParams {
            wq: self.weight(format!("{prefix}.wq"), d, d),
            wk: self.weight(format!("{prefix}.wk"), d, d),
            wv: self.weight(
                format!("{prefix}.wv"),
                super::encoding::RELATIVE_ENCODING_DIM,
                d,
            ),
        }
    }

    fn mlp(&mut self, prefix: &str, d_in: usize, d_hidden: usize, d_out: usize) -> MlpParams {
        MlpParams {
            w1: self.weight(format!("{prefix}.w1"), d_in, d_hidden),
            b1: self.bias(format!("{prefix}.b1"), d_hidden),
            w2: self.weight(format!("{prefix}.w2"), d_hidden, d_out),
            b2: self.bias(format!("{prefix}.b2"), d_out),
        }
    }

    fn edge(&mut self, prefix: &str, d: usize) -> EdgeParams {
        EdgeParams {
            wq: self.weight(format!("{prefix}.wq"), d, d),
            wk: self.weight(format!("{prefix}.wk"), d, d),
            wv: self.weight(format!("{prefix}.wv"), d, d),
            we1: self.weight(format!("{prefix}.we1"), d, 1),
            we2: self.weight(format!("{prefix}.we2"), 1, d),
            ffn_d: self.mlp(&format!("{prefix}.ffn_d"), d, d, d),
            ffn_e: self.mlp(&format!("{prefix}.ffn_e"), d, d, d),
        }
    }
}

impl TrackerModel {
    pub fn new(config: TrackerConfig, seed: SeedPath) -> Self {
        config.validate().expect("tracker config validated upstream");
        let d = config.feature_dim;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            seed: seed.child("init"),
        };

        let ref_proj = b.weight("ref_proj".into(), POINT_ENCODING_DIM, d);
        let obs_proj = b.weight("obs_proj".into(), BOX_ENCODING_DIM, d);
        let edge_init_proj = b.weight("edge_init_proj".into(), POINT_ENCODING_DIM, d);

        let mut layers = Vec::with_capacity(config.decoder_layers);
        for l in 0..config.decoder_layers {
            let prefix = format!("layer{l}");
            let edge = if config.paradigm == Paradigm::Ada {
                Some(b.edge(&format!("{prefix}.edge"), d))
            } else {
                None
            };
            layers.push(LayerParams {
                self_attn: b.attn(&format!("{prefix}.self_attn"), d),
                obs_attn: b.obs_attn(&format!("{prefix}.obs_attn"), d),
                ffn: b.mlp(&format!("{prefix}.ffn"), d, d, d),
                edge,
            });
        }

        let mut assoc_layers = Vec::new();
        if config.paradigm == Paradigm::Tbd {
            for l in 0..config.decoder_layers {
                assoc_layers.push(b.edge(&format!("assoc{l}.edge"), d));
            }
        }

        let heads = HeadParams {
            box_mlp: b.mlp("head.box", d, d, 10),
            cls_mlp: b.mlp("head.cls", d, d, 1),
            assoc_mlp: b.mlp("head.assoc", d, d, 1),
        };

        TrackerModel {
            config,
            store,
            ref_proj,
            obs_proj,
            edge_init_proj,
            layers,
            assoc_layers,
            heads,
        }
    }
}

/// Parameter nodes bound into one graph; bind once per recorded step.
pub struct BoundParams {
    nodes: Vec<NodeId>,
}

impl BoundParams {
    pub fn bind(model: &TrackerModel, g: &mut Graph) -> Self {
        Self::bind_store(&model.store, g)
    }

    pub fn bind_store(store: &ParamStore, g: &mut Graph) -> Self {
        let nodes = store.ids().map(|id| g.param(store, id)).collect();
        BoundParams { nodes }
    }

    /// Wrap pre-bound nodes; node order must match the store's id order.
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        BoundParams { nodes }
    }

    pub fn node(&self, p: ParamId) -> NodeId {
        self.nodes[p.0]
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("parameter {index} is '{found}' {found_shape:?}, expected '{expected}' {expected_shape:?}")]
    Mismatch {
        index: usize,
        found: String,
        found_shape: (usize, usize),
        expected: String,
        expected_shape: (usize, usize),
    },
}

const CKPT_MAGIC: &str = "TQD-CKPT 1";

/// Text manifest (name + shape per tensor) followed by raw little-endian f64
/// data for every tensor in manifest order.
pub fn save_checkpoint(store: &ParamStore, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{CKPT_MAGIC}")?;
    writeln!(w, "{}", store.len())?;
    for (_, p) in store.iter() {
        writeln!(w, "{} {} {}", p.name, p.value.rows(), p.value.cols())?;
    }
    writeln!(w, "DATA")?;
    for (_, p) in store.iter() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint_file(store: &ParamStore, path: &Path) -> std::io::Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    save_checkpoint(store, &mut w)
}

/// Loads a checkpoint into a store with an identical manifest.
pub fn load_checkpoint(store: &mut ParamStore, mut r: impl BufRead) -> Result<(), CheckpointError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != CKPT_MAGIC {
        return Err(CheckpointError::Header(format!("bad magic '{}'", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line)?;
    let count: usize = line
        .trim()
        .parse()
        .map_err(|e| CheckpointError::Header(format!("bad count: {e}")))?;
    if count != store.len() {
        return Err(CheckpointError::Header(format!(
            "checkpoint has {count} tensors, model has {}",
            store.len()
        )));
    }
    let mut manifest = Vec::with_capacity(count);
    for i in 0..count {
        line.clear();
        r.read_line(&mut line)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(CheckpointError::Header(format!("bad manifest line {i}: '{}'", line.trim())));
        }
        let rows: usize = parts[1]
            .parse()
            .map_err(|e| CheckpointError::Header(format!("bad rows on line {i}: {e}")))?;
        let cols: usize = parts[2]
            .parse()
            .map_err(|e| CheckpointError::Header(format!("bad cols on line {i}: {e}")))?;
        manifest.push((parts[0].to_string(), rows, cols));
    }
    line.clear();
    r.read_line(&mut line)?;
    if line.trim_end() != "DATA" {
        return Err(CheckpointError::Header("missing DATA separator".into()));
    }
    let ids: Vec<ParamId> = store.ids().collect();
    for (i, (name, rows, cols)) in manifest.iter().enumerate() {
        let expected = store.get(ids[i]);
        if &expected.name != name || expected.value.shape() != (*rows, *cols) {
            return Err(CheckpointError::Mismatch {
                index: i,
                found: name.clone(),
                found_shape: (*rows, *cols),
                expected: expected.name.clone(),
                expected_shape: expected.value.shape(),
            });
        }
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf)?;
        let data = store.get_mut(ids[i]).value.data_mut();
        for (j, chunk) in buf.chunks_exact(8).enumerate() {
            data[j] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok(())
}

pub fn load_checkpoint_file(store: &mut ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let f = std::fs::File::open(path)?;
    load_checkpoint(store, std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let model = TrackerModel::new(TrackerConfig::default(), SeedPath::root(1));
        let mut buf = Vec::new();
        save_checkpoint(&model.store, &mut buf).unwrap();

        let mut other = TrackerModel::new(TrackerConfig::default(), SeedPath::root(2));
        // Same architecture, different init: load must restore every value.
        load_checkpoint(&mut other.store, &buf[..]).unwrap();
        for (a, b) in model.store.iter().zip(other.store.iter()) {
            assert_eq!(a.1.name, b.1.name);
            assert!(a.1.value.bit_eq(&b.1.value), "param {} differs", a.1.name);
        }
    }

    #[test]
    fn checkpoint_rejects_wrong_architecture() {
        let model = TrackerModel::new(TrackerConfig::default(), SeedPath::root(1));
        let mut buf = Vec::new();
        save_checkpoint(&model.store, &mut buf).unwrap();

        let mut tba = TrackerModel::new(
            TrackerConfig {
                paradigm: Paradigm::Tba,
                ..TrackerConfig::default()
            },
            SeedPath::root(1),
        );
        assert!(load_checkpoint(&mut tba.store, &buf[..]).is_err());
    }

    #[test]
    fn deterministic_init() {
        let a = TrackerModel::new(TrackerConfig::default(), SeedPath::root(5));
        let b = TrackerModel::new(TrackerConfig::default(), SeedPath::root(5));
        for (x, y) in a.store.iter().zip(b.store.iter()) {
            assert!(x.1.value.bit_eq(&y.1.value));
        }
    }
}
