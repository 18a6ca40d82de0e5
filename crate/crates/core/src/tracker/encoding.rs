//! Fixed sinusoidal encodings for boxes, reference points, and box
//! differences. These stand in for image features at desk scale; the
//! learned projections that consume them live in the model.

use crate::dngen::BevBox;

/// Wavelengths from well beyond arena scale (the coarsest band stays
/// monotone over the whole tracking space, so absolute position is linearly
/// decodable) down to sub-meter.
const FREQS: [f64; 4] = [
    std::f64::consts::TAU / 512.0,
    std::f64::consts::TAU / 64.0,
    std::f64::consts::TAU / 8.0,
    std::f64::consts::TAU / 1.0,
];

pub const ATTR_ENCODING_DIM: usize = 2 * FREQS.len();
/// (x, y, z, w, l, h, sin yaw, cos yaw) each sinusoidally expanded.
pub const BOX_ENCODING_DIM: usize = 8 * ATTR_ENCODING_DIM;
pub const POINT_ENCODING_DIM: usize = 3 * ATTR_ENCODING_DIM;

fn encode_attr(value: f64, out: &mut Vec<f64>) {
    for w in FREQS {
        out.push((w * value).sin());
        out.push((w * value).cos());
    }
}

pub fn encode_box(b: &BevBox) -> Vec<f64> {
    let mut out = Vec::with_capacity(BOX_ENCODING_DIM);
    for v in [
        b.center[0],
        b.center[1],
        b.center[2],
        b.size[0],
        b.size[1],
        b.size[2],
        b.yaw.sin(),
        b.yaw.cos(),
    ] {
        encode_attr(v, &mut out);
    }
    out
}

pub fn encode_point(p: &[f64; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(POINT_ENCODING_DIM);
    for &v in p {
        encode_attr(v, &mut out);
    }
    out
}

/// Query-relative view of one observed box: center offset from the query's
/// reference point plus the box's own extent and heading. The offset rides
/// the near-linear coarse band, so small displacements are linearly
/// decodable from the encoding.
pub const RELATIVE_ENCODING_DIM: usize = BOX_ENCODING_DIM;

pub fn encode_relative(query_ref: &[f64; 3], obs: &BevBox) -> Vec<f64> {
    let mut out = Vec::with_capacity(RELATIVE_ENCODING_DIM);
    for v in [
        obs.center[0] - query_ref[0],
        obs.center[1] - query_ref[1],
        obs.center[2] - query_ref[2],
        obs.size[0],
        obs.size[1],
        obs.size[2],
        obs.yaw.sin(),
        obs.yaw.cos(),
    ] {
        encode_attr(v, &mut out);
    }
    out
}
