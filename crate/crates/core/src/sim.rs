//! Synthetic BEV multi-object world: ground-truth trajectories with births
//! and deaths, plus the per-frame observation tokens the tracker attends to.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::dngen::BevBox;
use crate::numeric::Matrix;
use crate::rng::SeedPath;
use crate::tracker::encoding::{encode_box, BOX_ENCODING_DIM};

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    /// Half extent of the square arena in meters.
    pub arena: f64,
    pub n_objects_init: usize,
    /// Expected births per frame (Poisson).
    pub birth_rate: f64,
    /// Per-object death probability per frame (geometric lifetime).
    pub death_prob: f64,
    /// Seconds per frame.
    pub dt: f64,
    pub n_frames: usize,
    /// Std of the per-frame velocity perturbation is accel_noise * dt.
    pub accel_noise: f64,
    /// Std in meters of the observed position.
    pub obs_pos_noise: f64,
    /// Per-object probability of emitting no token.
    pub miss_prob: f64,
    /// Expected clutter tokens per frame (Poisson).
    pub clutter_rate: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            arena: 50.0,
            n_objects_init: 8,
            birth_rate: 0.4,
            death_prob: 0.05,
            dt: 0.5,
            n_frames: 40,
            accel_noise: 0.5,
            obs_pos_noise: 0.3,
            miss_prob: 0.1,
            clutter_rate: 2.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.arena <= 0.0 {
            return Err(format!("arena must be > 0, got {}", self.arena));
        }
        if self.dt <= 0.0 {
            return Err(format!("dt must be > 0, got {}", self.dt));
        }
        for (name, v) in [
            ("birth_rate", self.birth_rate),
            ("death_prob", self.death_prob),
            ("accel_noise", self.accel_noise),
            ("obs_pos_noise", self.obs_pos_noise),
            ("miss_prob", self.miss_prob),
            ("clutter_rate", self.clutter_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Ground-truth trajectories. Instance IDs are never reused within a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub frames: Vec<Vec<BevBox>>,
}

impl Scene {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn total_gt(&self) -> usize {
        self.frames.iter().map(|f| f.len()).sum()
    }
}

fn sample_size(rng: &mut impl Rng) -> [f64; 3] {
    [
        rng.random_range(1.6..2.4),
        rng.random_range(3.5..5.0),
        rng.random_range(1.4..1.8),
    ]
}

/// Objects follow near-constant-velocity motion; births arrive at the arena
/// edge with inward velocity, deaths are geometric. Deterministic given seed.
pub fn generate_scene(config: &ScenarioConfig, seed: SeedPath) -> Scene {
    config.validate().expect("scenario config validated upstream");
    let mut rng = seed.child("scene").rng();
    let mut next_id: u64 = 0;
    let mut objects: Vec<BevBox> = Vec::new();

    for _ in 0..config.n_objects_init {
        let size = sample_size(&mut rng);
        let pos = [
            rng.random_range(-0.8 * config.arena..0.8 * config.arena),
            rng.random_range(-0.8 * config.arena..0.8 * config.arena),
            size[2] / 2.0,
        ];
        let vel: [f64; 2] = [rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)];
        let yaw = vel[1].atan2(vel[0]);
        objects.push(BevBox::new(pos, size, yaw, vel).with_instance(next_id));
        next_id += 1;
    }

    let mut frames = Vec::with_capacity(config.n_frames);
    let accel_std = config.accel_noise * config.dt;
    let accel = if accel_std > 0.0 {
        Some(Normal::new(0.0, accel_std).expect("valid std"))
    } else {
        None
    };

    for _ in 0..config.n_frames {
        frames.push(objects.clone());

        // Deaths.
        let mut survivors = Vec::with_capacity(objects.len());
        for obj in objects.into_iter() {
            if config.death_prob >= 1.0 || rng.random_bool(config.death_prob.min(1.0)) {
                continue;
            }
            survivors.push(obj);
        }
        objects = survivors;

        // Motion.
        for obj in &mut objects {
            if let Some(n) = &accel {
                obj.velocity[0] += n.sample(&mut rng);
                obj.velocity[1] += n.sample(&mut rng);
            }
            obj.center[0] += obj.velocity[0] * config.dt;
            obj.center[1] += obj.velocity[1] * config.dt;
            obj.center[0] = obj.center[0].clamp(-config.arena, config.arena);
            obj.center[1] = obj.center[1].clamp(-config.arena, config.arena);
        }

        // Births at the arena edge, heading inward.
        let n_births = if config.birth_rate > 0.0 {
            Poisson::new(config.birth_rate)
                .expect("valid rate")
                .sample(&mut rng) as usize
        } else {
            0
        };
        for _ in 0..n_births {
            let size = sample_size(&mut rng);
            let side = rng.random_range(0..4u32);
            let along = rng.random_range(-config.arena..config.arena);
            let inward = rng.random_range(0.5..2.5);
            let tangent = rng.random_range(-1.5..1.5);
            let (pos, vel): ([f64; 2], [f64; 2]) = match side {
                0 => ([-config.arena, along], [inward, tangent]),
                1 => ([config.arena, along], [-inward, tangent]),
                2 => ([along, -config.arena], [tangent, inward]),
                _ => ([along, config.arena], [tangent, -inward]),
            };
            let yaw = vel[1].atan2(vel[0]);
            objects.push(
                BevBox::new([pos[0], pos[1], size[2] / 2.0], size, yaw, vel).with_instance(next_id),
            );
            next_id += 1;
        }
    }

    Scene { frames }
}

/// One frame of observation evidence: a sinusoidal box encoding per token
/// plus the observed box each token stands for (the desk-scale stand-in for
/// where image features would be sampled).
#[derive(Clone, Debug, PartialEq)]
pub struct ObsFrame {
    pub tokens: Matrix,
    pub boxes: Vec<BevBox>,
}

impl ObsFrame {
    pub fn empty() -> Self {
        ObsFrame {
            tokens: Matrix::zeros(0, BOX_ENCODING_DIM),
            boxes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.boxes.iter().map(|b| b.center).collect()
    }
}

/// Per-frame observation tokens: each GT box emits a position-noised token
/// with probability 1 - miss_prob, plus Poisson clutter from uniform random
/// boxes. Rows are fixed sinusoidal box encodings.
pub fn render_observations(
    frame: &[BevBox],
    config: &ScenarioConfig,
    seed: SeedPath,
) -> ObsFrame {
    let mut rng = seed.child("obs").rng();
    let pos_noise = if config.obs_pos_noise > 0.0 {
        Some(Normal::new(0.0, config.obs_pos_noise).expect("valid std"))
    } else {
        None
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut boxes: Vec<BevBox> = Vec::new();
    for b in frame {
        let missed = config.miss_prob >= 1.0
            || (config.miss_prob > 0.0 && rng.random_bool(config.miss_prob));
        // Draw the position noise regardless so that miss/hit decisions do
        // not shift later draws between configs with equal miss streams.
        let (nx, ny) = match &pos_noise {
            Some(n) => (n.sample(&mut rng), n.sample(&mut rng)),
            None => (0.0, 0.0),
        };
        if missed {
            continue;
        }
        let mut obs = b.clone();
        obs.center[0] += nx;
        obs.center[1] += ny;
        obs.instance_id = None;
        rows.push(encode_box(&obs));
        boxes.push(obs);
    }
    let n_clutter = if config.clutter_rate > 0.0 {
        Poisson::new(config.clutter_rate)
            .expect("valid rate")
            .sample(&mut rng) as usize
    } else {
        0
    };
    for _ in 0..n_clutter {
        let size = sample_size(&mut rng);
        let pos = [
            rng.random_range(-config.arena..config.arena),
            rng.random_range(-config.arena..config.arena),
            size[2] / 2.0,
        ];
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let clutter = BevBox::new(pos, size, yaw, [0.0, 0.0]);
        rows.push(encode_box(&clutter));
        boxes.push(clutter);
    }
    let tokens = if rows.is_empty() {
        Matrix::zeros(0, BOX_ENCODING_DIM)
    } else {
        Matrix::from_rows(&rows)
    };
    ObsFrame { tokens, boxes }
}

/// Formats a float with 17 significant digits (round-trip exact for f64).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes one frame per line: frame_index then repeated
/// (instance_id, x, y, z, w, l, h, yaw, vx, vy) tuples.
pub fn write_scene(scene: &Scene, mut w: impl Write) -> std::io::Result<()> {
    for (t, frame) in scene.frames.iter().enumerate() {
        let mut line = t.to_string();
        for b in frame {
            let id = b.instance_id.expect("GT boxes carry instance IDs");
            line.push_str(&format!(
                " {id} {} {} {} {} {} {} {} {} {}",
                fmt_f64(b.center[0]),
                fmt_f64(b.center[1]),
                fmt_f64(b.center[2]),
                fmt_f64(b.size[0]),
                fmt_f64(b.size[1]),
                fmt_f64(b.size[2]),
                fmt_f64(b.yaw),
                fmt_f64(b.velocity[0]),
                fmt_f64(b.velocity[1]),
            ));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_scene(r: impl BufRead) -> Result<Scene, String> {
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
            return Err(format!(
                "line {lineno}: frame index {frame_idx}, expected {}",
                frames.len()
            ));
        }
        let rest: Vec<&str> = toks.collect();
        if rest.len() % 10 != 0 {
            return Err(format!(
                "line {lineno}: {} fields is not a multiple of 10",
                rest.len()
            ));
        }
        let mut frame = Vec::with_capacity(rest.len() / 10);
        for chunk in rest.chunks(10) {
            let id: u64 = chunk[0]
                .parse()
                .map_err(|e| format!("line {lineno}: bad instance id: {e}"))?;
            let nums: Vec<f64> = chunk[1..]
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| format!("line {lineno}: bad number: {e}"))?;
            frame.push(
                BevBox::new(
                    [nums[0], nums[1], nums[2]],
                    [nums[3], nums[4], nums[5]],
                    nums[6],
                    [nums[7], nums[8]],
                )
                .with_instance(id),
            );
        }
        frames.push(frame);
    }
    Ok(Scene { frames })
}
