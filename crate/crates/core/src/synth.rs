//! Procedural tabletop world with paired human-hand and robot-action episodes.
//!
//! Three objects sit on a 7×7 grid. An instruction names a verb and the
//! shape and color of one object. One latent wrist trajectory per
//! instruction yields both a hand sequence and a robot action chunk.
//! The gripper closes at an onset looked up from a per-(verb, shape) table
//! that has no compositional structure, so finger motion carries timing
//! information that text and waypoints alone do not reveal for combinations
//! never paired with actions.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fine::ActionChunk;
use crate::intention::{HandState, JOINTS};
use crate::model::{ObjectToken, HAND_DIM};
use crate::quat::{self, Quat};
use crate::waypoint::quantize;

pub const SHAPES: usize = 4;
pub const COLORS: usize = 4;
pub const VERBS: usize = 3;
pub const OBJECTS: usize = 3;
pub const ACTION_DIM: usize = 7;

pub const PAD_TOKEN: usize = 0;
const VERB_BASE: usize = 1;
const SHAPE_BASE: usize = VERB_BASE + VERBS;
const COLOR_BASE: usize = SHAPE_BASE + SHAPES;
pub const VOCAB: usize = COLOR_BASE + COLORS;

/// Half of a 256-bin cell on [-1, 1]. Object cells and the home pose are
/// shifted by it so they sit at bin centers instead of on bin edges.
const CELL_SHIFT: f64 = 1.0 / 256.0;
const GRID: [f64; 7] = [
    -0.75 + CELL_SHIFT,
    -0.5 + CELL_SHIFT,
    -0.25 + CELL_SHIFT,
    CELL_SHIFT,
    0.25 + CELL_SHIFT,
    0.5 + CELL_SHIFT,
    0.75 + CELL_SHIFT,
];
pub const HOME: [f64; 3] = [CELL_SHIFT, -0.9, 0.5 + CELL_SHIFT];
pub const MIN_SEPARATION: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verb {
    Reach,
    GraspLift,
    Push,
}

impl Verb {
    pub const ALL: [Verb; VERBS] = [Verb::Reach, Verb::GraspLift, Verb::Push];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Verb> {
        Verb::ALL.get(i).copied().ok_or_else(|| Error::Data(format!("verb index {i}")))
    }

    fn offset(self) -> [f64; 3] {
        match self {
            Verb::Reach => [0.0, 0.0, 0.12],
            Verb::GraspLift => [0.0, 0.0, 0.25],
            Verb::Push => [0.0, 0.15, 0.03],
        }
    }

    /// Final hand closure, 0 open to 1 closed.
    fn closure(self) -> f64 {
        match self {
            Verb::Reach => 0.0,
            Verb::GraspLift => 1.0,
            Verb::Push => 0.5,
        }
    }

    fn wrist_end(self) -> Quat {
        match self {
            Verb::Reach => quat::from_axis_angle([1.0, 0.0, 0.0], 20f64.to_radians()),
            Verb::GraspLift => quat::from_axis_angle([1.0, 0.2, 0.0], 60f64.to_radians()),
            Verb::Push => quat::from_axis_angle([0.0, 0.3, 1.0], 35f64.to_radians()),
        }
    }
}

/// Closure onset (fraction of the chunk) by verb and shape.
const ONSET: [[f64; SHAPES]; VERBS] = [
    [0.0, 0.0, 0.0, 0.0],
    [0.25, 0.6, 0.4, 0.5],
    [0.45, 0.3, 0.6, 0.35],
];

/// (verb, shape) pairs never paired with robot actions in training.
pub const HELD_OUT: [(Verb, usize); 2] = [(Verb::GraspLift, 0), (Verb::Push, 2)];

pub fn is_held_out(verb: Verb, shape: usize) -> bool {
    HELD_OUT.contains(&(verb, shape))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub pos: [f64; 3],
    pub shape: usize,
    pub color: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Object>,
}

impl Scene {
    /// One token per object in scene order, then padding up to `n_img`.
    pub fn tokens(&self, n_img: usize, bins: usize, range: [[f64; 2]; 3]) -> Result<Vec<ObjectToken>> {
        if self.objects.len() > n_img {
            return Err(Error::invalid(format!("{} objects exceed {n_img} image tokens", self.objects.len())));
        }
        let mut out = Vec::with_capacity(n_img);
        for o in &self.objects {
            let mut b = [0; 3];
            for a in 0..3 {
                b[a] = quantize(o.pos[a], range[a][0], range[a][1], bins)?;
            }
            out.push(ObjectToken::Object { bins: b, shape: o.shape, color: o.color });
        }
        out.resize(n_img, ObjectToken::Pad);
        Ok(out)
    }

    /// Order-independent key of the layout, used for split hygiene.
    pub fn layout_key(&self) -> Vec<(i64, i64, usize, usize)> {
        let mut k: Vec<_> = self
            .objects
            .iter()
            .map(|o| ((o.pos[0] * 1000.0).round() as i64, (o.pos[1] * 1000.0).round() as i64, o.shape, o.color))
            .collect();
        k.sort();
        k
    }

    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.objects.len() {
            for j in i + 1..self.objects.len() {
                let (a, b) = (self.objects[i].pos, self.objects[j].pos);
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                best = best.min(d);
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub verb: Verb,
    pub shape: usize,
    pub color: usize,
}

impl Instruction {
    pub fn tokens(&self, n_txt: usize) -> Result<Vec<usize>> {
        if n_txt < 3 {
            return Err(Error::invalid("instructions need at least 3 text tokens"));
        }
        let mut t = vec![
            VERB_BASE + self.verb.index(),
            SHAPE_BASE + self.shape,
            COLOR_BASE + self.color,
        ];
        t.resize(n_txt, PAD_TOKEN);
        Ok(t)
    }

    /// Index of the unique matching object.
    pub fn resolve(&self, scene: &Scene) -> Result<usize> {
        let hits: Vec<usize> = (0..scene.objects.len())
            .filter(|&i| scene.objects[i].shape == self.shape && scene.objects[i].color == self.color)
            .collect();
        match hits.as_slice() {
            [i] => Ok(*i),
            _ => Err(Error::Data(format!("instruction matches {} objects", hits.len()))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    HeldOutInstruction,
    HeldOutLayout,
}

impl Split {
    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Result<Split> {
        match i {
            0 => Ok(Split::Train),
            1 => Ok(Split::HeldOutInstruction),
            2 => Ok(Split::HeldOutLayout),
            _ => Err(Error::Data(format!("split tag {i}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::HeldOutInstruction => "held-out-instruction",
            Split::HeldOutLayout => "held-out-layout",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "held-out-instruction" => Ok(Split::HeldOutInstruction),
            "held-out-layout" => Ok(Split::HeldOutLayout),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: u64,
    /// Shared by the human and robot episodes of one latent trajectory.
    pub latent: u64,
    pub split: Split,
    pub scene: Scene,
    pub instruction: Instruction,
    /// `H` wrist positions.
    pub waypoints: Vec<[f64; 3]>,
    pub hand: Option<HandState>,
    /// Normalized actions.
    pub actions: Option<ActionChunk>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub horizon: usize,
    pub noise_amp: f64,
    /// Fraction of hand clips cut short and right-padded.
    pub short_clip_rate: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig { horizon: 15, noise_amp: 1e-4, short_clip_rate: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Latent trajectories in the training split.
    pub train: usize,
    pub held_out_instruction: usize,
    pub held_out_layout: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 4000, held_out_instruction: 100, held_out_layout: 200 }
    }
}

pub fn random_scene<R: Rng>(rng: &mut R) -> Scene {
    let mut cells: Vec<(usize, usize)> = (0..7).flat_map(|i| (0..7).map(move |j| (i, j))).collect();
    cells.shuffle(rng);
    let mut attrs: Vec<(usize, usize)> = (0..SHAPES).flat_map(|s| (0..COLORS).map(move |c| (s, c))).collect();
    attrs.shuffle(rng);
    let objects = (0..OBJECTS)
        .map(|k| Object {
            pos: [GRID[cells[k].0], GRID[cells[k].1], CELL_SHIFT],
            shape: attrs[k].0,
            color: attrs[k].1,
        })
        .collect();
    Scene { objects }
}

/// `10τ³ − 15τ⁴ + 6τ⁵`.
pub fn min_jerk(tau: f64) -> f64 {
    tau * tau * tau * (10.0 - 15.0 * tau + 6.0 * tau * tau)
}

fn taus(h: usize) -> impl Iterator<Item = f64> {
    (0..h).map(move |i| if h == 1 { 1.0 } else { i as f64 / (h - 1) as f64 })
}

/// Minimum-jerk path from [`HOME`] to the target plus the verb offset, with
/// a smooth per-axis perturbation vanishing at both ends.
pub fn gen_trajectory<R: Rng>(
    scene: &Scene,
    instruction: &Instruction,
    horizon: usize,
    noise_amp: f64,
    rng: &mut R,
) -> Result<Vec<[f64; 3]>> {
    let target = scene.objects[instruction.resolve(scene)?].pos;
    let off = instruction.verb.offset();
    let goal: [f64; 3] = std::array::from_fn(|a| target[a] + off[a]);
    let amp: [f64; 3] = std::array::from_fn(|_| noise_amp * rng.random_range(-1.0..=1.0));
    Ok(taus(horizon)
        .map(|tau| {
            let s = min_jerk(tau);
            let bump = (std::f64::consts::PI * tau).sin();
            std::array::from_fn(|a| HOME[a] + s * (goal[a] - HOME[a]) + amp[a] * bump)
        })
        .collect())
}

/// Closure of the hand at chunk fraction `tau`.
pub fn phase(verb: Verb, shape: usize, tau: f64) -> f64 {
    let onset = ONSET[verb.index()][shape];
    let u = ((tau - onset) / (1.0 - onset)).clamp(0.0, 1.0);
    verb.closure() * u * u * (3.0 - 2.0 * u)
}

fn joint_pose(j: usize, closed: bool) -> Quat {
    let finger = j / 3;
    let link = j % 3;
    let spread = (finger as f64 - 2.0) * 0.08;
    let angle = if closed {
        (55.0 + 12.0 * link as f64 + 4.0 * finger as f64).to_radians()
    } else {
        (5.0 + 2.0 * link as f64).to_radians()
    };
    quat::from_axis_angle([1.0, spread, 0.1 * link as f64], angle)
}

fn wrist_orientation(verb: Verb, tau: f64) -> Quat {
    quat::slerp(&quat::IDENTITY, &verb.wrist_end(), min_jerk(tau))
}

/// Hand sequence along `trajectory`: wrist follows the path, wrist
/// orientation turns toward a verb-specific pose, fingers close with [`phase`].
pub fn gen_hand(trajectory: &[[f64; 3]], verb: Verb, shape: usize) -> Result<HandState> {
    let h = trajectory.len();
    let mut frames = Vec::with_capacity(h * HAND_DIM);
    for (p, tau) in trajectory.iter().zip(taus(h)) {
        frames.extend_from_slice(p);
        frames.extend(quat::canonicalize(&wrist_orientation(verb, tau))?);
        let ph = phase(verb, shape, tau);
        for j in 0..JOINTS {
            let q = quat::slerp(&joint_pose(j, false), &joint_pose(j, true), ph);
            frames.extend(quat::canonicalize(&q)?);
        }
    }
    HandState::new(frames, vec![true; h])
}

/// Raw robot actions: position deltas, orientation deltas as rotation
/// vectors, and a squashed gripper command.
pub fn gen_actions(trajectory: &[[f64; 3]], verb: Verb, shape: usize) -> Result<ActionChunk> {
    let h = trajectory.len();
    let mut data = Vec::with_capacity(h * ACTION_DIM);
    let mut prev_p = HOME;
    let mut prev_q = wrist_orientation(verb, 0.0);
    for (p, tau) in trajectory.iter().zip(taus(h)) {
        let q = wrist_orientation(verb, tau);
        data.extend((0..3).map(|a| p[a] - prev_p[a]));
        data.extend(quat::log_map(&quat::mul(&q, &quat::conj(&prev_q)))?);
        data.push((2.0 * phase(verb, shape, tau)).tanh() / 2f64.tanh());
        prev_p = *p;
        prev_q = q;
    }
    ActionChunk::new(data, ACTION_DIM)
}

/// Per-dimension mean and floored standard deviation of raw chunks.
pub fn action_stats(chunks: &[&ActionChunk], floor: f64) -> (Vec<f64>, Vec<f64>) {
    let dim = chunks.first().map_or(ACTION_DIM, |c| c.dim);
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    let mut n = 0usize;
    for c in chunks {
        for row in c.data.chunks(dim) {
            for d in 0..dim {
                sum[d] += row[d];
                sq[d] += row[d] * row[d];
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(floor))
        .collect();
    (mean, std)
}

pub const STD_FLOOR: f64 = 1e-3;

pub fn normalize(chunk: &ActionChunk, mean: &[f64], std: &[f64]) -> Result<ActionChunk> {
    let d = chunk.dim;
    let data = chunk.data.iter().enumerate().map(|(i, v)| (v - mean[i % d]) / std[i % d]).collect();
    ActionChunk::new(data, d)
}

pub fn denormalize(chunk: &ActionChunk, mean: &[f64], std: &[f64]) -> Result<ActionChunk> {
    let d = chunk.dim;
    let data = chunk.data.iter().enumerate().map(|(i, v)| v * std[i % d] + mean[i % d]).collect();
    ActionChunk::new(data, d)
}

/// Raw generation output before normalization.
#[derive(Clone, Debug)]
pub struct RawEpisode {
    pub episode: Episode,
    pub raw_actions: Option<ActionChunk>,
}

fn instruction_for<R: Rng>(scene: &Scene, allow: impl Fn(Verb, usize) -> bool, rng: &mut R) -> Option<Instruction> {
    let mut options = Vec::new();
    for o in &scene.objects {
        for v in Verb::ALL {
            if allow(v, o.shape) {
                options.push(Instruction { verb: v, shape: o.shape, color: o.color });
            }
        }
    }
    options.choose(rng).copied()
}

fn truncate_clip<R: Rng>(hand: &mut HandState, rate: f64, rng: &mut R) {
    let h = hand.horizon();
    if h < 3 || rng.random::<f64>() >= rate {
        return;
    }
    let keep = rng.random_range(h.saturating_sub(4).max(2)..h);
    let last = hand.frame(keep - 1).to_vec();
    for i in keep..h {
        hand.valid[i] = false;
        hand.frames[i * HAND_DIM..(i + 1) * HAND_DIM].copy_from_slice(&last);
    }
}

/// Generate all splits. Each latent trajectory draws from its own stream,
/// so the result depends only on `(config, spec, seed)`.
pub fn gen_raw(cfg: &WorldConfig, spec: &SplitSpec, seed: u64) -> Result<Vec<RawEpisode>> {
    let h = cfg.horizon;
    let mut out = Vec::new();
    let mut seen_layouts = HashSet::new();
    let mut next_id = 0u64;
    let mut push = |out: &mut Vec<RawEpisode>,
                    latent: u64,
                    split: Split,
                    scene: &Scene,
                    ins: Instruction,
                    wp: &Vec<[f64; 3]>,
                    hand: Option<HandState>,
                    raw: Option<ActionChunk>| {
        out.push(RawEpisode {
            episode: Episode {
                id: next_id,
                latent,
                split,
                scene: scene.clone(),
                instruction: ins,
                waypoints: wp.clone(),
                hand,
                actions: None,
            },
            raw_actions: raw,
        });
        next_id += 1;
    };

    let mut latent = 0u64;
    for _ in 0..spec.train {
        let mut rng = crate::rng::stream(seed, crate::rng::DATA, latent);
        let scene = random_scene(&mut rng);
        let ins = instruction_for(&scene, |_, _| true, &mut rng).expect("scene has objects");
        let wp = gen_trajectory(&scene, &ins, h, cfg.noise_amp, &mut rng)?;
        seen_layouts.insert(scene.layout_key());
        let mut hand = gen_hand(&wp, ins.verb, ins.shape)?;
        truncate_clip(&mut hand, cfg.short_clip_rate, &mut rng);
        push(&mut out, latent, Split::Train, &scene, ins, &wp, Some(hand), None);
        if !is_held_out(ins.verb, ins.shape) {
            let act = gen_actions(&wp, ins.verb, ins.shape)?;
            push(&mut out, latent, Split::Train, &scene, ins, &wp, None, Some(act));
        }
        latent += 1;
    }

    for (split, count) in [
        (Split::HeldOutInstruction, spec.held_out_instruction),
        (Split::HeldOutLayout, spec.held_out_layout),
    ] {
        let mut made = 0;
        while made < count {
            let mut rng = crate::rng::stream(seed, crate::rng::DATA, latent);
            latent += 1;
            let scene = random_scene(&mut rng);
            if seen_layouts.contains(&scene.layout_key()) {
                continue;
            }
            let ins = match split {
                Split::HeldOutInstruction => instruction_for(&scene, is_held_out, &mut rng),
                _ => instruction_for(&scene, |v, s| !is_held_out(v, s), &mut rng),
            };
            let Some(ins) = ins else { continue };
            let wp = gen_trajectory(&scene, &ins, h, cfg.noise_amp, &mut rng)?;
            let hand = gen_hand(&wp, ins.verb, ins.shape)?;
            let act = gen_actions(&wp, ins.verb, ins.shape)?;
            push(&mut out, latent - 1, split, &scene, ins, &wp, Some(hand), Some(act));
            made += 1;
        }
    }
    Ok(out)
}
