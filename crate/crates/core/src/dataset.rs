//! Episode dataset and its binary file format.
//!
//! Layout: `"MOTD"`, version, header, length-prefixed episode records, an
//! offset index (one `u64` per record, then the index start), and a CRC32 of
//! everything before it. Integers and floats are little-endian.

use std::path::Path;

use crate::bin::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::fine::ActionChunk;
use crate::intention::HandState;
use crate::model::{ModelConfig, ObjectToken, HAND_DIM};
use crate::synth::{self, Episode, Instruction, Object, Scene, Split, SplitSpec, Verb, WorldConfig};
use crate::waypoint::WaypointPlan;

pub const MAGIC: &[u8; 4] = b"MOTD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub horizon: usize,
    pub bins: usize,
    pub coord_range: [[f64; 2]; 3],
    pub action_dim: usize,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
    pub n_img: usize,
    pub n_txt: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

/// Model-facing inputs of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeInputs {
    pub objects: Vec<ObjectToken>,
    pub text: Vec<usize>,
    pub plan: WaypointPlan,
}

impl Dataset {
    /// Generate every split and normalize actions with statistics from the
    /// robot episodes of the training split.
    pub fn generate(world: &WorldConfig, spec: &SplitSpec, model: &ModelConfig, seed: u64) -> Result<Dataset> {
        if world.horizon != model.horizon {
            return Err(Error::Config(format!(
                "world horizon {} differs from model horizon {}",
                world.horizon, model.horizon
            )));
        }
        let raw = synth::gen_raw(world, spec, seed)?;
        let train: Vec<&ActionChunk> = raw
            .iter()
            .filter(|r| r.episode.split == Split::Train)
            .filter_map(|r| r.raw_actions.as_ref())
            .collect();
        let (mean, std) = synth::action_stats(&train, synth::STD_FLOOR);
        let episodes = raw
            .into_iter()
            .map(|r| {
                let mut e = r.episode;
                if let Some(a) = &r.raw_actions {
                    e.actions = Some(synth::normalize(a, &mean, &std)?);
                }
                Ok(e)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            header: DatasetHeader {
                horizon: model.horizon,
                bins: model.bins,
                coord_range: model.coord_range,
                action_dim: synth::ACTION_DIM,
                action_mean: mean,
                action_std: std,
                n_img: model.n_img,
                n_txt: model.n_txt,
            },
            episodes,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().filter(move |e| e.split == split)
    }

    /// Reject a model whose sequence geometry differs from this dataset.
    pub fn check_model(&self, m: &ModelConfig) -> Result<()> {
        let h = &self.header;
        if h.horizon != m.horizon
            || h.bins != m.bins
            || h.coord_range != m.coord_range
            || h.action_dim != m.action_dim
            || h.n_img != m.n_img
            || h.n_txt != m.n_txt
        {
            return Err(Error::Config("dataset header does not match the model configuration".into()));
        }
        Ok(())
    }

    pub fn inputs(&self, e: &Episode) -> Result<EpisodeInputs> {
        let h = &self.header;
        Ok(EpisodeInputs {
            objects: e.scene.tokens(h.n_img, h.bins, h.coord_range)?,
            text: e.instruction.tokens(h.n_txt)?,
            plan: WaypointPlan::from_positions(&e.waypoints, h.bins, h.coord_range)?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        write_header(&mut w, &self.header, self.episodes.len())?;
        let mut offsets = Vec::with_capacity(self.episodes.len());
        for e in &self.episodes {
            offsets.push(w.buf.len() as u64);
            let mut rec = Writer::default();
            write_episode(&mut rec, e, self.header.action_dim)?;
            w.len_u32(rec.buf.len())?;
            w.bytes(&rec.buf);
        }
        let index_start = w.buf.len() as u64;
        for o in offsets {
            w.u64(o);
        }
        w.u64(index_start);
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = bin::open(bytes, MAGIC, VERSION)?;
        let (header, count) = read_header(&mut r)?;
        let mut episodes = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.usize32()?;
            let rec = r.take(n)?;
            episodes.push(read_episode(&mut Reader::new(rec), header.horizon)?);
        }
        Ok(Dataset { header, episodes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_bytes(&std::fs::read(path)?)
    }
}

/// Random access to the records of a dataset file through its offset index.
pub struct DatasetIndex<'a> {
    pub header: DatasetHeader,
    body: &'a [u8],
    offsets: Vec<u64>,
}

impl<'a> DatasetIndex<'a> {
    pub fn open(bytes: &'a [u8]) -> Result<Self> {
        let mut r = bin::open(bytes, MAGIC, VERSION)?;
        let (header, count) = read_header(&mut r)?;
        let body = &bytes[..bytes.len() - 4];
        if body.len() < 8 {
            return Err(Error::Data("missing index footer".into()));
        }
        let start = Reader::at(body, body.len() - 8).u64()? as usize;
        let mut ir = Reader::at(body, start);
        let offsets = (0..count).map(|_| ir.u64()).collect::<Result<Vec<_>>>()?;
        Ok(DatasetIndex { header, body, offsets })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn episode(&self, i: usize) -> Result<Episode> {
        let off = *self.offsets.get(i).ok_or_else(|| Error::Data(format!("record {i} out of range")))?;
        let mut r = Reader::at(self.body, off as usize);
        let n = r.usize32()?;
        read_episode(&mut Reader::new(r.take(n)?), self.header.horizon)
    }
}

fn write_header(w: &mut Writer, h: &DatasetHeader, count: usize) -> Result<()> {
    w.len_u32(h.horizon)?;
    w.len_u32(h.bins)?;
    for [lo, hi] in h.coord_range {
        w.f64(lo);
        w.f64(hi);
    }
    w.len_u32(h.action_dim)?;
    for v in h.action_mean.iter().chain(&h.action_std) {
        w.f64(*v);
    }
    w.len_u32(h.n_img)?;
    w.len_u32(h.n_txt)?;
    w.u64(count as u64);
    Ok(())
}

fn read_header(r: &mut Reader<'_>) -> Result<(DatasetHeader, usize)> {
    let horizon = r.usize32()?;
    let bins = r.usize32()?;
    let mut coord_range = [[0.0; 2]; 3];
    for c in &mut coord_range {
        *c = [r.f64()?, r.f64()?];
    }
    let action_dim = r.usize32()?;
    let action_mean = (0..action_dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let action_std = (0..action_dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let n_img = r.usize32()?;
    let n_txt = r.usize32()?;
    let count = r.u64()? as usize;
    Ok((DatasetHeader { horizon, bins, coord_range, action_dim, action_mean, action_std, n_img, n_txt }, count))
}

const HAS_HAND: u8 = 1;
const HAS_ACTIONS: u8 = 2;

fn small(v: usize) -> Result<u8> {
    u8::try_from(v).map_err(|_| Error::Data(format!("value {v} does not fit a byte")))
}

fn write_episode(w: &mut Writer, e: &Episode, action_dim: usize) -> Result<()> {
    w.u64(e.id);
    w.u64(e.latent);
    w.u8(e.split.index());
    w.u8(small(e.scene.objects.len())?);
    for o in &e.scene.objects {
        o.pos.iter().for_each(|&v| w.f64(v));
        w.u8(small(o.shape)?);
        w.u8(small(o.color)?);
    }
    w.u8(small(e.instruction.verb.index())?);
    w.u8(small(e.instruction.shape)?);
    w.u8(small(e.instruction.color)?);
    w.len_u32(e.waypoints.len())?;
    for p in &e.waypoints {
        p.iter().for_each(|&v| w.f64(v));
    }
    let flags = e.hand.as_ref().map_or(0, |_| HAS_HAND) | e.actions.as_ref().map_or(0, |_| HAS_ACTIONS);
    w.u8(flags);
    if let Some(h) = &e.hand {
        h.frames.iter().for_each(|&v| w.f64(v));
        h.valid.iter().for_each(|&v| w.u8(v as u8));
    }
    if let Some(a) = &e.actions {
        if a.dim != action_dim {
            return Err(Error::Data(format!("episode {} has action width {}", e.id, a.dim)));
        }
        a.data.iter().for_each(|&v| w.f64(v));
    }
    Ok(())
}

fn read_episode(r: &mut Reader<'_>, horizon: usize) -> Result<Episode> {
    let id = r.u64()?;
    let latent = r.u64()?;
    let split = Split::from_index(r.u8()?)?;
    let n_obj = r.u8()? as usize;
    let mut objects = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let pos = [r.f64()?, r.f64()?, r.f64()?];
        let shape = r.u8()? as usize;
        let color = r.u8()? as usize;
        if shape >= synth::SHAPES || color >= synth::COLORS {
            return Err(Error::Data(format!("episode {id}: object attributes out of range")));
        }
        objects.push(Object { pos, shape, color });
    }
    let verb = Verb::from_index(r.u8()? as usize)?;
    let instruction = Instruction { verb, shape: r.u8()? as usize, color: r.u8()? as usize };
    let n = r.usize32()?;
    if n != horizon {
        return Err(Error::Data(format!("episode {id} has {n} waypoints, header says {horizon}")));
    }
    let waypoints = (0..n).map(|_| Ok([r.f64()?, r.f64()?, r.f64()?])).collect::<Result<Vec<_>>>()?;
    let flags = r.u8()?;
    let hand = if flags & HAS_HAND != 0 {
        let frames = (0..n * HAND_DIM).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let valid = (0..n).map(|_| Ok(r.u8()? != 0)).collect::<Result<Vec<_>>>()?;
        Some(HandState::new(frames, valid)?)
    } else {
        None
    };
    let actions = if flags & HAS_ACTIONS != 0 {
        let data = (0..n * synth::ACTION_DIM).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Some(ActionChunk::new(data, synth::ACTION_DIM)?)
    } else {
        None
    };
    if r.remaining() != 0 {
        return Err(Error::Data(format!("episode {id} record has {} trailing bytes", r.remaining())));
    }
    Ok(Episode { id, latent, split, scene: Scene { objects }, instruction, waypoints, hand, actions })
}
