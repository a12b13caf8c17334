//! Checkpoint file: `"MOTH"`, version, config digest, named parameter table,
//! optional optimizer and EMA sections, trailing CRC32.

use std::path::Path;

use moth_tensor::ParamStore;
use sha2::{Digest, Sha256};

use crate::bin::{self, Writer};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const MAGIC: &[u8; 4] = b"MOTH";
pub const VERSION: u32 = 1;

const HAS_OPTIMIZER: u8 = 1;
const HAS_EMA: u8 = 2;

/// SHA-256 of the model configuration's JSON rendering.
pub fn config_digest(cfg: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("model config serializes");
    Sha256::digest(&json).into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerSnapshot>,
    pub ema: Option<ParamStore<f32>>,
}

fn write_table(w: &mut Writer, p: &ParamStore<f32>) -> Result<()> {
    w.len_u32(p.len())?;
    for id in p.ids() {
        w.str(p.name(id))?;
        let shape = p.shape(id);
        w.len_u32(shape.len())?;
        for &d in shape {
            w.len_u32(d)?;
        }
        p.value(id).iter().for_each(|&v| w.f32(v));
    }
    Ok(())
}

fn read_table(r: &mut bin::Reader<'_>) -> Result<ParamStore<f32>> {
    let n = r.usize32()?;
    let mut p = ParamStore::new();
    for _ in 0..n {
        let name = r.str()?;
        let nd = r.usize32()?;
        let shape = (0..nd).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        p.insert(&name, &shape, data)?;
    }
    Ok(p)
}

fn write_values(w: &mut Writer, vals: &[Vec<f32>]) {
    for v in vals {
        v.iter().for_each(|&x| w.f32(x));
    }
}

fn read_values(r: &mut bin::Reader<'_>, like: &ParamStore<f32>) -> Result<Vec<Vec<f32>>> {
    like.ids()
        .map(|id| (0..like.value(id).len()).map(|_| r.f32()).collect())
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.bytes(&self.digest);
        write_table(&mut w, &self.params)?;
        let flags = self.optimizer.as_ref().map_or(0, |_| HAS_OPTIMIZER) | self.ema.as_ref().map_or(0, |_| HAS_EMA);
        w.u8(flags);
        if let Some(o) = &self.optimizer {
            w.u64(o.step);
            write_values(&mut w, &o.m);
            write_values(&mut w, &o.v);
        }
        if let Some(e) = &self.ema {
            let vals: Vec<Vec<f32>> = e.ids().map(|id| e.value(id).to_vec()).collect();
            write_values(&mut w, &vals);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = bin::open(bytes, MAGIC, VERSION)?;
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let params = read_table(&mut r)?;
        let flags = r.u8()?;
        let optimizer = if flags & HAS_OPTIMIZER != 0 {
            let step = r.u64()?;
            let m = read_values(&mut r, &params)?;
            let v = read_values(&mut r, &params)?;
            Some(OptimizerSnapshot { step, m, v })
        } else {
            None
        };
        let ema = if flags & HAS_EMA != 0 {
            let vals = read_values(&mut r, &params)?;
            let mut e = params.clone();
            for (id, v) in params.ids().zip(vals) {
                e.value_mut(id).copy_from_slice(&v);
            }
            Some(e)
        } else {
            None
        };
        if r.remaining() != 0 {
            return Err(Error::Data(format!("{} trailing bytes in checkpoint", r.remaining())));
        }
        Ok(Checkpoint { digest, params, optimizer, ema })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        if self.digest != config_digest(cfg) {
            return Err(Error::Config("checkpoint was written for a different model configuration".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ParamStore::new();
        p.insert("a", &[2, 2], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE]).unwrap();
        p.insert("b.c", &[3], vec![0.0, 1e-30, -7.0]).unwrap();
        let m = vec![vec![0.1; 4], vec![0.2; 3]];
        let v = vec![vec![0.3; 4], vec![0.4; 3]];
        let mut ema = p.clone();
        ema.value_mut(moth_tensor::ParamId(1))[0] = 9.0;
        Checkpoint {
            digest: config_digest(&ModelConfig::default()),
            params: p,
            optimizer: Some(OptimizerSnapshot { step: 42, m, v }),
            ema: Some(ema),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
        let bare = Checkpoint { optimizer: None, ema: None, ..c };
        assert_eq!(Checkpoint::from_bytes(&bare.to_bytes().unwrap()).unwrap(), bare);
    }

    #[test]
    fn digest_tracks_config() {
        let c = sample();
        assert!(c.check_config(&ModelConfig::default()).is_ok());
        let other = ModelConfig { depth: 2, ..ModelConfig::default() };
        assert!(c.check_config(&other).is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let mut b = sample().to_bytes().unwrap();
        b[50] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checksum { .. })));
    }
}
