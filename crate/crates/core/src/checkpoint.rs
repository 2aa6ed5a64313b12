//! Binary checkpoints: a JSON manifest followed by every parameter and its
//! optimizer moments, little-endian `f64`.
//!
//! ```text
//! "MIDETR1" | u64 manifest_len | manifest JSON | u64 n_params |
//!   per parameter: u32 name_len | name | u32 ndim | u64 dims.. | u64 step |
//!                  f64 values.. | f64 m.. | f64 v..
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MiDetr, ModelConfig};
use crate::synth::{SceneConfig, TrainConfig};

pub const MAGIC: &[u8; 7] = b"MIDETR1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    /// Optimizer steps already taken.
    pub steps_done: usize,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(w.write_all(&buf)?)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Sanity bound on lengths read from disk.
fn bounded(v: u64, max: u64, what: &str) -> Result<usize> {
    if v > max {
        return Err(Error::Checkpoint(format!("{what} {v} exceeds {max}")));
    }
    Ok(v as usize)
}

pub fn write_checkpoint(w: &mut impl Write, model: &MiDetr, manifest: &Manifest) -> Result<()> {
    w.write_all(MAGIC)?;
    let json = serde_json::to_vec(manifest)?;
    put_u64(w, json.len() as u64)?;
    w.write_all(&json)?;
    put_u64(w, model.store.len() as u64)?;
    for p in model.store.params() {
        put_u32(w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        put_u32(w, p.tensor.shape().len() as u32)?;
        for &d in p.tensor.shape() {
            put_u64(w, d as u64)?;
        }
        put_u64(w, p.step)?;
        put_f64s(w, &p.tensor.data())?;
        put_f64s(w, &p.m)?;
        put_f64s(w, &p.v)?;
    }
    Ok(())
}

/// Rebuilds the model described by the manifest and restores every
/// parameter and optimizer moment.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(MiDetr, Manifest)> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let len = bounded(get_u64(r)?, 1 << 24, "manifest length")?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    let mut model = MiDetr::new(&manifest.model, manifest.train.seed)?;
    let n = bounded(get_u64(r)?, 1 << 20, "parameter count")?;
    if n != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {n} parameters, model has {}",
            model.store.len()
        )));
    }
    for _ in 0..n {
        let name_len = get_u32(r)? as usize;
        let mut name = vec![0u8; name_len.min(4096)];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = get_u32(r)? as usize;
        let shape = (0..ndim.min(8))
            .map(|_| get_u64(r).and_then(|d| bounded(d, 1 << 32, "dimension")))
            .collect::<Result<Vec<_>>>()?;
        let step = get_u64(r)?;
        let p = model
            .store
            .get_mut(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if p.tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {shape:?}, expected {:?}",
                p.tensor.shape()
            )));
        }
        let numel = p.numel();
        let values = get_f64s(r, numel)?;
        p.tensor.update_data(|d| d.copy_from_slice(&values));
        p.m = get_f64s(r, numel)?;
        p.v = get_f64s(r, numel)?;
        p.step = step;
    }
    Ok((model, manifest))
}

pub fn save(path: &Path, model: &MiDetr, manifest: &Manifest) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, model, manifest)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(MiDetr, Manifest)> {
    read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::train::{train, train_from, TrainTrace};

    fn tiny() -> (ModelConfig, SceneConfig, TrainConfig) {
        let model = ModelConfig {
            image_size: 8,
            patch: 4,
            dim: 8,
            attn_heads: 2,
            ffn_dim: 16,
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            n_queries: 4,
            ..ModelConfig::default()
        };
        let scene = SceneConfig {
            image_size: 8,
            max_objects: 2,
            min_side: 0.25,
            max_side: 0.5,
            ..SceneConfig::default()
        };
        let train = TrainConfig {
            steps: 4,
            batch: 2,
            ..TrainConfig::default()
        };
        (model, scene, train)
    }

    #[test]
    fn round_trip_restores_everything() {
        let (mc, sc, tc) = tiny();
        let mut m = MiDetr::new(&mc, 0).unwrap();
        train(&mut m, &tc, &sc).unwrap();
        let manifest = Manifest {
            model: mc,
            scene: sc,
            train: tc,
            steps_done: 4,
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, &manifest).unwrap();
        let (back, man) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(man, manifest);
        for (a, b) in m.store.params().iter().zip(back.store.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.to_vec(), b.tensor.to_vec());
            assert_eq!((&a.m, &a.v, a.step), (&b.m, &b.v, b.step));
        }
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let (mc, sc, tc) = tiny();
        let mut full = MiDetr::new(&mc, 0).unwrap();
        let full_trace = train(&mut full, &tc, &sc).unwrap();

        let mut half = MiDetr::new(&mc, 0).unwrap();
        let mut trace = TrainTrace::default();
        let first = TrainConfig { steps: 2, ..tc };
        train_from(&mut half, &first, &sc, 0, &mut trace, None).unwrap();
        let mut buf = Vec::new();
        let manifest = Manifest {
            model: mc,
            scene: sc,
            train: tc,
            steps_done: 2,
        };
        write_checkpoint(&mut buf, &half, &manifest).unwrap();
        let (mut resumed, man) = read_checkpoint(&mut buf.as_slice()).unwrap();
        train_from(&mut resumed, &tc, &sc, man.steps_done, &mut trace, None).unwrap();
        let a: Vec<f64> = full_trace.steps.iter().map(|r| r.loss).collect();
        let b: Vec<f64> = trace.steps.iter().map(|r| r.loss).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        assert!(read_checkpoint(&mut &b"NOTACKPT"[..]).is_err());
        let (mc, sc, tc) = tiny();
        let m = MiDetr::new(&mc, 0).unwrap();
        let mut buf = Vec::new();
        let manifest = Manifest {
            model: mc,
            scene: sc,
            train: tc,
            steps_done: 0,
        };
        write_checkpoint(&mut buf, &m, &manifest).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
