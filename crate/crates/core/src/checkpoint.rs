//! Binary checkpoint container.
//!
//! Layout: 8 magic bytes, `u32` LE format version, `u64` LE metadata length,
//! JSON metadata, the parameter arrays followed by the Adam first and second
//! moments (all little-endian in declared dtype), then a SHA-256 of every
//! preceding byte so truncation or corruption is caught before any state is
//! built.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constraints::DomainPack;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, Normalizer};
use crate::scalar::Scalar;
use crate::trainer::{AdamState, TraceRow, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"FNOFLOW\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    dtype: String,
    t_len: usize,
    norm: Normalizer,
    train: TrainConfig,
    pack: DomainPack,
    dataset_hash: String,
    epoch: usize,
    adam_step: u64,
    arrays: Vec<ArrayMeta>,
    trace: Vec<TraceRow>,
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

pub fn encode<S: Scalar>(tr: &Trainer<S>) -> Result<Vec<u8>> {
    let meta = Meta {
        dtype: S::DTYPE.into(),
        t_len: tr.model.t_len,
        norm: tr.model.norm.clone(),
        train: tr.cfg.clone(),
        pack: tr.pack.clone(),
        dataset_hash: tr.dataset_hash.clone(),
        epoch: tr.epoch,
        adam_step: tr.opt.step,
        arrays: tr
            .model
            .store
            .iter()
            .map(|(name, t)| ArrayMeta {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        // Timing is not run state; dropping it keeps checkpoints reproducible.
        trace: tr.trace.iter().map(|r| TraceRow { wall_secs: 0.0, ..*r }).collect(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
    let mut out = Vec::with_capacity(json.len() + 3 * tr.model.store.num_scalars() * S::BYTES + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for group in [tr.model.store.values(), &tr.opt.m, &tr.opt.v] {
        for t in group {
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode<S: Scalar>(bytes: &[u8], path: &Path) -> Result<Trainer<S>> {
    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err(fmt_err(path, format!("file is truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(fmt_err(path, "not a checkpoint file (bad magic)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fmt_err(path, format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(fmt_err(path, "checksum mismatch: file is truncated or corrupted"));
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let meta_end = 20usize
        .checked_add(meta_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| fmt_err(path, "metadata length exceeds file size"))?;
    let meta: Meta = serde_json::from_slice(&body[20..meta_end]).map_err(|e| fmt_err(path, format!("metadata: {e}")))?;
    if meta.dtype != S::DTYPE {
        return Err(fmt_err(path, format!("checkpoint holds {} parameters, requested {}", meta.dtype, S::DTYPE)));
    }

    let mut model = Model::<S>::new(
        meta.train.model.clone(),
        meta.t_len,
        meta.norm.clone(),
        &mut crate::trainer::derived_rng(0, 0, 0),
    )?;
    if model.store.len() != meta.arrays.len() {
        return Err(fmt_err(
            path,
            format!("checkpoint has {} arrays, architecture expects {}", meta.arrays.len(), model.store.len()),
        ));
    }
    for ((name, t), a) in model.store.iter().zip(&meta.arrays) {
        if name != a.name || t.shape() != a.shape.as_slice() {
            return Err(fmt_err(
                path,
                format!("array {} {:?} does not match architecture slot {name} {:?}", a.name, a.shape, t.shape()),
            ));
        }
    }
    let scalars: usize = meta.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
    let data = &body[meta_end..];
    if data.len() != 3 * scalars * S::BYTES {
        return Err(fmt_err(
            path,
            format!("array section holds {} bytes, expected {}", data.len(), 3 * scalars * S::BYTES),
        ));
    }
    let mut offset = 0;
    let mut read_group = || -> Result<Vec<Tensor<S>>> {
        meta.arrays
            .iter()
            .map(|a| {
                let n: usize = a.shape.iter().product();
                let vals = (0..n).map(|i| S::read_le(&data[offset + i * S::BYTES..])).collect();
                offset += n * S::BYTES;
                Tensor::new(a.shape.clone(), vals)
            })
            .collect()
    };
    let params = read_group()?;
    let m = read_group()?;
    let v = read_group()?;
    model.store.replace_values(params)?;
    Ok(Trainer {
        model,
        opt: AdamState { step: meta.adam_step, m, v },
        cfg: meta.train,
        pack: meta.pack,
        dataset_hash: meta.dataset_hash,
        epoch: meta.epoch,
        trace: meta.trace,
    })
}

/// Writes through a temporary sibling file so a crash never leaves a partial checkpoint.
pub fn save_checkpoint<S: Scalar>(tr: &Trainer<S>, path: &Path) -> Result<()> {
    let bytes = encode(tr)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Trainer<S>> {
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}

/// Dtype recorded in a checkpoint header, for callers choosing a precision.
pub fn checkpoint_dtype(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fmt_err(path, "not a checkpoint file"));
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = (20 + meta_len).min(bytes.len());
    let meta: Meta = serde_json::from_slice(&bytes[20..end]).map_err(|e| fmt_err(path, format!("metadata: {e}")))?;
    Ok(meta.dtype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::OscillatorPack;
    use crate::datasets::{gen_oscillator, OscillatorSpec};
    use crate::model::ModelConfig;

    fn small() -> (crate::datasets::Dataset, TrainConfig) {
        let ds = gen_oscillator(&OscillatorSpec {
            n_trajectories: 6,
            t_len: 16,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 3,
            seed: 11,
            model: ModelConfig {
                d_h: 8,
                unet_width: 4,
                kernel: 3,
                time_dim: 8,
                fno_width: 4,
                head_hidden: 4,
            },
            ..Default::default()
        };
        (ds, cfg)
    }

    fn pack() -> DomainPack {
        DomainPack::Oscillator(OscillatorPack::default())
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let (ds, cfg) = small();
        let mut tr = Trainer::<f64>::new(&ds, pack(), cfg).unwrap();
        tr.run_epoch(&ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&tr, &p).unwrap();
        let back = load_checkpoint::<f64>(&p).unwrap();
        assert_eq!(back.model.store.values(), tr.model.store.values());
        assert_eq!(back.opt, tr.opt);
        assert_eq!(back.epoch, 1);
        assert!(back.trace.iter().zip(&tr.trace).all(|(a, b)| a.same_losses(b)));
        let x = tr.model.norm.encode_states::<f64>(&[&ds.trajectories[0]]).unwrap();
        let c = tr.model.norm.encode_conds::<f64>(&[&ds.conditions[0]]).unwrap();
        assert_eq!(
            back.model.velocity_eval(&x, 0.3, &c).unwrap(),
            tr.model.velocity_eval(&x, 0.3, &c).unwrap()
        );
        assert_eq!(back.model.bank_eval(&x, &c).unwrap(), tr.model.bank_eval(&x, &c).unwrap());
        assert_eq!(checkpoint_dtype(&p).unwrap(), "f64");
        assert!(load_checkpoint::<f32>(&p).unwrap_err().to_string().contains("f64"));
    }

    #[test]
    fn truncation_and_version_rejected() {
        let (ds, cfg) = small();
        let tr = Trainer::<f32>::new(&ds, pack(), cfg).unwrap();
        let bytes = encode(&tr).unwrap();
        let p = Path::new("mem");
        for cut in [0, 10, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode::<f32>(&bytes[..cut], p).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode::<f32>(&bad, p).unwrap_err().to_string().contains("version 9"));
        let mut flipped = bytes.clone();
        let mid = bytes.len() - 100;
        flipped[mid] ^= 1;
        assert!(decode::<f32>(&flipped, p).unwrap_err().to_string().contains("checksum"));
        assert!(decode::<f32>(&bytes, p).is_ok());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (ds, cfg) = small();
        let mut full = Trainer::<f64>::new(&ds, pack(), cfg.clone()).unwrap();
        for _ in 0..3 {
            full.run_epoch(&ds).unwrap();
        }
        let mut part = Trainer::<f64>::new(&ds, pack(), cfg).unwrap();
        part.run_epoch(&ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mid.ckpt");
        save_checkpoint(&part, &p).unwrap();
        let mut resumed = load_checkpoint::<f64>(&p).unwrap();
        for _ in 0..2 {
            resumed.run_epoch(&ds).unwrap();
        }
        assert_eq!(resumed.trace.len(), 3);
        for (a, b) in resumed.trace.iter().zip(&full.trace) {
            assert!(a.same_losses(b), "{a:?} vs {b:?}");
        }
        assert_eq!(resumed.model.store.values(), full.model.store.values());
    }
}
