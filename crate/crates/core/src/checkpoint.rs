//! Binary checkpoint of a [`Learner`].
//!
//! Layout, little-endian:
//!
//! ```text
//! magic      8 bytes  "WSSLCKPT"
//! version    u32      currently 1
//! dtype      u8       1 = f32, 2 = f64 parameters
//! meta_len   u64
//! meta       JSON     caller metadata plus encoder spec, input norm, optimizer config, step
//! n_params   u64
//! query      n_params values of dtype
//! key        n_params values of dtype
//! velocity   n_params values of dtype
//! queue      capacity u64, dim u64, write_ptr u64, len u64, capacity·dim f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::contrastive::{FeatureQueue, Learner};
use crate::encoder::{EncoderSpec, EncoderState, InputNorm};
use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::optim::{Sgd, SgdConfig};

pub const MAGIC: &[u8; 8] = b"WSSLCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: EncoderSpec,
    norm: InputNorm,
    sgd: SgdConfig,
    steps: u64,
    extra: serde_json::Value,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn write_values<T: Scalar, W: Write>(w: &mut W, values: &[T]) -> std::io::Result<()> {
    for &v in values {
        if T::DTYPE == 1 {
            w.write_f32::<LE>(v.f64() as f32)?;
        } else {
            w.write_f64::<LE>(v.f64())?;
        }
    }
    Ok(())
}

fn read_values<T: Scalar, R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<T>> {
    (0..n)
        .map(|_| {
            Ok(if T::DTYPE == 1 {
                T::of(f64::from(r.read_f32::<LE>()?))
            } else {
                T::of(r.read_f64::<LE>()?)
            })
        })
        .collect()
}

/// Write `learner` with caller metadata `extra`.
pub fn save<T: Scalar>(path: &Path, learner: &Learner<T>, extra: &serde_json::Value) -> Result<()> {
    let header = Header {
        spec: learner.state.encoder.spec().clone(),
        norm: learner.norm,
        sgd: learner.opt.config,
        steps: learner.steps,
        extra: extra.clone(),
    };
    let meta = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("bin.tmp");
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        w.write_u8(T::DTYPE)?;
        w.write_u64::<LE>(meta.len() as u64)?;
        w.write_all(&meta)?;
        w.write_u64::<LE>(learner.state.query.len() as u64)?;
        write_values(&mut w, &learner.state.query)?;
        write_values(&mut w, &learner.state.key)?;
        write_values(&mut w, &learner.opt.velocity)?;
        let q = &learner.queue;
        for v in [q.capacity(), q.dim(), q.write_ptr(), q.len()] {
            w.write_u64::<LE>(v as u64)?;
        }
        for &v in q.storage() {
            w.write_f64::<LE>(v)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Read a checkpoint written by [`save`]; returns the learner and the caller metadata.
pub fn load<T: Scalar>(path: &Path) -> Result<(Learner<T>, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let io = |e: std::io::Error| bad(path, format!("truncated or unreadable: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad(path, "not a checkpoint (bad magic)"));
    }
    let version = r.read_u32::<LE>().map_err(io)?;
    if version != VERSION {
        return Err(bad(path, format!("unsupported version {version}, expected {VERSION}")));
    }
    let dtype = r.read_u8().map_err(io)?;
    if dtype != T::DTYPE {
        return Err(bad(path, format!("parameter dtype tag {dtype}, expected {}", T::DTYPE)));
    }
    let meta_len = r.read_u64::<LE>().map_err(io)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta).map_err(io)?;
    let header: Header = serde_json::from_slice(&meta).map_err(|e| bad(path, format!("metadata: {e}")))?;
    let n = r.read_u64::<LE>().map_err(io)? as usize;
    let query = read_values::<T, _>(&mut r, n).map_err(io)?;
    let key = read_values::<T, _>(&mut r, n).map_err(io)?;
    let velocity = read_values::<T, _>(&mut r, n).map_err(io)?;
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = r.read_u64::<LE>().map_err(io)? as usize;
    }
    let [cap, dim, ptr, len] = dims;
    let data = (0..cap * dim).map(|_| r.read_f64::<LE>()).collect::<std::io::Result<Vec<f64>>>().map_err(io)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(bad(path, format!("{} trailing bytes", rest.len())));
    }
    let storage = Array2::from_shape_vec((cap, dim), data).map_err(|e| bad(path, e.to_string()))?;
    let queue = FeatureQueue::from_parts(storage, ptr, len).map_err(|e| bad(path, e.to_string()))?;
    let state = EncoderState::from_params(header.spec, query, key).map_err(|e| bad(path, e.to_string()))?;
    let opt = Sgd {
        config: header.sgd,
        velocity,
    };
    let mut learner = Learner::new(state, queue, opt, header.norm);
    learner.steps = header.steps;
    Ok((learner, header.extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{toy_learner, unit_rows};

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt_3.bin");
        let mut learner = toy_learner(3, 5, 4, 6, 1);
        learner.queue.push(unit_rows(4, 4, 2).view()).unwrap();
        learner.opt.velocity[3] = 0.25;
        learner.state.key[0] = -1.5;
        learner.steps = 3;
        let extra = serde_json::json!({"epoch": 1});
        save(&path, &learner, &extra).unwrap();
        let (back, meta) = load::<f64>(&path).unwrap();
        assert_eq!(meta, extra);
        assert_eq!(back.state.query, learner.state.query);
        assert_eq!(back.state.key, learner.state.key);
        assert_eq!(back.opt, learner.opt);
        assert_eq!(back.queue, learner.queue);
        assert_eq!(back.steps, 3);
        assert!(load::<f32>(&path).is_err());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        let err = load::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}
