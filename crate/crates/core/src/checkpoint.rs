//! Binary checkpoint files.
//!
//! Layout: the magic `RHMCKPT\0`, a little-endian `u32` format version, a
//! `u64` byte length and a JSON header, then named tensors. Each tensor is a
//! `u32` name length, the UTF-8 name, a `u32` rank, `u64` dimensions and the
//! row-major data as little-endian `f32`. Optimizer moments follow the
//! parameters under the prefixes `adam.m.` and `adam.v.`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters, Tensor};
use crate::optim::OptimState;
use crate::rng::RngState;

pub const MAGIC: &[u8; 8] = b"RHMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub step: u64,
    pub model: ModelConfig,
    /// Grammar vocabulary size the token layout is built on.
    pub v: usize,
    /// Named random streams at the moment of saving.
    pub rng: BTreeMap<String, RngState>,
    /// Optimizer update count; 0 when moments are absent.
    pub optimizer_t: u64,
    /// Free-form run description (the effective run config).
    #[serde(default)]
    pub run: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Parameters<f32>,
    pub optim: Option<OptimState<f32>>,
}

fn write_tensor<W: Write>(out: &mut W, name: &str, t: &Tensor<f32>) -> Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &d in &t.shape {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for x in &t.data {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor<f32>)> {
    let name_len = read_u32(r)? as usize;
    if name_len > 4096 {
        return Err(Error::Format(format!("tensor name of {name_len} bytes")));
    }
    let mut name = vec![0; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("tensor {name} has rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u64(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((name, Tensor { shape, data }))
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for (name, _, t) in self.params.tensors() {
            write_tensor(&mut out, &name, t)?;
        }
        if let Some(opt) = &self.optim {
            for (prefix, moments) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
                for (name, _, t) in moments.tensors() {
                    write_tensor(&mut out, &format!("{prefix}{name}"), t)?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u64(&mut r)? as usize;
        let mut header = vec![0; len];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header).map_err(|e| Error::Format(e.to_string()))?;
        header.model.validate()?;

        let mut tensors = BTreeMap::new();
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let mut cursor = rest.as_slice();
        while !cursor.is_empty() {
            let (name, t) = read_tensor(&mut cursor)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }

        let params = fill(Parameters::zeros(&header.model), "", &mut tensors)?;
        let optim = if tensors.keys().any(|k| k.starts_with("adam.")) {
            let m = fill(params.zeros_like(), "adam.m.", &mut tensors)?;
            let v = fill(params.zeros_like(), "adam.v.", &mut tensors)?;
            Some(OptimState {
                m,
                v,
                t: header.optimizer_t,
            })
        } else {
            None
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint { header, params, optim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        self.write_to(BufWriter::new(File::create(&tmp)?))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::read_from(BufReader::new(file))
    }
}

fn fill(
    mut params: Parameters<f32>,
    prefix: &str,
    tensors: &mut BTreeMap<String, Tensor<f32>>,
) -> Result<Parameters<f32>> {
    for (name, _, slot) in params.tensors_mut() {
        let key = format!("{prefix}{name}");
        let t = tensors
            .remove(&key)
            .ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
        if t.shape != slot.shape {
            return Err(Error::Format(format!(
                "tensor {key} has shape {:?}, expected {:?}",
                t.shape, slot.shape
            )));
        }
        *slot = t;
    }
    Ok(params)
}

/// `dir/ckpt_<step>.bin` with the step zero-padded to 9 digits.
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:09}.bin"))
}

/// Steps of every checkpoint in `dir`, ascending.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<u64>> {
    let mut steps = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(step) = name
            .strip_prefix("ckpt_")
            .and_then(|r| r.strip_suffix(".bin"))
            .and_then(|n| n.parse().ok())
        {
            steps.push(step);
        }
    }
    steps.sort_unstable();
    Ok(steps)
}

/// Steps at which a run of `total_steps` saves: 0, every positive multiple of
/// `every` below the end, and the final step.
pub fn checkpoint_steps(total_steps: u64, every: u64) -> Vec<u64> {
    let mut steps = vec![0];
    if every > 0 {
        steps.extend((1..).map(|k| k * every).take_while(|&s| s < total_steps));
    }
    if total_steps > 0 {
        steps.push(total_steps);
    }
    steps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::rng::{stream, Stream};
    use crate::task::Mode;

    fn sample() -> Checkpoint {
        let mut cfg = ModelConfig::new(10, Mode::Masked);
        cfg.depth = 2;
        cfg.d_embed = 16;
        let params: Parameters<f32> = init_params(&cfg, &mut stream(3, Stream::Init)).unwrap();
        let mut optim = OptimState::new(&params);
        optim.m.embed.data[3] = 0.25;
        optim.v.ln_f.data[1] = 7.0;
        optim.t = 12;
        let mut rng = BTreeMap::new();
        rng.insert("batch".to_string(), RngState::capture(&stream(3, Stream::Batch)));
        Checkpoint {
            header: CheckpointHeader {
                step: 12,
                model: cfg,
                v: 8,
                rng,
                optimizer_t: 12,
                run: serde_json::json!({"note": "x"}),
            },
            params,
            optim: Some(optim),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn without_moments() {
        let mut ck = sample();
        ck.optim = None;
        ck.header.optimizer_t = 0;
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(Checkpoint::read_from(buf.as_slice()).unwrap(), ck);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(bad.as_slice()), Err(Error::Format(_))));
        let truncated = &buf[..buf.len() - 3];
        assert!(Checkpoint::read_from(truncated).is_err());
        let missing = Checkpoint::load(Path::new("/nonexistent/ckpt_000000001.bin"));
        assert!(matches!(missing, Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn cadence() {
        assert_eq!(checkpoint_steps(10, 3), vec![0, 3, 6, 9, 10]);
        assert_eq!(checkpoint_steps(9, 3), vec![0, 3, 6, 9]);
        assert_eq!(checkpoint_steps(5, 0), vec![0, 5]);
    }
}
