//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "SLMCKPT1"
//! format version   u32
//! config digest    32 bytes (SHA-256 of the config text)
//! config text      u32 length + UTF-8 bytes
//! master seed      u64
//! rounds completed u64
//! adam step        u64
//! array count      u32
//! per array:       name (u32 length + UTF-8), rank u32, dims u64 × rank,
//!                  element count u64, f32 data
//! ```
//!
//! Arrays carry the trainable parameters (`param:`), their Adam moments
//! (`adam_m:` / `adam_v:`), and batch-norm running statistics
//! (`bn_mean:` / `bn_var:`), all shape-tagged. Random streams are derived
//! from `(master seed, stream, counter)` throughout the pipeline, so the
//! master seed plus the round counter *is* the rng state: resuming from a
//! checkpoint replays exactly the generators an uninterrupted run would
//! use.
//!
//! A version number other than [`CHECKPOINT_VERSION`] is refused outright
//! rather than migrated; a digest mismatch against the embedded config
//! text means corruption and is also refused.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::params::ParameterSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SLMCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// SHA-256 of a canonical config text.
pub fn config_digest(text: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hasher.finalize().into()
}

/// Everything needed to resume or evaluate a training run.
#[derive(Clone)]
pub struct Checkpoint {
    /// Canonical text dump of the full run configuration.
    pub config_text: String,
    pub master_seed: u64,
    /// Boosting rounds completed so far.
    pub rounds_completed: u64,
    /// Parameters, Adam moments and step counter, batch-norm statistics.
    pub params: ParameterSet<f32>,
}

impl std::fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Checkpoint")
            .field("master_seed", &self.master_seed)
            .field("rounds_completed", &self.rounds_completed)
            .field("parameters", &self.params.len())
            .field("adam_step", &self.params.step_count())
            .finish()
    }
}

fn w_u32(out: &mut dyn Write, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_u64(out: &mut dyn Write, v: u64) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_str(out: &mut dyn Write, s: &str) -> Result<()> {
    w_u32(out, s.len() as u32)?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn w_array(out: &mut dyn Write, name: &str, dims: &[usize], data: &[f32]) -> Result<()> {
    let numel: usize = dims.iter().product();
    if numel != data.len() {
        return Err(Error::Shape(format!(
            "array {name:?}: {} elements but dims {dims:?}",
            data.len()
        )));
    }
    w_str(out, name)?;
    w_u32(out, dims.len() as u32)?;
    for &d in dims {
        w_u64(out, d as u64)?;
    }
    w_u64(out, data.len() as u64)?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

fn r_u32(input: &mut dyn Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64(input: &mut dyn Read) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Upper bound applied to every length field before allocating.
const SANE_LEN: u64 = 1 << 32;

fn r_str(input: &mut dyn Read) -> Result<String> {
    let len = r_u32(input)? as u64;
    if len > SANE_LEN {
        return Err(Error::Data(format!("checkpoint string length {len} is implausible")));
    }
    let mut buf = vec![0u8; len as usize];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Data(format!("checkpoint string is not UTF-8: {e}")))
}

struct RawArray {
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn r_array(input: &mut dyn Read) -> Result<(String, RawArray)> {
    let name = r_str(input)?;
    let rank = r_u32(input)?;
    if rank > 8 {
        return Err(Error::Data(format!("array {name:?} has implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        dims.push(r_u64(input)? as usize);
    }
    let count = r_u64(input)?;
    if count > SANE_LEN {
        return Err(Error::Data(format!("array {name:?} length {count} is implausible")));
    }
    if count as usize != dims.iter().product::<usize>() {
        return Err(Error::Data(format!(
            "array {name:?}: {count} elements but dims {dims:?}"
        )));
    }
    let mut bytes = vec![0u8; count as usize * 4];
    input.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((name, RawArray { dims, data }))
}

impl Checkpoint {
    /// Writes the checkpoint to `path` (atomically via a sibling temp
    /// file, so an interrupted save never clobbers a good checkpoint).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let file = std::fs::File::create(&tmp)?;
            let mut out = BufWriter::new(file);
            self.write_to(&mut out)?;
            out.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn write_to(&self, out: &mut dyn Write) -> Result<()> {
        out.write_all(&CHECKPOINT_MAGIC)?;
        w_u32(out, CHECKPOINT_VERSION)?;
        out.write_all(&config_digest(&self.config_text))?;
        w_str(out, &self.config_text)?;
        w_u64(out, self.master_seed)?;
        w_u64(out, self.rounds_completed)?;
        w_u64(out, self.params.step_count())?;

        let param_arrays = 3 * self.params.len();
        let bn_arrays = 2 * self.params.iter_bn().count();
        w_u32(out, (param_arrays + bn_arrays) as u32)?;
        for (name, p) in self.params.iter() {
            let dims = p.value.shape();
            let (m, v) = p.moments();
            w_array(out, &format!("param:{name}"), dims, p.value.data())?;
            w_array(out, &format!("adam_m:{name}"), dims, m)?;
            w_array(out, &format!("adam_v:{name}"), dims, v)?;
        }
        for (name, state) in self.params.iter_bn() {
            w_array(out, &format!("bn_mean:{name}"), &[state.mean.len()], &state.mean)?;
            w_array(out, &format!("bn_var:{name}"), &[state.var.len()], &state.var)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn read_from(input: &mut dyn Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = r_u32(input)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format version {version} is not supported (this build reads \
                 version {CHECKPOINT_VERSION}); refusing to guess"
            )));
        }
        let mut digest = [0u8; 32];
        input.read_exact(&mut digest)?;
        let config_text = r_str(input)?;
        if config_digest(&config_text) != digest {
            return Err(Error::Data(
                "checkpoint config digest mismatch: file is corrupt".into(),
            ));
        }
        let master_seed = r_u64(input)?;
        let rounds_completed = r_u64(input)?;
        let adam_step = r_u64(input)?;
        let array_count = r_u32(input)?;

        let mut arrays: BTreeMap<String, RawArray> = BTreeMap::new();
        for _ in 0..array_count {
            let (name, arr) = r_array(input)?;
            if arrays.insert(name.clone(), arr).is_some() {
                return Err(Error::Data(format!("duplicate checkpoint array {name:?}")));
            }
        }

        let mut params = ParameterSet::<f32>::new();
        let names: Vec<String> = arrays
            .keys()
            .filter_map(|k| k.strip_prefix("param:").map(str::to_string))
            .collect();
        for name in &names {
            let value = arrays.remove(&format!("param:{name}")).unwrap();
            let take = |arrays: &mut BTreeMap<String, RawArray>, prefix: &str| -> Result<RawArray> {
                arrays
                    .remove(&format!("{prefix}:{name}"))
                    .ok_or_else(|| Error::Data(format!("checkpoint lacks {prefix}:{name}")))
            };
            let m = take(&mut arrays, "adam_m")?;
            let v = take(&mut arrays, "adam_v")?;
            params.insert(name, Tensor::from_vec(&value.dims, value.data)?)?;
            params.get_mut(name)?.set_moments(m.data, v.data)?;
        }
        let bn_names: Vec<String> = arrays
            .keys()
            .filter_map(|k| k.strip_prefix("bn_mean:").map(str::to_string))
            .collect();
        for name in &bn_names {
            let mean = arrays.remove(&format!("bn_mean:{name}")).unwrap();
            let var = arrays
                .remove(&format!("bn_var:{name}"))
                .ok_or_else(|| Error::Data(format!("checkpoint lacks bn_var:{name}")))?;
            if mean.data.len() != var.data.len() {
                return Err(Error::Data(format!(
                    "batch-norm arrays for {name:?} disagree in channel count"
                )));
            }
            params.insert_bn(name, mean.data.len())?;
            let state = params.bn_state_mut(name)?;
            state.mean = mean.data;
            state.var = var.data;
        }
        if let Some(orphan) = arrays.keys().next() {
            return Err(Error::Data(format!("unrecognized checkpoint array {orphan:?}")));
        }
        params.set_step_count(adam_step);
        Ok(Checkpoint { config_text, master_seed, rounds_completed, params })
    }

    /// Refuses a checkpoint whose configuration differs from the current
    /// run's.
    pub fn ensure_config(&self, expected_config_text: &str) -> Result<()> {
        if self.config_text != expected_config_text {
            return Err(Error::Config(
                "checkpoint was trained under a different configuration; \
                 re-run with matching flags or start fresh"
                    .into(),
            ));
        }
        Ok(())
    }
}
