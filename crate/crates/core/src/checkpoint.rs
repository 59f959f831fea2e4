//! Binary tensor archive and the training checkpoint stored in it.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "R2MW" | u32 version | u64 tensor count
//! per tensor: u32 name length | UTF-8 name | u32 rank | u64 dims[rank] | f64 data[prod(dims)]
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! A [`Checkpoint`] is an archive whose entries are prefixed `param/`,
//! `adam.m/`, `adam.v/` and `meta/`; scalar training state lives in
//! single-element `meta/` tensors.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use crate::network::{ModelParams, NetworkConfig};
use crate::tensor::{Shape, Tensor};
use crate::training::{AdamState, PlateauSchedule};

pub const MAGIC: [u8; 4] = *b"R2MW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Serializes named tensors in the given order.
pub fn encode_archive<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let dims = t.shape().dims();
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses an archive, returning entries in stored order.
pub fn decode_archive(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated);
    }
    if bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let body_len = bytes.len().checked_sub(4).ok_or(CheckpointError::Truncated)?;
    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: 4,
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Invalid("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        if rank != 4 {
            return Err(CheckpointError::Invalid(format!("tensor `{name}` has rank {rank}, expected 4")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = usize::try_from(r.u64()?).map_err(|_| CheckpointError::Truncated)?;
        }
        let shape = Shape::from_dims(dims);
        let n_bytes = dims
            .iter()
            .try_fold(8usize, |acc, &d| acc.checked_mul(d))
            .ok_or(CheckpointError::Truncated)?;
        let raw = r.take(n_bytes)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data).expect("length from dims")));
    }
    if r.pos != body_len {
        return Err(CheckpointError::Invalid(format!(
            "{} unexpected bytes before the checksum",
            body_len - r.pos
        )));
    }
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_archive(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode_archive(entries.iter().map(|(n, t)| (n.as_str(), t))))
}

/// Reads an archive into a name-keyed map; duplicate names are rejected.
pub fn read_archive(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let entries = decode_archive(&fs::read(path)?)?;
    let mut map = BTreeMap::new();
    for (name, t) in entries {
        if map.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Invalid(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(map)
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub schedule: PlateauSchedule,
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
}

fn scalar(v: f64) -> Tensor {
    Tensor::scalar(v)
}

impl Checkpoint {
    fn entries(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut meta = |k: &str, v: f64| out.push((format!("meta/{k}"), scalar(v)));
        let n = &self.network;
        meta("levels", n.levels as f64);
        meta("base_channels", n.base_channels as f64);
        meta("msc_depth", n.msc_depth as f64);
        meta("global_residual", if n.global_residual { 1.0 } else { 0.0 });
        meta("attention_reduction", n.attention_reduction as f64);
        meta("epoch", self.epoch as f64);
        meta("seed_hi", (self.seed >> 32) as f64);
        meta("seed_lo", (self.seed & 0xffff_ffff) as f64);
        let a = &self.adam;
        meta("adam.lr", a.lr);
        meta("adam.beta1", a.beta1);
        meta("adam.beta2", a.beta2);
        meta("adam.eps", a.eps);
        meta("adam.step", a.step as f64);
        let s = &self.schedule;
        meta("plateau.patience", s.patience as f64);
        meta("plateau.factor", s.factor);
        meta("plateau.best", s.best);
        meta("plateau.wait", s.wait as f64);
        meta("plateau.min_lr", s.min_lr);
        for (name, t) in self.params.iter() {
            out.push((format!("param/{name}"), t.clone()));
        }
        for (name, t) in &a.first_moment {
            out.push((format!("adam.m/{name}"), t.clone()));
        }
        for (name, t) in &a.second_moment {
            out.push((format!("adam.v/{name}"), t.clone()));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries();
        encode_archive(entries.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut params = ModelParams::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut meta = BTreeMap::new();
        for (name, t) in decode_archive(bytes)? {
            if let Some(k) = name.strip_prefix("param/") {
                params.insert(k, t);
            } else if let Some(k) = name.strip_prefix("adam.m/") {
                m.insert(k.to_owned(), t);
            } else if let Some(k) = name.strip_prefix("adam.v/") {
                v.insert(k.to_owned(), t);
            } else if let Some(k) = name.strip_prefix("meta/") {
                let value = t
                    .item()
                    .map_err(|_| CheckpointError::Invalid(format!("meta entry `{k}` is not a scalar")))?;
                meta.insert(k.to_owned(), value);
            } else {
                return Err(CheckpointError::Invalid(format!("unexpected entry `{name}`")));
            }
        }
        let get = |k: &str| {
            meta.get(k)
                .copied()
                .ok_or_else(|| CheckpointError::Invalid(format!("missing meta entry `{k}`")))
        };
        let int = |k: &str| -> Result<u64> {
            let x = get(k)?;
            if x < 0.0 || x.fract() != 0.0 || x > 2f64.powi(53) {
                return Err(CheckpointError::Invalid(format!("meta entry `{k}` = {x} is not a count")));
            }
            Ok(x as u64)
        };
        let network = NetworkConfig {
            levels: int("levels")? as usize,
            base_channels: int("base_channels")? as usize,
            msc_depth: int("msc_depth")? as usize,
            global_residual: get("global_residual")? != 0.0,
            attention_reduction: int("attention_reduction")? as usize,
        };
        params
            .check(&network)
            .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        let adam = AdamState {
            lr: get("adam.lr")?,
            beta1: get("adam.beta1")?,
            beta2: get("adam.beta2")?,
            eps: get("adam.eps")?,
            step: int("adam.step")?,
            first_moment: m,
            second_moment: v,
        };
        let schedule = PlateauSchedule {
            patience: int("plateau.patience")? as usize,
            factor: get("plateau.factor")?,
            best: get("plateau.best")?,
            wait: int("plateau.wait")? as usize,
            min_lr: get("plateau.min_lr")?,
        };
        Ok(Checkpoint {
            network,
            params,
            adam,
            schedule,
            epoch: int("epoch")?,
            seed: (int("seed_hi")? << 32) | int("seed_lo")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

/// Free-function forms of [`Checkpoint::save`] / [`Checkpoint::load`].
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    ck.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let network = NetworkConfig {
            levels: 1,
            base_channels: 4,
            msc_depth: 1,
            ..NetworkConfig::default()
        };
        let params = ModelParams::init(&network, 3).unwrap();
        let mut adam = AdamState::new(2e-4);
        adam.step = 17;
        for (name, t) in params.iter() {
            adam.first_moment.insert(name.clone(), t.map(|v| v * 0.5));
            adam.second_moment.insert(name.clone(), t.map(|v| v * v));
        }
        let mut schedule = PlateauSchedule::default();
        schedule.best = 0.123;
        schedule.wait = 4;
        Checkpoint {
            network,
            params,
            adam,
            schedule,
            epoch: 9,
            seed: 0xdead_beef_cafe_f00d,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn fresh_schedule_round_trips_infinite_best() {
        let mut ck = sample();
        ck.schedule = PlateauSchedule::default();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap().schedule.best, f64::INFINITY);
    }

    #[test]
    fn distinct_error_kinds() {
        let bytes = sample().to_bytes();

        let mut corrupt = bytes.clone();
        let mid = corrupt.len() - 40;
        corrupt[mid] ^= 0x5a;
        assert!(matches!(
            Checkpoint::from_bytes(&corrupt).unwrap_err(),
            CheckpointError::Checksum { .. }
        ));

        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).unwrap_err(),
            CheckpointError::Truncated
        ));

        let mut versioned = bytes.clone();
        versioned[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&versioned).unwrap_err(),
            CheckpointError::Version { found: 7, .. }
        ));

        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic).unwrap_err(), CheckpointError::BadMagic));
    }

    #[test]
    fn archive_header_layout() {
        let t = Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, -2.0]).unwrap();
        let bytes = encode_archive([("ab", &t)]);
        assert_eq!(&bytes[..4], b"R2MW");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..22], b"ab");
        assert_eq!(&bytes[22..26], &4u32.to_le_bytes());
        assert_eq!(bytes.len(), 26 + 4 * 8 + 2 * 8 + 4);
        let crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
        assert_eq!(&bytes[bytes.len() - 4..], &crc.to_le_bytes());
    }
}
