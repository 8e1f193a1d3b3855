//! Checkpoint persistence.
//!
//! Binary layout: magic `NLCK`, u32 version = 1, u32 entry count, then per
//! entry { u16 name length, UTF-8 name, u8 dtype, u8 rank, rank x u64 dims,
//! little-endian payload }. Dtype 0 is f32 tensor data (parameters, always
//! both fast weights and slow traces); dtype 1 is a raw byte blob used for
//! run metadata (config echo, step counter, RNG seed). Files are written to
//! a temporary sibling and atomically renamed into place.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::params::Params;

const MAGIC: &[u8; 4] = b"NLCK";
const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_BYTES: u8 = 1;

/// Reserved metadata entry names.
pub const META_STEP: &str = "meta.step";
pub const META_SEED: &str = "meta.seed";
pub const META_CONFIG: &str = "meta.config";
pub const META_NORM_MEAN: &str = "meta.norm_mean";
pub const META_NORM_STD: &str = "meta.norm_std";

#[derive(Clone, Debug)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// In-memory checkpoint: named f32 tensors plus metadata blobs.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub tensors: Vec<TensorEntry>,
    pub blobs: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    /// Snapshot every parameter and buffer (registration order).
    pub fn from_params(params: &Params) -> Self {
        let mut tensors = Vec::with_capacity(params.len());
        for (_, entry) in params.entries() {
            tensors.push(TensorEntry {
                name: entry.name.clone(),
                dims: entry.tensor.shape.clone(),
                data: entry.tensor.data.iter().map(|&v| v as f32).collect(),
            });
        }
        Checkpoint { tensors, blobs: Vec::new() }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn blob(&self, name: &str) -> Option<&[u8]> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn set_blob(&mut self, name: &str, bytes: Vec<u8>) {
        self.blobs.retain(|(n, _)| n != name);
        self.blobs.push((name.to_string(), bytes));
    }

    pub fn set_step(&mut self, step: u64) {
        self.set_blob(META_STEP, step.to_le_bytes().to_vec());
    }

    pub fn step(&self) -> Option<u64> {
        self.blob(META_STEP)
            .and_then(|b| b.try_into().ok())
            .map(u64::from_le_bytes)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.set_blob(META_SEED, seed.to_le_bytes().to_vec());
    }

    pub fn seed(&self) -> Option<u64> {
        self.blob(META_SEED)
            .and_then(|b| b.try_into().ok())
            .map(u64::from_le_bytes)
    }

    pub fn set_config_echo(&mut self, text: &str) {
        self.set_blob(META_CONFIG, text.as_bytes().to_vec());
    }

    pub fn set_norm_stats(&mut self, mean: f64, std: f64) {
        self.set_blob(META_NORM_MEAN, (mean as f32).to_le_bytes().to_vec());
        self.set_blob(META_NORM_STD, (std as f32).to_le_bytes().to_vec());
    }

    pub fn norm_stats(&self) -> Option<(f64, f64)> {
        let mean = self.blob(META_NORM_MEAN)?;
        let std = self.blob(META_NORM_STD)?;
        Some((
            f32::from_le_bytes(mean.try_into().ok()?) as f64,
            f32::from_le_bytes(std.try_into().ok()?) as f64,
        ))
    }

    /// Copy values into matching parameters. With `prefix` set, only
    /// checkpoint entries under the prefix are considered; every considered
    /// entry must exist in `params` with the same shape.
    pub fn load_into(&self, params: &mut Params, prefix: Option<&str>) -> Result<()> {
        for t in &self.tensors {
            if let Some(p) = prefix {
                if !t.name.starts_with(p) {
                    continue;
                }
            }
            let Some(id) = params.by_name(&t.name) else {
                return Err(CheckpointError::Missing(t.name.clone()).into());
            };
            let target = params.get_mut(id);
            if target.shape != t.dims {
                return Err(CheckpointError::ShapeMismatch {
                    name: t.name.clone(),
                    found: t.dims.clone(),
                    expected: target.shape.clone(),
                }
                .into());
            }
            target.data = t.data.iter().map(|&v| v as f64).collect();
        }
        Ok(())
    }

    /// Names under a prefix (ordering preserved).
    pub fn names_under(&self, prefix: &str) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| t.name.starts_with(prefix))
            .map(|t| t.name.as_str())
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let count = (self.tensors.len() + self.blobs.len()) as u32;
        buf.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            write_entry_header(&mut buf, &t.name, DTYPE_F32, &t.dims)?;
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (name, bytes) in &self.blobs {
            write_entry_header(&mut buf, name, DTYPE_BYTES, &[bytes.len()])?;
            buf.extend_from_slice(bytes);
        }
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&buf)?;
        tmp.flush()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version).into());
        }
        let count = cur.u32("entry count")?;
        let mut tensors = Vec::new();
        let mut blobs = Vec::new();
        for _ in 0..count {
            let name_len = cur.u16("name length")? as usize;
            let name_bytes = cur.take(name_len, "name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| CheckpointError::BadName)?
                .to_string();
            let dtype = cur.u8("dtype")?;
            let rank = cur.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u64("dim")? as usize);
            }
            let numel: usize = dims.iter().product();
            match dtype {
                DTYPE_F32 => {
                    let raw = cur.take(numel * 4, "tensor payload")?;
                    let mut data = Vec::with_capacity(numel);
                    for i in 0..numel {
                        data.push(f32::from_le_bytes(raw[i * 4..i * 4 + 4].try_into().unwrap()));
                    }
                    tensors.push(TensorEntry { name, dims, data });
                }
                DTYPE_BYTES => {
                    let raw = cur.take(numel, "blob payload")?;
                    blobs.push((name, raw.to_vec()));
                }
                other => return Err(CheckpointError::BadDtype(other).into()),
            }
        }
        Ok(Checkpoint { tensors, blobs })
    }
}

fn write_entry_header(buf: &mut Vec<u8>, name: &str, dtype: u8, dims: &[usize]) -> Result<()> {
    let name_bytes = name.as_bytes();
    if name_bytes.len() > u16::MAX as usize {
        return Err(Error::contract(format!("entry name too long: {name}")));
    }
    if dims.len() > u8::MAX as usize {
        return Err(Error::contract(format!("rank too large for {name}")));
    }
    buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(name_bytes);
    buf.push(dtype);
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what).into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::params::ParamGroup;
    use crate::tensor::Tensor;

    fn sample_params() -> Params {
        let mut p = Params::new();
        p.add(
            "layer.weight.fast",
            ParamGroup::Backbone,
            Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1.5, -2.5, 0.0]).unwrap(),
        );
        p.add_buffer(
            "layer.weight.slow",
            ParamGroup::Backbone,
            Tensor::new(vec![2, 3], vec![0.4; 6]).unwrap(),
        );
        p.add("head.bias", ParamGroup::Head, Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        p
    }

    #[test]
    fn round_trip_preserves_values_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let params = sample_params();
        let mut ck = Checkpoint::from_params(&params);
        ck.set_step(42);
        ck.set_seed(7);
        ck.set_config_echo("seed = 7\n");
        ck.set_norm_stats(0.31, 0.18);
        let path = dir.path().join("m.nlck");
        ck.write(&path).unwrap();

        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.step(), Some(42));
        assert_eq!(back.seed(), Some(7));
        assert_eq!(back.blob(META_CONFIG).unwrap(), b"seed = 7\n");
        let (m, s) = back.norm_stats().unwrap();
        assert!((m - 0.31).abs() < 1e-6 && (s - 0.18).abs() < 1e-6);

        let mut target = sample_params();
        for (_, e) in target.entries() {
            let _ = e;
        }
        back.load_into(&mut target, None).unwrap();
        for (id, e) in params.entries() {
            let loaded = target.get(target.by_name(&e.name).unwrap());
            for (a, b) in params.get(id).data.iter().zip(loaded.data.iter()) {
                assert_eq!(*b, *a as f32 as f64);
            }
        }
        // fast and slow entries are both present
        assert_eq!(back.names_under("layer.weight").len(), 2);
    }

    #[test]
    fn second_save_after_load_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let params = sample_params();
        let ck = Checkpoint::from_params(&params);
        let p1 = dir.path().join("a.nlck");
        let p2 = dir.path().join("b.nlck");
        ck.write(&p1).unwrap();
        let mut target = sample_params();
        Checkpoint::read(&p1).unwrap().load_into(&mut target, None).unwrap();
        Checkpoint::from_params(&target).write(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_version_truncation_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nlck");
        Checkpoint::from_params(&sample_params()).write(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        std::fs::write(&path, b"XXXX").unwrap();
        assert!(matches!(
            Checkpoint::read(&path),
            Err(Error::Checkpoint(CheckpointError::BadMagic))
        ));

        let mut bad_ver = good.clone();
        bad_ver[4..8].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &bad_ver).unwrap();
        assert!(matches!(
            Checkpoint::read(&path),
            Err(Error::Checkpoint(CheckpointError::BadVersion(9)))
        ));

        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(matches!(
            Checkpoint::read(&path),
            Err(Error::Checkpoint(CheckpointError::Truncated(_)))
        ));
    }

    #[test]
    fn prefix_load_and_shape_mismatch() {
        let params = sample_params();
        let ck = Checkpoint::from_params(&params);
        // prefix load into a model that only has the encoder part
        let mut partial = Params::new();
        partial.add(
            "layer.weight.fast",
            ParamGroup::Backbone,
            Tensor::zeros(vec![2, 3]),
        );
        partial.add_buffer(
            "layer.weight.slow",
            ParamGroup::Backbone,
            Tensor::zeros(vec![2, 3]),
        );
        ck.load_into(&mut partial, Some("layer.")).unwrap();
        assert!(partial.get(partial.by_name("layer.weight.fast").unwrap()).data[3] > 1.0);

        let mut wrong = Params::new();
        wrong.add("layer.weight.fast", ParamGroup::Backbone, Tensor::zeros(vec![3, 2]));
        wrong.add_buffer("layer.weight.slow", ParamGroup::Backbone, Tensor::zeros(vec![3, 2]));
        assert!(matches!(
            ck.load_into(&mut wrong, Some("layer.")),
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { .. }))
        ));
    }
}
