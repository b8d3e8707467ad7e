//! Binary checkpoint and tensor-dump files.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "DSTNCKPT"
//! version    u32      FORMAT_VERSION
//! digest     32 bytes SHA-256 of the resolved run configuration
//! config     u64 length + UTF-8 TOML text
//! epoch      u64      completed epochs
//! step       u64      optimizer steps taken
//! seed       u64      root seed of every random stream
//! weights    u64 length + class-weight table text
//! count      u32      number of tensor records
//! records    count x tensor record
//! end        4 bytes  "END."
//! ```
//!
//! A tensor record is `u16 name length, name, u8 dtype tag (1 = f32,
//! 2 = f64), u8 rank, rank x u64 extents, payload`. Optimizer moments are
//! stored as `adam.m/<param>` and `adam.v/<param>`.
//!
//! A tensor dump (see [`import_tensors`]) is `"DSTNTENS"`, `u32` version,
//! `u32` count and the same tensor records.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::ClassWeights;
use crate::tensor::{DType, Real, Tensor};

use super::Model;

pub const MAGIC: &[u8; 8] = b"DSTNCKPT";
pub const DUMP_MAGIC: &[u8; 8] = b"DSTNTENS";
pub const FORMAT_VERSION: u32 = 1;
const END: &[u8; 4] = b"END.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config_text: String,
    pub digest: [u8; 32],
    pub epoch: u64,
    pub step: u64,
    pub seed: u64,
    pub class_weights: ClassWeights,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn digest_hex(&self) -> String {
        hex(&self.digest)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.push(t.shape().len() as u8);
    for &e in t.shape() {
        put_u64(out, e as u64);
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

pub fn encode_checkpoint<T: Real>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&ck.digest);
    put_text(&mut out, &ck.config_text);
    put_u64(&mut out, ck.epoch);
    put_u64(&mut out, ck.step);
    put_u64(&mut out, ck.seed);
    put_text(&mut out, &ck.class_weights.to_text());
    out.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ck.tensors {
        put_tensor(&mut out, name, t)?;
    }
    out.extend_from_slice(END);
    Ok(out)
}

/// Writes atomically: a crash never leaves a partial checkpoint at `path`.
pub fn save_checkpoint<T: Real>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let len = usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} length overflows")))?;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }

    fn tensor<T: Real>(&mut self) -> Result<(String, Tensor<T>)> {
        let len = self.u16("tensor name length")? as usize;
        let name = String::from_utf8(self.take(len, "tensor name")?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let tag = self.u8("dtype tag")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag} for {name}")))?;
        let rank = self.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("extent")? as usize);
        }
        let count = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
        let width = dtype.size();
        let payload = self.take(count.checked_mul(width).ok_or_else(|| Error::Checkpoint(format!("{name}: payload overflows")))?, &name)?;
        let data: Vec<T> = match dtype {
            _ if dtype == T::DTYPE => payload.chunks_exact(width).map(T::read_le).collect(),
            DType::F32 => payload.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => payload.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
    }
    let digest: [u8; 32] = r.take(32, "digest")?.try_into().expect("32 bytes");
    let config_text = r.text("config")?;
    let epoch = r.u64("epoch")?;
    let step = r.u64("step")?;
    let seed = r.u64("seed")?;
    let class_weights = ClassWeights::from_text(&r.text("class weights")?).map_err(|e| Error::Checkpoint(format!("class weights: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    if r.take(4, "end marker")? != END {
        return Err(Error::Checkpoint("missing end marker".into()));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config_text, digest, epoch, step, seed, class_weights, tensors })
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}

pub fn encode_tensor_dump<T: Real>(tensors: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DUMP_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_tensor(&mut out, name, t)?;
    }
    Ok(out)
}

pub fn decode_tensor_dump<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != DUMP_MAGIC {
        return Err(Error::Checkpoint("not a tensor dump (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
    }
    let count = r.u32("tensor count")?;
    (0..count).map(|_| r.tensor()).collect()
}

impl<T: Real> Model<T> {
    /// `(name, value)` of every parameter.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.params.iter().map(|p| (p.name.clone(), p.tensor.clone().with_grad(false))).collect()
    }

    /// Overwrites parameters from `tensors`; every parameter must be present
    /// with its exact shape. Freezing flags are kept.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let mut staged = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let t = tensors
                .iter()
                .find(|(n, _)| *n == p.name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!("{}: shape {:?}, model expects {:?}", p.name, t.shape(), p.tensor.shape())));
            }
            staged.push(t.data().to_vec());
        }
        for (p, data) in self.params.iter_mut().zip(staged) {
            p.tensor.data_mut().copy_from_slice(&data);
        }
        Ok(())
    }
}

/// Copies every tensor of a dump whose name and shape match a model
/// parameter (e.g. converted pretrained encoder weights). Returns the names
/// that were imported; non-matching entries are ignored.
pub fn import_tensors<T: Real>(model: &mut Model<T>, path: &Path) -> Result<Vec<String>> {
    let dump: Vec<(String, Tensor<T>)> = decode_tensor_dump(&std::fs::read(path)?)?;
    let mut imported = Vec::new();
    for p in model.params_mut() {
        if let Some((_, t)) = dump.iter().find(|(n, t)| *n == p.name && t.shape() == p.tensor.shape()) {
            p.tensor.data_mut().copy_from_slice(t.data());
            imported.push(p.name.clone());
        }
    }
    Ok(imported)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Channels, ModelConfig};

    fn model() -> Model<f32> {
        let cfg = ModelConfig { width: 64, height: 32, channels: Channels::divided(16), hidden: 5, ..ModelConfig::desk() };
        Model::build(cfg, 9).unwrap()
    }

    fn ck(m: &Model<f32>) -> Checkpoint<f32> {
        let mut w = std::collections::BTreeMap::new();
        w.insert(0, 3);
        w.insert(2, 1);
        Checkpoint {
            config_text: "seed = 1\n".into(),
            digest: [7; 32],
            epoch: 3,
            step: 12,
            seed: 1,
            class_weights: ClassWeights::from_histogram(&w, [0.25, 0.75]).unwrap(),
            tensors: m.named_tensors(),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let m = model();
        let c = ck(&m);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &c).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, c);
        let mut m2 = Model::build(m.config().clone(), 10).unwrap();
        assert_ne!(m2, m);
        m2.load_tensors(&back.tensors).unwrap();
        assert_eq!(m2, m);
    }

    #[test]
    fn truncation_and_version() {
        let bytes = encode_checkpoint(&ck(&model())).unwrap();
        for cut in [0, 7, 13, 60, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint::<f32>(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "{cut}: {err}");
        }
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode_checkpoint::<f32>(&v2), Err(Error::CheckpointVersion { found: 2, expected: 1 })));
    }

    #[test]
    fn dump_import() {
        let src = model();
        let dump: Vec<_> = src.named_tensors().into_iter().filter(|(n, _)| n.starts_with("conv_1.")).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        std::fs::write(&path, encode_tensor_dump(&dump).unwrap()).unwrap();
        let mut dst = Model::<f32>::build(src.config().clone(), 99).unwrap();
        let names = import_tensors(&mut dst, &path).unwrap();
        assert_eq!(names, vec!["conv_1.weight".to_string(), "conv_1.bias".to_string()]);
        assert_eq!(dst.param("conv_1.weight").unwrap().tensor.data(), src.param("conv_1.weight").unwrap().tensor.data());
    }
}
