//! Binary persistence for models and datasets.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "FATCKPT1" | version u32 | in_channels u32 | base_width u32 | n_classes u32
//! | provenance len u32 | provenance bytes (UTF-8)
//! | entry count u32
//! | per entry: name len u32 | name | rank u32 | dims u32 × rank | f32 × numel
//! | FNV-1a u64 of every preceding byte
//! ```
//!
//! Each layer contributes two entries, `<layer>.weight` and `<layer>.bias`.
//! Dataset files use the same entry encoding under the magic `"FATDATA1"`.

use std::fs;
use std::path::Path;

use crate::error::{FatError, Result};
use crate::loss::LabelMap;
use crate::model::{ArchDescriptor, ModelParams};
use crate::rng::fnv1a;
use crate::tensor::Tensor;
use crate::trainer::SiloDataset;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FATCKPT1";
pub const DATASET_MAGIC: &[u8; 8] = b"FATDATA1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Free-form origin note, e.g. `"pretrain source=rectangles rounds=20"`.
    pub provenance: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 8]) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(magic);
        w.u32(FORMAT_VERSION);
        w
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, n: usize) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| FatError::Checkpoint(format!("length {n} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }

    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.len(b.len())?;
        self.0.extend_from_slice(b);
        Ok(())
    }

    fn tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.bytes(name.as_bytes())?;
        self.len(t.shape().len())?;
        for &d in t.shape() {
            self.len(d)?;
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    fn finish(mut self) -> Vec<u8> {
        let h = fnv1a(&self.0);
        self.0.extend_from_slice(&h.to_le_bytes());
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Verifies magic and trailing hash; positions after the version field.
    fn open(bytes: &'a [u8], magic: &[u8; 8]) -> Result<Self> {
        if bytes.len() < magic.len() + 4 + 8 {
            return Err(FatError::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != magic {
            return Err(FatError::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..8]),
                String::from_utf8_lossy(magic)
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let actual = fnv1a(body);
        if stored != actual {
            return Err(FatError::Checkpoint(format!(
                "content hash mismatch (stored {stored:016x}, computed {actual:016x})"
            )));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(FatError::Checkpoint(format!("unsupported format version {version}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FatError::Checkpoint(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| FatError::Checkpoint(format!("invalid UTF-8: {e}")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let rank = self.usize()?;
        let dims = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| FatError::Checkpoint(format!("entry {name}: dims {dims:?} overflow")))?;
        let raw = self.take(numel.checked_mul(4).ok_or_else(|| FatError::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| FatError::Checkpoint(format!("entry {name}: {e}")))?;
        Ok((name, t))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(FatError::Checkpoint(format!(
                "{} trailing bytes before the hash",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(params: &ModelParams, provenance: &str) -> Result<Vec<u8>> {
    let d = params.descriptor();
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    w.len(d.in_channels)?;
    w.len(d.base_width)?;
    w.len(d.n_classes)?;
    w.bytes(provenance.as_bytes())?;
    w.len(2 * params.layers().len())?;
    for layer in params.layers() {
        w.tensor(&format!("{}.weight", layer.name), &layer.kernel)?;
        w.tensor(&format!("{}.bias", layer.name), &layer.bias)?;
    }
    Ok(w.finish())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC)?;
    let desc = ArchDescriptor::new(r.usize()?, r.usize()?, r.usize()?)
        .map_err(|e| FatError::Checkpoint(format!("stored descriptor invalid: {e}")))?;
    let provenance = r.string()?;
    let count = r.usize()?;
    let expected: Vec<String> = desc
        .layer_specs()
        .iter()
        .flat_map(|(name, ..)| [format!("{name}.weight"), format!("{name}.bias")])
        .collect();
    if count != expected.len() {
        return Err(FatError::Checkpoint(format!("{count} entries, descriptor needs {}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for want in &expected {
        let (name, t) = r.tensor()?;
        if &name != want {
            return Err(FatError::Checkpoint(format!("entry {name:?} where {want:?} was expected")));
        }
        tensors.push(t);
    }
    r.finish()?;
    let params = ModelParams::from_tensors(desc, tensors)?;
    if !params.is_finite() {
        return Err(FatError::Checkpoint("non-finite weights".into()));
    }
    Ok(Checkpoint { params, provenance })
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, provenance: &str) -> Result<()> {
    fs::write(path, encode_checkpoint(params, provenance)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and requires its descriptor to equal `expected`.
pub fn load_checkpoint_for(path: &Path, expected: ArchDescriptor) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let got = ckpt.params.descriptor();
    if got != expected {
        return Err(FatError::Descriptor(format!(
            "{} holds {got:?}, the experiment uses {expected:?}",
            path.display()
        )));
    }
    Ok(ckpt)
}

/// Dataset file: header `silo_id u32 | supervised u32 | n_classes u32`,
/// then an `images` entry and, if any labels exist, a `labels` entry holding
/// class ids as floats (`[B, H, W]`). For unsupervised silos the labels are
/// the hidden diagnostic ones.
pub fn encode_dataset(silo: &SiloDataset) -> Result<Vec<u8>> {
    let mut w = Writer::new(DATASET_MAGIC);
    w.len(silo.silo_id())?;
    w.u32(silo.is_supervised() as u32);
    let labels = silo.diagnostic_labels();
    w.len(labels.map_or(0, |l| l.n_classes()))?;
    w.len(1 + labels.is_some() as usize)?;
    w.tensor("images", silo.images())?;
    if let Some(l) = labels {
        let t = Tensor::new(l.shape().to_vec(), l.data().iter().map(|&v| v as f32).collect())?;
        w.tensor("labels", &t)?;
    }
    Ok(w.finish())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<SiloDataset> {
    let mut r = Reader::open(bytes, DATASET_MAGIC)?;
    let silo_id = r.usize()?;
    let supervised = match r.u32()? {
        0 => false,
        1 => true,
        v => return Err(FatError::Checkpoint(format!("bad supervised flag {v}"))),
    };
    let n_classes = r.usize()?;
    let count = r.usize()?;
    let (name, images) = r.tensor()?;
    if name != "images" || !(count == 1 || count == 2) {
        return Err(FatError::Checkpoint(format!("unexpected dataset layout ({count} entries, first {name:?})")));
    }
    let labels = if count == 2 {
        let (name, t) = r.tensor()?;
        if name != "labels" || t.shape().len() != 3 {
            return Err(FatError::Checkpoint(format!("bad labels entry {name:?} {:?}", t.shape())));
        }
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if (0.0..256.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(FatError::Checkpoint(format!("label value {v} is not a class id")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        let s = t.shape();
        Some(LabelMap::new(s[0], s[1], s[2], n_classes, data)?)
    } else {
        None
    };
    r.finish()?;
    match (supervised, labels) {
        (true, Some(l)) => SiloDataset::supervised(silo_id, images, l),
        (true, None) => Err(FatError::Checkpoint("supervised dataset without labels".into())),
        (false, l) => SiloDataset::unsupervised(silo_id, images, l),
    }
}

pub fn save_dataset(path: &Path, silo: &SiloDataset) -> Result<()> {
    fs::write(path, encode_dataset(silo)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<SiloDataset> {
    decode_dataset(&fs::read(path)?)
}
