//! Single-file container for models and datasets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "PEGOCKPT" | u32 format_version | u32 flags | u64 len | JSON record
//! u64 tensor_count
//! per tensor: u64 name_len | name (UTF-8) | u64 ndim | u64 dims[ndim] | values
//! sha256 of every preceding byte (32 bytes)
//! ```
//!
//! Values are row-major IEEE-754, f64 unless flag bit 0 selects f32.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{Domain, DomainDataset, Sample, SampleId};
use crate::error::{PegoError, Result};
use crate::numerics::{Matrix, Rng};
use crate::pego::{AdaptedLinear, LoraGroup, LoraModule};
use crate::vit::{init_vit, ProjKind, Projection, VitConfig, VitModel};

pub const MAGIC: &[u8; 8] = b"PEGOCKPT";
pub const FORMAT_VERSION: u32 = 1;
const FLAG_F32: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    /// Storage only; values are widened back to f64 on load.
    F32,
}

/// A JSON record plus named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub record: Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| PegoError::Format(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self, precision: Precision) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let flags = if precision == Precision::F32 { FLAG_F32 } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        let record = serde_json::to_vec(&self.record).expect("JSON values serialize");
        out.extend_from_slice(&(record.len() as u64).to_le_bytes());
        out.extend_from_slice(&record);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u64.to_le_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for &v in m.as_slice() {
                match precision {
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(PegoError::Format("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(PegoError::Format("checksum mismatch".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(PegoError::Format(format!("unsupported format version {version}")));
        }
        let flags = r.u32()?;
        if flags & !FLAG_F32 != 0 {
            return Err(PegoError::Format(format!("unknown flags {flags:#x}")));
        }
        let f32_payload = flags & FLAG_F32 != 0;
        let record_len = r.len()?;
        let record: Value =
            serde_json::from_slice(r.take(record_len)?).map_err(|e| PegoError::Format(format!("bad record: {e}")))?;
        let count = r.len()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.len()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| PegoError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.len()?;
            let dims: Vec<usize> = (0..ndim).map(|_| r.len()).collect::<Result<_>>()?;
            let (rows, cols) = match dims.as_slice() {
                [n] => (*n, 1),
                [rows, cols] => (*rows, *cols),
                _ => return Err(PegoError::Format(format!("tensor `{name}` has {ndim} dims"))),
            };
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| PegoError::Format("tensor too large".into()))?;
            let width = if f32_payload { 4 } else { 8 };
            let raw = r.take(
                n.checked_mul(width)
                    .ok_or_else(|| PegoError::Format("tensor too large".into()))?,
            )?;
            let data: Vec<f64> = if f32_payload {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect()
            } else {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            };
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if r.pos != body.len() {
            return Err(PegoError::Format("trailing bytes after tensors".into()));
        }
        Ok(Self { record, tensors })
    }

    pub fn save(&self, path: &Path, precision: Precision) -> Result<()> {
        std::fs::write(path, self.to_bytes(precision)).map_err(|e| PegoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PegoError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| PegoError::Format("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| PegoError::Format("length overflows".into()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Model {
        vit: VitConfig,
    },
    Dataset {
        num_classes: usize,
        image_size: usize,
        domains: Vec<String>,
    },
}

fn record_of(c: &Container) -> Result<Record> {
    serde_json::from_value(c.record.clone()).map_err(|e| PegoError::Format(format!("bad record: {e}")))
}

pub fn model_to_container(model: &VitModel) -> Container {
    let record = serde_json::to_value(Record::Model {
        vit: model.config.clone(),
    })
    .expect("record serializes");
    Container {
        record,
        tensors: model.params().into_iter().map(|(n, m)| (n, m.clone())).collect(),
    }
}

/// Rebuilds a model from its configuration and tensors. Adapter groups are
/// recovered from the `*.lora.{i}.{A,B}` tensor names.
pub fn model_from_container(c: &Container) -> Result<VitModel> {
    let Record::Model { vit } = record_of(c)? else {
        return Err(PegoError::Format("file holds a dataset, not a model".into()));
    };
    vit.validate().map_err(|e| PegoError::Format(e.to_string()))?;
    let mut model = init_vit(&vit, &mut Rng::new(0))?;
    for b in 0..vit.num_blocks {
        for kind in [ProjKind::Query, ProjKind::Value] {
            let prefix = format!("blocks.{b}.attn.{}.lora", kind.name());
            let mut modules = Vec::new();
            while let (Ok(a), Ok(bm)) = (
                c.tensor(&format!("{prefix}.{}.A", modules.len())),
                c.tensor(&format!("{prefix}.{}.B", modules.len())),
            ) {
                modules.push(LoraModule {
                    a: a.clone(),
                    b: bm.clone(),
                });
            }
            if modules.is_empty() {
                continue;
            }
            let group = LoraGroup::new(modules).map_err(|e| PegoError::Format(e.to_string()))?;
            let proj = model.projection_mut(b, kind).expect("block exists");
            let base = match proj {
                Projection::Frozen(l) => l.clone(),
                Projection::Adapted(a) => a.base.clone(),
            };
            let adapted = AdaptedLinear::new(base, group).map_err(|e| PegoError::Format(e.to_string()))?;
            *proj = Projection::Adapted(adapted);
        }
    }
    let expected = model.params().len();
    if expected != c.tensors.len() {
        return Err(PegoError::Format(format!(
            "expected {expected} tensors, found {}",
            c.tensors.len()
        )));
    }
    for (name, p) in model.params_mut() {
        let t = c.tensor(&name)?;
        if t.shape() != p.shape() {
            return Err(PegoError::Format(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                p.shape()
            )));
        }
        *p = t.clone();
    }
    Ok(model)
}

pub fn save_model(model: &VitModel, path: &Path, precision: Precision) -> Result<()> {
    model_to_container(model).save(path, precision)
}

pub fn load_model(path: &Path) -> Result<VitModel> {
    model_from_container(&Container::load(path)?)
}

/// Images are stored one flattened sample per row, with a label column.
pub fn dataset_to_container(ds: &DomainDataset) -> Container {
    let record = serde_json::to_value(Record::Dataset {
        num_classes: ds.num_classes,
        image_size: ds.image_size,
        domains: ds.domains.iter().map(|d| d.name.clone()).collect(),
    })
    .expect("record serializes");
    let mut tensors = Vec::new();
    for (d, domain) in ds.domains.iter().enumerate() {
        let pixels = domain.samples.first().map_or(0, |s| s.image.len());
        let mut images = Vec::with_capacity(domain.len() * pixels);
        for s in &domain.samples {
            images.extend_from_slice(s.image.as_slice());
        }
        let labels: Vec<f64> = domain.samples.iter().map(|s| s.label as f64).collect();
        tensors.push((
            format!("domains.{d}.images"),
            Matrix::from_vec(domain.len(), pixels, images).expect("uniform image size"),
        ));
        tensors.push((format!("domains.{d}.labels"), Matrix::column(&labels)));
    }
    Container { record, tensors }
}

pub fn dataset_from_container(c: &Container) -> Result<DomainDataset> {
    let Record::Dataset {
        num_classes,
        image_size,
        domains: names,
    } = record_of(c)?
    else {
        return Err(PegoError::Format("file holds a model, not a dataset".into()));
    };
    let mut domains = Vec::with_capacity(names.len());
    for (d, name) in names.into_iter().enumerate() {
        let images = c.tensor(&format!("domains.{d}.images"))?;
        let labels = c.tensor(&format!("domains.{d}.labels"))?;
        if labels.rows() != images.rows() || images.cols() != image_size * image_size {
            return Err(PegoError::Format(format!("domain `{name}` has inconsistent tensors")));
        }
        let mut samples = Vec::with_capacity(images.rows());
        for i in 0..images.rows() {
            let l = labels.as_slice()[i];
            if l < 0.0 || l.fract() != 0.0 || l as usize >= num_classes {
                return Err(PegoError::Format(format!("bad label {l} in domain `{name}`")));
            }
            samples.push(Sample {
                image: Matrix::from_vec(image_size, image_size, images.row(i).to_vec())?,
                label: l as usize,
                id: SampleId { domain: d, index: i },
            });
        }
        domains.push(Domain { name, samples });
    }
    let expected = 2 * domains.len();
    if c.tensors.len() != expected {
        return Err(PegoError::Format(format!(
            "expected {expected} tensors, found {}",
            c.tensors.len()
        )));
    }
    Ok(DomainDataset {
        domains,
        num_classes,
        image_size,
    })
}

pub fn save_dataset(ds: &DomainDataset, path: &Path) -> Result<()> {
    dataset_to_container(ds).save(path, Precision::F64)
}

pub fn load_dataset(path: &Path) -> Result<DomainDataset> {
    dataset_from_container(&Container::load(path)?)
}
