//! `GCKP` tensor checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "GCKP" version dtype meta_len meta(JSON) manifest_len manifest payload
//! manifest = count { name_len name ndim dim* }
//! payload  = every tensor's values in manifest order, f32 or f64 LE
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use gatecrush_core::efficiency::LpNet;
use gatecrush_core::gates::GateMode;
use gatecrush_core::models::{ArchitectureSpec, Model};
use gatecrush_core::{Real, Tensor};

use crate::error::{format_err, io_err, Result};

pub const MAGIC: &[u8; 4] = b"GCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn of<T: Real>() -> DType {
        if T::NAME == "f64" {
            DType::F64
        } else {
            DType::F32
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Stored values widened to f64 (exact for f32 files).
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dtype: DType,
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new(dtype: DType) -> Self {
        Checkpoint {
            dtype,
            meta: BTreeMap::new(),
            entries: Vec::new(),
        }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push(Entry {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64()).collect(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .get(name)
            .ok_or_else(|| gatecrush_core::Error::MissingParameter(name.into()))?;
        Ok(Tensor::new(e.shape.clone(), e.data.iter().map(|&v| T::from_f64(v)).collect())?)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put(&mut out, VERSION);
        put(&mut out, self.dtype.code());
        let meta = serde_json::to_vec(&self.meta).expect("string map serializes");
        put(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        let mut manifest = Vec::new();
        put(&mut manifest, self.entries.len() as u32);
        for e in &self.entries {
            put(&mut manifest, e.name.len() as u32);
            manifest.extend_from_slice(e.name.as_bytes());
            put(&mut manifest, e.shape.len() as u32);
            for &d in &e.shape {
                put(&mut manifest, d as u32);
            }
        }
        put(&mut out, manifest.len() as u32);
        out.extend_from_slice(&manifest);
        for e in &self.entries {
            for &v in &e.data {
                match self.dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(format_err(path, "not a GCKP checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(path, format!("unsupported checkpoint version {version}")));
        }
        let dtype = match r.u32()? {
            0 => DType::F32,
            1 => DType::F64,
            c => return Err(format_err(path, format!("unknown dtype code {c}"))),
        };
        let meta_len = r.u32()? as usize;
        let meta: BTreeMap<String, String> =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| format_err(path, format!("metadata: {e}")))?;
        let manifest_len = r.u32()? as usize;
        let manifest_end = r.pos + manifest_len;
        let count = r.u32()? as usize;
        let mut heads = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| format_err(path, "tensor name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            heads.push((name, shape));
        }
        if r.pos != manifest_end {
            return Err(format_err(path, "manifest length disagrees with its contents"));
        }
        let mut entries = Vec::with_capacity(heads.len());
        for (name, shape) in heads {
            let n: usize = shape.iter().product();
            let raw = r.take(n * dtype.width())?;
            let data = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            entries.push(Entry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(format_err(path, "trailing bytes after payload"));
        }
        Ok(Checkpoint { dtype, meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(self.path, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn gate_mode_name(mode: GateMode) -> String {
    match mode {
        GateMode::Binary => "binary".into(),
        GateMode::Sigmoid { k } => format!("sigmoid:{k}"),
    }
}

pub fn parse_gate_mode(s: &str) -> Result<GateMode> {
    match s {
        "binary" => Ok(GateMode::Binary),
        _ => s
            .strip_prefix("sigmoid:")
            .and_then(|k| k.parse().ok())
            .map(|k| GateMode::Sigmoid { k })
            .ok_or_else(|| crate::error::Error::Config(format!("unknown gate mode {s:?}"))),
    }
}

/// Stores a model with the metadata needed to rebuild it.
pub fn model_checkpoint<T: Real>(model: &Model<T>, mode: GateMode, kind: &str) -> Checkpoint {
    let mut ck = Checkpoint::new(DType::of::<T>());
    ck.meta.insert("kind".into(), kind.into());
    ck.meta.insert("arch".into(), model.spec.name.clone());
    ck.meta.insert("classes".into(), model.spec.num_classes.to_string());
    ck.meta.insert("resolution".into(), model.spec.resolution.to_string());
    ck.meta.insert("gate_mode".into(), gate_mode_name(mode));
    ck.meta.insert("min_open".into(), model.min_open.to_string());
    for (name, t) in model.named_state() {
        ck.push(name, &t);
    }
    ck
}

fn meta_field<'a>(ck: &'a Checkpoint, key: &str, path: &Path) -> Result<&'a str> {
    ck.meta(key)
        .ok_or_else(|| format_err(path, format!("checkpoint metadata lacks {key:?}")))
}

fn meta_usize(ck: &Checkpoint, key: &str, path: &Path) -> Result<usize> {
    meta_field(ck, key, path)?
        .parse()
        .map_err(|_| format_err(path, format!("metadata {key:?} is not an integer")))
}

pub fn load_model<T: Real>(path: &Path) -> Result<(Model<T>, GateMode)> {
    let ck = Checkpoint::load(path)?;
    model_from_checkpoint(&ck, path)
}

pub fn model_from_checkpoint<T: Real>(ck: &Checkpoint, path: &Path) -> Result<(Model<T>, GateMode)> {
    let spec = ArchitectureSpec::by_name(
        meta_field(ck, "arch", path)?,
        meta_usize(ck, "classes", path)?,
        meta_usize(ck, "resolution", path)?,
    )?;
    let mode = parse_gate_mode(meta_field(ck, "gate_mode", path)?)?;
    let state = ck
        .entries
        .iter()
        .map(|e| Ok((e.name.clone(), ck.tensor::<T>(&e.name)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Model::from_state(&spec, &state, mode)?;
    model.min_open = meta_usize(ck, "min_open", path)?;
    model.refresh_gates()?;
    Ok((model, mode))
}

fn vec_tensor(v: &[f64]) -> Tensor<f64> {
    Tensor::new([v.len()], v.to_vec()).expect("1-d")
}

pub fn lpnet_checkpoint(net: &LpNet, meta: BTreeMap<String, String>) -> Checkpoint {
    let mut ck = Checkpoint::new(DType::F64);
    ck.meta = meta;
    ck.meta.insert("kind".into(), "lpnet".into());
    ck.meta.insert("num_layers".into(), net.num_layers.to_string());
    ck.meta.insert("target_scale".into(), format!("{:e}", net.target_scale));
    ck.push("inputs", &vec_tensor(&net.inputs.iter().map(|&i| i as f64).collect::<Vec<_>>()));
    ck.push("feature_scale", &vec_tensor(&net.feature_scale));
    ck.push("static_features", &vec_tensor(&net.static_features));
    for (name, t) in net.named_tensors() {
        ck.push(name, t);
    }
    ck
}

pub fn lpnet_from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<LpNet> {
    if ck.meta("kind") != Some("lpnet") {
        return Err(format_err(path, "not an LPNet checkpoint"));
    }
    let target_scale: f64 = meta_field(ck, "target_scale", path)?
        .parse()
        .map_err(|_| format_err(path, "bad target_scale"))?;
    let inputs = ck.tensor::<f64>("inputs")?.data().iter().map(|&v| v as usize).collect();
    Ok(LpNet {
        inputs,
        num_layers: meta_usize(ck, "num_layers", path)?,
        feature_scale: ck.tensor::<f64>("feature_scale")?.into_data(),
        static_features: ck.tensor::<f64>("static_features")?.into_data(),
        target_scale,
        w1: ck.tensor("w1")?,
        b1: ck.tensor("b1")?,
        w2: ck.tensor("w2")?,
        b2: ck.tensor("b2")?,
        w3: ck.tensor("w3")?,
        b3: ck.tensor("b3")?,
    })
}
