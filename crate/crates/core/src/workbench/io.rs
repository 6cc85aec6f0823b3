//! Binary containers: triplane files and named-tensor checkpoints.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::scene::Caption;
use crate::triplane::{DecoderParams, TriPlane};

pub const TRIPLANE_MAGIC: &[u8; 4] = b"TPLN";
pub const TRIPLANE_VERSION: u16 = 1;
/// Plane order tag: payload planes are `xy, xz, yz`.
pub const PLANE_ORDER_XY_XZ_YZ: u32 = 0;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TPDCKPT\0";
pub const CHECKPOINT_VERSION: u16 = 1;

fn format_err(kind: &'static str, path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { kind, path: path.to_path_buf(), detail: detail.into() }
}

/// Little-endian cursor over a byte buffer with format-aware errors.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    kind: &'static str,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(format_err(self.kind, self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| format_err(self.kind, self.path, "length overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format_err(self.kind, self.path, "invalid UTF-8"))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(format_err(self.kind, self.path, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: impl Iterator<Item = f32>) {
    for v in values {
        out.extend(v.to_le_bytes());
    }
}

pub fn encode_triplane(tp: &TriPlane) -> Vec<u8> {
    let r = tp.resolution() as u32;
    let mut out = Vec::with_capacity(22 + tp.len() * 4);
    out.extend(TRIPLANE_MAGIC);
    out.extend(TRIPLANE_VERSION.to_le_bytes());
    for v in [r, r, tp.channels() as u32, PLANE_ORDER_XY_XZ_YZ] {
        out.extend(v.to_le_bytes());
    }
    put_f32s(&mut out, tp.values().map(|&v| v as f32));
    out
}

pub fn decode_triplane(buf: &[u8], path: &Path) -> Result<TriPlane> {
    let mut r = Reader { buf, pos: 0, kind: "triplane file", path };
    if r.take(4)? != TRIPLANE_MAGIC {
        return Err(format_err(r.kind, path, "bad magic"));
    }
    let version = r.u16()?;
    if version != TRIPLANE_VERSION {
        return Err(format_err(r.kind, path, format!("unsupported version {version}")));
    }
    let (h, w, c, order) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()?);
    if h != w || h < 2 || c == 0 {
        return Err(format_err(r.kind, path, format!("unsupported shape {h}x{w}x{c}")));
    }
    if order != PLANE_ORDER_XY_XZ_YZ {
        return Err(format_err(r.kind, path, format!("unknown plane order tag {order}")));
    }
    let expected = 3 * c * h * w * 4;
    if buf.len() - r.pos != expected {
        return Err(format_err(r.kind, path, format!("payload is {} bytes, header implies {expected}", buf.len() - r.pos)));
    }
    let values = r.f32s(3 * c * h * w)?;
    r.finish()?;
    let plane = |k: usize| values[k * c * h * w..(k + 1) * c * h * w].iter().map(|&v| v as f64).collect();
    TriPlane::from_planes(h, c, [plane(0), plane(1), plane(2)])
}

pub fn save_triplane(tp: &TriPlane, path: &Path) -> Result<()> {
    write_file(path, &encode_triplane(tp))
}

pub fn load_triplane(path: &Path) -> Result<TriPlane> {
    decode_triplane(&read_file(path)?, path)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|source| Error::DatasetWrite { path: path.to_path_buf(), source })?;
    f.write_all(bytes).map_err(|source| Error::DatasetWrite { path: path.to_path_buf(), source })
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// A named tensor with its optimizer group.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub group: u32,
    pub tensor: Tensor,
}

/// Named tensors plus a JSON metadata string.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        put_string(&mut out, &self.metadata);
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_string(&mut out, &t.name);
            out.extend(t.group.to_le_bytes());
            let shape = t.tensor.shape();
            out.extend((shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend((d as u32).to_le_bytes());
            }
            put_f32s(&mut out, t.tensor.data().iter().copied());
        }
        out
    }

    pub fn decode(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, kind: "checkpoint", path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(format_err(r.kind, path, "bad magic"));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err(r.kind, path, format!("unsupported version {version}")));
        }
        let metadata = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let group = r.u32()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| format_err(r.kind, path, "shape overflow"))?;
            let data = r.f32s(n)?;
            tensors.push(NamedTensor { name, group, tensor: Tensor::new(&shape, data) });
        }
        r.finish()?;
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, path)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }
}

#[derive(Serialize, Deserialize)]
struct DenoiserMeta {
    kind: String,
    config: DenoiserConfig,
    /// Diffusion steps `T` of the schedule the model was trained with.
    t_max: usize,
}

#[derive(Serialize, Deserialize)]
struct DecoderMeta {
    kind: String,
    feature_len: usize,
}

pub fn denoiser_checkpoint(model: &Denoiser, t_max: usize) -> Checkpoint {
    let metadata =
        serde_json::to_string(&DenoiserMeta { kind: "denoiser".into(), config: model.config, t_max }).expect("serializable");
    let tensors = model
        .params
        .iter()
        .map(|(_, p)| NamedTensor { name: p.name.clone(), group: p.group as u32, tensor: p.value.clone() })
        .collect();
    Checkpoint { metadata, tensors }
}

/// The model and its schedule length `T`.
pub fn denoiser_from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(Denoiser, usize)> {
    let meta: DenoiserMeta = serde_json::from_str(&ck.metadata).map_err(|e| format_err("checkpoint", path, e.to_string()))?;
    if meta.kind != "denoiser" {
        return Err(format_err("checkpoint", path, format!("holds a {}, not a denoiser", meta.kind)));
    }
    let mut store = ParamStore::new();
    for t in &ck.tensors {
        store.add(t.name.clone(), t.tensor.clone(), t.group as usize);
    }
    Ok((Denoiser::from_params(meta.config, store)?, meta.t_max))
}

/// Decoder weights are stored as 32-bit floats; shared training quantizes them,
/// so the roundtrip is exact for trained decoders.
pub fn decoder_checkpoint(dec: &DecoderParams) -> Checkpoint {
    let metadata = serde_json::to_string(&DecoderMeta { kind: "decoder".into(), feature_len: dec.feature_len() }).expect("serializable");
    let tensor = Tensor::new(&[dec.len()], dec.params().iter().map(|&v| v as f32).collect());
    Checkpoint { metadata, tensors: vec![NamedTensor { name: "decoder".into(), group: 0, tensor }] }
}

pub fn decoder_from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<DecoderParams> {
    let meta: DecoderMeta = serde_json::from_str(&ck.metadata).map_err(|e| format_err("checkpoint", path, e.to_string()))?;
    if meta.kind != "decoder" {
        return Err(format_err("checkpoint", path, format!("holds a {}, not a decoder", meta.kind)));
    }
    let t = ck.tensor("decoder").ok_or_else(|| format_err("checkpoint", path, "missing tensor `decoder`"))?;
    DecoderParams::from_flat(meta.feature_len, t.data().iter().map(|&v| v as f64).collect())
}

/// Names the triplane files of a directory and their captions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TriplaneIndex {
    pub entries: Vec<IndexEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    /// Relative to the index file.
    pub file: String,
    pub caption: Caption,
    /// Dataset scene the triplane was fitted to, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<usize>,
}

impl TriplaneIndex {
    pub const FILE: &'static str = "index.json";

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        write_file(&dir.join(Self::FILE), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let text = String::from_utf8(read_file(&path)?).map_err(|_| format_err("index", &path, "invalid UTF-8"))?;
        serde_json::from_str(&text).map_err(|e| format_err("index", &path, e.to_string()))
    }

    /// Loads every listed triplane.
    pub fn triplanes(&self, dir: &Path) -> Result<Vec<TriPlane>> {
        self.entries.iter().map(|e| load_triplane(&dir.join(&e.file))).collect()
    }
}
