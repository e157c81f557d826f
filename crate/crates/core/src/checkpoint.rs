//! Binary checkpoint format.
//!
//! ```text
//! header   "SEFT" | u16 version (1)
//! record   u16 name_len | name (UTF-8) | u8 kind | u8 rank | u32 dims[rank] | payload
//!   kind 0 dense  f32 x numel
//!   kind 1 mask   ceil(numel / 8) bytes, row-major, LSB-first
//!   kind 2 delta  u32 count | (u32 index, f32 value) x count, ascending
//! ```
//!
//! Everything is little-endian. A mask or delta record carries the name of
//! the weight it belongs to. The first record is always the dense
//! `meta.arch` descriptor so a file can be loaded without outside context:
//! `[1, vocab, dim, heads, blocks, ff_mult, context]` for a transformer,
//! `[0, d0, d1, ...]` for an MLP. `meta.pattern` holds `[n, m]` (`[0, 0]`
//! when unstructured). Adapters, if any, follow as dense records named
//! `<weight>.lora_a`, `<weight>.lora_b` and `<weight>.lora_scale`.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::adaptation::{merged_sparsity, support_size};
use crate::autodiff::Tensor;
use crate::baselines::LoraAdapter;
use crate::delta::{merged_params, DeltaTensor, SparseDelta};
use crate::error::{Error, Result};
use crate::model::{build_mlp, build_transformer, Architecture, ModelConfig, ParamTree};
use crate::pruner::{Mask, MaskSet, Pattern};

pub const MAGIC: &[u8; 4] = b"SEFT";
pub const VERSION: u16 = 1;

const KIND_DENSE: u8 = 0;
const KIND_MASK: u8 = 1;
const KIND_DELTA: u8 = 2;

const META_ARCH: &str = "meta.arch";
const META_PATTERN: &str = "meta.pattern";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub pattern: Pattern,
    /// Dense weights. For a sparse checkpoint these are the retained
    /// pretrained values; the evaluated model is `params * mask + delta`.
    pub params: ParamTree<f32>,
    pub masks: MaskSet,
    pub delta: SparseDelta<f32>,
    pub adapters: IndexMap<String, LoraAdapter<f32>>,
}

impl Checkpoint {
    pub fn dense(arch: Architecture, params: ParamTree<f32>) -> Self {
        Self {
            arch,
            pattern: Pattern::Unstructured,
            params,
            masks: MaskSet::new(),
            delta: SparseDelta::new(),
            adapters: IndexMap::new(),
        }
    }

    /// The weights the model evaluates: `params * mask + delta`, with any
    /// adapters folded in.
    pub fn merged_params(&self) -> Result<ParamTree<f32>> {
        let mut out = merged_params(&self.params, &self.masks, &self.delta)?;
        for (name, ad) in &self.adapters {
            let p = out.get_mut(name)?;
            p.tensor = ad.merge_into(&p.tensor)?;
        }
        Ok(out)
    }

    /// Dense-format equivalent: merged weights, no masks, no delta.
    pub fn merge(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            arch: self.arch.clone(),
            pattern: self.pattern,
            params: self.merged_params()?,
            masks: MaskSet::new(),
            delta: SparseDelta::new(),
            adapters: IndexMap::new(),
        })
    }

    /// Masks rebuilt from the nonzeros of the dense weights, empty delta.
    pub fn resplit(&self) -> Result<Checkpoint> {
        let params = self.merged_params()?;
        let mut masks = MaskSet::new();
        for (name, w) in params.named_prunable() {
            let (r, c) = w.dims2()?;
            let bits = w.data().iter().map(|&v| v != 0.0).collect();
            masks.insert(name.to_string(), Mask::new(name, r, c, bits, self.pattern)?);
        }
        Ok(Checkpoint {
            arch: self.arch.clone(),
            pattern: self.pattern,
            params,
            masks,
            delta: SparseDelta::new(),
            adapters: IndexMap::new(),
        })
    }

    /// Global support-based sparsity over masked tensors, or nonzero-based
    /// over prunable tensors when there are no masks.
    pub fn sparsity(&self) -> Result<f64> {
        if !self.masks.is_empty() {
            return Ok(merged_sparsity(&self.masks, &self.delta).1);
        }
        let merged = self.merged_params()?;
        let (mut nz, mut total) = (0usize, 0usize);
        for (_, w) in merged.named_prunable() {
            nz += w.count_nonzero();
            total += w.numel();
        }
        Ok(if total == 0 { 0.0 } else { 1.0 - nz as f64 / total as f64 })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u16(VERSION);
        let arch = encode_arch(&self.arch);
        w.dense(META_ARCH, &[arch.len()], &arch)?;
        let pat = match self.pattern {
            Pattern::Unstructured => [0.0, 0.0],
            Pattern::NM { n, m } => [n as f32, m as f32],
        };
        w.dense(META_PATTERN, &[2], &pat)?;
        for (name, p) in self.params.iter() {
            w.dense(name, p.tensor.shape(), p.tensor.data())?;
            if let Some(m) = self.masks.get(name) {
                w.header(name, KIND_MASK, &[m.rows, m.cols])?;
                let mut bytes = vec![0u8; m.numel().div_ceil(8)];
                for (i, &on) in m.bits().iter().enumerate() {
                    if on {
                        bytes[i / 8] |= 1 << (i % 8);
                    }
                }
                w.buf.extend_from_slice(&bytes);
            }
            if let Some(d) = self.delta.get(name) {
                w.header(name, KIND_DELTA, d.shape())?;
                w.u32(d.len() as u32);
                for (&i, &v) in d.indices().iter().zip(d.values()) {
                    w.u32(i);
                    w.buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        for (name, ad) in &self.adapters {
            w.dense(&format!("{name}.lora_a"), ad.a.shape(), ad.a.data())?;
            w.dense(&format!("{name}.lora_b"), ad.b.shape(), ad.b.data())?;
            w.dense(&format!("{name}.lora_scale"), &[1], &[ad.scale as f32])?;
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error_at(0, "bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }

        let first = r.pos;
        let rec = r.record()?;
        if rec.name != META_ARCH || rec.kind != KIND_DENSE {
            return Err(r.error_at(first, "first record must be the dense `meta.arch`"));
        }
        let arch = decode_arch(&r.dense_payload(&rec)?).map_err(|m| r.error_at(first, m))?;
        let mut params = skeleton(&arch).map_err(|e| r.error_at(first, e.to_string()))?;

        let mut pattern = Pattern::Unstructured;
        let mut masks = MaskSet::new();
        let mut delta = SparseDelta::new();
        let mut seen = std::collections::HashSet::new();
        let mut adapter_parts: IndexMap<String, [Option<Tensor<f32>>; 3]> = IndexMap::new();

        while !r.at_end() {
            let start = r.pos;
            let rec = r.record()?;
            if !seen.insert((rec.name.clone(), rec.kind)) {
                return Err(r.error_at(start, format!("duplicate record `{}`", rec.name)));
            }
            let numel: usize = rec.dims.iter().product();
            match rec.kind {
                KIND_DENSE if rec.name == META_PATTERN => {
                    let v = r.dense_payload(&rec)?;
                    pattern = match v.as_slice() {
                        [a, b] if *a == 0.0 && *b == 0.0 => Pattern::Unstructured,
                        [n, m] => {
                            let p = Pattern::NM {
                                n: *n as usize,
                                m: *m as usize,
                            };
                            p.validate().map_err(|e| r.error_at(start, e.to_string()))?;
                            p
                        }
                        _ => return Err(r.error_at(start, "malformed `meta.pattern`")),
                    };
                }
                KIND_DENSE => {
                    let data = r.dense_payload(&rec)?;
                    let t = Tensor::new(rec.dims.clone(), data).map_err(|e| r.error_at(start, e.to_string()))?;
                    if let Some((base, slot)) = adapter_slot(&rec.name) {
                        adapter_parts.entry(base.to_string()).or_default()[slot] = Some(t);
                        continue;
                    }
                    let p = params
                        .get_mut(&rec.name)
                        .map_err(|_| r.error_at(start, format!("unexpected tensor `{}`", rec.name)))?;
                    if p.tensor.shape() != rec.dims.as_slice() {
                        return Err(r.error_at(start, format!("shape {:?} of `{}` does not match the architecture", rec.dims, rec.name)));
                    }
                    p.tensor = t;
                }
                KIND_MASK => {
                    let (rows, cols) = match rec.dims.as_slice() {
                        &[a, b] => (a, b),
                        _ => return Err(r.error_at(start, "mask record must be 2-D")),
                    };
                    let nbytes = numel.div_ceil(8);
                    let payload = r.pos;
                    let raw = r.take(nbytes)?;
                    let bits: Vec<bool> = (0..numel).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect();
                    if numel % 8 != 0 && raw[nbytes - 1] >> (numel % 8) != 0 {
                        return Err(r.error_at(payload + nbytes - 1, "nonzero mask padding bits"));
                    }
                    masks.insert(rec.name.clone(), Mask::new(rec.name.clone(), rows, cols, bits, Pattern::Unstructured)?);
                }
                KIND_DELTA => {
                    let count = r.u32()? as usize;
                    let mut idx = Vec::with_capacity(count.min(numel));
                    let mut vals = Vec::with_capacity(count.min(numel));
                    for _ in 0..count {
                        let at = r.pos;
                        let i = r.u32()?;
                        if i as usize >= numel || idx.last().is_some_and(|&p| p >= i) {
                            return Err(r.error_at(at, format!("delta index {i} out of order or range")));
                        }
                        idx.push(i);
                        vals.push(r.f32()?);
                    }
                    let d = DeltaTensor::from_entries(rec.dims.clone(), count, idx, vals)
                        .map_err(|e| r.error_at(start, e.to_string()))?;
                    delta.insert(rec.name.clone(), d)?;
                }
                k => return Err(r.error_at(start, format!("unknown record kind {k}"))),
            }
        }

        for m in masks.values_mut() {
            m.pattern = pattern;
        }
        for (name, _) in masks.iter().map(|(k, v)| (k.clone(), v)).collect::<Vec<_>>() {
            check_attached(&params, &name, "mask", bytes.len())?;
        }
        for name in delta.iter().map(|(k, _)| k.to_string()).collect::<Vec<_>>() {
            check_attached(&params, &name, "delta", bytes.len())?;
            if !masks.contains_key(&name) {
                return Err(Error::Format {
                    offset: bytes.len(),
                    msg: format!("delta on `{name}` has no mask"),
                });
            }
        }
        let mut adapters = IndexMap::new();
        for (name, parts) in adapter_parts {
            match parts {
                [Some(a), Some(b), Some(s)] => {
                    check_attached(&params, &name, "adapter", bytes.len())?;
                    adapters.insert(name, LoraAdapter::new(a, b, s.data()[0] as f64)?);
                }
                _ => {
                    return Err(Error::Format {
                        offset: bytes.len(),
                        msg: format!("incomplete adapter for `{name}`"),
                    })
                }
            }
        }
        Ok(Checkpoint {
            arch,
            pattern,
            params,
            masks,
            delta,
            adapters,
        })
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        let file_name = path
            .file_name()
            .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path).inspect_err(|_| {
            let _ = fs::remove_file(&tmp);
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_attached(params: &ParamTree<f32>, name: &str, what: &str, offset: usize) -> Result<()> {
    match params.get(name) {
        Ok(p) if p.prunable => Ok(()),
        _ => Err(Error::Format {
            offset,
            msg: format!("{what} attached to non-prunable or unknown tensor `{name}`"),
        }),
    }
}

fn adapter_slot(name: &str) -> Option<(&str, usize)> {
    [".lora_a", ".lora_b", ".lora_scale"]
        .iter()
        .enumerate()
        .find_map(|(i, suffix)| name.strip_suffix(suffix).map(|b| (b, i)))
}

/// Parameter tree with the architecture's names, shapes and prunable
/// flags; values are placeholders until records overwrite them.
fn skeleton(arch: &Architecture) -> Result<ParamTree<f32>> {
    Ok(match arch {
        Architecture::Transformer(c) => build_transformer(c)?.params,
        Architecture::Mlp(c) => build_mlp(&c.dims, 0)?.params,
    })
}

fn encode_arch(arch: &Architecture) -> Vec<f32> {
    match arch {
        Architecture::Transformer(c) => [1, c.vocab, c.dim, c.heads, c.blocks, c.ff_mult, c.context]
            .iter()
            .map(|&v| v as f32)
            .collect(),
        Architecture::Mlp(c) => std::iter::once(0.0).chain(c.dims.iter().map(|&d| d as f32)).collect(),
    }
}

fn decode_arch(v: &[f32]) -> std::result::Result<Architecture, String> {
    let ints: Vec<usize> = v
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && x < 16_777_216.0 {
                Ok(x as usize)
            } else {
                Err(format!("non-integer architecture field {x}"))
            }
        })
        .collect::<std::result::Result<_, _>>()?;
    match ints.as_slice() {
        [1, vocab, dim, heads, blocks, ff_mult, context] => Ok(Architecture::Transformer(ModelConfig {
            vocab: *vocab,
            dim: *dim,
            heads: *heads,
            blocks: *blocks,
            ff_mult: *ff_mult,
            context: *context,
            seed: 0,
        })),
        [0, dims @ ..] if dims.len() >= 2 => Ok(Architecture::Mlp(crate::model::MlpConfig {
            dims: dims.to_vec(),
            seed: 0,
        })),
        _ => Err("malformed `meta.arch`".into()),
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn header(&mut self, name: &str, kind: u8, dims: &[usize]) -> Result<()> {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("name too long: {name}")))?;
        let rank = u8::try_from(dims.len()).map_err(|_| Error::invalid("rank above 255"))?;
        self.u16(len);
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.push(kind);
        self.buf.push(rank);
        for &d in dims {
            self.u32(u32::try_from(d).map_err(|_| Error::invalid("dimension above u32"))?);
        }
        Ok(())
    }

    fn dense(&mut self, name: &str, dims: &[usize], data: &[f32]) -> Result<()> {
        self.header(name, KIND_DENSE, dims)?;
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }
}

struct Record {
    name: String,
    kind: u8,
    dims: Vec<usize>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.error_at(self.pos, format!("truncated: wanted {n} bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn record(&mut self) -> Result<Record> {
        let len = self.u16()? as usize;
        let at = self.pos;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| self.error_at(at, "record name is not UTF-8"))?
            .to_string();
        let kind = self.u8()?;
        let rank = self.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        Ok(Record { name, kind, dims })
    }

    fn dense_payload(&mut self, rec: &Record) -> Result<Vec<f32>> {
        let numel = rec
            .dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| self.error_at(self.pos, "dimension overflow"))?;
        let bytes = numel
            .checked_mul(4)
            .ok_or_else(|| self.error_at(self.pos, "dimension overflow"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Per-tensor audit line for `inspect`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorAudit {
    pub name: String,
    pub numel: usize,
    pub nonzeros: usize,
    pub support: usize,
    pub delta_entries: usize,
    /// Flat offsets of aligned groups over the pattern's limit.
    pub nm_violations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Audit {
    pub tensors: Vec<TensorAudit>,
    pub global_sparsity: f64,
    pub delta_entries: usize,
    pub pattern: Option<Pattern>,
}

impl Audit {
    pub fn violations(&self) -> usize {
        self.tensors.iter().map(|t| t.nm_violations.len()).sum()
    }
}

/// Nonzeros of the merged weights, support size, delta size and N:M
/// validity for every prunable tensor.
pub fn audit(ckpt: &Checkpoint, pattern: Option<Pattern>) -> Result<Audit> {
    let pattern = pattern.or(match ckpt.pattern {
        Pattern::Unstructured => None,
        p => Some(p),
    });
    let merged = ckpt.merged_params()?;
    let mut tensors = Vec::new();
    for (name, w) in merged.named_prunable() {
        let (_, cols) = w.dims2()?;
        let nonzero: Vec<bool> = w.data().iter().map(|&v| v != 0.0).collect();
        let nonzeros = nonzero.iter().filter(|&&b| b).count();
        let support = match ckpt.masks.get(name) {
            Some(m) => support_size(m, ckpt.delta.get(name)),
            None => nonzeros,
        };
        let nm_violations = match pattern {
            Some(Pattern::NM { n, m }) => crate::pruner::nm_violations(&nonzero, cols, n, m),
            _ => Vec::new(),
        };
        tensors.push(TensorAudit {
            name: name.to_string(),
            numel: w.numel(),
            nonzeros,
            support,
            delta_entries: ckpt.delta.get(name).map_or(0, |d| d.len()),
            nm_violations,
        });
    }
    Ok(Audit {
        tensors,
        global_sparsity: ckpt.sparsity()?,
        delta_entries: ckpt.delta.total_entries(),
        pattern,
    })
}
