//! Binary model format and record sections.
//!
//! Model: `"HUFU" | u16 version | architecture | f32 parameters`, all little
//! endian, parameters in [`Model::for_each_param`] order. Records travel as
//! `"HFRC" | u16 version | u8 kind | u64 length | payload` sections, either
//! appended to a model file or on their own.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackRecord;
use crate::error::{Error, FormatError, Result};
use crate::nn::{Activation, Architecture, ConvKernel, ConvSpec, DenseLayer, FreezeMask, Model, Shape3, KERNEL_LEN};
use crate::restore::RestoreReport;
use crate::watermark::{Bitmap, EmbeddingRecord, Eph, HufuNet, Sph};

pub const MODEL_MAGIC: &[u8; 4] = b"HUFU";
pub const RECORD_MAGIC: &[u8; 4] = b"HFRC";
pub const FORMAT_VERSION: u16 = 1;

/// Largest dimension accepted when decoding, to keep corrupt headers from
/// triggering huge allocations.
const MAX_DIM: u32 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelAddress {
    pub layer: usize,
    pub out_channel: usize,
    pub in_channel: usize,
}

/// Position of `addr` in the canonical enumeration: layer, then output
/// channel, then input channel.
pub fn flat_index(arch: &Architecture, addr: KernelAddress) -> Result<usize> {
    let spec = arch.conv.get(addr.layer).ok_or_else(|| Error::OutOfRange(format!("layer {}", addr.layer)))?;
    let in_ch = arch.in_channels(addr.layer);
    if addr.out_channel >= spec.channels || addr.in_channel >= in_ch {
        return Err(Error::OutOfRange(format!("{addr:?}")));
    }
    let before: usize = (0..addr.layer).map(|l| arch.conv[l].channels * arch.in_channels(l)).sum();
    Ok(before + addr.out_channel * in_ch + addr.in_channel)
}

/// Inverse of [`flat_index`].
pub fn kernel_at(arch: &Architecture, index: usize) -> Result<KernelAddress> {
    let mut rest = index;
    for (l, spec) in arch.conv.iter().enumerate() {
        let in_ch = arch.in_channels(l);
        let count = spec.channels * in_ch;
        if rest < count {
            return Ok(KernelAddress { layer: l, out_channel: rest / in_ch, in_channel: rest % in_ch });
        }
        rest -= count;
    }
    Err(Error::OutOfRange(format!("kernel index {index} with {} kernels", arch.kernel_count())))
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, offset: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.offset
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated { offset: self.offset, needed: n - self.remaining() });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn dim(&mut self, what: &str) -> Result<usize, FormatError> {
        let v = self.u32()?;
        if v > MAX_DIM {
            return Err(FormatError::Corrupt(format!("{what} {v} exceeds limit")));
        }
        Ok(v as usize)
    }

    fn activation(&mut self) -> Result<Activation, FormatError> {
        let code = self.u8()?;
        Activation::from_code(code).ok_or_else(|| FormatError::Corrupt(format!("unknown activation code {code}")))
    }

    /// Reads `count` floats, rejecting NaN and infinities. `first` is the
    /// float index of the first value, used in error messages.
    fn floats(&mut self, count: usize, first: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| FormatError::Corrupt("size overflow".into()))?)?;
        bytes
            .chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = f32::from_le_bytes(c.try_into().expect("chunk of 4"));
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(FormatError::NonFinite(first + i))
                }
            })
            .collect()
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(u32::try_from(v).expect("dimension fits in u32")).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_architecture(out: &mut Vec<u8>, arch: &Architecture) {
    put_u32(out, arch.input.channels);
    put_u32(out, arch.input.height);
    put_u32(out, arch.input.width);
    put_u32(out, arch.conv.len());
    for spec in &arch.conv {
        put_u32(out, spec.channels);
        out.push(spec.activation.code());
    }
    put_u32(out, arch.classes);
    out.push(arch.head_activation.code());
}

fn read_architecture(r: &mut Reader<'_>) -> Result<Architecture, FormatError> {
    let input = Shape3::new(r.dim("channels")?, r.dim("height")?, r.dim("width")?);
    let layers = r.dim("layer count")?;
    // Each layer header is five bytes; refuse counts the input cannot hold.
    if layers.saturating_mul(5) > r.remaining() {
        return Err(FormatError::Truncated { offset: r.offset, needed: layers * 5 - r.remaining() });
    }
    let mut conv = Vec::with_capacity(layers);
    for _ in 0..layers {
        conv.push(ConvSpec { channels: r.dim("channel count")?, activation: r.activation()? });
    }
    let classes = r.dim("class count")?;
    let head_activation = r.activation()?;
    if input.is_empty() || conv.iter().any(|s| s.channels == 0) || classes == 0 {
        return Err(FormatError::Corrupt("zero-sized dimension".into()));
    }
    Ok(Architecture { input, conv, classes, head_activation })
}

fn parameter_count(arch: &Architecture) -> Option<usize> {
    let mut total = 0usize;
    for (l, spec) in arch.conv.iter().enumerate() {
        total = total.checked_add(spec.channels.checked_mul(arch.in_channels(l))?.checked_mul(KERNEL_LEN)?)?;
        total = total.checked_add(spec.channels)?;
    }
    let last = arch.conv.last().map_or(arch.input.channels, |s| s.channels);
    total.checked_add(arch.classes.checked_mul(last)?.checked_add(arch.classes)?)
}

fn to_kernels(values: &[f32]) -> Vec<ConvKernel> {
    values.chunks_exact(KERNEL_LEN).map(|c| ConvKernel(c.try_into().expect("chunk of 9"))).collect()
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * model.parameter_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    write_architecture(&mut out, &model.architecture());
    model.for_each_param(|v| out.extend_from_slice(&v.to_le_bytes()));
    out
}

fn check_header(r: &mut Reader<'_>, magic: &[u8; 4]) -> Result<(), FormatError> {
    let found = r.take(4.min(r.remaining()))?;
    if found != magic {
        return Err(FormatError::BadMagic(found.to_vec()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    Ok(())
}

fn read_model(r: &mut Reader<'_>) -> Result<Model, FormatError> {
    check_header(r, MODEL_MAGIC)?;
    let arch = read_architecture(r)?;
    let total = parameter_count(&arch).ok_or_else(|| FormatError::Corrupt("parameter count overflows".into()))?;
    if total.saturating_mul(4) > r.remaining() {
        return Err(FormatError::Truncated { offset: r.offset, needed: total * 4 - r.remaining() });
    }
    let mut model = Model::init(&arch, 0);
    let mut next = 0usize;
    for layer in model.conv_layers.iter_mut() {
        let n = layer.kernels.len() * KERNEL_LEN;
        layer.kernels = to_kernels(&r.floats(n, next)?);
        next += n;
    }
    for layer in model.conv_layers.iter_mut() {
        layer.bias = r.floats(layer.out_channels, next)?;
        next += layer.out_channels;
    }
    let n = model.head.weights.len();
    model.head.weights = r.floats(n, next)?;
    next += n;
    model.head.bias = r.floats(model.head.out_features, next)?;
    Ok(model)
}

/// Decodes a model, ignoring any record sections that follow it.
pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    Ok(read_model(&mut Reader::new(bytes))?)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Section {
    Embedding(EmbeddingRecord),
    Mask(FreezeMask),
    Attack(AttackRecord),
    Restore(RestoreReport),
    /// Test accuracy of a carrier when it was generated.
    CarrierMeta {
        acc_ori: f32,
    },
    Eph(Eph),
    Sph(Sph),
}

impl Section {
    fn kind(&self) -> u8 {
        match self {
            Section::Embedding(_) => 1,
            Section::Mask(_) => 2,
            Section::Attack(_) => 3,
            Section::Restore(_) => 4,
            Section::CarrierMeta { .. } => 5,
            Section::Eph(_) => 6,
            Section::Sph(_) => 7,
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Section::Embedding(rec) => {
                out.extend_from_slice(&rec.key_id);
                out.extend_from_slice(&(rec.host_kernels as u64).to_le_bytes());
                out.extend_from_slice(&(rec.positions.len() as u64).to_le_bytes());
                for &p in &rec.positions {
                    out.extend_from_slice(&(p as u64).to_le_bytes());
                }
                out.extend_from_slice(rec.bitmap.as_bytes());
            }
            Section::Mask(mask) => {
                out.push(u8::from(mask.freeze_rest));
                put_u32(&mut out, mask.kernels.len());
                for layer in &mask.kernels {
                    put_u32(&mut out, layer.len());
                    out.extend(layer.iter().map(|&f| u8::from(f)));
                }
            }
            Section::Attack(rec) => out = serde_json::to_vec(rec).expect("attack records serialize"),
            Section::Restore(rep) => out = serde_json::to_vec(rep).expect("restore reports serialize"),
            Section::CarrierMeta { acc_ori } => out.extend_from_slice(&acc_ori.to_le_bytes()),
            Section::Eph(eph) => {
                write_architecture(&mut out, &eph.carrier_arch);
                put_u32(&mut out, eph.kernels.len());
                put_f32s(&mut out, eph.kernels.iter().flat_map(|k| k.0));
            }
            Section::Sph(sph) => {
                put_u32(&mut out, sph.conv_biases.len());
                for b in &sph.conv_biases {
                    put_u32(&mut out, b.len());
                    put_f32s(&mut out, b.iter().copied());
                }
                put_u32(&mut out, sph.head.out_features);
                put_u32(&mut out, sph.head.in_features);
                out.push(sph.head.activation.code());
                put_f32s(&mut out, sph.head.weights.iter().copied());
                put_f32s(&mut out, sph.head.bias.iter().copied());
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(payload.len() + 15);
        out.extend_from_slice(RECORD_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.kind());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    fn decode_payload(kind: u8, payload: &[u8]) -> Result<Section> {
        let mut r = Reader::new(payload);
        let section = match kind {
            1 => {
                let key_id = r.array::<32>()?;
                let host_kernels = usize::try_from(r.u64()?).map_err(|_| FormatError::Corrupt("host size".into()))?;
                let count = r.u64()? as usize;
                if count.saturating_mul(8) > r.remaining() {
                    return Err(FormatError::Truncated { offset: r.offset, needed: count * 8 - r.remaining() }.into());
                }
                let positions = (0..count).map(|_| r.u64().map(|p| p as usize)).collect::<Result<Vec<_>, _>>()?;
                let words = r.take(host_kernels.div_ceil(8))?.to_vec();
                let rec = EmbeddingRecord {
                    key_id,
                    host_kernels,
                    positions,
                    bitmap: Bitmap::from_bytes(host_kernels, words)?,
                };
                rec.validate().map_err(|e| FormatError::Corrupt(e.to_string()))?;
                Section::Embedding(rec)
            }
            2 => {
                let freeze_rest = match r.u8()? {
                    0 => false,
                    1 => true,
                    v => return Err(FormatError::Corrupt(format!("flag byte {v}")).into()),
                };
                let layers = r.dim("mask layers")?;
                let mut kernels = Vec::with_capacity(layers.min(r.remaining()));
                for _ in 0..layers {
                    let n = r.dim("mask length")?;
                    let flags = r.take(n)?;
                    if flags.iter().any(|&b| b > 1) {
                        return Err(FormatError::Corrupt("mask flag out of range".into()).into());
                    }
                    kernels.push(flags.iter().map(|&b| b == 1).collect());
                }
                Section::Mask(FreezeMask { kernels, freeze_rest })
            }
            3 => Section::Attack(
                serde_json::from_slice(payload).map_err(|e| FormatError::Corrupt(format!("attack record: {e}")))?,
            ),
            4 => Section::Restore(
                serde_json::from_slice(payload).map_err(|e| FormatError::Corrupt(format!("restore report: {e}")))?,
            ),
            5 => {
                let acc_ori = f32::from_le_bytes(r.array()?);
                if !acc_ori.is_finite() {
                    return Err(FormatError::NonFinite(0).into());
                }
                Section::CarrierMeta { acc_ori }
            }
            6 => {
                let carrier_arch = read_architecture(&mut r)?;
                let n = r.dim("kernel count")?;
                if n != carrier_arch.kernel_count() {
                    return Err(FormatError::Corrupt("EPH kernel count does not match its architecture".into()).into());
                }
                let kernels = to_kernels(&r.floats(n * KERNEL_LEN, 0)?);
                Section::Eph(Eph { kernels, carrier_arch })
            }
            7 => {
                let layers = r.dim("bias layers")?;
                let mut conv_biases = Vec::with_capacity(layers.min(r.remaining()));
                let mut next = 0;
                for _ in 0..layers {
                    let n = r.dim("bias length")?;
                    conv_biases.push(r.floats(n, next)?);
                    next += n;
                }
                let out_features = r.dim("head outputs")?;
                let in_features = r.dim("head inputs")?;
                let activation = r.activation()?;
                let weights = r.floats(out_features * in_features, next)?;
                let bias = r.floats(out_features, next + weights.len())?;
                Section::Sph(Sph {
                    head: DenseLayer { out_features, in_features, weights, bias, activation },
                    conv_biases,
                })
            }
            k => return Err(FormatError::Corrupt(format!("unknown section kind {k}")).into()),
        };
        if r.remaining() != 0 && !matches!(kind, 3 | 4) {
            return Err(FormatError::Corrupt(format!("{} trailing bytes in section", r.remaining())).into());
        }
        Ok(section)
    }
}

fn read_sections(r: &mut Reader<'_>) -> Result<Vec<Section>> {
    let mut out = Vec::new();
    while r.remaining() > 0 {
        check_header(r, RECORD_MAGIC)?;
        let kind = r.u8()?;
        let len = usize::try_from(r.u64()?).map_err(|_| FormatError::Corrupt("section length".into()))?;
        let payload = r.take(len)?;
        out.push(Section::decode_payload(kind, payload)?);
    }
    Ok(out)
}

pub fn encode_sections(sections: &[Section]) -> Vec<u8> {
    sections.iter().flat_map(Section::encode).collect()
}

/// Decodes a standalone record file: one or more sections back to back.
pub fn decode_sections(bytes: &[u8]) -> Result<Vec<Section>> {
    let sections = read_sections(&mut Reader::new(bytes))?;
    if sections.is_empty() {
        return Err(FormatError::Truncated { offset: 0, needed: 4 }.into());
    }
    Ok(sections)
}

/// A model plus whatever record sections were stored with it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub model: Model,
    pub sections: Vec<Section>,
}

impl ModelFile {
    pub fn new(model: Model) -> Self {
        Self { model, sections: Vec::new() }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = encode_model(&self.model);
        out.extend(encode_sections(&self.sections));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let model = read_model(&mut r)?;
        let sections = read_sections(&mut r)?;
        Ok(Self { model, sections })
    }

    pub fn embedding_record(&self) -> Option<&EmbeddingRecord> {
        self.sections.iter().find_map(|s| match s {
            Section::Embedding(r) => Some(r),
            _ => None,
        })
    }

    pub fn freeze_mask(&self) -> Option<&FreezeMask> {
        self.sections.iter().find_map(|s| match s {
            Section::Mask(m) => Some(m),
            _ => None,
        })
    }

    pub fn acc_ori(&self) -> Option<f32> {
        self.sections.iter().find_map(|s| match s {
            Section::CarrierMeta { acc_ori } => Some(*acc_ori),
            _ => None,
        })
    }

    /// Interprets the file as a carrier: requires a carrier metadata section.
    pub fn into_hufunet(self) -> Result<HufuNet> {
        let acc_ori = self
            .acc_ori()
            .ok_or_else(|| Error::InvalidArgument("model file carries no carrier accuracy section".into()))?;
        Ok(HufuNet { model: self.model, acc_ori })
    }

    pub fn from_hufunet(hufu: &HufuNet) -> Self {
        Self { model: hufu.model.clone(), sections: vec![Section::CarrierMeta { acc_ori: hufu.acc_ori }] }
    }
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, encode_model(model))?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    decode_model(&std::fs::read(path)?)
}

pub fn save_model_file(file: &ModelFile, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, file.encode())?)
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<ModelFile> {
    ModelFile::decode(&std::fs::read(path)?)
}

pub fn save_sections(sections: &[Section], path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, encode_sections(sections))?)
}

pub fn load_sections(path: impl AsRef<Path>) -> Result<Vec<Section>> {
    decode_sections(&std::fs::read(path)?)
}
