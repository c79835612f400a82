//! Binary model files.
//!
//! All integers are little-endian, all floats IEEE-754 `f32`.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "QNN1"
//! 4       4     format version (1)
//! 8       4     input_dim
//! 12      4     n_classes
//! 16      8     seed
//! 24      4     training phase (0 initial, 1 float, 2 quant-aware)
//! 28      4     LSTM layer count L
//! 32      12·L  per layer: cells, projection size (0 = none), flags
//! 32+12L  4     output layer flags
//! ...           tensor records
//! ```
//!
//! Layer flags: bit 0 quantization enabled, bit 1 shadows stored, bit 2
//! masters stored. Every other bit must be zero.
//!
//! Records follow in a fixed order. For each LSTM layer and each gate
//! (input, forget, cell, output): input weight, recurrent weight, bias;
//! then the projection weight if present. The output weight and bias come
//! last. A weight contributes its master record (if masters are stored)
//! followed by its shadow record (if shadows are stored). Biases are
//! always one float record of shape `1 × n`.
//!
//! ```text
//! tag u8 (0 float, 1 quantized), rows u32, cols u32, then
//!   float:     rows·cols × f32
//!   quantized: v_min f32, v_max f32, scale u32, rows·cols code bytes
//! ```
//!
//! `Q` and the offset code are recomputed from `v_min`, `v_max` and the
//! scale on load; they are never stored.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use qnn_core::nn::{Activation, FcLayer, GateParams, LstmLayer, ModelMeta, TrainingPhase, Weight};
use qnn_core::{FloatMatrix, Model, QuantParams, QuantizedMatrix};

pub const MAGIC: [u8; 4] = *b"QNN1";
pub const FORMAT_VERSION: u32 = 1;

pub const FLAG_QUANTIZE: u32 = 1;
pub const FLAG_SHADOWS: u32 = 1 << 1;
pub const FLAG_MASTERS: u32 = 1 << 2;
const KNOWN_FLAGS: u32 = FLAG_QUANTIZE | FLAG_SHADOWS | FLAG_MASTERS;

pub const TAG_FLOAT: u8 = 0;
pub const TAG_QUANTIZED: u8 = 1;

/// Bytes of a record before its payload: tag, rows, cols.
pub const RECORD_HEADER_BYTES: usize = 9;
/// Extra bytes of a quantized record: v_min, v_max, scale.
pub const QUANT_PARAMS_BYTES: usize = 12;

/// A malformed file. Offsets are byte positions in the file.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic at offset {offset}: expected \"QNN1\", found {found:?}")]
    BadMagic { offset: usize, found: Vec<u8> },

    #[error("unsupported format version {version} at offset {offset}")]
    UnsupportedVersion { offset: usize, version: u32 },

    #[error("file truncated in the header at offset {offset}")]
    TruncatedHeader { offset: usize },

    #[error("invalid header field at offset {offset}: {reason}")]
    InvalidHeader { offset: usize, reason: String },

    #[error("tensor {tensor} truncated at offset {offset}")]
    TruncatedTensor { tensor: usize, offset: usize },

    #[error("tensor {tensor} at offset {offset}: {reason}")]
    InvalidTensor {
        tensor: usize,
        offset: usize,
        reason: String,
    },

    #[error("{count} trailing bytes after the last tensor at offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
}

#[derive(Debug, thiserror::Error)]
pub enum ModelIoError {
    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(#[from] FormatError),

    #[error("tensor {tensor} holds a non-finite value; refusing to write")]
    NonFinite { tensor: usize },

    #[error("tensor {tensor} is not exactly representable as f32; call Model::round_to_f32 before saving")]
    NotF32 { tensor: usize },

    #[error("layer {layer} mixes weights with and without {what}")]
    MixedStorage { layer: usize, what: &'static str },

    #[error(transparent)]
    Model(#[from] qnn_core::Error),
}

pub type Result<T, E = ModelIoError> = std::result::Result<T, E>;

/// One tensor record as laid out in a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordInfo {
    pub index: usize,
    pub offset: usize,
    pub tag: u8,
    pub rows: usize,
    pub cols: usize,
    /// Value bytes only: `4·rows·cols` for floats, `rows·cols` for codes.
    pub payload_bytes: usize,
}

// ---------------------------------------------------------------- writing

struct Encoder {
    out: Vec<u8>,
    tensor: usize,
}

impl Encoder {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| qnn_core::Error::InvalidArgument(format!("{v} exceeds u32")))?;
        self.out.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f32(&mut self, v: f64) -> Result<()> {
        if !v.is_finite() {
            return Err(ModelIoError::NonFinite {
                tensor: self.tensor,
            });
        }
        let x = v as f32;
        if x as f64 != v {
            return Err(ModelIoError::NotF32 {
                tensor: self.tensor,
            });
        }
        self.out.extend_from_slice(&x.to_le_bytes());
        Ok(())
    }

    fn float(&mut self, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
        self.out.push(TAG_FLOAT);
        self.u32(rows)?;
        self.u32(cols)?;
        for &v in values {
            self.f32(v)?;
        }
        self.tensor += 1;
        Ok(())
    }

    fn quantized(&mut self, q: &QuantizedMatrix) -> Result<()> {
        self.out.push(TAG_QUANTIZED);
        self.u32(q.rows())?;
        self.u32(q.cols())?;
        let p = q.params();
        self.f32(p.v_min())?;
        self.f32(p.v_max())?;
        self.u32(p.scale() as usize)?;
        self.out.extend_from_slice(q.codes());
        self.tensor += 1;
        Ok(())
    }

    fn weight(&mut self, w: &Weight, flags: u32) -> Result<()> {
        if flags & FLAG_MASTERS != 0 {
            let m = w.master().expect("flags checked");
            self.float(m.rows(), m.cols(), m.as_slice())?;
        }
        if flags & FLAG_SHADOWS != 0 {
            self.quantized(w.shadow().expect("flags checked"))?;
        }
        Ok(())
    }
}

fn storage_flags(layer: usize, quantize: bool, weights: &[&Weight]) -> Result<u32> {
    let uniform = |what: &'static str, has: fn(&Weight) -> bool| -> Result<bool> {
        let n = weights.len();
        match weights.iter().filter(|w| has(w)).count() {
            0 => Ok(false),
            k if k == n => Ok(true),
            _ => Err(ModelIoError::MixedStorage { layer, what }),
        }
    };
    let mut flags = 0;
    if quantize {
        flags |= FLAG_QUANTIZE;
    }
    if uniform("shadows", |w| w.shadow().is_some())? {
        flags |= FLAG_SHADOWS;
    }
    if uniform("masters", |w| w.master().is_some())? {
        flags |= FLAG_MASTERS;
    }
    Ok(flags)
}

/// Serializes `model`. Every stored value must be finite and exactly
/// representable as `f32` (see [`Model::round_to_f32`]).
pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let layers = model.layers();
    let mut flags = Vec::with_capacity(layers.len() + 1);
    for (l, layer) in layers.iter().enumerate() {
        flags.push(storage_flags(
            l,
            layer.quantize_enabled,
            &layer.weights().collect::<Vec<_>>(),
        )?);
    }
    let out_layer = model.output();
    flags.push(storage_flags(
        layers.len(),
        out_layer.quantize_enabled,
        &[&out_layer.weight],
    )?);

    let mut e = Encoder {
        out: Vec::new(),
        tensor: 0,
    };
    e.out.extend_from_slice(&MAGIC);
    e.out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    e.u32(model.meta.input_dim)?;
    e.u32(model.meta.n_classes)?;
    e.out.extend_from_slice(&model.meta.seed.to_le_bytes());
    e.out
        .extend_from_slice(&model.meta.phase.code().to_le_bytes());
    e.u32(layers.len())?;
    for (layer, &f) in layers.iter().zip(&flags) {
        e.u32(layer.cells())?;
        e.u32(layer.projection_dim().unwrap_or(0))?;
        e.out.extend_from_slice(&f.to_le_bytes());
    }
    e.out.extend_from_slice(&flags[layers.len()].to_le_bytes());

    for (layer, &f) in layers.iter().zip(&flags) {
        for g in &layer.gates {
            e.weight(&g.input, f)?;
            e.weight(&g.recurrent, f)?;
            e.float(1, g.bias.len(), &g.bias)?;
        }
        if let Some(p) = &layer.projection {
            e.weight(p, f)?;
        }
    }
    e.weight(&out_layer.weight, flags[layers.len()])?;
    e.float(1, out_layer.bias.len(), &out_layer.bias)?;
    Ok(e.out)
}

/// Writes `model` to `dest` and returns the number of bytes written.
/// Nothing is written if the model cannot be encoded.
pub fn save_model<W: Write>(model: &Model, mut dest: W) -> Result<u64> {
    let bytes = encode_model(model)?;
    dest.write_all(&bytes)?;
    dest.flush()?;
    Ok(bytes.len() as u64)
}

pub fn save_model_file(model: &Model, path: impl AsRef<Path>) -> Result<u64> {
    let bytes = encode_model(model)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(bytes.len() as u64)
}

// ---------------------------------------------------------------- reading

struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    tensor: usize,
    records: Vec<RecordInfo>,
}

impl<'a> Decoder<'a> {
    fn take_header(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or(FormatError::TruncatedHeader { offset: self.pos })?;
        self.pos += n;
        Ok(s)
    }

    fn header_u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take_header(4)?.try_into().unwrap()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(FormatError::TruncatedTensor {
            tensor: self.tensor,
            offset: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn invalid(&self, offset: usize, reason: impl Into<String>) -> FormatError {
        FormatError::InvalidTensor {
            tensor: self.tensor,
            offset,
            reason: reason.into(),
        }
    }

    fn f32(&mut self) -> Result<f64, FormatError> {
        let at = self.pos;
        let v = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(self.invalid(at, "non-finite value"));
        }
        Ok(v as f64)
    }

    /// Reads a record header and checks it against the expected tag and shape.
    fn record(&mut self, tag: u8, rows: usize, cols: usize) -> Result<usize, FormatError> {
        let start = self.pos;
        let found = self.take(1)?[0];
        let r = self.u32()? as usize;
        let c = self.u32()? as usize;
        if found != tag {
            return Err(self.invalid(start, format!("expected tag {tag}, found {found}")));
        }
        if (r, c) != (rows, cols) {
            return Err(self.invalid(
                start,
                format!("expected shape {rows}x{cols}, found {r}x{c}"),
            ));
        }
        let payload_bytes = if tag == TAG_FLOAT { 4 * r * c } else { r * c };
        self.records.push(RecordInfo {
            index: self.tensor,
            offset: start,
            tag,
            rows,
            cols,
            payload_bytes,
        });
        Ok(start)
    }

    fn float(&mut self, rows: usize, cols: usize) -> Result<Vec<f64>, FormatError> {
        self.record(TAG_FLOAT, rows, cols)?;
        let values = (0..rows * cols)
            .map(|_| self.f32())
            .collect::<Result<_, _>>()?;
        self.tensor += 1;
        Ok(values)
    }

    fn quantized(&mut self, rows: usize, cols: usize) -> Result<QuantizedMatrix, FormatError> {
        let start = self.record(TAG_QUANTIZED, rows, cols)?;
        let v_min = self.f32()?;
        let v_max = self.f32()?;
        let scale = self.u32()?;
        let codes = self.take(rows * cols)?.to_vec();
        let q = QuantParams::from_range(v_min, v_max, scale)
            .and_then(|p| QuantizedMatrix::new(rows, cols, codes, p))
            .map_err(|e| self.invalid(start, e.to_string()))?;
        self.tensor += 1;
        Ok(q)
    }

    fn weight(&mut self, rows: usize, cols: usize, flags: u32) -> Result<Weight, FormatError> {
        let start = self.pos;
        let master = if flags & FLAG_MASTERS != 0 {
            let values = self.float(rows, cols)?;
            Some(
                FloatMatrix::new(rows, cols, values)
                    .map_err(|e| self.invalid(start, e.to_string()))?,
            )
        } else {
            None
        };
        let shadow = if flags & FLAG_SHADOWS != 0 {
            Some(self.quantized(rows, cols)?)
        } else {
            None
        };
        Weight::from_parts(master, shadow).map_err(|e| self.invalid(start, e.to_string()))
    }
}

fn dim(d: &mut Decoder<'_>, name: &str, allow_zero: bool) -> Result<usize, FormatError> {
    let at = d.pos;
    let v = d.header_u32()?;
    if v == 0 && !allow_zero {
        return Err(FormatError::InvalidHeader {
            offset: at,
            reason: format!("{name} must be positive"),
        });
    }
    Ok(v as usize)
}

fn layer_flags(d: &mut Decoder<'_>) -> Result<u32, FormatError> {
    let at = d.pos;
    let f = d.header_u32()?;
    let invalid = |reason: &str| FormatError::InvalidHeader {
        offset: at,
        reason: reason.to_string(),
    };
    if f & !KNOWN_FLAGS != 0 {
        return Err(invalid(&format!("unknown flag bits {f:#x}")));
    }
    if f & (FLAG_SHADOWS | FLAG_MASTERS) == 0 {
        return Err(invalid("a layer must store masters or shadows"));
    }
    Ok(f)
}

struct Parsed {
    model: Model,
    records: Vec<RecordInfo>,
}

fn parse(bytes: &[u8]) -> Result<Parsed, ModelIoError> {
    let mut d = Decoder {
        bytes,
        pos: 0,
        tensor: 0,
        records: Vec::new(),
    };
    let magic = d.bytes.get(..4);
    if magic != Some(&MAGIC[..]) {
        return Err(FormatError::BadMagic {
            offset: 0,
            found: bytes[..bytes.len().min(4)].to_vec(),
        }
        .into());
    }
    d.pos = 4;
    let version = d.header_u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion { offset: 4, version }.into());
    }
    let input_dim = dim(&mut d, "input_dim", false)?;
    let n_classes = dim(&mut d, "n_classes", false)?;
    let seed = u64::from_le_bytes(d.take_header(8)?.try_into().unwrap());
    let phase_at = d.pos;
    let phase_code = d.header_u32()?;
    let phase = TrainingPhase::from_code(phase_code).ok_or_else(|| FormatError::InvalidHeader {
        offset: phase_at,
        reason: format!("unknown training phase {phase_code}"),
    })?;
    let n_layers = dim(&mut d, "layer count", true)?;
    // Each descriptor takes 12 bytes; reject counts the file cannot hold
    // before allocating for them.
    if n_layers > bytes.len() / 12 {
        return Err(FormatError::TruncatedHeader {
            offset: bytes.len(),
        }
        .into());
    }
    let mut descriptors = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let cells = dim(&mut d, "cells", false)?;
        let proj = dim(&mut d, "projection", true)?;
        let flags = layer_flags(&mut d)?;
        descriptors.push((cells, (proj > 0).then_some(proj), flags));
    }
    let out_flags = layer_flags(&mut d)?;

    let mut layers = Vec::with_capacity(n_layers);
    let mut in_dim = input_dim;
    for (l, &(cells, proj, flags)) in descriptors.iter().enumerate() {
        let start = d.pos;
        let out_dim = proj.unwrap_or(cells);
        let mut gate = || -> Result<GateParams, FormatError> {
            Ok(GateParams {
                input: d.weight(cells, in_dim, flags)?,
                recurrent: d.weight(cells, out_dim, flags)?,
                bias: d.float(1, cells)?,
            })
        };
        let gates = [gate()?, gate()?, gate()?, gate()?];
        let projection = proj.map(|p| d.weight(p, cells, flags)).transpose()?;
        let mut layer =
            LstmLayer::new(gates, projection).map_err(|e| FormatError::InvalidHeader {
                offset: start,
                reason: format!("layer {l}: {e}"),
            })?;
        layer.quantize_enabled = flags & FLAG_QUANTIZE != 0;
        layers.push(layer);
        in_dim = out_dim;
    }
    let weight = d.weight(n_classes, in_dim, out_flags)?;
    let bias = d.float(1, n_classes)?;
    let mut output = FcLayer::new(weight, bias, Activation::Softmax).map_err(|e| {
        FormatError::InvalidHeader {
            offset: 32 + 12 * n_layers,
            reason: e.to_string(),
        }
    })?;
    output.quantize_enabled = out_flags & FLAG_QUANTIZE != 0;

    if d.pos != bytes.len() {
        return Err(FormatError::TrailingBytes {
            offset: d.pos,
            count: bytes.len() - d.pos,
        }
        .into());
    }
    let meta = ModelMeta {
        input_dim,
        n_classes,
        seed,
        phase,
    };
    let model = Model::new(meta, layers, output).map_err(|e| FormatError::InvalidHeader {
        offset: 32,
        reason: e.to_string(),
    })?;
    Ok(Parsed {
        model,
        records: d.records,
    })
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    Ok(parse(bytes)?.model)
}

/// Record layout of a valid model file.
pub fn inspect_records(bytes: &[u8]) -> Result<Vec<RecordInfo>> {
    Ok(parse(bytes)?.records)
}

pub fn load_model<R: Read>(mut source: R) -> Result<Model> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<Model> {
    decode_model(&std::fs::read(path)?)
}
