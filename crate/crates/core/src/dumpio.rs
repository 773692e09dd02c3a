//! FPD1: the binary dump format carrying unit activations, summed gradients and
//! parameters for one layer.
//!
//! Layout (all multi-byte integers little-endian):
//!
//! ```text
//! offset size field
//!      0    4 magic "FPD1"
//!      4    4 version (u32, = 1)
//!      8    1 kind (u8: 0 activations, 1 weight-gradient, 2 bias-gradient, 3 weights, 4 biases)
//!      9    4 layer_id (u32)
//!     13    4 unit_count J (u32)
//!     17    4 sample_count n (u32, 0 for parameter kinds)
//!     21    4 unit_dim d (u32)
//!     25    1 labels_present (u8 flag)
//!     26    . payload: f32 LE values
//!      .    . labels: n u32 LE values (activations only)
//! ```
//!
//! Payload shapes: activations `[n, J, d]`, weight-gradient and weights `[J, d]`,
//! bias-gradient and biases `[J]` (with `d = 1`).

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"FPD1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 26;

static DUMP_READS: AtomicU64 = AtomicU64::new(0);

/// Number of dump files parsed by [`read_dump`] in this process.
pub fn dump_read_count() -> u64 {
    DUMP_READS.load(Ordering::SeqCst)
}

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"FPD1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported dump version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dump kind {0}")]
    UnknownKind(u8),
    #[error("file shorter than the {HEADER_LEN}-byte header ({0} bytes)")]
    TruncatedHeader(usize),
    #[error("truncated payload: expected {expected} bytes after header, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("trailing bytes: expected {expected} bytes after header, found {found}")]
    TrailingBytes { expected: usize, found: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("non-finite value at element {index} in {kind:?} dump")]
    NonFinite { kind: DumpKind, index: usize },
    #[error("label {label} at sample {index} is out of range")]
    BadLabel { index: usize, label: u32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layer {layer}: missing {} dump (kind {}) at {path}", kind.file_tag(), *kind as u8)]
    Missing {
        layer: u32,
        kind: DumpKind,
        path: String,
    },
    #[error("{path}: expected a {expected:?} dump for layer {layer}, found {found:?} for layer {found_layer}")]
    WrongDump {
        path: String,
        layer: u32,
        expected: DumpKind,
        found: DumpKind,
        found_layer: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum DumpKind {
    Activations = 0,
    WeightGradient = 1,
    BiasGradient = 2,
    Weights = 3,
    Biases = 4,
}

impl DumpKind {
    pub const ALL: [DumpKind; 5] = [
        DumpKind::Activations,
        DumpKind::WeightGradient,
        DumpKind::BiasGradient,
        DumpKind::Weights,
        DumpKind::Biases,
    ];

    pub fn from_u8(v: u8) -> Result<Self, DumpError> {
        match v {
            0 => Ok(DumpKind::Activations),
            1 => Ok(DumpKind::WeightGradient),
            2 => Ok(DumpKind::BiasGradient),
            3 => Ok(DumpKind::Weights),
            4 => Ok(DumpKind::Biases),
            other => Err(DumpError::UnknownKind(other)),
        }
    }

    /// Short tag used in dump file names (`layer{id}_{tag}.fpd`).
    pub fn file_tag(self) -> &'static str {
        match self {
            DumpKind::Activations => "act",
            DumpKind::WeightGradient => "wgrad",
            DumpKind::BiasGradient => "bgrad",
            DumpKind::Weights => "weight",
            DumpKind::Biases => "bias",
        }
    }

    fn is_vector_kind(self) -> bool {
        matches!(self, DumpKind::BiasGradient | DumpKind::Biases)
    }
}

/// Canonical file name for a (layer, kind) dump inside a dumps directory.
pub fn dump_file_name(layer_id: u32, kind: DumpKind) -> String {
    format!("layer{}_{}.fpd", layer_id, kind.file_tag())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FpdHeader {
    pub kind: DumpKind,
    pub layer_id: u32,
    pub unit_count: u32,
    pub sample_count: u32,
    pub unit_dim: u32,
    pub labels_present: bool,
}

impl FpdHeader {
    fn validate(&self) -> Result<(), DumpError> {
        let bad = |msg: &str| Err(DumpError::InvalidHeader(msg.to_string()));
        if self.unit_count == 0 {
            return bad("unit_count must be positive");
        }
        if self.unit_dim == 0 {
            return bad("unit_dim must be positive");
        }
        match self.kind {
            DumpKind::Activations => {
                if !self.labels_present {
                    return bad("activation dumps must carry labels");
                }
                if self.sample_count == 0 {
                    return bad("activation dumps need at least one sample");
                }
            }
            kind => {
                if self.labels_present {
                    return bad("labels are only allowed on activation dumps");
                }
                if kind.is_vector_kind() && self.unit_dim != 1 {
                    return bad("bias dumps must have unit_dim 1");
                }
                if matches!(kind, DumpKind::Weights | DumpKind::Biases) && self.sample_count != 0 {
                    return bad("parameter dumps must have sample_count 0");
                }
            }
        }
        Ok(())
    }

    /// Number of f32 elements in the payload.
    pub fn value_count(&self) -> usize {
        let j = self.unit_count as usize;
        let d = self.unit_dim as usize;
        match self.kind {
            DumpKind::Activations => self.sample_count as usize * j * d,
            _ => j * d,
        }
    }

    /// Bytes following the header: payload plus labels.
    pub fn body_len(&self) -> usize {
        self.checked_body_len()
            .expect("dump body length overflows usize")
    }

    fn checked_body_len(&self) -> Option<usize> {
        let j = self.unit_count as usize;
        let d = self.unit_dim as usize;
        let values = match self.kind {
            DumpKind::Activations => (self.sample_count as usize)
                .checked_mul(j)?
                .checked_mul(d)?,
            _ => j.checked_mul(d)?,
        };
        let labels = if self.labels_present {
            self.sample_count as usize * 4
        } else {
            0
        };
        values.checked_mul(4)?.checked_add(labels)
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.layer_id.to_le_bytes());
        out.extend_from_slice(&self.unit_count.to_le_bytes());
        out.extend_from_slice(&self.sample_count.to_le_bytes());
        out.extend_from_slice(&self.unit_dim.to_le_bytes());
        out.push(self.labels_present as u8);
    }

    fn decode(bytes: &[u8]) -> Result<Self, DumpError> {
        if bytes.len() < HEADER_LEN {
            // Still report a wrong magic if we can see it.
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(DumpError::BadMagic(bytes[..4].try_into().unwrap()));
            }
            return Err(DumpError::TruncatedHeader(bytes.len()));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(DumpError::BadMagic(magic));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(DumpError::UnsupportedVersion(version));
        }
        let kind = DumpKind::from_u8(bytes[8])?;
        let labels_present = match bytes[25] {
            0 => false,
            1 => true,
            v => {
                return Err(DumpError::InvalidHeader(format!(
                    "labels_present flag must be 0 or 1, got {v}"
                )))
            }
        };
        let header = FpdHeader {
            kind,
            layer_id: u32_at(9),
            unit_count: u32_at(13),
            sample_count: u32_at(17),
            unit_dim: u32_at(21),
            labels_present,
        };
        header.validate()?;
        Ok(header)
    }
}

/// Per-sample unit outputs with class labels, layout `[n, J, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub layer_id: u32,
    pub units: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub labels: Vec<u32>,
}

impl ActivationDump {
    pub fn new(
        layer_id: u32,
        units: usize,
        dim: usize,
        data: Vec<f32>,
        labels: Vec<u32>,
    ) -> Result<Self, DumpError> {
        let dump = ActivationDump {
            layer_id,
            units,
            dim,
            data,
            labels,
        };
        dump.validate()?;
        Ok(dump)
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    /// K = 1 + max label.
    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }

    /// Output vector of `unit` for `sample` (length `dim`).
    pub fn unit_output(&self, sample: usize, unit: usize) -> &[f32] {
        let start = (sample * self.units + unit) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// New dump holding only the given sample rows, in the given order.
    pub fn select_samples(&self, rows: &[usize]) -> ActivationDump {
        let stride = self.units * self.dim;
        let mut data = Vec::with_capacity(rows.len() * stride);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
            labels.push(self.labels[r]);
        }
        ActivationDump {
            layer_id: self.layer_id,
            units: self.units,
            dim: self.dim,
            data,
            labels,
        }
    }

    fn header(&self) -> FpdHeader {
        FpdHeader {
            kind: DumpKind::Activations,
            layer_id: self.layer_id,
            unit_count: self.units as u32,
            sample_count: self.labels.len() as u32,
            unit_dim: self.dim as u32,
            labels_present: true,
        }
    }

    pub fn validate(&self) -> Result<(), DumpError> {
        check_u32(self.units, "unit_count")?;
        check_u32(self.dim, "unit_dim")?;
        check_u32(self.labels.len(), "sample_count")?;
        self.header().validate()?;
        let expected = self.labels.len() * self.units * self.dim;
        if self.data.len() != expected {
            return Err(DumpError::Shape(format!(
                "activation payload has {} values, header implies {expected}",
                self.data.len()
            )));
        }
        check_finite(&self.data, DumpKind::Activations)?;
        if let Some((index, &label)) = self.labels.iter().enumerate().find(|(_, &l)| l == u32::MAX)
        {
            return Err(DumpError::BadLabel { index, label });
        }
        Ok(())
    }
}

/// Gradient sums over the pruning set (kind 1: `[J, d]`, kind 2: `[J]`).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDump {
    pub kind: DumpKind,
    pub layer_id: u32,
    pub units: usize,
    pub dim: usize,
    pub sample_count: u32,
    pub data: Vec<f32>,
}

impl GradientDump {
    pub fn weight(
        layer_id: u32,
        units: usize,
        dim: usize,
        sample_count: u32,
        data: Vec<f32>,
    ) -> Result<Self, DumpError> {
        let g = GradientDump {
            kind: DumpKind::WeightGradient,
            layer_id,
            units,
            dim,
            sample_count,
            data,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn bias(layer_id: u32, sample_count: u32, data: Vec<f32>) -> Result<Self, DumpError> {
        let g = GradientDump {
            kind: DumpKind::BiasGradient,
            layer_id,
            units: data.len(),
            dim: 1,
            sample_count,
            data,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn row(&self, unit: usize) -> &[f32] {
        &self.data[unit * self.dim..(unit + 1) * self.dim]
    }

    fn header(&self) -> FpdHeader {
        FpdHeader {
            kind: self.kind,
            layer_id: self.layer_id,
            unit_count: self.units as u32,
            sample_count: self.sample_count,
            unit_dim: self.dim as u32,
            labels_present: false,
        }
    }

    pub fn validate(&self) -> Result<(), DumpError> {
        if !matches!(self.kind, DumpKind::WeightGradient | DumpKind::BiasGradient) {
            return Err(DumpError::InvalidHeader(format!(
                "{:?} is not a gradient kind",
                self.kind
            )));
        }
        check_u32(self.units, "unit_count")?;
        check_u32(self.dim, "unit_dim")?;
        self.header().validate()?;
        check_len(self.data.len(), self.units * self.dim)?;
        check_finite(&self.data, self.kind)
    }
}

/// Current parameters of a layer (kind 3: weights `[J, d]`, kind 4: biases `[J]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDump {
    pub kind: DumpKind,
    pub layer_id: u32,
    pub units: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl ParamDump {
    pub fn weights(
        layer_id: u32,
        units: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self, DumpError> {
        let p = ParamDump {
            kind: DumpKind::Weights,
            layer_id,
            units,
            dim,
            data,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn biases(layer_id: u32, data: Vec<f32>) -> Result<Self, DumpError> {
        let p = ParamDump {
            kind: DumpKind::Biases,
            layer_id,
            units: data.len(),
            dim: 1,
            data,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn row(&self, unit: usize) -> &[f32] {
        &self.data[unit * self.dim..(unit + 1) * self.dim]
    }

    fn header(&self) -> FpdHeader {
        FpdHeader {
            kind: self.kind,
            layer_id: self.layer_id,
            unit_count: self.units as u32,
            sample_count: 0,
            unit_dim: self.dim as u32,
            labels_present: false,
        }
    }

    pub fn validate(&self) -> Result<(), DumpError> {
        if !matches!(self.kind, DumpKind::Weights | DumpKind::Biases) {
            return Err(DumpError::InvalidHeader(format!(
                "{:?} is not a parameter kind",
                self.kind
            )));
        }
        check_u32(self.units, "unit_count")?;
        check_u32(self.dim, "unit_dim")?;
        self.header().validate()?;
        check_len(self.data.len(), self.units * self.dim)?;
        check_finite(&self.data, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dump {
    Activations(ActivationDump),
    Gradient(GradientDump),
    Param(ParamDump),
}

impl Dump {
    pub fn kind(&self) -> DumpKind {
        match self {
            Dump::Activations(_) => DumpKind::Activations,
            Dump::Gradient(g) => g.kind,
            Dump::Param(p) => p.kind,
        }
    }

    pub fn layer_id(&self) -> u32 {
        match self {
            Dump::Activations(a) => a.layer_id,
            Dump::Gradient(g) => g.layer_id,
            Dump::Param(p) => p.layer_id,
        }
    }

    pub fn header(&self) -> FpdHeader {
        match self {
            Dump::Activations(a) => a.header(),
            Dump::Gradient(g) => g.header(),
            Dump::Param(p) => p.header(),
        }
    }

    pub fn validate(&self) -> Result<(), DumpError> {
        match self {
            Dump::Activations(a) => a.validate(),
            Dump::Gradient(g) => g.validate(),
            Dump::Param(p) => p.validate(),
        }
    }

    pub fn into_activations(self) -> Option<ActivationDump> {
        match self {
            Dump::Activations(a) => Some(a),
            _ => None,
        }
    }

    pub fn into_gradient(self) -> Option<GradientDump> {
        match self {
            Dump::Gradient(g) => Some(g),
            _ => None,
        }
    }

    pub fn into_param(self) -> Option<ParamDump> {
        match self {
            Dump::Param(p) => Some(p),
            _ => None,
        }
    }

    fn payload(&self) -> &[f32] {
        match self {
            Dump::Activations(a) => &a.data,
            Dump::Gradient(g) => &g.data,
            Dump::Param(p) => &p.data,
        }
    }
}

impl From<ActivationDump> for Dump {
    fn from(a: ActivationDump) -> Self {
        Dump::Activations(a)
    }
}

impl From<GradientDump> for Dump {
    fn from(g: GradientDump) -> Self {
        Dump::Gradient(g)
    }
}

impl From<ParamDump> for Dump {
    fn from(p: ParamDump) -> Self {
        Dump::Param(p)
    }
}

/// Serializes a validated dump to FPD1 bytes.
pub fn encode_dump(dump: &Dump) -> Result<Vec<u8>, DumpError> {
    dump.validate()?;
    let header = dump.header();
    let mut out = Vec::with_capacity(HEADER_LEN + header.body_len());
    header.encode(&mut out);
    for v in dump.payload() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Dump::Activations(a) = dump {
        for l in &a.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses and validates FPD1 bytes.
pub fn decode_dump(bytes: &[u8]) -> Result<Dump, DumpError> {
    let header = FpdHeader::decode(bytes)?;
    let found = bytes.len() - HEADER_LEN;
    let expected = header
        .checked_body_len()
        .ok_or(DumpError::TruncatedPayload {
            expected: usize::MAX,
            found,
        })?;
    if found < expected {
        return Err(DumpError::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(DumpError::TrailingBytes { expected, found });
    }
    let body = &bytes[HEADER_LEN..];
    let n_values = header.value_count();
    let data: Vec<f32> = body[..n_values * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let units = header.unit_count as usize;
    let dim = header.unit_dim as usize;
    let dump = match header.kind {
        DumpKind::Activations => {
            let labels = body[n_values * 4..]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Dump::Activations(ActivationDump {
                layer_id: header.layer_id,
                units,
                dim,
                data,
                labels,
            })
        }
        kind @ (DumpKind::WeightGradient | DumpKind::BiasGradient) => {
            Dump::Gradient(GradientDump {
                kind,
                layer_id: header.layer_id,
                units,
                dim,
                sample_count: header.sample_count,
                data,
            })
        }
        kind @ (DumpKind::Weights | DumpKind::Biases) => Dump::Param(ParamDump {
            kind,
            layer_id: header.layer_id,
            units,
            dim,
            data,
        }),
    };
    dump.validate()?;
    Ok(dump)
}

pub fn write_dump(path: impl AsRef<Path>, dump: &Dump) -> Result<(), DumpError> {
    let path = path.as_ref();
    let bytes = encode_dump(dump)?;
    let io_err = |source| DumpError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&bytes).map_err(io_err)?;
    Ok(())
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<Dump, DumpError> {
    let path = path.as_ref();
    DUMP_READS.fetch_add(1, Ordering::SeqCst);
    let bytes = fs::read(path).map_err(|source| DumpError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_dump(&bytes)
}

fn check_u32(v: usize, what: &str) -> Result<(), DumpError> {
    if v > u32::MAX as usize {
        return Err(DumpError::InvalidHeader(format!("{what} {v} exceeds u32")));
    }
    Ok(())
}

fn check_len(found: usize, expected: usize) -> Result<(), DumpError> {
    if found != expected {
        return Err(DumpError::Shape(format!(
            "payload has {found} values, header implies {expected}"
        )));
    }
    Ok(())
}

fn check_finite(data: &[f32], kind: DumpKind) -> Result<(), DumpError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(DumpError::NonFinite { kind, index }),
        None => Ok(()),
    }
}
