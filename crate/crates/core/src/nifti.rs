//! Single-file NIfTI-1 (`.nii` / `.nii.gz`) reading and writing.
//!
//! Supported datatypes are unsigned 8-bit, signed 16-bit and 32-bit float.
//! Byte order is detected from the header size field; gzip from its magic
//! bytes. The qform/sform block is carried through untouched; only the
//! translation is used to place the volume origin.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelMap, Vocabulary, Volume};

pub const HEADER_SIZE: usize = 348;
pub const DATA_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";
const NIFTI2_HEADER_SIZE: i32 = 540;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Uint8,
    Int16,
    Float32,
}

impl DataType {
    pub fn code(self) -> i16 {
        match self {
            DataType::Uint8 => 2,
            DataType::Int16 => 4,
            DataType::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(DataType::Uint8),
            4 => Ok(DataType::Int16),
            16 => Ok(DataType::Float32),
            other => Err(Error::Nifti(format!(
                "unsupported datatype code {other} (supported: 2 uint8, 4 int16, 16 float32)"
            ))),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            DataType::Uint8 => 1,
            DataType::Int16 => 2,
            DataType::Float32 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DataType::Uint8 => "uint8",
            DataType::Int16 => "int16",
            DataType::Float32 => "float32",
        }
    }

    fn range(self) -> (f64, f64) {
        match self {
            DataType::Uint8 => (0.0, u8::MAX as f64),
            DataType::Int16 => (i16::MIN as f64, i16::MAX as f64),
            DataType::Float32 => (f32::MIN as f64, f32::MAX as f64),
        }
    }
}

/// The qform/sform fields, copied verbatim between files.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
}

impl Orientation {
    /// Axis-aligned sform carrying spacing and origin.
    pub fn axis_aligned(geometry: &Geometry) -> Self {
        let mut srow = [[0.0f32; 4]; 3];
        for (a, row) in srow.iter_mut().enumerate() {
            row[a] = geometry.spacing[a] as f32;
            row[3] = geometry.origin[a] as f32;
        }
        Self {
            qform_code: 0,
            sform_code: 1,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow,
        }
    }

    /// Translation part: sform if set, else qform, else zero.
    pub fn origin(&self) -> [f64; 3] {
        if self.sform_code > 0 {
            std::array::from_fn(|a| self.srow[a][3] as f64)
        } else if self.qform_code > 0 {
            self.qoffset.map(f64::from)
        } else {
            [0.0; 3]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeaderView {
    pub dims: [usize; 3],
    pub datatype: DataType,
    pub spacing: [f64; 3],
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub compressed: bool,
    pub big_endian: bool,
    pub vox_offset: usize,
    pub orientation: Orientation,
}

impl NiftiHeaderView {
    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing, self.orientation.origin())
    }

    /// Scaling as `stored * slope + inter`, if the header requests a
    /// non-identity one. Identity is skipped so stored values (including
    /// negative zero) come back bit-exact.
    pub fn scaling(&self) -> Option<(f64, f64)> {
        let identity = self.scl_slope == 1.0 && self.scl_inter == 0.0;
        if identity || self.scl_slope == 0.0 || !self.scl_slope.is_finite() {
            None
        } else {
            Some((self.scl_slope as f64, self.scl_inter as f64))
        }
    }
}

/// Affine value scaling for integer output: `stored = round((x - inter) / slope)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaling {
    pub slope: f64,
    pub inter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WriteOptions {
    pub datatype: DataType,
    pub scaling: Option<Scaling>,
    /// Orientation to carry over; defaults to an axis-aligned sform.
    pub orientation: Option<Orientation>,
    /// `None` picks gzip from a `.gz` extension.
    pub compress: Option<bool>,
}

impl WriteOptions {
    pub fn new(datatype: DataType) -> Self {
        Self {
            datatype,
            scaling: None,
            orientation: None,
            compress: None,
        }
    }
}

fn read_bytes(path: &Path) -> Result<(Vec<u8>, bool)> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    decompress(raw).map_err(|e| match e {
        Error::Nifti(m) => Error::Nifti(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn decompress(raw: Vec<u8>) -> Result<(Vec<u8>, bool)> {
    if raw.len() >= 2 && raw[..2] == GZIP_MAGIC {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Nifti(format!("corrupt gzip stream: {e}")))?;
        Ok((out, true))
    } else {
        Ok((raw, false))
    }
}

trait Endian {
    fn i16(b: &[u8]) -> i16;
    fn f32(b: &[u8]) -> f32;
}

impl<B: ByteOrder> Endian for B {
    fn i16(b: &[u8]) -> i16 {
        B::read_i16(b)
    }
    fn f32(b: &[u8]) -> f32 {
        B::read_f32(b)
    }
}

fn parse_header_as<E: Endian>(h: &[u8], compressed: bool, big_endian: bool) -> Result<NiftiHeaderView> {
    let magic = &h[344..348];
    if magic == MAGIC_PAIR {
        return Err(Error::Nifti("dual-file (.hdr/.img) NIfTI-1 is not supported".into()));
    }
    if magic != MAGIC_SINGLE {
        return Err(Error::Nifti(format!("bad magic {magic:?}, expected \"n+1\"")));
    }

    let dim: [i16; 8] = std::array::from_fn(|i| E::i16(&h[40 + 2 * i..]));
    let rank = dim[0];
    if !(1..=7).contains(&rank) {
        return Err(Error::Nifti(format!("invalid rank {rank}")));
    }
    let rank = rank as usize;
    if let Some(extra) = dim[4..=rank.max(3)].iter().find(|&&d| d != 1) {
        return Err(Error::Nifti(format!(
            "only 3-D volumes are supported (found extent {extra} beyond the third axis)"
        )));
    }
    let mut dims = [1usize; 3];
    for a in 0..rank.min(3) {
        let d = dim[a + 1];
        if d <= 0 {
            return Err(Error::Nifti(format!("non-positive dimension {d} on axis {a}")));
        }
        dims[a] = d as usize;
    }
    if dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none() {
        return Err(Error::Nifti(format!("dimension overflow {dims:?}")));
    }

    let datatype = DataType::from_code(E::i16(&h[70..]))?;
    let pixdim: [f32; 8] = std::array::from_fn(|i| E::f32(&h[76 + 4 * i..]));
    let mut spacing = [1.0f64; 3];
    for a in 0..rank.min(3) {
        let s = (pixdim[a + 1] as f64).abs();
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Nifti(format!("invalid pixdim {} on axis {a}", pixdim[a + 1])));
        }
        spacing[a] = s;
    }
    let vox_offset = E::f32(&h[108..]);
    if !(vox_offset.is_finite() && vox_offset >= DATA_OFFSET as f32) {
        return Err(Error::Nifti(format!("invalid vox_offset {vox_offset}")));
    }

    let orientation = Orientation {
        qform_code: E::i16(&h[252..]),
        sform_code: E::i16(&h[254..]),
        quatern: std::array::from_fn(|i| E::f32(&h[256 + 4 * i..])),
        qoffset: std::array::from_fn(|i| E::f32(&h[268 + 4 * i..])),
        srow: std::array::from_fn(|r| std::array::from_fn(|c| E::f32(&h[280 + 16 * r + 4 * c..]))),
    };

    Ok(NiftiHeaderView {
        dims,
        datatype,
        spacing,
        scl_slope: E::f32(&h[112..]),
        scl_inter: E::f32(&h[116..]),
        compressed,
        big_endian,
        vox_offset: vox_offset as usize,
        orientation,
    })
}

fn parse_header(bytes: &[u8], compressed: bool) -> Result<NiftiHeaderView> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!("truncated header ({} bytes)", bytes.len())));
    }
    let h = &bytes[..HEADER_SIZE];
    let le = LittleEndian::read_i32(h);
    let be = BigEndian::read_i32(h);
    if le == HEADER_SIZE as i32 {
        parse_header_as::<LittleEndian>(h, compressed, false)
    } else if be == HEADER_SIZE as i32 {
        parse_header_as::<BigEndian>(h, compressed, true)
    } else if le == NIFTI2_HEADER_SIZE || be == NIFTI2_HEADER_SIZE {
        Err(Error::Nifti("NIfTI-2 is not supported".into()))
    } else {
        Err(Error::Nifti(format!("corrupt header: size field {le}, expected 348")))
    }
}

/// Stored (unscaled) sample values in x-fastest order.
fn decode_samples(bytes: &[u8], header: &NiftiHeaderView) -> Result<Vec<f64>> {
    let n = header.dims.iter().product::<usize>();
    let width = header.datatype.bytes();
    let end = n
        .checked_mul(width)
        .and_then(|len| len.checked_add(header.vox_offset))
        .ok_or_else(|| Error::Nifti("dimension overflow".into()))?;
    if bytes.len() < end {
        return Err(Error::Nifti(format!(
            "truncated data: need {end} bytes, have {}",
            bytes.len()
        )));
    }
    let data = &bytes[header.vox_offset..end];
    let be = header.big_endian;
    let out = match header.datatype {
        DataType::Uint8 => data.iter().map(|&b| b as f64).collect(),
        DataType::Int16 => data
            .chunks_exact(2)
            .map(|c| if be { BigEndian::read_i16(c) } else { LittleEndian::read_i16(c) } as f64)
            .collect(),
        DataType::Float32 => data
            .chunks_exact(4)
            .map(|c| if be { BigEndian::read_f32(c) } else { LittleEndian::read_f32(c) } as f64)
            .collect(),
    };
    Ok(out)
}

pub fn read_header(path: impl AsRef<Path>) -> Result<NiftiHeaderView> {
    let (bytes, compressed) = read_bytes(path.as_ref())?;
    parse_header(&bytes, compressed)
}

/// Decodes an in-memory NIfTI-1 file (optionally gzip-wrapped).
pub fn decode_volume(raw: Vec<u8>) -> Result<(Volume, NiftiHeaderView)> {
    let (bytes, compressed) = decompress(raw)?;
    let header = parse_header(&bytes, compressed)?;
    let mut data = decode_samples(&bytes, &header)?;
    if let Some((slope, inter)) = header.scaling() {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    let volume = Volume::new(header.geometry()?, data)?;
    Ok((volume, header))
}

/// Reads intensities with `scl_slope`/`scl_inter` applied.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    read_volume_with_header(path).map(|(v, _)| v)
}

pub fn read_volume_with_header(path: impl AsRef<Path>) -> Result<(Volume, NiftiHeaderView)> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(raw).map_err(|e| match e {
        Error::Nifti(m) => Error::Nifti(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads a label map. Stored values are used as-is; any scaling fields are
/// ignored. With `strict`, labels missing from `vocabulary` are an error;
/// otherwise they are added with placeholder names.
pub fn read_labels(path: impl AsRef<Path>, vocabulary: &Vocabulary, strict: bool) -> Result<LabelMap> {
    let path = path.as_ref();
    let (bytes, compressed) = read_bytes(path)?;
    let header = parse_header(&bytes, compressed)?;
    let samples = decode_samples(&bytes, &header)?;
    let mut data = Vec::with_capacity(samples.len());
    for (index, v) in samples.into_iter().enumerate() {
        if !(v.fract() == 0.0 && (0.0..=u16::MAX as f64).contains(&v)) {
            return Err(Error::Nifti(format!(
                "{}: voxel {index} holds {v}, not a non-negative integer label",
                path.display()
            )));
        }
        data.push(v as u16);
    }
    let geometry = header.geometry()?;
    if strict {
        LabelMap::new(geometry, data, vocabulary.clone())
    } else {
        LabelMap::new_lenient(geometry, data, vocabulary.clone())
    }
}

fn encode_header(geometry: &Geometry, opts: &WriteOptions) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r';
    let dim: [i16; 8] = [
        3,
        geometry.dims[0] as i16,
        geometry.dims[1] as i16,
        geometry.dims[2] as i16,
        1,
        1,
        1,
        1,
    ];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[70..], opts.datatype.code());
    LittleEndian::write_i16(&mut h[72..], (opts.datatype.bytes() * 8) as i16);
    let pixdim: [f32; 8] = [
        1.0,
        geometry.spacing[0] as f32,
        geometry.spacing[1] as f32,
        geometry.spacing[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[108..], DATA_OFFSET as f32);
    let (slope, inter) = opts.scaling.map_or((1.0, 0.0), |s| (s.slope as f32, s.inter as f32));
    LittleEndian::write_f32(&mut h[112..], slope);
    LittleEndian::write_f32(&mut h[116..], inter);
    h[123] = 2; // millimeters

    let o = opts.orientation.unwrap_or_else(|| Orientation::axis_aligned(geometry));
    LittleEndian::write_i16(&mut h[252..], o.qform_code);
    LittleEndian::write_i16(&mut h[254..], o.sform_code);
    for i in 0..3 {
        LittleEndian::write_f32(&mut h[256 + 4 * i..], o.quatern[i]);
        LittleEndian::write_f32(&mut h[268 + 4 * i..], o.qoffset[i]);
    }
    for (r, row) in o.srow.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], *v);
        }
    }
    h[344..348].copy_from_slice(MAGIC_SINGLE);
    h
}

fn encode_samples(values: impl Iterator<Item = f64>, opts: &WriteOptions, out: &mut Vec<u8>) -> Result<()> {
    let (lo, hi) = opts.datatype.range();
    for (index, x) in values.enumerate() {
        let stored = match (opts.datatype, opts.scaling) {
            (DataType::Float32, None) => x,
            (DataType::Float32, Some(s)) => (x - s.inter) / s.slope,
            (_, None) => x.round(),
            (_, Some(s)) => ((x - s.inter) / s.slope).round(),
        };
        if !(stored.is_finite() && stored >= lo && stored <= hi) {
            return Err(Error::OutOfRange {
                value: x,
                index,
                datatype: opts.datatype.name(),
            });
        }
        match opts.datatype {
            DataType::Uint8 => out.push(stored as u8),
            DataType::Int16 => out.extend_from_slice(&(stored as i16).to_le_bytes()),
            DataType::Float32 => out.extend_from_slice(&(stored as f32).to_le_bytes()),
        }
    }
    Ok(())
}

fn check_nifti1_dims(geometry: &Geometry) -> Result<()> {
    if let Some(&d) = geometry.dims.iter().find(|&&d| d > i16::MAX as usize) {
        return Err(Error::Nifti(format!("dimension {d} exceeds the NIfTI-1 limit")));
    }
    Ok(())
}

/// Encodes a volume into an (uncompressed) NIfTI-1 byte buffer.
pub fn encode_volume(volume: &Volume, opts: &WriteOptions) -> Result<Vec<u8>> {
    check_nifti1_dims(volume.geometry())?;
    if let Some(s) = opts.scaling {
        if !(s.slope.is_finite() && s.slope != 0.0 && s.inter.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid scaling {s:?}")));
        }
    }
    let mut bytes = encode_header(volume.geometry(), opts);
    bytes.reserve(volume.len() * opts.datatype.bytes());
    encode_samples(volume.data().iter().copied(), opts, &mut bytes)?;
    Ok(bytes)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8], compress: Option<bool>) -> Result<()> {
    let gz = compress.unwrap_or_else(|| path.extension().is_some_and(|e| e == "gz"));
    let payload = if gz {
        // Fixed header fields (no mtime, no name) keep output reproducible.
        let mut enc = GzEncoder::new(Vec::new(), Compression::new(6));
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes.to_vec()
    };
    fs::write(path, payload).map_err(|e| Error::io(path, e))
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>, datatype: DataType) -> Result<()> {
    write_volume_with(volume, path, &WriteOptions::new(datatype))
}

pub fn write_volume_with(volume: &Volume, path: impl AsRef<Path>, opts: &WriteOptions) -> Result<()> {
    let bytes = encode_volume(volume, opts)?;
    write_bytes(path.as_ref(), &bytes, opts.compress)
}

/// Writes labels as unsigned 8-bit.
pub fn write_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_labels_with(labels, path, &WriteOptions::new(DataType::Uint8))
}

pub fn write_labels_with(labels: &LabelMap, path: impl AsRef<Path>, opts: &WriteOptions) -> Result<()> {
    let bytes = encode_labels(labels, opts)?;
    write_bytes(path.as_ref(), &bytes, opts.compress)
}

/// Encodes a label map into an (uncompressed) NIfTI-1 byte buffer.
pub fn encode_labels(labels: &LabelMap, opts: &WriteOptions) -> Result<Vec<u8>> {
    if opts.datatype == DataType::Float32 || opts.scaling.is_some() {
        return Err(Error::InvalidArgument("labels are written as unscaled integers".into()));
    }
    check_nifti1_dims(labels.geometry())?;
    let mut bytes = encode_header(labels.geometry(), opts);
    encode_samples(labels.data().iter().map(|&l| l as f64), opts, &mut bytes)?;
    Ok(bytes)
}
