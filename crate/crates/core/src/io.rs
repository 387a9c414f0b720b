//! Tensor value types and the `EUSG` binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EUSG" | u32 version (=1) | u32 entry count
//! per entry: u16 name len | UTF-8 name | u8 dtype (1=f32, 2=u16) | u8 rank
//!            | rank x u64 dims | row-major payload
//! ```
//!
//! Floats are validated as finite on load unless [`ReadOptions::allow_non_finite`]
//! is set. PGM (P5) rendering of rank-2 maps lives here as well.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"EUSG";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_IGNORE_VALUE: u16 = 255;

const DTYPE_F32: u8 = 1;
const DTYPE_U16: u8 = 2;
const MAX_RANK: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}, expected \"EUSG\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload in entry `{entry}`")]
    Truncated { entry: String },
    #[error("unknown dtype code {code} in entry `{entry}`")]
    UnknownDtype { entry: String, code: u8 },
    #[error("non-finite value at flat index {index} in entry `{entry}`")]
    NonFinite { entry: String, index: usize },
    #[error("duplicate entry name `{0}`")]
    DuplicateName(String),
    #[error("invalid entry name: {0}")]
    InvalidName(String),
    #[error("invalid shape for `{entry}`: {reason}")]
    InvalidShape { entry: String, reason: String },
    #[error("missing entry `{0}`")]
    MissingEntry(String),
    #[error("entry `{entry}` has the wrong dtype, expected {expected}")]
    WrongType { entry: String, expected: &'static str },
    #[error("{0} trailing bytes after last entry")]
    TrailingBytes(usize),
}

fn check_dims(name: &str, dims: &[usize], len: usize) -> Result<(), FormatError> {
    let shape_err = |reason: String| FormatError::InvalidShape {
        entry: name.to_string(),
        reason,
    };
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(shape_err(format!("rank {} outside 1..=4", dims.len())));
    }
    if dims.contains(&0) {
        return Err(shape_err(format!("zero extent in {dims:?}")));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| shape_err(format!("element count of {dims:?} overflows")))?;
    if count != len {
        return Err(shape_err(format!("dims {dims:?} imply {count} values, got {len}")));
    }
    Ok(())
}

fn check_name(name: &str) -> Result<(), FormatError> {
    if name.is_empty() {
        return Err(FormatError::InvalidName("empty".into()));
    }
    if name.len() > u16::MAX as usize {
        return Err(FormatError::InvalidName(format!("{} bytes is too long", name.len())));
    }
    Ok(())
}

/// Dense f32 tensor, row-major, rank 1 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self, FormatError> {
        let name = name.into();
        check_name(&name)?;
        check_dims(&name, &dims, data.len())?;
        Ok(Self { name, dims, data })
    }

    pub fn scalar(name: impl Into<String>, value: f32) -> Result<Self, FormatError> {
        Self::new(name, vec![1], vec![value])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Result<Self, FormatError> {
        let name = name.into();
        check_name(&name)?;
        self.name = name;
        Ok(self)
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

/// Dense u16 tensor. Carries label maps and short text metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct U16Tensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<u16>,
}

impl U16Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<u16>) -> Result<Self, FormatError> {
        let name = name.into();
        check_name(&name)?;
        check_dims(&name, &dims, data.len())?;
        Ok(Self { name, dims, data })
    }

    /// Stores the UTF-8 bytes of `text`, one byte per element.
    pub fn text(name: impl Into<String>, text: &str) -> Result<Self, FormatError> {
        let data: Vec<u16> = text.bytes().map(u16::from).collect();
        let len = data.len();
        Self::new(name, vec![len], data)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn as_text(&self) -> Option<String> {
        if self.dims.len() != 1 {
            return None;
        }
        let bytes = self
            .data
            .iter()
            .map(|&v| u8::try_from(v).ok())
            .collect::<Option<Vec<u8>>>()?;
        String::from_utf8(bytes).ok()
    }
}

/// H x W map of class indices with an ignore value excluded from losses and metrics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u16>,
    ignore_value: u16,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || height * width != data.len() {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            ignore_value: DEFAULT_IGNORE_VALUE,
        })
    }

    pub fn with_ignore_value(mut self, ignore_value: u16) -> Self {
        self.ignore_value = ignore_value;
        self
    }

    pub fn from_entry(entry: &U16Tensor) -> Result<Self> {
        match *entry.dims() {
            [h, w] => Self::new(h, w, entry.data().to_vec()),
            _ => Err(Error::Shape(format!(
                "label entry `{}` must be rank 2, has dims {:?}",
                entry.name(),
                entry.dims()
            ))),
        }
    }

    pub fn to_entry(&self, name: &str) -> Result<U16Tensor> {
        Ok(U16Tensor::new(name, vec![self.height, self.width], self.data.clone())?)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn ignore_value(&self) -> u16 {
        self.ignore_value
    }

    pub fn is_ignored(&self, label: u16) -> bool {
        label == self.ignore_value
    }

    /// Checks every non-ignored label is below `classes`.
    pub fn validate_classes(&self, classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&l| !self.is_ignored(l) && l as usize >= classes)
        {
            Some(&bad) => Err(Error::UnknownClass {
                class: bad as usize,
                classes,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(Tensor),
    U16(U16Tensor),
}

impl Entry {
    pub fn name(&self) -> &str {
        match self {
            Entry::F32(t) => t.name(),
            Entry::U16(t) => t.name(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.dims(),
            Entry::U16(t) => t.dims(),
        }
    }
}

impl From<Tensor> for Entry {
    fn from(t: Tensor) -> Self {
        Entry::F32(t)
    }
}

impl From<U16Tensor> for Entry {
    fn from(t: U16Tensor) -> Self {
        Entry::U16(t)
    }
}

/// Ordered collection of uniquely named entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a container from raw entries without checking name uniqueness;
    /// [`write_container`] rejects duplicates.
    pub fn from_entries_unchecked(entries: Vec<Entry>) -> Self {
        Self { entries }
    }

    pub fn push(&mut self, entry: impl Into<Entry>) -> Result<(), FormatError> {
        let entry = entry.into();
        if self.get(entry.name()).is_some() {
            return Err(FormatError::DuplicateName(entry.name().to_string()));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn push_text(&mut self, name: &str, text: &str) -> Result<(), FormatError> {
        self.push(U16Tensor::text(name, text)?)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name() == name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, FormatError> {
        match self.get(name) {
            Some(Entry::F32(t)) => Ok(t),
            Some(Entry::U16(_)) => Err(FormatError::WrongType {
                entry: name.to_string(),
                expected: "f32",
            }),
            None => Err(FormatError::MissingEntry(name.to_string())),
        }
    }

    pub fn u16_tensor(&self, name: &str) -> Result<&U16Tensor, FormatError> {
        match self.get(name) {
            Some(Entry::U16(t)) => Ok(t),
            Some(Entry::F32(_)) => Err(FormatError::WrongType {
                entry: name.to_string(),
                expected: "u16",
            }),
            None => Err(FormatError::MissingEntry(name.to_string())),
        }
    }

    pub fn text(&self, name: &str) -> Result<String, FormatError> {
        self.u16_tensor(name)?
            .as_text()
            .ok_or_else(|| FormatError::WrongType {
                entry: name.to_string(),
                expected: "rank-1 UTF-8 text",
            })
    }

    fn validate(&self) -> Result<(), FormatError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            check_name(e.name())?;
            if !seen.insert(e.name()) {
                return Err(FormatError::DuplicateName(e.name().to_string()));
            }
        }
        if self.entries.len() > u32::MAX as usize {
            return Err(FormatError::InvalidName("too many entries".into()));
        }
        Ok(())
    }
}

/// Serializes a container to bytes.
pub fn encode_container(container: &Container) -> Result<Vec<u8>, FormatError> {
    container.validate()?;
    let payload: usize = container
        .entries
        .iter()
        .map(|e| match e {
            Entry::F32(t) => t.data.len() * 4,
            Entry::U16(t) => t.data.len() * 2,
        })
        .sum();
    let mut buf = Vec::with_capacity(12 + payload + container.len() * 48);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(container.len() as u32).to_le_bytes());
    for entry in &container.entries {
        let name = entry.name().as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        let code = match entry {
            Entry::F32(_) => DTYPE_F32,
            Entry::U16(_) => DTYPE_U16,
        };
        buf.push(code);
        buf.push(entry.dims().len() as u8);
        for &d in entry.dims() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match entry {
            Entry::F32(t) => t.data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            Entry::U16(t) => t.data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(buf)
}

/// Writes `container` to `path`. Nothing is written if the container is invalid.
pub fn write_container(path: impl AsRef<Path>, container: &Container) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_container(container)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    pub allow_non_finite: bool,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, entry: &str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(FormatError::Truncated {
                entry: entry.to_string(),
            }),
        }
    }

    fn u8(&mut self, entry: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, entry)?[0])
    }

    fn u16(&mut self, entry: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, entry)?.try_into().unwrap()))
    }

    fn u32(&mut self, entry: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, entry)?.try_into().unwrap()))
    }

    fn u64(&mut self, entry: &str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, entry)?.try_into().unwrap()))
    }
}

/// Parses container bytes.
pub fn decode_container(bytes: &[u8], opts: ReadOptions) -> Result<Container, FormatError> {
    const HEADER: &str = "<header>";
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, HEADER)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = cur.u32(HEADER)?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = cur.u32(HEADER)? as usize;
    let mut container = Container::new();
    for i in 0..count {
        let placeholder = format!("<entry {i}>");
        let name_len = cur.u16(&placeholder)? as usize;
        let name = std::str::from_utf8(cur.take(name_len, &placeholder)?)
            .map_err(|e| FormatError::InvalidName(format!("entry {i}: {e}")))?
            .to_string();
        let code = cur.u8(&name)?;
        if code != DTYPE_F32 && code != DTYPE_U16 {
            return Err(FormatError::UnknownDtype { entry: name, code });
        }
        let rank = cur.u8(&name)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = cur.u64(&name)?;
            let d = usize::try_from(d).map_err(|_| FormatError::InvalidShape {
                entry: name.clone(),
                reason: format!("extent {d} exceeds address space"),
            })?;
            dims.push(d);
        }
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let count = match count {
            Some(c) if rank > 0 => c,
            _ => {
                return Err(FormatError::InvalidShape {
                    entry: name,
                    reason: format!("bad dims {dims:?}"),
                })
            }
        };
        let entry = if code == DTYPE_F32 {
            let raw = cur.take(count.saturating_mul(4), &name)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(name, dims, data)?;
            if !opts.allow_non_finite {
                if let Some(index) = t.first_non_finite() {
                    return Err(FormatError::NonFinite {
                        entry: t.name,
                        index,
                    });
                }
            }
            Entry::F32(t)
        } else {
            let raw = cur.take(count.saturating_mul(2), &name)?;
            let data: Vec<u16> = raw
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Entry::U16(U16Tensor::new(name, dims, data)?)
        };
        container.push(entry)?;
    }
    if cur.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok(container)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    read_container_with(path, ReadOptions::default())
}

pub fn read_container_with(path: impl AsRef<Path>, opts: ReadOptions) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_container(&bytes, opts)?)
}

/// Maps `value` from `[lo, hi]` onto 0..=255 with round-half-up and clamping.
/// NaN maps to 0.
pub fn quantize(value: f32, lo: f32, hi: f32) -> u8 {
    let scaled = (f64::from(value) - f64::from(lo)) / (f64::from(hi) - f64::from(lo)) * 255.0;
    if scaled.is_nan() {
        return 0;
    }
    (scaled + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Encodes a rank-2 (H x W) map as an 8-bit binary PGM.
pub fn encode_pgm(map: &Tensor, lo: f32, hi: f32) -> Result<Vec<u8>> {
    let (h, w) = match *map.dims() {
        [h, w] => (h, w),
        _ => {
            return Err(Error::Shape(format!(
                "PGM render needs a rank-2 map, `{}` has dims {:?}",
                map.name(),
                map.dims()
            )))
        }
    };
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(Error::Domain(format!("PGM range needs lo < hi, got [{lo}, {hi}]")));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| quantize(v, lo, hi)));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor, lo: f32, hi: f32) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(map, lo, hi)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(name: &str, dims: Vec<usize>, data: Vec<f32>) -> Container {
        let mut c = Container::new();
        c.push(Tensor::new(name, dims, data).unwrap()).unwrap();
        c
    }

    #[test]
    fn one_by_one_tensor_is_29_bytes() {
        let bytes = encode_container(&single("t", vec![1, 1], vec![0.0])).unwrap();
        // rank 2 adds a second u64 extent
        assert_eq!(bytes.len(), 29 + 8);
        let bytes = encode_container(&single("t", vec![1], vec![0.0])).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 2 + 1 + 1 + 1 + 8 + 4);
        assert_eq!(&bytes[..4], b"EUSG");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
    }

    #[test]
    fn duplicate_names_rejected_and_nothing_written() {
        let t = Tensor::scalar("a", 1.0).unwrap();
        let mut c = Container::new();
        c.push(t.clone()).unwrap();
        assert_eq!(c.push(t.clone()), Err(FormatError::DuplicateName("a".into())));

        let dup = Container::from_entries_unchecked(vec![t.clone().into(), t.into()]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.eusg");
        let err = write_container(&path, &dup).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::DuplicateName(_))));
        assert!(!path.exists());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_container(&single("t", vec![1], vec![0.0])).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert_eq!(
            decode_container(&bytes, ReadOptions::default()),
            Err(FormatError::BadMagic(*b"XXXX"))
        );
    }

    #[test]
    fn truncation_names_the_entry() {
        let mut c = single("first", vec![2], vec![1.0, 2.0]);
        c.push(Tensor::new("second", vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let bytes = encode_container(&c).unwrap();
        let err = decode_container(&bytes[..bytes.len() - 2], ReadOptions::default()).unwrap_err();
        assert_eq!(err, FormatError::Truncated { entry: "second".into() });
    }

    #[test]
    fn unknown_dtype() {
        let mut bytes = encode_container(&single("t", vec![1], vec![0.0])).unwrap();
        // dtype byte follows magic, version, count, name len and the 1-byte name
        bytes[15] = 9;
        assert_eq!(
            decode_container(&bytes, ReadOptions::default()),
            Err(FormatError::UnknownDtype { entry: "t".into(), code: 9 })
        );
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = encode_container(&single("t", vec![1], vec![0.0])).unwrap();
        bytes[4] = 2;
        assert_eq!(
            decode_container(&bytes, ReadOptions::default()),
            Err(FormatError::UnsupportedVersion(2))
        );
    }

    #[test]
    fn non_finite_rejected_unless_allowed() {
        let bytes = encode_container(&single("t", vec![3], vec![0.0, f32::NAN, 1.0])).unwrap();
        assert_eq!(
            decode_container(&bytes, ReadOptions::default()),
            Err(FormatError::NonFinite { entry: "t".into(), index: 1 })
        );
        let c = decode_container(&bytes, ReadOptions { allow_non_finite: true }).unwrap();
        assert!(c.tensor("t").unwrap().data()[1].is_nan());
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new("x", vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new("x", vec![], vec![]).is_err());
        assert!(Tensor::new("x", vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new("x", vec![0, 3], vec![]).is_err());
        assert!(Tensor::new("", vec![1], vec![0.0]).is_err());
    }

    #[test]
    fn random_3x4x5_round_trip_is_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..60).map(|_| rng.random_range(-1e3f32..1e3)).collect();
        let c = single("feat", vec![3, 4, 5], data.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.eusg");
        write_container(&path, &c).unwrap();
        let back = read_container(&path).unwrap();
        let t = back.tensor("feat").unwrap();
        assert_eq!(t.dims(), &[3, 4, 5]);
        let bits: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn text_entries() {
        let mut c = Container::new();
        c.push_text("ratio_variant", "delta").unwrap();
        let back = decode_container(&encode_container(&c).unwrap(), ReadOptions::default()).unwrap();
        assert_eq!(back.text("ratio_variant").unwrap(), "delta");
    }

    #[test]
    fn label_map_checks() {
        let lm = LabelMap::new(1, 3, vec![0, 255, 4]).unwrap();
        assert!(lm.validate_classes(5).is_ok());
        assert!(matches!(
            lm.validate_classes(4),
            Err(Error::UnknownClass { class: 4, classes: 4 })
        ));
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
        let e = lm.to_entry("labels").unwrap();
        assert_eq!(LabelMap::from_entry(&e).unwrap(), lm);
    }

    #[test]
    fn pgm_mapping() {
        let lo = -1.0;
        let hi = 3.0;
        let map = |v: f32| Tensor::new("m", vec![2, 3], vec![v; 6]).unwrap();
        let px = |v: f32| encode_pgm(&map(v), lo, hi).unwrap()[11..].to_vec();
        assert_eq!(px(lo), vec![0; 6]);
        assert_eq!(px(hi), vec![255; 6]);
        assert_eq!(px((lo + hi) / 2.0), vec![128; 6]);
        assert_eq!(px(-50.0), vec![0; 6]);
        assert_eq!(px(50.0), vec![255; 6]);
        assert_eq!(&encode_pgm(&map(0.0), lo, hi).unwrap()[..11], b"P5\n3 2\n255\n");
    }

    #[test]
    fn pgm_rejects_bad_inputs() {
        let rank3 = Tensor::new("m", vec![1, 1, 1], vec![0.0]).unwrap();
        assert!(matches!(encode_pgm(&rank3, 0.0, 1.0), Err(Error::Shape(_))));
        let ok = Tensor::new("m", vec![1, 1], vec![0.0]).unwrap();
        assert!(matches!(encode_pgm(&ok, 1.0, 1.0), Err(Error::Domain(_))));
    }

    fn arb_entry() -> impl Strategy<Value = Entry> {
        let dims = proptest::collection::vec(1usize..5, 1..=4);
        (dims, any::<bool>()).prop_flat_map(|(dims, is_f32)| {
            let n: usize = dims.iter().product();
            if is_f32 {
                proptest::collection::vec(-1e6f32..1e6, n)
                    .prop_map(move |d| Entry::F32(Tensor::new("x", dims.clone(), d).unwrap()))
                    .boxed()
            } else {
                proptest::collection::vec(any::<u16>(), n)
                    .prop_map(move |d| Entry::U16(U16Tensor::new("x", dims.clone(), d).unwrap()))
                    .boxed()
            }
        })
    }

    proptest! {
        #[test]
        fn round_trip_identity(entries in proptest::collection::vec(arb_entry(), 0..5)) {
            let mut c = Container::new();
            for (i, e) in entries.into_iter().enumerate() {
                let renamed = match e {
                    Entry::F32(t) => Entry::F32(t.renamed(format!("e{i}")).unwrap()),
                    Entry::U16(t) => Entry::U16(U16Tensor::new(format!("e{i}"), t.dims, t.data).unwrap()),
                };
                c.push(renamed).unwrap();
            }
            let bytes = encode_container(&c).unwrap();
            let back = decode_container(&bytes, ReadOptions::default()).unwrap();
            prop_assert_eq!(encode_container(&back).unwrap(), bytes);
            prop_assert_eq!(back, c);
        }
    }
}
