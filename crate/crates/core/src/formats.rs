//! STRM tensor container, key=value manifests and tensor bundles.
//!
//! STRM layout, all integers little-endian:
//!
//! | bytes        | field                                  |
//! |--------------|----------------------------------------|
//! | 4            | magic `STRM`                           |
//! | 4            | version, u32 = 1                       |
//! | 1            | dtype: 0 = f32, 1 = f64, 2 = u8        |
//! | 1            | ndim                                   |
//! | 4 × ndim     | extents, u32 each                      |
//! | rest         | row-major payload                      |
//!
//! A bundle is a directory of `<name>.strm` files plus `manifest.txt`, whose
//! `name=AxBxC` lines list every tensor and whose `meta.<key>=value` lines
//! carry free-form metadata.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"STRM";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";
const HEADER: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// Decoded file contents before conversion to a typed tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

/// Byte tensor, used for masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteTensor {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl ByteTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "byte tensor shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(ByteTensor { shape, data })
    }
}

fn header(dtype: DType, shape: &[usize]) -> Result<Vec<u8>> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::Contract(format!("rank {} exceeds the container limit", shape.len())));
    }
    let mut out = Vec::with_capacity(HEADER + 4 * shape.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::Contract(format!("extent {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn encode<F: Real>(t: &Tensor<F>) -> Result<Vec<u8>> {
    let dtype = DType::from_code(F::DTYPE_CODE).expect("real dtype code");
    let mut out = header(dtype, t.shape())?;
    out.reserve(t.len() * dtype.size());
    for &v in t.data() {
        v.to_le(&mut out);
    }
    Ok(out)
}

pub fn encode_bytes(t: &ByteTensor) -> Result<Vec<u8>> {
    let mut out = header(DType::U8, &t.shape)?;
    out.extend_from_slice(&t.data);
    Ok(out)
}

fn fmt_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parses and validates a whole file image.
pub fn decode(bytes: &[u8]) -> Result<RawTensor> {
    if bytes.len() < HEADER {
        return Err(fmt_err(
            bytes.len(),
            format!("truncated header: expected at least {HEADER} bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(fmt_err(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fmt_err(4, format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(bytes[8]).ok_or_else(|| fmt_err(8, format!("unknown dtype code {}", bytes[8])))?;
    let ndim = bytes[9] as usize;
    let ext_end = HEADER + 4 * ndim;
    if bytes.len() < ext_end {
        return Err(fmt_err(
            bytes.len(),
            format!("truncated extents: expected {ext_end} header bytes, found {}", bytes.len()),
        ));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut count: u64 = 1;
    for k in 0..ndim {
        let at = HEADER + 4 * k;
        let d = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        if d == 0 {
            return Err(fmt_err(at, "zero extent"));
        }
        count = count
            .checked_mul(d as u64)
            .filter(|&c| c.checked_mul(dtype.size() as u64).is_some_and(|b| b <= isize::MAX as u64))
            .ok_or_else(|| fmt_err(at, "extent product overflows"))?;
        shape.push(d as usize);
    }
    let expected = ext_end as u64 + count * dtype.size() as u64;
    let actual = bytes.len() as u64;
    if actual != expected {
        let what = if actual < expected { "truncated payload" } else { "trailing bytes" };
        return Err(fmt_err(
            bytes.len().min(expected as usize),
            format!("{what}: expected {expected} bytes, found {actual}"),
        ));
    }
    Ok(RawTensor {
        dtype,
        shape,
        payload: bytes[ext_end..].to_vec(),
    })
}

impl RawTensor {
    /// Converts a float payload to `F`; byte payloads are rejected.
    pub fn to_tensor<F: Real>(&self) -> Result<Tensor<F>> {
        let data: Vec<F> = match self.dtype {
            DType::F32 => self
                .payload
                .chunks_exact(4)
                .map(|c| F::of(f32::from_le(c) as f64))
                .collect(),
            DType::F64 => self.payload.chunks_exact(8).map(|c| F::of(f64::from_le(c))).collect(),
            DType::U8 => {
                return Err(Error::Input("expected a floating-point tensor, found u8".into()));
            }
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn to_bytes(&self) -> Result<ByteTensor> {
        if self.dtype != DType::U8 {
            return Err(Error::Input(format!("expected a u8 tensor, found {:?}", self.dtype)));
        }
        ByteTensor::new(self.shape.clone(), self.payload.clone())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_tensor<F: Real>(path: impl AsRef<Path>, t: &Tensor<F>) -> Result<()> {
    write_file(path.as_ref(), &encode(t)?)
}

pub fn write_byte_tensor(path: impl AsRef<Path>, t: &ByteTensor) -> Result<()> {
    write_file(path.as_ref(), &encode_bytes(t)?)
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawTensor> {
    let path = path.as_ref();
    decode(&read_file(path)?).map_err(|e| e.context(path.display()))
}

pub fn read_tensor<F: Real>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    let path = path.as_ref();
    read_raw(path)?.to_tensor().map_err(|e| e.context(path.display()))
}

pub fn read_byte_tensor(path: impl AsRef<Path>) -> Result<ByteTensor> {
    let path = path.as_ref();
    read_raw(path)?.to_bytes().map_err(|e| e.context(path.display()))
}

/// Ordered `key=value` lines.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    /// Parses UTF-8 text; blank lines and `#` comments are skipped. Errors
    /// cite the 1-based line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("line {}: expected key=value, got {line:?}", k + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Input(format!("line {}: empty key", k + 1)));
            }
            if entries.iter().any(|(e, _): &(String, String)| e == key) {
                return Err(Error::Input(format!("line {}: duplicate key {key}", k + 1)));
            }
            entries.push((key.to_string(), value.trim().to_string()));
        }
        Ok(Manifest { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Input(format!("manifest is missing {key}")))
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let (key, value) = (key.into(), value.into());
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path.display()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.render().as_bytes())
    }
}

pub fn format_shape(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(vec![]);
    }
    s.split('x')
        .map(|p| match p.trim().parse::<usize>() {
            Ok(d) if d > 0 => Ok(d),
            _ => Err(Error::Input(format!("bad shape {s:?}"))),
        })
        .collect()
}

/// Named tensors plus metadata, stored as a directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle<F> {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> Default for Bundle<F> {
    fn default() -> Self {
        Bundle {
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && !name.starts_with("meta.")
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!("invalid tensor name {name:?}")))
    }
}

impl<F: Real> Bundle<F> {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Input(format!("bundle is missing metadata {key}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Input(format!("bundle is missing tensor {name}")))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut m = Manifest::default();
        for (k, v) in &self.meta {
            if v.contains('\n') {
                return Err(Error::Contract(format!("metadata {k} spans lines")));
            }
            m.insert(format!("meta.{k}"), v.clone());
        }
        for (name, t) in &self.tensors {
            check_name(name)?;
            write_tensor(dir.join(format!("{name}.strm")), t)?;
            m.insert(name.clone(), format_shape(t.shape()));
        }
        m.write(dir.join(MANIFEST))
    }

    /// Reads every listed tensor and checks it against the declared shape.
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m = Manifest::read(dir.join(MANIFEST))?;
        let mut b = Bundle::default();
        for (k, v) in &m.entries {
            if let Some(key) = k.strip_prefix("meta.") {
                b.meta.insert(key.to_string(), v.clone());
                continue;
            }
            check_name(k).map_err(|_| Error::Input(format!("invalid tensor name {k:?} in manifest")))?;
            let shape = parse_shape(v)?;
            let t: Tensor<F> = read_tensor(dir.join(format!("{k}.strm")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Input(format!(
                    "{k}: manifest declares {v}, file holds {}",
                    format_shape(t.shape())
                )));
            }
            b.tensors.insert(k.clone(), t);
        }
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_round_trip_and_layout() {
        let t = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let bytes = encode(&t).unwrap();
        assert_eq!(&bytes[..4], b"STRM");
        assert_eq!(&bytes[4..10], &[1, 0, 0, 0, 1, 2]);
        assert_eq!(&bytes[10..18], &[2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes.len(), 18 + 32);
        let back = decode(&bytes).unwrap().to_tensor::<f64>().unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn negatives_carry_offsets() {
        let t = Tensor::<f32>::ones(&[3]);
        let bytes = encode(&t).unwrap();
        let err = decode(&bytes[..bytes.len() - 1]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 26 bytes, found 25"), "{msg}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 4, .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 8, .. })));
        let mut over = header(DType::F64, &[1]).unwrap();
        over[9] = 3;
        over.truncate(HEADER);
        for _ in 0..3 {
            over.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode(&over), Err(Error::Format { offset: 14, .. })));
        assert!(matches!(decode(b"STR"), Err(Error::Format { offset: 3, .. })));
    }

    #[test]
    fn manifest_grammar() {
        let m = Manifest::parse("# c\n\na = 1\nb=2x3\n").unwrap();
        assert_eq!(m.get("a"), Some("1"));
        assert_eq!(parse_shape(m.get("b").unwrap()).unwrap(), vec![2, 3]);
        let e = Manifest::parse("a=1\nbroken\n").unwrap_err();
        assert!(e.to_string().contains("line 2"));
        assert!(Manifest::parse("a=1\na=2").is_err());
    }
}
