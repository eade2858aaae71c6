//! NPY 1.0 interchange: little-endian `<f4` / `<f8`, C order.
//!
//! Layout: `\x93NUMPY`, major/minor version bytes, a little-endian `u16`
//! header length, then a Python-literal dict header padded with spaces and
//! a trailing newline so the data starts on a 64-byte boundary. Version 2.0
//! files (`u32` header length) are accepted on read.

use std::fs;
use std::path::Path;

use crate::error::{GragError, NpyError, Result};
use crate::numerics::Tensor;
use crate::scalar::{DType, Scalar};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

/// A tensor of either supported dtype, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T` (exact when widening f32 to f64).
    pub fn to_scalar<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

pub fn encode<T: Scalar>(x: &Tensor<T>) -> Vec<u8> {
    let shape = match x.shape() {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {shape}, }}",
        T::DTYPE.descr()
    );
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat((ALIGN - unpadded % ALIGN) % ALIGN));
    header.push('\n');

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + x.len() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for &v in x.data() {
        v.write_le(&mut out);
    }
    out
}

/// Parsed header fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte offset of the array data.
    pub data_offset: usize,
}

pub fn decode_header(bytes: &[u8]) -> std::result::Result<NpyHeader, NpyError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    let need = |n: usize| {
        if bytes.len() < n {
            Err(NpyError::MalformedHeader(format!(
                "file ends after {} bytes, inside the header",
                bytes.len()
            )))
        } else {
            Ok(())
        }
    };
    need(8)?;
    let (major, minor) = (bytes[6], bytes[7]);
    let (len_bytes, header_len) = match major {
        1 => {
            need(10)?;
            (2, u16::from_le_bytes([bytes[8], bytes[9]]) as usize)
        }
        2 | 3 => {
            need(12)?;
            (
                4,
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
            )
        }
        _ => return Err(NpyError::UnsupportedVersion(major, minor)),
    };
    let start = 8 + len_bytes;
    need(start + header_len)?;
    let text = std::str::from_utf8(&bytes[start..start + header_len])
        .map_err(|_| NpyError::MalformedHeader("header is not valid text".into()))?;
    let dict = parse_dict(text)?;

    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    for (key, value) in dict {
        match (key.as_str(), value) {
            ("descr", Literal::Str(s)) => descr = Some(s),
            ("fortran_order", Literal::Bool(b)) => fortran = Some(b),
            ("shape", Literal::Tuple(t)) => shape = Some(t),
            (k @ ("descr" | "fortran_order" | "shape"), _) => {
                return Err(NpyError::MalformedHeader(format!(
                    "wrong value type for {k:?}"
                )))
            }
            _ => {}
        }
    }
    let descr = descr.ok_or_else(|| NpyError::MalformedHeader("missing 'descr'".into()))?;
    let fortran =
        fortran.ok_or_else(|| NpyError::MalformedHeader("missing 'fortran_order'".into()))?;
    let shape = shape.ok_or_else(|| NpyError::MalformedHeader("missing 'shape'".into()))?;
    let dtype = DType::from_descr(&descr).ok_or(NpyError::UnsupportedDtype(descr))?;
    if fortran {
        return Err(NpyError::FortranOrder);
    }
    if shape.is_empty() || shape.contains(&0) {
        return Err(NpyError::MalformedHeader(format!(
            "shape {shape:?} is not supported (need rank >= 1 and non-zero dims)"
        )));
    }
    Ok(NpyHeader {
        dtype,
        shape,
        data_offset: start + header_len,
    })
}

fn decode_as<T: Scalar>(
    bytes: &[u8],
    header: &NpyHeader,
) -> std::result::Result<Tensor<T>, NpyError> {
    let count: usize = header.shape.iter().product();
    let size = T::DTYPE.size_of();
    let expected = count * size;
    let body = &bytes[header.data_offset..];
    if body.len() < expected {
        return Err(NpyError::Truncated {
            expected,
            found: body.len(),
        });
    }
    if body.len() > expected {
        return Err(NpyError::TrailingBytes(body.len() - expected));
    }
    let data = body.chunks_exact(size).map(T::read_le).collect();
    Ok(Tensor::from_parts(header.shape.clone(), data))
}

pub fn decode_any(bytes: &[u8]) -> std::result::Result<AnyTensor, NpyError> {
    let header = decode_header(bytes)?;
    Ok(match header.dtype {
        DType::F32 => AnyTensor::F32(decode_as(bytes, &header)?),
        DType::F64 => AnyTensor::F64(decode_as(bytes, &header)?),
    })
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> std::result::Result<Tensor<T>, NpyError> {
    let header = decode_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(NpyError::DtypeMismatch {
            expected: T::DTYPE.descr().into(),
            found: header.dtype.descr().into(),
        });
    }
    decode_as(bytes, &header)
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, x: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(x)).map_err(|e| GragError::io(path, e))
}

pub fn write_any(path: impl AsRef<Path>, x: &AnyTensor) -> Result<()> {
    match x {
        AnyTensor::F32(t) => write_tensor(path, t),
        AnyTensor::F64(t) => write_tensor(path, t),
    }
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| GragError::io(path, e))?;
    decode(&bytes).map_err(|source| GragError::Npy {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| GragError::io(path, e))?;
    decode_any(&bytes).map_err(|source| GragError::Npy {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Literal {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

/// Parses the restricted Python dict literal NPY headers use.
fn parse_dict(text: &str) -> std::result::Result<Vec<(String, Literal)>, NpyError> {
    let bad = |msg: &str| NpyError::MalformedHeader(msg.to_string());
    let mut p = Cursor {
        chars: text.trim_end_matches(['\n', ' ', '\0']).chars().collect(),
        pos: 0,
    };
    p.skip_ws();
    if !p.eat('{') {
        return Err(bad("header does not start with '{'"));
    }
    let mut items = Vec::new();
    loop {
        p.skip_ws();
        if p.eat('}') {
            break;
        }
        let key = p.string().ok_or_else(|| bad("expected a quoted key"))?;
        p.skip_ws();
        if !p.eat(':') {
            return Err(bad("expected ':' after key"));
        }
        p.skip_ws();
        let value = match p.peek() {
            Some('\'' | '"') => Literal::Str(p.string().ok_or_else(|| bad("unterminated string"))?),
            Some('(') => Literal::Tuple(p.tuple().ok_or_else(|| bad("malformed shape tuple"))?),
            Some('T' | 'F') => Literal::Bool(p.boolean().ok_or_else(|| bad("malformed boolean"))?),
            _ => return Err(bad("unsupported value in header")),
        };
        items.push((key, value));
        p.skip_ws();
        if p.eat(',') {
            continue;
        }
        p.skip_ws();
        if p.eat('}') {
            break;
        }
        return Err(bad("expected ',' or '}'"));
    }
    p.skip_ws();
    if p.pos != p.chars.len() {
        return Err(bad("trailing characters after header dict"));
    }
    Ok(items)
}

struct Cursor {
    chars: Vec<char>,
    pos: usize,
}

impl Cursor {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn string(&mut self) -> Option<String> {
        let quote = self.peek().filter(|&c| c == '\'' || c == '"')?;
        self.pos += 1;
        let start = self.pos;
        while self.peek()? != quote {
            self.pos += 1;
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        self.pos += 1;
        Some(s)
    }

    fn boolean(&mut self) -> Option<bool> {
        for (word, v) in [("True", true), ("False", false)] {
            let end = self.pos + word.len();
            if end <= self.chars.len() && self.chars[self.pos..end].iter().copied().eq(word.chars())
            {
                self.pos = end;
                return Some(v);
            }
        }
        None
    }

    fn tuple(&mut self) -> Option<Vec<usize>> {
        if !self.eat('(') {
            return None;
        }
        let mut dims = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(')') {
                return Some(dims);
            }
            let start = self.pos;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
            if start == self.pos {
                return None;
            }
            let digits: String = self.chars[start..self.pos].iter().collect();
            // numpy writes Python ints; some writers emit a trailing 'L'
            self.eat('L');
            dims.push(digits.parse().ok()?);
            self.skip_ws();
            if !self.eat(',') {
                self.skip_ws();
                return self.eat(')').then_some(dims);
            }
        }
    }
}
