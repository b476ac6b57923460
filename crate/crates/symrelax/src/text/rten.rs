//! RTEN, a minimal binary tensor format, plus a JSON-style inline literal
//! for supplying small tensors on the command line.
//!
//! Layout: magic `RTEN`, version byte (1), dtype byte (0 = f32, 1 = i64,
//! 2 = bool), rank byte, little-endian u64 dims, then raw little-endian data.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::ir::{ConstData, DType};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RTEN";

#[derive(Debug, Error)]
pub enum RtenError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not an RTEN file: bad magic")]
    BadMagic,
    #[error("unsupported RTEN version {0}")]
    BadVersion(u8),
    #[error("invalid dtype code {0}")]
    BadDType(u8),
    #[error("invalid tensor literal: {0}")]
    BadLiteral(String),
}

fn dtype_code(dt: DType) -> u8 {
    match dt {
        DType::F32 => 0,
        DType::I64 => 1,
        DType::Bool => 2,
    }
}

fn code_dtype(c: u8) -> Result<DType, RtenError> {
    match c {
        0 => Ok(DType::F32),
        1 => Ok(DType::I64),
        2 => Ok(DType::Bool),
        other => Err(RtenError::BadDType(other)),
    }
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<(), RtenError> {
    w.write_all(MAGIC)?;
    w.write_all(&[1, dtype_code(t.dtype), t.dims.len() as u8])?;
    for d in &t.dims {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    let start = t.offset * t.dtype.size_bytes();
    w.write_all(&t.storage.borrow()[start..start + t.byte_size()])?;
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor, RtenError> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(RtenError::BadMagic);
    }
    if head[4] != 1 {
        return Err(RtenError::BadVersion(head[4]));
    }
    let dtype = code_dtype(head[5])?;
    let ndim = head[6] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        dims.push(u64::from_le_bytes(b) as i64);
    }
    let t = Tensor::zeros(dtype, dims);
    let mut storage = t.storage.borrow_mut();
    r.read_exact(&mut storage)?;
    drop(storage);
    Ok(t)
}

pub fn save(path: &std::path::Path, t: &Tensor) -> Result<(), RtenError> {
    write_tensor(&mut std::fs::File::create(path)?, t)
}

pub fn load(path: &std::path::Path) -> Result<Tensor, RtenError> {
    read_tensor(&mut std::fs::File::open(path)?)
}

// ---------------------------------------------------------------------------
// Inline literals
// ---------------------------------------------------------------------------

/// Parse a JSON-style inline tensor literal such as
/// `{"dtype": "f32", "dims": [2, 2], "data": [1, 0, 0, 1]}`.
pub fn parse_literal(s: &str) -> Result<Tensor, RtenError> {
    let mut p = Lit { s: s.as_bytes(), pos: 0 };
    p.skip_ws();
    p.expect(b'{')?;
    let mut dtype: Option<DType> = None;
    let mut dims: Option<Vec<i64>> = None;
    let mut data: Option<Vec<f64>> = None;
    loop {
        p.skip_ws();
        if p.eat(b'}') {
            break;
        }
        let key = p.string()?;
        p.skip_ws();
        p.expect(b':')?;
        p.skip_ws();
        match key.as_str() {
            "dtype" => {
                dtype = Some(match p.string()?.as_str() {
                    "f32" => DType::F32,
                    "i64" => DType::I64,
                    "bool" => DType::Bool,
                    other => return Err(bad(format!("unknown dtype `{}`", other))),
                })
            }
            "dims" => dims = Some(p.numbers()?.into_iter().map(|x| x as i64).collect()),
            "data" => data = Some(p.numbers()?),
            other => return Err(bad(format!("unknown key `{}`", other))),
        }
        p.skip_ws();
        if !p.eat(b',') {
            p.skip_ws();
            p.expect(b'}')?;
            break;
        }
    }
    p.skip_ws();
    if p.pos != p.s.len() {
        return Err(bad("trailing characters"));
    }

    let dtype = dtype.ok_or_else(|| bad("missing `dtype`"))?;
    let data = data.ok_or_else(|| bad("missing `data`"))?;
    let dims = dims.unwrap_or_else(|| vec![data.len() as i64]);
    let count: i64 = dims.iter().product();
    if count != data.len() as i64 {
        return Err(bad(format!("{} elements for shape {:?}", data.len(), dims)));
    }
    let cd = match dtype {
        DType::F32 => ConstData::F32(data.iter().map(|x| *x as f32).collect()),
        DType::I64 => ConstData::I64(data.iter().map(|x| *x as i64).collect()),
        DType::Bool => ConstData::Bool(data.iter().map(|x| *x != 0.0).collect()),
    };
    Ok(Tensor::from_const(&dims, &cd))
}

fn bad(msg: impl Into<String>) -> RtenError {
    RtenError::BadLiteral(msg.into())
}

struct Lit<'a> {
    s: &'a [u8],
    pos: usize,
}

impl Lit<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.s.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), RtenError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(bad(format!("expected `{}`", c as char)))
        }
    }

    fn string(&mut self) -> Result<String, RtenError> {
        self.expect(b'"')?;
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos] != b'"' {
            self.pos += 1;
        }
        if self.pos == self.s.len() {
            return Err(bad("unterminated string"));
        }
        let out = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(out)
    }

    fn numbers(&mut self) -> Result<Vec<f64>, RtenError> {
        self.expect(b'[')?;
        let mut out = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(b']') {
                break;
            }
            let start = self.pos;
            while self.pos < self.s.len()
                && matches!(self.s[self.pos], b'0'..=b'9' | b'-' | b'+' | b'.' | b'e' | b'E')
            {
                self.pos += 1;
            }
            let txt = std::str::from_utf8(&self.s[start..self.pos]).unwrap_or("");
            out.push(
                txt.parse::<f64>()
                    .map_err(|_| bad(format!("invalid number `{}`", txt)))?,
            );
            self.skip_ws();
            if !self.eat(b',') {
                self.expect(b']')?;
                break;
            }
        }
        Ok(out)
    }
}
