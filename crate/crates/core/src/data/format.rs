//! Binary tensor files and 8-bit PGM previews.
//!
//! Tensor layout: `"TSR1"` | rank (u32 LE) | extents (u32 LE each) | payload
//! (f32 LE, row-major). There is no checksum.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"TSR1";
pub const MAX_RANK: usize = 5;
/// Refuse payloads above this many elements (1 GiB of f32).
pub const MAX_ELEMENTS: usize = 1 << 28;

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.buf.len() as u64,
                format!("truncated {what}: need {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes one tensor from the start of `buf`, returning it with the number
/// of bytes consumed.
pub fn decode_tensor_prefix(buf: &[u8]) -> Result<(Tensor<f32>, usize)> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != TENSOR_MAGIC {
        return Err(Error::format(0, "bad magic, expected TSR1"));
    }
    let rank = c.u32("rank")? as usize;
    if rank > MAX_RANK {
        return Err(Error::format(4, format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let off = c.pos as u64;
        let d = c.u32("extent")? as usize;
        if d == 0 {
            return Err(Error::format(off, format!("extent {i} is zero")));
        }
        count = count
            .checked_mul(d)
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| Error::format(off, "extent product overflows"))?;
        shape.push(d);
    }
    let bytes = c.take(count * 4, "payload")?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((Tensor::new(&shape, data)?, c.pos))
}

/// Decodes a whole buffer holding exactly one tensor.
pub fn decode_tensor(buf: &[u8]) -> Result<Tensor<f32>> {
    let (t, used) = decode_tensor_prefix(buf)?;
    if used != buf.len() {
        return Err(Error::format(used as u64, format!("{} trailing bytes", buf.len() - used)));
    }
    Ok(t)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    decode_tensor(&read_bytes(path)?)
}

/// Scales a nonnegative map by its maximum into an 8-bit binary PGM.
pub fn encode_pgm(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::Dimension { op: "encode_pgm", lhs: s.to_vec(), rhs: vec![0, 0] });
    }
    let max = map.data().iter().cloned().fold(0.0f32, f32::max);
    let mut out = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if max > 0.0 {
            (v.max(0.0) / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// Parsed binary PGM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

/// Parses an 8-bit `P5` image with optional `#` comments in the header.
pub fn decode_pgm(buf: &[u8]) -> Result<Pgm> {
    if buf.len() < 2 || &buf[..2] != b"P5" {
        return Err(Error::format(0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match buf.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(pos as u64, "truncated header")),
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos || pos - start > 9 {
            return Err(Error::format(start as u64, format!("bad header field {i}")));
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .expect("ascii digits")
            .parse()
            .expect("at most nine digits");
    }
    if !buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(pos as u64, "header must end with one whitespace byte"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(3, "zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(pos as u64, format!("unsupported maxval {maxval}")));
    }
    let n = width
        .checked_mul(height)
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::format(3, "image too large"))?;
    if buf.len() - pos != n {
        return Err(Error::format(
            pos as u64,
            format!("payload has {} bytes, header implies {n}", buf.len() - pos),
        ));
    }
    Ok(Pgm { width, height, maxval: maxval as u16, pixels: buf[pos..].to_vec() })
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("tsr")
}

/// Writes a PGM preview plus a sidecar tensor holding the exact values.
pub fn write_map(path: &Path, map: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_pgm(map)?)?;
    write_tensor(&sidecar(path), map)
}

/// Reads a map, preferring the exact sidecar when present.
pub fn read_map(path: &Path) -> Result<Tensor<f32>> {
    let side = sidecar(path);
    if side.exists() {
        return read_tensor(&side);
    }
    let pgm = decode_pgm(&read_bytes(path)?)?;
    let scale = 1.0 / pgm.maxval as f32;
    Tensor::new(
        &[pgm.height, pgm.width],
        pgm.pixels.iter().map(|&p| p as f32 * scale).collect(),
    )
}
