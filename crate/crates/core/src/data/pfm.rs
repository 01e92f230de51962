//! Portable float map codec. Rows are stored bottom row first.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encodes a `[1, H, W]` or `[3, H, W]` tensor as little-endian PFM.
pub fn encode(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = match *image.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => {
            return Err(Error::shape(
                "pfm encode",
                format!("expected [1|3, H, W], got {:?}", image.shape()),
            ))
        }
    };
    if let Some(i) = image.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("pfm encode: element {i}")));
    }
    let magic = if c == 1 { "Pf" } else { "PF" };
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(c * h * w * 4);
    let data = image.data();
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&data[(ch * h + y) * w + x].to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    /// Next whitespace-delimited token; consumes exactly one trailing
    /// whitespace byte.
    fn token(&mut self, what: &str) -> Result<&'a str> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos || self.pos >= self.bytes.len() {
            return Err(Error::parse(start, format!("missing {what}")));
        }
        let tok = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::parse(start, format!("non-ascii {what}")))?;
        self.pos += 1;
        Ok(tok)
    }

    fn number<N: std::str::FromStr>(&mut self, what: &str) -> Result<N> {
        let start = self.pos;
        let tok = self.token(what)?;
        tok.parse()
            .map_err(|_| Error::parse(start, format!("bad {what} {tok:?}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let c = match cur.token("magic")? {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::parse(0, format!("bad magic {other:?}"))),
    };
    let dims_at = cur.pos;
    let w: usize = cur.number("width")?;
    let h: usize = cur.number("height")?;
    if w == 0 || h == 0 {
        return Err(Error::parse(dims_at, format!("empty image {w}x{h}")));
    }
    let scale_at = cur.pos;
    let scale: f32 = cur.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(scale_at, format!("bad scale {scale}")));
    }
    let little = scale < 0.0;
    let body = &bytes[cur.pos..];
    let need = c * h * w * 4;
    if body.len() != need {
        return Err(Error::parse(
            cur.pos,
            format!("expected {need} data bytes, found {}", body.len()),
        ));
    }
    let mut data = vec![0f32; c * h * w];
    let mut chunks = body.chunks_exact(4);
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                let b: [u8; 4] = chunks.next().unwrap().try_into().unwrap();
                data[(ch * h + y) * w + x] = if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
            }
        }
    }
    Tensor::new([c, h, w], data)
}

pub fn write(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode(image)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode(&std::fs::read(path)?)
}
