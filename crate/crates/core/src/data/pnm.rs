//! Binary PGM (P5) and PPM (P6) codec at 8 or 16 bits per sample.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Millimeter quantization for 16-bit depth maps.
pub const DEFAULT_DEPTH_SCALE: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            _ => Err(Error::invalid(format!("unsupported bit depth {bits}"))),
        }
    }
}

/// Round-half-up to an integer in `[0, maxval]`.
fn quantize(x: f64, maxval: u32) -> Option<u32> {
    let q = (x + 0.5).floor();
    (x.is_finite() && q >= 0.0 && q <= maxval as f64).then_some(q as u32)
}

fn encode_samples(magic: &str, h: usize, w: usize, c: usize, bits: BitDepth, sample: impl Fn(usize, usize, usize) -> u32) -> Vec<u8> {
    let mut out = format!("{magic}\n{w} {h}\n{}\n", bits.maxval()).into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let q = sample(ch, y, x);
                match bits {
                    BitDepth::Eight => out.push(q as u8),
                    BitDepth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
                }
            }
        }
    }
    out
}

/// Encodes a `[1, H, W]` (P5) or `[3, H, W]` (P6) tensor with values in
/// `[0, 1]`.
pub fn encode(image: &Tensor<f32>, bits: BitDepth) -> Result<Vec<u8>> {
    let (c, h, w) = match *image.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => {
            return Err(Error::shape(
                "pnm encode",
                format!("expected [1|3, H, W], got {:?}", image.shape()),
            ))
        }
    };
    let maxval = bits.maxval();
    let mut q = Vec::with_capacity(image.numel());
    for (i, &v) in image.data().iter().enumerate() {
        q.push(quantize(v as f64 * maxval as f64, maxval).ok_or_else(|| {
            Error::invalid(format!("pnm encode: element {i} = {v} outside [0, 1]"))
        })?);
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    Ok(encode_samples(magic, h, w, c, bits, |ch, y, x| q[(ch * h + y) * w + x]))
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    bits: BitDepth,
    body: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::parse(0, "expected P5 or P6 magic")),
    };
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (k, what) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        fields[k] = text
            .parse()
            .map_err(|_| Error::parse(start, format!("bad {what}")))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::parse(pos, "missing whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    let bits = match maxval {
        255 => BitDepth::Eight,
        65535 => BitDepth::Sixteen,
        m => return Err(Error::parse(pos, format!("unsupported maxval {m}"))),
    };
    if width == 0 || height == 0 {
        return Err(Error::parse(2, "empty image"));
    }
    Ok(Header {
        channels,
        width: width as usize,
        height: height as usize,
        bits,
        body: pos + 1,
    })
}

fn raw_samples(bytes: &[u8], hdr: &Header) -> Result<Vec<u32>> {
    let per = if hdr.bits == BitDepth::Eight { 1 } else { 2 };
    let n = hdr.channels * hdr.width * hdr.height;
    let body = &bytes[hdr.body..];
    if body.len() != n * per {
        return Err(Error::parse(
            hdr.body,
            format!("expected {} data bytes, found {}", n * per, body.len()),
        ));
    }
    Ok(match hdr.bits {
        BitDepth::Eight => body.iter().map(|&b| b as u32).collect(),
        BitDepth::Sixteen => body
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as u32)
            .collect(),
    })
}

fn planar(raw: &[u32], hdr: &Header, f: impl Fn(u32) -> f32) -> Result<Tensor<f32>> {
    let (c, h, w) = (hdr.channels, hdr.height, hdr.width);
    let mut data = vec![0f32; c * h * w];
    for (i, &q) in raw.iter().enumerate() {
        let ch = i % c;
        let p = i / c;
        data[ch * h * w + p] = f(q);
    }
    Tensor::new([c, h, w], data)
}

/// Decodes to `[C, H, W]` values in `[0, 1]`, returning the stored bit depth.
pub fn decode(bytes: &[u8]) -> Result<(Tensor<f32>, BitDepth)> {
    let hdr = parse_header(bytes)?;
    let raw = raw_samples(bytes, &hdr)?;
    let maxval = hdr.bits.maxval() as f64;
    Ok((planar(&raw, &hdr, |q| (q as f64 / maxval) as f32)?, hdr.bits))
}

/// Like [`decode`] but rejects files whose maxval does not match `bits`.
pub fn decode_expect(bytes: &[u8], bits: BitDepth) -> Result<Tensor<f32>> {
    let (img, found) = decode(bytes)?;
    if found != bits {
        return Err(Error::invalid(format!(
            "maxval {} does not match expected {}",
            found.maxval(),
            bits.maxval()
        )));
    }
    Ok(img)
}

/// 16-bit depth PGM storing `round(depth * scale)`.
pub fn encode_depth16(depth: &Tensor<f32>, scale: f64) -> Result<Vec<u8>> {
    let (h, w) = match *depth.shape() {
        [1, h, w] => (h, w),
        _ => return Err(Error::shape("depth pgm", format!("{:?}", depth.shape()))),
    };
    if !(scale > 0.0) {
        return Err(Error::invalid("depth scale must be positive"));
    }
    let mut q = Vec::with_capacity(depth.numel());
    for (i, &d) in depth.data().iter().enumerate() {
        q.push(quantize(d as f64 * scale, 65535).ok_or_else(|| {
            Error::invalid(format!("depth pgm: element {i} = {d} not representable"))
        })?);
    }
    Ok(encode_samples("P5", h, w, 1, BitDepth::Sixteen, |_, y, x| q[y * w + x]))
}

pub fn decode_depth16(bytes: &[u8], scale: f64) -> Result<Tensor<f32>> {
    let hdr = parse_header(bytes)?;
    if hdr.channels != 1 || hdr.bits != BitDepth::Sixteen {
        return Err(Error::invalid("depth map must be a 16-bit PGM"));
    }
    let raw = raw_samples(bytes, &hdr)?;
    planar(&raw, &hdr, |q| (q as f64 / scale) as f32)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes the depth PGM plus a `<path>.meta` file recording the scale.
pub fn write_depth16(path: impl AsRef<Path>, depth: &Tensor<f32>, scale: f64) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_depth16(depth, scale)?)?;
    std::fs::write(sidecar(path), format!("depth_scale = {scale}\n"))?;
    Ok(())
}

pub fn read_depth16(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let meta = std::fs::read_to_string(sidecar(path))?;
    let scale = meta
        .lines()
        .find_map(|l| l.strip_prefix("depth_scale = "))
        .and_then(|v| v.trim().parse::<f64>().ok())
        .ok_or_else(|| Error::invalid(format!("no depth_scale in {}", sidecar(path).display())))?;
    decode_depth16(&std::fs::read(path)?, scale)
}

pub fn write(path: impl AsRef<Path>, image: &Tensor<f32>, bits: BitDepth) -> Result<()> {
    std::fs::write(path, encode(image, bits)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<(Tensor<f32>, BitDepth)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_maps_to_255() {
        let img = Tensor::new([1, 1, 2], vec![1.0f32, 0.0]).unwrap();
        let bytes = encode(&img, BitDepth::Eight).unwrap();
        assert_eq!(bytes, b"P5\n2 1\n255\n\xff\x00");
    }

    #[test]
    fn half_rounds_up() {
        assert_eq!(quantize(0.5, 255), Some(1));
        assert_eq!(quantize(2.5, 255), Some(3));
        assert_eq!(quantize(2.4999, 255), Some(2));
        assert_eq!(quantize(255.6, 255), None);
        assert_eq!(quantize(-0.6, 255), None);
    }

    #[test]
    fn depth_millimeters() {
        let d = Tensor::new([1, 1, 1], vec![3.7f32]).unwrap();
        let bytes = encode_depth16(&d, DEFAULT_DEPTH_SCALE).unwrap();
        assert_eq!(&bytes[bytes.len() - 2..], &3700u16.to_be_bytes());
        assert_eq!(decode_depth16(&bytes, 1000.0).unwrap().data(), [3.7f32]);
        let far = Tensor::new([1, 1, 1], vec![70.0f32]).unwrap();
        assert!(encode_depth16(&far, DEFAULT_DEPTH_SCALE).is_err());
    }

    #[test]
    fn maxval_mismatch_rejected() {
        let img = Tensor::new([1, 1, 1], vec![0.25f32]).unwrap();
        let bytes = encode(&img, BitDepth::Eight).unwrap();
        assert!(decode_expect(&bytes, BitDepth::Sixteen).is_err());
        assert!(decode(b"P5\n1 1\n1023\n\0\0").is_err());
    }

    #[test]
    fn header_comments_and_rgb_layout() {
        let bytes = b"P6\n# made by hand\n2 1\n255\n\x01\x02\x03\x04\x05\x06";
        let (img, bits) = decode(bytes).unwrap();
        assert_eq!(bits, BitDepth::Eight);
        let q: Vec<u8> = img.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(q, [1, 4, 2, 5, 3, 6]);
    }
}
