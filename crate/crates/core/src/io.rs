//! Image files: binary PGM (`P5`) and PPM (`P6`) with maxval 255, and the
//! raw float format RCSI.
//!
//! Images are `[C, H, W]` tensors with values in `[0, 1]`. Netpbm samples map
//! to `v / 255` on read and back with round-to-nearest on write, so reading
//! and writing a file with a canonical header (`P5\n<w> <h>\n255\n`)
//! reproduces it byte for byte.
//!
//! RCSI layout: magic `RCSI`, version `u16`, then `C`, `H`, `W` as `u32`,
//! then `C·H·W` little-endian `f32` values, channel-planar and row-major.

use std::fs;
use std::path::Path;

use crate::codec::{extent_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const RCSI_MAGIC: &[u8; 4] = b"RCSI";
const RCSI_VERSION: u16 = 1;

struct Header<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        loop {
            match self.buf.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.buf.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::parse(start, format!("{what} out of range")))
    }
}

/// Parses a binary PGM or PPM file.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::parse(0, "not a binary PGM (P5) or PPM (P6) file")),
    };
    let mut hdr = Header { buf: bytes, pos: 2 };
    let w = hdr.number("width")?;
    let h = hdr.number("height")?;
    let at = hdr.pos;
    let maxval = hdr.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(Error::parse(at, "zero image extent"));
    }
    if maxval != 255 {
        return Err(Error::parse(at, format!("maxval {maxval} unsupported, expected 255")));
    }
    match bytes.get(hdr.pos) {
        Some(b) if b.is_ascii_whitespace() => hdr.pos += 1,
        _ => return Err(Error::parse(hdr.pos, "expected one whitespace byte after maxval")),
    }
    let n = channels * w * h;
    let payload = &bytes[hdr.pos..];
    if payload.len() < n {
        return Err(Error::parse(bytes.len(), format!("truncated pixel data: {} of {n} bytes present", payload.len())));
    }
    if payload.len() > n {
        return Err(Error::parse(hdr.pos + n, "trailing bytes after pixel data"));
    }
    let plane = w * h;
    let mut data = vec![0.0f32; n];
    for (i, &b) in payload.iter().enumerate() {
        let (pix, c) = (i / channels, i % channels);
        data[c * plane + pix] = b as f32 / 255.0;
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Encodes a 1- or 3-channel image as PGM or PPM.
pub fn encode_pnm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("encode_pnm", format!("expected [C, H, W], got {:?}", image.shape())));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::shape("encode_pnm", format!("{c} channels; PGM/PPM need 1 or 3"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = w * h;
    let d = image.data();
    out.reserve(c * plane);
    for pix in 0..plane {
        for ch in 0..c {
            out.push((d[ch * plane + pix].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_rcsi(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(bytes);
    r.magic(RCSI_MAGIC)?;
    r.version(RCSI_VERSION)?;
    let shape = vec![r.extent("channels")?, r.extent("height")?, r.extent("width")?];
    let data = r.f32_vec(shape.iter().product(), "pixel data")?;
    r.finish()?;
    Tensor::new(shape, data)
}

pub fn encode_rcsi(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("encode_rcsi", format!("expected [C, H, W], got {:?}", image.shape())));
    };
    let mut wr = Writer::new();
    wr.bytes(RCSI_MAGIC)
        .u16(RCSI_VERSION)
        .u32(extent_u32(c, "channels")?)
        .u32(extent_u32(h, "height")?)
        .u32(extent_u32(w, "width")?)
        .f32s(image.data());
    Ok(wr.finish())
}

/// Reads any supported image, recognised by its leading bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.starts_with(RCSI_MAGIC) {
        decode_rcsi(bytes)
    } else {
        decode_pnm(bytes)
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_image(&fs::read(path)?)
}

/// Writes PGM/PPM for `.pgm`, `.ppm` and `.pnm` paths and RCSI otherwise.
pub fn write_image(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("pgm" | "ppm" | "pnm") => encode_pnm(image)?,
        _ => encode_rcsi(image)?,
    };
    fs::write(path, bytes)?;
    Ok(())
}
