//! Binary Netpbm codecs: PPM (P6) and PGM (P5) images, PBM (P4) masks.
//!
//! Headers may carry `#` comments. Only `maxval <= 255` is accepted.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::image::{GrayImage, Mask, RgbImage};
use crate::pipeline::grayscale_to_rgb;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetpbmError {
    #[error("unsupported magic number {0:?}")]
    BadMagic(String),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("unsupported maxval {0}")]
    UnsupportedMaxval(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Pbm,
    Pgm,
    Ppm,
}

struct Header {
    kind: Kind,
    width: usize,
    height: usize,
    payload_start: usize,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.buf.len() {
            let c = self.buf[self.pos];
            if c == b'#' {
                while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, NetpbmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(NetpbmError::BadHeader(format!("missing {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| NetpbmError::BadHeader(format!("{what} out of range")))
    }
}

const MAX_DIM: u32 = 1 << 15;

fn parse_header(buf: &[u8]) -> Result<Header, NetpbmError> {
    if buf.len() < 2 {
        return Err(NetpbmError::BadMagic(String::from_utf8_lossy(buf).into_owned()));
    }
    let kind = match &buf[..2] {
        b"P4" => Kind::Pbm,
        b"P5" => Kind::Pgm,
        b"P6" => Kind::Ppm,
        other => return Err(NetpbmError::BadMagic(String::from_utf8_lossy(other).into_owned())),
    };
    let mut cur = Cursor { buf, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    if width == 0 || height == 0 || width > MAX_DIM || height > MAX_DIM {
        return Err(NetpbmError::BadHeader(format!("bad dimensions {width}x{height}")));
    }
    if kind != Kind::Pbm {
        let maxval = cur.number("maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(NetpbmError::UnsupportedMaxval(maxval));
        }
    }
    // Exactly one whitespace byte separates the header from the payload.
    match buf.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(NetpbmError::BadHeader("missing separator before payload".into())),
    }
    Ok(Header {
        kind,
        width: width as usize,
        height: height as usize,
        payload_start: cur.pos,
    })
}

fn payload<'a>(buf: &'a [u8], h: &Header, expected: usize) -> Result<&'a [u8], NetpbmError> {
    let found = buf.len() - h.payload_start;
    if found < expected {
        return Err(NetpbmError::Truncated { expected, found });
    }
    Ok(&buf[h.payload_start..h.payload_start + expected])
}

/// Decodes a P6 or P5 buffer; grayscale is replicated into R, G and B.
pub fn decode_image(buf: &[u8]) -> Result<RgbImage, NetpbmError> {
    let h = parse_header(buf)?;
    match h.kind {
        Kind::Ppm => {
            let data = payload(buf, &h, h.width * h.height * 3)?.to_vec();
            Ok(RgbImage {
                width: h.width,
                height: h.height,
                data,
            })
        }
        Kind::Pgm => {
            let data = payload(buf, &h, h.width * h.height)?.to_vec();
            Ok(grayscale_to_rgb(&GrayImage {
                width: h.width,
                height: h.height,
                data,
            }))
        }
        Kind::Pbm => Err(NetpbmError::BadMagic("P4 (expected an image, got a mask)".into())),
    }
}

pub fn decode_gray(buf: &[u8]) -> Result<GrayImage, NetpbmError> {
    let h = parse_header(buf)?;
    if h.kind != Kind::Pgm {
        return Err(NetpbmError::BadMagic("expected P5".into()));
    }
    let data = payload(buf, &h, h.width * h.height)?.to_vec();
    Ok(GrayImage {
        width: h.width,
        height: h.height,
        data,
    })
}

pub fn decode_mask(buf: &[u8]) -> Result<Mask, NetpbmError> {
    let h = parse_header(buf)?;
    if h.kind != Kind::Pbm {
        return Err(NetpbmError::BadMagic("expected P4".into()));
    }
    let row_bytes = h.width.div_ceil(8);
    let bytes = payload(buf, &h, row_bytes * h.height)?;
    let mut data = Vec::with_capacity(h.width * h.height);
    for y in 0..h.height {
        let row = &bytes[y * row_bytes..(y + 1) * row_bytes];
        for x in 0..h.width {
            data.push(row[x / 8] & (0x80 >> (x % 8)) != 0);
        }
    }
    Ok(Mask {
        width: h.width,
        height: h.height,
        data,
    })
}

pub fn encode_image(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_gray(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P4\n{} {}\n", mask.width, mask.height).into_bytes();
    let row_bytes = mask.width.div_ceil(8);
    for y in 0..mask.height {
        let mut row = vec![0u8; row_bytes];
        for x in 0..mask.width {
            if mask.get(x, y) {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn tag(path: &Path) -> impl FnOnce(NetpbmError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    decode_image(&read(path)?).map_err(tag(path))
}

pub fn save_image(path: &Path, img: &RgbImage) -> Result<()> {
    write(path, &encode_image(img))
}

pub fn save_gray(path: &Path, img: &GrayImage) -> Result<()> {
    write(path, &encode_gray(img))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    decode_mask(&read(path)?).map_err(tag(path))
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    write(path, &encode_mask(mask))
}
