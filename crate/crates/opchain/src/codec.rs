//! PPM (P5/P6, maxval 255) and 8-bit PNG encode/decode.

use std::fs;
use std::path::Path;

use opchain_core::ImageBuffer;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    /// `.png` selects PNG; anything else is PPM/PGM.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
            Some(e) if e == "png" => ImageFormat::Png,
            _ => ImageFormat::Ppm,
        }
    }
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];
// Bit depth byte inside the IHDR chunk.
const PNG_DEPTH_OFFSET: usize = 24;

pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes)
    } else {
        Err(Error::decode(0, "unrecognized magic; expected P5, P6 or PNG"))
    }
}

pub fn encode_image(img: &ImageBuffer, format: ImageFormat) -> Vec<u8> {
    match format {
        ImageFormat::Ppm => encode_pnm(img),
        ImageFormat::Png => encode_png(img),
    }
}

pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Decode { offset, msg } => Error::Decode { offset, msg: format!("{}: {msg}", path.display()) },
        other => other,
    })
}

pub fn write_image(path: &Path, img: &ImageBuffer) -> Result<()> {
    fs::write(path, encode_image(img, ImageFormat::from_path(path))).map_err(|e| Error::io(path, e))
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::decode(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::decode(start, format!("{what} out of range")))
    }
}

fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let channels = if bytes[1] == b'6' { 3 } else { 1 };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    h.skip_space();
    let max_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::decode(max_at, format!("unsupported maxval {maxval}; only 8-bit (255) is supported")));
    }
    if width == 0 || height == 0 {
        return Err(Error::decode(max_at, "zero image dimension"));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(Error::decode(h.pos, "expected a single whitespace before the raster")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::decode(2, "image dimensions overflow"))?;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err(Error::decode(
            bytes.len(),
            format!("truncated raster: {} of {need} bytes present", payload.len()),
        ));
    }
    Ok(ImageBuffer::new(height, width, channels, payload[..need].to_vec())?)
}

fn encode_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::decode(8, format!("png header: {e}")))?;
    let info = reader.info();
    if info.bit_depth == png::BitDepth::Sixteen {
        return Err(Error::decode(PNG_DEPTH_OFFSET, "unsupported bit depth 16"));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::decode(8, "png image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::decode(bytes.len(), format!("png data: {e}")))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let px = &buf[..frame.buffer_size()];
    let (channels, data) = match frame.color_type {
        png::ColorType::Grayscale => (1, px.to_vec()),
        png::ColorType::GrayscaleAlpha => (1, px.chunks(2).map(|p| p[0]).collect()),
        png::ColorType::Rgb => (3, px.to_vec()),
        png::ColorType::Rgba => (3, px.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
        png::ColorType::Indexed => return Err(Error::decode(25, "palette was not expanded")),
    };
    Ok(ImageBuffer::new(h, w, channels, data)?)
}

fn encode_png(img: &ImageBuffer) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(if img.channels() == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
        enc.set_depth(png::BitDepth::Eight);
        // Writing into a Vec cannot fail for a valid buffer.
        let mut w = enc.write_header().expect("png header");
        w.write_image_data(img.data()).expect("png data");
    }
    out
}
