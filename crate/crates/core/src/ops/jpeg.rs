//! Baseline JPEG round trip in the pixel domain.
//!
//! Entropy coding is lossless, so the round trip is exactly color conversion,
//! blockwise DCT, quantization, dequantization and the inverse path.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{param_err, Result};
use crate::image::{quantize, ImageBuffer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Subsampling {
    /// 4:4:4, full-resolution chroma.
    #[default]
    None,
    /// 4:2:0, chroma averaged over 2x2 and replicated back.
    Yuv420,
}

/// Annex K luminance table, natural (row-major) order.
pub const ANNEX_K_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Annex K chrominance table, natural order.
pub const ANNEX_K_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// IJG quality scaling percentage.
pub fn quality_scale(quality: u8) -> u32 {
    let q = quality.clamp(1, 100) as u32;
    if q < 50 {
        5000 / q
    } else {
        200 - 2 * q
    }
}

/// Scale a base table by the IJG rule, entries clamped to `[1, 255]`.
pub fn quant_table(base: &[u16; 64], quality: u8) -> [u16; 64] {
    let scale = quality_scale(quality);
    let mut t = [0u16; 64];
    for (o, &b) in t.iter_mut().zip(base) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    t
}

struct Dct {
    // cos[u][x] = C(u)/2 * cos((2x+1) u pi / 16)
    cos: [[f64; 8]; 8],
}

impl Dct {
    fn new() -> Self {
        let mut cos = [[0.0; 8]; 8];
        for (u, row) in cos.iter_mut().enumerate() {
            let cu = if u == 0 { core::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = 0.5 * cu * libm::cos((2 * x + 1) as f64 * u as f64 * core::f64::consts::PI / 16.0);
            }
        }
        Self { cos }
    }

    fn forward(&self, block: &[f64; 64]) -> [f64; 64] {
        let mut tmp = [0.0; 64];
        for y in 0..8 {
            for u in 0..8 {
                tmp[y * 8 + u] = (0..8).map(|x| self.cos[u][x] * block[y * 8 + x]).sum();
            }
        }
        let mut out = [0.0; 64];
        for v in 0..8 {
            for u in 0..8 {
                out[v * 8 + u] = (0..8).map(|y| self.cos[v][y] * tmp[y * 8 + u]).sum();
            }
        }
        out
    }

    fn inverse(&self, coef: &[f64; 64]) -> [f64; 64] {
        let mut tmp = [0.0; 64];
        for v in 0..8 {
            for x in 0..8 {
                tmp[v * 8 + x] = (0..8).map(|u| self.cos[u][x] * coef[v * 8 + u]).sum();
            }
        }
        let mut out = [0.0; 64];
        for y in 0..8 {
            for x in 0..8 {
                out[y * 8 + x] = (0..8).map(|v| self.cos[v][y] * tmp[v * 8 + x]).sum();
            }
        }
        out
    }
}

/// One 8-bit component plane.
struct Component {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Component {
    fn at_clamped(&self, y: usize, x: usize) -> u8 {
        self.data[y.min(self.h - 1) * self.w + x.min(self.w - 1)]
    }
}

fn code_component(comp: &Component, table: &[u16; 64], dct: &Dct) -> Component {
    let mut out = vec![0u8; comp.h * comp.w];
    for by in (0..comp.h).step_by(8) {
        for bx in (0..comp.w).step_by(8) {
            let mut block = [0.0; 64];
            for y in 0..8 {
                for x in 0..8 {
                    // Partial blocks are padded by edge replication.
                    block[y * 8 + x] = comp.at_clamped(by + y, bx + x) as f64 - 128.0;
                }
            }
            let mut coef = dct.forward(&block);
            for (c, &q) in coef.iter_mut().zip(table) {
                *c = libm::round(*c / q as f64) * q as f64;
            }
            let rec = dct.inverse(&coef);
            for y in 0..8.min(comp.h - by) {
                for x in 0..8.min(comp.w - bx) {
                    out[(by + y) * comp.w + bx + x] = quantize(rec[y * 8 + x] + 128.0);
                }
            }
        }
    }
    Component { h: comp.h, w: comp.w, data: out }
}

fn downsample(c: &Component) -> Component {
    let (h, w) = (c.h.div_ceil(2), c.w.div_ceil(2));
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let s: u32 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|&(dy, dx)| c.at_clamped(2 * y + dy, 2 * x + dx) as u32)
                .sum();
            data.push(((s + 2) / 4) as u8);
        }
    }
    Component { h, w, data }
}

fn upsample(c: &Component, h: usize, w: usize) -> Component {
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(c.data[(y / 2) * c.w + x / 2]);
        }
    }
    Component { h, w, data }
}

/// Compress and decompress at quality `quality` (1..=100).
pub fn jpeg_roundtrip(img: &ImageBuffer, quality: u8, subsampling: Subsampling) -> Result<ImageBuffer> {
    if !(1..=100).contains(&quality) {
        return Err(param_err!("JPEG quality must be in 1..=100, got {quality}"));
    }
    let dct = Dct::new();
    let luma_t = quant_table(&ANNEX_K_LUMA, quality);
    let (h, w) = (img.height(), img.width());
    if img.channels() == 1 {
        let y = Component { h, w, data: img.data().to_vec() };
        let out = code_component(&y, &luma_t, &dct);
        return ImageBuffer::new(h, w, 1, out.data);
    }
    let chroma_t = quant_table(&ANNEX_K_CHROMA, quality);
    let n = h * w;
    let (mut yp, mut cb, mut cr) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for px in img.data().chunks_exact(3) {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        yp.push(quantize(0.299 * r + 0.587 * g + 0.114 * b));
        cb.push(quantize(128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b));
        cr.push(quantize(128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b));
    }
    let yc = code_component(&Component { h, w, data: yp }, &luma_t, &dct);
    let mut cbc = Component { h, w, data: cb };
    let mut crc = Component { h, w, data: cr };
    match subsampling {
        Subsampling::None => {
            cbc = code_component(&cbc, &chroma_t, &dct);
            crc = code_component(&crc, &chroma_t, &dct);
        }
        Subsampling::Yuv420 => {
            cbc = upsample(&code_component(&downsample(&cbc), &chroma_t, &dct), h, w);
            crc = upsample(&code_component(&downsample(&crc), &chroma_t, &dct), h, w);
        }
    }
    let mut data = Vec::with_capacity(n * 3);
    for i in 0..n {
        let y = yc.data[i] as f64;
        let cb = cbc.data[i] as f64 - 128.0;
        let cr = crc.data[i] as f64 - 128.0;
        data.push(quantize(y + 1.402 * cr));
        data.push(quantize(y - 0.344_136 * cb - 0.714_136 * cr));
        data.push(quantize(y + 1.772 * cb));
    }
    ImageBuffer::new(h, w, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_core::RngCore;

    fn noise_img(seed: u64, h: usize, w: usize) -> ImageBuffer {
        let mut rng = crate::rng::stream(seed);
        ImageBuffer::from_fn(h, w, 3, |_, _, _| rng.next_u32() as u8).unwrap()
    }

    #[test]
    fn ijg_scaling_at_90() {
        assert_eq!(quality_scale(90), 20);
        assert_eq!(quant_table(&ANNEX_K_LUMA, 90)[0], 3);
        assert_eq!(quality_scale(25), 200);
        assert_eq!(quant_table(&ANNEX_K_LUMA, 1)[63], 255);
        assert!(quant_table(&ANNEX_K_LUMA, 100).iter().all(|&q| q == 1));
    }

    #[test]
    fn deterministic() {
        let img = noise_img(3, 19, 21);
        let a = jpeg_roundtrip(&img, 85, Subsampling::None).unwrap();
        assert_eq!(a, jpeg_roundtrip(&img, 85, Subsampling::None).unwrap());
        assert_eq!((a.height(), a.width()), (19, 21));
        assert!(jpeg_roundtrip(&img, 0, Subsampling::None).is_err());
        assert!(jpeg_roundtrip(&img, 101, Subsampling::None).is_err());
        let s = jpeg_roundtrip(&img, 85, Subsampling::Yuv420).unwrap();
        assert_ne!(s, a);
    }

    #[test]
    fn dct_round_trip_is_identity() {
        let dct = Dct::new();
        let mut block = [0.0; 64];
        for (i, v) in block.iter_mut().enumerate() {
            *v = ((i * 37) % 255) as f64 - 128.0;
        }
        let back = dct.inverse(&dct.forward(&block));
        for (a, b) in block.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_color_matches_dc_only_oracle() {
        // A constant block has only a DC term, 8 * (v - 128); it is quantized with the table's
        // first entry and reconstructed as DC / 8.
        let dc_only = |v: f64, q: f64| quantize(128.0 + libm::round(8.0 * (v - 128.0) / q) * q / 8.0);
        for quality in [70u8, 75, 80, 85, 90] {
            let ql = quant_table(&ANNEX_K_LUMA, quality)[0] as f64;
            let qc = quant_table(&ANNEX_K_CHROMA, quality)[0] as f64;
            for (r, g, b) in [(200u8, 30u8, 90u8), (12, 250, 131), (128, 128, 128), (77, 77, 200)] {
                let img = ImageBuffer::from_fn(16, 24, 3, |_, _, c| [r, g, b][c]).unwrap();
                let out = jpeg_roundtrip(&img, quality, Subsampling::None).unwrap();
                let (rf, gf, bf) = (r as f64, g as f64, b as f64);
                let y = quantize(0.299 * rf + 0.587 * gf + 0.114 * bf) as f64;
                let cb = quantize(128.0 - 0.168_736 * rf - 0.331_264 * gf + 0.5 * bf) as f64;
                let cr = quantize(128.0 + 0.5 * rf - 0.418_688 * gf - 0.081_312 * bf) as f64;
                let y2 = dc_only(y, ql) as f64;
                let cb2 = dc_only(cb, qc) as f64 - 128.0;
                let cr2 = dc_only(cr, qc) as f64 - 128.0;
                let expect = [
                    quantize(y2 + 1.402 * cr2),
                    quantize(y2 - 0.344_136 * cb2 - 0.714_136 * cr2),
                    quantize(y2 + 1.772 * cb2),
                ];
                for yy in 0..16 {
                    for xx in 0..24 {
                        for c in 0..3 {
                            assert_eq!(out.get(yy, xx, c), expect[c]);
                        }
                    }
                }
                // Error bound: half a DC step in each component, propagated through the
                // inverse color transform, plus rounding at each conversion.
                let bound = 0.5 * ql / 8.0 * 1.0 + 0.5 * qc / 8.0 * 1.772 + 2.0;
                for c in 0..3 {
                    let d = (out.get(0, 0, c) as f64 - [rf, gf, bf][c]).abs();
                    assert!(d <= bound, "q{quality} c{c}: {d} > {bound}");
                }
            }
        }
    }

    #[test]
    fn grayscale_path() {
        let img = ImageBuffer::from_fn(8, 8, 1, |y, x, _| (y * 30 + x) as u8).unwrap();
        let out = jpeg_roundtrip(&img, 90, Subsampling::None).unwrap();
        assert_eq!(out.channels(), 1);
        let max_err = img.data().iter().zip(out.data()).map(|(a, b)| (*a as i32 - *b as i32).abs()).max();
        assert!(max_err.unwrap() <= 4);
    }
}
