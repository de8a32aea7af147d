use alloc::vec::Vec;

use crate::error::{dim_err, param_err, Result};
use crate::image::{quantize, ImageBuffer};

/// Bilinear interpolation with pixel-center alignment: output pixel `i`
/// samples source coordinate `(i + 0.5) * in / out - 0.5`, clamped to the image.
pub fn bilinear_resize(img: &ImageBuffer, out_h: usize, out_w: usize) -> Result<ImageBuffer> {
    if out_h == 0 || out_w == 0 {
        return Err(dim_err!("resize target {out_h}x{out_w} is empty"));
    }
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let ratio = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = libm::floor(s) as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let mut data = Vec::with_capacity(out_h * out_w * ch);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..ch {
                let v00 = img.get(y0, x0, c) as f64;
                let v01 = img.get(y0, x1, c) as f64;
                let v10 = img.get(y1, x0, c) as f64;
                let v11 = img.get(y1, x1, c) as f64;
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                data.push(quantize(top + (bottom - top) * fy));
            }
        }
    }
    ImageBuffer::new(out_h, out_w, ch, data)
}

/// Rescale by `scale` to `(round(H*s), round(W*s))`, then center-crop back to `H x W`.
pub fn resample(img: &ImageBuffer, scale: f64) -> Result<ImageBuffer> {
    if !(scale > 0.0) {
        return Err(param_err!("resample scale must be positive, got {scale}"));
    }
    let (h, w) = (img.height(), img.width());
    let nh = libm::round(h as f64 * scale) as usize;
    let nw = libm::round(w as f64 * scale) as usize;
    if nh < h || nw < w {
        return Err(dim_err!("resampled size {nh}x{nw} cannot be cropped back to {h}x{w}"));
    }
    let big = bilinear_resize(img, nh, nw)?;
    big.crop((nh - h) / 2, (nw - w) / 2, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn constant_stays_constant() {
        let img = ImageBuffer::filled(10, 12, 3, 99).unwrap();
        for s in [1.2, 1.5] {
            assert_eq!(resample(&img, s).unwrap(), img);
        }
    }

    #[test]
    fn dimensions() {
        let img = ImageBuffer::filled(64, 64, 1, 3).unwrap();
        assert_eq!(bilinear_resize(&img, 96, 96).unwrap().height(), 96);
        let out = resample(&img, 1.5).unwrap();
        assert_eq!((out.height(), out.width()), (64, 64));
        assert!(resample(&img, 0.5).is_err());
        assert!(resample(&img, 0.0).is_err());
    }

    #[test]
    fn checkerboard_matches_closed_form_weights() {
        // 2x2 checkerboard to 3x3: source coordinates are (i + 0.5) * 2/3 - 0.5 = -1/6, 1/2, 7/6,
        // clamped to 0, 1/2, 1.
        let img = ImageBuffer::new(2, 2, 1, vec![0, 255, 255, 0]).unwrap();
        let out = bilinear_resize(&img, 3, 3).unwrap();
        let coord = [0.0, 0.5, 1.0];
        let f = |y: f64, x: f64| {
            // Bilinear surface through (0,0)=0, (0,1)=255, (1,0)=255, (1,1)=0.
            255.0 * (x * (1.0 - y) + y * (1.0 - x))
        };
        for (i, &y) in coord.iter().enumerate() {
            for (j, &x) in coord.iter().enumerate() {
                assert_eq!(out.get(i, j, 0), quantize(f(y, x)), "({i},{j})");
            }
        }
        assert_eq!(out.get(1, 1, 0), 128);
    }
}
