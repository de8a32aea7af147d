use crate::image::{quantize, ImageBuffer};

/// Classic CDF remap, each channel independently. A constant channel is left unchanged.
pub fn hist_eq(img: &ImageBuffer) -> ImageBuffer {
    let ch = img.channels();
    let mut out = img.clone();
    let n = (img.height() * img.width()) as u64;
    for c in 0..ch {
        let mut hist = [0u64; 256];
        for px in img.data().chunks_exact(ch) {
            hist[px[c] as usize] += 1;
        }
        let mut cdf = [0u64; 256];
        let mut acc = 0;
        for (i, &h) in hist.iter().enumerate() {
            acc += h;
            cdf[i] = acc;
        }
        let cdf_min = hist.iter().zip(&cdf).find(|(h, _)| **h > 0).map(|(_, c)| *c).unwrap_or(0);
        if cdf_min == n {
            continue;
        }
        let denom = (n - cdf_min) as f64;
        let mut lut = [0u8; 256];
        for (v, l) in lut.iter_mut().enumerate() {
            *l = quantize(255.0 * (cdf[v].saturating_sub(cdf_min)) as f64 / denom);
        }
        for y in 0..img.height() {
            for x in 0..img.width() {
                out.set(y, x, c, lut[img.get(y, x, c) as usize]);
            }
        }
    }
    out
}
