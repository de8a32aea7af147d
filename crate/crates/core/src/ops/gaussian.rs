use crate::error::{param_err, Result};
use crate::image::{ImageBuffer, Plane};

/// Kernel size of the dictionary's Gaussian blur.
pub const GB_KERNEL: usize = 5;

/// Sample the 2-D Gaussian density on the 5x5 integer grid and normalize to unit sum.
pub fn gaussian_kernel(sigma: f64) -> [[f64; 5]; 5] {
    let mut k = [[0.0; 5]; 5];
    let mut sum = 0.0;
    let norm = 1.0 / (2.0 * core::f64::consts::PI * sigma * sigma);
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 2.0, j as f64 - 2.0);
            *v = norm * libm::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            sum += *v;
        }
    }
    for v in k.iter_mut().flatten() {
        *v /= sum;
    }
    k
}

pub(crate) fn correlate5(p: &Plane, k: &[[f64; 5]; 5]) -> Plane {
    let mut out = Plane::zeros(p.height, p.width);
    for y in 0..p.height {
        for x in 0..p.width {
            let mut acc = 0.0;
            for (i, row) in k.iter().enumerate() {
                for (j, &t) in row.iter().enumerate() {
                    if t != 0.0 {
                        acc += t * p.get_reflect(y as isize + i as isize - 2, x as isize + j as isize - 2);
                    }
                }
            }
            out.data[y * p.width + x] = acc;
        }
    }
    out
}

fn blur_planes(img: &ImageBuffer, sigma: f64) -> alloc::vec::Vec<Plane> {
    let k = gaussian_kernel(sigma);
    img.planes().iter().map(|p| correlate5(p, &k)).collect()
}

/// 5x5 Gaussian blur with reflect-101 borders.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> Result<ImageBuffer> {
    if !(sigma > 0.0) {
        return Err(param_err!("gaussian sigma must be positive, got {sigma}"));
    }
    ImageBuffer::from_planes(&blur_planes(img, sigma))
}

/// Sigma of the blur inside unsharp masking.
const USM_SIGMA: f64 = 1.0;

/// `X + lambda * (X - blur(X))`, blur unquantized.
pub fn unsharp_mask(img: &ImageBuffer, lambda: f64) -> Result<ImageBuffer> {
    if !(lambda >= 0.0) {
        return Err(param_err!("unsharp lambda must be non-negative, got {lambda}"));
    }
    let mut planes = img.planes();
    let blurred = blur_planes(img, USM_SIGMA);
    for (p, b) in planes.iter_mut().zip(&blurred) {
        for (v, bv) in p.data.iter_mut().zip(&b.data) {
            *v += lambda * (*v - bv);
        }
    }
    ImageBuffer::from_planes(&planes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::quantize;

    fn impulse(v: u8) -> ImageBuffer {
        ImageBuffer::from_fn(9, 9, 1, |y, x, _| if y == 4 && x == 4 { v } else { 0 }).unwrap()
    }

    #[test]
    fn constant_image_unchanged() {
        let img = ImageBuffer::filled(8, 8, 3, 200).unwrap();
        assert_eq!(gaussian_blur(&img, 1.1).unwrap(), img);
        assert_eq!(unsharp_mask(&img, 1.0).unwrap(), img);
        assert!(gaussian_blur(&img, 0.0).is_err());
    }

    #[test]
    fn impulse_response_is_the_kernel() {
        let k = gaussian_kernel(1.0);
        let out = gaussian_blur(&impulse(255), 1.0).unwrap();
        for dy in 0..5 {
            for dx in 0..5 {
                assert_eq!(out.get(2 + dy, 2 + dx, 0), quantize(255.0 * k[dy][dx]));
            }
        }
        assert_eq!(out.get(0, 0, 0), 0);
    }

    #[test]
    fn center_tap_sigma_1_1() {
        // Density at the origin over the density summed on the 5x5 grid.
        let s2 = 2.0 * 1.1 * 1.1;
        let mut total = 0.0;
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                total += libm::exp(-((dx * dx + dy * dy) as f64) / s2);
            }
        }
        let k = gaussian_kernel(1.1);
        assert!((k[2][2] - 1.0 / total).abs() < 1e-15);
        assert!((k[2][2] - 0.136_564_585_739).abs() < 1e-11);
        let sum: f64 = k.iter().flatten().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unsharp_examples() {
        let img = impulse(255);
        assert_eq!(unsharp_mask(&img, 0.0).unwrap(), img);
        let kc = gaussian_kernel(1.0)[2][2];
        let out = unsharp_mask(&img, 1.0).unwrap();
        assert_eq!(out.get(4, 4, 0), quantize(255.0 * (2.0 - kc)));
        assert_eq!(out.get(4, 4, 0), 255);
        // Neighbors go negative and clamp to zero.
        assert_eq!(out.get(4, 5, 0), 0);
    }
}
