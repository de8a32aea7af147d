use alloc::vec::Vec;

use crate::error::{param_err, Result};
use crate::image::{quantize, ImageBuffer};
use crate::rng::{stream, Normal};

/// Additive white Gaussian noise, i.i.d. per pixel and channel, keyed by `seed`.
pub fn awgn(img: &ImageBuffer, sigma: f64, seed: u64) -> Result<ImageBuffer> {
    if !(sigma >= 0.0) {
        return Err(param_err!("noise sigma must be non-negative, got {sigma}"));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut normal = Normal::new(stream(seed));
    let data: Vec<u8> = img.data().iter().map(|&v| quantize(v as f64 + sigma * normal.sample())).collect();
    ImageBuffer::new(img.height(), img.width(), img.channels(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_identity_at_zero() {
        let img = ImageBuffer::filled(16, 16, 3, 128).unwrap();
        assert_eq!(awgn(&img, 2.0, 5).unwrap(), awgn(&img, 2.0, 5).unwrap());
        assert_ne!(awgn(&img, 2.0, 5).unwrap(), awgn(&img, 2.0, 6).unwrap());
        assert_eq!(awgn(&img, 0.0, 5).unwrap(), img);
    }

    #[test]
    fn empirical_std() {
        let img = ImageBuffer::filled(512, 512, 1, 128).unwrap();
        let out = awgn(&img, 2.0, 1234).unwrap();
        let n = out.data().len() as f64;
        let d: Vec<f64> = out.data().iter().map(|&v| v as f64 - 128.0).collect();
        let mean = d.iter().sum::<f64>() / n;
        let std = libm::sqrt(d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n);
        assert!((1.9..=2.1).contains(&std), "std {std}");
    }
}
