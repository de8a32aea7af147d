//! 8-bit image buffers and float planes.
//!
//! Pixels are stored interleaved (`y`, `x`, `c`) in row-major order, channel
//! order R, G, B for color images. Processing happens on float planes in the
//! `[0, 255]` domain; [`ImageBuffer::from_planes`] is the single quantization
//! point back to 8-bit storage.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, param_err, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

/// A single float-valued channel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(dim_err!(
                "plane {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Sample with reflect-101 border extension (`dcb|abcd|cba`).
    #[inline]
    pub fn get_reflect(&self, y: isize, x: isize) -> f64 {
        self.data[reflect101(y, self.height) * self.width + reflect101(x, self.width)]
    }
}

/// Map an out-of-range index into `0..len` by mirroring without repeating the edge.
#[inline]
pub fn reflect101(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Round to nearest and clamp into 8-bit range.
#[inline]
pub fn quantize(v: f64) -> u8 {
    let r = libm::round(v);
    if r.is_nan() || r <= 0.0 {
        0
    } else if r >= 255.0 {
        255
    } else {
        r as u8
    }
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(dim_err!("unsupported channel count {channels}"));
        }
        if height == 0 || width == 0 {
            return Err(dim_err!("empty image {height}x{width}"));
        }
        if data.len() != height * width * channels {
            return Err(dim_err!(
                "{height}x{width}x{channels} image needs {} bytes, got {}",
                height * width * channels,
                data.len()
            ));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Quantize float planes (one per channel) into an 8-bit image.
    pub fn from_planes(planes: &[Plane]) -> Result<Self> {
        let first = planes.first().ok_or_else(|| dim_err!("no planes"))?;
        let (h, w) = (first.height, first.width);
        if planes.iter().any(|p| p.height != h || p.width != w) {
            return Err(dim_err!("planes differ in size"));
        }
        let c = planes.len();
        let mut data = Vec::with_capacity(h * w * c);
        for i in 0..h * w {
            for p in planes {
                data.push(quantize(p.data[i]));
            }
        }
        Self::new(h, w, c, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn plane(&self, c: usize) -> Plane {
        let data = self.data.iter().skip(c).step_by(self.channels).map(|&v| v as f64).collect();
        Plane { height: self.height, width: self.width, data }
    }

    pub fn planes(&self) -> Vec<Plane> {
        (0..self.channels).map(|c| self.plane(c)).collect()
    }

    /// Per-pixel mean over channels.
    pub fn channel_mean(&self) -> Plane {
        let c = self.channels as f64;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / c)
            .collect();
        Plane { height: self.height, width: self.width, data }
    }

    /// Copy out a `height`x`width` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || y + height > self.height || x + width > self.width {
            return Err(dim_err!(
                "crop {height}x{width} at ({y},{x}) exceeds {}x{} image",
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for row in y..y + height {
            let start = (row * self.width + x) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Self::new(height, width, self.channels, data)
    }

    /// Replicate a grayscale image into three identical channels.
    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Self { height: self.height, width: self.width, channels: 3, data }
    }

    /// BT.601 luma, rounded and clamped.
    pub fn to_grayscale(&self) -> Result<Self> {
        if self.channels != 3 {
            return Err(dim_err!("grayscale conversion needs 3 channels, got {}", self.channels));
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|px| {
                quantize(0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64)
            })
            .collect();
        Ok(Self { height: self.height, width: self.width, channels: 1, data })
    }

    pub fn extract_patches(&self, spec: &PatchSpec) -> Result<Vec<Patch>> {
        spec.validate()?;
        if spec.size > self.height || spec.size > self.width {
            return Err(dim_err!(
                "patch size {} exceeds {}x{} image",
                spec.size,
                self.height,
                self.width
            ));
        }
        let offsets = spec.offsets(self.height, self.width);
        offsets
            .into_iter()
            .map(|(y, x)| Ok(Patch { y, x, image: self.crop(y, x, spec.size, spec.size)? }))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchMode {
    Grid,
    CenterCrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub size: usize,
    pub stride: usize,
    pub mode: PatchMode,
}

impl PatchSpec {
    pub fn grid(size: usize, stride: usize) -> Self {
        Self { size, stride, mode: PatchMode::Grid }
    }

    pub fn center(size: usize) -> Self {
        Self { size, stride: size, mode: PatchMode::CenterCrop }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(param_err!("patch size {} below minimum 8", self.size));
        }
        if self.stride < 1 {
            return Err(param_err!("patch stride must be at least 1"));
        }
        Ok(())
    }

    /// Top-left offsets in scan order for an image of the given size.
    /// Returns nothing when the patch does not fit.
    pub fn offsets(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        if self.size > height || self.size > width {
            return Vec::new();
        }
        match self.mode {
            PatchMode::CenterCrop => vec![((height - self.size) / 2, (width - self.size) / 2)],
            PatchMode::Grid => {
                let ny = (height - self.size) / self.stride + 1;
                let nx = (width - self.size) / self.stride + 1;
                let mut out = Vec::with_capacity(ny * nx);
                for iy in 0..ny {
                    for ix in 0..nx {
                        out.push((iy * self.stride, ix * self.stride));
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub y: usize,
    pub x: usize,
    pub image: ImageBuffer,
}
