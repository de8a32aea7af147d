//! Procedural natural-image sources.
//!
//! Each source is a dead-leaves composition: occluding elliptical leaves
//! with power-law sizes, per-leaf shading and texture, a mild optical blur,
//! and signal-dependent sensor noise that is partly shared across channels.
//! Everything is a function of the seed.

use std::path::{Path, PathBuf};

use opchain_core::image::Plane;
use opchain_core::ops::gaussian_kernel;
use opchain_core::rng::{derive_seed, stream, uniform, Normal};
use opchain_core::ImageBuffer;
use rayon::prelude::*;

use crate::codec::write_image;
use crate::error::{Error, Result};

const MIN_RADIUS: f64 = 3.0;
const OPTICS_SIGMA: f64 = 0.7;

fn leaf_count(height: usize, width: usize) -> usize {
    (height * width / 400).clamp(20, 2000)
}

struct Leaf {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
    color: [f64; 3],
    grad: (f64, f64),
    texture: Texture,
}

enum Texture {
    Flat,
    Grating { fy: f64, fx: f64, phase: f64, amp: f64 },
    Speckle { amp: f64, seed: u64 },
}

fn hash_unit(seed: u64, y: i64, x: i64) -> f64 {
    let h = opchain_core::rng::mix64(seed ^ (y as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (x as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear value noise at a scale of 4 pixels.
fn value_noise(seed: u64, y: f64, x: f64) -> f64 {
    let (y, x) = (y / 4.0, x / 4.0);
    let (y0, x0) = (y.floor(), x.floor());
    let (ty, tx) = (y - y0, x - x0);
    let (iy, ix) = (y0 as i64, x0 as i64);
    let a = hash_unit(seed, iy, ix);
    let b = hash_unit(seed, iy, ix + 1);
    let c = hash_unit(seed, iy + 1, ix);
    let d = hash_unit(seed, iy + 1, ix + 1);
    (a * (1.0 - tx) + b * tx) * (1.0 - ty) + (c * (1.0 - tx) + d * tx) * ty - 0.5
}

fn random_leaf(rng: &mut rand_chacha::ChaCha8Rng, height: usize, width: usize) -> Leaf {
    let max_r = (height.min(width) as f64) / 3.0;
    // Inverse-CDF sample of p(r) ~ r^-3 on [MIN_RADIUS, max_r].
    let (a, b) = (MIN_RADIUS.powi(-2), max_r.powi(-2));
    let r = (a + uniform(rng) * (b - a)).powf(-0.5);
    let aspect = 0.5 + uniform(rng);
    let theta = uniform(rng) * std::f64::consts::PI;
    let lum = 20.0 + 215.0 * uniform(rng);
    let tint = 0.15 + 0.35 * uniform(rng);
    let color = [0, 1, 2].map(|_| lum * (1.0 + tint * (2.0 * uniform(rng) - 1.0)));
    let grad = ((2.0 * uniform(rng) - 1.0) * 0.6, (2.0 * uniform(rng) - 1.0) * 0.6);
    let texture = match (uniform(rng) * 3.0) as usize {
        0 => Texture::Flat,
        1 => {
            let f = 0.05 + 0.4 * uniform(rng);
            let dir = uniform(rng) * std::f64::consts::TAU;
            Texture::Grating { fy: f * dir.sin(), fx: f * dir.cos(), phase: uniform(rng) * 6.3, amp: 4.0 + 20.0 * uniform(rng) }
        }
        _ => Texture::Speckle { amp: 10.0 + 40.0 * uniform(rng), seed: rng_u64(rng) },
    };
    Leaf {
        cy: uniform(rng) * height as f64,
        cx: uniform(rng) * width as f64,
        ry: r * aspect.sqrt(),
        rx: r / aspect.sqrt(),
        cos: theta.cos(),
        sin: theta.sin(),
        color,
        grad,
        texture,
    }
}

fn rng_u64(rng: &mut rand_chacha::ChaCha8Rng) -> u64 {
    use rand_core::RngCore;
    rng.next_u64()
}

fn paint(canvas: &mut [Plane; 3], leaf: &Leaf) {
    let (h, w) = (canvas[0].height, canvas[0].width);
    let reach = leaf.ry.max(leaf.rx).ceil() as i64 + 1;
    let y0 = (leaf.cy as i64 - reach).max(0) as usize;
    let y1 = ((leaf.cy as i64 + reach).max(0) as usize).min(h);
    let x0 = (leaf.cx as i64 - reach).max(0) as usize;
    let x1 = ((leaf.cx as i64 + reach).max(0) as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let (dy, dx) = (y as f64 - leaf.cy, x as f64 - leaf.cx);
            let u = dy * leaf.cos + dx * leaf.sin;
            let v = -dy * leaf.sin + dx * leaf.cos;
            if (u / leaf.ry).powi(2) + (v / leaf.rx).powi(2) > 1.0 {
                continue;
            }
            let shade = leaf.grad.0 * dy + leaf.grad.1 * dx;
            let tex = match leaf.texture {
                Texture::Flat => 0.0,
                Texture::Grating { fy, fx, phase, amp } => amp * (fy * y as f64 + fx * x as f64 + phase).sin(),
                Texture::Speckle { amp, seed } => amp * value_noise(seed, y as f64, x as f64),
            };
            for (c, plane) in canvas.iter_mut().enumerate() {
                plane.data[y * w + x] = leaf.color[c] * (1.0 + tex / 255.0) + shade;
            }
        }
    }
}

fn separable_blur(p: &Plane, sigma: f64) -> Plane {
    let k2 = gaussian_kernel(sigma);
    let row: Vec<f64> = (0..5).map(|i| k2[2][i] / k2[2].iter().sum::<f64>()).collect();
    let (h, w) = (p.height, p.width);
    let mut tmp = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            tmp.data[y * w + x] = (0..5).map(|i| row[i] * p.get_reflect(y as isize, x as isize + i as isize - 2)).sum();
        }
    }
    let mut out = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            out.data[y * w + x] = (0..5).map(|i| row[i] * tmp.get_reflect(y as isize + i as isize - 2, x as isize)).sum();
        }
    }
    out
}

/// One procedural RGB source image.
pub fn generate_source(height: usize, width: usize, seed: u64) -> Result<ImageBuffer> {
    if height < 8 || width < 8 {
        return Err(Error::Config(format!("source size {height}x{width} is below 8x8")));
    }
    let mut rng = stream(derive_seed(seed, 0));
    let base = [0, 1, 2].map(|_| 60.0 + 140.0 * uniform(&mut rng));
    let mut canvas = [0, 1, 2].map(|c| {
        let mut p = Plane::zeros(height, width);
        p.data.iter_mut().for_each(|v| *v = base[c]);
        p
    });
    for _ in 0..leaf_count(height, width) {
        let leaf = random_leaf(&mut rng, height, width);
        paint(&mut canvas, &leaf);
    }
    let blurred = canvas.map(|p| separable_blur(&p, OPTICS_SIGMA));
    let mut noise = Normal::new(stream(derive_seed(seed, 1)));
    let shared_sigma = 0.8 + 1.2 * uniform(&mut rng);
    let mut planes = blurred;
    for i in 0..height * width {
        let common = noise.sample() * shared_sigma;
        for p in planes.iter_mut() {
            let v = p.data[i];
            // Shot-noise-like growth with intensity.
            let own = noise.sample() * (0.5 + 0.08 * v.max(0.0).sqrt());
            p.data[i] = v + common + own;
        }
    }
    Ok(ImageBuffer::from_planes(&planes)?)
}

/// Writes `count` sources named `src_NNNN.ppm` into `dir`; source `i` uses
/// `derive_seed(seed, i)`. Output bytes do not depend on `jobs`.
pub fn write_corpus(dir: &Path, count: usize, height: usize, width: usize, seed: u64, jobs: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Failed(e.to_string()))?;
    pool.install(|| {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let path = dir.join(format!("src_{i:04}.ppm"));
                let img = generate_source(height, width, derive_seed(seed, i as u64))?;
                write_image(&path, &img)?;
                Ok(path)
            })
            .collect()
    })
}
