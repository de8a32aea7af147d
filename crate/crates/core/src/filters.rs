//! Cross-channel RGB texture-suppression filters, SRM/CCL baselines, and
//! neighborhood correlation of residual maps.
//!
//! An RGB filter is a 5x5 predictor: Gaussian weights sampled on a sparse
//! support around the center, a center tap of `c` times the support mass,
//! normalized so the whole kernel sums to one. The same spatial pattern is
//! applied to all three channels with weight 1/3, so the filtered map is a
//! prediction of the cross-channel mean and the residual is
//! `mean_c(img) - M_j`.

use alloc::vec::Vec;

use crate::analytics::pearson;
use crate::error::{dim_err, param_err, Result};
use crate::image::{ImageBuffer, Plane};
use crate::ops::gaussian::correlate5;
use crate::rng::{stream, uniform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    /// 4-neighborhood at radius 1.
    Cross,
    /// The four diagonal neighbors.
    Diagonal,
    /// Horizontal and vertical neighbors at radius 1 and 2.
    WideCross,
    /// Every tap may be nonzero (baselines).
    Full,
}

impl Support {
    pub fn offsets(self) -> &'static [(i32, i32)] {
        match self {
            Support::Cross => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Support::Diagonal => &[(-1, -1), (-1, 1), (1, -1), (1, 1)],
            Support::WideCross => &[(-1, 0), (1, 0), (0, -1), (0, 1), (-2, 0), (2, 0), (0, -2), (0, 2)],
            Support::Full => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Rgb(Support),
    Srm,
    Ccl,
}

/// A 5x5 spatial kernel. RGB kernels are shared by the three channels with
/// weight 1/3 each; baseline kernels are applied per channel and averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterKernel {
    pub kind: KernelKind,
    pub taps: [[f64; 5]; 5],
    pub sigma: Option<f64>,
    pub c: Option<u32>,
}

impl FilterKernel {
    pub fn tap_sum(&self) -> f64 {
        self.taps.iter().flatten().sum()
    }

    /// Taps per input channel, the "four-dimensional" form of an RGB kernel.
    pub fn channel_taps(&self) -> [[[f64; 5]; 5]; 3] {
        let mut t = [self.taps; 3];
        for v in t.iter_mut().flatten().flatten() {
            *v /= 3.0;
        }
        t
    }

    pub fn center(&self) -> f64 {
        self.taps[2][2]
    }

    /// Plain-text 5x5 dump for inspection.
    pub fn to_text(&self) -> alloc::string::String {
        use core::fmt::Write;
        let mut s = alloc::string::String::new();
        for row in &self.taps {
            let cells: Vec<alloc::string::String> = row.iter().map(|v| alloc::format!("{v:>10.6}")).collect();
            let _ = writeln!(s, "{}", cells.join(" "));
        }
        s
    }
}

/// Three RGB predictors plus the two baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub rgb: [FilterKernel; 3],
    pub srm: FilterKernel,
    pub ccl: FilterKernel,
    pub ccl_seed: u64,
}

impl FilterBank {
    pub fn new(sigma: f64, c: u32, ccl_seed: u64) -> Result<Self> {
        Ok(Self { rgb: build_rgb_filters(sigma, c)?, srm: build_srm_baseline(), ccl: build_ccl_baseline(ccl_seed), ccl_seed })
    }
}

impl Default for FilterBank {
    fn default() -> Self {
        Self::new(1.0, 1, 0).expect("default filter parameters are valid")
    }
}

fn rgb_kernel(support: Support, sigma: f64, c: u32) -> FilterKernel {
    let mut taps = [[0.0; 5]; 5];
    let norm = 1.0 / (2.0 * core::f64::consts::PI * sigma * sigma);
    let mut mass = 0.0;
    for &(dy, dx) in support.offsets() {
        let g = norm * libm::exp(-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma));
        taps[(2 + dy) as usize][(2 + dx) as usize] = g;
        mass += g;
    }
    taps[2][2] = c as f64 * mass;
    let total = mass * (1.0 + c as f64);
    for v in taps.iter_mut().flatten() {
        *v /= total;
    }
    FilterKernel { kind: KernelKind::Rgb(support), taps, sigma: Some(sigma), c: Some(c) }
}

/// Cross, diagonal and wide-cross predictors.
pub fn build_rgb_filters(sigma: f64, c: u32) -> Result<[FilterKernel; 3]> {
    if !(sigma > 0.0) {
        return Err(param_err!("filter sigma must be positive, got {sigma}"));
    }
    if c < 1 {
        return Err(param_err!("center coefficient must be a positive integer"));
    }
    Ok([
        rgb_kernel(Support::Cross, sigma, c),
        rgb_kernel(Support::Diagonal, sigma, c),
        rgb_kernel(Support::WideCross, sigma, c),
    ])
}

/// The 5x5 "KV" second-order SRM residual kernel.
pub fn build_srm_baseline() -> FilterKernel {
    const KV: [[f64; 5]; 5] = [
        [-1.0, 2.0, -2.0, 2.0, -1.0],
        [2.0, -6.0, 8.0, -6.0, 2.0],
        [-2.0, 8.0, -12.0, 8.0, -2.0],
        [2.0, -6.0, 8.0, -6.0, 2.0],
        [-1.0, 2.0, -2.0, 2.0, -1.0],
    ];
    let mut taps = KV;
    for v in taps.iter_mut().flatten() {
        *v /= 12.0;
    }
    FilterKernel { kind: KernelKind::Srm, taps, sigma: None, c: None }
}

/// Random taps projected onto the constrained-convolution set:
/// center `-1`, remaining taps summing to `1`.
pub fn build_ccl_baseline(seed: u64) -> FilterKernel {
    let mut rng = stream(seed);
    let mut taps = [[0.0; 5]; 5];
    for v in taps.iter_mut().flatten() {
        *v = uniform(&mut rng);
    }
    project_ccl(&mut taps);
    FilterKernel { kind: KernelKind::Ccl, taps, sigma: None, c: None }
}

pub fn project_ccl(taps: &mut [[f64; 5]; 5]) {
    taps[2][2] = 0.0;
    let s: f64 = taps.iter().flatten().sum();
    for v in taps.iter_mut().flatten() {
        *v /= s;
    }
    taps[2][2] = -1.0;
}

/// Filtered maps `M_j`, one per RGB kernel.
pub fn apply_filter_bank(img: &ImageBuffer, bank: &FilterBank) -> Result<[Plane; 3]> {
    if img.channels() != 3 {
        return Err(dim_err!("the RGB filter bank needs a 3-channel image, got {}", img.channels()));
    }
    // Every channel carries the same spatial pattern at 1/3, so the sum over
    // channels equals the pattern applied to the channel mean.
    let mean = img.channel_mean();
    Ok([correlate5(&mean, &bank.rgb[0].taps), correlate5(&mean, &bank.rgb[1].taps), correlate5(&mean, &bank.rgb[2].taps)])
}

/// `sum_k w_k * (center - neighbor_k)` over the 5x5 window: equal to
/// `center - correlate(taps)` for taps summing to one, and exactly zero on
/// flat regions. Reflect-101 borders.
pub fn prediction_residual(p: &Plane, taps: &[[f64; 5]; 5]) -> Plane {
    let mut out = Plane::zeros(p.height, p.width);
    for y in 0..p.height {
        for x in 0..p.width {
            let c = p.get(y, x);
            let mut acc = 0.0;
            for (i, row) in taps.iter().enumerate() {
                for (j, &t) in row.iter().enumerate() {
                    if t != 0.0 && (i, j) != (2, 2) {
                        acc += t * (c - p.get_reflect(y as isize + i as isize - 2, x as isize + j as isize - 2));
                    }
                }
            }
            out.data[y * p.width + x] = acc;
        }
    }
    out
}

/// `mean_c(img) - filtered`.
pub fn compute_residual(img: &ImageBuffer, filtered: &Plane) -> Result<Plane> {
    if img.height() != filtered.height || img.width() != filtered.width {
        return Err(dim_err!(
            "residual shape mismatch: image {}x{}, map {}x{}",
            img.height(),
            img.width(),
            filtered.height,
            filtered.width
        ));
    }
    let mean = img.channel_mean();
    let data = mean.data.iter().zip(&filtered.data).map(|(a, b)| a - b).collect();
    Plane::new(filtered.height, filtered.width, data)
}

/// The three noise residual maps `r_j`.
pub fn residual_maps(img: &ImageBuffer, bank: &FilterBank) -> Result<[Plane; 3]> {
    if img.channels() != 3 {
        return Err(dim_err!("the RGB filter bank needs a 3-channel image, got {}", img.channels()));
    }
    let mean = img.channel_mean();
    Ok([
        prediction_residual(&mean, &bank.rgb[0].taps),
        prediction_residual(&mean, &bank.rgb[1].taps),
        prediction_residual(&mean, &bank.rgb[2].taps),
    ])
}

/// Baseline residual: the zero-sum kernel applied to each channel, then
/// channels averaged. Evaluated as `sum_k w_k * (neighbor_k - center)` so
/// flat regions give exactly zero.
pub fn baseline_residual(img: &ImageBuffer, kernel: &FilterKernel) -> Plane {
    let planes = img.planes();
    let mut out = Plane::zeros(img.height(), img.width());
    for p in &planes {
        let r = prediction_residual(p, &kernel.taps);
        for (o, v) in out.data.iter_mut().zip(&r.data) {
            *o -= v;
        }
    }
    let n = planes.len() as f64;
    for o in out.data.iter_mut() {
        *o /= n;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Horizontal,
    Vertical,
    Diagonal,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Horizontal, Direction::Vertical, Direction::Diagonal];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Horizontal => "horizontal",
            Direction::Vertical => "vertical",
            Direction::Diagonal => "diagonal",
        }
    }
}

/// Absolute Pearson correlation between the map and its one-pixel shift.
pub fn neighborhood_correlation(map: &Plane, direction: Direction) -> Result<f64> {
    let (dy, dx) = match direction {
        Direction::Horizontal => (0, 1),
        Direction::Vertical => (1, 0),
        Direction::Diagonal => (1, 1),
    };
    if map.height <= dy || map.width <= dx {
        return Err(dim_err!("map {}x{} too small for a {} shift", map.height, map.width, direction.name()));
    }
    let n = (map.height - dy) * (map.width - dx);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for y in 0..map.height - dy {
        for x in 0..map.width - dx {
            a.push(map.get(y, x));
            b.push(map.get(y + dy, x + dx));
        }
    }
    pearson(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use alloc::vec;
    use rand_core::RngCore;

    fn random_img(seed: u64, h: usize, w: usize) -> ImageBuffer {
        let mut rng = stream(seed);
        ImageBuffer::from_fn(h, w, 3, |_, _, _| rng.next_u32() as u8).unwrap()
    }

    #[test]
    fn kernels_are_unit_sum_predictors() {
        for c in 1..4 {
            for k in build_rgb_filters(1.0, c).unwrap() {
                assert!((k.tap_sum() - 1.0).abs() < 1e-12);
                let ct: f64 = k.channel_taps().iter().flatten().flatten().sum();
                assert!((ct - 1.0).abs() < 1e-12);
                // Center carries c times the support mass.
                assert!((k.center() - c as f64 * (1.0 - k.center())).abs() < 1e-12);
            }
        }
        assert!(build_rgb_filters(0.0, 1).is_err());
        assert!(build_rgb_filters(1.0, 0).is_err());
    }

    #[test]
    fn supports_and_symmetry() {
        let [f1, f2, f3] = build_rgb_filters(1.3, 2).unwrap();
        let nonzero = |k: &FilterKernel| k.taps.iter().flatten().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero(&f1), 5);
        assert_eq!(nonzero(&f2), 5);
        assert_eq!(nonzero(&f3), 9);
        assert_eq!(f1.taps[1][2], f1.taps[2][1]);
        assert_eq!(f1.taps[1][2], f1.taps[3][2]);
        assert_eq!(f1.taps[1][2], f1.taps[2][3]);
        assert!(f3.taps[0][2] < f3.taps[1][2]);
        for k in [&f1, &f3] {
            for i in 0..5 {
                for j in 0..5 {
                    // 90 degree rotation.
                    assert_eq!(k.taps[i][j], k.taps[j][4 - i]);
                }
            }
        }
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(f2.taps[i][j], f2.taps[j][i]);
            }
        }
    }

    #[test]
    fn srm_constants() {
        let k = build_srm_baseline();
        assert!(k.tap_sum().abs() < 1e-15);
        assert_eq!(k.center(), -1.0);
        let img = ImageBuffer::filled(8, 8, 3, 131).unwrap();
        assert!(baseline_residual(&img, &k).data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn ccl_constraint_and_seeding() {
        let a = build_ccl_baseline(1);
        let b = build_ccl_baseline(2);
        for k in [&a, &b] {
            assert_eq!(k.center(), -1.0);
            assert!((k.tap_sum() - k.center() - 1.0).abs() < 1e-12);
        }
        assert_ne!(a.taps, b.taps);
        assert_eq!(a, build_ccl_baseline(1));
    }

    proptest! {
        #[test]
        fn prediction_residual_matches_mean_minus_filtered(seed: u64) {
            let bank = FilterBank::default();
            let mut rng = stream(seed);
            let g: Vec<u8> = (0..9 * 11 * 3).map(|_| rng.next_u32() as u8).collect();
            let img = ImageBuffer::new(9, 11, 3, g).unwrap();
            let filtered = apply_filter_bank(&img, &bank).unwrap();
            for (r, m) in residual_maps(&img, &bank).unwrap().iter().zip(&filtered) {
                let via = compute_residual(&img, m).unwrap();
                for (a, b) in r.data.iter().zip(&via.data) {
                    prop_assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn constant_image_zero_residual() {
        let bank = FilterBank::default();
        for v in [0u8, 17, 255] {
            let img = ImageBuffer::filled(12, 12, 3, v).unwrap();
            let m = apply_filter_bank(&img, &bank).unwrap();
            for mj in &m {
                assert!(mj.data.iter().all(|x| (x - v as f64).abs() < 1e-9));
            }
            for r in residual_maps(&img, &bank).unwrap() {
                assert!(r.data.iter().all(|&x| x == 0.0));
            }
            assert!(baseline_residual(&img, &bank.srm).data.iter().all(|&x| x == 0.0));
            assert!(baseline_residual(&img, &bank.ccl).data.iter().all(|&x| x == 0.0));
        }
        assert!(apply_filter_bank(&ImageBuffer::filled(8, 8, 1, 0).unwrap(), &bank).is_err());
    }

    #[test]
    fn gray_input_is_single_channel_convolution() {
        let bank = FilterBank::default();
        let mut rng = stream(4);
        let g: Vec<u8> = (0..100).map(|_| rng.next_u32() as u8).collect();
        let img = ImageBuffer::new(10, 10, 1, g).unwrap().to_rgb();
        let m = apply_filter_bank(&img, &bank).unwrap();
        let plane = img.plane(0);
        for (j, mj) in m.iter().enumerate() {
            let direct = correlate5(&plane, &bank.rgb[j].taps);
            for (a, b) in mj.data.iter().zip(&direct.data) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    /// Quadruple loop over (channel, tap row, tap col) with explicit mirroring.
    fn naive_bank(img: &ImageBuffer, bank: &FilterBank) -> Vec<Vec<f64>> {
        let (h, w) = (img.height() as i64, img.width() as i64);
        let m = |i: i64, n: i64| -> usize {
            let mut i = i;
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
            i as usize
        };
        bank.rgb
            .iter()
            .map(|k| {
                let t = k.channel_taps();
                let mut out = vec![0.0; (h * w) as usize];
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for (c, tc) in t.iter().enumerate() {
                            for (i, row) in tc.iter().enumerate() {
                                for (j, &g) in row.iter().enumerate() {
                                    let yy = m(y + i as i64 - 2, h);
                                    let xx = m(x + j as i64 - 2, w);
                                    acc += img.get(yy, xx, c) as f64 * g;
                                }
                            }
                        }
                        out[(y * w + x) as usize] = acc;
                    }
                }
                out
            })
            .collect()
    }

    #[test]
    fn bank_matches_naive_oracle() {
        let bank = FilterBank::new(0.8, 2, 5).unwrap();
        for s in 0..10 {
            let img = random_img(100 + s, 16, 16);
            let fast = apply_filter_bank(&img, &bank).unwrap();
            let slow = naive_bank(&img, &bank);
            for (f, o) in fast.iter().zip(&slow) {
                for (a, b) in f.data.iter().zip(o) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn ramp_residual_cancels_for_cross_patterns() {
        let img = ImageBuffer::from_fn(20, 20, 3, |y, x, c| (3 * y + 5 * x + c * 7) as u8).unwrap();
        let bank = FilterBank::default();
        let r = residual_maps(&img, &bank).unwrap();
        // Interior only: the mirrored border folds the ramp.
        for res in [&r[0], &r[2], &r[1]] {
            for y in 2..18 {
                for x in 2..18 {
                    assert!(res.get(y, x).abs() < 1e-9);
                }
            }
        }
        assert!(compute_residual(&img, &Plane::zeros(3, 3)).is_err());
    }

    #[test]
    fn neighborhood_correlation_cases() {
        let rows = Plane::new(6, 5, (0..30).map(|i| (i / 5) as f64).collect()).unwrap();
        // Constant rows: the horizontal shift sees identical values.
        assert!((neighborhood_correlation(&rows, Direction::Horizontal).unwrap() - 1.0).abs() < 1e-12);
        let cols = Plane::new(6, 5, (0..30).map(|i| ((i % 5) * (i % 5)) as f64).collect()).unwrap();
        // Identical rows: the vertical shift correlates perfectly.
        assert!((neighborhood_correlation(&cols, Direction::Vertical).unwrap() - 1.0).abs() < 1e-12);
        let mixed = Plane::new(6, 5, (0..30).map(|i| ((i % 5) as f64) * 2.0 + libm::sin(i as f64)).collect()).unwrap();
        let _ = neighborhood_correlation(&mixed, Direction::Diagonal).unwrap();
        // A map whose rows are identical ramps: horizontal shift of a linear ramp is perfectly correlated.
        let ramp_rows = Plane::new(4, 6, (0..24).map(|i| (i % 6) as f64).collect()).unwrap();
        assert!((neighborhood_correlation(&ramp_rows, Direction::Horizontal).unwrap() - 1.0).abs() < 1e-12);

        let mut rng = stream(9);
        let noise = Plane::new(256, 256, (0..65536).map(|_| uniform(&mut rng)).collect()).unwrap();
        for d in Direction::ALL {
            assert!(neighborhood_correlation(&noise, d).unwrap() < 0.05);
        }
        assert!(neighborhood_correlation(&Plane::zeros(1, 1), Direction::Horizontal).is_err());
    }
}
