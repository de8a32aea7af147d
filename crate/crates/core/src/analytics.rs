//! Channel-correlation and pixel statistics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, param_err, Error, Result};
use crate::image::{ImageBuffer, Plane};
use crate::ops::Chain;
use crate::rng::derive_seed;

/// `|cov(x, y)| / (std(x) std(y))`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(dim_err!("pearson inputs differ in length: {} vs {}", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(dim_err!("pearson needs at least 2 samples"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(format!(
            "zero variance ({} samples)",
            x.len()
        )));
    }
    Ok((libm::fabs(sxy) / libm::sqrt(sxx * syy)).min(1.0))
}

/// Channel pairs in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelPair {
    RG,
    GB,
    RB,
}

impl ChannelPair {
    pub const ALL: [ChannelPair; 3] = [ChannelPair::RG, ChannelPair::GB, ChannelPair::RB];

    pub fn channels(self) -> (usize, usize) {
        match self {
            ChannelPair::RG => (0, 1),
            ChannelPair::GB => (1, 2),
            ChannelPair::RB => (0, 2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelPair::RG => "R/G",
            ChannelPair::GB => "G/B",
            ChannelPair::RB => "R/B",
        }
    }
}

/// Correlation of the flattened channel pairs `(R,G)`, `(G,B)`, `(R,B)`.
pub fn channel_correlation(img: &ImageBuffer) -> Result<[f64; 3]> {
    if img.channels() != 3 {
        return Err(dim_err!("channel correlation needs 3 channels, got {}", img.channels()));
    }
    let planes = img.planes();
    let mut out = [0.0; 3];
    for (o, pair) in out.iter_mut().zip(ChannelPair::ALL) {
        let (a, b) = pair.channels();
        *o = pearson(&planes[a].data, &planes[b].data)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationReport {
    pub pair: ChannelPair,
    pub mean: f64,
    /// Population variance over images.
    pub variance: f64,
    pub n: usize,
}

/// Apply `chain` to every image (image `i` keyed by `derive_seed(seed, i)`) and
/// summarize the per-image channel correlations.
pub fn correlation_stats(images: &[ImageBuffer], chain: &Chain, seed: u64) -> Result<[CorrelationReport; 3]> {
    if images.is_empty() {
        return Err(param_err!("empty corpus"));
    }
    let mut per_image = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let processed = chain.apply(img, derive_seed(seed, i as u64))?;
        per_image.push(channel_correlation(&processed)?);
    }
    Ok(summarize(&per_image))
}

/// Mean and population variance per pair over precomputed correlations.
pub fn summarize(per_image: &[[f64; 3]]) -> [CorrelationReport; 3] {
    let n = per_image.len();
    let mut out = ChannelPair::ALL.map(|pair| CorrelationReport { pair, mean: 0.0, variance: 0.0, n });
    if n == 0 {
        return out;
    }
    for (k, rep) in out.iter_mut().enumerate() {
        let mean = per_image.iter().map(|r| r[k]).sum::<f64>() / n as f64;
        let var = per_image.iter().map(|r| (r[k] - mean) * (r[k] - mean)).sum::<f64>() / n as f64;
        rep.mean = mean;
        rep.variance = var;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `counts.len() + 1` bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bins(&self) -> impl Iterator<Item = (f64, f64, u64)> + '_ {
        self.counts.iter().enumerate().map(|(i, &c)| (self.edges[i], self.edges[i + 1], c))
    }
}

/// Uniform-bin histogram over `range` (or the data's own min/max). Values on
/// the upper edge go to the last bin; values outside a caller range are dropped.
pub fn intensity_histogram(values: &[f64], bins: usize, range: Option<(f64, f64)>) -> Result<Histogram> {
    if bins < 2 {
        return Err(param_err!("need at least 2 bins, got {bins}"));
    }
    if values.is_empty() {
        return Err(param_err!("empty map"));
    }
    let (mut lo, mut hi) = range.unwrap_or_else(|| {
        values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    });
    if !(hi > lo) {
        if range.is_some() && hi < lo {
            return Err(param_err!("histogram range is inverted"));
        }
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for &v in values {
        if v < lo || v > hi {
            continue;
        }
        let idx = (libm::floor((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Horizontal neighbor differences `map(h, w+1) - map(h, w)`.
pub fn neighbor_differences(map: &Plane) -> Vec<f64> {
    let mut out = Vec::with_capacity(map.height * map.width.saturating_sub(1));
    for y in 0..map.height {
        for x in 0..map.width.saturating_sub(1) {
            out.push(map.get(y, x + 1) - map.get(y, x));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_core::RngCore;

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() - 1.0).abs() < 1e-15);
        // cov = 4/4, var = 5/4 each.
        assert!((pearson(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(pearson(&x, &[2.0; 4]), Err(Error::UndefinedCorrelation(_))));
        assert!(pearson(&x, &x[..3]).is_err());
        assert!(pearson(&x[..1], &x[..1]).is_err());
    }

    #[test]
    fn channel_correlation_examples() {
        let mut rng = crate::rng::stream(2);
        let img = ImageBuffer::from_fn(8, 8, 3, |y, x, _| (y * 16 + x * 3) as u8).unwrap();
        for r in channel_correlation(&img).unwrap() {
            assert!((r - 1.0).abs() < 1e-12);
        }
        let inv = ImageBuffer::from_fn(8, 8, 3, |y, x, c| {
            let g = (y * 20 + x * 7) as u8;
            match c {
                0 => 255 - g,
                1 => g,
                _ => rng.next_u32() as u8,
            }
        })
        .unwrap();
        assert!((channel_correlation(&inv).unwrap()[0] - 1.0).abs() < 1e-12);
        let flat = ImageBuffer::filled(4, 4, 3, 1).unwrap();
        assert!(channel_correlation(&flat).is_err());
    }

    #[test]
    fn channel_correlation_matches_direct_evaluation() {
        let mut rng = crate::rng::stream(8);
        let img = ImageBuffer::from_fn(20, 20, 3, |_, _, _| rng.next_u32() as u8).unwrap();
        let r = channel_correlation(&img).unwrap();
        for (k, (a, b)) in [(0usize, 1usize), (1, 2), (0, 2)].into_iter().enumerate() {
            // Single-pass raw-moment formula as the independent route.
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            let n = 400.0;
            for y in 0..20 {
                for x in 0..20 {
                    let (u, v) = (img.get(y, x, a) as f64, img.get(y, x, b) as f64);
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            }
            let cov = sab / n - sa * sb / (n * n);
            let expect = cov.abs() / libm::sqrt((saa / n - sa * sa / (n * n)) * (sbb / n - sb * sb / (n * n)));
            assert!((r[k] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn stats_on_empty_chain_are_raw_statistics() {
        let imgs: Vec<ImageBuffer> = (0..4)
            .map(|s| {
                let mut rng = crate::rng::stream(s);
                ImageBuffer::from_fn(8, 8, 3, |_, _, _| rng.next_u32() as u8).unwrap()
            })
            .collect();
        let rep = correlation_stats(&imgs, &Chain::empty(), 0).unwrap();
        let raw: Vec<[f64; 3]> = imgs.iter().map(|i| channel_correlation(i).unwrap()).collect();
        let mean_rg = raw.iter().map(|r| r[0]).sum::<f64>() / 4.0;
        assert!((rep[0].mean - mean_rg).abs() < 1e-15);
        assert_eq!(rep[0].n, 4);
        assert!(rep.iter().all(|r| r.variance >= 0.0 && (0.0..=1.0).contains(&r.mean)));
        assert!(correlation_stats(&[], &Chain::empty(), 0).is_err());
        let chain = Chain::parse("AWGN2").unwrap();
        assert_eq!(correlation_stats(&imgs, &chain, 3).unwrap(), correlation_stats(&imgs, &chain, 3).unwrap());
    }

    #[test]
    fn histogram_examples() {
        let h = intensity_histogram(&[7.0; 10], 4, None).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.total(), 10);
        let ramp: Vec<f64> = (0..256).map(|v| v as f64).collect();
        let h = intensity_histogram(&ramp, 16, Some((0.0, 255.0))).unwrap();
        assert_eq!(h.edges.len(), 17);
        assert!(h.counts.iter().all(|&c| (15..=17).contains(&c)), "{:?}", h.counts);
        assert_eq!(h.total(), 256);
        assert!(intensity_histogram(&[], 4, None).is_err());
        assert!(intensity_histogram(&ramp, 1, None).is_err());
    }

    #[test]
    fn neighbor_difference_mode() {
        let p = Plane::new(2, 3, vec![0.0, 1.0, 3.0, 5.0, 5.0, 2.0]).unwrap();
        assert_eq!(neighbor_differences(&p), vec![1.0, 2.0, 0.0, -3.0]);
    }

    proptest! {
        #[test]
        fn pearson_symmetry_and_affine_invariance(
            xs in proptest::collection::vec(-100.0f64..100.0, 3..40),
            noise in proptest::collection::vec(-50.0f64..50.0, 40),
            a in 0.1f64..10.0, b in -20.0f64..20.0,
        ) {
            let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, n)| 0.5 * x + n).collect();
            let r = match pearson(&xs, &ys) { Ok(r) => r, Err(_) => return Ok(()) };
            prop_assert!((r - pearson(&ys, &xs).unwrap()).abs() < 1e-12);
            let scaled: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            prop_assert!((r - pearson(&scaled, &ys).unwrap()).abs() < 1e-9);
            let neg: Vec<f64> = xs.iter().map(|x| -a * x).collect();
            prop_assert!((r - pearson(&neg, &ys).unwrap()).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn histogram_counts_every_value(vals in proptest::collection::vec(-1e3f64..1e3, 1..200), bins in 2usize..50) {
            let h = intensity_histogram(&vals, bins, None).unwrap();
            prop_assert_eq!(h.total(), vals.len() as u64);
        }
    }
}
