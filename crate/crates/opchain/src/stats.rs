//! Corpus-level residual and channel statistics behind `filter-stats` and
//! `chan-corr`.

use std::path::{Path, PathBuf};

use opchain_core::analytics::{correlation_stats, intensity_histogram, neighbor_differences, CorrelationReport, Histogram};
use opchain_core::filters::{baseline_residual, neighborhood_correlation, residual_maps, Direction, FilterBank};
use opchain_core::image::Plane;
use opchain_core::{Chain, ImageBuffer, PatchSpec};
use rayon::prelude::*;

use crate::codec::read_image;
use crate::dataset::list_sources;
use crate::error::Result;

pub const FILTER_NAMES: [&str; 5] = ["rgb1", "rgb2", "rgb3", "srm", "ccl"];
pub const DIRECTIONS: [Direction; 3] = [Direction::Horizontal, Direction::Vertical, Direction::Diagonal];

/// Image files named on the command line; directories expand to their
/// image files in name order.
pub fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(list_sources(p)?);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// Grid patches of every image, labelled `file@y,x`. Images smaller than
/// the patch contribute nothing.
pub fn load_patches(paths: &[PathBuf], spec: &PatchSpec) -> Result<Vec<(String, ImageBuffer)>> {
    spec.validate()?;
    let mut out = Vec::new();
    for path in paths {
        let img = read_image(path)?;
        if img.height() < spec.size || img.width() < spec.size {
            continue;
        }
        let name = file_name(path);
        for p in img.extract_patches(spec)? {
            out.push((format!("{name}@{},{}", p.y, p.x), p.image));
        }
    }
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// The five residual maps of a color patch in [`FILTER_NAMES`] order.
pub fn residuals(img: &ImageBuffer, bank: &FilterBank) -> Result<[Plane; 5]> {
    let [a, b, c] = residual_maps(img, bank)?;
    Ok([a, b, c, baseline_residual(img, &bank.srm), baseline_residual(img, &bank.ccl)])
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterStat {
    pub image: String,
    pub filter: &'static str,
    pub direction: Direction,
    pub correlation: f64,
}

/// Neighborhood correlation of every residual map of every patch.
pub fn filter_stats(patches: &[(String, ImageBuffer)], bank: &FilterBank) -> Result<Vec<FilterStat>> {
    let per: Vec<Result<Vec<FilterStat>>> = patches
        .par_iter()
        .map(|(name, img)| {
            let maps = residuals(&img.to_rgb(), bank)?;
            let mut rows = Vec::new();
            for (f, map) in FILTER_NAMES.iter().zip(&maps) {
                for d in DIRECTIONS {
                    rows.push(FilterStat { image: name.clone(), filter: f, direction: d, correlation: neighborhood_correlation(map, d)? });
                }
            }
            Ok(rows)
        })
        .collect();
    let mut out = Vec::new();
    for r in per {
        out.extend(r?);
    }
    Ok(out)
}

/// Mean correlation per (filter, direction). The pseudo-filter `rgb` is the
/// mean over the three RGB filters.
pub fn mean_by_filter(stats: &[FilterStat]) -> Vec<(String, Direction, f64, usize)> {
    let mut out = Vec::new();
    let groups: [(&str, &[&str]); 6] = [
        ("rgb", &["rgb1", "rgb2", "rgb3"]),
        ("rgb1", &["rgb1"]),
        ("rgb2", &["rgb2"]),
        ("rgb3", &["rgb3"]),
        ("srm", &["srm"]),
        ("ccl", &["ccl"]),
    ];
    for (label, members) in groups {
        for d in DIRECTIONS {
            let v: Vec<f64> =
                stats.iter().filter(|s| members.contains(&s.filter) && s.direction == d).map(|s| s.correlation).collect();
            let mean = if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
            out.push((label.to_string(), d, mean, v.len()));
        }
    }
    out
}

/// Neighbor-difference histograms of each residual map, pooled over patches.
pub fn residual_histograms(patches: &[(String, ImageBuffer)], bank: &FilterBank, bins: usize, range: (f64, f64)) -> Result<Vec<(&'static str, Histogram)>> {
    let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); FILTER_NAMES.len()];
    for (_, img) in patches {
        let maps = residuals(&img.to_rgb(), bank)?;
        for (k, m) in maps.iter().enumerate() {
            pooled[k].extend(neighbor_differences(m));
        }
    }
    FILTER_NAMES
        .iter()
        .zip(pooled)
        .map(|(f, v)| Ok((*f, intensity_histogram(&v, bins, Some(range))?)))
        .collect()
}

/// Channel-correlation summary of each chain over the patch corpus.
pub fn chain_correlations(patches: &[ImageBuffer], chains: &[Chain], seed: u64) -> Result<Vec<(Chain, [CorrelationReport; 3])>> {
    chains
        .par_iter()
        .map(|c| Ok((c.clone(), correlation_stats(patches, c, seed)?)))
        .collect()
}

/// R-channel intensity histogram after each chain (0..=255 range).
pub fn red_histograms(patches: &[ImageBuffer], chains: &[Chain], bins: usize, seed: u64) -> Result<Vec<(Chain, Histogram)>> {
    chains
        .iter()
        .map(|c| {
            let mut vals = Vec::new();
            for (i, p) in patches.iter().enumerate() {
                let out = c.apply(p, opchain_core::rng::derive_seed(seed, i as u64))?;
                vals.extend(out.plane(0).data);
            }
            Ok((c.clone(), intensity_histogram(&vals, bins, Some((0.0, 256.0)))?))
        })
        .collect()
}
