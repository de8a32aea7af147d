//! Dataset synthesis, source-level splits, manifests and batch loading.
//!
//! Layout of a dataset directory: `manifest.jsonl` (one record per line,
//! ordered by id), `patches/<id>.ppm`, `config.toml` (the resolved config)
//! and, when anything failed, `errors.log`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use opchain_core::metrics::ChainUniverse;
use opchain_core::nn::train::images_to_tensor;
use opchain_core::nn::{InMemoryDataset, Scalar, Tensor};
use opchain_core::rng::{derive_seed, stream};
use opchain_core::{Chain, ImageBuffer, PatchSpec};
use rand_core::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{read_image, write_image};
use crate::config::{DatasetSection, RunConfig};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.jsonl";
pub const PATCH_DIR: &str = "patches";
const SPLIT_STREAM: u64 = 0x5b1f;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`; expected train, valid or test")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u64,
    pub src: String,
    pub y: usize,
    pub x: usize,
    pub size: usize,
    pub chain: String,
    pub seed: u64,
    pub split: String,
    pub class: usize,
}

/// Per-split source counts: floor of `ratio * n`, then the remainder goes
/// one at a time to the largest fractional parts (earlier split on ties).
/// Splits with a positive ratio never end up empty.
pub fn split_counts(n: usize, ratios: &[f64; 3]) -> Result<[usize; 3]> {
    let active = ratios.iter().filter(|&&r| r > 0.0).count();
    if n < active {
        return Err(Error::Core(opchain_core::Error::Parameter(format!(
            "{n} sources cannot fill {active} non-empty splits"
        ))));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    // The small slack absorbs representation error such as 0.29 * 100.
    let mut counts = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect::<Vec<_>>();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - counts[b] as f64).total_cmp(&(exact[a] - counts[a] as f64)).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            rest -= 1;
        }
    }
    // Every non-empty ratio keeps at least one source.
    while let Some(empty) = (0..3).find(|&i| ratios[i] > 0.0 && counts[i] == 0) {
        let donor = (0..3).max_by_key(|&i| (counts[i], core::cmp::Reverse(i))).unwrap_or(0);
        counts[donor] -= 1;
        counts[empty] += 1;
    }
    Ok([counts[0], counts[1], counts[2]])
}

/// Assigns each of `n` sources to a split: a seeded shuffle, then the
/// first `counts[0]` are train, the next `counts[1]` valid, the rest test.
pub fn split_sources(n: usize, ratios: &[f64; 3], seed: u64) -> Result<Vec<Split>> {
    let counts = split_counts(n, ratios)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(derive_seed(seed, SPLIT_STREAM));
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    let mut out = vec![Split::Train; n];
    for (rank, &src) in order.iter().enumerate() {
        out[src] = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Valid
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// Retags records by source using [`split_sources`] over the sorted set of
/// distinct sources.
pub fn split(records: &mut [ManifestRecord], ratios: &[f64; 3], seed: u64) -> Result<()> {
    let sources: Vec<String> = records.iter().map(|r| r.src.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let tags = split_sources(sources.len(), ratios, seed)?;
    let map: BTreeMap<&str, Split> = sources.iter().map(String::as_str).zip(tags).collect();
    for r in records.iter_mut() {
        r.split = map[r.src.as_str()].as_str().into();
    }
    Ok(())
}

pub fn list_sources(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("ppm" | "pgm" | "pnm" | "png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Pixels of one record: crop the source, then apply the chain with the
/// record seed.
pub fn render_record(source: &ImageBuffer, r: &ManifestRecord) -> Result<ImageBuffer> {
    let patch = source.crop(r.y, r.x, r.size, r.size)?;
    let chain = Chain::parse(&r.chain)?;
    Ok(chain.apply(&patch, r.seed)?)
}

#[derive(Debug, Clone, Default)]
pub struct SynthReport {
    pub records: Vec<ManifestRecord>,
    /// (what, why) for every source or record that failed.
    pub failures: Vec<(String, String)>,
}

fn worker_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Failed(format!("thread pool: {e}")))
}

pub fn patch_path(root: &Path, id: u64) -> PathBuf {
    root.join(PATCH_DIR).join(format!("{id}.ppm"))
}

/// Synthesizes every (source patch, chain) pair into `out`. Failures are
/// collected, not fatal; the manifest holds the records that succeeded.
pub fn synthesize(config: &RunConfig, out: &Path, jobs: usize) -> Result<SynthReport> {
    let ds: &DatasetSection = &config.dataset;
    let spec: PatchSpec = ds.patch_spec()?;
    ds.check_ratios()?;
    let universe: ChainUniverse = ds.universe()?;
    let src_dir = config.sources_dir().ok_or_else(|| Error::Config("dataset.sources is not set".into()))?;
    let paths = list_sources(&src_dir)?;
    let pool = worker_pool(jobs)?;

    let decoded: Vec<Result<ImageBuffer>> = pool.install(|| paths.par_iter().map(|p| read_image(p)).collect());
    let mut report = SynthReport::default();
    let mut sources = Vec::new();
    for (path, img) in paths.iter().zip(decoded) {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match img.and_then(|i| {
            if i.height() < spec.size || i.width() < spec.size {
                Err(Error::Core(opchain_core::Error::Dimension(format!(
                    "{}x{} is smaller than the {} patch",
                    i.height(),
                    i.width(),
                    spec.size
                ))))
            } else {
                Ok(i)
            }
        }) {
            Ok(i) => sources.push((name, i)),
            Err(e) => report.failures.push((name, e.to_string())),
        }
    }
    let splits = split_sources(sources.len(), &ds.ratios, ds.seed)?;

    let mut planned = Vec::new();
    let mut id = 0u64;
    for (s, (name, img)) in sources.iter().enumerate() {
        for (y, x) in spec.offsets(img.height(), img.width()) {
            for (class, chain) in universe.chains().iter().enumerate() {
                planned.push((
                    s,
                    ManifestRecord {
                        id,
                        src: name.clone(),
                        y,
                        x,
                        size: spec.size,
                        chain: chain.to_string(),
                        seed: derive_seed(ds.seed, id),
                        split: splits[s].as_str().into(),
                        class,
                    },
                ));
                id += 1;
            }
        }
    }

    let patch_dir = out.join(PATCH_DIR);
    fs::create_dir_all(&patch_dir).map_err(|e| Error::io(&patch_dir, e))?;
    let results: Vec<Result<()>> = pool.install(|| {
        planned
            .par_iter()
            .map(|(s, r)| {
                let img = render_record(&sources[*s].1, r)?;
                write_image(&patch_path(out, r.id), &img)
            })
            .collect()
    });
    for ((_, r), res) in planned.into_iter().zip(results) {
        match res {
            Ok(()) => report.records.push(r),
            Err(e) => report.failures.push((format!("record {}", r.id), e.to_string())),
        }
    }
    write_manifest(&out.join(MANIFEST), &report.records)?;
    fs::write(out.join("config.toml"), config.to_toml()).map_err(|e| Error::io(out.join("config.toml"), e))?;
    let log = out.join("errors.log");
    if report.failures.is_empty() {
        let _ = fs::remove_file(&log);
    } else {
        let text: String = report.failures.iter().map(|(w, e)| format!("{w}: {e}\n")).collect();
        fs::write(&log, text).map_err(|e| Error::io(&log, e))?;
    }
    Ok(report)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Failed(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Load(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Records of a synthesized dataset, with pixels read from the patch cache
/// or regenerated from the sources.
#[derive(Debug, Clone)]
pub struct ManifestDataset {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub source_dir: Option<PathBuf>,
}

impl ManifestDataset {
    pub fn open(root: &Path, source_dir: Option<PathBuf>) -> Result<Self> {
        let records = read_manifest(&root.join(MANIFEST))?;
        Ok(Self { root: root.into(), records, source_dir })
    }

    pub fn num_classes(&self) -> usize {
        self.records.iter().map(|r| r.class + 1).max().unwrap_or(0)
    }

    /// Class index to chain text, as recorded in the manifest.
    pub fn class_chains(&self) -> Result<Vec<Chain>> {
        let mut by_class: BTreeMap<usize, &str> = BTreeMap::new();
        for r in &self.records {
            if let Some(prev) = by_class.insert(r.class, &r.chain) {
                if prev != r.chain {
                    return Err(Error::Load(format!("class {} maps to both {prev} and {}", r.class, r.chain)));
                }
            }
        }
        (0..self.num_classes())
            .map(|c| {
                let text = by_class.get(&c).ok_or_else(|| Error::Load(format!("class {c} has no records")))?;
                Ok(Chain::parse(text)?)
            })
            .collect()
    }

    pub fn subset(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split.as_str()).collect()
    }

    pub fn regenerate(&self, r: &ManifestRecord) -> Result<ImageBuffer> {
        let dir = self
            .source_dir
            .as_ref()
            .ok_or_else(|| Error::Load(format!("patch {} is not cached and no source directory is known", r.id)))?;
        let src = read_image(&dir.join(&r.src))
            .map_err(|e| Error::Load(format!("patch {} is not cached and its source failed to load: {e}", r.id)))?;
        render_record(&src, r)
    }

    pub fn pixels(&self, r: &ManifestRecord) -> Result<ImageBuffer> {
        let p = patch_path(&self.root, r.id);
        if p.exists() {
            read_image(&p)
        } else {
            self.regenerate(r)
        }
    }

    /// (B, 3, S, S) pixel batch and labels for the records with these ids.
    pub fn load_batch<T: Scalar>(&self, ids: &[u64]) -> Result<(Tensor<T>, Vec<usize>)> {
        let recs = ids
            .iter()
            .map(|id| {
                self.records
                    .iter()
                    .find(|r| r.id == *id)
                    .ok_or_else(|| Error::Load(format!("record {id} is not in the manifest")))
            })
            .collect::<Result<Vec<_>>>()?;
        let imgs = recs.iter().map(|r| self.pixels(r)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImageBuffer> = imgs.iter().collect();
        Ok((images_to_tensor(&refs)?, recs.iter().map(|r| r.class).collect()))
    }

    /// Every record of a split, loaded into memory in manifest order.
    pub fn load_split(&self, split: Split, jobs: usize) -> Result<(InMemoryDataset, Vec<ManifestRecord>)> {
        let recs: Vec<ManifestRecord> = self.subset(split).into_iter().cloned().collect();
        let pool = worker_pool(jobs)?;
        let imgs = pool.install(|| recs.par_iter().map(|r| self.pixels(r)).collect::<Result<Vec<_>>>())?;
        let labels = recs.iter().map(|r| r.class).collect();
        Ok((InMemoryDataset::new(imgs, labels)?, recs))
    }
}
