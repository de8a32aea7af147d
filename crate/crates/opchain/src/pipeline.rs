//! Training and evaluation over a synthesized dataset directory.

use std::path::Path;

use opchain_core::metrics::{ChainUniverse, EvalReport};
use opchain_core::nn::train::{predict, prepare_fine_tune};
use opchain_core::nn::{EpochLog, InMemoryDataset, TMFNet, Trainer};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{ManifestDataset, ManifestRecord, Split};
use crate::error::Result;

pub struct TrainRun {
    pub model: TMFNet<f32>,
    pub logs: Vec<EpochLog>,
    pub epochs_done: u64,
}

/// Opens a dataset directory; patches missing from the cache are
/// regenerated from the configured source directory.
pub fn open_dataset(data: &Path, config: &RunConfig) -> Result<ManifestDataset> {
    ManifestDataset::open(data, config.sources_dir())
}

/// Trains from scratch, or from `init` when given. A class-count change
/// needs `reset_heads`.
pub fn train(
    ds: &ManifestDataset,
    config: &RunConfig,
    init: Option<&Checkpoint>,
    reset_heads: bool,
    jobs: usize,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainRun> {
    let num_classes = ds.num_classes();
    let model = match init {
        Some(ckpt) => {
            let mut m = ckpt.restore()?;
            prepare_fine_tune(&mut m, num_classes, reset_heads, config.model.seed)?;
            m
        }
        None => TMFNet::new(config.model_config(num_classes)?)?,
    };
    let (train_set, _) = ds.load_split(Split::Train, jobs)?;
    let (valid_set, _) = ds.load_split(Split::Valid, jobs)?;
    let mut trainer = Trainer::new(model, config.train.to_core())?;
    let logs = trainer.fit(&train_set, Some(&valid_set), on_epoch)?;
    let epochs_done = trainer.epoch as u64;
    Ok(TrainRun { model: trainer.model, logs, epochs_done })
}

pub struct Evaluation {
    pub report: EvalReport,
    pub records: Vec<ManifestRecord>,
    pub preds: Vec<usize>,
    pub universe: ChainUniverse,
}

/// Fused-head predictions and chain metrics on one split.
pub fn evaluate(model: &mut TMFNet<f32>, ds: &ManifestDataset, split: Split, batch_size: usize, jobs: usize) -> Result<Evaluation> {
    let universe = ChainUniverse::from_chains(ds.class_chains()?)?;
    let (data, records): (InMemoryDataset, _) = ds.load_split(split, jobs)?;
    let preds = predict(model, &data, batch_size)?;
    let report = EvalReport::from_labels(&preds, &data.labels, &universe)?;
    Ok(Evaluation { report, records, preds, universe })
}
