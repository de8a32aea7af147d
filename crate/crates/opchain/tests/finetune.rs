mod common;

use opchain::checkpoint::Checkpoint;
use opchain::config::RunConfig;
use opchain::dataset::{synthesize, ManifestDataset, Split};
use opchain::pipeline;

fn dataset(root: &std::path::Path, src: &std::path::Path, name: &str, chains: [&str; 5]) -> ManifestDataset {
    let mut c: RunConfig = common::dataset_config(src, 8);
    c.dataset.chains = chains.map(String::from).to_vec();
    c.dataset.ratios = [0.5, 0.1, 0.4];
    let out = root.join(name);
    synthesize(&c, &out, 1).unwrap();
    ManifestDataset::open(&out, None).unwrap()
}

fn test_accuracy(model: &mut opchain_core::nn::TMFNet<f32>, ds: &ManifestDataset) -> f64 {
    pipeline::evaluate(model, ds, Split::Test, 16, 1).unwrap().report.accuracy
}

/// A model trained on MF5/GB1.1 chains adapts to MF3/GB0.7 chains faster
/// than a fresh model given the same number of steps.
#[test]
fn fine_tuning_beats_scratch_at_equal_budget() {
    let dir = tempfile::tempdir().unwrap();
    let src = common::corpus(dir.path(), 60, 64, 21);
    let pre = dataset(dir.path(), &src, "pre", ["AU", "MF5", "GB1.1", "MF5>GB1.1", "GB1.1>MF5"]);
    let new = dataset(dir.path(), &src, "new", ["AU", "MF3", "GB0.7", "MF3>GB0.7", "GB0.7>MF3"]);

    let mut base = RunConfig::default();
    base.train.epochs = 10;
    let mut run = pipeline::train(&pre, &base, None, false, 1, &mut |_| {}).unwrap();
    let ckpt = Checkpoint::capture(&mut run.model, &base, run.epochs_done);

    let budget = 3;
    let mut ft_config = base.clone();
    let ft = ft_config.train.to_core().fine_tuned();
    ft_config.train.lr0 = ft.lr0;
    ft_config.train.lr_step = ft.lr_step;
    ft_config.train.epochs = budget;
    let mut tuned = pipeline::train(&new, &ft_config, Some(&ckpt), false, 1, &mut |_| {}).unwrap();

    let mut scratch_config = base.clone();
    scratch_config.train.epochs = budget;
    let mut scratch = pipeline::train(&new, &scratch_config, None, false, 1, &mut |_| {}).unwrap();

    let a = test_accuracy(&mut tuned.model, &new);
    let b = test_accuracy(&mut scratch.model, &new);
    assert!(a > b, "fine-tuned {a} vs scratch {b}");
}
