#![allow(dead_code)]

use std::path::{Path, PathBuf};

use opchain::config::RunConfig;
use opchain::corpus::write_corpus;

pub fn corpus(dir: &Path, count: usize, size: usize, seed: u64) -> PathBuf {
    let src = dir.join("src");
    write_corpus(&src, count, size, size, seed, 1).unwrap();
    src
}

pub fn dataset_config(sources: &Path, seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.dataset.sources = sources.to_string_lossy().into_owned();
    c.dataset.seed = seed;
    c
}

pub fn run(args: &[&str]) -> i32 {
    opchain::cli::run(std::iter::once("opchain").chain(args.iter().copied()))
}
