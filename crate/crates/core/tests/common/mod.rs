#![allow(dead_code)]

use std::path::PathBuf;

use coal_core::trainer::{ExperimentConfig, Method, SamplerKind};

pub const FIXTURE_SEEDS: [u64; 3] = [1, 2, 3];

pub fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/twin-rsut.toml")
}

/// The pinned twin-Gaussian fixture with the given method, degree and seed.
pub fn fixture(method: Method, degree: f64, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&fixture_path()).expect("fixture config parses");
    cfg.train.method = method;
    cfg.train.seed = seed;
    cfg.data.degree = degree;
    cfg
}

pub fn with_sampler(mut cfg: ExperimentConfig, sampler: SamplerKind) -> ExperimentConfig {
    cfg.train.sampler = sampler;
    cfg
}

/// A smaller, faster variant for contract tests.
pub fn small_fixture(method: Method, seed: u64) -> ExperimentConfig {
    let mut cfg = fixture(method, 100.0, seed);
    cfg.data.source_budget = 400;
    cfg.data.target_budget = 400;
    cfg.train.epochs = 3;
    cfg.train.pretrain_epochs = 3;
    cfg
}
