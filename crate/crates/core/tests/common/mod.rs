#![allow(dead_code)]

use owod_core::data::SplitCounts;
use owod_core::protocol::{run_seed, BenchmarkConfig, BenchmarkRun};

/// A benchmark small enough for integration tests.
pub fn small_config() -> BenchmarkConfig {
    let mut cfg = BenchmarkConfig::default();
    cfg.dataset.scenes_per_split = SplitCounts { train: 60, test: 30 };
    cfg.train.epochs = 3;
    cfg.train.lr_drop_epoch = 2;
    cfg.train.finetune_epochs = 1;
    cfg
}

pub fn small_run(seed: u64) -> BenchmarkRun {
    run_seed(&small_config(), seed).unwrap()
}
