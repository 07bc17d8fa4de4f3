//! Fixtures shared by the benchmarks.

use macnet::data::{EncodedDataset, Vocab};
use macnet::gridworld::{generate_dataset, DatasetSpec};
use macnet::mac::{MacConfig, MacModel};

/// A generated, encoded dataset of `count` instances on the default grid.
pub fn dataset(count: usize, seed: u64) -> EncodedDataset {
    let spec = DatasetSpec { seed, count, ..DatasetSpec::default() };
    let instances = generate_dataset(&spec).expect("generation succeeds");
    EncodedDataset::new(instances, &Vocab::standard(spec.grid_size)).expect("standard vocabulary covers generated data")
}

/// Model with hidden size `d` and `p` reasoning steps, other settings default.
pub fn model(d: usize, p: usize) -> MacModel {
    MacModel::new(MacConfig { d, p, ..MacConfig::default() }, 0).expect("valid config")
}
