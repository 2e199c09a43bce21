//! Shared fixtures for the criterion benchmarks in `benches/`.

use fdnas_core::data::{gen_synthetic, partition, split_train_val_test, SyntheticSpec};
use fdnas_core::{Dataset, DevicePartition, HardwareProfile, LatencyTable, PartitionSpec, SearchSpace, Tensor};

/// The toy search setup: 10 classes of 8x8 single-channel images split
/// over `devices` label-shard devices.
pub struct Toy {
    pub space: SearchSpace,
    pub data: Dataset,
    pub parts: Vec<DevicePartition>,
    pub table: LatencyTable,
}

impl Toy {
    pub fn new(devices: usize) -> Toy {
        let spec = SyntheticSpec { num_classes: 10, per_class: 60, channels: 1, size: 8, difficulty: 0.5 };
        let data = gen_synthetic(&spec, 0).unwrap();
        let scheme = if devices == 10 { PartitionSpec::three_groups() } else { PartitionSpec::Iid };
        let parts = partition(&data, &scheme, devices, 0)
            .unwrap()
            .iter()
            .map(|p| split_train_val_test(p, 0.15, 0.15, 0, true).unwrap())
            .collect();
        let space = SearchSpace::toy(10);
        let table = LatencyTable::synthesize(&HardwareProfile::cpu(), &space).unwrap();
        Toy { space, data, parts, table }
    }
}

/// A tensor of the given shape filled with a fixed pseudo-random pattern.
pub fn pattern(shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|i| ((i * 7919 % 101) as f64 / 50.0) - 1.0).collect();
    Tensor::new(shape, data).unwrap()
}
