//! Datasets, procedural image generation and non-IID device partitioning.

mod dataset;
mod partition;

pub use dataset::{
    class_templates, gen_synthetic, load_raw_images, nearest_template_accuracy, save_raw_images, Dataset, SyntheticSpec,
};
pub use partition::{partition, split_train_val_test, DevicePartition, PartitionManifest, PartitionSpec, ShardGroup};
