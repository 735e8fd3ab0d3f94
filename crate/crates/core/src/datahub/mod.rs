//! Datasets, client partitioning, corruption knobs and per-client shards.

mod corrupt;
mod dataset;
mod loaders;
mod partition;
mod shards;
mod synth;

pub use corrupt::{inject_noise, subsample, subsample_indices, NoiseMode};
pub use dataset::Dataset;
pub use loaders::{load_csv, load_idx, parse_csv_dataset, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use partition::{
    largest_remainder, partition_dirichlet, partition_dirichlet_min, partition_step, partition_step_with,
    step_major_classes, Partition, PartitionParams, Scheme,
};
pub use shards::{make_shards, ClientShards, META_FRACTION, TEST_FRACTION};
pub use synth::synth_blobs;
