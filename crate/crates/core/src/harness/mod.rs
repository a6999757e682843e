//! Datasets, experiment configuration, training runs and comparison tables.

mod compare;
mod config;
mod data;
mod run;

pub use compare::{compare_suite, read_comparison_csv, ComparisonRow, ComparisonTable};
pub use config::{DatasetConfig, ExperimentConfig, OptimizerConfig, SeedSource, SEED_ENV_VAR};
pub use data::{
    gen_blobs, gen_spirals, load_dataset, load_mnist_dir, load_mnist_idx, Dataset, Split, IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC, MNIST_FILES,
};
pub use run::{
    read_run_csv, run_experiment, run_experiment_on, write_run_csv, EpochRow, Provenance, RunRecord, RunStatus,
};
