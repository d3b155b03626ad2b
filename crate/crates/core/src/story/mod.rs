//! Random families, resolvable clause chains, noise injection and dataset files.

mod dataset;
mod graph;
mod instance;

pub use dataset::{
    generate_dataset, generate_instance, instance_seed, load_dataset, load_manifest, save_dataset,
    DatasetConfig, DatasetSplit, Manifest, Split, MANIFEST_FILE, TEST_FILE, TRAIN_FILE, VALID_FILE,
};
pub use graph::{sample_family_graph, FamilyGraph, GraphParams};
pub use instance::{
    add_noise, default_noise_facts, sample_chain, Chain, Fact, Noise, StoryInstance,
};
