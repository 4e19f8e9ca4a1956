//! Inputs shared by the benchmarks: an untrained reference-size model and a
//! slice of the synthetic dataset.

use pathwayforge_core::model::{generate_dataset, ArchSpec, Dataset, MiniInception};

pub const CLASSES: usize = 4;

pub fn model() -> MiniInception {
    MiniInception::new(ArchSpec::reference(CLASSES), 1).expect("reference architecture")
}

/// A small dataset from the same generator as the reference run.
pub fn dataset(per_class: usize) -> Dataset {
    generate_dataset(7, CLASSES, per_class)
}
