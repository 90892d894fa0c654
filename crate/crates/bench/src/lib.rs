//! Shared fixtures for the benchmarks.

use racr_core::bagio::{generate_synthetic_dataset, SynthSpec};
use racr_core::Bag;

/// One diseased synthetic bag with exactly `patches` patches.
pub fn synthetic_bag(patches: usize, seed: u64) -> Bag {
    let spec = SynthSpec {
        class_counts: vec![0, 0, 0, 1],
        bag_size: [patches, patches],
        ..SynthSpec::default()
    };
    generate_synthetic_dataset(&spec, seed)
        .expect("valid spec")
        .pop()
        .expect("one bag")
}
