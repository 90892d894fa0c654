//! Rank-aware dual-graph attention multiple-instance learning for ordinal grading
//! of whole-slide patch bags.

pub mod attgnn;
pub mod bagio;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod graphbuild;
pub mod ingest;
pub mod milhead;
pub mod model;
pub mod rankloss;
pub mod trainer;
pub mod util;

pub use bagio::{read_bag, read_dataset, write_bag, write_dataset, Bag, GradeLabel, RegionAnnotation};
pub use config::TrainConfig;
pub use error::{Error, Result};
pub use graphbuild::{build_hybrid_graph, DiffusionConfig, HybridGraph, SparseGraph};
pub use model::ModelParams;
pub use trainer::{prepare_bags, PreparedBag};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
