//! A desk-scale image-to-event domain adaptation experiment.
//!
//! Labeled intensity images of oriented bars and unlabeled event
//! histograms of other bars are mapped into a shared feature space. Images
//! are translated into events through a predicted pseudo-flow and a
//! refinement block, and a task head trained on images and translated
//! events is finally evaluated on real events.

pub mod check;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nets;
pub mod pipeline;
pub mod train;

pub use config::PipelineConfig;
pub use data::{make_dataset, make_event_test_set, Dataset, EventTestSet, ToyScene};
pub use error::{Error, Result};
pub use eval::evaluate;
pub use experiment::{make_data, run, run_to_dir, Metrics, RunOutput, Variant};
pub use train::{train, Trained, Trainer};
