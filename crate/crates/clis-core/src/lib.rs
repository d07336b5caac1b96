//! Multi-task collaborative learning for long-tailed object detection.
//!
//! The library trains a small two-stage detector jointly with an
//! image-classification task on weakly labeled data. Three mechanisms tie the
//! tasks together: task-specialized sub-networks for localization and
//! classification, a siamese classification head shared between the
//! instance-level and image-level tasks, and a contrastive regularizer that
//! aligns the two views of the same instance against a queue of negatives.
//!
//! Modules follow the training pipeline: [`datasets`] synthesizes the
//! long-tailed benchmark, [`augment`] builds the weak/detection views,
//! [`detector`] and [`collab`] hold the model, [`trainer`] runs joint
//! optimization, [`regiongen`] produces pre-defined regions offline,
//! [`evalkit`] scores detections, and [`harness`] orchestrates experiments.

pub mod augment;
pub mod collab;
pub mod datasets;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod harness;
pub mod nn;
pub mod regiongen;
pub mod trainer;

pub use error::{ClisError, Result};
