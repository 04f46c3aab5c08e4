//! Black-box box selection for referring expression comprehension.
//!
//! Detector outputs are rendered as a text prompt, a chat-completion model
//! picks the box index that best matches the query, and the pick is scored
//! against ground truth with P@1. The same prompt rendering feeds a
//! fine-tuning corpus whose targets are the best-IoU box indices.

pub mod dataset;
pub mod detections;
pub mod eval;
pub mod gateway;
pub mod geometry;
pub mod jsonl;
pub mod manifest;
pub mod pipeline;
pub mod prompt;
pub mod selection;
pub mod sft;
pub mod subject;

pub use geometry::BBox;
