//! Pressure-ulcer staging with multimodal language models: prompting,
//! generator-critic reflection, evaluation, LoRA utilities and a review
//! service for clinician ratings.

pub mod arm;
pub mod backend;
pub mod cli;
pub mod domain;
pub mod harness;
pub mod lora;
pub mod metrics;
pub mod parse;
pub mod prompt;
pub mod review;
