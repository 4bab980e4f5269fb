//! Local-global memory personalization for black-box LLMs.
//!
//! Per-user local memory (retrieval and profiles), a population- or
//! community-level global memory evolved over temporal phases, and a
//! mediator prompt that fuses the two at inference time.

pub mod community;
pub mod dataset;
pub mod embedding;
pub mod global_memory;
pub mod harness;
pub mod llm;
pub mod mediator;
pub mod metrics;
pub mod profile;
pub mod retrieval;
pub mod template;
pub mod temporal;
