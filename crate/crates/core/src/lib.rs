//! Incremental-decoding simulator for comparing KV-cache eviction policies.
//!
//! The crate pairs a small seeded transformer decoder with per-head KV caches
//! and five eviction policies: full cache, StreamLLM (sinks plus a sliding
//! window), H2O (accumulated attention), Scissorhands (windowed attention) and
//! value-aware variants of the last two that weight attention scores by the
//! norm of each token's value vector.

pub mod cache;
pub mod decoder;
pub mod error;
pub mod generation;
pub mod harness;
pub mod math;
pub mod policy;
pub mod rng;
pub mod trace;

pub use cache::{CacheSpec, HeadCache, MemoryAccounting, ModelCache, SlotHandle, TokenSlot};
pub use decoder::{Decoder, HeadStep, ModelConfig, StepOutput};
pub use error::{Error, Result};
pub use generation::{evaluate, generate, Generation, Prefilled, RunMetrics};
pub use math::{Mat64, NormOrder, Vec64};
pub use policy::{ImportanceVector, PolicyConfig, PolicyKind};
