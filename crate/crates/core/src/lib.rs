//! Multi-turn audit of LLM support behavior.
//!
//! Support-seeking narratives are split into verbatim shards, replayed turn by
//! turn against a support agent, coded with the Social Support Behavior Code
//! (SSBC), paired with a probe-based estimate of the agent's internal distress
//! construal, and analyzed with contingency tests and per-tag logistic models.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`corpus`] and [`store`]: corpus ingestion and the run-directory layout.
//! - [`gateway`]: the single egress point to chat-completion endpoints.
//! - [`shard`] and [`dialogue`]: shard extraction and conversation replay.
//! - [`ssbc`]: annotation prompts, consensus and agreement metrics.
//! - [`probe`]: hidden-state datasets, linear probes and layer ensembles.
//! - [`stats`]: contingency tests, FDR control and logistic models.
//! - [`report`]: rendering of stored statistics.
//! - [`pipeline`]: configuration and the stage registry driving a run.
//! - [`mock`]: a deterministic offline stand-in for every HTTP dependency.

pub mod corpus;
pub mod dialogue;
pub mod gateway;
pub mod mock;
pub mod pipeline;
pub mod probe;
pub mod report;
pub mod shard;
pub mod ssbc;
pub mod stats;
pub mod store;

pub use corpus::{CorpusStats, Post};
pub use probe::DistressLevel;
pub use ssbc::{LabelSet, SsbcLabel};
