//! Co-occurrence relation modeling for multi-label temporal action localization.
//!
//! The crate covers the whole training-time stack: a small reverse-mode tensor
//! engine ([`numcore`]), dense annotations and co-occurrence ground truth
//! ([`annotations`]), fixed label embeddings ([`embeddings`]), the co-occurrence
//! relation module ([`corm`]), the host sequence model ([`seqmodel`]), losses and
//! per-frame mAP ([`metrics`]), and a synthetic corpus generator ([`synth`]).

pub mod annotations;
pub mod corm;
pub mod embeddings;
pub mod metrics;
pub mod numcore;
pub mod seqmodel;
pub mod synth;

pub use numcore::{Graph, NodeId, NumError, Tensor};
