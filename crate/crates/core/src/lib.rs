//! Contextually adaptive pruning of image tokens in multimodal in-context
//! sequences.
//!
//! The crate is organised around the two pruning stages:
//!
//! * [`stage1`] selects, per image, a subset of projector tokens by greedy
//!   maximisation of a facility-location diversity term plus a text
//!   alignment term.
//! * [`stage2`] runs inside a small deterministic decoder ([`decoder`]) and
//!   removes context image tokens at layer `K` and query image tokens at
//!   layer `K + 1`.
//!
//! [`pipeline`] chains both stages and produces a [`trace::PruneTrace`].
//! [`baselines`] holds the attention- and diversity-based reference
//! criteria, [`cost`] the closed-form FLOPs/KV-cache estimates and
//! [`oracle`] brute-force references used by the test suites.

pub mod baselines;
pub mod compare;
pub mod cost;
pub mod decoder;
pub mod error;
pub mod format;
pub mod linalg;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod seq;
pub mod stage1;
pub mod stage2;
pub mod trace;

pub use error::{Error, Result};
pub use pipeline::{run_catp, Ablations, ContextPoolMode};
pub use seq::{EmbeddingMatrix, InContextSequence, PruneConfig, Segment, SegmentKind};
pub use trace::PruneTrace;
