//! Heterogeneous graph representation learning with relation tokens.
//!
//! The pipeline turns a typed graph into per-node token sequences and trains
//! a hop-level graph transformer over them:
//!
//! 1. [`graph`] loads or generates a [`HeteroGraph`].
//! 2. [`pathstats`] counts typed walks per target and hop, giving meta-path
//!    proportions and the per-(hop, type) neighbor sets used for pooling.
//! 3. [`prompt`] renders relation prompts with two embedding placeholders.
//! 4. [`encoder`] turns node text and bound prompts into vectors through a
//!    pluggable [`EncoderBackend`], with a persistent cache and call counting.
//! 5. [`model`] runs the type blocks, type readout, hop block and hop readout
//!    on top of the [`tensor`] autodiff engine.
//! 6. [`train`] pre-trains with a contrastive edge objective and fine-tunes a
//!    classification head on a frozen backbone.
//! 7. [`eval`] builds splits, computes metrics, profiles call counts and
//!    exports attention statistics.

pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod meta;
pub mod model;
pub mod pathstats;
pub mod prompt;
pub mod synth;
pub mod tensor;
pub mod train;

pub use encoder::{EncoderBackend, MockBackend, TokenTable};
pub use error::{Error, Result};
pub use graph::{HeteroGraph, NodeIdx, SchemaDef, TypeIdx};
pub use model::{ModelConfig, ModelParams};
pub use pathstats::{HopTypeNeighborhood, MetaPathProfile};
pub use prompt::{BoundPrompt, PromptInstance, TemplateId};
pub use tensor::{Tape, Tensor, Var};
