//! Text-bridged graph recommendation: hierarchical pre-training over
//! source-domain interaction graphs joined by text-similarity edges,
//! fine-tuning on a target domain, and training-free inference.

pub mod codec;
pub mod dense;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod propagation;
pub mod protocol;
pub mod semantic;
pub mod synth;
pub mod training;

pub use dense::Dense;
pub use error::{Error, Result};
pub use eval::{MetricsReport, RecallMode};
pub use graph::{DomainId, GraphUniverse, NodeId, NodeKind};
pub use ingest::{InteractionRecord, PromptSet, SplitDataset, TextEmbeddingMatrix};
pub use model::{Architecture, Model, ModelParams, Precision};
pub use pipeline::{Dataset, Layout};
pub use protocol::{run_protocol, ProtocolName, ProtocolReport};
pub use semantic::{EdgeMode, SemanticEdgeSet};
pub use synth::{generate, SynthSpec};
pub use training::{Checkpoint, Stage, TrainConfig};
