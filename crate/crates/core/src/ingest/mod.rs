//! Interaction logs, the temporal split, frozen text-embedding files and
//! prompt construction with pluggable embedding providers.

mod embfile;
mod prompts;
mod provider;
mod records;

pub use embfile::{read_embedding_matrix, write_embedding_matrix, TextEmbeddingMatrix, EMB_MAGIC, EMB_VERSION};
pub use prompts::{
    build_prompts, nearest_rank_quantile, MaskGroup, PromptConfig, PromptMask, PromptSet, PROMPT_TEMPLATE_VERSION,
};
pub use provider::{
    fetch_embeddings, EmbeddingProvider, FetchConfig, FetchStats, HashingProvider, HttpProvider, TOKEN_ENV,
};
pub use records::{
    build_universe, parse_interactions, parse_interactions_str, records_checksum, split_indices, temporal_split,
    write_interactions, DelimitedFormat, InteractionRecord, ParseOutcome, SplitDataset, SplitEdge, DEFAULT_FRACTIONS,
    META_FIELDS, REQUIRED_COLUMNS,
};
