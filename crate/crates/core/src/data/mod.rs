//! Corpus ingestion, splitting, masking, batching and replay storage.

mod batches;
mod corpus;
mod masking;
mod replay;
pub mod synth;
mod vocab;

pub use batches::{batch_iter, mixed_iter, BatchStream, MixedStream, Windows};
pub use corpus::{ingest, read_text, split_documents, AccessLog, AccessRecord, Corpus};
pub use masking::{mask_batch, TokenBatch, DEFAULT_MASK_PROB};
pub use replay::ReplayBuffer;
pub use vocab::{Vocabulary, MASK, PAD, RESERVED, UNK};
