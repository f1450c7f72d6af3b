//! Vocabularies, padded batches and synthetic parallel corpora.

mod batch;
mod corpus;
mod tasks;
mod vocab;

pub use batch::{make_batches, teacher_forcing_pair, Batch, Batcher, TokenBatch};
pub use corpus::{read_lines, read_parallel, write_lines, write_parallel};
pub use tasks::{generate_task, Task, TaskKind};
pub use vocab::Vocabulary;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
/// Number of reserved ids at the start of every vocabulary.
pub const RESERVED: usize = 4;
