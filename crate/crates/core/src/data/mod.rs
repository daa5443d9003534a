pub mod format;
pub mod synth;

pub use format::{
    decode, decode_dump, encode, encode_dump, read_checkpoint, read_dump, read_prototypes,
    read_tensors, write_checkpoint, write_dump, write_prototypes, write_tensors, ActivationDump,
};
pub use synth::{generate_task, oracle_features, templates, Dataset, TaskSpec, Templates};
