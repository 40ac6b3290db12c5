//! Dense tensors, reverse-mode autodiff, optimizers and checkpoints.

mod checkpoint;
mod dense;
mod gradcheck;
mod optim;
mod param;
mod scalar;
mod tape;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, TensorEntry,
};
pub use dense::Tensor;
pub use gradcheck::{five_point, gradient_check, relative_error, GRAD_FLOOR};
pub use optim::{sgd_step, AdamW, AdamWConfig};
pub use param::{ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{accumulate_grads, GradMap, Grads, Tape, Var};
