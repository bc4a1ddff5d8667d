//! Decoder-only transformer with layer-granular stepping, fused layers that
//! take a predecessor's hidden state, low-rank adapters and a manual
//! reverse pass.

mod backward;
mod checkpoint;
mod model;
mod spec;
mod weights;

pub use backward::{backward, backward_accumulate, Gradients};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use model::{
    forward_step, forward_teacher, forward_with_tape, FusionInput, KvCache, LayerTrace, SequenceTape, StepCursor,
    StepOutput, Transformer,
};
pub use spec::ModelSpec;
pub use weights::{apply_adapter, Adapter, AdapterTarget, BaseWeights, LayerAdapters, LayerWeights};
pub use weights::seeded_rng;
