//! Layer-pipelined ensemble decoding over a write-once hidden-state pool,
//! plus the sequential reference decoder it must match.

mod decode;
mod pool;

pub use decode::{decode_pipelined, decode_sequential, DecodeOutput, LayerTiming, PipelineOptions, TimingReport};
pub use pool::{Handoff, HiddenKey, StatePool};
