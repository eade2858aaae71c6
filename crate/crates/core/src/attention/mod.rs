//! Joint text/edit/source attention with rotary position embeddings.

mod joint;
mod layout;
mod projection;
mod rope;

pub(crate) use joint::dot;
pub use joint::{attention_scale, edit_attention_probs, joint_attention, joint_attention_probs};
pub use layout::{Segment, SegmentLayout};
pub use projection::{project_tokens, ProjectionWeights, Qkv, SegmentProjections};
pub use rope::{apply_rope, dim_frequency, RopeConfig, SourcePositions, DEFAULT_ROPE_BASE};
