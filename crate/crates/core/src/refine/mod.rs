//! Two-stage generation: a landmark draft, then the instruction
//! conditioned on it, with joint training of both tasks and multi-turn
//! refinement at inference.

pub mod model;
pub mod stages;
pub mod train;

pub use model::{EpisodeExample, EpisodeVisual, Instructor, InstructorConfig};
pub use stages::{merge_drafts, Turn};
pub use train::{
    draft_tokens, instruction_prefix, instruction_sequence, joint_loss, landmark_prefix, landmark_sequence, task_loss,
    train, training_step, warm_up, warm_up_corpus, Sequence, Task, TrainConfig, WarmUpConfig, MAX_DRAFT,
};
