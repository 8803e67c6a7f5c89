//! Expert prompt selection: instruction-aware pooling, the prompt pool and
//! its auxiliary losses.

pub mod pool;
pub mod pooler;
pub mod select;

pub use pool::{correlation_loss, prompt_keys, PoolConfig, PoolMeta, PromptPool, POOL_PARAM};
pub use pooler::{
    instruction_aware_features, pooler_instruction, InstructionPooler, PoolerConfig, POOLER_INSTRUCTIONS,
};
pub use select::{cosine_similarities, key_matching_loss, select_experts, ExpertSelection};
