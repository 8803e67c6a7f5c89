//! Instruction assembly, embedding splicing, the decoder, its losses and
//! decoding strategies.

pub mod decode;
pub mod decoder;
pub mod loss;
pub mod splice;
pub mod template;

pub use decode::{argmax, nucleus, probabilities, DecodeConfig, Generation, Sampler, Sampling};
pub use decoder::{AdapterConfig, Decoder, DecoderConfig};
pub use loss::{language_modeling_loss, sequence_log_prob, total_loss, total_loss_value, LossWeights};
pub use splice::{plan_splice, splice, ExpertBlock, Segment, SplicePlan};
pub use template::{
    assemble_distractor_instruction, assemble_instruction, fill_template, GenerationMode, MultimodalInstruction,
    DISTRACTOR_TEMPLATE, FEEDBACK_TEMPLATE,
};
