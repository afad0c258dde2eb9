//! Staged training: tokenizer reconstruction, continued pretraining on
//! hybrid sequences, and answer-only instruction tuning.

mod backbone;
mod balance;
mod finetune;
mod losses;
mod sequence;
mod stage1;
mod stage2;

pub use backbone::{BackboneConfig, DecoderBlock, ToyBackbone, LORA_TARGETS};
pub use balance::{inverse_frequency_weights, BalancedSampler};
pub use finetune::{cpt_setup, sft_setup, FinetunePlan, LoraConfig, PlanGroup, SFT_REFINER_LR_SCALE};
pub use losses::{
    cpt_total, loss_cpt, loss_dsha, loss_ntp, loss_sft, masked_nll, NtpLosses, DEFAULT_LAMBDA_ORTH,
};
pub use sequence::{Decoded, HybridSequence, Spans, TextTokenizer, BOS, EOS, RESERVED, SEP, UNK};
pub use stage1::{spectral_rows, MlpDecoder, Stage1Config, Stage1Model, Stage1Out, ENCODER_PREFIX, QUANTIZER_PREFIX};
pub use stage2::{
    CptLosses, Stage2Config, Stage2Input, Stage2Model, Stage2Out, BACKBONE_PREFIX, REFINER_PREFIX,
};
