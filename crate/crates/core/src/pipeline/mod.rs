//! Data sampling, the small backbone, Adam, and the two training stages.

mod data;
mod model;
mod optim;
mod train;

pub use data::{sample_batch, sample_batch_with, BatchPlan, DomainBatch, DomainDataset, Role};
pub use model::{BackboneSpec, Block, Classifier, ForwardOut, Mdif, MdifBinding, ModelVars, NormKind, ReidModel, SHARED_BRANCH};
pub use optim::{adam_step, step_decay, AdamConfig, OptimizerState};
pub use train::{
    adapt_stage, batch_loss, class_counts, pretrain_stage, prepare_adaptation, train_step, AdaptOptions, EpochLog, MdifInit, StageConfig, StepLog, TrainLog,
};

/// Mixes a base seed with stream coordinates (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut z = base;
    for v in [stream, a, b] {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(v);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}
