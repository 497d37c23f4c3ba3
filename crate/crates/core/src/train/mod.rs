//! Training, pretraining, fine-tuning, evaluation and inference pipelines.

pub mod config;
pub mod corpus;
pub mod eval;
pub mod optim;
pub mod pretrain;
pub mod state;
pub mod supervised;

pub use config::{AdamConfig, FinetuneConfig, PretrainConfig, ScheduleConfig, TrainConfig};
pub use corpus::{BatchSampler, Corpus, Utterance};
pub use eval::{evaluate_corpus, infer, write_eval, DecodedPhone, EvalOutput, Inference, UtteranceResult};
pub use optim::{clip_global_norm, AdamW, GroupRates, OneCycle};
pub use pretrain::{pretrain_ssl, PretrainOutcome, PretrainRecord};
pub use state::{codebook_from_checkpoint, RunKind, RunState};
pub use supervised::{finetune, finetune_from_scratch, train_supervised, StepRecord, TrainOutcome, ValidationRecord};
