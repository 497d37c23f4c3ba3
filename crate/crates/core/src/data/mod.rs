//! Audio ingestion, manifests and the synthetic corpus generator.

pub mod manifest;
pub mod synth;
pub mod wav;

pub use manifest::{make_dataset, DatasetConfig, Manifest, ManifestRecord};
pub use synth::{synth_utterance, Recipe, RecipeBook, SynthSpec, SynthUtterance};
pub use wav::{load_wav, write_wav, AudioClip, WavEncoding};
