//! On-disk formats and dataset loading.

pub mod manifest;
pub mod synth;
pub mod tensor_file;

pub use manifest::{load_dataset, Dataset, Manifest, Sample, Split};
pub use synth::{synth_dataset, synth_generate, SynthConfig};
pub use tensor_file::{read_tensor, write_tensor};
