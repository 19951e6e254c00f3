//! On-disk formats, configuration and synthetic data.

mod config;
mod manifest;
mod recording;
mod synth;

pub use config::{ModelOverrides, RunConfig, RunConfigFile, TrainOverrides};
pub use manifest::{Manifest, TrialEntry};
pub use recording::{
    encode_recording, read_header, read_recording, write_recording, RecordingFile, RecordingHeader, HEADER_LEN,
    MAGIC, VERSION,
};
pub use synth::{gen_synthetic, synth_recordings, SynthSpec};
