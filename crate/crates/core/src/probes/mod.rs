//! Downstream heads and their metrics: multi-speaker ASR and the
//! diarization probe.

pub mod asr;
pub mod decode;
pub mod diar;
pub mod metrics;

pub use metrics::{der, pit_wer, wer, ActivityMatrix, DerReport, PitWer};
