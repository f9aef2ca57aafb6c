//! MFCC front end: WAV loading, framing, power spectrum, mel filterbank,
//! log compression and DCT, producing the fixed 1000-value audio feature
//! vector consumed by the fusion models.

mod frames;
mod mel;
mod mfcc;
mod spectrum;
pub mod store;
mod wav;

pub use frames::{frame_count, frame_samples, frame_signal, hamming_window, FrameConfig, FrameMatrix};
pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, MelFilterBank};
pub use mfcc::{dct_matrix, extract_features, mfcc_features, FeatureVector, MfccExtractor};
pub use spectrum::{power_spectrum, Spectrogram};
pub use wav::{load_wav, write_wav, AudioClip};

pub const SAMPLE_RATE: u32 = 16_000;
/// One second at [`SAMPLE_RATE`].
pub const CLIP_LEN: usize = 16_000;
/// 25 ms analysis window.
pub const WINDOW_LEN: usize = 400;
/// 10 ms hop between window starts.
pub const HOP_LEN: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const N_MELS: usize = 128;
pub const FEATURE_DIM: usize = 1000;
/// Floor added before the logarithm so silent frames stay finite.
pub const LOG_FLOOR: f64 = 1e-10;
