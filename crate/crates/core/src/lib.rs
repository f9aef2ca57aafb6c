//! Audio-visual fusion classifiers that flag voice commands contradicted by
//! the camera's view of the road.
//!
//! A spoken command (MFCC features) and a traffic-sign image are fed to one
//! of six fusion networks that predicts either the agreed command
//! (`go`, `right`, `left`, `stop`) or `anomaly` when the two modalities
//! disagree, which is how an injected inaudible command shows up.

pub mod audio_dsp;
pub mod classes;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod fsutil;
pub mod models;
pub mod fusion_ops;
pub mod nn;
pub mod tensor;
pub mod training;

pub use classes::{CommandClass, Target};
pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::Tensor;
