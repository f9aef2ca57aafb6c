//! Corpus loading and construction of the paired audio-image dataset:
//! matched (command) pairs, mismatched (anomaly) pairs, and stratified folds.

mod aid;
mod folds;
mod images;
mod speech;
pub mod synth;

pub use aid::{build_aid, generate_mismatch, images_by_class, AidConfig, LabeledPair, PairedDataset};
pub use folds::{split_folds, split_labels, FoldAssignment};
pub use images::{
    crop_and_resize, default_class_map, gtsrb_images_dir, load_sign_images, ImageSample, IMAGES_PER_CLASS,
    IMAGE_SIDE,
};
pub use speech::{feature_records, load_speech_corpus, SpeechClip};
