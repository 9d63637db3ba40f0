//! Corpus generation, preprocessing, evaluation splits and on-disk layout.

mod preprocess;
mod split;
mod store;
mod synth;

pub use preprocess::{audio_context, preprocess_frame, resize_bilinear, window_len, SubjectStats};
pub use split::{make_splits, Role, SplitSpec, SplitTag};
pub use store::{load_corpus, load_corpus_with, manifest_hash, write_corpus, MANIFEST_FILE};
pub use synth::{
    generate_corpus, phoneme_formants, target_pose, Corpus, CorpusMeta, Pose, RawFrame,
    RawUtterance, SynthConfig, SyntheticSpeaker,
};

use crate::mask::BinaryMask;
use crate::phonology::NUM_ARTICULATORS;
use crate::tensor::Tensor;

/// One preprocessed, aligned training/evaluation record.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `[H, W]` intensities in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Three-window audio context.
    pub audio: Vec<f32>,
    pub phoneme: String,
    /// Ground truth in articulator order.
    pub masks: [BinaryMask; NUM_ARTICULATORS],
    pub subject_id: String,
    pub task_id: String,
    pub frame_index: usize,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// `subject/task/frame` identifier.
    pub fn frame_id(&self) -> String {
        format!("{}/{}/{:04}", self.subject_id, self.task_id, self.frame_index)
    }
}
