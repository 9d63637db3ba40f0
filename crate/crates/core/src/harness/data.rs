use std::collections::BTreeMap;

use crate::dataio::{make_splits, Corpus, Role, SegSample, SplitSpec, SplitTag};
use crate::error::{Error, Result};
use crate::metrics::SpacingInfo;
use crate::phonology::{PhonemeInventory, PhonologicalVector};
use crate::priorgen::{build_prior_table, render_prior, SubjectPriorTable};
use crate::segmodel::{AudioIn, FrameInput};
use crate::tensor::Tensor;

/// Preprocessed samples with their split roles, phonology and priors.
pub struct Prepared {
    pub samples: Vec<SegSample>,
    pub phon: Vec<PhonologicalVector>,
    pub split: SplitSpec,
    pub inventory: PhonemeInventory,
    /// Per-subject tables built from training-role frames only.
    pub priors: BTreeMap<String, SubjectPriorTable>,
    pub spacing: SpacingInfo,
    pub height: usize,
    pub width: usize,
}

impl Prepared {
    pub fn new(corpus: &Corpus, inventory: PhonemeInventory, tag: SplitTag, seed: u64) -> Result<Self> {
        let samples = corpus.samples()?;
        let first = samples.first().ok_or_else(|| Error::Config("corpus has no frames".into()))?;
        let (height, width) = (first.height(), first.width());
        let split = make_splits(&corpus.meta.subjects, &corpus.meta.tasks, tag, seed)?;
        let phon = samples
            .iter()
            .map(|s| inventory.encode_phoneme(&s.phoneme))
            .collect::<Result<Vec<_>>>()?;
        let mut priors = BTreeMap::new();
        for subject in &split.train_subjects {
            let own: Vec<&SegSample> = samples
                .iter()
                .filter(|s| &s.subject_id == subject && split.role_of(subject, &s.task_id) == Some(Role::Train))
                .collect();
            if !own.is_empty() {
                priors.insert(subject.clone(), build_prior_table(&own, &inventory)?);
            }
        }
        let cfg = &corpus.meta.config;
        let spacing = SpacingInfo::from_resize(cfg.native_spacing_mm, cfg.native_size, height)?;
        Ok(Self { samples, phon, split, inventory, priors, spacing, height, width })
    }

    pub fn indices(&self, role: Role) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| {
                let s = &self.samples[i];
                self.split.role_of(&s.subject_id, &s.task_id) == Some(role)
            })
            .collect()
    }

    /// The subject's own prior table; speakers without training frames have none
    /// and receive the neutral prior.
    pub fn table_for(&self, subject: &str) -> Option<&SubjectPriorTable> {
        self.priors.get(subject)
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        let s = &self.samples[i];
        s.image.clone().reshape(&[1, self.height * self.width]).expect("image size")
    }

    pub fn waveform(&self, i: usize) -> Tensor<f32> {
        let a = &self.samples[i].audio;
        Tensor::from_vec(&[1, a.len()], a.clone()).expect("audio length")
    }

    /// Model input for frame `i` with every modality the flags allow.
    pub fn input(&self, i: usize, with_prior: bool, audio: AudioIn<f32>) -> Result<FrameInput<f32>> {
        let s = &self.samples[i];
        let prior = if with_prior {
            match self.table_for(&s.subject_id) {
                Some(t) => Some(render_prior(&self.phon[i], t, &self.inventory, self.height, self.width)?),
                None => None,
            }
        } else {
            None
        };
        Ok(FrameInput { image: self.image(i), prior, audio, phon: Some(self.phon[i]) })
    }
}
