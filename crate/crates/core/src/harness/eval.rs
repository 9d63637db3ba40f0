use rayon::prelude::*;

use super::data::Prepared;
use crate::error::{Error, Result};
use crate::metrics::{measure_latency, AsdKind, LatencyStats, MetricRecord};
use crate::params::ParamStore;
use crate::segmodel::{predict_masks, AudioIn, FrameInput, Mode, SegModel};

/// Inference input of frame `i` for an evaluation mode. Image-only inputs
/// carry neither audio, prior nor phonology.
pub fn eval_input(model: &SegModel, data: &Prepared, i: usize, mode: Mode) -> Result<FrameInput<f32>> {
    match mode {
        Mode::InferImageOnly => Ok(FrameInput { image: data.image(i), prior: None, audio: AudioIn::Absent, phon: None }),
        Mode::InferFull => {
            let audio = if model.audio.is_some() {
                if data.samples[i].audio.iter().all(|&v| v == 0.0) {
                    return Err(Error::Evaluation(format!(
                        "frame {} has no audio for full-input inference",
                        data.samples[i].frame_id()
                    )));
                }
                AudioIn::Waveform(data.waveform(i))
            } else {
                AudioIn::Absent
            };
            data.input(i, model.cfg.uses_prior(), audio)
        }
        Mode::Train => Err(Error::Contract("evaluation cannot use train mode".into())),
    }
}

/// Per-frame metrics over `idx` in the given mode, in index order.
pub fn evaluate_frames(
    model: &SegModel,
    store: &ParamStore<f32>,
    data: &Prepared,
    idx: &[usize],
    mode: Mode,
    asd: AsdKind,
) -> Result<Vec<MetricRecord>> {
    if idx.is_empty() {
        return Err(Error::Evaluation("no frames to evaluate".into()));
    }
    idx.par_iter()
        .map(|&i| {
            let s = &data.samples[i];
            if s.masks.iter().any(|m| m.shape() != (data.height, data.width)) {
                return Err(Error::Evaluation(format!("frame {} lacks ground-truth masks", s.frame_id())));
            }
            let logits = model.infer(store, &eval_input(model, data, i, mode)?, mode)?;
            let pred = predict_masks(&logits);
            MetricRecord::compute_with(s.frame_id(), data.split.tag, mode.tag(), &pred, &s.masks, data.spacing, asd)
        })
        .collect()
}

/// Median milliseconds per batch of `frames` inferences (cycling through `idx`).
pub fn model_latency(
    model: &SegModel,
    store: &ParamStore<f32>,
    data: &Prepared,
    idx: &[usize],
    mode: Mode,
    frames: usize,
    reps: usize,
) -> Result<LatencyStats> {
    if idx.is_empty() {
        return Err(Error::Evaluation("no frames to time".into()));
    }
    let inputs: Vec<FrameInput<f32>> = (0..frames)
        .map(|k| eval_input(model, data, idx[k % idx.len()], mode))
        .collect::<Result<_>>()?;
    measure_latency(
        || {
            for inp in &inputs {
                model.infer(store, inp, mode)?;
            }
            Ok(())
        },
        reps,
        1,
    )
}
