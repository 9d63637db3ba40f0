use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Prepared;
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::metrics::dsc;
use crate::optim::{AdamW, AdamWConfig, ParamHyper};
use crate::params::{ParamGrads, ParamStore};
use crate::phonology::NUM_ARTICULATORS;
use crate::segmodel::{masks_to_target, predict_masks, seg_loss, AudioIn, Mode, SegModel};
use crate::tensor::Tensor;

/// Deterministic per-(seed, epoch, item) random stream.
pub(crate) fn item_rng(seed: u64, epoch: usize, item: usize) -> ChaCha8Rng {
    let s = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(item as u64);
    ChaCha8Rng::seed_from_u64(s)
}

#[derive(Clone, Debug)]
pub struct SegTrainSpec {
    pub with_prior: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Inference mode used for validation Dice.
    pub val_mode: Mode,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Macro validation DSC ×100.
    pub val_dsc: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub struct SegTrainOutcome {
    /// Parameters at the best validation epoch.
    pub store: ParamStore<f32>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub log: Vec<SegEpochLog>,
    /// Names of parameters that received optimizer state.
    pub optimized: Vec<String>,
}

/// Audio inputs per frame: cached encoder features when the audio encoder is
/// frozen, raw waveforms otherwise, nothing for models without audio.
pub(crate) fn audio_inputs(
    model: &SegModel,
    store: &ParamStore<f32>,
    data: &Prepared,
    idx: &[usize],
    cache: bool,
) -> Result<BTreeMap<usize, AudioIn<f32>>> {
    if model.audio.is_none() {
        return Ok(idx.iter().map(|&i| (i, AudioIn::Absent)).collect());
    }
    idx.par_iter()
        .map(|&i| {
            let a = if cache {
                AudioIn::Features(model.audio_features(store, &data.samples[i].audio)?)
            } else {
                AudioIn::Waveform(data.waveform(i))
            };
            Ok((i, a))
        })
        .collect()
}

/// Macro DSC ×100 (per-class means over defined frames, then class mean).
pub fn validation_dsc(
    model: &SegModel,
    store: &ParamStore<f32>,
    data: &Prepared,
    idx: &[usize],
    audio: &BTreeMap<usize, AudioIn<f32>>,
    with_prior: bool,
    mode: Mode,
) -> Result<f64> {
    let per_frame: Vec<[Option<f64>; NUM_ARTICULATORS]> = idx
        .par_iter()
        .map(|&i| {
            let a = if mode == Mode::InferImageOnly { AudioIn::Absent } else { audio[&i].clone() };
            let mut input = data.input(i, with_prior, a)?;
            if mode == Mode::InferImageOnly {
                input.prior = None;
                input.phon = None;
            }
            let logits = model.infer(store, &input, mode)?;
            let pred = predict_masks(&logits);
            let gt = &data.samples[i].masks;
            let mut out = [None; NUM_ARTICULATORS];
            for c in 0..NUM_ARTICULATORS {
                out[c] = dsc(&pred[c], &gt[c])?;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut classes = Vec::new();
    for c in 0..NUM_ARTICULATORS {
        let v: Vec<f64> = per_frame.iter().filter_map(|f| f[c]).collect();
        if !v.is_empty() {
            classes.push(v.iter().sum::<f64>() / v.len() as f64);
        }
    }
    if classes.is_empty() {
        return Err(Error::Evaluation("validation frames have no defined DSC".into()));
    }
    Ok(100.0 * classes.iter().sum::<f64>() / classes.len() as f64)
}

/// Supervised segmentation training with AdamW and early stopping on
/// validation Dice. Only parameters accepted by `trainable` are updated.
pub fn train_segmentation(
    model: &SegModel,
    mut store: ParamStore<f32>,
    trainable: &dyn Fn(&str) -> bool,
    data: &Prepared,
    spec: &SegTrainSpec,
    adam: AdamWConfig,
    audio_frozen: bool,
) -> Result<SegTrainOutcome> {
    let train = data.indices(crate::dataio::Role::Train);
    let val = data.indices(crate::dataio::Role::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("segmentation training needs training and validation frames".into()));
    }
    let mask: Vec<bool> = store.iter().map(|(_, n, _)| trainable(n)).collect();
    let hyper: BTreeMap<_, _> = store
        .iter()
        .filter(|(_, n, _)| trainable(n))
        .map(|(id, _, _)| (id, ParamHyper { lr: spec.lr, weight_decay: spec.weight_decay }))
        .collect();
    let mut all = train.clone();
    all.extend(&val);
    let audio = audio_inputs(model, &store, data, &all, audio_frozen)?;
    let targets: BTreeMap<usize, Tensor<f32>> =
        train.iter().map(|&i| (i, masks_to_target(&data.samples[i].masks))).collect();

    let mut opt = AdamW::new(adam);
    let mut order = train.clone();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    for epoch in 1..=spec.max_epochs {
        let t0 = Instant::now();
        order.shuffle(&mut item_rng(spec.seed, epoch, usize::MAX));
        let mut loss_sum = 0.0;
        for batch in order.chunks(spec.batch_size) {
            let results: Vec<(f64, ParamGrads<f32>)> = batch
                .par_iter()
                .map(|&i| {
                    let input = data.input(i, spec.with_prior, audio[&i].clone())?;
                    let mut rng = item_rng(spec.seed, epoch, i);
                    let mut g = Graph::new(&store, &mask);
                    let out = model.forward(&mut g, &input, Mode::Train, Some(&mut rng))?;
                    let loss = seg_loss(&mut g, out.logits, &targets[&i])?;
                    let value = g.value(loss).data()[0] as f64;
                    Ok((value, g.backward(loss).into_params()))
                })
                .collect::<Result<_>>()?;
            let mut grads = ParamGrads::new(store.len());
            for (l, gr) in &results {
                if !l.is_finite() {
                    return Err(Error::Diverged { epoch, detail: format!("segmentation loss {l}") });
                }
                loss_sum += l;
                grads.merge(gr);
            }
            grads.scale(1.0 / batch.len() as f32);
            opt.step(&mut store, &grads, &hyper);
        }
        let val_dsc = validation_dsc(model, &store, data, &val, &audio, spec.with_prior, spec.val_mode)?;
        log.push(SegEpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_dsc,
            lr: spec.lr,
            seconds: t0.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: loss {:.4} val dsc {val_dsc:.2}", loss_sum / train.len() as f64);
        if best.as_ref().map_or(true, |(_, b, _)| val_dsc > *b) {
            best = Some((epoch, val_dsc, store.clone()));
        }
        let best_epoch = best.as_ref().map(|b| b.0).unwrap_or(epoch);
        if epoch - best_epoch >= spec.patience {
            break;
        }
    }
    let (best_epoch, best_val_dsc, best_store) = best.expect("at least one epoch");
    let optimized = opt.state_ids().into_iter().map(|id| store.name(id).to_string()).collect();
    Ok(SegTrainOutcome { store: best_store, best_epoch, best_val_dsc, log, optimized })
}
