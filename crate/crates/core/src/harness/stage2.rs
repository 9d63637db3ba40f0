use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::Prepared;
use super::train::item_rng;
use crate::autograd::Graph;
use crate::checkpoint::{config_hash, Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::config::RunConfig;
use crate::contrastive::{dual_level_loss, stage2_schedule, ContrastiveBatch, ContrastiveLossConfig};
use crate::dataio::Role;
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::optim::{AdamW, ParamHyper};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2LogRow {
    /// `bootstrap` or `schedule`.
    pub phase: String,
    pub epoch: usize,
    pub g2g: f64,
    pub l2g: f64,
    pub total: f64,
    pub val_total: f64,
    pub head_lr: f64,
    pub encoder_lr: f64,
    /// Number of unfrozen visual layers.
    pub visual_layers: usize,
    pub seconds: f64,
}

pub struct Stage2Outcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<Stage2LogRow>,
    /// Schedule epoch of the lowest validation loss.
    pub best_epoch: usize,
}

/// Contiguous batches of at least two pairs; a trailing singleton joins the previous batch.
fn batches(idx: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = idx.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out.retain(|b| b.len() >= 2);
    out
}

struct BatchLoss {
    g2g: f64,
    l2g: f64,
    total: f64,
}

fn batch_loss(
    enc: &DualEncoder,
    store: &ParamStore<f32>,
    mask: &[bool],
    data: &Prepared,
    batch: &[usize],
    loss_cfg: &ContrastiveLossConfig,
    backward: bool,
) -> Result<(BatchLoss, Option<crate::params::ParamGrads<f32>>)> {
    let mut g = if backward { Graph::new(store, mask) } else { Graph::inference(store) };
    let pairs: Vec<_> = batch
        .iter()
        .map(|&i| (g.constant(data.image(i)), g.constant(data.waveform(i))))
        .collect();
    let e = enc.embed(&mut g, &pairs)?;
    let cb = ContrastiveBatch { z_image: e.z_image, z_audio: e.z_audio, z_patch_mean: e.z_patch };
    let l = dual_level_loss(&mut g, &cb, loss_cfg)?;
    let v = |x| g.value(x).data()[0] as f64;
    let out = BatchLoss { g2g: v(l.g2g), l2g: v(l.l2g), total: v(l.total) };
    let grads = backward.then(|| g.backward(l.total).into_params());
    Ok((out, grads))
}

fn mean_loss(
    enc: &DualEncoder,
    store: &ParamStore<f32>,
    data: &Prepared,
    idx: &[usize],
    cfg: &RunConfig,
) -> Result<f64> {
    let bs = batches(idx, cfg.stage2.batch_size);
    let mut sum = 0.0;
    let mut n = 0;
    for b in &bs {
        let (l, _) = batch_loss(enc, store, &[], data, b, &cfg.stage2.loss, false)?;
        sum += l.total * b.len() as f64;
        n += b.len();
    }
    Ok(sum / n as f64)
}

/// Contrastive image-audio pretraining of the 1-channel encoders.
///
/// A bootstrap phase trains everything from random initialization, then the
/// staged freeze schedule runs for the scaled epoch count. The checkpoint
/// holds the schedule epoch with the lowest validation loss.
pub fn train_stage2(cfg: &RunConfig, data: &Prepared) -> Result<Stage2Outcome> {
    let train = data.indices(Role::Train);
    let val = data.indices(Role::Val);
    if batches(&train, cfg.stage2.batch_size).is_empty() || batches(&val, cfg.stage2.batch_size).is_empty() {
        return Err(Error::Config("stage 2 needs at least two training and two validation frames".into()));
    }
    let enc_cfg = cfg.encoder_config(1);
    let mut store = ParamStore::<f32>::new();
    let mut init_rng = item_rng(cfg.seed, 0, 2);
    let enc = DualEncoder::new(&mut store, &enc_cfg, &mut init_rng)?;
    let depth = enc_cfg.visual.depth;
    let wd = cfg.stage2.schedule.weight_decay;
    let sched_cfg = cfg.stage2_schedule();

    let mut opt = AdamW::new(cfg.optimizer);
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut order = train.clone();
    let phases = (1..=cfg.stage2.bootstrap_epochs)
        .map(|e| ("bootstrap", e))
        .chain((1..=sched_cfg.epochs).map(|e| ("schedule", e)));
    for (k, (phase, epoch)) in phases.enumerate() {
        let t0 = Instant::now();
        let (mask, hyper, head_lr, encoder_lr, layers): (Vec<bool>, BTreeMap<ParamId, ParamHyper>, f64, f64, usize) =
            if phase == "bootstrap" {
                let lr = cfg.stage2.bootstrap_lr;
                let hyper = store.ids().map(|id| (id, ParamHyper { lr, weight_decay: wd })).collect();
                (vec![true; store.len()], hyper, lr, lr, depth)
            } else {
                let step = stage2_schedule(epoch, depth, &sched_cfg)?;
                let (mask, hyper) = step.apply(&store, wd, depth);
                (mask, hyper, step.head_lr, step.encoder_lr, step.visual_layers.len())
            };
        order.shuffle(&mut item_rng(cfg.seed ^ 0x5742, k + 1, usize::MAX));
        let (mut g2g, mut l2g, mut total, mut n) = (0.0, 0.0, 0.0, 0usize);
        for b in batches(&order, cfg.stage2.batch_size) {
            let (l, grads) = batch_loss(&enc, &store, &mask, data, &b, &cfg.stage2.loss, true)?;
            if !l.total.is_finite() {
                return Err(Error::Diverged { epoch, detail: format!("{phase} contrastive loss {}", l.total) });
            }
            let w = b.len() as f64;
            g2g += l.g2g * w;
            l2g += l.l2g * w;
            total += l.total * w;
            n += b.len();
            opt.step(&mut store, &grads.expect("gradients"), &hyper);
        }
        let val_total = mean_loss(&enc, &store, data, &val, cfg)?;
        if !val_total.is_finite() {
            return Err(Error::Diverged { epoch, detail: format!("{phase} validation loss {val_total}") });
        }
        let nf = n as f64;
        log.push(Stage2LogRow {
            phase: phase.to_string(),
            epoch,
            g2g: g2g / nf,
            l2g: l2g / nf,
            total: total / nf,
            val_total,
            head_lr,
            encoder_lr,
            visual_layers: layers,
            seconds: t0.elapsed().as_secs_f64(),
        });
        log::debug!("stage2 {phase} {epoch}: train {:.4} val {val_total:.4}", total / nf);
        if phase == "schedule" && best.as_ref().map_or(true, |(_, b, _)| val_total < *b) {
            best = Some((epoch, val_total, store.clone()));
        }
    }
    let (best_epoch, score, best_store) = best.expect("schedule has at least one epoch");
    let meta = CheckpointMeta {
        version: FORMAT_VERSION,
        kind: "stage2".into(),
        config: serde_json::to_value(&enc_cfg).expect("config serializes"),
        encoder_hash: config_hash(&enc_cfg),
        parent: None,
        epoch: best_epoch,
        score,
    };
    Ok(Stage2Outcome { checkpoint: Checkpoint::from_store(meta, &best_store), log, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batching_never_leaves_singletons() {
        let idx: Vec<usize> = (0..9).collect();
        let b = batches(&idx, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        assert!(batches(&[1], 4).is_empty());
        assert_eq!(batches(&[1, 2], 4).len(), 1);
    }
}
