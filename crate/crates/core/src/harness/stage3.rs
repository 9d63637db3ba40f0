use super::data::Prepared;
use super::train::{item_rng, train_segmentation, SegEpochLog, SegTrainSpec};
use crate::checkpoint::{config_hash, Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::segmodel::{inflate_patch_embed, FusionKind, Mode, SegModel, SegModelConfig};

pub struct Stage3Outcome {
    pub model: SegModel,
    pub checkpoint: Checkpoint,
    pub log: Vec<SegEpochLog>,
    pub best_epoch: usize,
    /// Parameter names that were given optimizer state.
    pub optimized: Vec<String>,
}

/// Builds a segmentation model whose encoders and fusion come from a stage-2
/// checkpoint (prior channels of the patch embedding start at zero).
pub fn init_from_stage2(
    cfg: &RunConfig,
    seg_cfg: &SegModelConfig,
    stage2: &Checkpoint,
) -> Result<(SegModel, ParamStore<f32>)> {
    let expected = config_hash(&cfg.encoder_config(1));
    if stage2.meta.kind != "stage2" || stage2.meta.encoder_hash != expected {
        return Err(Error::Checkpoint(format!(
            "stage-2 checkpoint config hash {} ({}) does not match this configuration ({expected})",
            stage2.meta.encoder_hash, stage2.meta.kind
        )));
    }
    let mut store = ParamStore::<f32>::new();
    let model = SegModel::new(&mut store, seg_cfg, &mut item_rng(cfg.seed, 0, 3))?;
    inflate_patch_embed(&stage2.to_store()?, &mut store)?;
    Ok((model, store))
}

/// Trains decoder, null bank, prior patch-embedding slice and head on top of
/// the frozen stage-2 encoders; early stopping on image-only validation Dice.
pub fn train_stage3(cfg: &RunConfig, data: &Prepared, stage2: &Checkpoint) -> Result<Stage3Outcome> {
    let seg_cfg = cfg.seg_config(true, FusionKind::CrossAttention);
    let (model, store) = init_from_stage2(cfg, &seg_cfg, stage2)?;
    let spec = SegTrainSpec {
        with_prior: true,
        lr: cfg.stage3.lr,
        weight_decay: cfg.stage3.weight_decay,
        max_epochs: cfg.stage3_max_epochs(),
        patience: cfg.stage3.patience,
        batch_size: cfg.stage3.batch_size,
        val_mode: Mode::InferImageOnly,
        seed: cfg.seed ^ 0x53,
    };
    let out = train_segmentation(&model, store, &SegModel::is_stage3_trainable, data, &spec, cfg.optimizer, true)?;
    let meta = CheckpointMeta {
        version: FORMAT_VERSION,
        kind: "stage3".into(),
        config: serde_json::to_value(&seg_cfg).expect("config serializes"),
        encoder_hash: stage2.meta.encoder_hash.clone(),
        parent: Some(stage2.hash()),
        epoch: out.best_epoch,
        score: out.best_val_dsc,
    };
    Ok(Stage3Outcome {
        model,
        checkpoint: Checkpoint::from_store(meta, &out.store),
        log: out.log,
        best_epoch: out.best_epoch,
        optimized: out.optimized,
    })
}

/// Rebuilds a model from any segmentation checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(SegModel, ParamStore<f32>)> {
    let seg_cfg: SegModelConfig = serde_json::from_value(ckpt.meta.config.clone())
        .map_err(|e| Error::Checkpoint(format!("checkpoint `{}` holds no segmentation config: {e}", ckpt.meta.kind)))?;
    let mut store = ParamStore::<f32>::new();
    let model = SegModel::new(&mut store, &seg_cfg, &mut item_rng(0, 0, 0))?;
    ckpt.load_into(&mut store)?;
    Ok((model, store))
}
