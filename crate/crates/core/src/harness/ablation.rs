use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::Prepared;
use super::eval::{evaluate_frames, model_latency};
use super::rundir::RunDir;
use super::stage2::{train_stage2, Stage2Outcome};
use super::stage3::{init_from_stage2, train_stage3};
use super::train::{item_rng, train_segmentation, SegEpochLog, SegTrainSpec};
use crate::checkpoint::{config_hash, Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::config::RunConfig;
use crate::dataio::Role;
use crate::error::{Error, Result};
use crate::metrics::{summarize, write_records, MetricRecord, Summary};
use crate::params::ParamStore;
use crate::segmodel::{FusionKind, Mode, SegModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RowKind {
    ImageOnly,
    IaConcat,
    IapConcat,
    BboxPrior,
    Pretrain,
    FullInput,
    Ours,
}

impl RowKind {
    pub const ALL: [RowKind; 7] = [
        RowKind::ImageOnly,
        RowKind::IaConcat,
        RowKind::IapConcat,
        RowKind::BboxPrior,
        RowKind::Pretrain,
        RowKind::FullInput,
        RowKind::Ours,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RowKind::ImageOnly => "image-only",
            RowKind::IaConcat => "IA-concat",
            RowKind::IapConcat => "IAP-concat",
            RowKind::BboxPrior => "+bbox-prior",
            RowKind::Pretrain => "+pretrain",
            RowKind::FullInput => "w/-full-input",
            RowKind::Ours => "ours",
        }
    }

    /// File-name friendly form of [`RowKind::name`].
    pub fn slug(self) -> &'static str {
        match self {
            RowKind::ImageOnly => "image_only",
            RowKind::IaConcat => "ia_concat",
            RowKind::IapConcat => "iap_concat",
            RowKind::BboxPrior => "bbox_prior",
            RowKind::Pretrain => "pretrain",
            RowKind::FullInput => "full_input",
            RowKind::Ours => "ours",
        }
    }

    pub fn flags(self) -> RowFlags {
        let f = |audio, phon, prior, pretrain, cross_attention, eval_mode| RowFlags {
            audio,
            phon,
            prior,
            pretrain,
            cross_attention,
            eval_mode,
        };
        match self {
            RowKind::ImageOnly => f(false, false, false, false, false, Mode::InferFull),
            RowKind::IaConcat => f(true, false, false, false, false, Mode::InferFull),
            RowKind::IapConcat => f(true, true, false, false, false, Mode::InferFull),
            RowKind::BboxPrior => f(true, true, true, false, false, Mode::InferFull),
            RowKind::Pretrain => f(true, true, true, true, false, Mode::InferFull),
            RowKind::FullInput => f(true, false, true, true, true, Mode::InferFull),
            RowKind::Ours => f(true, false, true, true, true, Mode::InferImageOnly),
        }
    }

    fn fusion(self) -> FusionKind {
        let fl = self.flags();
        if fl.cross_attention {
            FusionKind::CrossAttention
        } else if fl.audio || fl.phon {
            FusionKind::Concat { audio: fl.audio, phon: fl.phon }
        } else {
            FusionKind::None
        }
    }
}

impl FromStr for RowKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        RowKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s) || k.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation row `{s}`")))
    }
}

/// Which stages and inputs a row uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowFlags {
    pub audio: bool,
    pub phon: bool,
    /// Bounding-box prior channels.
    pub prior: bool,
    /// Encoders initialized from contrastive pretraining and kept frozen.
    pub pretrain: bool,
    pub cross_attention: bool,
    pub eval_mode: Mode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub audio: bool,
    pub phon: bool,
    pub prior: bool,
    pub pretrain: bool,
    pub cross_attention: bool,
    pub eval_mode: String,
    pub dsc_mean: Option<f64>,
    pub dsc_std: Option<f64>,
    pub asd_mean: Option<f64>,
    pub asd_std: Option<f64>,
    pub params: Option<usize>,
    /// Median milliseconds per latency batch (50 frames by default).
    pub latency_ms: Option<f64>,
    pub best_epoch: Option<usize>,
    pub failure: Option<String>,
}

impl AblationRow {
    fn empty(kind: RowKind) -> Self {
        let f = kind.flags();
        Self {
            name: kind.name().into(),
            audio: f.audio,
            phon: f.phon,
            prior: f.prior,
            pretrain: f.pretrain,
            cross_attention: f.cross_attention,
            eval_mode: f.eval_mode.tag().into(),
            dsc_mean: None,
            dsc_std: None,
            asd_mean: None,
            asd_std: None,
            params: None,
            latency_ms: None,
            best_epoch: None,
            failure: None,
        }
    }
}

pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summaries: BTreeMap<RowKind, Summary>,
    pub records: BTreeMap<RowKind, Vec<MetricRecord>>,
    pub stage2: Option<Stage2Outcome>,
    pub train_logs: BTreeMap<RowKind, Vec<SegEpochLog>>,
    /// Stage-3 ("ours") checkpoint, when trained.
    pub ours: Option<Checkpoint>,
    pub optimized: Vec<String>,
}

impl AblationReport {
    pub fn row(&self, kind: RowKind) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == kind.name())
    }

    pub fn dsc(&self, kind: RowKind) -> Option<f64> {
        self.row(kind).and_then(|r| r.dsc_mean)
    }
}

struct Trained {
    model: SegModel,
    store: ParamStore<f32>,
    best_epoch: usize,
}

fn checkpoint_of(kind: RowKind, t: &Trained, parent: Option<String>) -> Checkpoint {
    let meta = CheckpointMeta {
        version: FORMAT_VERSION,
        kind: kind.slug().into(),
        config: serde_json::to_value(&t.model.cfg).expect("config serializes"),
        encoder_hash: config_hash(&t.model.cfg.encoder),
        parent,
        epoch: t.best_epoch,
        score: f64::NAN,
    };
    Checkpoint::from_store(meta, &t.store)
}

/// Trains one baseline row. Rows without pretraining train every parameter
/// from scratch; `+pretrain` keeps the stage-2 encoders frozen.
fn train_row(
    cfg: &RunConfig,
    data: &Prepared,
    kind: RowKind,
    stage2: Option<&Checkpoint>,
) -> Result<(Trained, Vec<SegEpochLog>)> {
    let fl = kind.flags();
    let seg_cfg = cfg.seg_config(fl.prior, kind.fusion());
    let (model, store) = if fl.pretrain {
        let ck = stage2.ok_or_else(|| Error::Contract("pretrained row without a stage-2 checkpoint".into()))?;
        init_from_stage2(cfg, &seg_cfg, ck)?
    } else {
        let mut store = ParamStore::<f32>::new();
        let model = SegModel::new(&mut store, &seg_cfg, &mut item_rng(cfg.seed, 0, 4 + kind as usize))?;
        (model, store)
    };
    let spec = SegTrainSpec {
        with_prior: fl.prior,
        lr: cfg.stage3.lr,
        weight_decay: cfg.stage3.weight_decay,
        max_epochs: cfg.stage3_max_epochs(),
        patience: cfg.stage3.patience,
        batch_size: cfg.stage3.batch_size,
        val_mode: fl.eval_mode,
        seed: cfg.seed ^ (0x100 + kind as u64),
    };
    let all = |_: &str| true;
    let trainable: &dyn Fn(&str) -> bool = if fl.pretrain { &SegModel::is_stage3_trainable } else { &all };
    let out = train_segmentation(&model, store, trainable, data, &spec, cfg.optimizer, fl.pretrain)?;
    Ok((Trained { model, store: out.store, best_epoch: out.best_epoch }, out.log))
}

fn evaluate_row(
    cfg: &RunConfig,
    data: &Prepared,
    kind: RowKind,
    t: &Trained,
    row: &mut AblationRow,
) -> Result<(Summary, Vec<MetricRecord>)> {
    let mode = kind.flags().eval_mode;
    let idx = data.indices(Role::Eval);
    let records = evaluate_frames(&t.model, &t.store, data, &idx, mode, cfg.eval.asd)?;
    let refs: Vec<&MetricRecord> = records.iter().collect();
    let s = summarize(&refs)?;
    let lat = model_latency(&t.model, &t.store, data, &idx, mode, cfg.eval.latency_frames, cfg.eval.latency_reps)?;
    row.dsc_mean = Some(s.dsc_mean);
    row.dsc_std = Some(s.dsc_std);
    row.asd_mean = Some(s.asd_mean);
    row.asd_std = Some(s.asd_std);
    row.params = Some(t.store.total_count());
    row.latency_ms = Some(lat.median_ms);
    row.best_epoch = Some(t.best_epoch);
    Ok((s, records))
}

/// Trains and evaluates the requested rows on the evaluation split of `data`.
/// A failing row is reported with its failure note; the others still run.
pub fn run_ablation(
    cfg: &RunConfig,
    data: &Prepared,
    kinds: &[RowKind],
    sink: Option<&RunDir>,
) -> Result<AblationReport> {
    let needs_stage2 = kinds.iter().any(|k| k.flags().pretrain);
    let needs_ours = kinds.iter().any(|k| k.flags().cross_attention);
    let mut report = AblationReport {
        rows: Vec::new(),
        summaries: BTreeMap::new(),
        records: BTreeMap::new(),
        stage2: None,
        train_logs: BTreeMap::new(),
        ours: None,
        optimized: Vec::new(),
    };
    let mut stage2_err = None;
    if needs_stage2 {
        match train_stage2(cfg, data) {
            Ok(s2) => {
                if let Some(dir) = sink {
                    dir.write_csv("stage2_log.csv", &s2.log)?;
                    s2.checkpoint.save(&dir.path("stage2.ckpt"))?;
                }
                report.stage2 = Some(s2);
            }
            Err(e) => stage2_err = Some(format!("stage 2 failed: {e}")),
        }
    }
    let stage2_ck = report.stage2.as_ref().map(|s| &s.checkpoint);

    let mut ours: Option<std::result::Result<Trained, String>> = None;
    if needs_ours {
        ours = Some(match (stage2_ck, &stage2_err) {
            (Some(ck), _) => match train_stage3(cfg, data, ck) {
                Ok(o) => {
                    if let Some(dir) = sink {
                        dir.write_csv("train_ours.csv", &o.log)?;
                        o.checkpoint.save(&dir.path("stage3.ckpt"))?;
                    }
                    report.train_logs.insert(RowKind::Ours, o.log.clone());
                    report.optimized = o.optimized.clone();
                    let mut store = ParamStore::<f32>::new();
                    let model = SegModel::new(&mut store, &o.model.cfg, &mut item_rng(0, 0, 0))?;
                    o.checkpoint.load_into(&mut store)?;
                    report.ours = Some(o.checkpoint);
                    Ok(Trained { model, store, best_epoch: o.best_epoch })
                }
                Err(e) => Err(format!("stage 3 failed: {e}")),
            },
            (None, e) => Err(e.clone().unwrap_or_else(|| "stage 2 missing".into())),
        });
    }

    for &kind in kinds {
        let mut row = AblationRow::empty(kind);
        let fl = kind.flags();
        let trained: std::result::Result<Trained, String> = if fl.cross_attention {
            match ours.as_ref().expect("ours requested") {
                Ok(t) => Ok(Trained { model: t.model.clone(), store: t.store.clone(), best_epoch: t.best_epoch }),
                Err(e) => Err(e.clone()),
            }
        } else if fl.pretrain && stage2_ck.is_none() {
            Err(stage2_err.clone().unwrap_or_else(|| "stage 2 missing".into()))
        } else {
            match train_row(cfg, data, kind, stage2_ck) {
                Ok((t, log)) => {
                    if let Some(dir) = sink {
                        dir.write_csv(&format!("train_{}.csv", kind.slug()), &log)?;
                        let parent = if fl.pretrain { stage2_ck.map(Checkpoint::hash) } else { None };
                        checkpoint_of(kind, &t, parent).save(&dir.path(&format!("{}.ckpt", kind.slug())))?;
                    }
                    report.train_logs.insert(kind, log);
                    Ok(t)
                }
                Err(e) => Err(format!("training failed: {e}")),
            }
        };
        match trained {
            Ok(t) => match evaluate_row(cfg, data, kind, &t, &mut row) {
                Ok((s, recs)) => {
                    if let Some(dir) = sink {
                        let p = dir.path(&format!("records_{}.csv", kind.slug()));
                        let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
                        write_records(&recs, f)?;
                    }
                    report.summaries.insert(kind, s);
                    report.records.insert(kind, recs);
                }
                Err(e) => row.failure = Some(format!("evaluation failed: {e}")),
            },
            Err(e) => row.failure = Some(e),
        }
        if let Some(f) = &row.failure {
            log::warn!("ablation row {}: {f}", kind.name());
        }
        report.rows.push(row);
    }
    if let Some(dir) = sink {
        dir.write_csv("ablation.csv", &report.rows)?;
    }
    Ok(report)
}

/// Row means over several seeds' reports (failed rows are skipped).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummaryRow {
    pub name: String,
    pub seeds: usize,
    pub dsc_mean: Option<f64>,
    /// Sample standard deviation of the per-seed DSC means.
    pub dsc_seed_std: Option<f64>,
    pub asd_mean: Option<f64>,
    pub latency_ms: Option<f64>,
    pub params: Option<usize>,
    pub failures: usize,
}

pub fn mean_over_seeds(reports: &[AblationReport]) -> Vec<SeedSummaryRow> {
    let mut names: Vec<String> = Vec::new();
    for r in reports.iter().flat_map(|r| &r.rows) {
        if !names.contains(&r.name) {
            names.push(r.name.clone());
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rows: Vec<&AblationRow> = reports.iter().flat_map(|r| &r.rows).filter(|r| r.name == name).collect();
            let ok: Vec<&&AblationRow> = rows.iter().filter(|r| r.failure.is_none()).collect();
            let mean = |f: &dyn Fn(&AblationRow) -> Option<f64>| {
                let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            let dsc: Vec<f64> = ok.iter().filter_map(|r| r.dsc_mean).collect();
            let dsc_seed_std = (dsc.len() >= 2).then(|| {
                let m = dsc.iter().sum::<f64>() / dsc.len() as f64;
                (dsc.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (dsc.len() - 1) as f64).sqrt()
            });
            SeedSummaryRow {
                seeds: ok.len(),
                dsc_mean: mean(&|r| r.dsc_mean),
                dsc_seed_std,
                asd_mean: mean(&|r| r.asd_mean),
                latency_ms: mean(&|r| r.latency_ms),
                params: ok.first().and_then(|r| r.params),
                failures: rows.len() - ok.len(),
                name,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_flags_follow_the_table() {
        let f = RowKind::ImageOnly.flags();
        assert!(!f.audio && !f.prior && !f.pretrain && !f.cross_attention);
        assert!(RowKind::IapConcat.flags().phon && !RowKind::IaConcat.flags().phon);
        assert!(RowKind::BboxPrior.flags().prior && !RowKind::BboxPrior.flags().pretrain);
        assert!(RowKind::Pretrain.flags().pretrain);
        assert_eq!(RowKind::Ours.flags().eval_mode, Mode::InferImageOnly);
        assert_eq!(RowKind::FullInput.flags().eval_mode, Mode::InferFull);
        for k in RowKind::ALL {
            assert_eq!(k.name().parse::<RowKind>().unwrap(), k);
        }
    }
}
