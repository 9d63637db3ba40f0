//! Training loops, evaluation, ablations, run directories and plots.

mod ablation;
mod data;
mod eval;
mod plots;
mod rundir;
mod stage2;
mod stage3;
mod train;

pub use ablation::{mean_over_seeds, run_ablation, AblationReport, AblationRow, RowFlags, RowKind, SeedSummaryRow};
pub use data::Prepared;
pub use eval::{eval_input, evaluate_frames, model_latency};
pub use plots::{bar_chart, emit_plots, line_chart, Figure};
pub use rundir::{host_descriptor, RunDir, CONFIG_FILE, HOST_FILE, MANIFEST_HASH_FILE, SEED_FILE};
pub use stage2::{train_stage2, Stage2LogRow, Stage2Outcome};
pub use stage3::{init_from_stage2, model_from_checkpoint, train_stage3, Stage3Outcome};
pub use train::{train_segmentation, validation_dsc, SegEpochLog, SegTrainOutcome, SegTrainSpec};

use std::path::Path;

use crate::config::RunConfig;
use crate::dataio::{generate_corpus, write_corpus, Corpus};
use crate::error::Result;
use crate::phonology::PhonemeInventory;

/// Generates the configured corpus; when `dir` is given it is also written
/// to `dir/corpus` and its manifest hash recorded in the run directory.
pub fn synth_corpus(cfg: &RunConfig, dir: Option<&RunDir>) -> Result<(Corpus, Option<String>)> {
    let corpus = generate_corpus(&cfg.corpus, &PhonemeInventory::default())?;
    let hash = match dir {
        Some(d) => {
            let h = write_corpus(&corpus, &d.path("corpus"))?;
            d.write_text(MANIFEST_HASH_FILE, &format!("{h}\n"))?;
            Some(h)
        }
        None => None,
    };
    Ok((corpus, hash))
}

/// Corpus preparation for the configured evaluation split.
pub fn prepare(cfg: &RunConfig, corpus: &Corpus) -> Result<Prepared> {
    Prepared::new(corpus, PhonemeInventory::default(), cfg.eval.split, cfg.seed)
}

/// Convenience: load a corpus directory and record its manifest hash.
pub fn load_for_run(root: &Path, dir: Option<&RunDir>, require_audio: bool) -> Result<Corpus> {
    let corpus = crate::dataio::load_corpus_with(root, require_audio)?;
    if let Some(d) = dir {
        let h = crate::dataio::manifest_hash(root)?;
        d.write_text(MANIFEST_HASH_FILE, &format!("{h}\n"))?;
    }
    Ok(corpus)
}
