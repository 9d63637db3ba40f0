use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vtseg::checkpoint::Checkpoint;
use vtseg::config::RunConfig;
use vtseg::dataio::{Role, SplitTag};
use vtseg::harness::{
    emit_plots, evaluate_frames, load_for_run, model_from_checkpoint, prepare, run_ablation, synth_corpus,
    train_stage2, train_stage3, RowKind, RunDir,
};
use vtseg::metrics::{aggregate, format_table, write_records};
use vtseg::priorgen::tables_to_text;
use vtseg::segmodel::Mode;
use vtseg::{Error, Result};

#[derive(Parser)]
#[command(name = "vtseg", version, about = "Articulator segmentation with audio and phonological priors")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed (corpus, splits and training).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    ImageOnly,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => Mode::InferFull,
            ModeArg::ImageOnly => Mode::InferImageOnly,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into `--out`.
    Synth,
    /// Build per-subject bounding-box prior tables from training frames.
    Priors {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Contrastive image-audio pretraining.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Segmentation training on top of a pretrained checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
    },
    /// Evaluate a segmentation checkpoint on a split.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "image-only")]
        mode: ModeArg,
        /// SS-UT, US-ST or US-UT; defaults to the configured split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Train and evaluate the ablation rows on a freshly generated corpus.
    Ablate {
        /// Comma-separated row names; all rows by default.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
        /// Number of consecutive seeds starting at the configured one.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Render figures from the logs of a run directory.
    Plot {
        /// Run directory; defaults to `--out`.
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cfg.out_dir.clone();
    match &cli.cmd {
        Command::Synth => {
            let corpus = vtseg::dataio::generate_corpus(&cfg.corpus, &Default::default())?;
            let hash = vtseg::dataio::write_corpus(&corpus, &out)?;
            println!("{} frames written to {} (manifest {hash})", corpus.num_frames(), out.display());
        }
        Command::Priors { corpus } => {
            let dir = RunDir::create(&out, &cfg)?;
            let c = load_for_run(corpus, Some(&dir), true)?;
            let data = prepare(&cfg, &c)?;
            let tables: Vec<_> = data.priors.values().cloned().collect();
            dir.write_text("priors.txt", &tables_to_text(&tables))?;
            println!("{} prior tables written to {}", tables.len(), dir.path("priors.txt").display());
        }
        Command::Pretrain { corpus } => {
            let dir = RunDir::create(&out, &cfg)?;
            let data = prepare(&cfg, &load_for_run(corpus, Some(&dir), true)?)?;
            let s2 = train_stage2(&cfg, &data)?;
            dir.write_csv("stage2_log.csv", &s2.log)?;
            let h = s2.checkpoint.save(&dir.path("stage2.ckpt"))?;
            println!("stage 2 best epoch {} (checkpoint {h})", s2.best_epoch);
        }
        Command::Train { corpus, stage2 } => {
            let dir = RunDir::create(&out, &cfg)?;
            let data = prepare(&cfg, &load_for_run(corpus, Some(&dir), true)?)?;
            let s3 = train_stage3(&cfg, &data, &Checkpoint::load(stage2)?)?;
            dir.write_csv("train_ours.csv", &s3.log)?;
            let h = s3.checkpoint.save(&dir.path("stage3.ckpt"))?;
            println!("stage 3 best epoch {} (checkpoint {h})", s3.best_epoch);
        }
        Command::Eval { corpus, checkpoint, mode, split } => {
            let mut cfg = cfg.clone();
            if let Some(s) = split {
                cfg.eval.split = s.parse::<SplitTag>()?;
            }
            let mode = Mode::from(*mode);
            let dir = RunDir::create(&out, &cfg)?;
            let c = load_for_run(corpus, Some(&dir), mode != Mode::InferImageOnly)?;
            let data = prepare(&cfg, &c)?;
            let (model, store) = model_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            let records = evaluate_frames(&model, &store, &data, &data.indices(Role::Eval), mode, cfg.eval.asd)?;
            let p = dir.path(&format!("records_{}.csv", mode.tag()));
            write_records(&records, std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?)?;
            let table = format_table(&aggregate(&records)?);
            dir.write_text(&format!("metrics_{}.csv", mode.tag()), &table)?;
            print!("{table}");
        }
        Command::Ablate { rows, seeds } => {
            let kinds: Vec<RowKind> = if rows.is_empty() {
                RowKind::ALL.to_vec()
            } else {
                rows.iter().map(|r| r.parse()).collect::<Result<_>>()?
            };
            let root = RunDir::create(&out, &cfg)?;
            let mut all = Vec::new();
            for k in 0..(*seeds).max(1) {
                let scfg = cfg.with_seed(cfg.seed + k);
                let dir = RunDir::create(&root.path(&format!("seed_{}", scfg.seed)), &scfg)?;
                let (corpus, _) = synth_corpus(&scfg, Some(&dir))?;
                let data = prepare(&scfg, &corpus)?;
                let report = run_ablation(&scfg, &data, &kinds, Some(&dir))?;
                emit_plots(&dir)?;
                for r in &report.rows {
                    println!(
                        "seed {} {:<14} DSC {:>6} ASD {:>6} params {:>8} latency {:>8}{}",
                        scfg.seed,
                        r.name,
                        fmt(r.dsc_mean, 2),
                        fmt(r.asd_mean, 3),
                        r.params.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
                        fmt(r.latency_ms, 1),
                        r.failure.as_ref().map(|f| format!("  FAILED: {f}")).unwrap_or_default()
                    );
                }
                all.push(report);
            }
            let summary = vtseg::harness::mean_over_seeds(&all);
            root.write_csv("ablation_summary.csv", &summary)?;
        }
        Command::Plot { run } => {
            let dir = RunDir::open(run.as_deref().unwrap_or(Path::new(&out)))?;
            for f in emit_plots(&dir)? {
                println!("{}", f.path.display());
            }
        }
    }
    Ok(())
}

fn fmt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(match e.category() {
                "config" => 2,
                "io" => 3,
                "checkpoint" => 4,
                "training" => 5,
                "evaluation" => 6,
                "plot" => 7,
                _ => 1,
            })
        }
    }
}
