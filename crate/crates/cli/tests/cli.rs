use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vtseg::config::RunConfig;
use vtseg::segmodel::{CrossAttnDecoderConfig, DecodeHeadConfig};

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.scale = 0.1;
    c.corpus.n_speakers = 4;
    c.corpus.n_tasks = 4;
    c.corpus.frames_per_task = 3;
    c.corpus.height = 16;
    c.corpus.width = 16;
    c.corpus.native_size = 16;
    c.corpus.sample_rate = 4000;
    let m = &mut c.model;
    m.patch = 8;
    m.hidden = 8;
    m.visual_depth = 2;
    m.visual_heads = 2;
    m.taps = vec![1, 2];
    m.audio_conv_channels = 4;
    m.audio_conv_layers = vec![(8, 4), (4, 4)];
    m.audio_depth = 1;
    m.audio_heads = 2;
    m.proj_dim = 4;
    m.decoder = CrossAttnDecoderConfig { depth: 1, heads: 2, null_tokens: 2, ..Default::default() };
    m.head = DecodeHeadConfig { mid1: 4, mid2: 4 };
    c.stage2.batch_size = 4;
    c.stage2.bootstrap_epochs = 1;
    c.stage3.batch_size = 4;
    c.eval.latency_frames = 2;
    c
}

fn vtseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtseg")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("tiny.toml");
    fs::write(&cfg_path, tiny_config().to_toml()).unwrap();
    let cfg = s(&cfg_path);
    let corpus = tmp.path().join("corpus");
    let run = tmp.path().join("run");

    ok(&vtseg(&["--config", cfg, "--seed", "2", "--out", s(&corpus), "synth"]));
    assert!(corpus.join(vtseg::dataio::MANIFEST_FILE).exists());

    ok(&vtseg(&["--config", cfg, "--seed", "2", "--out", s(&run), "priors", "--corpus", s(&corpus)]));
    assert!(run.join("priors.txt").exists());

    ok(&vtseg(&["--config", cfg, "--seed", "2", "--out", s(&run), "pretrain", "--corpus", s(&corpus)]));
    assert!(run.join("stage2_log.csv").exists());
    let stage2 = run.join("stage2.ckpt");
    ok(&vtseg(&["--config", cfg, "--seed", "2", "--out", s(&run), "train", "--corpus", s(&corpus), "--stage2", s(&stage2)]));
    let stage3 = run.join("stage3.ckpt");
    assert!(stage3.exists());
    assert_eq!(fs::read_to_string(run.join("seed.txt")).unwrap().trim(), "2");

    let out = vtseg(&["--config", cfg, "--seed", "2", "--out", s(&run), "eval", "--corpus", s(&corpus), "--checkpoint", s(&stage3), "--mode", "full"]);
    ok(&out);
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(table.contains("US-UT") && table.contains("full"), "{table}");
    assert!(run.join("records_full.csv").exists());

    ok(&vtseg(&["--out", s(&run), "plot"]));
    assert!(run.join("stage2_loss.png").exists() && run.join("stage3_dsc.png").exists());

    // a stage-3 checkpoint is not a valid stage-2 initialization
    let out = vtseg(&["--config", cfg, "--seed", "2", "--out", s(&run), "train", "--corpus", s(&corpus), "--stage2", s(&stage3)]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn error_categories_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "scale = -2.0\n").unwrap();
    assert_eq!(vtseg(&["--config", s(&bad), "synth"]).status.code(), Some(2));

    let missing = tmp.path().join("nothing");
    let out = vtseg(&["--out", s(&tmp.path().join("o")), "pretrain", "--corpus", s(&missing)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("io"));

    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(vtseg(&["--out", s(&empty), "plot"]).status.code(), Some(7));
}
