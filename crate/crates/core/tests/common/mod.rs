#![allow(dead_code)]

use vtseg::config::RunConfig;
use vtseg::harness::{prepare, synth_corpus, Prepared};
use vtseg::segmodel::{CrossAttnDecoderConfig, DecodeHeadConfig};

/// A run configuration small enough for end-to-end tests in seconds.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.scale = 0.1;
    c.corpus.n_speakers = 4;
    c.corpus.n_tasks = 4;
    c.corpus.frames_per_task = 4;
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
    m.decoder = CrossAttnDecoderConfig { depth: 2, heads: 2, null_tokens: 3, ..Default::default() };
    m.head = DecodeHeadConfig { mid1: 4, mid2: 4 };
    c.stage2.batch_size = 4;
    c.stage2.bootstrap_epochs = 1;
    c.stage3.batch_size = 4;
    c.stage3.patience = 3;
    c.eval.latency_frames = 4;
    c.with_seed(seed)
}

pub fn tiny_data(cfg: &RunConfig) -> Prepared {
    let (corpus, _) = synth_corpus(cfg, None).unwrap();
    prepare(cfg, &corpus).unwrap()
}
