//! Visual and audio encoders, multi-layer patch fusion and projection heads.
//!
//! Parameter names are stable (`visual.*`, `audio.*`, `fusion.*`, `proj.*`)
//! so weights can be moved between stages by name.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, EncoderBlock, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualEncoderConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 1-based layer indices whose patch tokens are fused.
    pub taps: Vec<usize>,
}

impl VisualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        if self.in_channels == 0 || self.depth == 0 || self.hidden == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("visual encoder sizes must be positive".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        let sorted = self.taps.windows(2).all(|w| w[0] < w[1]);
        if self.taps.is_empty()
            || !sorted
            || self.taps[0] == 0
            || *self.taps.last().unwrap() != self.depth
        {
            return Err(Error::Config(format!(
                "taps {:?} must be sorted within 1..={} and end at {}",
                self.taps, self.depth, self.depth
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioEncoderConfig {
    /// Samples per input context.
    pub input_len: usize,
    pub conv_channels: usize,
    /// `(kernel, stride)` of each front-end convolution.
    pub conv_layers: Vec<(usize, usize)>,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl AudioEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.is_empty() || self.conv_layers.iter().any(|&(k, s)| k == 0 || s == 0) {
            return Err(Error::Config("audio front-end needs positive kernels and strides".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 || self.conv_channels == 0 {
            return Err(Error::Config(format!(
                "audio hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.seq_len() == 0 {
            return Err(Error::Config(format!(
                "audio input of {} samples is shorter than the front-end receptive field",
                self.input_len
            )));
        }
        Ok(())
    }

    /// Length of the feature sequence produced by the front-end.
    pub fn seq_len(&self) -> usize {
        let mut len = self.input_len;
        for &(k, s) in &self.conv_layers {
            if len < k {
                return 0;
            }
            len = (len - k) / s + 1;
        }
        len
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub visual: VisualEncoderConfig,
    pub audio: AudioEncoderConfig,
    pub proj_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.audio.validate()?;
        if self.visual.hidden != self.audio.hidden {
            return Err(Error::Config(format!(
                "visual hidden {} differs from audio hidden {}",
                self.visual.hidden, self.audio.hidden
            )));
        }
        if self.proj_dim == 0 {
            return Err(Error::Config("projection dimension must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    Patch,
    Global,
    AudioSequence,
    Fused,
}

/// `N×D` tokens held in a graph, optionally laid out on a spatial grid.
#[derive(Clone, Copy, Debug)]
pub struct TokenBatch {
    pub tokens: Var,
    pub role: TokenRole,
    pub grid: Option<(usize, usize)>,
}

pub struct VisualOutput {
    /// Patch tokens after every block (index 0 is block 1), global token excluded.
    pub layers: Vec<TokenBatch>,
    /// `[1, D]` normalized class token of the final block.
    pub global: Var,
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub cfg: VisualEncoderConfig,
    pub patch_image: ParamId,
    /// Weights for channels beyond the first; zero-initialized.
    pub patch_extra: Option<ParamId>,
    pub patch_bias: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

pub const PATCH_IMAGE: &str = "visual.patch_embed.image";
pub const PATCH_EXTRA: &str = "visual.patch_embed.prior";

/// Name prefix of the parameters in visual block `layer` (1-based).
pub fn visual_block_prefix(layer: usize) -> String {
    format!("visual.blocks.{layer}.")
}

impl VisualEncoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &VisualEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, p2) = (cfg.hidden, cfg.patch * cfg.patch);
        let std = 1.0 / (p2 as f64).sqrt();
        let patch_image = store.add(PATCH_IMAGE, Tensor::randn(&[d, p2], std, rng))?;
        let patch_extra = if cfg.in_channels > 1 {
            Some(store.add(PATCH_EXTRA, Tensor::zeros(&[d, (cfg.in_channels - 1) * p2]))?)
        } else {
            None
        };
        let patch_bias = store.add("visual.patch_embed.bias", Tensor::zeros(&[d, 1]))?;
        let cls = store.add("visual.cls", Tensor::randn(&[1, d], 0.02, rng))?;
        let pos = store.add("visual.pos", Tensor::randn(&[cfg.num_patches() + 1, d], 0.02, rng))?;
        let blocks = (1..=cfg.depth)
            .map(|l| {
                let name = format!("visual.blocks.{l}");
                EncoderBlock::new(store, &name, d, cfg.heads, d * cfg.mlp_ratio, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "visual.norm", d)?;
        Ok(Self { cfg: cfg.clone(), patch_image, patch_extra, patch_bias, cls, pos, blocks, norm })
    }

    /// `image: [C, H*W]` channel stack.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, image: Var) -> Result<VisualOutput> {
        let c = &self.cfg;
        let expect = [c.in_channels, c.height * c.width];
        if g.shape(image) != expect {
            return Err(Error::Shape(format!(
                "visual input {:?}, expected {:?}",
                g.shape(image),
                expect
            )));
        }
        let p2 = c.patch * c.patch;
        let geom = ConvGeom {
            channels: c.in_channels,
            height: c.height,
            width: c.width,
            kernel: c.patch,
            stride: c.patch,
            pad: 0,
        };
        let cols = g.im2col(image, geom);
        let w_img = g.param(self.patch_image);
        let emb = if c.in_channels == 1 {
            g.matmul(w_img, cols)
        } else {
            let img_cols = g.slice_rows(cols, 0, p2);
            let extra_cols = g.slice_rows(cols, p2, c.in_channels * p2);
            let a = g.matmul(w_img, img_cols);
            let w_extra = g.param(self.patch_extra.expect("extra channels"));
            let b = g.matmul(w_extra, extra_cols);
            g.add(a, b)
        };
        let bias = g.param(self.patch_bias);
        let emb = g.add_col(emb, bias);
        let tokens = g.transpose(emb);
        let cls = g.param(self.cls);
        let x = g.concat_rows(&[cls, tokens]);
        let pos = g.param(self.pos);
        let mut x = g.add(x, pos);
        let n = c.num_patches();
        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward(g, x);
            let patches = g.slice_rows(x, 1, n + 1);
            layers.push(TokenBatch { tokens: patches, role: TokenRole::Patch, grid: Some(c.grid()) });
        }
        let cls_out = g.slice_rows(x, 0, 1);
        let global = self.norm.forward(g, cls_out);
        Ok(VisualOutput { layers, global })
    }

    /// Patch tokens of the configured tap layers.
    pub fn tapped(&self, out: &VisualOutput) -> Vec<TokenBatch> {
        self.cfg.taps.iter().map(|&l| out.layers[l - 1]).collect()
    }
}

/// Learnable 1×1 convolutions over tapped patch grids, summed.
#[derive(Clone, Debug)]
pub struct PatchFusion {
    /// Per tap: weight `[D, D]` and bias `[D, 1]`.
    pub convs: Vec<(ParamId, ParamId)>,
    pub dim: usize,
}

impl PatchFusion {
    /// Initialized to the average of the taps.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, n_taps: usize, dim: usize) -> Result<Self> {
        let mut convs = Vec::with_capacity(n_taps);
        let diag: T = lit(1.0 / n_taps as f64);
        for l in 0..n_taps {
            let w = Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { diag } else { T::zero() });
            let wid = store.add(format!("fusion.{l}.weight"), w)?;
            let bid = store.add(format!("fusion.{l}.bias"), Tensor::zeros(&[dim, 1]))?;
            convs.push((wid, bid));
        }
        Ok(Self { convs, dim })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, tapped: &[TokenBatch]) -> Result<TokenBatch> {
        fuse_patch_features(g, tapped, &self.convs)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Each `[N, D]` batch is laid out as a `D × h × w` map, passed through its own
/// 1×1 convolution `(W_l, b_l)`, and the results are summed and flattened back.
pub fn fuse_patch_features<T: Scalar>(
    g: &mut Graph<T>,
    tapped: &[TokenBatch],
    convs: &[(ParamId, ParamId)],
) -> Result<TokenBatch> {
    if tapped.is_empty() || tapped.len() != convs.len() {
        return Err(Error::Contract(format!(
            "{} tapped batches for {} fusion convolutions",
            tapped.len(),
            convs.len()
        )));
    }
    let grid = tapped[0]
        .grid
        .ok_or_else(|| Error::Contract("tapped batch has no spatial grid".into()))?;
    let shape = g.shape(tapped[0].tokens).to_vec();
    let mut acc: Option<Var> = None;
    for (batch, &(w, b)) in tapped.iter().zip(convs) {
        match batch.grid {
            Some(gr) if gr == grid => {}
            Some(gr) => {
                return Err(Error::Contract(format!("grid {gr:?} differs from {grid:?}")))
            }
            None => return Err(Error::Contract("tapped batch has no spatial grid".into())),
        }
        if g.shape(batch.tokens) != shape.as_slice() || shape[0] != grid.0 * grid.1 {
            return Err(Error::Shape(format!(
                "tapped batch {:?} does not match {:?} on grid {:?}",
                g.shape(batch.tokens),
                shape,
                grid
            )));
        }
        let map = g.transpose(batch.tokens);
        let wv = g.param(w);
        let bv = g.param(b);
        let y = g.matmul(wv, map);
        let y = g.add_col(y, bv);
        acc = Some(match acc {
            None => y,
            Some(a) => g.add(a, y),
        });
    }
    let tokens = g.transpose(acc.expect("non-empty"));
    Ok(TokenBatch { tokens, role: TokenRole::Fused, grid: Some(grid) })
}

pub struct AudioOutput {
    /// `[T, D]`.
    pub sequence: TokenBatch,
    /// `[1, D]` temporal mean of the sequence.
    pub global: Var,
}

#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub cfg: AudioEncoderConfig,
    pub convs: Vec<Conv1d>,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

impl AudioEncoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &AudioEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.conv_layers.len();
        let mut convs = Vec::with_capacity(n);
        let mut c_in = 1;
        for (i, &(k, s)) in cfg.conv_layers.iter().enumerate() {
            let c_out = if i + 1 == n { cfg.hidden } else { cfg.conv_channels };
            convs.push(Conv1d::new(store, &format!("audio.conv.{i}"), c_in, c_out, k, s, rng)?);
            c_in = c_out;
        }
        let blocks = (1..=cfg.depth)
            .map(|l| {
                let name = format!("audio.blocks.{l}");
                EncoderBlock::new(store, &name, cfg.hidden, cfg.heads, cfg.hidden * cfg.mlp_ratio, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "audio.norm", cfg.hidden)?;
        Ok(Self { cfg: cfg.clone(), convs, blocks, norm })
    }

    /// `waveform: [1, T_a]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, waveform: Var) -> Result<AudioOutput> {
        if g.shape(waveform) != [1, self.cfg.input_len] {
            return Err(Error::Shape(format!(
                "audio input {:?}, expected [1, {}]",
                g.shape(waveform),
                self.cfg.input_len
            )));
        }
        let mut x = waveform;
        for conv in &self.convs {
            x = conv.forward(g, x);
            x = g.gelu(x);
        }
        let mut x = g.transpose(x);
        for block in &self.blocks {
            x = block.forward(g, x);
        }
        let seq = self.norm.forward(g, x);
        let global = g.mean_rows(seq);
        Ok(AudioOutput {
            sequence: TokenBatch { tokens: seq, role: TokenRole::AudioSequence, grid: None },
            global,
        })
    }
}

/// Two fully connected layers with a GELU in between, then unit normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ProjectionHead {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        proj_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), dim, proj_dim, true, rng)?,
        })
    }

    /// `[B, D]` → `[B, D_proj]` unit rows.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        let z = self.fc2.forward(g, h);
        g.normalize_rows(z, lit(1e-12))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    GlobalImage,
    Patch,
    Audio,
}

/// Unit-norm embeddings of one sample (or a batch, row-stacked).
pub struct Embeddings {
    pub z_image: Var,
    pub z_patch: Var,
    pub z_audio: Var,
}

/// Both encoders, the patch fusion and the three projection heads.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub cfg: EncoderConfig,
    pub visual: VisualEncoder,
    pub fusion: PatchFusion,
    pub audio: AudioEncoder,
    pub head_image: ProjectionHead,
    pub head_patch: ProjectionHead,
    pub head_audio: ProjectionHead,
}

impl DualEncoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.visual.hidden;
        Ok(Self {
            cfg: cfg.clone(),
            visual: VisualEncoder::new(store, &cfg.visual, rng)?,
            fusion: PatchFusion::new(store, cfg.visual.taps.len(), d)?,
            audio: AudioEncoder::new(store, &cfg.audio, rng)?,
            head_image: ProjectionHead::new(store, "proj.image", d, cfg.proj_dim, rng)?,
            head_patch: ProjectionHead::new(store, "proj.patch", d, cfg.proj_dim, rng)?,
            head_audio: ProjectionHead::new(store, "proj.audio", d, cfg.proj_dim, rng)?,
        })
    }

    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, feature: Var, head: Head) -> Var {
        match head {
            Head::GlobalImage => self.head_image.forward(g, feature),
            Head::Patch => self.head_patch.forward(g, feature),
            Head::Audio => self.head_audio.forward(g, feature),
        }
    }

    /// Embeds a batch of `(image [C, H*W], waveform [1, T_a])` pairs; the
    /// returned embeddings are `[B, D_proj]` each.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, pairs: &[(Var, Var)]) -> Result<Embeddings> {
        if pairs.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let mut globals = Vec::with_capacity(pairs.len());
        let mut patch_means = Vec::with_capacity(pairs.len());
        let mut audio_globals = Vec::with_capacity(pairs.len());
        for &(image, wave) in pairs {
            let v = self.visual.forward(g, image)?;
            let fused = self.fusion.forward(g, &self.visual.tapped(&v))?;
            globals.push(v.global);
            patch_means.push(g.mean_rows(fused.tokens));
            audio_globals.push(self.audio.forward(g, wave)?.global);
        }
        let cat = |g: &mut Graph<T>, v: &[Var]| if v.len() == 1 { v[0] } else { g.concat_rows(v) };
        let gi = cat(g, &globals);
        let gp = cat(g, &patch_means);
        let ga = cat(g, &audio_globals);
        Ok(Embeddings {
            z_image: self.project(g, gi, Head::GlobalImage),
            z_patch: self.project(g, gp, Head::Patch),
            z_audio: self.project(g, ga, Head::Audio),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vcfg(c: usize) -> VisualEncoderConfig {
        VisualEncoderConfig {
            in_channels: c,
            height: 8,
            width: 8,
            patch: 4,
            hidden: 8,
            depth: 3,
            heads: 2,
            mlp_ratio: 2,
            taps: vec![1, 2, 3],
        }
    }

    fn acfg() -> AudioEncoderConfig {
        AudioEncoderConfig {
            input_len: 40,
            conv_channels: 4,
            conv_layers: vec![(4, 2), (3, 2)],
            hidden: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn default_audio_sequence_length() {
        let cfg = AudioEncoderConfig {
            input_len: 3198,
            conv_channels: 32,
            conv_layers: vec![(8, 4), (4, 4), (4, 4)],
            hidden: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
        };
        assert_eq!(cfg.seq_len(), 49);
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = AudioEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        let mut g = Graph::inference(&store);
        let w = g.constant(Tensor::randn(&[1, 3198], 0.3, &mut rng));
        let out = enc.forward(&mut g, w).unwrap();
        assert_eq!(g.shape(out.sequence.tokens), &[49, 64]);
    }

    #[test]
    fn visual_shapes_and_determinism() {
        let cfg = VisualEncoderConfig { height: 64, width: 64, patch: 8, ..vcfg(1) };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = VisualEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        let img = Tensor::randn(&[1, 64 * 64], 1.0, &mut rng);
        let run = |img: &Tensor<f64>| {
            let mut g = Graph::inference(&store);
            let x = g.constant(img.clone());
            let out = enc.forward(&mut g, x).unwrap();
            assert_eq!(out.layers.len(), 3);
            for l in &out.layers {
                assert_eq!(g.shape(l.tokens), &[64, 8]);
            }
            g.value(out.global).clone()
        };
        let a = run(&img);
        assert_eq!(a, run(&img));
        let mut bumped = img.clone();
        bumped.data_mut()[100] += 1e-3;
        assert!(a.max_abs_diff(&run(&bumped)) > 1e-12);
    }

    #[test]
    fn wrong_channels_is_shape_error() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = VisualEncoder::new(&mut store, &vcfg(5), &mut rng).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::zeros(&[1, 64]));
        assert!(matches!(enc.forward(&mut g, x), Err(Error::Shape(_))));
    }

    #[test]
    fn bad_taps_rejected() {
        let mut c = vcfg(1);
        c.taps = vec![1, 2];
        assert!(c.validate().is_err());
        c.taps = vec![2, 1, 3];
        assert!(c.validate().is_err());
        let c = VisualEncoderConfig { height: 10, ..vcfg(1) };
        assert!(c.validate().is_err());
    }

    #[test]
    fn fusion_identity_zero_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, d, grid) = (6, 5, (2, 3));
        let mut store = ParamStore::<f64>::new();
        let fusion = PatchFusion::new(&mut store, 3, d).unwrap();
        let batches: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[n, d], 1.0, &mut rng)).collect();

        let run = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| {
            let mut g = Graph::inference(store);
            let tapped: Vec<TokenBatch> = inputs
                .iter()
                .map(|t| TokenBatch { tokens: g.constant(t.clone()), role: TokenRole::Patch, grid: Some(grid) })
                .collect();
            let out = fusion.forward(&mut g, &tapped).unwrap();
            g.value(out.tokens).clone()
        };

        // identity on tap 1, zero elsewhere
        let mut s = store.clone();
        for (l, &(w, _)) in fusion.convs.iter().enumerate() {
            let val = if l == 1 { 1.0 } else { 0.0 };
            *s.get_mut(w) = Tensor::from_fn(&[d, d], |i| if i / d == i % d { val } else { 0.0 });
        }
        assert!(run(&s, &batches).max_abs_diff(&batches[1]) < 1e-15);

        // random weights and biases against a per-pixel loop
        let mut s = store.clone();
        for &(w, b) in &fusion.convs {
            *s.get_mut(w) = Tensor::randn(&[d, d], 1.0, &mut rng);
            *s.get_mut(b) = Tensor::randn(&[d, 1], 1.0, &mut rng);
        }
        let zeros = vec![Tensor::zeros(&[n, d]); 3];
        let z = run(&s, &zeros);
        for p in 0..n {
            for o in 0..d {
                let bias_sum: f64 = fusion.convs.iter().map(|&(_, b)| s.get(b).data()[o]).sum();
                assert!((z.at(p, o) - bias_sum).abs() < 1e-12);
            }
        }
        let out = run(&s, &batches);
        for p in 0..n {
            for o in 0..d {
                let mut acc = 0.0;
                for (l, &(w, b)) in fusion.convs.iter().enumerate() {
                    acc += s.get(b).data()[o];
                    for i in 0..d {
                        acc += s.get(w).at(o, i) * batches[l].at(p, i);
                    }
                }
                assert!((out.at(p, o) - acc).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn fusion_without_grid_is_contract_error() {
        let mut store = ParamStore::<f64>::new();
        let fusion = PatchFusion::new(&mut store, 1, 2).unwrap();
        let mut g = Graph::inference(&store);
        let t = g.constant(Tensor::zeros(&[4, 2]));
        let b = TokenBatch { tokens: t, role: TokenRole::Patch, grid: None };
        assert!(matches!(fusion.forward(&mut g, &[b]), Err(Error::Contract(_))));
    }

    #[test]
    fn audio_global_is_mean_and_projection_is_unit() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = EncoderConfig { visual: vcfg(1), audio: acfg(), proj_dim: 4 };
        let enc = DualEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        let mut g = Graph::inference(&store);
        let w = g.constant(Tensor::randn(&[1, 40], 1.0, &mut rng));
        let out = enc.audio.forward(&mut g, w).unwrap();
        let seq = g.value(out.sequence.tokens).clone();
        let glob = g.value(out.global).clone();
        for c in 0..8 {
            let m: f64 = (0..seq.rows()).map(|r| seq.at(r, c)).sum::<f64>() / seq.rows() as f64;
            assert!((m - glob.data()[c]).abs() < 1e-12);
        }
        let x = g.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
        let x2 = g.scale(x, 2.0);
        for head in [Head::GlobalImage, Head::Patch, Head::Audio] {
            for v in [x, x2] {
                let z = enc.project(&mut g, v, head);
                for r in 0..3 {
                    let nrm: f64 = g.value(z).row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
                    assert!((nrm - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = EncoderConfig { visual: vcfg(5), audio: acfg(), proj_dim: 4 };
        let enc = DualEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        // make the zero-initialized extra-channel weights non-trivial
        let extra = enc.visual.patch_extra.unwrap();
        *store.get_mut(extra) = Tensor::randn(store.get(extra).shape(), 0.2, &mut rng);
        let img = Tensor::randn(&[5, 64], 1.0, &mut rng);
        let wave = Tensor::randn(&[1, 40], 1.0, &mut rng);
        let probe = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let ids: Vec<ParamId> = store.ids().collect();
        let report = check_params(
            &store,
            &ids,
            |g| {
                let i = g.constant(img.clone());
                let w = g.constant(wave.clone());
                let e = enc.embed(g, &[(i, w)]).unwrap();
                let z = g.concat_rows(&[e.z_image, e.z_patch, e.z_audio]);
                let p = g.constant(probe.clone());
                let m = g.mul(z, p);
                g.sum_all(m)
            },
            6,
            1e-5,
            1e-4,
            &mut rng,
        );
        assert!(report.ok(0.95), "{report:?}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn shape_contract(
                grid_h in 1usize..4, grid_w in 1usize..4, patch in 1usize..4,
                heads in 1usize..3, head_dim in 1usize..4, depth in 1usize..4,
                channels in 1usize..6, proj in 1usize..5, len in 20usize..60, seed in 0u64..1000,
            ) {
                let hidden = heads * head_dim;
                let taps: Vec<usize> = (1..=depth).collect();
                let cfg = EncoderConfig {
                    visual: VisualEncoderConfig {
                        in_channels: channels, height: grid_h * patch, width: grid_w * patch,
                        patch, hidden, depth, heads, mlp_ratio: 2, taps,
                    },
                    audio: AudioEncoderConfig {
                        input_len: len, conv_channels: 3, conv_layers: vec![(4, 2), (2, 2)],
                        hidden, depth: 1, heads, mlp_ratio: 1,
                    },
                    proj_dim: proj,
                };
                let mut store = ParamStore::<f64>::new();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let enc = DualEncoder::new(&mut store, &cfg, &mut rng).unwrap();
                let mut g = Graph::inference(&store);
                let img = g.constant(Tensor::randn(&[channels, grid_h * grid_w * patch * patch], 1.0, &mut rng));
                let wav = g.constant(Tensor::randn(&[1, len], 1.0, &mut rng));
                let v = enc.visual.forward(&mut g, img).unwrap();
                for l in &v.layers {
                    prop_assert_eq!(g.shape(l.tokens), &[grid_h * grid_w, hidden]);
                }
                prop_assert_eq!(g.shape(v.global), &[1, hidden]);
                let fused = enc.fusion.forward(&mut g, &enc.visual.tapped(&v)).unwrap();
                prop_assert_eq!(g.shape(fused.tokens), &[grid_h * grid_w, hidden]);
                let a = enc.audio.forward(&mut g, wav).unwrap();
                prop_assert_eq!(g.shape(a.sequence.tokens), &[cfg.audio.seq_len(), hidden]);
                prop_assert_eq!(g.shape(a.global), &[1, hidden]);
                let e = enc.embed(&mut g, &[(img, wav)]).unwrap();
                prop_assert_eq!(g.shape(e.z_image), &[1, proj]);
                prop_assert_eq!(g.shape(e.z_patch), &[1, proj]);
                prop_assert_eq!(g.shape(e.z_audio), &[1, proj]);
            }
        }
    }
}
