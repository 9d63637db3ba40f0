//! Prior-conditioned, audio-attending segmentation model.
//!
//! Input stack `[image | 4 prior channels]` → visual encoder → fused patch
//! tokens → cross-attention decoder over audio features (or a learned null
//! bank when audio is absent) → convolutional upsampling head → 4 logit maps.
//! Baseline fusions (none, concatenation) reuse the same encoder and head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{AudioEncoder, EncoderConfig, PatchFusion, VisualEncoder, PATCH_EXTRA, PATCH_IMAGE};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::nn::{Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::phonology::{PhonologicalVector, NUM_ARTICULATORS, NUM_ATTRIBUTES};
use crate::priorgen::{neutral_prior, PriorMap};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossAttnDecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub null_tokens: usize,
    pub p_audio: f64,
    pub p_prior: f64,
    /// Position-wise feed-forward sublayer after each cross-attention.
    pub ffn: bool,
    pub mlp_ratio: usize,
}

impl Default for CrossAttnDecoderConfig {
    fn default() -> Self {
        Self { depth: 6, heads: 4, null_tokens: 8, p_audio: 0.5, p_prior: 0.5, ffn: true, mlp_ratio: 2 }
    }
}

impl CrossAttnDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.null_tokens == 0 {
            return Err(Error::Config("decoder depth and null tokens must be ≥ 1".into()));
        }
        for p in [self.p_audio, self.p_prior] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("dropout probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeHeadConfig {
    pub mid1: usize,
    pub mid2: usize,
}

/// How (and whether) audio/phonology reach the visual tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FusionKind {
    /// Image tokens straight into the head.
    None,
    /// Global audio feature (and optionally the phonological vector)
    /// concatenated to every token and projected back, residually.
    Concat { audio: bool, phon: bool },
    /// Stacked cross-attention layers with audio keys/values.
    CrossAttention,
}

impl FusionKind {
    pub fn uses_audio(&self) -> bool {
        matches!(self, FusionKind::CrossAttention | FusionKind::Concat { audio: true, .. })
    }

    pub fn uses_phon(&self) -> bool {
        matches!(self, FusionKind::Concat { phon: true, .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegModelConfig {
    /// `visual.in_channels` is 5 when the prior channels are used, else 1.
    pub encoder: EncoderConfig,
    pub decoder: CrossAttnDecoderConfig,
    pub head: DecodeHeadConfig,
    pub fusion: FusionKind,
}

impl SegModelConfig {
    pub fn uses_prior(&self) -> bool {
        self.encoder.visual.in_channels == 1 + NUM_ARTICULATORS
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        let c = self.encoder.visual.in_channels;
        if c != 1 && c != 1 + NUM_ARTICULATORS {
            return Err(Error::Config(format!("visual input must have 1 or 5 channels, got {c}")));
        }
        let v = &self.encoder.visual;
        if v.height % 2 != 0 || v.width % 2 != 0 {
            return Err(Error::Config("frame size must be even".into()));
        }
        if self.head.mid1 == 0 || self.head.mid2 == 0 {
            return Err(Error::Config("decode head widths must be positive".into()));
        }
        Ok(())
    }
}

/// `[1|H*W]` image and prior → `[5, H*W]` stack in articulator order.
pub fn concat_inputs<T: Scalar>(image: &Tensor<T>, prior: &PriorMap) -> Result<Tensor<T>> {
    let (h, w) = prior.shape();
    if image.len() != h * w {
        return Err(Error::Shape(format!(
            "image has {} pixels, prior is {h}x{w}",
            image.len()
        )));
    }
    let mut data = Vec::with_capacity((1 + NUM_ARTICULATORS) * h * w);
    data.extend_from_slice(image.data());
    data.extend(prior.to_tensor::<T>().into_vec());
    Tensor::from_vec(&[1 + NUM_ARTICULATORS, h * w], data)
}

/// Copies every parameter of `target` that also exists in `source` (by name),
/// leaving the extra patch-embedding channels at zero.
pub fn inflate_patch_embed<T: Scalar>(source: &ParamStore<T>, target: &mut ParamStore<T>) -> Result<usize> {
    let src_img = source
        .id(PATCH_IMAGE)
        .ok_or_else(|| Error::Checkpoint(format!("source lacks `{PATCH_IMAGE}`")))?;
    let dst_img = target
        .id(PATCH_IMAGE)
        .ok_or_else(|| Error::Checkpoint(format!("target lacks `{PATCH_IMAGE}`")))?;
    if source.get(src_img).shape() != target.get(dst_img).shape() {
        return Err(Error::Checkpoint(format!(
            "image patch weights {:?} vs {:?}: channel count mismatch",
            source.get(src_img).shape(),
            target.get(dst_img).shape()
        )));
    }
    let names: Vec<String> = target.iter().map(|(_, n, _)| n.to_string()).collect();
    let mut copied = 0;
    for name in names {
        if name == PATCH_EXTRA {
            let id = target.id(&name).expect("present");
            let shape = target.get(id).shape().to_vec();
            target.assign(&name, Tensor::zeros(&shape))?;
            continue;
        }
        if let Some(sid) = source.id(&name) {
            target.assign(&name, source.get(sid).clone())?;
            copied += 1;
        }
    }
    Ok(copied)
}

/// Learned stand-in for audio keys/values.
#[derive(Clone, Debug)]
pub struct NullAudioBank {
    pub tokens: ParamId,
    pub k: usize,
}

impl NullAudioBank {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, k: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { tokens: store.add("decoder.null_bank", Tensor::randn(&[k, dim], 1.0, rng))?, k })
    }
}

/// `LN(F_v + MHA(F_v, F_a, F_a))`, then optionally `LN(x + FFN(x))`.
#[derive(Clone, Debug)]
pub struct CrossAttnLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: Option<(FeedForward, LayerNorm)>,
}

impl CrossAttnLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let attn = MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?;
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), dim)?;
        let ffn = match ffn_hidden {
            Some(h) => Some((
                FeedForward::new(store, &format!("{name}.ffn"), dim, h, rng)?,
                LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            )),
            None => None,
        };
        Ok(Self { attn, ln1, ffn })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.attn.ids();
        v.extend(self.ln1.ids());
        if let Some((f, l)) = &self.ffn {
            v.extend(f.ids());
            v.extend(l.ids());
        }
        v
    }
}

/// One decoder layer: visual queries `[N, D]` attend to audio `[T, D]`.
pub fn cross_attn_layer<T: Scalar>(g: &mut Graph<T>, layer: &CrossAttnLayer, fv: Var, fa: Var) -> Result<Var> {
    let (sv, sa) = (g.shape(fv).to_vec(), g.shape(fa).to_vec());
    if sa[0] == 0 {
        return Err(Error::Contract("no audio tokens; substitute the null bank".into()));
    }
    if sv[1] != layer.attn.dim || sa[1] != layer.attn.dim {
        return Err(Error::Shape(format!(
            "cross-attention dims {:?} / {:?} vs model dim {}",
            sv, sa, layer.attn.dim
        )));
    }
    let a = layer.attn.forward(g, fv, fa);
    let x = g.add(fv, a);
    let mut x = layer.ln1.forward(g, x);
    if let Some((ffn, ln)) = &layer.ffn {
        let f = ffn.forward(g, x);
        let y = g.add(x, f);
        x = ln.forward(g, y);
    }
    Ok(x)
}

/// Residual projection of `[tokens | audio global | phonology]`.
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    pub proj: Linear,
    pub null_audio: Option<ParamId>,
    pub audio: bool,
    pub phon: bool,
}

#[derive(Clone, Debug)]
pub struct DecodeHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub out: Conv2d,
}

impl DecodeHead {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, dim: usize, cfg: &DecodeHeadConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, "head.conv1", dim, cfg.mid1, 3, rng)?,
            conv2: Conv2d::new(store, "head.conv2", cfg.mid1, cfg.mid2, 3, rng)?,
            out: Conv2d::new(store, "head.out", cfg.mid2, NUM_ARTICULATORS, 1, rng)?,
        })
    }
}

/// Tokens `[N, D]` on `grid` → logits `[4, H*W]`.
pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    head: &DecodeHead,
    tokens: Var,
    grid: (usize, usize),
    out_hw: (usize, usize),
) -> Result<Var> {
    let n = g.shape(tokens)[0];
    if n != grid.0 * grid.1 {
        return Err(Error::Shape(format!("{n} tokens do not fill grid {grid:?}")));
    }
    let (h, w) = out_hw;
    let (h2, w2) = (h / 2, w / 2);
    let map = g.transpose(tokens);
    let x = head.conv1.forward(g, map, grid.0, grid.1);
    let x = g.gelu(x);
    let x = g.upsample_bilinear(x, grid.0, grid.1, h2, w2);
    let x = head.conv2.forward(g, x, h2, w2);
    let x = g.gelu(x);
    let x = g.upsample_bilinear(x, h2, w2, h, w);
    Ok(head.out.forward(g, x, h, w))
}

/// `[4, H*W]` 0/1 target from ground-truth masks.
pub fn masks_to_target<T: Scalar>(masks: &[BinaryMask; NUM_ARTICULATORS]) -> Tensor<T> {
    let hw = masks[0].height() * masks[0].width();
    let mut data = Vec::with_capacity(NUM_ARTICULATORS * hw);
    for m in masks {
        data.extend(m.data().iter().map(|&b| if b { T::one() } else { T::zero() }));
    }
    Tensor::from_vec(&[NUM_ARTICULATORS, hw], data).expect("target")
}

/// Per-channel sigmoid BCE (mean over channels and pixels) plus per-channel
/// soft Dice `1 − (2Σpg + ε)/(Σp + Σg + ε)` averaged over channels.
pub fn seg_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    if g.shape(logits) != target.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs target {:?}",
            g.shape(logits),
            target.shape()
        )));
    }
    if target.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::Contract("segmentation target is not binary".into()));
    }
    let bce = g.bce_with_logits(logits, target.clone());
    let p = g.sigmoid(logits);
    let gt = g.constant(target.clone());
    let pg = g.mul(p, gt);
    let inter = g.sum_cols(pg);
    let sp = g.sum_cols(p);
    let sg = g.sum_cols(gt);
    let eps: T = lit(DICE_EPS);
    let num = g.scale(inter, lit(2.0));
    let num = g.add_scalar(num, eps);
    let den = g.add(sp, sg);
    let den = g.add_scalar(den, eps);
    let ratio = g.div(num, den);
    let mean_ratio = g.mean_all(ratio);
    let dice = g.scale(mean_ratio, -T::one());
    let dice = g.add_scalar(dice, T::one());
    Ok(g.add(bce, dice))
}

/// Logits for one frame, articulator-major `[4, H*W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLogits {
    pub height: usize,
    pub width: usize,
    pub data: Tensor<f32>,
}

impl SegLogits {
    pub fn new(height: usize, width: usize, data: Tensor<f32>) -> Result<Self> {
        if data.shape() != [NUM_ARTICULATORS, height * width] {
            return Err(Error::Shape(format!("logits {:?} for {height}x{width}", data.shape())));
        }
        Ok(Self { height, width, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.all_finite()
    }
}

/// Per-channel `sigmoid(z) > 0.5`, i.e. `z > 0`.
pub fn predict_masks(logits: &SegLogits) -> [BinaryMask; NUM_ARTICULATORS] {
    let hw = logits.height * logits.width;
    std::array::from_fn(|c| {
        let row = &logits.data.data()[c * hw..(c + 1) * hw];
        BinaryMask::from_vec(logits.height, logits.width, row.iter().map(|&z| z > 0.0).collect())
            .expect("logit shape")
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    InferFull,
    InferImageOnly,
}

impl Mode {
    pub fn tag(&self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::InferFull => "full",
            Mode::InferImageOnly => "image-only",
        }
    }
}

/// Audio as raw waveform `[1, T_a]` or precomputed encoder features `[T, D]`.
#[derive(Clone, Debug)]
pub enum AudioIn<T> {
    Absent,
    Waveform(Tensor<T>),
    Features(Tensor<T>),
}

#[derive(Clone, Debug)]
pub struct FrameInput<T> {
    /// `[1, H*W]` normalized image.
    pub image: Tensor<T>,
    pub prior: Option<PriorMap>,
    pub audio: AudioIn<T>,
    pub phon: Option<PhonologicalVector>,
}

pub struct SegForward {
    pub logits: Var,
    pub null_audio: bool,
    pub neutral_prior: bool,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub cfg: SegModelConfig,
    pub visual: VisualEncoder,
    pub fusion: PatchFusion,
    pub audio: Option<AudioEncoder>,
    pub layers: Vec<CrossAttnLayer>,
    pub null_bank: Option<NullAudioBank>,
    pub concat: Option<ConcatFusion>,
    pub head: DecodeHead,
}

impl SegModel {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &SegModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.encoder.visual.hidden;
        let visual = VisualEncoder::new(store, &cfg.encoder.visual, rng)?;
        let fusion = PatchFusion::new(store, cfg.encoder.visual.taps.len(), d)?;
        let audio = if cfg.fusion.uses_audio() {
            Some(AudioEncoder::new(store, &cfg.encoder.audio, rng)?)
        } else {
            None
        };
        let (mut layers, mut null_bank, mut concat) = (Vec::new(), None, None);
        match cfg.fusion {
            FusionKind::None => {}
            FusionKind::CrossAttention => {
                let dc = &cfg.decoder;
                let hidden = dc.ffn.then_some(d * dc.mlp_ratio);
                for l in 0..dc.depth {
                    layers.push(CrossAttnLayer::new(store, &format!("decoder.layers.{l}"), d, dc.heads, hidden, rng)?);
                }
                null_bank = Some(NullAudioBank::new(store, dc.null_tokens, d, rng)?);
            }
            FusionKind::Concat { audio, phon } => {
                let d_in = d + if audio { d } else { 0 } + if phon { NUM_ATTRIBUTES } else { 0 };
                let proj = Linear::new(store, "decoder.concat", d_in, d, true, rng)?;
                let null_audio = if audio {
                    Some(store.add("decoder.concat_null_audio", Tensor::zeros(&[1, d]))?)
                } else {
                    None
                };
                concat = Some(ConcatFusion { proj, null_audio, audio, phon });
            }
        }
        let head = DecodeHead::new(store, d, &cfg.head, rng)?;
        Ok(Self { cfg: cfg.clone(), visual, fusion, audio, layers, null_bank, concat, head })
    }

    pub fn frame_hw(&self) -> (usize, usize) {
        (self.cfg.encoder.visual.height, self.cfg.encoder.visual.width)
    }

    /// Audio encoder features `[T, D]` for a waveform, outside any training graph.
    pub fn audio_features<T: Scalar>(&self, store: &ParamStore<T>, waveform: &[T]) -> Result<Tensor<T>> {
        let enc = self
            .audio
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no audio encoder".into()))?;
        let mut g = Graph::inference(store);
        let w = g.constant(Tensor::from_vec(&[1, waveform.len()], waveform.to_vec())?);
        let out = enc.forward(&mut g, w)?;
        Ok(g.value(out.sequence.tokens).clone())
    }

    /// Builds the logits of one frame. `rng` is required in `Mode::Train`
    /// (modality dropout) and ignored otherwise.
    pub fn forward<T: Scalar, R: Rng>(
        &self,
        g: &mut Graph<T>,
        input: &FrameInput<T>,
        mode: Mode,
        rng: Option<&mut R>,
    ) -> Result<SegForward> {
        let (h, w) = self.frame_hw();
        if input.image.len() != h * w {
            return Err(Error::Shape(format!("image has {} pixels, model expects {h}x{w}", input.image.len())));
        }
        let (drop_audio, drop_prior) = match mode {
            Mode::Train => {
                let rng = rng.ok_or_else(|| Error::Contract("training forward needs an rng".into()))?;
                let dc = &self.cfg.decoder;
                let a = rng.gen::<f64>() < dc.p_audio;
                let p = rng.gen::<f64>() < dc.p_prior;
                (a, p)
            }
            Mode::InferFull => (false, false),
            Mode::InferImageOnly => (true, true),
        };
        let audio_needed = self.cfg.fusion.uses_audio() && !drop_audio;
        if audio_needed && matches!(input.audio, AudioIn::Absent) {
            return Err(Error::Contract("full-input forward without audio".into()));
        }

        // input stack
        let image = input.image.clone().reshape(&[1, h * w])?;
        let stack = if self.cfg.uses_prior() {
            let neutral;
            let prior = match (&input.prior, drop_prior) {
                (Some(p), false) => p,
                _ => {
                    neutral = neutral_prior(h, w);
                    &neutral
                }
            };
            concat_inputs(&image, prior)?
        } else {
            image
        };
        let neutral_used = self.cfg.uses_prior() && (drop_prior || input.prior.is_none());
        let x = g.constant(stack);
        let vis = self.visual.forward(g, x)?;
        let fused = self.fusion.forward(g, &self.visual.tapped(&vis))?;
        let grid = fused.grid.expect("fused grid");

        let audio_seq = if audio_needed {
            Some(match &input.audio {
                AudioIn::Waveform(wav) => {
                    let enc = self.audio.as_ref().expect("audio encoder");
                    let wv = g.constant(wav.clone().reshape(&[1, wav.len()])?);
                    enc.forward(g, wv)?.sequence.tokens
                }
                AudioIn::Features(f) => g.constant(f.clone()),
                AudioIn::Absent => unreachable!("checked above"),
            })
        } else {
            None
        };

        let mut tokens = fused.tokens;
        let mut null_used = false;
        match &self.cfg.fusion {
            FusionKind::None => {}
            FusionKind::CrossAttention => {
                let fa = match audio_seq {
                    Some(a) => a,
                    None => {
                        null_used = true;
                        g.param(self.null_bank.as_ref().expect("null bank").tokens)
                    }
                };
                for layer in &self.layers {
                    tokens = cross_attn_layer(g, layer, tokens, fa)?;
                }
            }
            FusionKind::Concat { .. } => {
                let cf = self.concat.as_ref().expect("concat fusion");
                let n = grid.0 * grid.1;
                let mut parts = vec![tokens];
                if cf.audio {
                    let a = match audio_seq {
                        Some(seq) => g.mean_rows(seq),
                        None => {
                            null_used = true;
                            g.param(cf.null_audio.expect("null audio"))
                        }
                    };
                    parts.push(g.broadcast_rows(a, n));
                }
                if cf.phon {
                    let bits = match (&input.phon, drop_prior) {
                        (Some(p), false) => p.as_f64(),
                        _ => [0.0; NUM_ATTRIBUTES],
                    };
                    let row = g.constant(Tensor::from_fn(&[1, NUM_ATTRIBUTES], |i| lit(bits[i])));
                    parts.push(g.broadcast_rows(row, n));
                }
                let cat = g.concat_cols(&parts);
                let delta = cf.proj.forward(g, cat);
                tokens = g.add(tokens, delta);
            }
        }
        let logits = decode(g, &self.head, tokens, grid, (h, w))?;
        Ok(SegForward { logits, null_audio: null_used, neutral_prior: neutral_used })
    }

    /// Forward-only logits in `f32`.
    pub fn infer(&self, store: &ParamStore<f32>, input: &FrameInput<f32>, mode: Mode) -> Result<SegLogits> {
        if mode == Mode::Train {
            return Err(Error::Contract("inference cannot run in train mode".into()));
        }
        let mut g = Graph::inference(store);
        let out = self.forward::<f32, rand_chacha::ChaCha8Rng>(&mut g, input, mode, None)?;
        let (h, w) = self.frame_hw();
        SegLogits::new(h, w, g.value(out.logits).clone())
    }

    /// Names of parameter groups trained in stage 3 on top of frozen encoders.
    pub fn is_stage3_trainable(name: &str) -> bool {
        name.starts_with("decoder.") || name.starts_with("head.") || name == PATCH_EXTRA
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{AudioEncoderConfig, VisualEncoderConfig};
    use crate::gradcheck::{check_inputs, check_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_cfg(channels: usize, fusion: FusionKind) -> SegModelConfig {
        SegModelConfig {
            encoder: EncoderConfig {
                visual: VisualEncoderConfig {
                    in_channels: channels,
                    height: 8,
                    width: 8,
                    patch: 4,
                    hidden: 8,
                    depth: 3,
                    heads: 2,
                    mlp_ratio: 2,
                    taps: vec![1, 2, 3],
                },
                audio: AudioEncoderConfig {
                    input_len: 30,
                    conv_channels: 4,
                    conv_layers: vec![(4, 2), (3, 2)],
                    hidden: 8,
                    depth: 1,
                    heads: 2,
                    mlp_ratio: 2,
                },
                proj_dim: 4,
            },
            decoder: CrossAttnDecoderConfig { depth: 2, heads: 2, null_tokens: 3, ..Default::default() },
            head: DecodeHeadConfig { mid1: 4, mid2: 3 },
            fusion,
        }
    }

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn concat_inputs_layout() {
        let img = Tensor::<f64>::from_fn(&[1, 16], |i| i as f64 / 16.0);
        let s = concat_inputs(&img, &neutral_prior(4, 4)).unwrap();
        assert_eq!(s.shape(), &[5, 16]);
        assert_eq!(&s.data()[..16], img.data());
        assert!(s.data()[16..].iter().all(|&v| v == 1.0));
        assert!(concat_inputs(&img, &neutral_prior(4, 5)).is_err());
    }

    #[test]
    fn decode_shapes_and_zero() {
        let mut store = ParamStore::<f64>::new();
        let head = DecodeHead::new(&mut store, 8, &DecodeHeadConfig { mid1: 4, mid2: 3 }, &mut rng(0)).unwrap();
        let mut g = Graph::inference(&store);
        let t = g.constant(Tensor::randn(&[4, 8], 1.0, &mut rng(1)));
        let y = decode(&mut g, &head, t, (2, 2), (8, 8)).unwrap();
        assert_eq!(g.shape(y), &[4, 64]);
        assert!(decode(&mut g, &head, t, (3, 2), (8, 8)).is_err());
        let z = g.constant(Tensor::zeros(&[4, 8]));
        let y = decode(&mut g, &head, z, (2, 2), (8, 8)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seg_loss_cases() {
        let mut r = rng(2);
        let target = Tensor::<f64>::from_fn(&[4, 9], |_| if r.gen::<bool>() { 1.0 } else { 0.0 });
        let mut g = Graph::detached();
        let perfect = g.constant(target.map(|t| if t > 0.5 { 40.0 } else { -40.0 }));
        let l = seg_loss(&mut g, perfect, &target).unwrap();
        assert!(g.value(l).data()[0] < 1e-3);

        let zero = g.constant(Tensor::zeros(&[4, 9]));
        let bce_only = g.bce_with_logits(zero, target.clone());
        assert!((g.value(bce_only).data()[0] - 2f64.ln()).abs() < 1e-12);

        let z = Tensor::<f64>::randn(&[4, 9], 2.0, &mut r);
        let zv = g.constant(z.clone());
        let l = seg_loss(&mut g, zv, &target).unwrap();
        let mut bce = 0.0;
        let mut dice = 0.0;
        for c in 0..4 {
            let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
            for i in 0..9 {
                let (x, y) = (z.at(c, i), target.at(c, i));
                let p = 1.0 / (1.0 + (-x).exp());
                bce += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                inter += p * y;
                sp += p;
                sg += y;
            }
            dice += 1.0 - (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS);
        }
        let expect = bce / 36.0 + dice / 4.0;
        assert!((g.value(l).data()[0] - expect).abs() < 1e-12);

        let bad = Tensor::full(&[4, 9], 0.5);
        assert!(matches!(seg_loss(&mut g, zv, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn seg_loss_gradient() {
        let mut r = rng(3);
        let target = Tensor::<f64>::from_fn(&[4, 6], |_| if r.gen::<bool>() { 1.0 } else { 0.0 });
        let z = Tensor::randn(&[4, 6], 1.5, &mut r);
        let rep = check_inputs(&[z], |g, v| seg_loss(g, v[0], &target).unwrap(), 100, 1e-6, 1e-4, &mut r);
        assert!(rep.ok(0.95), "{rep:?}");
    }

    fn layer(seed: u64) -> (ParamStore<f64>, CrossAttnLayer) {
        let mut store = ParamStore::new();
        let l = CrossAttnLayer::new(&mut store, "x", 6, 2, Some(12), &mut rng(seed)).unwrap();
        (store, l)
    }

    #[test]
    fn cross_attention_invariants() {
        let mut r = rng(4);
        let (store, l) = layer(5);
        let fv = Tensor::<f64>::randn(&[5, 6], 1.0, &mut r);
        let fa = Tensor::<f64>::randn(&[4, 6], 1.0, &mut r);
        let run = |fa: &Tensor<f64>, store: &ParamStore<f64>, l: &CrossAttnLayer| {
            let mut g = Graph::inference(store);
            let v = g.constant(fv.clone());
            let a = g.constant(fa.clone());
            let y = cross_attn_layer(&mut g, l, v, a).unwrap();
            g.value(y).clone()
        };
        let base = run(&fa, &store, &l);
        let perm = Tensor::from_fn(&[4, 6], |i| fa.at([2, 0, 3, 1][i / 6], i % 6));
        assert!(base.max_abs_diff(&run(&perm, &store, &l)) <= 1e-5);

        // identical tokens ≡ single token
        let one = Tensor::from_fn(&[1, 6], |i| fa.at(0, i));
        let rep = Tensor::from_fn(&[3, 6], |i| fa.at(0, i % 6));
        assert!(run(&one, &store, &l).max_abs_diff(&run(&rep, &store, &l)) < 1e-12);

        let mut g = Graph::<f64>::inference(&store);
        let v = g.constant(fv.clone());
        let empty = g.constant(Tensor::zeros(&[0, 6]));
        assert!(matches!(cross_attn_layer(&mut g, &l, v, empty), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_attention_single_token_and_zeroed_attention() {
        let mut r = rng(6);
        let mut store = ParamStore::<f64>::new();
        let l = CrossAttnLayer::new(&mut store, "x", 6, 2, None, &mut r).unwrap();
        let fv = Tensor::<f64>::randn(&[5, 6], 1.0, &mut r);
        let fa = Tensor::<f64>::randn(&[1, 6], 1.0, &mut r);
        let ln = |x: &Tensor<f64>| {
            Tensor::from_fn(x.shape(), |i| {
                let row = x.row(i / x.cols());
                let m = row.iter().sum::<f64>() / row.len() as f64;
                let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / row.len() as f64;
                (x.data()[i] - m) / (var + 1e-5).sqrt()
            })
        };
        // analytic: every query receives out(v(fa))
        let val = {
            let vv = fa.matmul(store.get(l.attn.v.weight)).zip_map(store.get(l.attn.v.bias.unwrap()), |a, b| a + b);
            vv.matmul(store.get(l.attn.out.weight)).zip_map(store.get(l.attn.out.bias.unwrap()), |a, b| a + b)
        };
        let expect = ln(&Tensor::from_fn(&[5, 6], |i| fv.data()[i] + val.data()[i % 6]));
        let mut g = Graph::inference(&store);
        let (v, a) = (g.constant(fv.clone()), g.constant(fa.clone()));
        let y = cross_attn_layer(&mut g, &l, v, a).unwrap();
        assert!(g.value(y).max_abs_diff(&expect) < 1e-10);

        let mut zeroed = store.clone();
        for id in [l.attn.out.weight, l.attn.out.bias.unwrap()] {
            let s = zeroed.get(id).shape().to_vec();
            *zeroed.get_mut(id) = Tensor::zeros(&s);
        }
        let mut g = Graph::inference(&zeroed);
        let (v, a) = (g.constant(fv.clone()), g.constant(fa.clone()));
        let y = cross_attn_layer(&mut g, &l, v, a).unwrap();
        assert!(g.value(y).max_abs_diff(&ln(&fv)) < 1e-10);
    }

    #[test]
    fn cross_attention_gradient() {
        let mut r = rng(7);
        let (mut store, l) = layer(8);
        // inputs live in the store so one check covers them and the weights
        let fv = store.add("in.fv", Tensor::randn(&[4, 6], 1.0, &mut r)).unwrap();
        let fa = store.add("in.fa", Tensor::randn(&[3, 6], 1.0, &mut r)).unwrap();
        let probe = Tensor::<f64>::randn(&[4, 6], 1.0, &mut r);
        let ids: Vec<ParamId> = store.ids().collect();
        let rep = check_params(
            &store,
            &ids,
            |g| {
                let (v, a) = (g.param(fv), g.param(fa));
                let y = cross_attn_layer(g, &l, v, a).unwrap();
                let p = g.constant(probe.clone());
                let m = g.mul(y, p);
                g.sum_all(m)
            },
            8,
            1e-6,
            1e-4,
            &mut r,
        );
        assert!(rep.ok(0.95), "{rep:?}");
    }

    #[test]
    fn predict_threshold_rule() {
        let data = Tensor::from_vec(&[4, 1], vec![10.0, -10.0, 0.0, 1e-7]).unwrap();
        let m = predict_masks(&SegLogits::new(1, 1, data).unwrap());
        assert_eq!([m[0].get(0, 0), m[1].get(0, 0), m[2].get(0, 0), m[3].get(0, 0)], [true, false, false, true]);
    }

    fn frame(r: &mut ChaCha8Rng, prior: Option<PriorMap>) -> FrameInput<f64> {
        FrameInput {
            image: Tensor::from_fn(&[1, 64], |_| r.gen::<f64>()),
            prior,
            audio: AudioIn::Waveform(Tensor::randn(&[1, 30], 0.5, r)),
            phon: Some(PhonologicalVector::from_names(&["voiced", "labial", "stop"]).unwrap()),
        }
    }

    #[test]
    fn inflation_identity_and_param_counts() {
        let mut r = rng(9);
        let cfg1 = tiny_cfg(1, FusionKind::CrossAttention);
        let mut s1 = ParamStore::<f64>::new();
        let m1 = SegModel::new(&mut s1, &cfg1, &mut r).unwrap();
        let cfg5 = tiny_cfg(5, FusionKind::CrossAttention);
        let mut s5 = ParamStore::<f64>::new();
        let m5 = SegModel::new(&mut s5, &cfg5, &mut rng(99)).unwrap();
        let copied = inflate_patch_embed(&s1, &mut s5).unwrap();
        assert_eq!(copied, s1.len());
        let non_patch = |s: &ParamStore<f64>| {
            s.iter().filter(|(_, n, _)| !n.starts_with("visual.patch_embed")).map(|(_, _, t)| t.len()).sum::<usize>()
        };
        assert_eq!(non_patch(&s1), non_patch(&s5));

        let mut box_prior = neutral_prior(8, 8);
        box_prior = PriorMap::new(std::array::from_fn(|c| {
            BinaryMask::from_fn(8, 8, |i, j| (i + j + c) % 3 == 0)
        }))
        .unwrap_or(box_prior);
        let f = frame(&mut r, Some(box_prior));
        let run = |m: &SegModel, s: &ParamStore<f64>| {
            let mut g = Graph::inference(s);
            let x = m.forward::<f64, ChaCha8Rng>(&mut g, &f, Mode::InferFull, None).unwrap();
            g.value(x.logits).clone()
        };
        assert!(run(&m1, &s1).max_abs_diff(&run(&m5, &s5)) <= 1e-6);

        let mut bad = ParamStore::<f64>::new();
        SegModel::new(&mut bad, &SegModelConfig { encoder: EncoderConfig { visual: VisualEncoderConfig { patch: 2, taps: vec![1, 2, 3], ..cfg5.encoder.visual.clone() }, ..cfg5.encoder.clone() }, ..cfg5.clone() }, &mut r).unwrap();
        assert!(matches!(inflate_patch_embed(&s1, &mut bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn dropout_disabled_train_equals_full_and_image_only_runs() {
        let mut r = rng(10);
        let mut cfg = tiny_cfg(5, FusionKind::CrossAttention);
        cfg.decoder.p_audio = 0.0;
        cfg.decoder.p_prior = 0.0;
        let mut s = ParamStore::<f64>::new();
        let m = SegModel::new(&mut s, &cfg, &mut r).unwrap();
        let f = frame(&mut r, Some(neutral_prior(8, 8)));
        let mut g = Graph::inference(&s);
        let a = m.forward(&mut g, &f, Mode::Train, Some(&mut r)).unwrap();
        let b = m.forward::<f64, ChaCha8Rng>(&mut g, &f, Mode::InferFull, None).unwrap();
        assert_eq!(g.value(a.logits), g.value(b.logits));

        let img_only = FrameInput { prior: None, audio: AudioIn::Absent, phon: None, ..f.clone() };
        let c = m.forward::<f64, ChaCha8Rng>(&mut g, &img_only, Mode::InferImageOnly, None).unwrap();
        assert!(c.null_audio && c.neutral_prior);
        assert!(g.value(c.logits).all_finite());
        assert!(matches!(
            m.forward::<f64, ChaCha8Rng>(&mut g, &img_only, Mode::InferFull, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn baseline_fusions_run_and_count() {
        let mut counts = Vec::new();
        for fusion in [
            FusionKind::None,
            FusionKind::Concat { audio: true, phon: false },
            FusionKind::Concat { audio: true, phon: true },
        ] {
            let mut r = rng(11);
            let mut s = ParamStore::<f64>::new();
            let m = SegModel::new(&mut s, &tiny_cfg(1, fusion), &mut r).unwrap();
            let f = frame(&mut r, None);
            let mut g = Graph::inference(&s);
            let y = m.forward::<f64, ChaCha8Rng>(&mut g, &f, Mode::InferFull, None).unwrap();
            assert_eq!(g.shape(y.logits), &[4, 64]);
            counts.push(s.total_count());
        }
        assert!(counts[0] < counts[1] && counts[1] < counts[2]);
    }
}
