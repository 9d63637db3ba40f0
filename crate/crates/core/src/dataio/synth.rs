//! Synthetic vocal-tract phantom corpus.
//!
//! Each speaker has its own anatomy (offset, scale, articulator sizes),
//! intensity response and formant scaling. A task is a phoneme script shared
//! by all speakers. Articulators relax towards per-phoneme target poses frame
//! by frame, so neighbouring phonemes blend. Audio per frame is a mixture of
//! three formant sinusoids of the active phoneme plus noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::preprocess::{audio_context, preprocess_frame, window_len, SubjectStats};
use super::SegSample;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::phonology::{PhonAttribute, PhonemeInventory, PhonologicalVector, SILENCE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub n_tasks: usize,
    pub frames_per_task: usize,
    /// Processed frame geometry.
    pub height: usize,
    pub width: usize,
    /// Raw (acquisition) frame size before resizing.
    pub native_size: usize,
    pub native_spacing_mm: f64,
    pub sample_rate: u32,
    pub fps: f64,
    pub snr_db: f64,
    pub image_noise: f64,
    /// Maximum per-speaker translation, in frame fractions.
    pub anatomy_jitter: f64,
    /// Maximum relative per-speaker scale change.
    pub scale_jitter: f64,
    /// Minimum lower-lip travel from the rest pose for labial closure.
    pub closure_distance: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 8,
            n_tasks: 10,
            frames_per_task: 12,
            height: 48,
            width: 48,
            native_size: 32,
            native_spacing_mm: 2.4,
            sample_rate: 16_000,
            fps: 15.0,
            snr_db: 15.0,
            image_noise: 0.05,
            anatomy_jitter: 0.04,
            scale_jitter: 0.06,
            closure_distance: 0.06,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_speakers", self.n_speakers),
            ("n_tasks", self.n_tasks),
            ("frames_per_task", self.frames_per_task),
            ("height", self.height),
            ("width", self.width),
            ("native_size", self.native_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.fps > 0.0) || self.sample_rate == 0 {
            return Err(Error::Config("fps and sample_rate must be positive".into()));
        }
        if window_len(self.sample_rate, self.fps) == 0 {
            return Err(Error::Config("fps exceeds sample rate".into()));
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        window_len(self.sample_rate, self.fps)
    }

    /// Millimetres per processed pixel.
    pub fn spacing_mm(&self) -> f64 {
        self.native_spacing_mm * self.native_size as f64 / self.height as f64
    }
}

/// Articulator configuration in canonical (speaker-independent) frame coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub tongue_cx: f64,
    pub tongue_cy: f64,
    pub tongue_rx: f64,
    pub tongue_ry: f64,
    /// Radians below horizontal, pointing towards the pharynx.
    pub velum_angle: f64,
    /// Lower edge of the upper lip.
    pub upper_lip_y: f64,
    /// Upper edge of the lower lip.
    pub lower_lip_y: f64,
}

impl Pose {
    fn rest() -> Self {
        Self {
            tongue_cx: 0.53,
            tongue_cy: 0.66,
            tongue_rx: 0.17,
            tongue_ry: 0.11,
            velum_angle: 0.75,
            upper_lip_y: 0.47,
            lower_lip_y: 0.57,
        }
    }

    fn lerp(&self, t: &Pose, a: f64) -> Pose {
        let f = |x: f64, y: f64| x + a * (y - x);
        Pose {
            tongue_cx: f(self.tongue_cx, t.tongue_cx),
            tongue_cy: f(self.tongue_cy, t.tongue_cy),
            tongue_rx: f(self.tongue_rx, t.tongue_rx),
            tongue_ry: f(self.tongue_ry, t.tongue_ry),
            velum_angle: f(self.velum_angle, t.velum_angle),
            upper_lip_y: f(self.upper_lip_y, t.upper_lip_y),
            lower_lip_y: f(self.lower_lip_y, t.lower_lip_y),
        }
    }
}

const VELUM_RAISED: f64 = 0.3;
const VELUM_LOWERED: f64 = 1.05;
const HINGE: (f64, f64) = (0.60, 0.33);
const VELUM_LEN: f64 = 0.17;
const VELUM_HALF_THICK: f64 = 0.032;
const LIP_X: (f64, f64) = (0.08, 0.24);
const LIP_THICK: f64 = 0.09;

/// Target articulator pose of a phoneme.
pub fn target_pose(
    label: &str,
    inventory: &PhonemeInventory,
    closure_distance: f64,
) -> Result<Pose> {
    let phon = inventory.encode_phoneme(label)?;
    let mut p = Pose::rest();
    if phon.is_silence() {
        return Ok(p);
    }
    let has = |n: &str| phon.has(PhonAttribute::by_name(n).expect("attribute"));
    p.velum_angle = if has("nasal") { VELUM_LOWERED } else { VELUM_RAISED };

    let vowel_tongue = match label {
        "iy" => Some((0.48, 0.56, 0.16, 0.10)),
        "ih" => Some((0.49, 0.59, 0.16, 0.10)),
        "eh" => Some((0.50, 0.63, 0.17, 0.10)),
        "ae" => Some((0.50, 0.69, 0.18, 0.09)),
        "aa" => Some((0.57, 0.72, 0.16, 0.09)),
        "ah" => Some((0.53, 0.67, 0.17, 0.10)),
        "ao" => Some((0.58, 0.68, 0.16, 0.10)),
        "uh" => Some((0.57, 0.62, 0.16, 0.11)),
        "uw" => Some((0.58, 0.58, 0.15, 0.11)),
        "er" => Some((0.50, 0.60, 0.16, 0.11)),
        _ => None,
    };
    let place_tongue = if has("dental") {
        (0.40, 0.62, 0.16, 0.11)
    } else if has("alveolar") {
        (0.43, 0.58, 0.16, 0.11)
    } else if has("postalveolar") {
        (0.47, 0.57, 0.16, 0.11)
    } else if has("palatal") {
        (0.50, 0.56, 0.16, 0.10)
    } else if has("velar") {
        (0.59, 0.57, 0.15, 0.11)
    } else {
        (0.53, 0.68, 0.17, 0.10)
    };
    let (cx, cy, rx, ry) = vowel_tongue.unwrap_or(place_tongue);
    p.tongue_cx = cx;
    p.tongue_cy = cy;
    p.tongue_rx = rx;
    p.tongue_ry = ry;

    let rest = Pose::rest();
    if has("labial") && !has("vowel") && !has("approximant") {
        // full closure: lips meet
        p.lower_lip_y = rest.lower_lip_y - closure_distance - 0.005;
        p.upper_lip_y = p.lower_lip_y;
    } else if has("labial") {
        // rounding
        p.lower_lip_y = rest.lower_lip_y - 0.035;
        p.upper_lip_y = rest.upper_lip_y + 0.01;
    } else if has("labiodental") {
        p.lower_lip_y = rest.lower_lip_y - 0.05;
    }
    Ok(p)
}

/// Canonical formant triple `(frequency Hz, amplitude)` of a phoneme.
pub fn phoneme_formants(label: &str, phon: &PhonologicalVector) -> [(f64, f64); 3] {
    if phon.is_silence() {
        return [(0.0, 0.0); 3];
    }
    let has = |n: &str| phon.has(PhonAttribute::by_name(n).expect("attribute"));
    let base = match label {
        "iy" => [270.0, 2290.0, 3010.0],
        "ih" => [390.0, 1990.0, 2550.0],
        "eh" => [530.0, 1840.0, 2480.0],
        "ae" => [660.0, 1720.0, 2410.0],
        "aa" => [730.0, 1090.0, 2440.0],
        "ah" => [520.0, 1190.0, 2390.0],
        "ao" => [570.0, 840.0, 2410.0],
        "uh" => [440.0, 1020.0, 2240.0],
        "uw" => [300.0, 870.0, 2240.0],
        "er" => [490.0, 1350.0, 1690.0],
        _ => {
            let mut f = if has("labial") {
                [300.0, 900.0, 2200.0]
            } else if has("labiodental") {
                [350.0, 1100.0, 2350.0]
            } else if has("dental") {
                [360.0, 1400.0, 2650.0]
            } else if has("alveolar") {
                [400.0, 1700.0, 2750.0]
            } else if has("postalveolar") {
                [420.0, 1900.0, 2500.0]
            } else if has("palatal") {
                [300.0, 2200.0, 3000.0]
            } else if has("velar") {
                [350.0, 2000.0, 2300.0]
            } else {
                [500.0, 1500.0, 2500.0]
            };
            if has("nasal") {
                f[0] = 250.0;
                f[2] += 300.0;
            }
            if has("fricative") {
                f[2] += 700.0;
            }
            if has("affricate") {
                f[2] += 450.0;
                f[1] += 120.0;
            }
            if has("stop") {
                f[0] += 120.0;
            }
            if has("approximant") {
                f[1] -= 150.0;
            }
            f
        }
    };
    // small label-dependent offset keeps otherwise identical triples apart
    let h = label.bytes().fold(7u32, |a, b| a.wrapping_mul(31).wrapping_add(b as u32));
    let jitter = ((h % 9) as f64 - 4.0) * 12.0;
    let voiced = has("voiced");
    let amps = if voiced { [0.35, 0.25, 0.15] } else { [0.12, 0.10, 0.08] };
    [
        (base[0] + jitter, amps[0]),
        (base[1] + 2.0 * jitter, amps[1]),
        (base[2] + 3.0 * jitter, amps[2]),
    ]
}

/// Per-speaker anatomy, intensity response and voice.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpeaker {
    pub index: usize,
    pub offset: (f64, f64),
    pub scale: f64,
    pub tongue_scale: f64,
    pub lip_scale: f64,
    pub smoothing: f64,
    pub gain: f64,
    pub bias: f64,
    pub noise_std: f64,
    pub shading: (f64, f64),
    pub formant_scale: f64,
}

impl SyntheticSpeaker {
    pub fn subject_id(&self) -> String {
        format!("spk{:02}", self.index)
    }

    fn sample<R: Rng>(index: usize, cfg: &SynthConfig, rng: &mut R) -> Self {
        let j = cfg.anatomy_jitter;
        let s = cfg.scale_jitter;
        Self {
            index,
            offset: (rng.gen_range(-j..=j), rng.gen_range(-j..=j)),
            scale: 1.0 + rng.gen_range(-s..=s),
            tongue_scale: rng.gen_range(0.92..1.08),
            lip_scale: rng.gen_range(0.85..1.15),
            smoothing: rng.gen_range(0.55..0.8),
            gain: rng.gen_range(1500.0..3000.0),
            bias: rng.gen_range(50.0..200.0),
            noise_std: cfg.image_noise * rng.gen_range(0.8..1.4),
            shading: (rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25)),
            formant_scale: rng.gen_range(0.88..1.12),
        }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (
            0.5 + self.scale * (x - 0.5) + self.offset.0,
            0.5 + self.scale * (y - 0.5) + self.offset.1,
        )
    }

    fn shapes(&self, p: &Pose) -> Shapes {
        let (tcx, tcy) = self.map(p.tongue_cx, p.tongue_cy);
        let ts = self.scale * self.tongue_scale;
        let (hx, hy) = self.map(HINGE.0, HINGE.1);
        let len = VELUM_LEN * self.scale;
        let end = (hx + len * p.velum_angle.cos(), hy + len * p.velum_angle.sin());
        let (lx0, ul) = self.map(LIP_X.0, p.upper_lip_y);
        let (lx1, ll) = self.map(LIP_X.1, p.lower_lip_y);
        let thick = LIP_THICK * self.scale * self.lip_scale;
        Shapes {
            tongue: (tcx, tcy, p.tongue_rx * ts, p.tongue_ry * ts),
            velum: ((hx, hy), end, VELUM_HALF_THICK * self.scale),
            upper_lip: (lx0, lx1, ul - thick, ul),
            lower_lip: (lx0, lx1, ll, ll + thick),
        }
    }

    fn check_inside(&self, p: &Pose) -> Result<()> {
        let s = self.shapes(p);
        let (cx, cy, rx, ry) = s.tongue;
        let ((hx, hy), (ex, ey), r) = s.velum;
        let xs = [cx - rx, cx + rx, hx - r, hx + r, ex - r, ex + r, s.upper_lip.0, s.upper_lip.1];
        let ys = [cy - ry, cy + ry, hy - r, hy + r, ey - r, ey + r, s.upper_lip.2, s.lower_lip.3];
        let inside = |v: f64| (0.02..=0.98).contains(&v);
        if xs.iter().chain(&ys).all(|&v| inside(v)) {
            Ok(())
        } else {
            Err(Error::Generation {
                speaker: self.index,
                reason: "articulator pose leaves the field of view".into(),
            })
        }
    }
}

struct Shapes {
    tongue: (f64, f64, f64, f64),
    velum: ((f64, f64), (f64, f64), f64),
    upper_lip: (f64, f64, f64, f64),
    lower_lip: (f64, f64, f64, f64),
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

impl Shapes {
    /// Articulator membership at a point; velum takes precedence over tongue.
    fn member(&self, x: f64, y: f64) -> [bool; 4] {
        let (cx, cy, rx, ry) = self.tongue;
        let (a, b, r) = self.velum;
        let velum = seg_dist((x, y), a, b) <= r;
        let tongue = !velum && ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0;
        let in_box = |bx: (f64, f64, f64, f64)| x >= bx.0 && x <= bx.1 && y >= bx.2 && y <= bx.3;
        [tongue, velum, in_box(self.upper_lip), in_box(self.lower_lip)]
    }

    fn intensity(&self, x: f64, y: f64) -> f64 {
        let m = self.member(x, y);
        if m[0] {
            return 0.64;
        }
        if m[1] {
            return 0.58;
        }
        if m[2] || m[3] {
            return 0.60;
        }
        let (lx0, lx1, _, _) = self.upper_lip;
        let (hx, hy) = self.velum.0;
        if x < lx0 && (0.25..0.78).contains(&y) {
            return 0.60; // face
        }
        if (lx0..lx1).contains(&x) && (0.72..0.86).contains(&y) {
            return 0.42; // chin
        }
        if (0.26..hx).contains(&x) && (hy - 0.05..hy).contains(&y) {
            return 0.48; // hard palate
        }
        if (0.84..0.92).contains(&x) && (0.22..0.92).contains(&y) {
            return 0.45; // pharyngeal wall
        }
        if (0.26..0.84).contains(&x) && (0.80..0.92).contains(&y) {
            return 0.52; // floor of mouth
        }
        0.06
    }
}

/// Raw acquisition frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawFrame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawUtterance {
    pub subject_id: String,
    pub task_id: String,
    pub frames: Vec<RawFrame>,
    /// Ground truth at processed resolution, per frame.
    pub masks: Vec<[BinaryMask; 4]>,
    pub phonemes: Vec<String>,
    pub waveform: Vec<f32>,
    /// Smoothed canonical poses, per frame (empty for loaded corpora).
    pub poses: Vec<Pose>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub config: SynthConfig,
    pub subjects: Vec<String>,
    pub tasks: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub speakers: Vec<SyntheticSpeaker>,
    pub utterances: Vec<RawUtterance>,
}

impl Corpus {
    pub fn stats_for(&self, subject: &str) -> Option<SubjectStats> {
        SubjectStats::from_frames(
            self.utterances
                .iter()
                .filter(|u| u.subject_id == subject)
                .flat_map(|u| u.frames.iter().map(|f| f.pixels.as_slice())),
        )
    }

    pub fn num_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.frames.len()).sum()
    }

    /// Preprocesses every frame into a [`SegSample`].
    pub fn samples(&self) -> Result<Vec<SegSample>> {
        let cfg = &self.meta.config;
        let mut out = Vec::with_capacity(self.num_frames());
        for subject in &self.meta.subjects {
            let stats = self
                .stats_for(subject)
                .ok_or_else(|| Error::Domain(format!("subject {subject} has no frames")))?;
            for u in self.utterances.iter().filter(|u| &u.subject_id == subject) {
                for (i, f) in u.frames.iter().enumerate() {
                    let raw: Vec<f64> = f.pixels.iter().map(|&v| v as f64).collect();
                    let image = preprocess_frame(&raw, f.height, f.width, stats, cfg.height, cfg.width)
                        .map_err(|e| match e {
                            Error::DegenerateSubject(d) => {
                                Error::DegenerateSubject(format!("{subject}: {d}"))
                            }
                            other => other,
                        })?;
                    out.push(SegSample {
                        image,
                        audio: audio_context(&u.waveform, i, cfg.fps, cfg.sample_rate),
                        phoneme: u.phonemes[i].clone(),
                        masks: u.masks[i].clone(),
                        subject_id: u.subject_id.clone(),
                        task_id: u.task_id.clone(),
                        frame_index: i,
                    });
                }
            }
        }
        Ok(out)
    }
}

fn stream(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn task_script(cfg: &SynthConfig, task: usize, inventory: &PhonemeInventory) -> Vec<String> {
    let vowel = PhonAttribute::by_name("vowel").expect("attribute");
    let (vowels, consonants): (Vec<&str>, Vec<&str>) = inventory
        .labels()
        .partition(|l| inventory.encode_phoneme(l).map(|p| p.has(vowel)).unwrap_or(false));
    let mut rng = stream(cfg.seed, 1, task as u64);
    let n = cfg.frames_per_task;
    let mut script = vec![SILENCE.to_string()];
    let mut use_vowel = false;
    while script.len() < n.saturating_sub(1).max(1) {
        let (pool, max_dur) = if use_vowel { (&vowels, 3) } else { (&consonants, 2) };
        let label = pool[rng.gen_range(0..pool.len())];
        for _ in 0..rng.gen_range(1..=max_dur) {
            script.push(label.to_string());
        }
        use_vowel = !use_vowel;
    }
    script.truncate(n.saturating_sub(1).max(1));
    while script.len() < n {
        script.push(SILENCE.to_string());
    }
    script
}

fn render_utterance(
    cfg: &SynthConfig,
    spk: &SyntheticSpeaker,
    task: usize,
    script: &[String],
    inventory: &PhonemeInventory,
    rng: &mut ChaCha8Rng,
) -> Result<RawUtterance> {
    let (h, w, ns) = (cfg.height, cfg.width, cfg.native_size);
    let win = cfg.window();
    let sr = cfg.sample_rate as f64;
    let img_noise = Normal::new(0.0, spk.noise_std.max(1e-12)).expect("normal");
    let ref_power = 0.5 * (0.35f64.powi(2) + 0.25f64.powi(2) + 0.15f64.powi(2));
    let audio_noise =
        Normal::new(0.0, (ref_power / 10f64.powf(cfg.snr_db / 10.0)).sqrt()).expect("normal");

    let mut pose = Pose::rest();
    let mut frames = Vec::with_capacity(script.len());
    let mut masks = Vec::with_capacity(script.len());
    let mut poses = Vec::with_capacity(script.len());
    let mut waveform = Vec::with_capacity(script.len() * win);
    let mut phase = [0.0f64; 3];
    const SS: usize = 2;

    for label in script {
        let target = target_pose(label, inventory, cfg.closure_distance)?;
        pose = pose.lerp(&target, spk.smoothing);
        spk.check_inside(&pose)?;
        poses.push(pose);
        let shapes = spk.shapes(&pose);

        let m: [BinaryMask; 4] = std::array::from_fn(|k| {
            BinaryMask::from_fn(h, w, |r, c| {
                shapes.member((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64)[k]
            })
        });
        masks.push(m);

        let mut pixels = Vec::with_capacity(ns * ns);
        for r in 0..ns {
            for c in 0..ns {
                let mut v = 0.0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let x = (c as f64 + (sx as f64 + 0.5) / SS as f64) / ns as f64;
                        let y = (r as f64 + (sy as f64 + 0.5) / SS as f64) / ns as f64;
                        v += shapes.intensity(x, y);
                    }
                }
                v /= (SS * SS) as f64;
                let (x, y) = ((c as f64 + 0.5) / ns as f64, (r as f64 + 0.5) / ns as f64);
                v *= 1.0 + spk.shading.0 * (x - 0.5) + spk.shading.1 * (y - 0.5);
                v += img_noise.sample(rng);
                let raw = (spk.gain * v + spk.bias).round().clamp(0.0, u16::MAX as f64);
                pixels.push(raw as u16);
            }
        }
        frames.push(RawFrame { height: ns, width: ns, pixels });

        let phon = inventory.encode_phoneme(label)?;
        let formants = phoneme_formants(label, &phon);
        let has = |n: &str| phon.has(PhonAttribute::by_name(n).expect("attribute"));
        let hiss = if has("fricative") || has("affricate") { 0.15 } else { 0.0 };
        for _ in 0..win {
            let mut s = 0.0;
            for (k, &(f, a)) in formants.iter().enumerate() {
                phase[k] = (phase[k] + 2.0 * PI * f * spk.formant_scale / sr) % (2.0 * PI);
                s += a * phase[k].sin();
            }
            s += hiss * rng.gen_range(-1.0..1.0) + audio_noise.sample(rng);
            waveform.push(s as f32);
        }
    }
    Ok(RawUtterance {
        subject_id: spk.subject_id(),
        task_id: format!("task{task:02}"),
        frames,
        masks,
        phonemes: script.to_vec(),
        waveform,
        poses,
    })
}

/// Generates the full speaker × task corpus; deterministic under `cfg.seed`.
pub fn generate_corpus(cfg: &SynthConfig, inventory: &PhonemeInventory) -> Result<Corpus> {
    cfg.validate()?;
    let scripts: Vec<Vec<String>> =
        (0..cfg.n_tasks).map(|t| task_script(cfg, t, inventory)).collect();

    let per_speaker: Vec<Result<(SyntheticSpeaker, Vec<RawUtterance>)>> = (0..cfg.n_speakers)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream(cfg.seed, 2, s as u64);
            let spk = SyntheticSpeaker::sample(s, cfg, &mut rng);
            // every target pose must fit before any frame is rendered
            spk.check_inside(&Pose::rest())?;
            for l in inventory.labels() {
                spk.check_inside(&target_pose(l, inventory, cfg.closure_distance)?)?;
            }
            let utts = scripts
                .iter()
                .enumerate()
                .map(|(t, script)| render_utterance(cfg, &spk, t, script, inventory, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Ok((spk, utts))
        })
        .collect();

    let mut speakers = Vec::new();
    let mut utterances = Vec::new();
    for r in per_speaker {
        let (spk, utts) = r?;
        speakers.push(spk);
        utterances.extend(utts);
    }
    Ok(Corpus {
        meta: CorpusMeta {
            config: cfg.clone(),
            subjects: speakers.iter().map(SyntheticSpeaker::subject_id).collect(),
            tasks: (0..cfg.n_tasks).map(|t| format!("task{t:02}")).collect(),
        },
        speakers,
        utterances,
    })
}
