use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Global intensity range of one subject's raw frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubjectStats {
    pub min: f64,
    pub max: f64,
}

impl SubjectStats {
    pub fn from_frames<'a>(frames: impl IntoIterator<Item = &'a [u16]>) -> Option<Self> {
        let mut it = frames.into_iter().flat_map(|f| f.iter().copied());
        let first = it.next()? as f64;
        let (mut lo, mut hi) = (first, first);
        for v in it {
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
        Some(Self { min: lo, max: hi })
    }
}

/// Bilinear resize with half-pixel centres (edge-clamped).
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w);
    let axis = |inp: usize, out: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(h, oh);
    let xs = axis(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Resizes a raw frame to `target_h x target_w` and maps the subject's
/// intensity range onto `[0, 1]`.
pub fn preprocess_frame(
    raw: &[f64],
    raw_h: usize,
    raw_w: usize,
    stats: SubjectStats,
    target_h: usize,
    target_w: usize,
) -> Result<Tensor<f32>> {
    if raw.len() != raw_h * raw_w {
        return Err(Error::Shape(format!("raw frame {raw_h}x{raw_w} has {} pixels", raw.len())));
    }
    let span = stats.max - stats.min;
    if !(span > 0.0) {
        return Err(Error::DegenerateSubject(format!("range [{}, {}]", stats.min, stats.max)));
    }
    let resized = if (raw_h, raw_w) == (target_h, target_w) {
        raw.to_vec()
    } else {
        resize_bilinear(raw, raw_h, raw_w, target_h, target_w)
    };
    let data = resized.iter().map(|&v| (((v - stats.min) / span).clamp(0.0, 1.0)) as f32).collect();
    Tensor::from_vec(&[target_h, target_w], data)
}

/// Samples per video frame.
pub fn window_len(sample_rate: u32, fps: f64) -> usize {
    (sample_rate as f64 / fps).floor() as usize
}

/// `[preceding | aligned | following]` windows around `frame_index`, zero padded.
pub fn audio_context(waveform: &[f32], frame_index: usize, fps: f64, sample_rate: u32) -> Vec<f32> {
    let win = window_len(sample_rate, fps);
    let mut out = vec![0.0f32; 3 * win];
    let start = frame_index as isize * win as isize - win as isize;
    for (k, o) in out.iter_mut().enumerate() {
        let i = start + k as isize;
        if i >= 0 && (i as usize) < waveform.len() {
            *o = waveform[i as usize];
        }
    }
    out
}
