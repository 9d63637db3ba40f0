//! Directory layout:
//!
//! ```text
//! root/corpus.toml                    corpus metadata
//! root/manifest.csv                   path,sha256 for every data file
//! root/<subject>/<task>/frame_NNNN.png  16-bit grayscale raw frame
//! root/<subject>/<task>/mask_NNNN.png   RGBA, one articulator per channel
//! root/<subject>/<task>/alignment.csv   frame_index,phoneme,start_sample
//! root/<subject>/<task>/audio.wav       mono 32-bit float waveform
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgba};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::{Corpus, CorpusMeta, RawFrame, RawUtterance};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub const MANIFEST_FILE: &str = "manifest.csv";
const META_FILE: &str = "corpus.toml";

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct AlignmentRow {
    frame_index: usize,
    phoneme: String,
    start_sample: usize,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn parse_err(path: &Path, detail: impl ToString) -> Error {
    Error::Parse { path: path.to_path_buf(), detail: detail.to_string() }
}

fn write_file(root: &Path, rel: &str, bytes: &[u8], manifest: &mut Vec<ManifestRow>) -> Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    manifest.push(ManifestRow { path: rel.to_string(), sha256: sha256_hex(bytes) });
    Ok(())
}

fn png_bytes<P, C>(img: &ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Contract(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

fn wav_bytes(samples: &[f32], sample_rate: u32) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, spec)
            .map_err(|e| Error::Contract(format!("wav encoding failed: {e}")))?;
        for &s in samples {
            w.write_sample(s).map_err(|e| Error::Contract(format!("wav encoding failed: {e}")))?;
        }
        w.finalize().map_err(|e| Error::Contract(format!("wav encoding failed: {e}")))?;
    }
    Ok(cursor.into_inner())
}

/// Writes the corpus under `root` and returns the manifest hash.
pub fn write_corpus(corpus: &Corpus, root: &Path) -> Result<String> {
    let mut manifest = Vec::new();
    let meta = toml::to_string(&corpus.meta).map_err(|e| Error::Config(e.to_string()))?;
    write_file(root, META_FILE, meta.as_bytes(), &mut manifest)?;
    let win = corpus.meta.config.window();
    for u in &corpus.utterances {
        let dir = format!("{}/{}", u.subject_id, u.task_id);
        let mut align = csv::Writer::from_writer(Vec::new());
        for (i, f) in u.frames.iter().enumerate() {
            let img: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_raw(f.width as u32, f.height as u32, f.pixels.clone())
                    .ok_or_else(|| Error::Shape("frame buffer size".into()))?;
            write_file(root, &format!("{dir}/frame_{i:04}.png"), &png_bytes(&img)?, &mut manifest)?;

            let m = &u.masks[i];
            let (h, w) = m[0].shape();
            let rgba = ImageBuffer::from_fn(w as u32, h as u32, |c, r| {
                Rgba(std::array::from_fn(|k| if m[k].get(r as usize, c as usize) { 255u8 } else { 0 }))
            });
            write_file(root, &format!("{dir}/mask_{i:04}.png"), &png_bytes(&rgba)?, &mut manifest)?;

            align
                .serialize(AlignmentRow {
                    frame_index: i,
                    phoneme: u.phonemes[i].clone(),
                    start_sample: i * win,
                })
                .map_err(|e| Error::Contract(e.to_string()))?;
        }
        let bytes = align.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
        write_file(root, &format!("{dir}/alignment.csv"), &bytes, &mut manifest)?;
        let wav = wav_bytes(&u.waveform, corpus.meta.config.sample_rate)?;
        write_file(root, &format!("{dir}/audio.wav"), &wav, &mut manifest)?;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &manifest {
        w.serialize(row).map_err(|e| Error::Contract(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

/// SHA-256 of the manifest file, identifying a corpus on disk.
pub fn manifest_hash(root: &Path) -> Result<String> {
    let path = root.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

fn read_checked(root: &Path, rel: &str, expected: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let path = root.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    match expected.get(rel) {
        Some(h) if *h == sha256_hex(&bytes) => Ok(bytes),
        Some(_) => Err(parse_err(&path, "checksum mismatch")),
        None => Err(parse_err(&path, "file not listed in manifest")),
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<image::DynamicImage> {
    image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| parse_err(path, e))
}

/// Loads a corpus written by [`write_corpus`] (or any directory following the
/// same contract), verifying every checksum.
pub fn load_corpus(root: &Path) -> Result<Corpus> {
    load_corpus_with(root, true)
}

/// Like [`load_corpus`]; with `require_audio = false` a missing `audio.wav`
/// yields an empty waveform (image-only evaluation).
pub fn load_corpus_with(root: &Path, require_audio: bool) -> Result<Corpus> {
    let mpath = root.join(MANIFEST_FILE);
    let mbytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut expected = BTreeMap::new();
    for row in csv::Reader::from_reader(mbytes.as_slice()).deserialize::<ManifestRow>() {
        let row = row.map_err(|e| parse_err(&mpath, e))?;
        expected.insert(row.path, row.sha256);
    }
    let meta_bytes = read_checked(root, META_FILE, &expected)?;
    let meta_path = root.join(META_FILE);
    let meta: CorpusMeta = toml::from_str(
        std::str::from_utf8(&meta_bytes).map_err(|e| parse_err(&meta_path, e))?,
    )
    .map_err(|e| parse_err(&meta_path, e))?;

    let mut utterances = Vec::new();
    for subject in &meta.subjects {
        for task in &meta.tasks {
            let dir = format!("{subject}/{task}");
            let apath = root.join(&dir).join("alignment.csv");
            if !apath.exists() {
                continue;
            }
            let abytes = read_checked(root, &format!("{dir}/alignment.csv"), &expected)?;
            let mut phonemes = Vec::new();
            for (k, row) in csv::Reader::from_reader(abytes.as_slice())
                .deserialize::<AlignmentRow>()
                .enumerate()
            {
                let row = row.map_err(|e| parse_err(&apath, e))?;
                if row.frame_index != k {
                    return Err(parse_err(&apath, format!("frame index {} out of order", row.frame_index)));
                }
                phonemes.push(row.phoneme);
            }
            let mut frames = Vec::with_capacity(phonemes.len());
            let mut masks = Vec::with_capacity(phonemes.len());
            for i in 0..phonemes.len() {
                let rel = format!("{dir}/frame_{i:04}.png");
                let path: PathBuf = root.join(&rel);
                let img = decode_png(&path, &read_checked(root, &rel, &expected)?)?.into_luma16();
                frames.push(RawFrame {
                    height: img.height() as usize,
                    width: img.width() as usize,
                    pixels: img.into_raw(),
                });
                let rel = format!("{dir}/mask_{i:04}.png");
                let path = root.join(&rel);
                let img = decode_png(&path, &read_checked(root, &rel, &expected)?)?.into_rgba8();
                let (w, h) = (img.width() as usize, img.height() as usize);
                masks.push(std::array::from_fn(|k| {
                    BinaryMask::from_fn(h, w, |r, c| img.get_pixel(c as u32, r as u32)[k] > 127)
                }));
            }
            let rel = format!("{dir}/audio.wav");
            let path = root.join(&rel);
            if !require_audio && !path.exists() {
                utterances.push(RawUtterance {
                    subject_id: subject.clone(),
                    task_id: task.clone(),
                    frames,
                    masks,
                    phonemes,
                    waveform: Vec::new(),
                    poses: Vec::new(),
                });
                continue;
            }
            let wbytes = read_checked(root, &rel, &expected)?;
            let reader = hound::WavReader::new(wbytes.as_slice()).map_err(|e| parse_err(&path, e))?;
            let waveform = match reader.spec().sample_format {
                hound::SampleFormat::Float => reader
                    .into_samples::<f32>()
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| parse_err(&path, e))?,
                hound::SampleFormat::Int => {
                    let scale = (1i64 << (reader.spec().bits_per_sample - 1)) as f32;
                    reader
                        .into_samples::<i32>()
                        .map(|s| s.map(|v| v as f32 / scale))
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| parse_err(&path, e))?
                }
            };
            utterances.push(RawUtterance {
                subject_id: subject.clone(),
                task_id: task.clone(),
                frames,
                masks,
                phonemes,
                waveform,
                poses: Vec::new(),
            });
        }
    }
    Ok(Corpus { meta, speakers: Vec::new(), utterances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_corpus, SynthConfig};
    use crate::phonology::PhonemeInventory;

    #[test]
    fn round_trip_and_tamper_detection() {
        let cfg = SynthConfig { n_speakers: 2, n_tasks: 2, frames_per_task: 5, ..Default::default() };
        let corpus = generate_corpus(&cfg, &PhonemeInventory::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let h = write_corpus(&corpus, dir.path()).unwrap();
        assert_eq!(h, manifest_hash(dir.path()).unwrap());
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.meta, corpus.meta);
        assert_eq!(loaded.utterances.len(), corpus.utterances.len());
        for (a, b) in loaded.utterances.iter().zip(&corpus.utterances) {
            assert_eq!(a.frames, b.frames);
            assert_eq!(a.masks, b.masks);
            assert_eq!(a.phonemes, b.phonemes);
            assert_eq!(a.waveform, b.waveform);
        }
        assert_eq!(loaded.samples().unwrap(), corpus.samples().unwrap());

        let target = dir.path().join("spk00/task00/alignment.csv");
        let mut text = fs::read_to_string(&target).unwrap();
        text.push_str("5,aa,0\n");
        fs::write(&target, text).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Parse { .. })));
    }
}
