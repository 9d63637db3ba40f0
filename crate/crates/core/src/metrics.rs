//! Overlap and boundary-distance metrics, aggregation and latency timing.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::SplitTag;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::phonology::{Articulator, NUM_ARTICULATORS};

/// Millimetres per processed pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpacingInfo {
    pub mm_per_px: f64,
}

impl SpacingInfo {
    pub fn new(mm_per_px: f64) -> Result<Self> {
        if !(mm_per_px.is_finite() && mm_per_px > 0.0) {
            return Err(Error::Domain(format!("pixel spacing {mm_per_px}")));
        }
        Ok(Self { mm_per_px })
    }

    /// Spacing after resizing `native_size` pixels of `native_mm` each to `processed_size`.
    pub fn from_resize(native_mm: f64, native_size: usize, processed_size: usize) -> Result<Self> {
        Self::new(native_mm * native_size as f64 / processed_size as f64)
    }
}

/// `2|P∩G| / (|P|+|G|)`; `None` when both are empty.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    pred.check_same_shape(gt)?;
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * pred.intersection_count(gt) as f64 / total as f64))
}

/// Set pixels with at least one 4-neighbour unset (outside the frame counts as unset).
pub fn boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = mask.shape();
    mask.pixels()
        .filter(|&(r, c)| {
            r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1)
        })
        .collect()
}

/// 1-D squared distance transform of a sampled function (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[0]].is_infinite() {
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: q dominates the whole envelope so far
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if f[v[0]].is_infinite() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest site.
pub fn squared_distance_transform(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(r, c) in sites {
        grid[r * w + c] = 0.0;
    }
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AsdKind {
    /// Average of both directed means.
    #[default]
    Symmetric,
    /// Mean distance from predicted to ground-truth boundary only.
    Directed,
}

fn directed_mean(from: &[(usize, usize)], to_sq: &[f64], w: usize) -> f64 {
    from.iter().map(|&(r, c)| to_sq[r * w + c].sqrt()).sum::<f64>() / from.len() as f64
}

/// Average surface distance in mm. `None` when the ground truth is empty;
/// an empty prediction against non-empty truth costs the frame diagonal.
pub fn asd_with(pred: &BinaryMask, gt: &BinaryMask, spacing: SpacingInfo, kind: AsdKind) -> Result<Option<f64>> {
    pred.check_same_shape(gt)?;
    if gt.is_empty() {
        return Ok(None);
    }
    let (h, w) = gt.shape();
    if pred.is_empty() {
        return Ok(Some(((h * h + w * w) as f64).sqrt() * spacing.mm_per_px));
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    let to_gt = squared_distance_transform(h, w, &bg);
    let p2g = directed_mean(&bp, &to_gt, w);
    let d = match kind {
        AsdKind::Directed => p2g,
        AsdKind::Symmetric => {
            let to_pred = squared_distance_transform(h, w, &bp);
            0.5 * (p2g + directed_mean(&bg, &to_pred, w))
        }
    };
    Ok(Some(d * spacing.mm_per_px))
}

pub fn asd(pred: &BinaryMask, gt: &BinaryMask, spacing: SpacingInfo) -> Result<Option<f64>> {
    asd_with(pred, gt, spacing, AsdKind::Symmetric)
}

/// Per-frame metrics in articulator order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub frame_id: String,
    pub split: SplitTag,
    pub mode: String,
    pub dsc: [Option<f64>; NUM_ARTICULATORS],
    pub asd: [Option<f64>; NUM_ARTICULATORS],
}

impl MetricRecord {
    pub fn compute(
        frame_id: impl Into<String>,
        split: SplitTag,
        mode: impl Into<String>,
        pred: &[BinaryMask; NUM_ARTICULATORS],
        gt: &[BinaryMask; NUM_ARTICULATORS],
        spacing: SpacingInfo,
    ) -> Result<Self> {
        Self::compute_with(frame_id, split, mode, pred, gt, spacing, AsdKind::Symmetric)
    }

    pub fn compute_with(
        frame_id: impl Into<String>,
        split: SplitTag,
        mode: impl Into<String>,
        pred: &[BinaryMask; NUM_ARTICULATORS],
        gt: &[BinaryMask; NUM_ARTICULATORS],
        spacing: SpacingInfo,
        kind: AsdKind,
    ) -> Result<Self> {
        let mut dscs = [None; NUM_ARTICULATORS];
        let mut asds = [None; NUM_ARTICULATORS];
        for c in 0..NUM_ARTICULATORS {
            dscs[c] = dsc(&pred[c], &gt[c])?;
            asds[c] = asd_with(&pred[c], &gt[c], spacing, kind)?;
        }
        Ok(Self { frame_id: frame_id.into(), split, mode: mode.into(), dsc: dscs, asd: asds })
    }

    fn macro_of(v: &[Option<f64>]) -> Option<f64> {
        let defined: Vec<f64> = v.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn macro_dsc(&self) -> Option<f64> {
        Self::macro_of(&self.dsc)
    }

    pub fn macro_asd(&self) -> Option<f64> {
        Self::macro_of(&self.asd)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

fn parse_opt(s: &str) -> std::result::Result<Option<f64>, String> {
    if s == "NA" {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|e| format!("{s}: {e}"))
    }
}

fn record_header() -> Vec<String> {
    let mut h = vec!["frame_id".to_string(), "split".into(), "mode".into()];
    for a in Articulator::ALL {
        h.push(format!("dsc_{}", a.name()));
    }
    for a in Articulator::ALL {
        h.push(format!("asd_{}_mm", a.name()));
    }
    h
}

/// Writes records as CSV with a header; undefined values are `NA`.
pub fn write_records<W: Write>(records: &[MetricRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Evaluation(e.to_string());
    w.write_record(record_header()).map_err(err)?;
    for r in records {
        let mut row = vec![r.frame_id.clone(), r.split.to_string(), r.mode.clone()];
        row.extend(r.dsc.iter().map(|v| fmt_opt(*v)));
        row.extend(r.asd.iter().map(|v| fmt_opt(*v)));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Evaluation(e.to_string()))?;
    Ok(())
}

pub fn read_records<R: Read>(input: R, path: &std::path::Path) -> Result<Vec<MetricRecord>> {
    let perr = |d: String| Error::Parse { path: path.to_path_buf(), detail: d };
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| perr(e.to_string()))?;
        if row.len() != 3 + 2 * NUM_ARTICULATORS {
            return Err(perr(format!("expected {} columns, got {}", 3 + 2 * NUM_ARTICULATORS, row.len())));
        }
        let split = row[1].parse::<SplitTag>().map_err(|e| perr(e.to_string()))?;
        let mut dsc = [None; NUM_ARTICULATORS];
        let mut asd = [None; NUM_ARTICULATORS];
        for c in 0..NUM_ARTICULATORS {
            dsc[c] = parse_opt(&row[3 + c]).map_err(perr)?;
            asd[c] = parse_opt(&row[3 + NUM_ARTICULATORS + c]).map_err(perr)?;
        }
        out.push(MetricRecord { frame_id: row[0].to_string(), split, mode: row[2].to_string(), dsc, asd });
    }
    Ok(out)
}

/// Mean ± sample standard deviation of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub frames: usize,
    /// Macro DSC ×100.
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub asd_mean: f64,
    pub asd_std: f64,
    /// Per-class DSC ×100, articulator order (`None` if never defined).
    pub dsc_per_class: [Option<f64>; NUM_ARTICULATORS],
    pub asd_per_class: [Option<f64>; NUM_ARTICULATORS],
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Per-class means over defined values, macro-averaged over classes; the
/// standard deviation is over per-frame macro values.
pub fn summarize(records: &[&MetricRecord]) -> Result<Summary> {
    let class_means = |get: &dyn Fn(&MetricRecord) -> [Option<f64>; NUM_ARTICULATORS]| {
        std::array::from_fn::<Option<f64>, NUM_ARTICULATORS, _>(|c| {
            let vals: Vec<f64> = records.iter().filter_map(|r| get(r)[c]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
    };
    let dsc_pc = class_means(&|r| r.dsc);
    let asd_pc = class_means(&|r| r.asd);
    let macro_over = |pc: &[Option<f64>; NUM_ARTICULATORS]| {
        let d: Vec<f64> = pc.iter().flatten().copied().collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    };
    let dsc_macro = macro_over(&dsc_pc)
        .ok_or_else(|| Error::Aggregation("no defined DSC values in group".into()))?;
    let dsc_frames: Vec<f64> = records.iter().filter_map(|r| r.macro_dsc()).collect();
    let asd_frames: Vec<f64> = records.iter().filter_map(|r| r.macro_asd()).collect();
    let (_, dsc_std) = mean_std(&dsc_frames);
    let (asd_mean, asd_std) = match macro_over(&asd_pc) {
        Some(m) => (m, mean_std(&asd_frames).1),
        None => (f64::NAN, f64::NAN),
    };
    Ok(Summary {
        frames: records.len(),
        dsc_mean: 100.0 * dsc_macro,
        dsc_std: 100.0 * dsc_std,
        asd_mean,
        asd_std,
        dsc_per_class: dsc_pc.map(|v| v.map(|x| 100.0 * x)),
        asd_per_class: asd_pc,
    })
}

/// Groups records by `(split, mode)` and summarizes each group.
pub fn aggregate(records: &[MetricRecord]) -> Result<BTreeMap<(SplitTag, String), Summary>> {
    if records.is_empty() {
        return Err(Error::Aggregation("no records".into()));
    }
    let mut groups: BTreeMap<(SplitTag, String), Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.split, r.mode.clone())).or_default().push(r);
    }
    groups.into_iter().map(|(k, v)| Ok((k, summarize(&v)?))).collect()
}

/// Table with one row per `(split, mode)`: DSC and ASD as mean ± std.
pub fn format_table(groups: &BTreeMap<(SplitTag, String), Summary>) -> String {
    let mut s = String::from("split,mode,frames,dsc_mean,dsc_std,asd_mean_mm,asd_std_mm");
    for a in Articulator::ALL {
        s.push_str(&format!(",dsc_{}", a.name()));
    }
    s.push('\n');
    for ((split, mode), m) in groups {
        s.push_str(&format!(
            "{split},{mode},{},{:.2},{:.2},{:.3},{:.3}",
            m.frames, m.dsc_mean, m.dsc_std, m.asd_mean, m.asd_std
        ));
        for v in m.dsc_per_class {
            s.push_str(&format!(",{}", v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "NA".into())));
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    /// Median wall-clock milliseconds per batch.
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub reps: usize,
}

/// Times `run_batch` (one pass over a fixed batch, e.g. 50 frames) after
/// `warmup` untimed calls; reports the median over `reps ≥ 5` repetitions.
pub fn measure_latency(mut run_batch: impl FnMut() -> Result<()>, reps: usize, warmup: usize) -> Result<LatencyStats> {
    let reps = reps.max(5);
    for _ in 0..warmup {
        run_batch()?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        run_batch()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.total_cmp(b));
    let median = if reps % 2 == 1 {
        times[reps / 2]
    } else {
        0.5 * (times[reps / 2 - 1] + times[reps / 2])
    };
    Ok(LatencyStats { median_ms: median, min_ms: times[0], max_ms: times[reps - 1], reps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn px(h: usize, w: usize, p: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_pixels(h, w, p)
    }

    #[test]
    fn dsc_cases() {
        let a = px(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(dsc(&a, &a).unwrap(), Some(1.0));
        let b = px(4, 4, &[(3, 3)]);
        assert_eq!(dsc(&a, &b).unwrap(), Some(0.0));
        let c = px(4, 4, &[(0, 0), (0, 1), (2, 2), (2, 3)]);
        assert_eq!(dsc(&a, &c).unwrap(), Some(0.5));
        assert_eq!(dsc(&BinaryMask::empty(2, 2), &BinaryMask::empty(2, 2)).unwrap(), None);
        assert!(dsc(&a, &BinaryMask::empty(3, 3)).is_err());
    }

    #[test]
    fn asd_cases() {
        let one = SpacingInfo::new(1.0).unwrap();
        let a = px(8, 8, &[(2, 2), (2, 3), (3, 2), (3, 3)]);
        assert_eq!(asd(&a, &a, one).unwrap(), Some(0.0));
        let p = px(5, 8, &[(2, 1)]);
        let g = px(5, 8, &[(2, 4)]);
        assert!((asd(&p, &g, one).unwrap().unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(asd(&a, &BinaryMask::empty(8, 8), one).unwrap(), None);
        let pen = asd(&BinaryMask::empty(8, 8), &a, SpacingInfo::new(2.0).unwrap()).unwrap().unwrap();
        assert!((pen - 2.0 * 128f64.sqrt()).abs() < 1e-12);
        let s = SpacingInfo::from_resize(2.4, 84, 224).unwrap();
        assert!((s.mm_per_px - 0.9).abs() < 1e-12);
    }

    #[test]
    fn boundary_of_block() {
        let m = BinaryMask::from_fn(5, 5, |r, c| (1..4).contains(&r) && (1..4).contains(&c));
        let b = boundary(&m);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
    }

    #[test]
    fn aggregation_rules() {
        let rec = |d: f64, a: Option<f64>| MetricRecord {
            frame_id: "f".into(),
            split: SplitTag::UsUt,
            mode: "image-only".into(),
            dsc: [Some(d); 4],
            asd: [a; 4],
        };
        let r1 = rec(0.8, Some(1.0));
        let s = summarize(&[&r1]).unwrap();
        assert_eq!(s.dsc_std, 0.0);
        let r2 = rec(1.0, None);
        let s = summarize(&[&r1, &r2]).unwrap();
        assert!((s.dsc_mean - 90.0).abs() < 1e-12);
        assert!((s.dsc_std - 100.0 * 0.02f64.sqrt()).abs() < 1e-9);
        assert_eq!(s.asd_mean, 1.0);
        let empty = MetricRecord { dsc: [None; 4], ..r1.clone() };
        assert!(matches!(summarize(&[&empty]), Err(Error::Aggregation(_))));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn records_round_trip() {
        let r = MetricRecord {
            frame_id: "spk00/task01/0003".into(),
            split: SplitTag::SsUt,
            mode: "full".into(),
            dsc: [Some(0.5), None, Some(1.0), Some(0.25)],
            asd: [Some(1.5), None, Some(0.0), Some(3.0)],
        };
        let mut buf = Vec::new();
        write_records(std::slice::from_ref(&r), &mut buf).unwrap();
        let back = read_records(buf.as_slice(), std::path::Path::new("x.csv")).unwrap();
        assert_eq!(back, vec![r]);
    }

    #[test]
    fn latency_median() {
        let mut n = 0;
        let s = measure_latency(
            || {
                n += 1;
                Ok(())
            },
            3,
            1,
        )
        .unwrap();
        assert_eq!(s.reps, 5);
        assert_eq!(n, 6);
        assert!(s.min_ms <= s.median_ms && s.median_ms <= s.max_ms);
    }

    fn brute_asd(p: &BinaryMask, g: &BinaryMask) -> f64 {
        let (bp, bg) = (boundary(p), boundary(g));
        let near = |a: (usize, usize), set: &[(usize, usize)]| {
            set.iter()
                .map(|b| (((a.0 as f64 - b.0 as f64).powi(2)) + ((a.1 as f64 - b.1 as f64).powi(2))).sqrt())
                .fold(f64::INFINITY, f64::min)
        };
        let d1 = bp.iter().map(|&a| near(a, &bg)).sum::<f64>() / bp.len() as f64;
        let d2 = bg.iter().map(|&a| near(a, &bp)).sum::<f64>() / bg.len() as f64;
        0.5 * (d1 + d2)
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
            let k = rng.gen_range(1..6);
            let sites: Vec<_> = (0..k).map(|_| (rng.gen_range(0..h), rng.gen_range(0..w))).collect();
            let d = squared_distance_transform(h, w, &sites);
            for r in 0..h {
                for c in 0..w {
                    let b = sites
                        .iter()
                        .map(|&(a, b)| (r as f64 - a as f64).powi(2) + (c as f64 - b as f64).powi(2))
                        .fold(f64::INFINITY, f64::min);
                    assert_eq!(d[r * w + c], b);
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
            proptest::collection::vec(prop::bool::weighted(0.3), h * w)
                .prop_map(move |d| BinaryMask::from_vec(h, w, d).unwrap())
        }

        proptest! {
            #[test]
            fn asd_equals_brute_force(
                (a, b) in (1usize..33, 1usize..33).prop_flat_map(|(h, w)| (mask_strategy(h, w), mask_strategy(h, w)))
            ) {
                let one = SpacingInfo::new(1.0).unwrap();
                if !a.is_empty() && !b.is_empty() {
                    let fast = asd(&a, &b, one).unwrap().unwrap();
                    prop_assert_eq!(fast, brute_asd(&a, &b));
                }
            }

            #[test]
            fn symmetric(
                (a, b) in (1usize..20, 1usize..20).prop_flat_map(|(h, w)| (mask_strategy(h, w), mask_strategy(h, w)))
            ) {
                let one = SpacingInfo::new(1.0).unwrap();
                prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
                if !a.is_empty() && !b.is_empty() {
                    let x = asd(&a, &b, one).unwrap().unwrap();
                    let y = asd(&b, &a, one).unwrap().unwrap();
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn translation_invariant(
                (a, b) in mask_strategy(10, 10).prop_flat_map(|a| (Just(a), mask_strategy(10, 10))),
                dr in 0usize..6, dc in 0usize..6,
            ) {
                // embed in a larger frame away from the border, then shift both
                let place = |m: &BinaryMask, r0: usize, c0: usize| {
                    BinaryMask::from_fn(24, 24, |r, c| {
                        r >= r0 && c >= c0 && r - r0 < 10 && c - c0 < 10 && m.get(r - r0, c - c0)
                    })
                };
                let one = SpacingInfo::new(1.0).unwrap();
                let (a0, b0) = (place(&a, 2, 2), place(&b, 2, 2));
                let (a1, b1) = (place(&a, 2 + dr, 2 + dc), place(&b, 2 + dr, 2 + dc));
                prop_assert_eq!(dsc(&a0, &b0).unwrap(), dsc(&a1, &b1).unwrap());
                let x = asd(&a0, &b0, one).unwrap();
                let y = asd(&a1, &b1, one).unwrap();
                match (x, y) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                    (x, y) => prop_assert_eq!(x, y),
                }
            }
        }
    }
}
