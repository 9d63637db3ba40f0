use std::path::PathBuf;

use image::{Rgb, RgbImage};

use super::ablation::AblationRow;
use super::rundir::RunDir;
use super::stage2::Stage2LogRow;
use super::train::SegEpochLog;
use crate::error::{Error, Result};

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: u32 = 32;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
pub const PALETTE: [Rgb<u8>; 7] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([227, 119, 194]),
];

/// One written figure and the number of x positions it shows.
#[derive(Clone, Debug, PartialEq)]
pub struct Figure {
    pub path: PathBuf,
    pub x_samples: usize,
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, WHITE);
    for k in 0..=4 {
        let y = MARGIN + k * (H - 2 * MARGIN) / 4;
        for x in MARGIN..W - MARGIN {
            img.put_pixel(x, y, GRID);
        }
    }
    for x in MARGIN..W - MARGIN {
        img.put_pixel(x, H - MARGIN, AXIS);
    }
    for y in MARGIN..=H - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for (ox, oy) in [(0, 0), (0, 1), (1, 0)] {
            let (px, py) = (x + ox, y + oy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, c);
            }
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Line chart of several equally spaced series.
pub fn line_chart(series: &[Vec<f64>]) -> RgbImage {
    let mut img = canvas();
    let n = series.iter().map(Vec::len).max().unwrap_or(0);
    let (lo, hi) = range(series.iter().flatten().copied());
    let px = |i: usize| MARGIN as f64 + (W - 2 * MARGIN) as f64 * if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    let py = |v: f64| (H - MARGIN) as f64 - (H - 2 * MARGIN) as f64 * (v - lo) / (hi - lo);
    for (s, c) in series.iter().zip(PALETTE.iter().cycle()) {
        let pts: Vec<(i64, i64)> = s
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| (px(i).round() as i64, py(v).round() as i64))
            .collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], *c);
        }
        for &(x, y) in &pts {
            for d in -1..=1 {
                line(&mut img, (x - 2, y + d), (x + 2, y + d), *c);
            }
        }
    }
    img
}

/// Bar chart with bars starting at zero.
pub fn bar_chart(values: &[f64]) -> RgbImage {
    let mut img = canvas();
    let n = values.len().max(1) as u32;
    let hi = values.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max).max(1e-12);
    let slot = (W - 2 * MARGIN) / n;
    for (i, (&v, c)) in values.iter().zip(PALETTE.iter().cycle()).enumerate() {
        if !v.is_finite() {
            continue;
        }
        let top = (H - MARGIN) - ((H - 2 * MARGIN) as f64 * (v.max(0.0) / hi)).round() as u32;
        let x0 = MARGIN + i as u32 * slot + slot / 6;
        let x1 = MARGIN + (i as u32 + 1) * slot - slot / 6;
        for x in x0..x1 {
            for y in top..H - MARGIN {
                img.put_pixel(x, y, *c);
            }
        }
    }
    img
}

fn save(dir: &RunDir, name: &str, img: &RgbImage, x_samples: usize) -> Result<Figure> {
    let path = dir.path(name);
    img.save_with_format(&path, image::ImageFormat::Png).map_err(|e| Error::Plot(format!("{}: {e}", path.display())))?;
    Ok(Figure { path, x_samples })
}

/// Writes every figure whose logs exist in `dir`:
/// `stage2_loss.png` (train and validation loss per schedule epoch),
/// `stage3_loss.png` and `stage3_dsc.png` (training loss and validation DSC of
/// each segmentation run), `ablation_dsc.png` (one bar per row).
pub fn emit_plots(dir: &RunDir) -> Result<Vec<Figure>> {
    let mut figs = Vec::new();
    if dir.path("stage2_log.csv").exists() {
        let rows: Vec<Stage2LogRow> = dir.read_csv("stage2_log.csv")?;
        let sched: Vec<&Stage2LogRow> = rows.iter().filter(|r| r.phase == "schedule").collect();
        let train: Vec<f64> = sched.iter().map(|r| r.total).collect();
        let val: Vec<f64> = sched.iter().map(|r| r.val_total).collect();
        figs.push(save(dir, "stage2_loss.png", &line_chart(&[train, val]), sched.len())?);
    }
    let mut logs: Vec<(String, Vec<SegEpochLog>)> = Vec::new();
    let mut names: Vec<PathBuf> = std::fs::read_dir(&dir.root)
        .map_err(|e| Error::io(&dir.root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("train_") && n.ends_with(".csv"))
        })
        .collect();
    names.sort();
    for p in names {
        let name = p.file_name().unwrap().to_string_lossy().to_string();
        logs.push((name.clone(), dir.read_csv(&name)?));
    }
    if !logs.is_empty() {
        let n = logs.iter().map(|(_, l)| l.len()).max().unwrap_or(0);
        let loss: Vec<Vec<f64>> = logs.iter().map(|(_, l)| l.iter().map(|r| r.train_loss).collect()).collect();
        let dsc: Vec<Vec<f64>> = logs.iter().map(|(_, l)| l.iter().map(|r| r.val_dsc).collect()).collect();
        figs.push(save(dir, "stage3_loss.png", &line_chart(&loss), n)?);
        figs.push(save(dir, "stage3_dsc.png", &line_chart(&dsc), n)?);
    }
    if dir.path("ablation.csv").exists() {
        let rows: Vec<AblationRow> = dir.read_csv("ablation.csv")?;
        let vals: Vec<f64> = rows.iter().map(|r| r.dsc_mean.unwrap_or(f64::NAN)).collect();
        figs.push(save(dir, "ablation_dsc.png", &bar_chart(&vals), vals.len())?);
    }
    if figs.is_empty() {
        return Err(Error::Plot(format!("no logs to plot in {}", dir.root.display())));
    }
    Ok(figs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_deterministic() {
        let a = line_chart(&[vec![1.0, 0.5, 0.25], vec![0.9, 0.7, f64::NAN]]);
        let b = line_chart(&[vec![1.0, 0.5, 0.25], vec![0.9, 0.7, f64::NAN]]);
        assert_eq!(a.as_raw(), b.as_raw());
        assert_eq!(a.dimensions(), (W, H));
    }

    #[test]
    fn one_bar_per_value() {
        let img = bar_chart(&[1.0, 2.0, 3.0]);
        let y = H - MARGIN - 2;
        let mut colours = Vec::new();
        for x in MARGIN + 1..W - MARGIN {
            let p = *img.get_pixel(x, y);
            if p != WHITE && p != GRID && colours.last() != Some(&p) {
                colours.push(p);
            }
        }
        assert_eq!(colours.len(), 3);
    }
}
