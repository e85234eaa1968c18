//! Text-free PNG charts drawn directly into pixel buffers.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::run::{EvalReport, RunDir};
use crate::error::IoContext;
use crate::training::StepRecord;
use crate::{Error, Result};

const W: u32 = 640;
const H: u32 = 360;
const MARGIN: u32 = 24;
const SERIES: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    for x in MARGIN..W - MARGIN {
        img.put_pixel(x, H - MARGIN, axis);
    }
    for y in MARGIN..=H - MARGIN {
        img.put_pixel(MARGIN, y, axis);
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < W && (y as u32) < H {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// Polylines of `series` on a shared x range and log-scaled y range.
fn line_chart(series: &[Vec<(f64, f64)>]) -> RgbImage {
    let mut img = canvas();
    let pts: Vec<&(f64, f64)> = series.iter().flatten().filter(|p| p.1 > 0.0).collect();
    if pts.is_empty() {
        return img;
    }
    let xmax = pts.iter().map(|p| p.0).fold(1.0, f64::max);
    let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1.ln()), hi.max(p.1.ln())));
    let span = (hi - lo).max(1e-9);
    let (pw, ph) = (f64::from(W - 2 * MARGIN), f64::from(H - 2 * MARGIN));
    let to_px = |&(x, y): &(f64, f64)| (f64::from(MARGIN) + x / xmax * pw, f64::from(H - MARGIN) - (y.ln() - lo) / span * ph);
    for (i, s) in series.iter().enumerate() {
        let c = Rgb(SERIES[i % SERIES.len()]);
        let visible: Vec<_> = s.iter().filter(|p| p.1 > 0.0).map(to_px).collect();
        for w in visible.windows(2) {
            line(&mut img, w[0], w[1], c);
        }
    }
    img
}

/// Grouped bars in [0, 1]; one group per entry, one colour per bar slot.
fn bar_chart(groups: &[Vec<f64>]) -> RgbImage {
    let mut img = canvas();
    let slots: usize = groups.iter().map(|g| g.len() + 1).sum::<usize>().max(1);
    let slot_w = (W - 2 * MARGIN) / slots as u32;
    let ph = f64::from(H - 2 * MARGIN);
    let mut x = MARGIN + slot_w / 2;
    for g in groups {
        for (i, &v) in g.iter().enumerate() {
            let top = H - MARGIN - (v.clamp(0.0, 1.0) * ph) as u32;
            let c = Rgb(SERIES[i % SERIES.len()]);
            for px in x..x + slot_w.saturating_sub(2) {
                for py in top..H - MARGIN {
                    img.put_pixel(px, py, c);
                }
            }
            x += slot_w;
        }
        x += slot_w;
    }
    img
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).at(path)
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Renders `plots/losses.png` (one curve per logged loss, steps laid end to
/// end across stages), `plots/localization.png` (F1 per mask source, when
/// `eval.json` exists) and `plots/ablation.png` for a `summary.csv` in the
/// directory. Returns the written files.
pub fn plot_run(dir: &RunDir) -> Result<Vec<PathBuf>> {
    let out = dir.plots();
    fs::create_dir_all(&out).at(&out)?;
    let mut written = Vec::new();

    if dir.metrics().exists() {
        let records = read_metrics(&dir.metrics())?;
        let mut names: Vec<&String> = records.iter().flat_map(|r| r.losses.keys()).collect();
        names.sort();
        names.dedup();
        let series: Vec<Vec<(f64, f64)>> = names
            .iter()
            .map(|n| records.iter().enumerate().filter_map(|(i, r)| r.losses.get(*n).map(|&v| (i as f64, v))).collect())
            .collect();
        let path = out.join("losses.png");
        save(&line_chart(&series), &path)?;
        written.push(path);
    }

    if dir.eval().exists() {
        let text = fs::read_to_string(dir.eval()).at(dir.eval())?;
        let report: EvalReport = serde_json::from_str(&text)?;
        let bars: Vec<Vec<f64>> = report
            .localization
            .methods
            .iter()
            .filter(|(k, _)| !k.contains('@'))
            .map(|(_, m)| vec![m.precision, m.recall, m.f1])
            .collect();
        let path = out.join("localization.png");
        save(&bar_chart(&bars), &path)?;
        written.push(path);
    }

    let summary = dir.root.join("summary.csv");
    if summary.exists() {
        let text = fs::read_to_string(&summary).at(&summary)?;
        let mut groups = Vec::new();
        for (i, row) in text.lines().skip(1).enumerate() {
            let miou = row
                .split(',')
                .nth(2)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Invalid(format!("summary.csv row {} has no miou_mean", i + 1)))?;
            groups.push(vec![miou]);
        }
        let path = out.join("ablation.png");
        save(&bar_chart(&groups), &path)?;
        written.push(path);
    }

    if written.is_empty() {
        return Err(Error::Prerequisite {
            what: format!("metrics.jsonl, eval.json or summary.csv in {}", dir.root.display()),
            hint: "train, evaluate or ablate first".into(),
        });
    }
    Ok(written)
}
