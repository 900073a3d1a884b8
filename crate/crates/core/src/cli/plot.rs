use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::metrics::MetricsReport;

const CELL: u32 = 32;
const MARGIN: u32 = 16;
const ROC_SIDE: u32 = 320;

/// Row-normalised confusion heatmap; darker is larger.
pub fn confusion_image(report: &MetricsReport) -> RgbImage {
    let c = report.confusion.classes() as u32;
    let side = 2 * MARGIN + c * CELL;
    let mut img = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
    let rows = report.confusion.row_sums();
    for (i, row) in report.confusion.counts.iter().enumerate() {
        for (j, &n) in row.iter().enumerate() {
            let frac = if rows[i] > 0 { n as f64 / rows[i] as f64 } else { 0.0 };
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let colour = Rgb([shade, shade, 255]);
            for dy in 1..CELL {
                for dx in 1..CELL {
                    img.put_pixel(MARGIN + j as u32 * CELL + dx, MARGIN + i as u32 * CELL + dy, colour);
                }
            }
        }
    }
    img
}

fn palette(k: usize) -> Rgb<u8> {
    const COLOURS: [[u8; 3]; 8] = [
        [31, 119, 180],
        [255, 127, 14],
        [44, 160, 44],
        [214, 39, 40],
        [148, 103, 189],
        [140, 86, 75],
        [227, 119, 194],
        [127, 127, 127],
    ];
    Rgb(COLOURS[k % COLOURS.len()])
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), colour: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, colour);
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

/// One-vs-rest ROC curves of every class on a unit square with the chance diagonal.
pub fn roc_image(report: &MetricsReport) -> RgbImage {
    let side = ROC_SIDE + 2 * MARGIN;
    let mut img = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
    let to_px = |(fpr, tpr): (f64, f64)| {
        let x = MARGIN as f64 + fpr * ROC_SIDE as f64;
        let y = MARGIN as f64 + (1.0 - tpr) * ROC_SIDE as f64;
        (x.round() as i64, y.round() as i64)
    };
    let black = Rgb([0, 0, 0]);
    let grey = Rgb([190, 190, 190]);
    line(&mut img, to_px((0.0, 0.0)), to_px((1.0, 0.0)), black);
    line(&mut img, to_px((0.0, 0.0)), to_px((0.0, 1.0)), black);
    line(&mut img, to_px((0.0, 0.0)), to_px((1.0, 1.0)), grey);
    for (k, points) in report.roc_points.iter().enumerate() {
        for w in points.windows(2) {
            line(&mut img, to_px(w[0]), to_px(w[1]), palette(k));
        }
    }
    img
}

/// Write `<stem>_confusion.png` and `<stem>_roc.png` under `out_dir`.
pub fn write_plots(report: &MetricsReport, out_dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    confusion_image(report).save(out_dir.join(format!("{stem}_confusion.png")))?;
    roc_image(report).save(out_dir.join(format!("{stem}_roc.png")))?;
    Ok(())
}
