//! Per-vertebra error box plot, rendered directly into a PNG.
//!
//! One box per vertebra with pooled errors, ordered C1 to S2: whiskers at
//! min/max, box at the quartiles, a line at the median. Labels use a small
//! built-in 5x7 bitmap font, so there is no font dependency.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::evaluate::RegionReport;
use crate::vertebra::Region;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([20, 20, 20]);
const BOX_FILL: Rgb<u8> = Rgb([158, 193, 225]);
const BOX_EDGE: Rgb<u8> = Rgb([27, 76, 128]);
const MEDIAN: Rgb<u8> = Rgb([170, 40, 40]);
const GRID: Rgb<u8> = Rgb([220, 220, 220]);

/// 5x7 glyphs for the characters the plot needs.
fn glyph(c: char) -> Option<[u8; 7]> {
    let rows = match c {
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11110, 0b00001, 0b00001, 0b01110, 0b00001, 0b00001, 0b11110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        '.' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b01100],
        '-' => [0b00000, 0b00000, 0b00000, 0b11111, 0b00000, 0b00000, 0b00000],
        'C' => [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110],
        'T' => [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        'L' => [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
        'S' => [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
        'M' => [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
        _ => return None,
    };
    Some(rows)
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        if let Some(rows) = glyph(c) {
            for (ry, row) in rows.iter().enumerate() {
                for rx in 0..5 {
                    if row & (1 << (4 - rx)) != 0 {
                        let (px, py) = (cx + rx as i64, y + ry as i64);
                        if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                            img.put_pixel(px as u32, py as u32, color);
                        }
                    }
                }
            }
        }
        cx += 6;
    }
}

fn hline(img: &mut RgbImage, x0: u32, x1: u32, y: u32, color: Rgb<u8>) {
    if y >= img.height() {
        return;
    }
    for x in x0.min(x1)..=x1.max(x0).min(img.width() - 1) {
        img.put_pixel(x, y, color);
    }
}

fn vline(img: &mut RgbImage, x: u32, y0: u32, y1: u32, color: Rgb<u8>) {
    if x >= img.width() {
        return;
    }
    for y in y0.min(y1)..=y1.max(y0).min(img.height() - 1) {
        img.put_pixel(x, y, color);
    }
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Render the per-vertebra error distribution of a report as a box plot.
pub fn plot_per_vertebra(report: &RegionReport, path: &Path) -> Result<()> {
    if report.per_vertebra_errors.is_empty() {
        return Err(Error::Other(
            "per-vertebra plot needs at least one vertebra with errors".into(),
        ));
    }
    for region in [Region::Cervical, Region::Thoracic, Region::Lumbar, Region::Sacral] {
        if report
            .per_vertebra_errors
            .keys()
            .all(|l| l.region() != region)
        {
            log::info!("{} region has no data; omitted from the plot", region.name());
        }
    }

    let boxes: Vec<(String, Vec<f64>)> = report
        .per_vertebra_errors
        .iter()
        .map(|(label, errors)| {
            let mut sorted = errors.clone();
            sorted.sort_by(f64::total_cmp);
            (label.name().to_string(), sorted)
        })
        .collect();

    let (left, right, top, bottom) = (56i64, 16i64, 16i64, 30i64);
    let slot = 30i64;
    let plot_w = slot * boxes.len() as i64;
    let plot_h = 400i64;
    let width = (left + plot_w + right) as u32;
    let height = (top + plot_h + bottom) as u32;
    let mut img = RgbImage::from_pixel(width, height, BG);

    let max_err = boxes
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    // Headroom so the top whisker stays inside the frame.
    let y_max = max_err * 1.05;
    let y_of = |v: f64| -> u32 { (top + plot_h - (v / y_max * plot_h as f64) as i64) as u32 };

    // Axes and horizontal grid with tick labels.
    for i in 0..=5 {
        let v = y_max * i as f64 / 5.0;
        let y = y_of(v);
        hline(&mut img, left as u32, (left + plot_w) as u32, y, GRID);
        draw_text(&mut img, 4, y as i64 - 3, &format!("{v:.1}"), INK);
    }
    vline(&mut img, left as u32, top as u32, (top + plot_h) as u32, INK);
    hline(
        &mut img,
        left as u32,
        (left + plot_w) as u32,
        (top + plot_h) as u32,
        INK,
    );
    draw_text(&mut img, 4, 4, "MM", INK);

    for (i, (name, sorted)) in boxes.iter().enumerate() {
        let cx = left + slot * i as i64 + slot / 2;
        let half_box = 9i64;
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        let q1 = quantile(sorted, 0.25);
        let q2 = quantile(sorted, 0.5);
        let q3 = quantile(sorted, 0.75);

        let (y_lo, y_hi) = (y_of(lo), y_of(hi));
        let (y_q1, y_q2, y_q3) = (y_of(q1), y_of(q2), y_of(q3));

        // Whiskers.
        vline(&mut img, cx as u32, y_hi, y_q3, BOX_EDGE);
        vline(&mut img, cx as u32, y_q1, y_lo, BOX_EDGE);
        hline(&mut img, (cx - 4) as u32, (cx + 4) as u32, y_hi, BOX_EDGE);
        hline(&mut img, (cx - 4) as u32, (cx + 4) as u32, y_lo, BOX_EDGE);
        // Box (fill then frame); degenerate boxes collapse to a line.
        for y in y_q3..=y_q1 {
            hline(&mut img, (cx - half_box) as u32, (cx + half_box) as u32, y, BOX_FILL);
        }
        hline(&mut img, (cx - half_box) as u32, (cx + half_box) as u32, y_q3, BOX_EDGE);
        hline(&mut img, (cx - half_box) as u32, (cx + half_box) as u32, y_q1, BOX_EDGE);
        vline(&mut img, (cx - half_box) as u32, y_q3, y_q1, BOX_EDGE);
        vline(&mut img, (cx + half_box) as u32, y_q3, y_q1, BOX_EDGE);
        hline(&mut img, (cx - half_box) as u32, (cx + half_box) as u32, y_q2, MEDIAN);

        let label_x = cx - 3 * name.len() as i64;
        draw_text(&mut img, label_x, top + plot_h + 8, name, INK);
    }

    img.save(path).map_err(|e| Error::Other(format!(
        "cannot write plot {}: {e}",
        path.display()
    )))
}
