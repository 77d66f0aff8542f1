//! Minimal line charts rendered straight to PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const PALETTE: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];
const MARGIN: i64 = 24;

/// Draws each series as a polyline on shared axes. `log_y` plots `log10(y)`
/// and drops non-positive values.
pub fn line_chart(path: &Path, series: &[Vec<(f64, f64)>], log_y: bool, width: u32, height: u32) -> Result<()> {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let tf = |y: f64| if log_y { y.log10() } else { y };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
                .map(|&(x, y)| (x, tf(y)))
                .collect()
        })
        .collect();
    let all = pts.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let (w, h) = (width as i64, height as i64);
    let black = Rgb([0, 0, 0]);
    draw_line(&mut img, (MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), black);
    draw_line(&mut img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), black);
    if x0 <= x1 {
        let span_x = (x1 - x0).max(1e-12);
        let span_y = (y1 - y0).max(1e-12);
        let to_px = |(x, y): (f64, f64)| {
            let px = MARGIN + ((x - x0) / span_x * (w - 2 * MARGIN) as f64).round() as i64;
            let py = h - MARGIN - ((y - y0) / span_y * (h - 2 * MARGIN) as f64).round() as i64;
            (px, py)
        };
        for (k, s) in pts.iter().enumerate() {
            let color = Rgb(PALETTE[k % PALETTE.len()]);
            for pair in s.windows(2) {
                draw_line(&mut img, to_px(pair[0]), to_px(pair[1]), color);
            }
            if s.len() == 1 {
                let (px, py) = to_px(s[0]);
                put(&mut img, px, py, color);
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_line(img: &mut RgbImage, (mut x, mut y): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x).abs(), -(y1 - y).abs());
    let (sx, sy) = (if x < x1 { 1 } else { -1 }, if y < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x, y, c);
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
