//! Minimal line-plot rasterizer: axes, tick marks, one polyline per series
//! and a dot at every data point. No text; the CSV carries the numbers.

use image::{Rgb, RgbImage};

const MARGIN: i64 = 40;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
const PALETTE: [Rgb<u8>; 4] = [Rgb([31, 119, 180]), Rgb([214, 39, 40]), Rgb([44, 160, 44]), Rgb([148, 103, 189])];

/// One polyline. Points are `(x, y)` in data units; non-finite ones are skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub points: Vec<(f64, f64)>,
    /// Draw the connecting line, or dots only.
    pub line: bool,
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 * lo.abs().max(1.0) {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
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

/// Renders the series with `x_ticks` marked on the horizontal axis.
pub fn render(series: &[Series], x_ticks: &[f64], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    let all = || series.iter().flat_map(|s| s.points.iter().copied());
    let (x_lo, x_hi) = range(all().map(|p| p.0).chain(x_ticks.iter().copied()));
    let (y_lo, y_hi) = range(all().map(|p| p.1));
    let (w, h) = (width as i64, height as i64);
    let to_px = |(x, y): (f64, f64)| {
        let px = MARGIN + ((x - x_lo) / (x_hi - x_lo) * (w - 2 * MARGIN) as f64).round() as i64;
        let py = h - MARGIN - ((y - y_lo) / (y_hi - y_lo) * (h - 2 * MARGIN) as f64).round() as i64;
        (px, py)
    };
    line(&mut img, (MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), AXIS);
    line(&mut img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), AXIS);
    for &t in x_ticks {
        let (px, _) = to_px((t, y_lo));
        line(&mut img, (px, h - MARGIN), (px, h - MARGIN + 5), AXIS);
    }
    for k in 0..=4 {
        let py = h - MARGIN - k * (h - 2 * MARGIN) / 4;
        line(&mut img, (MARGIN - 5, py), (MARGIN, py), AXIS);
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(i64, i64)> = s.points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).map(to_px).collect();
        if s.line {
            for pair in pts.windows(2) {
                line(&mut img, pair[0], pair[1], color);
            }
        }
        for &(px, py) in &pts {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    put(&mut img, px + dx, py + dy, color);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_axes_and_points() {
        let s = Series {
            points: vec![(0.0, 1.0), (1.0, 3.0), (2.0, f64::NAN), (3.0, 2.0)],
            line: true,
        };
        let img = render(&[s], &[0.0, 1.0, 2.0, 3.0], 200, 120);
        assert_eq!(img.dimensions(), (200, 120));
        assert_eq!(*img.get_pixel(MARGIN as u32, 60), AXIS);
        // first point sits on the left axis at the lowest y
        assert_eq!(*img.get_pixel(MARGIN as u32 + 1, 120 - MARGIN as u32 - 1), PALETTE[0]);
        // highest point at the top margin
        let top_x = MARGIN + (200 - 2 * MARGIN) / 3;
        assert_eq!(*img.get_pixel(top_x as u32, MARGIN as u32), PALETTE[0]);
    }

    #[test]
    fn degenerate_ranges_do_not_panic() {
        let s = Series {
            points: vec![(1.0, 5.0)],
            line: false,
        };
        render(&[s], &[], 50, 50);
        render(&[], &[], 50, 50);
    }
}
