//! Minimal 8-bit PGM line and bar plots.

use std::path::Path;

use crate::error::Result;
use crate::io::{write_pgm, Pgm};

const W: usize = 320;
const H: usize = 200;
const MARGIN: usize = 16;

struct Canvas {
    px: Vec<u16>,
}

impl Canvas {
    fn new() -> Self {
        let mut c = Canvas { px: vec![255; W * H] };
        for x in MARGIN..W - MARGIN {
            c.set(x, H - MARGIN, 0);
        }
        for y in MARGIN..=H - MARGIN {
            c.set(MARGIN, y, 0);
        }
        c
    }

    fn set(&mut self, x: usize, y: usize, v: u16) {
        if x < W && y < H {
            self.px[y * W + x] = v;
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), v: u16) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            if x >= 0 && y >= 0 {
                self.set(x as usize, y as usize, v);
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

    fn write(self, path: &Path) -> Result<()> {
        write_pgm(
            &Pgm {
                width: W,
                height: H,
                maxval: 255,
                samples: self.px,
            },
            path,
        )
    }
}

fn bounds<'a>(values: impl Iterator<Item = &'a f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if lo > hi {
        None
    } else if lo == hi {
        Some((lo - 0.5, hi + 0.5))
    } else {
        Some((lo, hi))
    }
}

/// Each series as a polyline on shared axes. Non-finite points break the
/// line.
pub fn render_lines(series: &[Vec<(f64, f64)>], path: impl AsRef<Path>) -> Result<()> {
    let mut c = Canvas::new();
    let xs = bounds(series.iter().flatten().map(|p| &p.0));
    let ys = bounds(series.iter().flatten().filter(|p| p.0.is_finite()).map(|p| &p.1));
    if let (Some((x0, x1)), Some((y0, y1))) = (xs, ys) {
        let span_x = (W - 2 * MARGIN) as f64;
        let span_y = (H - 2 * MARGIN) as f64;
        let map = |(x, y): (f64, f64)| {
            (
                (MARGIN as f64 + (x - x0) / (x1 - x0) * span_x).round() as i64,
                ((H - MARGIN) as f64 - (y - y0) / (y1 - y0) * span_y).round() as i64,
            )
        };
        for (k, s) in series.iter().enumerate() {
            let shade = (k as u16 * 80).min(160);
            let mut prev: Option<(i64, i64)> = None;
            for &p in s {
                if !(p.0.is_finite() && p.1.is_finite()) {
                    prev = None;
                    continue;
                }
                let q = map(p);
                c.line(prev.unwrap_or(q), q, shade);
                prev = Some(q);
            }
        }
    }
    c.write(path.as_ref())
}

/// Bars of nonnegative heights, evenly spaced.
pub fn render_bars(heights: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let mut c = Canvas::new();
    let top = heights.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    if !heights.is_empty() && top > 0.0 {
        let span_x = (W - 2 * MARGIN - 2) as f64;
        let span_y = (H - 2 * MARGIN) as f64;
        let bw = span_x / heights.len() as f64;
        for (i, &h) in heights.iter().enumerate() {
            let x0 = MARGIN + 2 + (i as f64 * bw).round() as usize;
            let x1 = MARGIN + 2 + (((i + 1) as f64 * bw).round() as usize).max(1) - 1;
            let y = H - MARGIN - ((h.max(0.0) / top) * span_y).round() as usize;
            for x in x0..=x1.max(x0) {
                for yy in y..H - MARGIN {
                    c.set(x, yy, 96);
                }
            }
        }
    }
    c.write(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::read_pgm;

    #[test]
    fn plots_are_valid_pgms() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.pgm");
        render_lines(&[vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0), (3.0, 2.0)]], &p).unwrap();
        let img = read_pgm(&p).unwrap();
        assert_eq!((img.width, img.height), (W, H));
        assert!(img.samples.iter().filter(|&&v| v == 0).count() > W);
        let b = dir.path().join("b.pgm");
        render_bars(&[1.0, 0.0, 3.0], &b).unwrap();
        assert!(read_pgm(&b).unwrap().samples.contains(&96));
        render_lines(&[], dir.path().join("e.pgm")).unwrap();
    }
}
