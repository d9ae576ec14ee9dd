//! Synthetic object images standing in for unavailable corpora.
//!
//! Every image is drawn from its own ChaCha stream `(seed, index)`, so any
//! subset can be regenerated independently and in parallel.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProceduralKind {
    /// Smooth Gaussian blobs, upright and brighter towards the top.
    Blobs,
    /// Sinusoids of random period, orientation and phase.
    Gratings,
    /// A few thick strokes and arcs.
    DigitsLike,
    /// Sparse thin strokes in a glyph box.
    CharactersLike,
    /// Every pixel gray 0.
    Null,
}

impl ProceduralKind {
    pub const ALL: [ProceduralKind; 5] = [
        ProceduralKind::Blobs,
        ProceduralKind::Gratings,
        ProceduralKind::DigitsLike,
        ProceduralKind::CharactersLike,
        ProceduralKind::Null,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProceduralKind::Blobs => "blobs",
            ProceduralKind::Gratings => "gratings",
            ProceduralKind::DigitsLike => "digits",
            ProceduralKind::CharactersLike => "characters",
            ProceduralKind::Null => "null",
        }
    }
}

impl fmt::Display for ProceduralKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProceduralKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "blobs" => Ok(Self::Blobs),
            "gratings" => Ok(Self::Gratings),
            "digits" | "digits-like" => Ok(Self::DigitsLike),
            "characters" | "characters-like" => Ok(Self::CharactersLike),
            "null" => Ok(Self::Null),
            other => Err(invalid!(
                "unknown procedural kind {other:?}; expected blobs, gratings, digits, characters or null"
            )),
        }
    }
}

/// Image `index` of the `(kind, seed)` family at `grid x grid`.
pub fn render(kind: ProceduralKind, grid: usize, seed: u64, index: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = grid as f64;
    let values = match kind {
        ProceduralKind::Blobs => blobs(grid, &mut rng),
        ProceduralKind::Gratings => {
            let period = rng.random_range(4.0..16.0) * n / 64.0;
            let theta = rng.random_range(0.0..PI);
            let psi = rng.random_range(0.0..2.0 * PI);
            let (c, s) = (theta.cos(), theta.sin());
            field(grid, |r, col| 0.5 + 0.5 * (2.0 * PI * (col * c + r * s) / period + psi).sin())
        }
        ProceduralKind::DigitsLike => {
            let strokes = rng.random_range(1..=2);
            let radius = rng.random_range(0.04..0.06) * n;
            let mut segs = Vec::new();
            for _ in 0..strokes {
                if rng.random_bool(0.5) {
                    let pts = rng.random_range(3..=5);
                    let path: Vec<(f64, f64)> =
                        (0..pts).map(|_| (rng.random_range(0.25..0.75) * n, rng.random_range(0.25..0.75) * n)).collect();
                    segs.extend(path.windows(2).map(|w| (w[0], w[1])));
                } else {
                    let (cr, cc) = (n * rng.random_range(0.42..0.58), n * rng.random_range(0.42..0.58));
                    let (ry, rx) = (n * rng.random_range(0.15..0.25), n * rng.random_range(0.1..0.2));
                    let start = rng.random_range(0.0..2.0 * PI);
                    let sweep = rng.random_range(PI..2.0 * PI);
                    let at = |t: f64| (cr + ry * t.sin(), cc + rx * t.cos());
                    segs.extend((0..16).map(|k| {
                        (at(start + sweep * k as f64 / 16.0), at(start + sweep * (k + 1) as f64 / 16.0))
                    }));
                }
            }
            strokes_field(grid, &segs, radius)
        }
        ProceduralKind::CharactersLike => {
            let count = rng.random_range(3..=6);
            let radius = rng.random_range(0.02..0.03) * n;
            let mut p = (rng.random_range(0.35..0.65) * n, rng.random_range(0.35..0.65) * n);
            let mut segs = Vec::new();
            for _ in 0..count {
                if rng.random_bool(0.3) {
                    p = (rng.random_range(0.3..0.7) * n, rng.random_range(0.3..0.7) * n);
                }
                let angle = PI / 4.0 * rng.random_range(0..8) as f64;
                let len = rng.random_range(0.08..0.2) * n;
                let q = (
                    (p.0 + len * angle.sin()).clamp(0.3 * n, 0.7 * n),
                    (p.1 + len * angle.cos()).clamp(0.3 * n, 0.7 * n),
                );
                segs.push((p, q));
                p = q;
            }
            strokes_field(grid, &segs, radius)
        }
        ProceduralKind::Null => vec![0.0; grid * grid],
    };
    let pixels = values.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect();
    GrayImage::new(grid, grid, pixels).expect("grid-sized buffer")
}

fn field(grid: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    (0..grid * grid).map(|i| f((i / grid) as f64, (i % grid) as f64)).collect()
}

fn blobs(grid: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = grid as f64;
    let edge = 6.0 * n / 64.0;
    let spread = Normal::new(0.0, n / 6.0).expect("positive std");
    let count = rng.random_range(4..=8);
    let mut v = vec![0.0; grid * grid];
    for _ in 0..count {
        let cx = (n / 2.0 + spread.sample(rng)).clamp(edge, n - edge);
        let cy = (0.42 * n + spread.sample(rng)).clamp(edge, n - edge);
        let sx = rng.random_range(5.0..11.0) * n / 64.0;
        let sy = sx * rng.random_range(0.45..0.8);
        let a = rng.random_range(0.4..1.0);
        for (i, out) in v.iter_mut().enumerate() {
            let (y, x) = ((i / grid) as f64, (i % grid) as f64);
            *out += a * (-((x - cx).powi(2) / (2.0 * sx * sx) + (y - cy).powi(2) / (2.0 * sy * sy))).exp();
        }
    }
    for (i, out) in v.iter_mut().enumerate() {
        *out *= 1.0 - 0.5 * (i / grid) as f64 / n;
    }
    let max = v.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        v.iter_mut().for_each(|x| *x /= max);
    }
    v
}

type Point = (f64, f64);

/// Antialiased strokes: full value within `radius` of a segment, falling to
/// zero over one pixel.
fn strokes_field(grid: usize, segs: &[(Point, Point)], radius: f64) -> Vec<f64> {
    field(grid, |r, c| {
        let d = segs.iter().map(|&(a, b)| segment_distance((r, c), a, b)).fold(f64::INFINITY, f64::min);
        (radius + 0.5 - d).clamp(0.0, 1.0)
    })
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Fraction of pixels at or above `threshold`.
pub fn coverage(img: &GrayImage, threshold: u8) -> f64 {
    img.pixels().iter().filter(|&&p| p >= threshold).count() as f64 / img.pixels().len() as f64
}
