//! 8-bit grayscale images: PGM/PNG I/O, aspect-preserving fit, shifts and
//! quarter-turn rotations.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid!("image dimensions must be positive, got {width}x{height}"));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Load a PGM (P2 or P5) or PNG file. Color PNGs are converted with
    /// Rec. 601 luma weights.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(b"\x89PNG") {
            decode_png(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
        } else if bytes.starts_with(b"P2") || bytes.starts_with(b"P5") {
            decode_pgm(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
        } else {
            Err(Error::Parse(format!("{}: not a PGM or PNG image", path.display())))
        }
    }

    /// Binary (P5) PGM bytes.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_pgm())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let to_io = |e: png::EncodingError| match e {
            png::EncodingError::IoError(io) => Error::io(path, io),
            other => Error::Parse(format!("{}: {other}", path.display())),
        };
        let mut writer = encoder.write_header().map_err(to_io)?;
        writer.write_image_data(&self.pixels).map_err(to_io)?;
        writer.finish().map_err(to_io)
    }

    /// Save as PNG when the extension is `.png`, PGM otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("png") => self.save_png(path),
            _ => self.save_pgm(path),
        }
    }

    /// Resize preserving aspect ratio to fit inside `(grid - 2*margin)`
    /// square, center on a `grid`x`grid` canvas filled with gray 0.
    /// Interpolation is bilinear with pixel-center alignment, so an image
    /// already at the target size is copied unchanged.
    pub fn fit_to_grid(&self, grid: usize, margin: usize) -> Result<GrayImage> {
        if 2 * margin >= grid {
            return Err(invalid!("margin {margin} leaves no room in a {grid}px grid"));
        }
        let inner = (grid - 2 * margin) as f64;
        let scale = (inner / self.width as f64).min(inner / self.height as f64);
        let new_w = ((self.width as f64 * scale).round() as usize).clamp(1, grid - 2 * margin);
        let new_h = ((self.height as f64 * scale).round() as usize).clamp(1, grid - 2 * margin);
        let resized = self.resize_bilinear(new_w, new_h);
        let mut canvas = GrayImage::filled(grid, grid, 0);
        let top = (grid - new_h) / 2;
        let left = (grid - new_w) / 2;
        for r in 0..new_h {
            let dst = (top + r) * grid + left;
            canvas.pixels[dst..dst + new_w].copy_from_slice(&resized.pixels[r * new_w..(r + 1) * new_w]);
        }
        Ok(canvas)
    }

    pub fn resize_bilinear(&self, new_w: usize, new_h: usize) -> GrayImage {
        if new_w == self.width && new_h == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / new_w as f64;
        let sy = self.height as f64 / new_h as f64;
        let mut pixels = Vec::with_capacity(new_w * new_h);
        for r in 0..new_h {
            let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for c in 0..new_w {
                let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let top = self.get(y0, x0) as f64 * (1.0 - wx) + self.get(y0, x1) as f64 * wx;
                let bot = self.get(y1, x0) as f64 * (1.0 - wx) + self.get(y1, x1) as f64 * wx;
                pixels.push((top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8);
            }
        }
        GrayImage { width: new_w, height: new_h, pixels }
    }

    /// Translate content by `dx` columns and `dy` rows; uncovered pixels
    /// become gray 0.
    pub fn shifted(&self, dx: i64, dy: i64) -> GrayImage {
        let mut out = GrayImage::filled(self.width, self.height, 0);
        for r in 0..self.height as i64 {
            let sr = r - dy;
            if sr < 0 || sr >= self.height as i64 {
                continue;
            }
            for c in 0..self.width as i64 {
                let sc = c - dx;
                if sc < 0 || sc >= self.width as i64 {
                    continue;
                }
                out.pixels[(r as usize) * self.width + c as usize] =
                    self.pixels[(sr as usize) * self.width + sc as usize];
            }
        }
        out
    }

    /// Rotate counter-clockwise by `quarter_turns` * 90 degrees.
    pub fn rotated(&self, quarter_turns: u32) -> GrayImage {
        let mut img = self.clone();
        for _ in 0..quarter_turns % 4 {
            let (w, h) = (img.width, img.height);
            let mut pixels = vec![0u8; w * h];
            // new image is h wide, w tall; new(r, c) = old(c, w-1-r)
            for r in 0..w {
                for c in 0..h {
                    pixels[r * h + c] = img.pixels[c * w + (w - 1 - r)];
                }
            }
            img = GrayImage { width: h, height: w, pixels };
        }
        img
    }

    /// Map real values onto 0..=255 linearly over `[lo, hi]`, clamping.
    pub fn from_real(width: usize, height: usize, values: &[f64], lo: f64, hi: f64) -> Result<Self> {
        let span = if hi > lo { hi - lo } else { 1.0 };
        let pixels = values
            .iter()
            .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        Self::new(width, height, pixels)
    }
}

/// Create or truncate `path` and write `bytes`.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let binary = &bytes[..2] == b"P5";
    let mut pos = 2;
    let mut header = [0usize; 3];
    for slot in header.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated PGM header".into()),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("bad PGM header field")?;
    }
    let [width, height, maxval] = header;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("unsupported PGM maxval {maxval}"));
    }
    let rescale = |v: usize| ((v * 255 + maxval / 2) / maxval).min(255) as u8;
    let n = width * height;
    let pixels: Vec<u8> = if binary {
        pos += 1; // single whitespace after maxval
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        let data = bytes.get(pos..pos + need).ok_or("truncated PGM raster")?;
        if wide {
            data.chunks_exact(2)
                .map(|c| rescale(u16::from_be_bytes([c[0], c[1]]) as usize))
                .collect()
        } else {
            data.iter().map(|&v| rescale(v as usize)).collect()
        }
    } else {
        let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| "non-ASCII P2 raster")?;
        let values: Vec<usize> = text
            .split_ascii_whitespace()
            .take(n)
            .map(|t| t.parse().map_err(|_| format!("bad P2 value {t:?}")))
            .collect::<std::result::Result<_, _>>()?;
        if values.len() < n {
            return Err("truncated PGM raster".into());
        }
        values.into_iter().map(rescale).collect()
    };
    GrayImage::new(width, height, pixels).map_err(|e| e.to_string())
}

fn decode_png(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or("PNG too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let channels = info.color_type.samples();
    let luma = |r: u8, g: u8, b: u8| (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round() as u8;
    let pixels = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => {
            data.chunks_exact(channels).map(|p| p[0]).collect()
        }
        png::ColorType::Rgb | png::ColorType::Rgba => {
            data.chunks_exact(channels).map(|p| luma(p[0], p[1], p[2])).collect()
        }
        png::ColorType::Indexed => return Err("indexed PNG not expanded".into()),
    };
    GrayImage::new(w, h, pixels).map_err(|e| e.to_string())
}
