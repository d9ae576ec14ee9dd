//! Coherent forward model: 8-bit object image -> phase delay -> free-space
//! propagation -> detector intensity.
//!
//! Propagation is the band-limited angular spectrum method. The field is
//! zero-padded to `pad_factor * grid` samples per side, transformed, multiplied by
//! `exp(i 2 pi d sqrt(1/lambda^2 - fx^2 - fy^2))` with evanescent frequencies
//! zeroed, transformed back and cropped. All arithmetic is `f64`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{Fft, FftPlanner};
use sha2::{Digest, Sha256};

use crate::config::{fmt_f64, KeyValues};
use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;

/// Geometry of the simulated SLM-to-camera path.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationConfig {
    /// meters
    pub wavelength: f64,
    /// SLM/camera sample spacing, meters
    pub pixel_pitch: f64,
    /// SLM-to-sensor distance, meters; negative values back-propagate
    pub distance: f64,
    /// samples per side of the object and detector grids
    pub grid: usize,
    pub pad_factor: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            wavelength: 632.8e-9,
            pixel_pitch: 20e-6,
            distance: 0.375,
            grid: 64,
            pad_factor: 2,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength > 0.0 && self.wavelength.is_finite()) {
            return Err(invalid!("wavelength must be positive, got {}", self.wavelength));
        }
        if !(self.pixel_pitch > 0.0 && self.pixel_pitch.is_finite()) {
            return Err(invalid!("pixel_pitch must be positive, got {}", self.pixel_pitch));
        }
        if !self.distance.is_finite() {
            return Err(invalid!("distance must be finite, got {}", self.distance));
        }
        if self.grid < 2 {
            return Err(invalid!("grid must be at least 2, got {}", self.grid));
        }
        if self.pad_factor < 1 {
            return Err(invalid!("pad_factor must be at least 1, got {}", self.pad_factor));
        }
        Ok(())
    }

    pub fn with_distance(&self, distance: f64) -> Self {
        Self { distance, ..self.clone() }
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("wavelength", fmt_f64(self.wavelength));
        kv.set("pixel_pitch", fmt_f64(self.pixel_pitch));
        kv.set("distance", fmt_f64(self.distance));
        kv.set("grid", self.grid);
        kv.set("pad_factor", self.pad_factor);
        kv
    }

    /// Read from un-prefixed keys, falling back to defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            wavelength: kv.get_or("wavelength", d.wavelength)?,
            pixel_pitch: kv.get_or("pixel_pitch", d.pixel_pitch)?,
            distance: kv.get_or("distance", d.distance)?,
            grid: kv.get_or("grid", d.grid)?,
            pad_factor: kv.get_or("pad_factor", d.pad_factor)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Detector noise applied after propagation. Both stages are off by default.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoiseSpec {
    /// standard deviation of additive Gaussian noise on intensity; 0 disables
    pub sigma: f64,
    /// normalize to the maximum, scale to 255 and round
    pub quantize: bool,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn is_off(&self) -> bool {
        self.sigma == 0.0 && !self.quantize
    }
}

/// Short hex digest identifying an optics configuration plus noise model.
/// Seeds are excluded: they select samples, not the physics.
pub fn optics_digest(cfg: &PropagationConfig, noise: &NoiseSpec) -> String {
    let mut kv = cfg.to_kv();
    kv.set("noise.sigma", fmt_f64(noise.sigma));
    kv.set("noise.quantize", noise.quantize);
    let hash = Sha256::digest(kv.render().as_bytes());
    hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Per-pixel phase delay in radians, each value in `[-pi, 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseObject {
    height: usize,
    width: usize,
    phase: Vec<f64>,
}

impl PhaseObject {
    pub fn new(height: usize, width: usize, phase: Vec<f64>) -> Result<Self> {
        if phase.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} phase object needs {} values, got {}",
                height * width,
                phase.len()
            )));
        }
        if let Some(bad) = phase.iter().find(|p| !(-PI..=0.0).contains(*p)) {
            return Err(invalid!("phase {bad} outside [-pi, 0]"));
        }
        Ok(Self { height, width, phase })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn phase(&self) -> &[f64] {
        &self.phase
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    height: usize,
    width: usize,
    values: Vec<Complex64>,
}

impl ComplexField {
    pub fn new(height: usize, width: usize, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} field needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![Complex64::new(0.0, 0.0); height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

/// Detector-plane intensity, non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    height: usize,
    width: usize,
    intensity: Vec<f64>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, intensity: Vec<f64>) -> Result<Self> {
        if intensity.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} raw image needs {} values, got {}",
                height * width,
                intensity.len()
            )));
        }
        if let Some(bad) = intensity.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(invalid!("intensity must be finite and non-negative, got {bad}"));
        }
        Ok(Self { height, width, intensity })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn intensity(&self) -> &[f64] {
        &self.intensity
    }

    /// 8-bit view normalized to the image maximum (all-zero stays zero).
    pub fn quantized(&self) -> GrayImage {
        let max = self.intensity.iter().cloned().fold(0.0, f64::max);
        let hi = if max > 0.0 { max } else { 1.0 };
        GrayImage::from_real(self.width, self.height, &self.intensity, 0.0, hi)
            .expect("dimensions already validated")
    }
}

/// Linear SLM response: gray 0 -> 0 rad, gray 255 -> -pi rad.
pub fn calibrate_phase(gray: &GrayImage, grid: usize) -> Result<PhaseObject> {
    if gray.width() != grid || gray.height() != grid {
        return Err(Error::Shape(format!(
            "image is {}x{} but the simulation grid is {grid}x{grid}; resize/pad it first",
            gray.width(),
            gray.height()
        )));
    }
    let phase = gray.pixels().iter().map(|&g| -PI * g as f64 / 255.0).collect();
    Ok(PhaseObject { height: grid, width: grid, phase })
}

pub fn phase_to_field(obj: &PhaseObject) -> ComplexField {
    ComplexField {
        height: obj.height,
        width: obj.width,
        values: obj.phase.iter().map(|&p| Complex64::from_polar(1.0, p)).collect(),
    }
}

pub fn intensity(field: &ComplexField) -> RawImage {
    RawImage {
        height: field.height,
        width: field.width,
        intensity: field.values.iter().map(|v| v.norm_sqr()).collect(),
    }
}

/// Square 2-D FFT built from 1-D row transforms and transposes.
struct Fft2 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { n, forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) }
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let fft = if inverse { &self.inverse } else { &self.forward };
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        fft.process_with_scratch(data, &mut scratch);
        transpose(data, self.n);
        fft.process_with_scratch(data, &mut scratch);
        transpose(data, self.n);
        if inverse {
            let scale = 1.0 / (self.n * self.n) as f64;
            data.iter_mut().for_each(|v| *v *= scale);
        }
    }
}

fn transpose(data: &mut [Complex64], n: usize) {
    for r in 0..n {
        for c in r + 1..n {
            data.swap(r * n + c, c * n + r);
        }
    }
}

/// Signed DFT frequency index, numpy `fftfreq` ordering.
fn freq_index(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Reusable angular-spectrum propagator for one configuration.
pub struct Propagator {
    cfg: PropagationConfig,
    padded: usize,
    fft: Fft2,
    transfer: Vec<Complex64>,
}

impl Propagator {
    pub fn new(cfg: &PropagationConfig) -> Result<Self> {
        cfg.validate()?;
        let padded = cfg.grid * cfg.pad_factor;
        let inv_lambda2 = 1.0 / (cfg.wavelength * cfg.wavelength);
        let df = 1.0 / (padded as f64 * cfg.pixel_pitch);
        let mut transfer = Vec::with_capacity(padded * padded);
        for r in 0..padded {
            let fy = freq_index(r, padded) * df;
            for c in 0..padded {
                let fx = freq_index(c, padded) * df;
                let arg = inv_lambda2 - fx * fx - fy * fy;
                transfer.push(if arg > 0.0 {
                    Complex64::from_polar(1.0, 2.0 * PI * cfg.distance * arg.sqrt())
                } else {
                    Complex64::new(0.0, 0.0)
                });
            }
        }
        Ok(Self { cfg: cfg.clone(), padded, fft: Fft2::new(padded), transfer })
    }

    pub fn config(&self) -> &PropagationConfig {
        &self.cfg
    }

    pub fn propagate(&self, field: &ComplexField) -> Result<ComplexField> {
        let n = self.cfg.grid;
        if field.height != n || field.width != n {
            return Err(Error::Shape(format!(
                "field is {}x{} but the propagation grid is {n}x{n}",
                field.height, field.width
            )));
        }
        if !field.is_finite() {
            return Err(Error::NonFinite("input field contains NaN or infinity".into()));
        }
        let p = self.padded;
        let off = (p - n) / 2;
        let mut buf = vec![Complex64::new(0.0, 0.0); p * p];
        for r in 0..n {
            buf[(r + off) * p + off..(r + off) * p + off + n]
                .copy_from_slice(&field.values[r * n..(r + 1) * n]);
        }
        self.fft.run(&mut buf, false);
        buf.iter_mut().zip(&self.transfer).for_each(|(v, h)| *v *= h);
        self.fft.run(&mut buf, true);
        let mut values = Vec::with_capacity(n * n);
        for r in 0..n {
            values.extend_from_slice(&buf[(r + off) * p + off..(r + off) * p + off + n]);
        }
        Ok(ComplexField { height: n, width: n, values })
    }

    /// Full chain for one 8-bit object image.
    pub fn measure(&self, gray: &GrayImage, noise: &NoiseSpec) -> Result<RawImage> {
        let obj = calibrate_phase(gray, self.cfg.grid)?;
        let field = self.propagate(&phase_to_field(&obj))?;
        let mut raw = intensity(&field);
        apply_noise(&mut raw, noise)?;
        Ok(raw)
    }
}

pub fn propagate(field: &ComplexField, cfg: &PropagationConfig) -> Result<ComplexField> {
    Propagator::new(cfg)?.propagate(field)
}

pub fn simulate_measurement(gray: &GrayImage, cfg: &PropagationConfig, noise: &NoiseSpec) -> Result<RawImage> {
    Propagator::new(cfg)?.measure(gray, noise)
}

fn apply_noise(raw: &mut RawImage, noise: &NoiseSpec) -> Result<()> {
    if noise.sigma < 0.0 || !noise.sigma.is_finite() {
        return Err(invalid!("noise sigma must be finite and >= 0, got {}", noise.sigma));
    }
    if noise.sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        let normal = Normal::new(0.0, noise.sigma).expect("sigma validated");
        for v in raw.intensity.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).max(0.0);
        }
    }
    if noise.quantize {
        let q = raw.quantized();
        raw.intensity = q.pixels().iter().map(|&p| p as f64).collect();
    }
    Ok(())
}
