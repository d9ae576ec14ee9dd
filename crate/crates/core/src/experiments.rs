//! Analyses of a trained model: per-class error tables, distance, shift and
//! rotation sweeps, maximally activated patterns and reconstruction grids.
//!
//! Shifts and rotations act on the object image before simulation, the way
//! the object would be moved on the modulator. Nothing here mutates the
//! model.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::config::fmt_f64;
use crate::datasets::{synthesize, Corpus, Dataset, SamplePair, Split};
use crate::error::{invalid, Error, Result};
use crate::image::{write_file, GrayImage};
use crate::network::Model;
use crate::optics::{NoiseSpec, PropagationConfig};
use crate::training::{evaluate, mae, null_baseline, predict};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// meters
    Distance,
    /// pixels, applied along both image axes
    Shift,
    /// degrees, multiples of 90
    Rotation,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Distance => "distance",
            Axis::Shift => "shift",
            Axis::Rotation => "rotation",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distance" => Ok(Axis::Distance),
            "shift" => Ok(Axis::Shift),
            "rotation" => Ok(Axis::Rotation),
            other => Err(invalid!("unknown sweep axis {other:?}; expected distance, shift or rotation")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub mae: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: Axis,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,value,mae,n\n");
        for r in &self.rows {
            let value = match self.axis {
                Axis::Distance => fmt_f64(r.value),
                Axis::Shift | Axis::Rotation => format!("{}", r.value as i64),
            };
            let _ = writeln!(out, "{},{value},{},{}", self.axis, fmt_f64(r.mae), r.n);
        }
        out
    }

    /// Row with the smallest error; the first one on ties.
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows.iter().fold(None, |best: Option<&SweepRow>, r| match best {
            Some(b) if b.mae <= r.mae => Some(b),
            _ => Some(r),
        })
    }
}

/// Validated sweep point: the value reported in the CSV and how to apply it.
enum Point {
    Distance(f64),
    Shift(i64),
    QuarterTurns(u32),
}

fn parse_point(axis: Axis, value: f64, grid: usize) -> Result<Point> {
    if !value.is_finite() {
        return Err(invalid!("{axis} value {value} is not finite"));
    }
    match axis {
        Axis::Distance if value <= 0.0 => Err(invalid!("distance must be positive, got {value}")),
        Axis::Distance => Ok(Point::Distance(value)),
        Axis::Shift => {
            if value.fract() != 0.0 {
                return Err(invalid!("shift must be a whole number of pixels, got {value}"));
            }
            if value.abs() >= grid as f64 {
                return Err(invalid!("shift {value} moves the object off the {grid}-pixel grid"));
            }
            Ok(Point::Shift(value as i64))
        }
        Axis::Rotation => {
            if value.fract() != 0.0 || (value as i64) % 90 != 0 {
                return Err(invalid!("rotation must be a multiple of 90 degrees, got {value}"));
            }
            Ok(Point::QuarterTurns(((value as i64 / 90).rem_euclid(4)) as u32))
        }
    }
}

impl Point {
    fn reported(&self) -> f64 {
        match *self {
            Point::Distance(d) => d,
            Point::Shift(s) => s as f64,
            Point::QuarterTurns(q) => 90.0 * q as f64,
        }
    }
}

/// Re-simulate the source images of `samples` under one sweep point and
/// measure the model's error on them.
///
/// `optics` and `noise` describe the configuration the samples were made
/// with; a distance point overrides only the distance.
pub fn sweep(
    model: &Model,
    samples: &[&SamplePair],
    optics: &PropagationConfig,
    noise: &NoiseSpec,
    axis: Axis,
    values: &[f64],
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(invalid!("a {axis} sweep needs at least one value"));
    }
    if samples.is_empty() {
        return Err(invalid!("a {axis} sweep needs at least one sample"));
    }
    let points = values.iter().map(|&v| parse_point(axis, v, optics.grid)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(points.len());
    for point in points {
        let cfg = match point {
            Point::Distance(d) => optics.with_distance(d),
            _ => optics.clone(),
        };
        let images = samples
            .iter()
            .map(|s| match point {
                Point::Distance(_) => s.image.clone(),
                Point::Shift(k) => s.image.shifted(k, k),
                Point::QuarterTurns(q) => s.image.rotated(q),
            })
            .collect();
        let corpus = Corpus { records: samples.iter().map(|s| s.record.clone()).collect(), images };
        let data = synthesize(&corpus, &cfg, noise)?;
        let refs: Vec<&SamplePair> = data.pairs.iter().collect();
        rows.push(SweepRow { value: point.reported(), mae: evaluate(model, &refs)?, n: refs.len() });
    }
    Ok(SweepResult { axis, rows })
}

pub fn distance_sweep(model: &Model, dataset: &Dataset, distances: &[f64]) -> Result<SweepResult> {
    sweep(model, &evaluation_set(dataset), &dataset.optics, &dataset.noise, Axis::Distance, distances)
}

pub fn shift_sweep(model: &Model, dataset: &Dataset, shifts: &[f64]) -> Result<SweepResult> {
    sweep(model, &evaluation_set(dataset), &dataset.optics, &dataset.noise, Axis::Shift, shifts)
}

pub fn rotation_sweep(model: &Model, dataset: &Dataset, degrees: &[f64]) -> Result<SweepResult> {
    sweep(model, &evaluation_set(dataset), &dataset.optics, &dataset.noise, Axis::Rotation, degrees)
}

/// The test split, or every sample when the dataset has no test split.
pub fn evaluation_set(dataset: &Dataset) -> Vec<&SamplePair> {
    let test = dataset.split(Split::Test);
    if test.is_empty() {
        dataset.pairs.iter().collect()
    } else {
        test
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainRow {
    pub tag: String,
    pub mae: f64,
    pub n: usize,
    /// error of predicting the set's mean phase image
    pub null_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DomainTable {
    pub rows: Vec<DomainRow>,
}

impl DomainTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,mae,n,null_mae\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.tag, fmt_f64(r.mae), r.n, fmt_f64(r.null_mae));
        }
        out
    }

    pub fn get(&self, tag: &str) -> Option<&DomainRow> {
        self.rows.iter().find(|r| r.tag == tag)
    }
}

/// Error of one model on several tagged test sets, all of which must have
/// been simulated with the optics the model was trained under.
pub fn cross_domain_eval(model: &Model, trained_digest: &str, sets: &[(&str, &Dataset)]) -> Result<DomainTable> {
    if sets.is_empty() {
        return Err(invalid!("no test sets given"));
    }
    let mut rows = Vec::with_capacity(sets.len());
    for &(tag, data) in sets {
        if data.digest != trained_digest {
            return Err(Error::DigestMismatch { expected: trained_digest.to_string(), found: data.digest.clone() });
        }
        let samples = evaluation_set(data);
        rows.push(DomainRow {
            tag: tag.to_string(),
            mae: evaluate(model, &samples)?,
            n: samples.len(),
            null_mae: null_baseline(data)?,
        });
    }
    Ok(DomainTable { rows })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapConfig {
    /// 1 is the first convolution; layer `k + 1` is the output of block `k`
    pub layer: usize,
    pub filter: usize,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self { layer: 1, filter: 0, steps: 100, step_size: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    /// unit-L2-norm input, row-major `size x size`
    pub image: Vec<f64>,
    /// mean filter activation before the first step and after each step
    pub trace: Vec<f64>,
}

impl MapResult {
    /// Activation of the normalized random initialization.
    pub fn initial(&self) -> f64 {
        self.trace[0]
    }

    pub fn last(&self) -> f64 {
        *self.trace.last().expect("trace holds the initial activation")
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,activation\n");
        for (i, a) in self.trace.iter().enumerate() {
            let _ = writeln!(out, "{i},{}", fmt_f64(*a));
        }
        out
    }

    /// Grayscale rendering stretched over the image's own range.
    pub fn to_image(&self, size: usize) -> GrayImage {
        let lo = self.image.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        GrayImage::from_real(size, size, &self.image, lo, hi).expect("square map image")
    }
}

fn normalize(x: &mut [f64]) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
}

/// Mean activation of one filter and its gradient with respect to the input.
fn activation(model: &Model, params: &[Tensor<f64>], x: &[f64], cfg: &MapConfig) -> Result<(f64, Vec<f64>)> {
    let size = model.spec().input_size;
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let input = g.leaf(Tensor::new(vec![1, 1, size, size], x.to_vec())?);
    let rec = model.record(&mut g, &vars, input, Some(cfg.layer - 1))?;
    let score = g.channel_mean(rec.layers[cfg.layer - 1], cfg.filter)?;
    let value = g.value(score).data()[0];
    g.backward(score)?;
    let grad = g.grad(input).map_or_else(|| vec![0.0; x.len()], |t| t.data().to_vec());
    Ok((value, grad))
}

/// Gradient ascent on a unit-norm input to maximize one filter's mean
/// activation.
///
/// Each step moves by `step_size` along the normalized gradient and projects
/// back onto the unit sphere. A vanishing gradient leaves the input as is.
pub fn max_activation_pattern(model: &Model, cfg: &MapConfig) -> Result<MapResult> {
    if cfg.layer == 0 || cfg.layer > model.layer_count() {
        return Err(invalid!("layer {} out of range 1..={}", cfg.layer, model.layer_count()));
    }
    let channels = model.layer_channels(cfg.layer - 1)?;
    if cfg.filter >= channels {
        return Err(invalid!("filter {} out of range; layer {} has {channels} filters", cfg.filter, cfg.layer));
    }
    if !(cfg.step_size >= 0.0 && cfg.step_size.is_finite()) {
        return Err(invalid!("step size must be finite and >= 0, got {}", cfg.step_size));
    }
    let size = model.spec().input_size;
    let params: Vec<Tensor<f64>> = model.parameters().iter().map(|p| p.cast()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x: Vec<f64> = (0..size * size).map(|_| 1e-2 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    normalize(&mut x);

    let (mut value, mut grad) = activation(model, &params, &x, cfg)?;
    let mut trace = vec![value];
    for _ in 0..cfg.steps {
        let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            x.iter_mut().zip(&grad).for_each(|(xi, gi)| *xi += cfg.step_size * gi / norm);
            normalize(&mut x);
        }
        (value, grad) = activation(model, &params, &x, cfg)?;
        trace.push(value);
    }
    Ok(MapResult { image: x, trace })
}

/// Fixed-range phase rendering: -pi is black, 0 is white.
fn phase_tile(values: impl Iterator<Item = f64>) -> Vec<u8> {
    let pi = std::f64::consts::PI;
    values.map(|v| (((v + pi) / pi) * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionGrid {
    /// one row per sample: truth, raw intensity, reconstruction
    pub image: GrayImage,
    /// per-sample L1 error, in row order
    pub errors: Vec<f64>,
}

impl ReconstructionGrid {
    pub fn errors_csv(&self, samples: &[&SamplePair]) -> String {
        let mut out = String::from("row,id,l1\n");
        for (i, (s, e)) in samples.iter().zip(&self.errors).enumerate() {
            let _ = writeln!(out, "{i},{},{}", s.record.id, fmt_f64(*e));
        }
        out
    }
}

/// Tile truth, measurement and reconstruction side by side, one sample per row.
pub fn reconstruct_grid(model: &Model, samples: &[&SamplePair]) -> Result<ReconstructionGrid> {
    if samples.is_empty() {
        return Err(invalid!("reconstruction grid needs at least one sample"));
    }
    let n = model.spec().input_size;
    let width = 3 * n;
    let mut pixels = vec![0u8; width * n * samples.len()];
    let mut errors = Vec::with_capacity(samples.len());
    for (row, s) in samples.iter().enumerate() {
        let pred = predict(model, &s.raw)?;
        errors.push(mae(&pred, &s.truth));
        let lo = s.raw.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let hi = s.raw.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let raw: Vec<f64> = s.raw.iter().map(|&v| v as f64).collect();
        let tiles = [
            phase_tile(s.truth.iter().map(|&v| v as f64)),
            GrayImage::from_real(n, n, &raw, lo, hi)?.pixels().to_vec(),
            phase_tile(pred.iter().map(|&v| v as f32 as f64)),
        ];
        for (col, tile) in tiles.iter().enumerate() {
            for r in 0..n {
                let dst = (row * n + r) * width + col * n;
                pixels[dst..dst + n].copy_from_slice(&tile[r * n..(r + 1) * n]);
            }
        }
    }
    Ok(ReconstructionGrid { image: GrayImage::new(width, n * samples.len(), pixels)?, errors })
}

/// Write the grid image (PGM or PNG by extension) and an `id,l1` table next
/// to it.
pub fn write_reconstruction_grid(model: &Model, samples: &[&SamplePair], path: &Path) -> Result<ReconstructionGrid> {
    let grid = reconstruct_grid(model, samples)?;
    grid.image.save(path)?;
    write_file(&path.with_extension("csv"), grid.errors_csv(samples).as_bytes())?;
    Ok(grid)
}
