//! Object corpora, paired (intensity, phase) samples and their on-disk form.
//!
//! A dataset directory holds `manifest.csv`, `samples.csv` (per-sample
//! standardization mean and scale), `optics.txt` (the declared optics
//! configuration and its digest) and one `raw/<id>.dlt`, `truth/<id>.dlt`
//! and `src/<id>.pgm` per sample.

mod procedural;
mod store;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use procedural::{coverage, render, ProceduralKind};
pub use store::{read_tensor, write_tensor, TENSOR_MAGIC};

use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use crate::optics::{calibrate_phase, optics_digest, NoiseSpec, PropagationConfig, Propagator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    /// file path or generator tag
    pub source: String,
    pub split: Split,
    /// class tag, e.g. `blobs`
    pub dataset: String,
}

/// Grid-sized object images with their manifest rows.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub records: Vec<Record>,
    pub images: Vec<GrayImage>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    /// Manifest CSV with an empty digest column.
    pub fn manifest_csv(&self) -> String {
        store::manifest_csv(&self.records, "")
    }
}

/// Seeded partition: `round(n * train_fraction)` of `n` items go to train.
pub fn assign_splits(n: usize, train_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(invalid!("train fraction must lie in [0, 1], got {train_fraction}"));
    }
    let n_train = (n as f64 * train_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Test; n];
    for &i in &order[..n_train] {
        splits[i] = Split::Train;
    }
    Ok(splits)
}

/// Outcome of reading an image directory.
#[derive(Debug, Clone)]
pub struct IngestReport {
    pub corpus: Corpus,
    /// files that could not be read as PGM or PNG
    pub skipped: usize,
}

/// Read every PGM/PNG image in `dir` (sorted by name), fit each onto the
/// grid with `margin` pixels of gray 0 on every side, and split.
pub fn ingest(dir: &Path, grid: usize, margin: usize, train_fraction: f64, seed: u64, tag: &str) -> Result<IngestReport> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file() {
            paths.push(entry.path());
        }
    }
    paths.sort();

    let mut records = Vec::new();
    let mut images = Vec::new();
    let mut skipped = 0;
    let mut used = std::collections::HashSet::new();
    for path in paths {
        let img = match GrayImage::load(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let base: String = stem.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
        let mut id = base.clone();
        let mut k = 1;
        while !used.insert(id.clone()) {
            id = format!("{base}_{k}");
            k += 1;
        }
        images.push(img.fit_to_grid(grid, margin)?);
        records.push(Record { id, source: path.display().to_string(), split: Split::Train, dataset: tag.to_string() });
    }
    if records.is_empty() {
        return Err(invalid!("{}: no readable images ({skipped} files skipped)", dir.display()));
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} non-image files", dir.display());
    }
    for (r, s) in records.iter_mut().zip(assign_splits(images.len(), train_fraction, seed)?) {
        r.split = s;
    }
    Ok(IngestReport { corpus: Corpus { records, images }, skipped })
}

/// `count` images of `kind`, split with the same seed.
pub fn generate_procedural(kind: ProceduralKind, count: usize, seed: u64, grid: usize, train_fraction: f64) -> Result<Corpus> {
    if count == 0 {
        return Err(invalid!("procedural count must be at least 1"));
    }
    if grid < 2 {
        return Err(invalid!("grid must be at least 2, got {grid}"));
    }
    let splits = assign_splits(count, train_fraction, seed)?;
    let images: Vec<GrayImage> = (0..count as u64).into_par_iter().map(|i| render(kind, grid, seed, i)).collect();
    let records = splits
        .into_iter()
        .enumerate()
        .map(|(i, split)| Record {
            id: format!("{kind}-{i:05}"),
            source: format!("procedural:{kind}:seed={seed}:index={i}"),
            split,
            dataset: kind.to_string(),
        })
        .collect();
    Ok(Corpus { records, images })
}

/// Network-ready sample: standardized intensity and phase truth, row-major
/// `grid x grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub record: Record,
    pub raw: Vec<f32>,
    pub truth: Vec<f32>,
    /// intensity mean and standard deviation removed by standardization
    pub mean: f64,
    pub scale: f64,
    /// the intensity was constant and `raw` is all zero
    pub degenerate: bool,
    pub image: GrayImage,
}

/// Samples synthesized under one optics configuration.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub optics: PropagationConfig,
    pub noise: NoiseSpec,
    pub digest: String,
    pub pairs: Vec<SamplePair>,
}

impl Dataset {
    pub fn grid(&self) -> usize {
        self.optics.grid
    }

    pub fn split(&self, split: Split) -> Vec<&SamplePair> {
        self.pairs.iter().filter(|p| p.record.split == split).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        store::save(self, dir)
    }

    /// Load and verify: unique ids, grid-sized tensors and a single optics
    /// digest matching `optics.txt`.
    pub fn load(dir: &Path) -> Result<Self> {
        store::load(dir)
    }
}

/// Relative spread below which an intensity counts as constant.
const DEGENERATE_SPREAD: f64 = 1e-9;

/// Zero-mean, unit-variance copy of `intensity`, with the removed mean and
/// scale. Constant inputs give zeros and the degenerate flag.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN spreads must count as degenerate
pub fn standardize(intensity: &[f64]) -> (Vec<f32>, f64, f64, bool) {
    let n = intensity.len() as f64;
    let mean = intensity.iter().sum::<f64>() / n;
    let var = intensity.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = var.sqrt();
    if !(scale > DEGENERATE_SPREAD * mean.abs()) || scale == 0.0 {
        return (vec![0.0; intensity.len()], mean, scale, true);
    }
    (intensity.iter().map(|v| ((v - mean) / scale) as f32).collect(), mean, scale, false)
}

/// Simulate every corpus image. Noise for sample `i` is seeded with
/// `noise.seed + i`.
pub fn synthesize(corpus: &Corpus, cfg: &PropagationConfig, noise: &NoiseSpec) -> Result<Dataset> {
    let prop = Propagator::new(cfg)?;
    let pairs = corpus
        .records
        .par_iter()
        .zip(&corpus.images)
        .enumerate()
        .map(|(i, (record, image))| {
            if image.width() != cfg.grid || image.height() != cfg.grid {
                return Err(Error::Shape(format!(
                    "sample {}: image is {}x{} but the optics grid is {}",
                    record.id,
                    image.width(),
                    image.height(),
                    cfg.grid
                )));
            }
            let sample_noise = NoiseSpec { seed: noise.seed.wrapping_add(i as u64), ..noise.clone() };
            let raw = prop.measure(image, &sample_noise)?;
            let truth = calibrate_phase(image, cfg.grid)?;
            let (raw, mean, scale, degenerate) = standardize(raw.intensity());
            Ok(SamplePair {
                record: record.clone(),
                raw,
                truth: truth.phase().iter().map(|&p| p as f32).collect(),
                mean,
                scale,
                degenerate,
                image: image.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { optics: cfg.clone(), noise: noise.clone(), digest: optics_digest(cfg, noise), pairs })
}
