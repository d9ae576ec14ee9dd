use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use super::{Dataset, Record, SamplePair};
use crate::config::{fmt_f64, KeyValues};
use crate::error::{Error, Result};
use crate::image::{write_file, GrayImage};
use crate::optics::{optics_digest, NoiseSpec, PropagationConfig};

pub const TENSOR_MAGIC: [u8; 4] = *b"DLT0";

const MANIFEST_HEADER: &str = "id,source,split,dataset,optics_digest";

/// Encode a tensor: `DLT0`, rank (u32 LE), extents (u32 LE), f32 LE values.
pub fn write_tensor(path: &Path, shape: &[usize], values: &[f32]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 4 * shape.len() + 4 * values.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &out)
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let short = || Error::Truncated(format!("{}: tensor file too short", path.display()));
    let word = |at: usize| -> Result<u32> {
        bytes.get(at..at + 4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes"))).ok_or_else(short)
    };
    let magic: [u8; 4] = bytes.get(..4).ok_or_else(short)?.try_into().expect("4 bytes");
    if magic != TENSOR_MAGIC {
        return Err(Error::BadMagic { expected: TENSOR_MAGIC, found: magic });
    }
    let rank = word(4)? as usize;
    let shape = (0..rank).map(|i| word(8 + 4 * i).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
    let start = 8 + 4 * rank;
    let n: usize = shape.iter().product();
    let body = bytes.get(start..).ok_or_else(short)?;
    if body.len() != 4 * n {
        return Err(Error::Truncated(format!(
            "{}: shape {shape:?} needs {} value bytes, found {}",
            path.display(),
            4 * n,
            body.len()
        )));
    }
    Ok((shape, body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()))
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

pub(super) fn manifest_csv(records: &[Record], digest: &str) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{},{}", r.id, quote(&r.source), r.split, r.dataset, digest);
    }
    out
}

fn read_csv(path: &Path, header: &str) -> Result<Vec<csv::StringRecord>> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_slice());
    let found = reader.headers().map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let expected: Vec<&str> = header.split(',').collect();
    if found.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse(format!("{}: header {:?}, expected {header:?}", path.display(), found)));
    }
    reader
        .records()
        .map(|r| r.map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

fn optics_text(d: &Dataset) -> String {
    let mut kv = d.optics.to_kv();
    kv.set("noise.sigma", fmt_f64(d.noise.sigma));
    kv.set("noise.quantize", d.noise.quantize);
    kv.set("noise.seed", d.noise.seed);
    kv.set("digest", &d.digest);
    kv.render()
}

pub(super) fn save(d: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["raw", "truth", "src"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let records: Vec<Record> = d.pairs.iter().map(|p| p.record.clone()).collect();
    write_file(&dir.join("manifest.csv"), manifest_csv(&records, &d.digest).as_bytes())?;
    let mut samples = String::from("id,mean,scale,degenerate\n");
    for p in &d.pairs {
        let _ = writeln!(samples, "{},{},{},{}", p.record.id, fmt_f64(p.mean), fmt_f64(p.scale), p.degenerate);
    }
    write_file(&dir.join("samples.csv"), samples.as_bytes())?;
    write_file(&dir.join("optics.txt"), optics_text(d).as_bytes())?;
    let g = d.grid();
    for p in &d.pairs {
        write_tensor(&dir.join("raw").join(format!("{}.dlt", p.record.id)), &[g, g], &p.raw)?;
        write_tensor(&dir.join("truth").join(format!("{}.dlt", p.record.id)), &[g, g], &p.truth)?;
        p.image.save_pgm(&dir.join("src").join(format!("{}.pgm", p.record.id)))?;
    }
    Ok(())
}

pub(super) fn load(dir: &Path) -> Result<Dataset> {
    let kv = KeyValues::load(&dir.join("optics.txt"))?;
    let optics = PropagationConfig::from_kv(&kv)?;
    let noise = NoiseSpec {
        sigma: kv.get_or("noise.sigma", 0.0)?,
        quantize: kv.get_or("noise.quantize", false)?,
        seed: kv.get_or("noise.seed", 0)?,
    };
    let digest = optics_digest(&optics, &noise);
    if let Some(declared) = kv.get("digest") {
        if declared != digest {
            return Err(Error::DigestMismatch { expected: digest, found: declared.to_string() });
        }
    }

    let manifest = read_csv(&dir.join("manifest.csv"), MANIFEST_HEADER)?;
    let samples = read_csv(&dir.join("samples.csv"), "id,mean,scale,degenerate")?;
    if samples.len() != manifest.len() {
        return Err(Error::Parse(format!(
            "{}: {} manifest rows but {} sample rows",
            dir.display(),
            manifest.len(),
            samples.len()
        )));
    }
    let g = optics.grid;
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(manifest.len());
    for (row, stats) in manifest.iter().zip(&samples) {
        let field = |r: &csv::StringRecord, i: usize| r.get(i).unwrap_or_default().to_string();
        let record = Record {
            id: field(row, 0),
            source: field(row, 1),
            split: field(row, 2).parse()?,
            dataset: field(row, 3),
        };
        let row_digest = field(row, 4);
        if row_digest != digest {
            return Err(Error::DigestMismatch { expected: digest, found: row_digest });
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::Parse(format!("duplicate sample id {}", record.id)));
        }
        if field(stats, 0) != record.id {
            return Err(Error::Parse(format!("samples.csv row {} does not match manifest id {}", field(stats, 0), record.id)));
        }
        let num = |i: usize| -> Result<f64> {
            field(stats, i).parse().map_err(|e| Error::Parse(format!("samples.csv {}: {e}", record.id)))
        };
        let (mean, scale) = (num(1)?, num(2)?);
        let degenerate = field(stats, 3) == "true";
        let tensor = |sub: &str| -> Result<Vec<f32>> {
            let path = dir.join(sub).join(format!("{}.dlt", record.id));
            let (shape, values) = read_tensor(&path)?;
            if shape != [g, g] {
                return Err(Error::Shape(format!("{}: shape {shape:?}, expected [{g}, {g}]", path.display())));
            }
            Ok(values)
        };
        let raw = tensor("raw")?;
        let truth = tensor("truth")?;
        let image = GrayImage::load(&dir.join("src").join(format!("{}.pgm", record.id)))?;
        pairs.push(SamplePair { record, raw, truth, mean, scale, degenerate, image });
    }
    Ok(Dataset { optics, noise, digest, pairs })
}
