use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dlpr_core::config::{fmt_f64, KeyValues};
use dlpr_core::datasets::{
    assign_splits, generate_procedural, ingest, synthesize, write_tensor, Corpus, Dataset, ProceduralKind, Split,
};
use dlpr_core::experiments::{
    cross_domain_eval, evaluation_set, max_activation_pattern, sweep as run_sweep, write_reconstruction_grid, Axis,
    MapConfig,
};
use dlpr_core::image::{write_file, GrayImage};
use dlpr_core::network::{load_checkpoint, CheckpointMeta, Model, NetworkSpec};
use dlpr_core::optics::{simulate_measurement, NoiseSpec, PropagationConfig};
use dlpr_core::training::{null_baseline, train as run_training, TrainConfig, TrainOutputs};
use dlpr_core::{Error, Result};

use crate::settings::{as_input, RunConfig};

fn required<'a>(cfg: &'a RunConfig, key: &str, flag: &str) -> Result<&'a str> {
    cfg.get(key).ok_or_else(|| Error::InvalidArgument(format!("missing {flag} (or `{key}` in the config file)")))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_resolved(cfg: &RunConfig, dir: &Path, resolved: &KeyValues) -> Result<()> {
    write_file(&dir.join("resolved-config.txt"), cfg.resolved(resolved).render().as_bytes())
}

fn optics_kv(optics: &PropagationConfig, noise: &NoiseSpec) -> KeyValues {
    let mut kv = optics.to_kv().with_prefix("optics");
    kv.set("noise.sigma", fmt_f64(noise.sigma));
    kv.set("noise.quantize", noise.quantize);
    kv.set("noise.seed", noise.seed);
    kv
}

fn load_dataset(dir: &str) -> Result<Dataset> {
    Dataset::load(Path::new(dir)).map_err(as_input)
}

fn load_model(cfg: &RunConfig) -> Result<(Model, CheckpointMeta)> {
    load_checkpoint(Path::new(required(cfg, "experiment.checkpoint", "--checkpoint")?)).map_err(as_input)
}

fn check_digest(meta: &CheckpointMeta, dataset: &Dataset) -> Result<()> {
    if meta.optics_digest != dataset.digest {
        return Err(Error::DigestMismatch { expected: meta.optics_digest.clone(), found: dataset.digest.clone() });
    }
    Ok(())
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let input = PathBuf::from(required(cfg, "experiment.input", "--input")?);
    let optics = cfg.optics()?;
    let noise = cfg.noise()?;
    let margin: usize = cfg.get_or("dataset.margin", 0)?;
    let image = GrayImage::load(&input).map_err(as_input)?.fit_to_grid(optics.grid, margin)?;
    let raw = simulate_measurement(&image, &optics, &noise)?;

    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("simulated");
    let out = cfg.output(&format!("simulate/{stem}.dlt"))?;
    let tensor = if out.extension().is_some_and(|e| e == "pgm") { out.with_extension("dlt") } else { out };
    let dir = tensor.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    create_dir(&dir)?;
    let values: Vec<f32> = raw.intensity().iter().map(|&v| v as f32).collect();
    write_tensor(&tensor, &[optics.grid, optics.grid], &values)?;
    raw.quantized().save_pgm(&tensor.with_extension("pgm"))?;

    let mut resolved = optics_kv(&optics, &noise);
    resolved.set("dataset.margin", margin);
    write_resolved(cfg, &dir, &resolved)?;
    let lo = raw.intensity().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.intensity().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let g = optics.grid;
    println!("wrote {} ({g}x{g}, intensity {lo:.6}..{hi:.6})", tensor.display());
    Ok(())
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let optics = cfg.optics()?;
    let noise = cfg.noise()?;
    let split: f64 = cfg.get_or("dataset.split", 0.9)?;
    let seed: u64 = cfg.get_or("dataset.seed", 0)?;
    let margin: usize = cfg.get_or("dataset.margin", 0)?;
    let count: Option<usize> = cfg.get_parsed("dataset.count")?;
    let mut resolved = optics_kv(&optics, &noise);

    let corpus = match (cfg.get("dataset.source"), cfg.get("dataset.kind")) {
        (Some(dir), None) => {
            let dir = Path::new(dir);
            let tag = match cfg.get("dataset.tag") {
                Some(t) => t.to_string(),
                None => dir.file_name().and_then(|n| n.to_str()).unwrap_or("images").to_string(),
            };
            let mut corpus = ingest(dir, optics.grid, margin, split, seed, &tag).map_err(as_input)?.corpus;
            if let Some(n) = count.filter(|&n| n < corpus.len()) {
                corpus = Corpus { records: corpus.records[..n].to_vec(), images: corpus.images[..n].to_vec() };
                for (r, s) in corpus.records.iter_mut().zip(assign_splits(n, split, seed)?) {
                    r.split = s;
                }
            }
            resolved.set("dataset.tag", tag);
            corpus
        }
        (None, Some(kind)) => {
            let kind: ProceduralKind = kind.parse()?;
            let n = count.ok_or_else(|| Error::InvalidArgument("--procedural needs --count".into()))?;
            generate_procedural(kind, n, seed, optics.grid, split)?
        }
        (Some(_), Some(_)) => return Err(Error::InvalidArgument("give either --source or --procedural, not both".into())),
        (None, None) => return Err(Error::InvalidArgument("gen-data needs --source <dir> or --procedural <kind>".into())),
    };
    let dataset = synthesize(&corpus, &optics, &noise)?;

    let out = cfg.output("gen-data")?;
    create_dir(&out)?;
    dataset.save(&out)?;
    for (k, v) in [("count", corpus.len().to_string()), ("split", fmt_f64(split)), ("seed", seed.to_string())] {
        resolved.set(&format!("dataset.{k}"), v);
    }
    resolved.set("dataset.margin", margin);
    write_resolved(cfg, &out, &resolved)?;
    println!("generated {}/{}", dataset.split(Split::Train).len(), dataset.split(Split::Test).len());
    Ok(())
}

pub fn train(cfg: &RunConfig, spec_file: Option<&Path>) -> Result<()> {
    let dataset = load_dataset(required(cfg, "dataset.path", "--data")?)?;
    let train_cfg = TrainConfig::from_kv(&cfg.section("train"))?;
    let mut net = cfg.section("network");
    if let Some(path) = spec_file {
        for (k, v) in KeyValues::load(path).map_err(as_input)?.iter() {
            net.set(k.strip_prefix("network.").unwrap_or(k), v);
        }
    }
    if net.get("input_size").is_none() {
        net.set("input_size", dataset.grid());
    }
    let spec = NetworkSpec::from_kv(&net)?;
    let model = Model::build(&spec, train_cfg.seed)?;

    let out = cfg.output("train")?;
    create_dir(&out)?;
    let mut resolved = optics_kv(&dataset.optics, &dataset.noise);
    resolved.merge(&spec.to_kv().with_prefix("network"));
    resolved.merge(&train_cfg.to_kv().with_prefix("train"));
    write_resolved(cfg, &out, &resolved)?;

    let null = null_baseline(&dataset)?;
    log::info!("{} parameters; null-predictor L1 {null:.5}", model.parameter_count());
    let (_, history) = run_training(model, &dataset, &train_cfg, Some(&TrainOutputs { dir: out.clone() }))?;
    let last = history.epochs.last().expect("at least one epoch");
    let test = last.test_l1.map(fmt_f64).unwrap_or_else(|| "n/a".into());
    println!(
        "trained {} epochs: train L1 {}, test L1 {test}, null L1 {}",
        last.epoch,
        fmt_f64(last.train_l1),
        fmt_f64(null)
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let (model, meta) = load_model(cfg)?;
    let specs = required(cfg, "experiment.data", "--data")?;
    let mut sets = Vec::new();
    for item in specs.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, dir) = match item.split_once('=') {
            Some((n, d)) => (Some(n.to_string()), d),
            None => (None, item),
        };
        let dataset = load_dataset(dir)?;
        let name = name.or_else(|| dataset.pairs.first().map(|p| p.record.dataset.clone())).unwrap_or_else(|| dir.into());
        sets.push((name, dataset));
    }
    let refs: Vec<(&str, &Dataset)> = sets.iter().map(|(n, d)| (n.as_str(), d)).collect();
    let table = cross_domain_eval(&model, &meta.optics_digest, &refs)?;

    let out = cfg.output("eval")?;
    create_dir(&out)?;
    let csv = table.to_csv();
    write_file(&out.join("eval.csv"), csv.as_bytes())?;
    write_resolved(cfg, &out, &model.spec().to_kv().with_prefix("network"))?;
    print!("{csv}");
    Ok(())
}

fn parse_values(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|e| Error::InvalidArgument(format!("sweep value {s:?}: {e}"))))
        .collect()
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let (model, meta) = load_model(cfg)?;
    let dataset = load_dataset(required(cfg, "dataset.path", "--data")?)?;
    // the base set must come from the training optics; distance points then
    // deliberately leave it
    check_digest(&meta, &dataset)?;
    let axis: Axis = required(cfg, "experiment.axis", "--axis")?.parse()?;
    let values = parse_values(required(cfg, "experiment.values", "--values")?)?;
    let result = run_sweep(&model, &evaluation_set(&dataset), &dataset.optics, &dataset.noise, axis, &values)?;

    let out = cfg.output("sweep")?;
    create_dir(&out)?;
    let csv = result.to_csv();
    write_file(&out.join(format!("sweep-{axis}.csv")), csv.as_bytes())?;
    let mut resolved = optics_kv(&dataset.optics, &dataset.noise);
    resolved.merge(&model.spec().to_kv().with_prefix("network"));
    write_resolved(cfg, &out, &resolved)?;
    print!("{csv}");
    Ok(())
}

/// `a..b` (inclusive), `a..=b`, single indices, or comma lists of those.
pub fn parse_filters(text: &str) -> Result<Vec<usize>> {
    let bad = |s: &str| Error::InvalidArgument(format!("bad filter selection {s:?}"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(s));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b.strip_prefix('=').unwrap_or(b))?);
                if a > b {
                    return Err(bad(part));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    if out.is_empty() {
        return Err(bad(text));
    }
    Ok(out)
}

pub fn maps(cfg: &RunConfig) -> Result<()> {
    let (model, _) = load_model(cfg)?;
    let d = MapConfig::default();
    let layer: usize = cfg.get_or("experiment.layer", d.layer)?;
    if layer == 0 || layer > model.layer_count() {
        return Err(Error::InvalidArgument(format!("layer must be in 1..={}, got {layer}", model.layer_count())));
    }
    let filters = match cfg.get("experiment.filters") {
        Some(text) => parse_filters(text)?,
        None => (0..model.layer_channels(layer - 1)?).collect(),
    };
    let steps = cfg.get_or("experiment.steps", d.steps)?;
    let step_size = cfg.get_or("experiment.step_size", d.step_size)?;
    let seed = cfg.get_or("experiment.seed", d.seed)?;

    let out = cfg.output("maps")?;
    create_dir(&out)?;
    let size = model.spec().input_size;
    let mut summary = String::from("layer,filter,initial,final\n");
    for &filter in &filters {
        let map = max_activation_pattern(&model, &MapConfig { layer, filter, steps, step_size, seed })?;
        let stem = format!("map-l{layer}-f{filter:02}");
        map.to_image(size).save_pgm(&out.join(format!("{stem}.pgm")))?;
        write_file(&out.join(format!("{stem}.csv")), map.trace_csv().as_bytes())?;
        let _ = writeln!(summary, "{layer},{filter},{},{}", fmt_f64(map.initial()), fmt_f64(map.last()));
    }
    write_file(&out.join("maps.csv"), summary.as_bytes())?;

    let mut resolved = model.spec().to_kv().with_prefix("network");
    resolved.set("experiment.layer", layer);
    resolved.set("experiment.filters", filters.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(","));
    resolved.set("experiment.steps", steps);
    resolved.set("experiment.step_size", fmt_f64(step_size));
    resolved.set("experiment.seed", seed);
    write_resolved(cfg, &out, &resolved)?;
    print!("{summary}");
    Ok(())
}

pub fn grid(cfg: &RunConfig) -> Result<()> {
    let (model, meta) = load_model(cfg)?;
    let dataset = load_dataset(required(cfg, "dataset.path", "--data")?)?;
    check_digest(&meta, &dataset)?;
    let count: usize = cfg.get_or("experiment.count", 8)?;
    if count == 0 {
        return Err(Error::InvalidArgument("grid count must be at least 1".into()));
    }
    let samples: Vec<_> = evaluation_set(&dataset).into_iter().take(count).collect();

    let out = cfg.output("grid")?;
    create_dir(&out)?;
    let grid = write_reconstruction_grid(&model, &samples, &out.join("grid.pgm"))?;
    let mut resolved = optics_kv(&dataset.optics, &dataset.noise);
    resolved.set("experiment.count", samples.len());
    write_resolved(cfg, &out, &resolved)?;
    let mean = grid.errors.iter().sum::<f64>() / grid.errors.len() as f64;
    println!("wrote {} ({} rows, mean L1 {mean:.6})", out.join("grid.pgm").display(), samples.len());
    Ok(())
}
