//! Adam training against the per-pixel L1 loss, evaluation and the
//! mean-image baseline.
//!
//! Each batch is processed one sample per graph, possibly in parallel; the
//! per-sample gradients are summed in sample order, so results do not depend
//! on the thread count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::config::{fmt_f64, KeyValues};
use crate::datasets::{Dataset, SamplePair, Split};
use crate::error::{invalid, Error, Result};
use crate::image::write_file;
use crate::network::{save_checkpoint, CheckpointMeta, Model};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }
}

/// One bias-corrected adaptive-moment update.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam_step: {} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::Shape(format!(
                "adam_step: parameter {i} has {} values but gradient {}",
                p.numel(),
                g.len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::from_f64(cfg.learning_rate), T::from_f64(cfg.epsilon));
    let one = T::one();
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x = *x - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Single,
    Double,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// shuffling seed; also recorded in checkpoints
    pub seed: u64,
    /// evaluate the test split every this many epochs (and after the last)
    pub eval_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 16, adam: AdamConfig::default(), seed: 0, eval_every: 1, precision: Precision::Single }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN as well
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(invalid!("epochs, batch_size and eval_every must be at least 1"));
        }
        let a = &self.adam;
        if !(a.learning_rate >= 0.0 && a.learning_rate.is_finite()) {
            return Err(invalid!("learning_rate must be finite and >= 0, got {}", a.learning_rate));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(invalid!("Adam needs beta1, beta2 in [0, 1) and epsilon > 0"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("learning_rate", fmt_f64(self.adam.learning_rate));
        kv.set("beta1", fmt_f64(self.adam.beta1));
        kv.set("beta2", fmt_f64(self.adam.beta2));
        kv.set("epsilon", fmt_f64(self.adam.epsilon));
        kv.set("seed", self.seed);
        kv.set("eval_every", self.eval_every);
        kv.set("precision", if self.precision == Precision::Double { "f64" } else { "f32" });
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            adam: AdamConfig {
                learning_rate: kv.get_or("learning_rate", d.adam.learning_rate)?,
                beta1: kv.get_or("beta1", d.adam.beta1)?,
                beta2: kv.get_or("beta2", d.adam.beta2)?,
                epsilon: kv.get_or("epsilon", d.adam.epsilon)?,
            },
            seed: kv.get_or("seed", d.seed)?,
            eval_every: kv.get_or("eval_every", d.eval_every)?,
            precision: match kv.get("precision").unwrap_or("f32") {
                "f32" => Precision::Single,
                "f64" => Precision::Double,
                other => return Err(invalid!("precision must be f32 or f64, got {other:?}")),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_l1: f64,
    pub test_l1: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_l1,test_l1,seconds\n");
        for r in &self.epochs {
            let test = r.test_l1.map(fmt_f64).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{:.3}", r.epoch, fmt_f64(r.train_l1), test, r.seconds);
        }
        out
    }
}

/// Where training writes `history.csv`, `best.ckpt` and `final.ckpt`.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn history(&self) -> PathBuf {
        self.dir.join("history.csv")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
}

/// Train on the dataset's train split, evaluating on its test split.
pub fn train(model: Model, dataset: &Dataset, cfg: &TrainConfig, outputs: Option<&TrainOutputs>) -> Result<(Model, History)> {
    cfg.validate()?;
    let train_set = dataset.split(Split::Train);
    if train_set.is_empty() {
        return Err(invalid!("dataset has no training samples"));
    }
    check_grid(&model, dataset)?;
    if let Some(o) = outputs {
        std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
    }
    let test_set = dataset.split(Split::Test);
    match cfg.precision {
        Precision::Single => run::<f32>(model, &train_set, &test_set, &dataset.digest, cfg, outputs),
        Precision::Double => run::<f64>(model, &train_set, &test_set, &dataset.digest, cfg, outputs),
    }
}

fn check_grid(model: &Model, dataset: &Dataset) -> Result<()> {
    if model.spec().input_size != dataset.grid() {
        return Err(Error::Shape(format!(
            "model input is {0}x{0} but the dataset grid is {1}x{1}",
            model.spec().input_size,
            dataset.grid()
        )));
    }
    Ok(())
}

fn sample_tensor<T: Real>(values: &[f32], size: usize) -> Tensor<T> {
    Tensor::new(vec![1, 1, size, size], values.iter().map(|&v| T::from_f64(v as f64)).collect())
        .expect("grid-sized sample")
}

/// Loss and parameter gradients for one sample.
fn sample_gradient<T: Real>(model: &Model, params: &[Tensor<T>], sample: &SamplePair) -> Result<(f64, Vec<Vec<T>>)> {
    let size = model.spec().input_size;
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let x = g.constant(sample_tensor(&sample.raw, size));
    let target = g.constant(sample_tensor(&sample.truth, size));
    let out = model.record(&mut g, &vars, x, None)?.output.expect("full pass");
    let loss = g.l1_loss(out, target)?;
    let value = g.value(loss).data()[0].as_f64();
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![T::zero(); p.numel()], |t| t.data().to_vec()))
        .collect();
    Ok((value, grads))
}

fn to_f32<T: Real>(params: &[Tensor<T>]) -> Vec<Tensor<f32>> {
    params.iter().map(|p| p.cast()).collect()
}

fn run<T: Real>(
    mut model: Model,
    train_set: &[&SamplePair],
    test_set: &[&SamplePair],
    digest: &str,
    cfg: &TrainConfig,
    outputs: Option<&TrainOutputs>,
) -> Result<(Model, History)> {
    let mut params: Vec<Tensor<T>> = model.parameters().iter().map(|p| p.cast()).collect();
    let mut state = AdamState::new(&params);
    let mut history = History::default();
    let mut best = f64::INFINITY;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (batch_index, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(f64, Vec<Vec<T>>)>> =
                batch.par_iter().map(|&i| sample_gradient(&model, &params, train_set[i])).collect();
            let inv = T::from_f64(1.0 / batch.len() as f64);
            let mut total: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, grads) = r?;
                batch_loss += loss;
                for (acc, g) in total.iter_mut().zip(grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b * inv);
                }
            }
            let finite = batch_loss.is_finite() && total.iter().flatten().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Divergence { epoch, batch: batch_index + 1 });
            }
            loss_sum += batch_loss;
            adam_step(&mut params, &total, &mut state, &cfg.adam)?;
        }

        let train_l1 = loss_sum / train_set.len() as f64;
        let evaluate_now = !test_set.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let test_l1 = if evaluate_now { Some(evaluate_params(&model, &params, test_set)?) } else { None };
        history.epochs.push(EpochRecord { epoch, train_l1, test_l1, seconds: started.elapsed().as_secs_f64() });
        log::info!(
            "epoch {epoch}/{}: train L1 {train_l1:.5}{}",
            cfg.epochs,
            test_l1.map(|t| format!(", test L1 {t:.5}")).unwrap_or_default()
        );

        if let Some(o) = outputs {
            write_file(&o.history(), history.to_csv().as_bytes())?;
            let meta = CheckpointMeta { epoch, seed: cfg.seed, optics_digest: digest.to_string() };
            // without a test split the latest epoch counts as best
            let improved = match test_l1 {
                Some(t) if t < best => {
                    best = t;
                    true
                }
                Some(_) => false,
                None => test_set.is_empty(),
            };
            if improved {
                let snapshot = Model::from_parameters(model.spec(), to_f32(&params))?;
                save_checkpoint(&snapshot, &meta, &o.best())?;
            }
            if epoch == cfg.epochs {
                let snapshot = Model::from_parameters(model.spec(), to_f32(&params))?;
                save_checkpoint(&snapshot, &meta, &o.last())?;
            }
        }
    }
    model = Model::from_parameters(model.spec(), to_f32(&params))?;
    Ok((model, history))
}

/// Per-sample L1 values, in sample order.
fn per_sample_errors<T: Real>(model: &Model, params: &[Tensor<T>], samples: &[&SamplePair]) -> Result<Vec<f64>> {
    let size = model.spec().input_size;
    samples
        .par_iter()
        .map(|s| {
            let pred = predict_with(model, params, &s.raw, size)?;
            Ok(mae(&pred, &s.truth))
        })
        .collect()
}

fn predict_with<T: Real>(model: &Model, params: &[Tensor<T>], raw: &[f32], size: usize) -> Result<Vec<f64>> {
    if raw.len() != size * size {
        return Err(Error::Shape(format!("sample has {} values, model expects {size}x{size}", raw.len())));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let x = g.constant(sample_tensor(raw, size));
    let out = model.record(&mut g, &vars, x, None)?.output.expect("full pass");
    Ok(g.value(out).data().iter().map(|v| v.as_f64()).collect())
}

fn evaluate_params<T: Real>(model: &Model, params: &[Tensor<T>], samples: &[&SamplePair]) -> Result<f64> {
    let errors = per_sample_errors(model, params, samples)?;
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Mean absolute difference between two equally sized images.
pub fn mae(prediction: &[f64], truth: &[f32]) -> f64 {
    prediction.iter().zip(truth).map(|(&p, &t)| (p - t as f64).abs()).sum::<f64>() / truth.len() as f64
}

/// Phase estimate for one standardized intensity image.
pub fn predict(model: &Model, raw: &[f32]) -> Result<Vec<f64>> {
    predict_with(model, model.parameters(), raw, model.spec().input_size)
}

/// Mean over samples of the per-sample L1 error. Parameters are untouched.
pub fn evaluate(model: &Model, samples: &[&SamplePair]) -> Result<f64> {
    Ok(evaluate_each(model, samples)?.iter().sum::<f64>() / samples.len() as f64)
}

/// Per-sample L1 errors in sample order.
pub fn evaluate_each(model: &Model, samples: &[&SamplePair]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(invalid!("cannot evaluate on an empty sample set"));
    }
    per_sample_errors(model, model.parameters(), samples)
}

/// MAE of always predicting the mean truth image.
///
/// The mean is taken over the train split, or over the whole dataset when
/// there is no train split; errors are measured on the test split, or on the
/// whole dataset when there is no test split.
pub fn null_baseline(dataset: &Dataset) -> Result<f64> {
    let (train, test) = (dataset.split(Split::Train), dataset.split(Split::Test));
    let all: Vec<&SamplePair> = dataset.pairs.iter().collect();
    let reference = if train.is_empty() { &all } else { &train };
    let scored = if test.is_empty() { &all } else { &test };
    if scored.is_empty() {
        return Err(invalid!("null baseline of an empty dataset"));
    }
    let n = reference[0].truth.len();
    let mut mean = vec![0.0f64; n];
    for s in reference.iter() {
        mean.iter_mut().zip(&s.truth).for_each(|(m, &t)| *m += t as f64);
    }
    mean.iter_mut().for_each(|m| *m /= reference.len() as f64);
    Ok(scored.iter().map(|s| mae(&mean, &s.truth)).sum::<f64>() / scored.len() as f64)
}

/// Short hash of the parameter bytes, for purity checks.
pub fn parameter_digest(model: &Model) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in model.parameters() {
        for v in p.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Parse a history CSV written by [`train`].
pub fn read_history(path: &Path) -> Result<History> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("epoch,train_l1,test_l1,seconds") {
        return Err(Error::Parse(format!("{}: not a history file", path.display())));
    }
    let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{}: {s:?}: {e}", path.display())));
    let epochs = lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Parse(format!("{}: bad row {line:?}", path.display())));
            }
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?,
                train_l1: parse(f[1])?,
                test_l1: if f[2].is_empty() { None } else { Some(parse(f[2])?) },
                seconds: parse(f[3])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(History { epochs })
}
