use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Central-difference gradient checker over 64-bit graphs.
///
/// A coordinate whose forward and backward one-sided differences disagree
/// by more than `kink_tolerance` sits on a kink (ReLU, L1, clamp) and is
/// replaced by another coordinate. After `max_retries` replacements the
/// check fails.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub epsilon: f64,
    /// Coordinates to check; every coordinate is checked when there are fewer.
    pub samples: usize,
    pub max_retries: usize,
    pub kink_tolerance: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheck {
    pub fn new(epsilon: f64) -> Self {
        Self { epsilon, samples: 64, max_retries: 256, kink_tolerance: 1e-4, seed: 0 }
    }

    pub fn samples(mut self, samples: usize) -> Self {
        self.samples = samples;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// `build` records a scalar loss from one leaf per entry of `params`.
    pub fn run<F>(&self, params: &[Tensor<f64>], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(invalid!("finite-difference step must be positive and finite, got {}", self.epsilon));
        }
        let total: usize = params.iter().map(Tensor::numel).sum();
        if total == 0 {
            return Err(invalid!("nothing to check: no parameters"));
        }

        let mut g = Graph::new();
        let leaves: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = build(&mut g, &leaves)?;
        let base = scalar(&g, loss)?;
        g.backward(loss)?;
        let analytic: Vec<Vec<f64>> = leaves
            .iter()
            .zip(params)
            .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.numel()], |t| t.data().to_vec()))
            .collect();

        let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
            let mut shifted = params.to_vec();
            shifted[which].data_mut()[idx] += delta;
            let mut g = Graph::new();
            let leaves: Vec<Var> = shifted.into_iter().map(|p| g.leaf(p)).collect();
            let loss = build(&mut g, &leaves)?;
            scalar(&g, loss)
        };

        let locate = |mut flat: usize| {
            for (i, p) in params.iter().enumerate() {
                if flat < p.numel() {
                    return (i, flat);
                }
                flat -= p.numel();
            }
            unreachable!("flat index within total")
        };

        let exhaustive = total <= self.samples;
        let target = if exhaustive { total } else { self.samples };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut next = 0usize;
        let mut report = GradCheckReport { max_error: 0.0, checked: 0, skipped_kinks: 0 };
        while report.checked < target {
            let flat = if exhaustive {
                if next >= total {
                    break;
                }
                next += 1;
                next - 1
            } else {
                rng.random_range(0..total)
            };
            let (which, idx) = locate(flat);
            let plus = eval(which, idx, self.epsilon)?;
            let minus = eval(which, idx, -self.epsilon)?;
            let forward = (plus - base) / self.epsilon;
            let backward = (base - minus) / self.epsilon;
            let central = (plus - minus) / (2.0 * self.epsilon);
            if (forward - backward).abs() > self.kink_tolerance * central.abs().max(1.0) {
                report.skipped_kinks += 1;
                if report.skipped_kinks > self.max_retries {
                    return Err(Error::Graph(format!(
                        "gradient check gave up after {} kink hits ({} coordinates checked)",
                        report.skipped_kinks, report.checked
                    )));
                }
                continue;
            }
            let a = analytic[which][idx];
            let err = (a - central).abs() / a.abs().max(1.0);
            report.max_error = report.max_error.max(err);
            report.checked += 1;
        }
        if report.checked == 0 {
            return Err(Error::Graph("every sampled coordinate sits on a kink".into()));
        }
        Ok(report)
    }
}

/// Maximum relative error between backpropagated and central-difference
/// gradients, using default sampling.
pub fn grad_check<F>(params: &[Tensor<f64>], epsilon: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    GradCheck::new(epsilon).run(params, build).map(|r| r.max_error)
}

fn scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Graph(format!("gradient check needs a scalar loss, got shape {:?}", t.shape())));
    }
    Ok(t.data()[0])
}
