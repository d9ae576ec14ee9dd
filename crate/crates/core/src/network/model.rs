use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{Head, NetworkSpec};
use crate::autodiff::{ConvGeom, Graph, Real, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// One convolution: its weight sits at `weight`, its bias right after.
#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    weight: usize,
    geom: ConvGeom,
    transpose: bool,
}

#[derive(Debug, Clone)]
enum Block {
    Down { a: ConvSlot, b: ConvSlot, shortcut: ConvSlot },
    Up { a: ConvSlot, b: ConvSlot, shortcut: ConvSlot, skip: Option<(usize, ConvSlot)> },
    Tail { a: ConvSlot, b: ConvSlot },
}

/// Parameter shapes and wiring derived from a spec.
#[derive(Debug, Clone)]
struct Layout {
    stem: ConvSlot,
    blocks: Vec<Block>,
    head: ConvSlot,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    fan_in: Vec<usize>,
}

impl Layout {
    fn new(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut l = Layout {
            stem: ConvSlot { weight: 0, geom: ConvGeom::new(1, 1, 0), transpose: false },
            blocks: Vec::new(),
            head: ConvSlot { weight: 0, geom: ConvGeom::new(1, 1, 0), transpose: false },
            names: Vec::new(),
            shapes: Vec::new(),
            fan_in: Vec::new(),
        };
        l.stem = l.conv("stem", 1, spec.base_channels, 3, ConvGeom::new(1, 1, 1));
        let mut ch = spec.base_channels;
        for i in 0..spec.down_blocks {
            let d = spec.dilation_of(i);
            let co = spec.channels_at(i + 1)?;
            let p = format!("down{i}");
            let a = l.conv(&format!("{p}.a"), ch, co, 3, ConvGeom::new(2, 1, 1));
            let b = l.conv(&format!("{p}.b"), co, co, 3, ConvGeom::new(1, d, d));
            let shortcut = l.conv(&format!("{p}.shortcut"), ch, co, 1, ConvGeom::new(2, 1, 0));
            l.blocks.push(Block::Down { a, b, shortcut });
            ch = co;
        }
        for j in 0..spec.up_blocks {
            let d = spec.dilation_of(spec.down_blocks + j);
            let level = spec.down_blocks - j - 1;
            let co = spec.channels_at(level)?;
            let p = format!("up{j}");
            let a = l.conv_t(&format!("{p}.a"), ch, co, 4, ConvGeom::new(2, 1, 1));
            let b = l.conv(&format!("{p}.b"), co, co, 3, ConvGeom::new(1, d, d));
            let shortcut = l.conv_t(&format!("{p}.shortcut"), ch, co, 2, ConvGeom::new(2, 1, 0));
            let skip = match spec.skip_pairs.iter().find(|&&(_, blk)| blk == j) {
                Some(&(lev, _)) => {
                    let extra = spec.channels_at(lev)?;
                    Some((lev, l.conv(&format!("{p}.project"), co + extra, co, 1, ConvGeom::new(1, 1, 0))))
                }
                None => None,
            };
            l.blocks.push(Block::Up { a, b, shortcut, skip });
            ch = co;
        }
        for t in 0..spec.tail_blocks {
            let d = spec.dilation_of(spec.down_blocks + spec.up_blocks + t);
            let p = format!("tail{t}");
            let a = l.conv(&format!("{p}.a"), ch, ch, 3, ConvGeom::new(1, d, d));
            let b = l.conv(&format!("{p}.b"), ch, ch, 3, ConvGeom::new(1, d, d));
            l.blocks.push(Block::Tail { a, b });
        }
        let factor = 1usize << (spec.down_blocks - spec.up_blocks);
        l.head = if factor == 1 {
            l.conv("head", ch, 1, 1, ConvGeom::new(1, 1, 0))
        } else {
            // remaining resolution is restored in one transposed step
            l.conv_t("head", ch, 1, factor, ConvGeom::new(factor, 1, 0))
        };
        Ok(l)
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, out: usize) -> usize {
        let idx = self.shapes.len();
        self.names.push(format!("{name}.weight"));
        self.shapes.push(shape);
        self.fan_in.push(fan_in);
        self.names.push(format!("{name}.bias"));
        self.shapes.push(vec![out]);
        self.fan_in.push(0);
        idx
    }

    fn conv(&mut self, name: &str, ci: usize, co: usize, k: usize, geom: ConvGeom) -> ConvSlot {
        let weight = self.push(name, vec![co, ci, k, k], ci * k * k, co);
        ConvSlot { weight, geom, transpose: false }
    }

    fn conv_t(&mut self, name: &str, ci: usize, co: usize, k: usize, geom: ConvGeom) -> ConvSlot {
        // taps reaching one output pixel of a stride-s transposed conv
        let fan_in = (ci * k * k / (geom.stride * geom.stride)).max(1);
        let weight = self.push(name, vec![ci, co, k, k], fan_in, co);
        ConvSlot { weight, geom, transpose: true }
    }
}

/// Activations recorded by [`Model::record`].
#[derive(Debug, Clone)]
pub struct Recorded {
    /// Layer 0 is the stem; layer `i > 0` is the output of block `i - 1`.
    pub layers: Vec<Var>,
    /// Phase estimate; absent when recording stopped early.
    pub output: Option<Var>,
}

/// Residual encoder-decoder with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    spec: NetworkSpec,
    layout: Layout,
    params: Vec<Tensor<f32>>,
}

impl Model {
    /// He-normal kernels drawn in parameter order from `seed`; zero biases.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let layout = Layout::new(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .shapes
            .iter()
            .zip(&layout.fan_in)
            .map(|(shape, &fan_in)| {
                let n: usize = shape.iter().product();
                let data = if fan_in == 0 {
                    vec![0.0; n]
                } else {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
                };
                Tensor::new(shape.clone(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec: spec.clone(), layout, params })
    }

    /// Wrap existing parameters, checking each shape against the spec.
    pub fn from_parameters(spec: &NetworkSpec, params: Vec<Tensor<f32>>) -> Result<Self> {
        let layout = Layout::new(spec)?;
        check_shapes(&layout, params.iter().map(|t| t.shape()))?;
        Ok(Self { spec: spec.clone(), layout, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn parameters(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Number of recorded layers: the stem plus one per block.
    pub fn layer_count(&self) -> usize {
        1 + self.layout.blocks.len()
    }

    /// Channel count of layer `layer`.
    pub fn layer_channels(&self, layer: usize) -> Result<usize> {
        let slot = match layer {
            0 => self.layout.stem,
            l if l <= self.layout.blocks.len() => match &self.layout.blocks[l - 1] {
                Block::Down { b, .. } | Block::Tail { b, .. } => *b,
                Block::Up { b, skip, .. } => skip.map_or(*b, |(_, p)| p),
            },
            l => return Err(invalid!("layer {l} out of range; the model has {} layers", self.layer_count())),
        };
        Ok(self.layout.shapes[slot.weight][0])
    }

    /// Zero the head kernel and bias, so every output equals the head's midpoint.
    pub fn zero_head(&mut self) {
        let w = self.layout.head.weight;
        for t in &mut self.params[w..w + 2] {
            t.data_mut().fill(0.0);
        }
    }

    /// Record the forward pass into `g`.
    ///
    /// `params` holds one variable per parameter, in [`Model::parameters`]
    /// order; `input` is `(batch, 1, size, size)`. Recording stops after
    /// layer `stop_after` when given.
    pub fn record<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        input: Var,
        stop_after: Option<usize>,
    ) -> Result<Recorded> {
        if params.len() != self.params.len() {
            return Err(invalid!("{} parameter variables for {} parameters", params.len(), self.params.len()));
        }
        let shape = g.value(input).shape().to_vec();
        let s = self.spec.input_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!("network input {shape:?}; expected (batch, 1, {s}, {s})")));
        }
        let conv = |g: &mut Graph<T>, slot: ConvSlot, x: Var| {
            let (w, b) = (params[slot.weight], params[slot.weight + 1]);
            if slot.transpose {
                g.conv_transpose2d(x, w, b, slot.geom)
            } else {
                g.conv2d(x, w, b, slot.geom)
            }
        };
        let done = |layers: &Vec<Var>| stop_after.is_some_and(|l| layers.len() > l);

        let stem = conv(g, self.layout.stem, input)?;
        let mut h = g.relu(stem)?;
        let mut layers = vec![h];
        // encoder levels: stem, then each down block
        let mut levels = vec![h];
        for block in &self.layout.blocks {
            if done(&layers) {
                return Ok(Recorded { layers, output: None });
            }
            h = match *block {
                Block::Down { a, b, shortcut } => {
                    let r = residual(g, &conv, h, a, b, shortcut)?;
                    levels.push(r);
                    r
                }
                Block::Up { a, b, shortcut, skip } => {
                    let r = residual(g, &conv, h, a, b, shortcut)?;
                    match skip {
                        Some((level, proj)) => {
                            let cat = g.concat_channels(r, levels[level])?;
                            let p = conv(g, proj, cat)?;
                            g.relu(p)?
                        }
                        None => r,
                    }
                }
                Block::Tail { a, b } => {
                    let t = conv(g, a, h)?;
                    let t = g.relu(t)?;
                    let t = conv(g, b, t)?;
                    let t = g.add(h, t)?;
                    g.relu(t)?
                }
            };
            layers.push(h);
        }
        if done(&layers) {
            return Ok(Recorded { layers, output: None });
        }
        let logits = conv(g, self.layout.head, h)?;
        let output = match self.spec.head {
            Head::HardLogistic => g.hard_logistic(logits, -PI)?,
            Head::Logistic => g.logistic(logits, -PI)?,
        };
        Ok(Recorded { layers, output: Some(output) })
    }

    /// Inference on a `(batch, 1, size, size)` tensor.
    pub fn forward(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let x = g.constant(input.clone());
        let rec = self.record(&mut g, &params, x, None)?;
        let out = rec.output.expect("full forward pass has an output");
        Ok(g.value(out).clone())
    }
}

fn residual<T: Real>(
    g: &mut Graph<T>,
    conv: &impl Fn(&mut Graph<T>, ConvSlot, Var) -> Result<Var>,
    x: Var,
    a: ConvSlot,
    b: ConvSlot,
    shortcut: ConvSlot,
) -> Result<Var> {
    let t = conv(g, a, x)?;
    let t = g.relu(t)?;
    let t = conv(g, b, t)?;
    let s = conv(g, shortcut, x)?;
    let sum = g.add(t, s)?;
    g.relu(sum)
}

fn check_shapes<'a>(layout: &Layout, found: impl ExactSizeIterator<Item = &'a [usize]>) -> Result<()> {
    let mut count = 0;
    for (index, shape) in found.enumerate() {
        let Some(expected) = layout.shapes.get(index) else {
            return Err(Error::TensorMismatch {
                index,
                name: "<extra>".into(),
                expected: Vec::new(),
                found: shape.to_vec(),
            });
        };
        if expected.as_slice() != shape {
            return Err(Error::TensorMismatch {
                index,
                name: layout.names[index].clone(),
                expected: expected.clone(),
                found: shape.to_vec(),
            });
        }
        count += 1;
    }
    if count < layout.shapes.len() {
        return Err(Error::TensorMismatch {
            index: count,
            name: layout.names[count].clone(),
            expected: layout.shapes[count].clone(),
            found: Vec::new(),
        });
    }
    Ok(())
}

/// Ordered `(name, shape)` list for a spec.
pub fn parameter_shapes(spec: &NetworkSpec) -> Result<Vec<(String, Vec<usize>)>> {
    let l = Layout::new(spec)?;
    Ok(l.names.into_iter().zip(l.shapes).collect())
}

pub(crate) fn check_against(spec: &NetworkSpec, shapes: &[Vec<usize>]) -> Result<()> {
    let layout = Layout::new(spec)?;
    check_shapes(&layout, shapes.iter().map(Vec::as_slice))
}
