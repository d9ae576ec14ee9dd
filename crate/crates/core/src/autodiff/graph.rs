use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::{self, ConvGeom, ConvGrads};
use super::tensor::{Real, Tensor};
use crate::error::{invalid, Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom },
    ConvTranspose2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom },
    Relu(Var),
    Add(Var, Var),
    Concat(Var, Var),
    Logistic { input: Var, scale: f64 },
    HardLogistic { input: Var, scale: f64 },
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    ChannelMean { input: Var, channel: usize },
    L1 { output: Var, target: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for reverse-mode differentiation.
///
/// Values are computed eagerly as operations are recorded; nodes are stored
/// in execution order, so reverse traversal of the node list is a valid
/// topological order. Gradients are kept only for leaves and accumulate
/// across [`Graph::backward`] calls until [`Graph::zero_grad`].
#[derive(Debug)]
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph(format!("variable {v:?} does not belong to graph {}", self.id)));
        }
        Ok(())
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.index]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    /// Trainable input; receives gradients.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.index).and_then(|g| g.as_ref()).filter(|_| v.graph == self.id)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, geom: ConvGeom) -> Result<Var> {
        for v in [input, kernel, bias] {
            self.check(v)?;
        }
        let value = conv::conv2d_forward(self.value(input), self.value(kernel), self.value(bias), geom)?;
        let rg = self.needs(&[input, kernel, bias]);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom }, rg))
    }

    /// Transposed convolution; `kernel` is `(in, out, kh, kw)`.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, bias: Var, geom: ConvGeom) -> Result<Var> {
        for v in [input, kernel, bias] {
            self.check(v)?;
        }
        let value =
            conv::conv_transpose2d_forward(self.value(input), self.value(kernel), self.value(bias), geom)?;
        let rg = self.needs(&[input, kernel, bias]);
        Ok(self.push(value, Op::ConvTranspose2d { input, kernel, bias, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Relu(x), rg))
    }

    /// Elementwise sum of two same-shaped tensors (residual connection).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "residual add of {:?} and {:?}; project the shortcut first",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Concatenate two 4-D tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "channel concat of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            data.extend_from_slice(&self.value(a).data()[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&self.value(b).data()[n * cb * plane..(n + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// `scale * sigma(x)` with the logistic function `sigma`.
    pub fn logistic(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.check(x)?;
        let s = T::from_f64(scale);
        let src = self.value(x);
        let data = src.data().iter().map(|&v| s * sigmoid(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Logistic { input: x, scale }, rg))
    }

    /// `scale * clamp(1/2 + x/4, 0, 1)`: the piecewise-linear logistic.
    ///
    /// Inside the linear zone the derivative is exact. In the clamped zones
    /// the gradient is passed through only when it points back into the
    /// linear zone, so saturated outputs can recover.
    pub fn hard_logistic(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.check(x)?;
        let s = T::from_f64(scale);
        let src = self.value(x);
        let data = src.data().iter().map(|&v| s * hard_sigmoid(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::HardLogistic { input: x, scale }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.check(x)?;
        let f = T::from_f64(factor);
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| v * f).collect())?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Scale(x, factor), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        if src.numel() == 0 {
            return Err(invalid!("mean of an empty tensor"));
        }
        let value = Tensor::scalar(src.sum() / T::from_f64(src.numel() as f64));
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    /// Mean of one channel of a 4-D tensor over batch and space.
    pub fn channel_mean(&mut self, x: Var, channel: usize) -> Result<Var> {
        self.check(x)?;
        let (n, c, h, w) = self.value(x).dims4()?;
        if channel >= c {
            return Err(invalid!("channel {channel} out of range for {c} channels"));
        }
        let plane = h * w;
        let data = self.value(x).data();
        let total: T = (0..n)
            .map(|b| data[(b * c + channel) * plane..(b * c + channel + 1) * plane].iter().copied().sum::<T>())
            .sum();
        let value = Tensor::scalar(total / T::from_f64((n * plane) as f64));
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::ChannelMean { input: x, channel }, rg))
    }

    /// Mean absolute error normalized per sample by the trailing two
    /// extents and averaged over all leading extents.
    pub fn l1_loss(&mut self, output: Var, target: Var) -> Result<Var> {
        self.check(output)?;
        self.check(target)?;
        let (y, g) = (self.value(output), self.value(target));
        if y.shape() != g.shape() {
            return Err(Error::Shape(format!("l1_loss of {:?} against {:?}", y.shape(), g.shape())));
        }
        if y.shape().len() < 2 || y.numel() == 0 {
            return Err(Error::Shape(format!("l1_loss needs a non-empty tensor of rank >= 2, got {:?}", y.shape())));
        }
        let total: T = y.data().iter().zip(g.data()).map(|(&a, &b)| (a - b).abs()).sum();
        let value = Tensor::scalar(total / T::from_f64(y.numel() as f64));
        let rg = self.needs(&[output, target]);
        Ok(self.push(value, Op::L1 { output, target }, rg))
    }

    /// Propagate d(loss)/d(node) back to every leaf, adding into the leaf
    /// gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let Graph { nodes, grads, .. } = self;
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.index + 1];
        adj[loss.index] = Some(vec![T::one()]);

        let accumulate = |adj: &mut Vec<Option<Vec<T>>>, v: Var, g: Vec<T>| {
            if !nodes[v.index].requires_grad {
                return;
            }
            match &mut adj[v.index] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };

        for i in (0..=loss.index).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |v: Var| &nodes[v.index].value;
            let req = |v: Var| nodes[v.index].requires_grad;
            match node.op {
                Op::Leaf => match &mut grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                },
                Op::Conv2d { input, kernel, bias, geom } => {
                    let grads_c =
                        conv::conv2d_backward(val(input), val(kernel), geom, &g, [req(input), req(kernel), req(bias)])?;
                    scatter_conv(&mut adj, &accumulate, grads_c, input, kernel, bias);
                }
                Op::ConvTranspose2d { input, kernel, bias, geom } => {
                    let grads_c = conv::conv_transpose2d_backward(
                        val(input),
                        val(kernel),
                        geom,
                        &g,
                        [req(input), req(kernel), req(bias)],
                    )?;
                    scatter_conv(&mut adj, &accumulate, grads_c, input, kernel, bias);
                }
                Op::Relu(x) => {
                    let dx = val(x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, d)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    accumulate(&mut adj, x, dx);
                }
                Op::Add(a, b) => {
                    if req(a) && req(b) {
                        accumulate(&mut adj, a, g.clone());
                    } else if req(a) {
                        accumulate(&mut adj, a, g);
                        continue;
                    }
                    accumulate(&mut adj, b, g);
                }
                Op::Concat(a, b) => {
                    let (n, ca, h, w) = val(a).dims4()?;
                    let cb = val(b).dims4()?.1;
                    let plane = h * w;
                    let (mut ga, mut gb) = (Vec::with_capacity(n * ca * plane), Vec::with_capacity(n * cb * plane));
                    for chunk in g.chunks((ca + cb) * plane) {
                        ga.extend_from_slice(&chunk[..ca * plane]);
                        gb.extend_from_slice(&chunk[ca * plane..]);
                    }
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, b, gb);
                }
                Op::Logistic { input, scale } => {
                    let s = T::from_f64(scale);
                    let dx = val(input)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, d)| {
                            let sg = sigmoid(v);
                            d * s * sg * (T::one() - sg)
                        })
                        .collect();
                    accumulate(&mut adj, input, dx);
                }
                Op::HardLogistic { input, scale } => {
                    let slope = T::from_f64(scale / 4.0);
                    let two = T::from_f64(2.0);
                    let dx = val(input)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, d)| {
                            let dv = d * slope;
                            // descent moves v by -dv; pass it only if that heads inside [-2, 2]
                            let pass = (v >= -two && v <= two) || (v > two && dv > T::zero()) || (v < -two && dv < T::zero());
                            if pass {
                                dv
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    accumulate(&mut adj, input, dx);
                }
                Op::Scale(x, f) => {
                    let f = T::from_f64(f);
                    accumulate(&mut adj, x, g.into_iter().map(|d| d * f).collect());
                }
                Op::Sum(x) => {
                    accumulate(&mut adj, x, vec![g[0]; val(x).numel()]);
                }
                Op::Mean(x) => {
                    let n = val(x).numel();
                    accumulate(&mut adj, x, vec![g[0] / T::from_f64(n as f64); n]);
                }
                Op::ChannelMean { input, channel } => {
                    let (n, c, h, w) = val(input).dims4()?;
                    let plane = h * w;
                    let share = g[0] / T::from_f64((n * plane) as f64);
                    let mut dx = vec![T::zero(); val(input).numel()];
                    for b in 0..n {
                        dx[(b * c + channel) * plane..(b * c + channel + 1) * plane].fill(share);
                    }
                    accumulate(&mut adj, input, dx);
                }
                Op::L1 { output, target } => {
                    let (y, t) = (val(output), val(target));
                    let share = g[0] / T::from_f64(y.numel() as f64);
                    let dy: Vec<T> = y
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(&a, &b)| {
                            let diff = a - b;
                            if diff > T::zero() {
                                share
                            } else if diff < T::zero() {
                                -share
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    if req(target) {
                        accumulate(&mut adj, target, dy.iter().map(|&v| -v).collect());
                    }
                    accumulate(&mut adj, output, dy);
                }
            }
        }
        Ok(())
    }
}

fn scatter_conv<T: Real>(
    adj: &mut Vec<Option<Vec<T>>>,
    accumulate: &impl Fn(&mut Vec<Option<Vec<T>>>, Var, Vec<T>),
    grads: ConvGrads<T>,
    input: Var,
    kernel: Var,
    bias: Var,
) {
    if let Some(dx) = grads.input {
        accumulate(adj, input, dx);
    }
    if let Some(dk) = grads.kernel {
        accumulate(adj, kernel, dk);
    }
    if let Some(db) = grads.bias {
        accumulate(adj, bias, db);
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn hard_sigmoid<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let quarter = T::from_f64(0.25);
    (half + x * quarter).max(T::zero()).min(T::one())
}
