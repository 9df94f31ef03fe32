//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value, so node order
//! is already a topological order; `backward` walks the tape in reverse and
//! accumulates vector-Jacobian products. A parameter bound once and used at
//! several places (the base CNN at every pyramid level) receives the sum of
//! the gradients from all of its uses.

use crate::error::{Error, Result};
use crate::numerics::linalg::{self, gemm, Layout};
use crate::numerics::Tensor;
use crate::vision::conv;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    AffineCombine {
        gate: Var,
        keep: Var,
        update: Var,
    },
    Sum(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        scale: f64,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded differentiation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inference: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which [`Graph::param`] records constants, so nothing is
    /// differentiable and `backward` is never needed.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            inference: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf (a constant on an inference tape).
    pub fn param(&mut self, value: Tensor) -> Var {
        let track = !self.inference;
        self.push(value, Op::Leaf, track)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = linalg::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a·bᵀ`; with `a: B×in` and `b: out×in` this is a batched linear map.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = linalg::matmul_t(self.value(a), self.value(b))?;
        Ok(self.derived(v, Op::MatMulT(a, b), &[a, b]))
    }

    /// Adds `bias: N` to every row of `x: B×N`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        xv.expect_rank(2, "add_row_bias")?;
        if bv.shape() != [xv.shape()[1]] {
            return Err(Error::dims("add_row_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        let n = bv.len();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.derived(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// Batched fully connected layer `x·Wᵀ + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul_t(x, weight)?;
        self.add_row_bias(y, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.derived(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.derived(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| factor * x);
        self.derived(v, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(relu);
        self.derived(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.derived(v, Op::Sigmoid(a), &[a])
    }

    /// `(1 − gate)⊙keep + gate⊙update`.
    pub fn affine_combine(&mut self, gate: Var, keep: Var, update: Var) -> Result<Var> {
        let (z, a, b) = (self.value(gate), self.value(keep), self.value(update));
        z.expect_same_shape(a, "affine_combine")?;
        z.expect_same_shape(b, "affine_combine")?;
        let data = z
            .data()
            .iter()
            .zip(a.data().iter().zip(b.data()))
            .map(|(&z, (&a, &b))| (1.0 - z) * a + z * b)
            .collect();
        let v = Tensor::new(z.shape().to_vec(), data)?;
        Ok(self.derived(v, Op::AffineCombine { gate, keep, update }, &[gate, keep, update]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.derived(v, Op::Sum(a), &[a])
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let v = conv::conv2d(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        Ok(self.derived(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            &[input, weight, bias],
        ))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let v = conv::global_avg_pool(self.value(input))?;
        Ok(self.derived(v, Op::GlobalAvgPool(input), &[input]))
    }

    /// Mean cross-entropy of `logits: B×C` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let batch = self.value(logits).shape().first().copied().unwrap_or(1);
        self.cross_entropy_scaled(logits, labels, 1.0 / batch as f64)
    }

    /// `scale · Σᵢ −log softmax(logitsᵢ)[labelᵢ]`, computed in fused
    /// log-sum-exp form. Shards of one batch use `scale = 1/total` so that
    /// their losses add up to the batch mean.
    pub fn cross_entropy_scaled(&mut self, logits: Var, labels: &[usize], scale: f64) -> Result<Var> {
        let lv = self.value(logits);
        lv.expect_rank(2, "cross_entropy")?;
        let (b, c) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != b {
            return Err(Error::dims("cross_entropy", lv.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                bound: c,
            });
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite("cross_entropy"));
        }
        let mut total = 0.0;
        let mut probs = lv.clone();
        for (i, &label) in labels.iter().enumerate() {
            let row = lv.row(i);
            total += linalg::log_sum_exp(row) - row[label];
            linalg::softmax_in_place(&mut probs.data_mut()[i * c..(i + 1) * c]);
        }
        let v = Tensor::scalar(scale * total);
        Ok(self.derived(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                scale,
                probs,
            },
            &[logits],
        ))
    }

    /// Smallest |pre-activation| over every ReLU on the tape; `None` if the
    /// tape has no ReLU. Gradient checks use it to keep away from kinks.
    pub fn min_relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Reverse accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        Layout::Normal,
                        bv.data(),
                        Layout::Transposed,
                        &mut da,
                        false,
                    );
                    self.accumulate(grads, a, Tensor::new(vec![m, k], da)?)?;
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        Layout::Transposed,
                        g.data(),
                        Layout::Normal,
                        &mut db,
                        false,
                    );
                    self.accumulate(grads, b, Tensor::new(vec![k, n], db)?)?;
                }
            }
            &Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        Layout::Normal,
                        bv.data(),
                        Layout::Normal,
                        &mut da,
                        false,
                    );
                    self.accumulate(grads, a, Tensor::new(vec![m, k], da)?)?;
                }
                if self.wants(b) {
                    let mut db = vec![0.0; n * k];
                    gemm(
                        n,
                        m,
                        k,
                        g.data(),
                        Layout::Transposed,
                        av.data(),
                        Layout::Normal,
                        &mut db,
                        false,
                    );
                    self.accumulate(grads, b, Tensor::new(vec![n, k], db)?)?;
                }
            }
            &Op::AddRowBias(x, bias) => {
                self.accumulate(grads, x, g.clone())?;
                if self.wants(bias) {
                    let n = self.value(bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, &r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    self.accumulate(grads, bias, Tensor::from_vec(db))?;
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), "mul", |g, y| g * y)?)?;
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), "mul", |g, x| g * x)?)?;
                }
            }
            &Op::Scale(a, factor) => self.accumulate(grads, a, g.map(|x| factor * x))?,
            &Op::Relu(a) => {
                let d = g.zip_map(self.value(a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?;
                self.accumulate(grads, a, d)?;
            }
            &Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, "sigmoid", |g, y| g * y * (1.0 - y))?;
                self.accumulate(grads, a, d)?;
            }
            &Op::AffineCombine { gate, keep, update } => {
                let (z, a, b) = (self.value(gate), self.value(keep), self.value(update));
                if self.wants(gate) {
                    let diff = b.zip_map(a, "affine_combine", |b, a| b - a)?;
                    self.accumulate(grads, gate, g.zip_map(&diff, "affine_combine", |g, d| g * d)?)?;
                }
                if self.wants(keep) {
                    self.accumulate(grads, keep, g.zip_map(z, "affine_combine", |g, z| g * (1.0 - z))?)?;
                }
                if self.wants(update) {
                    self.accumulate(grads, update, g.zip_map(z, "affine_combine", |g, z| g * z)?)?;
                }
            }
            &Op::Sum(a) => {
                let gs = g.item();
                self.accumulate(grads, a, Tensor::full(self.value(a).shape(), gs))?;
            }
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let cg = conv::conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    g,
                    stride,
                    padding,
                    self.wants(input),
                )?;
                if let Some(dx) = cg.input {
                    self.accumulate(grads, input, dx)?;
                }
                self.accumulate(grads, weight, cg.weight)?;
                self.accumulate(grads, bias, cg.bias)?;
            }
            &Op::GlobalAvgPool(input) => {
                let d = conv::global_avg_pool_backward(self.value(input).shape(), g)?;
                self.accumulate(grads, input, d)?;
            }
            Op::CrossEntropy {
                logits,
                labels,
                scale,
                probs,
            } => {
                let c = probs.shape()[1];
                let factor = g.item() * scale;
                let mut d = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    d.data_mut()[i * c + label] -= 1.0;
                }
                for x in d.data_mut() {
                    *x *= factor;
                }
                self.accumulate(grads, *logits, d)?;
            }
        }
        Ok(())
    }
}

/// Rectifier with subgradient 0 at the origin.
#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
