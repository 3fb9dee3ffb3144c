//! Tape-based reverse-mode differentiation over a fixed set of primitives.
//!
//! Every primitive pushes one node holding its output value. `backward`
//! walks the tape in reverse, accumulating (never overwriting) adjoints, and
//! returns one gradient per parameter leaf.

use crate::error::{Result, SlrError};
use crate::numeric::kernels::{self, Conv2dSpec};
use crate::numeric::{NdArray, ParamGrads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d(Var, Var, Conv2dSpec),
    NodeMix(Var, Var),
    MeanTo(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Sigmoid(Var),
    Swish(Var),
    Standardize { x: Var, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, target: NdArray },
}

struct Node {
    value: NdArray,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Batch statistics captured by a training-mode standardization.
#[derive(Clone, Debug)]
pub struct SliceStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: NdArray, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant leaf; receives no gradient.
    pub fn input(&mut self, value: NdArray) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, spec: Conv2dSpec) -> Result<Var> {
        let v = kernels::conv2d(self.value(x), self.value(kernel), &spec)?;
        Ok(self.push(v, Op::Conv2d(x, kernel, spec)))
    }

    pub fn node_mix(&mut self, y: Var, adj: Var) -> Result<Var> {
        let v = kernels::node_mix(self.value(y), self.value(adj))?;
        Ok(self.push(v, Op::NodeMix(y, adj)))
    }

    /// Mean over every axis where `shape` has extent 1 and `x` does not.
    pub fn mean_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.value(x);
        let mut v = kernels::sum_to(xs, shape)?;
        let count = (xs.len() / v.len()) as f64;
        v.data_mut().iter_mut().for_each(|e| *e /= count);
        Ok(self.push(v, Op::MeanTo(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let ones = vec![1; self.value(x).ndim()];
        let m = self.mean_to(x, &ones)?;
        let m = self.reshape(m, &[1])?;
        Ok(self.scale(m, n))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = kernels::permute(self.value(x), axes)?;
        Ok(self.push(v, Op::Permute(x, axes.to_vec())))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let arrays: Vec<&NdArray> = parts.iter().map(|&p| self.value(p)).collect();
        let v = kernels::concat(&arrays, axis)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::swish);
        self.push(v, Op::Swish(x))
    }

    /// Zero-mean, unit-variance normalization of each leading slice
    /// `x[l, ...]` (`lead` = product of the leading axes kept).
    pub fn standardize(&mut self, x: Var, lead: usize, eps: f64) -> Result<(Var, SliceStats)> {
        let (v, mean, inv_std) = kernels::standardize(self.value(x), lead, eps)?;
        let var = inv_std.iter().map(|s| 1.0 / (s * s) - eps).collect();
        let out = self.push(v, Op::Standardize { x, inv_std });
        Ok((out, SliceStats { mean, var }))
    }

    /// Cross-entropy of `softmax(logits)` against target distributions,
    /// averaged over rows. The class axis is the last one; any leading axes
    /// are rows.
    pub fn cross_entropy(&mut self, logits: Var, target: NdArray) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != target.len() {
            return Err(SlrError::dim("cross_entropy", z.shape(), target.shape()));
        }
        let k = *z.shape().last().unwrap_or(&1);
        let rows = z.len() / k;
        let mut loss = 0.0;
        for r in 0..rows {
            let ls = kernels::log_softmax(&z.data()[r * k..(r + 1) * k]);
            let t = &target.data()[r * k..(r + 1) * k];
            loss -= ls.iter().zip(t).map(|(l, t)| l * t).sum::<f64>();
        }
        Ok(self.push(
            NdArray::scalar(loss / rows as f64),
            Op::CrossEntropy { logits, target },
        ))
    }

    /// Reverse sweep from the scalar `loss`; returns gradients for every
    /// parameter leaf reachable from it (and zeros for unreachable ones that
    /// appear on the tape).
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let adj = self.adjoints(loss)?;
        let mut out: Vec<(ParamId, NdArray)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = adj
                    .get(i)
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| NdArray::zeros(node.value.shape()));
                match out.iter_mut().find(|(p, _)| *p == id) {
                    Some((_, acc)) => acc.axpy(1.0, &g),
                    None => out.push((id, g)),
                }
            }
        }
        Ok(ParamGrads(out))
    }

    /// Adjoint of an arbitrary node with respect to `loss`.
    pub fn grad_of(&self, loss: Var, x: Var) -> Result<NdArray> {
        let adj = self.adjoints(loss)?;
        Ok(adj
            .get(x.0)
            .cloned()
            .flatten()
            .unwrap_or_else(|| NdArray::zeros(self.shape(x))))
    }

    fn adjoints(&self, loss: Var) -> Result<Vec<Option<NdArray>>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(SlrError::dim("backward", lv.shape(), &[1]));
        }
        if !lv.all_finite() {
            return Err(SlrError::Numeric(format!(
                "non-finite loss {:?}",
                lv.data()
            )));
        }
        let mut adj: Vec<Option<NdArray>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(NdArray::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        Ok(adj)
    }

    fn propagate(&self, i: usize, g: &NdArray, adj: &mut [Option<NdArray>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                accumulate(adj, *a, kernels::sum_to(g, val(*a).shape())?);
                accumulate(adj, *b, kernels::sum_to(g, val(*b).shape())?);
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, kernels::sum_to(g, val(*a).shape())?);
                let gb = kernels::sum_to(g, val(*b).shape())?.map(|x| -x);
                accumulate(adj, *b, gb);
            }
            Op::Mul(a, b) => {
                let ga = kernels::broadcast_binary(g, val(*b), |x, y| x * y)?;
                let gb = kernels::broadcast_binary(g, val(*a), |x, y| x * y)?;
                accumulate(adj, *a, kernels::sum_to(&ga, val(*a).shape())?);
                accumulate(adj, *b, kernels::sum_to(&gb, val(*b).shape())?);
            }
            Op::Scale(a, c) => accumulate(adj, *a, g.map(|x| x * c)),
            Op::MatMul(a, b) => {
                let ga = kernels::matmul(g, &kernels::transpose2(val(*b)))?;
                let gb = kernels::matmul(&kernels::transpose2(val(*a)), g)?;
                accumulate(adj, *a, ga);
                accumulate(adj, *b, gb);
            }
            Op::Conv2d(x, k, spec) => {
                let (gx, gk) = kernels::conv2d_backward(val(*x), val(*k), g, spec)?;
                accumulate(adj, *x, gx);
                accumulate(adj, *k, gk);
            }
            Op::NodeMix(y, a) => {
                let (gy, ga) = kernels::node_mix_backward(val(*y), val(*a), g)?;
                accumulate(adj, *y, gy);
                accumulate(adj, *a, ga);
            }
            Op::MeanTo(x) => {
                let xs = val(*x).shape();
                let count = (val(*x).len() / g.len()) as f64;
                let gx = kernels::broadcast_to(g, xs)?.map(|v| v / count);
                accumulate(adj, *x, gx);
            }
            Op::Reshape(x) => accumulate(adj, *x, g.clone().reshape(val(*x).shape())?),
            Op::Permute(x, axes) => {
                let inv = kernels::inverse_permutation(axes);
                accumulate(adj, *x, kernels::permute(g, &inv)?);
            }
            Op::Concat(parts, axis) => {
                let sizes: Vec<usize> = parts.iter().map(|p| val(*p).shape()[*axis]).collect();
                for (p, gp) in parts.iter().zip(kernels::split(g, &sizes, *axis)) {
                    accumulate(adj, *p, gp);
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let gx = kernels::broadcast_binary(g, y, |g, s| g * s * (1.0 - s))?;
                accumulate(adj, *x, gx);
            }
            Op::Swish(x) => {
                let gx = kernels::broadcast_binary(g, val(*x), |g, v| g * kernels::swish_grad(v))?;
                accumulate(adj, *x, gx);
            }
            Op::Standardize { x, inv_std } => {
                accumulate(
                    adj,
                    *x,
                    kernels::standardize_backward(&node.value, inv_std, g),
                );
            }
            Op::CrossEntropy { logits, target } => {
                let z = val(*logits);
                let k = *z.shape().last().unwrap_or(&1);
                let rows = z.len() / k;
                let scale = g.data()[0] / rows as f64;
                let mut data = Vec::with_capacity(z.len());
                for r in 0..rows {
                    let p = kernels::softmax(&z.data()[r * k..(r + 1) * k]);
                    let t = &target.data()[r * k..(r + 1) * k];
                    let tsum: f64 = t.iter().sum();
                    data.extend(p.iter().zip(t).map(|(p, t)| scale * (p * tsum - t)));
                }
                accumulate(adj, *logits, NdArray::new(z.shape(), data)?);
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<NdArray>], v: Var, g: NdArray) {
    match &mut adj[v.0] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}
