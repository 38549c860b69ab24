//! Reverse-mode differentiation over a fixed primitive set.
//!
//! Graphs are define-by-run: every builder method evaluates eagerly and
//! records a node, so shape errors surface at construction and activations
//! are already cached when [`Graph::backward`] walks the tape in reverse.
//! Node ids are insertion-ordered, which is a valid topological order.

pub mod gradcheck;
pub mod ops;
pub mod params;

pub use params::{ParamStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::error::{Error, Result};
use crate::tensor::{broadcast_zip, reduce_to_dims, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Input,
    Const,
    Param(String),
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar,
    Relu,
    Gelu,
    Abs,
    Ln,
    ClampMin(f64),
    Reshape,
    Permute(Vec<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize },
    Linear,
    Conv2d,
    MatMul,
    BatchNormTrain,
    BatchNormInfer { eps: f64 },
    LayerNorm,
    Softmax,
    MeanAll,
    SumAll,
    AvgPool2,
    GaussConv2d,
    Gather(Vec<usize>),
    Dropout,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Const => "const",
            Op::Param(_) => "param",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Abs => "abs",
            Op::Ln => "ln",
            Op::ClampMin(_) => "clamp_min",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Linear => "linear",
            Op::Conv2d => "conv2d",
            Op::MatMul => "matmul",
            Op::BatchNormTrain => "batch_norm",
            Op::BatchNormInfer { .. } => "batch_norm",
            Op::LayerNorm => "layer_norm",
            Op::Softmax => "softmax",
            Op::MeanAll => "mean_all",
            Op::SumAll => "sum_all",
            Op::AvgPool2 => "avg_pool2",
            Op::GaussConv2d => "gauss_conv2d",
            Op::Gather(_) => "gather",
            Op::Dropout => "dropout",
        }
    }
}

struct Node<S> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<S>,
    /// Op-specific extras kept for backward (norm statistics, dropout mask,
    /// filter window).
    saved: Vec<Tensor<S>>,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. node `id`, if it participated.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.dims()
    }

    fn tag_err(&self, op: &str, e: Error) -> Error {
        let prefix = format!("node {} ({})", self.nodes.len(), op);
        match e {
            Error::Shape(m) => Error::Shape(format!("{}: {}", prefix, m)),
            Error::Size(m) => Error::Size(format!("{}: {}", prefix, m)),
            Error::Index(m) => Error::Index(format!("{}: {}", prefix, m)),
            other => other,
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor<S>, saved: Vec<Tensor<S>>) -> NodeId {
        let requires_grad = match op {
            Op::Const => false,
            Op::Input | Op::Param(_) => true,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            saved,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    // ---- leaves ----

    pub fn input(&mut self, t: Tensor<S>) -> NodeId {
        self.push(Op::Input, vec![], t, vec![])
    }

    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.push(Op::Const, vec![], t, vec![])
    }

    /// Reference a named parameter; its current value is snapshotted into
    /// the graph and gradients flow back to the store by name.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<NodeId> {
        let value = store.value(name)?.clone();
        Ok(self.push(Op::Param(name.to_string()), vec![], value, vec![]))
    }

    // ---- elementwise binary (equal-rank broadcasting) ----

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(S, S) -> S) -> Result<NodeId> {
        let v = broadcast_zip(&self.nodes[a].value, &self.nodes[b].value, f)
            .map_err(|e| self.tag_err(op.name(), e))?;
        Ok(self.push(op, vec![a, b], v, vec![]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    /// Add a fixed tensor (e.g. an attention mask); no gradient flows into
    /// the mask.
    pub fn masked_add(&mut self, x: NodeId, mask: Tensor<S>) -> Result<NodeId> {
        let m = self.constant(mask);
        self.add(x, m)
    }

    // ---- elementwise unary ----

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let k = S::from_f64(c);
        let v = self.nodes[x].value.map(|a| a * k);
        self.push(Op::Scale(c), vec![x], v, vec![])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let k = S::from_f64(c);
        let v = self.nodes[x].value.map(|a| a + k);
        self.push(Op::AddScalar, vec![x], v, vec![])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|a| if a > S::zero() { a } else { S::zero() });
        self.push(Op::Relu, vec![x], v, vec![])
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(ops::gelu_fwd);
        self.push(Op::Gelu, vec![x], v, vec![])
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|a| a.abs());
        self.push(Op::Abs, vec![x], v, vec![])
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|a| a.ln());
        self.push(Op::Ln, vec![x], v, vec![])
    }

    pub fn clamp_min(&mut self, x: NodeId, c: f64) -> NodeId {
        let k = S::from_f64(c);
        let v = self.nodes[x].value.map(|a| if a > k { a } else { k });
        self.push(Op::ClampMin(c), vec![x], v, vec![])
    }

    // ---- structure ----

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let v = self.nodes[x]
            .value
            .reshaped(dims)
            .map_err(|e| self.tag_err("reshape", e))?;
        Ok(self.push(Op::Reshape, vec![x], v, vec![]))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let v = self.nodes[x]
            .value
            .permuted(perm)
            .map_err(|e| self.tag_err("permute", e))?;
        Ok(self.push(Op::Permute(perm.to_vec()), vec![x], v, vec![]))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&id| &self.nodes[id].value).collect();
        let v = Tensor::concat(&tensors, axis).map_err(|e| self.tag_err("concat", e))?;
        Ok(self.push(Op::Concat(axis), parts.to_vec(), v, vec![]))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = self.nodes[x]
            .value
            .sliced(axis, start, len)
            .map_err(|e| self.tag_err("slice", e))?;
        Ok(self.push(Op::Slice { axis, start }, vec![x], v, vec![]))
    }

    // ---- dense / conv / attention ----

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::linear_fwd(&self.nodes[x].value, &self.nodes[w].value, &self.nodes[b].value)
            .map_err(|e| self.tag_err("linear", e))?;
        Ok(self.push(Op::Linear, vec![x, w, b], v, vec![]))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::conv2d_fwd(&self.nodes[x].value, &self.nodes[w].value, &self.nodes[b].value)
            .map_err(|e| self.tag_err("conv2d", e))?;
        Ok(self.push(Op::Conv2d, vec![x, w, b], v, vec![]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul_fwd(&self.nodes[a].value, &self.nodes[b].value)
            .map_err(|e| self.tag_err("matmul", e))?;
        Ok(self.push(Op::MatMul, vec![a, b], v, vec![]))
    }

    /// Batch norm with batch statistics. Saved statistics are retrievable
    /// via [`Graph::batch_stats`] for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (v, mean, var, inv_std) = ops::batchnorm_train_fwd(
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
            eps,
        )
        .map_err(|e| self.tag_err("batch_norm", e))?;
        Ok(self.push(
            Op::BatchNormTrain,
            vec![x, gamma, beta],
            v,
            vec![mean, var, inv_std],
        ))
    }

    /// (mean, biased variance) of a training-mode batch-norm node.
    pub fn batch_stats(&self, bn: NodeId) -> Result<(&Tensor<S>, &Tensor<S>)> {
        match self.nodes[bn].op {
            Op::BatchNormTrain => Ok((&self.nodes[bn].saved[0], &self.nodes[bn].saved[1])),
            _ => Err(Error::State(format!(
                "node {} is not a training-mode batch norm",
                bn
            ))),
        }
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: NodeId,
        var: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let v = ops::batchnorm_infer_fwd(
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
            &self.nodes[mean].value,
            &self.nodes[var].value,
            eps,
        )
        .map_err(|e| self.tag_err("batch_norm", e))?;
        Ok(self.push(
            Op::BatchNormInfer { eps },
            vec![x, gamma, beta, mean, var],
            v,
            vec![],
        ))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (v, mean, inv_std) = ops::layernorm_fwd(
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
            eps,
        )
        .map_err(|e| self.tag_err("layer_norm", e))?;
        Ok(self.push(Op::LayerNorm, vec![x, gamma, beta], v, vec![mean, inv_std]))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::softmax_fwd(&self.nodes[x].value).map_err(|e| self.tag_err("softmax", e))?;
        Ok(self.push(Op::Softmax, vec![x], v, vec![]))
    }

    // ---- reductions / pooling ----

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len();
        let sum: S = self.nodes[x].value.data().iter().copied().sum();
        let v = Tensor::from_vec(&[1], vec![sum / S::from_f64(n as f64)]).unwrap();
        self.push(Op::MeanAll, vec![x], v, vec![])
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let sum: S = self.nodes[x].value.data().iter().copied().sum();
        let v = Tensor::from_vec(&[1], vec![sum]).unwrap();
        self.push(Op::SumAll, vec![x], v, vec![])
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::avgpool2_fwd(&self.nodes[x].value).map_err(|e| self.tag_err("avg_pool2", e))?;
        Ok(self.push(Op::AvgPool2, vec![x], v, vec![]))
    }

    /// Depthwise valid convolution with a fixed separable window.
    pub fn gauss_conv2d(&mut self, x: NodeId, window: &[f64]) -> Result<NodeId> {
        let win: Vec<S> = window.iter().map(|&v| S::from_f64(v)).collect();
        let v = ops::gaussconv2d_fwd(&self.nodes[x].value, &win)
            .map_err(|e| self.tag_err("gauss_conv2d", e))?;
        let saved = Tensor::from_vec(&[win.len()], win)?;
        Ok(self.push(Op::GaussConv2d, vec![x], v, vec![saved]))
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = ops::gather_rows_fwd(&self.nodes[table].value, idx)
            .map_err(|e| self.tag_err("gather", e))?;
        Ok(self.push(Op::Gather(idx.to_vec()), vec![table], v, vec![]))
    }

    /// Inverted dropout; identity at rate 0. The mask is sampled once at
    /// construction from `seed`.
    pub fn dropout(&mut self, x: NodeId, rate: f64, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                rate
            )));
        }
        let mask = if rate == 0.0 {
            Tensor::full(self.nodes[x].value.dims(), S::one())
        } else {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let keep = S::from_f64(1.0 / (1.0 - rate));
            let vals: Vec<S> = (0..self.nodes[x].value.len())
                .map(|_| {
                    if rng.gen::<f64>() < rate {
                        S::zero()
                    } else {
                        keep
                    }
                })
                .collect();
            Tensor::from_vec(self.nodes[x].value.dims(), vals)?
        };
        let v = broadcast_zip(&self.nodes[x].value, &mask, |a, m| a * m)?;
        Ok(self.push(Op::Dropout, vec![x], v, vec![mask]))
    }

    // ---- backward ----

    /// Reverse-mode gradients of scalar node `loss` w.r.t. every
    /// contributing node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward on an empty graph".into()));
        }
        if loss >= self.nodes.len() {
            return Err(Error::Index(format!(
                "backward target {} out of 0..{}",
                loss,
                self.nodes.len()
            )));
        }
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward target must be scalar, node {} has dims {:?}",
                loss,
                self.nodes[loss].value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::full(self.nodes[loss].value.dims(), S::one()));

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.backprop_node(id, &gy, &mut grads)?;
            grads[id] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(slot: &mut Option<Tensor<S>>, t: Tensor<S>) {
        match slot {
            None => *slot = Some(t),
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                    *a += *b;
                }
            }
        }
    }

    fn feed(&self, grads: &mut [Option<Tensor<S>>], input: NodeId, g: Tensor<S>) {
        if self.nodes[input].requires_grad {
            Self::accumulate(&mut grads[input], g);
        }
    }

    fn backprop_node(&self, id: NodeId, gy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        match &node.op {
            Op::Input | Op::Const | Op::Param(_) => {}
            Op::Add => {
                for &i in ins {
                    let g = reduce_to_dims(gy, self.nodes[i].value.dims())?;
                    self.feed(grads, i, g);
                }
            }
            Op::Sub => {
                let ga = reduce_to_dims(gy, self.nodes[ins[0]].value.dims())?;
                self.feed(grads, ins[0], ga);
                let neg = gy.map(|v| -v);
                let gb = reduce_to_dims(&neg, self.nodes[ins[1]].value.dims())?;
                self.feed(grads, ins[1], gb);
            }
            Op::Mul => {
                let (a, b) = (&self.nodes[ins[0]].value, &self.nodes[ins[1]].value);
                let ga_full = broadcast_zip(gy, b, |g, bv| g * bv)?;
                self.feed(grads, ins[0], reduce_to_dims(&ga_full, a.dims())?);
                let gb_full = broadcast_zip(gy, a, |g, av| g * av)?;
                self.feed(grads, ins[1], reduce_to_dims(&gb_full, b.dims())?);
            }
            Op::Div => {
                let (a, b) = (&self.nodes[ins[0]].value, &self.nodes[ins[1]].value);
                let ga_full = broadcast_zip(gy, b, |g, bv| g / bv)?;
                self.feed(grads, ins[0], reduce_to_dims(&ga_full, a.dims())?);
                let quot = broadcast_zip(a, b, |av, bv| av / (bv * bv))?;
                let gb_full = broadcast_zip(gy, &quot, |g, qv| -(g * qv))?;
                self.feed(grads, ins[1], reduce_to_dims(&gb_full, b.dims())?);
            }
            Op::Scale(c) => {
                let k = S::from_f64(*c);
                self.feed(grads, ins[0], gy.map(|g| g * k));
            }
            Op::AddScalar => self.feed(grads, ins[0], gy.clone()),
            Op::Relu => {
                let x = &self.nodes[ins[0]].value;
                let g = broadcast_zip(gy, x, |g, xv| if xv > S::zero() { g } else { S::zero() })?;
                self.feed(grads, ins[0], g);
            }
            Op::Gelu => {
                let x = &self.nodes[ins[0]].value;
                let g = broadcast_zip(gy, x, |g, xv| g * ops::gelu_grad(xv))?;
                self.feed(grads, ins[0], g);
            }
            Op::Abs => {
                let x = &self.nodes[ins[0]].value;
                let g = broadcast_zip(gy, x, |g, xv| {
                    if xv > S::zero() {
                        g
                    } else if xv < S::zero() {
                        -g
                    } else {
                        S::zero()
                    }
                })?;
                self.feed(grads, ins[0], g);
            }
            Op::Ln => {
                let x = &self.nodes[ins[0]].value;
                let g = broadcast_zip(gy, x, |g, xv| g / xv)?;
                self.feed(grads, ins[0], g);
            }
            Op::ClampMin(c) => {
                let k = S::from_f64(*c);
                let x = &self.nodes[ins[0]].value;
                let g = broadcast_zip(gy, x, |g, xv| if xv >= k { g } else { S::zero() })?;
                self.feed(grads, ins[0], g);
            }
            Op::Reshape => {
                let g = gy.reshaped(self.nodes[ins[0]].value.dims())?;
                self.feed(grads, ins[0], g);
            }
            Op::Permute(perm) => {
                let mut inverse = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                self.feed(grads, ins[0], gy.permuted(&inverse)?);
            }
            Op::Concat(axis) => {
                let mut offset = 0;
                for &i in ins {
                    let len = self.nodes[i].value.dims()[*axis];
                    let g = gy.sliced(*axis, offset, len)?;
                    self.feed(grads, i, g);
                    offset += len;
                }
            }
            Op::Slice { axis, start } => {
                let xdims = self.nodes[ins[0]].value.dims();
                let mut dx = Tensor::zeros(xdims);
                let outer: usize = xdims[..*axis].iter().product();
                let inner: usize = xdims[*axis + 1..].iter().product();
                let len = gy.dims()[*axis];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * xdims[*axis] + start) * inner;
                    dx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&gy.data()[src..src + len * inner]);
                }
                self.feed(grads, ins[0], dx);
            }
            Op::Linear => {
                let (dx, dw, db) = ops::linear_bwd(
                    &self.nodes[ins[0]].value,
                    &self.nodes[ins[1]].value,
                    gy,
                )?;
                self.feed(grads, ins[0], dx);
                self.feed(grads, ins[1], dw);
                self.feed(grads, ins[2], db);
            }
            Op::Conv2d => {
                let (dx, dw, db) = ops::conv2d_bwd(
                    &self.nodes[ins[0]].value,
                    &self.nodes[ins[1]].value,
                    gy,
                )?;
                self.feed(grads, ins[0], dx);
                self.feed(grads, ins[1], dw);
                self.feed(grads, ins[2], db);
            }
            Op::MatMul => {
                let (da, db) = ops::matmul_bwd(
                    &self.nodes[ins[0]].value,
                    &self.nodes[ins[1]].value,
                    gy,
                )?;
                self.feed(grads, ins[0], da);
                self.feed(grads, ins[1], db);
            }
            Op::BatchNormTrain => {
                let (dx, dgamma, dbeta) = ops::batchnorm_train_bwd(
                    &self.nodes[ins[0]].value,
                    &self.nodes[ins[1]].value,
                    &node.saved[0],
                    &node.saved[2],
                    gy,
                )?;
                self.feed(grads, ins[0], dx);
                self.feed(grads, ins[1], dgamma);
                self.feed(grads, ins[2], dbeta);
            }
            Op::BatchNormInfer { eps } => {
                let (dx, dgamma, dbeta) = ops::batchnorm_infer_bwd(
                    &self.nodes[ins[0]].value,
                    &self.nodes[ins[1]].value,
                    &self.nodes[ins[3]].value,
                    &self.nodes[ins[4]].value,
                    *eps,
                    gy,
                )?;
                self.feed(grads, ins[0], dx);
                self.feed(grads, ins[1], dgamma);
                self.feed(grads, ins[2], dbeta);
            }
            Op::LayerNorm => {
                let (dx, dgamma, dbeta) = ops::layernorm_bwd(
                    &self.nodes[ins[0]].value,
                    &self.nodes[ins[1]].value,
                    &node.saved[0],
                    &node.saved[1],
                    gy,
                )?;
                self.feed(grads, ins[0], dx);
                self.feed(grads, ins[1], dgamma);
                self.feed(grads, ins[2], dbeta);
            }
            Op::Softmax => {
                let dx = ops::softmax_bwd(&node.value, gy)?;
                self.feed(grads, ins[0], dx);
            }
            Op::MeanAll => {
                let n = self.nodes[ins[0]].value.len();
                let g = gy.data()[0] / S::from_f64(n as f64);
                self.feed(grads, ins[0], Tensor::full(self.nodes[ins[0]].value.dims(), g));
            }
            Op::SumAll => {
                let g = gy.data()[0];
                self.feed(grads, ins[0], Tensor::full(self.nodes[ins[0]].value.dims(), g));
            }
            Op::AvgPool2 => {
                let dx = ops::avgpool2_bwd(self.nodes[ins[0]].value.dims(), gy)?;
                self.feed(grads, ins[0], dx);
            }
            Op::GaussConv2d => {
                let dx = ops::gaussconv2d_bwd(
                    self.nodes[ins[0]].value.dims(),
                    node.saved[0].data(),
                    gy,
                )?;
                self.feed(grads, ins[0], dx);
            }
            Op::Gather(idx) => {
                let dt = ops::gather_rows_bwd(self.nodes[ins[0]].value.dims(), idx, gy)?;
                self.feed(grads, ins[0], dt);
            }
            Op::Dropout => {
                let g = broadcast_zip(gy, &node.saved[0], |g, m| g * m)?;
                self.feed(grads, ins[0], g);
            }
        }
        Ok(())
    }

    /// Add parameter gradients into the store (by name) and mark them ready
    /// for an optimizer step.
    pub fn accumulate_param_grads(
        &self,
        grads: &Gradients<S>,
        store: &mut ParamStore<S>,
    ) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(g) = grads.wrt(id) {
                    store.add_grad(name, g)?;
                }
            }
        }
        store.mark_grads_ready();
        Ok(())
    }
}
