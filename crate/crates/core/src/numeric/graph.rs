//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward pass is a single reverse sweep.

use std::collections::HashMap;

use rand::Rng;

use super::tensor::axis_layout;
use super::{ParamStore, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    Relu(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    LnClamped {
        input: Var,
        floor: f64,
    },
    Sum(Var),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    MeanRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    clamp_events: usize,
}

/// Gradient of a scalar root with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not influence the root.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Number of log evaluations whose argument was clamped.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Param);
        self.params.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(value, Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(
                "add",
                format!("{:?} + {:?}", x.shape(), y.shape()),
            ));
        }
        let value = x.zip_map(y, |p, q| p + q);
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a length-`m` bias to every row of an `n × m` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, m) = self.value(a).dims2("add_bias")?;
        let b = self.value(bias);
        if b.len() != m || b.rank() > 2 || (b.rank() == 2 && b.shape()[0] != 1) {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} for {m} columns", b.shape()),
            ));
        }
        let bias_data = b.data().to_vec();
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(m) {
            for (v, bv) in row.iter_mut().zip(&bias_data) {
                *v += bv;
            }
        }
        Ok(self.push(value, Op::AddBias(a, bias)))
    }

    /// Multiplies every entry of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let factor = self.value(s).item().map_err(|_| {
            Error::dim(
                "scale_by",
                format!("scale must have one element, got {:?}", self.shape(s)),
            )
        })?;
        let value = self.value(a).map(|v| v * factor);
        Ok(self.push(value, Op::ScaleBy(a, s)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// `factor * a + shift`; the shift is a constant.
    pub fn affine(&mut self, a: Var, factor: f64, shift: f64) -> Var {
        let scaled = self.scale(a, factor);
        let value = self.value(scaled).map(|v| v + shift);
        self.push(value, Op::AddConst(scaled))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        axis_layout(&base, axis, "concat")?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("{:?} vs {:?} on axis {axis}", s, base),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_layout(&shape, axis, "concat")?;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (outer, full, inner) = axis_layout(&shape, axis, "slice")?;
        if start + len > full {
            return Err(Error::dim(
                "slice",
                format!("{start}..{} out of {full} on axis {axis}", start + len),
            ));
        }
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Slice { input, axis, start }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(input)
            .reshaped(shape)
            .map_err(|_| Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(input))))?;
        Ok(self.push(value, Op::Reshape(input)))
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let value = self.value(input).softmax(axis)?;
        Ok(self.push(value, Op::Softmax { input, axis }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(0.0));
        self.push(value, Op::Relu(input))
    }

    /// Row-wise normalization to zero mean and unit (biased) variance, then
    /// `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.value(input).dims2("layer_norm")?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain {:?} / shift {:?} for width {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normed = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..d {
                let xh = (row[c] - mean) * istd;
                normed[r * d + c] = xh;
                out[r * d + c] = g[c] * xh + b[c];
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normed,
                inv_std,
            },
        ))
    }

    /// Inverted dropout. A rate of zero returns `input` unchanged.
    pub fn dropout(&mut self, input: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(input).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let x = self.value(input);
        let value = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        Ok(self.push(value, Op::Dropout { input, mask }))
    }

    /// `ln(max(x, floor))`; clamped entries get zero gradient and are counted.
    pub fn ln_clamped(&mut self, input: Var, floor: f64) -> Var {
        let x = self.value(input);
        let clamped = x.data().iter().filter(|&&v| v < floor).count();
        let value = x.map(|v| v.max(floor).ln());
        self.clamp_events += clamped;
        self.push(value, Op::LnClamped { input, floor })
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum(input))
    }

    /// Rows of `table` picked by `indices`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2("gather")?;
        if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(
                "gather",
                format!("index {bad} out of {rows} rows"),
            ));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Column means of an `n × d` matrix, as `1 × d`.
    pub fn mean_rows(&mut self, input: Var) -> Result<Var> {
        let (n, d) = self.value(input).dims2("mean_rows")?;
        if n == 0 {
            return Err(Error::dim("mean_rows", "no rows"));
        }
        let x = self.value(input);
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(x.row_slice(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let value = Tensor::new(vec![1, d], out)?;
        Ok(self.push(value, Op::MeanRows(input)))
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        let seed_value = root_value.item().map_err(|_| {
            Error::dim(
                "backward",
                format!("root must be a scalar, got {:?}", root_value.shape()),
            )
        })?;
        if !seed_value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {seed_value}")));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(root_value.shape()));

        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of every parameter node into `store`.
    pub fn accumulate(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        let mut bound: Vec<(&String, &Var)> = self.params.iter().collect();
        bound.sort();
        for (name, &var) in bound {
            if let Some(g) = grads.get(var) {
                store.accumulate(name, g)?;
            }
        }
        Ok(())
    }

    /// Convenience: backward from `root` and accumulate into `store`.
    pub fn backward_into(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(root)?;
        self.accumulate(&grads, store)
    }

    fn propagate(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                add_grad(grads, *a, gy.matmul_t(bv)?);
                add_grad(grads, *b, av.transpose()?.matmul(gy)?);
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                add_grad(grads, *a, gy.matmul(bv)?);
                add_grad(grads, *b, gy.transpose()?.matmul(av)?);
            }
            Op::Transpose(a) => add_grad(grads, *a, gy.transpose()?),
            Op::Add(a, b) => {
                add_grad(grads, *a, gy.clone());
                add_grad(grads, *b, gy.clone());
            }
            Op::AddBias(a, bias) => {
                add_grad(grads, *a, gy.clone());
                let m = gy.shape()[1];
                let mut db = vec![0.0; m];
                for row in gy.data().chunks(m) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                add_grad(grads, *bias, Tensor::new(self.shape(*bias).to_vec(), db)?);
            }
            Op::ScaleBy(a, s) => {
                let factor = self.value(*s).item()?;
                add_grad(grads, *a, gy.map(|g| g * factor));
                let ds: f64 = gy
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| g * x)
                    .sum();
                add_grad(grads, *s, Tensor::new(self.shape(*s).to_vec(), vec![ds])?);
            }
            Op::Scale(a, factor) => add_grad(grads, *a, gy.map(|g| g * factor)),
            Op::AddConst(a) => add_grad(grads, *a, gy.clone()),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_layout(gy.shape(), *axis, "concat")?;
                let mut offset = 0;
                for &v in inputs {
                    let shape = self.shape(v).to_vec();
                    let len = shape[*axis];
                    let mut data = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        data.extend_from_slice(&gy.data()[from..from + len * inner]);
                    }
                    add_grad(grads, v, Tensor::new(shape, data)?);
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.shape(*input).to_vec();
                let (outer, full, inner) = axis_layout(&shape, *axis, "slice")?;
                let len = gy.shape()[*axis];
                let mut dx = Tensor::zeros(&shape);
                for o in 0..outer {
                    let to = (o * full + start) * inner;
                    let from = o * len * inner;
                    dx.data_mut()[to..to + len * inner]
                        .copy_from_slice(&gy.data()[from..from + len * inner]);
                }
                add_grad(grads, *input, dx);
            }
            Op::Reshape(input) => add_grad(grads, *input, gy.reshaped(self.shape(*input))?),
            Op::Softmax { input, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_layout(y.shape(), *axis, "softmax")?;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + c;
                        let dot: f64 = (0..len).map(|k| gy.data()[idx(k)] * y.data()[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = y.data()[idx(k)] * (gy.data()[idx(k)] - dot);
                        }
                    }
                }
                add_grad(grads, *input, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                add_grad(
                    grads,
                    *input,
                    gy.zip_map(x, |g, v| if v > 0.0 { g } else { 0.0 }),
                );
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let (rows, d) = gy.dims2("layer_norm")?;
                let g = self.value(*gamma).data();
                let mut dx = vec![0.0; rows * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let gy_row = &gy.data()[r * d..(r + 1) * d];
                    let xh = &normed[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for c in 0..d {
                        let dxh = gy_row[c] * g[c];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[c];
                        dgamma[c] += gy_row[c] * xh[c];
                        dbeta[c] += gy_row[c];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for c in 0..d {
                        let dxh = gy_row[c] * g[c];
                        dx[r * d + c] = inv_std[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                    }
                }
                add_grad(grads, *input, Tensor::new(vec![rows, d], dx)?);
                add_grad(
                    grads,
                    *gamma,
                    Tensor::new(self.shape(*gamma).to_vec(), dgamma)?,
                );
                add_grad(
                    grads,
                    *beta,
                    Tensor::new(self.shape(*beta).to_vec(), dbeta)?,
                );
            }
            Op::Dropout { input, mask } => {
                let dx = gy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                add_grad(grads, *input, Tensor::new(gy.shape().to_vec(), dx)?);
            }
            Op::LnClamped { input, floor } => {
                let x = self.value(*input);
                add_grad(
                    grads,
                    *input,
                    gy.zip_map(x, |g, v| if v >= *floor { g / v } else { 0.0 }),
                );
            }
            Op::Sum(input) => {
                let g = gy.item()?;
                add_grad(grads, *input, Tensor::full(self.shape(*input), g));
            }
            Op::Gather { table, indices } => {
                let shape = self.shape(*table).to_vec();
                let d = shape[1];
                let mut dt = Tensor::zeros(&shape);
                for (r, &i) in indices.iter().enumerate() {
                    let src = &gy.data()[r * d..(r + 1) * d];
                    for (t, s) in dt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *t += s;
                    }
                }
                add_grad(grads, *table, dt);
            }
            Op::MeanRows(input) => {
                let (n, d) = self.value(*input).dims2("mean_rows")?;
                let row: Vec<f64> = gy.data().iter().map(|g| g / n as f64).collect();
                let data = (0..n).flat_map(|_| row.iter().copied()).collect();
                add_grad(grads, *input, Tensor::new(vec![n, d], data)?);
            }
        }
        Ok(())
    }
}

fn add_grad(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
