//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order; since an
//! operation can only consume already-recorded nodes, the node vector is a
//! topological order and `backward` is a single reverse sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Log(Var),
    Exp(Var),
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Computation tape plus the values of every recorded node.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    train: bool,
    dropout_seed: u64,
    dropout_calls: u64,
}

impl<T: Scalar> Graph<T> {
    /// `train` enables dropout; `seed` addresses the dropout mask stream.
    pub fn new(train: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            train,
            dropout_seed: seed,
            dropout_calls: 0,
        }
    }

    pub fn eval() -> Self {
        Self::new(false, 0)
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`'s shape.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(self.shape_err("add_bias", a, b));
        }
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .chunks_exact(y.len())
            .flat_map(|row| row.iter().zip(y.data()).map(|(&p, &q)| p + q))
            .collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::AddBias(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p * q)
            .collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&p| p * factor).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a plain `[k, n]` matrix shared across every leading
    /// index of `a`, or carries exactly the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != *lead {
            return Err(self.shape_err("matmul", a, b));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (x, y) = (self.value(a).data(), self.value(b).data());
            if shared_b {
                // Leading axes fold into the row dimension.
                unsafe {
                    T::gemm(
                        batch * m,
                        k,
                        n,
                        x.as_ptr(),
                        k as isize,
                        1,
                        y.as_ptr(),
                        n as isize,
                        1,
                        T::zero(),
                        out.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            } else {
                for bi in 0..batch {
                    unsafe {
                        T::gemm(
                            m,
                            k,
                            n,
                            x[bi * m * k..].as_ptr(),
                            k as isize,
                            1,
                            y[bi * k * n..].as_ptr(),
                            n as isize,
                            1,
                            T::zero(),
                            out[bi * m * n..].as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                shared_b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape,
                rhs: perm.to_vec(),
            });
        }
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Permute(a, perm.to_vec()),
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(a).to_vec(),
                rhs: vec![],
            });
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if shape.iter().product::<usize>() != x.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        for &p in &parts[1..] {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(self.shape_err("concat", *first, p));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Row lookup into a `[rows, dim]` table; the backward pass scatter-adds.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Shape {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let (rows, dim) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for table with {rows} rows"
            )));
        }
        if indices.is_empty() {
            return Err(Error::invalid("gather with no indices"));
        }
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), dim], data),
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout; the identity outside train mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if !self.train || p == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        rng.set_stream(self.dropout_calls);
        self.dropout_calls += 1;
        let keep = T::lit(1.0 / (1.0 - p));
        let x = self.value(a);
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Dropout { x: a, mask }, rg))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.ln(), Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.exp(), Op::Exp(a))
    }

    /// Exact GELU, `x·Φ(x)` with the Gaussian CDF written through `erf`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu_value, Op::Gelu(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.any_grad(&[a]);
        self.push(value, op, rg)
    }

    /// Replaces entries where `mask` is true with `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: T) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(Error::Shape {
                op: "masked_fill",
                lhs: x.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = x
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            value,
            Op::MaskedFill {
                x: a,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_split(a, axis, "softmax")?;
        let mut data = self.value(a).data().to_vec();
        for_each_lane(outer, len, inner, |lane| {
            let max = lane
                .iter()
                .map(|&i| data[i])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for &i in lane {
                data[i] = (data[i] - max).exp();
                total += data[i];
            }
            for &i in lane {
                data[i] /= total;
            }
        });
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Softmax { x: a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_split(a, axis, "log_softmax")?;
        let mut data = self.value(a).data().to_vec();
        for_each_lane(outer, len, inner, |lane| {
            let max = lane
                .iter()
                .map(|&i| data[i])
                .fold(T::neg_infinity(), T::max);
            let total: T = lane.iter().map(|&i| (data[i] - max).exp()).sum();
            let shift = max + total.ln();
            for &i in lane {
                data[i] -= shift;
            }
        });
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::LogSoftmax { x: a, axis }, rg))
    }

    /// Softmax over `axis` restricted to entries where `keep` is true.
    ///
    /// Excluded entries are overwritten with a `-1e9` sentinel before
    /// normalization, so they receive exactly zero probability. A lane with
    /// no kept entry is an error.
    pub fn masked_softmax(&mut self, a: Var, keep: &[bool], axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_split(a, axis, "masked_softmax")?;
        if keep.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: self.shape(a).to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let mut empty_lane = false;
        for_each_lane(outer, len, inner, |lane| {
            empty_lane |= lane.iter().all(|&i| !keep[i]);
        });
        if empty_lane {
            return Err(Error::invalid(
                "masked_softmax: a row has no unmasked entries",
            ));
        }
        let drop: Vec<bool> = keep.iter().map(|k| !k).collect();
        let filled = self.masked_fill(a, &drop, T::lit(MASK_SENTINEL))?;
        self.softmax(filled, axis)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(a).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(self.shape_err("layer_norm", a, gain));
        }
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let x = self.value(a);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = x.len() / d;
        let mut normalized = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = (var + eps).sqrt().recip();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                normalized.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let rg = self.any_grad(&[a, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::lit(1.0 / n as f64))
    }

    fn axis_split(&self, a: Var, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![axis],
            });
        }
        Ok((
            s[..axis].iter().product(),
            s[axis],
            s[axis + 1..].iter().product(),
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients accumulate into leaves: calling this twice without
    /// [`zero_grads`](Self::zero_grads) doubles every leaf gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a += d),
                    None => node.grad = Some(g),
                }
                continue;
            }
            propagate(&self.nodes, i, &g, &mut adj);
        }
        Ok(())
    }
}

/// Additive stand-in for minus infinity in attention masks.
pub const MASK_SENTINEL: f64 = -1e9;

pub(crate) fn gelu_value<T: Scalar>(v: T) -> T {
    let half = T::lit(0.5);
    v * half * (T::one() + (v * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_derivative<T: Scalar>(v: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (v * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(v * v) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + v * pdf
}

fn for_each_lane(outer: usize, len: usize, inner: usize, mut f: impl FnMut(&[usize])) {
    let mut lane = vec![0; len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, slot) in lane.iter_mut().enumerate() {
                *slot = (o * len + j) * inner + i;
            }
            f(&lane);
        }
    }
}

pub(crate) fn permute_data<T: Copy>(
    data: &[T],
    shape: &[usize],
    perm: &[usize],
) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    let last = out_shape[nd - 1];
    let last_stride = strides[nd - 1];
    let rows = data.len() / last;
    for _ in 0..rows {
        if last_stride == 1 {
            out.extend_from_slice(&data[offset..offset + last]);
        } else {
            out.extend((0..last).map(|j| data[offset + j * last_stride]));
        }
        // advance the multi-index over all but the last axis
        let mut ax = nd - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    adj: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn propagate<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => unreachable!("leaves are handled by the caller"),
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(s) = slot(nodes, adj, v) {
                    s.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                }
            }
        }
        Op::AddBias(a, b) => {
            if let Some(s) = slot(nodes, adj, *a) {
                s.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
            }
            if let Some(s) = slot(nodes, adj, *b) {
                let n = s.len();
                for row in g.chunks_exact(n) {
                    s.iter_mut().zip(row).for_each(|(x, &d)| *x += d);
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if let Some(s) = slot(nodes, adj, *a) {
                for ((x, &d), &o) in s.iter_mut().zip(g).zip(vb) {
                    *x += d * o;
                }
            }
            if let Some(s) = slot(nodes, adj, *b) {
                for ((x, &d), &o) in s.iter_mut().zip(g).zip(va) {
                    *x += d * o;
                }
            }
        }
        Op::Scale(a, f) => {
            if let Some(s) = slot(nodes, adj, *a) {
                s.iter_mut().zip(g).for_each(|(x, &d)| *x += d * *f);
            }
        }
        &Op::MatMul {
            a,
            b,
            shared_b,
            batch,
            m,
            k,
            n,
        } => {
            let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if let Some(s) = slot(nodes, adj, a) {
                // dA = dC · Bᵀ
                if shared_b {
                    unsafe {
                        T::gemm(
                            batch * m,
                            n,
                            k,
                            g.as_ptr(),
                            n as isize,
                            1,
                            vb.as_ptr(),
                            1,
                            n as isize,
                            T::one(),
                            s.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                } else {
                    for bi in 0..batch {
                        unsafe {
                            T::gemm(
                                m,
                                n,
                                k,
                                g[bi * m * n..].as_ptr(),
                                n as isize,
                                1,
                                vb[bi * k * n..].as_ptr(),
                                1,
                                n as isize,
                                T::one(),
                                s[bi * m * k..].as_mut_ptr(),
                                k as isize,
                                1,
                            );
                        }
                    }
                }
            }
            if let Some(s) = slot(nodes, adj, b) {
                // dB = Aᵀ · dC
                if shared_b {
                    unsafe {
                        T::gemm(
                            k,
                            batch * m,
                            n,
                            va.as_ptr(),
                            1,
                            k as isize,
                            g.as_ptr(),
                            n as isize,
                            1,
                            T::one(),
                            s.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                } else {
                    for bi in 0..batch {
                        unsafe {
                            T::gemm(
                                k,
                                m,
                                n,
                                va[bi * m * k..].as_ptr(),
                                1,
                                k as isize,
                                g[bi * m * n..].as_ptr(),
                                n as isize,
                                1,
                                T::one(),
                                s[bi * k * n..].as_mut_ptr(),
                                n as isize,
                                1,
                            );
                        }
                    }
                }
            }
        }
        Op::Permute(a, perm) => {
            if let Some(s) = slot(nodes, adj, *a) {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inverse);
                s.iter_mut().zip(&back).for_each(|(x, &d)| *x += d);
            }
        }
        Op::Reshape(a) => {
            if let Some(s) = slot(nodes, adj, *a) {
                s.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
            }
        }
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let row = shape[*axis] * inner;
            let mut start = 0;
            for &p in parts {
                let block = nodes[p.0].value.shape()[*axis] * inner;
                if let Some(s) = slot(nodes, adj, p) {
                    for o in 0..outer {
                        let src = &g[o * row + start..o * row + start + block];
                        s[o * block..(o + 1) * block]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, &d)| *x += d);
                    }
                }
                start += block;
            }
        }
        Op::Gather { table, indices } => {
            if let Some(s) = slot(nodes, adj, *table) {
                let dim = node.value.last_dim();
                for (r, &i) in indices.iter().enumerate() {
                    s[i * dim..(i + 1) * dim]
                        .iter_mut()
                        .zip(&g[r * dim..(r + 1) * dim])
                        .for_each(|(x, &d)| *x += d);
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(s) = slot(nodes, adj, *x) {
                for ((o, &d), &m) in s.iter_mut().zip(g).zip(mask) {
                    *o += d * m;
                }
            }
        }
        Op::Log(a) => {
            let va = nodes[a.0].value.data();
            if let Some(s) = slot(nodes, adj, *a) {
                for ((o, &d), &v) in s.iter_mut().zip(g).zip(va) {
                    *o += d / v;
                }
            }
        }
        Op::Exp(a) => {
            let y = node.value.data();
            if let Some(s) = slot(nodes, adj, *a) {
                for ((o, &d), &v) in s.iter_mut().zip(g).zip(y) {
                    *o += d * v;
                }
            }
        }
        Op::Gelu(a) => {
            let va = nodes[a.0].value.data();
            if let Some(s) = slot(nodes, adj, *a) {
                for ((o, &d), &v) in s.iter_mut().zip(g).zip(va) {
                    *o += d * gelu_derivative(v);
                }
            }
        }
        Op::MaskedFill { x, mask } => {
            if let Some(s) = slot(nodes, adj, *x) {
                for ((o, &d), &m) in s.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *o += d;
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let shape = node.value.shape();
            let (outer, len, inner) = (
                shape[..*axis].iter().product(),
                shape[*axis],
                shape[axis + 1..].iter().product(),
            );
            if let Some(s) = slot(nodes, adj, *x) {
                for_each_lane(outer, len, inner, |lane| {
                    let dot: T = lane.iter().map(|&i| g[i] * y[i]).sum();
                    for &i in lane {
                        s[i] += y[i] * (g[i] - dot);
                    }
                });
            }
        }
        Op::LogSoftmax { x, axis } => {
            let y = node.value.data();
            let shape = node.value.shape();
            let (outer, len, inner) = (
                shape[..*axis].iter().product(),
                shape[*axis],
                shape[axis + 1..].iter().product(),
            );
            if let Some(s) = slot(nodes, adj, *x) {
                for_each_lane(outer, len, inner, |lane| {
                    let total: T = lane.iter().map(|&i| g[i]).sum();
                    for &i in lane {
                        s[i] += g[i] - y[i].exp() * total;
                    }
                });
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let d = node.value.last_dim();
            let gv = nodes[gain.0].value.data();
            if let Some(s) = slot(nodes, adj, *gain) {
                for (grow, hrow) in g.chunks_exact(d).zip(normalized.chunks_exact(d)) {
                    for j in 0..d {
                        s[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(s) = slot(nodes, adj, *bias) {
                for grow in g.chunks_exact(d) {
                    s.iter_mut().zip(grow).for_each(|(o, &v)| *o += v);
                }
            }
            if let Some(s) = slot(nodes, adj, *x) {
                let dn = T::lit(d as f64);
                for (r, (grow, hrow)) in g
                    .chunks_exact(d)
                    .zip(normalized.chunks_exact(d))
                    .enumerate()
                {
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        let dh = grow[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[j];
                    }
                    let scale = inv_std[r] / dn;
                    for j in 0..d {
                        let dh = grow[j] * gv[j];
                        s[r * d + j] += scale * (dn * dh - sum_dh - hrow[j] * sum_dh_h);
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(s) = slot(nodes, adj, *a) {
                let d = g[0];
                s.iter_mut().for_each(|x| *x += d);
            }
        }
    }
}
