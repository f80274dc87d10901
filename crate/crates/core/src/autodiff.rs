//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its value and its operand ids, so node
//! order is already topological. Backward walks the tape once in reverse.
//! Values are immutable once recorded.

use crate::error::{FarError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    ChannelPool { x: Var, argmax: Vec<usize> },
    MulChannel(Var, Var),
    MulSpatial(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    MeanRows(Var),
    SubRow(Var, Var),
    L2Norm(Var),
    Gather { x: Var, index: Vec<usize> },
    SliceRows { x: Var, start: usize },
}

impl Op {
    fn operands(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | AddBias(a, b) => vec![*a, *b],
            MulChannel(a, b) | MulSpatial(a, b) | SubRow(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Relu(a) | Sigmoid(a) | Softplus(a) | Log(a) | Exp(a)
            | Abs(a) | AvgPool2(a) | GlobalAvgPool(a) | Softmax(a) | LogSoftmax(a)
            | SumAll(a) | MeanAll(a) | SumLast(a) | MeanRows(a) | L2Norm(a) => vec![*a],
            Conv2d {
                x, kernel, bias, ..
            } => {
                let mut v = vec![*x, *kernel];
                v.extend(bias.iter().copied());
                v
            }
            ChannelPool { x, .. } | Gather { x, .. } | SliceRows { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
///
/// Every leaf gets an entry; leaves the root does not depend on hold zeros.
#[derive(Debug, Clone)]
pub struct Grads<T: Real> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FarError::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Splits a rank-1 or rank-2 tensor into `(rows, row_len)`.
fn rows_of<T: Real>(t: &Tensor<T>, op: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [k] if k > 0 => Ok((1, k)),
        [n, k] if k > 0 => Ok((n, k)),
        _ => Err(FarError::dim(format!(
            "{op}: expected [k] or [n,k] with k ≥ 1, got {:?}",
            t.shape()
        ))),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copies `v` into a fresh leaf so no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, name)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let sv = T::lit(s);
        self.unary(a, |x| x * sv, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let sv = T::lit(s);
        self.unary(a, |x| x + sv, Op::AddScalar(a))
    }

    /// `1 − a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid_open, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, kernels::softplus, Op::Softplus(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|v| **v <= T::zero()) {
            return Err(FarError::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, |x| x.ln(), Op::Log(a)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            _ => {
                return Err(FarError::dim(format!(
                    "matmul needs two matrices, got {:?} and {:?}",
                    ta.shape(),
                    tb.shape()
                )))
            }
        };
        if k != k2 {
            return Err(FarError::dim(format!(
                "matmul inner dimensions differ: {:?} · {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(ta.data(), tb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds a length-`m` bias to every row of an `[n,m]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (_, m) = rows_of(ta, "add_bias")?;
        if tb.shape() != [m] {
            return Err(FarError::dim(format!(
                "add_bias: bias {:?} does not match rows of {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    /// Cross-correlation of `x` (`c_in×h×w` or `n×c_in×h×w`) with a
    /// `c_out×c_in×k×k` kernel, odd `k`, zero padding on every side.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let tx = self.value(x);
        let tk = self.value(kernel);
        let (n, c_in, h, w) = tx.nchw()?;
        let (c_out, k) = match *tk.shape() {
            [co, ci, kh, kw] if ci == c_in && kh == kw => (co, kh),
            _ => {
                return Err(FarError::dim(format!(
                    "conv2d: kernel {:?} incompatible with input {:?}",
                    tk.shape(),
                    tx.shape()
                )))
            }
        };
        if k % 2 == 0 {
            return Err(FarError::dim(format!("conv2d: kernel size {k} must be odd")));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(FarError::dim(format!(
                "conv2d: output would be empty for {h}×{w}, k={k}, padding={padding}"
            )));
        }
        if padding >= k {
            return Err(FarError::dim(format!(
                "conv2d: padding {padding} must be smaller than kernel size {k}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(FarError::dim(format!(
                    "conv2d: bias {:?} must have length {c_out}",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            pad: padding,
        };
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let mut out = vec![T::zero(); n * c_out * ho * wo];
        kernels::conv2d_forward(
            geom,
            tx.data(),
            tk.data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let shape = if tx.rank() == 3 {
            vec![c_out, ho, wo]
        } else {
            vec![n, c_out, ho, wo]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// 2×2 average pooling with stride 2; a trailing odd row/column is dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, h, w) = tx.nchw()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(FarError::dim(format!("avg_pool2 on {h}×{w} map")));
        }
        let quarter = T::lit(0.25);
        let src = tx.data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let ip = &src[p * h * w..][..h * w];
            let op = &mut out[p * ho * wo..][..ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let i0 = 2 * y * w + 2 * xx;
                    op[y * wo + xx] = (ip[i0] + ip[i0 + 1] + ip[i0 + w] + ip[i0 + w + 1]) * quarter;
                }
            }
        }
        let shape = if tx.rank() == 3 {
            vec![c, ho, wo]
        } else {
            vec![n, c, ho, wo]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::AvgPool2(x)))
    }

    /// Per-channel spatial mean: `c×h×w → c`, `n×c×h×w → n×c`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, h, w) = tx.nchw()?;
        let hw = h * w;
        if hw == 0 {
            return Err(FarError::dim("global_avg_pool over empty spatial extent"));
        }
        let inv = T::lit(1.0 / hw as f64);
        let out: Vec<T> = tx
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let shape = if tx.rank() == 3 { vec![c] } else { vec![n, c] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    /// Cross-channel pooling into two planes: plane 0 holds the mean over
    /// channels, plane 1 the max. Ties in the max go to the lowest channel.
    pub fn channel_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, h, w) = tx.nchw()?;
        if c == 0 {
            return Err(FarError::dim("channel_pool needs at least one channel"));
        }
        let hw = h * w;
        let inv_c = T::lit(1.0 / c as f64);
        let src = tx.data();
        let mut out = vec![T::zero(); n * 2 * hw];
        let mut argmax = vec![0usize; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let mut sum = T::zero();
                let mut best = T::neg_infinity();
                let mut best_k = 0;
                for k in 0..c {
                    let v = src[(b * c + k) * hw + p];
                    sum += v;
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                out[(b * 2) * hw + p] = sum * inv_c;
                out[(b * 2 + 1) * hw + p] = best;
                argmax[b * hw + p] = best_k;
            }
        }
        let shape = if tx.rank() == 3 {
            vec![2, h, w]
        } else {
            vec![n, 2, h, w]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ChannelPool { x, argmax }))
    }

    /// Scales each channel of `x` by the matching entry of `a`
    /// (`[c]` for a single map, `[n,c]` for a batch).
    pub fn mul_channel(&mut self, x: Var, a: Var) -> Result<Var> {
        let (tx, ta) = (self.value(x), self.value(a));
        let (n, c, h, w) = tx.nchw()?;
        let expected: Vec<usize> = if tx.rank() == 3 { vec![c] } else { vec![n, c] };
        if ta.shape() != expected.as_slice() {
            return Err(FarError::dim(format!(
                "mul_channel: gate {:?} does not match map {:?}",
                ta.shape(),
                tx.shape()
            )));
        }
        let hw = h * w;
        let mut out = tx.clone();
        for (plane, &g) in out.data_mut().chunks_mut(hw).zip(ta.data()) {
            plane.iter_mut().for_each(|v| *v *= g);
        }
        Ok(self.push(out, Op::MulChannel(x, a)))
    }

    /// Scales every channel at position `(i,j)` by `s[i,j]`
    /// (`s` is `1×h×w`, or `n×1×h×w` for a batch).
    pub fn mul_spatial(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (n, c, h, w) = tx.nchw()?;
        let expected: Vec<usize> = if tx.rank() == 3 {
            vec![1, h, w]
        } else {
            vec![n, 1, h, w]
        };
        if ts.shape() != expected.as_slice() {
            return Err(FarError::dim(format!(
                "mul_spatial: gate {:?} does not match map {:?}",
                ts.shape(),
                tx.shape()
            )));
        }
        let hw = h * w;
        let mut out = tx.clone();
        for b in 0..n {
            let gate = &ts.data()[b * hw..][..hw];
            for k in 0..c {
                let plane = &mut out.data_mut()[(b * c + k) * hw..][..hw];
                for (v, &g) in plane.iter_mut().zip(gate) {
                    *v *= g;
                }
            }
        }
        Ok(self.push(out, Op::MulSpatial(x, s)))
    }

    /// Softmax along the last axis of a `[k]` or `[n,k]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, k) = rows_of(tx, "softmax")?;
        let mut out = vec![T::zero(); tx.len()];
        kernels::softmax_rows(tx.data(), k, &mut out);
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, k) = rows_of(tx, "log_softmax")?;
        let mut out = vec![T::zero(); tx.len()];
        kernels::log_softmax_rows(tx.data(), k, &mut out);
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(FarError::dim("mean of empty tensor"));
        }
        let m = tx.sum() / T::lit(tx.len() as f64);
        Ok(self.push(Tensor::scalar(m), Op::MeanAll(x)))
    }

    /// Sum along the last axis: `[k] → []`, `[n,k] → [n]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, k) = rows_of(tx, "sum_last")?;
        let out: Vec<T> = tx.data().chunks(k).map(|r| r.iter().copied().sum()).collect();
        let shape = if tx.rank() == 1 { vec![] } else { vec![n] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SumLast(x)))
    }

    /// Mean over the rows of an `[n,c]` matrix, giving `[c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = match *tx.shape() {
            [n, c] if n > 0 => (n, c),
            _ => return Err(FarError::dim(format!("mean_rows on {:?}", tx.shape()))),
        };
        let mut out = vec![T::zero(); c];
        for row in tx.data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::lit(1.0 / n as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(vec![c], out)?;
        Ok(self.push(value, Op::MeanRows(x)))
    }

    /// Subtracts a `[c]` vector from every row of an `[n,c]` matrix.
    pub fn sub_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let c = match *tx.shape() {
            [_, c] => c,
            _ => return Err(FarError::dim(format!("sub_row on {:?}", tx.shape()))),
        };
        if tr.shape() != [c] {
            return Err(FarError::dim(format!(
                "sub_row: row {:?} does not match {:?}",
                tr.shape(),
                tx.shape()
            )));
        }
        let mut out = tx.clone();
        for r in out.data_mut().chunks_mut(c) {
            for (v, &m) in r.iter_mut().zip(tr.data()) {
                *v -= m;
            }
        }
        Ok(self.push(out, Op::SubRow(x, row)))
    }

    /// Euclidean norm of all entries. The gradient at the origin is taken
    /// to be zero.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let sq: T = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(sq.sqrt()), Op::L2Norm(x))
    }

    /// Picks `x[i, index[i]]` from an `[n,k]` matrix.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, k) = match *tx.shape() {
            [n, k] => (n, k),
            _ => return Err(FarError::dim(format!("gather on {:?}", tx.shape()))),
        };
        if index.len() != n {
            return Err(FarError::dim(format!(
                "gather: {} indices for {n} rows",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= k) {
            return Err(FarError::contract(format!(
                "gather index {bad} out of range for {k} columns"
            )));
        }
        let out: Vec<T> = index
            .iter()
            .enumerate()
            .map(|(r, &i)| tx.data()[r * k + i])
            .collect();
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let rows = *tx
            .shape()
            .first()
            .ok_or_else(|| FarError::dim("slice_rows on a scalar"))?;
        if start + len > rows {
            return Err(FarError::dim(format!(
                "slice_rows {start}..{} out of {rows}",
                start + len
            )));
        }
        let stride: usize = tx.shape()[1..].iter().product();
        let data = tx.data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = tx.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SliceRows { x, start }))
    }

    /// Gradients of a scalar `root` with respect to every recorded value.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        let needs = vec![true; self.nodes.len()];
        self.backward_masked(root, &needs)
    }

    /// Gradients of `root` restricted to the paths that reach `wrt`.
    ///
    /// Subgraphs that cannot influence any of `wrt` are not traversed; the
    /// gradients of the requested leaves are identical to [`Tape::backward`].
    pub fn backward_wrt(&self, root: Var, wrt: &[Var]) -> Result<Grads<T>> {
        let needs = self.needs_grad(wrt);
        self.backward_masked(root, &needs)
    }

    /// One reverse sweep carrying an independent cotangent per root.
    /// Equivalent to calling [`Tape::backward`] once per root.
    pub fn backward_multi(&self, roots: &[Var]) -> Result<Vec<Grads<T>>> {
        for &r in roots {
            self.check_root(r)?;
        }
        let needs = vec![true; self.nodes.len()];
        let mut chans: Vec<Vec<Option<Tensor<T>>>> = roots
            .iter()
            .map(|&r| {
                let mut slots = vec![None; self.nodes.len()];
                slots[r.0] = Some(Tensor::full(self.value(r).shape(), T::one()));
                slots
            })
            .collect();
        let last = roots.iter().map(|r| r.0).max().unwrap_or(0);
        for i in (0..self.nodes.len().min(last + 1)).rev() {
            for slots in chans.iter_mut() {
                if let Some(g) = slots[i].take() {
                    self.vjp(i, &g, &needs, slots)?;
                    slots[i] = Some(g);
                }
            }
        }
        Ok(chans.into_iter().map(|s| self.finish(s)).collect())
    }

    fn needs_grad(&self, wrt: &[Var]) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for v in wrt {
            needs[v.0] = true;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !needs[i] && node.op.operands().iter().any(|o| needs[o.0]) {
                needs[i] = true;
            }
        }
        needs
    }

    fn check_root(&self, root: Var) -> Result<()> {
        let shape = self
            .nodes
            .get(root.0)
            .ok_or_else(|| FarError::contract("backward root is not on this tape"))?
            .value
            .shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(FarError::contract(format!(
                "backward root must be scalar, got shape {shape:?}"
            )));
        }
        Ok(())
    }

    fn backward_masked(&self, root: Var, needs: &[bool]) -> Result<Grads<T>> {
        self.check_root(root)?;
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        slots[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            if !needs[i] {
                continue;
            }
            if let Some(g) = slots[i].take() {
                self.vjp(i, &g, needs, &mut slots)?;
                slots[i] = Some(g);
            }
        }
        Ok(self.finish(slots))
    }

    fn finish(&self, mut slots: Vec<Option<Tensor<T>>>) -> Grads<T> {
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && slots[i].is_none() {
                slots[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Grads { slots }
    }

    /// Pushes the contribution of node `i` (with upstream gradient `g`) into
    /// the slots of its operands.
    fn vjp(
        &self,
        i: usize,
        g: &Tensor<T>,
        needs: &[bool],
        slots: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| needs[v.0];
        let mut acc = |v: Var, t: Tensor<T>| -> Result<()> {
            match &mut slots[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let elementwise = |x: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
            let data = g.data().iter().zip(x.data()).map(|(&gv, &xv)| f(gv, xv)).collect();
            Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    acc(*a, g.clone())?;
                }
                if want(*b) {
                    acc(*b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc(*a, g.clone())?;
                }
                if want(*b) {
                    acc(*b, g.map(|v| -v))?;
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    acc(*a, elementwise(val(*b), &|gv, bv| gv * bv))?;
                }
                if want(*b) {
                    acc(*b, elementwise(val(*a), &|gv, av| gv * av))?;
                }
            }
            Op::Scale(a, s) => {
                if want(*a) {
                    let sv = T::lit(*s);
                    acc(*a, g.map(|v| v * sv))?;
                }
            }
            Op::AddScalar(a) => {
                if want(*a) {
                    acc(*a, g.clone())?;
                }
            }
            Op::Relu(a) => {
                if want(*a) {
                    acc(
                        *a,
                        elementwise(val(*a), &|gv, xv| if xv > T::zero() { gv } else { T::zero() }),
                    )?;
                }
            }
            Op::Sigmoid(a) => {
                if want(*a) {
                    acc(*a, elementwise(out, &|gv, y| gv * y * (T::one() - y)))?;
                }
            }
            Op::Softplus(a) => {
                if want(*a) {
                    acc(*a, elementwise(val(*a), &|gv, xv| gv * kernels::sigmoid(xv)))?;
                }
            }
            Op::Log(a) => {
                if want(*a) {
                    acc(*a, elementwise(val(*a), &|gv, xv| gv / xv))?;
                }
            }
            Op::Exp(a) => {
                if want(*a) {
                    acc(*a, elementwise(out, &|gv, y| gv * y))?;
                }
            }
            Op::Abs(a) => {
                if want(*a) {
                    acc(
                        *a,
                        elementwise(val(*a), &|gv, xv| {
                            if xv > T::zero() {
                                gv
                            } else if xv < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        }),
                    )?;
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if want(*a) {
                    let mut da = Tensor::zeros(ta.shape());
                    kernels::matmul_grad_a(g.data(), tb.data(), m, k, n, da.data_mut());
                    acc(*a, da)?;
                }
                if want(*b) {
                    let mut db = Tensor::zeros(tb.shape());
                    kernels::matmul_grad_b(ta.data(), g.data(), m, k, n, db.data_mut());
                    acc(*b, db)?;
                }
            }
            Op::AddBias(a, b) => {
                if want(*a) {
                    acc(*a, g.clone())?;
                }
                if want(*b) {
                    let m = val(*b).len();
                    let mut db = Tensor::zeros(&[m]);
                    for row in g.data().chunks(m) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, db)?;
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            } => {
                let (tx, tk) = (val(*x), val(*kernel));
                let mut dx = want(*x).then(|| Tensor::zeros(tx.shape()));
                let mut dk = want(*kernel).then(|| Tensor::zeros(tk.shape()));
                let mut db = bias
                    .filter(|b| want(*b))
                    .map(|b| Tensor::zeros(val(b).shape()));
                kernels::conv2d_backward(
                    *geom,
                    tx.data(),
                    tk.data(),
                    g.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dk.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = dx {
                    acc(*x, t)?;
                }
                if let Some(t) = dk {
                    acc(*kernel, t)?;
                }
                if let (Some(b), Some(t)) = (bias, db) {
                    acc(*b, t)?;
                }
            }
            Op::AvgPool2(a) => {
                if want(*a) {
                    let ta = val(*a);
                    let (n, c, h, w) = ta.nchw()?;
                    let (ho, wo) = (h / 2, w / 2);
                    let quarter = T::lit(0.25);
                    let mut d = Tensor::zeros(ta.shape());
                    for p in 0..n * c {
                        let gp = &g.data()[p * ho * wo..][..ho * wo];
                        let dp = &mut d.data_mut()[p * h * w..][..h * w];
                        for y in 0..ho {
                            for xx in 0..wo {
                                let v = gp[y * wo + xx] * quarter;
                                let i0 = 2 * y * w + 2 * xx;
                                dp[i0] += v;
                                dp[i0 + 1] += v;
                                dp[i0 + w] += v;
                                dp[i0 + w + 1] += v;
                            }
                        }
                    }
                    acc(*a, d)?;
                }
            }
            Op::GlobalAvgPool(a) => {
                if want(*a) {
                    let ta = val(*a);
                    let (_, _, h, w) = ta.nchw()?;
                    let hw = h * w;
                    let inv = T::lit(1.0 / hw as f64);
                    let mut d = Tensor::zeros(ta.shape());
                    for (plane, &gv) in d.data_mut().chunks_mut(hw).zip(g.data()) {
                        plane.iter_mut().for_each(|v| *v = gv * inv);
                    }
                    acc(*a, d)?;
                }
            }
            Op::ChannelPool { x, argmax } => {
                if want(*x) {
                    let tx = val(*x);
                    let (n, c, h, w) = tx.nchw()?;
                    let hw = h * w;
                    let inv_c = T::lit(1.0 / c as f64);
                    let mut d = Tensor::zeros(tx.shape());
                    let dd = d.data_mut();
                    for b in 0..n {
                        for p in 0..hw {
                            let g_mean = g.data()[(b * 2) * hw + p] * inv_c;
                            let g_max = g.data()[(b * 2 + 1) * hw + p];
                            for k in 0..c {
                                dd[(b * c + k) * hw + p] += g_mean;
                            }
                            dd[(b * c + argmax[b * hw + p]) * hw + p] += g_max;
                        }
                    }
                    acc(*x, d)?;
                }
            }
            Op::MulChannel(x, a) => {
                let (tx, ta) = (val(*x), val(*a));
                let (_, _, h, w) = tx.nchw()?;
                let hw = h * w;
                if want(*x) {
                    let mut d = g.clone();
                    for (plane, &gate) in d.data_mut().chunks_mut(hw).zip(ta.data()) {
                        plane.iter_mut().for_each(|v| *v *= gate);
                    }
                    acc(*x, d)?;
                }
                if want(*a) {
                    let data: Vec<T> = g
                        .data()
                        .chunks(hw)
                        .zip(tx.data().chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&u, &v)| u * v).sum())
                        .collect();
                    acc(*a, Tensor::new(ta.shape().to_vec(), data)?)?;
                }
            }
            Op::MulSpatial(x, s) => {
                let (tx, ts) = (val(*x), val(*s));
                let (n, c, h, w) = tx.nchw()?;
                let hw = h * w;
                if want(*x) {
                    let mut d = g.clone();
                    for b in 0..n {
                        let gate = &ts.data()[b * hw..][..hw];
                        for k in 0..c {
                            let plane = &mut d.data_mut()[(b * c + k) * hw..][..hw];
                            for (v, &sv) in plane.iter_mut().zip(gate) {
                                *v *= sv;
                            }
                        }
                    }
                    acc(*x, d)?;
                }
                if want(*s) {
                    let mut d = Tensor::zeros(ts.shape());
                    for b in 0..n {
                        for k in 0..c {
                            let base = (b * c + k) * hw;
                            let gp = &g.data()[base..base + hw];
                            let xp = &tx.data()[base..base + hw];
                            let dp = &mut d.data_mut()[b * hw..][..hw];
                            for ((dv, &gv), &xv) in dp.iter_mut().zip(gp).zip(xp) {
                                *dv += gv * xv;
                            }
                        }
                    }
                    acc(*s, d)?;
                }
            }
            Op::Softmax(a) => {
                if want(*a) {
                    let (_, k) = rows_of(out, "softmax")?;
                    let mut d = Tensor::zeros(out.shape());
                    for ((dr, yr), gr) in d
                        .data_mut()
                        .chunks_mut(k)
                        .zip(out.data().chunks(k))
                        .zip(g.data().chunks(k))
                    {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                        for ((dv, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv = y * (gv - dot);
                        }
                    }
                    acc(*a, d)?;
                }
            }
            Op::LogSoftmax(a) => {
                if want(*a) {
                    let (_, k) = rows_of(out, "log_softmax")?;
                    let mut d = Tensor::zeros(out.shape());
                    for ((dr, yr), gr) in d
                        .data_mut()
                        .chunks_mut(k)
                        .zip(out.data().chunks(k))
                        .zip(g.data().chunks(k))
                    {
                        let total: T = gr.iter().copied().sum();
                        for ((dv, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv = gv - y.exp() * total;
                        }
                    }
                    acc(*a, d)?;
                }
            }
            Op::SumAll(a) => {
                if want(*a) {
                    let gv = g.data()[0];
                    acc(*a, Tensor::full(val(*a).shape(), gv))?;
                }
            }
            Op::MeanAll(a) => {
                if want(*a) {
                    let ta = val(*a);
                    let gv = g.data()[0] / T::lit(ta.len() as f64);
                    acc(*a, Tensor::full(ta.shape(), gv))?;
                }
            }
            Op::SumLast(a) => {
                if want(*a) {
                    let ta = val(*a);
                    let (_, k) = rows_of(ta, "sum_last")?;
                    let mut d = Tensor::zeros(ta.shape());
                    for (row, &gv) in d.data_mut().chunks_mut(k).zip(g.data()) {
                        row.iter_mut().for_each(|v| *v = gv);
                    }
                    acc(*a, d)?;
                }
            }
            Op::MeanRows(a) => {
                if want(*a) {
                    let ta = val(*a);
                    let (n, c) = (ta.shape()[0], ta.shape()[1]);
                    let inv = T::lit(1.0 / n as f64);
                    let mut d = Tensor::zeros(ta.shape());
                    for row in d.data_mut().chunks_mut(c) {
                        for (v, &gv) in row.iter_mut().zip(g.data()) {
                            *v = gv * inv;
                        }
                    }
                    acc(*a, d)?;
                }
            }
            Op::SubRow(x, r) => {
                if want(*x) {
                    acc(*x, g.clone())?;
                }
                if want(*r) {
                    let c = val(*r).len();
                    let mut d = Tensor::zeros(&[c]);
                    for row in g.data().chunks(c) {
                        for (v, &gv) in d.data_mut().iter_mut().zip(row) {
                            *v -= gv;
                        }
                    }
                    acc(*r, d)?;
                }
            }
            Op::L2Norm(a) => {
                if want(*a) {
                    let norm = out.data()[0];
                    let ta = val(*a);
                    let d = if norm > T::zero() {
                        let scale = g.data()[0] / norm;
                        ta.map(|v| v * scale)
                    } else {
                        Tensor::zeros(ta.shape())
                    };
                    acc(*a, d)?;
                }
            }
            Op::Gather { x, index } => {
                if want(*x) {
                    let tx = val(*x);
                    let k = tx.shape()[1];
                    let mut d = Tensor::zeros(tx.shape());
                    for (r, (&i, &gv)) in index.iter().zip(g.data()).enumerate() {
                        d.data_mut()[r * k + i] += gv;
                    }
                    acc(*x, d)?;
                }
            }
            Op::SliceRows { x, start } => {
                if want(*x) {
                    let tx = val(*x);
                    let stride: usize = tx.shape()[1..].iter().product();
                    let mut d = Tensor::zeros(tx.shape());
                    d.data_mut()[start * stride..start * stride + g.len()].copy_from_slice(g.data());
                    acc(*x, d)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let mut tape = Tape::<f32>::new();
        let eye = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let z = tape.leaf(Tensor::zeros(&[2, 2]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let q = tape.matmul(m, z).unwrap();
        assert!(tape.value(q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(FarError::Dimension(_))));
    }

    #[test]
    fn identity_gradient_is_one() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::scalar(4.0));
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum(sq);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(FarError::Contract(_))));
    }

    #[test]
    fn unreachable_leaves_get_zero_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::from_vec(vec![5.0, 6.0, 7.0]));
        let y = tape.sum(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(FarError::Domain(_))));
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::from_vec(vec![0.0, 50.0]));
        let s = tape.sigmoid(z);
        let sp = tape.softplus(z);
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert!((tape.value(sp).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        // ln(1 + e^50) = 50 + ln(1 + e^-50) ≈ 50 + 1.9287e-22
        assert!((tape.value(sp).data()[1] - 50.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(vec![0.3; 4]));
        let b = tape.leaf(Tensor::from_vec(vec![0.0, -1e9]));
        let c = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let (pa, pb, pc) = (
            tape.softmax(a).unwrap(),
            tape.softmax(b).unwrap(),
            tape.softmax(c).unwrap(),
        );
        assert!(tape.value(pa).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert!((tape.value(pb).data()[0] - 1.0).abs() < 1e-12);
        assert!(tape.value(pb).data()[1].abs() < 1e-12);
        // exp(i)/Σexp(j), evaluated independently
        let z: f64 = (1f64).exp() + (2f64).exp() + (3f64).exp();
        let expect = [(1f64).exp() / z, (2f64).exp() / z, (3f64).exp() / z];
        for (v, e) in tape.value(pc).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-12);
        }
        assert!((expect[0] - 0.09003).abs() < 1e-5);
        assert!((expect[1] - 0.24473).abs() < 1e-5);
        assert!((expect[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn l2_norm_gradient_is_zero_at_origin() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        let n = tape.l2_norm(x);
        let g = tape.backward(n).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn backward_wrt_matches_full_backward_on_requested_leaves() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::from_vec(vec![0.5, -1.0, 2.0]));
        let b = tape.leaf(Tensor::from_vec(vec![1.5, 0.25, -0.75]));
        let ab = tape.mul(a, b).unwrap();
        let s = tape.sigmoid(ab);
        let y = tape.sum(s);
        let full = tape.backward(y).unwrap();
        let part = tape.backward_wrt(y, &[b]).unwrap();
        assert_eq!(full.get(b), part.get(b));
        assert_eq!(part.get(a).unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let d = tape.detach(x);
        let p = tape.mul(x, d).unwrap();
        let y = tape.sum(p);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }
}
