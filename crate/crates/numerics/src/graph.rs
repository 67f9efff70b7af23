//! Define-by-run gradient tape.
//!
//! Every op evaluates eagerly and appends a node; node ids are therefore already
//! a topological order and backward is a single reverse sweep.

use crate::gemm::{gemm, MatMut, MatRef};
use crate::tensor::numel;
use crate::{NumericsError, Result, Scalar, Tensor};

/// Layer-norm epsilon shared by every normalization in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Multiply-accumulate operations executed on a tape, split by kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCount {
    /// Products against weight matrices (`linear` and `matmul`).
    pub projection: u64,
    /// Attention score and attention-weighted value products.
    pub attention: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.projection + self.attention
    }
}

type Deriv<T> = Box<dyn Fn(T) -> T>;

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Expand {
        x: Var,
        axis: usize,
        count: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Silu(Var),
    Tanh(Var),
    Map {
        x: Var,
        deriv: Deriv<T>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A gradient tape plus the values it recorded.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    macs: MacCount,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> NumericsError {
    NumericsError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let x3 = x * x * x;
    let t = (T::from_f64(GELU_C) * (x + T::from_f64(GELU_A) * x3)).tanh();
    T::from_f64(0.5) * x * (T::ONE + t)
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::from_f64(0.5);
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + T::from_f64(3.0) * a * x * x)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn softmax_rows<T: Scalar>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row
            .iter()
            .copied()
            .fold(T::neg_infinity(), |m, x| if x > m { x } else { m });
        let mut sum = T::ZERO;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            macs: MacCount::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn macs(&self) -> MacCount {
        self.macs
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
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

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Clears all gradients so backward may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    // ---------------------------------------------------------------- products

    /// `x[..., in] @ w[in, out] (+ b[out])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(shape_err("linear", &xs, &ws));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("linear bias", self.shape(b), &[dout]));
            }
        }
        let rows = numel(&xs) / din;
        let mut out = vec![T::ZERO; rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::ONE } else { T::ZERO };
        gemm(
            T::ONE,
            MatRef::dense(self.value(x).data(), 0, rows, din),
            MatRef::dense(self.value(w).data(), 0, din, dout),
            beta,
            MatMut::dense(&mut out, 0, rows, dout),
        );
        self.macs.projection += (rows * din * dout) as u64;
        let mut os = xs;
        *os.last_mut().unwrap() = dout;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(os, out)?, Op::Linear { x, w, b }, rg))
    }

    /// Plain 2-D product `a[m, k] @ b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asz, bsz) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if asz.len() != 2 || bsz.len() != 2 || asz[1] != bsz[0] {
            return Err(shape_err("matmul", &asz, &bsz));
        }
        let (m, k, n) = (asz[0], asz[1], bsz[1]);
        let mut out = vec![T::ZERO; m * n];
        gemm(
            T::ONE,
            MatRef::dense(self.value(a).data(), 0, m, k),
            MatRef::dense(self.value(b).data(), 0, k, n),
            T::ZERO,
            MatMut::dense(&mut out, 0, m, n),
        );
        self.macs.projection += (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    // ------------------------------------------------------------ elementwise

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        va.zip_map(vb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn map(
        &mut self,
        a: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(
            out,
            Op::Map {
                x: a,
                deriv: Box::new(df),
            },
            rg,
        )
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / T::from_f64(v.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean of squared differences, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    // ---------------------------------------------------------- normalization

    /// Normalizes over the last axis with optional affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().ok_or_else(|| invalid("layer_norm", &xs, "rank 0"))?;
        for p in gamma.iter().chain(beta.iter()) {
            if self.shape(*p) != [n] {
                return Err(shape_err("layer_norm affine", self.shape(*p), &[n]));
            }
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_n = T::from_f64(1.0 / n as f64);
        let rows = numel(&xs) / n;
        let data = self.value(x).data();
        let mut xhat = vec![T::ZERO; data.len()];
        let mut rstd = vec![T::ZERO; rows];
        for r in 0..rows {
            let row = &data[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let g = self.value(g).data();
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(g).for_each(|(o, &s)| *o *= s);
            }
        }
        if let Some(b) = beta {
            let b = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(b).for_each(|(o, &s)| *o += s);
            }
        }
        let mut deps = vec![x];
        deps.extend(gamma);
        deps.extend(beta);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().ok_or_else(|| invalid("softmax", &xs, "rank 0"))?;
        let mut data = self.value(x).data().to_vec();
        softmax_rows(&mut data, n);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(xs, data)?, Op::Softmax(x), rg))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch, tq, h]`, `k` and `v` are `[batch, tk, h]`. `key_mask`, when
    /// given, has `batch * tk` entries and `false` removes a key. A query with no
    /// visible key produces a zero row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let (qs, ks, vs) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(shape_err("attention", &qs, &ks));
        }
        let (batch, tq, h) = (qs[0], qs[1], qs[2]);
        let tk = ks[1];
        if heads == 0 || h % heads != 0 {
            return Err(invalid("attention", &qs, format!("{h} not divisible by {heads} heads")));
        }
        if let Some(m) = &key_mask {
            if m.len() != batch * tk {
                return Err(shape_err("attention mask", &[m.len()], &[batch, tk]));
            }
        }
        let dh = h / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::ZERO; batch * heads * tq * tk];
        let mut out = vec![T::ZERO; batch * tq * h];
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        for b in 0..batch {
            let mask = key_mask.as_ref().map(|m| &m[b * tk..(b + 1) * tk]);
            for hd in 0..heads {
                let p_off = (b * heads + hd) * tq * tk;
                let qv = MatRef {
                    data: qd,
                    offset: b * tq * h + hd * dh,
                    rows: tq,
                    cols: dh,
                    row_stride: h,
                    col_stride: 1,
                };
                let kt = MatRef {
                    data: kd,
                    offset: b * tk * h + hd * dh,
                    rows: tk,
                    cols: dh,
                    row_stride: h,
                    col_stride: 1,
                }
                .t();
                gemm(scale, qv, kt, T::ZERO, MatMut::dense(&mut probs, p_off, tq, tk));
                for row in probs[p_off..p_off + tq * tk].chunks_mut(tk) {
                    masked_softmax_row(row, mask);
                }
                let vv = MatRef {
                    data: vd,
                    offset: b * tk * h + hd * dh,
                    rows: tk,
                    cols: dh,
                    row_stride: h,
                    col_stride: 1,
                };
                gemm(
                    T::ONE,
                    MatRef::dense(&probs, p_off, tq, tk),
                    vv,
                    T::ZERO,
                    MatMut {
                        data: &mut out,
                        offset: b * tq * h + hd * dh,
                        rows: tq,
                        cols: dh,
                        row_stride: h,
                        col_stride: 1,
                    },
                );
            }
        }
        self.macs.attention += (2 * batch * tq * tk * h) as u64;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![batch, tq, h], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        let valid = perm.len() == xs.len()
            && perm.iter().all(|&p| p < xs.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(invalid("permute", &xs, format!("bad permutation {perm:?}")));
        }
        let (os, data) = permute_data(self.value(x).data(), &xs, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(os, data)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| invalid("concat", &[], "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", &base, format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut os = base.clone();
        os[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(numel(&os));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(os, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// The slice `start..start + len` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(invalid(
                "narrow",
                &xs,
                format!("range {start}..{} on axis {axis}", start + len),
            ));
        }
        let (outer, dim, inner) = split_axis(&xs, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut os = xs;
        os[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(os, out)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || sizes.iter().sum::<usize>() != xs[axis] {
            return Err(invalid("split", &xs, format!("sizes {sizes:?} on axis {axis}")));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    /// Inserts a new axis of length `count` at `axis`, repeating the input.
    pub fn expand(&mut self, x: Var, axis: usize, count: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis > xs.len() {
            return Err(invalid("expand", &xs, format!("axis {axis} out of range")));
        }
        let outer = numel(&xs[..axis]);
        let inner = numel(&xs[axis..]);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            for _ in 0..count {
                out.extend_from_slice(&data[o * inner..(o + 1) * inner]);
            }
        }
        let mut os = xs;
        os.insert(axis, count);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(os, out)?, Op::Expand { x, axis, count }, rg))
    }

    /// Row lookup: `table[vocab, dim]` indexed by `ids`, giving `[ids.len(), dim]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(invalid("gather_rows", &ts, "table must be 2-D"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(invalid("gather_rows", &ts, format!("id {bad} out of range")));
        }
        let dim = ts[1];
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&data[i * dim..(i + 1) * dim]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), dim], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    // -------------------------------------------------------------- backward

    /// Back-propagates from a one-element `loss`.
    ///
    /// Visits each node once in reverse creation order. Running it twice
    /// without [`reset_grads`](Self::reset_grads) is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(NumericsError::UnknownVar(loss.0));
        }
        if self.backward_done {
            return Err(NumericsError::BackwardAlreadyRun);
        }
        let ls = self.shape(loss).to_vec();
        if numel(&ls) != 1 {
            return Err(NumericsError::NonScalarLoss(ls));
        }
        self.backward_done = true;
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(ls, T::ONE));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            let contributions = self.backward_node(id, &g)?;
            self.grads[id] = Some(g);
            for (var, grad) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut self.grads[var.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[id];
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = numel(xs) / din;
                if self.requires_grad(*x) {
                    let mut dx = vec![T::ZERO; rows * din];
                    gemm(
                        T::ONE,
                        MatRef::dense(gd, 0, rows, dout),
                        MatRef::dense_t(self.value(*w).data(), 0, din, dout),
                        T::ZERO,
                        MatMut::dense(&mut dx, 0, rows, din),
                    );
                    out.push((*x, Tensor::new(xs.to_vec(), dx)?));
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![T::ZERO; din * dout];
                    gemm(
                        T::ONE,
                        MatRef::dense_t(self.value(*x).data(), 0, rows, din),
                        MatRef::dense(gd, 0, rows, dout),
                        T::ZERO,
                        MatMut::dense(&mut dw, 0, din, dout),
                    );
                    out.push((*w, Tensor::new(ws.to_vec(), dw)?));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = vec![T::ZERO; dout];
                        for row in gd.chunks(dout) {
                            db.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                        }
                        out.push((*b, Tensor::new(vec![dout], db)?));
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (asz, bsz) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (asz[0], asz[1], bsz[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![T::ZERO; m * k];
                    gemm(
                        T::ONE,
                        MatRef::dense(gd, 0, m, n),
                        MatRef::dense_t(self.value(*b).data(), 0, k, n),
                        T::ZERO,
                        MatMut::dense(&mut da, 0, m, k),
                    );
                    out.push((*a, Tensor::new(asz.to_vec(), da)?));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::ZERO; k * n];
                    gemm(
                        T::ONE,
                        MatRef::dense_t(self.value(*a).data(), 0, m, k),
                        MatRef::dense(gd, 0, m, n),
                        T::ZERO,
                        MatMut::dense(&mut db, 0, k, n),
                    );
                    out.push((*b, Tensor::new(bsz.to_vec(), db)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                out.push((*a, g.zip_map(self.value(*b), |x, y| x * y)?));
                out.push((*b, g.zip_map(self.value(*a), |x, y| x * y)?));
            }
            Op::Scale(a, s) => out.push((*a, g.map(|x| x * *s))),
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::Gelu(a) => out.push((*a, g.zip_map(self.value(*a), |d, x| d * gelu_grad(x))?)),
            Op::Silu(a) => out.push((
                *a,
                g.zip_map(self.value(*a), |d, x| {
                    let s = sigmoid(x);
                    d * s * (T::ONE + x * (T::ONE - s))
                })?,
            )),
            Op::Tanh(a) => out.push((*a, g.zip_map(&node.value, |d, y| d * (T::ONE - y * y))?)),
            Op::Map { x, deriv } => out.push((*x, g.zip_map(self.value(*x), |d, v| d * deriv(v))?)),
            Op::Sum(a) => {
                let s = gd[0];
                out.push((*a, Tensor::full(self.shape(*a).to_vec(), s)));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let s = gd[0] / T::from_f64(n as f64);
                out.push((*a, Tensor::full(self.shape(*a).to_vec(), s)));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let xs = self.shape(*x);
                let n = *xs.last().unwrap();
                let rows = xhat.len() / n;
                let gam = gamma.map(|v| self.value(v).data());
                if self.requires_grad(*x) {
                    let inv_n = T::from_f64(1.0 / n as f64);
                    let mut dx = vec![T::ZERO; xhat.len()];
                    let mut dyh = vec![T::ZERO; n];
                    for r in 0..rows {
                        let gr = &gd[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dyh[j] = gam.map_or(gr[j], |gm| gr[j] * gm[j]);
                        }
                        let mean_dy = dyh.iter().copied().sum::<T>() * inv_n;
                        let mean_dyx =
                            dyh.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                        for j in 0..n {
                            dx[r * n + j] = rstd[r] * (dyh[j] - mean_dy - xr[j] * mean_dyx);
                        }
                    }
                    out.push((*x, Tensor::new(xs.to_vec(), dx)?));
                }
                if let Some(gm) = gamma {
                    let mut dg = vec![T::ZERO; n];
                    for (gr, xr) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    out.push((*gm, Tensor::new(vec![n], dg)?));
                }
                if let Some(bt) = beta {
                    let mut db = vec![T::ZERO; n];
                    for gr in gd.chunks(n) {
                        db.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                    }
                    out.push((*bt, Tensor::new(vec![n], db)?));
                }
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let mut dx = vec![T::ZERO; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, Tensor::new(node.value.shape().to_vec(), dx)?));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                ..
            } => {
                let (qs, ks) = (self.shape(*q), self.shape(*k));
                let (batch, tq, h, tk) = (qs[0], qs[1], qs[2], ks[1]);
                let dh = h / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![T::ZERO; qd.len()];
                let mut dk = vec![T::ZERO; kd.len()];
                let mut dv = vec![T::ZERO; vd.len()];
                let mut dp = vec![T::ZERO; tq * tk];
                let strided = |data, offset, rows| head_view(data, offset, rows, dh, h);
                for b in 0..batch {
                    for hd in 0..*heads {
                        let p_off = (b * heads + hd) * tq * tk;
                        let q_off = b * tq * h + hd * dh;
                        let k_off = b * tk * h + hd * dh;
                        let p = MatRef::dense(probs, p_off, tq, tk);
                        let go = strided(gd, q_off, tq);
                        // dV += P^T dO
                        gemm(
                            T::ONE,
                            p.t(),
                            go,
                            T::ONE,
                            MatMut {
                                data: &mut dv,
                                offset: k_off,
                                rows: tk,
                                cols: dh,
                                row_stride: h,
                                col_stride: 1,
                            },
                        );
                        // dP = dO V^T
                        gemm(
                            T::ONE,
                            go,
                            strided(vd, k_off, tk).t(),
                            T::ZERO,
                            MatMut::dense(&mut dp, 0, tq, tk),
                        );
                        let pr = &probs[p_off..p_off + tq * tk];
                        for (drow, prow) in dp.chunks_mut(tk).zip(pr.chunks(tk)) {
                            let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                            for (d, &pv) in drow.iter_mut().zip(prow) {
                                *d = pv * (*d - dot) * scale;
                            }
                        }
                        // dQ += dS K, dK += dS^T Q
                        gemm(
                            T::ONE,
                            MatRef::dense(&dp, 0, tq, tk),
                            strided(kd, k_off, tk),
                            T::ONE,
                            MatMut {
                                data: &mut dq,
                                offset: q_off,
                                rows: tq,
                                cols: dh,
                                row_stride: h,
                                col_stride: 1,
                            },
                        );
                        gemm(
                            T::ONE,
                            MatRef::dense(&dp, 0, tq, tk).t(),
                            strided(qd, q_off, tq),
                            T::ONE,
                            MatMut {
                                data: &mut dk,
                                offset: k_off,
                                rows: tk,
                                cols: dh,
                                row_stride: h,
                                col_stride: 1,
                            },
                        );
                    }
                }
                out.push((*q, Tensor::new(qs.to_vec(), dq)?));
                out.push((*k, Tensor::new(ks.to_vec(), dk)?));
                out.push((*v, Tensor::new(ks.to_vec(), dv)?));
            }
            Op::Reshape(x) => out.push((*x, g.clone().reshape(self.shape(*x).to_vec())?)),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (s, d) = permute_data(gd, g.shape(), &inv);
                out.push((*x, Tensor::new(s, d)?));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut start = 0;
                for &v in inputs {
                    let vs = self.shape(v);
                    let len = vs[*axis];
                    let mut d = Vec::with_capacity(numel(vs));
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        d.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    out.push((v, Tensor::new(vs.to_vec(), d)?));
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, dim, inner) = split_axis(xs, *axis);
                let len = g.shape()[*axis];
                let mut d = vec![T::ZERO; numel(xs)];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * dim + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                out.push((*x, Tensor::new(xs.to_vec(), d)?));
            }
            Op::Expand { x, axis, count } => {
                let xs = self.shape(*x);
                let outer = numel(&xs[..*axis]);
                let inner = numel(&xs[*axis..]);
                let mut d = vec![T::ZERO; outer * inner];
                for o in 0..outer {
                    for c in 0..*count {
                        let src = (o * count + c) * inner;
                        d[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(&gd[src..src + inner])
                            .for_each(|(a, &b)| *a += b);
                    }
                }
                out.push((*x, Tensor::new(xs.to_vec(), d)?));
            }
            Op::Gather { table, ids } => {
                let ts = self.shape(*table);
                let dim = ts[1];
                let mut d = vec![T::ZERO; numel(ts)];
                for (r, &i) in ids.iter().enumerate() {
                    d[i * dim..(i + 1) * dim]
                        .iter_mut()
                        .zip(&gd[r * dim..(r + 1) * dim])
                        .for_each(|(a, &b)| *a += b);
                }
                out.push((*table, Tensor::new(ts.to_vec(), d)?));
            }
        }
        Ok(out)
    }
}

/// One head's `[rows, dh]` slice of a `[.., h]` token matrix.
fn head_view<T>(data: &[T], offset: usize, rows: usize, dh: usize, h: usize) -> MatRef<'_, T> {
    MatRef {
        data,
        offset,
        rows,
        cols: dh,
        row_stride: h,
        col_stride: 1,
    }
}

fn masked_softmax_row<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) {
    let visible = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if visible(j) && x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::ZERO);
        return;
    }
    let mut sum = T::ZERO;
    for (j, x) in row.iter_mut().enumerate() {
        *x = if visible(j) { (*x - max).exp() } else { T::ZERO };
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}
