//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to a [`Graph`]; nodes are stored in
//! execution order so the tape is topologically sorted by construction.
//! [`Graph::backward`] walks the tape once in reverse.

use super::kernels::{gemm, Layout};
use super::tensor::{numel, split_axis, Tensor};
use crate::error::{shape_err, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    BroadcastTo(Var),
    /// Keeps the tanh values of the forward pass.
    Gelu { x: Var, t: Vec<f64> },
    Sqrt(Var),
    /// Elementwise map with derivative values captured at forward time.
    Map { x: Var, deriv: Vec<f64> },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, index: Vec<Vec<usize>> },
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    RmseRows { a: Var, b: Var, weight: Option<Vec<f64>> },
    PearsonRows { a: Var, b: Var, weight: Option<Vec<f64>> },
    BceWithLogits { logits: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One graph per forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not require
    /// gradients or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_into_with(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let d = dst.get_or_insert_with(|| vec![0.0; len]);
    f(d);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// tanh through a single `exp`; absolute error stays near machine epsilon,
/// which is all the GELU gate needs.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

fn gelu_tanh(x: f64) -> f64 {
    fast_tanh(GELU_C * (x + GELU_K * x * x * x))
}

fn gelu_deriv(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul of {:?} and {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            Layout::row(k),
            self.data(b),
            Layout::row(n),
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Affine map over the last axis: `x[..., k] @ w[k, n] + bias[n]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        let k = *sx.last().ok_or_else(|| shape_err!("linear on scalar input"))?;
        if sw.len() != 2 || sw[0] != k {
            return Err(shape_err!("linear of {:?} with weight {:?}", sx, sw));
        }
        let n = sw[1];
        if let Some(b) = bias {
            if self.shape(b) != [n] {
                return Err(shape_err!("linear bias {:?} for output width {}", self.shape(b), n));
            }
        }
        let rows = numel(&sx) / k.max(1);
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, self.data(x), Layout::row(k), self.data(w), Layout::row(n), &mut out, false);
        if let Some(b) = bias {
            let bd = self.data(b);
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bd).for_each(|(o, b)| *o += b);
            }
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Linear { x, w, b: bias }, rg))
    }

    /// Batched product `a[B,m,k] @ b[B,k,n]`, or `a @ b^T` with `b[B,n,k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err!(
                "batch_matmul of {:?} and {:?} (trans_b={})",
                sa,
                sb,
                trans_b
            ));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        let lb = if trans_b {
            Layout::trans(k)
        } else {
            Layout::row(n)
        };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                Layout::row(k),
                &db[i * k * n..(i + 1) * k * n],
                lb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{} of {:?} and {:?}",
                name,
                self.shape(a),
                self.shape(b)
            ));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok((t, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Scale(x, c), rg))
    }

    /// Tiles `x` over leading axes; `x.shape` must be a suffix of `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() > shape.len() || shape[shape.len() - sx.len()..] != *sx {
            return Err(shape_err!("cannot broadcast {:?} to {:?}", sx, shape));
        }
        let src = self.data(x);
        let reps = numel(shape) / src.len().max(1);
        let mut data = Vec::with_capacity(numel(shape));
        for _ in 0..reps {
            data.extend_from_slice(src);
        }
        let t = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::BroadcastTo(x), rg))
    }

    /// `a + b` with `b` broadcast over the leading axes of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            return self.add(a, b);
        }
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast_to(b, &shape)?;
        self.add(a, bb)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let src = self.data(x);
        let t: Vec<f64> = src.iter().map(|&v| gelu_tanh(v)).collect();
        let data = src.iter().zip(&t).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gelu { x, t }, rg))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v.sqrt()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Sqrt(x), rg))
    }

    /// Elementwise `f` whose derivative is supplied by the caller as `df`.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Result<Var> {
        let src = self.data(x);
        let data = src.iter().map(|&v| f(v)).collect();
        let deriv = src.iter().map(|&v| df(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Map { x, deriv }, rg))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("softmax axis {} out of range for {:?}", axis, shape));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mut mx = f64::NEG_INFINITY;
                for i in 0..len {
                    mx = mx.max(src[at(i)]);
                }
                let mut s = 0.0;
                for i in 0..len {
                    let e = (src[at(i)] - mx).exp();
                    out[at(i)] = e;
                    s += e;
                }
                for i in 0..len {
                    out[at(i)] /= s;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalisation over the last axis followed by `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [w] || self.shape(bias) != [w] {
            return Err(shape_err!(
                "layer_norm gain {:?} / bias {:?} do not match width {} of {:?}",
                self.shape(gain),
                self.shape(bias),
                w,
                shape
            ));
        }
        let rows = numel(&shape) / w.max(1);
        let (src, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..w {
                let h = (row[c] - mean) * rs;
                xhat[r * w + c] = h;
                out[r * w + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {:?} for {:?}", perm, shape));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.data(x), &shape, perm);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(shape_err!("transpose needs >= 2 axes, got {:?}", self.shape(x)));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {} out of range for {:?}", axis, base));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat of {:?} with {:?} along axis {}", base, s, axis));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.data(p);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(shape_err!(
                "slice {}..{} on axis {} of {:?}",
                start,
                end,
                axis,
                shape
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let d = self.data(x);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Row gather on `x[B, T, D]`: `out[b, i] = x[b, index[b][i]]`.
    /// All index lists must have equal length.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || index.len() != shape[0] {
            return Err(shape_err!(
                "gather_rows needs [B,T,D] with B={} index lists, got {:?}",
                index.len(),
                shape
            ));
        }
        let (t, dim) = (shape[1], shape[2]);
        let rows = index.first().map_or(0, Vec::len);
        if index.iter().any(|ix| ix.len() != rows || ix.iter().any(|&i| i >= t)) {
            return Err(shape_err!("gather_rows index out of range or ragged for {:?}", shape));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(shape[0] * rows * dim);
        for (b, ix) in index.iter().enumerate() {
            for &i in ix {
                let at = (b * t + i) * dim;
                out.extend_from_slice(&d[at..at + dim]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![shape[0], rows, dim], out)?,
            Op::GatherRows { x, index },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        if d.is_empty() {
            return Err(shape_err!("mean of empty tensor"));
        }
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err!("mean_axis {} on {:?}", axis, shape));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let row = &d[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MeanAxis { x, axis }, rg))
    }

    fn check_rows(&self, a: Var, b: Var, weight: Option<&[f64]>, name: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || sa.is_empty() {
            return Err(shape_err!("{} of {:?} and {:?}", name, sa, sb));
        }
        if let Some(w) = weight {
            if w.len() != numel(sa) {
                return Err(shape_err!("{} weight of length {} for {:?}", name, w.len(), sa));
            }
        }
        let n = *sa.last().unwrap();
        if n == 0 {
            return Err(shape_err!("{} over empty rows {:?}", name, sa));
        }
        Ok((numel(sa) / n, n))
    }

    /// Per-row root-mean-square difference over the last axis, optionally
    /// restricted by a 0/1 (or general non-negative) weight. Rows with zero
    /// total weight produce 0.
    pub fn rmse_rows(&mut self, a: Var, b: Var, weight: Option<Vec<f64>>) -> Result<Var> {
        let (rows, n) = self.check_rows(a, b, weight.as_deref(), "rmse_rows")?;
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<f64> = (0..rows)
            .map(|r| {
                let mut s = 0.0;
                let mut wt = 0.0;
                for t in r * n..(r + 1) * n {
                    let w = weight.as_ref().map_or(1.0, |w| w[t]);
                    let e = da[t] - db[t];
                    s += w * e * e;
                    wt += w;
                }
                if wt > 0.0 {
                    (s / wt).sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut out_shape = self.shape(a).to_vec();
        out_shape.pop();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::RmseRows { a, b, weight }, rg))
    }

    /// Per-row Pearson correlation over the last axis. Rows where either side
    /// has zero variance produce 0 and pass no gradient.
    pub fn pearson_rows(&mut self, a: Var, b: Var, weight: Option<Vec<f64>>) -> Result<Var> {
        let (rows, n) = self.check_rows(a, b, weight.as_deref(), "pearson_rows")?;
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<f64> = (0..rows)
            .map(|r| pearson_stats(&da[r * n..(r + 1) * n], &db[r * n..(r + 1) * n], weight.as_ref().map(|w| &w[r * n..(r + 1) * n])).rho)
            .collect();
        let mut out_shape = self.shape(a).to_vec();
        out_shape.pop();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::PearsonRows { a, b, weight }, rg))
    }

    /// Mean binary cross-entropy of logits against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.data(logits);
        if z.len() != labels.len() || z.is_empty() {
            return Err(shape_err!(
                "bce_with_logits of {:?} against {} labels",
                self.shape(logits),
                labels.len()
            ));
        }
        let loss = z
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / z.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward from non-scalar {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Reshape(x) = node.op {
                if grads[x.0].is_none() {
                    grads[x.0] = Some(g);
                    continue;
                }
            }
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let bd = self.data(*b);
                    add_into_with(&mut grads[a.0], m * k, |d| {
                        gemm(m, n, k, g, Layout::row(n), bd, Layout::trans(n), d, true)
                    });
                }
                if self.rg(*b) {
                    let ad = self.data(*a);
                    add_into_with(&mut grads[b.0], k * n, |d| {
                        gemm(k, m, n, ad, Layout::trans(k), g, Layout::row(n), d, true)
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let (k, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = g.len() / n.max(1);
                if self.rg(*x) {
                    let wd = self.data(*w);
                    add_into_with(&mut grads[x.0], rows * k, |d| {
                        gemm(rows, n, k, g, Layout::row(n), wd, Layout::trans(n), d, true)
                    });
                }
                if self.rg(*w) {
                    let xd = self.data(*x);
                    add_into_with(&mut grads[w.0], k * n, |d| {
                        gemm(k, rows, n, xd, Layout::trans(k), g, Layout::row(n), d, true)
                    });
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    add_into_with(&mut grads[b.0], n, |d| {
                        for row in g.chunks(n) {
                            d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                    });
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b {
                    self.shape(*b)[1]
                } else {
                    self.shape(*b)[2]
                };
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    add_into_with(&mut grads[a.0], batch * m * k, |d| {
                        for bi in 0..batch {
                            let gi = &g[bi * m * n..(bi + 1) * m * n];
                            let bm = &bd[bi * k * n..(bi + 1) * k * n];
                            let di = &mut d[bi * m * k..(bi + 1) * m * k];
                            // dA = dC · B^T ; B stored [k,n] or [n,k]
                            let lb = if *trans_b { Layout::row(k) } else { Layout::trans(n) };
                            gemm(m, n, k, gi, Layout::row(n), bm, lb, di, true);
                        }
                    });
                }
                if self.rg(*b) {
                    add_into_with(&mut grads[b.0], batch * k * n, |d| {
                        for bi in 0..batch {
                            let gi = &g[bi * m * n..(bi + 1) * m * n];
                            let am = &ad[bi * m * k..(bi + 1) * m * k];
                            let di = &mut d[bi * k * n..(bi + 1) * k * n];
                            if *trans_b {
                                // dB[n,k] = dC^T · A
                                gemm(n, m, k, gi, Layout::trans(n), am, Layout::row(k), di, true);
                            } else {
                                gemm(k, m, n, am, Layout::trans(k), gi, Layout::row(n), di, true);
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.rg(*b) {
                    add_into_with(&mut grads[b.0], g.len(), |d| {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d -= g)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    add_into_with(&mut grads[a.0], g.len(), |d| {
                        for t in 0..g.len() {
                            d[t] += g[t] * bd[t];
                        }
                    });
                }
                if self.rg(*b) {
                    add_into_with(&mut grads[b.0], g.len(), |d| {
                        for t in 0..g.len() {
                            d[t] += g[t] * ad[t];
                        }
                    });
                }
            }
            Op::Div(a, b) => {
                let bd = self.data(*b);
                if self.rg(*a) {
                    add_into_with(&mut grads[a.0], g.len(), |d| {
                        for t in 0..g.len() {
                            d[t] += g[t] / bd[t];
                        }
                    });
                }
                if self.rg(*b) {
                    add_into_with(&mut grads[b.0], g.len(), |d| {
                        for t in 0..g.len() {
                            d[t] -= g[t] * out[t] / bd[t];
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                add_into_with(&mut grads[x.0], g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)
                });
            }
            Op::BroadcastTo(x) => {
                let len = self.value(*x).numel();
                add_into_with(&mut grads[x.0], len, |d| {
                    if len == 0 {
                        return;
                    }
                    for chunk in g.chunks(len) {
                        d.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Gelu { x, t } => {
                let xd = self.data(*x);
                add_into_with(&mut grads[x.0], g.len(), |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * gelu_deriv(xd[i], t[i]);
                    }
                });
            }
            Op::Sqrt(x) => {
                add_into_with(&mut grads[x.0], g.len(), |d| {
                    for t in 0..g.len() {
                        d[t] += g[t] * 0.5 / out[t];
                    }
                });
            }
            Op::Map { x, deriv } => {
                add_into_with(&mut grads[x.0], g.len(), |d| {
                    for t in 0..g.len() {
                        d[t] += g[t] * deriv[t];
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                add_into_with(&mut grads[x.0], g.len(), |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..len).map(|i| g[at(i)] * out[at(i)]).sum();
                            for i in 0..len {
                                d[at(i)] += out[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let w = self.value(*gain).numel();
                let rows = rstd.len();
                let gd = self.data(*gain);
                if self.rg(*x) {
                    add_into_with(&mut grads[x.0], g.len(), |d| {
                        for r in 0..rows {
                            let (mut m1, mut m2) = (0.0, 0.0);
                            for c in 0..w {
                                let dh = g[r * w + c] * gd[c];
                                m1 += dh;
                                m2 += dh * xhat[r * w + c];
                            }
                            m1 /= w as f64;
                            m2 /= w as f64;
                            for c in 0..w {
                                let dh = g[r * w + c] * gd[c];
                                d[r * w + c] += rstd[r] * (dh - m1 - xhat[r * w + c] * m2);
                            }
                        }
                    });
                }
                if self.rg(*gain) {
                    add_into_with(&mut grads[gain.0], w, |d| {
                        for r in 0..rows {
                            for c in 0..w {
                                d[c] += g[r * w + c] * xhat[r * w + c];
                            }
                        }
                    });
                }
                if self.rg(*bias) {
                    add_into_with(&mut grads[bias.0], w, |d| {
                        for r in 0..rows {
                            for c in 0..w {
                                d[c] += g[r * w + c];
                            }
                        }
                    });
                }
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inv);
                add_into(&mut grads[x.0], &back);
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.rg(*p) {
                        add_into_with(&mut grads[p.0], outer * len * inner, |d| {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                d[o * len * inner..(o + 1) * len * inner]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, s)| *d += s);
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let width = node.value.shape()[*axis];
                add_into_with(&mut grads[x.0], outer * len * inner, |d| {
                    for o in 0..outer {
                        let dst = &mut d[(o * len + start) * inner..(o * len + start + width) * inner];
                        let src = &g[o * width * inner..(o + 1) * width * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let sx = self.shape(*x);
                let (t, dim) = (sx[1], sx[2]);
                let rows = node.value.shape()[1];
                add_into_with(&mut grads[x.0], numel(sx), |d| {
                    for (b, ix) in index.iter().enumerate() {
                        for (r, &i) in ix.iter().enumerate() {
                            let src = &g[(b * rows + r) * dim..(b * rows + r + 1) * dim];
                            let dst = &mut d[(b * t + i) * dim..(b * t + i + 1) * dim];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                add_into_with(&mut grads[x.0], n, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let s = g[0] / n as f64;
                add_into_with(&mut grads[x.0], n, |d| d.iter_mut().for_each(|d| *d += s));
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                add_into_with(&mut grads[x.0], outer * len * inner, |d| {
                    for o in 0..outer {
                        for i in 0..len {
                            let dst = &mut d[(o * len + i) * inner..(o * len + i + 1) * inner];
                            let src = &g[o * inner..(o + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s / len as f64);
                        }
                    }
                });
            }
            Op::RmseRows { a, b, weight } => {
                let n = *self.shape(*a).last().unwrap();
                let (ad, bd) = (self.data(*a), self.data(*b));
                let total = ad.len();
                // d rmse / d a_t = w_t (a_t - b_t) / (W * rmse)
                let mut da = vec![0.0; total];
                for r in 0..out.len() {
                    if out[r] == 0.0 {
                        continue;
                    }
                    let wt: f64 = match weight {
                        Some(w) => w[r * n..(r + 1) * n].iter().sum(),
                        None => n as f64,
                    };
                    let s = g[r] / (wt * out[r]);
                    for t in r * n..(r + 1) * n {
                        let w = weight.as_ref().map_or(1.0, |w| w[t]);
                        da[t] = s * w * (ad[t] - bd[t]);
                    }
                }
                if self.rg(*a) {
                    add_into(&mut grads[a.0], &da);
                }
                if self.rg(*b) {
                    add_into_with(&mut grads[b.0], total, |d| {
                        d.iter_mut().zip(&da).for_each(|(d, v)| *d -= v)
                    });
                }
            }
            Op::PearsonRows { a, b, weight } => {
                let n = *self.shape(*a).last().unwrap();
                let (ad, bd) = (self.data(*a), self.data(*b));
                let total = ad.len();
                let mut ga = vec![0.0; total];
                let mut gb = vec![0.0; total];
                for r in 0..out.len() {
                    let range = r * n..(r + 1) * n;
                    let w = weight.as_ref().map(|w| &w[range.clone()]);
                    let st = pearson_stats(&ad[range.clone()], &bd[range.clone()], w);
                    if st.degenerate {
                        continue;
                    }
                    let norm = (st.va * st.vb).sqrt();
                    for (k, t) in range.enumerate() {
                        let wk = w.map_or(1.0, |w| w[k]);
                        let ca = ad[t] - st.ma;
                        let cb = bd[t] - st.mb;
                        ga[t] = g[r] * wk * (cb / norm - st.rho * ca / st.va);
                        gb[t] = g[r] * wk * (ca / norm - st.rho * cb / st.vb);
                    }
                }
                if self.rg(*a) {
                    add_into(&mut grads[a.0], &ga);
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let z = self.data(*logits);
                let s = g[0] / z.len() as f64;
                add_into_with(&mut grads[logits.0], z.len(), |d| {
                    for t in 0..z.len() {
                        let sig = 1.0 / (1.0 + (-z[t]).exp());
                        d[t] += s * (sig - labels[t]);
                    }
                });
            }
        }
    }
}

pub(crate) struct PearsonStats {
    pub ma: f64,
    pub mb: f64,
    pub va: f64,
    pub vb: f64,
    pub rho: f64,
    pub degenerate: bool,
}

/// Weighted centred moments and correlation. `va`/`vb` are sums of squared
/// deviations (not divided by the weight total).
pub(crate) fn pearson_stats(a: &[f64], b: &[f64], w: Option<&[f64]>) -> PearsonStats {
    let wt = |k: usize| w.map_or(1.0, |w| w[k]);
    let total: f64 = (0..a.len()).map(wt).sum();
    let mut st = PearsonStats {
        ma: 0.0,
        mb: 0.0,
        va: 0.0,
        vb: 0.0,
        rho: 0.0,
        degenerate: true,
    };
    if total <= 0.0 {
        return st;
    }
    st.ma = (0..a.len()).map(|k| wt(k) * a[k]).sum::<f64>() / total;
    st.mb = (0..b.len()).map(|k| wt(k) * b[k]).sum::<f64>() / total;
    let mut cov = 0.0;
    for k in 0..a.len() {
        let (ca, cb) = (a[k] - st.ma, b[k] - st.mb);
        cov += wt(k) * ca * cb;
        st.va += wt(k) * ca * ca;
        st.vb += wt(k) * cb * cb;
    }
    // Relative floor: variance below round-off of the mean counts as constant.
    let floor_a = 1e-24 * (1.0 + st.ma * st.ma) * total;
    let floor_b = 1e-24 * (1.0 + st.mb * st.mb) * total;
    if st.va <= floor_a || st.vb <= floor_b {
        return st;
    }
    st.degenerate = false;
    st.rho = cov / (st.va * st.vb).sqrt();
    st
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    if nd == 0 || n == 0 {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(n);
    // Innermost output axis is copied in a tight loop.
    let last = nd - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        for j in 0..inner_len {
            out.push(src[base + j * inner_stride]);
        }
        // increment the multi-index over axes 0..last
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}
