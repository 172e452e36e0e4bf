use crate::error::{Error, Result};

use super::resize::ResizePlan;
use super::tensor::numel;
use super::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    AddRow(Var, Var),
    MulMap(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Ln(Var),
    Clamp(Var, S, S),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Mean {
        x: Var,
        n: usize,
        inner: usize,
    },
    Sum(Var),
    Concat {
        xs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Narrow {
        x: Var,
        outer: usize,
        src_width: usize,
        offset: usize,
    },
    Resize(Var, Box<ResizePlan>),
    Patchify {
        x: Var,
        patch: usize,
    },
}

/// Reverse-mode gradient tape.
///
/// Every operation appends a node whose inputs are earlier nodes, so the node
/// list is already in topological order and [`Tape::backward`] is a single
/// reverse sweep. A tape is meant to live for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Tape<S: Scalar = f64> {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<S>>,
    ops: Vec<Op<S>>,
    tracked: Vec<bool>,
    grads: Vec<Option<Vec<S>>>,
    muladds: u64,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_finite<S: Scalar>(op: &'static str, data: &[S]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric {
            op,
            detail: format!("non-finite output at flat index {i}"),
        }),
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn mm_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn mm_at_acc<S: Scalar>(a: &[S], g: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn mm_bt_acc<S: Scalar>(g: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation; returns (value, derivative)
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = S::lit(0.044715);
    let half = S::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (S::one() + t);
    let dinner = c * (S::one() + S::lit(3.0) * a * x * x);
    let deriv = half * (S::one() + t) + half * x * (S::one() - t * t) * dinner;
    (value, deriv)
}

/// Splits `shape` around `axis` into (outer, n, inner) extents.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            shapes: Vec::new(),
            values: Vec::new(),
            ops: Vec::new(),
            tracked: Vec::new(),
            grads: Vec::new(),
            muladds: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Multiply-adds executed by contraction and interpolation ops so far.
    pub fn muladd_count(&self) -> u64 {
        self.muladds
    }

    pub fn reset_muladd_count(&mut self) {
        self.muladds = 0;
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.values[v.0]
    }

    pub fn tracked(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    /// Copies a recorded value out as a plain tensor (detached).
    pub fn tensor(&self, v: Var) -> Tensor<S> {
        Tensor::new(&self.shapes[v.0], self.values[v.0].clone()).expect("tape values are finite and shape-consistent")
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient recorded for `v` into `target`'s grad buffer.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor<S>) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op<S>, shape: Vec<usize>, data: Vec<S>, tracked: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.shapes.push(shape);
        self.values.push(data);
        self.ops.push(op);
        self.tracked.push(tracked);
        Var(self.ops.len() - 1)
    }

    fn record(
        &mut self,
        name: &'static str,
        op: Op<S>,
        inputs: &[Var],
        shape: Vec<usize>,
        data: Vec<S>,
    ) -> Result<Var> {
        ensure_finite(name, &data)?;
        let tracked = inputs.iter().any(|v| self.tracked[v.0]);
        // untracked results need no backward rule, and dropping it frees caches
        let op = if tracked { op } else { Op::Leaf };
        Ok(self.push(op, shape, data, tracked))
    }

    /// Records a leaf; it participates in backward iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a tensor as a constant regardless of its `requires_grad` flag.
    pub fn leaf_detached(&mut self, t: &Tensor<S>) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let shape = t.shape().to_vec();
        Ok(self.push(Op::Leaf, shape, t.into_data(), false))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shapes[a.0], self.shapes[b.0]),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, op: Op<S>, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shapes[a.0].clone();
        self.record(name, op, &[a, b], shape, data)
    }

    fn map(&mut self, name: &'static str, op: Op<S>, a: Var, f: impl Fn(S) -> S) -> Result<Var> {
        let data = self.values[a.0].iter().map(|&x| f(x)).collect();
        let shape = self.shapes[a.0].clone();
        self.record(name, op, &[a], shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", Op::Div(a, b), a, b, |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        self.map("scale", Op::Scale(a, c), a, |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Result<Var> {
        self.map("add_scalar", Op::AddScalar(a), a, |x| x + c)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -S::one())?;
        self.add_scalar(neg, S::one())
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = *self.shapes[x.0].last().unwrap();
        if self.shapes[row.0] != [n] {
            return Err(Error::dim(
                "add_row",
                format!(
                    "row {:?} does not match last axis of {:?}",
                    self.shapes[row.0], self.shapes[x.0]
                ),
            ));
        }
        let r = &self.values[row.0];
        let data = self.values[x.0]
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let shape = self.shapes[x.0].clone();
        self.record("add_row", Op::AddRow(x, row), &[x, row], shape, data)
    }

    /// Multiplies every channel of a (C, H, W) map pointwise by an (H, W) map.
    pub fn mul_map(&mut self, x: Var, map: Var) -> Result<Var> {
        let xs = &self.shapes[x.0];
        if xs.len() != 3 || self.shapes[map.0] != xs[1..] {
            return Err(Error::dim(
                "mul_map",
                format!("features {:?} vs map {:?}", xs, self.shapes[map.0]),
            ));
        }
        let hw = xs[1] * xs[2];
        let m = &self.values[map.0];
        let data = self.values[x.0]
            .chunks(hw)
            .flat_map(|ch| ch.iter().zip(m).map(|(&a, &b)| a * b))
            .collect();
        let shape = xs.clone();
        self.record("mul_map", Op::MulMap(x, map), &[x, map], shape, data)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", Op::Sigmoid(a), a, |x| S::one() / (S::one() + (-x).exp()))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", Op::Gelu(a), a, |x| gelu_parts(x).0)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.map("ln", Op::Ln(a), a, |x| x.ln())
    }

    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Result<Var> {
        self.map("clamp", Op::Clamp(a, lo, hi), a, |x| x.max(lo).min(hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.shapes[a.0], &self.shapes[b.0]);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        mm_acc(&self.values[a.0], &self.values[b.0], &mut out, m, k, n);
        self.muladds += (m * k * n) as u64;
        self.record("matmul", Op::MatMul(a, b), &[a, b], vec![m, n], out)
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.shapes[a.0], &self.shapes[b.0]);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); bt * m * n];
        for i in 0..bt {
            mm_acc(
                &self.values[a.0][i * m * k..(i + 1) * m * k],
                &self.values[b.0][i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.muladds += (bt * m * k * n) as u64;
        self.record("batch_matmul", Op::BatchMatMul(a, b), &[a, b], vec![bt, m, n], out)
    }

    /// `x · wᵀ + b` with `x: (n, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (&self.shapes[x.0], &self.shapes[w.0]);
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::dim("linear", format!("input {sx:?} vs weight {sw:?}")));
        }
        let (n, din, dout) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shapes[b.0] != [dout] {
                return Err(Error::dim(
                    "linear",
                    format!("bias {:?} vs output width {dout}", self.shapes[b.0]),
                ));
            }
        }
        let mut out = vec![S::zero(); n * dout];
        mm_bt_acc(&self.values[x.0], &self.values[w.0], &mut out, n, dout, din);
        if let Some(b) = b {
            let bias = &self.values[b.0];
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv);
            }
        }
        self.muladds += (n * din * dout) as u64;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record("linear", Op::Linear(x, w, b), &inputs, vec![n, dout], out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = &self.shapes[a.0];
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let v = &self.values[a.0];
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.record("transpose", Op::Transpose(a), &[a], vec![c, r], out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.values[a.0].len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shapes[a.0]),
            ));
        }
        let data = self.values[a.0].clone();
        self.record("reshape", Op::Reshape(a), &[a], shape.to_vec(), data)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = split_axis("softmax", &self.shapes[a.0], axis)?;
        let x = &self.values[a.0];
        let mut out = vec![S::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| x[idx(j)]).fold(S::neg_infinity(), S::max);
                let mut total = S::zero();
                for j in 0..n {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let shape = self.shapes[a.0].clone();
        self.record("softmax", Op::Softmax { x: a, n, inner }, &[a], shape, out)
    }

    /// Normalizes over the last axis, then applies per-channel `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let d = *self.shapes[x.0].last().unwrap();
        if self.shapes[gamma.0] != [d] || self.shapes[beta.0] != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "scale {:?} / shift {:?} vs channel width {d}",
                    self.shapes[gamma.0], self.shapes[beta.0]
                ),
            ));
        }
        let xv = &self.values[x.0];
        let rows = xv.len() / d;
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        let (g, b) = (&self.values[gamma.0], &self.values[beta.0]);
        let dn = S::lit(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * g[c] + b[c];
            }
        }
        let shape = self.shapes[x.0].clone();
        self.record(
            "layer_norm",
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
            shape,
            out,
        )
    }

    /// Mean over `axis`; the axis is removed (a rank-1 input yields shape `[1]`).
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shapes[a.0].clone();
        let (outer, n, inner) = split_axis("mean", &shape, axis)?;
        let x = &self.values[a.0];
        let mut out = vec![S::zero(); outer * inner];
        let inv = S::one() / S::lit(n as f64);
        for o in 0..outer {
            for j in 0..n {
                let src = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        self.record("mean", Op::Mean { x: a, n, inner }, &[a], new_shape, out)
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.values[a.0].iter().copied().sum();
        self.record("sum", Op::Sum(a), &[a], vec![1], vec![total])
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.values[a.0].len();
        let s = self.sum(a)?;
        self.scale(s, S::one() / S::lit(n as f64))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shapes[first.0].clone();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut widths = Vec::with_capacity(xs.len());
        for v in xs {
            let s = &self.shapes[v.0];
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            widths.push(s[axis] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.values[v.0][o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total / inner;
        self.record(
            "concat",
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                widths,
            },
            xs,
            shape,
            out,
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shapes[a.0].clone();
        let (outer, n, inner) = split_axis("narrow", &shape, axis)?;
        if len == 0 || start + len > n {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} outside axis {axis} of {shape:?}", start + len),
            ));
        }
        let x = &self.values[a.0];
        let (src_width, w, offset) = (n * inner, len * inner, start * inner);
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            out.extend_from_slice(&x[o * src_width + offset..o * src_width + offset + w]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        self.record(
            "narrow",
            Op::Narrow {
                x: a,
                outer,
                src_width,
                offset,
            },
            &[a],
            new_shape,
            out,
        )
    }

    /// Bilinear resize of a (C, H, W) or (H, W) map to `(out_h, out_w)`.
    pub fn resize_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shapes[a.0].clone();
        let (c, h, w) = match shape.as_slice() {
            [c, h, w] => (*c, *h, *w),
            [h, w] => (1, *h, *w),
            _ => {
                return Err(Error::dim(
                    "resize_bilinear",
                    format!("expected (C,H,W) or (H,W), got {shape:?}"),
                ))
            }
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim("resize_bilinear", "zero output size"));
        }
        let plan = ResizePlan::new(c, h, w, out_h, out_w);
        let x = &self.values[a.0];
        let mut out = vec![S::zero(); c * out_h * out_w];
        let (rows, cols) = (&plan.rows, &plan.cols);
        for ch in 0..c {
            let src = &x[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for oy in 0..out_h {
                let (r0, r1) = (rows.lo[oy] * w, rows.hi[oy] * w);
                let (wy0, wy1) = (S::lit(rows.w_lo[oy]), S::lit(rows.w_hi[oy]));
                for ox in 0..out_w {
                    let (c0, c1) = (cols.lo[ox], cols.hi[ox]);
                    let (wx0, wx1) = (S::lit(cols.w_lo[ox]), S::lit(cols.w_hi[ox]));
                    dst[oy * out_w + ox] = wy0 * (wx0 * src[r0 + c0] + wx1 * src[r0 + c1])
                        + wy1 * (wx0 * src[r1 + c0] + wx1 * src[r1 + c1]);
                }
            }
        }
        self.muladds += plan.muladds();
        let new_shape = if shape.len() == 3 {
            vec![c, out_h, out_w]
        } else {
            vec![out_h, out_w]
        };
        self.record("resize_bilinear", Op::Resize(a, Box::new(plan)), &[a], new_shape, out)
    }

    /// Non-overlapping `patch × patch` blocks of a (C, H, W) map as rows:
    /// output `(H/p · W/p, C·p·p)`, row-major over patch positions.
    pub fn patchify(&mut self, a: Var, patch: usize) -> Result<Var> {
        let shape = self.shapes[a.0].clone();
        let [c, h, w] = shape[..] else {
            return Err(Error::dim("patchify", format!("expected (C,H,W), got {shape:?}")));
        };
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::dim(
                "patchify",
                format!("{h}x{w} not divisible by patch {patch}"),
            ));
        }
        let (ph, pw) = (h / patch, w / patch);
        let cols = c * patch * patch;
        let x = &self.values[a.0];
        let mut out = vec![S::zero(); ph * pw * cols];
        for py in 0..ph {
            for px in 0..pw {
                let row = &mut out[(py * pw + px) * cols..(py * pw + px + 1) * cols];
                for ch in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            row[ch * patch * patch + dy * patch + dx] =
                                x[ch * h * w + (py * patch + dy) * w + px * patch + dx];
                        }
                    }
                }
            }
        }
        self.record("patchify", Op::Patchify { x: a, patch }, &[a], vec![ph * pw, cols], out)
    }

    /// Populates gradients of every tracked node reachable from `loss`.
    ///
    /// Gradients accumulate additively across multiple uses of a node. Calling
    /// `backward` again discards the previous pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shapes[loss.0]
            )));
        }
        self.grads = vec![None; self.ops.len()];
        if !self.tracked[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.tracked[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if matches!(self.ops[i], Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<S>> {
        if !self.tracked[v.0] {
            return None;
        }
        let n = numel(&self.shapes[v.0]);
        Some(self.grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
    }

    fn add_grad(&mut self, v: Var, g: impl IntoIterator<Item = S>) {
        if let Some(buf) = self.grad_buf(v) {
            buf.iter_mut().zip(g).for_each(|(b, x)| *b += x);
        }
    }

    fn backward_node(&mut self, i: usize, g: &[S]) {
        // the op is cloned out so gradient buffers can be borrowed mutably;
        // only LayerNorm carries sizeable caches
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(*a, g.iter().copied());
                self.add_grad(*b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, g.iter().copied());
                self.add_grad(*b, g.iter().map(|&x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.values[a.0].clone(), self.values[b.0].clone());
                self.add_grad(*a, g.iter().zip(&bv).map(|(&x, &y)| x * y));
                self.add_grad(*b, g.iter().zip(&av).map(|(&x, &y)| x * y));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.values[a.0].clone(), self.values[b.0].clone());
                self.add_grad(*a, g.iter().zip(&bv).map(|(&x, &y)| x / y));
                self.add_grad(
                    *b,
                    g.iter().zip(av.iter().zip(&bv)).map(|(&x, (&n, &d))| -x * n / (d * d)),
                );
            }
            Op::Scale(a, c) => self.add_grad(*a, g.iter().map(|&x| x * *c)),
            Op::AddScalar(a) | Op::Reshape(a) => self.add_grad(*a, g.iter().copied()),
            Op::AddRow(x, row) => {
                self.add_grad(*x, g.iter().copied());
                let n = self.values[row.0].len();
                if let Some(buf) = self.grad_buf(*row) {
                    for chunk in g.chunks(n) {
                        buf.iter_mut().zip(chunk).for_each(|(b, &x)| *b += x);
                    }
                }
            }
            Op::MulMap(x, map) => {
                let hw = self.values[map.0].len();
                let mv = self.values[map.0].clone();
                let xv = self.values[x.0].clone();
                if let Some(buf) = self.grad_buf(*x) {
                    for (bc, gc) in buf.chunks_mut(hw).zip(g.chunks(hw)) {
                        for ((b, &gx), &m) in bc.iter_mut().zip(gc).zip(&mv) {
                            *b += gx * m;
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(*map) {
                    for (gc, xc) in g.chunks(hw).zip(xv.chunks(hw)) {
                        for ((b, &gx), &xx) in buf.iter_mut().zip(gc).zip(xc) {
                            *b += gx * xx;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = std::mem::take(&mut self.values[i]);
                self.add_grad(*a, g.iter().zip(&y).map(|(&gx, &s)| gx * s * (S::one() - s)));
                self.values[i] = y;
            }
            Op::Gelu(a) => {
                let xv = self.values[a.0].clone();
                self.add_grad(*a, g.iter().zip(&xv).map(|(&gx, &x)| gx * gelu_parts(x).1));
            }
            Op::Ln(a) => {
                let xv = self.values[a.0].clone();
                self.add_grad(*a, g.iter().zip(&xv).map(|(&gx, &x)| gx / x));
            }
            Op::Clamp(a, lo, hi) => {
                let xv = self.values[a.0].clone();
                self.add_grad(
                    *a,
                    g.iter()
                        .zip(&xv)
                        .map(|(&gx, &x)| if x < *lo || x > *hi { S::zero() } else { gx }),
                );
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shapes[a.0][0], self.shapes[a.0][1]);
                let n = self.shapes[b.0][1];
                if self.tracked[a.0] {
                    let bv = std::mem::take(&mut self.values[b.0]);
                    let buf = self.grad_buf(*a).unwrap();
                    mm_bt_acc(g, &bv, buf, m, k, n);
                    self.values[b.0] = bv;
                }
                if self.tracked[b.0] {
                    let av = std::mem::take(&mut self.values[a.0]);
                    let buf = self.grad_buf(*b).unwrap();
                    mm_at_acc(&av, g, buf, m, k, n);
                    self.values[a.0] = av;
                }
            }
            Op::BatchMatMul(a, b) => {
                let (bt, m, k) = (self.shapes[a.0][0], self.shapes[a.0][1], self.shapes[a.0][2]);
                let n = self.shapes[b.0][2];
                if self.tracked[a.0] {
                    let bv = std::mem::take(&mut self.values[b.0]);
                    let buf = self.grad_buf(*a).unwrap();
                    for t in 0..bt {
                        mm_bt_acc(
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[t * k * n..(t + 1) * k * n],
                            &mut buf[t * m * k..(t + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    self.values[b.0] = bv;
                }
                if self.tracked[b.0] {
                    let av = std::mem::take(&mut self.values[a.0]);
                    let buf = self.grad_buf(*b).unwrap();
                    for t in 0..bt {
                        mm_at_acc(
                            &av[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut buf[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.values[a.0] = av;
                }
            }
            Op::Linear(x, w, b) => {
                let (n, din) = (self.shapes[x.0][0], self.shapes[x.0][1]);
                let dout = self.shapes[w.0][0];
                if self.tracked[x.0] {
                    let wv = std::mem::take(&mut self.values[w.0]);
                    let buf = self.grad_buf(*x).unwrap();
                    mm_acc(g, &wv, buf, n, dout, din);
                    self.values[w.0] = wv;
                }
                if self.tracked[w.0] {
                    let xv = std::mem::take(&mut self.values[x.0]);
                    let buf = self.grad_buf(*w).unwrap();
                    mm_at_acc(g, &xv, buf, n, dout, din);
                    self.values[x.0] = xv;
                }
                if let Some(b) = b {
                    if let Some(buf) = self.grad_buf(*b) {
                        for row in g.chunks(dout) {
                            buf.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shapes[a.0][0], self.shapes[a.0][1]);
                if let Some(buf) = self.grad_buf(*a) {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Softmax { x, n, inner } => {
                let (n, inner) = (*n, *inner);
                let y = std::mem::take(&mut self.values[i]);
                if let Some(buf) = self.grad_buf(*x) {
                    let outer = y.len() / (n * inner);
                    for o in 0..outer {
                        for k in 0..inner {
                            let idx = |j: usize| o * n * inner + j * inner + k;
                            let dot: S = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                buf[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
                self.values[i] = y;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.values[gamma.0].len();
                let rows = xhat.len() / d;
                if self.tracked[x.0] {
                    let gv = self.values[gamma.0].clone();
                    let buf = self.grad_buf(*x).unwrap();
                    let dn = S::lit(d as f64);
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = S::zero();
                        let mut mean_dxh_xh = S::zero();
                        for c in 0..d {
                            let dxh = gr[c] * gv[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[c];
                        }
                        mean_dxh /= dn;
                        mean_dxh_xh /= dn;
                        for c in 0..d {
                            let dxh = gr[c] * gv[c];
                            buf[r * d + c] += rstd[r] * (dxh - mean_dxh - xr[c] * mean_dxh_xh);
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(*gamma) {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            buf[c] += gr[c] * xr[c];
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(*beta) {
                    for gr in g.chunks(d) {
                        buf.iter_mut().zip(gr).for_each(|(b, &v)| *b += v);
                    }
                }
            }
            Op::Mean { x, n, inner } => {
                let (n, inner) = (*n, *inner);
                let inv = S::one() / S::lit(n as f64);
                if let Some(buf) = self.grad_buf(*x) {
                    let outer = buf.len() / (n * inner);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let dst = &mut buf[(o * n + j) * inner..(o * n + j + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s * inv);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let gv = g[0];
                if let Some(buf) = self.grad_buf(*a) {
                    buf.iter_mut().for_each(|b| *b += gv);
                }
            }
            Op::Concat { xs, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (v, &w) in xs.iter().zip(widths) {
                    if let Some(buf) = self.grad_buf(*v) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            buf[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(b, &s)| *b += s);
                        }
                    }
                    offset += w;
                }
            }
            Op::Narrow {
                x,
                outer,
                src_width,
                offset,
            } => {
                let w = g.len() / outer;
                if let Some(buf) = self.grad_buf(*x) {
                    for o in 0..*outer {
                        let dst = &mut buf[o * src_width + offset..o * src_width + offset + w];
                        dst.iter_mut().zip(&g[o * w..(o + 1) * w]).for_each(|(b, &s)| *b += s);
                    }
                }
            }
            Op::Resize(x, plan) => {
                if let Some(buf) = self.grad_buf(*x) {
                    let (h, w, oh, ow) = (plan.in_h, plan.in_w, plan.out_h, plan.out_w);
                    let (rows, cols) = (&plan.rows, &plan.cols);
                    for ch in 0..plan.channels {
                        let dst = &mut buf[ch * h * w..(ch + 1) * h * w];
                        let src = &g[ch * oh * ow..(ch + 1) * oh * ow];
                        for oy in 0..oh {
                            let (r0, r1) = (rows.lo[oy] * w, rows.hi[oy] * w);
                            let (wy0, wy1) = (S::lit(rows.w_lo[oy]), S::lit(rows.w_hi[oy]));
                            for ox in 0..ow {
                                let gv = src[oy * ow + ox];
                                let (c0, c1) = (cols.lo[ox], cols.hi[ox]);
                                let (wx0, wx1) = (S::lit(cols.w_lo[ox]), S::lit(cols.w_hi[ox]));
                                dst[r0 + c0] += gv * wy0 * wx0;
                                dst[r0 + c1] += gv * wy0 * wx1;
                                dst[r1 + c0] += gv * wy1 * wx0;
                                dst[r1 + c1] += gv * wy1 * wx1;
                            }
                        }
                    }
                }
            }
            Op::Patchify { x, patch } => {
                let p = *patch;
                let (c, h, w) = (self.shapes[x.0][0], self.shapes[x.0][1], self.shapes[x.0][2]);
                if let Some(buf) = self.grad_buf(*x) {
                    let (ph, pw) = (h / p, w / p);
                    let cols = c * p * p;
                    for py in 0..ph {
                        for px in 0..pw {
                            let row = &g[(py * pw + px) * cols..(py * pw + px + 1) * cols];
                            for ch in 0..c {
                                for dy in 0..p {
                                    for dx in 0..p {
                                        buf[ch * h * w + (py * p + dy) * w + px * p + dx] +=
                                            row[ch * p * p + dy * p + dx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.ops[i] = op;
    }
}
