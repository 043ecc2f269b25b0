use super::kernels::{dot, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use super::{Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Binary(BinaryKind, Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    /// Elementwise map with its derivative captured at forward time.
    Pointwise(Var, Vec<f32>),
    Softmax {
        input: Var,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Gather(Var, Vec<usize>),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    /// Scalar output whose gradient w.r.t. the input was computed at forward time.
    ScalarFn(Var, Vec<f32>),
}

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in evaluation order, so the tape is topologically sorted
/// by construction and `backward` is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f32>>>,
    ops: Vec<Op>,
    requires: Vec<bool>,
}

fn grad_slot<'a>(
    grads: &'a mut [Option<Vec<f32>>],
    values: &[Tensor],
    v: Var,
) -> &'a mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; values[v.0].len()])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    /// A leaf whose gradient is tracked (parameter or differentiable input).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copies the current value into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.values[v.0].clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.ops[v.0], Op::Leaf)
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads[v.0].take()
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize), TensorError> {
        self.values[v.0].dims2()
    }

    // ---- linear algebra ----

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.values[a.0].data(), self.values[b.0].data(), &mut out, m, k, n);
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), req))
    }

    /// `[m,k] × [n,k]ᵀ → [m,n]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(self.mismatch("matmul_bt", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_a_bt_acc(self.values[a.0].data(), self.values[b.0].data(), &mut out, m, k, n);
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulBt(a, b), req))
    }

    /// `x·w + b` for `x: [m,k]`, `w: [k,n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.values[a.0].shape().to_vec(),
            right: self.values[b.0].shape().to_vec(),
        }
    }

    // ---- elementwise ----

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let (la, lb) = (self.values[a.0].len(), self.values[b.0].len());
        let shape = if self.values[a.0].shape() == self.values[b.0].shape() || lb == 1 {
            self.values[a.0].shape().to_vec()
        } else if la == 1 {
            self.values[b.0].shape().to_vec()
        } else {
            return Err(self.mismatch("elementwise", a, b));
        };
        let n = la.max(lb);
        let (xa, xb) = (self.values[a.0].data(), self.values[b.0].data());
        let at = |i: usize| if la == 1 { xa[0] } else { xa[i] };
        let bt = |i: usize| if lb == 1 { xb[0] } else { xb[i] };
        let out: Vec<f32> = (0..n)
            .map(|i| match kind {
                BinaryKind::Add => at(i) + bt(i),
                BinaryKind::Sub => at(i) - bt(i),
                BinaryKind::Mul => at(i) * bt(i),
                BinaryKind::Div => at(i) / bt(i),
            })
            .collect();
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary(kind, a, b), req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Adds a row vector `b: [n]` to every row of `x: [m,n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x)?;
        if self.values[b.0].len() != n {
            return Err(self.mismatch("add_row", x, b));
        }
        let bias = self.values[b.0].data();
        let mut out = self.values[x.0].data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let req = self.requires[x.0] || self.requires[b.0];
        Ok(self.push(Tensor::new([m, n], out)?, Op::AddRow(x, b), req))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let t = &self.values[x.0];
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v * c).collect())
            .expect("same shape");
        let req = self.requires[x.0];
        self.push(out, Op::Scale(x, c), req)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let t = &self.values[x.0];
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v + c).collect())
            .expect("same shape");
        let req = self.requires[x.0];
        self.push(out, Op::AddScalar(x), req)
    }

    /// Elementwise `f` with derivative `df`, both evaluated at the input value.
    pub fn map(&mut self, x: Var, f: impl Fn(f32) -> f32, df: impl Fn(f32) -> f32) -> Var {
        let t = &self.values[x.0];
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let req = self.requires[x.0];
        let deriv = if req {
            t.data().iter().map(|&v| df(v)).collect()
        } else {
            Vec::new()
        };
        self.push(out, Op::Pointwise(x, deriv), req)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, |v| {
            let s = sigmoid(v);
            s * (1.0 - s)
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), |v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, gelu_grad)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, f32::abs, |v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    // ---- normalization ----

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.values[x.0].shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.values[x.0].data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[idx(l)]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (src[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[idx(l)] /= sum;
                }
            }
        }
        let req = self.requires[x.0];
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { input: x, len, inner }, req))
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var, TensorError> {
        if !(eps > 0.0) {
            return Err(TensorError::InvalidEps(eps));
        }
        let shape = self.values[x.0].shape().to_vec();
        let n = *shape.last().expect("rank >= 1");
        if self.values[gain.0].len() != n {
            return Err(self.mismatch("layer_norm gain", x, gain));
        }
        if self.values[bias.0].len() != n {
            return Err(self.mismatch("layer_norm bias", x, bias));
        }
        let src = self.values[x.0].data();
        let (g, b) = (self.values[gain.0].data(), self.values[bias.0].data());
        let rows = src.len() / n;
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let req = self.requires[x.0] || self.requires[gain.0] || self.requires[bias.0];
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            req,
        ))
    }

    // ---- data movement ----

    /// `out[i] = x[index[i]]`, output shaped as `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let src = self.values[x.0].data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(TensorError::IndexOutOfRange {
                index: bad,
                len: src.len(),
            });
        }
        let out: Vec<f32> = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, out)?;
        let req = self.requires[x.0];
        Ok(self.push(t, Op::Gather(x, index), req))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let t = self.values[x.0].clone().reshape(shape)?;
        let req = self.requires[x.0];
        Ok(self.push(t, Op::Reshape(x), req))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x)?;
        let index = (0..r * c).map(|o| (o % r) * c + o / r).collect();
        self.gather(x, index, [c, r])
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x)?;
        if start >= end || end > r {
            return Err(TensorError::IndexOutOfRange { index: end, len: r });
        }
        self.gather(x, (start * c..end * c).collect(), [end - start, c])
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::EmptyConcat)?;
        let (_, c) = self.dims2(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, cc) = self.dims2(p)?;
            if cc != c {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += r;
            out.extend_from_slice(self.values[p.0].data());
        }
        let req = parts.iter().any(|p| self.requires[p.0]);
        Ok(self.push(Tensor::new([rows, c], out)?, Op::ConcatRows(parts.to_vec()), req))
    }

    // ---- reductions ----

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let req = self.requires[x.0];
        self.push(Tensor::scalar(s), Op::Sum(x), req)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.values[x.0];
        let s = (t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64) as f32;
        let req = self.requires[x.0];
        self.push(Tensor::scalar(s), Op::Mean(x), req)
    }

    /// Column means of `[m,n]`, shaped `[1,n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x)?;
        let mut out = vec![0.0; n];
        for row in self.values[x.0].data().chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f32);
        let req = self.requires[x.0];
        Ok(self.push(Tensor::new([1, n], out)?, Op::MeanRows(x), req))
    }

    /// Scalar node with a caller-supplied value and input gradient.
    pub fn scalar_fn(&mut self, x: Var, value: f32, local_grad: Vec<f32>) -> Result<Var, TensorError> {
        if local_grad.len() != self.values[x.0].len() {
            return Err(TensorError::DataLength {
                shape: self.values[x.0].shape().to_vec(),
                len: local_grad.len(),
            });
        }
        let req = self.requires[x.0];
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn(x, local_grad), req))
    }

    // ---- attention ----

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [nq, D]`, `k: [nk, D]`, `v: [nk, D]`; heads split `D` into equal
    /// contiguous column blocks. Returns `[nq, D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, TensorError> {
        let (nq, d) = self.dims2(q)?;
        let (nk, dk) = self.dims2(k)?;
        let (nv, dv) = self.dims2(v)?;
        if dk != d {
            return Err(self.mismatch("attention q/k", q, k));
        }
        if nv != nk || dv != d {
            return Err(self.mismatch("attention k/v", k, v));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Indivisible {
                op: "attention",
                extent: d,
                divisor: heads,
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (
            self.values[q.0].data(),
            self.values[k.0].data(),
            self.values[v.0].data(),
        );
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        // Per-head contiguous copies of k and v keep the inner loops dense.
        let mut kh = vec![0.0; nk * dh];
        let mut vh = vec![0.0; nk * dh];
        for h in 0..heads {
            let off = h * dh;
            for j in 0..nk {
                kh[j * dh..(j + 1) * dh].copy_from_slice(&kd[j * d + off..j * d + off + dh]);
                vh[j * dh..(j + 1) * dh].copy_from_slice(&vd[j * d + off..j * d + off + dh]);
            }
            for i in 0..nq {
                let qi = &qd[i * d + off..i * d + off + dh];
                let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let mut max = f32::NEG_INFINITY;
                for j in 0..nk {
                    let s = dot(qi, &kh[j * dh..(j + 1) * dh]) * scale;
                    p[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for pj in p.iter_mut() {
                    *pj = (*pj - max).exp();
                    sum += *pj;
                }
                let inv = 1.0 / sum;
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..nk {
                    p[j] *= inv;
                    let pj = p[j];
                    for (o, &vv) in oi.iter_mut().zip(&vh[j * dh..(j + 1) * dh]) {
                        *o += pj * vv;
                    }
                }
            }
        }
        let req = self.requires[q.0] || self.requires[k.0] || self.requires[v.0];
        Ok(self.push(
            Tensor::new([nq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            req,
        ))
    }

    // ---- composite layers ----

    /// Splits `image: [c,h,w]` into non-overlapping `p×p` patches and projects
    /// each with `weight: [c·p·p, d]`, `bias: [d]`. Returns tokens
    /// `[(h/p)·(w/p), d]` in row-major patch order.
    pub fn patch_embed(&mut self, image: Var, patch: usize, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let patches = self.patchify(image, patch)?;
        self.linear(patches, weight, bias)
    }

    /// Rearranges `[c,h,w]` into `[(h/p)·(w/p), c·p·p]`; feature order is
    /// channel-major, then patch row, then patch column.
    pub fn patchify(&mut self, image: Var, patch: usize) -> Result<Var, TensorError> {
        let shape = self.values[image.0].shape().to_vec();
        let [c, h, w] = shape[..] else {
            return Err(TensorError::Rank { expected: 3, shape });
        };
        for extent in [h, w] {
            if patch == 0 || extent % patch != 0 {
                return Err(TensorError::Indivisible {
                    op: "patch_embed",
                    extent,
                    divisor: patch,
                });
            }
        }
        let (gh, gw) = (h / patch, w / patch);
        let feat = c * patch * patch;
        let mut index = Vec::with_capacity(gh * gw * feat);
        for i in 0..gh {
            for j in 0..gw {
                for ch in 0..c {
                    for a in 0..patch {
                        for b in 0..patch {
                            index.push(ch * h * w + (i * patch + a) * w + j * patch + b);
                        }
                    }
                }
            }
        }
        self.gather(image, index, [gh * gw, feat])
    }

    /// Learnable 2× upscaling in token layout (kernel 2, stride 2 transposed
    /// convolution). `x: [h·w, d]` row-major over the grid, `weight: [d, 4·d_out]`
    /// with column `(a·2 + b)·d_out + o` mapping to output offset `(a, b)`,
    /// `bias: [d_out]`. Returns `[(2h)·(2w), d_out]`.
    pub fn upsample_2x_tokens(
        &mut self,
        x: Var,
        h: usize,
        w: usize,
        weight: Var,
        bias: Var,
    ) -> Result<Var, TensorError> {
        let (n, _) = self.dims2(x)?;
        if n != h * w {
            return Err(TensorError::Reshape {
                from: self.shape(x).to_vec(),
                to: vec![h, w],
            });
        }
        let (_, cols) = self.dims2(weight)?;
        if cols % 4 != 0 {
            return Err(TensorError::Indivisible {
                op: "upsample_2x",
                extent: cols,
                divisor: 4,
            });
        }
        let d_out = cols / 4;
        let y = self.matmul(x, weight)?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut index = Vec::with_capacity(oh * ow * d_out);
        for r in 0..oh {
            for c in 0..ow {
                let src = ((r / 2) * w + c / 2) * cols + ((r % 2) * 2 + c % 2) * d_out;
                index.extend(src..src + d_out);
            }
        }
        let up = self.gather(y, index, [oh * ow, d_out])?;
        self.add_row(up, bias)
    }

    /// Grid-layout wrapper: `x: [d,h,w]` → `[d_out, 2h, 2w]`.
    pub fn upsample_2x(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let [d, h, w] = shape[..] else {
            return Err(TensorError::Rank { expected: 3, shape });
        };
        let flat = self.reshape(x, [d, h * w])?;
        let tokens = self.transpose(flat)?;
        let up = self.upsample_2x_tokens(tokens, h, w, weight, bias)?;
        let d_out = self.shape(up)[1];
        let grid = self.transpose(up)?;
        self.reshape(grid, [d_out, 2 * h, 2 * w])
    }

    // ---- backward ----

    /// Populates gradients on every tracked node reachable from `loss`.
    /// Gradients accumulate additively across paths and across calls.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.values[loss.0].len() != 1 {
            return Err(TensorError::NonScalarLoss(self.values[loss.0].shape().to_vec()));
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        grad_slot(&mut self.grads, &self.values, loss)[0] += 1.0;
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &[f32]) {
        let Self {
            values,
            grads,
            ops,
            requires,
        } = self;
        let values = &*values;
        let req = |v: Var| requires[v.0];
        match &ops[idx] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = values[a.0].dims2().unwrap();
                let n = values[b.0].shape()[1];
                if req(*a) {
                    let da = grad_slot(grads, values, *a);
                    matmul_a_bt_acc(g, values[b.0].data(), da, m, n, k);
                }
                if req(*b) {
                    let db = grad_slot(grads, values, *b);
                    matmul_at_b_acc(values[a.0].data(), g, db, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = values[a.0].dims2().unwrap();
                let n = values[b.0].shape()[0];
                if req(*a) {
                    let da = grad_slot(grads, values, *a);
                    matmul_acc(g, values[b.0].data(), da, m, n, k);
                }
                if req(*b) {
                    let db = grad_slot(grads, values, *b);
                    matmul_at_b_acc(g, values[a.0].data(), db, m, n, k);
                }
            }
            Op::Binary(kind, a, b) => {
                let (xa, xb) = (values[a.0].data(), values[b.0].data());
                let (la, lb) = (xa.len(), xb.len());
                let at = |i: usize| if la == 1 { xa[0] } else { xa[i] };
                let bt = |i: usize| if lb == 1 { xb[0] } else { xb[i] };
                if req(*a) {
                    let da = grad_slot(grads, values, *a);
                    for (i, &gi) in g.iter().enumerate() {
                        let local = match kind {
                            BinaryKind::Add | BinaryKind::Sub => 1.0,
                            BinaryKind::Mul => bt(i),
                            BinaryKind::Div => 1.0 / bt(i),
                        };
                        da[if la == 1 { 0 } else { i }] += gi * local;
                    }
                }
                if req(*b) {
                    let db = grad_slot(grads, values, *b);
                    for (i, &gi) in g.iter().enumerate() {
                        let local = match kind {
                            BinaryKind::Add => 1.0,
                            BinaryKind::Sub => -1.0,
                            BinaryKind::Mul => at(i),
                            BinaryKind::Div => -at(i) / (bt(i) * bt(i)),
                        };
                        db[if lb == 1 { 0 } else { i }] += gi * local;
                    }
                }
            }
            Op::AddRow(x, b) => {
                let n = values[b.0].len();
                if req(*x) {
                    let dx = grad_slot(grads, values, *x);
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
                if req(*b) {
                    let db = grad_slot(grads, values, *b);
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::Scale(x, c) => {
                if req(*x) {
                    let dx = grad_slot(grads, values, *x);
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * c);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if req(*x) {
                    let dx = grad_slot(grads, values, *x);
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            Op::Pointwise(x, deriv) => {
                if req(*x) {
                    let dx = grad_slot(grads, values, *x);
                    for ((d, gi), dv) in dx.iter_mut().zip(g).zip(deriv) {
                        *d += gi * dv;
                    }
                }
            }
            Op::Softmax { input, len, inner } => {
                if req(*input) {
                    let y = values[idx].data();
                    let (len, inner) = (*len, *inner);
                    let outer = y.len() / (len * inner);
                    let dx = grad_slot(grads, values, *input);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let s: f32 = (0..len).map(|l| y[at(l)] * g[at(l)]).sum();
                            for l in 0..len {
                                dx[at(l)] += y[at(l)] * (g[at(l)] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = values[gain.0].len();
                if req(*gain) {
                    let dgain = grad_slot(grads, values, *gain);
                    for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for c in 0..n {
                            dgain[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if req(*bias) {
                    let dbias = grad_slot(grads, values, *bias);
                    for grow in g.chunks_exact(n) {
                        dbias.iter_mut().zip(grow).for_each(|(d, gi)| *d += gi);
                    }
                }
                if req(*input) {
                    let gv = values[gain.0].data();
                    let dx = grad_slot(grads, values, *input);
                    let mut dh = vec![0.0; n];
                    for r in 0..inv_std.len() {
                        let grow = &g[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..n {
                            dh[c] = grow[c] * gv[c];
                            mean_dh += dh[c];
                            mean_dh_h += dh[c] * hrow[c];
                        }
                        mean_dh /= n as f32;
                        mean_dh_h /= n as f32;
                        for c in 0..n {
                            dx[r * n + c] += inv_std[r] * (dh[c] - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gather(x, index) => {
                if req(*x) {
                    let dx = grad_slot(grads, values, *x);
                    for (&i, gi) in index.iter().zip(g) {
                        dx[i] += gi;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = values[p.0].len();
                    if req(*p) {
                        let dp = grad_slot(grads, values, *p);
                        dp.iter_mut().zip(&g[off..off + len]).for_each(|(d, gi)| *d += gi);
                    }
                    off += len;
                }
            }
            Op::Sum(x) => {
                if req(*x) {
                    let dx = grad_slot(grads, values, *x);
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if req(*x) {
                    let dx = grad_slot(grads, values, *x);
                    let s = g[0] / dx.len() as f32;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::MeanRows(x) => {
                if req(*x) {
                    let n = g.len();
                    let dx = grad_slot(grads, values, *x);
                    let m = dx.len() / n;
                    for row in dx.chunks_exact_mut(n) {
                        for (d, gi) in row.iter_mut().zip(g) {
                            *d += gi / m as f32;
                        }
                    }
                }
            }
            Op::ScalarFn(x, local) => {
                if req(*x) {
                    let dx = grad_slot(grads, values, *x);
                    dx.iter_mut().zip(local).for_each(|(d, l)| *d += g[0] * l);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (nq, d) = values[q.0].dims2().unwrap();
                let nk = values[k.0].shape()[0];
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let (qd, kd, vd) = (values[q.0].data(), values[k.0].data(), values[v.0].data());
                let mut dq = vec![0.0; nq * d];
                let mut dk = vec![0.0; nk * d];
                let mut dv = vec![0.0; nk * d];
                let mut dp = vec![0.0; nk];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..nq {
                        let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                        let gi = &g[i * d + off..i * d + off + dh];
                        let mut s = 0.0;
                        for j in 0..nk {
                            dp[j] = dot(gi, &vd[j * d + off..j * d + off + dh]);
                            s += dp[j] * p[j];
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            for (o, &x) in dvj.iter_mut().zip(gi) {
                                *o += p[j] * x;
                            }
                        }
                        let qi = &qd[i * d + off..i * d + off + dh];
                        for j in 0..nk {
                            let ds = p[j] * (dp[j] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kd[j * d + off..j * d + off + dh];
                            let dqi = &mut dq[i * d + off..i * d + off + dh];
                            for (o, &x) in dqi.iter_mut().zip(kj) {
                                *o += ds * x;
                            }
                            let dkj = &mut dk[j * d + off..j * d + off + dh];
                            for (o, &x) in dkj.iter_mut().zip(qi) {
                                *o += ds * x;
                            }
                        }
                    }
                }
                for (var, local) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if req(var) {
                        let slot = grad_slot(grads, values, var);
                        slot.iter_mut().zip(&local).for_each(|(s, l)| *s += l);
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
