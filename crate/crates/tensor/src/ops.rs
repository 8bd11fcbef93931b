//! Differentiable operations recorded on a [`Tape`].

use crate::element::{lit, Element};
use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::param::{BufferId, RunningUpdate};
use crate::tape::{Tape, Var};
use crate::tensor::{numel, Tensor};

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Relu(Var),
    Sum(Var),
    Pick(Var, usize),
    Conv2d { x: Var, w: Var, geom: ConvGeom, out_ch: usize },
    MaxPool2d { x: Var, argmax: Vec<usize>, in_plane: usize, out_plane: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Concat { inputs: Vec<Var>, axis: usize },
    CropSpatial(Var),
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Affine(a, _)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Pick(a, _)
            | Op::GlobalAvgPool(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::CropSpatial(a) => vec![*a],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::MaxPool2d { x, .. } | Op::Permute { x, .. } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() });
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Splits a `[N, C, ...]` shape into (N, C, spatial).
fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::invalid(op, format!("expected [N, C, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<'s, T: Element> Tape<'s, T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Elementwise `scale·a + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let t = self.value(a).map(|x| scale * x + shift);
        self.push(t, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.affine(a, s, T::zero())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(t, Op::Relu(a))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, lit(1.0 / n as f64))
    }

    /// Single element at a flat row-major index, as a rank-0 tensor.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = self.value(a);
        if index >= v.numel() {
            return Err(TensorError::invalid("pick", format!("index {index} out of range for {:?}", v.shape())));
        }
        let t = Tensor::scalar(v.data()[index]);
        Ok(self.push(t, Op::Pick(a, index)))
    }

    /// 2-D convolution without bias. `x: [N,C,H,W]`, `w: [K,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", left: xs, right: ws });
        }
        let (kh, kw) = (ws[2], ws[3]);
        if !matches!(kh, 1 | 3 | 7) || !matches!(kw, 1 | 3 | 7) {
            return Err(TensorError::invalid("conv2d", format!("unsupported kernel {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        let out_h = ConvGeom::out_extent(xs[2], kh, stride, padding);
        let out_w = ConvGeom::out_extent(xs[3], kw, stride, padding);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(TensorError::invalid(
                "conv2d",
                format!("zero-size output for input {xs:?}, kernel {ws:?}, padding {padding}"),
            ));
        };
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), xs[0], ws[0], &geom);
        let t = Tensor::from_parts(vec![xs[0], ws[0], out_h, out_w], out);
        Ok(self.push(t, Op::Conv2d { x, w, geom, out_ch: ws[0] }))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::invalid("max_pool2d", format!("expected [N,C,H,W], got {xs:?}")));
        }
        let (Some(out_h), Some(out_w)) = (
            ConvGeom::out_extent(xs[2], kernel, stride, padding),
            ConvGeom::out_extent(xs[3], kernel, stride, padding),
        ) else {
            return Err(TensorError::invalid("max_pool2d", format!("zero-size output for {xs:?}")));
        };
        let geom = ConvGeom {
            channels: 1,
            height: xs[2],
            width: xs[3],
            kh: kernel,
            kw: kernel,
            stride,
            padding,
            out_h,
            out_w,
        };
        let (out, argmax) = kernels::max_pool2d(self.value(x).data(), xs[0] * xs[1], &geom);
        let t = Tensor::from_parts(vec![xs[0], xs[1], out_h, out_w], out);
        Ok(self.push(
            t,
            Op::MaxPool2d { x, argmax, in_plane: xs[2] * xs[3], out_plane: out_h * out_w },
        ))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, s) = channel_layout("batch_norm", self.shape(x))?;
        same_shape("batch_norm", self.shape(gamma), &[c])?;
        same_shape("batch_norm", self.shape(beta), &[c])?;
        Ok((n, c, s))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64, train: bool) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c, s) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + lit(eps)).sqrt()).collect();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                for j in base..base + s {
                    let h = (xv[j] - mean[ci]) * inv_std[ci];
                    xhat[j] = h;
                    out[j] = g[ci] * h + b[ci];
                }
            }
        }
        let t = Tensor::from_parts(shape, out);
        self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train })
    }

    /// Training-mode batch norm over `[N, C, ...]`, normalising with batch
    /// statistics. Returns the output with the batch mean and biased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, s) = self.check_bn(x, gamma, beta)?;
        let xv = self.value(x).data();
        let count = lit::<T>((n * s) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut acc = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * s;
                for &v in &xv[base..base + s] {
                    acc = acc + v;
                }
            }
            mean[ci] = acc / count;
            let mut sq = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * s;
                for &v in &xv[base..base + s] {
                    let d = v - mean[ci];
                    sq = sq + d * d;
                }
            }
            var[ci] = sq / count;
        }
        let out = self.bn_apply(x, gamma, beta, &mean, &var, eps, true);
        Ok((out, mean, var))
    }

    /// Eval-mode batch norm using fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let (_, c, _) = self.check_bn(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(TensorError::invalid("batch_norm", "running statistics length mismatch"));
        }
        Ok(self.bn_apply(x, gamma, beta, mean, var, eps, false))
    }

    /// Batch norm reading running statistics from store buffers. In training
    /// mode the running-statistics update is queued on the tape.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: BufferId,
        running_var: BufferId,
        eps: f64,
        momentum: f64,
        train: bool,
    ) -> Result<Var> {
        if train {
            let (n, _, s) = channel_layout("batch_norm", self.shape(x))?;
            let (out, mean, var) = self.batch_norm_train(x, gamma, beta, eps)?;
            self.record_running_update(RunningUpdate {
                mean: running_mean,
                var: running_var,
                batch_mean: mean,
                batch_var: var,
                count: n * s,
                momentum,
            });
            Ok(out)
        } else {
            let store = self.store().expect("batch_norm needs a parameter store");
            let mean = store.buffer(running_mean).tensor.data();
            let var = store.buffer(running_var).tensor.data();
            self.batch_norm_eval(x, gamma, beta, mean, var, eps)
        }
    }

    /// Spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::invalid("global_avg_pool", format!("expected [N,C,H,W], got {shape:?}")));
        }
        let s = shape[2] * shape[3];
        let inv = lit::<T>(1.0 / s as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(s)
            .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        let t = Tensor::from_parts(vec![shape[0], shape[1]], data);
        Ok(self.push(t, Op::GlobalAvgPool(x)))
    }

    /// `x[..., in] · wᵀ + b` with `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[1] {
            return Err(TensorError::ShapeMismatch { op: "linear", left: xs, right: ws });
        }
        if let Some(b) = b {
            same_shape("linear", self.shape(b), &[ws[0]])?;
        }
        let (out_f, in_f) = (ws[0], ws[1]);
        let rows = numel(&xs) / in_f;
        let mut y = vec![T::zero(); rows * out_f];
        kernels::gemm_nt(self.value(x).data(), self.value(w).data(), &mut y, rows, in_f, out_f);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(out_f) {
                for (v, &bb) in row.iter_mut().zip(bv) {
                    *v = *v + bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = out_f;
        Ok(self.push(Tensor::from_parts(shape, y), Op::Linear { x, w, b }))
    }

    /// Batched matrix product over matching leading dims: `[..., m, k] · [..., k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let r = as_.len();
        if r < 2 || bs.len() != r || as_[..r - 2] != bs[..r - 2] || as_[r - 1] != bs[r - 2] {
            return Err(TensorError::ShapeMismatch { op: "bmm", left: as_, right: bs });
        }
        let (m, k, n) = (as_[r - 2], as_[r - 1], bs[r - 1]);
        let batch: usize = as_[..r - 2].iter().product();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = as_;
        shape[r - 1] = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Bmm { a, b, batch, m, k, n }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid("permute", format!("{perm:?} is not a permutation of {shape:?}")));
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, perm);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute { x, perm: perm.to_vec() }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::invalid("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let Some(&n) = v.shape().last() else {
            return Err(TensorError::invalid("softmax", "rank-0 input"));
        };
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z = z + *e;
            }
            for e in row.iter_mut() {
                *e = *e / z;
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(t, Op::Softmax(x)))
    }

    /// Layer normalisation over the last axis (biased variance) with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&d) = shape.last() else {
            return Err(TensorError::invalid("layer_norm", "rank-0 input"));
        };
        same_shape("layer_norm", self.shape(gamma), &[d])?;
        same_shape("layer_norm", self.shape(beta), &[d])?;
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let dn = lit::<T>(d as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
            let is = T::one() / (var + lit(eps)).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// Mean categorical cross-entropy of `[N, C]` (or `[C]`) logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (n, c) = match shape.as_slice() {
            [c] => (1, *c),
            [n, c] => (*n, *c),
            _ => return Err(TensorError::invalid("cross_entropy", format!("expected [N,C], got {shape:?}"))),
        };
        if targets.len() != n {
            return Err(TensorError::invalid("cross_entropy", format!("{} targets for batch of {n}", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::invalid("cross_entropy", format!("target class {t} out of range 0..{c}")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let z = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
            let log_z = z.ln() + m;
            for j in 0..c {
                probs[i * c + j] = (row[j] - log_z).exp();
            }
            loss = loss + (log_z - row[targets[i]]);
        }
        loss = loss / lit(n as f64);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(TensorError::ShapeMismatch { op: "concat", left: first.clone(), right: s.to_vec() });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let ext = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// Keeps the top-left `h × w` window of a `[N,C,H,W]` tensor.
    pub fn crop_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || h == 0 || w == 0 || h > s[2] || w > s[3] {
            return Err(TensorError::invalid("crop_spatial", format!("cannot crop {s:?} to {h}x{w}")));
        }
        if h == s[2] && w == s[3] {
            return Ok(x);
        }
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * s[1] * h * w);
        for plane in v.chunks(s[2] * s[3]) {
            for y in 0..h {
                data.extend_from_slice(&plane[y * s[3]..y * s[3] + w]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![s[0], s[1], h, w], data), Op::CropSpatial(x)))
    }
}

pub(crate) fn backward_op<T: Element>(
    tape: &Tape<'_, T>,
    i: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let node = &tape.nodes[i];
    let gd = g.data();
    let like = |v: Var, data: Vec<T>| Tensor::from_parts(tape.shape(v).to_vec(), data);
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            tape.accumulate(grads, *a, g.clone());
            tape.accumulate(grads, *b, g.clone());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (tape.value(*a).data(), tape.value(*b).data());
            if tape.requires_grad(*a) {
                let d = gd.iter().zip(vb).map(|(&g, &y)| g * y).collect();
                tape.accumulate(grads, *a, like(*a, d));
            }
            if tape.requires_grad(*b) {
                let d = gd.iter().zip(va).map(|(&g, &x)| g * x).collect();
                tape.accumulate(grads, *b, like(*b, d));
            }
        }
        Op::Affine(a, s) => {
            let d = gd.iter().map(|&g| g * *s).collect();
            tape.accumulate(grads, *a, like(*a, d));
        }
        Op::Relu(a) => {
            let va = tape.value(*a).data();
            let d = gd.iter().zip(va).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect();
            tape.accumulate(grads, *a, like(*a, d));
        }
        Op::Sum(a) => {
            let n = tape.value(*a).numel();
            tape.accumulate(grads, *a, like(*a, vec![gd[0]; n]));
        }
        Op::Pick(a, idx) => {
            let mut d = vec![T::zero(); tape.value(*a).numel()];
            d[*idx] = gd[0];
            tape.accumulate(grads, *a, like(*a, d));
        }
        Op::Conv2d { x, w, geom, out_ch } => {
            let batch = tape.shape(*x)[0];
            let (dx, dw) = kernels::conv2d_backward(
                tape.value(*x).data(),
                tape.value(*w).data(),
                gd,
                batch,
                *out_ch,
                geom,
                tape.requires_grad(*x),
                tape.requires_grad(*w),
            );
            if let Some(dx) = dx {
                tape.accumulate(grads, *x, like(*x, dx));
            }
            if let Some(dw) = dw {
                tape.accumulate(grads, *w, like(*w, dw));
            }
        }
        Op::MaxPool2d { x, argmax, in_plane, out_plane } => {
            let mut d = vec![T::zero(); tape.value(*x).numel()];
            for (o, (&gv, &a)) in gd.iter().zip(argmax).enumerate() {
                let p = o / out_plane;
                d[p * in_plane + a] = d[p * in_plane + a] + gv;
            }
            tape.accumulate(grads, *x, like(*x, d));
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
            let shape = tape.shape(*x);
            let (n, c, s) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
            let gam = tape.value(*gamma).data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * s;
                    for j in base..base + s {
                        dgamma[ci] = dgamma[ci] + gd[j] * xhat[j];
                        dbeta[ci] = dbeta[ci] + gd[j];
                    }
                }
            }
            if tape.requires_grad(*x) {
                let mut dx = vec![T::zero(); gd.len()];
                let m = lit::<T>((n * s) as f64);
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        let k = gam[ci] * inv_std[ci];
                        for j in base..base + s {
                            dx[j] = if *train {
                                k / m * (m * gd[j] - dbeta[ci] - xhat[j] * dgamma[ci])
                            } else {
                                k * gd[j]
                            };
                        }
                    }
                }
                tape.accumulate(grads, *x, like(*x, dx));
            }
            tape.accumulate(grads, *gamma, like(*gamma, dgamma));
            tape.accumulate(grads, *beta, like(*beta, dbeta));
        }
        Op::GlobalAvgPool(x) => {
            let shape = tape.shape(*x);
            let s = shape[2] * shape[3];
            let inv = lit::<T>(1.0 / s as f64);
            let mut d = Vec::with_capacity(tape.value(*x).numel());
            for &gv in gd {
                d.extend(std::iter::repeat_n(gv * inv, s));
            }
            tape.accumulate(grads, *x, like(*x, d));
        }
        Op::Linear { x, w, b } => {
            let ws = tape.shape(*w);
            let (out_f, in_f) = (ws[0], ws[1]);
            let rows = gd.len() / out_f;
            if tape.requires_grad(*x) {
                let mut dx = vec![T::zero(); rows * in_f];
                kernels::gemm(gd, tape.value(*w).data(), &mut dx, rows, out_f, in_f);
                tape.accumulate(grads, *x, like(*x, dx));
            }
            if tape.requires_grad(*w) {
                let mut dw = vec![T::zero(); out_f * in_f];
                kernels::gemm_tn(gd, tape.value(*x).data(), &mut dw, out_f, rows, in_f);
                tape.accumulate(grads, *w, like(*w, dw));
            }
            if let Some(b) = b {
                let mut db = vec![T::zero(); out_f];
                for row in gd.chunks(out_f) {
                    for (a, &v) in db.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                tape.accumulate(grads, *b, like(*b, db));
            }
        }
        Op::Bmm { a, b, batch, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (tape.value(*a).data(), tape.value(*b).data());
            if tape.requires_grad(*a) {
                let mut da = vec![T::zero(); batch * m * k];
                for i in 0..*batch {
                    kernels::gemm_nt(
                        &gd[i * m * n..(i + 1) * m * n],
                        &bv[i * k * n..(i + 1) * k * n],
                        &mut da[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                tape.accumulate(grads, *a, like(*a, da));
            }
            if tape.requires_grad(*b) {
                let mut db = vec![T::zero(); batch * k * n];
                for i in 0..*batch {
                    kernels::gemm_tn(
                        &av[i * m * k..(i + 1) * m * k],
                        &gd[i * m * n..(i + 1) * m * n],
                        &mut db[i * k * n..(i + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
                tape.accumulate(grads, *b, like(*b, db));
            }
        }
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (_, d) = permute_data(gd, g.shape(), &inv);
            tape.accumulate(grads, *x, like(*x, d));
        }
        Op::Reshape(x) => {
            tape.accumulate(grads, *x, like(*x, gd.to_vec()));
        }
        Op::Softmax(x) => {
            let y = match &node.value {
                crate::tape::Value::Owned(t) => t.data(),
                crate::tape::Value::Param(_) => unreachable!("softmax output is owned"),
            };
            let n = *g.shape().last().expect("rank >= 1");
            let mut d = vec![T::zero(); gd.len()];
            for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &g)| a + y * g);
                for j in 0..n {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            tape.accumulate(grads, *x, like(*x, d));
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let d = tape.shape(*gamma)[0];
            let gam = tape.value(*gamma).data();
            let dn = lit::<T>(d as f64);
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            let mut dx = vec![T::zero(); gd.len()];
            for (r, (gr, hr)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                let mut mean_dh = T::zero();
                let mut mean_dhh = T::zero();
                for j in 0..d {
                    dgamma[j] = dgamma[j] + gr[j] * hr[j];
                    dbeta[j] = dbeta[j] + gr[j];
                    let dh = gr[j] * gam[j];
                    mean_dh = mean_dh + dh;
                    mean_dhh = mean_dhh + dh * hr[j];
                }
                mean_dh = mean_dh / dn;
                mean_dhh = mean_dhh / dn;
                for j in 0..d {
                    let dh = gr[j] * gam[j];
                    dx[r * d + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dhh);
                }
            }
            tape.accumulate(grads, *x, like(*x, dx));
            tape.accumulate(grads, *gamma, like(*gamma, dgamma));
            tape.accumulate(grads, *beta, like(*beta, dbeta));
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let n = targets.len();
            let c = probs.len() / n;
            let scale = gd[0] / lit(n as f64);
            let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (i, &t) in targets.iter().enumerate() {
                d[i * c + t] = d[i * c + t] - scale;
            }
            tape.accumulate(grads, *logits, like(*logits, d));
        }
        Op::Concat { inputs, axis } => {
            let shape = g.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis];
            let mut offset = 0;
            for &v in inputs {
                let ext = tape.shape(v)[*axis];
                if tape.requires_grad(v) {
                    let mut d = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[start..start + ext * inner]);
                    }
                    tape.accumulate(grads, v, like(v, d));
                }
                offset += ext;
            }
        }
        Op::CropSpatial(x) => {
            let s = tape.shape(*x);
            let (h, w) = (g.shape()[2], g.shape()[3]);
            let (hh, ww) = (s[2], s[3]);
            let mut d = vec![T::zero(); tape.value(*x).numel()];
            for (p, gp) in gd.chunks(h * w).enumerate() {
                for y in 0..h {
                    let dst = p * hh * ww + y * ww;
                    d[dst..dst + w].copy_from_slice(&gp[y * w..(y + 1) * w]);
                }
            }
            tape.accumulate(grads, *x, like(*x, d));
        }
    }
    Ok(())
}
