use super::{gemm, mismatch, MatRef, Real, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a leaf participates in the reverse pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// Input data; never receives a gradient.
    Constant,
    /// Parameter updated by gradient descent.
    Trainable,
    /// Parameter whose gradient is explicitly stopped (momentum-updated weights).
    Blocked,
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n - 1) variance, used for running-statistic updates.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf(LeafKind),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, geom: ConvGeom, cols: Vec<T> },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    AvgPool2d { x: Var, geom: PoolGeom },
    GlobalAvgPool(Var),
    Softmax(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    /// `(x - mean) * inv_std` with statistics from the input itself.
    Normalize { x: Var, per_channel: bool, inv_std: Vec<T> },
    /// `(x - mean_c) * inv_std_c` with fixed per-channel statistics.
    ChannelTransform { x: Var, inv_std: Vec<T> },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

#[derive(Clone, Copy, Debug)]
struct PoolGeom {
    size: usize,
    stride: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation record: every node's inputs precede it.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a rank-2 `[B, C]` or rank-4 `[B, C, H, W]` shape into `(B, C, H*W)`.
fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [b, c] => Some((b, c, 1)),
        [b, c, h, w] => Some((b, c, h * w)),
        _ => None,
    }
}

fn shape4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(mismatch(op, format!("expected rank-4 tensor, got {shape:?}"))),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, kind: LeafKind) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf(kind), needs_grad: kind == LeafKind::Trainable });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, LeafKind::Trainable)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, LeafKind::Constant)
    }

    pub fn blocked(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, LeafKind::Blocked)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NumericFault(name.into()));
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.map(a, |x| x * s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    /// Rectifier; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x.exp());
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&x| x <= T::zero()) {
            return Err(TensorError::Domain { op: "log", detail: format!("non-positive input {bad}") });
        }
        let v = self.map(a, |x| x.ln());
        self.push("log", v, Op::Log(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().fold(T::zero(), |acc, &x| acc + x);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::of_f64(self.value(a).numel() as f64);
        let s = self.data(a).iter().fold(T::zero(), |acc, &x| acc + x);
        self.push("mean", Tensor::scalar(s / n), Op::Mean(a), &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(mismatch("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, MatRef::row_major(self.data(a), k), MatRef::row_major(self.data(b), n), T::zero(), &mut out);
        let v = Tensor::new([m, n], out)?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// `x W^T + b` with `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, inp, out) = match (self.shape(x), self.shape(w)) {
            (&[r, i], &[o, i2]) if i == i2 => (r, i, o),
            (sx, sw) => return Err(mismatch("linear", format!("{sx:?} with weight {sw:?}"))),
        };
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(mismatch("linear", format!("bias {:?} for {out} outputs", self.shape(b))));
            }
        }
        let mut y = vec![T::zero(); rows * out];
        gemm(rows, inp, out, MatRef::row_major(self.data(x), inp), MatRef::transposed(self.data(w), inp), T::zero(), &mut y);
        if let Some(b) = b {
            let bias = self.data(b);
            for row in y.chunks_mut(out) {
                for (v, &bv) in row.iter_mut().zip(bias) {
                    *v = *v + bv;
                }
            }
        }
        let v = Tensor::new([rows, out], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", v, Op::Linear { x, w, b }, &inputs)
    }

    /// Cross-correlation of `[B, C, H, W]` with `[F, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (b, c, h, w) = shape4("conv2d", self.shape(x))?;
        let (f, kc, kh, kw) = shape4("conv2d", self.shape(k))?;
        if c != kc {
            return Err(mismatch("conv2d", format!("input has {c} channels, kernel expects {kc}")));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (hp, wp) = (h + 2 * padding, w + 2 * padding);
        if hp < kh || wp < kw || (hp - kh) % stride != 0 || (wp - kw) % stride != 0 {
            return Err(TensorError::InvalidShape {
                shape: vec![b, c, h, w],
                reason: format!("kernel {kh}x{kw}, stride {stride}, padding {padding} gives a non-integral output extent"),
            });
        }
        let geom = ConvGeom { c, h, w, f, kh, kw, stride, padding, ho: (hp - kh) / stride + 1, wo: (wp - kw) / stride + 1 };
        let ck = c * kh * kw;
        let hwo = geom.ho * geom.wo;
        let mut cols = vec![T::zero(); b * ck * hwo];
        let mut out = vec![T::zero(); b * f * hwo];
        let xd = self.data(x);
        let kd = self.data(k);
        for bi in 0..b {
            let col = &mut cols[bi * ck * hwo..(bi + 1) * ck * hwo];
            im2col(&xd[bi * c * h * w..(bi + 1) * c * h * w], &geom, col);
            gemm(f, ck, hwo, MatRef::row_major(kd, ck), MatRef::row_major(col, hwo), T::zero(), &mut out[bi * f * hwo..(bi + 1) * f * hwo]);
        }
        let v = Tensor::new([b, f, geom.ho, geom.wo], out)?;
        self.push("conv2d", v, Op::Conv2d { x, k, geom, cols }, &[x, k])
    }

    fn pool_geom(&self, op: &'static str, x: Var, size: usize, stride: usize) -> Result<(usize, usize, PoolGeom)> {
        let (b, c, h, w) = shape4(op, self.shape(x))?;
        if size == 0 || stride == 0 || size > h || size > w {
            return Err(TensorError::InvalidArgument(format!("{op}: window {size} stride {stride} on {h}x{w}")));
        }
        Ok((b, c, PoolGeom { size, stride, h, w, ho: (h - size) / stride + 1, wo: (w - size) / stride + 1 }))
    }

    pub fn max_pool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let (b, c, g) = self.pool_geom("max_pool2d", x, size, stride)?;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(b * c * g.ho * g.wo);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..b * c {
            let base = plane * g.h * g.w;
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut best = base + oy * g.stride * g.w + ox * g.stride;
                    for dy in 0..g.size {
                        for dx in 0..g.size {
                            let idx = base + (oy * g.stride + dy) * g.w + ox * g.stride + dx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::new([b, c, g.ho, g.wo], out)?;
        self.push("max_pool2d", v, Op::MaxPool2d { x, argmax }, &[x])
    }

    pub fn avg_pool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let (b, c, g) = self.pool_geom("avg_pool2d", x, size, stride)?;
        let xd = self.data(x);
        let inv = T::of_f64(1.0 / (g.size * g.size) as f64);
        let mut out = Vec::with_capacity(b * c * g.ho * g.wo);
        for plane in 0..b * c {
            let base = plane * g.h * g.w;
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut s = T::zero();
                    for dy in 0..g.size {
                        for dx in 0..g.size {
                            s = s + xd[base + (oy * g.stride + dy) * g.w + ox * g.stride + dx];
                        }
                    }
                    out.push(s * inv);
                }
            }
        }
        let v = Tensor::new([b, c, g.ho, g.wo], out)?;
        self.push("avg_pool2d", v, Op::AvgPool2d { x, geom: g }, &[x])
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = shape4("global_avg_pool", self.shape(x))?;
        let hw = h * w;
        let inv = T::of_f64(1.0 / hw as f64);
        let out = self.data(x).chunks(hw).map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv).collect();
        let v = Tensor::new([b, c], out)?;
        self.push("global_avg_pool", v, Op::GlobalAvgPool(x), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("rank >= 1");
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Unit Euclidean norm along the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("rank >= 1");
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.numel() / d);
        for row in out.data_mut().chunks_mut(d) {
            let n = super::norm(row);
            if n == T::zero() {
                return Err(TensorError::ZeroNorm("l2_normalize"));
            }
            for v in row.iter_mut() {
                *v = *v / n;
            }
            norms.push(n);
        }
        self.push("l2_normalize", out, Op::L2Normalize { x, norms }, &[x])
    }

    /// Per-channel normalization over the batch and spatial axes, without affine.
    pub fn batch_norm_train(&mut self, x: Var, eps: T) -> Result<(Var, NormStats<T>)> {
        let (b, c, hw) = channel_layout(self.shape(x))
            .ok_or_else(|| mismatch("batch_norm", format!("expected [B,C] or [B,C,H,W], got {:?}", self.shape(x))))?;
        let n = b * hw;
        if n < 2 {
            return Err(TensorError::InvalidArgument(format!("batch_norm in training mode needs B*H*W >= 2, got {n}")));
        }
        let xd = self.data(x);
        let nf = T::of_f64(n as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                for &v in &xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                    s = s + v;
                }
            }
            let mu = s / nf;
            let mut sq = T::zero();
            for bi in 0..b {
                for &v in &xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                    sq = sq + (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / nf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let range = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                for (o, &v) in out[range.clone()].iter_mut().zip(&xd[range]) {
                    *o = (v - mean[ch]) * inv_std[ch];
                }
            }
        }
        let unbiased = T::of_f64(n as f64 / (n - 1) as f64);
        let stats = NormStats { mean, var: var.iter().map(|&v| v * unbiased).collect() };
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let y = self.push("batch_norm", value, Op::Normalize { x, per_channel: true, inv_std }, &[x])?;
        Ok((y, stats))
    }

    /// Normalization with fixed per-channel statistics (inference-mode batch norm).
    pub fn batch_norm_eval(&mut self, x: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (b, c, hw) = channel_layout(self.shape(x))
            .ok_or_else(|| mismatch("batch_norm", format!("expected [B,C] or [B,C,H,W], got {:?}", self.shape(x))))?;
        if mean.len() != c || var.len() != c {
            return Err(mismatch("batch_norm", format!("{c} channels, statistics for {}", mean.len())));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let range = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                for (o, &v) in out[range.clone()].iter_mut().zip(&xd[range]) {
                    *o = (v - mean[ch]) * inv_std[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("batch_norm", value, Op::ChannelTransform { x, inv_std }, &[x])
    }

    /// Per-(instance, channel) normalization over the spatial axes, without affine.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (_, _, h, w) = shape4("instance_norm", self.shape(x))?;
        let hw = h * w;
        if hw < 2 {
            return Err(TensorError::InvalidArgument(format!("instance_norm needs H*W >= 2, got {hw}")));
        }
        let nf = T::of_f64(hw as f64);
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(out.numel() / hw);
        for plane in out.data_mut().chunks_mut(hw) {
            let mu = plane.iter().fold(T::zero(), |a, &v| a + v) / nf;
            let var = plane.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / nf;
            let inv = T::one() / (var + eps).sqrt();
            for v in plane.iter_mut() {
                *v = (*v - mu) * inv;
            }
            inv_std.push(inv);
        }
        self.push("instance_norm", out, Op::Normalize { x, per_channel: false, inv_std }, &[x])
    }

    /// `x * scale_c + shift_c` for `[B, C]` or `[B, C, H, W]` inputs.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (b, c, hw) = channel_layout(self.shape(x))
            .ok_or_else(|| mismatch("channel_affine", format!("unsupported shape {:?}", self.shape(x))))?;
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(mismatch("channel_affine", format!("{c} channels, affine {:?}/{:?}", self.shape(scale), self.shape(shift))));
        }
        let (xd, sd, td) = (self.data(x), self.data(scale), self.data(shift));
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let range = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                for (o, &v) in out[range.clone()].iter_mut().zip(&xd[range]) {
                    *o = v * sd[ch] + td[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("channel_affine", value, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift])
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, targets, false)
    }

    /// Like [`Graph::cross_entropy`] but the target logit is left out of the
    /// normalizer: `-s_t + logsumexp_{j != t} s_j`.
    pub fn cross_entropy_exclusive(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, targets, true)
    }

    fn cross_entropy_impl(&mut self, logits: Var, targets: &[usize], exclude: bool) -> Result<Var> {
        let (rows, k) = match *self.shape(logits) {
            [r, k] => (r, k),
            ref s => return Err(mismatch("cross_entropy", format!("expected [B, K], got {s:?}"))),
        };
        if targets.len() != rows || targets.iter().any(|&t| t >= k) {
            return Err(mismatch("cross_entropy", format!("{} targets for {rows} rows of {k} classes", targets.len())));
        }
        if exclude && k < 2 {
            return Err(TensorError::InvalidArgument("exclusive cross-entropy needs at least one non-target class".into()));
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); rows * k];
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &ld[i * k..(i + 1) * k];
            let max = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| !(exclude && j == t))
                .fold(T::neg_infinity(), |m, (_, &v)| m.max(v));
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if exclude && j == t {
                    continue;
                }
                let e = (v - max).exp();
                probs[i * k + j] = e;
                z = z + e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p = *p / z;
            }
            total = total + (max + z.ln() - row[t]);
        }
        let loss = total / T::of_f64(rows as f64);
        self.push("cross_entropy", Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf(_) = node.op {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                if cfg!(debug_assertions) && !t.is_finite() {
                    return Err(TensorError::NumericFault("backward".into()));
                }
                leaves[i] = Some(t);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf(LeafKind::Trainable)) && leaves[i].is_none() {
                leaves[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf(_) => unreachable!(),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        add_into(s, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    add_into(s, g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d - gv);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g.iter().zip(bd)).for_each(|(d, (&gv, &o))| *d = *d + gv * o);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g.iter().zip(ad)).for_each(|(d, (&gv, &o))| *d = *d + gv * o);
                }
            }
            Op::Scale(a, k) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * *k);
                }
            }
            Op::Relu(a) => {
                let ad = self.data(*a);
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g.iter().zip(ad)).for_each(|(d, (&gv, &x))| {
                        if x > T::zero() {
                            *d = *d + gv
                        }
                    });
                }
            }
            Op::Exp(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g.iter().zip(y)).for_each(|(d, (&gv, &e))| *d = *d + gv * e);
                }
            }
            Op::Log(a) => {
                let ad = self.data(*a);
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g.iter().zip(ad)).for_each(|(d, (&gv, &x))| *d = *d + gv / x);
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(a) => {
                let n = T::of_f64(self.value(*a).numel() as f64);
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|d| *d = *d + g[0] / n);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(s) = self.slot(grads, *a) {
                    gemm(m, n, k, MatRef::row_major(g, n), MatRef::transposed(bd, n), T::one(), s);
                }
                if let Some(s) = self.slot(grads, *b) {
                    gemm(k, m, n, MatRef::transposed(ad, k), MatRef::row_major(g, n), T::one(), s);
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out = self.shape(*w)[0];
                let (xd, wd) = (self.data(*x), self.data(*w));
                if let Some(s) = self.slot(grads, *x) {
                    gemm(rows, out, inp, MatRef::row_major(g, out), MatRef::row_major(wd, inp), T::one(), s);
                }
                if let Some(s) = self.slot(grads, *w) {
                    gemm(out, rows, inp, MatRef::transposed(g, out), MatRef::row_major(xd, inp), T::one(), s);
                }
                if let Some(b) = b {
                    if let Some(s) = self.slot(grads, *b) {
                        for row in g.chunks(out) {
                            add_into(s, row);
                        }
                    }
                }
            }
            Op::Conv2d { x, k, geom, cols } => {
                let b = self.shape(*x)[0];
                let ck = geom.c * geom.kh * geom.kw;
                let hwo = geom.ho * geom.wo;
                let plane = geom.c * geom.h * geom.w;
                if let Some(s) = self.slot(grads, *k) {
                    for bi in 0..b {
                        let gout = &g[bi * geom.f * hwo..(bi + 1) * geom.f * hwo];
                        let col = &cols[bi * ck * hwo..(bi + 1) * ck * hwo];
                        gemm(geom.f, hwo, ck, MatRef::row_major(gout, hwo), MatRef::transposed(col, hwo), T::one(), s);
                    }
                }
                let kd = self.data(*k);
                if let Some(s) = self.slot(grads, *x) {
                    let mut dcol = vec![T::zero(); ck * hwo];
                    for bi in 0..b {
                        let gout = &g[bi * geom.f * hwo..(bi + 1) * geom.f * hwo];
                        gemm(ck, geom.f, hwo, MatRef::transposed(kd, ck), MatRef::row_major(gout, hwo), T::zero(), &mut dcol);
                        col2im(&dcol, geom, &mut s[bi * plane..(bi + 1) * plane]);
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (&idx, &gv) in argmax.iter().zip(g) {
                        s[idx] = s[idx] + gv;
                    }
                }
            }
            Op::AvgPool2d { x, geom } => {
                let inv = T::of_f64(1.0 / (geom.size * geom.size) as f64);
                if let Some(s) = self.slot(grads, *x) {
                    let per_plane = geom.ho * geom.wo;
                    for (o, &gv) in g.iter().enumerate() {
                        let (plane, rem) = (o / per_plane, o % per_plane);
                        let (oy, ox) = (rem / geom.wo, rem % geom.wo);
                        let base = plane * geom.h * geom.w;
                        for dy in 0..geom.size {
                            for dx in 0..geom.size {
                                let idx = base + (oy * geom.stride + dy) * geom.w + ox * geom.stride + dx;
                                s[idx] = s[idx] + gv * inv;
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.shape(*x);
                let hw = shape[2] * shape[3];
                let inv = T::of_f64(1.0 / hw as f64);
                if let Some(s) = self.slot(grads, *x) {
                    for (plane, &gv) in s.chunks_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|d| *d = *d + gv * inv);
                    }
                }
            }
            Op::Softmax(x) => {
                let d = *self.shape(*x).last().unwrap();
                if let Some(s) = self.slot(grads, *x) {
                    for ((srow, grow), yrow) in s.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dotp = super::dot(grow, yrow);
                        for ((dv, &gv), &yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *dv = *dv + yv * (gv - dotp);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = *self.shape(*x).last().unwrap();
                if let Some(s) = self.slot(grads, *x) {
                    for (((srow, grow), yrow), &n) in s.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)).zip(norms) {
                        let dotp = super::dot(grow, yrow);
                        for ((dv, &gv), &yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *dv = *dv + (gv - yv * dotp) / n;
                        }
                    }
                }
            }
            Op::Normalize { x, per_channel, inv_std } => {
                let Some(s) = self.slot(grads, *x) else { return };
                let (b, c, hw) = channel_layout(node.value.shape()).expect("validated in forward");
                if *per_channel {
                    let nf = T::of_f64((b * hw) as f64);
                    for ch in 0..c {
                        let (mut sg, mut sgy) = (T::zero(), T::zero());
                        for bi in 0..b {
                            let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                            for (&gv, &yv) in g[r.clone()].iter().zip(&y[r]) {
                                sg = sg + gv;
                                sgy = sgy + gv * yv;
                            }
                        }
                        let (mg, mgy) = (sg / nf, sgy / nf);
                        for bi in 0..b {
                            let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                            for ((dv, &gv), &yv) in s[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&y[r]) {
                                *dv = *dv + inv_std[ch] * (gv - mg - yv * mgy);
                            }
                        }
                    }
                } else {
                    let nf = T::of_f64(hw as f64);
                    for (p, &inv) in inv_std.iter().enumerate() {
                        let r = p * hw..(p + 1) * hw;
                        let (gp, yp) = (&g[r.clone()], &y[r.clone()]);
                        let mg = gp.iter().fold(T::zero(), |a, &v| a + v) / nf;
                        let mgy = super::dot(gp, yp) / nf;
                        for ((dv, &gv), &yv) in s[r].iter_mut().zip(gp).zip(yp) {
                            *dv = *dv + inv * (gv - mg - yv * mgy);
                        }
                    }
                }
            }
            Op::ChannelTransform { x, inv_std } => {
                let (b, c, hw) = channel_layout(node.value.shape()).expect("validated in forward");
                if let Some(s) = self.slot(grads, *x) {
                    for bi in 0..b {
                        for (ch, &inv) in inv_std.iter().enumerate().take(c) {
                            let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                            s[r.clone()].iter_mut().zip(&g[r]).for_each(|(d, &gv)| *d = *d + gv * inv);
                        }
                    }
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (b, c, hw) = channel_layout(node.value.shape()).expect("validated in forward");
                let (xd, sd) = (self.data(*x), self.data(*scale));
                if let Some(s) = self.slot(grads, *x) {
                    for bi in 0..b {
                        for ch in 0..c {
                            let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                            s[r.clone()].iter_mut().zip(&g[r]).for_each(|(d, &gv)| *d = *d + gv * sd[ch]);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *scale) {
                    for bi in 0..b {
                        for (ch, acc) in s.iter_mut().enumerate() {
                            let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                            *acc = *acc + super::dot(&g[r.clone()], &xd[r]);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *shift) {
                    for bi in 0..b {
                        for (ch, acc) in s.iter_mut().enumerate() {
                            let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                            *acc = g[r].iter().fold(*acc, |a, &v| a + v);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let coef = g[0] / T::of_f64(targets.len() as f64);
                if let Some(s) = self.slot(grads, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            let d = &mut s[i * k + j];
                            *d = *d + (probs[i * k + j] - onehot) * coef;
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z = z + *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hwo = g.ho * g.wo;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hwo..(row + 1) * hwo];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hwo = g.ho * g.wo;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hwo..(row + 1) * hwo];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let d = &mut dx[base + ix as usize];
                            *d = *d + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of the trainable leaves after a reverse pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a trainable leaf. Unreachable trainable leaves get zeros;
    /// constant and blocked leaves, and non-leaf nodes, get `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
