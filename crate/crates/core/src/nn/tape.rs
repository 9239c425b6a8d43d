use super::kernels::{gemm, gemm_nt, gemm_tn, ConvGeometry};
use super::{shape_err, NnError, Result, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Exp(Var),
    Relu(Var),
    Conv2d { x: Var, k: Var, b: Option<Var>, geom: ConvGeometry },
    Conv1d { x: Var, w: Var, b: Option<Var> },
    Embedding { table: Var, ids: Vec<u32> },
    MeanPoolSpatial(Var),
    MaskedMeanPool { x: Var, mask: Vec<T> },
    MulMask { x: Var, mask: Vec<T> },
    L2Normalize { x: Var, eps: T },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    SumAll(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for one reverse sweep.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar output with respect to every recorded value
/// that depends on a differentiable leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dims<const R: usize>(op: &'static str, shape: &[usize]) -> Result<[usize; R]> {
    shape
        .try_into()
        .map_err(|_| shape_err(op, format!("expected rank {R}, got shape {shape:?}")))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter or a verified input).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// `a[n,k] * b[k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, k] = dims("matmul", self.shape(a))?;
        let [k2, m] = dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); n * m];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Matmul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let [r, c] = dims("transpose", self.shape(a))?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), &[a]))
    }

    /// Adds `b` broadcast over the leading dimensions of `x`; `b`'s shape
    /// must equal the trailing dimensions of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(shape_err("add_bias", format!("{bs:?} is not a suffix of {xs:?}")));
        }
        let bd = self.value(b).data();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(bd.len()) {
            for (o, v) in chunk.iter_mut().zip(bd) {
                *o += *v;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.value(a).data().iter().map(|x| *x * s).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Multiplies every element of `a` by the one-element node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scale_by", format!("scale must have one element, shape {:?}", self.shape(s))));
        }
        let sv = self.item(s);
        let data = self.value(a).data().iter().map(|x| *x * sv).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.exp()).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.max(T::zero())).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(out, Op::Relu(a), &[a])
    }

    /// Cross-correlation of `x: [n, c_in, h, w]` with `k: [c_out, c_in, kh, kw]`
    /// under symmetric zero padding, plus an optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_padded(x, k, b, stride, (pad, pad))
    }

    pub fn conv2d_padded(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        (pad_h, pad_w): (usize, usize),
    ) -> Result<Var> {
        let [n, c_in, h, w] = dims("conv2d", self.shape(x))?;
        let [c_out, kc, kh, kw] = dims("conv2d", self.shape(k))?;
        if kc != c_in {
            return Err(shape_err("conv2d", format!("kernel expects {kc} input channels, got {c_in}")));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv2d", format!("bias shape {:?}, want [{c_out}]", self.shape(b))));
            }
        }
        let span_h = (h + 2 * pad_h) as i64 - kh as i64;
        let span_w = (w + 2 * pad_w) as i64 - kw as i64;
        if span_h < 0 || span_w < 0 {
            return Err(NnError::OutputSize {
                op: "conv2d",
                h: span_h.div_euclid(stride as i64) + 1,
                w: span_w.div_euclid(stride as i64) + 1,
            });
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            out_h: span_h as usize / stride + 1,
            out_w: span_w as usize / stride + 1,
        };
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let mut out = vec![T::zero(); n * c_out * ol];
        let mut cols = vec![T::zero(); pl * ol];
        let xd = self.value(x).data();
        let kd = self.value(k).data();
        let bias = b.map(|b| self.value(b).data());
        for i in 0..n {
            geom.im2col(&xd[i * c_in * h * w..(i + 1) * c_in * h * w], &mut cols);
            let dst = &mut out[i * c_out * ol..(i + 1) * c_out * ol];
            if let Some(bias) = bias {
                for (o, chunk) in dst.chunks_mut(ol).enumerate() {
                    chunk.fill(bias[o]);
                }
            }
            gemm(kd, &cols, dst, c_out, pl, ol);
        }
        let out = Tensor::new(vec![n, c_out, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, k, b, geom }, &inputs))
    }

    /// Same-length 1-D convolution over the middle axis of `x: [n, len, c_in]`
    /// with `w: [taps, c_in, c_out]` (odd `taps`), zero padded.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, len, c_in] = dims("conv1d", self.shape(x))?;
        let [taps, wc, c_out] = dims("conv1d", self.shape(w))?;
        if wc != c_in || taps % 2 == 0 {
            return Err(shape_err("conv1d", format!("weight {:?} vs input channels {c_in}", self.shape(w))));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv1d", format!("bias shape {:?}, want [{c_out}]", self.shape(b))));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); n * len * c_out];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for chunk in out.chunks_mut(c_out) {
                chunk.copy_from_slice(bd);
            }
        }
        for i in 0..n {
            for t in 0..taps {
                let (lo, hi, shift) = conv1d_span(len, taps, t);
                if lo >= hi {
                    continue;
                }
                let src = &xd[(i * len + (lo as isize + shift) as usize) * c_in..];
                let dst = &mut out[(i * len + lo) * c_out..(i * len + hi) * c_out];
                gemm(&src[..(hi - lo) * c_in], &wd[t * c_in * c_out..(t + 1) * c_in * c_out], dst, hi - lo, c_in, c_out);
            }
        }
        let out = Tensor::new(vec![n, len, c_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv1d { x, w, b }, &inputs))
    }

    /// Looks up rows of `table: [vocab, d]` for `ids` laid out as `[n, len]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], n: usize, len: usize) -> Result<Var> {
        let [vocab, d] = dims("embedding", self.shape(table))?;
        if ids.len() != n * len {
            return Err(shape_err("embedding", format!("{} ids for [{n}, {len}]", ids.len())));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(n * len * d);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(NnError::IndexOutOfRange { op: "embedding", index: id, size: vocab });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![n, len, d], out)?;
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims("mean_pool", self.shape(x))?;
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let out: Vec<T> = self.value(x).data().chunks(hw).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.push(out, Op::MeanPoolSpatial(x), &[x]))
    }

    /// `[n, len, d] -> [n, d]` mean over positions where `mask[n, len]` is one.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[T]) -> Result<Var> {
        let [n, len, d] = dims("masked_mean_pool", self.shape(x))?;
        if mask.len() != n * len {
            return Err(shape_err("masked_mean_pool", format!("mask has {} entries for [{n}, {len}]", mask.len())));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let m = &mask[i * len..(i + 1) * len];
            let count = m.iter().copied().sum::<T>().max(T::one());
            let dst = &mut out[i * d..(i + 1) * d];
            for (l, &mv) in m.iter().enumerate() {
                if mv == T::zero() {
                    continue;
                }
                for (o, v) in dst.iter_mut().zip(&xd[(i * len + l) * d..(i * len + l + 1) * d]) {
                    *o += mv * *v;
                }
            }
            for o in dst.iter_mut() {
                *o /= count;
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        Ok(self.push(out, Op::MaskedMeanPool { x, mask: mask.to_vec() }, &[x]))
    }

    /// Multiplies each `[n, len, :]` row of `x` by `mask[n, len]`.
    pub fn mul_mask(&mut self, x: Var, mask: &[T]) -> Result<Var> {
        let [n, len, d] = dims("mul_mask", self.shape(x))?;
        if mask.len() != n * len {
            return Err(shape_err("mul_mask", format!("mask has {} entries for [{n}, {len}]", mask.len())));
        }
        let mut out = self.value(x).clone();
        for (row, &m) in out.data_mut().chunks_mut(d).zip(mask) {
            for v in row {
                *v *= m;
            }
        }
        Ok(self.push(out, Op::MulMask { x, mask: mask.to_vec() }, &[x]))
    }

    /// `v / (|v| + eps)` along the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Var {
        let d = *self.shape(x).last().unwrap_or(&1);
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            let inv = T::one() / (norm + eps);
            for v in row {
                *v *= inv;
            }
        }
        self.push(out, Op::L2Normalize { x, eps }, &[x])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [n, k] = dims("softmax_cross_entropy", self.shape(logits))?;
        if targets.len() != n {
            return Err(shape_err("softmax_cross_entropy", format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(NnError::IndexOutOfRange { op: "softmax_cross_entropy", index: t, size: k });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let (arg, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (j, v)| if v > best.1 { (j, v) } else { best });
            // Sum of the non-max terms, so log-sum-exp - max = ln_1p(rest)
            // keeps full precision for saturated rows.
            let mut rest = T::zero();
            for (j, (p, v)) in probs[i * k..(i + 1) * k].iter_mut().zip(row).enumerate() {
                *p = (*v - max).exp();
                if j != arg {
                    rest += *p;
                }
            }
            let z = T::one() + rest;
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            total += rest.ln_1p() - (row[targets[i]] - max);
        }
        let loss = total / T::of(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    /// Which relu inputs are positive, over every relu node in tape order.
    /// Two evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.nodes[a.0].value.data().iter().map(|v| *v > T::zero()));
            }
        }
        out
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        self.backward_with(output, vec![T::one()])
    }

    /// Reverse sweep seeded with an explicit output gradient.
    pub fn backward_with(&self, output: Var, seed: Vec<T>) -> Gradients<T> {
        assert_eq!(seed.len(), self.value(output).len(), "seed must match output shape");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].needs_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.needs_grad {
                *g = None;
            }
        }
        Gradients { grads }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let [n, k] = dims::<2>("", self.shape(*a)).unwrap();
                let m = self.shape(*b)[1];
                if self.wants(*a) {
                    gemm_nt(g, self.value(*b).data(), self.slot(grads, *a), n, m, k);
                }
                if self.wants(*b) {
                    gemm_tn(self.value(*a).data(), g, self.slot(grads, *b), n, k, m);
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let [r, c] = dims::<2>("", self.shape(*a)).unwrap();
                    let ga = self.slot(grads, *a);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    add_into(self.slot(grads, *x), g);
                }
                if self.wants(*b) {
                    let gb = self.slot(grads, *b);
                    let len = gb.len();
                    for chunk in g.chunks(len) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(self.slot(grads, *v), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bd = self.value(*b).data();
                    for ((o, gv), bv) in self.slot(grads, *a).iter_mut().zip(g).zip(bd) {
                        *o += *gv * *bv;
                    }
                }
                if self.wants(*b) {
                    let ad = self.value(*a).data();
                    for ((o, gv), av) in self.slot(grads, *b).iter_mut().zip(g).zip(ad) {
                        *o += *gv * *av;
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    for (o, gv) in self.slot(grads, *a).iter_mut().zip(g) {
                        *o += *gv * *s;
                    }
                }
            }
            Op::ScaleBy(a, s) => {
                let sv = self.item(*s);
                if self.wants(*a) {
                    for (o, gv) in self.slot(grads, *a).iter_mut().zip(g) {
                        *o += *gv * sv;
                    }
                }
                if self.wants(*s) {
                    let dot: T = g.iter().zip(self.value(*a).data()).map(|(x, y)| *x * *y).sum();
                    self.slot(grads, *s)[0] += dot;
                }
            }
            Op::Exp(a) => {
                if self.wants(*a) {
                    for ((o, gv), y) in self.slot(grads, *a).iter_mut().zip(g).zip(node.value.data()) {
                        *o += *gv * *y;
                    }
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    for ((o, gv), x) in self.slot(grads, *a).iter_mut().zip(g).zip(self.value(*a).data()) {
                        if *x > T::zero() {
                            *o += *gv;
                        }
                    }
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                let n = self.shape(*x)[0];
                let c_out = self.shape(*k)[0];
                let (pl, ol) = (geom.patch_len(), geom.out_len());
                let img = geom.c_in * geom.h * geom.w;
                if let Some(b) = b {
                    if self.wants(*b) {
                        let gb = self.slot(grads, *b);
                        for (j, chunk) in g.chunks(ol).enumerate() {
                            gb[j % c_out] += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
                let (want_x, want_k) = (self.wants(*x), self.wants(*k));
                let xd = self.value(*x).data();
                let kd = self.value(*k).data();
                let mut cols = vec![T::zero(); pl * ol];
                for i in 0..n {
                    let gi = &g[i * c_out * ol..(i + 1) * c_out * ol];
                    if want_k {
                        geom.im2col(&xd[i * img..(i + 1) * img], &mut cols);
                        gemm_nt(gi, &cols, self.slot(grads, *k), c_out, ol, pl);
                    }
                    if want_x {
                        cols.fill(T::zero());
                        gemm_tn(kd, gi, &mut cols, c_out, pl, ol);
                        geom.col2im(&cols, &mut self.slot(grads, *x)[i * img..(i + 1) * img]);
                    }
                }
            }
            Op::Conv1d { x, w, b } => {
                let [n, len, c_in] = dims::<3>("", self.shape(*x)).unwrap();
                let [taps, _, c_out] = dims::<3>("", self.shape(*w)).unwrap();
                if let Some(b) = b {
                    if self.wants(*b) {
                        let gb = self.slot(grads, *b);
                        for chunk in g.chunks(c_out) {
                            add_into(gb, chunk);
                        }
                    }
                }
                let (want_x, want_w) = (self.wants(*x), self.wants(*w));
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                for i in 0..n {
                    for t in 0..taps {
                        let (lo, hi, shift) = conv1d_span(len, taps, t);
                        if lo >= hi {
                            continue;
                        }
                        let rows = hi - lo;
                        let src_start = (i * len + (lo as isize + shift) as usize) * c_in;
                        let gy = &g[(i * len + lo) * c_out..(i * len + hi) * c_out];
                        let wt = &wd[t * c_in * c_out..(t + 1) * c_in * c_out];
                        if want_w {
                            let gw = &mut self.slot(grads, *w)[t * c_in * c_out..(t + 1) * c_in * c_out];
                            gemm_tn(&xd[src_start..src_start + rows * c_in], gy, gw, rows, c_in, c_out);
                        }
                        if want_x {
                            let gx = &mut self.slot(grads, *x)[src_start..src_start + rows * c_in];
                            gemm_nt(gy, wt, gx, rows, c_out, c_in);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let d = self.shape(*table)[1];
                    let gt = self.slot(grads, *table);
                    for (pos, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id as usize * d..(id as usize + 1) * d], &g[pos * d..(pos + 1) * d]);
                    }
                }
            }
            Op::MeanPoolSpatial(x) => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let hw = s[2] * s[3];
                    let inv = T::one() / T::of(hw as f64);
                    for (chunk, gv) in self.slot(grads, *x).chunks_mut(hw).zip(g) {
                        for o in chunk {
                            *o += *gv * inv;
                        }
                    }
                }
            }
            Op::MaskedMeanPool { x, mask } => {
                if self.wants(*x) {
                    let [n, len, d] = dims::<3>("", self.shape(*x)).unwrap();
                    let gx = self.slot(grads, *x);
                    for i in 0..n {
                        let m = &mask[i * len..(i + 1) * len];
                        let count = m.iter().copied().sum::<T>().max(T::one());
                        let gi = &g[i * d..(i + 1) * d];
                        for (l, &mv) in m.iter().enumerate() {
                            if mv == T::zero() {
                                continue;
                            }
                            let f = mv / count;
                            for (o, gv) in gx[(i * len + l) * d..(i * len + l + 1) * d].iter_mut().zip(gi) {
                                *o += *gv * f;
                            }
                        }
                    }
                }
            }
            Op::MulMask { x, mask } => {
                if self.wants(*x) {
                    let d = *self.shape(*x).last().unwrap();
                    for ((row, grow), &m) in self.slot(grads, *x).chunks_mut(d).zip(g.chunks(d)).zip(mask) {
                        for (o, gv) in row.iter_mut().zip(grow) {
                            *o += *gv * m;
                        }
                    }
                }
            }
            Op::L2Normalize { x, eps } => {
                if self.wants(*x) {
                    let d = *self.shape(*x).last().unwrap();
                    let xd = self.value(*x).data();
                    for ((row, grow), xrow) in self.slot(grads, *x).chunks_mut(d).zip(g.chunks(d)).zip(xd.chunks(d)) {
                        let norm = xrow.iter().map(|v| *v * *v).sum::<T>().sqrt();
                        let den = norm + *eps;
                        let dot: T = grow.iter().zip(xrow).map(|(a, b)| *a * *b).sum();
                        let coef = if norm > T::zero() { dot / (norm * den * den) } else { T::zero() };
                        for ((o, gv), xv) in row.iter_mut().zip(grow).zip(xrow) {
                            *o += *gv / den - *xv * coef;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let k = self.shape(*logits)[1];
                    let n = targets.len();
                    let scale = g[0] / T::of(n as f64);
                    let gl = self.slot(grads, *logits);
                    for i in 0..n {
                        for j in 0..k {
                            let onehot = if j == targets[i] { T::one() } else { T::zero() };
                            gl[i * k + j] += (probs[i * k + j] - onehot) * scale;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.wants(*x) {
                    for o in self.slot(grads, *x).iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Output rows `[lo, hi)` that tap `t` reads, and the input row offset.
fn conv1d_span(len: usize, taps: usize, t: usize) -> (usize, usize, isize) {
    let shift = t as isize - (taps / 2) as isize;
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift.max(0)).max(0) as usize;
    (lo.min(len), hi, shift)
}
