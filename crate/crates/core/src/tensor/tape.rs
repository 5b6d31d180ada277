use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-supplied op: receives the input values and the
/// upstream gradient, returns one gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    L2NormalizeRows { x: Var, denom: Vec<T>, eps: T },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d(Box<ConvCache<T>>),
    ChannelBias(Var, Var),
    MaxPool2x2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Affine { x: Var, w: Var, b: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Custom { inputs: Vec<Var>, backward: BackwardFn<T>, name: String },
}

struct ConvCache<T> {
    input: Var,
    kernel: Var,
    stride: usize,
    padding: usize,
    /// im2col buffers for every image, `n × (c·kh·kw) × (oh·ow)`.
    cols: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations in evaluation order and replays their backward rules in reverse.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "add")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let va = self.value(a);
        let out = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|x| *x * c).collect(),
        };
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Tensor {
            shape: vx.shape().to_vec(),
            data: vx.data().iter().map(|v| v.max(T::zero())).collect(),
        };
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Divides every row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let (n, d) = vx.dims2()?;
        let mut data = vx.data().to_vec();
        let mut denom = Vec::with_capacity(n);
        for row in data.chunks_mut(d) {
            let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            let s = norm.max(eps);
            row.iter_mut().for_each(|v| *v = *v / s);
            denom.push(s);
        }
        let out = Tensor::new([n, d], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::L2NormalizeRows { x, denom, eps }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s: T = vx.data().iter().copied().sum();
        let m = s / T::from_usize(vx.len().max(1)).unwrap();
        let ng = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Cross-correlation of `n×c×h×w` input with an `f×c×kh×kw` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (f, kc, kh, kw) = self.value(kernel).dims4()?;
        if kc != c {
            return Err(Error::Dimension(format!(
                "conv2d kernel expects {kc} channels, input has {c}"
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be ≥ 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let ckk = c * kh * kw;
        let plane = oh * ow;
        let mut cols = vec![T::zero(); n * ckk * plane];
        let mut out = vec![T::zero(); n * f * plane];
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        for img in 0..n {
            let xs = &x[img * c * h * w..(img + 1) * c * h * w];
            let col = &mut cols[img * ckk * plane..(img + 1) * ckk * plane];
            im2col(xs, (c, h, w), (kh, kw), stride, padding, (oh, ow), col);
            T::gemm(
                f,
                ckk,
                plane,
                T::one(),
                k,
                (ckk as isize, 1),
                col,
                (plane as isize, 1),
                T::zero(),
                &mut out[img * f * plane..(img + 1) * f * plane],
                (plane as isize, 1),
            );
        }
        let out = Tensor::new([n, f, oh, ow], out)?;
        let ng = self.needs(input) || self.needs(kernel);
        let cache = ConvCache {
            input,
            kernel,
            stride,
            padding,
            cols,
        };
        Ok(self.push(out, Op::Conv2d(Box::new(cache)), ng))
    }

    /// Adds `bias[c]` to every pixel of channel `c` of an `n×c×h×w` tensor.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(Error::Dimension(format!(
                "channel bias has {} entries for {c} channels",
                b.len()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(h * w).enumerate() {
            let bc = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v = *v + bc);
        }
        let out = Tensor::new([n, c, h, w], data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::ChannelBias(x, bias), ng))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    /// Ties resolve to the first element in scan order.
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Dimension(format!(
                "max_pool2x2 needs at least 2×2 input, got {h}×{w}"
            )));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new([n, c, oh, ow], out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::MaxPool2x2 { x, argmax }, ng))
    }

    /// `n×c×h×w → n×c` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new([n, c], out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), ng))
    }

    /// `x·w + b` with `x: n×i`, `w: i×o`, `b: o`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let mut out = self.value(x).matmul(self.value(w))?;
        let (_, o) = out.dims2()?;
        let bv = self.value(b);
        if bv.len() != o {
            return Err(Error::Dimension(format!(
                "affine bias has {} entries for {o} outputs",
                bv.len()
            )));
        }
        for row in out.data_mut().chunks_mut(o) {
            for (v, bb) in row.iter_mut().zip(bv.data()) {
                *v = *v + *bb;
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Affine { x, w, b }, ng))
    }

    /// Mean softmax cross-entropy of `n×k` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Dimension(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = T::zero();
        for (row, &label) in self.value(logits).data().chunks(k).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|v| (*v - m).exp()).sum();
            loss = loss - (row[label] - m - z.ln());
            probs.extend(row.iter().map(|v| (*v - m).exp() / z));
        }
        let loss = loss / T::from_usize(n).unwrap();
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        name: impl Into<String>,
        inputs: &[Var],
        output: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Var {
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
                name: name.into(),
            },
            ng,
        )
    }

    /// Name of the op that produced `v`, for diagnostics.
    pub fn op_name(&self, v: Var) -> &str {
        match &self.nodes[v.0].op {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Conv2d(_) => "conv2d",
            Op::ChannelBias(..) => "channel_bias",
            Op::MaxPool2x2 { .. } => "max_pool2x2",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Affine { .. } => "affine",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Custom { name, .. } => name,
        }
    }

    /// Backpropagates from a single-element output.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let shape = self.value(root).shape().to_vec();
        if self.value(root).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar root, got shape {shape:?}; use backward_with"
            )));
        }
        self.backward_with(root, Tensor::full(shape, T::one()))
    }

    /// Backpropagates an explicit upstream gradient `seed` from `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        same_shape(self.value(root), &seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.input_grads(node, &g) {
                if self.needs(input) {
                    accumulate(&mut grads[input.0], gi);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2().unwrap();
                let (_, n) = vb.dims2().unwrap();
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let mut da = Tensor::zeros([m, k]);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        (n as isize, 1),
                        vb.data(),
                        (1, n as isize),
                        T::zero(),
                        da.data_mut(),
                        (k as isize, 1),
                    );
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let mut db = Tensor::zeros([k, n]);
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        va.data(),
                        (1, k as isize),
                        g.data(),
                        (n as isize, 1),
                        T::zero(),
                        db.data_mut(),
                        (n as isize, 1),
                    );
                    out.push((*b, db));
                }
            }
            Op::Transpose(a) => out.push((*a, g.transpose().unwrap())),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = zip_map(g, vb, |gg, y| gg * y);
                let gb = zip_map(g, va, |gg, x| gg * x);
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Scale(a, c) => {
                let c = *c;
                out.push((*a, map(g, |v| v * c)));
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                out.push((
                    *x,
                    zip_map(g, vx, |gg, xv| if xv > T::zero() { gg } else { T::zero() }),
                ));
            }
            Op::L2NormalizeRows { x, denom, eps } => {
                let y = &node.value;
                let (_, d) = y.dims2().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for (r, s) in denom.iter().enumerate() {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dr = &mut dx[r * d..(r + 1) * d];
                    if *s > *eps {
                        let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        for j in 0..d {
                            dr[j] = (gr[j] - yr[j] * dot) / *s;
                        }
                    } else {
                        for j in 0..d {
                            dr[j] = gr[j] / *s;
                        }
                    }
                }
                out.push((*x, Tensor::new(y.shape(), dx).unwrap()));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                out.push((*x, Tensor::full(shape, g.data()[0])));
            }
            Op::Mean(x) => {
                let vx = self.value(*x);
                let v = g.data()[0] / T::from_usize(vx.len().max(1)).unwrap();
                out.push((*x, Tensor::full(vx.shape(), v)));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                out.push((*x, g.clone().reshaped(shape).unwrap()));
            }
            Op::Conv2d(cache) => out.extend(self.conv2d_backward(cache, g)),
            Op::ChannelBias(x, b) => {
                let (_, c, h, w) = g.dims4().unwrap();
                let mut db = vec![T::zero(); c];
                for (i, chunk) in g.data().chunks(h * w).enumerate() {
                    db[i % c] = db[i % c] + chunk.iter().copied().sum::<T>();
                }
                out.push((*x, g.clone()));
                out.push((*b, Tensor::new(self.value(*b).shape(), db).unwrap()));
            }
            Op::MaxPool2x2 { x, argmax } => {
                let vx = self.value(*x);
                let mut dx = Tensor::zeros(vx.shape());
                for (gv, &idx) in g.data().iter().zip(argmax) {
                    dx.data_mut()[idx] = dx.data()[idx] + *gv;
                }
                out.push((*x, dx));
            }
            Op::GlobalAvgPool(x) => {
                let vx = self.value(*x);
                let (_, _, h, w) = vx.dims4().unwrap();
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let mut dx = Vec::with_capacity(vx.len());
                for gv in g.data() {
                    dx.extend(std::iter::repeat_n(*gv * inv, h * w));
                }
                out.push((*x, Tensor::new(vx.shape(), dx).unwrap()));
            }
            Op::Affine { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, i) = vx.dims2().unwrap();
                let (_, o) = vw.dims2().unwrap();
                if self.needs(*x) {
                    let mut dx = Tensor::zeros([n, i]);
                    T::gemm(
                        n,
                        o,
                        i,
                        T::one(),
                        g.data(),
                        (o as isize, 1),
                        vw.data(),
                        (1, o as isize),
                        T::zero(),
                        dx.data_mut(),
                        (i as isize, 1),
                    );
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros([i, o]);
                    T::gemm(
                        i,
                        n,
                        o,
                        T::one(),
                        vx.data(),
                        (1, i as isize),
                        g.data(),
                        (o as isize, 1),
                        T::zero(),
                        dw.data_mut(),
                        (o as isize, 1),
                    );
                    out.push((*w, dw));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d = *d + *v;
                        }
                    }
                    out.push((*b, Tensor::new(self.value(*b).shape(), db).unwrap()));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (n, k) = self.value(*logits).dims2().unwrap();
                let scale = g.data()[0] / T::from_usize(n).unwrap();
                let mut dl = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    dl[r * k + label] = dl[r * k + label] - T::one();
                }
                dl.iter_mut().for_each(|v| *v = *v * scale);
                out.push((*logits, Tensor::new([n, k], dl).unwrap()));
            }
            Op::Custom {
                inputs, backward, ..
            } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = backward(&values, g);
                assert_eq!(gs.len(), inputs.len(), "custom backward arity");
                out.extend(inputs.iter().copied().zip(gs));
            }
        }
        out
    }

    fn conv2d_backward(&self, cache: &ConvCache<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let vx = self.value(cache.input);
        let vk = self.value(cache.kernel);
        let (n, c, h, w) = vx.dims4().unwrap();
        let (f, _, kh, kw) = vk.dims4().unwrap();
        let (_, _, oh, ow) = g.dims4().unwrap();
        let ckk = c * kh * kw;
        let plane = oh * ow;
        let mut out = Vec::new();
        if self.needs(cache.kernel) {
            let mut dk = Tensor::zeros(vk.shape());
            for img in 0..n {
                // dK += dOut_img · cols_imgᵀ, summed in image order.
                T::gemm(
                    f,
                    plane,
                    ckk,
                    T::one(),
                    &g.data()[img * f * plane..(img + 1) * f * plane],
                    (plane as isize, 1),
                    &cache.cols[img * ckk * plane..(img + 1) * ckk * plane],
                    (1, plane as isize),
                    T::one(),
                    dk.data_mut(),
                    (ckk as isize, 1),
                );
            }
            out.push((cache.kernel, dk));
        }
        if self.needs(cache.input) {
            let mut dx = Tensor::zeros(vx.shape());
            let mut dcol = vec![T::zero(); ckk * plane];
            for img in 0..n {
                T::gemm(
                    ckk,
                    f,
                    plane,
                    T::one(),
                    vk.data(),
                    (1, ckk as isize),
                    &g.data()[img * f * plane..(img + 1) * f * plane],
                    (plane as isize, 1),
                    T::zero(),
                    &mut dcol,
                    (plane as isize, 1),
                );
                col2im(
                    &dcol,
                    (c, h, w),
                    (kh, kw),
                    cache.stride,
                    cache.padding,
                    (oh, ow),
                    &mut dx.data_mut()[img * c * h * w..(img + 1) * c * h * w],
                );
            }
            out.push((cache.input, dx));
        }
        out
    }
}

fn map<T: Scalar>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().map(|v| f(*v)).collect(),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    }
}

fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    col: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &x[ci * h * w + iy as usize * w..ci * h * w + (iy as usize + 1) * w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    col: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    dx: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let d = &mut dx[ci * h * w + iy as usize * w + ix as usize];
                            *d = *d + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
