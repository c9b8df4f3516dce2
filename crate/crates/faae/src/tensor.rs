//! Dense tensors with a per-step computation tape and reverse-mode
//! gradient propagation.
//!
//! The tape is define-by-run: every recorded operation appends a node whose
//! inputs already exist, so the node list is topologically ordered by
//! construction. A tape lives for one training step and is dropped
//! afterwards; parameters live outside the tape as plain [`Tensor`] values
//! and are re-registered as leaves each step.
//!
//! Training instantiates the core at `f32`; gradient verification runs the
//! same code at `f64`, where central finite differences are trustworthy.

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};

/// Scalar element of a tensor. Implemented for `f32` (training) and `f64`
/// (verification).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + 'static
{
    fn fromf(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }
    fn tof(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Plain n-dimensional value: shape plus row-major flat data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); numel] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| T::fromf(v)).collect())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Lossless-enough casting between the two precisions, via f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::fromf(v.tof())).collect(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Neg { a: usize },
    Square { a: usize },
    Log { a: usize },
    /// log(max(v, floor)); zero gradient below the floor.
    LogClamped { a: usize, floor: T },
    Scale { a: usize, c: T },
    Sigmoid { a: usize },
    /// sqrt(max(v, floor)); keeps the derivative bounded at zero.
    SqrtClamped { a: usize, floor: T },
    LeakyRelu { a: usize, slope: T },
    MeanAll { a: usize },
    SumAll { a: usize },
    MeanAxes { a: usize, axes: Vec<usize> },
    Reshape { a: usize },
    AddRow { a: usize, bias: usize },
    NormalizeRows { a: usize, norms: Vec<T> },
    Concat { a: usize, b: usize },
    Conv2d { x: usize, k: usize, bias: usize, stride: usize, pad: usize },
    Upsample2d { x: usize, factor: usize },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, mean: Vec<T>, var: Vec<T>, eps: T },
    ChannelAffine { x: usize, scale: Vec<T> },
    Detach,
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Vec<T>,
    op: Op<T>,
}

/// Append-only computation graph for one step.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        let grad = vec![T::zero(); value.len()];
        self.nodes.push(Node { shape, value, grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf (parameter or input).
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor { shape: self.nodes[v.0].shape.clone(), data: self.nodes[v.0].value.clone() }
    }

    pub fn grad(&self, v: Var) -> &[T] {
        &self.nodes[v.0].grad
    }

    // ---- elementwise ----

    fn binary_shapes(&self, a: Var, b: Var, what: &str) -> Result<(Vec<usize>, bool, bool)> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let na = self.nodes[a.0].value.len();
        let nb = self.nodes[b.0].value.len();
        if sa == sb {
            Ok((sa.clone(), false, false))
        } else if nb == 1 {
            Ok((sa.clone(), false, true))
        } else if na == 1 {
            Ok((sb.clone(), true, false))
        } else {
            Err(Error::Dimension(format!(
                "{what}: incompatible shapes {sa:?} and {sb:?}"
            )))
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (shape, a_scalar, b_scalar) = self.binary_shapes(a, b, what)?;
        let numel: usize = shape.iter().product();
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(numel);
        for i in 0..numel {
            let x = va[if a_scalar { 0 } else { i }];
            let y = vb[if b_scalar { 0 } else { i }];
            out.push(f(x, y));
        }
        Ok(self.push(shape, out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| -x).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Neg { a: a.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| x * x).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Square { a: a.0 })
    }

    /// Natural log; strictly positive inputs only.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((i, &v)) = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .find(|(_, &v)| v <= T::zero())
        {
            return Err(Error::Domain(format!(
                "log of non-positive value {v} at index {i}"
            )));
        }
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::Log { a: a.0 }))
    }

    /// log(max(v, floor)): the loss-side guard against saturated sigmoids.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let floor = T::fromf(floor);
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| if x > floor { x.ln() } else { floor.ln() })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::LogClamped { a: a.0, floor })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::fromf(c);
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Scale { a: a.0, c })
    }

    /// sqrt(max(v, floor)); the clamp bounds the derivative near zero.
    pub fn sqrt_clamped(&mut self, a: Var, floor: f64) -> Var {
        let floor = T::fromf(floor);
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| x.max(floor).sqrt())
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::SqrtClamped { a: a.0, floor })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| sigmoid_stable(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Sigmoid { a: a.0 })
    }

    /// x for x >= 0 else slope*x; subgradient 1 at 0.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let slope = T::fromf(slope);
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| if x >= T::zero() { x } else { slope * x })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::LeakyRelu { a: a.0, slope })
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        if n == 0 {
            return Err(Error::Domain("mean of empty tensor".into()));
        }
        let sum = self.nodes[a.0].value.iter().fold(T::zero(), |acc, &x| acc + x);
        let v = sum / T::fromf(n as f64);
        Ok(self.push(vec![1], vec![v], Op::MeanAll { a: a.0 }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let sum = self.nodes[a.0].value.iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(vec![1], vec![sum], Op::SumAll { a: a.0 })
    }

    /// Mean over the named axes; remaining axes keep their order.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if self.nodes[a.0].value.is_empty() {
            return Err(Error::Domain("mean of empty tensor".into()));
        }
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::Dimension(format!(
                    "axis {ax} out of range for shape {shape:?}"
                )));
            }
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let out_numel: usize = out_shape.iter().product();
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        let mut out = vec![T::zero(); out_numel];
        let numel = self.nodes[a.0].value.len();
        for flat in 0..numel {
            out[reduce_index(flat, &shape, axes)] =
                out[reduce_index(flat, &shape, axes)] + self.nodes[a.0].value[flat];
        }
        let c = T::fromf(count as f64);
        for v in out.iter_mut() {
            *v = *v / c;
        }
        Ok(self.push(out_shape, out, Op::MeanAxes { a: a.0, axes: axes.to_vec() }))
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.len() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?}: element counts differ",
                self.nodes[a.0].shape, shape
            )));
        }
        let value = self.nodes[a.0].value.clone();
        Ok(self.push(shape.to_vec(), value, Op::Reshape { a: a.0 }))
    }

    /// Concatenate two 2-D tensors along axis 1.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Dimension(format!(
                "concat_cols: shapes {sa:?} and {sb:?} must be 2-D with equal rows"
            )));
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&self.nodes[a.0].value[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.nodes[b.0].value[r * cb..(r + 1) * cb]);
        }
        Ok(self.push(vec![rows, ca + cb], out, Op::Concat { a: a.0, b: b.0 }))
    }

    /// Cuts the gradient path: value passes through, backward stops here.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Detach)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: shapes {sa:?} and {sb:?} do not chain"
            )));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let mut out = vec![T::zero(); m * p];
        for i in 0..m {
            for l in 0..k {
                let x = va[i * k + l];
                let row = &vb[l * p..(l + 1) * p];
                let orow = &mut out[i * p..(i + 1) * p];
                for j in 0..p {
                    orow[j] = orow[j] + x * row[j];
                }
            }
        }
        Ok(self.push(vec![m, p], out, Op::Matmul { a: a.0, b: b.0 }))
    }

    /// [batch, f] + [f] with the bias broadcast across rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[bias.0].shape.clone();
        if sa.len() != 2 || sb != vec![sa[1]] {
            return Err(Error::Dimension(format!(
                "add_row: shapes {sa:?} and {sb:?} do not broadcast"
            )));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[bias.0].value;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(va[r * cols + c] + vb[c]);
            }
        }
        Ok(self.push(sa, out, Op::AddRow { a: a.0, bias: bias.0 }))
    }

    /// Projects each row of a 2-D tensor onto the unit sphere.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        if sa.len() != 2 {
            return Err(Error::Dimension(format!(
                "normalize_rows: expected 2-D, got {sa:?}"
            )));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let floor = T::fromf(1e-12);
        let va = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(rows * cols);
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &va[r * cols..(r + 1) * cols];
            let mut sq = T::zero();
            for &x in row {
                sq = sq + x * x;
            }
            let norm = sq.sqrt().max(floor);
            norms.push(norm);
            for &x in row {
                out.push(x / norm);
            }
        }
        Ok(self.push(sa, out, Op::NormalizeRows { a: a.0, norms }))
    }

    // ---- spatial ----

    /// Cross-correlation with zero padding. x: [b, cin, h, w], k: [cout, cin, kh, kw].
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        let sk = self.nodes[k.0].shape.clone();
        let sb = self.nodes[bias.0].shape.clone();
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(Error::Dimension(format!(
                "conv2d: input {sx:?} and kernel {sk:?} disagree"
            )));
        }
        let (b, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        if sb != vec![cout] {
            return Err(Error::Dimension(format!(
                "conv2d: bias {sb:?} does not match {cout} output channels"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let vx = &self.nodes[x.0].value;
        let vk = &self.nodes[k.0].value;
        let vb = &self.nodes[bias.0].value;
        let mut out_idx = 0;
        let mut out_buf = vec![T::zero(); b * cout * oh * ow];
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = vb[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = ((bi * cin + ci) * h + iy as usize) * w;
                                let krow = ((co * cin + ci) * kh + ky) * kw;
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc = acc + vx[xrow + ix as usize] * vk[krow + kx];
                                }
                            }
                        }
                        out_buf[out_idx] = acc;
                        out_idx += 1;
                    }
                }
            }
        }
        Ok(self.push(
            vec![b, cout, oh, ow],
            out_buf,
            Op::Conv2d { x: x.0, k: k.0, bias: bias.0, stride, pad },
        ))
    }

    /// Nearest-neighbor upsampling: each pixel becomes a factor x factor block.
    pub fn upsample2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 4 || factor < 1 {
            return Err(Error::Dimension(format!(
                "upsample2d: expected 4-D input and factor >= 1, got {sx:?} factor {factor}"
            )));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h * factor, w * factor);
        let vx = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for bc in 0..b * c {
            for oy in 0..oh {
                let iy = oy / factor;
                for ox in 0..ow {
                    out.push(vx[(bc * h + iy) * w + ox / factor]);
                }
            }
        }
        Ok(self.push(vec![b, c, oh, ow], out, Op::Upsample2d { x: x.0, factor }))
    }

    /// Per-window maximum; gradient routes to the first argmax on ties.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 4 {
            return Err(Error::Dimension(format!("maxpool2d: expected 4-D, got {sx:?}")));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if window > h || window > w {
            return Err(Error::Dimension(format!(
                "maxpool2d: window {window} exceeds spatial dims {h}x{w}"
            )));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let vx = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for bc in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0;
                    for wy in 0..window {
                        for wx in 0..window {
                            let i = (bc * h + oy * stride + wy) * w + ox * stride + wx;
                            if vx[i] > best {
                                best = vx[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        Ok(self.push(vec![b, c, oh, ow], out, Op::MaxPool2d { x: x.0, argmax }))
    }

    /// Train-mode batch normalization over channel axis 1 ([b, c] or [b, c, h, w]).
    /// Returns the output plus the batch statistics for running-stat updates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 2 && sx.len() != 4 {
            return Err(Error::Dimension(format!("batchnorm: expected 2-D or 4-D, got {sx:?}")));
        }
        let b = sx[0];
        let c = sx[1];
        if b < 2 {
            return Err(Error::Contract(format!(
                "batchnorm train mode requires batch size >= 2, got {b}"
            )));
        }
        let spatial: usize = sx[2..].iter().product();
        let m = T::fromf((b * spatial) as f64);
        let eps = T::fromf(eps);
        let vx = &self.nodes[x.0].value;
        let vg = &self.nodes[gamma.0].value;
        let vb = &self.nodes[beta.0].value;
        if vg.len() != c || vb.len() != c {
            return Err(Error::Dimension(format!(
                "batchnorm: gamma/beta lengths {}/{} do not match {c} channels",
                vg.len(),
                vb.len()
            )));
        }
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * spatial;
                for s in 0..spatial {
                    mean[ci] = mean[ci] + vx[base + s];
                }
            }
        }
        for mu in mean.iter_mut() {
            *mu = *mu / m;
        }
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * spatial;
                for s in 0..spatial {
                    let d = vx[base + s] - mean[ci];
                    var[ci] = var[ci] + d * d;
                }
            }
        }
        for v in var.iter_mut() {
            *v = *v / m;
        }
        let mut out = vec![T::zero(); vx.len()];
        for bi in 0..b {
            for ci in 0..c {
                let inv = (var[ci] + eps).sqrt().recip();
                let base = (bi * c + ci) * spatial;
                for s in 0..spatial {
                    out[base + s] = vg[ci] * (vx[base + s] - mean[ci]) * inv + vb[ci];
                }
            }
        }
        let v = self.push(
            sx,
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean: mean.clone(),
                var: var.clone(),
                eps,
            },
        );
        Ok((v, mean, var))
    }

    /// Eval-mode batch normalization: a frozen per-channel affine map.
    pub fn channel_affine(&mut self, x: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 2 && sx.len() != 4 {
            return Err(Error::Dimension(format!("channel_affine: expected 2-D or 4-D, got {sx:?}")));
        }
        let (b, c) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        if scale.len() != c || shift.len() != c {
            return Err(Error::Dimension(format!(
                "channel_affine: {c} channels but {} scales",
                scale.len()
            )));
        }
        let vx = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); vx.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * spatial;
                for s in 0..spatial {
                    out[base + s] = scale[ci] * vx[base + s] + shift[ci];
                }
            }
        }
        Ok(self.push(sx, out, Op::ChannelAffine { x: x.0, scale: scale.to_vec() }))
    }

    // ---- reverse pass ----

    /// Propagates d(loss)/d(node) to every node reachable from `loss`.
    /// Gradients accumulate additively across uses.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.nodes[loss.0].grad[0] = self.nodes[loss.0].grad[0] + T::one();
        for i in (0..=loss.0).rev() {
            let op = self.nodes[i].op.clone();
            let g = self.nodes[i].grad.clone();
            if g.iter().all(|&v| v == T::zero()) {
                continue;
            }
            match op {
                Op::Leaf | Op::Detach => {}
                Op::Add { a, b } => {
                    self.scatter_binary(a, b, &g, |_, _| (T::one(), T::one()));
                }
                Op::Sub { a, b } => {
                    self.scatter_binary(a, b, &g, |_, _| (T::one(), -T::one()));
                }
                Op::Mul { a, b } => {
                    self.scatter_binary(a, b, &g, |x, y| (y, x));
                }
                Op::Neg { a } => {
                    for (j, &gj) in g.iter().enumerate() {
                        self.nodes[a].grad[j] = self.nodes[a].grad[j] - gj;
                    }
                }
                Op::Square { a } => {
                    for (j, &gj) in g.iter().enumerate() {
                        let x = self.nodes[a].value[j];
                        self.nodes[a].grad[j] = self.nodes[a].grad[j] + gj * (x + x);
                    }
                }
                Op::Log { a } => {
                    for (j, &gj) in g.iter().enumerate() {
                        let x = self.nodes[a].value[j];
                        self.nodes[a].grad[j] = self.nodes[a].grad[j] + gj / x;
                    }
                }
                Op::LogClamped { a, floor } => {
                    for (j, &gj) in g.iter().enumerate() {
                        let x = self.nodes[a].value[j];
                        if x > floor {
                            self.nodes[a].grad[j] = self.nodes[a].grad[j] + gj / x;
                        }
                    }
                }
                Op::Scale { a, c } => {
                    for (j, &gj) in g.iter().enumerate() {
                        self.nodes[a].grad[j] = self.nodes[a].grad[j] + gj * c;
                    }
                }
                Op::SqrtClamped { a, floor } => {
                    for (j, &gj) in g.iter().enumerate() {
                        let x = self.nodes[a].value[j];
                        if x > floor {
                            let y = self.nodes[i].value[j];
                            self.nodes[a].grad[j] =
                                self.nodes[a].grad[j] + gj / (y + y);
                        }
                    }
                }
                Op::Sigmoid { a } => {
                    for (j, &gj) in g.iter().enumerate() {
                        let y = self.nodes[i].value[j];
                        self.nodes[a].grad[j] =
                            self.nodes[a].grad[j] + gj * y * (T::one() - y);
                    }
                }
                Op::LeakyRelu { a, slope } => {
                    for (j, &gj) in g.iter().enumerate() {
                        let x = self.nodes[a].value[j];
                        let d = if x >= T::zero() { T::one() } else { slope };
                        self.nodes[a].grad[j] = self.nodes[a].grad[j] + gj * d;
                    }
                }
                Op::MeanAll { a } => {
                    let n = self.nodes[a].value.len();
                    let c = g[0] / T::fromf(n as f64);
                    for j in 0..n {
                        self.nodes[a].grad[j] = self.nodes[a].grad[j] + c;
                    }
                }
                Op::SumAll { a } => {
                    for j in 0..self.nodes[a].value.len() {
                        self.nodes[a].grad[j] = self.nodes[a].grad[j] + g[0];
                    }
                }
                Op::MeanAxes { a, ref axes } => {
                    let shape = self.nodes[a].shape.clone();
                    let count: usize = axes.iter().map(|&ax| shape[ax]).product();
                    let c = T::fromf(count as f64);
                    for flat in 0..self.nodes[a].value.len() {
                        let o = reduce_index(flat, &shape, axes);
                        self.nodes[a].grad[flat] = self.nodes[a].grad[flat] + g[o] / c;
                    }
                }
                Op::Reshape { a } => {
                    for (j, &gj) in g.iter().enumerate() {
                        self.nodes[a].grad[j] = self.nodes[a].grad[j] + gj;
                    }
                }
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let p = self.nodes[b].shape[1];
                    let va = self.nodes[a].value.clone();
                    let vb = self.nodes[b].value.clone();
                    // dA = dC . B^T
                    for ii in 0..m {
                        for l in 0..k {
                            let mut acc = T::zero();
                            for j in 0..p {
                                acc = acc + g[ii * p + j] * vb[l * p + j];
                            }
                            self.nodes[a].grad[ii * k + l] =
                                self.nodes[a].grad[ii * k + l] + acc;
                        }
                    }
                    // dB = A^T . dC
                    for l in 0..k {
                        for j in 0..p {
                            let mut acc = T::zero();
                            for ii in 0..m {
                                acc = acc + va[ii * k + l] * g[ii * p + j];
                            }
                            self.nodes[b].grad[l * p + j] =
                                self.nodes[b].grad[l * p + j] + acc;
                        }
                    }
                }
                Op::AddRow { a, bias } => {
                    let cols = self.nodes[a].shape[1];
                    for (j, &gj) in g.iter().enumerate() {
                        self.nodes[a].grad[j] = self.nodes[a].grad[j] + gj;
                        let c = j % cols;
                        self.nodes[bias].grad[c] = self.nodes[bias].grad[c] + gj;
                    }
                }
                Op::NormalizeRows { a, ref norms } => {
                    let cols = self.nodes[a].shape[1];
                    for (r, &norm) in norms.iter().enumerate() {
                        let y: Vec<T> =
                            self.nodes[i].value[r * cols..(r + 1) * cols].to_vec();
                        let gy = &g[r * cols..(r + 1) * cols];
                        let mut dot = T::zero();
                        for c in 0..cols {
                            dot = dot + y[c] * gy[c];
                        }
                        for c in 0..cols {
                            let d = (gy[c] - y[c] * dot) / norm;
                            self.nodes[a].grad[r * cols + c] =
                                self.nodes[a].grad[r * cols + c] + d;
                        }
                    }
                }
                Op::Concat { a, b } => {
                    let rows = self.nodes[a].shape[0];
                    let ca = self.nodes[a].shape[1];
                    let cb = self.nodes[b].shape[1];
                    for r in 0..rows {
                        for c in 0..ca {
                            self.nodes[a].grad[r * ca + c] =
                                self.nodes[a].grad[r * ca + c] + g[r * (ca + cb) + c];
                        }
                        for c in 0..cb {
                            self.nodes[b].grad[r * cb + c] =
                                self.nodes[b].grad[r * cb + c] + g[r * (ca + cb) + ca + c];
                        }
                    }
                }
                Op::Conv2d { x, k, bias, stride, pad } => {
                    self.conv2d_backward(i, x, k, bias, stride, pad, &g);
                }
                Op::Upsample2d { x, factor } => {
                    let sx = self.nodes[x].shape.clone();
                    let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let (oh, ow) = (h * factor, w * factor);
                    for bc in 0..b * c {
                        for oy in 0..oh {
                            let iy = oy / factor;
                            for ox in 0..ow {
                                let j = (bc * h + iy) * w + ox / factor;
                                self.nodes[x].grad[j] =
                                    self.nodes[x].grad[j] + g[(bc * oh + oy) * ow + ox];
                            }
                        }
                    }
                }
                Op::MaxPool2d { x, ref argmax } => {
                    for (o, &src) in argmax.iter().enumerate() {
                        self.nodes[x].grad[src] = self.nodes[x].grad[src] + g[o];
                    }
                }
                Op::BatchNorm { x, gamma, beta, ref mean, ref var, eps } => {
                    self.batchnorm_backward(x, gamma, beta, mean, var, eps, &g);
                }
                Op::ChannelAffine { x, ref scale, .. } => {
                    let sx = self.nodes[x].shape.clone();
                    let (b, c) = (sx[0], sx[1]);
                    let spatial: usize = sx[2..].iter().product();
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            for s in 0..spatial {
                                self.nodes[x].grad[base + s] =
                                    self.nodes[x].grad[base + s] + g[base + s] * scale[ci];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn scatter_binary(&mut self, a: usize, b: usize, g: &[T], d: impl Fn(T, T) -> (T, T)) {
        let na = self.nodes[a].value.len();
        let nb = self.nodes[b].value.len();
        for (j, &gj) in g.iter().enumerate() {
            let ja = if na == 1 { 0 } else { j };
            let jb = if nb == 1 { 0 } else { j };
            let x = self.nodes[a].value[ja];
            let y = self.nodes[b].value[jb];
            let (da, db) = d(x, y);
            self.nodes[a].grad[ja] = self.nodes[a].grad[ja] + gj * da;
            self.nodes[b].grad[jb] = self.nodes[b].grad[jb] + gj * db;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &mut self,
        out: usize,
        x: usize,
        k: usize,
        bias: usize,
        stride: usize,
        pad: usize,
        g: &[T],
    ) {
        let sx = self.nodes[x].shape.clone();
        let sk = self.nodes[k].shape.clone();
        let so = self.nodes[out].shape.clone();
        let (b, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        let (oh, ow) = (so[2], so[3]);
        let vx = self.nodes[x].value.clone();
        let vk = self.nodes[k].value.clone();
        let mut dx = vec![T::zero(); vx.len()];
        let mut dk = vec![T::zero(); vk.len()];
        let mut db = vec![T::zero(); cout];
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = g[((bi * cout + co) * oh + oy) * ow + ox];
                        if go == T::zero() {
                            continue;
                        }
                        db[co] = db[co] + go;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = ((bi * cin + ci) * h + iy as usize) * w;
                                let krow = ((co * cin + ci) * kh + ky) * kw;
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    dx[xrow + ix as usize] =
                                        dx[xrow + ix as usize] + go * vk[krow + kx];
                                    dk[krow + kx] = dk[krow + kx] + go * vx[xrow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        for (j, &v) in dx.iter().enumerate() {
            self.nodes[x].grad[j] = self.nodes[x].grad[j] + v;
        }
        for (j, &v) in dk.iter().enumerate() {
            self.nodes[k].grad[j] = self.nodes[k].grad[j] + v;
        }
        for (j, &v) in db.iter().enumerate() {
            self.nodes[bias].grad[j] = self.nodes[bias].grad[j] + v;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm_backward(
        &mut self,
        x: usize,
        gamma: usize,
        beta: usize,
        mean: &[T],
        var: &[T],
        eps: T,
        g: &[T],
    ) {
        let sx = self.nodes[x].shape.clone();
        let (b, c) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        let m = T::fromf((b * spatial) as f64);
        let vx = self.nodes[x].value.clone();
        let vg = self.nodes[gamma].value.clone();
        for ci in 0..c {
            let inv = (var[ci] + eps).sqrt().recip();
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for bi in 0..b {
                let base = (bi * c + ci) * spatial;
                for s in 0..spatial {
                    let xhat = (vx[base + s] - mean[ci]) * inv;
                    sum_dy = sum_dy + g[base + s];
                    sum_dy_xhat = sum_dy_xhat + g[base + s] * xhat;
                }
            }
            self.nodes[gamma].grad[ci] = self.nodes[gamma].grad[ci] + sum_dy_xhat;
            self.nodes[beta].grad[ci] = self.nodes[beta].grad[ci] + sum_dy;
            let gsc = vg[ci] * inv;
            for bi in 0..b {
                let base = (bi * c + ci) * spatial;
                for s in 0..spatial {
                    let xhat = (vx[base + s] - mean[ci]) * inv;
                    let d = gsc * (g[base + s] - sum_dy / m - xhat * sum_dy_xhat / m);
                    self.nodes[x].grad[base + s] = self.nodes[x].grad[base + s] + d;
                }
            }
        }
    }
}

fn reduce_index(flat: usize, shape: &[usize], axes: &[usize]) -> usize {
    let mut rem = flat;
    let mut coords = vec![0usize; shape.len()];
    for d in (0..shape.len()).rev() {
        coords[d] = rem % shape[d];
        rem /= shape[d];
    }
    let mut out = 0;
    for d in 0..shape.len() {
        if axes.contains(&d) {
            continue;
        }
        out = out * shape[d] + coords[d];
    }
    out
}

/// Central-finite-difference gradient verification, run in 64-bit mode.
///
/// Returns the maximum over coordinates of
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("grad_check eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let y = f(&mut tape, xv)?;
    if tape.value(y).len() != 1 {
        return Err(Error::Contract("grad_check requires a scalar-valued function".into()));
    }
    tape.backward(y)?;
    let analytic: Vec<f64> = tape.grad(xv).to_vec();
    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data[i] += eps;
        let mut xm = x.clone();
        xm.data[i] -= eps;
        let fp = eval_scalar(&mut f, &xp)?;
        let fm = eval_scalar(&mut f, &xm)?;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        if !a.is_finite() || !numeric.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient at coordinate {i}: analytic {a}, numeric {numeric}"
            )));
        }
        let denom = 1.0f64.max(a.abs()).max(numeric.abs());
        max_err = max_err.max((a - numeric).abs() / denom);
    }
    Ok(max_err)
}

fn eval_scalar<F>(f: &mut F, x: &Tensor<f64>) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let y = f(&mut tape, xv)?;
    let v = tape.value(y)[0];
    if !v.is_finite() {
        return Err(Error::Numerical(format!("non-finite function value {v}")));
    }
    Ok(v)
}
