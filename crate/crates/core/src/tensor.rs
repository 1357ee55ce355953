//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] replays
//! the nodes in reverse creation order (which is a topological order) and
//! accumulates gradients, summing over fan-out. The operator set is exactly
//! what the classifier needs: same-size convolution, linear maps, multi-head
//! self-attention built from matmul/softmax primitives, layer norm, adaptive
//! max pooling, patch extraction and the usual elementwise activations.
//!
//! Storage is generic over `f32` (training) and `f64` (gradient checking).
//! Statistics-style reductions (softmax normalizers, layer norm moments,
//! means, loss sums) always accumulate in `f64`; matmul/convolution inner
//! products accumulate in native precision with a fixed lane order, so runs
//! are bit-reproducible. There is no implicit broadcasting: bias addition is
//! an explicit op.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::sync::Arc;

/// Element type of the engine.
pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn exp_s(self) -> Self;
    fn max_s(self, o: Self) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn exp_s(self) -> Self {
        self.exp()
    }
    fn max_s(self, o: Self) -> Self {
        self.max(o)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn exp_s(self) -> Self {
        self.exp()
    }
    fn max_s(self, o: Self) -> Self {
        self.max(o)
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    Shape { op: &'static str, detail: String },
    Domain { op: &'static str, detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            TensorError::Domain { op, detail } => write!(f, "domain error in {op}: {detail}"),
        }
    }
}

impl std::error::Error for TensorError {}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    Gelu(TensorId),
    Sigmoid(TensorId),
    Matmul(TensorId, TensorId),
    MatmulNt(TensorId, TensorId),
    Linear { x: TensorId, w: TensorId, b: TensorId },
    BiasRows { x: TensorId, b: TensorId },
    SoftmaxRows(TensorId),
    LayerNorm { x: TensorId, gain: TensorId, shift: TensorId },
    Conv2dSame { x: TensorId, w: TensorId, b: TensorId },
    AdaptiveMaxPool { x: TensorId, argmax: Vec<u32> },
    Patchify { x: TensorId, patch: usize },
    Reshape(TensorId),
    ConcatChannels(TensorId, TensorId),
    ColSlice { x: TensorId, start: usize, width: usize },
    ColConcat(Vec<TensorId>),
    MeanRows(TensorId),
    SumAll(TensorId),
    BceSum { prob: TensorId, labels: TensorId },
}

/// Node payload: op outputs own their buffers; leaves may share one master
/// buffer across tapes (parameters bound into many per-sample graphs).
enum Storage<T> {
    Owned(Vec<T>),
    Shared(Arc<Vec<T>>),
}

impl<T> Storage<T> {
    fn as_slice(&self) -> &[T] {
        match self {
            Storage::Owned(v) => v,
            Storage::Shared(a) => a,
        }
    }
}

impl<T> std::ops::Deref for Storage<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        self.as_slice()
    }
}

struct Node<T> {
    shape: Vec<usize>,
    data: Storage<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation: nodes in creation order, parents always first.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Layer norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Probability clamp used by the binary cross-entropy loss.
pub const BCE_EPS: f64 = 1e-7;
/// Sigmoid outputs are clamped into the open interval (0, 1).
const SIGMOID_CLAMP: f64 = 1e-7;

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC_COEF: f64 = 0.044_715;

// Fixed-order, lane-unrolled kernels. The unroll lets LLVM vectorize the
// loops while keeping one deterministic summation order per build.

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let pa = &a[i * 8..i * 8 + 8];
        let pb = &b[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] += pa[l] * pb[l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let mut sum = tail;
    for l in 0..8 {
        sum += acc[l];
    }
    sum
}

fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
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

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data: Storage::Owned(data),
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Leaf whose buffer is shared with other tapes (parameters bound into
    /// many per-sample graphs without copying).
    pub fn shared_leaf(&mut self, shape: &[usize], data: Arc<Vec<T>>, requires_grad: bool) -> TensorId {
        assert_eq!(numel(shape), data.len(), "shared leaf data length mismatch");
        self.nodes.push(Node {
            shape: shape.to_vec(),
            data: Storage::Shared(data),
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Current node count, usable with [`Tape::reset_to`] to reuse the leaf
    /// prefix of a tape across samples.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded after `mark` and clears the remaining
    /// gradients in place, keeping their allocations warm.
    pub fn reset_to(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                for v in g.iter_mut() {
                    *v = T::ZERO;
                }
            }
        }
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, shape: &[usize], data: Vec<T>) -> TensorId {
        assert_eq!(numel(shape), data.len(), "param data length mismatch");
        self.push(shape.to_vec(), data, true, Op::Leaf)
    }

    /// Non-trainable leaf (inputs, labels).
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> TensorId {
        assert_eq!(numel(shape), data.len(), "constant data length mismatch");
        self.push(shape.to_vec(), data, false, Op::Leaf)
    }

    /// Overwrites one element of a leaf. Only sound before any dependent op
    /// has been recorded; callers use it to probe finite differences.
    pub fn overwrite_leaf(&mut self, id: TensorId, coord: usize, v: T) {
        assert!(matches!(self.nodes[id.0].op, Op::Leaf), "only leaves may be overwritten");
        match &mut self.nodes[id.0].data {
            Storage::Owned(d) => d[coord] = v,
            Storage::Shared(_) => panic!("cannot overwrite a shared leaf"),
        }
    }

    // --- elementwise ---

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, k: f64) -> TensorId {
        let ks = T::from_f64(k);
        let data = self.nodes[a.0].data.iter().map(|&x| x * ks).collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| x.max_s(T::ZERO)).collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Relu(a))
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data = self
            .nodes[a.0]
            .data
            .iter()
            .map(|&x| {
                let xf = x.to_f64();
                let u = GELU_SQRT_2_OVER_PI * (xf + GELU_CUBIC_COEF * xf * xf * xf);
                T::from_f64(0.5 * xf * (1.0 + u.tanh()))
            })
            .collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data = self
            .nodes[a.0]
            .data
            .iter()
            .map(|&x| {
                let xf = x.to_f64();
                let y = if xf >= 0.0 {
                    1.0 / (1.0 + (-xf).exp())
                } else {
                    let e = xf.exp();
                    e / (1.0 + e)
                };
                T::from_f64(y.clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP))
            })
            .collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Sigmoid(a))
    }

    // --- linear algebra ---

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for kk in 0..k {
                    axpy(orow, ad[i * k + kk], &bd[kk * n..(kk + 1) * n]);
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul(a, b)))
    }

    /// `(m, k) x (n, k)^T -> (m, n)`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", format!("{sa:?} x {sb:?}^T")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::ZERO; m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                for j in 0..n {
                    out[i * n + j] = dot(arow, &bd[j * k..(j + 1) * k]);
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatmulNt(a, b)))
    }

    /// `y = W x + b` for a vector `x` of length n, `W` of shape (m, n).
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 1 || sw.len() != 2 || sb.len() != 1 || sw[1] != sx[0] || sw[0] != sb[0] {
            return Err(shape_err("linear", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (m, n) = (sw[0], sw[1]);
        let mut out = vec![T::ZERO; m];
        {
            let xd = &self.nodes[x.0].data;
            let wd = &self.nodes[w.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..m {
                out[i] = bd[i] + dot(&wd[i * n..(i + 1) * n], xd);
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(vec![m], out, rg, Op::Linear { x, w, b }))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn bias_rows(&mut self, x: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(shape_err("bias_rows", format!("x {sx:?}, b {sb:?}")));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let mut out = self.nodes[x.0].data.to_vec();
        {
            let bd = &self.nodes[b.0].data;
            for r in 0..rows {
                for c in 0..cols {
                    out[r * cols + c] += bd[c];
                }
            }
        }
        let rg = self.requires(x) || self.requires(b);
        Ok(self.push(vec![rows, cols], out, rg, Op::BiasRows { x, b }))
    }

    /// Numerically stable softmax along the last dimension of a matrix.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(shape_err("softmax_rows", format!("expected matrix, got {sx:?}")));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let mut out = vec![T::ZERO; rows * cols];
        {
            let xd = &self.nodes[x.0].data;
            for r in 0..rows {
                let row = &xd[r * cols..(r + 1) * cols];
                let mut mx = row[0];
                for &v in row {
                    mx = mx.max_s(v);
                }
                let mut sum = 0.0f64;
                for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                    let e = (v - mx).exp_s();
                    sum += e.to_f64();
                    *o = e;
                }
                let inv = T::from_f64(1.0 / sum);
                for o in &mut out[r * cols..(r + 1) * cols] {
                    *o = *o * inv;
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(vec![rows, cols], out, rg, Op::SoftmaxRows(x)))
    }

    /// Per-row standardization followed by an affine map, over (tokens, dims).
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, shift: TensorId) -> Result<TensorId, TensorError> {
        let (sx, sg, ss) = (self.shape(x), self.shape(gain), self.shape(shift));
        if sx.len() != 2 || sg != [sx[1]] || ss != [sx[1]] {
            return Err(shape_err("layer_norm", format!("x {sx:?}, gain {sg:?}, shift {ss:?}")));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let mut out = vec![T::ZERO; rows * cols];
        {
            let xd = &self.nodes[x.0].data;
            let gd = &self.nodes[gain.0].data;
            let sd = &self.nodes[shift.0].data;
            for r in 0..rows {
                let row = &xd[r * cols..(r + 1) * cols];
                let (mean, var) = row_moments(row);
                let inv = T::from_f64(1.0 / (var + LAYER_NORM_EPS).sqrt());
                let mean_t = T::from_f64(mean);
                for c in 0..cols {
                    out[r * cols + c] = gd[c] * ((row[c] - mean_t) * inv) + sd[c];
                }
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(shift);
        Ok(self.push(vec![rows, cols], out, rg, Op::LayerNorm { x, gain, shift }))
    }

    // --- convolutional / structural ---

    /// Same-size 2D convolution: odd square kernel, stride 1, zero padding.
    pub fn conv2d_same(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            return Err(shape_err("conv2d_same", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let (c_out, wc_in, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if wc_in != c_in || kh != kw || kh % 2 == 0 || sb[0] != c_out {
            return Err(shape_err(
                "conv2d_same",
                format!("kernel {sw:?} incompatible with input {sx:?} (odd square kernel required)"),
            ));
        }
        let k = kh;
        let pad = k / 2;
        let hw = h * wd;
        let mut out = vec![T::ZERO; c_out * hw];
        {
            let xd = &self.nodes[x.0].data;
            let wdat = &self.nodes[w.0].data;
            let bd = &self.nodes[b.0].data;
            for o in 0..c_out {
                let (dst, bias) = (&mut out[o * hw..(o + 1) * hw], bd[o]);
                for v in dst.iter_mut() {
                    *v = bias;
                }
                for c in 0..c_in {
                    let src = &xd[c * hw..(c + 1) * hw];
                    for dy in 0..k {
                        let oy = dy as isize - pad as isize;
                        let (y_lo, y_hi) = shift_range(h, oy);
                        for dx in 0..k {
                            let coeff = wdat[((o * c_in + c) * k + dy) * k + dx];
                            let ox = dx as isize - pad as isize;
                            let (x_lo, x_hi) = shift_range(wd, ox);
                            if y_lo >= y_hi || x_lo >= x_hi {
                                continue;
                            }
                            for y in y_lo..y_hi {
                                let orow = y * wd;
                                let irow = (y as isize + oy) as usize * wd;
                                let ix0 = (x_lo as isize + ox) as usize;
                                axpy(
                                    &mut dst[orow + x_lo..orow + x_hi],
                                    coeff,
                                    &src[irow + ix0..irow + ix0 + (x_hi - x_lo)],
                                );
                            }
                        }
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(vec![c_out, h, wd], out, rg, Op::Conv2dSame { x, w, b }))
    }

    /// Max pooling onto an (oh, ow) grid with floor-boundary regions.
    /// Gradient flows to the first maximal element in row-major scan order.
    pub fn adaptive_max_pool(&mut self, x: TensorId, oh: usize, ow: usize) -> Result<TensorId, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(shape_err("adaptive_max_pool", format!("expected C x H x W, got {sx:?}")));
        }
        let (c_n, h, w) = (sx[0], sx[1], sx[2]);
        if oh > h || ow > w || oh == 0 || ow == 0 {
            return Err(shape_err(
                "adaptive_max_pool",
                format!("cannot pool {h} x {w} onto {oh} x {ow} (upsampling not supported)"),
            ));
        }
        let mut out = vec![T::ZERO; c_n * oh * ow];
        let mut argmax = vec![0u32; c_n * oh * ow];
        {
            let xd = &self.nodes[x.0].data;
            for c in 0..c_n {
                let plane = &xd[c * h * w..(c + 1) * h * w];
                for i in 0..oh {
                    let (y0, y1) = (i * h / oh, (i + 1) * h / oh);
                    for j in 0..ow {
                        let (x0, x1) = (j * w / ow, (j + 1) * w / ow);
                        let mut best = plane[y0 * w + x0];
                        let mut best_idx = y0 * w + x0;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                let v = plane[y * w + xx];
                                if v > best {
                                    best = v;
                                    best_idx = y * w + xx;
                                }
                            }
                        }
                        let oidx = (c * oh + i) * ow + j;
                        out[oidx] = best;
                        argmax[oidx] = (c * h * w + best_idx) as u32;
                    }
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(vec![c_n, oh, ow], out, rg, Op::AdaptiveMaxPool { x, argmax }))
    }

    /// Splits C x S x S into row-major P x P patches, each flattened
    /// channel-major (channel, then patch row, then patch column).
    pub fn patchify(&mut self, x: TensorId, patch: usize) -> Result<TensorId, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[1] != sx[2] {
            return Err(shape_err("patchify", format!("expected C x S x S, got {sx:?}")));
        }
        let (c_n, s) = (sx[0], sx[1]);
        if patch == 0 || s % patch != 0 {
            return Err(shape_err("patchify", format!("side {s} not divisible by patch {patch}")));
        }
        let per_side = s / patch;
        let n = per_side * per_side;
        let dim = patch * patch * c_n;
        let mut out = vec![T::ZERO; n * dim];
        {
            let xd = &self.nodes[x.0].data;
            for pr in 0..per_side {
                for pc in 0..per_side {
                    let pi = pr * per_side + pc;
                    for c in 0..c_n {
                        for py in 0..patch {
                            let src = (c * s + pr * patch + py) * s + pc * patch;
                            let dst = pi * dim + (c * patch + py) * patch;
                            out[dst..dst + patch].copy_from_slice(&xd[src..src + patch]);
                        }
                    }
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(vec![n, dim], out, rg, Op::Patchify { x, patch }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        if numel(shape) != self.nodes[x.0].data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape(x), shape),
            ));
        }
        let data = self.nodes[x.0].data.to_vec();
        let rg = self.requires(x);
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape(x)))
    }

    /// Concatenates two C x H x W maps along the channel dimension.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(shape_err("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let mut data = Vec::with_capacity(self.nodes[a.0].data.len() + self.nodes[b.0].data.len());
        data.extend_from_slice(&self.nodes[a.0].data);
        data.extend_from_slice(&self.nodes[b.0].data);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![sa[0] + sb[0], sa[1], sa[2]], data, rg, Op::ConcatChannels(a, b)))
    }

    /// Column slice of a matrix: keeps `width` columns starting at `start`.
    pub fn col_slice(&mut self, x: TensorId, start: usize, width: usize) -> Result<TensorId, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || start + width > sx[1] || width == 0 {
            return Err(shape_err("col_slice", format!("cols {start}..{} of {sx:?}", start + width)));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&self.nodes[x.0].data[r * cols + start..r * cols + start + width]);
        }
        let rg = self.requires(x);
        Ok(self.push(vec![rows, width], out, rg, Op::ColSlice { x, start, width }))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn col_concat(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("col_concat", "no inputs".into()));
        }
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[0] != rows {
                return Err(shape_err("col_concat", format!("row mismatch: {sp:?}")));
            }
            widths.push(sp[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].data[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(vec![rows, total], out, rg, Op::ColConcat(parts.to_vec())))
    }

    /// Mean over rows of a matrix: (N, D) -> (D).
    pub fn mean_rows(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(shape_err("mean_rows", format!("expected matrix, got {sx:?}")));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let mut acc = vec![0.0f64; cols];
        for r in 0..rows {
            for c in 0..cols {
                acc[c] += self.nodes[x.0].data[r * cols + c].to_f64();
            }
        }
        let data = acc.iter().map(|&v| T::from_f64(v / rows as f64)).collect();
        let rg = self.requires(x);
        Ok(self.push(vec![cols], data, rg, Op::MeanRows(x)))
    }

    /// Sum of all elements, as a scalar node of shape [1].
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let mut acc = 0.0f64;
        for &v in self.nodes[x.0].data.iter() {
            acc += v.to_f64();
        }
        let rg = self.requires(x);
        self.push(vec![1], vec![T::from_f64(acc)], rg, Op::SumAll(x))
    }

    /// Summed per-cell binary cross-entropy against 0/1 labels, as a scalar.
    /// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_sum(&mut self, prob: TensorId, labels: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(prob) != self.shape(labels) {
            return Err(shape_err(
                "bce_sum",
                format!("{:?} vs {:?}", self.shape(prob), self.shape(labels)),
            ));
        }
        for &y in self.nodes[labels.0].data.iter() {
            let yf = y.to_f64();
            if yf != 0.0 && yf != 1.0 {
                return Err(TensorError::Domain {
                    op: "bce_sum",
                    detail: format!("label {yf} is not in {{0, 1}}"),
                });
            }
        }
        let mut acc = 0.0f64;
        for (&p, &y) in self.nodes[prob.0].data.iter().zip(self.nodes[labels.0].data.iter()) {
            let pf = p.to_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
            let yf = y.to_f64();
            acc -= yf * pf.ln() + (1.0 - yf) * (1.0 - pf).ln();
        }
        let rg = self.requires(prob);
        Ok(self.push(vec![1], vec![T::from_f64(acc)], rg, Op::BceSum { prob, labels }))
    }

    // --- composites ---

    /// Standard scaled dot-product multi-head self-attention over (N, D) tokens.
    pub fn multi_head_self_attention(
        &mut self,
        z: TensorId,
        p: &AttentionParams,
        heads: usize,
    ) -> Result<TensorId, TensorError> {
        let sz = self.shape(z).to_vec();
        if sz.len() != 2 {
            return Err(shape_err("multi_head_self_attention", format!("expected tokens, got {sz:?}")));
        }
        let d = sz[1];
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "multi_head_self_attention",
                format!("embed dim {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let q = self.matmul_nt(z, p.wq)?;
        let q = self.bias_rows(q, p.bq)?;
        let k = self.matmul_nt(z, p.wk)?;
        let k = self.bias_rows(k, p.bk)?;
        let v = self.matmul_nt(z, p.wv)?;
        let v = self.bias_rows(v, p.bv)?;
        let mut head_outs = Vec::with_capacity(heads);
        for hsel in 0..heads {
            let qh = self.col_slice(q, hsel * dh, dh)?;
            let kh = self.col_slice(k, hsel * dh, dh)?;
            let vh = self.col_slice(v, hsel * dh, dh)?;
            let scores = self.matmul_nt(qh, kh)?;
            let scaled = self.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = self.softmax_rows(scaled)?;
            head_outs.push(self.matmul(attn, vh)?);
        }
        let cat = self.col_concat(&head_outs)?;
        let out = self.matmul_nt(cat, p.wo)?;
        self.bias_rows(out, p.bo)
    }

    /// Tokenwise two-layer feed-forward network with GELU.
    pub fn feed_forward(
        &mut self,
        z: TensorId,
        w1: TensorId,
        b1: TensorId,
        w2: TensorId,
        b2: TensorId,
    ) -> Result<TensorId, TensorError> {
        let h = self.matmul_nt(z, w1)?;
        let h = self.bias_rows(h, b1)?;
        let h = self.gelu(h);
        let out = self.matmul_nt(h, w2)?;
        self.bias_rows(out, b2)
    }

    // --- reverse pass ---

    /// Reverse-topological gradient accumulation from a scalar loss.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if numel(self.shape(loss)) != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        self.nodes[loss.0].grad = Some(vec![T::ONE]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let g = self.nodes[id].grad.take().unwrap();
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            self.backprop_op(id, &op, &g);
            self.nodes[id].op = op;
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn take_grad(&mut self, id: TensorId) -> Vec<T> {
        let n = &mut self.nodes[id.0];
        n.grad.take().unwrap_or_else(|| vec![T::ZERO; n.data.len()])
    }

    fn put_grad(&mut self, id: TensorId, g: Vec<T>) {
        self.nodes[id.0].grad = Some(g);
    }

    fn backprop_op(&mut self, out: usize, op: &Op, g: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &p in &[a, b] {
                    if self.requires(p) {
                        let mut gp = self.take_grad(p);
                        axpy(&mut gp, T::ONE, g);
                        self.put_grad(p, gp);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires(a) {
                    let mut ga = self.take_grad(a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * self.nodes[b.0].data[i];
                    }
                    self.put_grad(a, ga);
                }
                if self.requires(b) {
                    let mut gb = self.take_grad(b);
                    for i in 0..g.len() {
                        gb[i] += g[i] * self.nodes[a.0].data[i];
                    }
                    self.put_grad(b, gb);
                }
            }
            Op::Scale(a, k) => {
                if self.requires(a) {
                    let mut ga = self.take_grad(a);
                    axpy(&mut ga, T::from_f64(k), g);
                    self.put_grad(a, ga);
                }
            }
            Op::Relu(a) => {
                if self.requires(a) {
                    let mut ga = self.take_grad(a);
                    for i in 0..g.len() {
                        if self.nodes[a.0].data[i] > T::ZERO {
                            ga[i] += g[i];
                        }
                    }
                    self.put_grad(a, ga);
                }
            }
            Op::Gelu(a) => {
                if self.requires(a) {
                    let mut ga = self.take_grad(a);
                    for i in 0..g.len() {
                        let x = self.nodes[a.0].data[i].to_f64();
                        let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEF * x * x * x);
                        let t = u.tanh();
                        let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC_COEF * x * x);
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                        ga[i] += g[i] * T::from_f64(d);
                    }
                    self.put_grad(a, ga);
                }
            }
            Op::Sigmoid(a) => {
                if self.requires(a) {
                    let mut ga = self.take_grad(a);
                    for i in 0..g.len() {
                        let y = self.nodes[out].data[i];
                        ga[i] += g[i] * y * (T::ONE - y);
                    }
                    self.put_grad(a, ga);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.requires(a) {
                    let mut ga = self.take_grad(a);
                    let bd = &self.nodes[b.0].data;
                    for i in 0..m {
                        for kk in 0..k {
                            ga[i * k + kk] += dot(&g[i * n..(i + 1) * n], &bd[kk * n..(kk + 1) * n]);
                        }
                    }
                    self.put_grad(a, ga);
                }
                if self.requires(b) {
                    let mut gb = self.take_grad(b);
                    let ad = &self.nodes[a.0].data;
                    for i in 0..m {
                        for kk in 0..k {
                            axpy(&mut gb[kk * n..(kk + 1) * n], ad[i * k + kk], &g[i * n..(i + 1) * n]);
                        }
                    }
                    self.put_grad(b, gb);
                }
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                if self.requires(a) {
                    let mut ga = self.take_grad(a);
                    let bd = &self.nodes[b.0].data;
                    for i in 0..m {
                        for j in 0..n {
                            axpy(&mut ga[i * k..(i + 1) * k], g[i * n + j], &bd[j * k..(j + 1) * k]);
                        }
                    }
                    self.put_grad(a, ga);
                }
                if self.requires(b) {
                    let mut gb = self.take_grad(b);
                    let ad = &self.nodes[a.0].data;
                    for i in 0..m {
                        for j in 0..n {
                            axpy(&mut gb[j * k..(j + 1) * k], g[i * n + j], &ad[i * k..(i + 1) * k]);
                        }
                    }
                    self.put_grad(b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, n) = (self.nodes[w.0].shape[0], self.nodes[w.0].shape[1]);
                if self.requires(x) {
                    let mut gx = self.take_grad(x);
                    let wd = &self.nodes[w.0].data;
                    for i in 0..m {
                        axpy(&mut gx, g[i], &wd[i * n..(i + 1) * n]);
                    }
                    self.put_grad(x, gx);
                }
                if self.requires(w) {
                    let mut gw = self.take_grad(w);
                    let xd = &self.nodes[x.0].data;
                    for i in 0..m {
                        axpy(&mut gw[i * n..(i + 1) * n], g[i], xd);
                    }
                    self.put_grad(w, gw);
                }
                if self.requires(b) {
                    let mut gb = self.take_grad(b);
                    axpy(&mut gb, T::ONE, g);
                    self.put_grad(b, gb);
                }
            }
            Op::BiasRows { x, b } => {
                let cols = self.nodes[b.0].shape[0];
                let rows = g.len() / cols;
                if self.requires(x) {
                    let mut gx = self.take_grad(x);
                    axpy(&mut gx, T::ONE, g);
                    self.put_grad(x, gx);
                }
                if self.requires(b) {
                    let mut gb = self.take_grad(b);
                    for r in 0..rows {
                        axpy(&mut gb, T::ONE, &g[r * cols..(r + 1) * cols]);
                    }
                    self.put_grad(b, gb);
                }
            }
            Op::SoftmaxRows(x) => {
                if self.requires(x) {
                    let cols = self.nodes[x.0].shape[1];
                    let rows = self.nodes[x.0].shape[0];
                    let mut gx = self.take_grad(x);
                    for r in 0..rows {
                        let y = &self.nodes[out].data[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut s = 0.0f64;
                        for c in 0..cols {
                            s += (gr[c] * y[c]).to_f64();
                        }
                        let st = T::from_f64(s);
                        for c in 0..cols {
                            gx[r * cols + c] += y[c] * (gr[c] - st);
                        }
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::LayerNorm { x, gain, shift } => {
                let (rows, cols) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                for r in 0..rows {
                    let row: Vec<f64> = self.nodes[x.0].data[r * cols..(r + 1) * cols]
                        .iter()
                        .map(|v| v.to_f64())
                        .collect();
                    let (mean, var) = row_moments_f64(&row);
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let gr = &g[r * cols..(r + 1) * cols];
                    if self.requires(gain) {
                        let mut gg = self.take_grad(gain);
                        for c in 0..cols {
                            gg[c] += gr[c] * T::from_f64(xhat[c]);
                        }
                        self.put_grad(gain, gg);
                    }
                    if self.requires(shift) {
                        let mut gs = self.take_grad(shift);
                        axpy(&mut gs, T::ONE, gr);
                        self.put_grad(shift, gs);
                    }
                    if self.requires(x) {
                        let gaind = &self.nodes[gain.0].data;
                        let a: Vec<f64> = (0..cols).map(|c| gr[c].to_f64() * gaind[c].to_f64()).collect();
                        let mean_a = a.iter().sum::<f64>() / cols as f64;
                        let mean_ax = a.iter().zip(&xhat).map(|(&ai, &xi)| ai * xi).sum::<f64>() / cols as f64;
                        let mut gx = self.take_grad(x);
                        for c in 0..cols {
                            gx[r * cols + c] += T::from_f64((a[c] - mean_a - xhat[c] * mean_ax) * inv);
                        }
                        self.put_grad(x, gx);
                    }
                }
            }
            Op::Conv2dSame { x, w, b } => {
                let (c_in, h, wd) = (
                    self.nodes[x.0].shape[0],
                    self.nodes[x.0].shape[1],
                    self.nodes[x.0].shape[2],
                );
                let (c_out, k) = (self.nodes[w.0].shape[0], self.nodes[w.0].shape[2]);
                let pad = k / 2;
                let hw = h * wd;
                if self.requires(b) {
                    let mut gb = self.take_grad(b);
                    for o in 0..c_out {
                        let mut acc = 0.0f64;
                        for &v in &g[o * hw..(o + 1) * hw] {
                            acc += v.to_f64();
                        }
                        gb[o] += T::from_f64(acc);
                    }
                    self.put_grad(b, gb);
                }
                if self.requires(x) {
                    let mut gx = self.take_grad(x);
                    let wdat = &self.nodes[w.0].data;
                    for o in 0..c_out {
                        let gout = &g[o * hw..(o + 1) * hw];
                        for c in 0..c_in {
                            let dst = &mut gx[c * hw..(c + 1) * hw];
                            for dy in 0..k {
                                let oy = dy as isize - pad as isize;
                                let (y_lo, y_hi) = shift_range(h, oy);
                                for dx in 0..k {
                                    let coeff = wdat[((o * c_in + c) * k + dy) * k + dx];
                                    let ox = dx as isize - pad as isize;
                                    let (x_lo, x_hi) = shift_range(wd, ox);
                                    if y_lo >= y_hi || x_lo >= x_hi {
                                        continue;
                                    }
                                    for y in y_lo..y_hi {
                                        let orow = y * wd;
                                        let irow = (y as isize + oy) as usize * wd;
                                        let ix0 = (x_lo as isize + ox) as usize;
                                        axpy(
                                            &mut dst[irow + ix0..irow + ix0 + (x_hi - x_lo)],
                                            coeff,
                                            &gout[orow + x_lo..orow + x_hi],
                                        );
                                    }
                                }
                            }
                        }
                    }
                    self.put_grad(x, gx);
                }
                if self.requires(w) {
                    let mut gw = self.take_grad(w);
                    let xd = &self.nodes[x.0].data;
                    for o in 0..c_out {
                        let gout = &g[o * hw..(o + 1) * hw];
                        for c in 0..c_in {
                            let src = &xd[c * hw..(c + 1) * hw];
                            for dy in 0..k {
                                let oy = dy as isize - pad as isize;
                                let (y_lo, y_hi) = shift_range(h, oy);
                                for dx in 0..k {
                                    let ox = dx as isize - pad as isize;
                                    let (x_lo, x_hi) = shift_range(wd, ox);
                                    if y_lo >= y_hi || x_lo >= x_hi {
                                        continue;
                                    }
                                    let mut acc = T::ZERO;
                                    for y in y_lo..y_hi {
                                        let orow = y * wd;
                                        let irow = (y as isize + oy) as usize * wd;
                                        let ix0 = (x_lo as isize + ox) as usize;
                                        acc += dot(
                                            &gout[orow + x_lo..orow + x_hi],
                                            &src[irow + ix0..irow + ix0 + (x_hi - x_lo)],
                                        );
                                    }
                                    gw[((o * c_in + c) * k + dy) * k + dx] += acc;
                                }
                            }
                        }
                    }
                    self.put_grad(w, gw);
                }
            }
            Op::AdaptiveMaxPool { x, ref argmax } => {
                if self.requires(x) {
                    let mut gx = self.take_grad(x);
                    for (i, &src) in argmax.iter().enumerate() {
                        gx[src as usize] += g[i];
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::Patchify { x, patch } => {
                if self.requires(x) {
                    let (c_n, s) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let per_side = s / patch;
                    let dim = patch * patch * c_n;
                    let mut gx = self.take_grad(x);
                    for pr in 0..per_side {
                        for pc in 0..per_side {
                            let pi = pr * per_side + pc;
                            for c in 0..c_n {
                                for py in 0..patch {
                                    let dst = (c * s + pr * patch + py) * s + pc * patch;
                                    let src = pi * dim + (c * patch + py) * patch;
                                    axpy(&mut gx[dst..dst + patch], T::ONE, &g[src..src + patch]);
                                }
                            }
                        }
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::Reshape(x) => {
                if self.requires(x) {
                    let mut gx = self.take_grad(x);
                    axpy(&mut gx, T::ONE, g);
                    self.put_grad(x, gx);
                }
            }
            Op::ConcatChannels(a, b) => {
                let na = self.nodes[a.0].data.len();
                if self.requires(a) {
                    let mut ga = self.take_grad(a);
                    axpy(&mut ga, T::ONE, &g[..na]);
                    self.put_grad(a, ga);
                }
                if self.requires(b) {
                    let mut gb = self.take_grad(b);
                    axpy(&mut gb, T::ONE, &g[na..]);
                    self.put_grad(b, gb);
                }
            }
            Op::ColSlice { x, start, width } => {
                if self.requires(x) {
                    let cols = self.nodes[x.0].shape[1];
                    let rows = self.nodes[x.0].shape[0];
                    let mut gx = self.take_grad(x);
                    for r in 0..rows {
                        axpy(
                            &mut gx[r * cols + start..r * cols + start + width],
                            T::ONE,
                            &g[r * width..(r + 1) * width],
                        );
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::ColConcat(ref parts) => {
                let rows = self.nodes[parts[0].0].shape[0];
                let total: usize = parts.iter().map(|p| self.nodes[p.0].shape[1]).sum();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if self.requires(p) {
                        let mut gp = self.take_grad(p);
                        for r in 0..rows {
                            axpy(&mut gp[r * w..(r + 1) * w], T::ONE, &g[r * total + offset..r * total + offset + w]);
                        }
                        self.put_grad(p, gp);
                    }
                    offset += w;
                }
            }
            Op::MeanRows(x) => {
                if self.requires(x) {
                    let (rows, cols) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let inv = T::from_f64(1.0 / rows as f64);
                    let mut gx = self.take_grad(x);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += g[c] * inv;
                        }
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::SumAll(x) => {
                if self.requires(x) {
                    let mut gx = self.take_grad(x);
                    let gs = g[0];
                    for v in gx.iter_mut() {
                        *v += gs;
                    }
                    self.put_grad(x, gx);
                }
            }
            Op::BceSum { prob, labels } => {
                if self.requires(prob) {
                    let mut gp = self.take_grad(prob);
                    let gs = g[0].to_f64();
                    for i in 0..gp.len() {
                        let raw = self.nodes[prob.0].data[i].to_f64();
                        // The clamp has zero slope outside its interval.
                        if raw < BCE_EPS || raw > 1.0 - BCE_EPS {
                            continue;
                        }
                        let y = self.nodes[labels.0].data[i].to_f64();
                        gp[i] += T::from_f64(gs * (raw - y) / (raw * (1.0 - raw)));
                    }
                    self.put_grad(prob, gp);
                }
            }
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Weight handles for one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
}

fn shift_range(extent: usize, offset: isize) -> (usize, usize) {
    let lo = if offset < 0 { (-offset) as usize } else { 0 };
    let hi = if offset > 0 {
        extent.saturating_sub(offset as usize)
    } else {
        extent
    };
    (lo.min(extent), hi)
}

fn row_moments<T: Scalar>(row: &[T]) -> (f64, f64) {
    let vals: Vec<f64> = row.iter().map(|v| v.to_f64()).collect();
    row_moments_f64(&vals)
}

fn row_moments_f64(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}
