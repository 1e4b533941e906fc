//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records one forward build; [`Tape::backward`] consumes it and
//! returns gradients for every trainable leaf. The op set is exactly what the
//! kernel/classifier losses need, including an SPD linear solve whose reverse
//! rule is the adjoint of `V = A^{-1} B` (so losses can differentiate through
//! Gram-matrix regression).
//!
//! Everything is `f64`; tapes are single-threaded.

mod grad_check;
mod ops;

pub use grad_check::{grad_check, GradCheckReport, ParamCheck};
pub use ops::Padding;

use crate::linalg::{self, CholeskyFactor, LinalgError, Matrix, NuggetPolicy};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum AutodiffError {
    ShapeMismatch { op: &'static str, detail: String },
    UnsupportedOp { op: &'static str, detail: String },
    NotScalar { len: usize },
    TapeConsumed,
    Linalg(LinalgError),
}

impl fmt::Display for AutodiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AutodiffError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            AutodiffError::UnsupportedOp { op, detail } => {
                write!(f, "unsupported use of {op}: {detail}")
            }
            AutodiffError::NotScalar { len } => {
                write!(f, "backward requires a scalar loss, got {len} elements")
            }
            AutodiffError::TapeConsumed => write!(f, "tape already consumed by a backward pass"),
            AutodiffError::Linalg(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for AutodiffError {}

impl From<LinalgError> for AutodiffError {
    fn from(e: LinalgError) -> Self {
        AutodiffError::Linalg(e)
    }
}

/// Dense n-dimensional array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {shape:?} expects {expected} values, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
        }
    }

    /// Marks the tensor trainable; tape leaves built from it receive gradients.
    pub fn with_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn from_matrix(m: &Matrix) -> Tensor {
        Tensor {
            shape: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
            requires_grad: false,
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix, AutodiffError> {
        if self.shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "to_matrix",
                detail: format!("expected rank 2, got {:?}", self.shape),
            });
        }
        Ok(Matrix::from_vec(self.shape[0], self.shape[1], self.data.clone())?)
    }
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    /// x * s where s is a scalar variable.
    ScaleVar { x: usize, s: usize },
    /// mul * x + add with constant coefficients.
    Affine { x: usize, mul: f64 },
    Exp(usize),
    Log(usize),
    Square(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    Matmul { a: usize, b: usize },
    /// Broadcast add of a vector over the last dimension.
    AddBias { x: usize, bias: usize },
    Reshape { x: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    GatherCols { x: usize, idx: Vec<usize> },
    PairwiseSqdist { x: usize },
    Conv2d { x: usize, w: usize, padding: Padding },
    MaxPool2x2 { x: usize, argmax: Vec<u32> },
    GlobalAvgPool { x: usize },
    /// Training-mode batch normalization; saves normalized activations.
    BatchNorm {
        x: usize,
        scale: usize,
        shift: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Per-channel y = x * mul[c] + add[c] (eval-mode normalization); only
    /// the multipliers are needed for the reverse pass.
    ChannelAffine { x: usize, mul: Vec<f64> },
    /// y = x * mask / keep_prob with a frozen 0/1 mask.
    DropoutApply { x: usize, mask: Vec<f64>, keep_inv: f64 },
    /// V = (A + eps I)^{-1} B for symmetric A, via Cholesky.
    SolveSpd { a: usize, b: usize, factor: CholeskyFactor },
    /// Sum over rows of -log softmax(logits) at the one-hot target.
    SoftmaxCrossEntropy { logits: usize, softmax: Vec<f64>, targets: Tensor },
    /// Scalar division a / b.
    DivScalar { a: usize, b: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by tape variable, produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Records a forward computation; consumed by one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
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

    /// Records a leaf; whether it is trainable follows the tensor's flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Records a constant (non-trainable) leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.with_grad(), Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, Op::Add(a.0, b.0), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, Op::Sub(a.0, b.0), needs))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul_elem", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, Op::MulElem(a.0, b.0), needs))
    }

    /// x * s with s a scalar variable; gradients reach both.
    pub fn scale_var(&mut self, x: Var, s: Var) -> Result<Var, AutodiffError> {
        if self.value(s).len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale_var",
                detail: format!("scale must be scalar, got {:?}", self.shape(s)),
            });
        }
        let sv = self.value(s).data()[0];
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v * sv).collect(),
            requires_grad: false,
        };
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::ScaleVar { x: x.0, s: s.0 }, needs))
    }

    /// mul * x + add with constants.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| mul * v + add).collect(),
            requires_grad: false,
        };
        let needs = self.needs(x);
        self.push(out, Op::Affine { x: x.0, mul }, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = map(self.value(x), f64::exp);
        let needs = self.needs(x);
        self.push(out, Op::Exp(x.0), needs)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = map(self.value(x), f64::ln);
        let needs = self.needs(x);
        self.push(out, Op::Log(x.0), needs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = map(self.value(x), |v| v * v);
        let needs = self.needs(x);
        self.push(out, Op::Square(x.0), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = map(self.value(x), |v| if v > 0.0 { v } else { 0.0 });
        let needs = self.needs(x);
        self.push(out, Op::Relu(x.0), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x.0), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f64 = v.data().iter().sum();
        let m = s / v.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x.0), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        linalg::gemm_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(&[m, n], out).expect("sized");
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Matmul { a: a.0, b: b.0 }, needs))
    }

    /// x + bias with bias broadcast over the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                detail: format!("x {:?}, bias {:?}", self.shape(x), self.shape(bias)),
            });
        }
        let xv = self.value(x);
        let bv = self.value(bias).data();
        let mut data = xv.data.clone();
        for row in data.chunks_exact_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let out = Tensor {
            shape: xv.shape.clone(),
            data,
            requires_grad: false,
        };
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias { x: x.0, bias: bias.0 }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", xv.shape),
            });
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: xv.data.clone(),
            requires_grad: false,
        };
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape { x: x.0 }, needs))
    }

    /// Copies the given rows of a rank-2 value (bitwise subset).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("expected rank 2, got {s:?}"),
            });
        }
        let cols = s[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("row {bad} out of range {}", s[0]),
            });
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&xd[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(&[idx.len(), cols], data).expect("sized");
        let needs = self.needs(x);
        Ok(self.push(t, Op::GatherRows { x: x.0, idx: idx.to_vec() }, needs))
    }

    /// Copies the given columns of a rank-2 value (bitwise subset).
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_cols",
                detail: format!("expected rank 2, got {s:?}"),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[1]) {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_cols",
                detail: format!("column {bad} out of range {}", s[1]),
            });
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * idx.len());
        for r in 0..s[0] {
            for &j in idx {
                data.push(xd[r * s[1] + j]);
            }
        }
        let t = Tensor::new(&[s[0], idx.len()], data).expect("sized");
        let needs = self.needs(x);
        Ok(self.push(t, Op::GatherCols { x: x.0, idx: idx.to_vec() }, needs))
    }

    /// D[i][j] = ||x_i - x_j||^2 for the rows of a rank-2 value.
    ///
    /// Computed from explicit row differences so the diagonal is exactly zero.
    pub fn pairwise_sqdist(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "pairwise_sqdist",
                detail: format!("expected rank 2, got {s:?}"),
            });
        }
        let (n, d) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let xi = &xd[i * d..(i + 1) * d];
            for j in (i + 1)..n {
                let xj = &xd[j * d..(j + 1) * d];
                let mut acc = 0.0;
                for (a, b) in xi.iter().zip(xj) {
                    let diff = a - b;
                    acc += diff * diff;
                }
                out[i * n + j] = acc;
                out[j * n + i] = acc;
            }
        }
        let t = Tensor::new(&[n, n], out).expect("sized");
        let needs = self.needs(x);
        Ok(self.push(t, Op::PairwiseSqdist { x: x.0 }, needs))
    }

    /// NHWC convolution, stride 1.
    pub fn conv2d(&mut self, x: Var, w: Var, padding: Padding) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[3] != ws[2] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {xs:?}, w {ws:?}"),
            });
        }
        let (n, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
        let Some((oh, ow, _, _)) = ops::conv_geometry(h, wd, kh, kw, padding) else {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than input {h}x{wd} with valid padding"),
            });
        };
        let mut out = vec![0.0; n * oh * ow * cout];
        ops::conv2d_forward(
            &mut out,
            self.value(x).data(),
            self.value(w).data(),
            n,
            h,
            wd,
            cin,
            kh,
            kw,
            cout,
            padding,
        );
        let t = Tensor::new(&[n, oh, ow, cout], out).expect("sized");
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(t, Op::Conv2d { x: x.0, w: w.0, padding }, needs))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(AutodiffError::ShapeMismatch {
                op: "maxpool2x2",
                detail: format!("expected rank 4, got {s:?}"),
            });
        }
        if s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(AutodiffError::UnsupportedOp {
                op: "maxpool2x2",
                detail: format!("spatial dims must be even, got {}x{}", s[1], s[2]),
            });
        }
        let (out, argmax) = ops::maxpool2x2_forward(self.value(x).data(), s[0], s[1], s[2], s[3]);
        let t = Tensor::new(&[s[0], s[1] / 2, s[2] / 2, s[3]], out).expect("sized");
        let needs = self.needs(x);
        Ok(self.push(t, Op::MaxPool2x2 { x: x.0, argmax }, needs))
    }

    /// Mean over both spatial dims: [n, h, w, c] -> [n, c].
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(AutodiffError::ShapeMismatch {
                op: "global_avgpool",
                detail: format!("expected rank 4, got {s:?}"),
            });
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for img in 0..n {
            let dst = &mut out[img * c..(img + 1) * c];
            for row in xd[img * h * w * c..(img + 1) * h * w * c].chunks_exact(c) {
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o += v;
                }
            }
            let inv = 1.0 / (h * w) as f64;
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
        let t = Tensor::new(&[n, c], out).expect("sized");
        let needs = self.needs(x);
        Ok(self.push(t, Op::GlobalAvgPool { x: x.0 }, needs))
    }

    /// Training-mode batch normalization over the last (channel) dimension.
    ///
    /// Returns the output plus the per-channel batch moments so callers can
    /// maintain running statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>), AutodiffError> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| AutodiffError::ShapeMismatch {
            op: "batchnorm",
            detail: "rank-0 input".into(),
        })?;
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(AutodiffError::ShapeMismatch {
                op: "batchnorm",
                detail: format!("channels {c}, scale {:?}, shift {:?}", self.shape(scale), self.shape(shift)),
            });
        }
        let xd = self.value(x).data();
        let (mean, var) = ops::channel_moments(xd, c);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        for (row_out, row_in) in xhat.chunks_exact_mut(c).zip(xd.chunks_exact(c)) {
            for (ch, (o, &v)) in row_out.iter_mut().zip(row_in).enumerate() {
                *o = (v - mean[ch]) * inv_std[ch];
            }
        }
        let sc = self.value(scale).data().to_vec();
        let sh = self.value(shift).data().to_vec();
        let mut out = vec![0.0; xd.len()];
        for (row_out, row_xh) in out.chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
            for (ch, (o, &v)) in row_out.iter_mut().zip(row_xh).enumerate() {
                *o = sc[ch] * v + sh[ch];
            }
        }
        let t = Tensor {
            shape: s,
            data: out,
            requires_grad: false,
        };
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        let v = self.push(
            t,
            Op::BatchNorm {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
                xhat,
                inv_std,
            },
            needs,
        );
        Ok((v, mean, var))
    }

    /// Per-channel affine y = x * mul[c] + add[c] (eval-mode normalization).
    pub fn channel_affine(
        &mut self,
        x: Var,
        mul: Vec<f64>,
        add: Vec<f64>,
    ) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap_or(&0);
        if mul.len() != c || add.len() != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "channel_affine",
                detail: format!("channels {c}, coefficients {}", mul.len()),
            });
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for (row_out, row_in) in out.chunks_exact_mut(c).zip(xd.chunks_exact(c)) {
            for (ch, (o, &v)) in row_out.iter_mut().zip(row_in).enumerate() {
                *o = mul[ch] * v + add[ch];
            }
        }
        let t = Tensor {
            shape: s,
            data: out,
            requires_grad: false,
        };
        let needs = self.needs(x);
        Ok(self.push(t, Op::ChannelAffine { x: x.0, mul }, needs))
    }

    /// Inverted dropout with a caller-supplied 0/1 mask.
    pub fn dropout_apply(&mut self, x: Var, mask: Vec<f64>, p: f64) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "dropout_apply",
                detail: format!("mask {} vs value {}", mask.len(), xv.len()),
            });
        }
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::UnsupportedOp {
                op: "dropout_apply",
                detail: format!("drop probability {p} outside [0, 1)"),
            });
        }
        let keep_inv = 1.0 / (1.0 - p);
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv
                .data
                .iter()
                .zip(&mask)
                .map(|(v, m)| v * m * keep_inv)
                .collect(),
            requires_grad: false,
        };
        let needs = self.needs(x);
        Ok(self.push(out, Op::DropoutApply { x: x.0, mask, keep_inv }, needs))
    }

    /// V = (A + eps I)^{-1} B for symmetric A; reverse rule is the solve adjoint.
    pub fn solve_spd(&mut self, a: Var, b: Var, policy: &NuggetPolicy) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sa[0] != sa[1] || sb.len() != 2 || sb[0] != sa[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "solve_spd",
                detail: format!("A {sa:?}, B {sb:?}"),
            });
        }
        let a_mat = self.value(a).to_matrix()?;
        let b_mat = self.value(b).to_matrix()?;
        let factor = linalg::cholesky(&a_mat, policy)?;
        let v = linalg::solve(&factor, &b_mat)?;
        let t = Tensor::from_matrix(&v);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::SolveSpd { a: a.0, b: b.0, factor }, needs))
    }

    /// Numerically stable fused softmax + cross-entropy, summed over rows.
    ///
    /// `targets` are one-hot rows and receive no gradient.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var, AutodiffError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.shape() != s {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("logits {s:?}, targets {:?}", targets.shape()),
            });
        }
        let (n, c) = (s[0], s[1]);
        let zd = self.value(logits).data();
        let mut softmax = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = &zd[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for &v in row {
                sum += (v - m).exp();
            }
            let lse = m + sum.ln();
            let trow = &targets.data()[i * c..(i + 1) * c];
            let mut dot = 0.0;
            for (&z, &t) in row.iter().zip(trow) {
                dot += z * t;
            }
            total += lse - dot;
            for (j, &v) in row.iter().enumerate() {
                softmax[i * c + j] = (v - lse).exp();
            }
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                softmax,
                targets: targets.clone(),
            },
            needs,
        ))
    }

    /// Scalar division a / b.
    pub fn div_scalar(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.value(a).len() != 1 || self.value(b).len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "div_scalar",
                detail: "both operands must be scalar".into(),
            });
        }
        let out = Tensor::scalar(self.value(a).item() / self.value(b).item());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::DivScalar { a: a.0, b: b.0 }, needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss. Consumes the tape (one backward per
    /// forward build); trainable leaves not reached by the loss get zero
    /// gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        let loss_len = self.value(loss).len();
        if loss_len != 1 {
            return Err(AutodiffError::NotScalar { len: loss_len });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![1.0]).expect("scalar"));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            // Leaves keep their accumulated gradient.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        // Unused trainable leaves get zeros.
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: usize, delta: Tensor) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let mut neg = g.clone();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                self.accumulate(grads, *b, neg);
            }
            Op::MulElem(a, b) => {
                let da = zip_map(g, &self.nodes[*b].value, |x, y| x * y);
                let db = zip_map(g, &self.nodes[*a].value, |x, y| x * y);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::ScaleVar { x, s } => {
                let sv = self.nodes[*s].value.data()[0];
                let dx = map(g, |v| v * sv);
                self.accumulate(grads, *x, dx);
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(self.nodes[*x].value.data())
                    .map(|(gv, xv)| gv * xv)
                    .sum();
                self.accumulate(grads, *s, Tensor::new(self.nodes[*s].value.shape(), vec![ds]).expect("scalar"));
            }
            Op::Affine { x, mul } => {
                let dx = map(g, |v| v * mul);
                self.accumulate(grads, *x, dx);
            }
            Op::Exp(x) => {
                let dx = zip_map(g, &self.nodes[id].value, |gv, yv| gv * yv);
                self.accumulate(grads, *x, dx);
            }
            Op::Log(x) => {
                let dx = zip_map(g, &self.nodes[*x].value, |gv, xv| gv / xv);
                self.accumulate(grads, *x, dx);
            }
            Op::Square(x) => {
                let dx = zip_map(g, &self.nodes[*x].value, |gv, xv| 2.0 * gv * xv);
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = zip_map(g, &self.nodes[*x].value, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let gv = g.item();
                let xv = &self.nodes[*x].value;
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: xv.shape.clone(),
                        data: vec![gv; xv.len()],
                        requires_grad: false,
                    },
                );
            }
            Op::Mean(x) => {
                let xv = &self.nodes[*x].value;
                let gv = g.item() / xv.len() as f64;
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: xv.shape.clone(),
                        data: vec![gv; xv.len()],
                        requires_grad: false,
                    },
                );
            }
            Op::Matmul { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.nodes[*a].needs_grad {
                    // dA = g * B^T
                    let bt = transpose(bv.data(), k, n);
                    let mut da = vec![0.0; m * k];
                    linalg::gemm_acc(&mut da, g.data(), &bt, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], da).expect("sized"));
                }
                if self.nodes[*b].needs_grad {
                    // dB = A^T * g
                    let at = transpose(av.data(), m, k);
                    let mut db = vec![0.0; k * n];
                    linalg::gemm_acc(&mut db, &at, g.data(), k, m, n);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], db).expect("sized"));
                }
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[*bias].needs_grad {
                    let c = self.nodes[*bias].value.len();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks_exact(c) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(&[c], db).expect("sized"));
                }
            }
            Op::Reshape { x } => {
                let xv = &self.nodes[*x].value;
                let t = Tensor {
                    shape: xv.shape.clone(),
                    data: g.data().to_vec(),
                    requires_grad: false,
                };
                self.accumulate(grads, *x, t);
            }
            Op::GatherRows { x, idx } => {
                let xv = &self.nodes[*x].value;
                let cols = xv.shape()[1];
                let mut dx = vec![0.0; xv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g.data()[r * cols..(r + 1) * cols];
                    let dst = &mut dx[i * cols..(i + 1) * cols];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx).expect("sized"));
            }
            Op::GatherCols { x, idx } => {
                let xv = &self.nodes[*x].value;
                let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
                let picked = idx.len();
                let mut dx = vec![0.0; xv.len()];
                for r in 0..rows {
                    for (jj, &j) in idx.iter().enumerate() {
                        dx[r * cols + j] += g.data()[r * picked + jj];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx).expect("sized"));
            }
            Op::PairwiseSqdist { x } => {
                let xv = &self.nodes[*x].value;
                let (n, d) = (xv.shape()[0], xv.shape()[1]);
                let xd = xv.data();
                let gd = g.data();
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let w = gd[i * n + j] + gd[j * n + i];
                        if w == 0.0 {
                            continue;
                        }
                        let (xi, xj) = (&xd[i * d..(i + 1) * d], &xd[j * d..(j + 1) * d]);
                        let di = &mut dx[i * d..(i + 1) * d];
                        for ((o, &a), &b) in di.iter_mut().zip(xi).zip(xj) {
                            *o += w * (a - b);
                        }
                    }
                }
                // dx_i = sum_j (g_ij + g_ji) * 2 (x_i - x_j); the loop above
                // accumulated the unscaled differences.
                for v in dx.iter_mut() {
                    *v *= 2.0;
                }
                self.accumulate(grads, *x, Tensor::new(&[n, d], dx).expect("sized"));
            }
            Op::Conv2d { x, w, padding } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let xs = xv.shape();
                let ws = wv.shape();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                ops::conv2d_backward(
                    &mut dx,
                    &mut dw,
                    xv.data(),
                    wv.data(),
                    g.data(),
                    xs[0],
                    xs[1],
                    xs[2],
                    xs[3],
                    ws[0],
                    ws[1],
                    ws[3],
                    *padding,
                );
                if self.nodes[*x].needs_grad {
                    self.accumulate(grads, *x, Tensor::new(xs, dx).expect("sized"));
                }
                if self.nodes[*w].needs_grad {
                    self.accumulate(grads, *w, Tensor::new(ws, dw).expect("sized"));
                }
            }
            Op::MaxPool2x2 { x, argmax } => {
                let xv = &self.nodes[*x].value;
                let mut dx = vec![0.0; xv.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src as usize] += g.data()[o];
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx).expect("sized"));
            }
            Op::GlobalAvgPool { x } => {
                let xv = &self.nodes[*x].value;
                let s = xv.shape();
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let inv = 1.0 / (h * w) as f64;
                let mut dx = vec![0.0; xv.len()];
                for img in 0..n {
                    let src = &g.data()[img * c..(img + 1) * c];
                    for row in dx[img * h * w * c..(img + 1) * h * w * c].chunks_exact_mut(c) {
                        for (o, &v) in row.iter_mut().zip(src) {
                            *o += v * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, dx).expect("sized"));
            }
            Op::BatchNorm { x, scale, shift, xhat, inv_std } => {
                let c = self.nodes[*scale].value.len();
                let m = (xhat.len() / c) as f64;
                let gd = g.data();
                let sc = self.nodes[*scale].value.data();
                // Channel sums of g and g * xhat.
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (grow, xrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for (ch, (&gv, &xv)) in grow.iter().zip(xrow).enumerate() {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * xv;
                    }
                }
                if self.nodes[*x].needs_grad {
                    let mut dx = vec![0.0; xhat.len()];
                    for ((drow, grow), xrow) in dx
                        .chunks_exact_mut(c)
                        .zip(gd.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                    {
                        for (ch, (o, (&gv, &xv))) in
                            drow.iter_mut().zip(grow.iter().zip(xrow)).enumerate()
                        {
                            *o = sc[ch] * inv_std[ch]
                                * (gv - sum_g[ch] / m - xv * sum_gx[ch] / m);
                        }
                    }
                    self.accumulate(
                        grads,
                        *x,
                        Tensor::new(self.nodes[*x].value.shape(), dx).expect("sized"),
                    );
                }
                if self.nodes[*scale].needs_grad {
                    self.accumulate(grads, *scale, Tensor::new(&[c], sum_gx).expect("sized"));
                }
                if self.nodes[*shift].needs_grad {
                    self.accumulate(grads, *shift, Tensor::new(&[c], sum_g).expect("sized"));
                }
            }
            Op::ChannelAffine { x, mul } => {
                let c = mul.len();
                let mut dx = vec![0.0; g.len()];
                for (drow, grow) in dx.chunks_exact_mut(c).zip(g.data().chunks_exact(c)) {
                    for (ch, (o, &gv)) in drow.iter_mut().zip(grow).enumerate() {
                        *o = gv * mul[ch];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.nodes[*x].value.shape(), dx).expect("sized"));
            }
            Op::DropoutApply { x, mask, keep_inv } => {
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(gv, m)| gv * m * keep_inv)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(self.nodes[*x].value.shape(), dx).expect("sized"));
            }
            Op::SolveSpd { a, b, factor } => {
                let v = self.nodes[id].value.to_matrix().expect("rank 2");
                let vbar = g.to_matrix().expect("rank 2");
                let (abar, bbar) = linalg::solve_adjoint(factor, &v, &vbar)
                    .expect("shapes fixed by forward");
                if self.nodes[*a].needs_grad {
                    self.accumulate(grads, *a, Tensor::from_matrix(&abar));
                }
                if self.nodes[*b].needs_grad {
                    self.accumulate(grads, *b, Tensor::from_matrix(&bbar));
                }
            }
            Op::SoftmaxCrossEntropy { logits, softmax, targets } => {
                let gv = g.item();
                let dlogits: Vec<f64> = softmax
                    .iter()
                    .zip(targets.data())
                    .map(|(p, t)| gv * (p - t))
                    .collect();
                self.accumulate(
                    grads,
                    *logits,
                    Tensor::new(self.nodes[*logits].value.shape(), dlogits).expect("sized"),
                );
            }
            Op::DivScalar { a, b } => {
                let gv = g.item();
                let av = self.nodes[*a].value.item();
                let bv = self.nodes[*b].value.item();
                self.accumulate(grads, *a, Tensor::new(self.nodes[*a].value.shape(), vec![gv / bv]).expect("scalar"));
                self.accumulate(
                    grads,
                    *b,
                    Tensor::new(self.nodes[*b].value.shape(), vec![-gv * av / (bv * bv)]).expect("scalar"),
                );
            }
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
        requires_grad: false,
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.len(), b.len());
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        requires_grad: false,
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}
