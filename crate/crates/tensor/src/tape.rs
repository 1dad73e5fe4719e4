//! Gradient tape: eager forward execution with recorded operations,
//! replayed in reverse for backpropagation.
//!
//! Handles are plain indices into the tape, so a whole graph lives in one
//! allocation arena and can be dropped at once after an optimizer step.
//! A tape is single-threaded by contract; independent tapes (one per
//! training job) may run on different threads.

use crate::conv;
use crate::{Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Zero-norm guard used inside `squash` and the norm gradient.
const SQUASH_EPS: f64 = 1e-9;

#[derive(Debug, Clone)]
enum Op<T> {
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, factor: T },
    AddScalar { a: TensorId },
    Relu { a: TensorId },
    LeakyRelu { a: TensorId, slope: T },
    Sigmoid { a: TensorId },
    Tanh { a: TensorId },
    Ln { a: TensorId },
    Sum { a: TensorId },
    Matmul { a: TensorId, b: TensorId },
    Conv2d { input: TensorId, kernels: TensorId, stride: usize },
    ConvTranspose2d { input: TensorId, kernels: TensorId, stride: usize },
    Pad2d { a: TensorId, pad: usize },
    CropCenter { a: TensorId },
    AddChannelBias { a: TensorId, bias: TensorId },
    Softmax { a: TensorId, axis: usize },
    Reshape { a: TensorId },
    SquashRows { a: TensorId },
    RowNorms { a: TensorId },
    CapsPredict { poses: TensorId, weights: TensorId },
    WeightedCapsSum { couplings: TensorId, predictions: TensorId },
    CapsAgreement { predictions: TensorId, outputs: TensorId },
    MaskRows { a: TensorId, mask: TensorId },
    InstanceNorm { a: TensorId, eps: T },
}

/// Reverse-mode differentiation tape over [`Tensor`] nodes.
pub struct Tape<T> {
    nodes: Vec<Tensor<T>>,
    records: Vec<(Op<T>, TensorId)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), records: Vec::new() }
    }

    /// Insert a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<T>) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(t);
        id
    }

    /// Insert a non-differentiable input.
    pub fn constant(&mut self, mut t: Tensor<T>) -> TensorId {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Insert a trainable parameter (gradient will be accumulated).
    pub fn param(&mut self, mut t: Tensor<T>) -> TensorId {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].shape()
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        self.nodes[id.0].data()
    }

    /// Gradient accumulated by the last `backward` call, if any reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op<T>, out: Tensor<T>, name: &'static str) -> Result<TensorId> {
        if !out.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let id = TensorId(self.nodes.len());
        self.nodes.push(out);
        // Ops feeding only constants are not replayed; inference passes
        // leave the record list empty.
        if self.nodes[id.0].requires_grad() {
            self.records.push((op, id));
        }
        Ok(id)
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad())
    }

    fn require_equal_shapes(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.require_equal_shapes("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let mut out = Tensor::new(self.shape(a).to_vec(), data)?;
        out.set_requires_grad(self.any_grad(&[a, b]));
        self.push(Op::Add { a, b }, out, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.require_equal_shapes("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let mut out = Tensor::new(self.shape(a).to_vec(), data)?;
        out.set_requires_grad(self.any_grad(&[a, b]));
        self.push(Op::Sub { a, b }, out, "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.require_equal_shapes("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let mut out = Tensor::new(self.shape(a).to_vec(), data)?;
        out.set_requires_grad(self.any_grad(&[a, b]));
        self.push(Op::Mul { a, b }, out, "mul")
    }

    pub fn scale(&mut self, a: TensorId, factor: T) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| x * factor).collect();
        let mut out = Tensor::new(self.shape(a).to_vec(), data)?;
        out.set_requires_grad(self.any_grad(&[a]));
        self.push(Op::Scale { a, factor }, out, "scale")
    }

    pub fn add_scalar(&mut self, a: TensorId, offset: T) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| x + offset).collect();
        let mut out = Tensor::new(self.shape(a).to_vec(), data)?;
        out.set_requires_grad(self.any_grad(&[a]));
        self.push(Op::AddScalar { a }, out, "add_scalar")
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let mut out = Tensor::new(self.shape(a).to_vec(), data)?;
        out.set_requires_grad(self.any_grad(&[a]));
        self.push(Op::Relu { a }, out, "relu")
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: T) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| if x > T::zero() { x } else { x * slope }).collect();
        let mut out = Tensor::new(self.shape(a).to_vec(), data)?;
        out.set_requires_grad(self.any_grad(&[a]));
        self.push(Op::LeakyRelu { a, slope }, out, "leaky_relu")
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let one = T::one();
        let data = self.data(a).iter().map(|&x| one / (one + (-x).exp())).collect();
        let mut out = Tensor::new(self.shape(a).to_vec(), data)?;
        out.set_requires_grad(self.any_grad(&[a]));
        self.push(Op::Sigmoid { a }, out, "sigmoid")
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| x.tanh()).collect();
        let mut out = Tensor::new(self.shape(a).to_vec(), data)?;
        out.set_requires_grad(self.any_grad(&[a]));
        self.push(Op::Tanh { a }, out, "tanh")
    }

    /// Natural log; negative or zero inputs surface as a non-finite error.
    pub fn ln(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| x.ln()).collect();
        let mut out = Tensor::new(self.shape(a).to_vec(), data)?;
        out.set_requires_grad(self.any_grad(&[a]));
        self.push(Op::Ln { a }, out, "ln")
    }

    /// Full reduction to a `[1]` scalar.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let total = self.data(a).iter().copied().sum();
        let mut out = Tensor::scalar(total);
        out.set_requires_grad(self.any_grad(&[a]));
        self.push(Op::Sum { a }, out, "sum")
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(a), self.data(b), &mut data);
        let mut out = Tensor::new(vec![m, n], data)?;
        out.set_requires_grad(self.any_grad(&[a, b]));
        self.push(Op::Matmul { a, b }, out, "matmul")
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} as {shape:?}", self.shape(a)),
            });
        }
        let mut out = Tensor::new(shape, self.data(a).to_vec())?;
        out.set_requires_grad(self.any_grad(&[a]));
        self.push(Op::Reshape { a }, out, "reshape")
    }

    // ── convolution ──────────────────────────────────────────────────

    /// Valid 2-D convolution: `input [H,W,Cin]`, `kernels [k,k,Cin,Cout]`.
    pub fn conv2d(&mut self, input: TensorId, kernels: TensorId, stride: usize) -> Result<TensorId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels).to_vec();
        if si.len() != 3 || sk.len() != 4 || sk[0] != sk[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {si:?}, kernels {sk:?}"),
            });
        }
        if sk[2] != si[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {} vs kernel {}", si[2], sk[2]),
            });
        }
        if stride < 1 {
            return Err(TensorError::InvalidArgument { op: "conv2d", detail: "stride < 1".into() });
        }
        let (h, w, cin) = (si[0], si[1], si[2]);
        let (k, cout) = (sk[0], sk[3]);
        if k > h || k > w {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: format!("kernel {k} larger than input {h}x{w}"),
            });
        }
        let oh = conv::conv_out_size(h, k, stride);
        let ow = conv::conv_out_size(w, k, stride);
        let data = conv::conv2d_forward(self.data(input), h, w, cin, self.data(kernels), k, cout, stride);
        let mut out = Tensor::new(vec![oh, ow, cout], data)?;
        out.set_requires_grad(self.any_grad(&[input, kernels]));
        self.push(Op::Conv2d { input, kernels, stride }, out, "conv2d")
    }

    /// Transposed convolution: `input [H,W,Cin]`, `kernels [k,k,Cout,Cin]`,
    /// full `(H-1)s+k` output (crop separately if needed). Forward here is
    /// the adjoint of [`Tape::conv2d`] with the same kernel tensor.
    pub fn conv_transpose2d(&mut self, input: TensorId, kernels: TensorId, stride: usize) -> Result<TensorId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels).to_vec();
        if si.len() != 3 || sk.len() != 4 || sk[0] != sk[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("input {si:?}, kernels {sk:?}"),
            });
        }
        if sk[3] != si[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("input channels {} vs kernel {}", si[2], sk[3]),
            });
        }
        if stride < 1 {
            return Err(TensorError::InvalidArgument { op: "conv_transpose2d", detail: "stride < 1".into() });
        }
        let (h, w, cin) = (si[0], si[1], si[2]);
        let (k, cout) = (sk[0], sk[2]);
        let oh = conv::conv_transpose_out_size(h, k, stride);
        let ow = conv::conv_transpose_out_size(w, k, stride);
        let data = conv::conv_transpose2d_forward(self.data(input), h, w, cin, self.data(kernels), k, cout, stride);
        let mut out = Tensor::new(vec![oh, ow, cout], data)?;
        out.set_requires_grad(self.any_grad(&[input, kernels]));
        self.push(Op::ConvTranspose2d { input, kernels, stride }, out, "conv_transpose2d")
    }

    /// Zero-pad `pad` pixels on each spatial side of `[H,W,C]`.
    pub fn pad2d(&mut self, a: TensorId, pad: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch { op: "pad2d", detail: format!("{s:?}") });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (nh, nw) = (h + 2 * pad, w + 2 * pad);
        let mut data = vec![T::zero(); nh * nw * c];
        for y in 0..h {
            let src = y * w * c;
            let dst = ((y + pad) * nw + pad) * c;
            data[dst..dst + w * c].copy_from_slice(&self.data(a)[src..src + w * c]);
        }
        let mut out = Tensor::new(vec![nh, nw, c], data)?;
        out.set_requires_grad(self.any_grad(&[a]));
        self.push(Op::Pad2d { a, pad }, out, "pad2d")
    }

    /// Centered spatial crop of `[H,W,C]` to `[oh,ow,C]`.
    pub fn crop_center(&mut self, a: TensorId, oh: usize, ow: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || oh > s[0] || ow > s[1] {
            return Err(TensorError::ShapeMismatch {
                op: "crop_center",
                detail: format!("{s:?} to {oh}x{ow}"),
            });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (dy, dx) = ((h - oh) / 2, (w - ow) / 2);
        let mut data = vec![T::zero(); oh * ow * c];
        for y in 0..oh {
            let src = ((y + dy) * w + dx) * c;
            let dst = y * ow * c;
            data[dst..dst + ow * c].copy_from_slice(&self.data(a)[src..src + ow * c]);
        }
        let mut out = Tensor::new(vec![oh, ow, c], data)?;
        out.set_requires_grad(self.any_grad(&[a]));
        self.push(Op::CropCenter { a }, out, "crop_center")
    }

    /// Add a `[C]` bias along the last axis of `a`.
    pub fn add_channel_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        let c = *s.last().expect("non-empty shape");
        if self.shape(bias) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                detail: format!("bias {:?} vs channels {c}", self.shape(bias)),
            });
        }
        let bdat = self.data(bias).to_vec();
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bdat[i % c])
            .collect();
        let mut out = Tensor::new(s, data)?;
        out.set_requires_grad(self.any_grad(&[a, bias]));
        self.push(Op::AddChannelBias { a, bias }, out, "add_channel_bias")
    }

    // ── nonlinear blocks ─────────────────────────────────────────────

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                detail: format!("axis {axis} for shape {s:?}"),
            });
        }
        let data = softmax_forward(self.data(a), &s, axis);
        let mut out = Tensor::new(s, data)?;
        out.set_requires_grad(self.any_grad(&[a]));
        self.push(Op::Softmax { a, axis }, out, "softmax")
    }

    /// Vector squash per row of `[R,D]`: v = (|s|^2 / (1+|s|^2)) * s/|s|,
    /// with an epsilon guard at zero.
    pub fn squash_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "squash_rows", detail: format!("{s:?}") });
        }
        let (r, d) = (s[0], s[1]);
        let eps = T::from_f64x(SQUASH_EPS);
        let src = self.data(a);
        let mut data = vec![T::zero(); r * d];
        for i in 0..r {
            let row = &src[i * d..(i + 1) * d];
            let sq: T = row.iter().map(|&x| x * x).sum();
            let g = (sq / (T::one() + sq)) / (sq + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = row[j] * g;
            }
        }
        let mut out = Tensor::new(s, data)?;
        out.set_requires_grad(self.any_grad(&[a]));
        self.push(Op::SquashRows { a }, out, "squash_rows")
    }

    /// Euclidean norm of each row of `[R,D]` -> `[R]`. Exact at zero, with
    /// a guarded gradient.
    pub fn row_norms(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "row_norms", detail: format!("{s:?}") });
        }
        let (r, d) = (s[0], s[1]);
        let src = self.data(a);
        let data: Vec<T> = (0..r)
            .map(|i| src[i * d..(i + 1) * d].iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let mut out = Tensor::new(vec![r], data)?;
        out.set_requires_grad(self.any_grad(&[a]));
        self.push(Op::RowNorms { a }, out, "row_norms")
    }

    /// Per-pair capsule prediction: `poses [N,Din]` x `weights [N,C,Din,Dout]`
    /// -> `[N,C,Dout]`.
    pub fn caps_predict(&mut self, poses: TensorId, weights: TensorId) -> Result<TensorId> {
        let sp = self.shape(poses).to_vec();
        let sw = self.shape(weights).to_vec();
        if sp.len() != 2 || sw.len() != 4 || sw[0] != sp[0] || sw[2] != sp[1] {
            return Err(TensorError::ShapeMismatch {
                op: "caps_predict",
                detail: format!("poses {sp:?}, weights {sw:?}"),
            });
        }
        let (n, din) = (sp[0], sp[1]);
        let (c, dout) = (sw[1], sw[3]);
        let u = self.data(poses);
        let wt = self.data(weights);
        let mut data = vec![T::zero(); n * c * dout];
        for i in 0..n {
            let urow = &u[i * din..(i + 1) * din];
            for j in 0..c {
                let wbase = (i * c + j) * din * dout;
                let obase = (i * c + j) * dout;
                for di in 0..din {
                    let ui = urow[di];
                    let wrow = &wt[wbase + di * dout..wbase + (di + 1) * dout];
                    for e in 0..dout {
                        data[obase + e] += ui * wrow[e];
                    }
                }
            }
        }
        let mut out = Tensor::new(vec![n, c, dout], data)?;
        out.set_requires_grad(self.any_grad(&[poses, weights]));
        self.push(Op::CapsPredict { poses, weights }, out, "caps_predict")
    }

    /// Coupled sum of predictions: `couplings [N,C]` x `predictions [N,C,D]`
    /// -> `[C,D]`.
    pub fn weighted_caps_sum(&mut self, couplings: TensorId, predictions: TensorId) -> Result<TensorId> {
        let sc = self.shape(couplings).to_vec();
        let sp = self.shape(predictions).to_vec();
        if sc.len() != 2 || sp.len() != 3 || sc[0] != sp[0] || sc[1] != sp[1] {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_caps_sum",
                detail: format!("couplings {sc:?}, predictions {sp:?}"),
            });
        }
        let (n, c, d) = (sp[0], sp[1], sp[2]);
        let cc = self.data(couplings);
        let u = self.data(predictions);
        let mut data = vec![T::zero(); c * d];
        for i in 0..n {
            for j in 0..c {
                let w = cc[i * c + j];
                let ub = (i * c + j) * d;
                for e in 0..d {
                    data[j * d + e] += w * u[ub + e];
                }
            }
        }
        let mut out = Tensor::new(vec![c, d], data)?;
        out.set_requires_grad(self.any_grad(&[couplings, predictions]));
        self.push(Op::WeightedCapsSum { couplings, predictions }, out, "weighted_caps_sum")
    }

    /// Agreement dot products: `predictions [N,C,D]` x `outputs [C,D]` -> `[N,C]`.
    pub fn caps_agreement(&mut self, predictions: TensorId, outputs: TensorId) -> Result<TensorId> {
        let sp = self.shape(predictions).to_vec();
        let sv = self.shape(outputs).to_vec();
        if sp.len() != 3 || sv.len() != 2 || sp[1] != sv[0] || sp[2] != sv[1] {
            return Err(TensorError::ShapeMismatch {
                op: "caps_agreement",
                detail: format!("predictions {sp:?}, outputs {sv:?}"),
            });
        }
        let (n, c, d) = (sp[0], sp[1], sp[2]);
        let u = self.data(predictions);
        let v = self.data(outputs);
        let mut data = vec![T::zero(); n * c];
        for i in 0..n {
            for j in 0..c {
                let ub = (i * c + j) * d;
                let vb = j * d;
                let mut acc = T::zero();
                for e in 0..d {
                    acc += u[ub + e] * v[vb + e];
                }
                data[i * c + j] = acc;
            }
        }
        let mut out = Tensor::new(vec![n, c], data)?;
        out.set_requires_grad(self.any_grad(&[predictions, outputs]));
        self.push(Op::CapsAgreement { predictions, outputs }, out, "caps_agreement")
    }

    /// Scale each row of `[R,D]` by the matching entry of `mask [R]`.
    pub fn mask_rows(&mut self, a: TensorId, mask: TensorId) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || self.shape(mask) != [s[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "mask_rows",
                detail: format!("{s:?} with mask {:?}", self.shape(mask)),
            });
        }
        let (r, d) = (s[0], s[1]);
        let m = self.data(mask).to_vec();
        let src = self.data(a);
        let mut data = vec![T::zero(); r * d];
        for i in 0..r {
            for j in 0..d {
                data[i * d + j] = src[i * d + j] * m[i];
            }
        }
        let mut out = Tensor::new(s, data)?;
        out.set_requires_grad(self.any_grad(&[a, mask]));
        self.push(Op::MaskRows { a, mask }, out, "mask_rows")
    }

    /// Per-channel mean/variance normalization of one `[H,W,C]` sample.
    /// No cross-batch statistics, so inference is batch-independent.
    pub fn instance_norm(&mut self, a: TensorId, eps: T) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch { op: "instance_norm", detail: format!("{s:?}") });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let m = h * w;
        let src = self.data(a);
        let inv_m = T::one() / T::from_f64x(m as f64);
        let mut data = vec![T::zero(); m * c];
        for ch in 0..c {
            let mut mean = T::zero();
            for p in 0..m {
                mean += src[p * c + ch];
            }
            mean *= inv_m;
            let mut var = T::zero();
            for p in 0..m {
                let d = src[p * c + ch] - mean;
                var += d * d;
            }
            var *= inv_m;
            let inv_std = T::one() / (var + eps).sqrt();
            for p in 0..m {
                data[p * c + ch] = (src[p * c + ch] - mean) * inv_std;
            }
        }
        let mut out = Tensor::new(s, data)?;
        out.set_requires_grad(self.any_grad(&[a]));
        self.push(Op::InstanceNorm { a, eps }, out, "instance_norm")
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Backpropagate from a scalar loss; every `requires_grad` leaf that
    /// the loss depends on receives its gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.value(loss).requires_grad() {
            return Err(TensorError::DetachedGraph);
        }
        for n in &mut self.nodes {
            n.clear_grad();
        }
        self.nodes[loss.0].grad_mut()[0] = T::one();

        for rec in (0..self.records.len()).rev() {
            let (op, out) = self.records[rec].clone();
            let d_out = match self.nodes[out.0].grad() {
                Some(g) => g.to_vec(),
                None => continue, // no gradient flowed into this node
            };
            self.backward_op(&op, out, &d_out);
        }
        Ok(())
    }

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad()
    }

    fn accumulate(&mut self, id: TensorId, contrib: &[T]) {
        let g = self.nodes[id.0].grad_mut();
        debug_assert_eq!(g.len(), contrib.len());
        for (dst, &src) in g.iter_mut().zip(contrib) {
            *dst += src;
        }
    }

    fn backward_op(&mut self, op: &Op<T>, out: TensorId, d_out: &[T]) {
        match *op {
            Op::Add { a, b } => {
                if self.wants(a) {
                    self.accumulate(a, d_out);
                }
                if self.wants(b) {
                    self.accumulate(b, d_out);
                }
            }
            Op::Sub { a, b } => {
                if self.wants(a) {
                    self.accumulate(a, d_out);
                }
                if self.wants(b) {
                    let neg: Vec<T> = d_out.iter().map(|&g| -g).collect();
                    self.accumulate(b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.wants(a) {
                    let da = zip_map(d_out, self.data(b), |g, y| g * y);
                    self.accumulate(a, &da);
                }
                if self.wants(b) {
                    let db = zip_map(d_out, self.data(a), |g, x| g * x);
                    self.accumulate(b, &db);
                }
            }
            Op::Scale { a, factor } => {
                if self.wants(a) {
                    let da: Vec<T> = d_out.iter().map(|&g| g * factor).collect();
                    self.accumulate(a, &da);
                }
            }
            Op::AddScalar { a } => {
                if self.wants(a) {
                    self.accumulate(a, d_out);
                }
            }
            Op::Relu { a } => {
                if self.wants(a) {
                    let da = zip_map(d_out, self.data(a), |g, x| if x > T::zero() { g } else { T::zero() });
                    self.accumulate(a, &da);
                }
            }
            Op::LeakyRelu { a, slope } => {
                if self.wants(a) {
                    let da = zip_map(d_out, self.data(a), |g, x| if x > T::zero() { g } else { g * slope });
                    self.accumulate(a, &da);
                }
            }
            Op::Sigmoid { a } => {
                if self.wants(a) {
                    let da = zip_map(d_out, self.data(out), |g, y| g * y * (T::one() - y));
                    self.accumulate(a, &da);
                }
            }
            Op::Tanh { a } => {
                if self.wants(a) {
                    let da = zip_map(d_out, self.data(out), |g, y| g * (T::one() - y * y));
                    self.accumulate(a, &da);
                }
            }
            Op::Ln { a } => {
                if self.wants(a) {
                    let da = zip_map(d_out, self.data(a), |g, x| g / x);
                    self.accumulate(a, &da);
                }
            }
            Op::Sum { a } => {
                if self.wants(a) {
                    let g = d_out[0];
                    let da = vec![g; self.value(a).numel()];
                    self.accumulate(a, &da);
                }
            }
            Op::Matmul { a, b } => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(a) {
                    // dA = dC * B^T
                    let mut da = vec![T::zero(); m * k];
                    T::gemm_nt(m, n, k, d_out, self.data(b), &mut da);
                    self.accumulate(a, &da);
                }
                if self.wants(b) {
                    // dB = A^T * dC
                    let mut db = vec![T::zero(); k * n];
                    T::gemm_tn(k, m, n, self.data(a), d_out, &mut db);
                    self.accumulate(b, &db);
                }
            }
            Op::Conv2d { input, kernels, stride } => {
                let si = self.shape(input).to_vec();
                let sk = self.shape(kernels).to_vec();
                let (d_input, d_kernels) = conv::conv2d_backward(
                    self.data(input), si[0], si[1], si[2],
                    self.data(kernels), sk[0], sk[3], stride,
                    d_out,
                );
                if self.wants(input) {
                    self.accumulate(input, &d_input);
                }
                if self.wants(kernels) {
                    self.accumulate(kernels, &d_kernels);
                }
            }
            Op::ConvTranspose2d { input, kernels, stride } => {
                let si = self.shape(input).to_vec();
                let sk = self.shape(kernels).to_vec();
                let (d_input, d_kernels) = conv::conv_transpose2d_backward(
                    self.data(input), si[0], si[1], si[2],
                    self.data(kernels), sk[0], sk[2], stride,
                    d_out,
                );
                if self.wants(input) {
                    self.accumulate(input, &d_input);
                }
                if self.wants(kernels) {
                    self.accumulate(kernels, &d_kernels);
                }
            }
            Op::Pad2d { a, pad } => {
                if self.wants(a) {
                    let s = self.shape(a).to_vec();
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let nw = w + 2 * pad;
                    let mut da = vec![T::zero(); h * w * c];
                    for y in 0..h {
                        let src = ((y + pad) * nw + pad) * c;
                        let dst = y * w * c;
                        da[dst..dst + w * c].copy_from_slice(&d_out[src..src + w * c]);
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::CropCenter { a } => {
                if self.wants(a) {
                    let s = self.shape(a).to_vec();
                    let so = self.shape(out).to_vec();
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let (oh, ow) = (so[0], so[1]);
                    let (dy, dx) = ((h - oh) / 2, (w - ow) / 2);
                    let mut da = vec![T::zero(); h * w * c];
                    for y in 0..oh {
                        let dst = ((y + dy) * w + dx) * c;
                        let src = y * ow * c;
                        da[dst..dst + ow * c].copy_from_slice(&d_out[src..src + ow * c]);
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::AddChannelBias { a, bias } => {
                if self.wants(a) {
                    self.accumulate(a, d_out);
                }
                if self.wants(bias) {
                    let c = self.value(bias).numel();
                    let mut db = vec![T::zero(); c];
                    for (i, &g) in d_out.iter().enumerate() {
                        db[i % c] += g;
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::Softmax { a, axis } => {
                if self.wants(a) {
                    let s = self.shape(out).to_vec();
                    let y = self.data(out);
                    let da = softmax_backward(y, d_out, &s, axis);
                    self.accumulate(a, &da);
                }
            }
            Op::Reshape { a } => {
                if self.wants(a) {
                    self.accumulate(a, d_out);
                }
            }
            Op::SquashRows { a } => {
                if self.wants(a) {
                    let s = self.shape(a).to_vec();
                    let (r, d) = (s[0], s[1]);
                    let eps = T::from_f64x(SQUASH_EPS);
                    let src = self.data(a);
                    let mut da = vec![T::zero(); r * d];
                    for i in 0..r {
                        let row = &src[i * d..(i + 1) * d];
                        let gout = &d_out[i * d..(i + 1) * d];
                        let sq: T = row.iter().map(|&x| x * x).sum();
                        let one = T::one();
                        let denom = (sq + eps).sqrt();
                        let g = (sq / (one + sq)) / denom;
                        // dg/d(sq)
                        let gp = one / ((one + sq) * (one + sq) * denom)
                            - (sq / (one + sq)) / ((sq + eps) * denom) / (one + one);
                        let dot: T = gout.iter().zip(row).map(|(&go, &x)| go * x).sum();
                        for j in 0..d {
                            da[i * d + j] = g * gout[j] + (gp + gp) * row[j] * dot;
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::RowNorms { a } => {
                if self.wants(a) {
                    let s = self.shape(a).to_vec();
                    let (r, d) = (s[0], s[1]);
                    let eps = T::from_f64x(SQUASH_EPS);
                    let src = self.data(a);
                    let norms = self.data(out);
                    let mut da = vec![T::zero(); r * d];
                    for i in 0..r {
                        let n = norms[i].max(eps);
                        for j in 0..d {
                            da[i * d + j] = d_out[i] * src[i * d + j] / n;
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::CapsPredict { poses, weights } => {
                let sp = self.shape(poses).to_vec();
                let sw = self.shape(weights).to_vec();
                let (n, din) = (sp[0], sp[1]);
                let (c, dout) = (sw[1], sw[3]);
                if self.wants(poses) {
                    let wt = self.data(weights);
                    let mut da = vec![T::zero(); n * din];
                    for i in 0..n {
                        for j in 0..c {
                            let wbase = (i * c + j) * din * dout;
                            let obase = (i * c + j) * dout;
                            for di in 0..din {
                                let mut acc = T::zero();
                                for e in 0..dout {
                                    acc += d_out[obase + e] * wt[wbase + di * dout + e];
                                }
                                da[i * din + di] += acc;
                            }
                        }
                    }
                    self.accumulate(poses, &da);
                }
                if self.wants(weights) {
                    let u = self.data(poses);
                    let mut dw = vec![T::zero(); n * c * din * dout];
                    for i in 0..n {
                        for j in 0..c {
                            let wbase = (i * c + j) * din * dout;
                            let obase = (i * c + j) * dout;
                            for di in 0..din {
                                let ui = u[i * din + di];
                                for e in 0..dout {
                                    dw[wbase + di * dout + e] = ui * d_out[obase + e];
                                }
                            }
                        }
                    }
                    self.accumulate(weights, &dw);
                }
            }
            Op::WeightedCapsSum { couplings, predictions } => {
                let sp = self.shape(predictions).to_vec();
                let (n, c, d) = (sp[0], sp[1], sp[2]);
                if self.wants(couplings) {
                    let u = self.data(predictions);
                    let mut dc = vec![T::zero(); n * c];
                    for i in 0..n {
                        for j in 0..c {
                            let ub = (i * c + j) * d;
                            let mut acc = T::zero();
                            for e in 0..d {
                                acc += d_out[j * d + e] * u[ub + e];
                            }
                            dc[i * c + j] = acc;
                        }
                    }
                    self.accumulate(couplings, &dc);
                }
                if self.wants(predictions) {
                    let cc = self.data(couplings);
                    let mut du = vec![T::zero(); n * c * d];
                    for i in 0..n {
                        for j in 0..c {
                            let w = cc[i * c + j];
                            let ub = (i * c + j) * d;
                            for e in 0..d {
                                du[ub + e] = w * d_out[j * d + e];
                            }
                        }
                    }
                    self.accumulate(predictions, &du);
                }
            }
            Op::CapsAgreement { predictions, outputs } => {
                let sp = self.shape(predictions).to_vec();
                let (n, c, d) = (sp[0], sp[1], sp[2]);
                if self.wants(predictions) {
                    let v = self.data(outputs);
                    let mut du = vec![T::zero(); n * c * d];
                    for i in 0..n {
                        for j in 0..c {
                            let ub = (i * c + j) * d;
                            for e in 0..d {
                                du[ub + e] = d_out[i * c + j] * v[j * d + e];
                            }
                        }
                    }
                    self.accumulate(predictions, &du);
                }
                if self.wants(outputs) {
                    let u = self.data(predictions);
                    let mut dv = vec![T::zero(); c * d];
                    for i in 0..n {
                        for j in 0..c {
                            let ub = (i * c + j) * d;
                            for e in 0..d {
                                dv[j * d + e] += d_out[i * c + j] * u[ub + e];
                            }
                        }
                    }
                    self.accumulate(outputs, &dv);
                }
            }
            Op::MaskRows { a, mask } => {
                let s = self.shape(a).to_vec();
                let (r, d) = (s[0], s[1]);
                if self.wants(a) {
                    let m = self.data(mask);
                    let mut da = vec![T::zero(); r * d];
                    for i in 0..r {
                        for j in 0..d {
                            da[i * d + j] = d_out[i * d + j] * m[i];
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.wants(mask) {
                    let x = self.data(a);
                    let mut dm = vec![T::zero(); r];
                    for i in 0..r {
                        let mut acc = T::zero();
                        for j in 0..d {
                            acc += d_out[i * d + j] * x[i * d + j];
                        }
                        dm[i] = acc;
                    }
                    self.accumulate(mask, &dm);
                }
            }
            Op::InstanceNorm { a, eps } => {
                if self.wants(a) {
                    let s = self.shape(a).to_vec();
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let m = h * w;
                    let inv_m = T::one() / T::from_f64x(m as f64);
                    let src = self.data(a);
                    let y = self.data(out);
                    let mut da = vec![T::zero(); m * c];
                    for ch in 0..c {
                        let mut mean = T::zero();
                        for p in 0..m {
                            mean += src[p * c + ch];
                        }
                        mean *= inv_m;
                        let mut var = T::zero();
                        for p in 0..m {
                            let d = src[p * c + ch] - mean;
                            var += d * d;
                        }
                        var *= inv_m;
                        let inv_std = T::one() / (var + eps).sqrt();
                        let mut mean_dy = T::zero();
                        let mut mean_dy_y = T::zero();
                        for p in 0..m {
                            mean_dy += d_out[p * c + ch];
                            mean_dy_y += d_out[p * c + ch] * y[p * c + ch];
                        }
                        mean_dy *= inv_m;
                        mean_dy_y *= inv_m;
                        for p in 0..m {
                            da[p * c + ch] =
                                inv_std * (d_out[p * c + ch] - mean_dy - y[p * c + ch] * mean_dy_y);
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn softmax_forward<T: Scalar>(src: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut m = src[at(0)];
            for j in 1..len {
                m = m.max(src[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[at(j)] - m).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    out
}

fn softmax_backward<T: Scalar>(y: &[T], d_out: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut da = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += d_out[at(j)] * y[at(j)];
            }
            for j in 0..len {
                da[at(j)] = y[at(j)] * (d_out[at(j)] - dot);
            }
        }
    }
    da
}
