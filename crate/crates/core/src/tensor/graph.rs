//! Reverse-mode automatic differentiation over a flat node arena.
//!
//! A [`Graph`] is built fresh for every forward pass. Operations append
//! nodes and return [`Var`] handles; because the arena is append-only,
//! iterating node indices in reverse is a valid reverse topological order
//! for backpropagation.
//!
//! Determinism: every gradient buffer is written by loops whose iteration
//! and reduction order is fixed by the code, not by thread scheduling.
//! Parallel sections (convolution) give each task a disjoint output slice,
//! so results are bit-identical for any worker count.

use rayon::prelude::*;

use super::kernels::{self, ConvGeom};
use super::{expect_same_shape, Element, Tensor};
use crate::error::{Error, Result};

/// Whether batch statistics (train) or running statistics (eval) drive
/// batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Staged update to a named set of batch-norm running statistics, produced
/// during a training-mode forward pass and committed by the optimizer step.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Tanh {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AffineScalar {
        x: Var,
        mul: T,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation graph arena. See the module docs.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bn_updates: Vec<BnUpdate<T>>,
    mode: Mode,
}

impl<T: Element> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bn_updates: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of nodes currently in the arena.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts a non-trainable leaf (input data, labels, constants).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts a trainable leaf whose gradient is retained by `backward`.
    pub fn parameter(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The tensor held by a node.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`.
    ///
    /// Present only for leaves created with [`Graph::parameter`] (gradients
    /// of interior nodes are freed as soon as they have been consumed).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Running-statistic updates staged by training-mode batch norm since
    /// the last call. The caller commits them to its parameter store.
    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    // ----------------------------------------------------------------- ops

    /// 2-D cross-correlation with zero padding.
    ///
    /// `x` is `[n, in_ch, h, w]`, `w` is `[out_ch, in_ch, k, k]`, `b` is
    /// `[out_ch]`. Output is `[n, out_ch, oh, ow]` with
    /// `oh = (h + 2*padding - k) / stride + 1` (floor division).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::Shape(format!(
                "conv2d expects x[n,c,h,w], w[o,c,k,k], b[o]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        if ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv2d kernel must be square, got {ws:?}")));
        }
        if xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let geom = ConvGeom {
            channels: xs[1],
            h: xs[2],
            w: xs[3],
            kernel: ws[2],
            stride,
            padding,
        };
        if geom.h + 2 * geom.padding < geom.kernel || geom.w + 2 * geom.padding < geom.kernel {
            return Err(Error::Shape(format!(
                "conv2d kernel {} exceeds padded input {}x{}",
                geom.kernel,
                geom.h + 2 * geom.padding,
                geom.w + 2 * geom.padding
            )));
        }
        let (n, out_ch) = (xs[0], ws[0]);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let pix = oh * ow;
        let patch_len = geom.patch_len();
        let in_plane = geom.channels * geom.h * geom.w;

        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![T::ZERO; n * out_ch * pix];
        out.par_chunks_mut(out_ch * pix)
            .zip(xd.par_chunks(in_plane))
            .for_each(|(out_img, x_img)| {
                let mut patches = vec![T::ZERO; pix * patch_len];
                kernels::im2col(x_img, geom, &mut patches);
                kernels::matmul_nt(wd, &patches, out_ch, pix, patch_len, out_img);
                for (co, row) in out_img.chunks_exact_mut(pix).enumerate() {
                    let bias = bd[co];
                    for v in row {
                        *v += bias;
                    }
                }
            });

        let req = self.requires(x) || self.requires(w) || self.requires(b);
        let value = Tensor::from_vec(&[n, out_ch, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, req))
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first maximal
    /// element in row-major scan order; a trailing odd row/column is
    /// dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("max_pool2 expects [n,c,h,w], got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("max_pool2 needs h,w >= 2, got {xs:?}")));
        }
        let xd = self.value(x).data();
        if xd.len() > u32::MAX as usize {
            return Err(Error::Shape("max_pool2 input too large for index cache".into()));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::ZERO; n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..][..h * w];
            let dst = &mut out[plane * oh * ow..][..oh * ow];
            let amx = &mut argmax[plane * oh * ow..][..oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = (2 * oy) * w + 2 * ox;
                    let mut best = src[best_idx];
                    // Row-major scan of the remaining window elements;
                    // strict comparison keeps the first maximum on ties.
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + (2 * ox + dx);
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                    dst[oy * ow + ox] = best;
                    amx[oy * ow + ox] = (plane * h * w + best_idx) as u32;
                }
            }
        }
        let req = self.requires(x);
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, req))
    }

    /// Batch normalization over `[n, c, h, w]`, normalizing each channel
    /// across the batch and spatial dimensions.
    ///
    /// In [`Mode::Train`] the batch statistics are used (biased variance)
    /// and an exponential-moving-average update of the running statistics
    /// (unbiased variance, factor `momentum` on the fresh value) is staged
    /// under `state_name` for [`Graph::take_bn_updates`]. Training requires
    /// a batch of at least two images. In [`Mode::Eval`] the provided
    /// running statistics are used unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state_name: &str,
        running_mean: &[T],
        running_var: &[T],
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("batch_norm expects [n,c,h,w], got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!(
                "batch_norm scale/shift must have shape [{c}], got {:?} and {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm running stats for '{state_name}' must have length {c}"
            )));
        }
        let batch_stats = self.mode == Mode::Train;
        if batch_stats && n < 2 {
            return Err(Error::Contract(format!(
                "batch_norm in training mode needs a batch of >= 2 images, got {n}"
            )));
        }

        let m = (n * plane) as f64;
        let mut mean = vec![T::ZERO; c];
        let mut inv_std = vec![T::ZERO; c];
        let xt = self.value(x).clone();
        let xd = xt.data();
        let mut batch_var = vec![T::ZERO; c];
        if batch_stats {
            let inv_m = T::from_f64(1.0 / m);
            for ch in 0..c {
                let mut total = T::ZERO;
                for img in 0..n {
                    total += kernels::sum(&xd[(img * c + ch) * plane..][..plane]);
                }
                let mu = total * inv_m;
                let mut sq = T::ZERO;
                for img in 0..n {
                    let row = &xd[(img * c + ch) * plane..][..plane];
                    let mut acc = T::ZERO;
                    for v in row {
                        let d = *v - mu;
                        acc += d * d;
                    }
                    sq += acc;
                }
                let var = sq * inv_m;
                mean[ch] = mu;
                batch_var[ch] = var;
                inv_std[ch] = T::ONE / (var + T::from_f64(eps)).sqrt();
            }
            // Stage the running-statistic EMA with the unbiased variance.
            let unbias = T::from_f64(m / (m - 1.0));
            let keep = T::from_f64(1.0 - momentum);
            let fresh = T::from_f64(momentum);
            let new_mean: Vec<T> = running_mean
                .iter()
                .zip(&mean)
                .map(|(rm, bm)| *rm * keep + *bm * fresh)
                .collect();
            let new_var: Vec<T> = running_var
                .iter()
                .zip(&batch_var)
                .map(|(rv, bv)| *rv * keep + *bv * unbias * fresh)
                .collect();
            self.bn_updates.push(BnUpdate {
                name: state_name.to_string(),
                mean: new_mean,
                var: new_var,
            });
        } else {
            for ch in 0..c {
                mean[ch] = running_mean[ch];
                inv_std[ch] = T::ONE / (running_var[ch] + T::from_f64(eps)).sqrt();
            }
        }

        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![T::ZERO; xd.len()];
        for img in 0..n {
            for ch in 0..c {
                let row = &xd[(img * c + ch) * plane..][..plane];
                let dst = &mut out[(img * c + ch) * plane..][..plane];
                let scale = gd[ch] * inv_std[ch];
                let shift = bd[ch] - mean[ch] * scale;
                for (d, s) in dst.iter_mut().zip(row) {
                    *d = *s * scale + shift;
                }
            }
        }

        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let value = Tensor::from_vec(&xs, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            req,
        ))
    }

    /// Leaky ReLU: `x` if `x > 0`, else `slope * x`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::from_f64(slope);
        let xd = self.value(x).data();
        let out: Vec<T> = xd
            .iter()
            .map(|&v| if v > T::ZERO { v } else { v * s })
            .collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(x);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::LeakyRelu { x, slope: s }, req))
    }

    /// ReLU, i.e. leaky ReLU with slope zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xd = self.value(x).data();
        let out: Vec<T> = xd.iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(x);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::Tanh { x }, req))
    }

    /// Fully connected layer: `x` is `[n, in]`, `w` is `[out, in]`, `b` is
    /// `[out]`; output is `[n, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::Shape(format!(
                "linear expects x[n,i], w[o,i], b[o]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (n, o, k) = (xs[0], ws[0], ws[1]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![T::ZERO; n * o];
        kernels::matmul_nt(xd, wd, n, o, k, &mut out);
        for row in out.chunks_exact_mut(o) {
            for (v, bias) in row.iter_mut().zip(bd) {
                *v += *bias;
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        let value = Tensor::from_vec(&[n, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, req))
    }

    /// Concatenates two `[n, *]` matrices along the column axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let la = self.value(a).shape().to_vec();
        let lb = self.value(b).shape().to_vec();
        if la.len() != 2 || lb.len() != 2 || la[0] != lb[0] {
            return Err(Error::Shape(format!(
                "concat_cols expects matching row counts, got {la:?} and {lb:?}"
            )));
        }
        let (n, ca, cb) = (la[0], la[1], lb[1]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(n * (ca + cb));
        for row in 0..n {
            out.extend_from_slice(&ad[row * ca..][..ca]);
            out.extend_from_slice(&bd[row * cb..][..cb]);
        }
        let req = self.requires(a) || self.requires(b);
        let value = Tensor::from_vec(&[n, ca + cb], out)?;
        Ok(self.push(value, Op::ConcatCols { a, b }, req))
    }

    /// Element-wise sum of two same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_same_shape("add", self.value(a).shape(), self.value(b).shape())?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::Add { a, b }, req))
    }

    /// Element-wise product of two same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_same_shape("mul", self.value(a).shape(), self.value(b).shape())?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::Mul { a, b }, req))
    }

    /// Element-wise `mul * x + add` with scalar coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let (m, a) = (T::from_f64(mul), T::from_f64(add));
        let out: Vec<T> = self.value(x).data().iter().map(|v| *v * m + a).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(x);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::AffineScalar { x, mul: m }, req))
    }

    /// Sum of all elements; returns a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = kernels::sum(self.value(x).data());
        let req = self.requires(x);
        Ok(self.push(Tensor::scalar(total), Op::Sum { x }, req))
    }

    /// Mean of all elements; returns a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let total = kernels::sum(self.value(x).data()) * T::from_f64(1.0 / n as f64);
        let req = self.requires(x);
        Ok(self.push(Tensor::scalar(total), Op::Mean { x }, req))
    }

    /// Reinterprets `x` under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let req = self.requires(x);
        Ok(self.push(value, Op::Reshape { x }, req))
    }

    /// Selects `len` consecutive rows of the leading axis starting at
    /// `start`. Used to split a stacked batch back into its halves.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.is_empty() {
            return Err(Error::Shape("slice_rows needs at least one axis".into()));
        }
        if start + len > xs[0] {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} out of bounds for leading axis {}",
                start + len,
                xs[0]
            )));
        }
        let row: usize = xs[1..].iter().product();
        let out = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut shape = xs.clone();
        shape[0] = len;
        let req = self.requires(x);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::SliceRows { x, start }, req))
    }

    // ------------------------------------------------------------ backward

    /// Accumulates `d loss / d node` for every trainable leaf reachable from
    /// `loss`, which must be a scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward target must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::ONE]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.grads[idx].is_none() {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue; // retain leaf gradients for the caller
            }
            let gout = self.grads[idx].take().expect("checked above");
            self.backprop_node(idx, &gout)?;
        }
        Ok(())
    }

    /// Ensures a gradient buffer exists for `v` (if it participates in
    /// differentiation) and returns it.
    fn grad_buf(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let numel = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::ZERO; numel]);
        self.grads[v.0].as_deref_mut()
    }

    fn backprop_node(&mut self, idx: usize, gout: &[T]) -> Result<()> {
        // `Op` holds only Vars and caches, so a clone of the small parts is
        // avoided by matching on references and copying the handles out.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, geom } => self.backprop_conv2d(idx, x, w, b, geom, gout)?,
            Op::MaxPool2 { x, argmax } => {
                let (x, argmax) = (*x, argmax.clone());
                if let Some(gx) = self.grad_buf(x) {
                    for (src, g) in argmax.iter().zip(gout) {
                        gx[*src as usize] += *g;
                    }
                }
            }
            Op::BatchNorm { .. } => self.backprop_batch_norm(idx, gout)?,
            &Op::LeakyRelu { x, slope } => {
                let xd = self.nodes[x.0].value.clone();
                if let Some(gx) = self.grad_buf(x) {
                    for ((g, xi), go) in gx.iter_mut().zip(xd.data()).zip(gout) {
                        let f = if *xi > T::ZERO { T::ONE } else { slope };
                        *g += *go * f;
                    }
                }
            }
            &Op::Tanh { x } => {
                let yd = self.nodes[idx].value.clone();
                if let Some(gx) = self.grad_buf(x) {
                    for ((g, yi), go) in gx.iter_mut().zip(yd.data()).zip(gout) {
                        *g += *go * (T::ONE - *yi * *yi);
                    }
                }
            }
            &Op::Linear { x, w, b } => self.backprop_linear(x, w, b, gout)?,
            &Op::ConcatCols { a, b } => {
                let ca = self.value(a).shape()[1];
                let cb = self.value(b).shape()[1];
                let n = self.value(a).shape()[0];
                if let Some(ga) = self.grad_buf(a) {
                    for row in 0..n {
                        kernels::axpy(
                            &mut ga[row * ca..][..ca],
                            T::ONE,
                            &gout[row * (ca + cb)..][..ca],
                        );
                    }
                }
                if let Some(gb) = self.grad_buf(b) {
                    for row in 0..n {
                        kernels::axpy(
                            &mut gb[row * cb..][..cb],
                            T::ONE,
                            &gout[row * (ca + cb) + ca..][..cb],
                        );
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(ga) = self.grad_buf(a) {
                    kernels::axpy(ga, T::ONE, gout);
                }
                if let Some(gb) = self.grad_buf(b) {
                    kernels::axpy(gb, T::ONE, gout);
                }
            }
            &Op::Mul { a, b } => {
                let ad = self.nodes[a.0].value.clone();
                let bd = self.nodes[b.0].value.clone();
                if let Some(ga) = self.grad_buf(a) {
                    for ((g, bv), go) in ga.iter_mut().zip(bd.data()).zip(gout) {
                        *g += *go * *bv;
                    }
                }
                if let Some(gb) = self.grad_buf(b) {
                    for ((g, av), go) in gb.iter_mut().zip(ad.data()).zip(gout) {
                        *g += *go * *av;
                    }
                }
            }
            &Op::AffineScalar { x, mul } => {
                if let Some(gx) = self.grad_buf(x) {
                    kernels::axpy(gx, mul, gout);
                }
            }
            &Op::Sum { x } => {
                let g = gout[0];
                if let Some(gx) = self.grad_buf(x) {
                    for v in gx.iter_mut() {
                        *v += g;
                    }
                }
            }
            &Op::Mean { x } => {
                let n = self.value(x).numel();
                let g = gout[0] * T::from_f64(1.0 / n as f64);
                if let Some(gx) = self.grad_buf(x) {
                    for v in gx.iter_mut() {
                        *v += g;
                    }
                }
            }
            &Op::Reshape { x } => {
                if let Some(gx) = self.grad_buf(x) {
                    kernels::axpy(gx, T::ONE, gout);
                }
            }
            &Op::SliceRows { x, start } => {
                let row: usize = self.value(x).shape()[1..].iter().product();
                if let Some(gx) = self.grad_buf(x) {
                    kernels::axpy(&mut gx[start * row..][..gout.len()], T::ONE, gout);
                }
            }
        }
        Ok(())
    }

    fn backprop_conv2d(
        &mut self,
        _idx: usize,
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        gout: &[T],
    ) -> Result<()> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let n = xs[0];
        let out_ch = ws[0];
        let pix = geom.out_pixels();
        let patch_len = geom.patch_len();
        let in_plane = geom.channels * geom.h * geom.w;
        let need_x = self.requires(x);
        let need_w = self.requires(w);
        let need_b = self.requires(b);

        // Patches are needed for both dW and dX; build them once for the
        // whole batch.
        let mut patches = Vec::new();
        if need_x || need_w {
            let xd = self.nodes[x.0].value.clone();
            patches = vec![T::ZERO; n * pix * patch_len];
            patches
                .par_chunks_mut(pix * patch_len)
                .zip(xd.data().par_chunks(in_plane))
                .for_each(|(p_img, x_img)| kernels::im2col(x_img, geom, p_img));
        }

        if need_w {
            let gw_vec: Vec<T> = {
                let mut gw = vec![T::ZERO; out_ch * patch_len];
                // Each task owns one output-channel row and walks the batch
                // sequentially, keeping the reduction order fixed.
                gw.par_chunks_mut(patch_len)
                    .enumerate()
                    .for_each(|(co, gw_row)| {
                        for img in 0..n {
                            let gout_row = &gout[(img * out_ch + co) * pix..][..pix];
                            let p_img = &patches[img * pix * patch_len..][..pix * patch_len];
                            for (p_row, g) in p_img.chunks_exact(patch_len).zip(gout_row) {
                                kernels::axpy(gw_row, *g, p_row);
                            }
                        }
                    });
                gw
            };
            if let Some(gw) = self.grad_buf(w) {
                kernels::axpy(gw, T::ONE, &gw_vec);
            }
        }

        if need_b {
            let gb_vec: Vec<T> = (0..out_ch)
                .map(|co| {
                    let mut acc = T::ZERO;
                    for img in 0..n {
                        acc += kernels::sum(&gout[(img * out_ch + co) * pix..][..pix]);
                    }
                    acc
                })
                .collect();
            if let Some(gb) = self.grad_buf(b) {
                kernels::axpy(gb, T::ONE, &gb_vec);
            }
        }

        if need_x {
            let wd = self.nodes[w.0].value.clone();
            let mut gx_vec = vec![T::ZERO; n * in_plane];
            gx_vec
                .par_chunks_mut(in_plane)
                .enumerate()
                .for_each(|(img, gx_img)| {
                    let mut gpatch = vec![T::ZERO; pix * patch_len];
                    for co in 0..out_ch {
                        let w_row = &wd.data()[co * patch_len..][..patch_len];
                        let gout_row = &gout[(img * out_ch + co) * pix..][..pix];
                        for (gp_row, g) in gpatch.chunks_exact_mut(patch_len).zip(gout_row) {
                            kernels::axpy(gp_row, *g, w_row);
                        }
                    }
                    kernels::col2im_add(&gpatch, geom, gx_img);
                });
            if let Some(gx) = self.grad_buf(x) {
                kernels::axpy(gx, T::ONE, &gx_vec);
            }
        }
        Ok(())
    }

    fn backprop_batch_norm(&mut self, idx: usize, gout: &[T]) -> Result<()> {
        let (x, gamma, beta, mean, inv_std, batch_stats) = match &self.nodes[idx].op {
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => (*x, *gamma, *beta, mean.clone(), inv_std.clone(), *batch_stats),
            _ => unreachable!(),
        };
        let xs = self.value(x).shape().to_vec();
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let m = (n * plane) as f64;
        let xd = self.nodes[x.0].value.clone();
        let gd = self.nodes[gamma.0].value.clone();

        // Per-channel reductions: sum of gout and sum of gout * xhat.
        let mut sum_g = vec![T::ZERO; c];
        let mut sum_gx = vec![T::ZERO; c];
        for img in 0..n {
            for ch in 0..c {
                let o = (img * c + ch) * plane;
                let g_row = &gout[o..][..plane];
                let x_row = &xd.data()[o..][..plane];
                let mut a = T::ZERO;
                let mut bacc = T::ZERO;
                for (g, xv) in g_row.iter().zip(x_row) {
                    a += *g;
                    bacc += *g * (*xv - mean[ch]) * inv_std[ch];
                }
                sum_g[ch] += a;
                sum_gx[ch] += bacc;
            }
        }

        if let Some(gb) = self.grad_buf(beta) {
            kernels::axpy(gb, T::ONE, &sum_g);
        }
        if let Some(gg) = self.grad_buf(gamma) {
            kernels::axpy(gg, T::ONE, &sum_gx);
        }
        if self.requires(x) {
            let inv_m = T::from_f64(1.0 / m);
            let mut gx_vec = vec![T::ZERO; xd.numel()];
            for img in 0..n {
                for ch in 0..c {
                    let o = (img * c + ch) * plane;
                    let g_row = &gout[o..][..plane];
                    let x_row = &xd.data()[o..][..plane];
                    let dst = &mut gx_vec[o..][..plane];
                    let scale = gd.data()[ch] * inv_std[ch];
                    if batch_stats {
                        let mg = sum_g[ch] * inv_m;
                        let mgx = sum_gx[ch] * inv_m;
                        for ((d, g), xv) in dst.iter_mut().zip(g_row).zip(x_row) {
                            let xhat = (*xv - mean[ch]) * inv_std[ch];
                            *d = scale * (*g - mg - xhat * mgx);
                        }
                    } else {
                        for (d, g) in dst.iter_mut().zip(g_row) {
                            *d = scale * *g;
                        }
                    }
                }
            }
            if let Some(gx) = self.grad_buf(x) {
                kernels::axpy(gx, T::ONE, &gx_vec);
            }
        }
        Ok(())
    }

    fn backprop_linear(&mut self, x: Var, w: Var, b: Var, gout: &[T]) -> Result<()> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n, o, k) = (xs[0], ws[0], ws[1]);
        let xd = self.nodes[x.0].value.clone();
        let wd = self.nodes[w.0].value.clone();

        if self.requires(w) {
            let mut gw_vec = vec![T::ZERO; o * k];
            for img in 0..n {
                let x_row = &xd.data()[img * k..][..k];
                let g_row = &gout[img * o..][..o];
                for (co, g) in g_row.iter().enumerate() {
                    kernels::axpy(&mut gw_vec[co * k..][..k], *g, x_row);
                }
            }
            if let Some(gw) = self.grad_buf(w) {
                kernels::axpy(gw, T::ONE, &gw_vec);
            }
        }
        if self.requires(b) {
            let mut gb_vec = vec![T::ZERO; o];
            for img in 0..n {
                kernels::axpy(&mut gb_vec, T::ONE, &gout[img * o..][..o]);
            }
            if let Some(gb) = self.grad_buf(b) {
                kernels::axpy(gb, T::ONE, &gb_vec);
            }
        }
        if self.requires(x) {
            let mut gx_vec = vec![T::ZERO; n * k];
            for img in 0..n {
                let g_row = &gout[img * o..][..o];
                let dst = &mut gx_vec[img * k..][..k];
                for (co, g) in g_row.iter().enumerate() {
                    kernels::axpy(dst, *g, &wd.data()[co * k..][..k]);
                }
            }
            if let Some(gx) = self.grad_buf(x) {
                kernels::axpy(gx, T::ONE, &gx_vec);
            }
        }
        Ok(())
    }
}
