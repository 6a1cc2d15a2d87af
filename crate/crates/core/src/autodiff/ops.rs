use alloc::vec;
use alloc::vec::Vec;

use super::conv::{col2im_add, im2col, ConvGeom};
use super::{accumulate, val, wants, Graph, Node, Op, Var};
use crate::error::{invalid, Error, Result};
use crate::gates::surrogate_grad;
use crate::real::{matmul, Real};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running mean/variance of a batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

fn rank_err(op: &'static str, expected: usize, got: usize) -> Error {
    Error::WrongRank { op, expected, got }
}

fn same_shape<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            expected: g.shape(a).to_vec(),
            got: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// `(N, C, H*W)` view of a rank-2 or rank-4 activation.
fn nc_hw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(rank_err(op, 4, shape.len())),
    }
}

impl<T: Real> Graph<T> {
    /// 2-D convolution, NCHW input and OIHW weights, no bias. Output size
    /// is `floor((H + 2p - KH) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(rank_err("conv2d", 4, xs.len()));
        }
        if ws.len() != 4 {
            return Err(rank_err("conv2d", 4, ws.len()));
        }
        if xs[1] != ws[1] {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                expected: ws[1],
                got: xs[1],
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d: stride must be >= 1"));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(invalid("conv2d: kernel larger than padded input"));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (wd + 2 * padding - kw) / stride + 1,
        };
        let (rows, ohw) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); n * o * ohw];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * ohw]
        };
        let xd = self.data(x);
        let wdata = self.data(w);
        for b in 0..n {
            let img = &xd[b * c * h * wd..(b + 1) * c * h * wd];
            let dst = &mut out[b * o * ohw..(b + 1) * o * ohw];
            if geom.is_pointwise() {
                matmul(o, rows, ohw, wdata, img, dst);
            } else {
                im2col(&geom, img, &mut cols);
                matmul(o, rows, ohw, wdata, &cols, dst);
            }
        }
        let rg = self.any_grad(&[x, w]);
        let t = Tensor::new([n, o, geom.out_h, geom.out_w], out)?.with_requires_grad(rg);
        self.push(t, Op::Conv2d { x, w, geom })
    }

    /// Batch normalization over N (and H, W) per channel. Train mode uses
    /// batch statistics and updates `stats` in place.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BnMode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, hw) = nc_hw("batchnorm", &shape)?;
        if n == 0 {
            return Err(Error::EmptyBatch("batchnorm"));
        }
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(Error::ChannelMismatch {
                    op: "batchnorm",
                    expected: c,
                    got: self.value(p).numel(),
                });
            }
        }
        if stats.channels() != c {
            return Err(Error::ChannelMismatch {
                op: "batchnorm",
                expected: c,
                got: stats.channels(),
            });
        }
        let eps = T::from_f64(BN_EPSILON);
        let mom = T::from_f64(BN_MOMENTUM);
        let m = n * hw;
        let xd = self.data(x);
        let mut inv_std = vec![T::zero(); c];
        let mut mean = vec![T::zero(); c];
        match mode {
            BnMode::Train => {
                let mf = T::from_f64(m as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        s += xd[base..base + hw].iter().copied().sum::<T>();
                    }
                    let mu = s / mf;
                    let mut v = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for &e in &xd[base..base + hw] {
                            v += (e - mu) * (e - mu);
                        }
                    }
                    let var = v / mf;
                    mean[ch] = mu;
                    inv_std[ch] = T::one() / (var + eps).sqrt();
                    let unbiased = if m > 1 {
                        v / T::from_f64((m - 1) as f64)
                    } else {
                        var
                    };
                    stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mu;
                    stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * unbiased;
                }
            }
            BnMode::Eval => {
                for ch in 0..c {
                    mean[ch] = stats.mean[ch];
                    inv_std[ch] = T::one() / (stats.var[ch] + eps).sqrt();
                }
            }
        }
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gd[ch] * h + bd[ch];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let t = Tensor::new(shape, out)?.with_requires_grad(rg);
        self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == BnMode::Train,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&e| e.max(T::zero())).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?.with_requires_grad(v.requires_grad());
        self.push(t, Op::Relu(x))
    }

    /// `y = x W + b` with `x: [N, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 {
            return Err(rank_err("linear", 2, xs.len()));
        }
        if ws.len() != 2 {
            return Err(rank_err("linear", 2, ws.len()));
        }
        if xs[1] != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                expected: vec![xs[0], ws[0]],
                got: xs,
            });
        }
        let (n, k, m) = (xs[0], ws[0], ws[1]);
        let mut out = vec![T::zero(); n * m];
        matmul(n, k, m, self.data(x), self.data(w), &mut out);
        if let Some(b) = b {
            let bd = self.data(b);
            if bd.len() != m {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    expected: vec![m],
                    got: self.shape(b).to_vec(),
                });
            }
            for row in out.chunks_mut(m) {
                row.iter_mut().zip(bd).for_each(|(o, &bb)| *o += bb);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        let t = Tensor::new([n, m], out)?.with_requires_grad(rg);
        self.push(t, Op::Linear { x, w, b })
    }

    /// Non-overlapping `k x k` max pooling (stride `k`); first maximum wins ties.
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(rank_err("maxpool", 4, xs.len()));
        }
        if k == 0 || xs[2] < k || xs[3] < k {
            return Err(invalid("maxpool: window larger than input"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / k, w / k);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * k * w + j * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (i * k + di) * w + j * k + dj;
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
        let rg = self.requires_grad(x);
        let t = Tensor::new([n, c, oh, ow], out)?.with_requires_grad(rg);
        self.push(t, Op::MaxPool { x, argmax })
    }

    /// Mean over the spatial dimensions: `[N, C, H, W] -> [N, C]`.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(rank_err("global_avgpool", 4, xs.len()));
        }
        let hw = xs[2] * xs[3];
        let inv = T::one() / T::from_f64(hw as f64);
        let out: Vec<T> = self
            .data(x)
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.requires_grad(x);
        let t = Tensor::new([xs[0], xs[1]], out)?.with_requires_grad(rg);
        self.push(t, Op::GlobalAvgPool(x))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(rank_err("cross_entropy", 2, s.len()));
        }
        let (n, k) = (s[0], s[1]);
        if n == 0 {
            return Err(Error::EmptyBatch("cross_entropy"));
        }
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                expected: vec![n],
                got: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &ld[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * k + j] = e;
                z += e;
            }
            probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p /= z);
            loss += z.ln() + mx - row[label];
        }
        loss /= T::from_f64(n as f64);
        let rg = self.requires_grad(logits);
        let t = Tensor::scalar(loss).with_requires_grad(rg);
        self.push(
            t,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&p, &q)| p + q)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let t = Tensor::new(self.shape(a).to_vec(), out)?.with_requires_grad(rg);
        self.push(t, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&p, &q)| p * q)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let t = Tensor::new(self.shape(a).to_vec(), out)?.with_requires_grad(rg);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v * c).collect();
        let rg = self.requires_grad(x);
        let t = Tensor::new(self.shape(x).to_vec(), out)?.with_requires_grad(rg);
        self.push(t, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v + c).collect();
        let rg = self.requires_grad(x);
        let t = Tensor::new(self.shape(x).to_vec(), out)?.with_requires_grad(rg);
        self.push(t, Op::AddConst(x))
    }

    /// Elementwise `ln(1 + x)`; requires `x > -1`.
    pub fn ln1p(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&v| v <= -T::one()) {
            return Err(invalid("ln1p: argument must exceed -1"));
        }
        let out = self.data(x).iter().map(|&v| v.ln_1p()).collect();
        let rg = self.requires_grad(x);
        let t = Tensor::new(self.shape(x).to_vec(), out)?.with_requires_grad(rg);
        self.push(t, Op::Ln1p(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum::<T>();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s).with_requires_grad(rg), Op::Sum(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v * v).collect();
        let rg = self.requires_grad(x);
        let t = Tensor::new(self.shape(x).to_vec(), out)?.with_requires_grad(rg);
        self.push(t, Op::Square(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: shape.to_vec(),
                got: v.shape().to_vec(),
            });
        }
        let t = Tensor::new(shape.to_vec(), v.data().to_vec())?.with_requires_grad(v.requires_grad());
        self.push(t, Op::Reshape(x))
    }

    /// `[R, D] x [D] -> [R]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let ms = self.shape(m).to_vec();
        if ms.len() != 2 {
            return Err(rank_err("matvec", 2, ms.len()));
        }
        if self.value(v).numel() != ms[1] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                expected: vec![ms[1]],
                got: self.shape(v).to_vec(),
            });
        }
        let mut out = vec![T::zero(); ms[0]];
        matmul(ms[0], ms[1], 1, self.data(m), self.data(v), &mut out);
        let rg = self.any_grad(&[m, v]);
        let t = Tensor::new([ms[0]], out)?.with_requires_grad(rg);
        self.push(t, Op::MatVec { m, v })
    }

    /// Adds a one-element tensor `s` to every entry of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "add_scalar",
                expected: vec![1],
                got: self.shape(s).to_vec(),
            });
        }
        let sv = self.scalar(s);
        let out = self.data(x).iter().map(|&v| v + sv).collect();
        let rg = self.any_grad(&[x, s]);
        let t = Tensor::new(self.shape(x).to_vec(), out)?.with_requires_grad(rg);
        self.push(t, Op::AddScalar { x, s })
    }

    /// Hard gate `(sign(s) + 1) / 2` with `sign(0) = +1`. Backward uses the
    /// piecewise-polynomial surrogate derivative. If fewer than `min_open`
    /// gates are open, the highest-scoring closed ones are forced open.
    pub fn binary_gate(&mut self, s: Var, min_open: usize) -> Result<Var> {
        let sd = self.data(s);
        let out = crate::gates::binary_activation_guarded(sd, min_open)?;
        let rg = self.requires_grad(s);
        let t = Tensor::new(self.shape(s).to_vec(), out)?.with_requires_grad(rg);
        self.push(t, Op::BinaryGate(s))
    }

    /// Soft gate `1 / (1 + exp(-k s))`.
    pub fn sigmoid_gate(&mut self, s: Var, k: T) -> Result<Var> {
        if k <= T::zero() {
            return Err(invalid("sigmoid_gate: scale must be positive"));
        }
        let out = self
            .data(s)
            .iter()
            .map(|&v| crate::gates::scaled_sigmoid(v, k))
            .collect();
        let rg = self.requires_grad(s);
        let t = Tensor::new(self.shape(s).to_vec(), out)?.with_requires_grad(rg);
        self.push(t, Op::SigmoidGate { s, k })
    }

    /// Multiplies channel `i` of `[N, C, ...]` by `g[i]`.
    pub fn channel_scale(&mut self, x: Var, g: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, hw) = nc_hw("channel_scale", &xs)?;
        if self.value(g).numel() != c {
            return Err(Error::ChannelMismatch {
                op: "channel_scale",
                expected: c,
                got: self.value(g).numel(),
            });
        }
        let gd = self.data(g);
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = xd[i] * gd[ch];
                }
            }
        }
        let rg = self.any_grad(&[x, g]);
        let t = Tensor::new(xs, out)?.with_requires_grad(rg);
        self.push(t, Op::ChannelScale { x, g })
    }

    /// Concatenates one-element tensors into a vector.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).numel() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    expected: vec![1],
                    got: self.shape(p).to_vec(),
                });
            }
            out.push(self.scalar(p));
        }
        let rg = self.any_grad(parts);
        let t = Tensor::new([parts.len()], out)?.with_requires_grad(rg);
        self.push(t, Op::Stack(parts.to_vec()))
    }

    /// Elementwise product with a constant vector.
    pub fn mul_const(&mut self, x: Var, c: &[T]) -> Result<Var> {
        if c.len() != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                expected: self.shape(x).to_vec(),
                got: vec![c.len()],
            });
        }
        let out = self.data(x).iter().zip(c).map(|(&a, &b)| a * b).collect();
        let rg = self.requires_grad(x);
        let t = Tensor::new(self.shape(x).to_vec(), out)?.with_requires_grad(rg);
        self.push(t, Op::MulConst { x, c: c.to_vec() })
    }
}

pub(super) fn backprop<T: Real>(head: &mut [Node<T>], node: &Node<T>, gout: &[T]) -> Result<()> {
    let out_shape = node.value.shape();
    match &node.op {
        Op::Input | Op::Leaf => {}
        Op::Conv2d { x, w, geom } => {
            let (x, w, geom) = (*x, *w, *geom);
            let xs = val(head, x).shape().to_vec();
            let n = xs[0];
            let o = out_shape[1];
            let (rows, ohw) = (geom.col_rows(), geom.col_cols());
            let img = geom.channels * geom.height * geom.width;
            let need_x = wants(head, x);
            let need_w = wants(head, w);
            let mut dw = vec![T::zero(); o * rows];
            let mut dx = if need_x { vec![T::zero(); n * img] } else { Vec::new() };
            let mut cols = vec![T::zero(); rows * ohw];
            let mut dcols = vec![T::zero(); rows * ohw];
            {
                let xd = val(head, x).data();
                let wd = val(head, w).data();
                for b in 0..n {
                    let go = &gout[b * o * ohw..(b + 1) * o * ohw];
                    let image = &xd[b * img..(b + 1) * img];
                    if need_w {
                        let cols_ref: &[T] = if geom.is_pointwise() {
                            image
                        } else {
                            im2col(&geom, image, &mut cols);
                            &cols
                        };
                        // dW[o, r] += sum_p go[o, p] * cols[r, p]
                        T::gemm(
                            o, ohw, rows, T::one(), go, ohw, 1, cols_ref, 1, ohw, T::one(),
                            &mut dw, rows, 1,
                        );
                    }
                    if need_x {
                        let dst = &mut dx[b * img..(b + 1) * img];
                        if geom.is_pointwise() {
                            // dx[r, p] = sum_o W[o, r] * go[o, p]
                            T::gemm(rows, o, ohw, T::one(), wd, 1, rows, go, ohw, 1, T::zero(), dst, ohw, 1);
                        } else {
                            T::gemm(
                                rows, o, ohw, T::one(), wd, 1, rows, go, ohw, 1, T::zero(),
                                &mut dcols, ohw, 1,
                            );
                            col2im_add(&geom, &dcols, dst);
                        }
                    }
                }
            }
            if need_w {
                accumulate(head, w, &dw);
            }
            if need_x {
                accumulate(head, x, &dx);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let (n, c, hw) = nc_hw("batchnorm", out_shape)?;
            let m = T::from_f64((n * hw) as f64);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        dgamma[ch] += gout[i] * xhat[i];
                        dbeta[ch] += gout[i];
                    }
                }
            }
            if wants(head, *x) {
                let gd = val(head, *gamma).data().to_vec();
                let mut dx = vec![T::zero(); gout.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dx[i] = if *train {
                                gd[ch] * inv_std[ch] / m
                                    * (m * gout[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                            } else {
                                gd[ch] * inv_std[ch] * gout[i]
                            };
                        }
                    }
                }
                accumulate(head, *x, &dx);
            }
            accumulate(head, *gamma, &dgamma);
            accumulate(head, *beta, &dbeta);
        }
        Op::Relu(x) => {
            if wants(head, *x) {
                let d: Vec<T> = val(head, *x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(head, *x, &d);
            }
        }
        Op::Linear { x, w, b } => {
            let (n, m) = (out_shape[0], out_shape[1]);
            let k = val(head, *w).shape()[0];
            if wants(head, *x) {
                let mut dx = vec![T::zero(); n * k];
                // dx = gout [n, m] * W^T [m, k]
                T::gemm(n, m, k, T::one(), gout, m, 1, val(head, *w).data(), 1, m, T::zero(), &mut dx, k, 1);
                accumulate(head, *x, &dx);
            }
            if wants(head, *w) {
                let mut dw = vec![T::zero(); k * m];
                // dW = x^T [k, n] * gout [n, m]
                T::gemm(k, n, m, T::one(), val(head, *x).data(), 1, k, gout, m, 1, T::zero(), &mut dw, m, 1);
                accumulate(head, *w, &dw);
            }
            if let Some(b) = b {
                let mut db = vec![T::zero(); m];
                for row in gout.chunks(m) {
                    db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                }
                accumulate(head, *b, &db);
            }
        }
        Op::MaxPool { x, argmax } => {
            if wants(head, *x) {
                let mut dx = vec![T::zero(); val(head, *x).numel()];
                for (&i, &g) in argmax.iter().zip(gout) {
                    dx[i] += g;
                }
                accumulate(head, *x, &dx);
            }
        }
        Op::GlobalAvgPool(x) => {
            if wants(head, *x) {
                let xs = val(head, *x).shape();
                let hw = xs[2] * xs[3];
                let inv = T::one() / T::from_f64(hw as f64);
                let mut dx = vec![T::zero(); val(head, *x).numel()];
                for (p, &g) in gout.iter().enumerate() {
                    dx[p * hw..(p + 1) * hw].iter_mut().for_each(|d| *d = g * inv);
                }
                accumulate(head, *x, &dx);
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            labels,
        } => {
            let n = labels.len();
            let k = probs.len() / n;
            let scale = gout[0] / T::from_f64(n as f64);
            let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &l) in labels.iter().enumerate() {
                d[r * k + l] -= scale;
            }
            accumulate(head, *logits, &d);
        }
        Op::Add(a, b) => {
            accumulate(head, *a, gout);
            accumulate(head, *b, gout);
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            if wants(head, a) {
                let d: Vec<T> = val(head, b).data().iter().zip(gout).map(|(&v, &g)| v * g).collect();
                accumulate(head, a, &d);
            }
            if wants(head, b) {
                let d: Vec<T> = val(head, a).data().iter().zip(gout).map(|(&v, &g)| v * g).collect();
                accumulate(head, b, &d);
            }
        }
        Op::Scale(x, c) => {
            let d: Vec<T> = gout.iter().map(|&g| g * *c).collect();
            accumulate(head, *x, &d);
        }
        Op::AddConst(x) | Op::Reshape(x) => accumulate(head, *x, gout),
        Op::Ln1p(x) => {
            let d: Vec<T> = val(head, *x)
                .data()
                .iter()
                .zip(gout)
                .map(|(&v, &g)| g / (T::one() + v))
                .collect();
            accumulate(head, *x, &d);
        }
        Op::Sum(x) => {
            let d = vec![gout[0]; val(head, *x).numel()];
            accumulate(head, *x, &d);
        }
        Op::Square(x) => {
            let two = T::from_f64(2.0);
            let d: Vec<T> = val(head, *x).data().iter().zip(gout).map(|(&v, &g)| two * v * g).collect();
            accumulate(head, *x, &d);
        }
        Op::MatVec { m, v } => {
            let (m, v) = (*m, *v);
            let ms = val(head, m).shape().to_vec();
            let (r, d) = (ms[0], ms[1]);
            if wants(head, m) {
                let vd = val(head, v).data();
                let mut dm = vec![T::zero(); r * d];
                for i in 0..r {
                    for j in 0..d {
                        dm[i * d + j] = gout[i] * vd[j];
                    }
                }
                accumulate(head, m, &dm);
            }
            if wants(head, v) {
                let mut dv = vec![T::zero(); d];
                // dv = M^T gout
                T::gemm(d, r, 1, T::one(), val(head, m).data(), 1, d, gout, 1, 1, T::zero(), &mut dv, 1, 1);
                accumulate(head, v, &dv);
            }
        }
        Op::AddScalar { x, s } => {
            accumulate(head, *x, gout);
            let total = gout.iter().copied().sum::<T>();
            accumulate(head, *s, &[total]);
        }
        Op::BinaryGate(s) => {
            let d: Vec<T> = val(head, *s)
                .data()
                .iter()
                .zip(gout)
                .map(|(&v, &g)| g * surrogate_grad(v))
                .collect();
            accumulate(head, *s, &d);
        }
        Op::SigmoidGate { s, k } => {
            let d: Vec<T> = node
                .value
                .data()
                .iter()
                .zip(gout)
                .map(|(&y, &g)| g * *k * y * (T::one() - y))
                .collect();
            accumulate(head, *s, &d);
        }
        Op::ChannelScale { x, g } => {
            let (x, g) = (*x, *g);
            let (n, c, hw) = nc_hw("channel_scale", out_shape)?;
            if wants(head, x) {
                let gd = val(head, g).data();
                let mut dx = vec![T::zero(); gout.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dx[i] = gout[i] * gd[ch];
                        }
                    }
                }
                accumulate(head, x, &dx);
            }
            if wants(head, g) {
                let xd = val(head, x).data();
                let mut dg = vec![T::zero(); c];
                for b in 0..n {
                    for (ch, acc) in dg.iter_mut().enumerate() {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            *acc += gout[i] * xd[i];
                        }
                    }
                }
                accumulate(head, g, &dg);
            }
        }
        Op::Stack(parts) => {
            for (&p, &g) in parts.iter().zip(gout) {
                accumulate(head, p, &[g]);
            }
        }
        Op::MulConst { x, c } => {
            let d: Vec<T> = gout.iter().zip(c).map(|(&g, &k)| g * k).collect();
            accumulate(head, *x, &d);
        }
    }
    Ok(())
}
