//! Reverse-mode tape.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. Nodes only reference earlier nodes, so walking the
//! tape backwards is a valid reverse topological order.

use std::any::Any;
use std::fmt::Debug;

use super::kernels::{col2im, im2col, ConvGeometry};
use super::{Float, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Hook consulted by [`Graph::residual_join`] during backward. It supplies
/// the per-sample multiplier for the block-branch gradient, which is allowed
/// to differ from the forward multiplier.
pub trait GradientOverride<T>: Debug + Send {
    /// Called exactly once per backward pass; returns one multiplier per
    /// batch row.
    fn backward_scales(&mut self, batch: usize) -> Vec<T>;

    fn as_any(&self) -> &dyn Any;
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Leaf,
    Param(ParamId),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    AvgPool2(Var),
    PadChannels {
        x: Var,
        channels: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    ResidualJoin {
        residual: Var,
        block: Var,
        hook: Box<dyn GradientOverride<T>>,
    },
    Sum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SoftTargetNll {
        logp: Var,
        targets: Vec<T>,
    },
    KlDiv {
        logq: Var,
        target_logp: Vec<T>,
        target_first: bool,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, for every node that required one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn dims4(op: &'static str, t: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *t {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::InvalidShape {
            shape: t.to_vec(),
            reason: format!("{op} expects a [N, C, H, W] input"),
        }),
    }
}

fn dims2(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    match *t {
        [n, c] => Ok((n, c)),
        _ => Err(Error::InvalidShape {
            shape: t.to_vec(),
            reason: format!("{op} expects a [N, C] input"),
        }),
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A free input whose gradient is reported in [`Gradients`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies a parameter onto the tape; backward accumulates into its
    /// gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let trainable = p.trainable();
        self.push(p.value.clone(), Op::Param(id), trainable)
    }

    /// `x [N, in] * w[out, in]^T + b[out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, inp) = dims2("dense", self.shape(x))?;
        let (out, win) = dims2("dense", self.shape(w))?;
        if inp != win {
            return Err(Error::shape("dense", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::shape("dense bias", self.shape(w), self.shape(b)));
            }
        }
        let mut y = vec![T::zero(); n * out];
        T::gemm(false, true, n, out, inp, T::one(), self.data(x), self.data(w), T::zero(), &mut y);
        if let Some(b) = b {
            let bias = self.data(b);
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(bias).for_each(|(v, &bv)| *v += bv);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(vec![n, out], y), Op::Dense { x, w, b }, rg))
    }

    /// 2D convolution with square kernels and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        if !(1..=2).contains(&stride) {
            return Err(Error::InvalidShape {
                shape: self.shape(w).to_vec(),
                reason: format!("conv2d stride must be 1 or 2, got {stride}"),
            });
        }
        let (n, c, h, wd) = dims4("conv2d", self.shape(x))?;
        let (o, wc, kh, kw) = dims4("conv2d", self.shape(w))?;
        if wc != c || kh != kw {
            return Err(Error::shape("conv2d", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d bias", self.shape(w), self.shape(b)));
            }
        }
        let geom = ConvGeometry::new(c, h, wd, kh, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", self.shape(x), self.shape(w)))?;
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut y = vec![T::zero(); n * o * cols];
        let mut buf = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
        let xs = self.data(x);
        let ws = self.data(w);
        let in_plane = c * h * wd;
        for i in 0..n {
            let img = &xs[i * in_plane..(i + 1) * in_plane];
            let colm: &[T] = if geom.is_pointwise() {
                img
            } else {
                im2col(&geom, img, &mut buf);
                &buf
            };
            T::gemm(false, false, o, cols, rows, T::one(), ws, colm, T::zero(), &mut y[i * o * cols..(i + 1) * o * cols]);
        }
        if let Some(b) = b {
            let bias = self.data(b);
            for plane in y.chunks_mut(cols).enumerate() {
                let bv = bias[plane.0 % o];
                plane.1.iter_mut().for_each(|v| *v += bv);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let out = Tensor::from_parts(vec![n, o, geom.out_h, geom.out_w], y);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = dims4("batchnorm2d", self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batchnorm2d", self.shape(x), self.shape(gamma)));
        }
        Ok((n, c, h * w))
    }

    /// Training-mode batch norm. Returns the output together with the batch
    /// mean and biased variance of each channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, hw) = self.bn_check(x, gamma, beta)?;
        let m = T::lit((n * hw) as f64);
        let xs = self.data(x);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let plane = &xs[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                mean[ch] += plane.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for i in 0..n {
            for ch in 0..c {
                let plane = &xs[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                var[ch] += plane.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(BN_EPS)).sqrt()).collect();
        let gs = self.data(gamma);
        let bs = self.data(beta);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut y = vec![T::zero(); xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    xhat[j] = (xs[j] - mean[ch]) * inv_std[ch];
                    y[j] = gs[ch] * xhat[j] + bs[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(x).to_vec();
        let v = self.push(
            Tensor::from_parts(shape, y),
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, mean, var))
    }

    /// Inference-mode batch norm using fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let (n, c, hw) = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batchnorm2d stats", self.shape(x), &[mean.len()]));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(BN_EPS)).sqrt()).collect();
        let xs = self.data(x);
        let gs = self.data(gamma);
        let bs = self.data(beta);
        let mut y = vec![T::zero(); xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    y[j] = gs[ch] * ((xs[j] - mean[ch]) * inv_std[ch]) + bs[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("global_avg_pool", self.shape(x))?;
        let hw = h * w;
        let denom = T::lit(hw as f64);
        let y: Vec<T> = self.data(x).chunks(hw).map(|p| p.iter().copied().sum::<T>() / denom).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, c], y), Op::GlobalAvgPool(x), rg))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("avg_pool2", self.shape(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: "avg_pool2 needs even spatial dims".into(),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let xs = self.data(x);
        let quarter = T::lit(0.25);
        let mut y = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * ow + j] = s * quarter;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, c, oh, ow], y), Op::AvgPool2(x), rg))
    }

    /// Appends zero channels so the output has `channels` channels.
    pub fn pad_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let (n, c, h, w) = dims4("pad_channels", self.shape(x))?;
        if channels < c {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: format!("cannot pad {c} channels down to {channels}"),
            });
        }
        let hw = h * w;
        let xs = self.data(x);
        let mut y = vec![T::zero(); n * channels * hw];
        for i in 0..n {
            y[i * channels * hw..(i * channels + c) * hw].copy_from_slice(&xs[i * c * hw..(i + 1) * c * hw]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, channels, h, w], y), Op::PadChannels { x, channels }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let y: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&p, &q)| p + q).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, y), Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let y: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&p, &q)| p * q).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, y), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| factor * v);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Multiplies batch row `i` (leading axis) by `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let n = self.shape(x)[0];
        if factors.len() != n {
            return Err(Error::shape("scale_rows", self.shape(x), &[factors.len()]));
        }
        let per = self.value(x).numel() / n;
        let y: Vec<T> = self
            .data(x)
            .chunks(per)
            .zip(&factors)
            .flat_map(|(row, &f)| row.iter().map(move |&v| f * v))
            .collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, y), Op::ScaleRows(x, factors), rg))
    }

    /// `residual + scale[i] * block` per batch row. The block-branch gradient
    /// multiplier is taken from `hook` at backward time instead of `scale`.
    pub fn residual_join(
        &mut self,
        residual: Var,
        block: Var,
        scale: &[T],
        hook: Box<dyn GradientOverride<T>>,
    ) -> Result<Var> {
        if self.shape(residual) != self.shape(block) {
            return Err(Error::shape("residual_join", self.shape(residual), self.shape(block)));
        }
        let n = self.shape(block)[0];
        if scale.len() != n {
            return Err(Error::shape("residual_join scale", self.shape(block), &[scale.len()]));
        }
        let per = self.value(block).numel() / n;
        let r = self.data(residual);
        let b = self.data(block);
        let mut y = Vec::with_capacity(r.len());
        for i in 0..n {
            for j in i * per..(i + 1) * per {
                y.push(r[j] + scale[i] * b[j]);
            }
        }
        let rg = self.rg(residual) || self.rg(block);
        let shape = self.shape(block).to_vec();
        Ok(self.push(Tensor::from_parts(shape, y), Op::ResidualJoin { residual, block, hook }, rg))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = dims2("softmax", self.shape(x))?;
        let y = softmax_rows(self.data(x), c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, c], y), Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = dims2("log_softmax", self.shape(x))?;
        let y = log_softmax_rows(self.data(x), c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, c], y), Op::LogSoftmax(x), rg))
    }

    /// `-(1/N) sum_i sum_c targets[i,c] * logp[i,c]`. Targets are constant
    /// (one-hot or mixed).
    pub fn soft_target_nll(&mut self, logp: Var, targets: &Tensor<T>) -> Result<Var> {
        let (n, _) = dims2("soft_target_nll", self.shape(logp))?;
        if targets.shape() != self.shape(logp) {
            return Err(Error::shape("soft_target_nll", self.shape(logp), targets.shape()));
        }
        let total: T = self
            .data(logp)
            .iter()
            .zip(targets.data())
            .map(|(&l, &t)| if t == T::zero() { T::zero() } else { t * l })
            .sum();
        let loss = -total / T::lit(n as f64);
        let rg = self.rg(logp);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftTargetNll {
                logp,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    /// Batch-mean KL divergence between a constant target distribution `p`
    /// (given as log-probabilities) and `q = exp(logq)`.
    ///
    /// `target_first = true` computes `KL(p || q)`, otherwise `KL(q || p)`.
    pub fn kl_div(&mut self, logq: Var, target_logp: &Tensor<T>, target_first: bool) -> Result<Var> {
        let (n, _) = dims2("kl_div", self.shape(logq))?;
        if target_logp.shape() != self.shape(logq) {
            return Err(Error::shape("kl_div", self.shape(logq), target_logp.shape()));
        }
        let total: T = self
            .data(logq)
            .iter()
            .zip(target_logp.data())
            .map(|(&lq, &lp)| {
                if target_first {
                    let p = lp.exp();
                    if p == T::zero() {
                        T::zero()
                    } else {
                        p * (lp - lq)
                    }
                } else {
                    let q = lq.exp();
                    if q == T::zero() {
                        T::zero()
                    } else {
                        q * (lq - lp)
                    }
                }
            })
            .sum();
        let loss = total / T::lit(n as f64);
        let rg = self.rg(logq);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlDiv {
                logq,
                target_logp: target_logp.data().to_vec(),
                target_first,
            },
            rg,
        ))
    }

    /// Hooks attached by [`Graph::residual_join`], in tape order.
    pub fn overrides(&self) -> impl Iterator<Item = &dyn GradientOverride<T>> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::ResidualJoin { hook, .. } => Some(hook.as_ref()),
            _ => None,
        })
    }

    /// Propagates `d loss / d node` through the tape and accumulates the
    /// parameter gradients into `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &mut rest[0];
            let mut sink = Sink {
                nodes: before,
                grads: &mut grads,
            };
            backward_node(node, &g, &mut sink, store);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

struct Sink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Float> Sink<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn add(&mut self, v: Var, g: Vec<T>) {
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn add_with(&mut self, v: Var, f: impl FnOnce(&[T]) -> Vec<T>) {
        if self.wants(v) {
            let g = f(self.nodes[v.0].value.data());
            self.add(v, g);
        }
    }
}

fn backward_node<T: Float>(node: &mut Node<T>, g: &[T], s: &mut Sink<'_, T>, store: &mut ParamStore<T>) {
    let out_shape = node.value.shape().to_vec();
    match &mut node.op {
        Op::Constant | Op::Leaf => {}
        Op::Param(id) => store.accumulate(*id, g),
        Op::Dense { x, w, b } => {
            let (x, w, b) = (*x, *w, *b);
            let (n, out) = (out_shape[0], out_shape[1]);
            let inp = s.val(x).shape()[1];
            if s.wants(x) {
                let mut dx = vec![T::zero(); n * inp];
                T::gemm(false, false, n, inp, out, T::one(), g, s.val(w).data(), T::zero(), &mut dx);
                s.add(x, dx);
            }
            if s.wants(w) {
                let mut dw = vec![T::zero(); out * inp];
                T::gemm(true, false, out, inp, n, T::one(), g, s.val(x).data(), T::zero(), &mut dw);
                s.add(w, dw);
            }
            if let Some(b) = b {
                if s.wants(b) {
                    let mut db = vec![T::zero(); out];
                    for row in g.chunks(out) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    s.add(b, db);
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (x, w, b, geom) = (*x, *w, *b, *geom);
            let n = out_shape[0];
            let o = out_shape[1];
            let (rows, cols) = (geom.col_rows(), geom.col_cols());
            let in_plane = geom.channels * geom.height * geom.width;
            let want_x = s.wants(x);
            let want_w = s.wants(w);
            let mut dw = vec![T::zero(); if want_w { o * rows } else { 0 }];
            let mut dx = vec![T::zero(); if want_x { n * in_plane } else { 0 }];
            let mut buf = vec![T::zero(); if geom.is_pointwise() { 0 } else { rows * cols }];
            let mut dcols = vec![T::zero(); if want_x && !geom.is_pointwise() { rows * cols } else { 0 }];
            {
                let xs = s.val(x).data();
                let ws = s.val(w).data();
                for i in 0..n {
                    let go = &g[i * o * cols..(i + 1) * o * cols];
                    if want_w {
                        let img = &xs[i * in_plane..(i + 1) * in_plane];
                        let colm: &[T] = if geom.is_pointwise() {
                            img
                        } else {
                            im2col(&geom, img, &mut buf);
                            &buf
                        };
                        T::gemm(false, true, o, rows, cols, T::one(), go, colm, T::one(), &mut dw);
                    }
                    if want_x {
                        let dimg = &mut dx[i * in_plane..(i + 1) * in_plane];
                        if geom.is_pointwise() {
                            T::gemm(true, false, rows, cols, o, T::one(), ws, go, T::zero(), dimg);
                        } else {
                            T::gemm(true, false, rows, cols, o, T::one(), ws, go, T::zero(), &mut dcols);
                            col2im(&geom, &dcols, dimg);
                        }
                    }
                }
            }
            if want_x {
                s.add(x, dx);
            }
            if want_w {
                s.add(w, dw);
            }
            if let Some(b) = b {
                if s.wants(b) {
                    let mut db = vec![T::zero(); o];
                    for (p, plane) in g.chunks(cols).enumerate() {
                        db[p % o] += plane.iter().copied().sum::<T>();
                    }
                    s.add(b, db);
                }
            }
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let (n, c) = (out_shape[0], out_shape[1]);
            let hw = out_shape[2] * out_shape[3];
            let m = T::lit((n * hw) as f64);
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for i in 0..n {
                for ch in 0..c {
                    let off = (i * c + ch) * hw;
                    for j in off..off + hw {
                        sum_g[ch] += g[j];
                        sum_gx[ch] += g[j] * xhat[j];
                    }
                }
            }
            if s.wants(x) {
                let gs = s.val(gamma).data().to_vec();
                let mut dx = vec![T::zero(); g.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let k = gs[ch] * inv_std[ch] / m;
                        let off = (i * c + ch) * hw;
                        for j in off..off + hw {
                            dx[j] = k * (m * g[j] - sum_g[ch] - xhat[j] * sum_gx[ch]);
                        }
                    }
                }
                s.add(x, dx);
            }
            if s.wants(gamma) {
                s.add(gamma, sum_gx);
            }
            if s.wants(beta) {
                s.add(beta, sum_g);
            }
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let (n, c) = (out_shape[0], out_shape[1]);
            let hw = out_shape[2] * out_shape[3];
            let gs = s.val(gamma).data().to_vec();
            if s.wants(gamma) {
                let xs = s.val(x).data();
                let mut dg = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * hw;
                        for j in off..off + hw {
                            dg[ch] += g[j] * (xs[j] - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                s.add(gamma, dg);
            }
            if s.wants(beta) {
                let mut db = vec![T::zero(); c];
                for (p, plane) in g.chunks(hw).enumerate() {
                    db[p % c] += plane.iter().copied().sum::<T>();
                }
                s.add(beta, db);
            }
            if s.wants(x) {
                let mut dx = g.to_vec();
                for (p, plane) in dx.chunks_mut(hw).enumerate() {
                    let k = gs[p % c] * inv_std[p % c];
                    plane.iter_mut().for_each(|v| *v *= k);
                }
                s.add(x, dx);
            }
        }
        Op::Relu(x) => {
            let x = *x;
            let out = node.value.data();
            s.add_with(x, |_| g.iter().zip(out).map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() }).collect());
        }
        Op::GlobalAvgPool(x) => {
            let x = *x;
            s.add_with(x, |xs| {
                let hw = xs.len() / g.len();
                let denom = T::lit(hw as f64);
                g.iter().flat_map(|&gv| std::iter::repeat_n(gv / denom, hw)).collect()
            });
        }
        Op::AvgPool2(x) => {
            let x = *x;
            let (oh, ow) = (out_shape[2], out_shape[3]);
            s.add_with(x, |xs| {
                let (h, w) = (oh * 2, ow * 2);
                let mut dx = vec![T::zero(); xs.len()];
                let quarter = T::lit(0.25);
                for p in 0..xs.len() / (h * w) {
                    for i in 0..h {
                        for j in 0..w {
                            dx[p * h * w + i * w + j] = g[p * oh * ow + (i / 2) * ow + j / 2] * quarter;
                        }
                    }
                }
                dx
            });
        }
        Op::PadChannels { x, channels } => {
            let (x, channels) = (*x, *channels);
            let hw = out_shape[2] * out_shape[3];
            s.add_with(x, |xs| {
                let n = out_shape[0];
                let c = xs.len() / (n * hw);
                let mut dx = Vec::with_capacity(xs.len());
                for i in 0..n {
                    dx.extend_from_slice(&g[i * channels * hw..(i * channels + c) * hw]);
                }
                dx
            });
        }
        Op::Add(a, b) => {
            let (a, b) = (*a, *b);
            s.add_with(a, |_| g.to_vec());
            s.add_with(b, |_| g.to_vec());
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let bv = s.val(b).data().to_vec();
            let av = s.val(a).data().to_vec();
            s.add_with(a, |_| g.iter().zip(&bv).map(|(&gv, &y)| gv * y).collect());
            s.add_with(b, |_| g.iter().zip(&av).map(|(&gv, &y)| gv * y).collect());
        }
        Op::Scale(x, f) => {
            let (x, f) = (*x, *f);
            s.add_with(x, |_| g.iter().map(|&v| f * v).collect());
        }
        Op::ScaleRows(x, factors) => {
            let x = *x;
            let per = g.len() / factors.len();
            let factors = &*factors;
            s.add_with(x, |_| {
                g.chunks(per)
                    .zip(factors)
                    .flat_map(|(row, &f)| row.iter().map(move |&v| f * v))
                    .collect()
            });
        }
        Op::ResidualJoin { residual, block, hook } => {
            let (residual, block) = (*residual, *block);
            let n = out_shape[0];
            let scales = hook.backward_scales(n);
            debug_assert_eq!(scales.len(), n);
            let per = g.len() / n;
            s.add_with(residual, |_| g.to_vec());
            s.add_with(block, |_| {
                g.chunks(per)
                    .zip(&scales)
                    .flat_map(|(row, &f)| row.iter().map(move |&v| f * v))
                    .collect()
            });
        }
        Op::Sum(x) => {
            let x = *x;
            s.add_with(x, |xs| vec![g[0]; xs.len()]);
        }
        Op::Softmax(x) => {
            let x = *x;
            let c = out_shape[1];
            let y = node.value.data();
            s.add_with(x, |_| {
                let mut dx = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                dx
            });
        }
        Op::LogSoftmax(x) => {
            let x = *x;
            let c = out_shape[1];
            let y = node.value.data();
            s.add_with(x, |_| {
                let mut dx = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let total: T = gr.iter().copied().sum();
                    for j in 0..c {
                        dr[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                dx
            });
        }
        Op::SoftTargetNll { logp, targets } => {
            let logp = *logp;
            let n = T::lit(s.val(logp).shape()[0] as f64);
            let k = -g[0] / n;
            s.add_with(logp, |_| targets.iter().map(|&t| k * t).collect());
        }
        Op::KlDiv {
            logq,
            target_logp,
            target_first,
        } => {
            let logq = *logq;
            let n = T::lit(s.val(logq).shape()[0] as f64);
            let k = g[0] / n;
            let target_first = *target_first;
            s.add_with(logq, |lq| {
                lq.iter()
                    .zip(target_logp.iter())
                    .map(|(&lq, &lp)| {
                        if target_first {
                            -k * lp.exp()
                        } else {
                            let q = lq.exp();
                            if q == T::zero() {
                                T::zero()
                            } else {
                                k * q * (lq - lp + T::one())
                            }
                        }
                    })
                    .collect()
            });
        }
    }
}

/// Row-wise softmax of a row-major `[N, C]` buffer.
pub fn softmax_rows<T: Float>(x: &[T], c: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = y.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - mx).exp();
            total += e;
            y.push(e);
        }
        y[start..].iter_mut().for_each(|v| *v /= total);
    }
    y
}

/// Row-wise log-softmax of a row-major `[N, C]` buffer.
pub fn log_softmax_rows<T: Float>(x: &[T], c: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
        y.extend(row.iter().map(|&v| v - lse));
    }
    y
}
