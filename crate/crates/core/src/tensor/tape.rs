//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every operation appends one node holding its output value. Nodes are
//! created in execution order, so replaying them back to front is a valid
//! topological order: each node's gradient is complete before its backward
//! rule runs, and each rule runs once. Gradients accumulate additively into
//! inputs with fan-out.

use super::kernels::{self, Activation, Conv2dGeom, NormMode, NormSaved};
use super::{Float, Tensor};
use crate::error::{Error, Result};
use crate::ssm::{scan_flops, BatchedScan, Discretization};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics produced by a train-mode batch norm, already advanced
/// by one moving-average step; the owner of `key` stores them.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub key: String,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

type ElementwiseGrad<T> = Box<dyn Fn(T) -> T>;

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: Conv2dGeom,
    },
    Conv1d {
        x: Var,
        w: Var,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        shift: Var,
        saved: NormSaved<T>,
        mode: NormMode,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        saved: NormSaved<T>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    NegExp {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    ChannelShuffle {
        x: Var,
        groups: usize,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
    },
    Upsample2 {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Scan {
        inputs: [Var; 6],
        spec: BatchedScan,
        states: Vec<T>,
    },
    Sum {
        x: Var,
    },
    DotConst {
        x: Var,
        weights: Tensor<T>,
    },
    BceWithLogits {
        x: Var,
        target: Tensor<T>,
    },
    IouLoss {
        pred: Var,
        target: Tensor<T>,
    },
    Elementwise {
        x: Var,
        grad: ElementwiseGrad<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record. A tape built with [`Tape::inference`] keeps values but
/// no backward state.
pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    record: bool,
    flops: u64,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            record: true,
            flops: 0,
            bn_updates: Vec::new(),
        }
    }

    /// Forward-only tape: no backward state is retained.
    pub fn inference() -> Self {
        Tape {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// FLOPs (2 × multiply-adds) of all convolutions and scans executed.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs_grad(&self, inputs: &[Var]) -> bool {
        self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.needs_grad(inputs);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let geo = Conv2dGeom::new(self.shape(x), self.shape(w), stride, pad, groups)?;
        let y = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            groups,
        )?;
        self.flops += geo.flops();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, geo }, &inputs))
    }

    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = kernels::conv1d(self.value(x), self.value(w))?;
        self.flops += 2 * (y.numel() * self.value(w).numel()) as u64;
        Ok(self.push(y, Op::Conv1d { x, w }, &[x, w]))
    }

    /// Batch norm. In train mode the advanced running statistics are queued
    /// as a [`BnUpdate`] under `key`; in infer mode `running` is used as is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        shift: Var,
        running: (&[T], &[T]),
        mode: NormMode,
        key: &str,
    ) -> Result<Var> {
        let (mut rm, mut rv) = (running.0.to_vec(), running.1.to_vec());
        let (y, saved) = kernels::batch_norm(
            self.value(x),
            self.value(gain).data(),
            self.value(shift).data(),
            &mut rm,
            &mut rv,
            mode,
            kernels::BN_EPS,
            kernels::BN_MOMENTUM,
        )?;
        if mode == NormMode::Train {
            self.bn_updates.push(BnUpdate {
                key: key.to_string(),
                running_mean: rm,
                running_var: rv,
            });
        }
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gain,
                shift,
                saved,
                mode,
            },
            &[x, gain, shift],
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (y, saved) = kernels::layer_norm(
            self.value(x),
            self.value(gain).data(),
            self.value(shift).data(),
            kernels::BN_EPS,
        )?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                shift,
                saved,
            },
            &[x, gain, shift],
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = kernels::activation(self.value(x), kind);
        self.push(y, Op::Act { x, kind }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Softplus)
    }

    /// `−exp(x)`, used to keep a diagonal state matrix negative.
    pub fn neg_exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| -v.exp());
        self.push(y, Op::NegExp { x }, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let y = Tensor::new(self.shape(a), data)?;
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let y = Tensor::new(self.shape(a), data)?;
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    /// `x[n, c, :, :] · s[n, c]` for `x: [N, C, H, W]`, `s: [N, C, 1, 1]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("scale_channels")?;
        if self.shape(s) != [n, c, 1, 1] {
            return Err(Error::shape(
                "scale_channels",
                format!("scale shape {:?}, expected [{n},{c},1,1]", self.shape(s)),
            ));
        }
        let plane = h * w;
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(plane.max(1)).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= sv[i]);
        }
        let y = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(y, Op::ScaleChannels { x, s }, &[x, s]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool { x }, &[x]))
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let y = kernels::channel_shuffle(self.value(x), groups)?;
        Ok(self.push(y, Op::ChannelShuffle { x, groups }, &[x]))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = kernels::narrow_channels(self.value(x), start, len)?;
        Ok(self.push(y, Op::Narrow { x, start }, &[x]))
    }

    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let c = self.value(x).dims4("split_channels")?.1;
        let total: usize = sizes.iter().sum();
        if total != c {
            return Err(Error::shape(
                "split_channels",
                format!("sizes {sizes:?} sum to {total}, expected C={c}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow_channels(x, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = kernels::concat_channels(&vals)?;
        Ok(self.push(y, Op::Concat { xs: xs.to_vec() }, xs))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let y = kernels::upsample_nearest2(self.value(x))?;
        Ok(self.push(y, Op::Upsample2 { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }, &[x]))
    }

    /// `out[i] = x[index[i]]` (flat indices), viewed as `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {} elements", src.len()),
            ));
        }
        let y = Tensor::new(shape, index.iter().map(|&i| src[i]).collect())?;
        Ok(self.push(y, Op::Gather { x, index }, &[x]))
    }

    /// Batched selective scan; see [`BatchedScan`] for shapes.
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        p: Var,
        q: Var,
        discretization: Discretization,
    ) -> Result<Var> {
        let spec = BatchedScan::infer(
            self.value(x),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(p),
            self.value(q),
            discretization,
        )?;
        let (y, states) = spec.forward(
            self.value(x).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(p).data(),
            self.value(q).data(),
        );
        self.flops += scan_flops(spec.batch, spec.len, spec.channels, spec.state);
        let y = Tensor::new(&[spec.batch, spec.len, spec.channels], y)?;
        let inputs = [x, delta, a, b, p, q];
        let states = if self.needs_grad(&inputs) {
            states
        } else {
            Vec::new()
        };
        Ok(self.push(
            y,
            Op::Scan {
                inputs,
                spec,
                states,
            },
            &inputs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x }, &[x])
    }

    /// `Σ x ⊙ weights` with constant weights.
    pub fn dot_const(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        self.check_const_shape("dot_const", x, &weights)?;
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, weights }, &[x]))
    }

    fn check_const_shape(&self, op: &'static str, x: Var, t: &Tensor<T>) -> Result<()> {
        if self.shape(x) != t.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(x), t.shape()),
            ));
        }
        Ok(())
    }

    /// Summed binary cross-entropy of logits against constant targets.
    pub fn bce_with_logits(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        self.check_const_shape("bce_with_logits", x, &target)?;
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::BceWithLogits { x, target }, &[x]))
    }

    /// `Σ (1 − IoU)` between `[M, 4]` left/top/right/bottom distance rows
    /// measured from a shared anchor point.
    pub fn iou_loss_ltrb(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        self.check_const_shape("iou_loss_ltrb", pred, &target)?;
        if self.value(pred).rank() != 2 || self.shape(pred)[1] != 4 {
            return Err(Error::shape(
                "iou_loss_ltrb",
                format!("expected [M,4], got {:?}", self.shape(pred)),
            ));
        }
        let s = self
            .value(pred)
            .data()
            .chunks(4)
            .zip(target.data().chunks(4))
            .map(|(p, t)| T::one() - ltrb_iou(p, t).iou)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::IouLoss { pred, target }, &[pred]))
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn elementwise(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> Var {
        let y = self.value(x).map(f);
        self.push(
            y,
            Op::Elementwise {
                x,
                grad: Box::new(df),
            },
            &[x],
        )
    }

    /// Gradients of the scalar `loss` w.r.t. every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            for (v, g) in self.backward_node(node, &dy) {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], g);
                }
            }
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, dy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, geo } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), dy, geo);
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, Tensor::new(val(*b).shape(), db).expect("db")));
                }
                out
            }
            Op::Conv1d { x, w } => {
                let (dx, dw) = kernels::conv1d_backward(val(*x), val(*w), dy);
                vec![(*x, dx), (*w, dw)]
            }
            Op::BatchNorm {
                x,
                gain,
                shift,
                saved,
                mode,
            } => {
                let (dx, dg, ds) =
                    kernels::batch_norm_backward(val(*x), val(*gain).data(), dy, saved, *mode);
                vec![
                    (*x, dx),
                    (*gain, vec_like(val(*gain), dg)),
                    (*shift, vec_like(val(*shift), ds)),
                ]
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                saved,
            } => {
                let (dx, dg, ds) =
                    kernels::layer_norm_backward(val(*x), val(*gain).data(), dy, saved);
                vec![
                    (*x, dx),
                    (*gain, vec_like(val(*gain), dg)),
                    (*shift, vec_like(val(*shift), ds)),
                ]
            }
            Op::Act { x, kind } => {
                let xv = val(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| g * kind.derivative(v))
                    .collect();
                vec![(*x, vec_like(xv, d))]
            }
            Op::NegExp { x } => {
                // d(−e^x) = −e^x = y
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&y, &g)| g * y)
                    .collect();
                vec![(*x, vec_like(val(*x), d))]
            }
            Op::Add { a, b } => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let da = dy
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&g, &v)| g * v)
                    .collect();
                let db = dy
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&g, &v)| g * v)
                    .collect();
                vec![(*a, vec_like(av, da)), (*b, vec_like(bv, db))]
            }
            Op::ScaleChannels { x, s } => {
                let (xv, sv) = (val(*x), val(*s));
                let plane = xv.shape()[2] * xv.shape()[3];
                let mut dx = dy.data().to_vec();
                let mut ds = vec![T::zero(); sv.numel()];
                for (i, (gchunk, xchunk)) in dx
                    .chunks_mut(plane.max(1))
                    .zip(xv.data().chunks(plane.max(1)))
                    .enumerate()
                {
                    let mut acc = T::zero();
                    for (g, &xx) in gchunk.iter_mut().zip(xchunk) {
                        acc += *g * xx;
                        *g *= sv.data()[i];
                    }
                    ds[i] = acc;
                }
                vec![(*x, vec_like(xv, dx)), (*s, vec_like(sv, ds))]
            }
            Op::GlobalAvgPool { x } => {
                let xv = val(*x);
                let plane = xv.shape()[2] * xv.shape()[3];
                let inv = T::c(1.0 / plane as f64);
                let dx = dy
                    .data()
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g * inv, plane))
                    .collect();
                vec![(*x, vec_like(xv, dx))]
            }
            Op::ChannelShuffle { x, groups } => {
                vec![(
                    *x,
                    kernels::channel_unshuffle(dy, *groups).expect("validated shuffle"),
                )]
            }
            Op::Narrow { x, start } => {
                let xv = val(*x);
                let s = xv.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let len = dy.shape()[1];
                let mut dx = vec![T::zero(); xv.numel()];
                for b in 0..n {
                    dx[(b * c + start) * plane..][..len * plane]
                        .copy_from_slice(&dy.data()[b * len * plane..][..len * plane]);
                }
                vec![(*x, vec_like(xv, dx))]
            }
            Op::Concat { xs } => {
                let sizes: Vec<usize> = xs.iter().map(|&v| val(v).shape()[1]).collect();
                let parts = kernels::split_channels(dy, &sizes).expect("validated concat");
                xs.iter().copied().zip(parts).collect()
            }
            Op::Upsample2 { x } => vec![(*x, kernels::upsample_nearest2_backward(dy))],
            Op::Reshape { x } => vec![(*x, dy.clone().reshape(val(*x).shape()).expect("reshape"))],
            Op::Gather { x, index } => {
                let xv = val(*x);
                let mut dx = vec![T::zero(); xv.numel()];
                for (&i, &g) in index.iter().zip(dy.data()) {
                    dx[i] += g;
                }
                vec![(*x, vec_like(xv, dx))]
            }
            Op::Scan {
                inputs,
                spec,
                states,
            } => {
                let [x, delta, a, b, p, q] = *inputs;
                let g = spec.backward(
                    val(x).data(),
                    val(delta).data(),
                    val(a).data(),
                    val(b).data(),
                    val(p).data(),
                    val(q).data(),
                    states,
                    dy.data(),
                );
                vec![
                    (x, vec_like(val(x), g.x)),
                    (delta, vec_like(val(delta), g.delta)),
                    (a, vec_like(val(a), g.a)),
                    (b, vec_like(val(b), g.b)),
                    (p, vec_like(val(p), g.p)),
                    (q, vec_like(val(q), g.q)),
                ]
            }
            Op::Sum { x } => vec![(*x, Tensor::full(val(*x).shape(), dy.data()[0]))],
            Op::DotConst { x, weights } => vec![(*x, weights.map(|w| w * dy.data()[0]))],
            Op::BceWithLogits { x, target } => {
                let g0 = dy.data()[0];
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&z, &t)| g0 * (kernels::sigmoid(z) - t))
                    .collect();
                vec![(*x, vec_like(val(*x), d))]
            }
            Op::IouLoss { pred, target } => {
                let g0 = dy.data()[0];
                let mut d = Vec::with_capacity(val(*pred).numel());
                for (p, t) in val(*pred).data().chunks(4).zip(target.data().chunks(4)) {
                    d.extend(ltrb_iou(p, t).grad.iter().map(|&gi| -gi * g0));
                }
                vec![(*pred, vec_like(val(*pred), d))]
            }
            Op::Elementwise { x, grad } => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| g * grad(v))
                    .collect();
                vec![(*x, vec_like(val(*x), d))]
            }
        }
    }
}

fn vec_like<T: Float>(like: &Tensor<T>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(like.shape(), data).expect("gradient shape")
}

pub(crate) struct LtrbIou<T> {
    pub iou: T,
    /// ∂IoU/∂(l, t, r, b) of the prediction.
    pub grad: [T; 4],
}

/// IoU of two boxes given as distances from the same anchor point.
pub(crate) fn ltrb_iou<T: Float>(p: &[T], t: &[T]) -> LtrbIou<T> {
    let (pl, pt, pr, pb) = (p[0], p[1], p[2], p[3]);
    let (tl, tt, tr, tb) = (t[0], t[1], t[2], t[3]);
    let (pw, ph) = (pl + pr, pt + pb);
    let area_p = pw * ph;
    let area_t = (tl + tr) * (tt + tb);
    let iw = pl.min(tl) + pr.min(tr);
    let ih = pt.min(tt) + pb.min(tb);
    let inter = iw * ih;
    let union = area_p + area_t - inter;
    let eps = T::c(1e-12);
    let u = union.max(eps);
    let iou = inter / u;
    // ∂IoU = ∂I·(U + I)/U² − I·∂A_p/U²
    let ki = (u + inter) / (u * u);
    let ka = inter / (u * u);
    let di = [
        if pl < tl { ih } else { T::zero() },
        if pt < tt { iw } else { T::zero() },
        if pr < tr { ih } else { T::zero() },
        if pb < tb { iw } else { T::zero() },
    ];
    let da = [ph, pw, ph, pw];
    let grad = [0, 1, 2, 3].map(|i| di[i] * ki - da[i] * ka);
    LtrbIou { iou, grad }
}
