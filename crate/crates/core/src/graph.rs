//! Reverse-mode automatic differentiation over a single-use tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! trainable (gradients are accumulated for them) or constant. Every derived
//! node records the operation that produced it; [`Graph::backward`] walks the
//! tape in reverse and returns a [`Gradients`] table indexed by [`NodeId`].
//! Nodes whose inputs are all constant never receive gradients, which is how
//! [`Graph::stop_gradient`] blocks flow: it re-enters a value as a new
//! constant leaf.

use crate::error::{Result, SpaceError};
use crate::tensor::{avg_pool2, avg_pool2_backward, col2im, gemm, im2col, ConvGeom, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Tensor),
    Scale(NodeId, f32),
    Square(NodeId),
    Relu(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    MaskedMean {
        input: NodeId,
        mask: Tensor,
        count: f64,
    },
    AvgPool2(NodeId),
    ChannelAffine {
        input: NodeId,
        scale: Vec<f32>,
    },
    BatchItem(NodeId, usize),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
        cols: Option<Vec<f32>>,
    },
    ConvTranspose2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward root w.r.t. `id`; `None` means no path reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.rg(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.push(value, Op::Leaf, trainable)
    }

    /// Same value, no gradient path back to `id`'s ancestors.
    pub fn stop_gradient(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant tensor (e.g. a binary mask).
    pub fn mul_const(&mut self, a: NodeId, c: Tensor) -> Result<NodeId> {
        let v = self.value(a).zip_map(&c, |x, y| x * y)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::MulConst(a, c), rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f32) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum() as f32);
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean() as f32);
        let rg = self.rg(a);
        self.push(v, Op::MeanAll(a), rg)
    }

    /// `Σ(a ⊙ mask) / Σ mask` accumulated in double precision; 0 for an empty mask.
    pub fn masked_mean(&mut self, a: NodeId, mask: Tensor) -> Result<NodeId> {
        let count = mask.sum();
        let total: f64 = self
            .value(a)
            .zip_map(&mask, |x, m| x * m)?
            .data()
            .iter()
            .map(|&v| v as f64)
            .sum();
        let v = if count == 0.0 { 0.0 } else { total / count };
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::scalar(v as f32),
            Op::MaskedMean { input: a, mask, count },
            rg,
        ))
    }

    pub fn avg_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let v = avg_pool2(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::AvgPool2(a), rg))
    }

    /// Per-channel `x·scale[c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&mut self, a: NodeId, scale: &[f32], shift: &[f32]) -> Result<NodeId> {
        let x = self.value(a);
        let (n, c, h, w) = x.dims4()?;
        if scale.len() != c || shift.len() != c {
            return Err(SpaceError::contract(format!(
                "channel affine expects {c} coefficients, got {}/{}",
                scale.len(),
                shift.len()
            )));
        }
        let mut out = x.data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * h * w;
                for v in &mut out[off..off + h * w] {
                    *v = *v * scale[ch] + shift[ch];
                }
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(
            v,
            Op::ChannelAffine {
                input: a,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    pub fn batch_item(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let v = self.value(a).batch_item(i)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::BatchItem(a, i), rg))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (o, kc, k) = match self.value(weight).shape() {
            &[o, kc, kh, kw] if kh == kw => (o, kc, kh),
            s => return Err(SpaceError::contract(format!("bad conv weight shape {s:?}"))),
        };
        if kc != c {
            return Err(SpaceError::contract(format!(
                "conv expects {kc} input channels, got {c}"
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return Err(SpaceError::contract(format!(
                "conv kernel {k} does not fit input {h}x{w} with pad {pad}"
            )));
        }
        let geom = ConvGeom {
            channels: c,
            in_h: h,
            in_w: w,
            kernel: k,
            stride,
            pad,
        };
        check_bias(self, bias, o)?;
        let (rows, l) = (geom.col_rows(), geom.col_cols());
        let keep_cols = self.rg(weight);
        let mut saved = if keep_cols {
            vec![0.0f32; n * rows * l]
        } else {
            Vec::new()
        };
        let mut scratch = vec![0.0f32; rows * l];
        let mut out = vec![0.0f32; n * o * l];
        let x = self.value(input).data();
        let wdata = self.value(weight).data();
        for b in 0..n {
            let cols: &mut [f32] = if keep_cols {
                &mut saved[b * rows * l..(b + 1) * rows * l]
            } else {
                &mut scratch
            };
            im2col(&x[b * c * h * w..(b + 1) * c * h * w], &geom, cols);
            gemm(o, rows, l, wdata, false, cols, false, 0.0, &mut out[b * o * l..(b + 1) * o * l]);
        }
        if let Some(bid) = bias {
            add_channel_bias(&mut out, self.value(bid).data(), n, o, l);
        }
        let v = Tensor::new(vec![n, o, geom.out_h(), geom.out_w()], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols: keep_cols.then_some(saved),
            },
            rg,
        ))
    }

    /// Transposed convolution; weight layout `[C_in, C_out, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (n, ci, h, w) = self.value(input).dims4()?;
        let (wc, co, k) = match self.value(weight).shape() {
            &[wc, co, kh, kw] if kh == kw => (wc, co, kh),
            s => return Err(SpaceError::contract(format!("bad deconv weight shape {s:?}"))),
        };
        if wc != ci || stride == 0 {
            return Err(SpaceError::contract(format!(
                "deconv expects {wc} input channels, got {ci}"
            )));
        }
        let oh = ((h - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| SpaceError::contract("deconv padding exceeds output"))?;
        let ow = ((w - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| SpaceError::contract("deconv padding exceeds output"))?;
        let geom = ConvGeom {
            channels: co,
            in_h: oh,
            in_w: ow,
            kernel: k,
            stride,
            pad,
        };
        check_bias(self, bias, co)?;
        let rows = geom.col_rows();
        let l = h * w;
        let mut cols = vec![0.0f32; rows * l];
        let mut out = vec![0.0f32; n * co * oh * ow];
        let x = self.value(input).data();
        let wdata = self.value(weight).data();
        for b in 0..n {
            gemm(rows, ci, l, wdata, true, &x[b * ci * l..(b + 1) * ci * l], false, 0.0, &mut cols);
            col2im(&cols, &geom, &mut out[b * co * oh * ow..(b + 1) * co * oh * ow]);
        }
        if let Some(bid) = bias {
            add_channel_bias(&mut out, self.value(bid).data(), n, co, oh * ow);
        }
        let v = Tensor::new(vec![n, co, oh, ow], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            v,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Gradients of the scalar node `root` w.r.t. every node that requires them.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(SpaceError::contract("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, || Ok(g.clone()))?;
                self.accum(grads, *b, || Ok(g.clone()))?;
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, || Ok(g.clone()))?;
                self.accum(grads, *b, || Ok(g.map(|v| -v)))?;
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, || g.zip_map(self.value(*b), |x, y| x * y))?;
                self.accum(grads, *b, || g.zip_map(self.value(*a), |x, y| x * y))?;
            }
            Op::MulConst(a, c) => self.accum(grads, *a, || g.zip_map(c, |x, y| x * y))?,
            Op::Scale(a, s) => self.accum(grads, *a, || Ok(g.map(|v| v * s)))?,
            Op::Square(a) => self.accum(grads, *a, || g.zip_map(self.value(*a), |x, y| 2.0 * x * y))?,
            Op::Relu(a) => self.accum(grads, *a, || {
                g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 })
            })?,
            Op::SumAll(a) => {
                let gv = g.item();
                self.accum(grads, *a, || Ok(Tensor::full(self.value(*a).shape(), gv)))?
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel().max(1) as f32;
                let gv = g.item() / n;
                self.accum(grads, *a, || Ok(Tensor::full(self.value(*a).shape(), gv)))?
            }
            Op::MaskedMean { input, mask, count } => {
                let k = if *count == 0.0 { 0.0 } else { (g.item() as f64 / count) as f32 };
                self.accum(grads, *input, || Ok(mask.map(|m| m * k)))?
            }
            Op::AvgPool2(a) => {
                self.accum(grads, *a, || avg_pool2_backward(g, self.value(*a).shape()))?
            }
            Op::ChannelAffine { input, scale } => self.accum(grads, *input, || {
                let (n, c, h, w) = g.dims4()?;
                let mut d = g.data().to_vec();
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * h * w;
                        for v in &mut d[off..off + h * w] {
                            *v *= scale[ch];
                        }
                    }
                }
                Tensor::new(g.shape().to_vec(), d)
            })?,
            Op::BatchItem(a, i) => self.accum(grads, *a, || {
                let src = self.value(*a);
                let len = g.numel();
                let mut d = vec![0.0f32; src.numel()];
                d[i * len..(i + 1) * len].copy_from_slice(g.data());
                Tensor::new(src.shape().to_vec(), d)
            })?,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => self.conv2d_backward(g, *input, *weight, *bias, geom, cols.as_deref(), grads)?,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => self.deconv_backward(g, *input, *weight, *bias, geom, grads)?,
        }
        Ok(())
    }

    fn accum(
        &self,
        grads: &mut [Option<Tensor>],
        id: NodeId,
        f: impl FnOnce() -> Result<Tensor>,
    ) -> Result<()> {
        if !self.rg(id) {
            return Ok(());
        }
        let contribution = f()?;
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &Tensor,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: &ConvGeom,
        cols: Option<&[f32]>,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (n, o, oh, ow) = g.dims4()?;
        let l = oh * ow;
        let rows = geom.col_rows();
        let gd = g.data();
        if let Some(b) = bias {
            self.accum(grads, b, || Ok(bias_grad(gd, n, o, l)))?;
        }
        self.accum(grads, weight, || {
            let cols = cols.ok_or_else(|| SpaceError::contract("conv columns were not retained"))?;
            let mut dw = vec![0.0f32; o * rows];
            for b in 0..n {
                gemm(
                    o,
                    l,
                    rows,
                    &gd[b * o * l..(b + 1) * o * l],
                    false,
                    &cols[b * rows * l..(b + 1) * rows * l],
                    true,
                    1.0,
                    &mut dw,
                );
            }
            Tensor::new(self.value(weight).shape().to_vec(), dw)
        })?;
        self.accum(grads, input, || {
            let wdata = self.value(weight).data();
            let plane = geom.channels * geom.in_h * geom.in_w;
            let mut dx = vec![0.0f32; n * plane];
            let mut dcols = vec![0.0f32; rows * l];
            for b in 0..n {
                gemm(rows, o, l, wdata, true, &gd[b * o * l..(b + 1) * o * l], false, 0.0, &mut dcols);
                col2im(&dcols, geom, &mut dx[b * plane..(b + 1) * plane]);
            }
            Tensor::new(self.value(input).shape().to_vec(), dx)
        })
    }

    fn deconv_backward(
        &self,
        g: &Tensor,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: &ConvGeom,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (n, co, oh, ow) = g.dims4()?;
        let (_, ci, h, w) = self.value(input).dims4()?;
        let l = h * w;
        let rows = geom.col_rows();
        let gd = g.data();
        if let Some(b) = bias {
            self.accum(grads, b, || Ok(bias_grad(gd, n, co, oh * ow)))?;
        }
        let need_w = self.rg(weight);
        let need_x = self.rg(input);
        if !need_w && !need_x {
            return Ok(());
        }
        let mut gcols = vec![0.0f32; n * rows * l];
        for b in 0..n {
            im2col(
                &gd[b * co * oh * ow..(b + 1) * co * oh * ow],
                geom,
                &mut gcols[b * rows * l..(b + 1) * rows * l],
            );
        }
        self.accum(grads, weight, || {
            let x = self.value(input).data();
            let mut dw = vec![0.0f32; ci * rows];
            for b in 0..n {
                gemm(
                    ci,
                    l,
                    rows,
                    &x[b * ci * l..(b + 1) * ci * l],
                    false,
                    &gcols[b * rows * l..(b + 1) * rows * l],
                    true,
                    1.0,
                    &mut dw,
                );
            }
            Tensor::new(self.value(weight).shape().to_vec(), dw)
        })?;
        self.accum(grads, input, || {
            let wdata = self.value(weight).data();
            let mut dx = vec![0.0f32; n * ci * l];
            for b in 0..n {
                gemm(
                    ci,
                    rows,
                    l,
                    wdata,
                    false,
                    &gcols[b * rows * l..(b + 1) * rows * l],
                    false,
                    0.0,
                    &mut dx[b * ci * l..(b + 1) * ci * l],
                );
            }
            Tensor::new(self.value(input).shape().to_vec(), dx)
        })
    }
}

fn check_bias(g: &Graph, bias: Option<NodeId>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if g.value(b).numel() != channels {
            return Err(SpaceError::contract(format!(
                "bias has {} entries, expected {channels}",
                g.value(b).numel()
            )));
        }
    }
    Ok(())
}

fn add_channel_bias(out: &mut [f32], bias: &[f32], n: usize, c: usize, plane: usize) {
    for b in 0..n {
        for (ch, &bv) in bias.iter().enumerate().take(c) {
            let off = (b * c + ch) * plane;
            for v in &mut out[off..off + plane] {
                *v += bv;
            }
        }
    }
}

fn bias_grad(g: &[f32], n: usize, c: usize, plane: usize) -> Tensor {
    let mut db = vec![0.0f32; c];
    for b in 0..n {
        for (ch, slot) in db.iter_mut().enumerate() {
            let off = (b * c + ch) * plane;
            *slot += g[off..off + plane].iter().sum::<f32>();
        }
    }
    Tensor::new(vec![c], db).expect("bias gradient length")
}
