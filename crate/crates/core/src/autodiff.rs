//! Reverse-mode differentiation over the handful of volumetric ops the
//! cellular automaton needs.
//!
//! A [`Tape`] records every forward op together with the values its backward
//! pass needs. Nodes are appended in execution order, so the node list is
//! already topologically sorted and [`Tape::backward`] is a single reverse
//! sweep.

use crate::error::{Error, Result};
use crate::ops::{self, AxisMap, BatchNormParams, BnMode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Parameters of the dice + focal segmentation loss.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossParams {
    pub gamma: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.5,
            eps: 1e-6,
        }
    }
}

pub const PROB_CLAMP: f64 = 1e-7;

enum Op {
    Constant,
    Param,
    Conv {
        input: NodeId,
        kernel: NodeId,
        k: usize,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    BnTrain {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f32>,
        invstd: Vec<f32>,
    },
    BnEval {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f32>,
        denom: Vec<f32>,
    },
    Relu {
        input: NodeId,
    },
    MaskedAdd {
        state: NodeId,
        update: NodeId,
        mask: Vec<f32>,
    },
    ReplaceChannel {
        input: NodeId,
        channel: usize,
    },
    UpsampleCrop {
        input: NodeId,
        maps: Vec<[AxisMap; 3]>,
        linear: bool,
    },
    SigmoidChannel {
        input: NodeId,
        channel: usize,
    },
    DiceFocal {
        prob: NodeId,
        target: Tensor,
        params: LossParams,
    },
    Sum {
        input: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-writer record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    aux_bytes: usize,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; zeros if the node did not
    /// influence the loss.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[id.0].clone()))
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

#[inline]
pub fn logistic(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes currently held by recorded values and saved backward state.
    pub fn stored_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.size_bytes()).sum::<usize>() + self.aux_bytes
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Param, true)
    }

    pub fn conv(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let out = ops::depthwise_conv3d(self.value(input), self.value(kernel))?;
        let k = self.value(kernel).shape()[1];
        let ng = self.ng(input) || self.ng(kernel);
        Ok(self.push(out, Op::Conv { input, kernel, k }, ng))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [ba, ca, z, y, x] = self.value(a).dims5()?;
        let [bb, cb, zb, yb, xb] = self.value(b).dims5()?;
        if (ba, z, y, x) != (bb, zb, yb, xb) {
            return Err(Error::Shape(format!(
                "concat of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let vox = z * y * x;
        let mut data = Vec::with_capacity(ba * (ca + cb) * vox);
        for bi in 0..ba {
            data.extend_from_slice(&self.value(a).data()[bi * ca * vox..(bi + 1) * ca * vox]);
            data.extend_from_slice(&self.value(b).data()[bi * cb * vox..(bi + 1) * cb * vox]);
        }
        let out = Tensor::new(vec![ba, ca + cb, z, y, x], data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Concat { a, b }, ng))
    }

    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = ops::dense_per_voxel(self.value(input), self.value(weight), self.value(bias))?;
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        Ok(self.push(out, Op::Dense { input, weight, bias }, ng))
    }

    /// Batch norm whose affine parameters are tape nodes; running statistics
    /// live in `stats` and are updated in train mode.
    pub fn batchnorm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &mut BatchNormParams,
        mode: BnMode,
    ) -> Result<NodeId> {
        let [b, ch, z, y, x] = self.value(input).dims5()?;
        if self.value(gamma).shape() != [ch] || self.value(beta).shape() != [ch] {
            return Err(Error::Shape(format!("batch norm affine must be [{ch}]")));
        }
        let vox = z * y * x;
        let mut out = Tensor::zeros(self.value(input).shape().to_vec());
        let ng = self.ng(input) || self.ng(gamma) || self.ng(beta);
        let op = match mode {
            BnMode::Train => {
                let st = ops::batch_stats(self.value(input).data(), b, ch, vox)?;
                ops::bn_train_apply(
                    self.value(input).data(),
                    b,
                    ch,
                    vox,
                    &st,
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    out.data_mut(),
                );
                stats.update_running(&st);
                Op::BnTrain {
                    input,
                    gamma,
                    beta,
                    mean: st.mean,
                    invstd: st.invstd,
                }
            }
            BnMode::Eval => {
                let mut view = stats.clone();
                view.gamma = self.value(gamma).clone();
                view.beta = self.value(beta).clone();
                ops::bn_eval_apply(self.value(input).data(), b, ch, vox, &view, out.data_mut());
                Op::BnEval {
                    input,
                    gamma,
                    beta,
                    mean: stats.running_mean.data().to_vec(),
                    denom: stats.eval_denominators(),
                }
            }
        };
        self.aux_bytes += 2 * ch * 4;
        Ok(self.push(out, op, ng))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            *v = v.max(0.0);
        }
        let ng = self.ng(input);
        self.push(out, Op::Relu { input }, ng)
    }

    /// `state + update ⊙ mask`, with `mask` given per `(batch, voxel)` and
    /// broadcast over channels.
    pub fn masked_add(&mut self, state: NodeId, update: NodeId, mask: Vec<f32>) -> Result<NodeId> {
        let [b, c, z, y, x] = self.value(state).dims5()?;
        if self.value(update).shape() != self.value(state).shape() {
            return Err(Error::Shape("masked_add operands differ in shape".into()));
        }
        let vox = z * y * x;
        if mask.len() != b * vox {
            return Err(Error::Shape(format!(
                "mask has {} entries, expected {}",
                mask.len(),
                b * vox
            )));
        }
        let mut out = self.value(state).clone();
        let u = self.value(update).data();
        for bi in 0..b {
            let m = &mask[bi * vox..(bi + 1) * vox];
            for ci in 0..c {
                let o = (bi * c + ci) * vox;
                for ((s, &uv), &mv) in out.data_mut()[o..o + vox].iter_mut().zip(&u[o..o + vox]).zip(m) {
                    *s += uv * mv;
                }
            }
        }
        self.aux_bytes += mask.len() * 4;
        let ng = self.ng(state) || self.ng(update);
        Ok(self.push(out, Op::MaskedAdd { state, update, mask }, ng))
    }

    /// Overwrite one channel with constant values `[b, z, y, x]`.
    pub fn replace_channel(&mut self, input: NodeId, channel: usize, values: &[f32]) -> Result<NodeId> {
        let [b, c, z, y, x] = self.value(input).dims5()?;
        let vox = z * y * x;
        if channel >= c || values.len() != b * vox {
            return Err(Error::Shape(format!(
                "replace_channel {channel} of {c} with {} values",
                values.len()
            )));
        }
        let mut out = self.value(input).clone();
        for bi in 0..b {
            out.data_mut()[(bi * c + channel) * vox..][..vox]
                .copy_from_slice(&values[bi * vox..(bi + 1) * vox]);
        }
        let ng = self.ng(input);
        Ok(self.push(out, Op::ReplaceChannel { input, channel }, ng))
    }

    /// Resample every batch element through its own axis maps (upscale and
    /// crop in one step, never materializing the full upscaled grid).
    pub(crate) fn upsample_crop(
        &mut self,
        input: NodeId,
        maps: Vec<[AxisMap; 3]>,
        linear: bool,
    ) -> Result<NodeId> {
        let [b, c, z, y, x] = self.value(input).dims5()?;
        if maps.len() != b {
            return Err(Error::Shape("one axis-map triple per batch element".into()));
        }
        let out_dims = [maps[0][0].i0.len(), maps[0][1].i0.len(), maps[0][2].i0.len()];
        if maps.iter().any(|m| [m[0].i0.len(), m[1].i0.len(), m[2].i0.len()] != out_dims) {
            return Err(Error::Shape("batch elements must crop equal extents".into()));
        }
        let svox = z * y * x;
        let dvox: usize = out_dims.iter().product();
        let mut out = Tensor::zeros(vec![b, c, out_dims[0], out_dims[1], out_dims[2]]);
        for bi in 0..b {
            for ci in 0..c {
                let p = bi * c + ci;
                ops::resample_plane(
                    &self.value(input).data()[p * svox..(p + 1) * svox],
                    [z, y, x],
                    &maps[bi],
                    linear,
                    &mut out.data_mut()[p * dvox..(p + 1) * dvox],
                );
            }
        }
        self.aux_bytes += maps
            .iter()
            .map(|m| m.iter().map(|a| a.i0.len() * 12).sum::<usize>())
            .sum::<usize>();
        let ng = self.ng(input);
        Ok(self.push(out, Op::UpsampleCrop { input, maps, linear }, ng))
    }

    /// Logistic of one channel, giving a `[b, 1, z, y, x]` probability map.
    pub fn sigmoid_channel(&mut self, input: NodeId, channel: usize) -> Result<NodeId> {
        let [b, c, z, y, x] = self.value(input).dims5()?;
        if channel >= c {
            return Err(Error::Shape(format!("channel {channel} of {c}")));
        }
        let vox = z * y * x;
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(b * vox);
        for bi in 0..b {
            data.extend(src[(bi * c + channel) * vox..][..vox].iter().map(|&v| logistic(v)));
        }
        let out = Tensor::new(vec![b, 1, z, y, x], data)?;
        let ng = self.ng(input);
        Ok(self.push(out, Op::SigmoidChannel { input, channel }, ng))
    }

    /// Mean over batch elements of `dice + focal`; see [`crate::loss`].
    pub fn dice_focal(&mut self, prob: NodeId, target: &Tensor, params: LossParams) -> Result<NodeId> {
        let p = self.value(prob);
        if p.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "loss prob {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let b = p.shape()[0];
        let per = p.len() / b;
        let mut total = 0.0f64;
        for bi in 0..b {
            total += crate::loss::dice_focal_value(
                &p.data()[bi * per..(bi + 1) * per],
                &target.data()[bi * per..(bi + 1) * per],
                params,
            );
        }
        let out = Tensor::new(vec![1], vec![(total / b as f64) as f32])?;
        let ng = self.ng(prob);
        Ok(self.push(
            out,
            Op::DiceFocal {
                prob,
                target: target.clone(),
                params,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).sum_f64() as f32;
        let ng = self.ng(input);
        self.push(Tensor::filled(vec![1], s), Op::Sum { input }, ng)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape("mul operands differ in shape".into()));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    /// Differentiate the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape().to_vec(), 1.0));

        let mut param_grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param => param_grads[i] = Some(g),
                Op::Conv { input, kernel, k } => self.back_conv(&mut grads, &g, *input, *kernel, *k),
                Op::Concat { a, b } => {
                    let [bn, ca, z, y, x] = self.value(*a).dims5()?;
                    let cb = self.value(*b).shape()[1];
                    let vox = z * y * x;
                    let mut ga = Vec::with_capacity(bn * ca * vox);
                    let mut gb = Vec::with_capacity(bn * cb * vox);
                    for bi in 0..bn {
                        let base = bi * (ca + cb) * vox;
                        ga.extend_from_slice(&g.data()[base..base + ca * vox]);
                        gb.extend_from_slice(&g.data()[base + ca * vox..base + (ca + cb) * vox]);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, Tensor::new(self.value(*a).shape().to_vec(), ga)?);
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, Tensor::new(self.value(*b).shape().to_vec(), gb)?);
                    }
                }
                Op::Dense { input, weight, bias } => {
                    self.back_dense(&mut grads, &g, *input, *weight, *bias)?
                }
                Op::BnTrain {
                    input,
                    gamma,
                    beta,
                    mean,
                    invstd,
                } => self.back_bn(&mut grads, &g, *input, *gamma, *beta, mean, invstd, None)?,
                Op::BnEval {
                    input,
                    gamma,
                    beta,
                    mean,
                    denom,
                } => self.back_bn(&mut grads, &g, *input, *gamma, *beta, mean, denom, Some(()))?,
                Op::Relu { input } => {
                    if self.ng(*input) {
                        let mut d = g;
                        for (dv, &x) in d.data_mut().iter_mut().zip(self.value(*input).data()) {
                            if x <= 0.0 {
                                *dv = 0.0;
                            }
                        }
                        accumulate(&mut grads, *input, d);
                    }
                }
                Op::MaskedAdd { state, update, mask } => {
                    if self.ng(*update) {
                        let [b, c, z, y, x] = g.dims5()?;
                        let vox = z * y * x;
                        let mut d = g.clone();
                        for bi in 0..b {
                            let m = &mask[bi * vox..(bi + 1) * vox];
                            for ci in 0..c {
                                let o = (bi * c + ci) * vox;
                                for (dv, &mv) in d.data_mut()[o..o + vox].iter_mut().zip(m) {
                                    *dv *= mv;
                                }
                            }
                        }
                        accumulate(&mut grads, *update, d);
                    }
                    if self.ng(*state) {
                        accumulate(&mut grads, *state, g);
                    }
                }
                Op::ReplaceChannel { input, channel } => {
                    if self.ng(*input) {
                        let [b, c, z, y, x] = g.dims5()?;
                        let vox = z * y * x;
                        let mut d = g;
                        for bi in 0..b {
                            d.data_mut()[(bi * c + channel) * vox..][..vox].fill(0.0);
                        }
                        accumulate(&mut grads, *input, d);
                    }
                }
                Op::UpsampleCrop { input, maps, linear } => {
                    if self.ng(*input) {
                        let [b, c, z, y, x] = self.value(*input).dims5()?;
                        let svox = z * y * x;
                        let dvox = g.len() / (b * c);
                        let mut d = Tensor::zeros(self.value(*input).shape().to_vec());
                        for bi in 0..b {
                            for ci in 0..c {
                                let p = bi * c + ci;
                                ops::resample_plane_backward(
                                    &g.data()[p * dvox..(p + 1) * dvox],
                                    [z, y, x],
                                    &maps[bi],
                                    *linear,
                                    &mut d.data_mut()[p * svox..(p + 1) * svox],
                                );
                            }
                        }
                        accumulate(&mut grads, *input, d);
                    }
                }
                Op::SigmoidChannel { input, channel } => {
                    let [b, c, z, y, x] = self.value(*input).dims5()?;
                    let vox = z * y * x;
                    let mut d = Tensor::zeros(self.value(*input).shape().to_vec());
                    let p = node.value.data();
                    for bi in 0..b {
                        let dst = &mut d.data_mut()[(bi * c + channel) * vox..][..vox];
                        for j in 0..vox {
                            let pv = p[bi * vox + j];
                            dst[j] = g.data()[bi * vox + j] * pv * (1.0 - pv);
                        }
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::DiceFocal { prob, target, params } => {
                    let p = self.value(*prob);
                    let b = p.shape()[0];
                    let per = p.len() / b;
                    let upstream = g.data()[0] as f64 / b as f64;
                    let mut d = Tensor::zeros(p.shape().to_vec());
                    for bi in 0..b {
                        crate::loss::dice_focal_grad(
                            &p.data()[bi * per..(bi + 1) * per],
                            &target.data()[bi * per..(bi + 1) * per],
                            *params,
                            upstream,
                            &mut d.data_mut()[bi * per..(bi + 1) * per],
                        );
                    }
                    accumulate(&mut grads, *prob, d);
                }
                Op::Sum { input } => {
                    let d = Tensor::filled(self.value(*input).shape().to_vec(), g.data()[0]);
                    accumulate(&mut grads, *input, d);
                }
                Op::Mul { a, b } => {
                    for (this, other) in [(*a, *b), (*b, *a)] {
                        if self.ng(this) {
                            let mut d = g.clone();
                            for (dv, &o) in d.data_mut().iter_mut().zip(self.value(other).data()) {
                                *dv *= o;
                            }
                            accumulate(&mut grads, this, d);
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            grads: param_grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn back_conv(&self, grads: &mut [Option<Tensor>], g: &Tensor, input: NodeId, kernel: NodeId, k: usize) {
        let x = self.value(input);
        let w = self.value(kernel);
        let [b, c, z, y, xx] = g.dims5().expect("conv grad is 5d");
        let dims = [z, y, xx];
        let vox = z * y * xx;
        let k3 = k * k * k;
        if self.ng(input) {
            let mut dx = Tensor::zeros(x.shape().to_vec());
            for p in 0..b * c {
                let ch = p % c;
                ops::conv_plane_backward_input(
                    &g.data()[p * vox..(p + 1) * vox],
                    dims,
                    &w.data()[ch * k3..(ch + 1) * k3],
                    k,
                    &mut dx.data_mut()[p * vox..(p + 1) * vox],
                );
            }
            accumulate(grads, input, dx);
        }
        if self.ng(kernel) {
            let mut dw = vec![0.0f64; c * k3];
            for p in 0..b * c {
                let ch = p % c;
                ops::conv_plane_backward_kernel(
                    &g.data()[p * vox..(p + 1) * vox],
                    &x.data()[p * vox..(p + 1) * vox],
                    dims,
                    k,
                    &mut dw[ch * k3..(ch + 1) * k3],
                );
            }
            let dw = Tensor::new(w.shape().to_vec(), dw.into_iter().map(|v| v as f32).collect())
                .expect("kernel grad shape");
            accumulate(grads, kernel, dw);
        }
    }

    fn back_dense(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<()> {
        let x = self.value(input);
        let w = self.value(weight);
        let [b, f, z, y, xx] = x.dims5()?;
        let fo = w.shape()[0];
        let vox = z * y * xx;
        if self.ng(input) {
            let mut dx = Tensor::zeros(x.shape().to_vec());
            for bi in 0..b {
                ops::gemm(
                    f,
                    fo,
                    vox,
                    w.data(),
                    1,
                    f,
                    &g.data()[bi * fo * vox..(bi + 1) * fo * vox],
                    vox,
                    1,
                    0.0,
                    &mut dx.data_mut()[bi * f * vox..(bi + 1) * f * vox],
                    vox,
                    1,
                );
            }
            accumulate(grads, input, dx);
        }
        if self.ng(weight) {
            let mut dw = Tensor::zeros(w.shape().to_vec());
            for bi in 0..b {
                ops::gemm(
                    fo,
                    vox,
                    f,
                    &g.data()[bi * fo * vox..(bi + 1) * fo * vox],
                    vox,
                    1,
                    &x.data()[bi * f * vox..(bi + 1) * f * vox],
                    1,
                    vox,
                    if bi == 0 { 0.0 } else { 1.0 },
                    dw.data_mut(),
                    f,
                    1,
                );
            }
            accumulate(grads, weight, dw);
        }
        if self.ng(bias) {
            let mut db = vec![0.0f64; fo];
            for bi in 0..b {
                for (o, acc) in db.iter_mut().enumerate() {
                    *acc += g.data()[(bi * fo + o) * vox..][..vox]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>();
                }
            }
            accumulate(
                grads,
                bias,
                Tensor::new(vec![fo], db.into_iter().map(|v| v as f32).collect())?,
            );
        }
        Ok(())
    }

    /// `scale` is `invstd` in train mode and the eval denominator otherwise.
    #[allow(clippy::too_many_arguments)]
    fn back_bn(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f32],
        scale: &[f32],
        eval: Option<()>,
    ) -> Result<()> {
        let x = self.value(input);
        let gm = self.value(gamma).data();
        let [b, ch, z, y, xx] = x.dims5()?;
        let vox = z * y * xx;
        let m = (b * vox) as f64;
        let xhat = |c: usize, v: f32| -> f32 {
            if eval.is_some() {
                (v - mean[c]) / scale[c]
            } else {
                (v - mean[c]) * scale[c]
            }
        };
        let mut sum_dy = vec![0.0f64; ch];
        let mut sum_dy_xhat = vec![0.0f64; ch];
        for bi in 0..b {
            for c in 0..ch {
                let o = (bi * ch + c) * vox;
                for (&dy, &xv) in g.data()[o..o + vox].iter().zip(&x.data()[o..o + vox]) {
                    sum_dy[c] += dy as f64;
                    sum_dy_xhat[c] += dy as f64 * xhat(c, xv) as f64;
                }
            }
        }
        if self.ng(input) {
            let mut dx = Tensor::zeros(x.shape().to_vec());
            for bi in 0..b {
                for c in 0..ch {
                    let o = (bi * ch + c) * vox;
                    let dst = &mut dx.data_mut()[o..o + vox];
                    if eval.is_some() {
                        let f = gm[c] / scale[c];
                        for (d, &dy) in dst.iter_mut().zip(&g.data()[o..o + vox]) {
                            *d = dy * f;
                        }
                    } else {
                        let f = gm[c] * scale[c];
                        let mdy = (sum_dy[c] / m) as f32;
                        let mdyx = (sum_dy_xhat[c] / m) as f32;
                        for ((d, &dy), &xv) in dst.iter_mut().zip(&g.data()[o..o + vox]).zip(&x.data()[o..o + vox]) {
                            *d = f * (dy - mdy - xhat(c, xv) * mdyx);
                        }
                    }
                }
            }
            accumulate(grads, input, dx);
        }
        if self.ng(gamma) {
            let t = Tensor::new(vec![ch], sum_dy_xhat.iter().map(|&v| v as f32).collect())?;
            accumulate(grads, gamma, t);
        }
        if self.ng(beta) {
            let t = Tensor::new(vec![ch], sum_dy.iter().map(|&v| v as f32).collect())?;
            accumulate(grads, beta, t);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
