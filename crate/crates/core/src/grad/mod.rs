//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive executed on it.  [`Tape::backward`]
//! replays the record in reverse and returns a [`Gradients`] table holding
//! the gradient of a scalar loss with respect to every leaf that requires
//! one: trainable parameters and explicit inputs.  Frozen parameters and
//! constants never receive a gradient.
//!
//! ```
//! use dpcodec::grad::Tape;
//! use dpcodec::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.input(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let y = tape.mse(x, tape.constant(Tensor::zeros(&[3]))).unwrap();
//! let grads = tape.backward(y).unwrap();
//! let g = grads.wrt(x).unwrap();
//! assert!((g.data()[1] - (-4.0 / 3.0)).abs() < 1e-15);
//! ```

mod check;
mod embed;
pub(crate) mod kernels;
mod params;

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

pub use check::{
    analytic_gradients, check_all_ops, compare_gradients, gradient_check, numeric_gradients, GradCheckReport, FD_STEP};
pub use embed::timestep_embedding;
pub use params::{ParamId, ParamStore, Parameter, WEIGHTS_MAGIC};

use crate::error::{Error, Result};
use crate::prob;
use crate::tensor::Tensor;
use kernels::{col2im, gemm, im2col, softmax_rows, Window};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

const GROUP_NORM_EPS: f64 = 1e-5;
const UNIT_NORM_EPS: f64 = 1e-10;

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Activation { x: Var, kind: Activation },
    Softplus(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddChannel { x: Var, v: Var },
    Linear { x: Var, w: Var, b: Var },
    GroupNorm { x: Var, scale: Var, shift: Var, groups: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { x: Var, wq: Var, wk: Var, wv: Var, wo: Var, saved: Vec<AttnSaved> },
    Concat(Var, Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    UnitNormalize { x: Var, norms: Vec<f64> },
    GaussianBits { y: Var, mu: Var, sigma: Var },
    LogisticBits { z: Var, loc: Var, scale: Var },
}

struct AttnSaved {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    y: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a leaf, if it required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter loaded on the tape, if it is trainable.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// All trainable-parameter gradients.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A tape on which nothing requires a gradient; used for inference.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(nodes.len() - 1)
    }

    fn req(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a parameter; repeated loads of the same id share one leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.borrow_mut().insert(id, v);
        v
    }

    // ---------------------------------------------------------------------
    // convolutions

    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, wv, bv) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            conv2d_forward(xv, wv, bv, stride, pad)?
        };
        let rg = self.req(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn conv2d_transpose(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, wv, bv) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            conv_transpose_forward(xv, wv, bv, stride, pad)?
        };
        let rg = self.req(&[x, w, b]);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, stride, pad }, rg))
    }

    // ---------------------------------------------------------------------
    // elementwise

    pub fn activation(&self, x: Var, kind: Activation) -> Var {
        let out = {
            let xv = self.value(x);
            match kind {
                Activation::Relu => xv.map(|t| t.max(0.0)),
                Activation::Silu => xv.map(|t| t * prob::sigmoid(t)),
            }
        };
        let rg = self.req(&[x]);
        self.push(out, Op::Activation { x, kind }, rg)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn silu(&self, x: Var) -> Var {
        self.activation(x, Activation::Silu)
    }

    pub fn softplus(&self, x: Var) -> Var {
        let out = self.value(x).map(prob::softplus);
        let rg = self.req(&[x]);
        self.push(out, Op::Softplus(x), rg)
    }

    fn binary(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        av.zip_map(bv, f)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.req(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.req(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.req(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        let rg = self.req(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|t| t + c);
        let rg = self.req(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// `a * x + c` elementwise.
    pub fn affine(&self, x: Var, a: f64, c: f64) -> Var {
        let s = self.scale(x, a);
        self.add_scalar(s, c)
    }

    /// Passes `x` through unchanged inside `[lo, hi]`, saturates outside.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).clamp(lo, hi);
        let rg = self.req(&[x]);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    // ---------------------------------------------------------------------
    // broadcasting and layout

    /// Adds a per-sample, per-channel vector `v: [B, C]` to `x: [B, C, H, W]`.
    pub fn add_channel(&self, x: Var, v: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, vv) = (&nodes[x.0].value, &nodes[v.0].value);
            let (b, c, h, w) = xv.dims4("add_channel")?;
            if vv.shape() != [b, c] {
                return Err(Error::shape(
                    "add_channel",
                    format!("vector {:?} does not match [B={b}, C={c}]", vv.shape()),
                ));
            }
            let mut out = xv.clone();
            let hw = h * w;
            for (chunk, &add) in out.data_mut().chunks_mut(hw).zip(vv.data()) {
                chunk.iter_mut().for_each(|t| *t += add);
            }
            out
        };
        let rg = self.req(&[x, v]);
        Ok(self.push(out, Op::AddChannel { x, v }, rg))
    }

    /// `x: [B, in]`, `w: [out, in]`, `b: [out]` -> `[B, out]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, wv, bv) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            let (bs, din) = match *xv.shape() {
                [bs, din] => (bs, din),
                _ => return Err(Error::shape("linear", format!("input must be [B, in], got {:?}", xv.shape()))),
            };
            let dout = match *wv.shape() {
                [o, i] if i == din => o,
                _ => {
                    return Err(Error::shape(
                        "linear",
                        format!("weight {:?} incompatible with input features {din}", wv.shape()),
                    ))
                }
            };
            if bv.shape() != [dout] {
                return Err(Error::shape("linear", format!("bias {:?} != [{dout}]", bv.shape())));
            }
            let mut y = vec![0.0; bs * dout];
            for row in y.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
            gemm(bs, din, dout, xv.data(), false, wv.data(), true, 1.0, &mut y);
            Tensor::new(vec![bs, dout], y)?
        };
        let rg = self.req(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Channel concatenation of two `[B, C, H, W]` tensors.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (ba, ca, ha, wa) = av.dims4("concat_channels")?;
            let (bb, cb, hb, wb) = bv.dims4("concat_channels")?;
            if (ba, ha, wa) != (bb, hb, wb) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?} differ outside the channel axis", av.shape(), bv.shape()),
                ));
            }
            let (sa, sb) = (ca * ha * wa, cb * hb * wb);
            let mut data = Vec::with_capacity(ba * (sa + sb));
            for i in 0..ba {
                data.extend_from_slice(&av.data()[i * sa..(i + 1) * sa]);
                data.extend_from_slice(&bv.data()[i * sb..(i + 1) * sb]);
            }
            Tensor::new(vec![ba, ca + cb, ha, wa], data)?
        };
        let rg = self.req(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    // ---------------------------------------------------------------------
    // normalization and attention

    /// Group normalization over `[B, C, H, W]` followed by a per-channel affine.
    pub fn group_norm(&self, x: Var, groups: usize, scale: Var, shift: Var) -> Result<Var> {
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (xv, sv, tv) = (&nodes[x.0].value, &nodes[scale.0].value, &nodes[shift.0].value);
            let (b, c, h, w) = xv.dims4("group_norm")?;
            if groups == 0 || c % groups != 0 {
                return Err(Error::shape(
                    "group_norm",
                    format!("channels {c} not divisible by groups {groups}"),
                ));
            }
            if sv.shape() != [c] || tv.shape() != [c] {
                return Err(Error::shape(
                    "group_norm",
                    format!("affine {:?}/{:?} != [{c}]", sv.shape(), tv.shape()),
                ));
            }
            let hw = h * w;
            let gsize = (c / groups) * hw;
            let mut xhat = vec![0.0; xv.len()];
            let mut inv_std = vec![0.0; b * groups];
            let mut out = vec![0.0; xv.len()];
            for (gi, chunk) in xv.data().chunks(gsize).enumerate() {
                let mean = chunk.iter().sum::<f64>() / gsize as f64;
                let var = chunk.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / gsize as f64;
                let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                inv_std[gi] = inv;
                let base = gi * gsize;
                for (j, &t) in chunk.iter().enumerate() {
                    let ch = ((base + j) / hw) % c;
                    let xh = (t - mean) * inv;
                    xhat[base + j] = xh;
                    out[base + j] = xh * sv.data()[ch] + tv.data()[ch];
                }
            }
            (Tensor::new(xv.shape().to_vec(), out)?, xhat, inv_std)
        };
        let rg = self.req(&[x, scale, shift]);
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                scale,
                shift,
                groups,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Single-head spatial self-attention with residual connection.
    ///
    /// For each sample, with `X` the `[C, H*W]` view of `x`:
    /// `x + Wo * (Wv X) * softmax((Wq X)^T (Wk X) / sqrt(C))^T`.
    pub fn self_attention(&self, x: Var, wq: Var, wk: Var, wv: Var, wo: Var) -> Result<Var> {
        let (out, saved) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (b, c, h, w) = xv.dims4("self_attention")?;
            for (name, m) in [("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)] {
                if nodes[m.0].value.shape() != [c, c] {
                    return Err(Error::shape(
                        "self_attention",
                        format!("{name} is {:?}, expected [{c}, {c}]", nodes[m.0].value.shape()),
                    ));
                }
            }
            let p = h * w;
            let scale = 1.0 / (c as f64).sqrt();
            let mut out = xv.data().to_vec();
            let mut saved = Vec::with_capacity(b);
            for bi in 0..b {
                let xb = &xv.data()[bi * c * p..(bi + 1) * c * p];
                let proj = |m: Var| {
                    let mut r = vec![0.0; c * p];
                    gemm(c, c, p, nodes[m.0].value.data(), false, xb, false, 0.0, &mut r);
                    r
                };
                let (q, k, v) = (proj(wq), proj(wk), proj(wv));
                // scores[p, q] = sum_c Q[c, p] K[c, q]
                let mut attn = vec![0.0; p * p];
                gemm(p, c, p, &q, true, &k, false, 0.0, &mut attn);
                attn.iter_mut().for_each(|t| *t *= scale);
                softmax_rows(&mut attn, p);
                // y[c, p] = sum_q V[c, q] A[p, q]
                let mut y = vec![0.0; c * p];
                gemm(c, p, p, &v, false, &attn, true, 0.0, &mut y);
                let ob = &mut out[bi * c * p..(bi + 1) * c * p];
                gemm(c, c, p, nodes[wo.0].value.data(), false, &y, false, 1.0, ob);
                saved.push(AttnSaved { q, k, v, attn, y });
            }
            (Tensor::new(xv.shape().to_vec(), out)?, saved)
        };
        let rg = self.req(&[x, wq, wk, wv, wo]);
        Ok(self.push(
            out,
            Op::Attention {
                x,
                wq,
                wk,
                wv,
                wo,
                saved,
            },
            rg,
        ))
    }

    /// Normalizes the channel vector at every spatial position to unit length.
    pub fn unit_normalize_channels(&self, x: Var) -> Result<Var> {
        let (out, norms) = {
            let xv = self.value(x);
            let (b, c, h, w) = xv.dims4("unit_normalize_channels")?;
            let hw = h * w;
            let mut norms = vec![0.0; b * hw];
            let mut out = xv.data().to_vec();
            for bi in 0..b {
                for s in 0..hw {
                    let mut ss = 0.0;
                    for ch in 0..c {
                        ss += xv.data()[(bi * c + ch) * hw + s].powi(2);
                    }
                    let n = (ss + UNIT_NORM_EPS).sqrt();
                    norms[bi * hw + s] = n;
                    for ch in 0..c {
                        out[(bi * c + ch) * hw + s] /= n;
                    }
                }
            }
            (Tensor::new(xv.shape().to_vec(), out)?, norms)
        };
        let rg = self.req(&[x]);
        Ok(self.push(out, Op::UnitNormalize { x, norms }, rg))
    }

    // ---------------------------------------------------------------------
    // reductions

    pub fn sum(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.req(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.req(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "mse", |x, y| (x - y) * (x - y))?;
        let out = Tensor::scalar(d.mean());
        let rg = self.req(&[a, b]);
        Ok(self.push(out, Op::Mse(a, b), rg))
    }

    /// Total `-log2` likelihood of `y` under unit-bin discretized Gaussians
    /// with elementwise mean `mu` and scale `sigma`.
    pub fn gaussian_bits(&self, y: Var, mu: Var, sigma: Var) -> Result<Var> {
        let total = {
            let nodes = self.nodes.borrow();
            let (yv, mv, sv) = (&nodes[y.0].value, &nodes[mu.0].value, &nodes[sigma.0].value);
            yv.check_same_shape("gaussian_bits", mv)?;
            yv.check_same_shape("gaussian_bits", sv)?;
            let mut total = 0.0;
            for i in 0..yv.len() {
                let (p, _) = prob::gaussian_bin(yv.data()[i], mv.data()[i], sv.data()[i]);
                total += prob::bits_of(p).0;
            }
            total
        };
        let rg = self.req(&[y, mu, sigma]);
        Ok(self.push(Tensor::scalar(total), Op::GaussianBits { y, mu, sigma }, rg))
    }

    /// Total `-log2` likelihood of `z: [B, C, H, W]` under per-channel
    /// discretized logistics with `loc: [C]`, `scale: [C]`.
    pub fn logistic_bits(&self, z: Var, loc: Var, scale: Var) -> Result<Var> {
        let total = {
            let nodes = self.nodes.borrow();
            let (zv, lv, sv) = (&nodes[z.0].value, &nodes[loc.0].value, &nodes[scale.0].value);
            let (_, c, h, w) = zv.dims4("logistic_bits")?;
            if lv.shape() != [c] || sv.shape() != [c] {
                return Err(Error::shape(
                    "logistic_bits",
                    format!("loc/scale {:?}/{:?} != [{c}]", lv.shape(), sv.shape()),
                ));
            }
            let hw = h * w;
            let mut total = 0.0;
            for (i, &t) in zv.data().iter().enumerate() {
                let ch = (i / hw) % c;
                let (p, _) = prob::logistic_bin(t, lv.data()[ch], sv.data()[ch]);
                total += prob::bits_of(p).0;
            }
            total
        };
        let rg = self.req(&[z, loc, scale]);
        Ok(self.push(Tensor::scalar(total), Op::LogisticBits { z, loc, scale }, rg))
    }

    // ---------------------------------------------------------------------
    // reverse pass

    /// Back-propagates from a scalar `loss` through the whole record.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        let mut leaves: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                leaves[i] = Some(g);
                continue;
            }
            backward_node(&nodes, node, &g, &mut grads)?;
        }
        let params = self.params.borrow().iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Gradients { leaves, params })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, stride, pad } => {
            let (dx, dw, db) = conv2d_backward(val(*x), val(*w), g, *stride, *pad, needs(*x));
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, dx);
            }
            accumulate(nodes, grads, *w, dw);
            accumulate(nodes, grads, *b, db);
        }
        Op::ConvTranspose2d { x, w, b, stride, pad } => {
            let (dx, dw, db) = conv_transpose_backward(val(*x), val(*w), g, *stride, *pad, needs(*x));
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, dx);
            }
            accumulate(nodes, grads, *w, dw);
            accumulate(nodes, grads, *b, db);
        }
        Op::Activation { x, kind } => {
            let xv = val(*x);
            let d = match kind {
                Activation::Relu => xv.zip_map(g, |t, gi| if t > 0.0 { gi } else { 0.0 })?,
                Activation::Silu => xv.zip_map(g, |t, gi| {
                    let s = prob::sigmoid(t);
                    gi * s * (1.0 + t * (1.0 - s))
                })?,
            };
            accumulate(nodes, grads, *x, d);
        }
        Op::Softplus(x) => {
            let d = val(*x).zip_map(g, |t, gi| gi * prob::sigmoid(t))?;
            accumulate(nodes, grads, *x, d);
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, g.zip_map(bv, |gi, t| gi * t)?);
            accumulate(nodes, grads, *b, g.zip_map(av, |gi, t| gi * t)?);
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, g.scale(*c)),
        Op::AddScalar(x) => accumulate(nodes, grads, *x, g.clone()),
        Op::Clamp { x, lo, hi } => {
            let d = val(*x).zip_map(g, |t, gi| if t >= *lo && t <= *hi { gi } else { 0.0 })?;
            accumulate(nodes, grads, *x, d);
        }
        Op::AddChannel { x, v } => {
            accumulate(nodes, grads, *x, g.clone());
            let vv = val(*v);
            let hw = g.len() / vv.len();
            let dv: Vec<f64> = g.data().chunks(hw).map(|c| c.iter().sum()).collect();
            accumulate(nodes, grads, *v, Tensor::new(vv.shape().to_vec(), dv)?);
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (bs, din) = (xv.shape()[0], xv.shape()[1]);
            let dout = wv.shape()[0];
            if needs(*x) {
                let mut dx = vec![0.0; bs * din];
                gemm(bs, dout, din, g.data(), false, wv.data(), false, 0.0, &mut dx);
                accumulate(nodes, grads, *x, Tensor::new(vec![bs, din], dx)?);
            }
            let mut dw = vec![0.0; dout * din];
            gemm(dout, bs, din, g.data(), true, xv.data(), false, 0.0, &mut dw);
            accumulate(nodes, grads, *w, Tensor::new(vec![dout, din], dw)?);
            let mut db = vec![0.0; dout];
            for row in g.data().chunks(dout) {
                for (a, r) in db.iter_mut().zip(row) {
                    *a += r;
                }
            }
            accumulate(nodes, grads, *b, Tensor::new(vec![dout], db)?);
        }
        Op::Concat(a, b) => {
            let (ba, ca, h, w) = val(*a).dims4("concat_channels")?;
            let cb = val(*b).shape()[1];
            let (sa, sb) = (ca * h * w, cb * h * w);
            let mut da = Vec::with_capacity(ba * sa);
            let mut dbv = Vec::with_capacity(ba * sb);
            for chunk in g.data().chunks(sa + sb) {
                da.extend_from_slice(&chunk[..sa]);
                dbv.extend_from_slice(&chunk[sa..]);
            }
            accumulate(nodes, grads, *a, Tensor::new(val(*a).shape().to_vec(), da)?);
            accumulate(nodes, grads, *b, Tensor::new(val(*b).shape().to_vec(), dbv)?);
        }
        Op::GroupNorm {
            x,
            scale,
            shift,
            groups,
            xhat,
            inv_std,
        } => {
            let xv = val(*x);
            let (_, c, h, w) = xv.dims4("group_norm")?;
            let hw = h * w;
            let gsize = (c / groups) * hw;
            let sv = val(*scale).data();
            let mut dscale = vec![0.0; c];
            let mut dshift = vec![0.0; c];
            for (i, (&gi, &xh)) in g.data().iter().zip(xhat).enumerate() {
                let ch = (i / hw) % c;
                dscale[ch] += gi * xh;
                dshift[ch] += gi;
            }
            if needs(*x) {
                let mut dx = vec![0.0; xv.len()];
                for (gi, inv) in inv_std.iter().enumerate() {
                    let base = gi * gsize;
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..gsize {
                        let ch = ((base + j) / hw) % c;
                        let dxh = g.data()[base + j] * sv[ch];
                        m1 += dxh;
                        m2 += dxh * xhat[base + j];
                    }
                    m1 /= gsize as f64;
                    m2 /= gsize as f64;
                    for j in 0..gsize {
                        let ch = ((base + j) / hw) % c;
                        let dxh = g.data()[base + j] * sv[ch];
                        dx[base + j] = inv * (dxh - m1 - xhat[base + j] * m2);
                    }
                }
                accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            accumulate(nodes, grads, *scale, Tensor::new(vec![c], dscale)?);
            accumulate(nodes, grads, *shift, Tensor::new(vec![c], dshift)?);
        }
        Op::Attention {
            x,
            wq,
            wk,
            wv,
            wo,
            saved,
        } => {
            let xv = val(*x);
            let (_, c, h, w) = xv.dims4("self_attention")?;
            let p = h * w;
            let scale = 1.0 / (c as f64).sqrt();
            let mut dx = g.data().to_vec();
            let mut dwq = vec![0.0; c * c];
            let mut dwk = vec![0.0; c * c];
            let mut dwv = vec![0.0; c * c];
            let mut dwo = vec![0.0; c * c];
            for (bi, s) in saved.iter().enumerate() {
                let xb = &xv.data()[bi * c * p..(bi + 1) * c * p];
                let gb = &g.data()[bi * c * p..(bi + 1) * c * p];
                // out = x + Wo Y
                gemm(c, p, c, gb, false, &s.y, true, 1.0, &mut dwo);
                let mut dy = vec![0.0; c * p];
                gemm(c, c, p, val(*wo).data(), true, gb, false, 0.0, &mut dy);
                // Y = V A^T
                let mut dv = vec![0.0; c * p];
                gemm(c, p, p, &dy, false, &s.attn, false, 0.0, &mut dv);
                let mut da = vec![0.0; p * p];
                gemm(p, c, p, &dy, true, &s.v, false, 0.0, &mut da);
                // softmax rows
                let mut ds = vec![0.0; p * p];
                for r in 0..p {
                    let arow = &s.attn[r * p..(r + 1) * p];
                    let drow = &da[r * p..(r + 1) * p];
                    let dot: f64 = arow.iter().zip(drow).map(|(a, d)| a * d).sum();
                    for j in 0..p {
                        ds[r * p + j] = arow[j] * (drow[j] - dot) * scale;
                    }
                }
                // S = Q^T K
                let mut dq = vec![0.0; c * p];
                gemm(c, p, p, &s.k, false, &ds, true, 0.0, &mut dq);
                let mut dk = vec![0.0; c * p];
                gemm(c, p, p, &s.q, false, &ds, false, 0.0, &mut dk);
                let dxb = &mut dx[bi * c * p..(bi + 1) * c * p];
                for (dm, wm, acc) in [(&dq, *wq, &mut dwq), (&dk, *wk, &mut dwk), (&dv, *wv, &mut dwv)] {
                    gemm(c, p, c, dm, false, xb, true, 1.0, acc);
                    gemm(c, c, p, val(wm).data(), true, dm, false, 1.0, dxb);
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            for (m, d) in [(*wq, dwq), (*wk, dwk), (*wv, dwv), (*wo, dwo)] {
                accumulate(nodes, grads, m, Tensor::new(vec![c, c], d)?);
            }
        }
        Op::UnitNormalize { x, norms } => {
            let (b, c, h, w) = val(*x).dims4("unit_normalize_channels")?;
            let hw = h * w;
            let y = node.value.data();
            let mut dx = vec![0.0; y.len()];
            for bi in 0..b {
                for s in 0..hw {
                    let idx = |ch: usize| (bi * c + ch) * hw + s;
                    let dot: f64 = (0..c).map(|ch| g.data()[idx(ch)] * y[idx(ch)]).sum();
                    let n = norms[bi * hw + s];
                    for ch in 0..c {
                        dx[idx(ch)] = (g.data()[idx(ch)] - y[idx(ch)] * dot) / n;
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(node.value.shape().to_vec(), dx)?);
        }
        Op::Sum(x) => {
            let gs = g.item();
            accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), gs));
        }
        Op::Mean(x) => {
            let n = val(*x).len() as f64;
            accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), g.item() / n));
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let c = 2.0 * g.item() / av.len() as f64;
            let d = av.zip_map(bv, |x, y| c * (x - y))?;
            accumulate(nodes, grads, *b, d.scale(-1.0));
            accumulate(nodes, grads, *a, d);
        }
        Op::GaussianBits { y, mu, sigma } => {
            let (yv, mv, sv) = (val(*y), val(*mu), val(*sigma));
            let gs = g.item();
            let n = yv.len();
            let (mut dy, mut dm, mut ds) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for i in 0..n {
                let (p, d) = prob::gaussian_bin(yv.data()[i], mv.data()[i], sv.data()[i]);
                let db = gs * prob::bits_of(p).1;
                dy[i] = db * d[0];
                dm[i] = db * d[1];
                ds[i] = db * d[2];
            }
            let shape = yv.shape().to_vec();
            accumulate(nodes, grads, *y, Tensor::new(shape.clone(), dy)?);
            accumulate(nodes, grads, *mu, Tensor::new(shape.clone(), dm)?);
            accumulate(nodes, grads, *sigma, Tensor::new(shape, ds)?);
        }
        Op::LogisticBits { z, loc, scale } => {
            let (zv, lv, sv) = (val(*z), val(*loc), val(*scale));
            let (_, c, h, w) = zv.dims4("logistic_bits")?;
            let hw = h * w;
            let gs = g.item();
            let mut dz = vec![0.0; zv.len()];
            let mut dl = vec![0.0; c];
            let mut dsc = vec![0.0; c];
            for (i, &t) in zv.data().iter().enumerate() {
                let ch = (i / hw) % c;
                let (p, d) = prob::logistic_bin(t, lv.data()[ch], sv.data()[ch]);
                let db = gs * prob::bits_of(p).1;
                dz[i] = db * d[0];
                dl[ch] += db * d[1];
                dsc[ch] += db * d[2];
            }
            accumulate(nodes, grads, *z, Tensor::new(zv.shape().to_vec(), dz)?);
            accumulate(nodes, grads, *loc, Tensor::new(vec![c], dl)?);
            accumulate(nodes, grads, *scale, Tensor::new(vec![c], dsc)?);
        }
    }
    Ok(())
}

// -------------------------------------------------------------------------
// convolution kernels

fn conv_geometry(
    op: &'static str,
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (bs, cin, h, wd) = x.dims4(op)?;
    let (w0, w1, k) = match *w.shape() {
        [w0, w1, k1, k2] if k1 == k2 => (w0, w1, k1),
        _ => return Err(Error::shape(op, format!("kernel must be [A, B, k, k], got {:?}", w.shape()))),
    };
    if !(stride == 1 || stride == 2) {
        return Err(Error::range("stride", stride, "{1, 2}"));
    }
    let _ = (b, cin, h, wd, bs);
    Ok((w0, w1, k, bs, h, wd))
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (cout, cin_w, k, bs, h, wd) = conv_geometry("conv2d", x, w, b, stride)?;
    let cin = x.shape()[1];
    if k % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel size {k} must be odd")));
    }
    if cin_w != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {cin} != kernel input channels {cin_w}"),
        ));
    }
    if b.shape() != [cout] {
        return Err(Error::shape("conv2d", format!("bias {:?} != [{cout}]", b.shape())));
    }
    if h + 2 * pad < k {
        return Err(Error::shape("conv2d", format!("height {h} + 2*pad {pad} smaller than kernel {k}")));
    }
    if wd + 2 * pad < k {
        return Err(Error::shape("conv2d", format!("width {wd} + 2*pad {pad} smaller than kernel {k}")));
    }
    let g = Window {
        channels: cin,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (wd + 2 * pad - k) / stride + 1,
    };
    let (plane_in, plane_out) = (cin * h * wd, cout * g.cols());
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let mut out = vec![0.0; bs * plane_out];
    for bi in 0..bs {
        im2col(&x.data()[bi * plane_in..(bi + 1) * plane_in], &g, &mut cols);
        let ob = &mut out[bi * plane_out..(bi + 1) * plane_out];
        for (row, &bias) in ob.chunks_mut(g.cols()).zip(b.data()) {
            row.fill(bias);
        }
        gemm(cout, g.rows(), g.cols(), w.data(), false, &cols, false, 1.0, ob);
    }
    Tensor::new(vec![bs, cout, g.ho, g.wo], out)
}

type ConvGrads = (Option<Tensor>, Tensor, Tensor);

fn conv2d_backward(x: &Tensor, w: &Tensor, gout: &Tensor, stride: usize, pad: usize, need_dx: bool) -> ConvGrads {
    let (bs, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (gout.shape()[2], gout.shape()[3]);
    let g = Window {
        channels: cin,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho,
        wo,
    };
    let (plane_in, plane_out) = (cin * h * wd, cout * g.cols());
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    for bi in 0..bs {
        let gb = &gout.data()[bi * plane_out..(bi + 1) * plane_out];
        im2col(&x.data()[bi * plane_in..(bi + 1) * plane_in], &g, &mut cols);
        gemm(cout, g.cols(), g.rows(), gb, false, &cols, true, 1.0, &mut dw);
        for (d, row) in db.iter_mut().zip(gb.chunks(g.cols())) {
            *d += row.iter().sum::<f64>();
        }
        if let Some(dx) = dx.as_mut() {
            gemm(g.rows(), cout, g.cols(), w.data(), true, gb, false, 0.0, &mut cols);
            col2im(&cols, &g, &mut dx[bi * plane_in..(bi + 1) * plane_in]);
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("shape")),
        Tensor::new(w.shape().to_vec(), dw).expect("shape"),
        Tensor::new(vec![cout], db).expect("shape"),
    )
}

fn conv_transpose_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (cin_w, cout, k, bs, h, wd) = conv_geometry("conv2d_transpose", x, w, b, stride)?;
    let cin = x.shape()[1];
    if cin_w != cin {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("input channels {cin} != kernel input channels {cin_w}"),
        ));
    }
    if b.shape() != [cout] {
        return Err(Error::shape("conv2d_transpose", format!("bias {:?} != [{cout}]", b.shape())));
    }
    let span = |n: usize| ((n - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
    let ho = span(h).ok_or_else(|| Error::shape("conv2d_transpose", format!("output height non-positive for h={h}")))?;
    let wo = span(wd).ok_or_else(|| Error::shape("conv2d_transpose", format!("output width non-positive for w={wd}")))?;
    let g = Window {
        channels: cout,
        h: ho,
        w: wo,
        k,
        stride,
        pad,
        ho: h,
        wo: wd,
    };
    let (plane_in, plane_out) = (cin * h * wd, cout * ho * wo);
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let mut out = vec![0.0; bs * plane_out];
    for bi in 0..bs {
        gemm(
            g.rows(),
            cin,
            g.cols(),
            w.data(),
            true,
            &x.data()[bi * plane_in..(bi + 1) * plane_in],
            false,
            0.0,
            &mut cols,
        );
        let ob = &mut out[bi * plane_out..(bi + 1) * plane_out];
        for (row, &bias) in ob.chunks_mut(ho * wo).zip(b.data()) {
            row.fill(bias);
        }
        col2im(&cols, &g, ob);
    }
    Tensor::new(vec![bs, cout, ho, wo], out)
}

fn conv_transpose_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> ConvGrads {
    let (bs, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[1], w.shape()[2]);
    let (ho, wo) = (gout.shape()[2], gout.shape()[3]);
    let g = Window {
        channels: cout,
        h: ho,
        w: wo,
        k,
        stride,
        pad,
        ho: h,
        wo: wd,
    };
    let (plane_in, plane_out) = (cin * h * wd, cout * ho * wo);
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    for bi in 0..bs {
        let gb = &gout.data()[bi * plane_out..(bi + 1) * plane_out];
        im2col(gb, &g, &mut cols);
        let xb = &x.data()[bi * plane_in..(bi + 1) * plane_in];
        gemm(cin, g.cols(), g.rows(), xb, false, &cols, true, 1.0, &mut dw);
        for (d, row) in db.iter_mut().zip(gb.chunks(ho * wo)) {
            *d += row.iter().sum::<f64>();
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                cin,
                g.rows(),
                g.cols(),
                w.data(),
                false,
                &cols,
                false,
                0.0,
                &mut dx[bi * plane_in..(bi + 1) * plane_in],
            );
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("shape")),
        Tensor::new(w.shape().to_vec(), dw).expect("shape"),
        Tensor::new(vec![cout], db).expect("shape"),
    )
}

#[cfg(test)]
mod tests;
