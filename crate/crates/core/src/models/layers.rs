//! Parameterized building blocks. Each layer owns the ids of its parameters
//! inside a shared [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::grad::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

pub(crate) struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = Tensor::randn(shape, self.rng).scale(std);
        self.store.add(name, t, true)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, v), true)
    }

    /// He-normal convolution; `gain` rescales the standard deviation.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> Result<Conv> {
        let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
        Ok(Conv {
            w: self.normal(format!("{name}.w"), &[cout, cin, k, k], std)?,
            b: self.constant(format!("{name}.b"), &[cout], 0.0)?,
            stride,
            pad: k / 2,
            transpose: false,
        })
    }

    /// 4x4, stride-2 transposed convolution doubling the spatial size.
    pub fn up(&mut self, name: &str, cin: usize, cout: usize) -> Result<Conv> {
        // each output pixel sees 4 of the 16 taps per input channel
        let std = (2.0 / (cin * 4) as f64).sqrt();
        Ok(Conv {
            w: self.normal(format!("{name}.w"), &[cin, cout, 4, 4], std)?,
            b: self.constant(format!("{name}.b"), &[cout], 0.0)?,
            stride: 2,
            pad: 1,
            transpose: true,
        })
    }

    pub fn dense(&mut self, name: &str, din: usize, dout: usize) -> Result<Dense> {
        Ok(Dense {
            w: self.normal(format!("{name}.w"), &[dout, din], (1.0 / din as f64).sqrt())?,
            b: self.constant(format!("{name}.b"), &[dout], 0.0)?,
        })
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Result<Norm> {
        Ok(Norm {
            scale: self.constant(format!("{name}.scale"), &[channels], 1.0)?,
            shift: self.constant(format!("{name}.shift"), &[channels], 0.0)?,
            groups: channels.min(8),
        })
    }

    pub fn attention(&mut self, name: &str, c: usize) -> Result<Attention> {
        let std = (1.0 / c as f64).sqrt();
        Ok(Attention {
            wq: self.normal(format!("{name}.wq"), &[c, c], std)?,
            wk: self.normal(format!("{name}.wk"), &[c, c], std)?,
            wv: self.normal(format!("{name}.wv"), &[c, c], std)?,
            wo: self.constant(format!("{name}.wo"), &[c, c], 0.0)?,
        })
    }

    pub fn vector(&mut self, name: &str, len: usize, v: f64) -> Result<ParamId> {
        self.constant(name.to_string(), &[len], v)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
    transpose: bool,
}

impl Conv {
    pub fn apply(&self, t: &Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (t.param(s, self.w), t.param(s, self.b));
        if self.transpose {
            t.conv2d_transpose(x, w, b, self.stride, self.pad)
        } else {
            t.conv2d(x, w, b, self.stride, self.pad)
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub fn apply(&self, t: &Tape, s: &ParamStore, x: Var) -> Result<Var> {
        t.linear(x, t.param(s, self.w), t.param(s, self.b))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    scale: ParamId,
    shift: ParamId,
    groups: usize,
}

impl Norm {
    pub fn apply(&self, t: &Tape, s: &ParamStore, x: Var) -> Result<Var> {
        t.group_norm(x, self.groups, t.param(s, self.scale), t.param(s, self.shift))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Attention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

impl Attention {
    pub fn apply(&self, t: &Tape, s: &ParamStore, x: Var) -> Result<Var> {
        t.self_attention(
            x,
            t.param(s, self.wq),
            t.param(s, self.wk),
            t.param(s, self.wv),
            t.param(s, self.wo),
        )
    }
}
