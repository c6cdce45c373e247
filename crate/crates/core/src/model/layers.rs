//! Parameterized building blocks over the tape.

use super::params::{Initializer, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{BatchStats, Tape, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics observed in train mode, to be folded into the running
/// statistics after the step.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

/// Forward-pass context: the tape, the bound parameter leaves and the mode.
pub(crate) struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a [Var],
    pub params: &'a ParamStore,
    pub train: bool,
    pub bn_updates: Vec<BnUpdate>,
}

impl Ctx<'_> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = init.he_uniform(&format!("{name}.weight"), &[cout, cin, kernel, kernel], cin * kernel * kernel);
        let bias = bias.then(|| init.constant(&format!("{name}.bias"), &[cout], 0.0, true));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let b = self.bias.map(|b| ctx.var(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Depthwise 3×3 filtering followed by a 1×1 pointwise mix.
#[derive(Clone, Debug)]
pub(crate) struct SeparableConv {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub stride: usize,
}

impl SeparableConv {
    pub fn new(init: &mut Initializer, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let depthwise = init.he_uniform(&format!("{name}.depthwise"), &[cin, 1, 3, 3], 9);
        let pointwise = init.he_uniform(&format!("{name}.pointwise"), &[cout, cin, 1, 1], cin);
        Self {
            depthwise,
            pointwise,
            stride,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (dw, pw) = (ctx.var(self.depthwise), ctx.var(self.pointwise));
        ctx.tape.depthwise_separable_conv(x, dw, pw, None, self.stride, 1)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(init: &mut Initializer, name: &str, channels: usize) -> Self {
        Self {
            gamma: init.constant(&format!("{name}.gamma"), &[channels], 1.0, true),
            beta: init.constant(&format!("{name}.beta"), &[channels], 0.0, true),
            running_mean: init.constant(&format!("{name}.running_mean"), &[channels], 0.0, false),
            running_var: init.constant(&format!("{name}.running_var"), &[channels], 1.0, false),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        if ctx.train {
            let (y, stats) = ctx.tape.batch_norm_train(x, g, b, BN_EPS)?;
            ctx.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
            });
            Ok(y)
        } else {
            let mean = ctx.params.get(self.running_mean).value.data();
            let var = ctx.params.get(self.running_var).value.data();
            ctx.tape.batch_norm_eval(x, g, b, mean, var, BN_EPS)
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Dense {
    pub fn new(init: &mut Initializer, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let weight = init.he_uniform(&format!("{name}.weight"), &[dout, din], din);
        let bias = bias.then(|| init.constant(&format!("{name}.bias"), &[dout], 0.0, true));
        Self { weight, bias }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let b = self.bias.map(|b| ctx.var(b));
        ctx.tape.linear(x, w, b)
    }
}
