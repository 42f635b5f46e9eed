use super::cost::OpCount;
use super::ctx::{Ctx, Mode, StatUpdate};
use super::functional::{batch_norm_eval, batch_norm_train, conv2d};
use super::param::{init_rng, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// 2-D convolution with square kernel, zero padding and bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Kaiming-normal weights (`std = √(2 / fan_in)`), zero bias.
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        seed: u64,
    ) -> Self {
        let wname = format!("{name}.weight");
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let weight = Tensor::randn(&[c_out, c_in, k, k], std, &mut init_rng(seed, &wname));
        Self {
            weight: Param::new(wname, weight),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            padding,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    /// `C_out·(C_in·k² + 1)`.
    pub fn param_count(c_in: usize, c_out: usize, k: usize) -> usize {
        c_out * (c_in * k * k + 1)
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        let y = conv2d(x, &w, Some(&b), self.stride, self.padding)?;
        let [n, c, h, wd]: [usize; 4] = y.shape().try_into().expect("conv output is rank 4");
        ctx.count(OpCount::conv(self.c_in(), c, self.kernel(), h, wd) * n as u64);
        Ok(y)
    }
}

impl Module for Conv2d {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Train mode normalizes with batch statistics and queues a running-stat
    /// update on `ctx`; eval mode uses the running statistics.
    pub fn forward(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let gamma = ctx.param(&self.gamma);
        let beta = ctx.param(&self.beta);
        if let [n, c, h, w] = *x.shape() {
            ctx.count(OpCount::batch_norm(c, h, w) * n as u64);
        }
        match ctx.mode {
            Mode::Train => {
                let out = batch_norm_train(x, &gamma, &beta, self.eps)?;
                ctx.stats.push(StatUpdate {
                    mean_key: self.running_mean.key(),
                    var_key: self.running_var.key(),
                    batch_mean: out.mean,
                    batch_var: out.unbiased_var,
                    momentum: self.momentum,
                });
                Ok(out.y)
            }
            Mode::Eval => batch_norm_eval(
                x,
                &gamma,
                &beta,
                self.running_mean.value.data(),
                self.running_var.value.data(),
                self.eps,
            ),
        }
    }
}

impl Module for BatchNorm2d {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Affine projection on the last axis: `x·W (+ b)` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Dense {
    /// Uniform `±1/√in` initialization for weight and bias.
    pub fn new(name: &str, d_in: usize, d_out: usize, bias: bool, seed: u64) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let wname = format!("{name}.weight");
        let weight = Tensor::uniform(&[d_in, d_out], -bound, bound, &mut init_rng(seed, &wname));
        let bias = bias.then(|| {
            let bname = format!("{name}.bias");
            let b = Tensor::uniform(&[d_out], -bound, bound, &mut init_rng(seed, &bname));
            Param::new(bname, b)
        });
        Self {
            weight: Param::new(wname, weight),
            bias,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn param_count(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        if x.shape().last() != Some(&self.d_in()) {
            return Err(Error::Dimension(format!(
                "dense layer expects last axis {}, got {:?}",
                self.d_in(),
                x.shape()
            )));
        }
        let y = x.matmul(&ctx.param(&self.weight))?;
        let rows = x.numel() / self.d_in();
        ctx.count(OpCount::dense(
            rows,
            self.d_in(),
            self.d_out(),
            self.bias.is_some(),
        ));
        match &self.bias {
            Some(b) => y.add(&ctx.param(b)),
            None => Ok(y),
        }
    }
}

impl Module for Dense {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}
