use rand::Rng;

use super::init::{he_normal, xavier_uniform};
use super::{BnUpdate, Forward, Mode, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

/// Fully connected layer `y = x·Wᵀ + b` with `W[out×in]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let w = xavier_uniform(&[out_features, in_features], in_features, out_features, rng);
        Self {
            w: store.add(format!("{name}.weight"), w, true),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]), true),
            in_features,
            out_features,
        }
    }

    /// Applies the layer to the last axis of `x`, any number of leading axes.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let shape = f.tape.shape(x).to_vec();
        let (&d, lead) = shape.split_last().ok_or(Error::dim("dense", &shape, &[self.in_features]))?;
        if d != self.in_features {
            return Err(Error::dim("dense", &shape, &[self.in_features]));
        }
        let rows: usize = lead.iter().product();
        let flat = if shape.len() == 2 { x } else { f.tape.reshape(x, &[rows, d])? };
        let (w, b) = (f.param(self.w), f.param(self.b));
        let y = f.tape.matmul_nt(flat, w)?;
        let y = f.tape.add_bias(y, b)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = lead.to_vec();
            out_shape.push(self.out_features);
            f.tape.reshape(y, &out_shape)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = he_normal(&[c_out, c_in, kernel], c_in * kernel, rng);
        Self {
            w: store.add(format!("{name}.weight"), w, true),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), true),
            c_in,
            c_out,
            kernel,
            stride: 1,
            padding,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.w), f.param(self.b));
        f.tape.conv1d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Batch normalization over `[B×C×L]` with running statistics kept as buffers.
///
/// Before any training step the running statistics are `(0, 1)`, so evaluation
/// on a fresh layer is the affine map alone.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        match f.mode() {
            Mode::Train => {
                let (y, stats) = f.tape.batch_norm_train(x, g, b)?;
                f.record_bn(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    momentum: self.momentum,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = f.store();
                let mean = store.get(self.running_mean).data().to_vec();
                let var = store.get(self.running_var).data().to_vec();
                f.tape.batch_norm_eval(x, g, b, &mean, &var)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        f.tape.layer_norm(x, g, b)
    }
}

/// Position-wise feed-forward network `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub d1: Dense,
    pub d2: Dense,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            d1: Dense::new(store, &format!("{name}.fc1"), d_model, d_ff, rng),
            d2: Dense::new(store, &format!("{name}.fc2"), d_ff, d_model, rng),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        if self.d1.out_features != self.d2.in_features || self.d1.in_features != self.d2.out_features {
            return Err(Error::dim(
                "position_wise_ffn",
                &[self.d1.in_features, self.d1.out_features],
                &[self.d2.in_features, self.d2.out_features],
            ));
        }
        let h = self.d1.forward(f, x)?;
        let h = f.tape.relu(h)?;
        self.d2.forward(f, h)
    }
}
