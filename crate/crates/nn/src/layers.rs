//! Parameterized layers built on [`Graph`] primitives.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Binding, Graph, Var};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Whether batch norm uses batch statistics (and records running updates).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng),
            ParamKind::Trainable,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[cout]),
                ParamKind::Trainable,
            )
        });
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        g.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.stride, self.pad)
    }
}

/// Transposed convolution with weights `[cin, cout, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&[cin, cout, kernel, kernel], cin * kernel * kernel / (stride * stride), rng),
            ParamKind::Trainable,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[cout]),
                ParamKind::Trainable,
            )
        });
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        g.conv_transpose2d(x, p[self.weight], self.bias.map(|b| p[b]), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::full(&[channels], 1.0),
                ParamKind::Trainable,
            ),
            beta: store.add(
                format!("{name}.beta"),
                Tensor::zeros(&[channels]),
                ParamKind::Trainable,
            ),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
                ParamKind::Buffer,
            ),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var, mode: Mode) -> Var {
        g.batch_norm(
            x,
            p[self.gamma],
            p[self.beta],
            p[self.running_mean],
            p[self.running_var],
            mode.is_train(),
            self.eps,
        )
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let w = Tensor::new(
            &[fan_out, fan_in],
            (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect(),
        );
        Self {
            weight: store.add(format!("{name}.weight"), w, ParamKind::Trainable),
            bias: store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[fan_out]),
                ParamKind::Trainable,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        g.linear(x, p[self.weight], p[self.bias])
    }
}
