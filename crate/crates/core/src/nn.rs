//! Small building blocks shared by the toy networks.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Mat;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    /// `(d_out, d_in)`.
    pub weight: ParamId,
    /// `(1, d_out)`.
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let w = Mat::randn(d_out, d_in, 1.0 / (d_in as f64).sqrt(), rng);
        let weight = params.add(format!("{name}/weight"), w, trainable);
        let bias = bias.then(|| params.add(format!("{name}/bias"), Mat::zeros(1, d_out), trainable));
        Self { weight, bias }
    }

    pub fn from_weights(params: &mut ParamSet, name: &str, weight: Mat, bias: Option<Mat>, trainable: bool) -> Self {
        let weight = params.add(format!("{name}/weight"), weight, trainable);
        let bias = bias.map(|b| params.add(format!("{name}/bias"), b, trainable));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let y = g.matmul_t(x, g.param(self.weight));
        match self.bias {
            Some(b) => g.add_row(y, g.param(b)),
            None => y,
        }
    }

    pub fn d_out(&self, params: &ParamSet) -> usize {
        params.value(self.weight).rows()
    }
}

/// Layer normalisation with an affine scale and shift, or the identity.
#[derive(Clone, Debug)]
pub enum Norm {
    Identity,
    LayerNorm { weight: ParamId, bias: ParamId },
}

impl Norm {
    pub fn layer_norm(params: &mut ParamSet, name: &str, dim: usize, trainable: bool) -> Self {
        let weight = params.add(format!("{name}/weight"), Mat::filled(1, dim, 1.0), trainable);
        let bias = params.add(format!("{name}/bias"), Mat::zeros(1, dim), trainable);
        Norm::LayerNorm { weight, bias }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        match self {
            Norm::Identity => x,
            Norm::LayerNorm { weight, bias } => {
                let n = g.layer_norm(x, LN_EPS);
                let rows = g.shape(x).0;
                // Broadcast the affine scale over rows via a ones column.
                let ones = g.constant(Mat::filled(rows, 1, 1.0));
                let scale = g.matmul(ones, g.param(*weight));
                let scaled = g.mul(n, scale);
                g.add_row(scaled, g.param(*bias))
            }
        }
    }
}

/// Two-layer SiLU MLP.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        hidden: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(params, &format!("{name}/fc1"), dim, hidden, true, trainable, rng),
            fc2: Linear::new(params, &format!("{name}/fc2"), hidden, dim, true, trainable, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.silu(h);
        self.fc2.forward(g, h)
    }
}

/// Sinusoidal embedding of a scalar position (e.g. a timestep).
pub fn sinusoidal(position: f64, dim: usize) -> Mat {
    let half = dim / 2;
    let mut out = Mat::zeros(1, dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out.set(0, i, (position * freq).sin());
        out.set(0, half + i, (position * freq).cos());
    }
    out
}
