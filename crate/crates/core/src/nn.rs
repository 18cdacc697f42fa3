//! Small layer helpers over [`ParamStore`] and [`Graph`].

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// `in_dim x out_dim` weight with N(0, 1/in_dim) entries.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let weight = store.add_normal(format!("{name}.weight"), vec![in_dim, out_dim], std, rng);
        let bias = bias.then(|| store.add_const(format!("{name}.bias"), vec![out_dim], 0.0));
        Linear { weight, bias }
    }

    pub fn from_tensors(store: &mut ParamStore, name: &str, weight: Tensor, bias: Option<Tensor>) -> Self {
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = bias.map(|b| store.add(format!("{name}.bias"), b));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add_const(format!("{name}.gain"), vec![dim], 1.0),
            bias: store.add_const(format!("{name}.bias"), vec![dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, Self::EPS)
    }
}

/// Two-layer ReLU perceptron.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(g, store, x)?;
        let h = g.relu(h);
        self.second.forward(g, store, h)
    }
}
