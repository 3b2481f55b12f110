use crate::params::{Bound, ParamId, ParamInit};
use crate::tensor::{Real, Result, Tape, Var};

pub const LN_EPS: Real = 1e-5;
pub const MLP_RATIO: usize = 4;

/// Layer normalisation over the channel axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut ParamInit, dim: usize) -> Self {
        Self {
            gamma: init.constant("gamma", &[dim], 1.0),
            beta: init.constant("beta", &[dim], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

/// Two-layer perceptron with GELU between the layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn new(init: &mut ParamInit, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            w1: init.weight("w1", d_in, hidden),
            b1: init.constant("b1", &[hidden], 0.0),
            w2: init.weight("w2", hidden, d_out),
            b2: init.constant("b2", &[d_out], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.linear(x, p.var(self.w1), Some(p.var(self.b1)))?;
        let h = tape.gelu(h)?;
        tape.linear(h, p.var(self.w2), Some(p.var(self.b2)))
    }
}
