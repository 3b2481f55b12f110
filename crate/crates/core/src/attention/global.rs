use crate::params::{Bound, ParamId, ParamInit};
use crate::tensor::{Real, Result, Tape, Var};

/// Full self-attention over every pixel token. Reference module for the cost
/// model only; the network itself never uses it.
#[derive(Clone, Debug)]
pub struct GlobalAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl GlobalAttention {
    pub fn new(init: &mut ParamInit, channels: usize) -> Self {
        Self {
            wq: init.weight("wq", channels, channels),
            wk: init.weight("wk", channels, channels),
            wv: init.weight("wv", channels, channels),
            wo: init.weight("wo", channels, channels),
        }
    }

    /// `x: [B, L, C]` → `[B, L, C]`
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let c = *tape.shape(x).last().expect("rank 3");
        let q = tape.linear(x, p.var(self.wq), None)?;
        let k = tape.linear(x, p.var(self.wk), None)?;
        let v = tape.linear(x, p.var(self.wv), None)?;
        let logits = tape.bmm(q, k, false, true)?;
        let logits = tape.scale(logits, 1.0 / (c as Real).sqrt())?;
        let attn = tape.softmax(logits, 2)?;
        let out = tape.bmm(attn, v, false, false)?;
        tape.linear(out, p.var(self.wo), None)
    }
}
