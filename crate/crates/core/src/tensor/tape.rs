use std::sync::Arc;

use super::gemm::{gemm, View};
use super::{
    check_gather, numel, permute_map, record_flops, strides, Real, Result, Tensor, TensorError,
    GATHER_ZERO,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Scales the upstream gradient of every op with the given name during
/// backward. Only used to check that gradient checking catches broken rules.
#[derive(Clone, Debug, PartialEq)]
pub struct GradFault {
    pub op: &'static str,
    pub scale: Real,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Pow(Real),
    Relu,
    Gelu,
    Sigmoid,
    Scale(Real),
    AddScalar(Real),
    Clamp(Real, Real),
}

/// Maps an output element index to an operand element index.
#[derive(Clone, Debug)]
enum Idx {
    Same,
    Cycle(usize),
    Map(Vec<usize>),
}

impl Idx {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Idx::Same => i,
            Idx::Cycle(n) => i % n,
            Idx::Map(m) => m[i],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    a_batched: bool,
    b_batched: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        ia: Idx,
        ib: Idx,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Sum {
        a: usize,
    },
    SumAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<Real>,
        rstd: Vec<Real>,
    },
    Matmul {
        a: usize,
        b: usize,
        dims: MatmulDims,
    },
    Reshape {
        a: usize,
    },
    Gather {
        a: usize,
        map: Arc<[usize]>,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        lens: Vec<usize>,
        inner: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Neg => "neg",
                UnaryKind::Exp => "exp",
                UnaryKind::Log => "log",
                UnaryKind::Pow(_) => "pow",
                UnaryKind::Relu => "relu",
                UnaryKind::Gelu => "gelu",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Scale(_) => "scale",
                UnaryKind::AddScalar(_) => "add_scalar",
                UnaryKind::Clamp(..) => "clamp",
            },
            Op::Sum { .. } => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Matmul { .. } => "matmul",
            Op::Reshape { .. } => "reshape",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<Real>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[Real]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<Real>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Record of one forward pass. Ops append nodes in execution order, so every
/// node's inputs precede it; [`Tape::backward`] walks the record in reverse
/// once and then releases all stored values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    fault: Option<GradFault>,
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn lanes(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    Ok((outer, shape[axis], inner))
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn broadcast_idx(input: &[usize], out: &[usize]) -> Idx {
    if input == out {
        return Idx::Same;
    }
    let n_in = numel(input);
    // Drop leading unit axes; a suffix match means the operand simply repeats.
    let trimmed: &[usize] = {
        let lead = input.iter().take_while(|&&d| d == 1).count();
        &input[lead..]
    };
    if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed {
        return Idx::Cycle(n_in.max(1));
    }
    let rank = out.len();
    let in_strides = strides(input);
    let mut eff = vec![0usize; rank];
    for i in 0..input.len() {
        let o = rank - input.len() + i;
        eff[o] = if input[i] == 1 { 0 } else { in_strides[i] };
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += eff[d];
            if idx[d] < out[d] {
                break;
            }
            offset -= eff[d] * out[d];
            idx[d] = 0;
        }
    }
    Idx::Map(map)
}

const GELU_C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Real = 0.044_715;

#[inline]
fn gelu(x: Real) -> Real {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: Real) -> Real {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape whose backward pass applies `fault`; see [`GradFault`].
    pub fn with_fault(fault: GradFault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<Real>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Records `t` as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.live()?;
        Ok(self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        ))
    }

    /// Records `t` as a differentiable leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.live()?;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<Real>) -> Result<Var> {
        self.live()?;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Value of `v`. Panics if the tape has been consumed by `backward`.
    pub fn value(&self, v: Var) -> &[Real] {
        assert!(!self.consumed, "tape values are released after backward");
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let ia = broadcast_idx(&sa, &out_shape);
        let ib = broadcast_idx(&sb, &out_shape);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if kind == BinaryKind::Div && vb.iter().any(|&x| x == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let n = numel(&out_shape);
        let f = |x: Real, y: Real| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let value: Vec<Real> = match (&ia, &ib) {
            (Idx::Same, Idx::Same) => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            (Idx::Same, Idx::Cycle(m)) => va
                .chunks(*m)
                .flat_map(|row| row.iter().zip(vb).map(|(&x, &y)| f(x, y)))
                .collect(),
            _ => (0..n).map(|i| f(va[ia.at(i)], vb[ib.at(i)])).collect(),
        };
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            out_shape,
            value,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                ia,
                ib,
            },
            rg,
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Elementwise quotient; any zero in the divisor is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        self.live()?;
        let x = &self.nodes[a.0].value;
        match kind {
            UnaryKind::Log if x.iter().any(|&v| v <= 0.0) => {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: "logarithm of a non-positive value".into(),
                })
            }
            UnaryKind::Pow(e) if e.fract() != 0.0 && x.iter().any(|&v| v < 0.0) => {
                return Err(TensorError::Domain {
                    op: "pow",
                    detail: format!("negative base with fractional exponent {e}"),
                })
            }
            UnaryKind::Pow(e) if e < 0.0 && x.iter().any(|&v| v == 0.0) => {
                return Err(TensorError::Domain {
                    op: "pow",
                    detail: format!("zero base with negative exponent {e}"),
                })
            }
            _ => {}
        }
        let value: Vec<Real> = x
            .iter()
            .map(|&v| match kind {
                UnaryKind::Neg => -v,
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Pow(e) => {
                    if e == 0.0 {
                        1.0
                    } else {
                        v.powf(e)
                    }
                }
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Gelu => gelu(v),
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Scale(c) => c * v,
                UnaryKind::AddScalar(c) => v + c,
                UnaryKind::Clamp(lo, hi) => v.clamp(lo, hi),
            })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a.0);
        Ok(self.push(shape, value, Op::Unary { kind, a: a.0 }, rg))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    /// Natural logarithm; non-positive inputs are a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    /// `a^e` for a constant exponent. `e == 0` yields ones with zero gradient.
    pub fn pow(&mut self, a: Var, e: Real) -> Result<Var> {
        self.unary(UnaryKind::Pow(e), a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Pow(0.5), a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: Real) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), a)
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, a: Var, lo: Real, hi: Real) -> Result<Var> {
        self.unary(UnaryKind::Clamp(lo, hi), a)
    }

    // ---- reductions --------------------------------------------------

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.live()?;
        let s: Real = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a.0);
        Ok(self.push(vec![1], vec![s], Op::Sum { a: a.0 }, rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len() as Real;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.live()?;
        let shape = self.nodes[a.0].shape.clone();
        let (outer, len, inner) = lanes("sum_axis", &shape, axis)?;
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(acc, v)| *acc += v);
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(
            out_shape,
            out,
            Op::SumAxis {
                a: a.0,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = *self.nodes[a.0].shape.get(axis).ok_or(TensorError::Axis {
            op: "mean_axis",
            axis,
            rank: self.nodes[a.0].shape.len(),
        })?;
        let s = self.sum_axis(a, axis, keepdim)?;
        self.scale(s, 1.0 / len as Real)
    }

    // ---- normalisers -------------------------------------------------

    /// Softmax along `axis`, stabilised by subtracting the lane maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.live()?;
        let shape = self.nodes[a.0].shape.clone();
        let (outer, len, inner) = lanes("softmax", &shape, axis)?;
        let mut out = self.nodes[a.0].value.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = Real::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(out[base + l * inner]);
                }
                let mut s = 0.0;
                for l in 0..len {
                    let e = (out[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    s += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= s;
                }
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                a: a.0,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.live()?;
        let shape = self.nodes[a.0].shape.clone();
        let (outer, len, inner) = lanes("log_softmax", &shape, axis)?;
        let mut out = self.nodes[a.0].value.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = Real::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(out[base + l * inner]);
                }
                let s: Real = (0..len).map(|l| (out[base + l * inner] - mx).exp()).sum();
                let lse = mx + s.ln();
                for l in 0..len {
                    out[base + l * inner] -= lse;
                }
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(
            shape,
            out,
            Op::LogSoftmax {
                a: a.0,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`
    /// (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Real) -> Result<Var> {
        self.live()?;
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().expect("rank >= 1");
        for p in [gamma, beta] {
            if self.nodes[p.0].value.len() != d {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        let xs = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let rows = xs.len() / d;
        let mut out = vec![0.0; xs.len()];
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<Real>() / d as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- products ----------------------------------------------------

    /// Plain matrix product of two rank-2 values.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        self.bmm(a, b, false, false)
    }

    /// Batched product `op(a) · op(b)` over the last two axes, where `op`
    /// optionally transposes. Leading axes must agree, except that a rank-2
    /// operand is shared across the whole batch.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.live()?;
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let mismatch = || TensorError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(mismatch());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let (lead, a_batched, b_batched) = match (lead_a.is_empty(), lead_b.is_empty()) {
            (true, true) => (vec![], false, false),
            (false, true) => (lead_a.to_vec(), true, false),
            (true, false) => (lead_b.to_vec(), false, true),
            (false, false) if lead_a == lead_b => (lead_a.to_vec(), true, true),
            _ => return Err(mismatch()),
        };
        let batch = numel(&lead);
        let dims = MatmulDims {
            batch,
            m,
            k,
            n,
            ta,
            tb,
            a_batched,
            b_batched,
        };
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (av, bv) = operand_views(&dims);
        for bi in 0..batch {
            let ao = if a_batched { bi * m * k } else { 0 };
            let bo = if b_batched { bi * k * n } else { 0 };
            gemm(
                m,
                k,
                n,
                &va[ao..ao + m * k],
                av,
                &vb[bo..bo + k * n],
                bv,
                0.0,
                &mut out[bi * m * n..(bi + 1) * m * n],
                View::row_major(n),
            );
        }
        record_flops((batch * m * k * n) as u64);
        let mut shape = lead;
        shape.extend([m, n]);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            shape,
            out,
            Op::Matmul {
                a: a.0,
                b: b.0,
                dims,
            },
            rg,
        ))
    }

    /// `x · w (+ bias)` applied over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d_in = *shape.last().expect("rank >= 1");
        let rows = numel(&shape) / d_in;
        let flat = self.reshape(x, &[rows, d_in])?;
        let y = self.matmul(flat, w)?;
        let y = match bias {
            Some(b) => self.add(y, b)?,
            None => y,
        };
        let mut out_shape = shape;
        let d_out = self.shape(w)[1];
        *out_shape.last_mut().expect("rank >= 1") = d_out;
        self.reshape(y, &out_shape)
    }

    // ---- layout ------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.live()?;
        if numel(shape) != self.nodes[a.0].value.len() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(a.0);
        Ok(self.push(shape.to_vec(), value, Op::Reshape { a: a.0 }, rg))
    }

    /// `out[i] = a[map[i]]` ([`GATHER_ZERO`] reads as zero). Every layout
    /// change that is not a plain reshape goes through here.
    pub fn gather(&mut self, a: Var, shape: &[usize], map: Arc<[usize]>) -> Result<Var> {
        self.live()?;
        let src = &self.nodes[a.0].value;
        check_gather(src.len(), shape, &map)?;
        let value = map
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i] })
            .collect();
        let rg = self.rg(a.0);
        Ok(self.push(shape.to_vec(), value, Op::Gather { a: a.0, map }, rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (shape, map) = permute_map(self.shape(a), axes)?;
        self.gather(a, &shape, map.into())
    }

    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if d0 >= rank || d1 >= rank {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: d0.max(d1),
                rank,
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(d0, d1);
        self.permute(a, &axes)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, full, inner) = lanes("slice", &shape, axis)?;
        if len == 0 || start + len > full {
            return Err(TensorError::Contract(format!(
                "slice [{start}, {}) exceeds extent {full} on axis {axis}",
                start + len
            )));
        }
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for l in start..start + len {
                let base = (o * full + l) * inner;
                map.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(a, &out_shape, map.into())
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.live()?;
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.nodes[first.0].shape.clone();
        let (outer, _, inner) = lanes("concat", &base, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                let v = &self.nodes[p.0].value;
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: parts.iter().map(|p| p.0).collect(),
                outer,
                lens,
                inner,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every
    /// differentiable leaf reachable from `loss`; repeated uses of a value
    /// accumulate. The tape is consumed: its values are released and any
    /// further use reports [`TensorError::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.live()?;
        if self.nodes.is_empty() {
            return Err(TensorError::Contract("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(fault) = &self.fault {
                if fault.op == node.op.name() {
                    g.iter_mut().for_each(|v| *v *= fault.scale);
                }
            }
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        self.consumed = true;
        for n in &mut self.nodes {
            n.value = Vec::new();
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        fn acc<'a>(
            grads: &'a mut [Option<Vec<Real>>],
            nodes: &[Node],
            j: usize,
        ) -> &'a mut Vec<Real> {
            grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()])
        }
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, ia, ib } => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    for (k, &gk) in g.iter().enumerate() {
                        let (x, y) = (ia.at(k), ib.at(k));
                        ga[x] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => gk,
                            BinaryKind::Mul => gk * vb[y],
                            BinaryKind::Div => gk / vb[y],
                        };
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, nodes, *b);
                    for (k, &gk) in g.iter().enumerate() {
                        let (x, y) = (ia.at(k), ib.at(k));
                        gb[y] += match kind {
                            BinaryKind::Add => gk,
                            BinaryKind::Sub => -gk,
                            BinaryKind::Mul => gk * va[x],
                            BinaryKind::Div => -gk * va[x] / (vb[y] * vb[y]),
                        };
                    }
                }
            }
            Op::Unary { kind, a } => {
                if !wants(*a) {
                    return;
                }
                let x = &nodes[*a].value;
                let y = &node.value;
                let ga = acc(grads, nodes, *a);
                for k in 0..g.len() {
                    let d = match *kind {
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Exp => y[k],
                        UnaryKind::Log => 1.0 / x[k],
                        UnaryKind::Pow(e) => {
                            if e == 0.0 {
                                0.0
                            } else {
                                e * x[k].powf(e - 1.0)
                            }
                        }
                        UnaryKind::Relu => {
                            if x[k] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Gelu => gelu_grad(x[k]),
                        UnaryKind::Sigmoid => y[k] * (1.0 - y[k]),
                        UnaryKind::Scale(c) => c,
                        UnaryKind::AddScalar(_) => 1.0,
                        UnaryKind::Clamp(lo, hi) => {
                            if x[k] > lo && x[k] < hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    ga[k] += g[k] * d;
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    acc(grads, nodes, *a).iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::SumAxis {
                a,
                outer,
                len,
                inner,
            } => {
                if !wants(*a) {
                    return;
                }
                let ga = acc(grads, nodes, *a);
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let base = (o * len + l) * inner;
                        ga[base..base + inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                if !wants(*a) {
                    return;
                }
                let y = &node.value;
                let ga = acc(grads, nodes, *a);
                for o in 0..*outer {
                    for i2 in 0..*inner {
                        let base = o * len * inner + i2;
                        let dot: Real = (0..*len)
                            .map(|l| g[base + l * inner] * y[base + l * inner])
                            .sum();
                        for l in 0..*len {
                            let p = base + l * inner;
                            ga[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax {
                a,
                outer,
                len,
                inner,
            } => {
                if !wants(*a) {
                    return;
                }
                let y = &node.value;
                let ga = acc(grads, nodes, *a);
                for o in 0..*outer {
                    for i2 in 0..*inner {
                        let base = o * len * inner + i2;
                        let gs: Real = (0..*len).map(|l| g[base + l * inner]).sum();
                        for l in 0..*len {
                            let p = base + l * inner;
                            ga[p] += g[p] - y[p].exp() * gs;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[*gamma].value.len();
                let rows = xhat.len() / d;
                if wants(*gamma) {
                    let gg = acc(grads, nodes, *gamma);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = acc(grads, nodes, *beta);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if wants(*x) {
                    let gamma_v = &nodes[*gamma].value;
                    let gx = acc(grads, nodes, *x);
                    let n = d as Real;
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gamma_v[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = g[r * d + j] * gamma_v[j];
                            gx[r * d + j] +=
                                rstd[r] / n * (n * dh - sum_dh - xhat[r * d + j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Matmul { a, b, dims } => {
                let MatmulDims {
                    batch,
                    m,
                    k,
                    n,
                    a_batched,
                    b_batched,
                    ..
                } = *dims;
                let (av, bv) = operand_views(dims);
                let cv = View::row_major(n);
                if wants(*a) {
                    let vb = &nodes[*b].value;
                    let ga = acc(grads, nodes, *a);
                    // dA' = dC · B'ᵀ, written through A's own layout.
                    for bi in 0..batch {
                        let ao = if a_batched { bi * m * k } else { 0 };
                        let bo = if b_batched { bi * k * n } else { 0 };
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            cv,
                            &vb[bo..bo + k * n],
                            bv.t(),
                            1.0,
                            &mut ga[ao..ao + m * k],
                            av,
                        );
                    }
                }
                if wants(*b) {
                    let va = &nodes[*a].value;
                    let gb = acc(grads, nodes, *b);
                    // dB' = A'ᵀ · dC
                    for bi in 0..batch {
                        let ao = if a_batched { bi * m * k } else { 0 };
                        let bo = if b_batched { bi * k * n } else { 0 };
                        gemm(
                            k,
                            m,
                            n,
                            &va[ao..ao + m * k],
                            av.t(),
                            &g[bi * m * n..(bi + 1) * m * n],
                            cv,
                            1.0,
                            &mut gb[bo..bo + k * n],
                            bv,
                        );
                    }
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    acc(grads, nodes, *a)
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::Gather { a, map } => {
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    for (&src, &gk) in map.iter().zip(g) {
                        if src != GATHER_ZERO {
                            ga[src] += gk;
                        }
                    }
                }
            }
            Op::Concat {
                inputs,
                outer,
                lens,
                inner,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&p, &len) in inputs.iter().zip(lens) {
                    if wants(p) {
                        let gp = acc(grads, nodes, p);
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            gp[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
        }
    }
}

/// Strided views of the logical operands `op(A)` (m×k) and `op(B)` (k×n).
fn operand_views(d: &MatmulDims) -> (View, View) {
    let av = if d.ta {
        View::row_major(d.m).t()
    } else {
        View::row_major(d.k)
    };
    let bv = if d.tb {
        View::row_major(d.k).t()
    } else {
        View::row_major(d.n)
    };
    (av, bv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Result<Var>) -> Vec<Real> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let eval = |delta: Real| {
                    let mut xp = x.clone();
                    xp.data_mut()[i] += delta;
                    let mut tape = Tape::new();
                    let v = tape.leaf(&xp).unwrap();
                    let out = f(&mut tape, v).unwrap();
                    tape.value(out)[0]
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect()
    }

    fn analytic_grad(x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Result<Var>) -> Vec<Real> {
        let mut tape = Tape::new();
        let v = tape.param(x).unwrap();
        let out = f(&mut tape, v).unwrap();
        tape.backward(out).unwrap().get(v).unwrap().to_vec()
    }

    fn max_rel_err(a: &[Real], b: &[Real]) -> Real {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, Real::max)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i = tape.leaf(&t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let b = tape.leaf(&t(&[2, 2], &[3., 4., 5., 6.])).unwrap();
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c), &[3., 4., 5., 6.]);

        let a = tape.leaf(&t(&[1, 2], &[1., 2.])).unwrap();
        let b = tape.leaf(&t(&[2, 1], &[3., 4.])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.leaf(&Tensor::zeros(&[2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::Shape { .. }));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = t(&[1, 2], &[1., 2.]);
        let b = t(&[2, 1], &[3., 4.]);
        let f = move |tape: &mut Tape, v: Var| {
            let bv = tape.leaf(&b)?;
            let c = tape.matmul(v, bv)?;
            tape.sum(c)
        };
        let num = numeric_grad(&a, &f);
        assert!((num[0] - 3.0).abs() < 1e-8 && (num[1] - 4.0).abs() < 1e-8);
        assert_eq!(analytic_grad(&a, &f), vec![3.0, 4.0]);
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[0., 0., 0.])).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        for &v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.leaf(&t(&[3], &[1., 2., 3.])).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        let expected = [0.09003, 0.24473, 0.66524];
        for (v, e) in tape.value(s).iter().zip(expected) {
            assert!((v - e).abs() < 5e-6, "{v} vs {e}");
        }
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn mean_and_exp_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[2., 4., 6.])).unwrap();
        let m = tape.mean(x).unwrap();
        assert_eq!(tape.value(m), &[4.0]);

        let one = t(&[1], &[1.0]);
        let f = |tape: &mut Tape, v: Var| {
            let e = tape.exp(v)?;
            tape.sum(e)
        };
        let num = numeric_grad(&one, &f);
        assert!((num[0] - std::f64::consts::E as Real).abs() < 1e-8);
        assert!((analytic_grad(&one, &f)[0] - std::f64::consts::E as Real).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1., 0.])).unwrap();
        assert!(matches!(tape.log(x), Err(TensorError::Domain { .. })));
        let y = tape.leaf(&t(&[2], &[1., 1.])).unwrap();
        assert!(matches!(tape.div(y, x), Err(TensorError::Domain { .. })));
        let neg = tape.leaf(&t(&[1], &[-1.])).unwrap();
        assert!(tape.pow(neg, 0.5).is_err());
        assert!(tape.pow(neg, 2.0).is_ok());
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let g = tape.leaf(&t(&[2], &[1., 1.])).unwrap();
        let b = tape.leaf(&t(&[2], &[0., 0.])).unwrap();
        let x = tape.leaf(&t(&[1, 2], &[1., 3.])).unwrap();
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y), &[-1.0, 1.0]);

        let g3 = tape.leaf(&t(&[3], &[1., 1., 1.])).unwrap();
        let b3 = tape.leaf(&t(&[3], &[0., 0., 0.])).unwrap();
        let c = tape.leaf(&t(&[1, 3], &[5., 5., 5.])).unwrap();
        let y = tape.layer_norm(c, g3, b3, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_contract() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[3], &[1., 2., 3.])).unwrap();
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2., 4., 6.]);
        assert!(matches!(
            tape.backward(loss),
            Err(TensorError::TapeConsumed)
        ));
        assert!(matches!(tape.exp(x), Err(TensorError::TapeConsumed)));
        assert!(matches!(
            Tape::new().backward(Var(0)),
            Err(TensorError::Contract(_))
        ));
    }

    #[test]
    fn sum_gives_ones_for_any_shape() {
        let x = Tensor::full(&[2, 3, 4], 0.25);
        let g = analytic_grad(&x, &|tape, v| tape.sum(v));
        assert!(g.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn broadcasting_rules() {
        let mut tape = Tape::new();
        let a = tape.param(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let row = tape.param(&t(&[3], &[10., 20., 30.])).unwrap();
        let col = tape.param(&t(&[2, 1], &[1., 2.])).unwrap();
        let r = tape.add(a, row).unwrap();
        assert_eq!(tape.value(r), &[11., 22., 33., 14., 25., 36.]);
        let c = tape.div(a, col).unwrap();
        assert_eq!(tape.value(c), &[1., 2., 3., 2., 2.5, 3.]);
        let s = tape.add(r, c).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(row).unwrap(), &[2., 2., 2.]);
        assert_eq!(g.get(col).unwrap(), &[-6.0, -15.0 / 4.0]);
    }

    #[test]
    fn fault_scales_named_op() {
        let x = t(&[2], &[0.3, -0.2]);
        let mut tape = Tape::with_fault(GradFault {
            op: "gelu",
            scale: 2.0,
        });
        let v = tape.param(&x).unwrap();
        let y = tape.gelu(v).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap().get(v).unwrap().to_vec();
        assert!((g[0] - 2.0 * gelu_grad(0.3)).abs() < 1e-15);
    }

    fn check_primitive(f: &dyn Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) {
        let a = analytic_grad(x, f);
        let n = numeric_grad(x, f);
        let err = max_rel_err(&a, &n);
        assert!(err < 1e-4, "relative error {err}: {a:?} vs {n:?}");
    }

    fn weights(n: usize) -> Tensor {
        Tensor::new(&[n], (0..n).map(|i| 0.3 + 0.17 * i as Real).collect()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn primitive_gradients(data in prop::collection::vec(-2.0..2.0 as Real, 6)) {
            let x = Tensor::new(&[2, 3], data.clone()).unwrap();
            let w = weights(6).reshape(&[2, 3]).unwrap();
            let weighted = move |tape: &mut Tape, y: Var| -> Result<Var> {
                let wv = tape.leaf(&w)?;
                let p = tape.mul(y, wv)?;
                tape.sum(p)
            };
            let wd = weighted.clone();
            check_primitive(&move |t, v| { let y = t.exp(v)?; wd(t, y) }, &x);
            let wd = weighted.clone();
            check_primitive(&move |t, v| { let y = t.gelu(v)?; wd(t, y) }, &x);
            let wd = weighted.clone();
            check_primitive(&move |t, v| { let y = t.sigmoid(v)?; wd(t, y) }, &x);
            let wd = weighted.clone();
            check_primitive(&move |t, v| { let y = t.softmax(v, 1)?; wd(t, y) }, &x);
            let wd = weighted.clone();
            check_primitive(&move |t, v| { let y = t.softmax(v, 0)?; wd(t, y) }, &x);
            let wd = weighted.clone();
            check_primitive(&move |t, v| { let y = t.log_softmax(v, 1)?; wd(t, y) }, &x);
            let wd = weighted.clone();
            check_primitive(&move |t, v| { let y = t.pow(v, 2.0)?; wd(t, y) }, &x);
            let wd = weighted.clone();
            check_primitive(&move |t, v| { let y = t.transpose(v, 0, 1)?; let y = t.reshape(y, &[2, 3])?; wd(t, y) }, &x);
            let wd = weighted.clone();
            check_primitive(&move |t, v| {
                let s = t.sum_axis(v, 1, true)?;
                let y = t.mul(v, s)?;
                wd(t, y)
            }, &x);
            let wd = weighted.clone();
            check_primitive(&move |t, v| {
                let g = t.constant(&[3], vec![1.2, 0.7, -0.4])?;
                let b = t.constant(&[3], vec![0.1, 0.0, 0.3])?;
                let y = t.layer_norm(v, g, b, 1e-5)?;
                wd(t, y)
            }, &x);
            let wd = weighted.clone();
            check_primitive(&move |t, v| {
                let a = t.slice(v, 1, 1, 2)?;
                let b = t.slice(v, 1, 0, 1)?;
                let y = t.concat(&[a, b], 1)?;
                wd(t, y)
            }, &x);
            let wd = weighted.clone();
            check_primitive(&move |t, v| {
                let y = t.bmm(v, v, false, true)?; // 2x2
                let z = t.bmm(y, v, true, false)?; // 2x3
                wd(t, z)
            }, &x);
            let shifted: Vec<Real> = data.iter().map(|v| v.abs() + 0.5).collect();
            let xp = Tensor::new(&[2, 3], shifted).unwrap();
            let wd = weighted.clone();
            check_primitive(&move |t, v| { let y = t.log(v)?; wd(t, y) }, &xp);
            let wd = weighted.clone();
            check_primitive(&move |t, v| { let y = t.sqrt(v)?; wd(t, y) }, &xp);
            let wd = weighted;
            check_primitive(&move |t, v| {
                let c = t.constant(&[3], vec![1.0, 2.0, 3.0])?;
                let y = t.div(c, v)?;
                wd(t, y)
            }, &xp);
        }

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            data in prop::collection::vec(-30.0..30.0 as Real, 12),
            shift in -50.0..50.0 as Real,
        ) {
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::new(&[3, 4], data.clone()).unwrap()).unwrap();
            let s = tape.softmax(x, 1).unwrap();
            for row in tape.value(s).chunks(4) {
                prop_assert!((row.iter().sum::<Real>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
            }
            let shifted: Vec<Real> = data.iter().map(|v| v + shift).collect();
            let y = tape.leaf(&Tensor::new(&[3, 4], shifted).unwrap()).unwrap();
            let s2 = tape.softmax(y, 1).unwrap();
            for (a, b) in tape.value(s).iter().zip(tape.value(s2)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn reshape_and_transpose_roundtrip(data in prop::collection::vec(-5.0..5.0 as Real, 24)) {
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::new(&[2, 3, 4], data.clone()).unwrap()).unwrap();
            let r = tape.reshape(x, &[6, 4]).unwrap();
            let back = tape.reshape(r, &[2, 3, 4]).unwrap();
            prop_assert_eq!(tape.value(back), &data[..]);
            let p = tape.permute(x, &[2, 0, 1]).unwrap();
            let q = tape.permute(p, &[1, 2, 0]).unwrap();
            prop_assert_eq!(tape.value(q), &data[..]);
        }

        #[test]
        fn reused_value_accumulates(data in prop::collection::vec(-2.0..2.0 as Real, 4)) {
            let x = Tensor::new(&[4], data).unwrap();
            let single = |tape: &mut Tape, v: Var| -> Result<Var> {
                let e = tape.gelu(v)?;
                tape.sum(e)
            };
            let g1 = analytic_grad(&x, &single);
            let twice = analytic_grad(&x, &|tape, v| {
                let a = single(tape, v)?;
                let b = single(tape, v)?;
                tape.add(a, b)
            });
            for (a, b) in g1.iter().zip(&twice) {
                prop_assert!((2.0 * a - b).abs() < 1e-14);
            }
        }
    }
}
