//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles during
//! the forward pass. [`Tape::backward`] walks the record in reverse and
//! accumulates `d loss / d node` into every node that requires a gradient.
//! Tapes are built fresh for each forward pass and are not shared between
//! threads.

use std::fmt;

use crate::conv::{ConvSpec, Geometry};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule of a [`Tape::custom`] operation: given the output adjoint
/// and the input values, returns one adjoint per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    Exp(Var),
    Relu(Var),
    MatMul(Var, Var),
    Outer(Var, Var),
    DiagEmbed(Var),
    Reshape(Var),
    Stack(Vec<Var>),
    ChannelMaskMul {
        weights: Var,
        mask: Var,
    },
    Conv2d {
        input: Var,
        weights: Var,
        geo: Geometry,
    },
    Crop {
        input: Var,
        row: usize,
        col: usize,
    },
    GlobalAvgPool(Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Tensor,
        labels: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Tensor,
    },
    Custom {
        name: String,
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Custom { name, .. } => write!(f, "Custom({name})"),
            Op::Leaf => write!(f, "Leaf"),
            _ => write!(f, "Op"),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.needs(inputs);
        self.push(value, op, rg)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.record(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.record(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).elementwise_mul(self.value(b))?;
        Ok(self.record(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scalar_mul(c);
        self.record(v, Op::ScalarMul(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.record(v, Op::AddScalar(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.record(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.record(v, Op::Mean(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).sigmoid();
        self.record(v, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.record(v, Op::Exp(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.record(v, Op::Relu(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.record(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var> {
        let t = Tensor::outer_product(self.value(u), self.value(v))?;
        Ok(self.record(t, Op::Outer(u, v), &[u, v]))
    }

    pub fn diag_embed(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).diag_embed()?;
        Ok(self.record(v, Op::DiagEmbed(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.record(v, Op::Reshape(a), &[a]))
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let inner = self.value(*first).shape().to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(*first).len());
        for p in parts {
            let t = self.value(*p);
            if t.shape() != inner.as_slice() {
                return Err(mismatch("stack", self.value(*first), t));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let v = Tensor::new(shape, data)?;
        Ok(self.record(v, Op::Stack(parts.to_vec()), parts))
    }

    /// Multiplies every `[C_in]` kernel slice of output channel `o` in
    /// `weights [C_out, C_in, a, b]` by `mask[o]` from `mask [C_out, a, b]`.
    pub fn channel_mask_mul(&mut self, weights: Var, mask: Var) -> Result<Var> {
        let w = self.value(weights);
        let m = self.value(mask);
        let ws = w.shape();
        if ws.len() != 4 || m.shape() != [ws[0], ws[2], ws[3]] {
            return Err(mismatch("channel_mask_mul", w, m));
        }
        let plane = ws[2] * ws[3];
        let c_in = ws[1];
        let mut out = w.clone();
        for (idx, o) in out.data_mut().iter_mut().enumerate() {
            let co = idx / (c_in * plane);
            *o *= m.data()[co * plane + idx % plane];
        }
        Ok(self.record(out, Op::ChannelMaskMul { weights, mask }, &[weights, mask]))
    }

    /// Batched correlation of `[N, C_in, H, W]` by `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, weights: Var, spec: &ConvSpec) -> Result<Var> {
        if !spec.correlation {
            return Err(Error::invalid(
                "recorded convolutions run in correlation mode",
            ));
        }
        let geo = Geometry::new(self.value(input).shape(), self.value(weights).shape(), spec)?;
        let y = geo.forward(self.value(input).data(), self.value(weights).data());
        let v = Tensor::new(geo.output_shape(), y)?;
        Ok(self.record(
            v,
            Op::Conv2d {
                input,
                weights,
                geo,
            },
            &[input, weights],
        ))
    }

    /// Picks position `(row, col)` of every channel: `[N, C, H, W] -> [N, C]`.
    pub fn crop(&mut self, input: Var, row: usize, col: usize) -> Result<Var> {
        let t = self.value(input);
        let s = t.shape();
        if s.len() != 4 || row >= s[2] || col >= s[3] {
            return Err(Error::invalid(format!(
                "crop position ({row}, {col}) outside feature map {s:?}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let data = (0..n * c)
            .map(|nc| t.data()[nc * h * w + row * w + col])
            .collect();
        let v = Tensor::new(vec![n, c], data)?;
        Ok(self.record(v, Op::Crop { input, row, col }, &[input]))
    }

    /// Spatial mean of every channel: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::invalid(format!(
                "global pooling needs [N, C, H, W], got {s:?}"
            )));
        }
        let plane = s[2] * s[3];
        let data = t
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let v = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.record(v, Op::GlobalAvgPool(input), &[input]))
    }

    /// Adds `bias [K]` to every row of `x [N, K]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xt = self.value(x);
        let bt = self.value(bias);
        if xt.ndim() != 2 || bt.shape() != [xt.shape()[1]] {
            return Err(mismatch("add_bias", xt, bt));
        }
        let k = bt.len();
        let mut out = xt.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bt.data()[i % k];
        }
        Ok(self.record(out, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Mean softmax cross-entropy of `logits [N, K]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "cross_entropy: logits {:?} against {} labels",
                t.shape(),
                labels.len()
            )));
        }
        let k = t.shape()[1];
        let mut probs = t.clone();
        let mut loss = 0.0;
        for (row, &y) in probs.data_mut().chunks_mut(k).zip(labels) {
            if y >= k {
                return Err(Error::invalid(format!(
                    "label {y} out of range for {k} classes"
                )));
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        let v = Tensor::scalar(loss / labels.len() as f64);
        let op = Op::CrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.record(v, op, &[logits]))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        let d = p.sub(target)?;
        let v = Tensor::scalar(d.data().iter().map(|x| x * x).sum::<f64>() / d.len() as f64);
        let op = Op::Mse {
            pred,
            target: target.clone(),
        };
        Ok(self.record(v, op, &[pred]))
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom(
        &mut self,
        name: impl Into<String>,
        inputs: &[Var],
        value: Tensor,
        backward: BackwardFn,
    ) -> Var {
        let op = Op::Custom {
            name: name.into(),
            inputs: inputs.to_vec(),
            backward,
        };
        self.record(value, op, inputs)
    }

    /// Accumulates `d loss / d v` into every gradient-requiring node.
    ///
    /// Calling this twice without [`Tape::zero_grads`] adds the gradients
    /// twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            for (input, contrib) in self.local_grads(id, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, c) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Adjoints passed from node `id` (with output adjoint `g`) to its inputs.
    fn local_grads(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[id].value;
        let grads = match &self.nodes[id].op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scalar_mul(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.elementwise_mul(val(*b))?),
                (*b, g.elementwise_mul(val(*a))?),
            ],
            Op::ScalarMul(a, c) => vec![(*a, g.scalar_mul(*c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
            }
            Op::Sigmoid(a) => {
                let d = out.map(|s| s * (1.0 - s));
                vec![(*a, g.elementwise_mul(&d)?)]
            }
            Op::Exp(a) => vec![(*a, g.elementwise_mul(out)?)],
            Op::Relu(a) => {
                let d = val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![(*a, g.elementwise_mul(&d)?)]
            }
            Op::MatMul(a, b) => vec![
                (*a, g.matmul(&val(*b).transpose()?)?),
                (*b, val(*a).transpose()?.matmul(g)?),
            ],
            Op::Outer(u, v) => {
                let (m, n) = (val(*u).len(), val(*v).len());
                let mut du = vec![0.0; m];
                let mut dv = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.data()[i * n + j];
                        du[i] += gij * val(*v).data()[j];
                        dv[j] += gij * val(*u).data()[i];
                    }
                }
                vec![
                    (*u, Tensor::new(vec![m], du)?),
                    (*v, Tensor::new(vec![n], dv)?),
                ]
            }
            Op::DiagEmbed(a) => {
                let y = val(*a).len();
                let d = (0..y).map(|i| g.data()[i * y + i]).collect();
                vec![(*a, Tensor::new(vec![y], d)?)]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Stack(parts) => {
                let chunk = g.len() / parts.len();
                parts
                    .iter()
                    .zip(g.data().chunks(chunk))
                    .map(|(p, c)| Ok((*p, Tensor::new(val(*p).shape().to_vec(), c.to_vec())?)))
                    .collect::<Result<Vec<_>>>()?
            }
            Op::ChannelMaskMul { weights, mask } => {
                let w = val(*weights);
                let m = val(*mask);
                let ws = w.shape();
                let (c_in, plane) = (ws[1], ws[2] * ws[3]);
                let mut dw = g.clone();
                let mut dm = Tensor::zeros(m.shape());
                for (idx, d) in dw.data_mut().iter_mut().enumerate() {
                    let mi = (idx / (c_in * plane)) * plane + idx % plane;
                    dm.data_mut()[mi] += *d * w.data()[idx];
                    *d *= m.data()[mi];
                }
                vec![(*weights, dw), (*mask, dm)]
            }
            Op::Conv2d {
                input,
                weights,
                geo,
            } => {
                let dx = geo.grad_input(g.data(), val(*weights).data());
                let dw = geo.grad_weights(g.data(), val(*input).data());
                vec![
                    (*input, Tensor::new(val(*input).shape().to_vec(), dx)?),
                    (*weights, Tensor::new(val(*weights).shape().to_vec(), dw)?),
                ]
            }
            Op::Crop { input, row, col } => {
                let s = val(*input).shape();
                let (h, w) = (s[2], s[3]);
                let mut d = Tensor::zeros(s);
                for (nc, gv) in g.data().iter().enumerate() {
                    d.data_mut()[nc * h * w + row * w + col] = *gv;
                }
                vec![(*input, d)]
            }
            Op::GlobalAvgPool(input) => {
                let s = val(*input).shape();
                let plane = s[2] * s[3];
                let mut d = Tensor::zeros(s);
                for (chunk, gv) in d.data_mut().chunks_mut(plane).zip(g.data()) {
                    chunk.fill(gv / plane as f64);
                }
                vec![(*input, d)]
            }
            Op::AddBias { x, bias } => {
                let k = val(*bias).len();
                let mut db = vec![0.0; k];
                for (i, gv) in g.data().iter().enumerate() {
                    db[i % k] += gv;
                }
                vec![(*x, g.clone()), (*bias, Tensor::new(vec![k], db)?)]
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let k = probs.shape()[1];
                let scale = g.item() / labels.len() as f64;
                let mut d = probs.clone();
                for (row, &y) in d.data_mut().chunks_mut(k).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|z| *z *= scale);
                }
                vec![(*logits, d)]
            }
            Op::Mse { pred, target } => {
                let n = target.len() as f64;
                let d = val(*pred).sub(target)?.scalar_mul(2.0 * g.item() / n);
                vec![(*pred, d)]
            }
            Op::Custom {
                inputs, backward, ..
            } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let grads = backward(g, &vals);
                if grads.len() != inputs.len() {
                    return Err(Error::invalid("custom backward returned wrong arity"));
                }
                inputs.iter().copied().zip(grads).collect()
            }
        };
        Ok(grads)
    }
}

/// Differentiable logistic function on a scalar value, for callers that
/// need it outside a tape.
pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

pub const DEFAULT_EPS: f64 = 1e-6;

/// Result of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |analytic| + |numeric|)`.
    pub max_error: f64,
    /// Input and flat coordinate where `max_error` was attained.
    pub worst: (usize, usize),
}

/// Compares the tape gradient of the scalar `f` with respect to each input
/// against central finite differences with step `eps`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::invalid("grad_check function must return a scalar"));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = GradCheck {
        max_error: 0.0,
        worst: (0, 0),
    };
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + eps;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - eps;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite {
                    index: i,
                    context: format!("input {k}: analytic {a}, numeric {numeric}"),
                });
            }
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1.0);
            if err > report.max_error {
                report.max_error = err;
                report.worst = (k, i);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let l = t.sum(x);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gives_two_x() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![1.5, -2.0, 0.25]));
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn sigmoid_derivative() {
        let xs = vec![-2.0, 0.0, 0.3, 4.0];
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(xs.clone()));
        let s = t.sigmoid(x);
        let l = t.sum(s);
        t.backward(l).unwrap();
        for (g, x) in t.grad(x).unwrap().data().iter().zip(&xs) {
            assert!((g - sigmoid_grad(*x)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn backward_twice_doubles() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![0.5, 1.0]));
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq);
        t.backward(l).unwrap();
        let once = t.grad(x).unwrap().clone();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &once.scalar_mul(2.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![2.0]));
        let a = t.scalar_mul(x, 3.0);
        let b = t.exp(x);
        let s = t.add(a, b).unwrap();
        let l = t.sum(s);
        t.backward(l).unwrap();
        assert!((t.grad(x).unwrap().item() - (3.0 + 2f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![1.0]));
        let c = t.constant(Tensor::from_vec(vec![4.0]));
        let p = t.mul(x, c).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap().item(), 4.0);
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let mut rng = seeded(11);
        let x = Tensor::randn(&[3, 4], &mut rng);
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            std::slice::from_ref(&x),
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(r.max_error < 1e-8, "{r:?}");

        let r = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(3.0))),
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert_eq!(r.max_error, 0.0);
    }

    #[test]
    fn grad_check_flags_broken_rule() {
        let x = Tensor::from_vec(vec![0.3, -0.7]);
        let r = grad_check(
            |t, v| {
                let val = t.value(v[0]).map(|x| x * x);
                let y = t.custom(
                    "bad_square",
                    &[v[0]],
                    val,
                    Box::new(|g, xs| vec![g.elementwise_mul(xs[0]).unwrap()]),
                );
                Ok(t.sum(y))
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(r.max_error > 0.1);
    }

    #[test]
    fn grad_check_reports_non_finite() {
        let x = Tensor::from_vec(vec![800.0]);
        let err = grad_check(
            |t, v| {
                let e = t.exp(v[0]);
                Ok(t.sum(e))
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 0, .. }));
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let mut t = Tape::new();
        let z = t.param(Tensor::from_rows(&[[1000.0, 0.0], [0.0, -1000.0]]).unwrap());
        let l = t.cross_entropy(z, &[0, 1]).unwrap();
        assert!((t.value(l).item() - 500.0).abs() < 1e-9);
        t.backward(l).unwrap();
        assert!(t.grad(z).unwrap().all_finite());
    }
}
