//! Reverse-mode differentiation over a linear tape.
//!
//! Every recorded node stores its forward value, so `backward` walks the tape
//! once in reverse without recomputation. Only differentiable primitives can
//! be recorded; shape errors surface when an op is recorded.

use crate::error::{Error, Result};
use crate::mask::MaskSpec;
use crate::tensor::{self, Tensor, LAYER_NORM_EPS, RMS_NORM_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    MatMul(Var, Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var, Vec<usize>),
    Permute(Var, Vec<usize>),
    Select(Var, usize, Vec<usize>),
    BlockDiag(Var),
    Softmax(Var, MaskSpec),
    RmsNorm(Var),
    LayerNorm(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn eval_op<'a>(op: &Op, val: &dyn Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    Ok(match op {
        Op::Leaf { .. } => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => tensor::matmul_batched(val(*a), val(*b))?,
        Op::Add(a, b) => tensor::add(val(*a), val(*b))?,
        Op::AddBroadcast(a, b) => tensor::add_broadcast(val(*a), val(*b))?,
        Op::Sub(a, b) => tensor::sub(val(*a), val(*b))?,
        Op::Mul(a, b) => tensor::mul(val(*a), val(*b))?,
        Op::Scale(a, s) => val(*a).scale(*s),
        Op::Square(a) => val(*a).map(|x| x * x),
        Op::Gelu(a) => val(*a).map(gelu),
        Op::Sum(a) => Tensor::scalar(val(*a).sum()),
        Op::Mean(a) => Tensor::scalar(val(*a).mean()),
        Op::Reshape(a, shape) => val(*a).reshape(shape)?,
        Op::Permute(a, axes) => tensor::permute(val(*a), axes)?,
        Op::Select(a, axis, idx) => tensor::select(val(*a), *axis, idx)?,
        Op::BlockDiag(a) => tensor::block_diag_embed(val(*a))?,
        Op::Softmax(a, mask) => tensor::softmax_rows_masked(val(*a), mask)?,
        Op::RmsNorm(a) => tensor::rms_norm(val(*a)),
        Op::LayerNorm(a) => tensor::layer_norm(val(*a)),
    })
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBroadcast(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::Square(a)
        | Op::Gelu(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Reshape(a, _)
        | Op::Permute(a, _)
        | Op::Select(a, _, _)
        | Op::BlockDiag(a)
        | Op::Softmax(a, _)
        | Op::RmsNorm(a)
        | Op::LayerNorm(a) => vec![*a],
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; receives no gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf { trainable: false }, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf { trainable: true }, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push_node(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let nodes = &self.nodes;
        let value = eval_op(&op, &|v: Var| &nodes[v.0].value)?;
        let needs_grad = inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_node(value, op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    /// `a + b` with `b` broadcast over `a`'s leading axes.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::AddBroadcast(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::Scale(a, s))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Square(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Gelu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Reshape(a, shape.to_vec()))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.record(Op::Permute(a, axes.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.record(Op::Select(a, axis, indices.to_vec()))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.select(a, axis, &idx)
    }

    /// `[..., p, n, m]` blocks to their direct sum `[..., p·n, p·m]`.
    pub fn block_diag(&mut self, a: Var) -> Result<Var> {
        self.record(Op::BlockDiag(a))
    }

    pub fn softmax_rows_masked(&mut self, a: Var, mask: &MaskSpec) -> Result<Var> {
        self.record(Op::Softmax(a, mask.clone()))
    }

    pub fn rms_norm(&mut self, a: Var) -> Result<Var> {
        self.record(Op::RmsNorm(a))
    }

    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.record(Op::LayerNorm(a))
    }

    /// Gradients of scalar `loss` with respect to every node that depends on
    /// a trainable leaf. Trainable leaves off the path get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0).reshape(lv.shape())?);
        if lv.rank() == 0 {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            let push = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| -> Result<()> {
                if !self.nodes[v.0].needs_grad {
                    return Ok(());
                }
                grads[v.0] = Some(match grads[v.0].take() {
                    Some(acc) => tensor::add(&acc, &t)?,
                    None => t,
                });
                Ok(())
            };
            match &node.op {
                Op::Leaf { .. } => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = tensor::matmul_backward(self.value(*a), self.value(*b), &g)?;
                    push(*a, ga, &mut grads)?;
                    push(*b, gb, &mut grads)?;
                }
                Op::Add(a, b) => {
                    push(*a, g.clone(), &mut grads)?;
                    push(*b, g, &mut grads)?;
                }
                Op::AddBroadcast(a, b) => {
                    let bshape = self.shape(*b).to_vec();
                    let n = bshape.iter().product::<usize>();
                    let mut gb = vec![0.0; n];
                    for chunk in g.data().chunks_exact(n) {
                        gb.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                    }
                    push(*b, Tensor::new(&bshape, gb)?, &mut grads)?;
                    push(*a, g, &mut grads)?;
                }
                Op::Sub(a, b) => {
                    push(*b, g.scale(-1.0), &mut grads)?;
                    push(*a, g, &mut grads)?;
                }
                Op::Mul(a, b) => {
                    push(*a, tensor::mul(&g, self.value(*b))?, &mut grads)?;
                    push(*b, tensor::mul(&g, self.value(*a))?, &mut grads)?;
                }
                Op::Scale(a, s) => push(*a, g.scale(*s), &mut grads)?,
                Op::Square(a) => {
                    let x = self.value(*a);
                    push(*a, tensor::mul(&g, &x.scale(2.0))?, &mut grads)?;
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    push(*a, tensor::mul(&g, &x.map(gelu_grad))?, &mut grads)?;
                }
                Op::Sum(a) => {
                    let gv = g.item()?;
                    push(*a, Tensor::filled(self.shape(*a), gv), &mut grads)?;
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let gv = g.item()? / x.len() as f64;
                    push(*a, Tensor::filled(x.shape(), gv), &mut grads)?;
                }
                Op::Reshape(a, _) => {
                    let s = self.shape(*a).to_vec();
                    push(*a, g.reshape(&s)?, &mut grads)?;
                }
                Op::Permute(a, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    push(*a, tensor::permute(&g, &inv)?, &mut grads)?;
                }
                Op::Select(a, axis, idx) => {
                    let s = self.shape(*a).to_vec();
                    push(*a, tensor::select_backward(&g, &s, *axis, idx), &mut grads)?;
                }
                Op::BlockDiag(a) => {
                    let s = self.shape(*a).to_vec();
                    push(*a, tensor::block_diag_extract(&g, &s), &mut grads)?;
                }
                Op::Softmax(a, _) => {
                    let d = *y.shape().last().unwrap();
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y
                        .data()
                        .chunks_exact(d)
                        .zip(g.data().chunks_exact(d))
                        .zip(dx.chunks_exact_mut(d))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    push(*a, Tensor::new(y.shape(), dx)?, &mut grads)?;
                }
                Op::RmsNorm(a) => {
                    let x = self.value(*a);
                    let d = *x.shape().last().unwrap();
                    let mut dx = vec![0.0; x.len()];
                    for (((xr, yr), gr), dr) in x
                        .data()
                        .chunks_exact(d)
                        .zip(y.data().chunks_exact(d))
                        .zip(g.data().chunks_exact(d))
                        .zip(dx.chunks_exact_mut(d))
                    {
                        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
                        let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
                        let gy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *o = inv * (gv - yv * gy);
                        }
                    }
                    push(*a, Tensor::new(x.shape(), dx)?, &mut grads)?;
                }
                Op::LayerNorm(a) => {
                    let x = self.value(*a);
                    let d = *x.shape().last().unwrap();
                    let mut dx = vec![0.0; x.len()];
                    for (((xr, yr), gr), dr) in x
                        .data()
                        .chunks_exact(d)
                        .zip(y.data().chunks_exact(d))
                        .zip(g.data().chunks_exact(d))
                        .zip(dx.chunks_exact_mut(d))
                    {
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let gm = gr.iter().sum::<f64>() / d as f64;
                        let gy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *o = inv * (gv - gm - yv * gy);
                        }
                    }
                    push(*a, Tensor::new(x.shape(), dx)?, &mut grads)?;
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf { trainable: true }) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf { .. } => node.value.clone(),
                op => eval_op(op, &|v: Var| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// True when a replay reproduces every recorded value bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let replayed = self.replay()?;
        Ok(self.nodes.iter().zip(&replayed).all(|(n, r)| {
            n.value.shape() == r.shape()
                && n.value
                    .data()
                    .iter()
                    .zip(r.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        }))
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`. Always present for trainable leaves.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn bilinear_form_gradient_is_outer_product() {
        let mut tape = Tape::new();
        let xv = Tensor::new(&[1, 3], vec![1.0, 2.0, -1.0]).unwrap();
        let yv = Tensor::new(&[2, 1], vec![0.5, 3.0]).unwrap();
        let x = tape.leaf(xv.clone());
        let y = tape.leaf(yv.clone());
        let w = tape.param(Tensor::from_fn(&[3, 2], |i| (i[0] + i[1]) as f64));
        let xw = tape.matmul(x, w).unwrap();
        let f = tape.matmul(xw, y).unwrap();
        let loss = tape.sum(f).unwrap();
        let g = tape.backward(loss).unwrap();
        let expected = xv.t().unwrap().matmul(&yv.t().unwrap()).unwrap();
        assert!(g.wrt(w).unwrap().max_abs_diff(&expected) < 1e-15);
        assert!(g.wrt(x).is_none());
    }

    #[test]
    fn detached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::filled(&[2], 1.0));
        let b = tape.param(Tensor::filled(&[3], 1.0));
        let loss = tape.sum(a).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(b).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::filled(&[2], 1.0));
        assert!(matches!(tape.backward(a), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shape_errors_at_record_time() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let b = tape.param(Tensor::zeros(&[2, 3]));
        assert!(tape.matmul(a, b).is_err());
    }
}
