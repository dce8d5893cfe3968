//! Eager reverse-mode differentiation over dense `f64` tensors.
//!
//! Every op computes its value immediately and appends a node to the tape.
//! [`Tape::backward`] then walks the nodes in exact reverse order of
//! recording, accumulating gradients additively into each input. Only
//! nodes that transitively depend on a gradient-requiring leaf are visited.

use super::tensor::{check_temperature, log_softmax_into, softmax_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Square(usize),
    Softmax(usize, f64),
    LogSoftmax(usize),
    Sum(usize),
    Gather(usize, Vec<usize>),
    Slice(usize, usize),
    Clip(usize, f64, f64),
    Minimum(usize, usize),
    Concat(Vec<usize>),
    Reshape(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every recorded value that
/// depends on a trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[v.0]],
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Ordered record of primitive ops.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Allows another call to [`Tape::backward`].
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; trainable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(data, shape, Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.constant(vec![n], data)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Vec::new(), vec![v])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "item() on shape {:?}", n.shape);
        n.value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_len(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.nodes[a.0].value.len(),
            self.nodes[b.0].value.len(),
            "{op}: shapes {:?} and {:?} differ",
            self.nodes[a.0].shape,
            self.nodes[b.0].shape
        );
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        self.same_len(a, b, name);
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let shape = na.shape.clone();
        let ng = na.needs_grad || nb.needs_grad;
        self.push(value, shape, op, ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let na = &self.nodes[a.0];
        let value = na.value.iter().map(|&x| f(x)).collect();
        let shape = na.shape.clone();
        let ng = na.needs_grad;
        self.push(value, shape, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "minimum", f64::min, Op::Minimum(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::Scale(a.0, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::Offset(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clip bounds reversed");
        self.unary(a, |x| x.clamp(lo, hi), Op::Clip(a.0, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let na = &self.nodes[a.0];
        let s = na.value.iter().sum();
        let ng = na.needs_grad;
        self.push(vec![s], Vec::new(), Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Dot product of two equal-length tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum(m)
    }

    /// `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(na.shape.len(), 2, "matmul lhs must be 2-d, got {:?}", na.shape);
        let (m, k) = (na.shape[0], na.shape[1]);
        let (k2, n, shape) = match nb.shape.len() {
            1 => (nb.shape[0], 1, vec![m]),
            2 => (nb.shape[0], nb.shape[1], vec![m, nb.shape[1]]),
            _ => panic!("matmul rhs must be 1-d or 2-d, got {:?}", nb.shape),
        };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", na.shape, nb.shape);
        let mut value = vec![0.0; m * n];
        if n == 1 {
            matvec(&na.value, &nb.value, m, k, &mut value);
        } else {
            for i in 0..m {
                let arow = &na.value[i * k..(i + 1) * k];
                let orow = &mut value[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &nb.value[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let ng = na.needs_grad || nb.needs_grad;
        self.push(value, shape, Op::MatMul(a.0, b.0), ng)
    }

    /// Softmax over a vector (or each row of a matrix) at `temperature`.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let na = &self.nodes[a.0];
        let cols = *na.shape.last().unwrap_or(&1);
        let mut value = vec![0.0; na.value.len()];
        for (o, l) in value.chunks_mut(cols).zip(na.value.chunks(cols)) {
            softmax_into(l, temperature, o);
        }
        let (shape, ng) = (na.shape.clone(), na.needs_grad);
        Ok(self.push(value, shape, Op::Softmax(a.0, temperature), ng))
    }

    /// Max-subtracted log-softmax over a vector (or each row of a matrix).
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let na = &self.nodes[a.0];
        let cols = *na.shape.last().unwrap_or(&1);
        let mut value = vec![0.0; na.value.len()];
        for (o, l) in value.chunks_mut(cols).zip(na.value.chunks(cols)) {
            log_softmax_into(l, o);
        }
        let (shape, ng) = (na.shape.clone(), na.needs_grad);
        self.push(value, shape, Op::LogSoftmax(a.0), ng)
    }

    /// Picks flat elements by index into a 1-d result.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let na = &self.nodes[a.0];
        let value = indices.iter().map(|&i| na.value[i]).collect();
        let ng = na.needs_grad;
        let n = indices.len();
        self.push(value, vec![n], Op::Gather(a.0, indices), ng)
    }

    /// Contiguous flat range `[start, start+len)` as a 1-d result.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let na = &self.nodes[a.0];
        let value = na.value[start..start + len].to_vec();
        let ng = na.needs_grad;
        self.push(value, vec![len], Op::Slice(a.0, start), ng)
    }

    /// Row `i` of a 2-d tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let shape = &self.nodes[a.0].shape;
        assert_eq!(shape.len(), 2, "row() on shape {shape:?}");
        assert!(i < shape[0], "row {i} out of range for {shape:?}");
        let cols = shape[1];
        self.slice(a, i * cols, cols)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::new();
        let mut ng = false;
        for p in parts {
            let n = &self.nodes[p.0];
            value.extend_from_slice(&n.value);
            ng |= n.needs_grad;
        }
        let len = value.len();
        self.push(value, vec![len], Op::Concat(parts.iter().map(|v| v.0).collect()), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let na = &self.nodes[a.0];
        assert_eq!(shape.iter().product::<usize>(), na.value.len(), "reshape size mismatch");
        let (value, ng) = (na.value.clone(), na.needs_grad);
        self.push(value, shape, Op::Reshape(a.0), ng)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Fails on a non-scalar or non-finite loss, and on a second call
    /// without an intervening [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this tape; call reset()".into()));
        }
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::arg(format!("loss must be scalar, got shape {:?}", root.shape)));
        }
        if !root.value[0].is_finite() {
            return Err(Error::Numerical(format!("loss is {}", root.value[0])));
        }
        self.backward_done = true;

        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;

        for i in (0..n).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    accumulate(nodes, &mut grads, *a, |d| axpy(d, &g, 1.0));
                    accumulate(nodes, &mut grads, *b, |d| axpy(d, &g, 1.0));
                }
                Op::Sub(a, b) => {
                    accumulate(nodes, &mut grads, *a, |d| axpy(d, &g, 1.0));
                    accumulate(nodes, &mut grads, *b, |d| axpy(d, &g, -1.0));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    accumulate(nodes, &mut grads, *a, |d| {
                        for ((d, &gi), &y) in d.iter_mut().zip(&g).zip(vb) {
                            *d += gi * y;
                        }
                    });
                    accumulate(nodes, &mut grads, *b, |d| {
                        for ((d, &gi), &x) in d.iter_mut().zip(&g).zip(va) {
                            *d += gi * x;
                        }
                    });
                }
                Op::Minimum(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    accumulate(nodes, &mut grads, *a, |d| {
                        for (j, d) in d.iter_mut().enumerate() {
                            if va[j] <= vb[j] {
                                *d += g[j];
                            }
                        }
                    });
                    accumulate(nodes, &mut grads, *b, |d| {
                        for (j, d) in d.iter_mut().enumerate() {
                            if va[j] > vb[j] {
                                *d += g[j];
                            }
                        }
                    });
                }
                Op::Scale(a, k) => accumulate(nodes, &mut grads, *a, |d| axpy(d, &g, *k)),
                Op::Offset(a) | Op::Reshape(a) => {
                    accumulate(nodes, &mut grads, *a, |d| axpy(d, &g, 1.0))
                }
                Op::Exp(a) | Op::Sigmoid(a) | Op::Tanh(a) => {
                    let y = &node.value;
                    let local: fn(f64) -> f64 = match &node.op {
                        Op::Exp(_) => |y| y,
                        Op::Sigmoid(_) => |y| y * (1.0 - y),
                        _ => |y| 1.0 - y * y,
                    };
                    accumulate(nodes, &mut grads, *a, |d| {
                        for ((d, &gi), &yi) in d.iter_mut().zip(&g).zip(y) {
                            *d += gi * local(yi);
                        }
                    });
                }
                Op::Log(a) => {
                    let x = &nodes[*a].value;
                    accumulate(nodes, &mut grads, *a, |d| {
                        for ((d, &gi), &xi) in d.iter_mut().zip(&g).zip(x) {
                            *d += gi / xi;
                        }
                    });
                }
                Op::Square(a) => {
                    let x = &nodes[*a].value;
                    accumulate(nodes, &mut grads, *a, |d| {
                        for ((d, &gi), &xi) in d.iter_mut().zip(&g).zip(x) {
                            *d += 2.0 * gi * xi;
                        }
                    });
                }
                Op::Clip(a, lo, hi) => {
                    let x = &nodes[*a].value;
                    accumulate(nodes, &mut grads, *a, |d| {
                        for ((d, &gi), &xi) in d.iter_mut().zip(&g).zip(x) {
                            if xi >= *lo && xi <= *hi {
                                *d += gi;
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    accumulate(nodes, &mut grads, *a, |d| d.iter_mut().for_each(|d| *d += g0));
                }
                Op::Softmax(a, temp) => {
                    let y = &node.value;
                    let cols = *node.shape.last().unwrap_or(&1);
                    accumulate(nodes, &mut grads, *a, |d| {
                        for ((d, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                            let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((d, &gi), &yi) in d.iter_mut().zip(gr).zip(yr) {
                                *d += yi * (gi - gy) / temp;
                            }
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let cols = *node.shape.last().unwrap_or(&1);
                    accumulate(nodes, &mut grads, *a, |d| {
                        for ((d, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                            let gs: f64 = gr.iter().sum();
                            for ((d, &gi), &yi) in d.iter_mut().zip(gr).zip(yr) {
                                *d += gi - yi.exp() * gs;
                            }
                        }
                    });
                }
                Op::Gather(a, idx) => accumulate(nodes, &mut grads, *a, |d| {
                    for (&j, &gi) in idx.iter().zip(&g) {
                        d[j] += gi;
                    }
                }),
                Op::Slice(a, start) => accumulate(nodes, &mut grads, *a, |d| {
                    axpy(&mut d[*start..*start + g.len()], &g, 1.0)
                }),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        let gs = &g[off..off + len];
                        accumulate(nodes, &mut grads, p, |d| axpy(d, gs, 1.0));
                        off += len;
                    }
                }
                Op::MatMul(a, b) => {
                    let (na, nb) = (&nodes[*a], &nodes[*b]);
                    let (m, k) = (na.shape[0], na.shape[1]);
                    let n = if nb.shape.len() == 1 { 1 } else { nb.shape[1] };
                    let (av, bv) = (&na.value, &nb.value);
                    // dA = G B^T
                    accumulate(nodes, &mut grads, *a, |d| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            let drow = &mut d[i * k..(i + 1) * k];
                            if n == 1 {
                                axpy(drow, bv, grow[0]);
                            } else {
                                for (p, dv) in drow.iter_mut().enumerate() {
                                    let brow = &bv[p * n..(p + 1) * n];
                                    *dv += dot(grow, brow);
                                }
                            }
                        }
                    });
                    // dB = A^T G
                    accumulate(nodes, &mut grads, *b, |d| {
                        for i in 0..m {
                            let arow = &av[i * k..(i + 1) * k];
                            if n == 1 {
                                axpy(d, arow, g[i]);
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            for (p, &aval) in arow.iter().enumerate() {
                                axpy(&mut d[p * n..(p + 1) * n], grow, aval);
                            }
                        }
                    });
                }
            }
        }

        let lens = self.nodes.iter().map(|n| n.value.len()).collect();
        Ok(Gradients { grads, lens })
    }
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    target: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[target].needs_grad {
        return;
    }
    let slot = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
    f(slot);
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn matvec(w: &[f64], x: &[f64], m: usize, k: usize, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate().take(m) {
        *o = dot(&w[i * k..(i + 1) * k], x);
    }
}

/// Dot product with four interleaved accumulators (fixed order, so results
/// are reproducible while the loop vectorizes).
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_diff_check;

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0).with_grad());
        let y = tape.mul(x, x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x), vec![6.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::new();
        let l = tape.leaf(&Tensor::vector(vec![0.3, -1.2, 2.0, 0.0]).with_grad());
        let p = tape.softmax(l, 1.0).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        for v in g.get(l) {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn second_backward_requires_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1.5).with_grad());
        let y = tape.exp(x);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        tape.reset();
        assert!(tape.backward(y).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Argument(_))));
    }

    #[test]
    fn nan_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(-1.0).with_grad());
        let y = tape.log(x);
        assert!(matches!(tape.backward(y), Err(Error::Numerical(_))));
    }

    #[test]
    fn gradients_accumulate_over_fanout() {
        // y = x*x + 3x  -> dy/dx = 2x + 3
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0).with_grad());
        let xx = tape.mul(x, x);
        let x3 = tape.scale(x, 3.0);
        let y = tape.add(xx, x3);
        assert_eq!(tape.backward(y).unwrap().get(x), vec![7.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant_vec(vec![1.0, 2.0]);
        let x = tape.leaf(&Tensor::vector(vec![0.5, 0.5]).with_grad());
        let d = tape.dot(c, x);
        let g = tape.backward(d).unwrap();
        assert!(g.get_ref(c).is_none());
        assert_eq!(g.get(x), vec![1.0, 2.0]);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let x0 = Tensor::vector(vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9]);
        let err = finite_diff_check(
            |t, x| {
                let w = t.reshape(x, vec![2, 3]);
                let v = t.slice(x, 0, 3);
                let mv = t.matmul(w, v);
                let wt = w_t(t, x);
                let sq = t.matmul(w, wt);
                let s1 = t.sum(sq);
                let sig = t.sigmoid(mv);
                let th = t.tanh(mv);
                let e = t.exp(th);
                let p = t.softmax(x, 0.7)?;
                let lp = t.log_softmax(x);
                let g = t.gather(lp, vec![1, 4, 4]);
                let cl = t.clip(x, -0.5, 0.5);
                let mn = t.minimum(sig, e);
                let sq2 = t.square(p);
                let lg = t.log(p);
                let c = t.concat(&[mn, g, cl, sq2, lg]);
                let r = t.row(w, 1);
                let rr = t.dot(r, r);
                let off = t.add_scalar(rr, 2.0);
                let d = t.sub(c, c);
                let ds = t.sum(d);
                let cs = t.sum(c);
                let a = t.add(cs, off);
                let b = t.add(a, ds);
                let b = t.add(b, s1);
                Ok(t.mean(b))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "max rel err {err}");

        fn w_t(t: &mut Tape, x: Var) -> Var {
            let idx = vec![0, 3, 1, 4, 2, 5];
            let g = t.gather(x, idx);
            t.reshape(g, vec![3, 2])
        }
    }
}
