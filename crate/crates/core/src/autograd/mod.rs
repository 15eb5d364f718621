//! Minimal reverse-mode automatic differentiation.
//!
//! Every backward rule is itself written in terms of differentiable graph
//! operations, so gradients can be differentiated again. The critic's
//! gradient penalty relies on this: it needs the gradient of a function of
//! `∂f/∂x` with respect to the critic's parameters.
//!
//! Recording is controlled per thread. Inside [`no_grad`] every op produces
//! a constant, which is how inference and first-order backward passes avoid
//! building graphs nobody will use.

mod tensor;

pub use tensor::Tensor;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

/// Sentinel in gather/scatter index maps meaning "no source" (reads as zero).
pub const NO_INDEX: u32 = u32::MAX;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Runs `f` with graph recording switched to `enabled`, restoring the
/// previous mode afterwards (also on unwind).
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|c| c.replace(enabled)));
    f()
}

pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    /// `a / b`; a zero denominator yields zero.
    Div,
    Scale(f64),
    AddScalar,
    MatMul { trans_a: bool, trans_b: bool },
    AddRowVec,
    SumRows,
    BroadcastRows,
    SumCols,
    BroadcastCols,
    SumAll,
    BroadcastScalar,
    Reshape,
    Gather(Rc<[u32]>),
    ScatterAdd(Rc<[u32]>),
    Tanh,
    Sigmoid,
    Exp,
    LeakyRelu(f64),
    Square,
    Sqrt,
    RowNorm,
}

struct Node {
    id: u64,
    value: Tensor,
    op: Op,
    parents: Vec<Var>,
    requires_grad: bool,
}

/// A node in the computation graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.0.value)
            .field("op", &self.0.op)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    fn from_op(op: Op, parents: Vec<Var>, value: Tensor) -> Var {
        let requires_grad = grad_enabled() && parents.iter().any(Var::requires_grad);
        let (op, parents) = if requires_grad {
            (op, parents)
        } else {
            (Op::Leaf, Vec::new())
        };
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op,
            parents,
            requires_grad,
        }))
    }

    /// A value that is never differentiated.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: false,
        }))
    }

    /// A differentiable leaf (model parameter or probe input).
    pub fn leaf(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: true,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn add(&self, rhs: &Var) -> Var {
        let v = self.value().zip_map(rhs.value(), |a, b| a + b);
        Var::from_op(Op::Add, vec![self.clone(), rhs.clone()], v)
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        let v = self.value().zip_map(rhs.value(), |a, b| a - b);
        Var::from_op(Op::Sub, vec![self.clone(), rhs.clone()], v)
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        let v = self.value().zip_map(rhs.value(), |a, b| a * b);
        Var::from_op(Op::Mul, vec![self.clone(), rhs.clone()], v)
    }

    /// Elementwise division where `x / 0` is defined as `0`.
    pub fn div(&self, rhs: &Var) -> Var {
        let v = self
            .value()
            .zip_map(rhs.value(), |a, b| if b == 0.0 { 0.0 } else { a / b });
        Var::from_op(Op::Div, vec![self.clone(), rhs.clone()], v)
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = self.value().map(|a| a * c);
        Var::from_op(Op::Scale(c), vec![self.clone()], v)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let v = self.value().map(|a| a + c);
        Var::from_op(Op::AddScalar, vec![self.clone()], v)
    }

    pub fn matmul(&self, rhs: &Var) -> Var {
        self.matmul_t(rhs, false, false)
    }

    pub fn matmul_t(&self, rhs: &Var, trans_a: bool, trans_b: bool) -> Var {
        let v = self.value().matmul(rhs.value(), trans_a, trans_b);
        Var::from_op(
            Op::MatMul { trans_a, trans_b },
            vec![self.clone(), rhs.clone()],
            v,
        )
    }

    /// Adds the length-`cols` vector `bias` to every row.
    pub fn add_row_vec(&self, bias: &Var) -> Var {
        let (r, c) = self.value().dims2();
        assert_eq!(bias.value().len(), c, "bias length mismatch");
        let b = bias.value().data();
        let mut out = self.value().data().to_vec();
        for row in out.chunks_mut(c.max(1)).take(r) {
            for (x, bb) in row.iter_mut().zip(b) {
                *x += bb;
            }
        }
        let v = Tensor::new(self.shape().to_vec(), out);
        Var::from_op(Op::AddRowVec, vec![self.clone(), bias.clone()], v)
    }

    /// `[rows, cols] -> [cols]`
    pub fn sum_rows(&self) -> Var {
        let (r, c) = self.value().dims2();
        let mut out = vec![0.0; c];
        for row in self.value().data().chunks(c.max(1)).take(r) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        Var::from_op(Op::SumRows, vec![self.clone()], Tensor::new(vec![c], out))
    }

    /// `[cols] -> [rows, cols]`
    pub fn broadcast_rows(&self, rows: usize) -> Var {
        let c = self.value().len();
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(self.value().data());
        }
        Var::from_op(
            Op::BroadcastRows,
            vec![self.clone()],
            Tensor::new(vec![rows, c], out),
        )
    }

    /// `[rows, cols] -> [rows]`
    pub fn sum_cols(&self) -> Var {
        let (r, c) = self.value().dims2();
        let out: Vec<f64> = if c == 0 {
            vec![0.0; r]
        } else {
            self.value().data().chunks(c).map(|row| row.iter().sum()).collect()
        };
        Var::from_op(Op::SumCols, vec![self.clone()], Tensor::new(vec![r], out))
    }

    /// `[rows] -> [rows, cols]`
    pub fn broadcast_cols(&self, cols: usize) -> Var {
        let r = self.value().len();
        let mut out = Vec::with_capacity(r * cols);
        for &x in self.value().data() {
            out.extend(std::iter::repeat_n(x, cols));
        }
        Var::from_op(
            Op::BroadcastCols,
            vec![self.clone()],
            Tensor::new(vec![r, cols], out),
        )
    }

    pub fn sum_all(&self) -> Var {
        let v = Tensor::scalar(self.value().sum());
        Var::from_op(Op::SumAll, vec![self.clone()], v)
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().len().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Var {
        let v = Tensor::full(shape, self.value().item());
        Var::from_op(Op::BroadcastScalar, vec![self.clone()], v)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = self.value().clone().reshape(shape);
        Var::from_op(Op::Reshape, vec![self.clone()], v)
    }

    /// `out[i] = src[map[i]]`, or zero where `map[i] == NO_INDEX`.
    pub fn gather(&self, map: &Rc<[u32]>, shape: &[usize]) -> Var {
        assert_eq!(map.len(), shape.iter().product::<usize>());
        let src = self.value().data();
        let out = map
            .iter()
            .map(|&j| if j == NO_INDEX { 0.0 } else { src[j as usize] })
            .collect();
        Var::from_op(
            Op::Gather(Rc::clone(map)),
            vec![self.clone()],
            Tensor::new(shape.to_vec(), out),
        )
    }

    /// `out[map[i]] += src[i]` into a zero tensor of `shape`; the adjoint of
    /// [`Var::gather`] with the same map.
    pub fn scatter_add(&self, map: &Rc<[u32]>, shape: &[usize]) -> Var {
        assert_eq!(map.len(), self.value().len());
        let mut out = vec![0.0; shape.iter().product()];
        for (&j, &x) in map.iter().zip(self.value().data()) {
            if j != NO_INDEX {
                out[j as usize] += x;
            }
        }
        Var::from_op(
            Op::ScatterAdd(Rc::clone(map)),
            vec![self.clone()],
            Tensor::new(shape.to_vec(), out),
        )
    }

    pub fn tanh(&self) -> Var {
        Var::from_op(Op::Tanh, vec![self.clone()], self.value().map(f64::tanh))
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        Var::from_op(Op::Sigmoid, vec![self.clone()], v)
    }

    pub fn exp(&self) -> Var {
        Var::from_op(Op::Exp, vec![self.clone()], self.value().map(f64::exp))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let v = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        Var::from_op(Op::LeakyRelu(slope), vec![self.clone()], v)
    }

    pub fn square(&self) -> Var {
        Var::from_op(Op::Square, vec![self.clone()], self.value().map(|x| x * x))
    }

    pub fn sqrt(&self) -> Var {
        Var::from_op(Op::Sqrt, vec![self.clone()], self.value().map(f64::sqrt))
    }

    /// Euclidean norm of every row: `[rows, cols] -> [rows]`. The gradient
    /// at a zero row is taken to be zero.
    pub fn row_norm(&self) -> Var {
        let (r, c) = self.value().dims2();
        let out: Vec<f64> = if c == 0 {
            vec![0.0; r]
        } else {
            self.value()
                .data()
                .chunks(c)
                .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect()
        };
        Var::from_op(Op::RowNorm, vec![self.clone()], Tensor::new(vec![r], out))
    }

    fn backward_rule(&self, g: &Var) -> Vec<Option<Var>> {
        let node = &self.0;
        let p = &node.parents;
        let need = |i: usize| p[i].requires_grad();
        let one = |v: Var| vec![Some(v)];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![need(0).then(|| g.clone()), need(1).then(|| g.clone())],
            Op::Sub => vec![need(0).then(|| g.clone()), need(1).then(|| g.scale(-1.0))],
            Op::Mul => vec![need(0).then(|| g.mul(&p[1])), need(1).then(|| g.mul(&p[0]))],
            Op::Div => vec![
                need(0).then(|| g.div(&p[1])),
                need(1).then(|| g.mul(self).div(&p[1]).scale(-1.0)),
            ],
            Op::Scale(c) => one(g.scale(*c)),
            Op::AddScalar => one(g.clone()),
            Op::Reshape => one(g.reshape(p[0].shape())),
            Op::MatMul { trans_a, trans_b } => {
                let (a, b) = (&p[0], &p[1]);
                let (ga, gb) = match (trans_a, trans_b) {
                    (false, false) => (
                        need(0).then(|| g.matmul_t(b, false, true)),
                        need(1).then(|| a.matmul_t(g, true, false)),
                    ),
                    (true, false) => (
                        need(0).then(|| b.matmul_t(g, false, true)),
                        need(1).then(|| a.matmul_t(g, false, false)),
                    ),
                    (false, true) => (
                        need(0).then(|| g.matmul_t(b, false, false)),
                        need(1).then(|| g.matmul_t(a, true, false)),
                    ),
                    (true, true) => (
                        need(0).then(|| b.matmul_t(g, true, true)),
                        need(1).then(|| g.matmul_t(a, true, true)),
                    ),
                };
                vec![ga, gb]
            }
            Op::AddRowVec => vec![need(0).then(|| g.clone()), need(1).then(|| g.sum_rows())],
            Op::SumRows => one(g.broadcast_rows(p[0].value().dims2().0)),
            Op::BroadcastRows => one(g.sum_rows()),
            Op::SumCols => one(g.broadcast_cols(p[0].value().dims2().1)),
            Op::BroadcastCols => one(g.sum_cols()),
            Op::SumAll => one(g.broadcast_scalar(p[0].shape())),
            Op::BroadcastScalar => one(g.sum_all()),
            Op::Gather(map) => one(g.scatter_add(map, p[0].shape())),
            Op::ScatterAdd(map) => one(g.gather(map, p[0].shape())),
            Op::Tanh => one(g.mul(&self.square().scale(-1.0).add_scalar(1.0))),
            Op::Sigmoid => one(g.mul(self).mul(&self.scale(-1.0).add_scalar(1.0))),
            Op::Exp => one(g.mul(self)),
            Op::LeakyRelu(slope) => {
                let mask = p[0].value().map(|x| if x > 0.0 { 1.0 } else { *slope });
                one(g.mul(&Var::constant(mask)))
            }
            Op::Square => one(g.mul(&p[0]).scale(2.0)),
            Op::Sqrt => one(g.scale(0.5).div(self)),
            Op::RowNorm => {
                let cols = p[0].value().dims2().1;
                one(p[0].mul(&g.div(self).broadcast_cols(cols).reshape(p[0].shape())))
            }
        }
    }
}

/// Gradients of the scalar `output` with respect to each of `wrt`.
///
/// With `create_graph` the returned gradients are themselves differentiable.
/// Inputs that `output` does not depend on receive zero gradients.
pub fn grad(output: &Var, wrt: &[Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.value().len(), 1, "grad() needs a scalar output");

    // Parents are always created before children, so descending id order is a
    // valid reverse topological order.
    let mut order: Vec<Var> = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.0.id) {
            continue;
        }
        stack.extend(v.0.parents.iter().cloned());
        order.push(v);
    }
    order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

    with_grad_mode(create_graph, || {
        let mut grads: HashMap<u64, Var> = HashMap::new();
        grads.insert(output.0.id, Var::constant(Tensor::full(output.shape(), 1.0)));
        for node in &order {
            let Some(g) = grads.get(&node.0.id).cloned() else {
                continue;
            };
            for (parent, pg) in node.0.parents.iter().zip(node.backward_rule(&g)) {
                let Some(pg) = pg else { continue };
                let acc = match grads.remove(&parent.0.id) {
                    Some(prev) => prev.add(&pg),
                    None => pg,
                };
                grads.insert(parent.0.id, acc);
            }
        }
        wrt.iter()
            .map(|w| {
                grads
                    .get(&w.0.id)
                    .cloned()
                    .unwrap_or_else(|| Var::constant(Tensor::zeros(w.shape())))
            })
            .collect()
    })
}
