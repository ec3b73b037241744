use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{self, gemm_nt, gemm_tn};
use super::DenseArray;
use crate::attention::fused;
use crate::error::{Error, Result};

/// Negative-side slope of [`Var::leaky_relu`].
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

type Id = usize;

enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    MatMul(Id, Id),
    Transpose(Id),
    Reshape(Id),
    Neg(Id),
    Scale(Id, f64),
    AddConst(Id),
    Exp(Id),
    Cos(Id),
    Sin(Id),
    /// `[cos x | sin x]` side by side.
    CosSin(Id),
    Tanh(Id),
    LeakyRelu(Id),
    Gelu(Id),
    Square(Id),
    Clamp(Id, f64, f64),
    Sum {
        src: Id,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Mean {
        src: Id,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Max {
        src: Id,
        arg: Vec<usize>,
    },
    SumAll(Id),
    MeanAll(Id),
    Softmax {
        src: Id,
        outer: usize,
        len: usize,
        inner: usize,
    },
    AddRow(Id, Id),
    MulRow(Id, Id),
    AddCol(Id, Id),
    DivCol(Id, Id),
    ConcatCols(Vec<Id>),
    ConcatRows(Vec<Id>),
    SliceCols {
        src: Id,
        start: usize,
    },
    SliceRows {
        src: Id,
        start: usize,
    },
    GatherRows {
        src: Id,
        index: Vec<usize>,
    },
    PermuteCols {
        src: Id,
        perm: Vec<usize>,
    },
    Fwht(Id),
    LayerNorm {
        src: Id,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        src: Id,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Id,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    LinearAttention {
        q: Id,
        k: Id,
        v: Id,
        seg: usize,
        causal: bool,
        den: Vec<f64>,
    },
    SoftmaxAttention {
        q: Id,
        k: Id,
        v: Id,
        seg: usize,
        scale: f64,
    },
}

struct Node {
    value: Rc<DenseArray>,
    op: Op,
}

/// Ordered record of executed operations. One tape serves one forward pass
/// and at most one backward sweep; call [`Tape::reset`] (or make a new
/// tape) before the next forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    swept: Cell<bool>,
    near_zero: Cell<usize>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Id,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a leaf: a parameter, an input or a constant.
    pub fn leaf(&self, value: DenseArray) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(DenseArray::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears every recorded operation so the tape can serve a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.swept.set(false);
        self.near_zero.set(0);
    }

    /// Number of linear-attention denominators that landed within three
    /// orders of magnitude of their stabilizer.
    pub fn near_zero_denominators(&self) -> usize {
        self.near_zero.get()
    }

    fn push(&self, value: DenseArray, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: Id) -> Rc<DenseArray> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`. Each recorded operation is
    /// visited once, newest first. A second sweep over the same tape is a
    /// contract error.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to another tape".into()));
        }
        if self.swept.get() {
            return Err(Error::Contract(
                "tape already swept; run a fresh forward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        self.swept.set(true);

        let mut grads: Vec<Option<DenseArray>> = vec![None; nodes.len()];
        grads[loss.id] = Some(DenseArray::full(loss_value.shape().to_vec(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one reverse sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, `None` if `var` does not reach the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&DenseArray> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of the loss w.r.t. `var`, zeros if `var` does not reach the loss.
    pub fn wrt(&self, var: Var<'_>) -> DenseArray {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| DenseArray::zeros(var.value().shape().to_vec()))
    }
}

fn accumulate(grads: &mut [Option<DenseArray>], id: Id, g: DenseArray) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn like(shape: &[usize], data: Vec<f64>) -> DenseArray {
    DenseArray {
        shape: shape.to_vec(),
        data,
    }
}

fn zip_map(a: &DenseArray, b: &DenseArray, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
}

/// Gradient for one side of a binary op, reduced to a scalar when that side
/// was broadcast.
fn reduce_to(shape: &[usize], full: Vec<f64>) -> DenseArray {
    if shape.is_empty() && full.len() != 1 {
        DenseArray::scalar(full.iter().sum())
    } else {
        like(shape, full)
    }
}

fn broadcast_get(a: &DenseArray, i: usize) -> f64 {
    if a.data.len() == 1 {
        a.data[0]
    } else {
        a.data[i]
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn backprop(nodes: &[Node], node: &Node, g: &DenseArray, grads: &mut [Option<DenseArray>]) {
    let val = |id: Id| -> &DenseArray { &nodes[id].value };
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -1.0
            } else {
                1.0
            };
            let (av, bv) = (val(*a), val(*b));
            accumulate(grads, *a, reduce_to(av.shape(), g.data.clone()));
            let gb = g.data.iter().map(|x| sign * x).collect();
            accumulate(grads, *b, reduce_to(bv.shape(), gb));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = (0..g.len())
                .map(|i| g.data[i] * broadcast_get(bv, i))
                .collect();
            let gb = (0..g.len())
                .map(|i| g.data[i] * broadcast_get(av, i))
                .collect();
            accumulate(grads, *a, reduce_to(av.shape(), ga));
            accumulate(grads, *b, reduce_to(bv.shape(), gb));
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = (0..g.len())
                .map(|i| g.data[i] / broadcast_get(bv, i))
                .collect();
            let gb = (0..g.len())
                .map(|i| {
                    let d = broadcast_get(bv, i);
                    -g.data[i] * broadcast_get(av, i) / (d * d)
                })
                .collect();
            accumulate(grads, *a, reduce_to(av.shape(), ga));
            accumulate(grads, *b, reduce_to(bv.shape(), gb));
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape[0], av.shape[1]);
            let n = bv.shape[1];
            let mut ga = vec![0.0; m * k];
            gemm_nt(m, n, k, &g.data, &bv.data, &mut ga);
            let mut gb = vec![0.0; k * n];
            gemm_tn(k, m, n, &av.data, &g.data, &mut gb);
            accumulate(grads, *a, like(&av.shape, ga));
            accumulate(grads, *b, like(&bv.shape, gb));
        }
        Op::Transpose(a) => {
            accumulate(grads, *a, g.transpose().expect("rank checked on record"));
        }
        Op::Reshape(a) => {
            accumulate(grads, *a, like(val(*a).shape(), g.data.clone()));
        }
        Op::Neg(a) => accumulate(grads, *a, g.map(|x| -x)),
        Op::Scale(a, c) => accumulate(grads, *a, g.map(|x| c * x)),
        Op::AddConst(a) => accumulate(grads, *a, g.clone()),
        Op::Exp(a) => accumulate(grads, *a, like(&g.shape, zip_map(g, y, |g, y| g * y))),
        Op::Cos(a) => {
            let x = val(*a);
            accumulate(
                grads,
                *a,
                like(&g.shape, zip_map(g, x, |g, x| -g * x.sin())),
            );
        }
        Op::Sin(a) => {
            let x = val(*a);
            accumulate(grads, *a, like(&g.shape, zip_map(g, x, |g, x| g * x.cos())));
        }
        Op::CosSin(a) => {
            // d cos = −sin and d sin = cos, both read off the output.
            let x = val(*a);
            let (rows, c) = (x.shape[0], x.shape[1]);
            let mut d = vec![0.0; rows * c];
            for r in 0..rows {
                let (gy, yy) = (
                    &g.data[r * 2 * c..(r + 1) * 2 * c],
                    &y.data[r * 2 * c..(r + 1) * 2 * c],
                );
                for j in 0..c {
                    d[r * c + j] = gy[c + j] * yy[j] - gy[j] * yy[c + j];
                }
            }
            accumulate(grads, *a, like(&x.shape, d));
        }
        Op::Tanh(a) => {
            accumulate(
                grads,
                *a,
                like(&g.shape, zip_map(g, y, |g, y| g * (1.0 - y * y))),
            );
        }
        Op::LeakyRelu(a) => {
            let x = val(*a);
            let d = zip_map(g, x, |g, x| if x > 0.0 { g } else { g * LEAKY_RELU_SLOPE });
            accumulate(grads, *a, like(&g.shape, d));
        }
        Op::Gelu(a) => {
            let x = val(*a);
            accumulate(
                grads,
                *a,
                like(&g.shape, zip_map(g, x, |g, x| g * gelu_grad(x))),
            );
        }
        Op::Square(a) => {
            let x = val(*a);
            accumulate(grads, *a, like(&g.shape, zip_map(g, x, |g, x| 2.0 * g * x)));
        }
        Op::Clamp(a, lo, hi) => {
            let x = val(*a);
            let d = zip_map(g, x, |g, x| if x >= *lo && x <= *hi { g } else { 0.0 });
            accumulate(grads, *a, like(&g.shape, d));
        }
        Op::Sum {
            src,
            outer,
            len,
            inner,
        }
        | Op::Mean {
            src,
            outer,
            len,
            inner,
        } => {
            let scale = if matches!(node.op, Op::Mean { .. }) {
                1.0 / *len as f64
            } else {
                1.0
            };
            let mut d = vec![0.0; outer * len * inner];
            for o in 0..*outer {
                for l in 0..*len {
                    for i in 0..*inner {
                        d[(o * len + l) * inner + i] = scale * g.data[o * inner + i];
                    }
                }
            }
            accumulate(grads, *src, like(val(*src).shape(), d));
        }
        Op::Max { src, arg } => {
            let mut d = vec![0.0; val(*src).len()];
            for (gi, &ai) in g.data.iter().zip(arg) {
                d[ai] += gi;
            }
            accumulate(grads, *src, like(val(*src).shape(), d));
        }
        Op::SumAll(a) | Op::MeanAll(a) => {
            let n = val(*a).len();
            let s = if matches!(node.op, Op::MeanAll(_)) {
                g.data[0] / n as f64
            } else {
                g.data[0]
            };
            accumulate(grads, *a, DenseArray::full(val(*a).shape().to_vec(), s));
        }
        Op::Softmax {
            src,
            outer,
            len,
            inner,
        } => {
            let mut d = vec![0.0; y.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let s: f64 = (0..*len).map(|l| g.data[idx(l)] * y.data[idx(l)]).sum();
                    for l in 0..*len {
                        d[idx(l)] = y.data[idx(l)] * (g.data[idx(l)] - s);
                    }
                }
            }
            accumulate(grads, *src, like(&y.shape, d));
        }
        Op::AddRow(a, r) => {
            let cols = y.cols();
            let mut dr = vec![0.0; cols];
            for row in g.data.chunks(cols) {
                kernels::axpy(1.0, row, &mut dr);
            }
            accumulate(grads, *a, g.clone());
            accumulate(grads, *r, like(val(*r).shape(), dr));
        }
        Op::MulRow(a, r) => {
            let (av, rv) = (val(*a), val(*r));
            let cols = y.cols();
            let mut da = vec![0.0; g.len()];
            let mut dr = vec![0.0; cols];
            for (i, (grow, arow)) in g.data.chunks(cols).zip(av.data.chunks(cols)).enumerate() {
                for j in 0..cols {
                    da[i * cols + j] = grow[j] * rv.data[j];
                    dr[j] += grow[j] * arow[j];
                }
            }
            accumulate(grads, *a, like(&av.shape, da));
            accumulate(grads, *r, like(&rv.shape, dr));
        }
        Op::AddCol(a, c) => {
            let cols = y.cols();
            let dc = g.data.chunks(cols).map(|r| r.iter().sum()).collect();
            accumulate(grads, *a, g.clone());
            accumulate(grads, *c, like(val(*c).shape(), dc));
        }
        Op::DivCol(a, c) => {
            let (av, cv) = (val(*a), val(*c));
            let cols = y.cols();
            let mut da = vec![0.0; g.len()];
            let mut dc = vec![0.0; cv.len()];
            for i in 0..cv.len() {
                let ci = cv.data[i];
                let mut acc = 0.0;
                for j in 0..cols {
                    let k = i * cols + j;
                    da[k] = g.data[k] / ci;
                    acc += g.data[k] * av.data[k];
                }
                dc[i] = -acc / (ci * ci);
            }
            accumulate(grads, *a, like(&av.shape, da));
            accumulate(grads, *c, like(&cv.shape, dc));
        }
        Op::ConcatCols(parts) => {
            let rows = y.rows();
            let total = y.cols();
            let mut offset = 0;
            for &p in parts {
                let pc = val(p).cols();
                let mut d = vec![0.0; rows * pc];
                for r in 0..rows {
                    d[r * pc..(r + 1) * pc]
                        .copy_from_slice(&g.data[r * total + offset..r * total + offset + pc]);
                }
                accumulate(grads, p, like(val(p).shape(), d));
                offset += pc;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                accumulate(
                    grads,
                    p,
                    like(val(p).shape(), g.data[offset..offset + n].to_vec()),
                );
                offset += n;
            }
        }
        Op::SliceCols { src, start } => {
            let sv = val(*src);
            let (rows, sc) = (sv.rows(), sv.cols());
            let w = y.cols();
            let mut d = vec![0.0; sv.len()];
            for r in 0..rows {
                d[r * sc + start..r * sc + start + w].copy_from_slice(&g.data[r * w..(r + 1) * w]);
            }
            accumulate(grads, *src, like(&sv.shape, d));
        }
        Op::SliceRows { src, start } => {
            let sv = val(*src);
            let c = sv.cols();
            let mut d = vec![0.0; sv.len()];
            d[start * c..start * c + g.len()].copy_from_slice(&g.data);
            accumulate(grads, *src, like(&sv.shape, d));
        }
        Op::GatherRows { src, index } => {
            let sv = val(*src);
            let c = sv.cols();
            let mut d = vec![0.0; sv.len()];
            for (r, &i) in index.iter().enumerate() {
                kernels::axpy(1.0, &g.data[r * c..(r + 1) * c], &mut d[i * c..(i + 1) * c]);
            }
            accumulate(grads, *src, like(&sv.shape, d));
        }
        Op::PermuteCols { src, perm } => {
            let c = perm.len();
            let mut d = vec![0.0; g.len()];
            for (grow, drow) in g.data.chunks(c).zip(d.chunks_mut(c)) {
                for (i, &p) in perm.iter().enumerate() {
                    drow[p] += grow[i];
                }
            }
            accumulate(grads, *src, like(&g.shape, d));
        }
        Op::Fwht(a) => {
            let mut d = g.data.clone();
            for row in d.chunks_mut(y.cols()) {
                kernels::fwht(row);
            }
            accumulate(grads, *a, like(&g.shape, d));
        }
        Op::LayerNorm { src, xhat, inv_std } => {
            let cols = y.cols();
            let mut d = vec![0.0; g.len()];
            for (r, &is) in inv_std.iter().enumerate() {
                let gr = &g.data[r * cols..(r + 1) * cols];
                let xr = &xhat[r * cols..(r + 1) * cols];
                let mg = gr.iter().sum::<f64>() / cols as f64;
                let mgx = kernels::dot(gr, xr) / cols as f64;
                for j in 0..cols {
                    d[r * cols + j] = is * (gr[j] - mg - xr[j] * mgx);
                }
            }
            accumulate(grads, *src, like(&g.shape, d));
        }
        Op::BatchNorm { src, xhat, inv_std } => {
            let (rows, cols) = (y.rows(), y.cols());
            let mut d = vec![0.0; g.len()];
            for (j, &is) in inv_std.iter().enumerate() {
                let (mut mg, mut mgx) = (0.0, 0.0);
                for r in 0..rows {
                    mg += g.data[r * cols + j];
                    mgx += g.data[r * cols + j] * xhat[r * cols + j];
                }
                mg /= rows as f64;
                mgx /= rows as f64;
                for r in 0..rows {
                    let k = r * cols + j;
                    d[k] = is * (g.data[k] - mg - xhat[k] * mgx);
                }
            }
            accumulate(grads, *src, like(&g.shape, d));
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let c = val(*logits).cols();
            let n = labels.len() as f64;
            let s = g.data[0] / n;
            let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
            for (r, &l) in labels.iter().enumerate() {
                d[r * c + l] -= s;
            }
            accumulate(grads, *logits, like(val(*logits).shape(), d));
        }
        Op::LinearAttention {
            q,
            k,
            v,
            seg,
            causal,
            den,
        } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (dq, dk, dv) = if *causal {
                fused::causal_linear_backward(qv, kv, vv, y, den, &g.data, *seg)
            } else {
                fused::linear_backward(qv, kv, vv, y, den, &g.data, *seg)
            };
            accumulate(grads, *q, like(&qv.shape, dq));
            accumulate(grads, *k, like(&kv.shape, dk));
            accumulate(grads, *v, like(&vv.shape, dv));
        }
        Op::SoftmaxAttention {
            q,
            k,
            v,
            seg,
            scale,
        } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (dq, dk, dv) = fused::softmax_backward(qv, kv, vv, &g.data, *seg, *scale);
            accumulate(grads, *q, like(&qv.shape, dq));
            accumulate(grads, *k, like(&kv.shape, dk));
            accumulate(grads, *v, like(&vv.shape, dv));
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!(
            "axis {axis} out of range for {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<DenseArray> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract(
                "operands recorded on different tapes".into(),
            ))
        }
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push(v, op)
    }

    fn binary(&self, other: Var<'t>, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let shape = if a.shape == b.shape || b.is_scalar() {
            a.shape.clone()
        } else if a.is_scalar() {
            b.shape.clone()
        } else {
            return Err(Error::dim(format!(
                "cannot broadcast {:?} with {:?}",
                a.shape, b.shape
            )));
        };
        let n = shape.iter().product::<usize>();
        let data = (0..n)
            .map(|i| f(broadcast_get(&a, i), broadcast_get(&b, i)))
            .collect();
        Ok(self.tape.push(like(&shape, data), op))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().matmul(&other.value())?;
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        Ok(self.tape.push(v, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.id)))
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(|x| -x, Op::Neg(self.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, Op::Scale(self.id, c))
    }

    pub fn add_const(&self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, Op::AddConst(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn cos(&self) -> Var<'t> {
        self.unary(f64::cos, Op::Cos(self.id))
    }

    pub fn sin(&self) -> Var<'t> {
        self.unary(f64::sin, Op::Sin(self.id))
    }

    /// `[cos x | sin x]` for a matrix `x`, with one trigonometric
    /// evaluation per entry.
    pub fn cos_sin(&self) -> Result<Var<'t>> {
        let (rows, c) = self.check_matrix()?;
        let x = self.value();
        let mut out = vec![0.0; rows * 2 * c];
        for r in 0..rows {
            for j in 0..c {
                let (s, co) = x.data[r * c + j].sin_cos();
                out[r * 2 * c + j] = co;
                out[r * 2 * c + c + j] = s;
            }
        }
        Ok(self
            .tape
            .push(like(&[rows, 2 * c], out), Op::CosSin(self.id)))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn leaky_relu(&self) -> Var<'t> {
        self.unary(
            |x| if x > 0.0 { x } else { LEAKY_RELU_SLOPE * x },
            Op::LeakyRelu(self.id),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(gelu, Op::Gelu(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(move |x| x.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, len, inner) = split_axis(&x.shape, axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x.data[(o * len + l) * inner + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut shape = x.shape.clone();
        shape.remove(axis);
        let src = self.id;
        let op = if mean {
            Op::Mean {
                src,
                outer,
                len,
                inner,
            }
        } else {
            Op::Sum {
                src,
                outer,
                len,
                inner,
            }
        };
        Ok(self.tape.push(like(&shape, out), op))
    }

    pub fn max_axis(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, len, inner) = split_axis(&x.shape, axis)?;
        if len == 0 {
            return Err(Error::dim("max over an empty axis"));
        }
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let k = (o * len + l) * inner + i;
                    if x.data[k] > out[o * inner + i] {
                        out[o * inner + i] = x.data[k];
                        arg[o * inner + i] = k;
                    }
                }
            }
        }
        let mut shape = x.shape.clone();
        shape.remove(axis);
        Ok(self
            .tape
            .push(like(&shape, out), Op::Max { src: self.id, arg }))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(DenseArray::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let s = x.sum() / x.len() as f64;
        self.tape.push(DenseArray::scalar(s), Op::MeanAll(self.id))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, len, inner) = split_axis(&x.shape, axis)?;
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len)
                    .map(|l| x.data[idx(l)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (x.data[idx(l)] - m).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[idx(l)] /= z;
                }
            }
        }
        Ok(self.tape.push(
            like(&x.shape, out),
            Op::Softmax {
                src: self.id,
                outer,
                len,
                inner,
            },
        ))
    }

    fn check_matrix(&self) -> Result<(usize, usize)> {
        self.value().dims2()
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_op(row, false)
    }

    /// Multiplies every row element-wise by a length-`cols` vector.
    pub fn mul_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_op(row, true)
    }

    fn row_op(&self, row: Var<'t>, mul: bool) -> Result<Var<'t>> {
        self.same_tape(&row)?;
        let (_, cols) = self.check_matrix()?;
        let (x, r) = (self.value(), row.value());
        if r.len() != cols {
            return Err(Error::dim(format!(
                "row vector of length {} against {} columns",
                r.len(),
                cols
            )));
        }
        let mut out = x.data.clone();
        for chunk in out.chunks_mut(cols) {
            for (o, rv) in chunk.iter_mut().zip(&r.data) {
                if mul {
                    *o *= rv;
                } else {
                    *o += rv;
                }
            }
        }
        let op = if mul {
            Op::MulRow(self.id, row.id)
        } else {
            Op::AddRow(self.id, row.id)
        };
        Ok(self.tape.push(like(&x.shape, out), op))
    }

    /// Adds entry `i` of a length-`rows` vector to every element of row `i`.
    pub fn add_col(&self, col: Var<'t>) -> Result<Var<'t>> {
        self.col_op(col, false)
    }

    /// Divides row `i` by entry `i` of a length-`rows` vector.
    pub fn div_col(&self, col: Var<'t>) -> Result<Var<'t>> {
        self.col_op(col, true)
    }

    fn col_op(&self, col: Var<'t>, div: bool) -> Result<Var<'t>> {
        self.same_tape(&col)?;
        let (rows, cols) = self.check_matrix()?;
        let (x, c) = (self.value(), col.value());
        if c.len() != rows {
            return Err(Error::dim(format!(
                "column vector of length {} against {} rows",
                c.len(),
                rows
            )));
        }
        let mut out = x.data.clone();
        for (chunk, cv) in out.chunks_mut(cols).zip(&c.data) {
            for o in chunk {
                if div {
                    *o /= cv;
                } else {
                    *o += cv;
                }
            }
        }
        let op = if div {
            Op::DivCol(self.id, col.id)
        } else {
            Op::AddCol(self.id, col.id)
        };
        Ok(self.tape.push(like(&x.shape, out), op))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of nothing"))?;
        let rows = first.check_matrix()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            first.same_tape(p)?;
            let (r, c) = p.check_matrix()?;
            if r != rows {
                return Err(Error::dim(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = p.value();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&v.data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first
            .tape
            .push(like(&[rows, total], out), Op::ConcatCols(ids)))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of nothing"))?;
        let cols = first.check_matrix()?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            first.same_tape(p)?;
            let (r, c) = p.check_matrix()?;
            if c != cols {
                return Err(Error::dim(format!("concat_rows: {c} cols vs {cols}")));
            }
            out.extend_from_slice(&p.value().data);
            rows += r;
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first
            .tape
            .push(like(&[rows, cols], out), Op::ConcatRows(ids)))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (rows, cols) = self.check_matrix()?;
        if start > end || end > cols {
            return Err(Error::dim(format!("column slice {start}..{end} of {cols}")));
        }
        let x = self.value();
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&x.data[r * cols + start..r * cols + end]);
        }
        Ok(self.tape.push(
            like(&[rows, w], out),
            Op::SliceCols {
                src: self.id,
                start,
            },
        ))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (rows, cols) = self.check_matrix()?;
        if start > end || end > rows {
            return Err(Error::dim(format!("row slice {start}..{end} of {rows}")));
        }
        let out = self.value().data[start * cols..end * cols].to_vec();
        Ok(self.tape.push(
            like(&[end - start, cols], out),
            Op::SliceRows {
                src: self.id,
                start,
            },
        ))
    }

    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        let (rows, cols) = self.check_matrix()?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(format!("row index {bad} out of {rows}")));
        }
        let x = self.value();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(&x.data[i * cols..(i + 1) * cols]);
        }
        Ok(self.tape.push(
            like(&[index.len(), cols], out),
            Op::GatherRows {
                src: self.id,
                index: index.to_vec(),
            },
        ))
    }

    /// `out[:, i] = self[:, perm[i]]`; `perm` must be a bijection on the columns.
    pub fn permute_cols(&self, perm: &[usize]) -> Result<Var<'t>> {
        let (_, cols) = self.check_matrix()?;
        let mut seen = vec![false; cols];
        if perm.len() != cols
            || perm
                .iter()
                .any(|&p| p >= cols || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim("permutation is not a bijection on the columns"));
        }
        let x = self.value();
        let mut out = vec![0.0; x.len()];
        for (orow, xrow) in out.chunks_mut(cols).zip(x.data.chunks(cols)) {
            for (o, &p) in orow.iter_mut().zip(perm) {
                *o = xrow[p];
            }
        }
        Ok(self.tape.push(
            like(&x.shape, out),
            Op::PermuteCols {
                src: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Unnormalized Walsh–Hadamard transform of every row.
    pub fn fwht_rows(&self) -> Result<Var<'t>> {
        let (_, cols) = self.check_matrix()?;
        if !cols.is_power_of_two() {
            return Err(Error::dim(format!(
                "Hadamard width {cols} is not a power of two"
            )));
        }
        let mut out = self.value().data.clone();
        for row in out.chunks_mut(cols) {
            kernels::fwht(row);
        }
        Ok(self.tape.push(like(&self.shape(), out), Op::Fwht(self.id)))
    }

    /// Normalizes every row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t>> {
        let (rows, cols) = self.check_matrix()?;
        let x = self.value();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                xhat[r * cols + j] = (row[j] - mean) * is;
            }
        }
        let v = like(&x.shape, xhat.clone());
        Ok(self.tape.push(
            v,
            Op::LayerNorm {
                src: self.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// Normalizes every column with the batch statistics over the rows.
    pub fn batch_norm(&self, eps: f64) -> Result<Var<'t>> {
        let (rows, cols) = self.check_matrix()?;
        let x = self.value();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; cols];
        for j in 0..cols {
            let mean = (0..rows).map(|r| x.data[r * cols + j]).sum::<f64>() / rows as f64;
            let var = (0..rows)
                .map(|r| (x.data[r * cols + j] - mean).powi(2))
                .sum::<f64>()
                / rows as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[j] = is;
            for r in 0..rows {
                xhat[r * cols + j] = (x.data[r * cols + j] - mean) * is;
            }
        }
        let v = like(&x.shape, xhat.clone());
        Ok(self.tape.push(
            v,
            Op::BatchNorm {
                src: self.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let (rows, cols) = self.check_matrix()?;
        if labels.len() != rows {
            return Err(Error::dim(format!(
                "{} labels for {rows} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::dim(format!("label {bad} out of {cols} classes")));
        }
        let x = self.value();
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &x.data[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..cols {
                probs[r * cols + j] = (row[j] - m).exp() / z;
            }
            loss += z.ln() + m - row[label];
        }
        loss /= rows as f64;
        Ok(self.tape.push(
            DenseArray::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Kernelized attention from precomputed feature rows, evaluated
    /// independently on consecutive segments of `seg` rows. `self` holds the
    /// query features, `keys` the key features.
    pub fn linear_attention(
        &self,
        keys: Var<'t>,
        values: Var<'t>,
        seg: usize,
        causal: bool,
        eps: f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&keys)?;
        self.same_tape(&values)?;
        let (q, k, v) = (self.value(), keys.value(), values.value());
        fused::check_segments(&q, &k, &v, seg)?;
        let out = if causal {
            fused::causal_linear_forward(&q, &k, &v, seg, eps)
        } else {
            fused::linear_forward(&q, &k, &v, seg, eps)
        };
        let tape = self.tape;
        tape.near_zero.set(tape.near_zero.get() + out.near_zero);
        Ok(tape.push(
            out.values,
            Op::LinearAttention {
                q: self.id,
                k: keys.id,
                v: values.id,
                seg,
                causal,
                den: out.denominators,
            },
        ))
    }

    /// Scaled dot-product softmax attention on consecutive segments of `seg` rows.
    pub fn softmax_attention(
        &self,
        keys: Var<'t>,
        values: Var<'t>,
        seg: usize,
        scale: f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&keys)?;
        self.same_tape(&values)?;
        let (q, k, v) = (self.value(), keys.value(), values.value());
        fused::check_segments(&q, &k, &v, seg)?;
        let out = fused::softmax_forward(&q, &k, &v, seg, scale);
        Ok(self.tape.push(
            out,
            Op::SoftmaxAttention {
                q: self.id,
                k: keys.id,
                v: values.id,
                seg,
                scale,
            },
        ))
    }
}
