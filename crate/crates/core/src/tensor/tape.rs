use std::cell::{Ref, RefCell};
use std::ptr;

use super::{gemm, gemm_nt, gemm_tn, Axis, Tensor};
use crate::error::{Error, Result};

/// Slices whose standard deviation falls below this are degenerate.
pub(crate) const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Transpose(NodeId),
    FlipRows(NodeId),
    Reshape(NodeId),
    Standardize {
        input: NodeId,
        axis: Axis,
        // per-slice divisor actually used (1.0 where a degenerate slice was substituted)
        scale: Vec<f64>,
        substituted: Vec<bool>,
    },
    RowSoftmax {
        input: NodeId,
        tau: f64,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of a define-by-run computation.
///
/// Parents always precede children, so reverse insertion order is a valid
/// reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf. Parameters, inputs and constants are all leaves.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    fn push(&self, op: Op, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node { op, value });
        Var { tape: self, id }
    }

    /// Reverse pass from a scalar `loss`, seeded with 1.0.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !ptr::eq(loss.tape, self) {
            return Err(Error::Detached);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id.0].value.shape() != [1] {
            return Err(Error::contract(format!(
                "backward needs a scalar loss of shape [1], got {:?}",
                nodes[loss.id.0].value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = (0..=loss.id.0).map(|_| None).collect();
        grads[loss.id.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.id.0).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                if grads[id].is_none() {
                    grads[id] = Some(Tensor::zeros(node.value.shape()));
                }
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: NodeId| &nodes[id.0].value;
    let like = |t: &Tensor, data: Vec<f64>| {
        Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
    };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (p, q) = (val(*a).shape()[0], val(*a).shape()[1]);
            let r = val(*b).shape()[1];
            let da = gemm_nt(g.data(), val(*b).data(), p, r, q);
            let db = gemm_tn(val(*a).data(), g.data(), q, p, r);
            accumulate(grads, *a, like(val(*a), da));
            accumulate(grads, *b, like(val(*b), db));
        }
        Op::Affine { x, w, b } => {
            let (n, fan_in) = (val(*x).shape()[0], val(*x).shape()[1]);
            let fan_out = val(*w).shape()[1];
            let dx = gemm_nt(g.data(), val(*w).data(), n, fan_out, fan_in);
            let dw = gemm_tn(val(*x).data(), g.data(), fan_in, n, fan_out);
            let mut db = vec![0.0; fan_out];
            for row in g.data().chunks_exact(fan_out) {
                for (acc, v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            accumulate(grads, *x, like(val(*x), dx));
            accumulate(grads, *w, like(val(*w), dw));
            accumulate(grads, *b, like(val(*b), db));
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.map(|v| -v));
        }
        Op::Hadamard(a, b) => {
            let da = g.zip_map(val(*b), "hadamard", |g, y| g * y).expect("shape");
            let db = g.zip_map(val(*a), "hadamard", |g, x| g * x).expect("shape");
            accumulate(grads, *a, da);
            accumulate(grads, *b, db);
        }
        Op::Scale(a, s) => accumulate(grads, *a, g.map(|v| v * s)),
        Op::Relu(a) => {
            let d = g
                .zip_map(val(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })
                .expect("shape");
            accumulate(grads, *a, d);
        }
        Op::Abs(a) => {
            let d = g
                .zip_map(val(*a), "abs", |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .expect("shape");
            accumulate(grads, *a, d);
        }
        Op::Square(a) => {
            let d = g
                .zip_map(val(*a), "square", |g, x| 2.0 * x * g)
                .expect("shape");
            accumulate(grads, *a, d);
        }
        Op::Sum(a) => accumulate(grads, *a, Tensor::full(val(*a).shape(), g.data()[0])),
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            accumulate(grads, *a, Tensor::full(val(*a).shape(), g.data()[0] / n));
        }
        Op::Transpose(a) => accumulate(grads, *a, g.transpose().expect("2-D")),
        Op::FlipRows(a) => accumulate(grads, *a, g.flip_rows()),
        Op::Reshape(a) => accumulate(grads, *a, like(val(*a), g.data().to_vec())),
        Op::Standardize {
            input,
            axis,
            scale,
            substituted,
        } => {
            let y = &node.value;
            let (rows, cols) = (y.shape()[0], y.shape()[1]);
            let mut dx = vec![0.0; rows * cols];
            let idx = |slice: usize, k: usize| match axis {
                Axis::Batch => k * cols + slice,
                Axis::Feature => slice * cols + k,
            };
            let (slices, count) = match axis {
                Axis::Batch => (cols, rows),
                Axis::Feature => (rows, cols),
            };
            let n = count as f64;
            for s in 0..slices {
                let mut mean_g = 0.0;
                let mut mean_gy = 0.0;
                for k in 0..count {
                    let i = idx(s, k);
                    mean_g += g.data()[i];
                    mean_gy += g.data()[i] * y.data()[i];
                }
                mean_g /= n;
                mean_gy /= n;
                for k in 0..count {
                    let i = idx(s, k);
                    dx[i] = if substituted[s] {
                        g.data()[i] - mean_g
                    } else {
                        (g.data()[i] - mean_g - y.data()[i] * mean_gy) / scale[s]
                    };
                }
            }
            accumulate(grads, *input, like(y, dx));
        }
        Op::RowSoftmax { input, tau } => {
            let y = &node.value;
            let cols = y.shape()[1];
            let mut dx = vec![0.0; y.len()];
            for ((yr, gr), dr) in y
                .data()
                .chunks_exact(cols)
                .zip(g.data().chunks_exact(cols))
                .zip(dx.chunks_exact_mut(cols))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot) / tau;
                }
            }
            accumulate(grads, *input, like(y, dx));
        }
        Op::SoftmaxCrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let k = val(*logits).shape()[1];
            let n = targets.len() as f64;
            let scale = g.data()[0] / n;
            let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (i, &t) in targets.iter().enumerate() {
                dx[i * k + t] -= scale;
            }
            accumulate(grads, *logits, like(val(*logits), dx));
        }
    }
}

/// Gradients of a scalar with respect to every node it depends on.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; zero when `v` does not influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.grads.get(v.id.0) {
            Some(Some(t)) => t.clone(),
            _ => Tensor::zeros(&v.shape()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(self) -> NodeId {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> Tensor {
        self.tape.nodes.borrow()[self.id.0].value.clone()
    }

    /// Borrow the value without copying. Do not record new ops while it is held.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id.0].value)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id.0].value.shape().to_vec()
    }

    /// The single value of a `[1]`-shaped node.
    pub fn item(self) -> f64 {
        self.tape.nodes.borrow()[self.id.0].value.data()[0]
    }

    fn check_tape(self, other: Var<'t>) -> Result<()> {
        if ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Detached)
        }
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let value = f(&self.tape.nodes.borrow()[self.id.0].value)?;
        Ok(self.tape.push(op, value))
    }

    fn binary(
        self,
        rhs: Var<'t>,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        self.check_tape(rhs)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id.0].value, &nodes[rhs.id.0].value)?
        };
        Ok(self.tape.push(op, value))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::MatMul(self.id, rhs.id), |a, b| a.matmul(b))
    }

    /// `x·W + b` with `x: [N×in]`, `W: [in×out]`, `b: [out]`, the bias added to every row.
    pub fn affine(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(w)?;
        self.check_tape(b)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, wt, bt) = (
                &nodes[self.id.0].value,
                &nodes[w.id.0].value,
                &nodes[b.id.0].value,
            );
            let (n, fan_in) = x.dims2("affine")?;
            let (w_in, fan_out) = wt.dims2("affine")?;
            if w_in != fan_in {
                return Err(Error::Dimension {
                    op: "affine",
                    lhs: x.shape().to_vec(),
                    rhs: wt.shape().to_vec(),
                });
            }
            if bt.shape() != [fan_out] {
                return Err(Error::Dimension {
                    op: "affine bias",
                    lhs: vec![fan_out],
                    rhs: bt.shape().to_vec(),
                });
            }
            let mut out = gemm(x.data(), wt.data(), n, fan_in, fan_out);
            for row in out.chunks_exact_mut(fan_out) {
                for (o, bias) in row.iter_mut().zip(bt.data()) {
                    *o += bias;
                }
            }
            Tensor::new(vec![n, fan_out], out)?
        };
        Ok(self.tape.push(
            Op::Affine {
                x: self.id,
                w: w.id,
                b: b.id,
            },
            value,
        ))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Add(self.id, rhs.id), |a, b| {
            a.zip_map(b, "add", |x, y| x + y)
        })
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Sub(self.id, rhs.id), |a, b| {
            a.zip_map(b, "sub", |x, y| x - y)
        })
    }

    pub fn hadamard(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Hadamard(self.id, rhs.id), |a, b| {
            a.zip_map(b, "hadamard", |x, y| x * y)
        })
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |a| Ok(a.map(|v| v * s)))
            .expect("infallible")
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |a| {
            Ok(a.map(|v| if v > 0.0 { v } else { 0.0 }))
        })
        .expect("infallible")
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), |a| Ok(a.map(f64::abs)))
            .expect("infallible")
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |a| Ok(a.map(|v| v * v)))
            .expect("infallible")
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| {
            Ok(Tensor::scalar(a.data().iter().sum()))
        })
        .expect("infallible")
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |a| {
            Ok(Tensor::scalar(
                a.data().iter().sum::<f64>() / a.len() as f64,
            ))
        })
        .expect("infallible")
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.unary(Op::Transpose(self.id), Tensor::transpose)
    }

    pub fn flip_rows(self) -> Var<'t> {
        self.unary(Op::FlipRows(self.id), |a| Ok(a.flip_rows()))
            .expect("infallible")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Reshape(self.id), |a| a.reshape(shape))
    }

    pub fn flatten_rows(self) -> Var<'t> {
        self.unary(Op::Reshape(self.id), |a| Ok(a.flatten_rows()))
            .expect("infallible")
    }

    /// Zero-mean, unit population-std slices along `axis` of a 2-D value.
    ///
    /// A slice with std below 1e-12 is an error unless `allow_degenerate`,
    /// in which case its divisor is taken as 1.
    pub fn standardize(self, axis: Axis, allow_degenerate: bool) -> Result<Var<'t>> {
        let (value, scale, substituted) = {
            let nodes = self.tape.nodes.borrow();
            standardize_forward(&nodes[self.id.0].value, axis, allow_degenerate)?
        };
        Ok(self.tape.push(
            Op::Standardize {
                input: self.id,
                axis,
                scale,
                substituted,
            },
            value,
        ))
    }

    /// Row-wise `softmax(row / tau)`.
    pub fn row_softmax(self, tau: f64) -> Result<Var<'t>> {
        if !(tau > 0.0) {
            return Err(Error::contract(format!(
                "softmax temperature must be > 0, got {tau}"
            )));
        }
        self.unary(
            Op::RowSoftmax {
                input: self.id,
                tau,
            },
            |a| {
                let (_, cols) = a.dims2("row_softmax")?;
                let mut out = Vec::with_capacity(a.len());
                for row in a.data().chunks_exact(cols) {
                    out.extend(softmax_row(row, tau));
                }
                let t = Tensor::new(a.shape().to_vec(), out)?;
                if !t.is_finite() {
                    return Err(Error::numeric("row_softmax"));
                }
                Ok(t)
            },
        )
    }

    /// Mean softmax cross-entropy of `[N×K]` logits against class targets.
    pub fn softmax_cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = {
            let nodes = self.tape.nodes.borrow();
            let logits = &nodes[self.id.0].value;
            let (n, k) = logits.dims2("softmax_cross_entropy")?;
            if targets.len() != n {
                return Err(Error::Dimension {
                    op: "softmax_cross_entropy",
                    lhs: logits.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            if let Some(&t) = targets.iter().find(|&&t| t >= k) {
                return Err(Error::contract(format!(
                    "target class {t} out of range for {k} logits"
                )));
            }
            let mut probs = Vec::with_capacity(n * k);
            let mut loss = 0.0;
            for (row, &t) in logits.data().chunks_exact(k).zip(targets) {
                let p = softmax_row(row, 1.0);
                loss -= p[t].max(f64::MIN_POSITIVE).ln();
                probs.extend(p);
            }
            (loss / n as f64, probs)
        };
        if !loss.is_finite() {
            return Err(Error::numeric("cross_entropy"));
        }
        Ok(self.tape.push(
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }
}

fn softmax_row(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn standardize_forward(
    x: &Tensor,
    axis: Axis,
    allow_degenerate: bool,
) -> Result<(Tensor, Vec<f64>, Vec<bool>)> {
    let (rows, cols) = x.dims2("standardize")?;
    let (slices, count) = match axis {
        Axis::Batch => (cols, rows),
        Axis::Feature => (rows, cols),
    };
    if count < 2 {
        return Err(Error::contract(format!(
            "standardize along {axis:?} needs at least 2 entries per slice, got {count}"
        )));
    }
    let idx = |slice: usize, k: usize| match axis {
        Axis::Batch => k * cols + slice,
        Axis::Feature => slice * cols + k,
    };
    let n = count as f64;
    let data = x.data();
    let mut out = vec![0.0; data.len()];
    let mut scale = vec![1.0; slices];
    let mut substituted = vec![false; slices];
    for s in 0..slices {
        let mean = (0..count).map(|k| data[idx(s, k)]).sum::<f64>() / n;
        let var = (0..count)
            .map(|k| (data[idx(s, k)] - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if !std.is_finite() {
            return Err(Error::numeric("standardize"));
        }
        if std < DEGENERATE_STD {
            if !allow_degenerate {
                return Err(Error::Degenerate {
                    what: match axis {
                        Axis::Batch => "feature column",
                        Axis::Feature => "sample row",
                    },
                    index: s,
                });
            }
            substituted[s] = true;
        } else {
            scale[s] = std;
        }
        for k in 0..count {
            let i = idx(s, k);
            out[i] = (data[i] - mean) / scale[s];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, scale, substituted))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let loss = x.hadamard(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn flip_sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 4.0, 7.0, -1.0]).unwrap());
        let g = tape.backward(x.flip_rows().sum()).unwrap();
        assert_eq!(g.wrt(x), Tensor::ones(&[3, 2]));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::zeros(&[2, 2]));
        let g = tape.backward(x.square()).unwrap();
        assert_eq!(g.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_contracts() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2, 2]));
        assert!(matches!(tape.backward(x.relu()), Err(Error::Contract(_))));

        let other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(y), Err(Error::Detached)));
        assert!(matches!(
            x.add(other.leaf(Tensor::ones(&[2, 2]))),
            Err(Error::Detached)
        ));
    }

    #[test]
    fn relu_and_mean_values() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        let g = tape.backward(x.relu().sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 1.0]);
        assert_eq!(tape.leaf(Tensor::ones(&[4, 4])).mean().item(), 1.0);
    }

    #[test]
    fn binary_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[2, 3]));
        let b = tape.leaf(Tensor::ones(&[3, 2]));
        assert!(matches!(a.add(b), Err(Error::Dimension { .. })));
        assert!(matches!(a.hadamard(b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx sum(x ⊙ x + x) = 2x + 1
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.5, -3.0]).unwrap());
        let y = x.hadamard(x).unwrap().add(x).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[4.0, -5.0]);
    }

    #[test]
    fn softmax_temperature_contract() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2, 2]));
        assert!(x.row_softmax(0.0).is_err());
        assert!(x.row_softmax(-1.0).is_err());
    }

    #[test]
    fn cross_entropy_gradient_at_uniform_softmax() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 4]));
        let loss = logits.softmax_cross_entropy(&[1, 3]).unwrap();
        assert!((loss.item() - 4f64.ln()).abs() < 1e-15);
        let g = tape.backward(loss).unwrap().wrt(logits);
        let mut expect = vec![0.25 / 2.0; 8];
        expect[1] = (0.25 - 1.0) / 2.0;
        expect[4 + 3] = (0.25 - 1.0) / 2.0;
        assert_eq!(g.data(), expect.as_slice());
    }
}
