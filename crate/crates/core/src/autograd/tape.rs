//! Recording engine for reverse-mode differentiation.
//!
//! Every [`Ops`] call appends a node holding its value and the ids of its
//! inputs. Nodes that do not depend on a differentiated parameter are marked
//! as not requiring a gradient and are skipped entirely by [`Tape::backward`].

use std::collections::BTreeMap;

use super::ops::{
    add_col_bias_value, concat_cols_value, concat_rows_value, cross_entropy_value, gelu, gelu_grad, layernorm_forward,
    select_cols_value, Ops,
};
use crate::error::{PegoError, Result};
use crate::numerics::{l1_entrywise, matmul, softmax_rows, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Which parameters a tape differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    /// Adapter factors and the classifier head.
    Adapters,
    /// Every parameter (used when fitting the frozen base itself).
    All,
}

impl Trainable {
    pub fn includes(self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Adapters => is_adapter_trainable(name),
        }
    }
}

/// `*.lora.*.A`, `*.lora.*.B` and `head.*`.
pub fn is_adapter_trainable(name: &str) -> bool {
    if name.starts_with("head.") {
        return true;
    }
    let parts: Vec<&str> = name.split('.').collect();
    parts.len() >= 3 && parts[parts.len() - 3] == "lora" && matches!(parts[parts.len() - 1], "A" | "B")
}

/// Deliberate defects for negative-control tests of the gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the subgradient of the L1 norm.
    FlipL1Sign,
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddColBias(NodeId, NodeId),
    Scale(NodeId, f64),
    RowSlice(NodeId, usize),
    ColSlice(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SelectCols(NodeId, Vec<usize>),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    Softmax(NodeId),
    CrossEntropy {
        logits: NodeId,
        probs: Matrix,
        labels: Vec<usize>,
    },
    L1(NodeId),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    trainable: Trainable,
    params: BTreeMap<String, NodeId>,
    fault: Option<Fault>,
}

impl Tape {
    pub fn new(trainable: Trainable) -> Self {
        Self {
            nodes: Vec::new(),
            trainable,
            params: BTreeMap::new(),
            fault: None,
        }
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Reverse sweep from the scalar `loss`; returns the gradient of every
    /// differentiated parameter, keyed by name.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Matrix>> {
        if self.val(loss).shape() != (1, 1) {
            return Err(PegoError::Shape {
                op: "backward",
                left: self.val(loss).shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let acc = |id: NodeId, delta: Matrix, grads: &mut Vec<Option<Matrix>>| {
                if !self.nodes[id.0].requires_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(existing) => {
                        existing.add_assign(&delta).expect("gradient shape matches its node");
                    }
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(*a, matmul(&g, &self.val(*b).transpose())?, &mut grads);
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, matmul(&self.val(*a).transpose(), &g)?, &mut grads);
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose(), &mut grads),
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::AddColBias(x, bias) => {
                    let sums = Matrix::from_fn(g.rows(), 1, |i, _| g.row(i).iter().sum());
                    acc(*bias, sums, &mut grads);
                    acc(*x, g, &mut grads);
                }
                Op::Scale(x, c) => acc(*x, g.scale(*c), &mut grads),
                Op::RowSlice(x, start) => {
                    let (r, c) = self.val(*x).shape();
                    let mut full = Matrix::zeros(r, c);
                    for i in 0..g.rows() {
                        for j in 0..c {
                            full[(start + i, j)] = g[(i, j)];
                        }
                    }
                    acc(*x, full, &mut grads);
                }
                Op::ColSlice(x, start) => {
                    let (r, c) = self.val(*x).shape();
                    let mut full = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..g.cols() {
                            full[(i, start + j)] = g[(i, j)];
                        }
                    }
                    acc(*x, full, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.val(*p).rows();
                        acc(*p, g.row_slice(offset, rows), &mut grads);
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.val(*p).cols();
                        acc(*p, g.col_slice(offset, cols), &mut grads);
                        offset += cols;
                    }
                }
                Op::SelectCols(x, cols) => {
                    let (r, c) = self.val(*x).shape();
                    let mut full = Matrix::zeros(r, c);
                    for (k, &col) in cols.iter().enumerate() {
                        for i in 0..r {
                            full[(i, col)] += g[(i, k)];
                        }
                    }
                    acc(*x, full, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (d, n) = g.shape();
                    let gam = self.val(*gamma);
                    if self.nodes[gamma.0].requires_grad || self.nodes[beta.0].requires_grad {
                        let mut dg = Matrix::zeros(d, 1);
                        let mut db = Matrix::zeros(d, 1);
                        for i in 0..d {
                            for j in 0..n {
                                dg[(i, 0)] += g[(i, j)] * xhat[(i, j)];
                                db[(i, 0)] += g[(i, j)];
                            }
                        }
                        acc(*gamma, dg, &mut grads);
                        acc(*beta, db, &mut grads);
                    }
                    if self.nodes[x.0].requires_grad {
                        let mut dx = Matrix::zeros(d, n);
                        for j in 0..n {
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for i in 0..d {
                                let dh = g[(i, j)] * gam[(i, 0)];
                                mean_dh += dh;
                                mean_dh_h += dh * xhat[(i, j)];
                            }
                            mean_dh /= d as f64;
                            mean_dh_h /= d as f64;
                            for i in 0..d {
                                let dh = g[(i, j)] * gam[(i, 0)];
                                dx[(i, j)] = rstd[j] * (dh - mean_dh - xhat[(i, j)] * mean_dh_h);
                            }
                        }
                        acc(*x, dx, &mut grads);
                    }
                }
                Op::Gelu(x) => {
                    let dx = g.zip_map(self.val(*x), |gv, xv| gv * gelu_grad(xv));
                    acc(*x, dx, &mut grads);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let mut dx = Matrix::zeros(r, c);
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| g[(i, j)] * y[(i, j)]).sum();
                        for j in 0..c {
                            dx[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::CrossEntropy { logits, probs, labels } => {
                    let scale = g[(0, 0)] / labels.len() as f64;
                    let mut d = probs.clone();
                    for (j, &y) in labels.iter().enumerate() {
                        d[(y, j)] -= 1.0;
                    }
                    acc(*logits, d.scale(scale), &mut grads);
                }
                Op::L1(x) => {
                    let gv = g[(0, 0)];
                    let sign = match self.fault {
                        Some(Fault::FlipL1Sign) => -1.0,
                        None => 1.0,
                    };
                    // Subgradient of |x| at 0 is 0.
                    let dx = self.val(*x).map(|v| {
                        if v > 0.0 {
                            sign * gv
                        } else if v < 0.0 {
                            -sign * gv
                        } else {
                            0.0
                        }
                    });
                    acc(*x, dx, &mut grads);
                }
            }
        }

        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            if !self.nodes[id.0].requires_grad {
                continue;
            }
            let g = match grads.get_mut(id.0).and_then(Option::take) {
                Some(g) => g,
                None => {
                    let (r, c) = self.val(*id).shape();
                    Matrix::zeros(r, c)
                }
            };
            if !g.is_finite() {
                return Err(PegoError::Numeric(format!(
                    "non-finite gradient for parameter `{name}`"
                )));
            }
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

impl Ops for Tape {
    type Var = NodeId;

    fn constant(&mut self, m: Matrix) -> NodeId {
        self.nodes.push(Node {
            value: m,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn param(&mut self, name: &str, m: &Matrix) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let requires_grad = self.trainable.includes(name);
        self.nodes.push(Node {
            value: m.clone(),
            op: Op::Leaf,
            requires_grad,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.insert(name.to_string(), id);
        id
    }

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Matrix {
        self.val(*v)
    }

    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = matmul(self.val(*a), self.val(*b))?;
        Ok(self.push(v, Op::MatMul(*a, *b), &[*a, *b]))
    }

    fn transpose(&mut self, a: &NodeId) -> NodeId {
        let v = self.val(*a).transpose();
        self.push(v, Op::Transpose(*a), &[*a])
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = self.val(*a).add(self.val(*b))?;
        Ok(self.push(v, Op::Add(*a, *b), &[*a, *b]))
    }

    fn add_col_bias(&mut self, x: &NodeId, bias: &NodeId) -> Result<NodeId> {
        let v = add_col_bias_value(self.val(*x), self.val(*bias))?;
        Ok(self.push(v, Op::AddColBias(*x, *bias), &[*x, *bias]))
    }

    fn scale(&mut self, x: &NodeId, c: f64) -> NodeId {
        let v = self.val(*x).scale(c);
        self.push(v, Op::Scale(*x, c), &[*x])
    }

    fn row_slice(&mut self, x: &NodeId, start: usize, len: usize) -> NodeId {
        let v = self.val(*x).row_slice(start, len);
        self.push(v, Op::RowSlice(*x, start), &[*x])
    }

    fn col_slice(&mut self, x: &NodeId, start: usize, len: usize) -> NodeId {
        let v = self.val(*x).col_slice(start, len);
        self.push(v, Op::ColSlice(*x, start), &[*x])
    }

    fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let refs: Vec<&Matrix> = parts.iter().map(|p| self.val(*p)).collect();
        let v = concat_rows_value(&refs)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let refs: Vec<&Matrix> = parts.iter().map(|p| self.val(*p)).collect();
        let v = concat_cols_value(&refs)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    fn select_cols(&mut self, x: &NodeId, cols: &[usize]) -> NodeId {
        let v = select_cols_value(self.val(*x), cols);
        self.push(v, Op::SelectCols(*x, cols.to_vec()), &[*x])
    }

    fn layernorm_cols(&mut self, x: &NodeId, gamma: &NodeId, beta: &NodeId) -> Result<NodeId> {
        let (v, xhat, rstd) = layernorm_forward(self.val(*x), self.val(*gamma), self.val(*beta))?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x: *x,
                gamma: *gamma,
                beta: *beta,
                xhat,
                rstd,
            },
            &[*x, *gamma, *beta],
        ))
    }

    fn gelu(&mut self, x: &NodeId) -> NodeId {
        let v = self.val(*x).map(gelu);
        self.push(v, Op::Gelu(*x), &[*x])
    }

    fn softmax_rows(&mut self, x: &NodeId) -> NodeId {
        let v = softmax_rows(self.val(*x));
        self.push(v, Op::Softmax(*x), &[*x])
    }

    fn cross_entropy_cols(&mut self, logits: &NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = cross_entropy_value(self.val(*logits), labels)?;
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits: *logits,
                probs,
                labels: labels.to_vec(),
            },
            &[*logits],
        ))
    }

    fn l1(&mut self, x: &NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, l1_entrywise(self.val(*x)));
        self.push(v, Op::L1(*x), &[*x])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trainable_names() {
        assert!(is_adapter_trainable("blocks.0.attn.wq.lora.3.A"));
        assert!(is_adapter_trainable("blocks.1.attn.wv.lora.0.B"));
        assert!(is_adapter_trainable("head.w"));
        assert!(is_adapter_trainable("head.b"));
        assert!(!is_adapter_trainable("blocks.0.attn.wq.base"));
        assert!(!is_adapter_trainable("blocks.0.attn.wq.lora.0.C"));
        assert!(!is_adapter_trainable("patch_embed.w"));
    }

    #[test]
    fn matmul_gradient_by_hand() {
        // L = |A B| with all-positive product: dL/dA = 1 B^T
        let mut t = Tape::new(Trainable::All);
        let a = t.param("a", &Matrix::from_rows(&[[1.0, 2.0]]));
        let b = t.param("b", &Matrix::column(&[3.0, 4.0]));
        let p = t.matmul(&a, &b).unwrap();
        let l = t.l1(&p);
        let g = t.backward(l).unwrap();
        assert_eq!(g["a"], Matrix::from_rows(&[[3.0, 4.0]]));
        assert_eq!(g["b"], Matrix::column(&[1.0, 2.0]));
    }

    #[test]
    fn l1_subgradient_at_zero_is_zero() {
        let mut t = Tape::new(Trainable::All);
        let x = t.param("x", &Matrix::from_rows(&[[0.0, -2.0, 3.0]]));
        let l = t.l1(&x);
        let g = t.backward(l).unwrap();
        assert_eq!(g["x"], Matrix::from_rows(&[[0.0, -1.0, 1.0]]));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut t = Tape::new(Trainable::Adapters);
        let w = t.param("blocks.0.attn.wq.base", &Matrix::identity(2));
        let h = t.param("head.w", &Matrix::identity(2));
        let p = t.matmul(&w, &h).unwrap();
        let l = t.l1(&p);
        let g = t.backward(l).unwrap();
        assert!(g.contains_key("head.w"));
        assert!(!g.contains_key("blocks.0.attn.wq.base"));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let z = Matrix::column(&[0.5, -1.0, 2.0]);
        let mut t = Tape::new(Trainable::All);
        let zv = t.param("z", &z);
        let l = t.cross_entropy_cols(&zv, &[1]).unwrap();
        let g = t.backward(l).unwrap();
        let p = softmax_rows(&z.transpose()).transpose();
        let mut expected = p.clone();
        expected[(1, 0)] -= 1.0;
        assert!(g["z"].sub(&expected).unwrap().max_abs() < 1e-15);
    }
}
