//! Reverse-mode differentiation over small dense matrices.
//!
//! A [`Tape`] records every operation in execution order together with its
//! forward value; [`Tape::backward`] walks the record in reverse and
//! accumulates adjoints. The operation set is the closure of what a Kalman
//! filter rollout and its Gaussian likelihood need: linear algebra on
//! `DMatrix<f64>`, SPD solves and log-determinants, plus a [`Tape::custom`]
//! hook for model-specific nonlinearities with hand-written adjoints.
//!
//! Matrices are tiny (at most 6x6) so everything is dense and no inverse is
//! ever formed explicitly except where an adjoint needs it.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Adjoint rule for [`Tape::custom`]: maps the upstream gradient to one
/// gradient per input, in input order.
pub type BackwardFn = Box<dyn Fn(&DMatrix<f64>) -> Vec<DMatrix<f64>>>;

type Chol = Rc<Cholesky<f64, Dyn>>;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Scale(usize, f64),
    Solve {
        s: usize,
        b: usize,
        chol: Chol,
    },
    LogDet {
        s: usize,
        inv: DMatrix<f64>,
    },
    QuadForm {
        y: usize,
        s: usize,
        w: DMatrix<f64>,
    },
    ExpElem(usize),
    SumSquares(usize),
    Sum(usize),
    Custom {
        inputs: Vec<usize>,
        backward: BackwardFn,
    },
}

struct Node {
    value: DMatrix<f64>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    chol_cache: HashMap<usize, Chol>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            chol_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.idx].value
    }

    /// Value of a 1x1 variable.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.idx].value[(0, 0)]
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op, needs_grad: bool) -> Var {
        let (rows, cols) = value.shape();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
            rows,
            cols,
        }
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        if vars.iter().any(|v| v.tape != self.id) {
            return Err(Error::Contract("variable belongs to another tape".into()));
        }
        Ok(())
    }

    fn grad_any(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op: "add",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let value = self.value(a) + self.value(b);
        let g = self.grad_any(&[a.idx, b.idx]);
        Ok(self.push(value, Op::Add(a.idx, b.idx), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op: "sub",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let value = self.value(a) - self.value(b);
        let g = self.grad_any(&[a.idx, b.idx]);
        Ok(self.push(value, Op::Sub(a.idx, b.idx), g))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        if a.cols != b.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let value = self.value(a) * self.value(b);
        let g = self.grad_any(&[a.idx, b.idx]);
        Ok(self.push(value, Op::MatMul(a.idx, b.idx), g))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let g = self.nodes[a.idx].needs_grad;
        self.push(value, Op::Transpose(a.idx), g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let g = self.nodes[a.idx].needs_grad;
        self.push(value, Op::Scale(a.idx, s), g)
    }

    fn cholesky(&mut self, s: Var) -> Result<Chol> {
        if let Some(c) = self.chol_cache.get(&s.idx) {
            return Ok(c.clone());
        }
        if s.rows != s.cols {
            return Err(Error::Shape {
                op: "cholesky",
                lhs: s.shape(),
                rhs: s.shape(),
            });
        }
        let chol = Cholesky::new(self.value(s).clone())
            .ok_or_else(|| Error::Definiteness("tape operand is not SPD".into()))?;
        let chol = Rc::new(chol);
        self.chol_cache.insert(s.idx, chol.clone());
        Ok(chol)
    }

    /// `S⁻¹ B` for SPD `S`.
    pub fn solve(&mut self, s: Var, b: Var) -> Result<Var> {
        self.check(&[s, b])?;
        if s.rows != s.cols || s.cols != b.rows {
            return Err(Error::Shape {
                op: "solve",
                lhs: s.shape(),
                rhs: b.shape(),
            });
        }
        let chol = self.cholesky(s)?;
        let value = chol.solve(self.value(b));
        let g = self.grad_any(&[s.idx, b.idx]);
        Ok(self.push(
            value,
            Op::Solve {
                s: s.idx,
                b: b.idx,
                chol,
            },
            g,
        ))
    }

    /// `log |S|` for SPD `S`.
    pub fn logdet(&mut self, s: Var) -> Result<Var> {
        self.check(&[s])?;
        let chol = self.cholesky(s)?;
        let l = chol.l_dirty();
        let ld: f64 = (0..s.rows).map(|i| 2.0 * l[(i, i)].ln()).sum();
        let inv = chol.inverse();
        let inv = (&inv + inv.transpose()) * 0.5;
        let g = self.nodes[s.idx].needs_grad;
        Ok(self.push(
            DMatrix::from_element(1, 1, ld),
            Op::LogDet { s: s.idx, inv },
            g,
        ))
    }

    /// `yᵀ S⁻¹ y` for a column `y` and SPD `S`.
    pub fn quadform(&mut self, y: Var, s: Var) -> Result<Var> {
        self.check(&[y, s])?;
        if y.cols != 1 || s.rows != s.cols || s.rows != y.rows {
            return Err(Error::Shape {
                op: "quadform",
                lhs: y.shape(),
                rhs: s.shape(),
            });
        }
        let chol = self.cholesky(s)?;
        let w = chol.solve(self.value(y));
        let q = self.value(y).dot(&w);
        let g = self.grad_any(&[y.idx, s.idx]);
        Ok(self.push(
            DMatrix::from_element(1, 1, q),
            Op::QuadForm {
                y: y.idx,
                s: s.idx,
                w,
            },
            g,
        ))
    }

    pub fn exp_elem(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let g = self.nodes[a.idx].needs_grad;
        self.push(value, Op::ExpElem(a.idx), g)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = DMatrix::from_element(1, 1, self.value(a).norm_squared());
        let g = self.nodes[a.idx].needs_grad;
        self.push(value, Op::SumSquares(a.idx), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = DMatrix::from_element(1, 1, self.value(a).sum());
        let g = self.nodes[a.idx].needs_grad;
        self.push(value, Op::Sum(a.idx), g)
    }

    /// Records an operation whose forward value was computed by the caller.
    ///
    /// `backward` receives the upstream gradient (shaped like `value`) and
    /// must return one gradient per input, shaped like that input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: DMatrix<f64>,
        backward: BackwardFn,
    ) -> Result<Var> {
        self.check(inputs)?;
        let idx: Vec<usize> = inputs.iter().map(|v| v.idx).collect();
        let g = self.grad_any(&idx);
        Ok(self.push(
            value,
            Op::Custom {
                inputs: idx,
                backward,
            },
            g,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(&[loss])?;
        if loss.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                loss.shape()
            )));
        }
        let mut adj: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        adj[loss.idx] = Some(DMatrix::from_element(1, 1, 1.0));

        for i in (0..=loss.idx).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, *a, g.clone());
                    self.accumulate(&mut adj, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, *a, g.clone());
                    self.accumulate(&mut adj, *b, -&g);
                }
                Op::MatMul(a, b) => {
                    if self.nodes[*a].needs_grad {
                        let ga = &g * self.nodes[*b].value.transpose();
                        self.accumulate(&mut adj, *a, ga);
                    }
                    if self.nodes[*b].needs_grad {
                        let gb = self.nodes[*a].value.transpose() * &g;
                        self.accumulate(&mut adj, *b, gb);
                    }
                }
                Op::Transpose(a) => self.accumulate(&mut adj, *a, g.transpose()),
                Op::Scale(a, s) => self.accumulate(&mut adj, *a, &g * *s),
                Op::Solve { s, b, chol } => {
                    // X = S⁻¹B: dB = S⁻¹ G, dS = -S⁻¹ G Xᵀ (S symmetric).
                    let gb = chol.solve(&g);
                    if self.nodes[*s].needs_grad {
                        let gs = -(&gb * node.value.transpose());
                        self.accumulate(&mut adj, *s, gs);
                    }
                    self.accumulate(&mut adj, *b, gb);
                }
                Op::LogDet { s, inv } => {
                    self.accumulate(&mut adj, *s, inv * g[(0, 0)]);
                }
                Op::QuadForm { y, s, w } => {
                    let gv = g[(0, 0)];
                    self.accumulate(&mut adj, *y, w * (2.0 * gv));
                    if self.nodes[*s].needs_grad {
                        self.accumulate(&mut adj, *s, -(w * w.transpose()) * gv);
                    }
                }
                Op::ExpElem(a) => {
                    let ga = g.component_mul(&node.value);
                    self.accumulate(&mut adj, *a, ga);
                }
                Op::SumSquares(a) => {
                    let ga = &self.nodes[*a].value * (2.0 * g[(0, 0)]);
                    self.accumulate(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    self.accumulate(&mut adj, *a, DMatrix::from_element(r, c, g[(0, 0)]));
                }
                Op::Custom { inputs, backward } => {
                    let grads = backward(&g);
                    debug_assert_eq!(grads.len(), inputs.len());
                    for (inp, gi) in inputs.iter().zip(grads) {
                        self.accumulate(&mut adj, *inp, gi);
                    }
                }
            }
            // Leaves keep their adjoint for the caller.
            if matches!(node.op, Op::Leaf) {
                adj[i] = Some(g);
            }
        }
        // Interior adjoints were consumed on the way; keep only what reached leaves.
        Ok(Gradients { tape: self.id, adj })
    }

    fn accumulate(&self, adj: &mut [Option<DMatrix<f64>>], idx: usize, g: DMatrix<f64>) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut adj[idx] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients of one scalar with respect to the leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    adj: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a leaf, or `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&DMatrix<f64>> {
        if v.tape != self.tape {
            return None;
        }
        self.adj.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::wrt`] but yields zeros for unreached leaves.
    pub fn wrt_or_zero(&self, v: Var) -> DMatrix<f64> {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(v.rows, v.cols))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn add_identity() {
        let mut t = Tape::new();
        let a = t.leaf(DMatrix::identity(2, 2));
        let s = t.add(a, a).unwrap();
        assert_eq!(t.value(s), &(DMatrix::identity(2, 2) * 2.0));
    }

    #[test]
    fn quadform_and_logdet_values() {
        let mut t = Tape::new();
        let y = t.leaf(m(2, 1, &[1.0, 0.0]));
        let s = t.leaf(DMatrix::identity(2, 2));
        let q = t.quadform(y, s).unwrap();
        assert_eq!(t.scalar(q), 1.0);

        let d = t.leaf(m(2, 2, &[2.0, 0.0, 0.0, 3.0]));
        let ld = t.logdet(d).unwrap();
        assert!((t.scalar(ld) - 6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut t = Tape::new();
        let a = t.leaf(m(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = t.sum(a);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(a).unwrap(), &DMatrix::from_element(2, 3, 1.0));
    }

    #[test]
    fn logdet_gradient_of_diagonal() {
        let mut t = Tape::new();
        let s = t.leaf(m(2, 2, &[2.0, 0.0, 0.0, 3.0]));
        let ld = t.logdet(s).unwrap();
        let g = t.backward(ld).unwrap();
        let want = m(2, 2, &[0.5, 0.0, 0.0, 1.0 / 3.0]);
        assert!((g.wrt(s).unwrap() - want).amax() < 1e-15);
    }

    #[test]
    fn errors() {
        let mut t = Tape::new();
        let a = t.leaf(DMatrix::zeros(2, 3));
        let b = t.leaf(DMatrix::zeros(2, 2));
        assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
        let notspd = t.leaf(m(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(t.logdet(notspd), Err(Error::Definiteness(_))));
        assert!(matches!(t.solve(notspd, b), Err(Error::Definiteness(_))));
        assert!(matches!(t.backward(a), Err(Error::Contract(_))));

        let mut other = Tape::new();
        let c = other.leaf(DMatrix::zeros(2, 3));
        assert!(matches!(t.add(a, c), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(m(1, 1, &[2.0]));
        let c = t.constant(m(1, 1, &[3.0]));
        let p = t.matmul(a, c).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.wrt(a).unwrap()[(0, 0)], 3.0);
        assert!(g.wrt(c).is_none());
    }

    #[test]
    fn shared_factorization_is_reused() {
        let mut t = Tape::new();
        let s = t.leaf(m(2, 2, &[4.0, 1.0, 1.0, 3.0]));
        let b = t.leaf(m(2, 1, &[1.0, 2.0]));
        t.solve(s, b).unwrap();
        t.logdet(s).unwrap();
        assert_eq!(t.chol_cache.len(), 1);
    }
}
