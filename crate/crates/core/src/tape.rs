//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records a DAG of matrix-valued operations as they are built;
//! [`Var`] is a copyable handle to one node. Calling [`Var::backward`] on a
//! 1×1 node runs the adjoint pass and returns, per parameter leaf, the
//! gradient of that scalar.
//!
//! Conventions:
//!
//! * every value is a 2-D array — column vectors are `n×1`, scalars `1×1`;
//! * elementwise arithmetic broadcasts along size-1 axes (numpy rules
//!   restricted to two dimensions);
//! * matrix factorizations and triangular solves are first-class ops with
//!   analytic adjoints, so whole Gaussian-algebra expressions differentiate
//!   without ever materializing an inverse.
//!
//! The op set is deliberately small: exactly what the variational bounds
//! need. Every adjoint here is pinned by central-finite-difference tests at
//! the bottom of this file.

use std::cell::{Ref, RefCell};

use ndarray::{Array2, Axis};

use crate::scalar::c;
use crate::{linalg, Result, Scalar};

/// Append-only record of a matrix computation.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

struct Node<S: Scalar> {
    value: Array2<S>,
    needs_grad: bool,
    op: Op<S>,
}

enum Op<S: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Softplus(usize),
    ClampMin(usize, S),
    SumAll(usize),
    RowSums(usize),
    ColSums(usize),
    Slice { src: usize, row0: usize, col0: usize },
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    DiagCol(usize),
    DiagFromCol(usize),
    TrilSoftplusDiag(usize),
    Cholesky(usize),
    SolveLower { l: usize, b: usize },
    SolveLowerT { l: usize, b: usize },
}

/// Handle to a tape node. Cheap to copy; all arithmetic goes through the
/// owning tape.
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

/// Gradients returned by [`Var::backward`]: one optional array per parameter
/// leaf. `None` means the leaf did not influence the output (gradient zero).
pub struct Grads<S: Scalar> {
    store: Vec<Option<Array2<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var<'_, S>) -> Option<&Array2<S>> {
        self.store.get(v.id).and_then(|g| g.as_ref())
    }

    /// Moves a gradient out of the store (useful when assembling parameter
    /// updates without copying).
    pub fn take(&mut self, v: Var<'_, S>) -> Option<Array2<S>> {
        self.store.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<S>, needs_grad: bool, op: Op<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, needs_grad, op });
        Var { tape: self, id }
    }

    /// Registers a trainable leaf: `backward` reports a gradient for it.
    pub fn param(&self, value: Array2<S>) -> Var<'_, S> {
        self.push(value, true, Op::Leaf)
    }

    /// Registers a constant leaf: treated as fixed data by `backward`.
    pub fn constant(&self, value: Array2<S>) -> Var<'_, S> {
        self.push(value, false, Op::Leaf)
    }

    /// 1×1 constant.
    pub fn scalar(&self, v: f64) -> Var<'_, S> {
        self.constant(Array2::from_elem((1, 1), c(v)))
    }

    /// `rows×cols` constant of zeros.
    pub fn zeros(&self, rows: usize, cols: usize) -> Var<'_, S> {
        self.constant(Array2::zeros((rows, cols)))
    }

    /// `n×n` constant identity.
    pub fn eye(&self, n: usize) -> Var<'_, S> {
        self.constant(Array2::eye(n))
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }
}

/// Output shape for elementwise ops under size-1 broadcasting, or a panic:
/// shape errors on the tape are programming errors, not runtime conditions.
fn broadcast_dims(a: (usize, usize), b: (usize, usize), what: &str) -> (usize, usize) {
    let axis = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (axis(a.0, b.0), axis(a.1, b.1)) {
        (Some(r), Some(c)) => (r, c),
        _ => panic!("{what}: incompatible shapes {a:?} and {b:?}"),
    }
}

/// Sums `g` along any axis where `target` has size 1 but `g` does not —
/// the adjoint of broadcasting.
fn reduce_to<S: Scalar>(g: &Array2<S>, target: (usize, usize)) -> Array2<S> {
    let mut out = g.clone();
    if target.0 == 1 && out.nrows() > 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && out.ncols() > 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    debug_assert_eq!(out.dim(), target);
    out
}

fn stable_softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn shape(self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    /// The tape this node lives on.
    pub fn tape(self) -> &'t Tape<S> {
        self.tape
    }

    /// Borrow of the node's forward value. Do not hold across subsequent op
    /// construction on the same tape.
    pub fn value(self) -> Ref<'t, Array2<S>> {
        Ref::map(self.tape.nodes.borrow(), |nodes| &nodes[self.id].value)
    }

    /// Owned copy of the forward value.
    pub fn to_array(self) -> Array2<S> {
        self.value().clone()
    }

    /// The single entry of a 1×1 node.
    pub fn item(self) -> S {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() requires a 1x1 node");
        v[(0, 0)]
    }

    fn same_tape(self, other: Var<'t, S>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands belong to different tapes"
        );
    }

    fn unary(
        self,
        value: Array2<S>,
        op: Op<S>,
    ) -> Var<'t, S> {
        let needs = self.tape.needs(self.id);
        self.tape.push(value, needs, op)
    }

    fn elementwise(
        self,
        rhs: Var<'t, S>,
        what: &str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Var<'t, S> {
        self.same_tape(rhs);
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let b = &nodes[rhs.id].value;
        let dims = broadcast_dims(a.dim(), b.dim(), what);
        let av = a.broadcast(dims).expect("checked broadcast");
        let bv = b.broadcast(dims).expect("checked broadcast");
        let mut out = Array2::zeros(dims);
        ndarray::Zip::from(&mut out)
            .and(&av)
            .and(&bv)
            .for_each(|o, &x, &y| *o = f(x, y));
        let needs = nodes[self.id].needs_grad || nodes[rhs.id].needs_grad;
        drop(nodes);
        self.tape.push(out, needs, op)
    }

    fn map(self, f: impl Fn(S) -> S, op: Op<S>) -> Var<'t, S> {
        let value = self.value().mapv(f);
        self.unary(value, op)
    }

    /// Matrix product `self · rhs`.
    pub fn matmul(self, rhs: Var<'t, S>) -> Var<'t, S> {
        self.same_tape(rhs);
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let b = &nodes[rhs.id].value;
        assert_eq!(
            a.ncols(),
            b.nrows(),
            "matmul: inner dimensions differ ({:?} · {:?})",
            a.dim(),
            b.dim()
        );
        let out = a.dot(b);
        let needs = nodes[self.id].needs_grad || nodes[rhs.id].needs_grad;
        drop(nodes);
        self.tape.push(out, needs, Op::MatMul(self.id, rhs.id))
    }

    /// Transpose.
    pub fn t(self) -> Var<'t, S> {
        let value = self.value().t().to_owned();
        self.unary(value, Op::Transpose(self.id))
    }

    pub fn exp(self) -> Var<'t, S> {
        self.map(|x| x.exp(), Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t, S> {
        self.map(|x| x.ln(), Op::Ln(self.id))
    }

    pub fn sqrt(self) -> Var<'t, S> {
        self.map(|x| x.sqrt(), Op::Sqrt(self.id))
    }

    /// Numerically stable `ln(1 + eˣ)`.
    pub fn softplus(self) -> Var<'t, S> {
        self.map(stable_softplus, Op::Softplus(self.id))
    }

    /// Elementwise `max(x, lo)`. The adjoint passes gradient only where
    /// `x > lo`.
    pub fn clamp_min(self, lo: f64) -> Var<'t, S> {
        let lo_s = c::<S>(lo);
        self.map(|x| x.max(lo_s), Op::ClampMin(self.id, lo_s))
    }

    /// Multiplication by a constant scalar.
    pub fn scale(self, k: f64) -> Var<'t, S> {
        let s = self.tape.scalar(k);
        self * s
    }

    /// Addition of a constant scalar.
    pub fn add_const(self, k: f64) -> Var<'t, S> {
        let s = self.tape.scalar(k);
        self + s
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum_all(self) -> Var<'t, S> {
        let total: S = self.value().iter().copied().fold(S::zero(), |a, b| a + b);
        self.unary(Array2::from_elem((1, 1), total), Op::SumAll(self.id))
    }

    /// Row sums: `n×m → n×1`.
    pub fn row_sums(self) -> Var<'t, S> {
        let value = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(value, Op::RowSums(self.id))
    }

    /// Column sums: `n×m → 1×m`.
    pub fn col_sums(self) -> Var<'t, S> {
        let value = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.unary(value, Op::ColSums(self.id))
    }

    /// Contiguous sub-block `[row0..row1, col0..col1]`.
    pub fn slice(self, row0: usize, row1: usize, col0: usize, col1: usize) -> Var<'t, S> {
        let value = {
            let v = self.value();
            assert!(
                row0 < row1 && row1 <= v.nrows() && col0 < col1 && col1 <= v.ncols(),
                "slice [{row0}..{row1}, {col0}..{col1}] out of bounds for {:?}",
                v.dim()
            );
            v.slice(ndarray::s![row0..row1, col0..col1]).to_owned()
        };
        self.unary(value, Op::Slice { src: self.id, row0, col0 })
    }

    /// Stacks `self` on top of `other` (column counts must match).
    pub fn vcat(self, other: Var<'t, S>) -> Var<'t, S> {
        self.same_tape(other);
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let b = &nodes[other.id].value;
        assert_eq!(a.ncols(), b.ncols(), "vcat: column counts differ");
        let out = ndarray::concatenate(Axis(0), &[a.view(), b.view()])
            .expect("validated concatenate");
        let needs = nodes[self.id].needs_grad || nodes[other.id].needs_grad;
        drop(nodes);
        self.tape.push(out, needs, Op::ConcatRows(self.id, other.id))
    }

    /// Places `other` to the right of `self` (row counts must match).
    pub fn hcat(self, other: Var<'t, S>) -> Var<'t, S> {
        self.same_tape(other);
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let b = &nodes[other.id].value;
        assert_eq!(a.nrows(), b.nrows(), "hcat: row counts differ");
        let out = ndarray::concatenate(Axis(1), &[a.view(), b.view()])
            .expect("validated concatenate");
        let needs = nodes[self.id].needs_grad || nodes[other.id].needs_grad;
        drop(nodes);
        self.tape.push(out, needs, Op::ConcatCols(self.id, other.id))
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag_col(self) -> Var<'t, S> {
        let value = {
            let v = self.value();
            assert_eq!(v.nrows(), v.ncols(), "diag_col requires a square matrix");
            v.diag().to_owned().insert_axis(Axis(1))
        };
        self.unary(value, Op::DiagCol(self.id))
    }

    /// Square diagonal matrix from an `n×1` column.
    pub fn diag_from_col(self) -> Var<'t, S> {
        let value = {
            let v = self.value();
            assert_eq!(v.ncols(), 1, "diag_from_col requires an n×1 column");
            Array2::from_diag(&v.column(0))
        };
        self.unary(value, Op::DiagFromCol(self.id))
    }

    /// Lower-triangular reparametrization: keeps the strict lower triangle of
    /// `self`, applies softplus to the diagonal, zeroes the upper triangle.
    /// Maps an unconstrained square parameter to a valid Cholesky factor.
    pub fn tril_softplus_diag(self) -> Var<'t, S> {
        let value = {
            let v = self.value();
            assert_eq!(v.nrows(), v.ncols(), "tril_softplus_diag requires square input");
            let n = v.nrows();
            let mut out = Array2::zeros((n, n));
            for i in 0..n {
                for j in 0..i {
                    out[(i, j)] = v[(i, j)];
                }
                out[(i, i)] = stable_softplus(v[(i, i)]);
            }
            out
        };
        self.unary(value, Op::TrilSoftplusDiag(self.id))
    }

    /// Lower Cholesky factor of `self + εI` under the escalating jitter
    /// policy of [`linalg::jittered_cholesky`]. Fails (as a hard error, not a
    /// panic) when the matrix stays indefinite at the largest jitter.
    pub fn cholesky(self, context: &'static str) -> Result<Var<'t, S>> {
        let value = {
            let v = self.value();
            let (l, _eps) = linalg::jittered_cholesky(v.view(), context)?;
            l
        };
        Ok(self.unary(value, Op::Cholesky(self.id)))
    }

    /// Solves `self · X = b` with `self` lower-triangular.
    pub fn solve_lower(self, b: Var<'t, S>) -> Var<'t, S> {
        self.same_tape(b);
        let nodes = self.tape.nodes.borrow();
        let l = &nodes[self.id].value;
        let rhs = &nodes[b.id].value;
        let out = linalg::solve_lower(l.view(), rhs.view());
        let needs = nodes[self.id].needs_grad || nodes[b.id].needs_grad;
        drop(nodes);
        self.tape.push(out, needs, Op::SolveLower { l: self.id, b: b.id })
    }

    /// Solves `selfᵀ · X = b` with `self` lower-triangular.
    pub fn solve_lower_t(self, b: Var<'t, S>) -> Var<'t, S> {
        self.same_tape(b);
        let nodes = self.tape.nodes.borrow();
        let l = &nodes[self.id].value;
        let rhs = &nodes[b.id].value;
        let out = linalg::solve_lower_transpose(l.view(), rhs.view());
        let needs = nodes[self.id].needs_grad || nodes[b.id].needs_grad;
        drop(nodes);
        self.tape.push(out, needs, Op::SolveLowerT { l: self.id, b: b.id })
    }

    /// Adjoint pass from a 1×1 node. Returns gradients for every parameter
    /// leaf that influenced it.
    pub fn backward(self) -> Grads<S> {
        let nodes = self.tape.nodes.borrow();
        assert_eq!(
            nodes[self.id].value.dim(),
            (1, 1),
            "backward requires a scalar (1x1) output node"
        );
        let mut store: Vec<Option<Array2<S>>> = (0..self.id + 1).map(|_| None).collect();
        if nodes[self.id].needs_grad {
            store[self.id] = Some(Array2::from_elem((1, 1), S::one()));
        }

        for id in (0..=self.id).rev() {
            let Some(g) = store[id].take() else { continue };
            let node = &nodes[id];
            match node.op {
                Op::Leaf => {
                    store[id] = Some(g);
                }
                Op::Add(a, b) => {
                    accumulate(&nodes, &mut store, a, |n| reduce_to(&g, n));
                    accumulate(&nodes, &mut store, b, |n| reduce_to(&g, n));
                }
                Op::Sub(a, b) => {
                    accumulate(&nodes, &mut store, a, |n| reduce_to(&g, n));
                    accumulate(&nodes, &mut store, b, |n| reduce_to(&g.mapv(|x| -x), n));
                }
                Op::Mul(a, b) => {
                    let dims = node.value.dim();
                    let av = nodes[a].value.broadcast(dims).expect("broadcast");
                    let bv = nodes[b].value.broadcast(dims).expect("broadcast");
                    accumulate(&nodes, &mut store, a, |n| reduce_to(&(&g * &bv), n));
                    accumulate(&nodes, &mut store, b, |n| reduce_to(&(&g * &av), n));
                }
                Op::Div(a, b) => {
                    let dims = node.value.dim();
                    let bv = nodes[b].value.broadcast(dims).expect("broadcast");
                    accumulate(&nodes, &mut store, a, |n| reduce_to(&(&g / &bv), n));
                    // d(a/b)/db = -(a/b)/b = -value/b
                    let mut gb = &g * &node.value;
                    gb = &gb / &bv;
                    accumulate(&nodes, &mut store, b, |n| reduce_to(&gb.mapv(|x| -x), n));
                }
                Op::Neg(a) => {
                    accumulate(&nodes, &mut store, a, |_| g.mapv(|x| -x));
                }
                Op::MatMul(a, b) => {
                    accumulate(&nodes, &mut store, a, |_| g.dot(&nodes[b].value.t()));
                    accumulate(&nodes, &mut store, b, |_| nodes[a].value.t().dot(&g));
                }
                Op::Transpose(a) => {
                    accumulate(&nodes, &mut store, a, |_| g.t().to_owned());
                }
                Op::Exp(a) => {
                    accumulate(&nodes, &mut store, a, |_| &g * &node.value);
                }
                Op::Ln(a) => {
                    accumulate(&nodes, &mut store, a, |_| &g / &nodes[a].value);
                }
                Op::Sqrt(a) => {
                    // d√x = g / (2√x), with √x already computed forward
                    let two = c::<S>(2.0);
                    accumulate(&nodes, &mut store, a, |_| {
                        &g / &node.value.mapv(|y| two * y)
                    });
                }
                Op::Softplus(a) => {
                    let da = nodes[a].value.mapv(stable_sigmoid);
                    accumulate(&nodes, &mut store, a, |_| &g * &da);
                }
                Op::ClampMin(a, lo) => {
                    let mask = nodes[a]
                        .value
                        .mapv(|x| if x > lo { S::one() } else { S::zero() });
                    accumulate(&nodes, &mut store, a, |_| &g * &mask);
                }
                Op::SumAll(a) => {
                    let g0 = g[(0, 0)];
                    accumulate(&nodes, &mut store, a, |n| Array2::from_elem(n, g0));
                }
                Op::RowSums(a) => {
                    accumulate(&nodes, &mut store, a, |n| {
                        g.broadcast(n).expect("broadcast").to_owned()
                    });
                }
                Op::ColSums(a) => {
                    accumulate(&nodes, &mut store, a, |n| {
                        g.broadcast(n).expect("broadcast").to_owned()
                    });
                }
                Op::Slice { src, row0, col0 } => {
                    let (gr, gc) = g.dim();
                    accumulate(&nodes, &mut store, src, |n| {
                        let mut d = Array2::zeros(n);
                        d.slice_mut(ndarray::s![row0..row0 + gr, col0..col0 + gc])
                            .assign(&g);
                        d
                    });
                }
                Op::ConcatRows(a, b) => {
                    let ra = nodes[a].value.nrows();
                    accumulate(&nodes, &mut store, a, |_| {
                        g.slice(ndarray::s![..ra, ..]).to_owned()
                    });
                    accumulate(&nodes, &mut store, b, |_| {
                        g.slice(ndarray::s![ra.., ..]).to_owned()
                    });
                }
                Op::ConcatCols(a, b) => {
                    let ca = nodes[a].value.ncols();
                    accumulate(&nodes, &mut store, a, |_| {
                        g.slice(ndarray::s![.., ..ca]).to_owned()
                    });
                    accumulate(&nodes, &mut store, b, |_| {
                        g.slice(ndarray::s![.., ca..]).to_owned()
                    });
                }
                Op::DiagCol(a) => {
                    accumulate(&nodes, &mut store, a, |n| {
                        let mut d = Array2::zeros(n);
                        for i in 0..n.0 {
                            d[(i, i)] = g[(i, 0)];
                        }
                        d
                    });
                }
                Op::DiagFromCol(a) => {
                    accumulate(&nodes, &mut store, a, |n| {
                        let mut d = Array2::zeros(n);
                        for i in 0..n.0 {
                            d[(i, 0)] = g[(i, i)];
                        }
                        d
                    });
                }
                Op::TrilSoftplusDiag(a) => {
                    let raw = &nodes[a].value;
                    accumulate(&nodes, &mut store, a, |n| {
                        let mut d = Array2::zeros(n);
                        for i in 0..n.0 {
                            for j in 0..i {
                                d[(i, j)] = g[(i, j)];
                            }
                            d[(i, i)] = g[(i, i)] * stable_sigmoid(raw[(i, i)]);
                        }
                        d
                    });
                }
                Op::Cholesky(a) => {
                    if nodes[a].needs_grad {
                        // Murray-style adjoint: with P = Φ(Lᵀ·Ḡ) (Φ keeps the
                        // lower triangle and halves the diagonal),
                        // dA = ½ (X + Xᵀ) where X = L⁻ᵀ P L⁻¹.
                        let l = &node.value;
                        let mut p = l.t().dot(&g);
                        let n = p.nrows();
                        let half = c::<S>(0.5);
                        for i in 0..n {
                            p[(i, i)] = p[(i, i)] * half;
                            for j in (i + 1)..n {
                                p[(i, j)] = S::zero();
                            }
                        }
                        let t = linalg::solve_lower_transpose(l.view(), p.view());
                        // X = T·L⁻¹  ⇔  Xᵀ = L⁻ᵀ·Tᵀ
                        let xt = linalg::solve_lower_transpose(l.view(), t.t());
                        let x = xt.t();
                        let da = (&x + &xt).mapv(|v| v * half);
                        accumulate(&nodes, &mut store, a, |_| da);
                    }
                }
                Op::SolveLower { l, b } => {
                    // Y = L⁻¹B. dB = L⁻ᵀḠ; dL = −tril(dB · Yᵀ).
                    let lv = &nodes[l].value;
                    let w = linalg::solve_lower_transpose(lv.view(), g.view());
                    if nodes[l].needs_grad {
                        let mut dl = w.dot(&node.value.t()).mapv(|x| -x);
                        linalg::mask_lower_in_place(&mut dl);
                        accumulate(&nodes, &mut store, l, |_| dl);
                    }
                    accumulate(&nodes, &mut store, b, |_| w);
                }
                Op::SolveLowerT { l, b } => {
                    // Y = L⁻ᵀB. dB = L⁻¹Ḡ; dL = −tril(Y · dBᵀ).
                    let lv = &nodes[l].value;
                    let w = linalg::solve_lower(lv.view(), g.view());
                    if nodes[l].needs_grad {
                        let mut dl = node.value.dot(&w.t()).mapv(|x| -x);
                        linalg::mask_lower_in_place(&mut dl);
                        accumulate(&nodes, &mut store, l, |_| dl);
                    }
                    accumulate(&nodes, &mut store, b, |_| w);
                }
            }
        }

        Grads { store }
    }
}

/// Adds `make()` into the adjoint slot of node `id`, skipping nodes that do
/// not require gradient.
fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    store: &mut [Option<Array2<S>>],
    id: usize,
    make: impl FnOnce((usize, usize)) -> Array2<S>,
) {
    if !nodes[id].needs_grad {
        return;
    }
    let delta = make(nodes[id].value.dim());
    debug_assert_eq!(delta.dim(), nodes[id].value.dim(), "adjoint shape mismatch");
    match &mut store[id] {
        Some(acc) => *acc += &delta,
        slot @ None => *slot = Some(delta),
    }
}

impl<'t, S: Scalar> std::ops::Add for Var<'t, S> {
    type Output = Var<'t, S>;
    fn add(self, rhs: Self) -> Self::Output {
        self.elementwise(rhs, "add", |x, y| x + y, Op::Add(self.id, rhs.id))
    }
}

impl<'t, S: Scalar> std::ops::Sub for Var<'t, S> {
    type Output = Var<'t, S>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.elementwise(rhs, "sub", |x, y| x - y, Op::Sub(self.id, rhs.id))
    }
}

impl<'t, S: Scalar> std::ops::Mul for Var<'t, S> {
    type Output = Var<'t, S>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.elementwise(rhs, "mul", |x, y| x * y, Op::Mul(self.id, rhs.id))
    }
}

impl<'t, S: Scalar> std::ops::Div for Var<'t, S> {
    type Output = Var<'t, S>;
    fn div(self, rhs: Self) -> Self::Output {
        self.elementwise(rhs, "div", |x, y| x / y, Op::Div(self.id, rhs.id))
    }
}

impl<'t, S: Scalar> std::ops::Neg for Var<'t, S> {
    type Output = Var<'t, S>;
    fn neg(self) -> Self::Output {
        let value = self.value().mapv(|x| -x);
        self.unary(value, Op::Neg(self.id))
    }
}


#[cfg(test)]
mod tests {
    use super::testing::{grad_check, rng_mat};
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn elementwise_ops_differentiate() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = rng_mat(&mut rng, 3, 2, 0.5, 2.0);
        let b = rng_mat(&mut rng, 3, 2, 0.5, 2.0);
        grad_check(&[a.clone(), b.clone()], 1e-6, |_, v| {
            ((v[0] + v[1]) * (v[0] - v[1]) / v[1]).sum_all()
        });
        grad_check(&[a, b], 1e-6, |_, v| {
            (-(v[0].exp() * v[1].ln() + v[0].sqrt())).sum_all()
        });
    }

    #[test]
    fn broadcasting_differentiates_on_all_size_one_axes() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let full = rng_mat(&mut rng, 3, 4, 0.5, 2.0);
        let col = rng_mat(&mut rng, 3, 1, 0.5, 2.0);
        let row = rng_mat(&mut rng, 1, 4, 0.5, 2.0);
        let one = rng_mat(&mut rng, 1, 1, 0.5, 2.0);
        grad_check(&[full.clone(), col], 1e-6, |_, v| (v[0] * v[1]).sum_all());
        grad_check(&[full.clone(), row], 1e-6, |_, v| (v[0] / v[1]).sum_all());
        grad_check(&[full.clone(), one], 1e-6, |_, v| (v[1] - v[0]).sum_all());
        // broadcast value correctness
        let tape = Tape::new();
        let x = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let r = tape.constant(array![[10.0, 20.0]]);
        assert_eq!((x + r).to_array(), array![[11.0, 22.0], [13.0, 24.0]]);
    }

    #[test]
    fn matmul_transpose_differentiate() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = rng_mat(&mut rng, 3, 2, -1.0, 1.0);
        let b = rng_mat(&mut rng, 2, 4, -1.0, 1.0);
        let w = rng_mat(&mut rng, 3, 4, -1.0, 1.0);
        grad_check(&[a, b, w], 1e-6, |_, v| {
            (v[0].matmul(v[1]) * v[2]).sum_all() + (v[0].t().matmul(v[2])).sum_all()
        });
    }

    #[test]
    fn softplus_and_clamp_differentiate() {
        let a = array![[-3.0, -0.4], [0.7, 25.0]];
        grad_check(&[a.clone()], 1e-6, |_, v| v[0].softplus().sum_all());
        // keep entries away from the clamp threshold so FD stays smooth
        grad_check(&[a], 1e-6, |_, v| {
            (v[0].clamp_min(0.0) * v[0]).sum_all()
        });
    }

    #[test]
    fn reductions_differentiate() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let a = rng_mat(&mut rng, 3, 4, -1.0, 1.0);
        let w1 = rng_mat(&mut rng, 3, 1, -1.0, 1.0);
        let w2 = rng_mat(&mut rng, 1, 4, -1.0, 1.0);
        grad_check(&[a, w1, w2], 1e-6, |_, v| {
            (v[0].row_sums() * v[1]).sum_all() + (v[0].col_sums() * v[2]).sum_all()
        });
    }

    #[test]
    fn slice_concat_diag_differentiate() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let a = rng_mat(&mut rng, 4, 4, -1.0, 1.0);
        let b = rng_mat(&mut rng, 2, 4, -1.0, 1.0);
        grad_check(&[a.clone(), b], 1e-6, |_, v| {
            let sl = v[0].slice(1, 3, 0, 4);
            let stacked = sl.vcat(v[1]);
            let wide = stacked.hcat(stacked);
            (wide * wide).sum_all()
        });
        grad_check(&[a], 1e-6, |_, v| {
            (v[0].diag_col().exp()).sum_all() + (v[0].diag_col().diag_from_col() * v[0]).sum_all()
        });
    }

    #[test]
    fn tril_softplus_diag_differentiates_and_masks_upper() {
        let raw: Array2<f64> = array![[0.3, 99.0], [-0.7, -1.2]];
        let tape = Tape::new();
        let v = tape.param(raw.clone());
        let l = v.tril_softplus_diag();
        let lval = l.to_array();
        assert_eq!(lval[(0, 1)], 0.0);
        assert!((lval[(1, 0)] - -0.7).abs() < 1e-15);
        grad_check(&[raw], 1e-6, |t, v| {
            let l = v[0].tril_softplus_diag();
            let w = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
            (l * w).sum_all()
        });
    }

    #[test]
    fn cholesky_differentiates() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let raw = rng_mat(&mut rng, 4, 4, -1.0, 1.0);
        let w = rng_mat(&mut rng, 4, 4, -1.0, 1.0);
        grad_check(&[raw, w], 1e-5, |t, v| {
            // A = raw·rawᵀ + 4I is comfortably SPD across FD perturbations.
            let a = v[0].matmul(v[0].t()) + t.eye(4).scale(4.0);
            let l = a.cholesky("test").unwrap();
            (l * v[1]).sum_all() + l.diag_col().ln().sum_all()
        });
    }

    #[test]
    fn triangular_solves_differentiate() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let raw = rng_mat(&mut rng, 3, 3, -1.0, 1.0);
        let b = rng_mat(&mut rng, 3, 2, -1.0, 1.0);
        let w = rng_mat(&mut rng, 3, 2, -1.0, 1.0);
        grad_check(&[raw.clone(), b.clone(), w.clone()], 1e-5, |_, v| {
            let l = v[0].tril_softplus_diag();
            let x = l.solve_lower(v[1]);
            (x * x * v[2]).sum_all()
        });
        grad_check(&[raw, b, w], 1e-5, |_, v| {
            let l = v[0].tril_softplus_diag();
            let x = l.solve_lower_t(v[1]);
            (x * x * v[2]).sum_all()
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(array![[2.0]]);
        let k = tape.constant(array![[3.0]]);
        let out = x * k;
        let grads = out.backward();
        assert_eq!(grads.get(x).unwrap()[(0, 0)], 3.0);
        assert!(grads.get(k).is_none());
    }

    #[test]
    fn gradient_accumulates_over_reused_nodes() {
        let tape = Tape::<f64>::new();
        let x = tape.param(array![[1.5]]);
        // y = x·x + x → dy/dx = 2x + 1 = 4
        let y = x * x + x;
        let grads = y.backward();
        assert!((grads.get(x).unwrap()[(0, 0)] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn item_and_shape_accessors() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(x.shape(), (2, 2));
        assert_eq!(x.sum_all().item(), 10.0);
        assert_eq!(tape.len(), 2);
    }
}
