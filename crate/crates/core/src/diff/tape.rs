//! Tape-based automatic differentiation over dense f64 matrices.
//!
//! A [`Tape`] is an append-only list of primitive operations; values are
//! computed eagerly on append and cached per node. Reverse-mode [`Tape::vjp`]
//! and forward-mode [`Tape::jvp`] walk the list once. Tensors are rank <= 2
//! (scalars are 1x1, vectors n x 1).
//!
//! Symmetric-matrix primitives (`chol_solve`, `logdet`, `chol_lower`)
//! symmetrize their input inside the forward computation; their adjoints apply
//! the matching (G + Gᵀ)/2 chain so entrywise finite differences agree.
//!
//! Custom-gradient nodes implement the two estimator tricks used for natural
//! gradients: [`Tape::straight_through`] (backward is the identity) and
//! [`Tape::natgrad_map`] (backward is a forward-mode pass through the inverse
//! map).

use nalgebra::{Cholesky, DVector, Dyn};

use crate::error::{Result, SvaeError};
use crate::expfam::special;
use crate::linalg::{sym, Mat, Vec64};
use crate::param_space::Bijector;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub usize);

/// Maps with closed-form inverse JVPs usable as natural-gradient nodes.
#[derive(Debug, Clone)]
pub enum CustomMap {
    Bijector(Bijector),
    /// Packed canonical [S(n²) row-major, m(n), λ, ν] -> packed natural
    /// [S+λmmᵀ, λm, λ, ν+n+2].
    NiwNatural { n: usize },
    /// Packed canonical [S(n²), M(n·m), V(m²), ν] -> packed natural
    /// [S+MVMᵀ, MV, V, ν+n+m+1].
    MniwNatural { n: usize, m: usize },
    /// Concentration α -> natural α - 1.
    DirichletNatural { k: usize },
}

fn unpack(v: &[f64], off: usize, r: usize, c: usize) -> Mat {
    Mat::from_row_slice(r, c, &v[off..off + r * c])
}

fn pack_into(out: &mut Vec<f64>, m: &Mat) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

impl CustomMap {
    pub fn input_dim(&self) -> usize {
        match self {
            CustomMap::Bijector(b) => b.unconstrained_dim(),
            CustomMap::NiwNatural { n } => n * n + n + 2,
            CustomMap::MniwNatural { n, m } => n * n + n * m + m * m + 1,
            CustomMap::DirichletNatural { k } => *k,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            CustomMap::Bijector(b) => b.constrained_dim(),
            other => other.input_dim(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            CustomMap::Bijector(b) => b.forward(x),
            CustomMap::NiwNatural { n } => {
                let n = *n;
                let s = unpack(x, 0, n, n);
                let m = DVector::from_column_slice(&x[n * n..n * n + n]);
                let lambda = x[n * n + n];
                let nu = x[n * n + n + 1];
                let mut out = Vec::with_capacity(x.len());
                pack_into(&mut out, &(&s + (&m * m.transpose()) * lambda));
                out.extend((&m * lambda).iter());
                out.push(lambda);
                out.push(nu + n as f64 + 2.0);
                Ok(out)
            }
            CustomMap::MniwNatural { n, m } => {
                let (n, mm) = (*n, *m);
                let s = unpack(x, 0, n, n);
                let m_mat = unpack(x, n * n, n, mm);
                let v = unpack(x, n * n + n * mm, mm, mm);
                let nu = x[n * n + n * mm + mm * mm];
                let mv = &m_mat * &v;
                let mut out = Vec::with_capacity(x.len());
                pack_into(&mut out, &(&s + &mv * m_mat.transpose()));
                pack_into(&mut out, &mv);
                pack_into(&mut out, &v);
                out.push(nu + (n + mm) as f64 + 1.0);
                Ok(out)
            }
            CustomMap::DirichletNatural { .. } => Ok(x.iter().map(|a| a - 1.0).collect()),
        }
    }

    /// (∂x/∂y)·tangent at the output point `y`: the inverse map's directional
    /// derivative.
    pub fn jvp_inverse(&self, y: &[f64], tangent: &[f64]) -> Result<Vec<f64>> {
        match self {
            CustomMap::Bijector(b) => b.jvp_inverse(y, tangent),
            CustomMap::NiwNatural { n } => {
                let n = *n;
                // Inverse: λ = η₃, m = η₂/λ, S = η₁ - η₂η₂ᵀ/λ, ν = η₄ - n - 2.
                let eta2 = DVector::from_column_slice(&y[n * n..n * n + n]);
                let lambda = y[n * n + n];
                let m = &eta2 / lambda;
                let v1 = unpack(tangent, 0, n, n);
                let v2 = DVector::from_column_slice(&tangent[n * n..n * n + n]);
                let v3 = tangent[n * n + n];
                let v4 = tangent[n * n + n + 1];
                let ds = &v1 - (&v2 * m.transpose() + &m * v2.transpose()) + (&m * m.transpose()) * v3;
                let dm = &v2 / lambda - &m * (v3 / lambda);
                let mut out = Vec::with_capacity(tangent.len());
                pack_into(&mut out, &ds);
                out.extend(dm.iter());
                out.push(v3);
                out.push(v4);
                Ok(out)
            }
            CustomMap::MniwNatural { n, m } => {
                let (n, mm) = (*n, *m);
                // Inverse: V = η₃, M = η₂V⁻¹, S = η₁ - η₂V⁻¹η₂ᵀ, ν = η₄-n-m-1.
                let eta2 = unpack(y, n * n, n, mm);
                let v = sym(&unpack(y, n * n + n * mm, mm, mm));
                let chol = Cholesky::new(v.clone())
                    .ok_or(SvaeError::NotSpd("MNIW natural map inverse V"))?;
                let m_mat = chol.solve(&eta2.transpose()).transpose();
                let v1 = unpack(tangent, 0, n, n);
                let v2 = unpack(tangent, n * n, n, mm);
                let v3 = unpack(tangent, n * n + n * mm, mm, mm);
                let v4 = tangent[n * n + n * mm + mm * mm];
                let ds = &v1 - &v2 * m_mat.transpose() - &m_mat * v2.transpose()
                    + &m_mat * &v3 * m_mat.transpose();
                let dm = chol.solve(&(v2 - &m_mat * &v3).transpose()).transpose();
                let mut out = Vec::with_capacity(tangent.len());
                pack_into(&mut out, &ds);
                pack_into(&mut out, &dm);
                pack_into(&mut out, &v3);
                out.push(v4);
                Ok(out)
            }
            CustomMap::DirichletNatural { .. } => Ok(tangent.to_vec()),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Offset(f64),
    MatMul,
    Transpose,
    Dot,
    CholSolve,
    LogDet,
    CholLower,
    /// Solve Uᵀ-style: given lower-triangular L (input 0) and b (input 1),
    /// computes (Lᵀ)⁻¹ b.
    SolveLowerTransposed,
    Exp,
    Log,
    Softplus,
    Tanh,
    Gelu,
    Sqrt,
    Digamma,
    Lgamma,
    Sum,
    RowSums,
    ColSums,
    BroadcastCols(usize),
    BroadcastRows(usize),
    LogSumExpRows,
    LogSumExpCols,
    LogSumExpAll,
    Slice {
        r0: usize,
        c0: usize,
        rows: usize,
        cols: usize,
    },
    ConcatRows,
    Reshape {
        rows: usize,
        cols: usize,
    },
    StopGradient,
    StraightThrough,
    NatGrad(CustomMap),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<VarId>,
    value: Mat,
}

/// The operation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Lower triangle with halved diagonal (Cholesky differential projection).
fn phi_lower(m: &Mat) -> Mat {
    let n = m.nrows();
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            out[(i, j)] = if i == j { 0.5 * m[(i, j)] } else { m[(i, j)] };
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: VarId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!((v.nrows(), v.ncols()), (1, 1));
        v[(0, 0)]
    }

    fn push(&mut self, op: Op, inputs: Vec<VarId>, value: Mat) -> VarId {
        self.nodes.push(Node { op, inputs, value });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> VarId {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn leaf_vec(&mut self, value: &Vec64) -> VarId {
        self.leaf(Mat::from_column_slice(value.len(), 1, value.as_slice()))
    }

    pub fn leaf_scalar(&mut self, value: f64) -> VarId {
        self.leaf(Mat::from_element(1, 1, value))
    }

    pub fn constant(&mut self, value: Mat) -> VarId {
        self.push(Op::Constant, vec![], value)
    }

    pub fn constant_vec(&mut self, value: &Vec64) -> VarId {
        self.constant(Mat::from_column_slice(value.len(), 1, value.as_slice()))
    }

    pub fn constant_scalar(&mut self, value: f64) -> VarId {
        self.constant(Mat::from_element(1, 1, value))
    }

    fn binary_broadcast(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        if a.shape() == b.shape() {
            Mat::from_fn(a.nrows(), a.ncols(), |i, j| f(a[(i, j)], b[(i, j)]))
        } else if b.shape() == (1, 1) {
            a.map(|x| f(x, b[(0, 0)]))
        } else if a.shape() == (1, 1) {
            b.map(|y| f(a[(0, 0)], y))
        } else {
            panic!(
                "shape mismatch in elementwise op: {:?} vs {:?}",
                a.shape(),
                b.shape()
            );
        }
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = Self::binary_broadcast(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add, vec![a, b], v)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = Self::binary_broadcast(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub, vec![a, b], v)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = Self::binary_broadcast(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul, vec![a, b], v)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> VarId {
        let v = Self::binary_broadcast(self.value(a), self.value(b), |x, y| x / y);
        self.push(Op::Div, vec![a, b], v)
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        let v = -self.value(a).clone();
        self.push(Op::Neg, vec![a], v)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a) * c;
        self.push(Op::Scale(c), vec![a], v)
    }

    pub fn offset(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::Offset(c), vec![a], v)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.ncols(),
            bv.nrows(),
            "matmul inner dims: {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let v = av * bv;
        self.push(Op::MatMul, vec![a, b], v)
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose, vec![a], v)
    }

    /// ⟨a, b⟩ = Σ aᵢⱼ bᵢⱼ as a 1x1 value.
    pub fn dot(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "dot shapes");
        let s: f64 = av.iter().zip(bv.iter()).map(|(x, y)| x * y).sum();
        self.push(Op::Dot, vec![a, b], Mat::from_element(1, 1, s))
    }

    /// sym(A)⁻¹ B via Cholesky.
    pub fn chol_solve(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let s = sym(self.value(a));
        let chol = Cholesky::new(s).ok_or(SvaeError::NotSpd("tape chol_solve"))?;
        let v = chol.solve(self.value(b));
        Ok(self.push(Op::CholSolve, vec![a, b], v))
    }

    /// log|sym(A)| via Cholesky.
    pub fn logdet(&mut self, a: VarId) -> Result<VarId> {
        let s = sym(self.value(a));
        let chol = Cholesky::new(s).ok_or(SvaeError::NotSpd("tape logdet"))?;
        let ld = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Ok(self.push(Op::LogDet, vec![a], Mat::from_element(1, 1, ld)))
    }

    /// Lower Cholesky factor of sym(A).
    pub fn chol_lower(&mut self, a: VarId) -> Result<VarId> {
        let s = sym(self.value(a));
        let chol = Cholesky::new(s).ok_or(SvaeError::NotSpd("tape chol_lower"))?;
        Ok(self.push(Op::CholLower, vec![a], chol.l()))
    }

    /// (Lᵀ)⁻¹ b for lower-triangular L; used by the reparameterized sampler.
    pub fn solve_lower_transposed(&mut self, l: VarId, b: VarId) -> Result<VarId> {
        let lv = self.value(l);
        let bv = self.value(b);
        let x = lv
            .transpose()
            .solve_upper_triangular(bv)
            .ok_or(SvaeError::NotSpd("tape solve_lower_transposed"))?;
        Ok(self.push(Op::SolveLowerTransposed, vec![l, b], x))
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp, vec![a], v)
    }

    pub fn log(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log, vec![a], v)
    }

    pub fn softplus(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(crate::param_space::softplus);
        self.push(Op::Softplus, vec![a], v)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh, vec![a], v)
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(gelu);
        self.push(Op::Gelu, vec![a], v)
    }

    pub fn sqrt(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt, vec![a], v)
    }

    pub fn digamma(&mut self, a: VarId) -> Result<VarId> {
        let mut out = self.value(a).clone();
        for x in out.iter_mut() {
            *x = special::digamma(*x)?;
        }
        Ok(self.push(Op::Digamma, vec![a], out))
    }

    pub fn lgamma(&mut self, a: VarId) -> Result<VarId> {
        let mut out = self.value(a).clone();
        for x in out.iter_mut() {
            *x = special::lgamma(*x)?;
        }
        Ok(self.push(Op::Lgamma, vec![a], out))
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let s: f64 = self.value(a).iter().sum();
        self.push(Op::Sum, vec![a], Mat::from_element(1, 1, s))
    }

    pub fn row_sums(&mut self, a: VarId) -> VarId {
        let v = self.value(a);
        let out = Mat::from_fn(v.nrows(), 1, |i, _| v.row(i).sum());
        self.push(Op::RowSums, vec![a], out)
    }

    pub fn col_sums(&mut self, a: VarId) -> VarId {
        let v = self.value(a);
        let out = Mat::from_fn(1, v.ncols(), |_, j| v.column(j).sum());
        self.push(Op::ColSums, vec![a], out)
    }

    pub fn broadcast_cols(&mut self, a: VarId, cols: usize) -> VarId {
        let v = self.value(a);
        assert_eq!(v.ncols(), 1, "broadcast_cols input must be a column");
        let out = Mat::from_fn(v.nrows(), cols, |i, _| v[(i, 0)]);
        self.push(Op::BroadcastCols(cols), vec![a], out)
    }

    pub fn broadcast_rows(&mut self, a: VarId, rows: usize) -> VarId {
        let v = self.value(a);
        assert_eq!(v.nrows(), 1, "broadcast_rows input must be a row");
        let out = Mat::from_fn(rows, v.ncols(), |_, j| v[(0, j)]);
        self.push(Op::BroadcastRows(rows), vec![a], out)
    }

    pub fn logsumexp_rows(&mut self, a: VarId) -> VarId {
        let v = self.value(a);
        let out = Mat::from_fn(v.nrows(), 1, |i, _| {
            let row: Vec<f64> = v.row(i).iter().cloned().collect();
            special::logsumexp(&row)
        });
        self.push(Op::LogSumExpRows, vec![a], out)
    }

    pub fn logsumexp_cols(&mut self, a: VarId) -> VarId {
        let v = self.value(a);
        let out = Mat::from_fn(1, v.ncols(), |_, j| {
            let col: Vec<f64> = v.column(j).iter().cloned().collect();
            special::logsumexp(&col)
        });
        self.push(Op::LogSumExpCols, vec![a], out)
    }

    pub fn logsumexp_all(&mut self, a: VarId) -> VarId {
        let v: Vec<f64> = self.value(a).iter().cloned().collect();
        let s = special::logsumexp(&v);
        self.push(Op::LogSumExpAll, vec![a], Mat::from_element(1, 1, s))
    }

    pub fn slice(&mut self, a: VarId, r0: usize, c0: usize, rows: usize, cols: usize) -> VarId {
        let v = Mat::from(self.value(a).view((r0, c0), (rows, cols)));
        self.push(
            Op::Slice {
                r0,
                c0,
                rows,
                cols,
            },
            vec![a],
            v,
        )
    }

    /// Vertical concatenation; all inputs must share a column count.
    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let v = self.value(*p);
            out.view_mut((at, 0), (v.nrows(), v.ncols())).copy_from(v);
            at += v.nrows();
        }
        self.push(Op::ConcatRows, parts.to_vec(), out)
    }

    /// Column-major reshape.
    pub fn reshape(&mut self, a: VarId, rows: usize, cols: usize) -> VarId {
        let v = self.value(a);
        assert_eq!(v.len(), rows * cols, "reshape element count");
        let out = Mat::from_iterator(rows, cols, v.iter().cloned());
        self.push(Op::Reshape { rows, cols }, vec![a], out)
    }

    pub fn stop_gradient(&mut self, a: VarId) -> VarId {
        let v = self.value(a).clone();
        self.push(Op::StopGradient, vec![a], v)
    }

    /// Forward value of `computed`, backward passes the cotangent to `x`
    /// unchanged. `x` and `computed` must share a shape.
    pub fn straight_through(&mut self, x: VarId, computed: VarId) -> VarId {
        let v = self.value(computed).clone();
        assert_eq!(
            self.value(x).shape(),
            v.shape(),
            "straight_through shape mismatch"
        );
        self.push(Op::StraightThrough, vec![x, computed], v)
    }

    /// Forward applies `map`; backward replaces reverse-mode with the
    /// forward-mode derivative of the inverse map at the output point.
    pub fn natgrad_map(&mut self, map: CustomMap, x: VarId) -> Result<VarId> {
        let xv = self.value(x);
        assert_eq!(xv.ncols(), 1, "natgrad_map expects a column vector");
        assert_eq!(xv.nrows(), map.input_dim(), "natgrad_map input length");
        let y = map.forward(xv.as_slice())?;
        let out = Mat::from_column_slice(y.len(), 1, &y);
        Ok(self.push(Op::NatGrad(map), vec![x], out))
    }

    /// Recompute every node value from the leaves; used to check replay
    /// determinism.
    pub fn replay(&self) -> Result<Vec<Mat>> {
        let mut vals: Vec<Mat> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let get = |id: &VarId| -> &Mat { &vals[id.0] };
            let v: Mat = match &node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                Op::Add => Self::binary_broadcast(get(&node.inputs[0]), get(&node.inputs[1]), |x, y| x + y),
                Op::Sub => Self::binary_broadcast(get(&node.inputs[0]), get(&node.inputs[1]), |x, y| x - y),
                Op::Mul => Self::binary_broadcast(get(&node.inputs[0]), get(&node.inputs[1]), |x, y| x * y),
                Op::Div => Self::binary_broadcast(get(&node.inputs[0]), get(&node.inputs[1]), |x, y| x / y),
                Op::Neg => -get(&node.inputs[0]).clone(),
                Op::Scale(c) => get(&node.inputs[0]) * *c,
                Op::Offset(c) => get(&node.inputs[0]).map(|x| x + c),
                Op::MatMul => get(&node.inputs[0]) * get(&node.inputs[1]),
                Op::Transpose => get(&node.inputs[0]).transpose(),
                Op::Dot => {
                    let s: f64 = get(&node.inputs[0])
                        .iter()
                        .zip(get(&node.inputs[1]).iter())
                        .map(|(x, y)| x * y)
                        .sum();
                    Mat::from_element(1, 1, s)
                }
                Op::CholSolve => {
                    let chol = Cholesky::new(sym(get(&node.inputs[0])))
                        .ok_or(SvaeError::NotSpd("replay chol_solve"))?;
                    chol.solve(get(&node.inputs[1]))
                }
                Op::LogDet => {
                    let chol = Cholesky::new(sym(get(&node.inputs[0])))
                        .ok_or(SvaeError::NotSpd("replay logdet"))?;
                    Mat::from_element(
                        1,
                        1,
                        2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>(),
                    )
                }
                Op::CholLower => Cholesky::new(sym(get(&node.inputs[0])))
                    .ok_or(SvaeError::NotSpd("replay chol_lower"))?
                    .l(),
                Op::SolveLowerTransposed => get(&node.inputs[0])
                    .transpose()
                    .solve_upper_triangular(get(&node.inputs[1]))
                    .ok_or(SvaeError::NotSpd("replay solve"))?,
                Op::Exp => get(&node.inputs[0]).map(f64::exp),
                Op::Log => get(&node.inputs[0]).map(f64::ln),
                Op::Softplus => get(&node.inputs[0]).map(crate::param_space::softplus),
                Op::Tanh => get(&node.inputs[0]).map(f64::tanh),
                Op::Gelu => get(&node.inputs[0]).map(gelu),
                Op::Sqrt => get(&node.inputs[0]).map(f64::sqrt),
                Op::Digamma => {
                    let mut m = get(&node.inputs[0]).clone();
                    for x in m.iter_mut() {
                        *x = special::digamma(*x)?;
                    }
                    m
                }
                Op::Lgamma => {
                    let mut m = get(&node.inputs[0]).clone();
                    for x in m.iter_mut() {
                        *x = special::lgamma(*x)?;
                    }
                    m
                }
                Op::Sum => Mat::from_element(1, 1, get(&node.inputs[0]).iter().sum()),
                Op::RowSums => {
                    let v = get(&node.inputs[0]);
                    Mat::from_fn(v.nrows(), 1, |i, _| v.row(i).sum())
                }
                Op::ColSums => {
                    let v = get(&node.inputs[0]);
                    Mat::from_fn(1, v.ncols(), |_, j| v.column(j).sum())
                }
                Op::BroadcastCols(c) => {
                    let v = get(&node.inputs[0]);
                    Mat::from_fn(v.nrows(), *c, |i, _| v[(i, 0)])
                }
                Op::BroadcastRows(r) => {
                    let v = get(&node.inputs[0]);
                    Mat::from_fn(*r, v.ncols(), |_, j| v[(0, j)])
                }
                Op::LogSumExpRows => {
                    let v = get(&node.inputs[0]);
                    Mat::from_fn(v.nrows(), 1, |i, _| {
                        special::logsumexp(&v.row(i).iter().cloned().collect::<Vec<_>>())
                    })
                }
                Op::LogSumExpCols => {
                    let v = get(&node.inputs[0]);
                    Mat::from_fn(1, v.ncols(), |_, j| {
                        special::logsumexp(&v.column(j).iter().cloned().collect::<Vec<_>>())
                    })
                }
                Op::LogSumExpAll => {
                    let v: Vec<f64> = get(&node.inputs[0]).iter().cloned().collect();
                    Mat::from_element(1, 1, special::logsumexp(&v))
                }
                Op::Slice {
                    r0,
                    c0,
                    rows,
                    cols,
                } => Mat::from(get(&node.inputs[0]).view((*r0, *c0), (*rows, *cols))),
                Op::ConcatRows => {
                    let cols = get(&node.inputs[0]).ncols();
                    let rows: usize = node.inputs.iter().map(|p| get(p).nrows()).sum();
                    let mut out = Mat::zeros(rows, cols);
                    let mut at = 0;
                    for p in &node.inputs {
                        let v = get(p);
                        out.view_mut((at, 0), (v.nrows(), v.ncols())).copy_from(v);
                        at += v.nrows();
                    }
                    out
                }
                Op::Reshape { rows, cols } => {
                    Mat::from_iterator(*rows, *cols, get(&node.inputs[0]).iter().cloned())
                }
                Op::StopGradient => get(&node.inputs[0]).clone(),
                Op::StraightThrough => get(&node.inputs[1]).clone(),
                Op::NatGrad(map) => {
                    let y = map.forward(get(&node.inputs[0]).as_slice())?;
                    Mat::from_column_slice(y.len(), 1, &y)
                }
            };
            vals.push(v);
        }
        Ok(vals)
    }

    fn spd_chol_of(&self, id: VarId) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(sym(self.value(id))).ok_or(SvaeError::NotSpd("tape backward cholesky"))
    }

    /// Reverse-mode: cotangents of every node reachable from `output`, seeded
    /// with (output, cotangent) pairs. Multiple seeds accumulate.
    pub fn vjp_multi(&self, seeds: &[(VarId, Mat)]) -> Result<Vec<Option<Mat>>> {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        for (id, cot) in seeds {
            assert_eq!(
                self.value(*id).shape(),
                cot.shape(),
                "cotangent shape mismatch at seed"
            );
            match &mut grads[id.0] {
                Some(g) => *g += cot,
                slot => *slot = Some(cot.clone()),
            }
        }

        // Helper to accumulate into an input slot, reducing broadcasts.
        fn acc(grads: &mut Vec<Option<Mat>>, id: VarId, shape: (usize, usize), g: Mat) {
            let g = if g.shape() == shape {
                g
            } else if shape == (1, 1) {
                Mat::from_element(1, 1, g.iter().sum())
            } else {
                panic!("gradient shape {:?} vs input {:?}", g.shape(), shape);
            };
            match &mut grads[id.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[idx].clone() else {
                continue;
            };
            let node = &self.nodes[idx];
            let in_shape = |k: usize| self.value(node.inputs[k]).shape();
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add => {
                    acc(&mut grads, node.inputs[0], in_shape(0), gout.clone());
                    acc(&mut grads, node.inputs[1], in_shape(1), gout);
                }
                Op::Sub => {
                    acc(&mut grads, node.inputs[0], in_shape(0), gout.clone());
                    acc(&mut grads, node.inputs[1], in_shape(1), -gout);
                }
                Op::Mul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (av, bv) = (self.value(a), self.value(b));
                    let ga = Self::binary_broadcast(&gout, bv, |g, y| g * y);
                    let gb = Self::binary_broadcast(&gout, av, |g, x| g * x);
                    acc(&mut grads, a, in_shape(0), ga);
                    acc(&mut grads, b, in_shape(1), gb);
                }
                Op::Div => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (av, bv) = (self.value(a), self.value(b));
                    let ga = Self::binary_broadcast(&gout, bv, |g, y| g / y);
                    let q = Self::binary_broadcast(av, bv, |x, y| x / (y * y));
                    let gb = Self::binary_broadcast(&gout, &q, |g, z| -g * z);
                    acc(&mut grads, a, in_shape(0), ga);
                    acc(&mut grads, b, in_shape(1), gb);
                }
                Op::Neg => acc(&mut grads, node.inputs[0], in_shape(0), -gout),
                Op::Scale(c) => acc(&mut grads, node.inputs[0], in_shape(0), gout * *c),
                Op::Offset(_) => acc(&mut grads, node.inputs[0], in_shape(0), gout),
                Op::MatMul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let ga = &gout * self.value(b).transpose();
                    let gb = self.value(a).transpose() * &gout;
                    acc(&mut grads, a, in_shape(0), ga);
                    acc(&mut grads, b, in_shape(1), gb);
                }
                Op::Transpose => {
                    acc(&mut grads, node.inputs[0], in_shape(0), gout.transpose())
                }
                Op::Dot => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let s = gout[(0, 0)];
                    acc(&mut grads, a, in_shape(0), self.value(b) * s);
                    acc(&mut grads, b, in_shape(1), self.value(a) * s);
                }
                Op::CholSolve => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let chol = self.spd_chol_of(a)?;
                    let gb = chol.solve(&gout);
                    let x = &node.value;
                    let gs = -&gb * x.transpose();
                    let ga = (&gs + gs.transpose()) * 0.5;
                    acc(&mut grads, a, in_shape(0), ga);
                    acc(&mut grads, b, in_shape(1), gb);
                }
                Op::LogDet => {
                    let a = node.inputs[0];
                    let chol = self.spd_chol_of(a)?;
                    let n = self.value(a).nrows();
                    let inv = chol.solve(&Mat::identity(n, n));
                    acc(&mut grads, a, in_shape(0), inv * gout[(0, 0)]);
                }
                Op::CholLower => {
                    let a = node.inputs[0];
                    let l = &node.value;
                    let p = phi_lower(&(l.transpose() * &gout));
                    let sym_p = (&p + p.transpose()) * 0.5;
                    // Ā = L⁻ᵀ symP L⁻¹ computed via triangular solves.
                    let tmp = l
                        .transpose()
                        .solve_upper_triangular(&sym_p)
                        .ok_or(SvaeError::NotSpd("chol_lower backward"))?;
                    let ga = l
                        .transpose()
                        .solve_upper_triangular(&tmp.transpose())
                        .ok_or(SvaeError::NotSpd("chol_lower backward"))?
                        .transpose();
                    // Symmetrize-chain for the sym() in the forward.
                    let ga = (&ga + ga.transpose()) * 0.5;
                    acc(&mut grads, a, in_shape(0), ga);
                }
                Op::SolveLowerTransposed => {
                    // X = (Lᵀ)⁻¹ b: gb = L⁻¹ ḡ; gL = -(gb Xᵀ)ᵀ masked lower.
                    let (lid, bid) = (node.inputs[0], node.inputs[1]);
                    let l = self.value(lid);
                    let gb = l
                        .clone()
                        .solve_lower_triangular(&gout)
                        .ok_or(SvaeError::NotSpd("solve backward"))?;
                    let x = &node.value;
                    // d/dL of (Lᵀ)⁻¹b: gL = -X gbᵀ ... derive: U = Lᵀ, gU = -U⁻ᵀ ḡ Xᵀ
                    // = -gb Xᵀ; gL = gUᵀ = -X gbᵀ, masked to lower triangle.
                    let mut gl = -x * gb.transpose();
                    let n = gl.nrows();
                    for i in 0..n {
                        for j in i + 1..n {
                            gl[(i, j)] = 0.0;
                        }
                    }
                    acc(&mut grads, lid, in_shape(0), gl);
                    acc(&mut grads, bid, in_shape(1), gb);
                }
                Op::Exp => {
                    let g = gout.zip_map(&node.value, |g, y| g * y);
                    acc(&mut grads, node.inputs[0], in_shape(0), g);
                }
                Op::Log => {
                    let g = gout.zip_map(self.value(node.inputs[0]), |g, x| g / x);
                    acc(&mut grads, node.inputs[0], in_shape(0), g);
                }
                Op::Softplus => {
                    let g = gout.zip_map(self.value(node.inputs[0]), |g, x| g * sigmoid(x));
                    acc(&mut grads, node.inputs[0], in_shape(0), g);
                }
                Op::Tanh => {
                    let g = gout.zip_map(&node.value, |g, y| g * (1.0 - y * y));
                    acc(&mut grads, node.inputs[0], in_shape(0), g);
                }
                Op::Gelu => {
                    let g = gout.zip_map(self.value(node.inputs[0]), |g, x| g * gelu_prime(x));
                    acc(&mut grads, node.inputs[0], in_shape(0), g);
                }
                Op::Sqrt => {
                    let g = gout.zip_map(&node.value, |g, y| g / (2.0 * y));
                    acc(&mut grads, node.inputs[0], in_shape(0), g);
                }
                Op::Digamma => {
                    let mut g = gout.clone();
                    for (gi, xi) in g.iter_mut().zip(self.value(node.inputs[0]).iter()) {
                        *gi *= special::trigamma(*xi)?;
                    }
                    acc(&mut grads, node.inputs[0], in_shape(0), g);
                }
                Op::Lgamma => {
                    let mut g = gout.clone();
                    for (gi, xi) in g.iter_mut().zip(self.value(node.inputs[0]).iter()) {
                        *gi *= special::digamma(*xi)?;
                    }
                    acc(&mut grads, node.inputs[0], in_shape(0), g);
                }
                Op::Sum => {
                    let (r, c) = in_shape(0);
                    acc(
                        &mut grads,
                        node.inputs[0],
                        (r, c),
                        Mat::from_element(r, c, gout[(0, 0)]),
                    );
                }
                Op::RowSums => {
                    let (r, c) = in_shape(0);
                    let g = Mat::from_fn(r, c, |i, _| gout[(i, 0)]);
                    acc(&mut grads, node.inputs[0], (r, c), g);
                }
                Op::ColSums => {
                    let (r, c) = in_shape(0);
                    let g = Mat::from_fn(r, c, |_, j| gout[(0, j)]);
                    acc(&mut grads, node.inputs[0], (r, c), g);
                }
                Op::BroadcastCols(_) => {
                    let g = Mat::from_fn(gout.nrows(), 1, |i, _| gout.row(i).sum());
                    acc(&mut grads, node.inputs[0], in_shape(0), g);
                }
                Op::BroadcastRows(_) => {
                    let g = Mat::from_fn(1, gout.ncols(), |_, j| gout.column(j).sum());
                    acc(&mut grads, node.inputs[0], in_shape(0), g);
                }
                Op::LogSumExpRows => {
                    let x = self.value(node.inputs[0]);
                    let g = Mat::from_fn(x.nrows(), x.ncols(), |i, j| {
                        gout[(i, 0)] * (x[(i, j)] - node.value[(i, 0)]).exp()
                    });
                    acc(&mut grads, node.inputs[0], in_shape(0), g);
                }
                Op::LogSumExpCols => {
                    let x = self.value(node.inputs[0]);
                    let g = Mat::from_fn(x.nrows(), x.ncols(), |i, j| {
                        gout[(0, j)] * (x[(i, j)] - node.value[(0, j)]).exp()
                    });
                    acc(&mut grads, node.inputs[0], in_shape(0), g);
                }
                Op::LogSumExpAll => {
                    let x = self.value(node.inputs[0]);
                    let g = Mat::from_fn(x.nrows(), x.ncols(), |i, j| {
                        gout[(0, 0)] * (x[(i, j)] - node.value[(0, 0)]).exp()
                    });
                    acc(&mut grads, node.inputs[0], in_shape(0), g);
                }
                Op::Slice {
                    r0,
                    c0,
                    rows,
                    cols,
                } => {
                    let (r, c) = in_shape(0);
                    let mut g = Mat::zeros(r, c);
                    g.view_mut((*r0, *c0), (*rows, *cols)).copy_from(&gout);
                    acc(&mut grads, node.inputs[0], (r, c), g);
                }
                Op::ConcatRows => {
                    let mut at = 0;
                    for p in &node.inputs {
                        let (r, c) = self.value(*p).shape();
                        let g = Mat::from(gout.view((at, 0), (r, c)));
                        acc(&mut grads, *p, (r, c), g);
                        at += r;
                    }
                }
                Op::Reshape { .. } => {
                    let (r, c) = in_shape(0);
                    let g = Mat::from_iterator(r, c, gout.iter().cloned());
                    acc(&mut grads, node.inputs[0], (r, c), g);
                }
                Op::StopGradient => {}
                Op::StraightThrough => {
                    acc(&mut grads, node.inputs[0], in_shape(0), gout);
                }
                Op::NatGrad(map) => {
                    let y: Vec<f64> = node.value.as_slice().to_vec();
                    let t: Vec<f64> = gout.as_slice().to_vec();
                    let gx = map.jvp_inverse(&y, &t)?;
                    acc(
                        &mut grads,
                        node.inputs[0],
                        in_shape(0),
                        Mat::from_column_slice(gx.len(), 1, &gx),
                    );
                }
            }
        }
        Ok(grads)
    }

    /// Reverse-mode from a single output.
    pub fn vjp(&self, output: VarId, cotangent: Mat) -> Result<Vec<Option<Mat>>> {
        self.vjp_multi(&[(output, cotangent)])
    }

    /// Forward-mode: tangents of every node given leaf tangents (by VarId).
    /// Nodes without tangent dependencies get zero tangents.
    pub fn jvp(&self, seeds: &[(VarId, Mat)]) -> Result<Vec<Mat>> {
        let mut tangents: Vec<Mat> = Vec::with_capacity(self.nodes.len());
        let seed_of = |id: usize| -> Option<&Mat> {
            seeds.iter().find(|(v, _)| v.0 == id).map(|(_, t)| t)
        };
        for idx in 0..self.nodes.len() {
            let node = &self.nodes[idx];
            let zero = || Mat::zeros(node.value.nrows(), node.value.ncols());
            let t_in = |k: usize| -> &Mat { &tangents[node.inputs[k].0] };
            let t: Mat = match &node.op {
                Op::Leaf | Op::Constant => match seed_of(idx) {
                    Some(t) => {
                        assert_eq!(t.shape(), node.value.shape(), "tangent shape");
                        t.clone()
                    }
                    None => zero(),
                },
                Op::Add => Self::binary_broadcast(t_in(0), t_in(1), |x, y| x + y),
                Op::Sub => Self::binary_broadcast(t_in(0), t_in(1), |x, y| x - y),
                Op::Mul => {
                    let (av, bv) = (self.value(node.inputs[0]), self.value(node.inputs[1]));
                    let t1 = Self::binary_broadcast(t_in(0), bv, |dx, y| dx * y);
                    let t2 = Self::binary_broadcast(av, t_in(1), |x, dy| x * dy);
                    Self::binary_broadcast(&t1, &t2, |a, b| a + b)
                }
                Op::Div => {
                    let (av, bv) = (self.value(node.inputs[0]), self.value(node.inputs[1]));
                    let t1 = Self::binary_broadcast(t_in(0), bv, |dx, y| dx / y);
                    let q = Self::binary_broadcast(av, bv, |x, y| x / (y * y));
                    let t2 = Self::binary_broadcast(t_in(1), &q, |dy, z| dy * z);
                    Self::binary_broadcast(&t1, &t2, |a, b| a - b)
                }
                Op::Neg => -t_in(0).clone(),
                Op::Scale(c) => t_in(0) * *c,
                Op::Offset(_) => t_in(0).clone(),
                Op::MatMul => {
                    t_in(0) * self.value(node.inputs[1]) + self.value(node.inputs[0]) * t_in(1)
                }
                Op::Transpose => t_in(0).transpose(),
                Op::Dot => {
                    let s: f64 = t_in(0)
                        .iter()
                        .zip(self.value(node.inputs[1]).iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        + self
                            .value(node.inputs[0])
                            .iter()
                            .zip(t_in(1).iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    Mat::from_element(1, 1, s)
                }
                Op::CholSolve => {
                    let chol = self.spd_chol_of(node.inputs[0])?;
                    let ds = sym(t_in(0));
                    chol.solve(&(t_in(1) - &ds * &node.value))
                }
                Op::LogDet => {
                    let chol = self.spd_chol_of(node.inputs[0])?;
                    let ds = sym(t_in(0));
                    let solved = chol.solve(&ds);
                    Mat::from_element(1, 1, solved.trace())
                }
                Op::CholLower => {
                    let l = &node.value;
                    let ds = sym(t_in(0));
                    let a = l
                        .clone()
                        .solve_lower_triangular(&ds)
                        .ok_or(SvaeError::NotSpd("jvp chol_lower"))?;
                    let b = l
                        .clone()
                        .solve_lower_triangular(&a.transpose())
                        .ok_or(SvaeError::NotSpd("jvp chol_lower"))?
                        .transpose();
                    l * phi_lower(&b)
                }
                Op::SolveLowerTransposed => {
                    let l = self.value(node.inputs[0]);
                    let dl = t_in(0);
                    let rhs = t_in(1) - dl.transpose() * &node.value;
                    l.transpose()
                        .solve_upper_triangular(&rhs)
                        .ok_or(SvaeError::NotSpd("jvp solve"))?
                }
                Op::Exp => t_in(0).zip_map(&node.value, |dx, y| dx * y),
                Op::Log => t_in(0).zip_map(self.value(node.inputs[0]), |dx, x| dx / x),
                Op::Softplus => {
                    t_in(0).zip_map(self.value(node.inputs[0]), |dx, x| dx * sigmoid(x))
                }
                Op::Tanh => t_in(0).zip_map(&node.value, |dx, y| dx * (1.0 - y * y)),
                Op::Gelu => t_in(0).zip_map(self.value(node.inputs[0]), |dx, x| dx * gelu_prime(x)),
                Op::Sqrt => t_in(0).zip_map(&node.value, |dx, y| dx / (2.0 * y)),
                Op::Digamma => {
                    let mut t = t_in(0).clone();
                    for (ti, xi) in t.iter_mut().zip(self.value(node.inputs[0]).iter()) {
                        *ti *= special::trigamma(*xi)?;
                    }
                    t
                }
                Op::Lgamma => {
                    let mut t = t_in(0).clone();
                    for (ti, xi) in t.iter_mut().zip(self.value(node.inputs[0]).iter()) {
                        *ti *= special::digamma(*xi)?;
                    }
                    t
                }
                Op::Sum => Mat::from_element(1, 1, t_in(0).iter().sum()),
                Op::RowSums => {
                    let t = t_in(0);
                    Mat::from_fn(t.nrows(), 1, |i, _| t.row(i).sum())
                }
                Op::ColSums => {
                    let t = t_in(0);
                    Mat::from_fn(1, t.ncols(), |_, j| t.column(j).sum())
                }
                Op::BroadcastCols(c) => {
                    let t = t_in(0);
                    Mat::from_fn(t.nrows(), *c, |i, _| t[(i, 0)])
                }
                Op::BroadcastRows(r) => {
                    let t = t_in(0);
                    Mat::from_fn(*r, t.ncols(), |_, j| t[(0, j)])
                }
                Op::LogSumExpRows => {
                    let x = self.value(node.inputs[0]);
                    let t = t_in(0);
                    Mat::from_fn(x.nrows(), 1, |i, _| {
                        (0..x.ncols())
                            .map(|j| (x[(i, j)] - node.value[(i, 0)]).exp() * t[(i, j)])
                            .sum()
                    })
                }
                Op::LogSumExpCols => {
                    let x = self.value(node.inputs[0]);
                    let t = t_in(0);
                    Mat::from_fn(1, x.ncols(), |_, j| {
                        (0..x.nrows())
                            .map(|i| (x[(i, j)] - node.value[(0, j)]).exp() * t[(i, j)])
                            .sum()
                    })
                }
                Op::LogSumExpAll => {
                    let x = self.value(node.inputs[0]);
                    let t = t_in(0);
                    let s: f64 = x
                        .iter()
                        .zip(t.iter())
                        .map(|(xi, ti)| (xi - node.value[(0, 0)]).exp() * ti)
                        .sum();
                    Mat::from_element(1, 1, s)
                }
                Op::Slice {
                    r0,
                    c0,
                    rows,
                    cols,
                } => Mat::from(t_in(0).view((*r0, *c0), (*rows, *cols))),
                Op::ConcatRows => {
                    let cols = t_in(0).ncols();
                    let rows: usize = node.inputs.iter().map(|p| tangents[p.0].nrows()).sum();
                    let mut out = Mat::zeros(rows, cols);
                    let mut at = 0;
                    for p in &node.inputs {
                        let v = &tangents[p.0];
                        out.view_mut((at, 0), (v.nrows(), v.ncols())).copy_from(v);
                        at += v.nrows();
                    }
                    out
                }
                Op::Reshape { rows, cols } => {
                    Mat::from_iterator(*rows, *cols, t_in(0).iter().cloned())
                }
                Op::StopGradient => zero(),
                Op::StraightThrough => t_in(0).clone(),
                Op::NatGrad(_) => {
                    return Err(SvaeError::Domain(
                        "forward-mode through a natural-gradient node is not defined".into(),
                    ))
                }
            };
            tangents.push(t);
        }
        Ok(tangents)
    }
}

/// Convenience: pull the gradient for a leaf out of a vjp result.
pub fn grad_of(grads: &[Option<Mat>], id: VarId) -> Mat {
    grads[id.0]
        .clone()
        .expect("no gradient reached this node")
}

pub fn grad_or_zero(grads: &[Option<Mat>], id: VarId, rows: usize, cols: usize) -> Mat {
    grads[id.0]
        .clone()
        .unwrap_or_else(|| Mat::zeros(rows, cols))
}
