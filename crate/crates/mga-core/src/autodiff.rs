//! Minimal reverse-mode automatic differentiation on matrix-valued nodes.
//!
//! Forward values are computed eagerly as ops are recorded; `backward`
//! replays the tape in reverse to accumulate exact adjoints. Node indices
//! only ever reference earlier nodes, so the recording order is already a
//! topological order.
//!
//! The op set is deliberately small: exactly what the aggregation, attention
//! and loss paths need. No broadcasting beyond the explicit row-vector ops.

use crate::error::{MgaError, Result};
use crate::numerics::matrix::{dot, norm2, Matrix, Real};
use crate::numerics::ops::{softmax_unchecked, NORM_EPS};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, T),
    /// a: n×m plus a 1×m row vector added to every row.
    AddRowVec(usize, usize),
    /// Row-wise softmax of `temperature * x`.
    RowSoftmax(usize, T),
    L2NormRows(usize),
    LayerNormRows {
        x: usize,
        gain: usize,
        bias: usize,
    },
    Relu(usize),
    ConcatRows(usize, usize),
    SliceRows {
        src: usize,
        start: usize,
    },
    MulElem(usize, usize),
    /// n×m → n×1 sum over each row.
    RowSum(usize),
    /// a: n×m with row i scaled by s[(i, 0)]; s: n×1.
    ScaleRows(usize, usize),
    /// → 1×1 mean over all elements.
    MeanAll(usize),
    /// → 1×1 single element.
    Pick {
        src: usize,
        row: usize,
        col: usize,
    },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct TapeGrads<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> TapeGrads<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a node, or zeros of its shape if no path reached it.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Matrix<T> {
        match self.grads[v.0] {
            Some(ref g) => g.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m[(0, 0)]
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn add_row_vec(&mut self, a: Var, row: Var) -> Var {
        let (m, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows(), 1, "add_row_vec expects a 1×m row vector");
        assert_eq!(m.cols(), r.cols(), "add_row_vec column mismatch");
        let mut out = m.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.row(0)) {
                *o = *o + b;
            }
        }
        self.push(out, Op::AddRowVec(a.0, row.0))
    }

    pub fn row_softmax(&mut self, a: Var, temperature: T) -> Var {
        let m = self.value(a);
        let rows: Vec<Vec<T>> = (0..m.rows())
            .map(|i| softmax_unchecked(m.row(i), temperature))
            .collect();
        self.push(Matrix::from_rows(&rows), Op::RowSoftmax(a.0, temperature))
    }

    /// Row-wise l2 normalization. Errors if any row norm is at or below the
    /// zero threshold; `context` names the caller in the error.
    pub fn l2_norm_rows(&mut self, a: Var, context: &str) -> Result<Var> {
        let m = self.value(a);
        let mut rows = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let n = norm2(m.row(i));
            if n.as_f64() <= NORM_EPS {
                return Err(MgaError::NearZeroNorm {
                    context: context.into(),
                    row: Some(i),
                });
            }
            rows.push(m.row(i).iter().map(|&x| x / n).collect());
        }
        Ok(self.push(Matrix::from_rows(&rows), Op::L2NormRows(a.0)))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (m, g, b) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!(g.shape(), (1, m.cols()), "layer_norm gain shape");
        assert_eq!(b.shape(), (1, m.cols()), "layer_norm bias shape");
        let eps = T::from_f64(LAYER_NORM_EPS);
        let d = T::from_f64(m.cols() as f64);
        let mut rows = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let row = m.row(i);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / d;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / d;
            let s = (var + eps).sqrt();
            rows.push(
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| g.row(0)[j] * (v - mean) / s + b.row(0)[j])
                    .collect(),
            );
        }
        self.push(
            Matrix::from_rows(&rows),
            Op::LayerNormRows {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a.0))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).concat_rows(self.value(b));
        self.push(v, Op::ConcatRows(a.0, b.0))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let v = self.value(a).slice_rows(start, count);
        self.push(v, Op::SliceRows { src: a.0, start })
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul_elem(self.value(b));
        self.push(v, Op::MulElem(a.0, b.0))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows(), 1);
        for i in 0..m.rows() {
            out[(i, 0)] = m.row(i).iter().fold(T::zero(), |acc, &x| acc + x);
        }
        self.push(out, Op::RowSum(a.0))
    }

    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let (m, sv) = (self.value(a), self.value(s));
        assert_eq!(sv.shape(), (m.rows(), 1), "scale_rows expects an n×1 scale");
        let mut out = m.clone();
        for i in 0..out.rows() {
            let c = sv[(i, 0)];
            for v in out.row_mut(i) {
                *v = *v * c;
            }
        }
        self.push(out, Op::ScaleRows(a.0, s.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = T::from_f64(m.len() as f64);
        let v = Matrix::from_vec(1, 1, vec![m.sum() / n]);
        self.push(v, Op::MeanAll(a.0))
    }

    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Var {
        let v = Matrix::from_vec(1, 1, vec![self.value(a)[(row, col)]]);
        self.push(
            v,
            Op::Pick {
                src: a.0,
                row,
                col,
            },
        )
    }

    /// Reverse pass from a 1×1 output node seeded with `seed`.
    pub fn backward(&self, output: Var, seed: T) -> TapeGrads<T> {
        assert_eq!(
            self.value(output).shape(),
            (1, 1),
            "backward starts from a scalar node"
        );
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::from_vec(1, 1, vec![seed]));

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match node.op {
                Op::Input => {
                    // leaves keep their accumulated gradient
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.nodes[b].value.transpose());
                    let gb = self.nodes[a].value.transpose().matmul(&g);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g.scale(-T::one()));
                }
                Op::Scale(a, c) => accumulate(&mut grads, a, g.scale(c)),
                Op::AddRowVec(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            gr[(0, j)] = gr[(0, j)] + g[(i, j)];
                        }
                    }
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, row, gr);
                }
                Op::RowSoftmax(a, temperature) => {
                    // per row: τ (diag(y) − y yᵀ) g
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let inner = dot(gr, yr);
                        for j in 0..y.cols() {
                            ga[(i, j)] = temperature * yr[j] * (gr[j] - inner);
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::L2NormRows(a) => {
                    let x = &self.nodes[a].value;
                    let y = &node.value;
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let n = norm2(x.row(i));
                        let inner = dot(g.row(i), y.row(i));
                        for j in 0..x.cols() {
                            ga[(i, j)] = (g[(i, j)] - inner * y[(i, j)]) / n;
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::LayerNormRows { x, gain, bias } => {
                    let xv = &self.nodes[x].value;
                    let gv = &self.nodes[gain].value;
                    let eps = T::from_f64(LAYER_NORM_EPS);
                    let d = T::from_f64(xv.cols() as f64);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    let mut ggain = Matrix::zeros(1, xv.cols());
                    let mut gbias = Matrix::zeros(1, xv.cols());
                    for i in 0..xv.rows() {
                        let row = xv.row(i);
                        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / d;
                        let var = row
                            .iter()
                            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                            / d;
                        let s = (var + eps).sqrt();
                        let xhat: Vec<T> = row.iter().map(|&v| (v - mean) / s).collect();
                        // adjoint w.r.t. xhat
                        let dxhat: Vec<T> = (0..xv.cols())
                            .map(|j| g[(i, j)] * gv[(0, j)])
                            .collect();
                        let mean_dxhat =
                            dxhat.iter().fold(T::zero(), |a, &v| a + v) / d;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat)
                            .fold(T::zero(), |a, (&dv, &xv_)| a + dv * xv_)
                            / d;
                        for j in 0..xv.cols() {
                            gx[(i, j)] =
                                (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / s;
                            ggain[(0, j)] = ggain[(0, j)] + g[(i, j)] * xhat[j];
                            gbias[(0, j)] = gbias[(0, j)] + g[(i, j)];
                        }
                    }
                    accumulate(&mut grads, x, gx);
                    accumulate(&mut grads, gain, ggain);
                    accumulate(&mut grads, bias, gbias);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a].value;
                    let mut ga = g.clone();
                    for (gv, &xv) in ga.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        if xv <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[a].value.rows();
                    let rb = self.nodes[b].value.rows();
                    accumulate(&mut grads, a, g.slice_rows(0, ra));
                    accumulate(&mut grads, b, g.slice_rows(ra, rb));
                }
                Op::SliceRows { src, start } => {
                    let (r, c) = self.nodes[src].value.shape();
                    let mut gs = Matrix::zeros(r, c);
                    for i in 0..g.rows() {
                        for j in 0..c {
                            gs[(start + i, j)] = g[(i, j)];
                        }
                    }
                    accumulate(&mut grads, src, gs);
                }
                Op::MulElem(a, b) => {
                    let ga = g.mul_elem(&self.nodes[b].value);
                    let gb = g.mul_elem(&self.nodes[a].value);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::ScaleRows(a, s) => {
                    let av = &self.nodes[a].value;
                    let sv = &self.nodes[s].value;
                    let mut ga = g.clone();
                    let mut gs = Matrix::zeros(av.rows(), 1);
                    for i in 0..av.rows() {
                        let c = sv[(i, 0)];
                        for v in ga.row_mut(i) {
                            *v = *v * c;
                        }
                        gs[(i, 0)] = dot(g.row(i), av.row(i));
                    }
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, s, gs);
                }
                Op::RowSum(a) => {
                    let (r, c) = self.nodes[a].value.shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[(i, j)] = g[(i, 0)];
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::MeanAll(a) => {
                    let (r, c) = self.nodes[a].value.shape();
                    let scale = g[(0, 0)] / T::from_f64((r * c) as f64);
                    let mut ga = Matrix::zeros(r, c);
                    for v in ga.as_mut_slice() {
                        *v = scale;
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Pick { src, row, col } => {
                    let (r, c) = self.nodes[src].value.shape();
                    let mut ga = Matrix::zeros(r, c);
                    ga[(row, col)] = g[(0, 0)];
                    accumulate(&mut grads, src, ga);
                }
            }
            grads[idx] = Some(g);
        }
        TapeGrads { grads }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Matrix<T>>], idx: usize, g: Matrix<T>) {
    match grads[idx] {
        Some(ref mut acc) => acc.add_assign(&g),
        None => grads[idx] = Some(g),
    }
}
