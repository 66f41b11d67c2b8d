//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s; calling
//! [`Tape::backward`] on a `1 x 1` node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node. Parameters
//! and constants are both plain leaves: the caller decides which gradients it
//! reads. Shape errors inside the tape are programming errors and panic.

use super::matrix::{dot_slices, gemm_into, softmax_row_into};
use super::{Matrix, Scalar};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        x_hat: Matrix<T>,
        inv_std: Vec<T>,
    },
    MaskedSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix<T>,
    },
    Rotation {
        angles: Var,
        step: T,
    },
    DiagExp {
        log_mags: Var,
        bound: T,
    },
    FrobeniusClamp {
        a: Var,
        bound: T,
    },
    Inverse(Var),
    RowTransform {
        x: Var,
        mats: Vec<Var>,
        assign: Vec<usize>,
    },
    GatherScalars(Var, Vec<usize>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Operation record for one differentiable evaluation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m[(0, 0)]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .unwrap_or_else(|e| panic!("tape matmul: {e}"));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .add(self.value(b))
            .unwrap_or_else(|e| panic!("tape add: {e}"));
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .sub(self.value(b))
            .unwrap_or_else(|e| panic!("tape sub: {e}"));
        self.push(value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "tape mul shape");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Matrix::from_raw(x.rows(), x.cols(), data);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    /// Adds the `1 x c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.shape(), (1, x.cols()), "tape add_row shape");
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (o, &b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *o = *o + b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(GELU_A);
        let half = T::lit(0.5);
        let value = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a))
    }

    /// Row-wise layer normalisation with gain and offset rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let (g, b) = (self.value(gain), self.value(bias));
        assert_eq!(g.shape(), (1, d), "layer_norm gain shape");
        assert_eq!(b.shape(), (1, d), "layer_norm bias shape");
        let dt = T::lit(d as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut x_hat = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        let mut value = Matrix::zeros(n, d);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                x_hat[(r, c)] = h;
                value[(r, c)] = h * g.data()[c] + b.data()[c];
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax where `mask[r * cols + c] == false` excludes an entry.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(a);
        let (n, m) = x.shape();
        assert_eq!(mask.len(), n * m, "masked_softmax mask shape");
        let mut value = Matrix::zeros(n, m);
        for r in 0..n {
            let row_mask = &mask[r * m..(r + 1) * m];
            softmax_row_into(x.row(r), row_mask, value.row_mut(r))
                .ok_or(Error::DegenerateRow { row: r })?;
        }
        Ok(self.push(value, Op::MaskedSoftmax(a)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let value = Matrix::from_raw(idx.len(), cols, data);
        self.push(value, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let value = Matrix::from_raw(rows, cols, data);
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height");
            for r in 0..rows {
                value.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let value = Matrix::from_fn(x.rows(), len, |r, c| x[(r, start + c)]);
        self.push(value, Op::SliceCols(a, start))
    }

    /// Mean over rows, giving a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::lit(x.rows() as f64);
        let value = Matrix::from_fn(1, x.cols(), |_, c| {
            (0..x.rows()).map(|r| x[(r, c)]).sum::<T>() / n
        });
        self.push(value, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Matrix::from_raw(1, 1, vec![s]), Op::Sum(a))
    }

    /// Mean cross-entropy of row-wise softmax(`logits`) against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let z = self.value(logits);
        let (n, m) = z.shape();
        assert_eq!(targets.len(), n, "cross_entropy targets");
        assert!(n > 0, "cross_entropy with no rows");
        let mut probs = Matrix::zeros(n, m);
        let all = vec![true; m];
        let mut total = T::zero();
        for r in 0..n {
            let row = z.row(r);
            softmax_row_into(row, &all, probs.row_mut(r)).expect("non-empty row");
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total = total + lse - row[targets[r]];
        }
        let value = Matrix::from_raw(1, 1, vec![total / T::lit(n as f64)]);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Block-diagonal 2x2 rotations by `step * angle_m` from a `1 x m` row.
    pub fn rotation(&mut self, angles: Var, step: T) -> Var {
        let a = self.value(angles);
        assert_eq!(a.rows(), 1, "rotation angles must be a row");
        let value = rotation_matrix(a.data(), step);
        self.push(value, Op::Rotation { angles, step })
    }

    /// `diag(exp(clamp(l, -bound, bound)))` from a `1 x d` row of log-magnitudes.
    pub fn diag_exp(&mut self, log_mags: Var, bound: T) -> Var {
        let l = self.value(log_mags);
        assert_eq!(l.rows(), 1, "diag_exp expects a row");
        let vals: Vec<T> = l
            .data()
            .iter()
            .map(|&x| x.max(-bound).min(bound).exp())
            .collect();
        let value = Matrix::diagonal(&vals);
        self.push(value, Op::DiagExp { log_mags, bound })
    }

    /// Rescales `a` so its Frobenius norm is at most `bound`.
    pub fn frobenius_clamp(&mut self, a: Var, bound: T) -> Var {
        let x = self.value(a);
        let n = x.frobenius_norm();
        let value = if n > bound { x.scale(bound / n) } else { x.clone() };
        self.push(value, Op::FrobeniusClamp { a, bound })
    }

    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).inverse()?;
        Ok(self.push(value, Op::Inverse(a)))
    }

    /// Row `i` of the result is `mats[assign[i]] * x_i` (each row of `x` as a
    /// column vector, transformed by its assigned square matrix).
    pub fn row_transform(&mut self, x: Var, mats: &[Var], assign: &[usize]) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        assert_eq!(assign.len(), n, "row_transform assignment");
        let mut value = Matrix::zeros(n, d);
        for r in 0..n {
            let m = self.value(mats[assign[r]]);
            assert_eq!(m.shape(), (d, d), "row_transform operator shape");
            let xr = xv.row(r);
            for o in 0..d {
                value[(r, o)] = dot_slices(m.row(o), xr);
            }
        }
        self.push(
            value,
            Op::RowTransform {
                x,
                mats: mats.to_vec(),
                assign: assign.to_vec(),
            },
        )
    }

    /// `rows x cols` matrix whose flat entry `k` is `src.data[idx[k]]`.
    pub fn gather_scalars(&mut self, src: Var, idx: &[usize], rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather_scalars shape");
        let s = self.value(src).data();
        let value = Matrix::from_raw(rows, cols, idx.iter().map(|&i| s[i]).collect());
        self.push(value, Op::GatherScalars(src, idx.to_vec()))
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_raw(1, 1, vec![T::one()]));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Matrix::zeros(av.rows(), av.cols());
                gemm_into(g, &bv.transpose(), &mut da);
                accumulate(grads, *a, da);
                let mut db = Matrix::zeros(bv.rows(), bv.cols());
                gemm_into(&av.transpose(), g, &mut db);
                accumulate(grads, *b, db);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, hadamard(g, bv));
                accumulate(grads, *b, hadamard(g, av));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                let sums = Matrix::from_fn(1, g.cols(), |_, c| {
                    (0..g.rows()).map(|r| g[(r, c)]).sum::<T>()
                });
                accumulate(grads, *row, sums);
            }
            Op::Tanh(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gi, &yi)| gi * (T::one() - yi * yi))
                    .collect();
                accumulate(grads, *a, Matrix::from_raw(g.rows(), g.cols(), data));
            }
            Op::Gelu(a) => {
                let c = T::lit(GELU_C);
                let k = T::lit(GELU_A);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gi, &xi)| {
                        let t = (c * (xi + k * xi * xi * xi)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * xi * xi);
                        gi * (half * (T::one() + t) + half * xi * dt)
                    })
                    .collect();
                accumulate(grads, *a, Matrix::from_raw(g.rows(), g.cols(), data));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let (n, d) = x_hat.shape();
                let dt = T::lit(d as f64);
                let mut dgain = Matrix::zeros(1, d);
                let mut dbias = Matrix::zeros(1, d);
                let mut dx = Matrix::zeros(n, d);
                for r in 0..n {
                    let mut dxh = vec![T::zero(); d];
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for c in 0..d {
                        let gi = g[(r, c)];
                        dgain.data_mut()[c] = dgain.data()[c] + gi * x_hat[(r, c)];
                        dbias.data_mut()[c] = dbias.data()[c] + gi;
                        dxh[c] = gi * gv.data()[c];
                        sum_dxh = sum_dxh + dxh[c];
                        sum_dxh_xh = sum_dxh_xh + dxh[c] * x_hat[(r, c)];
                    }
                    let f = inv_std[r] / dt;
                    for c in 0..d {
                        dx[(r, c)] = f * (dt * dxh[c] - sum_dxh - x_hat[(r, c)] * sum_dxh_xh);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dgain);
                accumulate(grads, *bias, dbias);
            }
            Op::MaskedSoftmax(a) => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = dot_slices(g.row(r), y.row(r));
                    for c in 0..y.cols() {
                        dx[(r, c)] = y[(r, c)] * (g[(r, c)] - inner);
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::GatherRows(a, idx) => {
                let src = self.value(*a);
                let mut da = Matrix::zeros(src.rows(), src.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in da.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    let data = g.data()[off * cols..(off + rows) * cols].to_vec();
                    accumulate(grads, p, Matrix::from_raw(rows, cols, data));
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    let part = Matrix::from_fn(rows, cols, |r, c| g[(r, off + c)]);
                    accumulate(grads, p, part);
                    off += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let mut da = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, da);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.value(*a).shape();
                let n = T::lit(rows as f64);
                accumulate(grads, *a, Matrix::from_fn(rows, cols, |_, c| g[(0, c)] / n));
            }
            Op::Sum(a) => {
                let (rows, cols) = self.value(*a).shape();
                let s = g[(0, 0)];
                accumulate(grads, *a, Matrix::from_raw(rows, cols, vec![s; rows * cols]));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = T::lit(probs.rows() as f64);
                let s = g[(0, 0)] / n;
                let mut dz = probs.scale(s);
                for (r, &t) in targets.iter().enumerate() {
                    dz[(r, t)] = dz[(r, t)] - s;
                }
                accumulate(grads, *logits, dz);
            }
            Op::Rotation { angles, step } => {
                let a = self.value(*angles);
                let mut da = Matrix::zeros(1, a.cols());
                for m in 0..a.cols() {
                    let t = *step * a.data()[m];
                    let (sn, cs) = (t.sin(), t.cos());
                    let (i, j) = (2 * m, 2 * m + 1);
                    // d/dt [[c, -s], [s, c]] = [[-s, -c], [c, -s]]
                    let v = -g[(i, i)] * sn - g[(i, j)] * cs + g[(j, i)] * cs - g[(j, j)] * sn;
                    da.data_mut()[m] = v * *step;
                }
                accumulate(grads, *angles, da);
            }
            Op::DiagExp { log_mags, bound } => {
                let l = self.value(*log_mags);
                let data = (0..l.cols())
                    .map(|i| {
                        let li = l.data()[i];
                        if li > -*bound && li < *bound {
                            g[(i, i)] * y[(i, i)]
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(grads, *log_mags, Matrix::from_raw(1, l.cols(), data));
            }
            Op::FrobeniusClamp { a, bound } => {
                let x = self.value(*a);
                let n = x.frobenius_norm();
                if n > *bound {
                    let inner = dot_slices(x.data(), g.data());
                    let f = *bound / n;
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xi, &gi)| f * (gi - xi * inner / (n * n)))
                        .collect();
                    accumulate(grads, *a, Matrix::from_raw(x.rows(), x.cols(), data));
                } else {
                    accumulate(grads, *a, g.clone());
                }
            }
            Op::Inverse(a) => {
                let yt = y.transpose();
                let left = yt.matmul(g).expect("square");
                let da = left.matmul(&yt).expect("square").scale(-T::one());
                accumulate(grads, *a, da);
            }
            Op::RowTransform { x, mats, assign } => {
                let xv = self.value(*x);
                let (n, d) = xv.shape();
                let mut dx = Matrix::zeros(n, d);
                let mut dm: Vec<Matrix<T>> = mats.iter().map(|_| Matrix::zeros(d, d)).collect();
                for r in 0..n {
                    let m = self.value(mats[assign[r]]);
                    let gr = g.row(r);
                    let xr = xv.row(r);
                    let dmr = &mut dm[assign[r]];
                    for o in 0..d {
                        let go = gr[o];
                        if go == T::zero() {
                            continue;
                        }
                        let mrow = m.row(o);
                        for c in 0..d {
                            dx[(r, c)] = dx[(r, c)] + go * mrow[c];
                            dmr[(o, c)] = dmr[(o, c)] + go * xr[c];
                        }
                    }
                }
                accumulate(grads, *x, dx);
                for (&mv, d) in mats.iter().zip(dm) {
                    accumulate(grads, mv, d);
                }
            }
            Op::GatherScalars(src, idx) => {
                let s = self.value(*src);
                let mut ds = Matrix::zeros(s.rows(), s.cols());
                for (k, &i) in idx.iter().enumerate() {
                    ds.data_mut()[i] = ds.data()[i] + g.data()[k];
                }
                accumulate(grads, *src, ds);
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, &x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn hadamard<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Matrix::from_raw(a.rows(), a.cols(), data)
}

/// Block-diagonal rotation matrix with blocks `R(step * angles[m])`.
pub(crate) fn rotation_matrix<T: Scalar>(angles: &[T], step: T) -> Matrix<T> {
    let d = 2 * angles.len();
    let mut m = Matrix::zeros(d, d);
    for (k, &theta) in angles.iter().enumerate() {
        let t = step * theta;
        let (s, c) = (t.sin(), t.cos());
        let (i, j) = (2 * k, 2 * k + 1);
        m[(i, i)] = c;
        m[(i, j)] = -s;
        m[(j, i)] = s;
        m[(j, j)] = c;
    }
    m
}
