//! Role, relation and instance transport operators and their journeys.
//!
//! A [`RoleOperator`] is a `d x d` matrix with one of three parameterisations:
//! block-diagonal 2x2 rotations, a clamped positive diagonal, or identity plus
//! a norm-bounded low-rank term. All three keep singular values inside
//! `[1/KAPPA, KAPPA]` so inverses stay well conditioned. A [`Journey`] is the
//! ordered product of operators and inverses along a path, for example
//! `R_a R_b^{-1}` from role `a` to role `b`.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::tape::rotation_matrix;
use crate::numerics::{Matrix, Scalar, Vector};
use crate::schema::Slot;

/// Stability clamp on singular values: every operator lies in `[1/KAPPA, KAPPA]`.
pub const KAPPA: f64 = 10.0;

/// Bound on `||U V^T||_F` for low-rank operators. `I + A` with `||A||_2 <= 1 - 1/KAPPA`
/// has singular values in `[1/KAPPA, 2 - 1/KAPPA]`.
pub const LOW_RANK_NORM_BOUND: f64 = 1.0 - 1.0 / KAPPA;

/// RoPE base for default rotation frequencies.
pub const ROPE_BASE: f64 = 10000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    Rotation,
    Diagonal,
    LowRank { rank: usize },
}

impl ParamKind {
    /// Number of free parameters for a `dim x dim` operator of this kind.
    pub fn param_count(self, dim: usize) -> usize {
        match self {
            ParamKind::Rotation => dim / 2,
            ParamKind::Diagonal => dim,
            ParamKind::LowRank { rank } => 2 * dim * rank,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(ParamKind::Rotation),
            "diagonal" => Ok(ParamKind::Diagonal),
            other => match other.strip_prefix("low_rank") {
                Some("") => Ok(ParamKind::LowRank { rank: 2 }),
                Some(r) => r
                    .trim_start_matches(':')
                    .parse()
                    .map(|rank| ParamKind::LowRank { rank })
                    .map_err(|_| Error::Config(format!("bad low-rank spec `{s}`"))),
                None => Err(Error::Config(format!("unknown operator kind `{s}`"))),
            },
        }
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamKind::Rotation => f.write_str("rotation"),
            ParamKind::Diagonal => f.write_str("diagonal"),
            ParamKind::LowRank { rank } => write!(f, "low_rank:{rank}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OperatorParams<T> {
    /// Blocks `R(step * freqs[m])`.
    Rotation { freqs: Vec<T>, step: T },
    /// Log-magnitudes, already clamped to `[-ln KAPPA, ln KAPPA]`.
    Diagonal { log_mags: Vec<T> },
    /// `I + U V^T` with `U, V` of shape `dim x rank`.
    LowRank { u: Matrix<T>, v: Matrix<T> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoleOperator<T> {
    dim: usize,
    params: OperatorParams<T>,
    realized: Matrix<T>,
}

/// RoPE frequency schedule `base^{-2m/d}` for `m = 0..d/2`.
pub fn rope_freqs<T: Scalar>(dim: usize) -> Vec<T> {
    (0..dim / 2)
        .map(|m| T::lit(ROPE_BASE.powf(-2.0 * m as f64 / dim as f64)))
        .collect()
}

/// Block-diagonal rotation by `step_index * freqs[m]` in block `m`.
pub fn realize_rotation<T: Scalar>(step_index: i64, freqs: &[T]) -> Result<RoleOperator<T>> {
    RoleOperator::rotation(freqs.to_vec(), T::lit(step_index as f64))
}

impl<T: Scalar> RoleOperator<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            params: OperatorParams::Diagonal {
                log_mags: vec![T::zero(); dim],
            },
            realized: Matrix::identity(dim),
        }
    }

    pub fn rotation(freqs: Vec<T>, step: T) -> Result<Self> {
        if freqs.iter().any(|f| !f.is_finite()) || !step.is_finite() {
            return Err(Error::NonFinite("rotation parameters".into()));
        }
        let realized = rotation_matrix(&freqs, step);
        Ok(Self {
            dim: 2 * freqs.len(),
            params: OperatorParams::Rotation { freqs, step },
            realized,
        })
    }

    /// Rotation of an explicit dimension; odd dimensions are rejected.
    pub fn rotation_with_dim(dim: usize, freqs: Vec<T>, step: T) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::OddDimension(dim));
        }
        if freqs.len() != dim / 2 {
            return Err(Error::DimensionMismatch {
                op: "rotation",
                left: (dim / 2, 1),
                right: (freqs.len(), 1),
            });
        }
        Self::rotation(freqs, step)
    }

    /// Positive diagonal operator; log-magnitudes are clamped to the
    /// stability range.
    pub fn diagonal(log_mags: Vec<T>) -> Result<Self> {
        if log_mags.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite("diagonal parameters".into()));
        }
        let bound = T::lit(KAPPA.ln());
        let log_mags: Vec<T> = log_mags.into_iter().map(|l| l.max(-bound).min(bound)).collect();
        let realized = Matrix::diagonal(&log_mags.iter().map(|l| l.exp()).collect::<Vec<_>>());
        Ok(Self {
            dim: log_mags.len(),
            params: OperatorParams::Diagonal { log_mags },
            realized,
        })
    }

    /// `I + U V^T`, with `U V^T` rescaled so its Frobenius norm is at most
    /// [`LOW_RANK_NORM_BOUND`].
    pub fn low_rank(u: Matrix<T>, v: Matrix<T>) -> Result<Self> {
        if u.shape() != v.shape() {
            return Err(Error::DimensionMismatch {
                op: "low_rank",
                left: u.shape(),
                right: v.shape(),
            });
        }
        if !u.is_finite() || !v.is_finite() {
            return Err(Error::NonFinite("low-rank factors".into()));
        }
        let a = u.matmul(&v.transpose())?;
        let norm = a.frobenius_norm();
        let bound = T::lit(LOW_RANK_NORM_BOUND);
        let u = if norm > bound { u.scale(bound / norm) } else { u };
        Ok(Self::low_rank_unclamped(u, v))
    }

    fn low_rank_unclamped(u: Matrix<T>, v: Matrix<T>) -> Self {
        let dim = u.rows();
        let realized = Matrix::identity(dim)
            .add(&u.matmul(&v.transpose()).expect("factor shapes"))
            .expect("square");
        Self {
            dim,
            params: OperatorParams::LowRank { u, v },
            realized,
        }
    }

    /// Builds an operator of `kind` from a flat parameter array, applying the
    /// kind's stability clamp.
    pub fn from_params(kind: ParamKind, dim: usize, params: &[T]) -> Result<Self> {
        if params.len() != kind.param_count(dim) {
            return Err(Error::DimensionMismatch {
                op: "RoleOperator::from_params",
                left: (kind.param_count(dim), 1),
                right: (params.len(), 1),
            });
        }
        match kind {
            ParamKind::Rotation => Self::rotation_with_dim(dim, params.to_vec(), T::one()),
            ParamKind::Diagonal => Self::diagonal(params.to_vec()),
            ParamKind::LowRank { rank } => {
                let half = dim * rank;
                let u = Matrix::from_vec(dim, rank, params[..half].to_vec())?;
                let v = Matrix::from_vec(dim, rank, params[half..].to_vec())?;
                Self::low_rank(u, v)
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> ParamKind {
        match &self.params {
            OperatorParams::Rotation { .. } => ParamKind::Rotation,
            OperatorParams::Diagonal { .. } => ParamKind::Diagonal,
            OperatorParams::LowRank { u, .. } => ParamKind::LowRank { rank: u.cols() },
        }
    }

    pub fn params(&self) -> &OperatorParams<T> {
        &self.params
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.realized
    }
}

/// Inverse operator: transpose for rotations, reciprocal for diagonals and
/// a Woodbury update for low-rank operators.
pub fn invert<T: Scalar>(op: &RoleOperator<T>) -> Result<RoleOperator<T>> {
    match &op.params {
        OperatorParams::Rotation { freqs, step } => Ok(RoleOperator {
            dim: op.dim,
            params: OperatorParams::Rotation {
                freqs: freqs.clone(),
                step: -*step,
            },
            realized: op.realized.transpose(),
        }),
        OperatorParams::Diagonal { log_mags } => {
            let recip: Vec<T> = (0..op.dim).map(|i| T::one() / op.realized[(i, i)]).collect();
            Ok(RoleOperator {
                dim: op.dim,
                params: OperatorParams::Diagonal {
                    log_mags: log_mags.iter().map(|&l| -l).collect(),
                },
                realized: Matrix::diagonal(&recip),
            })
        }
        OperatorParams::LowRank { u, v } => {
            // (I + U V^T)^{-1} = I - U (I_r + V^T U)^{-1} V^T
            let rank = u.cols();
            let core = Matrix::identity(rank).add(&v.transpose().matmul(u)?)?;
            let core_inv = core.inverse()?;
            let u_new = u.matmul(&core_inv)?.scale(-T::one());
            Ok(RoleOperator::low_rank_unclamped(u_new, v.clone()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Names one factor of a journey.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum OperatorRef {
    Slot(Slot),
    Relation(String),
    Instance(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Journey<T> {
    pub matrix: Matrix<T>,
    pub path: Vec<(OperatorRef, Direction)>,
    pub head: usize,
}

impl<T: Scalar> Journey<T> {
    /// Concatenates two journeys: `self` then `other`.
    pub fn compose(&self, other: &Journey<T>) -> Result<Journey<T>> {
        let mut path = self.path.clone();
        path.extend(other.path.iter().cloned());
        Ok(Journey {
            matrix: self.matrix.matmul(&other.matrix)?,
            path,
            head: self.head,
        })
    }

    /// Recomputes the product of the recorded path from `table`.
    pub fn recompute(&self, table: &OperatorTable<T>) -> Result<Matrix<T>> {
        let mut m = Matrix::identity(table.dim());
        for (r, dir) in &self.path {
            let op = table.resolve(r, self.head)?;
            let factor = match dir {
                Direction::Forward => op,
                Direction::Inverse => invert(&op)?,
            };
            m = m.matmul(factor.matrix())?;
        }
        Ok(m)
    }
}

/// Operators for slots, relations and instances, one per head when
/// `per_head` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorTable<T> {
    dim: usize,
    head_count: usize,
    per_head: bool,
    freqs: Vec<T>,
    slot_ops: BTreeMap<String, Vec<RoleOperator<T>>>,
    relation_ops: BTreeMap<String, Vec<RoleOperator<T>>>,
    instance_ops: BTreeMap<String, Vec<RoleOperator<T>>>,
}

impl<T: Scalar> OperatorTable<T> {
    /// Empty table with RoPE frequencies for positional slots.
    pub fn new(dim: usize, head_count: usize, per_head: bool) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::OddDimension(dim));
        }
        Ok(Self {
            dim,
            head_count: head_count.max(1),
            per_head,
            freqs: rope_freqs(dim),
            slot_ops: BTreeMap::new(),
            relation_ops: BTreeMap::new(),
            instance_ops: BTreeMap::new(),
        })
    }

    pub fn with_freqs(mut self, freqs: Vec<T>) -> Result<Self> {
        if freqs.len() != self.dim / 2 {
            return Err(Error::DimensionMismatch {
                op: "with_freqs",
                left: (self.dim / 2, 1),
                right: (freqs.len(), 1),
            });
        }
        self.freqs = freqs;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn head_count(&self) -> usize {
        self.head_count
    }

    pub fn per_head(&self) -> bool {
        self.per_head
    }

    pub fn freqs(&self) -> &[T] {
        &self.freqs
    }

    fn heads_needed(&self) -> usize {
        if self.per_head {
            self.head_count
        } else {
            1
        }
    }

    fn check_ops(&self, ops: &[RoleOperator<T>]) -> Result<()> {
        if ops.len() != self.heads_needed() {
            return Err(Error::Config(format!(
                "expected {} operator(s), got {}",
                self.heads_needed(),
                ops.len()
            )));
        }
        if let Some(op) = ops.iter().find(|o| o.dim() != self.dim) {
            return Err(Error::DimensionMismatch {
                op: "OperatorTable insert",
                left: (self.dim, self.dim),
                right: (op.dim(), op.dim()),
            });
        }
        Ok(())
    }

    pub fn insert_slot(&mut self, name: &str, ops: Vec<RoleOperator<T>>) -> Result<()> {
        self.check_ops(&ops)?;
        self.slot_ops.insert(name.to_string(), ops);
        Ok(())
    }

    pub fn insert_relation(&mut self, name: &str, ops: Vec<RoleOperator<T>>) -> Result<()> {
        self.check_ops(&ops)?;
        self.relation_ops.insert(name.to_string(), ops);
        Ok(())
    }

    pub fn insert_instance(&mut self, name: &str, ops: Vec<RoleOperator<T>>) -> Result<()> {
        self.check_ops(&ops)?;
        self.instance_ops.insert(name.to_string(), ops);
        Ok(())
    }

    pub fn slot_names(&self) -> impl Iterator<Item = &str> {
        self.slot_ops.keys().map(String::as_str)
    }

    pub fn relation_names(&self) -> impl Iterator<Item = &str> {
        self.relation_ops.keys().map(String::as_str)
    }

    fn pick<'a>(
        map: &'a BTreeMap<String, Vec<RoleOperator<T>>>,
        name: &str,
        head: usize,
    ) -> Option<&'a RoleOperator<T>> {
        map.get(name).and_then(|ops| ops.get(head).or_else(|| ops.first()))
    }

    /// Operator for `slot` at `head`. Positional slots realise RoPE rotations.
    pub fn slot(&self, slot: &Slot, head: usize) -> Result<RoleOperator<T>> {
        match slot {
            Slot::Position(k) => realize_rotation(*k as i64, &self.freqs),
            Slot::Named(n) => Self::pick(&self.slot_ops, n, head)
                .cloned()
                .ok_or_else(|| Error::UnknownSlot(n.clone())),
        }
    }

    pub fn relation(&self, name: &str, head: usize) -> Result<&RoleOperator<T>> {
        Self::pick(&self.relation_ops, name, head).ok_or_else(|| Error::UnknownRelation(name.into()))
    }

    pub fn instance(&self, name: &str, head: usize) -> Result<&RoleOperator<T>> {
        Self::pick(&self.instance_ops, name, head).ok_or_else(|| Error::UnknownInstance(name.into()))
    }

    fn resolve(&self, r: &OperatorRef, head: usize) -> Result<RoleOperator<T>> {
        match r {
            OperatorRef::Slot(s) => self.slot(s, head),
            OperatorRef::Relation(n) => self.relation(n, head).cloned(),
            OperatorRef::Instance(n) => self.instance(n, head).cloned(),
        }
    }

    fn path_journey(&self, path: Vec<(OperatorRef, Direction)>, head: usize) -> Result<Journey<T>> {
        let mut matrix: Option<Matrix<T>> = None;
        for (r, dir) in &path {
            let op = self.resolve(r, head)?;
            let factor = match dir {
                Direction::Forward => op,
                Direction::Inverse => invert(&op)?,
            };
            matrix = Some(match matrix {
                None => factor.realized,
                Some(m) => m.matmul(factor.matrix())?,
            });
        }
        Ok(Journey {
            matrix: matrix.unwrap_or_else(|| Matrix::identity(self.dim)),
            path,
            head,
        })
    }
}

/// `P_{a->b} = R_a R_b^{-1}`.
pub fn journey<T: Scalar>(a: &Slot, b: &Slot, table: &OperatorTable<T>, head: usize) -> Result<Journey<T>> {
    table.path_journey(
        vec![
            (OperatorRef::Slot(a.clone()), Direction::Forward),
            (OperatorRef::Slot(b.clone()), Direction::Inverse),
        ],
        head,
    )
}

/// `R_s R_{e1} R_{e2}^{-1} R_{s2}^{-1}`, in that order.
pub fn instance_journey<T: Scalar>(
    s: &Slot,
    e1: &str,
    e2: &str,
    s2: &Slot,
    table: &OperatorTable<T>,
    head: usize,
) -> Result<Journey<T>> {
    table.path_journey(
        vec![
            (OperatorRef::Slot(s.clone()), Direction::Forward),
            (OperatorRef::Instance(e1.to_string()), Direction::Forward),
            (OperatorRef::Instance(e2.to_string()), Direction::Inverse),
            (OperatorRef::Slot(s2.clone()), Direction::Inverse),
        ],
        head,
    )
}

/// `R_i R_{e1} R_{e2}^{-1} R_j^{-1}` for token positions `i`, `j` in
/// sentences `e1`, `e2`.
pub fn cross_sentence_journey<T: Scalar>(
    i: usize,
    e1: &str,
    e2: &str,
    j: usize,
    table: &OperatorTable<T>,
    head: usize,
) -> Result<Journey<T>> {
    instance_journey(&Slot::Position(i), e1, e2, &Slot::Position(j), table, head)
}

/// Journey along a relation edge: `R_r` forward, `R_r^{-1}` backward.
pub fn edge_journey<T: Scalar>(
    relation: &str,
    direction: Direction,
    table: &OperatorTable<T>,
    head: usize,
) -> Result<Journey<T>> {
    table.path_journey(vec![(OperatorRef::Relation(relation.to_string()), direction)], head)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    MeanPool,
    AttentionPool,
}

/// Two affine maps with a tanh between them, mapping a pooled token vector
/// to operator parameters. `pool_query` scores tokens for attention pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutProjector<T> {
    pub pool_query: Vector<T>,
    pub w1: Matrix<T>,
    pub b1: Vector<T>,
    pub w2: Matrix<T>,
    pub b2: Vector<T>,
}

impl<T: Scalar> ReadoutProjector<T> {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            pool_query: Vector::zeros(input),
            w1: Matrix::zeros(input, hidden),
            b1: Vector::zeros(hidden),
            w2: Matrix::zeros(hidden, output),
            b2: Vector::zeros(output),
        }
    }

    /// Pools `tokens` according to `readout`.
    pub fn pool(&self, tokens: &[Vector<T>], readout: Readout) -> Result<Vector<T>> {
        let first = tokens.first().ok_or(Error::Empty("instance token list"))?;
        let d = first.dim();
        if let Some(bad) = tokens.iter().find(|t| t.dim() != d) {
            return Err(Error::DimensionMismatch {
                op: "pool",
                left: (d, 1),
                right: (bad.dim(), 1),
            });
        }
        let weights: Vec<T> = match readout {
            Readout::MeanPool => vec![T::one() / T::lit(tokens.len() as f64); tokens.len()],
            Readout::AttentionPool => {
                let scale = T::one() / T::lit(d as f64).sqrt();
                let scores = Vector::from_raw(
                    tokens
                        .iter()
                        .map(|t| Ok(t.dot(&self.pool_query)? * scale))
                        .collect::<Result<Vec<_>>>()?,
                );
                crate::numerics::softmax(&scores, &vec![true; tokens.len()])?.into_data()
            }
        };
        let mut pooled = Vector::zeros(d);
        for (t, &w) in tokens.iter().zip(&weights) {
            for i in 0..d {
                pooled[i] = pooled[i] + w * t[i];
            }
        }
        Ok(pooled)
    }

    /// `tanh(x W1 + b1) W2 + b2`.
    pub fn project(&self, pooled: &Vector<T>) -> Result<Vector<T>> {
        let h = self.w1.transpose().matvec(pooled)?;
        let h = Vector::from_raw(
            h.data()
                .iter()
                .zip(self.b1.data())
                .map(|(&x, &b)| (x + b).tanh())
                .collect(),
        );
        let out = self.w2.transpose().matvec(&h)?;
        Ok(Vector::from_raw(
            out.data().iter().zip(self.b2.data()).map(|(&x, &b)| x + b).collect(),
        ))
    }
}

/// Pools an instance's token vectors, projects them to parameters and
/// realises a clamped operator of `kind`.
pub fn derive_instance_operator<T: Scalar>(
    token_vectors: &[Vector<T>],
    readout: Readout,
    projector: &ReadoutProjector<T>,
    kind: ParamKind,
    dim: usize,
) -> Result<RoleOperator<T>> {
    let pooled = projector.pool(token_vectors, readout)?;
    let params = projector.project(&pooled)?;
    RoleOperator::from_params(kind, dim, params.data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table_with(ops: &[(&str, RoleOperator<f64>)]) -> OperatorTable<f64> {
        let dim = ops[0].1.dim();
        let mut t = OperatorTable::new(dim, 1, false).unwrap();
        for (n, op) in ops {
            t.insert_slot(n, vec![op.clone()]).unwrap();
        }
        t
    }

    fn random_op(rng: &mut ChaCha8Rng, kind: ParamKind, dim: usize) -> RoleOperator<f64> {
        let params: Vec<f64> = (0..kind.param_count(dim)).map(|_| rng.random_range(-3.0..3.0)).collect();
        RoleOperator::from_params(kind, dim, &params).unwrap()
    }

    /// Singular values through nalgebra's SVD, independent of this module.
    fn singular_values(m: &Matrix<f64>) -> Vec<f64> {
        let n = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
        n.singular_values().iter().copied().collect()
    }

    #[test]
    fn rotation_examples() {
        let op = realize_rotation::<f64>(0, &rope_freqs(4)).unwrap();
        assert_eq!(op.matrix(), &Matrix::identity(4));

        let op = realize_rotation(3, &[1.0f64]).unwrap();
        let expected = Matrix::from_rows(&[vec![3f64.cos(), -(3f64.sin())], vec![3f64.sin(), 3f64.cos()]]).unwrap();
        assert!(op.matrix().max_abs_diff(&expected) < 1e-15);

        let f = rope_freqs::<f64>(8);
        let a = realize_rotation(5, &f).unwrap();
        let b = realize_rotation(-2, &f).unwrap();
        let ab = realize_rotation(3, &f).unwrap();
        assert!(a.matrix().matmul(b.matrix()).unwrap().max_abs_diff(ab.matrix()) < 1e-12);
    }

    #[test]
    fn odd_dimension_is_rejected() {
        assert!(matches!(
            RoleOperator::<f64>::rotation_with_dim(3, vec![1.0], 1.0),
            Err(Error::OddDimension(3))
        ));
        assert!(matches!(OperatorTable::<f64>::new(5, 1, false), Err(Error::OddDimension(5))));
    }

    #[test]
    fn inverse_examples() {
        let id = RoleOperator::<f64>::identity(4);
        assert_eq!(invert(&id).unwrap().matrix(), &Matrix::identity(4));

        let r = realize_rotation(3, &[1.0f64, 0.5]).unwrap();
        let expected = realize_rotation(-3, &[1.0f64, 0.5]).unwrap();
        assert!(invert(&r).unwrap().matrix().max_abs_diff(expected.matrix()) < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = random_op(&mut rng, ParamKind::Diagonal, 6);
        let inv = invert(&d).unwrap();
        for i in 0..6 {
            assert_eq!(inv.matrix()[(i, i)], 1.0 / d.matrix()[(i, i)]);
        }
        assert!(d.matrix().matmul(inv.matrix()).unwrap().max_abs_diff(&Matrix::identity(6)) < 1e-12);
    }

    #[test]
    fn diagonal_is_clamped() {
        let d = RoleOperator::<f64>::diagonal(vec![10.0, -10.0, 0.5]).unwrap();
        assert!((d.matrix()[(0, 0)] - KAPPA).abs() < 1e-12);
        assert!((d.matrix()[(1, 1)] - 1.0 / KAPPA).abs() < 1e-12);
    }

    #[test]
    fn journey_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = table_with(&[
            ("A", random_op(&mut rng, ParamKind::Rotation, 4)),
            ("B", random_op(&mut rng, ParamKind::Diagonal, 4)),
        ]);
        let (a, b) = (Slot::named("A"), Slot::named("B"));
        let self_j = journey(&a, &a, &t, 0).unwrap();
        assert!(self_j.matrix.max_abs_diff(&Matrix::identity(4)) < 1e-12);
        let ab = journey(&a, &b, &t, 0).unwrap();
        let ba = journey(&b, &a, &t, 0).unwrap();
        assert!(ab.matrix.matmul(&ba.matrix).unwrap().max_abs_diff(&Matrix::identity(4)) < 1e-9);
        assert_eq!(ab.path.len(), 2);
        assert!(ab.recompute(&t).unwrap().max_abs_diff(&ab.matrix) <= 1e-9);
        assert!(matches!(
            journey(&a, &Slot::named("C"), &t, 0),
            Err(Error::UnknownSlot(n)) if n == "C"
        ));
    }

    #[test]
    fn positional_journey_is_relative_rotation() {
        let t = OperatorTable::<f64>::new(2, 1, false).unwrap().with_freqs(vec![1.0]).unwrap();
        let j = journey(&Slot::Position(3), &Slot::Position(1), &t, 0).unwrap();
        let expected = realize_rotation(2, &[1.0f64]).unwrap();
        assert!(j.matrix.max_abs_diff(expected.matrix()) < 1e-12);
    }

    #[test]
    fn instance_journey_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = table_with(&[
            ("S", random_op(&mut rng, ParamKind::Rotation, 6)),
            ("S2", random_op(&mut rng, ParamKind::LowRank { rank: 2 }, 6)),
        ]);
        t.insert_instance("e1", vec![random_op(&mut rng, ParamKind::Rotation, 6)]).unwrap();
        t.insert_instance("e2", vec![random_op(&mut rng, ParamKind::Diagonal, 6)]).unwrap();
        let (s, s2) = (Slot::named("S"), Slot::named("S2"));

        let same = instance_journey(&s, "e1", "e1", &s, &t, 0).unwrap();
        assert!(same.matrix.max_abs_diff(&Matrix::identity(6)) < 1e-9);

        let cancel = instance_journey(&s, "e2", "e2", &s2, &t, 0).unwrap();
        let direct = journey(&s, &s2, &t, 0).unwrap();
        assert!(cancel.matrix.max_abs_diff(&direct.matrix) < 1e-9);

        // brute-force four-factor product
        let full = instance_journey(&s, "e1", "e2", &s2, &t, 0).unwrap();
        let f = [
            t.slot(&s, 0).unwrap().matrix().clone(),
            t.instance("e1", 0).unwrap().matrix().clone(),
            t.instance("e2", 0).unwrap().matrix().inverse().unwrap(),
            t.slot(&s2, 0).unwrap().matrix().inverse().unwrap(),
        ];
        let oracle = Matrix::from_fn(6, 6, |r, c| {
            let mut acc = 0.0;
            for i in 0..6 {
                for j in 0..6 {
                    for k in 0..6 {
                        acc += f[0][(r, i)] * f[1][(i, j)] * f[2][(j, k)] * f[3][(k, c)];
                    }
                }
            }
            acc
        });
        assert!(full.matrix.max_abs_diff(&oracle) < 1e-9);
        assert!(matches!(
            instance_journey(&s, "e1", "nope", &s2, &t, 0),
            Err(Error::UnknownInstance(_))
        ));
    }

    #[test]
    fn cross_sentence_examples() {
        let mut t = OperatorTable::<f64>::new(4, 1, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        t.insert_instance("a", vec![random_op(&mut rng, ParamKind::Rotation, 4)]).unwrap();
        t.insert_instance("b", vec![random_op(&mut rng, ParamKind::Rotation, 4)]).unwrap();
        let same = cross_sentence_journey(4, "a", "a", 4, &t, 0).unwrap();
        assert!(same.matrix.max_abs_diff(&Matrix::identity(4)) < 1e-12);
        let rel = cross_sentence_journey(5, "a", "a", 2, &t, 0).unwrap();
        let expected = realize_rotation(3, t.freqs()).unwrap();
        assert!(rel.matrix.max_abs_diff(expected.matrix()) < 1e-12);
        let full = cross_sentence_journey(5, "a", "b", 2, &t, 0).unwrap();
        let oracle = realize_rotation(5, t.freqs())
            .unwrap()
            .matrix()
            .matmul(t.instance("a", 0).unwrap().matrix())
            .unwrap()
            .matmul(&t.instance("b", 0).unwrap().matrix().transpose())
            .unwrap()
            .matmul(&realize_rotation(-2, t.freqs()).unwrap().matrix().clone())
            .unwrap();
        assert!(full.matrix.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn derive_instance_operator_examples() {
        let proj = ReadoutProjector::<f64>::zeros(4, 3, ParamKind::Rotation.param_count(4));
        let tokens = vec![Vector::from_f64(&[1.0, 2.0, 3.0, 4.0]).unwrap()];
        let op = derive_instance_operator(&tokens, Readout::MeanPool, &proj, ParamKind::Rotation, 4).unwrap();
        assert_eq!(op.matrix(), &Matrix::identity(4));
        assert_eq!(proj.pool(&tokens, Readout::MeanPool).unwrap(), tokens[0]);
        assert!(matches!(
            derive_instance_operator(&[], Readout::MeanPool, &proj, ParamKind::Rotation, 4),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn derive_instance_operator_matches_stepwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut r = |rows, cols| Matrix::<f64>::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let proj = ReadoutProjector {
            pool_query: Vector::from_f64(&[0.1, 0.2, 0.3, 0.4]).unwrap(),
            w1: r(4, 3),
            b1: r(1, 3).row_vector(0),
            w2: r(3, 2),
            b2: r(1, 2).row_vector(0),
        };
        let a = [1.0, -1.0, 0.5, 2.0];
        let b = [3.0, 1.0, -0.5, 0.0];
        let tokens = vec![Vector::from_f64(&a).unwrap(), Vector::from_f64(&b).unwrap()];
        let op = derive_instance_operator(&tokens, Readout::MeanPool, &proj, ParamKind::Rotation, 4).unwrap();

        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
        let mut hidden = [0.0; 3];
        for (h, slot) in hidden.iter_mut().enumerate() {
            let mut acc = proj.b1[h];
            for (i, m) in mid.iter().enumerate() {
                acc += m * proj.w1[(i, h)];
            }
            *slot = acc.tanh();
        }
        let mut angles = [0.0; 2];
        for (o, slot) in angles.iter_mut().enumerate() {
            let mut acc = proj.b2[o];
            for (h, v) in hidden.iter().enumerate() {
                acc += v * proj.w2[(h, o)];
            }
            *slot = acc;
        }
        let expected = realize_rotation(1, &angles).unwrap();
        assert!(op.matrix().max_abs_diff(expected.matrix()) < 1e-12);

        // attention pooling weights follow a softmax over scaled scores
        let pooled = proj.pool(&tokens, Readout::AttentionPool).unwrap();
        let sa: f64 = a.iter().zip(proj.pool_query.data()).map(|(x, q)| x * q).sum::<f64>() / 2.0;
        let sb: f64 = b.iter().zip(proj.pool_query.data()).map(|(x, q)| x * q).sum::<f64>() / 2.0;
        let wa = sa.exp() / (sa.exp() + sb.exp());
        for i in 0..4 {
            assert!((pooled[i] - (wa * a[i] + (1.0 - wa) * b[i])).abs() < 1e-12);
        }
    }

    fn kinds() -> impl Strategy<Value = ParamKind> {
        prop_oneof![
            Just(ParamKind::Rotation),
            Just(ParamKind::Diagonal),
            (1usize..4).prop_map(|rank| ParamKind::LowRank { rank }),
        ]
    }

    proptest! {
        #[test]
        fn operators_and_inverses_are_stable(kind in kinds(), seed in any::<u64>(), half in 1usize..5) {
            let dim = 2 * half;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params: Vec<f64> = (0..kind.param_count(dim)).map(|_| rng.random_range(-20.0..20.0)).collect();
            let op = RoleOperator::from_params(kind, dim, &params).unwrap();
            let inv = invert(&op).unwrap();
            let round = op.matrix().matmul(inv.matrix()).unwrap();
            prop_assert!(round.max_abs_diff(&Matrix::identity(dim)) <= 1e-6);
            for m in [op.matrix(), inv.matrix()] {
                for s in singular_values(m) {
                    prop_assert!(s >= 1.0 / KAPPA - 1e-9 && s <= KAPPA + 1e-9, "singular value {s}");
                }
            }
            if kind == ParamKind::Rotation {
                let rtr = op.matrix().transpose().matmul(op.matrix()).unwrap();
                prop_assert!(rtr.max_abs_diff(&Matrix::identity(dim)) <= 1e-9);
            }
        }

        #[test]
        fn derived_operators_respect_their_clamp(kind in kinds(), seed in any::<u64>()) {
            let dim = 4;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut r = |rows, cols| Matrix::<f64>::from_fn(rows, cols, |_, _| rng.random_range(-5.0..5.0));
            let out = kind.param_count(dim);
            let proj = ReadoutProjector {
                pool_query: r(1, dim).row_vector(0),
                w1: r(dim, 5),
                b1: r(1, 5).row_vector(0),
                w2: r(5, out),
                b2: r(1, out).row_vector(0),
            };
            let tokens: Vec<Vector<f64>> = (0..3).map(|_| r(1, dim).row_vector(0)).collect();
            let op = derive_instance_operator(&tokens, Readout::AttentionPool, &proj, kind, dim).unwrap();
            for s in singular_values(op.matrix()) {
                prop_assert!(s >= 1.0 / KAPPA - 1e-9 && s <= KAPPA + 1e-9);
            }
        }

        #[test]
        fn rotation_composition_stays_orthogonal(steps in proptest::collection::vec(-50i64..50, 1..6)) {
            let f = rope_freqs::<f64>(8);
            let mut m = Matrix::identity(8);
            for s in steps {
                m = m.matmul(realize_rotation(s, &f).unwrap().matrix()).unwrap();
            }
            prop_assert!(m.transpose().matmul(&m).unwrap().max_abs_diff(&Matrix::identity(8)) <= 1e-8);
        }
    }
}
