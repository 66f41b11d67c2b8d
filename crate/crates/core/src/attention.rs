//! Journey-conditioned attention: scores, receptive-field masks and a
//! reference `attend` kernel over explicit (vector, slot, instance) rows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar, Vector};
use crate::operators::{instance_journey, invert, journey, realize_rotation, Journey, OperatorTable, RoleOperator};
use crate::schema::{Slot, StructuredInstance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaskLevel {
    InstanceLocal,
    Neighborhood,
    Global,
}

impl MaskLevel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "instance_local" => Ok(MaskLevel::InstanceLocal),
            "neighborhood" => Ok(MaskLevel::Neighborhood),
            "global" => Ok(MaskLevel::Global),
            other => Err(Error::Config(format!("unknown mask level `{other}`"))),
        }
    }
}

impl fmt::Display for MaskLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskLevel::InstanceLocal => "instance_local",
            MaskLevel::Neighborhood => "neighborhood",
            MaskLevel::Global => "global",
        })
    }
}

/// Which journey connects a query and a key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum JourneyMode {
    /// `R_{s(i)} R_{s(j)}^{-1}`.
    SlotJourney,
    /// `R_{s(i)} R_{e(i)} R_{e(j)}^{-1} R_{s(j)}^{-1}`.
    InstanceJourney,
}

impl JourneyMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "slot_journey" => Ok(JourneyMode::SlotJourney),
            "instance_journey" => Ok(JourneyMode::InstanceJourney),
            other => Err(Error::Config(format!("unknown journey mode `{other}`"))),
        }
    }
}

impl fmt::Display for JourneyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JourneyMode::SlotJourney => "slot_journey",
            JourneyMode::InstanceJourney => "instance_journey",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub level: MaskLevel,
    allow: Vec<Vec<bool>>,
}

impl AttentionMask {
    pub fn new(level: MaskLevel, allow: Vec<Vec<bool>>) -> Self {
        Self { level, allow }
    }

    pub fn all(level: MaskLevel, queries: usize, keys: usize) -> Self {
        Self::new(level, vec![vec![true; keys]; queries])
    }

    pub fn rows(&self) -> usize {
        self.allow.len()
    }

    pub fn cols(&self) -> usize {
        self.allow.first().map_or(0, Vec::len)
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allow[q][k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q]
    }

    pub fn set(&mut self, q: usize, k: usize, value: bool) {
        self.allow[q][k] = value;
    }
}

/// Additive score biases. Missing entries read as zero. Slot lookups try
/// the exact slot name first and then the slot family, so one `POSITION`
/// entry covers every positional slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlotPairBias<T> {
    pub table: BTreeMap<(String, String, usize), T>,
    pub relation_bias: BTreeMap<(String, usize), T>,
}

impl<T: Scalar> SlotPairBias<T> {
    pub fn new() -> Self {
        Self {
            table: BTreeMap::new(),
            relation_bias: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, a: &str, b: &str, head: usize, value: T) {
        self.table.insert((a.to_string(), b.to_string(), head), value);
    }

    pub fn set_relation(&mut self, r: &str, head: usize, value: T) {
        self.relation_bias.insert((r.to_string(), head), value);
    }

    pub fn get(&self, a: &Slot, b: &Slot, head: usize) -> T {
        let exact = (a.to_string(), b.to_string(), head);
        if let Some(v) = self.table.get(&exact) {
            return *v;
        }
        let fam = (a.family().to_string(), b.family().to_string(), head);
        self.table.get(&fam).copied().unwrap_or_else(T::zero)
    }

    pub fn relation(&self, r: &str, head: usize) -> T {
        self.relation_bias
            .get(&(r.to_string(), head))
            .copied()
            .unwrap_or_else(T::zero)
    }
}

fn check_dims(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            op,
            left: (a, 1),
            right: (b, 1),
        });
    }
    Ok(())
}

/// `q^T P k / sqrt(d) + bias`.
pub fn journey_score<T: Scalar>(q: &Vector<T>, k: &Vector<T>, p: &Matrix<T>, bias: T, d: usize) -> Result<T> {
    check_dims("journey_score", q.dim(), p.rows())?;
    check_dims("journey_score", k.dim(), p.cols())?;
    let pk = p.matvec(k)?;
    Ok(q.dot(&pk)? / T::lit(d as f64).sqrt() + bias)
}

/// Gradient of [`journey_score`] with respect to `q`: `P k / sqrt(d)`.
pub fn journey_score_grad_q<T: Scalar>(k: &Vector<T>, p: &Matrix<T>, d: usize) -> Result<Vector<T>> {
    Ok(p.matvec(k)?.scale(T::one() / T::lit(d as f64).sqrt()))
}

/// `q_h^T R_r k_t / sqrt(d) + b_r`.
pub fn edge_score<T: Scalar>(q_h: &Vector<T>, k_t: &Vector<T>, r: &RoleOperator<T>, b_r: T, d: usize) -> Result<T> {
    journey_score(q_h, k_t, r.matrix(), b_r, d)
}

/// Score of the reverse edge (tail to head), which transports with `R_r^{-1}`.
pub fn edge_score_reverse<T: Scalar>(
    q_t: &Vector<T>,
    k_h: &Vector<T>,
    r: &RoleOperator<T>,
    b_r: T,
    d: usize,
) -> Result<T> {
    journey_score(q_t, k_h, invert(r)?.matrix(), b_r, d)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeCheck<T> {
    pub lhs: T,
    pub rhs: T,
    pub gap: T,
}

/// Compares `q^T P_{i->j} k` built from journey operators against the
/// RoPE form `(R_i q)^T (R_j k)` with each side rotated block by block.
pub fn rope_equivalence_check<T: Scalar>(
    q: &Vector<T>,
    k: &Vector<T>,
    i: i64,
    j: i64,
    freqs: &[T],
) -> Result<RopeCheck<T>> {
    let d = q.dim();
    if d % 2 != 0 {
        return Err(Error::OddDimension(d));
    }
    check_dims("rope_equivalence_check", d, k.dim())?;
    check_dims("rope_equivalence_check", d / 2, freqs.len())?;

    let ri = realize_rotation(i, freqs)?;
    let rj_inv = invert(&realize_rotation(j, freqs)?)?;
    let p = ri.matrix().matmul(rj_inv.matrix())?;
    let lhs = q.dot(&p.matvec(k)?)?;

    // RoPE rotates each row vector by R_pos^T (row form of x R_pos).
    let rotate = |x: &Vector<T>, pos: i64| -> Vec<T> {
        let mut out = x.data().to_vec();
        for (m, &f) in freqs.iter().enumerate() {
            let (s, c) = (T::lit(pos as f64) * f).sin_cos();
            let (a, b) = (x[2 * m], x[2 * m + 1]);
            out[2 * m] = c * a + s * b;
            out[2 * m + 1] = -s * a + c * b;
        }
        out
    };
    let rq = rotate(q, i);
    let rk = rotate(k, j);
    let rhs = rq.iter().zip(&rk).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    Ok(RopeCheck {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}

/// One query row: vector, slot and owning instance.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRow<T> {
    pub q: Vector<T>,
    pub slot: Slot,
    pub instance: String,
}

/// One key/value row.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyValueRow<T> {
    pub k: Vector<T>,
    pub v: Vector<T>,
    pub slot: Slot,
    pub instance: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttendOutput<T> {
    pub outputs: Vec<Vector<T>>,
    /// Attention weights, queries x keys.
    pub weights: Matrix<T>,
}

/// Journey-conditioned attention for a single head. Journeys are memoised
/// per (slot, instance) pair and applied to the query as `P^T q`, so the
/// cost of building them is paid once per pair rather than per token pair.
pub fn attend<T: Scalar>(
    queries: &[QueryRow<T>],
    keys_values: &[KeyValueRow<T>],
    mask: &AttentionMask,
    table: &OperatorTable<T>,
    bias: &SlotPairBias<T>,
    mode: JourneyMode,
    head: usize,
) -> Result<AttendOutput<T>> {
    if mask.rows() != queries.len() || (mask.rows() > 0 && mask.cols() != keys_values.len()) {
        return Err(Error::DimensionMismatch {
            op: "attend mask",
            left: (queries.len(), keys_values.len()),
            right: (mask.rows(), mask.cols()),
        });
    }
    let d = table.dim();
    for q in queries {
        check_dims("attend query", q.q.dim(), d)?;
    }
    let vdim = keys_values.first().map_or(0, |kv| kv.v.dim());
    for kv in keys_values {
        check_dims("attend key", kv.k.dim(), d)?;
        check_dims("attend value", kv.v.dim(), vdim)?;
    }

    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut journeys: BTreeMap<(Slot, String, Slot, String), Journey<T>> = BTreeMap::new();
    let mut outputs = Vec::with_capacity(queries.len());
    let mut weights = Matrix::zeros(queries.len(), keys_values.len());
    for (qi, q) in queries.iter().enumerate() {
        let row_mask = mask.row(qi);
        if !row_mask.iter().any(|&m| m) {
            return Err(Error::DegenerateRow { row: qi });
        }
        let mut transported: BTreeMap<(Slot, String), Vector<T>> = BTreeMap::new();
        let mut scores = vec![T::zero(); keys_values.len()];
        for (kj, kv) in keys_values.iter().enumerate() {
            if !row_mask[kj] {
                continue;
            }
            let inst_key = match mode {
                JourneyMode::SlotJourney => String::new(),
                JourneyMode::InstanceJourney => kv.instance.clone(),
            };
            let pair = (kv.slot.clone(), inst_key);
            if !transported.contains_key(&pair) {
                let jkey = (q.slot.clone(), q.instance.clone(), pair.0.clone(), pair.1.clone());
                if !journeys.contains_key(&jkey) {
                    let j = match mode {
                        JourneyMode::SlotJourney => journey(&q.slot, &kv.slot, table, head)?,
                        JourneyMode::InstanceJourney => {
                            instance_journey(&q.slot, &q.instance, &kv.instance, &kv.slot, table, head)?
                        }
                    };
                    journeys.insert(jkey.clone(), j);
                }
                let p = &journeys[&jkey].matrix;
                transported.insert(pair.clone(), p.transpose().matvec(&q.q)?);
            }
            let qt = &transported[&pair];
            scores[kj] = qt.dot(&kv.k)? * scale + bias.get(&q.slot, &kv.slot, head);
        }
        let alpha = crate::numerics::softmax(&Vector::from_raw(scores), row_mask)
            .map_err(|_| Error::DegenerateRow { row: qi })?;
        let mut y = vec![T::zero(); vdim];
        for (kj, kv) in keys_values.iter().enumerate() {
            let a = alpha[kj];
            weights[(qi, kj)] = a;
            if a == T::zero() {
                continue;
            }
            for (o, &v) in y.iter_mut().zip(kv.v.data()) {
                *o = *o + a * v;
            }
        }
        outputs.push(Vector::from_raw(y));
    }
    Ok(AttendOutput { outputs, weights })
}

/// Mask between rows owned by the given instances.
pub fn mask_between(
    level: MaskLevel,
    query_owner: &[&str],
    key_owner: &[&str],
    adjacency: &BTreeMap<String, BTreeSet<String>>,
) -> Result<AttentionMask> {
    if level == MaskLevel::Neighborhood {
        for o in query_owner.iter().chain(key_owner) {
            if !adjacency.contains_key(*o) {
                return Err(Error::UnknownInstance((*o).to_string()));
            }
        }
    }
    let allow = query_owner
        .iter()
        .map(|qa| {
            key_owner
                .iter()
                .map(|ka| match level {
                    MaskLevel::Global => true,
                    MaskLevel::InstanceLocal => qa == ka,
                    MaskLevel::Neighborhood => qa == ka || adjacency[*qa].contains(*ka),
                })
                .collect()
        })
        .collect();
    Ok(AttentionMask::new(level, allow))
}

/// Token-level mask over the concatenated tokens of `instances`.
pub fn build_mask(
    level: MaskLevel,
    instances: &[StructuredInstance],
    adjacency: &BTreeMap<String, BTreeSet<String>>,
) -> Result<AttentionMask> {
    let owners: Vec<&str> = instances
        .iter()
        .flat_map(|i| i.tokens.iter().map(move |_| i.instance_id.as_str()))
        .collect();
    mask_between(level, &owners, &owners, adjacency)
}
