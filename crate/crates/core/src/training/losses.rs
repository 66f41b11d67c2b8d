use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar, Tape, Var, Vector};
use crate::repository::{query_exact, Repository};

/// Mean cross-entropy of `softmax(states · embeddingsᵀ)` against `targets`,
/// one row of `states` per target.
pub fn mlm_loss<T: Scalar>(tape: &mut Tape<T>, states: Var, targets: &[usize], embeddings: Var) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Objective("masked modelling has no targets".into()));
    }
    let logits = vocab_logits(tape, states, embeddings);
    Ok(tape.cross_entropy(logits, targets))
}

pub(crate) fn vocab_logits<T: Scalar>(tape: &mut Tape<T>, states: Var, embeddings: Var) -> Var {
    let et = tape.transpose(embeddings);
    tape.matmul(states, et)
}

/// Index of the largest entry of each row; ties go to the lower index.
pub fn argmax_rows<T: Scalar>(m: &Matrix<T>) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}

/// Role-consistency recovery: cross-entropy of the original ids at swapped
/// positions. Returns the loss and the number of correct argmax recoveries.
pub fn role_consistency_loss<T: Scalar>(
    tape: &mut Tape<T>,
    states: Var,
    originals: &[usize],
    embeddings: Var,
) -> Result<(Var, usize)> {
    if originals.is_empty() {
        return Err(Error::Objective("role consistency has no corrupted positions".into()));
    }
    let logits = vocab_logits(tape, states, embeddings);
    let correct = argmax_rows(tape.value(logits))
        .iter()
        .zip(originals)
        .filter(|(p, t)| p == t)
        .count();
    Ok((tape.cross_entropy(logits, originals), correct))
}

/// One link query ready for scoring.
#[derive(Clone, Debug)]
pub struct LpScoreInput {
    /// `1 x d` output at the query token.
    pub query: Var,
    /// Relation operator `R_r` per head.
    pub relation: Vec<Var>,
    /// Relation bias `b_r` as a `1 x 1` node.
    pub bias: Option<Var>,
    /// `C x d` candidate embeddings.
    pub candidates: Var,
    /// Row of the true candidate.
    pub target: usize,
}

/// Candidate scores `Σ_h (R_rᵀ q_h)·c_h / √d_h + b_r` as a `1 x C` row.
pub fn lp_scores<T: Scalar>(tape: &mut Tape<T>, input: &LpScoreInput) -> Var {
    let heads = input.relation.len();
    let d = tape.value(input.query).cols();
    let dh = d / heads;
    let c = tape.value(input.candidates).rows();
    let mut total: Option<Var> = None;
    for (h, &r) in input.relation.iter().enumerate() {
        let qh = tape.slice_cols(input.query, h * dh, dh);
        let moved = tape.matmul(qh, r);
        let ch = tape.slice_cols(input.candidates, h * dh, dh);
        let cht = tape.transpose(ch);
        let s = tape.matmul(moved, cht);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s),
        });
    }
    let s = tape.scale(total.expect("at least one head"), T::one() / T::lit(dh as f64).sqrt());
    match input.bias {
        Some(b) => {
            let row = tape.gather_scalars(b, &vec![0; c], 1, c);
            tape.add(s, row)
        }
        None => s,
    }
}

/// Rank of `target` when candidates are sorted by descending score, ties
/// broken by candidate order.
pub fn rank_of<T: Scalar>(scores: &[T], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RankMetrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

pub fn rank_metrics(ranks: &[usize]) -> RankMetrics {
    if ranks.is_empty() {
        return RankMetrics::default();
    }
    let n = ranks.len() as f64;
    let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    RankMetrics {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        hits1: hits(1),
        hits3: hits(3),
        hits10: hits(10),
    }
}

/// Expected MRR when the true candidate's rank is uniform over `n`.
pub fn random_mrr(n: usize) -> f64 {
    (1..=n).map(|r| 1.0 / r as f64).sum::<f64>() / n as f64
}

/// Mean cross-entropy of every query against its candidates, plus ranks.
pub fn link_prediction_loss<T: Scalar>(tape: &mut Tape<T>, inputs: &[LpScoreInput]) -> Result<(Var, Vec<usize>)> {
    if inputs.is_empty() {
        return Err(Error::Objective("link prediction has no queries".into()));
    }
    let mut total: Option<Var> = None;
    let mut ranks = Vec::with_capacity(inputs.len());
    for input in inputs {
        let c = tape.value(input.candidates).rows();
        if c == 0 {
            return Err(Error::Objective("empty candidate set".into()));
        }
        if input.target >= c {
            return Err(Error::Objective(format!("true candidate {} is outside the {c} candidates", input.target)));
        }
        let s = lp_scores(tape, input);
        ranks.push(rank_of(tape.value(s).row(0), input.target));
        let l = tape.cross_entropy(s, &[input.target]);
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l),
        });
    }
    let loss = tape.scale(total.expect("non-empty"), T::one() / T::lit(inputs.len() as f64));
    Ok((loss, ranks))
}

/// One contrastive group: a span, its positive key and its negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignGroup {
    pub span: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// InfoNCE over inner products of span states (`S x d`) and entity keys
/// (`K x d`) at temperature `tau`, averaged over groups.
pub fn alignment_loss<T: Scalar>(tape: &mut Tape<T>, spans: Var, keys: Var, groups: &[AlignGroup], tau: T) -> Result<Var> {
    if groups.is_empty() {
        return Err(Error::Objective("alignment has no pairs".into()));
    }
    if tau <= T::zero() {
        return Err(Error::Objective("alignment temperature must be positive".into()));
    }
    let kt = tape.transpose(keys);
    let sims = tape.matmul(spans, kt);
    let k = tape.value(keys).rows();
    let mut total: Option<Var> = None;
    for g in groups {
        if g.negatives.is_empty() {
            return Err(Error::Objective(format!("alignment span {} has no negatives", g.span)));
        }
        let idx: Vec<usize> = std::iter::once(g.positive)
            .chain(g.negatives.iter().copied())
            .map(|j| g.span * k + j)
            .collect();
        let row = tape.gather_scalars(sims, &idx, 1, idx.len());
        let row = tape.scale(row, T::one() / tau);
        let l = tape.cross_entropy(row, &[0]);
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l),
        });
    }
    Ok(tape.scale(total.expect("non-empty"), T::one() / T::lit(groups.len() as f64)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnDistribution<T> {
    pub probs: Vec<T>,
    /// Set when the repository was empty and the model distribution was
    /// returned unchanged.
    pub empty_repository: bool,
}

/// kNN-LM style interpolation: the top-`k` repository items by inner
/// product with `query` vote for their token ids with weights
/// `softmax(score / tau)`, mixed in with weight `lambda`.
pub fn knn_interpolated_distribution<T: Scalar>(
    model_dist: &[T],
    repo: &Repository<T>,
    query: &Vector<T>,
    k: usize,
    lambda: T,
    tau: T,
) -> Result<KnnDistribution<T>> {
    if !(T::zero()..=T::one()).contains(&lambda) {
        return Err(Error::Config(format!("interpolation weight {lambda} is outside [0, 1]")));
    }
    if tau <= T::zero() {
        return Err(Error::Config("kNN temperature must be positive".into()));
    }
    if repo.is_empty() {
        return Ok(KnnDistribution {
            probs: model_dist.to_vec(),
            empty_repository: true,
        });
    }
    let hits = query_exact(repo, query, k, None)?;
    let max = hits.iter().map(|h| h.score).fold(T::neg_infinity(), T::max);
    let weights: Vec<T> = hits.iter().map(|h| ((h.score - max) / tau).exp()).collect();
    let z: T = weights.iter().copied().sum();
    let mut retrieval = vec![T::zero(); model_dist.len()];
    for (h, w) in hits.iter().zip(&weights) {
        let id = repo.items()[h.index].token_id;
        let slot = retrieval
            .get_mut(id)
            .ok_or_else(|| Error::UnknownToken(format!("#{id} is outside the {}-token distribution", model_dist.len())))?;
        *slot = *slot + *w / z;
    }
    let probs = model_dist
        .iter()
        .zip(&retrieval)
        .map(|(&p, &r)| lambda * r + (T::one() - lambda) * p)
        .collect();
    Ok(KnnDistribution {
        probs,
        empty_repository: false,
    })
}
