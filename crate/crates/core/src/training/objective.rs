use std::collections::BTreeMap;

use super::batch::{TokenRef, TrainingBatch};
use super::losses::{alignment_loss, link_prediction_loss, mlm_loss, role_consistency_loss, AlignGroup, LpScoreInput};
use super::ObjectiveWeights;
use crate::error::{Error, Result};
use crate::model::{forward, relation_ops_on_tape, ForwardOptions, ForwardOutput, Memory, ModelConfig, ParamVars, Stream};
use crate::numerics::{Scalar, Tape, Var};

/// Loss nodes of one batch. A term is `None` when its weight is zero or the
/// batch carries no annotations for it.
#[derive(Clone, Debug)]
pub struct ObjectiveTerms {
    pub total: Var,
    pub mlm: Option<Var>,
    pub lp: Option<Var>,
    pub rc: Option<Var>,
    pub align: Option<Var>,
    pub lp_ranks: Vec<usize>,
    pub rc_correct: usize,
    pub rc_total: usize,
}

fn var(vars: &ParamVars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
}

/// Stacks the output rows of `refs`, in order.
fn gather<T: Scalar>(tape: &mut Tape<T>, out: &ForwardOutput<T>, refs: &[TokenRef]) -> Result<Var> {
    let rows = refs
        .iter()
        .map(|r| {
            let loc = out
                .rows
                .get(r.instance)
                .and_then(|rows| rows.get(r.token))
                .ok_or_else(|| Error::Objective(format!("token {}:{} is not in the batch", r.instance, r.token)))?;
            let v = out.stream_var(loc.stream).ok_or(Error::Empty("stream output"))?;
            Ok(tape.gather_rows(v, &[loc.row]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tape.concat_rows(&rows))
}

pub fn memory_for<T>(config: &ModelConfig) -> Memory<'static, T> {
    if config.layer_groups.iter().any(|g| g.stream == Stream::Cross) {
        Memory::InBatch
    } else {
        Memory::None
    }
}

/// Runs the model on `batch` and builds `Σ λ · term` on `tape`.
pub fn objective<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    config: &ModelConfig,
    batch: &TrainingBatch,
    weights: &ObjectiveWeights,
    align_tau: T,
) -> Result<ObjectiveTerms> {
    let out = forward(tape, vars, config, &batch.batch, memory_for(config), ForwardOptions::default())?;
    let embed = var(vars, "embed")?;
    let mut parts: Vec<(f64, Var)> = Vec::new();

    let mut mlm = None;
    if weights.mlm > 0.0 && !batch.mlm_targets.is_empty() {
        let refs: Vec<TokenRef> = batch.mlm_targets.iter().map(|t| t.token).collect();
        let targets: Vec<usize> = batch.mlm_targets.iter().map(|t| t.target).collect();
        let states = gather(tape, &out, &refs)?;
        let l = mlm_loss(tape, states, &targets, embed)?;
        parts.push((weights.mlm, l));
        mlm = Some(l);
    }

    let mut lp = None;
    let mut lp_ranks = Vec::new();
    if weights.lp > 0.0 && !batch.lp_queries.is_empty() {
        let bias = var(vars, "bias.rel")?;
        let bias_cols = tape.value(bias).cols();
        let mut ops: BTreeMap<String, Vec<Var>> = BTreeMap::new();
        let mut inputs = Vec::with_capacity(batch.lp_queries.len());
        for q in &batch.lp_queries {
            if !ops.contains_key(&q.relation) {
                let pairs = relation_ops_on_tape(tape, vars, config, &q.relation)?;
                ops.insert(q.relation.clone(), pairs.into_iter().map(|(f, _)| f).collect());
            }
            let r = config
                .relations
                .iter()
                .position(|x| *x == q.relation)
                .ok_or_else(|| Error::UnknownRelation(q.relation.clone()))?;
            let per_head: Vec<usize> = (0..config.head_count).map(|h| h * bias_cols + r).collect();
            let b = tape.gather_scalars(bias, &per_head, 1, per_head.len());
            let b = tape.sum(b);
            let target = q.candidates.iter().position(|&c| c == q.target).ok_or_else(|| {
                Error::Objective(format!("true id {} is not among the candidates of instance {}", q.target, q.instance))
            })?;
            let query = gather(tape, &out, &[TokenRef { instance: q.instance, token: q.query }])?;
            inputs.push(LpScoreInput {
                query,
                relation: ops[&q.relation].clone(),
                bias: Some(b),
                candidates: tape.gather_rows(embed, &q.candidates),
                target,
            });
        }
        let (l, ranks) = link_prediction_loss(tape, &inputs)?;
        parts.push((weights.lp, l));
        lp = Some(l);
        lp_ranks = ranks;
    }

    let mut rc = None;
    let (mut rc_correct, mut rc_total) = (0, 0);
    if weights.rc > 0.0 && !batch.rc_corruptions.is_empty() {
        let mut refs = Vec::new();
        let mut originals = Vec::new();
        for c in &batch.rc_corruptions {
            refs.extend([c.first, c.second]);
            originals.extend([c.original.0, c.original.1]);
        }
        let states = gather(tape, &out, &refs)?;
        let (l, correct) = role_consistency_loss(tape, states, &originals, embed)?;
        parts.push((weights.rc, l));
        rc = Some(l);
        rc_correct = correct;
        rc_total = originals.len();
    }

    let mut align = None;
    if weights.align > 0.0 && !batch.alignment_pairs.is_empty() {
        let mut spans: Vec<&super::batch::SpanRef> = Vec::new();
        let mut keys: Vec<TokenRef> = Vec::new();
        let mut groups: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for p in &batch.alignment_pairs {
            let s = match spans.iter().position(|s| **s == p.span) {
                Some(s) => s,
                None => {
                    spans.push(&p.span);
                    spans.len() - 1
                }
            };
            let k = match keys.iter().position(|k| *k == p.entity) {
                Some(k) => k,
                None => {
                    keys.push(p.entity);
                    keys.len() - 1
                }
            };
            let g = groups.entry(s).or_default();
            if p.positive {
                g.0.push(k);
            } else {
                g.1.push(k);
            }
        }
        let mut span_rows = Vec::with_capacity(spans.len());
        for s in &spans {
            let refs: Vec<TokenRef> = s.tokens.iter().map(|&t| TokenRef { instance: s.instance, token: t }).collect();
            if refs.is_empty() {
                return Err(Error::Objective("alignment span is empty".into()));
            }
            let rows = gather(tape, &out, &refs)?;
            span_rows.push(tape.mean_rows(rows));
        }
        let span_states = tape.concat_rows(&span_rows);
        let key_states = gather(tape, &out, &keys)?;
        let mut list = Vec::new();
        for (span, (pos, neg)) in groups {
            for p in pos {
                list.push(AlignGroup {
                    span,
                    positive: p,
                    negatives: neg.clone(),
                });
            }
        }
        if !list.is_empty() {
            let l = alignment_loss(tape, span_states, key_states, &list, align_tau)?;
            parts.push((weights.align, l));
            align = Some(l);
        }
    }

    let mut total: Option<Var> = None;
    for (w, l) in parts {
        let term = tape.scale(l, T::lit(w));
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term),
        });
    }
    let total = total.ok_or_else(|| Error::Objective("batch has no annotations for any weighted term".into()))?;
    Ok(ObjectiveTerms {
        total,
        mlm,
        lp,
        rc,
        align,
        lp_ranks,
        rc_correct,
        rc_total,
    })
}
