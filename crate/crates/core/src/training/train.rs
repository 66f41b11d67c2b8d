use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::{lp_query_for, make_batch, mask_relation, InstancePool, LpQuery, TrainingBatch};
use super::losses::{knn_interpolated_distribution, rank_metrics, RankMetrics};
use super::objective::{memory_for, objective};
use super::optim::Adam;
use super::synthetic::HELDOUT;
use super::{ObjectiveWeights, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{bind_params, ForwardOptions, Model, Parameters};
use crate::numerics::{Matrix, Scalar, Tape};
use crate::schema::{validate, Corpus, InstanceKind, StructuredInstance, RELATION, TAIL};

/// One row of the metrics log. Terms that did not run are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub total_loss: f64,
    pub mlm_loss: Option<f64>,
    pub lp_loss: Option<f64>,
    pub rc_loss: Option<f64>,
    pub align_loss: Option<f64>,
    pub lp_mrr: Option<f64>,
    pub lp_hits1: Option<f64>,
    pub rc_acc: Option<f64>,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,total_loss,mlm_loss,lp_loss,rc_loss,align_loss,lp_mrr,lp_hits1,rc_acc,grad_norm";

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV text of a metrics log; skipped terms are empty cells.
pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            m.step,
            m.total_loss,
            cell(m.mlm_loss),
            cell(m.lp_loss),
            cell(m.rc_loss),
            cell(m.align_loss),
            cell(m.lp_mrr),
            cell(m.lp_hits1),
            cell(m.rc_acc),
            m.grad_norm
        );
    }
    s
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub metrics: Vec<StepMetrics>,
}

/// Trains a fresh model, seeded by `seed`, for `steps` steps.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    corpus: &Corpus,
    weights: &ObjectiveWeights,
    steps: usize,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    train_with(config, corpus, weights, steps, seed, |_, _| {})
}

/// As [`train`], letting `inspect` edit each batch before it is used.
pub fn train_with<T: Scalar>(
    config: &TrainConfig,
    corpus: &Corpus,
    weights: &ObjectiveWeights,
    steps: usize,
    seed: u64,
    mut inspect: impl FnMut(usize, &mut TrainingBatch),
) -> Result<TrainOutcome<T>> {
    let violations = validate(corpus);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    config.validate()?;
    weights.validate()?;
    let mut model_config = config.model.clone().bind(corpus);
    model_config.seed = seed;
    let mut model = Model::init(model_config)?;

    let pool = InstancePool::new(corpus);
    let vocab = corpus.vocabulary.tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut adam = Adam::new(config.adam);
    let tau = T::lit(config.align_temperature);
    let mut fixed: Option<TrainingBatch> = None;
    let mut metrics = Vec::with_capacity(steps);

    for step in 1..=steps {
        let mut batch = match &fixed {
            Some(b) => b.clone(),
            None => {
                let b = make_batch(&pool, vocab, config, weights, &mut rng)?;
                if config.fixed_batch {
                    fixed = Some(b.clone());
                }
                b
            }
        };
        inspect(step, &mut batch);
        batch.validate()?;

        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, &model.params);
        let terms = objective(&mut tape, &vars, &model.config, &batch, weights, tau)?;
        let val = |v: Option<crate::numerics::Var>| v.map(|v| tape.scalar(v).as_f64());
        let total = tape.scalar(terms.total).as_f64();
        let (mlm, lp, rc, align) = (val(terms.mlm), val(terms.lp), val(terms.rc), val(terms.align));
        let breakdown = || {
            format!(
                "total={total} mlm={} lp={} rc={} align={}",
                cell(mlm),
                cell(lp),
                cell(rc),
                cell(align)
            )
        };
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                breakdown: breakdown(),
            });
        }

        let grads = tape.backward(terms.total);
        let mut by_name: BTreeMap<String, Matrix<T>> = BTreeMap::new();
        let mut sq = 0.0;
        for (name, v) in &vars {
            if let Some(g) = grads.get(*v) {
                sq += g.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
                by_name.insert(name.clone(), g.clone());
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                breakdown: format!("{} grad_norm={grad_norm}", breakdown()),
            });
        }
        adam.step(&mut model.params, &by_name)?;

        let ranks = (!terms.lp_ranks.is_empty()).then(|| rank_metrics(&terms.lp_ranks));
        metrics.push(StepMetrics {
            step,
            total_loss: total,
            mlm_loss: mlm,
            lp_loss: lp,
            rc_loss: rc,
            align_loss: align,
            lp_mrr: ranks.map(|r| r.mrr),
            lp_hits1: ranks.map(|r| r.hits1),
            rc_acc: (terms.rc_total > 0).then(|| terms.rc_correct as f64 / terms.rc_total as f64),
            grad_norm,
        });
    }
    Ok(TrainOutcome { model, metrics })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Queries were held-out facts (otherwise training facts).
    pub heldout: bool,
    pub lp_queries: usize,
    pub lp: RankMetrics,
    pub rc_positions: usize,
    pub rc_acc: Option<f64>,
    pub masked_words: usize,
    /// `(λ, perplexity)` of the kNN-interpolated distribution on masked
    /// sentence words.
    pub knn_perplexity: Vec<(f64, f64)>,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let src = if self.heldout { "held-out" } else { "training" };
        writeln!(f, "link prediction ({} {src} queries)", self.lp_queries)?;
        writeln!(f, "  mrr     {:.4}", self.lp.mrr)?;
        writeln!(f, "  hits@1  {:.4}", self.lp.hits1)?;
        writeln!(f, "  hits@3  {:.4}", self.lp.hits3)?;
        writeln!(f, "  hits@10 {:.4}", self.lp.hits10)?;
        match self.rc_acc {
            Some(a) => writeln!(f, "role recovery accuracy {a:.4} over {} positions", self.rc_positions)?,
            None => writeln!(f, "role recovery: no swappable facts")?,
        }
        if self.knn_perplexity.is_empty() {
            writeln!(f, "knn perplexity: no masked sentence words or no repository")?;
        } else {
            writeln!(f, "knn perplexity over {} masked words", self.masked_words)?;
            for (l, p) in &self.knn_perplexity {
                writeln!(f, "  lambda {l:<5} {p:.4}")?;
            }
        }
        Ok(())
    }
}

/// Interpolation weights reported by [`evaluate`].
pub const EVAL_LAMBDAS: [f64; 4] = [0.0, 0.25, 0.5, 0.75];

fn masked_copy(inst: &StructuredInstance, token: usize, mask_id: usize, suffix: &str) -> StructuredInstance {
    let mut q = inst.clone();
    q.instance_id = format!("{}{suffix}", inst.instance_id);
    q.tokens[token].token_id = mask_id;
    q
}

/// Link-prediction ranks of `queries` (facts whose tail is predicted) given
/// `context` facts in the same batch.
fn lp_ranks<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    context: &[StructuredInstance],
    queries: &[StructuredInstance],
) -> Result<Vec<usize>> {
    let vocab = corpus.vocabulary.tokens();
    let mask = corpus.vocabulary.mask_id();
    let candidates: Vec<usize> = corpus.entities.iter().copied().collect();
    let mut ranks = Vec::new();
    for chunk in queries.chunks(64) {
        let mut instances = context.to_vec();
        let mut lp = Vec::new();
        for inst in chunk {
            let masked = match inst.kind {
                InstanceKind::Triple => inst.find_slot(TAIL),
                InstanceKind::Nary => (inst.tokens.len() > 1).then_some(inst.tokens.len() - 1),
                _ => None,
            };
            let Some(masked) = masked else { continue };
            let rel_token = match inst.kind {
                InstanceKind::Triple => inst.find_slot(RELATION).map(|r| inst.tokens[r].token_id),
                _ => Some(inst.tokens[0].token_id),
            };
            let rel_name = rel_token.and_then(|r| vocab.get(r)).map(String::as_str);
            let Some((query, relation)) = lp_query_for(inst, masked, rel_name) else { continue };
            lp.push(LpQuery {
                instance: instances.len(),
                query,
                masked,
                relation,
                target: inst.tokens[masked].token_id,
                candidates: candidates.clone(),
            });
            let mut copy = masked_copy(inst, masked, mask, "?");
            mask_relation(&mut copy, mask);
            instances.push(copy);
        }
        if lp.is_empty() {
            continue;
        }
        let batch = TrainingBatch {
            batch: crate::model::Batch::new(instances, &corpus.entities),
            mlm_targets: Vec::new(),
            lp_queries: lp,
            rc_corruptions: Vec::new(),
            alignment_pairs: Vec::new(),
        };
        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, &model.params);
        let w = ObjectiveWeights {
            mlm: 0.0,
            lp: 1.0,
            rc: 0.0,
            align: 0.0,
            knn: 0.0,
        };
        let terms = objective(&mut tape, &vars, &model.config, &batch, &w, T::one())?;
        ranks.extend(terms.lp_ranks);
    }
    Ok(ranks)
}

/// Link prediction on held-out facts (or on training facts when none are
/// held out), role recovery on swapped training facts, and kNN-interpolated
/// perplexity on masked sentence words.
pub fn evaluate<T: Scalar>(model: &Model<T>, corpus: &Corpus, config: &TrainConfig, seed: u64) -> Result<EvalReport> {
    let pool = InstancePool::new(corpus);
    let held: Vec<StructuredInstance> = corpus
        .instances
        .iter()
        .filter(|i| !i.kind.is_language() && i.provenance == HELDOUT)
        .cloned()
        .collect();
    let heldout = !held.is_empty();
    let ranks = if heldout {
        lp_ranks(model, corpus, &pool.facts, &held)?
    } else {
        // without held-out facts, query training facts with no context so
        // the answer is not visible through a neighbouring copy
        lp_ranks(model, corpus, &[], &pool.facts)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = corpus.vocabulary.tokens();

    let rc_cfg = TrainConfig {
        lp_rate: 0.0,
        rc_rate: 1.0,
        batch_sentences: 0,
        ..config.clone()
    };
    let rc_w = ObjectiveWeights {
        mlm: 0.0,
        lp: 0.0,
        rc: 1.0,
        align: 0.0,
        knn: 0.0,
    };
    let (mut rc_correct, mut rc_total) = (0, 0);
    if pool.facts.len() >= 2 {
        let mut batch = make_batch(&pool, vocab, &rc_cfg, &rc_w, &mut rng)?;
        if !batch.rc_corruptions.is_empty() {
            // sentences carry no swaps; drop them from the recovery batch
            let keep = pool.facts.len().min(batch.batch.instances.len());
            batch.batch.instances.truncate(keep);
            batch.batch = crate::model::Batch::new(std::mem::take(&mut batch.batch.instances), &corpus.entities);
            let mut tape = Tape::new();
            let vars = bind_params(&mut tape, &model.params);
            let terms = objective(&mut tape, &vars, &model.config, &batch, &rc_w, T::one())?;
            rc_correct = terms.rc_correct;
            rc_total = terms.rc_total;
        }
    }

    let (masked_words, knn_perplexity) = knn_perplexities(model, corpus, config, &pool, &mut rng)?;
    Ok(EvalReport {
        heldout,
        lp_queries: ranks.len(),
        lp: rank_metrics(&ranks),
        rc_positions: rc_total,
        rc_acc: (rc_total > 0).then(|| rc_correct as f64 / rc_total as f64),
        masked_words,
        knn_perplexity,
    })
}

fn knn_perplexities<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    config: &TrainConfig,
    pool: &InstancePool,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, Vec<(f64, f64)>)> {
    if pool.sentences.is_empty() || pool.facts.is_empty() || model.cross_layers().is_empty() {
        return Ok((0, Vec::new()));
    }
    let repo = model.build_repository(&pool.facts, &corpus.entities)?;
    let cfg = TrainConfig {
        batch_facts: 0,
        ..config.clone()
    };
    let batch = make_batch(pool, corpus.vocabulary.tokens(), &cfg, &ObjectiveWeights::only_mlm(), rng)?;
    let targets: Vec<_> = batch
        .mlm_targets
        .iter()
        .filter(|t| batch.batch.instances[t.token.instance].kind.is_language())
        .cloned()
        .collect();
    if targets.is_empty() {
        return Ok((0, Vec::new()));
    }
    let (tape, out) = model.run(&batch.batch, memory_for(&model.config), ForwardOptions::default())?;
    let embed = model.embeddings()?;
    let mut nll = vec![0.0; EVAL_LAMBDAS.len()];
    for t in &targets {
        let loc = out.rows[t.token.instance][t.token.token];
        let v = out.stream_var(loc.stream).ok_or(Error::Empty("stream output"))?;
        let h = tape.value(v).row_vector(loc.row);
        let logits: Vec<T> = (0..embed.rows())
            .map(|r| h.data().iter().zip(embed.row(r)).map(|(&a, &b)| a * b).sum())
            .collect();
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = logits.iter().map(|&l| (l - max).exp()).sum();
        let dist: Vec<T> = logits.iter().map(|&l| (l - max).exp() / z).collect();
        for (k, &lambda) in EVAL_LAMBDAS.iter().enumerate() {
            let mixed = knn_interpolated_distribution(
                &dist,
                &repo,
                &h,
                config.knn_k.max(1),
                T::lit(lambda),
                T::lit(config.knn_temperature),
            )?;
            nll[k] -= mixed.probs[t.target].as_f64().ln();
        }
    }
    let n = targets.len() as f64;
    Ok((
        targets.len(),
        EVAL_LAMBDAS.iter().zip(&nll).map(|(&l, &s)| (l, (s / n).exp())).collect(),
    ))
}

/// One spot check of the analytic gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Parameter groups sampled in turn by [`gradient_check`].
fn param_group(name: &str) -> usize {
    if name.starts_with("slot.") || name.starts_with("rel.") {
        0
    } else if name.starts_with("bias.") {
        1
    } else if name.ends_with(".wk") || name.ends_with(".wv") {
        2
    } else if name.starts_with("readout.") {
        3
    } else {
        4
    }
}

/// Compares the analytic gradient of the total loss on `batch` with a
/// central difference (step `h`) for `count` scalar parameters, cycling
/// through operator parameters, biases, key/value projections, the
/// instance readout and everything else.
///
/// The relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check<T: Scalar>(
    model: &Model<T>,
    batch: &TrainingBatch,
    weights: &ObjectiveWeights,
    tau: T,
    count: usize,
    seed: u64,
    h: T,
    floor: f64,
) -> Result<Vec<GradCheckEntry>> {
    let loss = |params: &Parameters<T>| -> Result<T> {
        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, params);
        let terms = objective(&mut tape, &vars, &model.config, batch, weights, tau)?;
        Ok(tape.scalar(terms.total))
    };
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, &model.params);
    let terms = objective(&mut tape, &vars, &model.config, batch, weights, tau)?;
    let grads = tape.backward(terms.total);

    let mut groups: Vec<Vec<&str>> = vec![Vec::new(); 5];
    for name in model.params.names() {
        groups[param_group(name)].push(name);
    }
    groups.retain(|g| !g.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = model.params.clone();
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let group = &groups[k % groups.len()];
        let name = group[rng.random_range(0..group.len())];
        let size = params.get(name)?.data().len();
        let index = index::sample(&mut rng, size, 1).index(0);
        let analytic = grads
            .get(vars[name])
            .map(|g| g.data()[index])
            .unwrap_or_else(T::zero)
            .as_f64();
        let orig = params.get(name)?.data()[index];
        params.get_mut(name)?.data_mut()[index] = orig + h;
        let plus = loss(&params)?;
        params.get_mut(name)?.data_mut()[index] = orig - h;
        let minus = loss(&params)?;
        params.get_mut(name)?.data_mut()[index] = orig;
        let numeric = ((plus - minus) / (h + h)).as_f64();
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        out.push(GradCheckEntry {
            name: name.to_string(),
            index,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(out)
}
