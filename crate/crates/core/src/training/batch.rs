use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::synthetic::HELDOUT;
use super::{ObjectiveWeights, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::schema::{nary_relation, Corpus, InstanceKind, StructuredInstance, HEAD, PREDICATE, RELATION, TAIL};

/// Token `token` of batch instance `instance`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct TokenRef {
    pub instance: usize,
    pub token: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmTarget {
    pub token: TokenRef,
    pub target: usize,
}

/// Predict the token at `masked` from the output at `query`, transported by
/// `relation`, against `candidates`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LpQuery {
    pub instance: usize,
    pub query: usize,
    pub masked: usize,
    pub relation: String,
    pub target: usize,
    pub candidates: Vec<usize>,
}

/// Two same-slot tokens of different instances were exchanged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RcCorruption {
    pub first: TokenRef,
    pub second: TokenRef,
    pub slot: String,
    /// Ids before the swap, at `first` and `second`.
    pub original: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SpanRef {
    pub instance: usize,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentPair {
    pub span: SpanRef,
    pub entity: TokenRef,
    pub positive: bool,
}

/// Instances with objective annotations. Inputs are already corrupted:
/// masked tokens carry the mask id and swapped tokens are swapped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub batch: Batch,
    pub mlm_targets: Vec<MlmTarget>,
    pub lp_queries: Vec<LpQuery>,
    pub rc_corruptions: Vec<RcCorruption>,
    pub alignment_pairs: Vec<AlignmentPair>,
}

impl TrainingBatch {
    pub fn instances(&self) -> &[StructuredInstance] {
        &self.batch.instances
    }

    fn check(&self, r: TokenRef, what: &str) -> Result<()> {
        let inst = self
            .batch
            .instances
            .get(r.instance)
            .ok_or_else(|| Error::Objective(format!("{what} references missing instance {}", r.instance)))?;
        if r.token >= inst.tokens.len() {
            return Err(Error::Objective(format!(
                "{what} references token {} of `{}`, which has {}",
                r.token,
                inst.instance_id,
                inst.tokens.len()
            )));
        }
        Ok(())
    }

    /// Every annotation points at a real token and every candidate set
    /// holds its answer.
    pub fn validate(&self) -> Result<()> {
        for t in &self.mlm_targets {
            self.check(t.token, "masked target")?;
        }
        for q in &self.lp_queries {
            for tok in [q.query, q.masked] {
                self.check(TokenRef { instance: q.instance, token: tok }, "link query")?;
            }
            if !q.candidates.contains(&q.target) {
                return Err(Error::Objective(format!(
                    "true id {} is not among the candidates of the query on instance {}",
                    q.target, q.instance
                )));
            }
        }
        for c in &self.rc_corruptions {
            self.check(c.first, "role corruption")?;
            self.check(c.second, "role corruption")?;
        }
        for p in &self.alignment_pairs {
            self.check(p.entity, "alignment entity")?;
            for &t in &p.span.tokens {
                self.check(TokenRef { instance: p.span.instance, token: t }, "alignment span")?;
            }
        }
        Ok(())
    }
}

/// Sentence id shared by all views of one sentence (`s3` for `s3/pos`).
fn sentence_of(inst: &StructuredInstance) -> &str {
    inst.instance_id.split('/').next().unwrap_or(&inst.instance_id)
}

/// Training instances split by stream: structured facts (held-out facts
/// excluded) and sentences (all views of one sentence together).
#[derive(Clone, Debug)]
pub struct InstancePool {
    pub facts: Vec<StructuredInstance>,
    pub sentences: Vec<Vec<StructuredInstance>>,
    pub entities: BTreeSet<usize>,
    pub vocab_size: usize,
    pub mask_id: usize,
}

impl InstancePool {
    pub fn new(corpus: &Corpus) -> Self {
        let mut facts = Vec::new();
        let mut sentences: Vec<Vec<StructuredInstance>> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for inst in &corpus.instances {
            if inst.kind.is_language() {
                let key = sentence_of(inst).to_string();
                let i = *index.entry(key).or_insert_with(|| {
                    sentences.push(Vec::new());
                    sentences.len() - 1
                });
                sentences[i].push(inst.clone());
            } else if inst.provenance != HELDOUT {
                facts.push(inst.clone());
            }
        }
        Self {
            facts,
            sentences,
            entities: corpus.entities.clone(),
            vocab_size: corpus.vocabulary.len(),
            mask_id: corpus.vocabulary.mask_id(),
        }
    }

    pub fn candidates(&self) -> Vec<usize> {
        self.entities.iter().copied().collect()
    }
}

fn pick<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    if k == 0 || k >= n {
        return (0..n).collect();
    }
    let mut v = index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// The query token and the relation for predicting token `masked`.
pub fn lp_query_for(inst: &StructuredInstance, masked: usize, relation_token: Option<&str>) -> Option<(usize, String)> {
    match inst.kind {
        InstanceKind::Triple => {
            let head = inst.find_slot(HEAD)?;
            Some((head, relation_token?.to_string()))
        }
        InstanceKind::Nary => {
            let pred = inst.find_slot(PREDICATE)?;
            let role = inst.tokens[masked].slot.family().to_string();
            Some((pred, nary_relation(relation_token?, &role)))
        }
        _ => None,
    }
}

/// Hides the relation token of a triple query. The relation reaches the
/// score through its operator only.
pub fn mask_relation(inst: &mut StructuredInstance, mask_id: usize) {
    if inst.kind == InstanceKind::Triple {
        if let Some(r) = inst.find_slot(RELATION) {
            inst.tokens[r].token_id = mask_id;
        }
    }
}

/// Turns structured instance `i` into a link query on its tail (or on a
/// random role of a hyperedge), masking that token.
fn make_lp_query<R: Rng>(
    instances: &mut [StructuredInstance],
    i: usize,
    vocab: &[String],
    pool: &InstancePool,
    rng: &mut R,
) -> Option<LpQuery> {
    let inst = &instances[i];
    let (masked, rel_token) = match inst.kind {
        InstanceKind::Triple => (inst.find_slot(TAIL)?, inst.tokens[inst.find_slot(RELATION)?].token_id),
        InstanceKind::Nary => {
            if inst.tokens.len() < 2 {
                return None;
            }
            (rng.random_range(1..inst.tokens.len()), inst.tokens[inst.find_slot(PREDICATE)?].token_id)
        }
        _ => return None,
    };
    let (query, relation) = lp_query_for(inst, masked, vocab.get(rel_token).map(String::as_str))?;
    let target = inst.tokens[masked].token_id;
    instances[i].tokens[masked].token_id = pool.mask_id;
    mask_relation(&mut instances[i], pool.mask_id);
    Some(LpQuery {
        instance: i,
        query,
        masked,
        relation,
        target,
        candidates: pool.candidates(),
    })
}

/// Samples one training batch.
///
/// Facts are split between link queries, role swaps and masked modelling;
/// sentence views are masked consistently (a masked word is masked in every
/// view) and entity mentions are paired with fact tokens for alignment.
/// Annotations are only produced for terms with a positive weight.
pub fn make_batch<R: Rng>(
    pool: &InstancePool,
    vocab: &[String],
    config: &TrainConfig,
    w: &ObjectiveWeights,
    rng: &mut R,
) -> Result<TrainingBatch> {
    let mut instances: Vec<StructuredInstance> = pick(rng, pool.facts.len(), config.batch_facts)
        .into_iter()
        .map(|i| pool.facts[i].clone())
        .collect();
    let n_facts = instances.len();
    let mut sentence_ranges = Vec::new();
    for s in pick(rng, pool.sentences.len(), config.batch_sentences) {
        let start = instances.len();
        instances.extend(pool.sentences[s].iter().cloned());
        sentence_ranges.push(start..instances.len());
    }

    // per fact: 0 = masked modelling, 1 = link query, 2 = role swap
    let mut role = vec![0u8; n_facts];
    for r in role.iter_mut() {
        let u: f64 = rng.random();
        if w.lp > 0.0 && u < config.lp_rate {
            *r = 1;
        } else if w.rc > 0.0 && u < config.lp_rate + config.rc_rate {
            *r = 2;
        }
    }

    let mut lp_queries = Vec::new();
    for i in 0..n_facts {
        if role[i] == 1 {
            match make_lp_query(&mut instances, i, vocab, pool, rng) {
                Some(q) => lp_queries.push(q),
                None => role[i] = 0,
            }
        }
    }

    let mut rc_corruptions = Vec::new();
    let mut swappers: Vec<usize> = (0..n_facts).filter(|&i| role[i] == 2).collect();
    swappers.shuffle(rng);
    let mut used = BTreeSet::new();
    for a in 0..swappers.len() {
        let i = swappers[a];
        if used.contains(&i) {
            continue;
        }
        let slot = match instances[i].kind {
            InstanceKind::Triple => TAIL.to_string(),
            _ => match instances[i].tokens.get(1) {
                Some(t) => t.slot.family().to_string(),
                None => continue,
            },
        };
        let Some(ti) = instances[i].find_slot(&slot) else { continue };
        let partner = swappers[a + 1..].iter().copied().find(|&j| {
            !used.contains(&j)
                && instances[j].kind == instances[i].kind
                && instances[j]
                    .find_slot(&slot)
                    .is_some_and(|tj| instances[j].tokens[tj].token_id != instances[i].tokens[ti].token_id)
        });
        let Some(j) = partner else { continue };
        let tj = instances[j].find_slot(&slot).expect("checked");
        let (a_id, b_id) = (instances[i].tokens[ti].token_id, instances[j].tokens[tj].token_id);
        instances[i].tokens[ti].token_id = b_id;
        instances[j].tokens[tj].token_id = a_id;
        used.insert(i);
        used.insert(j);
        rc_corruptions.push(RcCorruption {
            first: TokenRef { instance: i, token: ti },
            second: TokenRef { instance: j, token: tj },
            slot,
            original: (a_id, b_id),
        });
    }
    for (i, r) in role.iter_mut().enumerate() {
        if *r == 2 && !used.contains(&i) {
            *r = 0;
        }
    }

    let mut mlm_targets = Vec::new();
    let mut masked: BTreeSet<TokenRef> = BTreeSet::new();
    if w.mlm > 0.0 {
        let corrupt = |inst: &mut StructuredInstance, t: usize, draw: f64, random_id: usize| {
            if draw < 0.8 {
                inst.tokens[t].token_id = pool.mask_id;
            } else if draw < 0.9 {
                inst.tokens[t].token_id = random_id;
            }
        };
        let choose = |rng: &mut R, n: usize| -> Vec<usize> {
            let mut c: Vec<usize> = (0..n).filter(|_| rng.random_bool(config.mask_rate)).collect();
            if c.is_empty() && n > 0 {
                c.push(rng.random_range(0..n));
            }
            c
        };
        let mlm_facts: Vec<usize> = (0..n_facts).filter(|&i| role[i] == 0).collect();
        let slots: Vec<(usize, usize)> = mlm_facts
            .iter()
            .flat_map(|&i| (0..instances[i].tokens.len()).map(move |t| (i, t)))
            .collect();
        for k in choose(rng, slots.len()) {
            let (i, t) = slots[k];
            let target = instances[i].tokens[t].token_id;
            let (draw, rid) = (rng.random::<f64>(), rng.random_range(1..pool.vocab_size.max(2)));
            corrupt(&mut instances[i], t, draw, rid);
            mlm_targets.push(MlmTarget {
                token: TokenRef { instance: i, token: t },
                target,
            });
        }
        for range in &sentence_ranges {
            // the first view of a sentence is its word sequence
            let seq = range.start;
            let n = instances[seq].tokens.len();
            for t in choose(rng, n) {
                let target = instances[seq].tokens[t].token_id;
                let (draw, rid) = (rng.random::<f64>(), rng.random_range(1..pool.vocab_size.max(2)));
                let mut occurrences = vec![TokenRef { instance: seq, token: t }];
                for link in &instances[seq].links {
                    if link.token == t {
                        if let Some(v) = range.clone().find(|&v| instances[v].instance_id == link.other_instance) {
                            occurrences.push(TokenRef {
                                instance: v,
                                token: link.other_token,
                            });
                        }
                    }
                }
                for o in &occurrences {
                    corrupt(&mut instances[o.instance], o.token, draw, rid);
                    masked.insert(*o);
                }
                mlm_targets.push(MlmTarget {
                    token: occurrences[0],
                    target,
                });
            }
        }
    }

    let mut alignment_pairs = Vec::new();
    if w.align > 0.0 {
        // clean entity tokens in facts, by id
        let mut fact_tokens: BTreeMap<usize, TokenRef> = BTreeMap::new();
        for (i, inst) in instances.iter().enumerate().take(n_facts) {
            if role[i] != 0 {
                continue;
            }
            for (t, tok) in inst.tokens.iter().enumerate() {
                let r = TokenRef { instance: i, token: t };
                let clean = !mlm_targets.iter().any(|m| m.token == r);
                if clean && pool.entities.contains(&tok.token_id) {
                    fact_tokens.entry(tok.token_id).or_insert(r);
                }
            }
        }
        let ids: Vec<usize> = fact_tokens.keys().copied().collect();
        for range in &sentence_ranges {
            let seq = range.start;
            for (t, tok) in instances[seq].tokens.iter().enumerate() {
                let r = TokenRef { instance: seq, token: t };
                let Some(&pos) = fact_tokens.get(&tok.token_id) else { continue };
                if masked.contains(&r) {
                    continue;
                }
                let others: Vec<usize> = ids.iter().copied().filter(|&id| id != tok.token_id).collect();
                if others.is_empty() {
                    continue;
                }
                let span = SpanRef {
                    instance: seq,
                    tokens: vec![t],
                };
                alignment_pairs.push(AlignmentPair {
                    span: span.clone(),
                    entity: pos,
                    positive: true,
                });
                for k in pick(rng, others.len(), config.align_negatives) {
                    alignment_pairs.push(AlignmentPair {
                        span: span.clone(),
                        entity: fact_tokens[&others[k]],
                        positive: false,
                    });
                }
            }
        }
    }

    let entities = pool.entities.clone();
    Ok(TrainingBatch {
        batch: Batch::new(instances, &entities),
        mlm_targets,
        lp_queries,
        rc_corruptions,
        alignment_pairs,
    })
}
