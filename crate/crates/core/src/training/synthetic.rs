use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::schema::{Corpus, Record};

/// Provenance tag of facts withheld from training for evaluation.
pub const HELDOUT: &str = "heldout";

/// A composition rule `target = first . second`: following `first` and then
/// `second` from an entity reaches the same entity as `target`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompositionRule {
    pub target: String,
    pub first: String,
    pub second: String,
}

impl CompositionRule {
    /// Parses `r3 = r1 . r2`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("rule `{s}` is not of the form `target = first . second`"));
        let (target, rest) = s.split_once('=').ok_or_else(bad)?;
        let (first, second) = rest.split_once('.').ok_or_else(bad)?;
        let (target, first, second) = (target.trim(), first.trim(), second.trim());
        if [target, first, second].iter().any(|x| x.is_empty() || x.contains(char::is_whitespace)) {
            return Err(bad());
        }
        Ok(Self {
            target: target.into(),
            first: first.into(),
            second: second.into(),
        })
    }
}

/// Generator settings for the cyclic toy world.
///
/// Entities `e0..e{n-1}` sit on a cycle. Each base relation moves a fixed
/// offset around it; each ruled relation is the composition of two others.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub entities: usize,
    pub relations: usize,
    pub rules: Vec<CompositionRule>,
    /// Share of facts of each ruled relation marked [`HELDOUT`].
    pub heldout_fraction: f64,
    pub sentences: usize,
    /// Share of base facts also emitted as a two-role hyperedge.
    pub nary_rate: f64,
    /// Share of sentences that name a wrong tail entity.
    pub corruption_rate: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            entities: 20,
            relations: 3,
            rules: vec![CompositionRule::parse("r3 = r1 . r2").expect("literal")],
            heldout_fraction: 0.5,
            sentences: 20,
            nary_rate: 0.0,
            corruption_rate: 0.0,
        }
    }
}

impl GeneratorConfig {
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let mut c = Self::default();
        c.entities = kv.take_or("entities", c.entities)?;
        c.relations = kv.take_or("relations", c.relations)?;
        let rules = kv.take_all("rule");
        if !rules.is_empty() {
            // `rule = none` clears the default rule
            c.rules = rules
                .iter()
                .filter(|(_, r)| r != "none")
                .map(|(line, r)| {
                    CompositionRule::parse(r).map_err(|e| Error::Parse {
                        line: *line,
                        message: e.to_string(),
                    })
                })
                .collect::<Result<_>>()?;
        }
        c.heldout_fraction = kv.take_or("heldout_fraction", c.heldout_fraction)?;
        c.sentences = kv.take_or("sentences", c.sentences)?;
        c.nary_rate = kv.take_or("nary_rate", c.nary_rate)?;
        c.corruption_rate = kv.take_or("corruption_rate", c.corruption_rate)?;
        Ok(c)
    }

    pub fn relation_names(&self) -> Vec<String> {
        (1..=self.relations).map(|i| format!("r{i}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.entities < 2 {
            return bad(format!("need at least 2 entities, got {}", self.entities));
        }
        for (name, v) in [
            ("heldout_fraction", self.heldout_fraction),
            ("nary_rate", self.nary_rate),
            ("corruption_rate", self.corruption_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        let names: BTreeSet<String> = self.relation_names().into_iter().collect();
        let mut ruled = BTreeSet::new();
        for r in &self.rules {
            for n in [&r.target, &r.first, &r.second] {
                if !names.contains(n) {
                    return bad(format!("rule mentions unknown relation `{n}`"));
                }
            }
            if !ruled.insert(r.target.clone()) {
                return bad(format!("relation `{}` has two rules", r.target));
            }
        }
        // offsets must resolve without cycles
        self.offsets().map(|_| ())
    }

    /// Offset of every relation around the cycle. Base relation `r_i` moves
    /// `i` steps; ruled relations add the offsets of their parts.
    pub fn offsets(&self) -> Result<BTreeMap<String, usize>> {
        let rules: BTreeMap<&str, &CompositionRule> = self.rules.iter().map(|r| (r.target.as_str(), r)).collect();
        let mut done: BTreeMap<String, usize> = BTreeMap::new();
        fn resolve(
            name: &str,
            rules: &BTreeMap<&str, &CompositionRule>,
            done: &mut BTreeMap<String, usize>,
            stack: &mut Vec<String>,
            n: usize,
        ) -> Result<usize> {
            if let Some(&o) = done.get(name) {
                return Ok(o);
            }
            if stack.iter().any(|s| s == name) {
                return Err(Error::Config(format!("rules for `{name}` are cyclic")));
            }
            let o = match rules.get(name) {
                None => name[1..].parse::<usize>().expect("generated name") % n,
                Some(r) => {
                    stack.push(name.to_string());
                    let a = resolve(&r.first, rules, done, stack, n)?;
                    let b = resolve(&r.second, rules, done, stack, n)?;
                    stack.pop();
                    (a + b) % n
                }
            };
            done.insert(name.to_string(), o);
            Ok(o)
        }
        for name in self.relation_names() {
            resolve(&name, &rules, &mut done, &mut Vec::new(), self.entities)?;
        }
        Ok(done)
    }
}

fn entity(i: usize) -> String {
    format!("e{i}")
}

/// Builds the toy corpus. Records are emitted facts first (relation order,
/// then head order), then hyperedges, then sentences.
pub fn gen_synthetic(config: &GeneratorConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.entities;
    let offsets = config.offsets()?;
    let ruled: BTreeSet<&str> = config.rules.iter().map(|r| r.target.as_str()).collect();

    let mut facts: Vec<(usize, String, usize, bool)> = Vec::new();
    for name in config.relation_names() {
        let o = offsets[&name];
        let mut heads: Vec<usize> = (0..n).collect();
        let held: BTreeSet<usize> = if ruled.contains(name.as_str()) {
            heads.shuffle(&mut rng);
            let k = (config.heldout_fraction * n as f64).round() as usize;
            heads[..k].iter().copied().collect()
        } else {
            BTreeSet::new()
        };
        for h in 0..n {
            facts.push((h, name.clone(), (h + o) % n, held.contains(&h)));
        }
    }

    let mut records: Vec<Record> = facts
        .iter()
        .map(|(h, r, t, held)| Record::Triple {
            h: entity(*h),
            r: r.clone(),
            t: entity(*t),
            provenance: held.then(|| HELDOUT.to_string()),
        })
        .collect();

    let base: Vec<&(usize, String, usize, bool)> = facts.iter().filter(|f| !ruled.contains(f.1.as_str())).collect();
    for (h, r, t, _) in &base {
        if rng.random_bool(config.nary_rate) {
            let mut args = BTreeMap::new();
            args.insert("source".to_string(), entity(*h));
            args.insert("target".to_string(), entity(*t));
            records.push(Record::Nary {
                pred: format!("{r}_event"),
                args,
                provenance: None,
            });
        }
    }

    // sentences only describe training facts so held-out answers stay hidden
    let visible: Vec<&(usize, String, usize, bool)> = facts.iter().filter(|f| !f.3).collect();
    if !visible.is_empty() {
        for _ in 0..config.sentences {
            let (h, r, t, _) = visible[rng.random_range(0..visible.len())];
            let mut tail = *t;
            if rng.random_bool(config.corruption_rate) {
                tail = (tail + rng.random_range(1..n)) % n;
            }
            records.push(Record::Sentence {
                tokens: vec!["the".into(), entity(*h), format!("{r}s"), "the".into(), entity(tail)],
                pos: ["DET", "NOUN", "VERB", "DET", "NOUN"].iter().map(|s| s.to_string()).collect(),
                srl: None,
            });
        }
    } else if config.sentences > 0 {
        // no relations: sentences pair random entities
        for _ in 0..config.sentences {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            records.push(Record::Sentence {
                tokens: vec![entity(a), "meets".into(), entity(b)],
                pos: ["NOUN", "VERB", "NOUN"].iter().map(|s| s.to_string()).collect(),
                srl: None,
            });
        }
    }
    Corpus::from_records(records)
}

/// Forward-chaining engine over triples, applying composition rules until
/// nothing new is derived.
pub fn derive_facts(
    facts: &BTreeSet<(String, String, String)>,
    rules: &[CompositionRule],
) -> BTreeSet<(String, String, String)> {
    let mut known = facts.clone();
    loop {
        let mut new = Vec::new();
        for rule in rules {
            for (x, r1, y) in &known {
                if *r1 != rule.first {
                    continue;
                }
                for (y2, r2, z) in &known {
                    if y2 == y && *r2 == rule.second {
                        let f = (x.clone(), rule.target.clone(), z.clone());
                        if !known.contains(&f) {
                            new.push(f);
                        }
                    }
                }
            }
        }
        if new.is_empty() {
            return known;
        }
        known.extend(new);
    }
}

/// Triples of `corpus`, split into (training, held-out).
pub fn split_triples(corpus: &Corpus) -> (BTreeSet<(String, String, String)>, BTreeSet<(String, String, String)>) {
    let mut train = BTreeSet::new();
    let mut held = BTreeSet::new();
    for rec in &corpus.records {
        if let Record::Triple { h, r, t, provenance } = rec {
            let f = (h.clone(), r.clone(), t.clone());
            if provenance.as_deref() == Some(HELDOUT) {
                held.insert(f);
            } else {
                train.insert(f);
            }
        }
    }
    (train, held)
}
