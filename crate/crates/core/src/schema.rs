//! Structured instances, sentence views and corpus ingestion.
//!
//! Every fact or sentence view becomes a [`StructuredInstance`]: an instance
//! id plus slot-labelled tokens. Triples use the HEAD/RELATION/TAIL schema,
//! n-ary facts use PREDICATE plus their argument roles, and a sentence is
//! expanded into a sequence view (POSITION_k slots), a POS view (tag slots
//! with within-slot positions) and, when role annotations are supplied, an
//! SRL view. Views of one sentence are tied together by explicit link
//! records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MASK_TOKEN: &str = "[MASK]";
pub const HEAD: &str = "HEAD";
pub const RELATION: &str = "RELATION";
pub const TAIL: &str = "TAIL";
pub const PREDICATE: &str = "PREDICATE";
const POSITION_PREFIX: &str = "POSITION_";

pub const TRIPLE_SCHEMA: &str = "triple";
pub const NARY_SCHEMA: &str = "nary";
pub const SEQUENCE_SCHEMA: &str = "sequence";
pub const POS_SCHEMA: &str = "pos";
pub const SRL_SCHEMA: &str = "srl";

/// A slot label. Positional slots are virtual: `Position(k)` is never stored
/// in a schema's slot list, the schema only declares the family.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Named(String),
    /// 1-based absolute position.
    Position(usize),
}

impl Slot {
    pub fn named(name: &str) -> Self {
        Slot::Named(name.to_string())
    }

    pub fn parse(s: &str) -> Self {
        match s.strip_prefix(POSITION_PREFIX).map(str::parse::<usize>) {
            Some(Ok(k)) => Slot::Position(k),
            _ => Slot::Named(s.to_string()),
        }
    }

    /// Slot family used for bias tables: every positional slot shares one.
    pub fn family(&self) -> &str {
        match self {
            Slot::Named(n) => n,
            Slot::Position(_) => "POSITION",
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Named(n) => f.write_str(n),
            Slot::Position(k) => write!(f, "{POSITION_PREFIX}{k}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotSchema {
    pub name: String,
    pub slots: Vec<String>,
    pub positional_family: bool,
    pub allows_within_slot_positions: bool,
}

impl SlotSchema {
    pub fn contains(&self, slot: &Slot) -> bool {
        match slot {
            Slot::Named(n) => self.slots.iter().any(|s| s == n),
            Slot::Position(k) => self.positional_family && *k >= 1,
        }
    }

    fn fixed(name: &str, slots: &[&str], within: bool) -> Self {
        Self {
            name: name.to_string(),
            slots: slots.iter().map(|s| s.to_string()).collect(),
            positional_family: false,
            allows_within_slot_positions: within,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InstanceKind {
    Triple,
    Nary,
    SentenceSequence,
    SentencePos,
    SentenceSrl,
}

impl InstanceKind {
    pub fn is_language(self) -> bool {
        matches!(
            self,
            InstanceKind::SentenceSequence | InstanceKind::SentencePos | InstanceKind::SentenceSrl
        )
    }

    pub fn schema_name(self) -> &'static str {
        match self {
            InstanceKind::Triple => TRIPLE_SCHEMA,
            InstanceKind::Nary => NARY_SCHEMA,
            InstanceKind::SentenceSequence => SEQUENCE_SCHEMA,
            InstanceKind::SentencePos => POS_SCHEMA,
            InstanceKind::SentenceSrl => SRL_SCHEMA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub token_id: usize,
    pub slot: Slot,
    pub within_slot_position: Option<usize>,
}

/// Token `token` of this instance is the same token as `other_token` of
/// instance `other_instance`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Link {
    pub token: usize,
    pub other_instance: String,
    pub other_token: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuredInstance {
    pub instance_id: String,
    pub kind: InstanceKind,
    pub tokens: Vec<Token>,
    pub provenance: String,
    pub links: Vec<Link>,
}

impl StructuredInstance {
    pub fn schema_name(&self) -> &'static str {
        self.kind.schema_name()
    }

    /// Index of the first token in `slot`.
    pub fn find_slot(&self, slot: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t.slot.family() == slot)
    }
}

/// Token-string to index table. Index 0 is always the mask token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        v.intern(MASK_TOKEN);
        v
    }
}

impl Vocabulary {
    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownToken(format!("#{id}")))
    }

    pub fn mask_id(&self) -> usize {
        0
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One line of the JSONL corpus format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Record {
    Triple {
        h: String,
        r: String,
        t: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        provenance: Option<String>,
    },
    Nary {
        pred: String,
        args: BTreeMap<String, String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        provenance: Option<String>,
    },
    Sentence {
        tokens: Vec<String>,
        pos: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        srl: Option<BTreeMap<String, Vec<usize>>>,
    },
}

impl Record {
    pub fn provenance(&self) -> &str {
        match self {
            Record::Triple { provenance, .. } | Record::Nary { provenance, .. } => {
                provenance.as_deref().unwrap_or("")
            }
            Record::Sentence { .. } => "",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub instance: String,
    pub token: Option<usize>,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.token {
            Some(t) => write!(f, "{} token {}: {}", self.instance, t, self.rule),
            None => write!(f, "{}: {}", self.instance, self.rule),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub vocabulary: Vocabulary,
    /// Token ids that name entities; shared between text and structure.
    pub entities: BTreeSet<usize>,
    /// Relation vocabulary: triple relations and `pred#role` hyperedge edges.
    pub relations: Vec<String>,
    pub schemas: BTreeMap<String, SlotSchema>,
    pub records: Vec<Record>,
    pub instances: Vec<StructuredInstance>,
    pub adjacency: BTreeMap<String, BTreeSet<String>>,
}

/// Relation id used for the edge from a hyperedge's predicate to one role.
pub fn nary_relation(pred: &str, role: &str) -> String {
    format!("{pred}#{role}")
}

impl Corpus {
    /// Builds a corpus from source records: vocabulary, instances, schemas
    /// and adjacency. Does not validate.
    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        let mut vocabulary = Vocabulary::default();
        let mut entities = BTreeSet::new();
        let mut relations: Vec<String> = Vec::new();
        let mut add_relation = |r: String| {
            if !relations.contains(&r) {
                relations.push(r);
            }
        };
        let mut nary_roles = BTreeSet::new();
        let mut pos_tags = BTreeSet::new();
        let mut srl_roles = BTreeSet::new();

        for rec in &records {
            match rec {
                Record::Triple { h, r, t, .. } => {
                    entities.insert(vocabulary.intern(h));
                    vocabulary.intern(r);
                    entities.insert(vocabulary.intern(t));
                    add_relation(r.clone());
                }
                Record::Nary { pred, args, .. } => {
                    vocabulary.intern(pred);
                    for (role, ent) in args {
                        entities.insert(vocabulary.intern(ent));
                        nary_roles.insert(role.clone());
                        add_relation(nary_relation(pred, role));
                    }
                }
                Record::Sentence { tokens, pos, srl } => {
                    for t in tokens {
                        vocabulary.intern(t);
                    }
                    pos_tags.extend(pos.iter().cloned());
                    if let Some(srl) = srl {
                        srl_roles.extend(srl.keys().cloned());
                    }
                }
            }
        }

        let mut instances = Vec::new();
        for (idx, rec) in records.iter().enumerate() {
            match rec {
                Record::Triple { h, r, t, provenance } => {
                    let mut inst = triple_to_instance(h, r, t, &vocabulary, &format!("f{idx}"))?;
                    inst.provenance = provenance.clone().unwrap_or_default();
                    instances.push(inst);
                }
                Record::Nary {
                    pred,
                    args,
                    provenance,
                } => {
                    let mut inst = nary_to_instance(pred, args, &vocabulary, &format!("f{idx}"))?;
                    inst.provenance = provenance.clone().unwrap_or_default();
                    instances.push(inst);
                }
                Record::Sentence { tokens, pos, srl } => {
                    let ids = tokens
                        .iter()
                        .map(|t| vocabulary.id(t))
                        .collect::<Result<Vec<_>>>()?;
                    instances.extend(sentence_views(&ids, pos, srl.as_ref(), &format!("s{idx}"))?);
                }
            }
        }

        let mut schemas = BTreeMap::new();
        schemas.insert(
            TRIPLE_SCHEMA.to_string(),
            SlotSchema::fixed(TRIPLE_SCHEMA, &[HEAD, RELATION, TAIL], false),
        );
        let mut nary_slots = vec![PREDICATE.to_string()];
        nary_slots.extend(nary_roles);
        schemas.insert(
            NARY_SCHEMA.to_string(),
            SlotSchema {
                name: NARY_SCHEMA.to_string(),
                slots: nary_slots,
                positional_family: false,
                allows_within_slot_positions: false,
            },
        );
        schemas.insert(
            SEQUENCE_SCHEMA.to_string(),
            SlotSchema {
                name: SEQUENCE_SCHEMA.to_string(),
                slots: Vec::new(),
                positional_family: true,
                allows_within_slot_positions: false,
            },
        );
        schemas.insert(
            POS_SCHEMA.to_string(),
            SlotSchema {
                name: POS_SCHEMA.to_string(),
                slots: pos_tags.into_iter().collect(),
                positional_family: false,
                allows_within_slot_positions: true,
            },
        );
        schemas.insert(
            SRL_SCHEMA.to_string(),
            SlotSchema {
                name: SRL_SCHEMA.to_string(),
                slots: srl_roles.into_iter().collect(),
                positional_family: false,
                allows_within_slot_positions: true,
            },
        );

        let adjacency = compute_adjacency(&instances, &entities);
        Ok(Self {
            vocabulary,
            entities,
            relations,
            schemas,
            records,
            instances,
            adjacency,
        })
    }

    pub fn instance(&self, id: &str) -> Option<&StructuredInstance> {
        self.instances.iter().find(|i| i.instance_id == id)
    }

    /// Named slots across every schema, sorted.
    pub fn named_slots(&self) -> Vec<String> {
        let set: BTreeSet<String> = self
            .schemas
            .values()
            .flat_map(|s| s.slots.iter().cloned())
            .collect();
        set.into_iter().collect()
    }

    pub fn entity_ids(&self) -> Vec<usize> {
        self.entities.iter().copied().collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

/// Instances sharing an entity token, or tied by a link record, are
/// neighbours. Uses an inverted entity index.
pub fn compute_adjacency(
    instances: &[StructuredInstance],
    entities: &BTreeSet<usize>,
) -> BTreeMap<String, BTreeSet<String>> {
    let mut adjacency: BTreeMap<String, BTreeSet<String>> = instances
        .iter()
        .map(|i| (i.instance_id.clone(), BTreeSet::new()))
        .collect();
    let mut by_entity: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
    for inst in instances {
        for t in &inst.tokens {
            if entities.contains(&t.token_id) {
                by_entity
                    .entry(t.token_id)
                    .or_default()
                    .insert(&inst.instance_id);
            }
        }
    }
    let mut connect = |a: &str, b: &str| {
        if a == b {
            return;
        }
        adjacency.entry(a.to_string()).or_default().insert(b.to_string());
        adjacency.entry(b.to_string()).or_default().insert(a.to_string());
    };
    for members in by_entity.values() {
        let members: Vec<&str> = members.iter().copied().collect();
        for (i, a) in members.iter().enumerate() {
            for b in &members[i + 1..] {
                connect(a, b);
            }
        }
    }
    for inst in instances {
        for link in &inst.links {
            connect(&inst.instance_id, &link.other_instance);
        }
    }
    adjacency
}

pub fn triple_to_instance(
    h: &str,
    r: &str,
    t: &str,
    vocabulary: &Vocabulary,
    instance_id: &str,
) -> Result<StructuredInstance> {
    let token = |tok: &str, slot: &str| -> Result<Token> {
        Ok(Token {
            token_id: vocabulary.id(tok)?,
            slot: Slot::named(slot),
            within_slot_position: None,
        })
    };
    Ok(StructuredInstance {
        instance_id: instance_id.to_string(),
        kind: InstanceKind::Triple,
        tokens: vec![token(h, HEAD)?, token(r, RELATION)?, token(t, TAIL)?],
        provenance: String::new(),
        links: Vec::new(),
    })
}

/// Inverse of [`triple_to_instance`].
pub fn instance_to_triple(
    inst: &StructuredInstance,
    vocabulary: &Vocabulary,
) -> Result<(String, String, String)> {
    let get = |slot: &str| -> Result<String> {
        let idx = inst
            .find_slot(slot)
            .ok_or_else(|| Error::UnknownSlot(format!("{} in {}", slot, inst.instance_id)))?;
        Ok(vocabulary.token(inst.tokens[idx].token_id)?.to_string())
    };
    Ok((get(HEAD)?, get(RELATION)?, get(TAIL)?))
}

pub fn nary_to_instance(
    pred: &str,
    args: &BTreeMap<String, String>,
    vocabulary: &Vocabulary,
    instance_id: &str,
) -> Result<StructuredInstance> {
    let mut tokens = vec![Token {
        token_id: vocabulary.id(pred)?,
        slot: Slot::named(PREDICATE),
        within_slot_position: None,
    }];
    for (role, ent) in args {
        tokens.push(Token {
            token_id: vocabulary.id(ent)?,
            slot: Slot::Named(role.clone()),
            within_slot_position: None,
        });
    }
    Ok(StructuredInstance {
        instance_id: instance_id.to_string(),
        kind: InstanceKind::Nary,
        tokens,
        provenance: String::new(),
        links: Vec::new(),
    })
}

/// Expands one sentence into its sequence view, POS view and (optionally)
/// SRL view. Instance ids are `{base_id}/seq`, `{base_id}/pos`, `{base_id}/srl`.
pub fn sentence_views(
    tokens: &[usize],
    pos_tags: &[String],
    srl: Option<&BTreeMap<String, Vec<usize>>>,
    base_id: &str,
) -> Result<Vec<StructuredInstance>> {
    if pos_tags.len() != tokens.len() {
        return Err(Error::Misaligned {
            index: tokens.len().min(pos_tags.len()),
            message: format!("{} tokens but {} POS tags", tokens.len(), pos_tags.len()),
        });
    }
    let seq_id = format!("{base_id}/seq");
    let pos_id = format!("{base_id}/pos");
    let srl_id = format!("{base_id}/srl");

    // SRL view: token order follows roles (sorted), then listed indices.
    let mut srl_tokens: Vec<(usize, Token)> = Vec::new();
    if let Some(srl) = srl {
        for (role, covered) in srl {
            for (k, &idx) in covered.iter().enumerate() {
                if idx >= tokens.len() {
                    return Err(Error::Misaligned {
                        index: idx,
                        message: format!("SRL role {role} covers token {idx} beyond sentence end"),
                    });
                }
                srl_tokens.push((
                    idx,
                    Token {
                        token_id: tokens[idx],
                        slot: Slot::Named(role.clone()),
                        within_slot_position: Some(k + 1),
                    },
                ));
            }
        }
    }

    let mut seq = StructuredInstance {
        instance_id: seq_id.clone(),
        kind: InstanceKind::SentenceSequence,
        tokens: Vec::with_capacity(tokens.len()),
        provenance: String::new(),
        links: Vec::new(),
    };
    let mut pos = StructuredInstance {
        instance_id: pos_id.clone(),
        kind: InstanceKind::SentencePos,
        tokens: Vec::with_capacity(tokens.len()),
        provenance: String::new(),
        links: Vec::new(),
    };
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, (&tok, tag)) in tokens.iter().zip(pos_tags).enumerate() {
        seq.tokens.push(Token {
            token_id: tok,
            slot: Slot::Position(i + 1),
            within_slot_position: None,
        });
        let c = counts.entry(tag.as_str()).or_insert(0);
        *c += 1;
        pos.tokens.push(Token {
            token_id: tok,
            slot: Slot::Named(tag.clone()),
            within_slot_position: Some(*c),
        });
        seq.links.push(Link {
            token: i,
            other_instance: pos_id.clone(),
            other_token: i,
        });
        pos.links.push(Link {
            token: i,
            other_instance: seq_id.clone(),
            other_token: i,
        });
    }

    let mut views = vec![seq, pos];
    if srl.is_some() {
        let mut srl_view = StructuredInstance {
            instance_id: srl_id.clone(),
            kind: InstanceKind::SentenceSrl,
            tokens: Vec::with_capacity(srl_tokens.len()),
            provenance: String::new(),
            links: Vec::new(),
        };
        for (k, (sent_idx, tok)) in srl_tokens.into_iter().enumerate() {
            srl_view.tokens.push(tok);
            for (view, other) in [(0usize, &seq_id), (1, &pos_id)] {
                srl_view.links.push(Link {
                    token: k,
                    other_instance: other.clone(),
                    other_token: sent_idx,
                });
                views[view].links.push(Link {
                    token: sent_idx,
                    other_instance: srl_id.clone(),
                    other_token: k,
                });
            }
        }
        views.push(srl_view);
    }
    Ok(views)
}

/// Checks every corpus invariant and reports violations as data.
pub fn validate(corpus: &Corpus) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let by_id: BTreeMap<&str, &StructuredInstance> = corpus
        .instances
        .iter()
        .map(|i| (i.instance_id.as_str(), i))
        .collect();
    let violation = |instance: &str, token: Option<usize>, rule: String| Violation {
        instance: instance.to_string(),
        token,
        rule,
    };

    for inst in &corpus.instances {
        let id = inst.instance_id.as_str();
        if !seen.insert(id) {
            out.push(violation(id, None, "duplicate instance id".into()));
        }
        let schema = corpus.schemas.get(inst.schema_name());
        if schema.is_none() {
            out.push(violation(id, None, format!("unknown schema {}", inst.schema_name())));
        }
        for (ti, tok) in inst.tokens.iter().enumerate() {
            if tok.token_id >= corpus.vocabulary.len() {
                out.push(violation(id, Some(ti), format!("token id {} outside vocabulary", tok.token_id)));
            }
            if let Some(schema) = schema {
                if !schema.contains(&tok.slot) {
                    out.push(violation(
                        id,
                        Some(ti),
                        format!("slot {} not in schema {}", tok.slot, schema.name),
                    ));
                }
                if tok.within_slot_position.is_some() != schema.allows_within_slot_positions {
                    out.push(violation(
                        id,
                        Some(ti),
                        format!("within-slot position presence disagrees with schema {}", schema.name),
                    ));
                }
            }
        }
        for link in &inst.links {
            if link.token >= inst.tokens.len() {
                out.push(violation(id, Some(link.token), "link from missing token".into()));
            }
            match by_id.get(link.other_instance.as_str()) {
                None => out.push(violation(
                    id,
                    Some(link.token),
                    format!("link to unknown instance {}", link.other_instance),
                )),
                Some(other) if link.other_token >= other.tokens.len() => out.push(violation(
                    id,
                    Some(link.token),
                    format!("link to missing token {} of {}", link.other_token, link.other_instance),
                )),
                _ => {}
            }
        }
    }

    for (a, neighbours) in &corpus.adjacency {
        if !by_id.contains_key(a.as_str()) {
            out.push(violation(a, None, "adjacency entry for unknown instance".into()));
        }
        for b in neighbours {
            let symmetric = corpus.adjacency.get(b).is_some_and(|n| n.contains(a));
            if !symmetric {
                out.push(violation(a, None, format!("asymmetric adjacency {a} -> {b}")));
            }
        }
    }
    let expected = compute_adjacency(&corpus.instances, &corpus.entities);
    for (a, neighbours) in &expected {
        for b in neighbours {
            let present = corpus.adjacency.get(a).is_some_and(|n| n.contains(b));
            if !present {
                out.push(violation(a, None, format!("missing adjacency {a} -> {b}")));
            }
        }
    }
    out
}

/// Parses JSONL records without validating the resulting corpus.
pub fn parse_jsonl(text: &str) -> Result<Corpus> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Corpus::from_records(records)
}

/// Reads, builds and validates a corpus; fails on any violation.
pub fn ingest_jsonl(path: impl AsRef<Path>) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    let corpus = parse_jsonl(&text)?;
    let violations = validate(&corpus);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple(h: &str, r: &str, t: &str) -> Record {
        Record::Triple {
            h: h.into(),
            r: r.into(),
            t: t.into(),
            provenance: None,
        }
    }

    fn sentence(tokens: &[&str], pos: &[&str]) -> Record {
        Record::Sentence {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            pos: pos.iter().map(|s| s.to_string()).collect(),
            srl: None,
        }
    }

    #[test]
    fn triple_becomes_three_slot_tokens() {
        let c = Corpus::from_records(vec![triple("A", "born_in", "B")]).unwrap();
        let inst = &c.instances[0];
        let slots: Vec<String> = inst.tokens.iter().map(|t| t.slot.to_string()).collect();
        assert_eq!(slots, vec![HEAD, RELATION, TAIL]);
        assert_eq!(
            instance_to_triple(inst, &c.vocabulary).unwrap(),
            ("A".into(), "born_in".into(), "B".into())
        );
        let again = triple_to_instance("A", "born_in", "B", &c.vocabulary, &inst.instance_id).unwrap();
        assert_eq!(&again, inst);
    }

    #[test]
    fn unknown_triple_token_is_error() {
        let v = Vocabulary::default();
        assert!(matches!(
            triple_to_instance("A", "r", "B", &v, "x"),
            Err(Error::UnknownToken(_))
        ));
    }

    #[test]
    fn shared_entity_links_instances() {
        let c = Corpus::from_records(vec![triple("A", "r", "B"), triple("A", "s", "C")]).unwrap();
        assert!(c.adjacency["f0"].contains("f1"));
        assert!(c.adjacency["f1"].contains("f0"));
        assert!(validate(&c).is_empty());
    }

    #[test]
    fn one_token_sentence_views() {
        let views = sentence_views(&[5], &["NOUN".into()], None, "s").unwrap();
        assert_eq!(views.len(), 2);
        assert_eq!(views[0].tokens[0].slot, Slot::Position(1));
        assert_eq!(views[1].tokens[0].slot, Slot::named("NOUN"));
        assert_eq!(views[1].tokens[0].within_slot_position, Some(1));
    }

    #[test]
    fn pos_view_counts_occurrences() {
        let tags: Vec<String> = ["NOUN", "VERB", "NOUN"].iter().map(|s| s.to_string()).collect();
        let views = sentence_views(&[1, 2, 3], &tags, None, "s").unwrap();
        let pos = &views[1];
        let got: Vec<(String, Option<usize>)> = pos
            .tokens
            .iter()
            .map(|t| (t.slot.to_string(), t.within_slot_position))
            .collect();
        // counting oracle: the k-th occurrence of a tag gets position k
        let mut expected = Vec::new();
        for (i, tag) in tags.iter().enumerate() {
            let k = tags[..=i].iter().filter(|t| *t == tag).count();
            expected.push((tag.clone(), Some(k)));
        }
        assert_eq!(got, expected);
        assert_eq!(got[2], ("NOUN".to_string(), Some(2)));
    }

    #[test]
    fn every_token_is_in_each_view_with_links() {
        let mut srl = BTreeMap::new();
        srl.insert("ARG0".to_string(), vec![0]);
        srl.insert("PREDICATE".to_string(), vec![1]);
        srl.insert("ARG1".to_string(), vec![2]);
        let tags: Vec<String> = ["NOUN", "VERB", "NOUN"].iter().map(|s| s.to_string()).collect();
        let views = sentence_views(&[1, 2, 3], &tags, Some(&srl), "s").unwrap();
        assert_eq!(views.len(), 3);
        for i in 0..3 {
            let appearances = views
                .iter()
                .filter(|v| v.tokens.iter().any(|t| t.token_id == i + 1))
                .count();
            assert_eq!(appearances, 3);
        }
        // each sequence token links to its POS and SRL copies
        for i in 0..3 {
            let targets: BTreeSet<&str> = views[0]
                .links
                .iter()
                .filter(|l| l.token == i)
                .map(|l| l.other_instance.as_str())
                .collect();
            assert_eq!(targets, BTreeSet::from(["s/pos", "s/srl"]));
        }
    }

    #[test]
    fn misaligned_tags_report_index() {
        let err = sentence_views(&[1, 2], &["NOUN".into()], None, "s").unwrap_err();
        assert!(matches!(err, Error::Misaligned { index: 1, .. }));
    }

    #[test]
    fn validation_catches_bad_slot_and_asymmetry() {
        let mut c = Corpus::from_records(vec![triple("A", "r", "B"), sentence(&["y", "x"], &["N", "V"])]).unwrap();
        assert!(validate(&c).is_empty());

        c.instances[0].tokens[0].slot = Slot::named("NOT_A_SLOT");
        let v = validate(&c);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].token, Some(0));

        c.instances[0].tokens[0].slot = Slot::named(HEAD);
        c.adjacency.get_mut("f0").unwrap().insert("s1/pos".into());
        let v = validate(&c);
        assert_eq!(v.len(), 1);
        assert!(v[0].rule.contains("f0") && v[0].rule.contains("s1/pos"), "{}", v[0]);
    }

    #[test]
    fn strict_jsonl_rejects_unknown_fields_with_line() {
        let text = "{\"kind\":\"triple\",\"h\":\"A\",\"r\":\"r\",\"t\":\"B\"}\n{\"kind\":\"triple\",\"h\":\"A\",\"r\":\"r\",\"t\":\"B\",\"extra\":1}\n";
        match parse_jsonl(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_field_order_is_irrelevant() {
        let a = parse_jsonl("{\"kind\":\"triple\",\"h\":\"A\",\"r\":\"r\",\"t\":\"B\"}").unwrap();
        let b = parse_jsonl("{\"t\":\"B\",\"r\":\"r\",\"h\":\"A\",\"kind\":\"triple\"}").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        fs::write(&p, "").unwrap();
        let c = ingest_jsonl(&p).unwrap();
        assert!(c.instances.is_empty());

        let mut srl = BTreeMap::new();
        srl.insert("ARG0".to_string(), vec![0]);
        let mut args = BTreeMap::new();
        args.insert("ARG1".to_string(), "A".to_string());
        args.insert("TIME".to_string(), "t1".to_string());
        let c = Corpus::from_records(vec![
            triple("A", "r", "B"),
            Record::Nary {
                pred: "visit".into(),
                args,
                provenance: Some("doc7".into()),
            },
            Record::Sentence {
                tokens: vec!["A".into(), "sleeps".into()],
                pos: vec!["NOUN".into(), "VERB".into()],
                srl: Some(srl),
            },
        ])
        .unwrap();
        c.write_jsonl(&p).unwrap();
        let back = ingest_jsonl(&p).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn two_triples_sharing_entity_give_one_pair() {
        let c = parse_jsonl(
            "{\"kind\":\"triple\",\"h\":\"A\",\"r\":\"r\",\"t\":\"B\"}\n{\"kind\":\"triple\",\"h\":\"C\",\"r\":\"r\",\"t\":\"A\"}\n",
        )
        .unwrap();
        let pairs: usize = c.adjacency.values().map(BTreeSet::len).sum::<usize>() / 2;
        assert_eq!(pairs, 1);
    }
}
