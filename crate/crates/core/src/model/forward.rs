use std::collections::{BTreeMap, BTreeSet};

use super::config::{LayerGroupConfig, ModelConfig, Stream};
use super::params::{layer_prefix, relation_param, slot_families, slot_param, Parameters, POSITION_FAMILY};
use crate::attention::{mask_between, JourneyMode, MaskLevel};
use crate::error::{Error, Result};
use crate::numerics::tape::rotation_matrix;
use crate::numerics::{Matrix, Scalar, Tape, Var};
use crate::operators::{rope_freqs, ParamKind, Readout, KAPPA, LOW_RANK_NORM_BOUND};
use crate::repository::Repository;
use crate::schema::{compute_adjacency, Slot, StructuredInstance};

/// Instances processed together, with the adjacency used by neighbourhood
/// masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub instances: Vec<StructuredInstance>,
    pub adjacency: BTreeMap<String, BTreeSet<String>>,
}

impl Batch {
    /// Adjacency is recomputed from the instances as given, so masked or
    /// corrupted tokens do not leak neighbourhood structure.
    pub fn new(instances: Vec<StructuredInstance>, entities: &BTreeSet<usize>) -> Self {
        let adjacency = compute_adjacency(&instances, entities);
        Self { instances, adjacency }
    }
}

/// Keys and values for cross groups.
#[derive(Clone, Copy, Debug)]
pub enum Memory<'a, T> {
    None,
    /// The structured stream of the same batch.
    InBatch,
    /// A frozen external repository; keys and values are constants.
    Frozen(&'a Repository<T>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLabel {
    pub instance: String,
    pub slot: Slot,
    pub token_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T> {
    pub layer: usize,
    pub stream: Stream,
    pub head: usize,
    pub queries: Vec<TokenLabel>,
    pub keys: Vec<TokenLabel>,
    pub weights: Matrix<T>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub capture_attention: bool,
}

/// Where a batch token's output lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenRow {
    pub stream: Stream,
    pub row: usize,
}

pub struct ForwardOutput<T> {
    /// Final normalised states of the language stream (`None` if empty).
    pub language: Option<Var>,
    pub structured: Option<Var>,
    /// `rows[i][t]` locates token `t` of batch instance `i`.
    pub rows: Vec<Vec<TokenRow>>,
    /// Normalised structured states seen as memory by each cross layer.
    pub cross_memory: Vec<Var>,
    pub attention: Vec<AttentionMap<T>>,
}

impl<T> ForwardOutput<T> {
    pub fn stream_var(&self, stream: Stream) -> Option<Var> {
        match stream {
            Stream::Language => self.language,
            _ => self.structured,
        }
    }
}

pub type ParamVars = BTreeMap<String, Var>;

/// Places every parameter on `tape` as a leaf.
pub fn bind_params<T: Scalar>(tape: &mut Tape<T>, params: &Parameters<T>) -> ParamVars {
    params.iter().map(|(n, m)| (n.clone(), tape.leaf(m.clone()))).collect()
}

fn pv(vars: &ParamVars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
}

/// An operator and its inverse on the tape.
#[derive(Clone, Copy)]
struct OpPair {
    fwd: Var,
    inv: Var,
}

/// Realises a clamped operator of `kind` from parameter nodes.
fn realize_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    kind: ParamKind,
    dim: usize,
    row: Var,
    uv: Option<(Var, Var)>,
    identity: Var,
) -> Result<OpPair> {
    Ok(match kind {
        ParamKind::Rotation => {
            let fwd = tape.rotation(row, T::one());
            let inv = tape.transpose(fwd);
            OpPair { fwd, inv }
        }
        ParamKind::Diagonal => {
            let bound = T::lit(KAPPA.ln());
            let fwd = tape.diag_exp(row, bound);
            let neg = tape.scale(row, -T::one());
            let inv = tape.diag_exp(neg, bound);
            OpPair { fwd, inv }
        }
        ParamKind::LowRank { rank } => {
            let (u, v) = match uv {
                Some(p) => p,
                None => {
                    let n = dim * rank;
                    let u = tape.gather_scalars(row, &(0..n).collect::<Vec<_>>(), dim, rank);
                    let v = tape.gather_scalars(row, &(n..2 * n).collect::<Vec<_>>(), dim, rank);
                    (u, v)
                }
            };
            let vt = tape.transpose(v);
            let uvt = tape.matmul(u, vt);
            let a = tape.frobenius_clamp(uvt, T::lit(LOW_RANK_NORM_BOUND));
            let fwd = tape.add(identity, a);
            let inv = tape.inverse(fwd)?;
            OpPair { fwd, inv }
        }
    })
}

/// How one token is transported in a given layer.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Transport {
    slot: Option<String>,
    /// Rotation step from an absolute position or a within-slot index.
    steps: Vec<usize>,
    instance: Option<String>,
}

fn transport_for(slot: &Slot, within: Option<usize>, instance: &str, positional: bool, mode: JourneyMode) -> Transport {
    let (named, mut steps) = match slot {
        Slot::Named(n) => (Some(n.clone()), Vec::new()),
        Slot::Position(k) if positional => (None, vec![*k]),
        Slot::Position(_) => (None, Vec::new()),
    };
    if positional {
        if let Some(p) = within {
            steps.push(p);
        }
    }
    Transport {
        slot: named,
        steps,
        instance: (mode == JourneyMode::InstanceJourney).then(|| instance.to_string()),
    }
}

#[derive(Clone)]
struct TokenMeta {
    instance: String,
    slot: Slot,
    within: Option<usize>,
    token_id: usize,
}

impl TokenMeta {
    fn label(&self) -> TokenLabel {
        TokenLabel {
            instance: self.instance.clone(),
            slot: self.slot.clone(),
            token_id: self.token_id,
        }
    }
}

struct Ctx<'a, T: Scalar> {
    config: &'a ModelConfig,
    vars: &'a ParamVars,
    identity: Var,
    freqs: Vec<T>,
    slot_ops: BTreeMap<(String, usize), OpPair>,
    rotations: BTreeMap<usize, Var>,
    families: BTreeMap<String, usize>,
    options: ForwardOptions,
    attention: Vec<AttentionMap<T>>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn param(&self, name: &str) -> Result<Var> {
        pv(self.vars, name)
    }

    fn slot_op(&mut self, tape: &mut Tape<T>, slot: &str, head: usize) -> Result<OpPair> {
        if let Some(op) = self.slot_ops.get(&(slot.to_string(), head)) {
            return Ok(*op);
        }
        if !self.config.slots.iter().any(|s| s == slot) {
            return Err(Error::UnknownSlot(slot.to_string()));
        }
        let base = slot_param(slot, head);
        let kind = self.config.slot_kind;
        let (row, uv) = match kind {
            ParamKind::LowRank { .. } => {
                let u = self.param(&format!("{base}.u"))?;
                (u, Some((u, self.param(&format!("{base}.v"))?)))
            }
            _ => (self.param(&base)?, None),
        };
        let op = realize_on_tape(tape, kind, self.config.head_dim(), row, uv, self.identity)?;
        self.slot_ops.insert((slot.to_string(), head), op);
        Ok(op)
    }

    fn rotation(&mut self, tape: &mut Tape<T>, step: usize) -> Var {
        let freqs = &self.freqs;
        *self
            .rotations
            .entry(step)
            .or_insert_with(|| tape.leaf(rotation_matrix(freqs, T::lit(step as f64))))
    }

    fn family(&self, slot: &Slot) -> Result<usize> {
        let name = match slot {
            Slot::Position(_) => POSITION_FAMILY,
            Slot::Named(n) => n,
        };
        self.families
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownSlot(name.to_string()))
    }

    /// Per-head instance operators from the normalised states `h` of the
    /// rows owned by each instance.
    fn instance_ops(
        &mut self,
        tape: &mut Tape<T>,
        h: Var,
        meta: &[TokenMeta],
    ) -> Result<BTreeMap<(String, usize), OpPair>> {
        let mut rows: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, m) in meta.iter().enumerate() {
            rows.entry(m.instance.as_str()).or_default().push(i);
        }
        let cfg = self.config;
        let dh = cfg.head_dim();
        let kind = cfg.instance_kind;
        let pc = kind.param_count(dh);
        let (w1, b1, w2, b2) = (
            self.param("readout.w1")?,
            self.param("readout.b1")?,
            self.param("readout.w2")?,
            self.param("readout.b2")?,
        );
        let pool = self.param("readout.pool")?;
        let mut out = BTreeMap::new();
        for (inst, idx) in rows {
            let x = tape.gather_rows(h, &idx);
            let pooled = match cfg.readout {
                Readout::MeanPool => tape.mean_rows(x),
                Readout::AttentionPool => {
                    let pt = tape.transpose(pool);
                    let s = tape.matmul(x, pt);
                    let s = tape.scale(s, T::one() / T::lit(cfg.d_model as f64).sqrt());
                    let s = tape.transpose(s);
                    let w = tape.masked_softmax(s, &vec![true; idx.len()])?;
                    tape.matmul(w, x)
                }
            };
            let z = tape.matmul(pooled, w1);
            let z = tape.add_row(z, b1);
            let z = tape.tanh(z);
            let p = tape.matmul(z, w2);
            let p = tape.add_row(p, b2);
            for head in 0..cfg.head_count {
                let row = tape.slice_cols(p, head * pc, pc);
                let op = realize_on_tape(tape, kind, dh, row, None, self.identity)?;
                out.insert((inst.to_string(), head), op);
            }
        }
        Ok(out)
    }

    /// Composite `C` (transposed) and `C^{-1}` per distinct transport, plus
    /// the per-row assignment.
    fn composites(
        &mut self,
        tape: &mut Tape<T>,
        transports: &[Transport],
        head: usize,
        inst_ops: &BTreeMap<(String, usize), OpPair>,
    ) -> Result<(Vec<Var>, Vec<Var>, Vec<usize>)> {
        let mut index: BTreeMap<&Transport, usize> = BTreeMap::new();
        let mut c_t = Vec::new();
        let mut c_inv = Vec::new();
        let mut assign = Vec::with_capacity(transports.len());
        for t in transports {
            if let Some(&i) = index.get(t) {
                assign.push(i);
                continue;
            }
            // C = R_slot * Rot(steps...) * R_instance
            let mut fwd: Vec<Var> = Vec::new();
            let mut inv: Vec<Var> = Vec::new();
            if let Some(s) = &t.slot {
                let op = self.slot_op(tape, s, head)?;
                fwd.push(op.fwd);
                inv.push(op.inv);
            }
            for &k in &t.steps {
                let r = self.rotation(tape, k);
                fwd.push(r);
                inv.push(tape.transpose(r));
            }
            if let Some(e) = &t.instance {
                let op = inst_ops
                    .get(&(e.clone(), head))
                    .ok_or_else(|| Error::UnknownInstance(e.clone()))?;
                fwd.push(op.fwd);
                inv.push(op.inv);
            }
            let product = |tape: &mut Tape<T>, fs: &[Var], identity: Var| -> Var {
                fs.iter()
                    .copied()
                    .reduce(|a, b| tape.matmul(a, b))
                    .unwrap_or(identity)
            };
            inv.reverse();
            let c = product(tape, &fwd, self.identity);
            c_t.push(tape.transpose(c));
            c_inv.push(product(tape, &inv, self.identity));
            index.insert(t, c_t.len() - 1);
            assign.push(c_t.len() - 1);
        }
        Ok((c_t, c_inv, assign))
    }
}

fn feed_forward<T: Scalar>(tape: &mut Tape<T>, ctx: &Ctx<'_, T>, pre: &str, x: Var) -> Result<Var> {
    let h = tape.layer_norm(x, ctx.param(&format!("{pre}.ln2_g"))?, ctx.param(&format!("{pre}.ln2_b"))?);
    let f = tape.matmul(h, ctx.param(&format!("{pre}.ff_w1"))?);
    let f = tape.add_row(f, ctx.param(&format!("{pre}.ff_b1"))?);
    let f = tape.gelu(f);
    let f = tape.matmul(f, ctx.param(&format!("{pre}.ff_w2"))?);
    let f = tape.add_row(f, ctx.param(&format!("{pre}.ff_b2"))?);
    Ok(tape.add(x, f))
}

/// Multi-head journey attention given projected queries, keys and values.
#[allow(clippy::too_many_arguments)]
fn journey_heads<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx<'_, T>,
    layer: usize,
    stream: Stream,
    (q, k, v): (Var, Var, Var),
    (q_meta, k_meta): (&[TokenMeta], &[TokenMeta]),
    (q_tr, k_tr): (&[Transport], &[Transport]),
    mask: &[bool],
    retrieval_k: usize,
    inst_ops: &BTreeMap<(String, usize), OpPair>,
) -> Result<Var> {
    let cfg = ctx.config;
    let dh = cfg.head_dim();
    let fam_count = ctx.families.len();
    let qf = q_meta.iter().map(|m| ctx.family(&m.slot)).collect::<Result<Vec<_>>>()?;
    let kf = k_meta.iter().map(|m| ctx.family(&m.slot)).collect::<Result<Vec<_>>>()?;
    let bias = ctx.param("bias.slot")?;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut logits = Vec::with_capacity(cfg.head_count);
    let mut values = Vec::with_capacity(cfg.head_count);
    for head in 0..cfg.head_count {
        let (qt, _, qa) = ctx.composites(tape, q_tr, head, inst_ops)?;
        let (_, kinv, ka) = ctx.composites(tape, k_tr, head, inst_ops)?;
        let qh = tape.slice_cols(q, head * dh, dh);
        let kh = tape.slice_cols(k, head * dh, dh);
        let vh = tape.slice_cols(v, head * dh, dh);
        let qp = tape.row_transform(qh, &qt, &qa);
        let kp = tape.row_transform(kh, &kinv, &ka);
        let kpt = tape.transpose(kp);
        let s = tape.matmul(qp, kpt);
        let s = tape.scale(s, scale);
        let idx: Vec<usize> = qf
            .iter()
            .flat_map(|&a| kf.iter().map(move |&b| head * fam_count * fam_count + a * fam_count + b))
            .collect();
        let b = tape.gather_scalars(bias, &idx, qf.len(), kf.len());
        logits.push(tape.add(s, b));
        values.push(vh);
    }
    let mut heads = Vec::with_capacity(cfg.head_count);
    for (head, (&s, &vh)) in logits.iter().zip(&values).enumerate() {
        let mask = retrieval_mask(tape.value(s), mask, retrieval_k);
        let alpha = tape.masked_softmax(s, &mask)?;
        if ctx.options.capture_attention {
            ctx.attention.push(AttentionMap {
                layer,
                stream,
                head,
                queries: q_meta.iter().map(TokenMeta::label).collect(),
                keys: k_meta.iter().map(TokenMeta::label).collect(),
                weights: tape.value(alpha).clone(),
            });
        }
        heads.push(tape.matmul(alpha, vh));
    }
    Ok(tape.concat_cols(&heads))
}

fn flat_mask(level: MaskLevel, q: &[TokenMeta], k: &[TokenMeta], adjacency: &BTreeMap<String, BTreeSet<String>>) -> Result<Vec<bool>> {
    let qo: Vec<&str> = q.iter().map(|m| m.instance.as_str()).collect();
    let ko: Vec<&str> = k.iter().map(|m| m.instance.as_str()).collect();
    let m = mask_between(level, &qo, &ko, adjacency)?;
    Ok((0..q.len()).flat_map(|i| m.row(i).to_vec()).collect())
}

#[allow(clippy::too_many_arguments)]
fn self_layer<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx<'_, T>,
    layer: usize,
    group: &LayerGroupConfig,
    x: Var,
    meta: &[TokenMeta],
    adjacency: &BTreeMap<String, BTreeSet<String>>,
) -> Result<Var> {
    let pre = layer_prefix(layer);
    let h = tape.layer_norm(x, ctx.param(&format!("{pre}.ln1_g"))?, ctx.param(&format!("{pre}.ln1_b"))?);
    let q = tape.matmul(h, ctx.param(&format!("{pre}.wq"))?);
    let k = tape.matmul(h, ctx.param(&format!("{pre}.wk"))?);
    let v = tape.matmul(h, ctx.param(&format!("{pre}.wv"))?);
    let mask = flat_mask(group.level, meta, meta, adjacency)?;
    let tr: Vec<Transport> = meta
        .iter()
        .map(|m| transport_for(&m.slot, m.within, &m.instance, group.positional_transport, group.journey_mode))
        .collect();
    let inst_ops = if group.journey_mode == JourneyMode::InstanceJourney {
        ctx.instance_ops(tape, h, meta)?
    } else {
        BTreeMap::new()
    };
    let att = journey_heads(tape, ctx, layer, group.stream, (q, k, v), (meta, meta), (&tr, &tr), &mask, 0, &inst_ops)?;
    let o = tape.matmul(att, ctx.param(&format!("{pre}.wo"))?);
    let x = tape.add(x, o);
    feed_forward(tape, ctx, &pre, x)
}

/// Keeps, per query row, the `top_k` allowed keys with the largest logit
/// in one head. The selection is a hard choice and carries no gradient.
fn retrieval_mask<T: Scalar>(logits: &Matrix<T>, base: &[bool], top_k: usize) -> Vec<bool> {
    let (n, m) = (logits.rows(), logits.cols());
    if top_k == 0 || top_k >= m {
        return base.to_vec();
    }
    let mut out = vec![false; n * m];
    for i in 0..n {
        let mut cand: Vec<(usize, T)> = (0..m).filter(|&j| base[i * m + j]).map(|j| (j, logits[(i, j)])).collect();
        cand.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        for &(j, _) in cand.iter().take(top_k) {
            out[i * m + j] = true;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn cross_layer<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx<'_, T>,
    layer: usize,
    group: &LayerGroupConfig,
    x: Var,
    q_meta: &[TokenMeta],
    memory: Memory<'_, T>,
    structured: Option<(Var, &[TokenMeta])>,
    adjacency: &BTreeMap<String, BTreeSet<String>>,
) -> Result<(Var, Option<Var>)> {
    let pre = layer_prefix(layer);
    let cfg = ctx.config;
    let dh = cfg.head_dim();
    let h = tape.layer_norm(x, ctx.param(&format!("{pre}.ln1_g"))?, ctx.param(&format!("{pre}.ln1_b"))?);
    let q = tape.matmul(h, ctx.param(&format!("{pre}.wq"))?);

    let (k, v, k_meta, mem_state, mem_inst_ops): (Var, Var, Vec<TokenMeta>, Option<Var>, _) = match memory {
        Memory::None => return Err(Error::Config("cross layer needs a memory (in-batch or repository)".into())),
        Memory::Frozen(repo) => {
            if repo.value_dim() != cfg.d_model || repo.dim() != cfg.d_model {
                return Err(Error::DimensionMismatch {
                    op: "cross memory",
                    left: (cfg.d_model, cfg.d_model),
                    right: (repo.dim(), repo.value_dim()),
                });
            }
            if group.journey_mode == JourneyMode::InstanceJourney {
                return Err(Error::Config(
                    "instance journeys across a frozen repository are not supported".into(),
                ));
            }
            if group.level != MaskLevel::Global {
                return Err(Error::Config("a frozen repository can only back a global cross group".into()));
            }
            let items = repo.items();
            let keys = Matrix::from_fn(items.len(), cfg.d_model, |r, c| items[r].key[c]);
            let vals = Matrix::from_fn(items.len(), cfg.d_model, |r, c| items[r].value[c]);
            let meta = items
                .iter()
                .map(|it| TokenMeta {
                    instance: it.instance.clone(),
                    slot: it.slot.clone(),
                    within: None,
                    token_id: it.token_id,
                })
                .collect();
            (tape.leaf(keys), tape.leaf(vals), meta, None, BTreeMap::new())
        }
        Memory::InBatch => {
            // no facts in the batch: nothing to attend to
            let Some((s, meta)) = structured else {
                return Ok((x, None));
            };
            let m = tape.layer_norm(s, ctx.param(&format!("{pre}.mem_g"))?, ctx.param(&format!("{pre}.mem_b"))?);
            // k_j = W_k R_{s(j)} m_j, with R block-diagonal over heads
            let tr: Vec<Transport> = meta
                .iter()
                .map(|t| transport_for(&t.slot, t.within, &t.instance, group.positional_transport, JourneyMode::SlotJourney))
                .collect();
            let mut chunks = Vec::with_capacity(cfg.head_count);
            for head in 0..cfg.head_count {
                let (ct, _, assign) = ctx.composites(tape, &tr, head, &BTreeMap::new())?;
                let c: Vec<Var> = ct.iter().map(|&t| tape.transpose(t)).collect();
                let mh = tape.slice_cols(m, head * dh, dh);
                chunks.push(tape.row_transform(mh, &c, &assign));
            }
            let rm = tape.concat_cols(&chunks);
            let k = tape.matmul(rm, ctx.param(&format!("{pre}.wk"))?);
            let v = tape.matmul(m, ctx.param(&format!("{pre}.wv"))?);
            let inst_ops = if group.journey_mode == JourneyMode::InstanceJourney {
                ctx.instance_ops(tape, m, meta)?
            } else {
                BTreeMap::new()
            };
            (k, v, meta.to_vec(), Some(m), inst_ops)
        }
    };
    if k_meta.is_empty() {
        return Ok((x, mem_state));
    }
    let base = match memory {
        Memory::Frozen(_) => vec![true; q_meta.len() * k_meta.len()],
        _ => flat_mask(group.level, q_meta, &k_meta, adjacency)?,
    };

    let mut inst_ops = mem_inst_ops;
    if group.journey_mode == JourneyMode::InstanceJourney {
        inst_ops.extend(ctx.instance_ops(tape, h, q_meta)?);
    }
    let q_tr: Vec<Transport> = q_meta
        .iter()
        .map(|m| transport_for(&m.slot, m.within, &m.instance, group.positional_transport, group.journey_mode))
        .collect();
    let k_tr: Vec<Transport> = k_meta
        .iter()
        .map(|m| transport_for(&m.slot, m.within, &m.instance, group.positional_transport, group.journey_mode))
        .collect();
    let att = journey_heads(
        tape,
        ctx,
        layer,
        Stream::Cross,
        (q, k, v),
        (q_meta, &k_meta),
        (&q_tr, &k_tr),
        &base,
        cfg.retrieval_k,
        &inst_ops,
    )?;
    let o = tape.matmul(att, ctx.param(&format!("{pre}.wo"))?);
    let x = tape.add(x, o);
    Ok((feed_forward(tape, ctx, &pre, x)?, mem_state))
}

fn new_ctx<'a, T: Scalar>(
    tape: &mut Tape<T>,
    config: &'a ModelConfig,
    vars: &'a ParamVars,
    options: ForwardOptions,
) -> Ctx<'a, T> {
    let dh = config.head_dim();
    Ctx {
        config,
        vars,
        identity: tape.leaf(Matrix::identity(dh)),
        freqs: rope_freqs(dh),
        slot_ops: BTreeMap::new(),
        rotations: BTreeMap::new(),
        families: slot_families(config).into_iter().enumerate().map(|(i, f)| (f, i)).collect(),
        options,
        attention: Vec::new(),
    }
}

/// Runs the model on `batch`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    config: &ModelConfig,
    batch: &Batch,
    memory: Memory<'_, T>,
    options: ForwardOptions,
) -> Result<ForwardOutput<T>> {
    config.validate()?;
    let mut ctx = new_ctx(tape, config, vars, options);
    let mut meta: [Vec<TokenMeta>; 2] = [Vec::new(), Vec::new()];
    let mut ids: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    let mut rows = Vec::with_capacity(batch.instances.len());
    for inst in &batch.instances {
        let (s, stream) = if inst.kind.is_language() {
            (0, Stream::Language)
        } else {
            (1, Stream::Structured)
        };
        let mut r = Vec::with_capacity(inst.tokens.len());
        for tok in &inst.tokens {
            if tok.token_id >= config.vocab_size {
                return Err(Error::UnknownToken(format!("id {}", tok.token_id)));
            }
            r.push(TokenRow {
                stream,
                row: meta[s].len(),
            });
            meta[s].push(TokenMeta {
                instance: inst.instance_id.clone(),
                slot: tok.slot.clone(),
                within: tok.within_slot_position,
                token_id: tok.token_id,
            });
            ids[s].push(tok.token_id);
        }
        rows.push(r);
    }
    let embed = ctx.param("embed")?;
    let mut state: [Option<Var>; 2] = [None, None];
    for s in 0..2 {
        if !ids[s].is_empty() {
            state[s] = Some(tape.gather_rows(embed, &ids[s]));
        }
    }

    let mut layer = 0;
    let mut cross_memory = Vec::new();
    for group in &config.layer_groups {
        for _ in 0..group.layers {
            match group.stream {
                Stream::Language | Stream::Structured => {
                    let s = usize::from(group.stream == Stream::Structured);
                    if let Some(x) = state[s] {
                        state[s] = Some(self_layer(tape, &mut ctx, layer, group, x, &meta[s], &batch.adjacency)?);
                    }
                }
                Stream::Cross => {
                    let structured = state[1].map(|v| (v, meta[1].as_slice()));
                    match state[0] {
                        Some(x) => {
                            let (y, mem) = cross_layer(
                                tape,
                                &mut ctx,
                                layer,
                                group,
                                x,
                                &meta[0],
                                memory,
                                structured,
                                &batch.adjacency,
                            )?;
                            state[0] = Some(y);
                            cross_memory.extend(mem);
                        }
                        None => {
                            // no queries; still expose the memory view
                            if let Some((s, _)) = structured {
                                let pre = layer_prefix(layer);
                                let m = tape.layer_norm(s, ctx.param(&format!("{pre}.mem_g"))?, ctx.param(&format!("{pre}.mem_b"))?);
                                cross_memory.push(m);
                            }
                        }
                    }
                }
            }
            layer += 1;
        }
    }
    let mut finals = [None, None];
    for (s, name) in [(0, "lang"), (1, "struct")] {
        if let Some(x) = state[s] {
            finals[s] = Some(tape.layer_norm(
                x,
                ctx.param(&format!("final.{name}_g"))?,
                ctx.param(&format!("final.{name}_b"))?,
            ));
        }
    }
    Ok(ForwardOutput {
        language: finals[0],
        structured: finals[1],
        rows,
        cross_memory,
        attention: ctx.attention,
    })
}

/// Cross attention from language states `hidden` (one row per token, with
/// the given slots) over a frozen repository, using layer `layer`'s weights.
/// Positional operators are dropped: the block sees content and roles only.
pub fn cross_attend_position_agnostic<T: Scalar>(
    hidden: &Matrix<T>,
    slots: &[Slot],
    repo: &Repository<T>,
    params: &Parameters<T>,
    config: &ModelConfig,
    layer: usize,
) -> Result<Matrix<T>> {
    Ok(cross_attend_position_agnostic_with_attention(hidden, slots, repo, params, config, layer)?.0)
}

/// As [`cross_attend_position_agnostic`], also returning per-head weights.
pub fn cross_attend_position_agnostic_with_attention<T: Scalar>(
    hidden: &Matrix<T>,
    slots: &[Slot],
    repo: &Repository<T>,
    params: &Parameters<T>,
    config: &ModelConfig,
    layer: usize,
) -> Result<(Matrix<T>, Vec<AttentionMap<T>>)> {
    if slots.len() != hidden.rows() {
        return Err(Error::Misaligned {
            index: slots.len().min(hidden.rows()),
            message: "one slot per hidden row is required".into(),
        });
    }
    if !repo.is_frozen() {
        return Err(Error::NotFrozen);
    }
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params);
    let mut ctx = new_ctx(&mut tape, config, &vars, ForwardOptions { capture_attention: true });
    let group = LayerGroupConfig::new(Stream::Cross, MaskLevel::Global, 1).with_positional(false);
    let x = tape.leaf(hidden.clone());
    // every query gets its own instance id so nothing links queries together
    let meta: Vec<TokenMeta> = slots
        .iter()
        .enumerate()
        .map(|(i, s)| TokenMeta {
            instance: format!("q{i}"),
            slot: s.clone(),
            within: None,
            token_id: 0,
        })
        .collect();
    let (y, _) = cross_layer(
        &mut tape,
        &mut ctx,
        layer,
        &group,
        x,
        &meta,
        Memory::Frozen(repo),
        None,
        &BTreeMap::new(),
    )?;
    Ok((tape.value(y).clone(), ctx.attention))
}

/// Realised relation operator and its inverse for LP scoring, per head.
pub(crate) fn relation_ops_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    config: &ModelConfig,
    relation: &str,
) -> Result<Vec<(Var, Var)>> {
    if !config.relations.iter().any(|r| r == relation) {
        return Err(Error::UnknownRelation(relation.to_string()));
    }
    let dh = config.head_dim();
    let identity = tape.leaf(Matrix::identity(dh));
    (0..config.head_count)
        .map(|h| {
            let base = relation_param(relation, h);
            let (row, uv) = match config.relation_kind {
                ParamKind::LowRank { .. } => {
                    let u = pv(vars, &format!("{base}.u"))?;
                    (u, Some((u, pv(vars, &format!("{base}.v"))?)))
                }
                _ => (pv(vars, &base)?, None),
            };
            let op = realize_on_tape(tape, config.relation_kind, dh, row, uv, identity)?;
            Ok((op.fwd, op.inv))
        })
        .collect()
}
