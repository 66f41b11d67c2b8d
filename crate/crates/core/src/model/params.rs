use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Stream};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};
use crate::operators::{rope_freqs, OperatorTable, ParamKind, RoleOperator};
use crate::repository::Reader;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"JRCK0001";

/// Family name shared by every positional slot in the bias table.
pub const POSITION_FAMILY: &str = "POSITION";

/// Named tensor store. Every learned quantity of the model lives here under
/// a stable name, so optimiser state and checkpoints are plain maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    tensors: BTreeMap<String, Matrix<T>>,
}

pub fn layer_prefix(layer: usize) -> String {
    format!("L{layer}")
}

pub fn slot_param(name: &str, head: usize) -> String {
    format!("slot.{name}.h{head}")
}

pub fn relation_param(name: &str, head: usize) -> String {
    format!("rel.{name}.h{head}")
}

/// Bias-table families in index order: named slots, then positions.
pub fn slot_families(config: &ModelConfig) -> Vec<String> {
    let mut f = config.slots.clone();
    f.push(POSITION_FAMILY.to_string());
    f
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform<T: Scalar>(&mut self, rows: usize, cols: usize, scale: f64) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::lit(self.rng.random_range(-scale..scale)))
    }
}

impl<T: Scalar> Parameters<T> {
    pub fn empty() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Matrix<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn insert(&mut self, name: &str, value: Matrix<T>) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|m| m.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Matrix::is_finite)
    }

    fn insert_operator(&mut self, base: &str, kind: ParamKind, dim: usize, init: &mut Init, angles: Option<&[T]>) {
        match kind {
            ParamKind::Rotation => {
                let a = match angles {
                    Some(a) => Matrix::from_vec(1, a.len(), a.to_vec()).expect("row"),
                    None => init.uniform(1, dim / 2, std::f64::consts::PI),
                };
                self.insert(base, a);
            }
            ParamKind::Diagonal => {
                let m = match angles {
                    Some(_) => Matrix::zeros(1, dim),
                    None => init.uniform(1, dim, 0.1),
                };
                self.insert(base, m);
            }
            ParamKind::LowRank { rank } => {
                self.insert(&format!("{base}.u"), init.uniform(dim, rank, 0.1));
                let v = match angles {
                    Some(_) => Matrix::zeros(dim, rank),
                    None => init.uniform(dim, rank, 0.1),
                };
                self.insert(&format!("{base}.v"), v);
            }
        }
    }

    /// Deterministic initialisation from `config.seed`.
    ///
    /// Projections and embeddings are uniform in `±1/sqrt(d)`. Slot operators
    /// all start equal (rotations at the RoPE schedule, identity diagonals,
    /// `V = 0` for low rank), so every slot journey starts at the identity.
    /// Relation operators start random. Biases are zero, and the readout's
    /// output layer is zero so instance operators start at the identity.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let d = config.d_model;
        let dh = config.head_dim();
        let heads = config.head_count;
        let s = 1.0 / (d as f64).sqrt();
        let mut p = Self::empty();
        p.insert("embed", init.uniform(config.vocab_size, d, s));

        let freqs = rope_freqs::<T>(dh);
        for slot in &config.slots {
            for h in 0..heads {
                p.insert_operator(&slot_param(slot, h), config.slot_kind, dh, &mut init, Some(&freqs));
            }
        }
        for rel in &config.relations {
            for h in 0..heads {
                p.insert_operator(&relation_param(rel, h), config.relation_kind, dh, &mut init, None);
            }
        }
        let fam = slot_families(config).len();
        p.insert("bias.slot", Matrix::zeros(heads * fam, fam));
        p.insert("bias.rel", Matrix::zeros(heads, config.relations.len().max(1)));

        let pc = config.instance_kind.param_count(dh) * heads;
        p.insert("readout.pool", init.uniform(1, d, s));
        p.insert("readout.w1", init.uniform(d, config.readout_hidden, s));
        p.insert("readout.b1", Matrix::zeros(1, config.readout_hidden));
        p.insert("readout.w2", Matrix::zeros(config.readout_hidden, pc));
        p.insert("readout.b2", Matrix::zeros(1, pc));

        let mut layer = 0;
        for g in &config.layer_groups {
            for _ in 0..g.layers {
                let pre = layer_prefix(layer);
                let ones = Matrix::from_fn(1, d, |_, _| T::one());
                p.insert(&format!("{pre}.ln1_g"), ones.clone());
                p.insert(&format!("{pre}.ln1_b"), Matrix::zeros(1, d));
                for w in ["wq", "wk", "wv", "wo"] {
                    p.insert(&format!("{pre}.{w}"), init.uniform(d, d, s));
                }
                p.insert(&format!("{pre}.ln2_g"), ones.clone());
                p.insert(&format!("{pre}.ln2_b"), Matrix::zeros(1, d));
                p.insert(&format!("{pre}.ff_w1"), init.uniform(d, config.ff_hidden, s));
                p.insert(&format!("{pre}.ff_b1"), Matrix::zeros(1, config.ff_hidden));
                p.insert(
                    &format!("{pre}.ff_w2"),
                    init.uniform(config.ff_hidden, d, 1.0 / (config.ff_hidden as f64).sqrt()),
                );
                p.insert(&format!("{pre}.ff_b2"), Matrix::zeros(1, d));
                if g.stream == Stream::Cross {
                    p.insert(&format!("{pre}.mem_g"), ones);
                    p.insert(&format!("{pre}.mem_b"), Matrix::zeros(1, d));
                }
                layer += 1;
            }
        }
        for s in ["lang", "struct"] {
            p.insert(&format!("final.{s}_g"), Matrix::from_fn(1, d, |_, _| T::one()));
            p.insert(&format!("final.{s}_b"), Matrix::zeros(1, d));
        }
        Ok(p)
    }

    fn realize(&self, base: &str, kind: ParamKind, dim: usize) -> Result<RoleOperator<T>> {
        match kind {
            ParamKind::LowRank { .. } => RoleOperator::low_rank(
                self.get(&format!("{base}.u"))?.clone(),
                self.get(&format!("{base}.v"))?.clone(),
            ),
            _ => RoleOperator::from_params(kind, dim, self.get(base)?.data()),
        }
    }

    /// Per-head operator table with every named slot and relation realised.
    pub fn operator_table(&self, config: &ModelConfig) -> Result<OperatorTable<T>> {
        let dh = config.head_dim();
        let mut t = OperatorTable::new(dh, config.head_count, true)?;
        for slot in &config.slots {
            let ops = (0..config.head_count)
                .map(|h| self.realize(&slot_param(slot, h), config.slot_kind, dh))
                .collect::<Result<Vec<_>>>()?;
            t.insert_slot(slot, ops)?;
        }
        for rel in &config.relations {
            let ops = (0..config.head_count)
                .map(|h| self.realize(&relation_param(rel, h), config.relation_kind, dh))
                .collect::<Result<Vec<_>>>()?;
            t.insert_relation(rel, ops)?;
        }
        Ok(t)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn checkpoint_bytes<T: Scalar>(params: &Parameters<T>, config_hash: u64) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    put_u64(&mut out, config_hash);
    put_u64(&mut out, params.tensors.len() as u64);
    for (name, m) in &params.tensors {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, m.rows() as u64);
        put_u64(&mut out, m.cols() as u64);
        for x in m.data() {
            out.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint, returning the stored config hash and the tensors.
pub fn parse_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(u64, Parameters<T>)> {
    let mut r = Reader::new(bytes);
    let magic = r.bytes(8).map_err(|_| Error::Format {
        offset: 0,
        message: "truncated header".into(),
    })?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("version mismatch: found {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let hash = r.u64()?;
    let n = r.count()?;
    let mut params = Parameters::empty();
    for _ in 0..n {
        let name = r.string()?;
        let rows = r.count()?;
        let cols = r.count()?;
        let len = rows.checked_mul(cols).ok_or_else(|| r.err("tensor size overflow"))?;
        let data = r.f64s::<T>(len)?;
        params.insert(&name, Matrix::from_vec(rows, cols, data)?);
    }
    if !r.finished() {
        return Err(r.err("trailing bytes"));
    }
    Ok((hash, params))
}

pub fn save_checkpoint<T: Scalar>(params: &Parameters<T>, config: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(params, config.hash()))?;
    Ok(())
}

/// Loads a checkpoint and checks it was written for `config`.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Parameters<T>> {
    let (hash, params) = parse_checkpoint(&fs::read(path)?)?;
    if hash != config.hash() {
        return Err(Error::ConfigHash {
            expected: config.hash(),
            found: hash,
        });
    }
    Ok(params)
}
