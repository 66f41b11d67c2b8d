//! External key/value repository built from structured instances, with exact
//! and IVF-style approximate inner-product search and a binary snapshot
//! format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar, Vector};
use crate::operators::OperatorTable;
use crate::schema::{Slot, StructuredInstance};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"JRKV0001";
/// Seed for k-means++ initialisation.
pub const INDEX_SEED: u64 = 0x6b6d_6561_6e73;
pub const KMEANS_ITERATIONS: usize = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct RepositoryItem<T> {
    pub key: Vector<T>,
    pub value: Vector<T>,
    pub slot: Slot,
    pub instance: String,
    pub provenance: String,
    /// Vocabulary id of the source token, used for kNN-LM readout.
    pub token_id: usize,
}

/// Coarse quantizer: centroids and their inverted lists.
#[derive(Clone, Debug, PartialEq)]
pub struct IvfIndex<T> {
    pub centroids: Vec<Vector<T>>,
    pub lists: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Repository<T> {
    dim: usize,
    value_dim: usize,
    items: Vec<RepositoryItem<T>>,
    index: Option<IvfIndex<T>>,
    frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit<T> {
    /// Position of the item in insertion order.
    pub index: usize,
    pub score: T,
}

impl<T: Scalar> Repository<T> {
    pub fn new(dim: usize, value_dim: usize) -> Self {
        Self {
            dim,
            value_dim,
            items: Vec::new(),
            index: None,
            frozen: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value_dim(&self) -> usize {
        self.value_dim
    }

    pub fn items(&self) -> &[RepositoryItem<T>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn index(&self) -> Option<&IvfIndex<T>> {
        self.index.as_ref()
    }

    /// Appends an item. A frozen repository drops its index and becomes
    /// mutable again; call [`build_index`] to refreeze.
    pub fn push(&mut self, item: RepositoryItem<T>) -> Result<()> {
        if item.key.dim() != self.dim || item.value.dim() != self.value_dim {
            return Err(Error::DimensionMismatch {
                op: "Repository::push",
                left: (self.dim, self.value_dim),
                right: (item.key.dim(), item.value.dim()),
            });
        }
        self.frozen = false;
        self.index = None;
        self.items.push(item);
        Ok(())
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = RepositoryItem<T>>) -> Result<()> {
        for it in items {
            self.push(it)?;
        }
        Ok(())
    }
}

/// Transport for slot `s` on a vector of dimension `dim`. When `dim` is a
/// multiple of the table dimension the per-head operators are applied to
/// consecutive chunks.
fn slot_transport<T: Scalar>(slot: &Slot, table: &OperatorTable<T>, dim: usize) -> Result<Matrix<T>> {
    let d = table.dim();
    if d == 0 || dim % d != 0 {
        return Err(Error::DimensionMismatch {
            op: "slot transport",
            left: (dim, dim),
            right: (d, d),
        });
    }
    let blocks = (0..dim / d)
        .map(|h| Ok(table.slot(slot, h)?.matrix().clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Matrix::block_diag(&blocks))
}

/// One item per token of `inst` from caller-supplied token vectors `xs`:
/// `key = W_k (R_{s(j)} x_j)`, `value = W_v x_j`.
pub fn encode_instance_vectors<T: Scalar>(
    inst: &StructuredInstance,
    xs: &[Vector<T>],
    w_k: &Matrix<T>,
    w_v: &Matrix<T>,
    table: &OperatorTable<T>,
) -> Result<Vec<RepositoryItem<T>>> {
    if xs.len() != inst.tokens.len() {
        return Err(Error::Misaligned {
            index: xs.len().min(inst.tokens.len()),
            message: format!(
                "instance {} has {} tokens but {} vectors were given",
                inst.instance_id,
                inst.tokens.len(),
                xs.len()
            ),
        });
    }
    inst.tokens
        .iter()
        .zip(xs)
        .map(|(tok, x)| {
            let r = slot_transport(&tok.slot, table, x.dim())?;
            let key = w_k.matvec(&r.matvec(x)?)?;
            let value = w_v.matvec(x)?;
            Ok(RepositoryItem {
                key,
                value,
                slot: tok.slot.clone(),
                instance: inst.instance_id.clone(),
                provenance: inst.provenance.clone(),
                token_id: tok.token_id,
            })
        })
        .collect()
}

/// Encodes `inst` from static token embeddings (row `id` of `embeddings`).
pub fn encode_instance<T: Scalar>(
    inst: &StructuredInstance,
    embeddings: &Matrix<T>,
    w_k: &Matrix<T>,
    w_v: &Matrix<T>,
    table: &OperatorTable<T>,
) -> Result<Vec<RepositoryItem<T>>> {
    let xs = inst
        .tokens
        .iter()
        .map(|t| {
            if t.token_id >= embeddings.rows() {
                Err(Error::UnknownToken(format!("id {}", t.token_id)))
            } else {
                Ok(embeddings.row_vector(t.token_id))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    encode_instance_vectors(inst, &xs, w_k, w_v, table)
}

fn rank<T: Scalar>(mut hits: Vec<Hit<T>>, top_k: usize) -> Vec<Hit<T>> {
    // stable sort keeps insertion order among equal scores
    hits.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    hits.truncate(top_k);
    hits
}

type Filter<'a, T> = Option<&'a dyn Fn(&RepositoryItem<T>) -> bool>;

fn check_query<T: Scalar>(repo: &Repository<T>, q: &Vector<T>, top_k: usize) -> Result<()> {
    if top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    if q.dim() != repo.dim {
        return Err(Error::DimensionMismatch {
            op: "repository query",
            left: (repo.dim, 1),
            right: (q.dim(), 1),
        });
    }
    Ok(())
}

/// Top-`top_k` items by `q . key` after applying `filter`.
pub fn query_exact<T: Scalar>(repo: &Repository<T>, q: &Vector<T>, top_k: usize, filter: Filter<'_, T>) -> Result<Vec<Hit<T>>> {
    check_query(repo, q, top_k)?;
    let hits = repo
        .items
        .iter()
        .enumerate()
        .filter(|(_, it)| filter.is_none_or(|f| f(it)))
        .map(|(index, it)| Ok(Hit { index, score: q.dot(&it.key)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank(hits, top_k))
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

fn kmeans_pp<T: Scalar>(keys: &[&[T]], c: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let n = keys.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![keys[first].to_vec()];
    let mut d2: Vec<f64> = keys.iter().map(|k| sq_dist(k, keys[first]).as_f64()).collect();
    while centroids.len() < c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
            pick.expect("positive total weight")
        } else {
            chosen.iter().position(|&c| !c).expect("c <= n")
        };
        chosen[pick] = true;
        centroids.push(keys[pick].to_vec());
        for (i, k) in keys.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(k, keys[pick]).as_f64());
        }
    }
    centroids
}

fn nearest<T: Scalar>(x: &[T], centroids: &[Vec<T>]) -> usize {
    let mut best = 0;
    let mut best_d = sq_dist(x, &centroids[0]);
    for (i, c) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(x, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Clusters the keys with k-means (k-means++ init, fixed seed,
/// [`KMEANS_ITERATIONS`] Lloyd steps) and freezes the repository.
pub fn build_index<T: Scalar>(mut repo: Repository<T>, centroids: usize) -> Result<Repository<T>> {
    let n = repo.items.len();
    if n == 0 {
        return Err(Error::Empty("repository"));
    }
    if centroids == 0 || centroids > n {
        return Err(Error::Config(format!(
            "centroid count {centroids} must be between 1 and the item count {n}"
        )));
    }
    let keys: Vec<&[T]> = repo.items.iter().map(|it| it.key.data()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(INDEX_SEED);
    let mut cents = kmeans_pp(&keys, centroids, &mut rng);
    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_ITERATIONS {
        for (a, k) in assign.iter_mut().zip(&keys) {
            *a = nearest(k, &cents);
        }
        let mut sums = vec![vec![T::zero(); repo.dim]; centroids];
        let mut counts = vec![0usize; centroids];
        for (&a, k) in assign.iter().zip(&keys) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(k.iter()) {
                *s = *s + x;
            }
        }
        for ((c, s), &cnt) in cents.iter_mut().zip(sums).zip(&counts) {
            // empty clusters keep their previous centroid
            if cnt > 0 {
                let inv = T::one() / T::lit(cnt as f64);
                *c = s.into_iter().map(|x| x * inv).collect();
            }
        }
    }
    for (a, k) in assign.iter_mut().zip(&keys) {
        *a = nearest(k, &cents);
    }
    let mut lists = vec![Vec::new(); centroids];
    for (i, &a) in assign.iter().enumerate() {
        lists[a].push(i);
    }
    repo.index = Some(IvfIndex {
        centroids: cents.into_iter().map(Vector::from_raw).collect(),
        lists,
    });
    repo.frozen = true;
    Ok(repo)
}

/// Searches the `probes` inverted lists whose centroids score highest
/// against `q`, then ranks the candidates as [`query_exact`] does.
pub fn query_approx<T: Scalar>(
    repo: &Repository<T>,
    q: &Vector<T>,
    top_k: usize,
    probes: usize,
    filter: Filter<'_, T>,
) -> Result<Vec<Hit<T>>> {
    let index = match (&repo.index, repo.frozen) {
        (Some(ix), true) => ix,
        _ => return Err(Error::NotFrozen),
    };
    check_query(repo, q, top_k)?;
    let mut order = index
        .centroids
        .iter()
        .enumerate()
        .map(|(i, c)| Ok((i, q.dot(c)?)))
        .collect::<Result<Vec<_>>>()?;
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let mut candidates: Vec<usize> = order
        .iter()
        .take(probes.max(1))
        .flat_map(|&(i, _)| index.lists[i].iter().copied())
        .collect();
    candidates.sort_unstable();
    let hits = candidates
        .into_iter()
        .filter(|&i| filter.is_none_or(|f| f(&repo.items[i])))
        .map(|index| Ok(Hit { index, score: q.dot(&repo.items[index].key)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank(hits, top_k))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<T: Scalar>(&mut self, xs: &[T]) {
        for x in xs {
            self.0.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: wanted {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn count(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        // every counted element takes at least one byte
        if v > (self.buf.len() - self.pos) as u64 {
            self.pos = at;
            return Err(self.err(format!("count {v} exceeds remaining input")));
        }
        Ok(v as usize)
    }

    pub(crate) fn f64s<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.count()?;
        let at = self.pos;
        let raw = self.bytes(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            message: "invalid UTF-8".into(),
        })
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Serialises `repo` into the snapshot format.
pub fn to_bytes<T: Scalar>(repo: &Repository<T>) -> Vec<u8> {
    let mut w = Writer(SNAPSHOT_MAGIC.to_vec());
    w.u64(repo.dim as u64);
    w.u64(repo.value_dim as u64);
    w.u64(repo.items.len() as u64);
    w.u64(repo.index.as_ref().map_or(0, |ix| ix.centroids.len() as u64));
    w.u64(repo.frozen as u64);
    for it in &repo.items {
        w.f64s(it.key.data());
        w.f64s(it.value.data());
        w.str(&it.slot.to_string());
        w.str(&it.instance);
        w.str(&it.provenance);
        w.u64(it.token_id as u64);
    }
    if let Some(ix) = &repo.index {
        for (c, list) in ix.centroids.iter().zip(&ix.lists) {
            w.f64s(c.data());
            w.u64(list.len() as u64);
            for &i in list {
                w.u64(i as u64);
            }
        }
    }
    w.0
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Repository<T>> {
    let mut r = Reader::new(bytes);
    let magic = r.bytes(8).map_err(|_| Error::Format {
        offset: 0,
        message: "truncated header".into(),
    })?;
    if magic != SNAPSHOT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "version mismatch: expected {:?}, found {:?}",
                String::from_utf8_lossy(SNAPSHOT_MAGIC),
                String::from_utf8_lossy(magic)
            ),
        });
    }
    let dim = r.u64()? as usize;
    let value_dim = r.u64()? as usize;
    let n = r.count()?;
    let c = r.count()?;
    let frozen = match r.u64()? {
        0 => false,
        1 => true,
        other => return Err(r.err(format!("bad frozen flag {other}"))),
    };
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let key = Vector::from_raw(r.f64s(dim)?);
        let value = Vector::from_raw(r.f64s(value_dim)?);
        let slot = Slot::parse(&r.string()?);
        let instance = r.string()?;
        let provenance = r.string()?;
        let token_id = r.u64()? as usize;
        items.push(RepositoryItem {
            key,
            value,
            slot,
            instance,
            provenance,
            token_id,
        });
    }
    let index = if c > 0 {
        let mut ix = IvfIndex {
            centroids: Vec::with_capacity(c),
            lists: Vec::with_capacity(c),
        };
        for _ in 0..c {
            ix.centroids.push(Vector::from_raw(r.f64s(dim)?));
            let len = r.count()?;
            let mut list = Vec::with_capacity(len);
            for _ in 0..len {
                let at = r.offset();
                let i = r.u64()? as usize;
                if i >= n {
                    return Err(Error::Format {
                        offset: at,
                        message: format!("list entry {i} out of range"),
                    });
                }
                list.push(i);
            }
            ix.lists.push(list);
        }
        Some(ix)
    } else {
        None
    };
    if !r.finished() {
        return Err(r.err("trailing bytes"));
    }
    if frozen && index.is_none() {
        return Err(r.err("frozen snapshot without an index"));
    }
    Ok(Repository {
        dim,
        value_dim,
        items,
        index,
        frozen,
    })
}

pub fn persist<T: Scalar>(repo: &Repository<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(repo))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Repository<T>> {
    from_bytes(&fs::read(path)?)
}
