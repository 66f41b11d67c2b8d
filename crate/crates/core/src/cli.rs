//! Command-line front end. [`run`] parses arguments, dispatches and maps the
//! outcome to an exit code: 0 on success, 1 on a runtime failure and 2 on
//! bad flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::rope_equivalence_check;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, AttentionMap, Batch, ForwardOptions, Model, TokenLabel};
use crate::numerics::{Matrix, Vector};
use crate::operators::rope_freqs;
use crate::repository::{build_index, load, persist, query_approx, query_exact, Repository};
use crate::schema::{ingest_jsonl, validate, Corpus};
use crate::training::{evaluate, gen_synthetic, memory_for, metrics_csv, train, GeneratorConfig, TrainConfig};

/// Files written by `train --out DIR`.
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Largest journey/RoPE gap `rope-check` accepts.
pub const ROPE_TOLERANCE: f64 = 1e-9;

#[derive(Parser, Debug)]
#[command(name = "journey", about = "Role-transport attention over sentences and facts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus as JSONL.
    GenData {
        /// Generator keys (entities, relations, rule, ...).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a corpus; exits 0 iff there are no violations.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train and write config, checkpoint and metrics into a directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides `steps` from the config.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Link prediction, role recovery and kNN perplexity of a trained model.
    Eval {
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode the facts of a corpus into an indexed repository snapshot.
    RepoBuild {
        #[arg(long)]
        corpus: PathBuf,
        /// Directory written by `train`; without it a fresh model from
        /// `--config` and `--seed` is used.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k inner-product search in a repository snapshot.
    RepoQuery {
        #[arg(long)]
        repo: PathBuf,
        /// Comma-separated query vector.
        #[arg(long, allow_hyphen_values = true)]
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Search this many inverted lists instead of scanning everything.
        #[arg(long)]
        probes: Option<usize>,
    },
    /// Compare journey-transported scores with rotate-both-sides RoPE.
    RopeCheck {
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 128)]
        positions: i64,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump attention weights as CSV and P2 PGM heatmaps.
    InspectAttention {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        head: Option<usize>,
    },
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code. Output goes to stdout, diagnostics to stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    run_with(argv, &mut out, &mut err)
}

/// As [`run`], writing to the given streams.
pub fn run_with<I, S>(argv: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args = normalize(argv.into_iter().map(Into::into).collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(text) => {
            let _ = write!(out, "{text}");
            0
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

/// Accepts `repo build` and `repo query` as spellings of the hyphenated
/// commands.
fn normalize(mut args: Vec<String>) -> Vec<String> {
    if args.len() >= 3 && args[1] == "repo" && (args[2] == "build" || args[2] == "query") {
        let joined = format!("repo-{}", args[2]);
        args.splice(1..3, [joined]);
    }
    args
}

fn dispatch(cmd: Command) -> Result<String> {
    match cmd {
        Command::GenData { config, seed, out } => gen_data(config.as_deref(), seed, &out),
        Command::Validate { corpus } => validate_cmd(&corpus),
        Command::Train {
            config,
            corpus,
            out,
            seed,
            steps,
        } => train_cmd(config.as_deref(), &corpus, &out, seed, steps),
        Command::Eval { model, corpus, seed, out } => eval_cmd(&model, &corpus, seed, out.as_deref()),
        Command::RepoBuild {
            corpus,
            model,
            config,
            seed,
            out,
        } => repo_build(&corpus, model.as_deref(), config.as_deref(), seed, &out),
        Command::RepoQuery { repo, query, k, probes } => repo_query(&repo, &query, k, probes),
        Command::RopeCheck {
            dim,
            positions,
            draws,
            seed,
        } => rope_check(dim, positions, draws, seed),
        Command::InspectAttention {
            corpus,
            model,
            config,
            seed,
            out,
            layer,
            head,
        } => inspect_attention(&corpus, model.as_deref(), config.as_deref(), seed, &out, layer, head),
    }
}

fn read_kv(path: Option<&Path>) -> Result<KeyValues> {
    match path {
        Some(p) => KeyValues::load(p),
        None => Ok(KeyValues::default()),
    }
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    TrainConfig::from_kv(read_kv(path)?)
}

fn gen_data(config: Option<&Path>, seed: u64, out: &Path) -> Result<String> {
    let mut kv = read_kv(config)?;
    let cfg = GeneratorConfig::from_kv(&mut kv)?;
    kv.finish()?;
    let corpus = gen_synthetic(&cfg, seed)?;
    corpus.write_jsonl(out)?;
    Ok(format!("wrote {} records to {}\n", corpus.records.len(), out.display()))
}

fn validate_cmd(path: &Path) -> Result<String> {
    let corpus = ingest_jsonl(path)?;
    let violations = validate(&corpus);
    if violations.is_empty() {
        return Ok(format!("ok: {} instances\n", corpus.instances.len()));
    }
    Err(Error::Validation(violations))
}

fn train_cmd(config: Option<&Path>, corpus: &Path, out: &Path, seed: u64, steps: Option<usize>) -> Result<String> {
    let mut cfg = train_config(config)?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let corpus = ingest_jsonl(corpus)?;
    let outcome = train::<f64>(&cfg, &corpus, &cfg.weights, cfg.steps, seed)?;
    fs::create_dir_all(out)?;
    // the model seed is the training seed; record it so the checkpoint reloads
    let mut saved = cfg.clone();
    saved.model.seed = seed;
    fs::write(out.join(CONFIG_FILE), saved.to_key_values())?;
    save_checkpoint(&outcome.model.params, &outcome.model.config, out.join(CHECKPOINT_FILE))?;
    fs::write(out.join(METRICS_FILE), metrics_csv(&outcome.metrics))?;
    let last = outcome
        .metrics
        .last()
        .map_or_else(|| "no steps run".to_string(), |m| format!("final loss {}", m.total_loss));
    Ok(format!("trained {} steps, {last}; wrote {}\n", outcome.metrics.len(), out.display()))
}

/// Reads the config and checkpoint written by `train` into `dir`.
pub fn load_trained(dir: &Path, corpus: &Corpus) -> Result<(TrainConfig, Model<f64>)> {
    let cfg = TrainConfig::parse(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let config = cfg.model.clone().bind(corpus);
    let params = load_checkpoint(dir.join(CHECKPOINT_FILE), &config)?;
    Ok((cfg, Model { config, params }))
}

fn model_for(corpus: &Corpus, dir: Option<&Path>, config: Option<&Path>, seed: u64) -> Result<(TrainConfig, Model<f64>)> {
    match dir {
        Some(d) => load_trained(d, corpus),
        None => {
            let cfg = train_config(config)?;
            let mut mc = cfg.model.clone().bind(corpus);
            mc.seed = seed;
            Ok((cfg, Model::init(mc)?))
        }
    }
}

fn eval_cmd(dir: &Path, corpus: &Path, seed: u64, out: Option<&Path>) -> Result<String> {
    let corpus = ingest_jsonl(corpus)?;
    let (cfg, model) = load_trained(dir, &corpus)?;
    let report = evaluate(&model, &corpus, &cfg, seed)?.to_string();
    if let Some(p) = out {
        fs::write(p, &report)?;
    }
    Ok(report)
}

fn repo_build(corpus: &Path, dir: Option<&Path>, config: Option<&Path>, seed: u64, out: &Path) -> Result<String> {
    let corpus = ingest_jsonl(corpus)?;
    let (_, model) = model_for(&corpus, dir, config, seed)?;
    let mut repo = model.build_repository(&corpus.instances, &corpus.entities)?;
    let mut centroids = 0;
    if !repo.is_empty() {
        centroids = (repo.len() as f64).sqrt().ceil() as usize;
        repo = build_index(repo, centroids)?;
    }
    persist(&repo, out)?;
    Ok(format!("{} items, {centroids} centroids; wrote {}\n", repo.len(), out.display()))
}

/// Header of the `repo-query` result table.
pub const QUERY_HEADER: &str = "rank,item,score,instance,slot,token_id,provenance";

fn repo_query(path: &Path, query: &str, k: usize, probes: Option<usize>) -> Result<String> {
    let repo: Repository<f64> = load(path)?;
    let mut table = format!("{QUERY_HEADER}\n");
    if repo.is_empty() {
        return Ok(table);
    }
    let values = query
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad query component `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let q = Vector::from_vec(values)?;
    let hits = match probes {
        Some(p) => query_approx(&repo, &q, k, p, None)?,
        None => query_exact(&repo, &q, k, None)?,
    };
    for (rank, h) in hits.iter().enumerate() {
        let it = &repo.items()[h.index];
        writeln!(
            table,
            "{},{},{},{},{},{},{}",
            rank + 1,
            h.index,
            h.score,
            it.instance,
            it.slot,
            it.token_id,
            it.provenance
        )
        .expect("writing to a String");
    }
    Ok(table)
}

/// Largest `|journey − rotate-both-sides|` gap over `draws` Gaussian
/// `(q, k)` pairs with positions in `0..=positions`.
pub fn rope_gap(dim: usize, positions: i64, draws: usize, seed: u64) -> Result<f64> {
    if positions < 0 {
        return Err(Error::Config("positions must be non-negative".into()));
    }
    let freqs = rope_freqs::<f64>(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let mut gauss = || Vector::from_vec((0..dim).map(|_| rng.sample(StandardNormal)).collect());
        let q = gauss()?;
        let k = gauss()?;
        let i = rng.random_range(0..=positions);
        let j = rng.random_range(0..=positions);
        worst = worst.max(rope_equivalence_check(&q, &k, i, j, &freqs)?.gap);
    }
    Ok(worst)
}

fn rope_check(dim: usize, positions: i64, draws: usize, seed: u64) -> Result<String> {
    let gap = rope_gap(dim, positions, draws, seed)?;
    let line = format!("dim {dim}, positions 0..={positions}, {draws} draws: max gap {gap:e}\n");
    if gap > ROPE_TOLERANCE {
        return Err(Error::Config(format!("{}gap exceeds {ROPE_TOLERANCE:e}", line)));
    }
    Ok(line)
}

fn label(l: &TokenLabel, corpus: &Corpus) -> String {
    let tok = corpus.vocabulary.token(l.token_id).unwrap_or("?");
    format!("{}:{}:{}", l.instance, l.slot, tok)
}

/// CSV of one attention map: a header of key labels, then one row per
/// query.
pub fn attention_csv(map: &AttentionMap<f64>, corpus: &Corpus) -> String {
    let mut s = String::from("query");
    for k in &map.keys {
        s.push(',');
        s.push_str(&label(k, corpus));
    }
    s.push('\n');
    for (r, q) in map.queries.iter().enumerate() {
        s.push_str(&label(q, corpus));
        for w in map.weights.row(r) {
            write!(s, ",{w}").expect("writing to a String");
        }
        s.push('\n');
    }
    s
}

/// Plain (P2) greyscale image of `m`, scaled so the largest entry is 255.
pub fn pgm(m: &Matrix<f64>) -> String {
    let max = m.data().iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut s = format!("P2\n{} {}\n255\n", m.cols(), m.rows());
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|&w| ((w * scale).round() as u8).to_string()).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

fn inspect_attention(
    corpus: &Path,
    dir: Option<&Path>,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
    layer: Option<usize>,
    head: Option<usize>,
) -> Result<String> {
    let corpus = ingest_jsonl(corpus)?;
    let (_, model) = model_for(&corpus, dir, config, seed)?;
    let batch = Batch::new(corpus.instances.clone(), &corpus.entities);
    let (_, fwd) = model.run(&batch, memory_for(&model.config), ForwardOptions { capture_attention: true })?;
    fs::create_dir_all(out)?;
    let mut written = 0;
    for map in &fwd.attention {
        if layer.is_some_and(|l| l != map.layer) || head.is_some_and(|h| h != map.head) {
            continue;
        }
        let stem = format!("layer{}_{}_head{}", map.layer, map.stream, map.head);
        fs::write(out.join(format!("{stem}.csv")), attention_csv(map, &corpus))?;
        fs::write(out.join(format!("{stem}.pgm")), pgm(&map.weights))?;
        written += 1;
    }
    if written == 0 {
        return Err(Error::Config("no attention map matches the requested layer/head".into()));
    }
    Ok(format!("wrote {written} attention maps to {}\n", out.display()))
}
