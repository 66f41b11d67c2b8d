use std::fs;
use std::path::Path;

use journey::cli::{run_with, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, QUERY_HEADER};
use journey::repository::{persist, Repository};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("journey").chain(args.iter().copied());
    let code = run_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_CORPUS: &str = r#"{"kind":"triple","h":"ann","r":"knows","t":"bob"}
{"kind":"triple","h":"bob","r":"knows","t":"cy"}
{"kind":"sentence","tokens":["ann","met","bob"],"pos":["NOUN","VERB","NOUN"]}
"#;

const TINY_MODEL: &str = "d_model = 8\nheads = 2\nff_hidden = 8\nreadout_hidden = 4\n\
group = structured instance_local 1\ngroup = language instance_local 1\ngroup = cross global 1\n";

#[test]
fn help_exits_zero_and_bad_flag_exits_two() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("rope-check"));
    let (code, _, err) = run(&["rope-check", "--no-such-flag"]);
    assert_eq!(code, 2);
    assert!(!err.is_empty());
    assert_eq!(run(&["frobnicate"]).0, 2);
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&["validate", "--corpus", s(&dir.path().join("absent.jsonl"))]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error:"));
}

#[test]
fn validate_accepts_generated_data_and_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.jsonl");
    assert_eq!(run(&["gen-data", "--seed", "4", "--out", s(&good)]).0, 0);
    let (code, out, _) = run(&["validate", "--corpus", s(&good)]);
    assert_eq!(code, 0);
    assert!(out.starts_with("ok:"));

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"kind\":\"triple\",\"h\":\"a\"}\n").unwrap();
    assert_eq!(run(&["validate", "--corpus", s(&bad)]).0, 1);
}

#[test]
fn gen_data_config_keys_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.cfg");
    fs::write(&cfg, "entities = 6\nsentences = 0\n").unwrap();
    let out = dir.path().join("g.jsonl");
    assert_eq!(run(&["gen-data", "--config", s(&cfg), "--out", s(&out)]).0, 0);
    let text = fs::read_to_string(&out).unwrap();
    assert!(!text.contains("\"sentence\""));

    fs::write(&cfg, "entites = 6\n").unwrap();
    assert_eq!(run(&["gen-data", "--config", s(&cfg), "--out", s(&out)]).0, 1);
}

#[test]
fn rope_check_reports_a_tiny_gap() {
    let (code, out, _) = run(&["rope-check", "--dim", "8", "--draws", "200"]);
    assert_eq!(code, 0);
    assert!(out.contains("max gap"));
    assert_eq!(run(&["rope-check", "--dim", "7"]).0, 1);
}

#[test]
fn empty_repository_query_prints_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.bin");
    persist(&Repository::<f64>::new(4, 4), &path).unwrap();
    let (code, out, _) = run(&["repo", "query", "--repo", s(&path), "--query", "1,0,0,0"]);
    assert_eq!(code, 0);
    assert_eq!(out, format!("{QUERY_HEADER}\n"));
}

#[test]
fn train_eval_and_repository_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    let cfg = dir.path().join("m.cfg");
    fs::write(&corpus, TINY_CORPUS).unwrap();
    fs::write(&cfg, TINY_MODEL).unwrap();
    let run_dir = dir.path().join("run");
    let (code, _, err) = run(&[
        "train", "--config", s(&cfg), "--corpus", s(&corpus), "--out", s(&run_dir), "--steps", "3", "--seed", "2",
    ]);
    assert_eq!(code, 0, "{err}");
    for f in [CONFIG_FILE, CHECKPOINT_FILE, METRICS_FILE] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    let metrics = fs::read_to_string(run_dir.join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let (code, out, err) = run(&["eval", "--model", s(&run_dir), "--corpus", s(&corpus)]);
    assert_eq!(code, 0, "{err}");
    assert!(!out.is_empty());

    let repo = dir.path().join("repo.bin");
    let (code, _, err) = run(&["repo", "build", "--corpus", s(&corpus), "--model", s(&run_dir), "--out", s(&repo)]);
    assert_eq!(code, 0, "{err}");
    let query = "1,0,0,0,0,0,0,0";
    let (code, exact, _) = run(&["repo-query", "--repo", s(&repo), "--query", query, "--k", "3"]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = exact.lines().collect();
    assert_eq!(lines[0], QUERY_HEADER);
    assert_eq!(lines.len(), 4);
    let scores: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    // probing every list is exhaustive
    let (_, all, _) = run(&["repo-query", "--repo", s(&repo), "--query", query, "--k", "3", "--probes", "100"]);
    assert_eq!(all, exact);
    assert_eq!(run(&["repo-query", "--repo", s(&repo), "--query", "1,0"]).0, 1);
}

#[test]
fn inspect_attention_writes_csv_and_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    let cfg = dir.path().join("m.cfg");
    fs::write(&corpus, TINY_CORPUS).unwrap();
    fs::write(&cfg, TINY_MODEL).unwrap();
    let out = dir.path().join("maps");
    let (code, _, err) = run(&[
        "inspect-attention", "--corpus", s(&corpus), "--config", s(&cfg), "--out", s(&out), "--layer", "0", "--head", "1",
    ]);
    assert_eq!(code, 0, "{err}");
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    let pgm_name = names.iter().find(|n| n.ends_with(".pgm")).expect("a pgm file");
    assert!(pgm_name.starts_with("layer0_") && pgm_name.ends_with("_head1.pgm"));
    let img = fs::read_to_string(out.join(pgm_name)).unwrap();
    let mut lines = img.lines();
    assert_eq!(lines.next(), Some("P2"));
    let dims: Vec<usize> = lines.next().unwrap().split(' ').map(|x| x.parse().unwrap()).collect();
    assert_eq!(lines.next(), Some("255"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), dims[1]);
    assert!(rows.iter().all(|r| r.split(' ').count() == dims[0]));
    let csv = fs::read_to_string(out.join(pgm_name.replace(".pgm", ".csv"))).unwrap();
    assert_eq!(csv.lines().count(), dims[1] + 1);
}
