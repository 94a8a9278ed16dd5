use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use descriptor_engine::embedding_store::{read_embeddings_file, write_embeddings_file, EmbeddingSet};
use descriptor_engine::soup::read_checkpoint_file;
use descriptor_engine::synthetic::gaussian_set;
use tempfile::TempDir;

fn desc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_desc"))
        .args(args)
        .output()
        .expect("failed to launch desc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn embeddings(&self, name: &str, set: &EmbeddingSet) -> PathBuf {
        let path = self.path(name);
        write_embeddings_file(set, &path).unwrap();
        path
    }

    fn text(&self, name: &str, body: &str) -> PathBuf {
        let path = self.path(name);
        fs::write(&path, body).unwrap();
        path
    }
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = desc(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).is_empty());
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn missing_arguments_are_usage_errors() {
    assert_eq!(desc(&[]).status.code(), Some(2));
    assert_eq!(desc(&["search", "only-one.uemb"]).status.code(), Some(2));
    assert_eq!(desc(&["soup", "a.uckp", "-o", "x.uckp"]).status.code(), Some(2));
}

#[test]
fn help_succeeds() {
    let out = desc(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    for sub in [
        "pca-fit",
        "pca-apply",
        "pipeline-apply",
        "search",
        "evaluate",
        "soup",
        "train-toy",
        "validate",
        "bench",
    ] {
        assert!(stdout(&out).contains(sub), "help is missing {sub}");
    }
}

#[test]
fn evaluate_prints_score() {
    let f = Fixture::new();
    let preds = f.text("preds.tsv", "q1\ta,z\nq2\ta,b,c,d,e\n");
    let gt = f.text("gt.tsv", "q1\ta,b\nq2\ta,b,c,d,e,f,g\n");
    let per_query = f.path("per_query.tsv");
    let out = desc(&["evaluate", p(&preds), p(&gt), "--per-query", p(&per_query)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out), "mP@5 = 0.750000\n");
    let rows = fs::read_to_string(per_query).unwrap();
    assert!(rows.contains("q1\t0.5"));
    assert!(rows.contains("q2\t1"));
}

#[test]
fn evaluate_rejects_duplicate_predictions() {
    let f = Fixture::new();
    let preds = f.text("preds.tsv", "q1\ta,a\n");
    let gt = f.text("gt.tsv", "q1\ta,b\n");
    let out = desc(&["evaluate", p(&preds), p(&gt)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("duplicate"), "{}", stderr(&out));
    assert!(stdout(&out).is_empty());
}

#[test]
fn missing_file_is_domain_error() {
    let f = Fixture::new();
    let out = desc(&["validate", p(&f.path("nope.uemb"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nope.uemb"));
}

#[test]
fn search_output_feeds_evaluate() {
    let f = Fixture::new();
    let index = f.embeddings("index.uemb", &gaussian_set(300, 16, 1, "img").unwrap());
    let queries = f.embeddings("queries.uemb", &gaussian_set(20, 16, 2, "q").unwrap());
    let preds = f.path("preds.tsv");
    let dists = f.path("dists.tsv");
    let out = desc(&[
        "search",
        "--k",
        "5",
        p(&index),
        p(&queries),
        "-o",
        p(&preds),
        "--distances",
        p(&dists),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = fs::read_to_string(&preds).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 20);
    let mut gt = String::new();
    for line in &lines {
        let (q, ids) = line.split_once('\t').unwrap();
        let ids: Vec<&str> = ids.split(',').collect();
        assert_eq!(ids.len(), 5);
        // the first two neighbours are declared relevant
        gt.push_str(&format!("{q}\t{},img_missing\n", ids[..2].join(",")));
    }
    assert_eq!(fs::read_to_string(&dists).unwrap().lines().count(), 20);
    let gt = f.text("gt.tsv", &gt);
    let out = desc(&["evaluate", p(&preds), p(&gt)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out), "mP@5 = 0.666667\n");
}

#[test]
fn search_is_thread_and_block_invariant() {
    let f = Fixture::new();
    let index = f.embeddings("index.uemb", &gaussian_set(1000, 24, 3, "z").unwrap());
    let queries = f.embeddings("queries.uemb", &gaussian_set(50, 24, 4, "q").unwrap());
    let mut outputs = Vec::new();
    for (threads, block) in [("1", "256"), ("3", "17"), ("8", "1000")] {
        let preds = f.path(&format!("preds-{threads}.tsv"));
        let out = desc(&[
            "search",
            p(&index),
            p(&queries),
            "-o",
            p(&preds),
            "--k",
            "7",
            "--threads",
            threads,
            "--block-size",
            block,
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        outputs.push(fs::read(preds).unwrap());
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn pca_and_pipeline_round_trip() {
    let f = Fixture::new();
    let train = f.embeddings("train.uemb", &gaussian_set(200, 32, 5, "t").unwrap());
    let images = f.embeddings("images.uemb", &gaussian_set(40, 32, 6, "x").unwrap());
    let model = f.path("pca.uckp");
    let out = desc(&["pca-fit", p(&train), "--dims", "8", "-o", p(&model)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(read_checkpoint_file(&model).unwrap().get("pca.components").is_some());

    let projected = f.path("projected.uemb");
    let out = desc(&["pca-apply", p(&model), p(&images), "-o", p(&projected)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let projected = read_embeddings_file(&projected).unwrap();
    assert_eq!(projected.dim(), 8);
    assert!(!projected.is_normalized());

    let spec = f.text(
        "pipeline.json",
        r#"{"sources": [{"tag": "image", "dim": 32}],
            "stages": [{"kind": "pca", "model": "pca.uckp"}, {"kind": "normalize"}]}"#,
    );
    let descriptors = f.path("descriptors.uemb");
    let out = desc(&["pipeline-apply", p(&spec), p(&images), "-o", p(&descriptors)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let descriptors = read_embeddings_file(&descriptors).unwrap();
    assert!(descriptors.is_normalized());
    assert_eq!(descriptors.ids(), projected.ids());
    for (a, b) in descriptors.rows().zip(projected.rows()) {
        let n = b.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        for (x, y) in a.iter().zip(b) {
            assert!((f64::from(*x) - f64::from(*y) / n).abs() < 1e-6);
        }
    }
    let out = desc(&["validate", p(&f.path("descriptors.uemb"))]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).starts_with("ok: 40 rows, dim 8, normalized"));
}

#[test]
fn broken_pipeline_chain_is_reported() {
    let f = Fixture::new();
    let images = f.embeddings("images.uemb", &gaussian_set(10, 32, 6, "x").unwrap());
    let spec = f.text(
        "pipeline.json",
        r#"{"sources": [{"tag": "image", "dim": 64}], "stages": [{"kind": "normalize"}]}"#,
    );
    let out = desc(&["pipeline-apply", p(&spec), p(&images), "-o", p(&f.path("o.uemb"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!f.path("o.uemb").exists());

    let spec = f.text(
        "missing.json",
        r#"{"sources": [{"tag": "image", "dim": 32}], "stages": [{"kind": "pca", "model": "absent.uckp"}]}"#,
    );
    let out = desc(&["pipeline-apply", p(&spec), p(&images), "-o", p(&f.path("o.uemb"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing model file"), "{}", stderr(&out));
}

#[test]
fn train_soup_validate() {
    let f = Fixture::new();
    let (a, b, soup, log) = (
        f.path("a.uckp"),
        f.path("b.uckp"),
        f.path("soup.uckp"),
        f.path("log.tsv"),
    );
    for (seed, path) in [("1", &a), ("2", &b)] {
        let out = desc(&[
            "train-toy",
            "--seed",
            seed,
            "--classes",
            "4",
            "-o",
            p(path),
            "--log",
            p(&log),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    assert!(fs::read_to_string(&log).unwrap().lines().count() > 1);
    let out = desc(&["soup", p(&a), p(&b), "-o", p(&soup)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let (ca, cb, cs) = (
        read_checkpoint_file(&a).unwrap(),
        read_checkpoint_file(&b).unwrap(),
        read_checkpoint_file(&soup).unwrap(),
    );
    for t in cs.tensors() {
        let (x, y) = (ca.get(t.name()).unwrap().data(), cb.get(t.name()).unwrap().data());
        for (i, v) in t.data().iter().enumerate() {
            assert!((v - (x[i] + y[i]) / 2.0).abs() <= 1e-6);
        }
    }
    let out = desc(&["validate", p(&soup)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).starts_with("ok: 2 tensors"));

    // same seed twice gives the same bytes
    let again = f.path("a2.uckp");
    desc(&["train-toy", "--seed", "1", "--classes", "4", "-o", p(&again)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn soup_of_mismatched_checkpoints_fails() {
    let f = Fixture::new();
    let (a, b) = (f.path("a.uckp"), f.path("b.uckp"));
    desc(&["train-toy", "--classes", "4", "-o", p(&a)]);
    desc(&["train-toy", "--classes", "5", "-o", p(&b)]);
    let out = desc(&["soup", p(&a), p(&b), "-o", p(&f.path("s.uckp"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("head.weights"), "{}", stderr(&out));
}

#[test]
fn validate_lists_all_violations() {
    let f = Fixture::new();
    let set = EmbeddingSet::new(vec!["a".into(), "b".into()], 2, vec![1.0, 0.0, 0.0, 1.0], true).unwrap();
    let path = f.embeddings("bad.uemb", &set);
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] = b'a';
    bytes[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&path, &bytes).unwrap();
    let out = desc(&["validate", p(&path)]);
    assert_eq!(out.status.code(), Some(1));
    let report = stdout(&out);
    assert!(report.contains("duplicate id"), "{report}");
    assert!(report.contains("non-finite value"), "{report}");
    assert!(stderr(&out).contains("2 violation(s)"));

    let junk = f.text("junk.bin", "XXXXXXXX");
    let out = desc(&["validate", p(&junk)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bad magic at offset 0"));
}

#[test]
fn bench_reports_throughput_without_touching_files() {
    let f = Fixture::new();
    let index = f.embeddings("index.uemb", &gaussian_set(500, 8, 1, "z").unwrap());
    let queries = f.embeddings("queries.uemb", &gaussian_set(30, 8, 2, "q").unwrap());
    let before = (fs::read(&index).unwrap(), fs::read(&queries).unwrap());
    let out = desc(&["bench", p(&index), p(&queries), "--repeat", "2", "--threads", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("queries/sec"));
    assert_eq!(before, (fs::read(&index).unwrap(), fs::read(&queries).unwrap()));
    assert_eq!(fs::read_dir(f.dir.path()).unwrap().count(), 2);

    let out = desc(&["bench", "--queries", "20", "--index-size", "300", "--dim", "16"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("20 queries x 300 index x 16 dim"));
}
