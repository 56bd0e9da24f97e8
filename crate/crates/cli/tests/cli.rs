use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hybrank_core::corpus::load_run;
use hybrank_core::features::FeatureCache;
use hybrank_core::model::{HybRank, ModelConfig};
use tempfile::TempDir;

fn hybrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybrank"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = hybrank(args);
    assert_eq!(code(&o), 0, "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

/// A small synthetic benchmark with its index built.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(list_len: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let list = list_len.to_string();
        ok(&[
            "synth", "-o", s(dir.path()), "--topics", "30", "--train-queries", "40", "--test-queries", "12",
            "--list-len", &list, "--vocab", "300", "--seed", "3",
        ]);
        let f = Fixture { dir };
        ok(&["index", "--corpus", s(&f.path("corpus.jsonl")), "-o", s(&f.path("corpus.idx"))]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn features(&self, split: &str, out: &str, extra: &[&str]) -> Output {
        let (run, queries, index, vectors, ids, out) = (
            self.path(&format!("{split}.run")),
            self.path("queries.tsv"),
            self.path("corpus.idx"),
            self.path("vectors.bin"),
            self.path("ids.txt"),
            self.path(out),
        );
        let mut args = vec![
            "features", "--run", s(&run), "--queries", s(&queries), "--index", s(&index), "--vectors", s(&vectors),
            "--ids", s(&ids), "-o", s(&out),
        ];
        args.extend_from_slice(extra);
        hybrank(&args)
    }
}

#[test]
fn index_builds_and_refuses_overwrite() {
    let f = Fixture::new(20);
    let idx = f.path("corpus.idx");
    assert!(idx.is_file());
    let again = hybrank(&["index", "--corpus", s(&f.path("corpus.jsonl")), "-o", s(&idx)]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--force"));
    ok(&["index", "--corpus", s(&f.path("corpus.jsonl")), "-o", s(&idx), "--force"]);
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.idx");
    let o = hybrank(&["index", "--corpus", s(&dir.path().join("absent.jsonl")), "-o", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage") || stderr(&o).contains("--help"));
    assert!(!out.exists());
    assert_eq!(code(&hybrank(&["index", "-o", s(&out)])), 2);
    assert_eq!(code(&hybrank(&["no-such-command"])), 2);
}

#[test]
fn features_cover_every_query() {
    let f = Fixture::new(20);
    let o = f.features("train", "fea", &["--anchors", "8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("40 queries"));
    let run = load_run(&f.path("train.run"), 100).unwrap();
    for qid in run.queries() {
        let c = FeatureCache::load(&f.path("fea").join(FeatureCache::file_name(qid))).unwrap();
        assert_eq!(c.features.passages(), 20);
        assert_eq!(c.features.anchors(), 8);
        assert_eq!(c.features.active(), [true, true]);
        assert_eq!(c.passages, run.doc_ids(qid).unwrap());
    }
}

#[test]
fn sparse_mode_marks_dense_inactive() {
    let f = Fixture::new(20);
    let o = f.features("test", "fea", &["--mode", "sparse"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let c = FeatureCache::load(&f.path("fea").join("q40.fea")).unwrap();
    assert_eq!(c.features.active(), [true, false]);
    assert!((0..c.features.rows()).all(|r| c.features.get(r, 0, 1) == 0.0));
}

#[test]
fn too_many_top_anchors_fail() {
    let f = Fixture::new(100);
    let o = f.features("test", "fea", &["--anchors", "200", "--anchor-strategy", "top"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("200"));
}

#[test]
fn unknown_passage_is_named() {
    let f = Fixture::new(20);
    let run = f.path("test.run");
    let mut text = fs::read_to_string(&run).unwrap();
    text.push_str("q40 Q0 ghost-passage 99 -100 x\n");
    fs::write(&run, text).unwrap();
    let o = f.features("test", "fea", &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("ghost-passage"), "{}", stderr(&o));
}

#[test]
fn zero_checkpoint_keeps_input_order() {
    let f = Fixture::new(20);
    assert_eq!(code(&f.features("test", "fea", &["--anchors", "5"])), 0);
    let mut model = HybRank::new(ModelConfig { dim: 8, inner: 16, heads: 2, ..Default::default() }, 0).unwrap();
    for (_, t) in model.params_mut().values.iter_mut() {
        t.fill(0.0);
    }
    let ckpt = f.path("zero.ckpt");
    model.save(&ckpt).unwrap();
    let out = f.path("reranked.run");
    ok(&[
        "rerank", "--checkpoint", s(&ckpt), "--features", s(&f.path("fea")), "--run", s(&f.path("test.run")), "-o",
        s(&out),
    ]);
    let before = load_run(&f.path("test.run"), 100).unwrap();
    let after = load_run(&out, 100).unwrap();
    assert_eq!(before.len(), after.len());
    for qid in before.queries() {
        assert_eq!(before.doc_ids(qid), after.doc_ids(qid));
    }
}

#[test]
fn eval_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r.run");
    let qrels = dir.path().join("r.qrels");
    fs::write(&run, "q1 Q0 a 1 3 t\nq1 Q0 b 2 2 t\nq2 Q0 c 1 5 t\nq2 Q0 d 2 1 t\nq3 Q0 e 1 1 t\n").unwrap();
    fs::write(&qrels, "q1 0 a 1\nq2 0 c 2\nq2 0 d 1\n").unwrap();
    let out = ok(&["eval", "--run", s(&run), "--qrels", s(&qrels), "--metrics", "r@1,mrr@10,ndcg@10"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["r@1"], 1.0);
    assert_eq!(v["mrr@10"], 1.0);
    assert_eq!(v["queries_evaluated"], 2);
    assert_eq!(v["queries_skipped"], 1);
    let bad = hybrank(&["eval", "--run", s(&run), "--qrels", s(&qrels), "--metrics", "p@3"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn embed_convert_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let text = dir.path().join("e.txt");
    fs::write(&text, "a 1 0.5 -2\nb 0 0 0.25\n").unwrap();
    let (vecs, ids) = (dir.path().join("e.bin"), dir.path().join("e.ids"));
    ok(&["embed-convert", "--input", s(&text), "--vectors", s(&vecs), "--ids", s(&ids)]);
    let store = hybrank_core::dense::load_embeddings(&vecs, &ids).unwrap();
    assert_eq!(store.get("a").unwrap(), &[1.0, 0.5, -2.0]);
    assert_eq!(store.dense_score("a", "b").unwrap(), -0.5);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let f = Fixture::new(20);
    assert_eq!(code(&f.features("train", "fea", &["--anchors", "5"])), 0);
    let cfg = f.path("train.cfg");
    fs::write(&cfg, "# small model\nepochs = 1\ndim = 8\ninner = 16\nheads = 2\nbatch_queries = 10\n").unwrap();
    let common = |out: &Path| {
        vec![
            "train".to_string(), "--features".into(), s(&f.path("fea")).into(), "--qrels".into(),
            s(&f.path("train.qrels")).into(), "--config".into(), s(&cfg).into(), "-o".into(), s(out).into(),
        ]
    };
    let a = f.path("a");
    let args = common(&a);
    let text = ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(text.contains("for 1 epochs"), "{text}");
    let b = f.path("b");
    let mut args = common(&b);
    args.extend(["--epochs".into(), "2".into()]);
    let text = ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(text.contains("for 2 epochs"), "{text}");
    assert!(b.join("epoch-2.ckpt").is_file() && b.join("final.ckpt").is_file() && b.join("train.log").is_file());

    fs::write(&cfg, "epochs = 1\nwidth = 3\n").unwrap();
    let o = hybrank(&common(&f.path("c")).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("width"));
}

#[test]
fn training_is_deterministic() {
    let f = Fixture::new(20);
    assert_eq!(code(&f.features("train", "fea", &["--anchors", "5"])), 0);
    let run = |out: &str| {
        ok(&[
            "train", "--features", s(&f.path("fea")), "--qrels", s(&f.path("train.qrels")), "-o", s(&f.path(out)),
            "--epochs", "2", "--dim", "8", "--inner", "16", "--heads", "2", "--batch-queries", "8", "--seed", "5",
        ]);
        fs::read(f.path(out).join("final.ckpt")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn pipeline_improves_recall_at_one() {
    let f = Fixture::new(20);
    for split in ["train", "test"] {
        let o = f.features(split, &format!("fea_{split}"), &["--anchors", "10"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let model = f.path("model");
    ok(&[
        "train", "--features", s(&f.path("fea_train")), "--qrels", s(&f.path("train.qrels")), "-o", s(&model),
        "--epochs", "6", "--dim", "16", "--inner", "32", "--heads", "2", "--batch-queries", "8",
    ]);
    let reranked = f.path("reranked.run");
    ok(&[
        "rerank", "--checkpoint", s(&model.join("final.ckpt")), "--features", s(&f.path("fea_test")), "--run",
        s(&f.path("test.run")), "-o", s(&reranked),
    ]);
    let r1 = |run: &Path| -> f64 {
        let out = ok(&["eval", "--run", s(run), "--qrels", s(&f.path("test.qrels")), "--metrics", "r@1"]);
        serde_json::from_str::<serde_json::Value>(&out).unwrap()["r@1"].as_f64().unwrap()
    };
    let (before, after) = (r1(&f.path("test.run")), r1(&reranked));
    assert!(after > before, "R@1 {before} -> {after}");
}
