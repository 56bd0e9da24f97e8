//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on failure.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use hybrank_core::corpus::{load_run, write_run, Corpus, Document, Qrels, Run, RunEntry};
use hybrank_core::features::{
    build_query_features, cache_key, normalize_channel, FeatureCache, FeatureOptions, QueryInput, SimTensor, Sources,
};
use hybrank_core::metrics::{mrr_at_k, ndcg_at_k, recall_at_k, Metric};
use hybrank_core::model::{param_count, rerank, HybRank, ModelConfig};
use hybrank_core::sparse::{Bm25Params, TermIndex};
use hybrank_core::synth::{generate, SynthBenchmark, SynthConfig};
use hybrank_core::tensor::{finite_diff_check, GradCheckOptions, Gradients};
use hybrank_core::train::{
    contrastive_loss, contrastive_loss_grad, evaluate_model, featurize_run, label_examples, train, QueryFeatures,
    TrainConfig, TrainOptions,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration) -> std::result::Result<(), String> {
    let el = start.elapsed();
    ensure(el < limit, format!("took {:.1}s, limit {:.0}s", el.as_secs_f64(), limit.as_secs_f64()))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- 1

/// Literal BM25: distinct query terms present in the document, each adding
/// `w * c / (k1 * ((1 - b) + b * |d| / l) + c)`.
fn bm25_reference(query: &[String], doc: &[String], docs: &[Vec<String>], k1: f64, b: f64) -> f64 {
    let n = docs.len() as f64;
    let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let distinct: BTreeSet<&String> = query.iter().collect();
    let mut score = 0.0;
    for t in distinct {
        let c = doc.iter().filter(|w| *w == t).count() as f64;
        if c == 0.0 {
            continue;
        }
        let df = docs.iter().filter(|d| d.contains(t)).count() as f64;
        let w = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        score += w * c / (k1 * ((1.0 - b) + b * doc.len() as f64 / avg) + c);
    }
    score
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut r = rng(101);
    let vocab: Vec<String> = (0..60).map(|i| format!("t{i}")).collect();
    let docs: Vec<Vec<String>> = (0..50)
        .map(|_| {
            let len = r.random_range(1..40);
            // skewed draw so document frequencies vary widely
            (0..len)
                .map(|_| vocab[(r.random_range(0.0f64..1.0).powi(2) * 60.0) as usize].clone())
                .collect()
        })
        .collect();
    let corpus = Corpus::from_documents(
        docs.iter()
            .enumerate()
            .map(|(i, d)| Document {
                id: format!("d{i}"),
                title: String::new(),
                text: d.join(" "),
            })
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    let params = Bm25Params::default();
    let index = TermIndex::build(&corpus, params).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for _ in 0..100 {
        let len = r.random_range(1..8);
        let mut query: Vec<String> = (0..len).map(|_| vocab[r.random_range(0..60)].clone()).collect();
        if r.random_bool(0.2) {
            query.push("unseen".into());
        }
        let text = query.join(" ");
        for (i, doc) in docs.iter().enumerate() {
            let got = index
                .score_terms(&index.query_terms(&text), &format!("d{i}"), &params)
                .map_err(|e| e.to_string())?;
            let want = bm25_reference(&query, doc, &docs, params.k1, params.b);
            let err = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
            worst = worst.max(err);
            pairs += 1;
        }
    }
    ensure(worst <= 1e-12, format!("max relative error {worst:e}"))?;
    within(start, Duration::from_secs(5))?;
    Ok(format!("{pairs} pairs, max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut r = rng(202);
    let mut constant = 0;
    for trial in 0..1000 {
        let len = r.random_range(1..=200);
        let t = [1.0, 10.0, 100.0][trial % 3];
        let x: Vec<f64> = if trial % 25 == 0 {
            constant += 1;
            vec![r.random_range(-10.0..10.0); len]
        } else {
            (0..len).map(|_| r.random_range(-10.0..10.0)).collect()
        };
        let y = normalize_channel(&x, t).map_err(|e| e.to_string())?;
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            ensure(y.iter().all(|&v| v == 0.0), format!("trial {trial}: constant input not mapped to zeros"))?;
            continue;
        }
        ensure(y.iter().all(|v| (-1.0..=1.0).contains(v)), format!("trial {trial}: value outside [-1, 1]"))?;
        for (i, (&xi, &yi)) in x.iter().zip(&y).enumerate() {
            if xi == hi {
                ensure(yi == 1.0, format!("trial {trial}: max maps to {yi}"))?;
            }
            if xi == lo {
                ensure(yi == -1.0, format!("trial {trial}: min maps to {yi}"))?;
            }
            for (&xj, &yj) in x.iter().zip(&y).skip(i + 1) {
                if xi < xj {
                    ensure(yi <= yj, format!("trial {trial}: order not preserved"))?;
                } else if xj < xi {
                    ensure(yj <= yi, format!("trial {trial}: order not preserved"))?;
                }
            }
        }
        let shift = r.random_range(-10.0..10.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let z = normalize_channel(&shifted, t).map_err(|e| e.to_string())?;
        let diff = y.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(diff <= 1e-12, format!("trial {trial}: shift changed output by {diff:e}"))?;
    }
    within(start, Duration::from_secs(5))?;
    Ok(format!("1000 vectors ({constant} constant)"))
}

// ---------------------------------------------------------------- 3

fn random_tensor(r: &mut ChaCha8Rng, rows: usize, l: usize) -> SimTensor {
    let values = (0..rows * l * 2).map(|_| r.random_range(-1.0..1.0)).collect();
    SimTensor::from_values(rows, l, values, [true, true]).expect("valid tensor")
}

fn gradcheck_at(model: &HybRank, feats: &SimTensor, positives: &[usize]) -> hybrank_core::tensor::GradCheckReport {
    let tau = 0.07;
    let cache = model.forward(feats).expect("forward");
    let (_, dscores) = contrastive_loss_grad(&cache.scores, positives, tau).expect("loss");
    let mut g = Gradients::zeros_like(&model.params().values);
    model.backward(&cache, &dscores, &mut g).expect("backward");
    let cfg = model.config().clone();
    let mut values = model.params().values.clone();
    finite_diff_check(
        &mut values,
        &g,
        |p| {
            let probe = HybRank::from_params(cfg.clone(), p.clone()).expect("same layout");
            contrastive_loss(&probe.score_all(feats).expect("scores"), positives, tau).expect("loss")
        },
        1e-4,
        GradCheckOptions {
            max_coords: Some(600),
            seed: 3,
            ..Default::default()
        },
    )
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let cfg = ModelConfig {
        dim: 8,
        inner: 32,
        heads: 2,
        layers_inter: 1,
        layers_aggr: 1,
        max_rank: 8,
        ..Default::default()
    };
    let mut r = rng(303);
    let feats = random_tensor(&mut r, 5, 4);
    let positives = [1, 3];
    let mut model = HybRank::new(cfg, 7).map_err(|e| e.to_string())?;
    let at_init = gradcheck_at(&model, &feats, &positives);
    // a second point away from the small-weight initialization
    for (name, t) in model.params_mut().values.iter_mut() {
        if name.contains("norm") {
            t.mapv_inplace(|v| v + r.random_range(-0.5..0.5));
        } else {
            t.mapv_inplace(|v| v * 25.0 + r.random_range(-0.05..0.05));
        }
    }
    let moved = gradcheck_at(&model, &feats, &positives);
    for rep in [&at_init, &moved] {
        ensure(rep.checked >= 200, format!("only {} coordinates checked", rep.checked))?;
        ensure(rep.passed(), format!("max relative error {:e} at {:?}", rep.max_rel_error, rep.worst))?;
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!(
        "{} + {} coordinates, max relative error {:.2e} / {:.2e}",
        at_init.checked, moved.checked, at_init.max_rel_error, moved.max_rel_error
    ))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Check {
    let mut r = rng(404);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = r.random_range(2..50);
        let tau = r.random_range(0.05..2.0);
        let s: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let p = r.random_range(0..n);
        // cross-entropy written out with log-sum-exp
        let z: Vec<f64> = s.iter().map(|v| v / tau).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ce = -(z[p] - m - z.iter().map(|v| (v - m).exp()).sum::<f64>().ln());
        let l = contrastive_loss(&s, &[p], tau).map_err(|e| e.to_string())?;
        worst = worst.max((l - ce).abs());
        ensure((l - ce).abs() <= 1e-9, format!("single positive: {l} vs {ce}"))?;

        let c = r.random_range(-0.5..0.5);
        let uniform = contrastive_loss(&vec![c; n], &[p], tau).map_err(|e| e.to_string())?;
        ensure(
            (uniform - (n as f64).ln()).abs() <= 1e-9,
            format!("uniform: {uniform} vs ln {n}"),
        )?;

        let mut positives: Vec<usize> = (0..n).filter(|_| r.random_bool(0.3)).collect();
        if positives.is_empty() {
            positives.push(0);
        }
        let shift = r.random_range(-5.0..5.0);
        let moved: Vec<f64> = s.iter().map(|v| v + shift).collect();
        let a = contrastive_loss(&s, &positives, tau).map_err(|e| e.to_string())?;
        let b = contrastive_loss(&moved, &positives, tau).map_err(|e| e.to_string())?;
        ensure((a - b).abs() <= 1e-9, format!("shift changed loss by {:e}", (a - b).abs()))?;
        ensure(a >= 0.0, "negative loss")?;
    }
    Ok(format!("200 trials, max cross-entropy deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Check {
    let mut r = rng(505);
    let mut worst_anchor = 0.0f64;
    for trial in 0..100u64 {
        let (n, l) = (r.random_range(2..10), r.random_range(1..8));
        let cfg = ModelConfig {
            dim: 16,
            inner: 32,
            heads: 2,
            layers_inter: 2,
            layers_aggr: 1,
            max_rank: 16,
            ..Default::default()
        };
        let model = HybRank::new(cfg.clone(), trial).map_err(|e| e.to_string())?;
        let feats = random_tensor(&mut r, n + 1, l);
        let mut perm: Vec<usize> = (0..l).collect();
        perm.shuffle(&mut r);
        let a = model.score_all(&feats).map_err(|e| e.to_string())?;
        let b = model.score_all(&feats.permute_anchors(&perm)).map_err(|e| e.to_string())?;
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst_anchor = worst_anchor.max(diff);
        ensure(diff <= 1e-9, format!("trial {trial}: anchor permutation moved scores by {diff:e}"))?;

        let model = HybRank::new(
            ModelConfig {
                use_positions: false,
                ..cfg
            },
            trial,
        )
        .map_err(|e| e.to_string())?;
        let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        let mut pperm: Vec<usize> = (0..n).collect();
        pperm.shuffle(&mut r);
        let s = model.score_all(&feats).map_err(|e| e.to_string())?;
        let permuted_feats = feats.permute_passages(&pperm);
        let ps = model.score_all(&permuted_feats).map_err(|e| e.to_string())?;
        for (i, &src) in pperm.iter().enumerate() {
            ensure(
                (ps[i] - s[src]).abs() <= 1e-9,
                format!("trial {trial}: passage permutation is not equivariant"),
            )?;
        }
        let pids: Vec<String> = pperm.iter().map(|&i| ids[i].clone()).collect();
        let order = |v: Vec<RunEntry>| v.into_iter().map(|e| e.doc_id).collect::<Vec<_>>();
        let base = order(rerank(&ids, &s).map_err(|e| e.to_string())?);
        let other = order(rerank(&pids, &ps).map_err(|e| e.to_string())?);
        ensure(base == other, format!("trial {trial}: reranked order depends on input order"))?;
    }
    Ok(format!("100 + 100 trials, max anchor-permutation deviation {worst_anchor:.1e}"))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Check {
    let cfg = ModelConfig::default();
    let count = param_count(&cfg);
    let built = HybRank::new(cfg, 0).map_err(|e| e.to_string())?.num_params();
    ensure(count == built, format!("formula {count} vs allocated {built}"))?;
    ensure((150_000..=300_000).contains(&count), format!("{count} outside [150000, 300000]"))?;
    Ok(format!("default configuration has {count} parameters"))
}

// ---------------------------------------------------------------- 7, 8

struct Prepared {
    bench: SynthBenchmark,
    train: Vec<hybrank_core::train::Example>,
    test: Vec<QueryFeatures>,
}

fn prepare(syn: &SynthConfig, anchors: usize) -> std::result::Result<Prepared, String> {
    let bench = generate(syn).map_err(|e| e.to_string())?;
    let index = TermIndex::build(&bench.corpus, Bm25Params::default()).map_err(|e| e.to_string())?;
    let sources = Sources {
        index: Some(&index),
        store: Some(&bench.embeddings),
    };
    let opts = FeatureOptions {
        anchors: Some(anchors),
        ..Default::default()
    };
    let train_items = featurize_run(&bench.run, &bench.queries, sources, &opts, Some(&bench.train)).map_err(|e| e.to_string())?;
    let test = featurize_run(&bench.run, &bench.queries, sources, &opts, Some(&bench.test)).map_err(|e| e.to_string())?;
    let (train, report) = label_examples(train_items, &bench.qrels);
    ensure(report.kept == bench.train.len(), format!("training queries dropped: {report}"))?;
    Ok(Prepared { bench, train, test })
}

fn bench_model() -> ModelConfig {
    ModelConfig {
        dim: 32,
        inner: 128,
        heads: 4,
        ..Default::default()
    }
}

struct Scores {
    r1: f64,
    mrr10: f64,
}

fn test_scores(model: &HybRank, p: &Prepared) -> std::result::Result<Scores, String> {
    let rep = evaluate_model(model, &p.test, &p.bench.qrels, &[Metric::Recall(1), Metric::Mrr(10)]).map_err(|e| e.to_string())?;
    Ok(Scores {
        r1: rep.get(Metric::Recall(1)).unwrap_or(0.0),
        mrr10: rep.get(Metric::Mrr(10)).unwrap_or(0.0),
    })
}

struct EndToEnd {
    initial: Scores,
    full: Scores,
}

fn criterion_7() -> std::result::Result<(String, EndToEnd, Prepared), String> {
    let start = Instant::now();
    let syn = SynthConfig::default();
    let p = prepare(&syn, 20)?;
    let init_run = p.bench.subset(&p.bench.test).map_err(|e| e.to_string())?;
    let initial = Scores {
        r1: recall_at_k(&init_run, &p.bench.qrels, 1).value,
        mrr10: mrr_at_k(&init_run, &p.bench.qrels, 10).value,
    };
    let tcfg = TrainConfig {
        epochs: 6,
        batch_queries: 16,
        seed: 7,
        ..Default::default()
    };
    let out = train(&bench_model(), &tcfg, &p.train, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let full = test_scores(&out.model, &p)?;
    let detail = format!(
        "R@1 {:.3} -> {:.3}, MRR@10 {:.3} -> {:.3}, {} epochs, {:.0}s",
        initial.r1,
        full.r1,
        initial.mrr10,
        full.mrr10,
        tcfg.epochs,
        start.elapsed().as_secs_f64()
    );
    let res = EndToEnd { initial, full };
    let check = ensure(res.full.r1 - res.initial.r1 >= 0.10, format!("R@1 gain too small: {detail}"))
        .and_then(|_| ensure(res.full.mrr10 >= res.initial.mrr10, format!("MRR@10 decreased: {detail}")))
        .and_then(|_| within(start, Duration::from_secs(30 * 60)));
    match check {
        Ok(()) => Ok((detail, res, p)),
        Err(e) => Err(e),
    }
}

fn criterion_8(prev: Option<(&EndToEnd, &Prepared)>) -> Check {
    let (res, p) = prev.ok_or("needs the end-to-end run, which failed")?;
    let tcfg = TrainConfig {
        epochs: 6,
        batch_queries: 16,
        seed: 7,
        ..Default::default()
    };
    let cfg = ModelConfig {
        use_interaction: false,
        ..bench_model()
    };
    let out = train(&cfg, &tcfg, &p.train, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let ablated = test_scores(&out.model, p)?;
    let detail = format!(
        "R@1 full {:.3} >= w/o interaction {:.3} >= initial {:.3}",
        res.full.r1, ablated.r1, res.initial.r1
    );
    ensure(res.full.r1 >= ablated.r1, format!("ordering violated: {detail}"))?;
    ensure(ablated.r1 >= res.initial.r1, format!("ordering violated: {detail}"))?;
    ensure(res.full.r1 - res.initial.r1 >= 0.10, format!("full model margin too small: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let start = Instant::now();
    let counts = [5usize, 10, 20, 40];
    let seeds = [0u64, 1, 2];
    let mut means = Vec::new();
    for &l in &counts {
        let mut sum = 0.0;
        for &seed in &seeds {
            let syn = SynthConfig {
                train_queries: 200,
                test_queries: 100,
                list_len: 40,
                seed,
                ..Default::default()
            };
            let p = prepare(&syn, l)?;
            let tcfg = TrainConfig {
                epochs: 10,
                batch_queries: 8,
                seed: 100 + seed,
                ..Default::default()
            };
            let out = train(&bench_model(), &tcfg, &p.train, &TrainOptions::default()).map_err(|e| e.to_string())?;
            sum += test_scores(&out.model, &p)?.r1;
        }
        means.push(sum / seeds.len() as f64);
    }
    let detail = counts
        .iter()
        .zip(&means)
        .map(|(l, m)| format!("L={l}: {m:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    for w in means.windows(2) {
        ensure(w[1] >= w[0] - 0.01, format!("trend broken: {detail}"))?;
    }
    Ok(format!("mean R@1 {detail} ({:.0}s)", start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- 10

fn run_of(lists: &[(&str, &[&str])]) -> Run {
    let mut run = Run::new();
    for (q, docs) in lists {
        let n = docs.len();
        let entries = docs
            .iter()
            .enumerate()
            .map(|(i, d)| RunEntry::new(*d, (n - i) as f64))
            .collect();
        run.insert(*q, entries).expect("valid run");
    }
    run
}

fn qrels_of(items: &[(&str, &str, u32)]) -> Qrels {
    let mut q = Qrels::new();
    for (qid, doc, g) in items {
        q.insert(*qid, *doc, *g);
    }
    q
}

/// Per-query scan over ranks, independent of the library's helpers.
fn brute_force(list: &[String], judged: &BTreeMap<String, u32>, k: usize) -> (f64, f64, Option<f64>) {
    let mut first = None;
    let mut dcg = 0.0;
    for rank in 1..=list.len().min(k) {
        let g = *judged.get(&list[rank - 1]).unwrap_or(&0);
        if g > 0 && first.is_none() {
            first = Some(rank);
        }
        dcg += (2f64.powi(g as i32) - 1.0) / ((rank + 1) as f64).log2();
    }
    let mut grades: Vec<u32> = judged.values().copied().collect();
    grades.sort();
    grades.reverse();
    let mut ideal = 0.0;
    for (i, g) in grades.iter().take(k).enumerate() {
        ideal += (2f64.powi(*g as i32) - 1.0) / ((i + 2) as f64).log2();
    }
    let recall = if first.is_some() { 1.0 } else { 0.0 };
    let rr = first.map_or(0.0, |r| 1.0 / r as f64);
    (recall, rr, if ideal > 0.0 { Some(dcg / ideal) } else { None })
}

fn criterion_10() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let ln3 = 3f64.log2();
    let cases: Vec<(&str, f64, f64)> = vec![
        (
            "positive at rank 1, R@1",
            recall_at_k(&run_of(&[("q", &["a", "b"])]), &qrels_of(&[("q", "a", 1)]), 1).value,
            1.0,
        ),
        (
            "positive at rank 6, R@5",
            recall_at_k(&run_of(&[("q", &["a", "b", "c", "d", "e", "f"])]), &qrels_of(&[("q", "f", 1)]), 5).value,
            0.0,
        ),
        (
            "positive at rank 6, R@10",
            recall_at_k(&run_of(&[("q", &["a", "b", "c", "d", "e", "f"])]), &qrels_of(&[("q", "f", 1)]), 10).value,
            1.0,
        ),
        (
            "first positive at rank 2, MRR",
            mrr_at_k(&run_of(&[("q", &["a", "b", "c"])]), &qrels_of(&[("q", "b", 1), ("q", "c", 1)]), 10).value,
            0.5,
        ),
        (
            "no positive in top k, MRR",
            mrr_at_k(&run_of(&[("q", &["a", "b", "c"])]), &qrels_of(&[("q", "c", 1)]), 2).value,
            0.0,
        ),
        (
            "single positive at rank 1, NDCG",
            ndcg_at_k(&run_of(&[("q", &["a", "b"])]), &qrels_of(&[("q", "a", 1)]), 10).value,
            1.0,
        ),
        (
            "single positive at rank 2, NDCG",
            ndcg_at_k(&run_of(&[("q", &["b", "a"])]), &qrels_of(&[("q", "a", 1)]), 10).value,
            1.0 / ln3,
        ),
        (
            "grades 3 and 1 swapped, NDCG",
            ndcg_at_k(&run_of(&[("q", &["y", "x"])]), &qrels_of(&[("q", "x", 3), ("q", "y", 1)]), 10).value,
            (1.0 + 7.0 / ln3) / (7.0 + 1.0 / ln3),
        ),
        (
            "two queries averaged, R@1",
            recall_at_k(
                &run_of(&[("q1", &["a", "b"]), ("q2", &["c", "d"])]),
                &qrels_of(&[("q1", "a", 1), ("q2", "d", 1)]),
                1,
            )
            .value,
            0.5,
        ),
        (
            "unjudged query skipped, MRR",
            mrr_at_k(
                &run_of(&[("q1", &["a", "b"]), ("q2", &["c", "d"])]),
                &qrels_of(&[("q1", "b", 2)]),
                10,
            )
            .value,
            0.5,
        ),
    ];
    for (name, got, want) in &cases {
        ensure(close(*got, *want), format!("{name}: {got} vs {want}"))?;
    }
    ensure((1.0 / ln3 - 0.6309).abs() < 5e-5, "0.6309 reference")?;

    let mut r = rng(1010);
    let mut run = Run::new();
    let mut qrels = Qrels::new();
    let mut lists = BTreeMap::new();
    for q in 0..100 {
        let qid = format!("q{q}");
        let n = r.random_range(1..30);
        let mut docs: Vec<String> = (0..40).map(|d| format!("d{d}")).collect();
        docs.shuffle(&mut r);
        docs.truncate(n);
        for d in 0..40 {
            if r.random_bool(0.15) {
                qrels.insert(&qid, format!("d{d}"), r.random_range(0..4));
            }
        }
        let entries = docs.iter().enumerate().map(|(i, d)| RunEntry::new(d.clone(), -(i as f64))).collect();
        run.insert(&qid, entries).map_err(|e| e.to_string())?;
        lists.insert(qid, docs);
    }
    for k in [1, 5, 10, 20] {
        let (mut rs, mut mrr, mut nd, mut evaluated, mut nd_n) = (0.0, 0.0, 0.0, 0, 0);
        for (qid, docs) in &lists {
            let Some(judged) = qrels.query(qid) else { continue };
            let (a, b, c) = brute_force(docs, judged, k);
            rs += a;
            mrr += b;
            evaluated += 1;
            if let Some(c) = c {
                nd += c;
                nd_n += 1;
            }
        }
        let pairs = [
            ("recall", recall_at_k(&run, &qrels, k).value, rs / evaluated as f64),
            ("mrr", mrr_at_k(&run, &qrels, k).value, mrr / evaluated as f64),
            ("ndcg", ndcg_at_k(&run, &qrels, k).value, nd / nd_n as f64),
        ];
        for (name, got, want) in pairs {
            ensure(close(got, want), format!("{name}@{k}: {got} vs brute force {want}"))?;
        }
    }
    Ok(format!("{} hand cases, 100 random queries at k = 1, 5, 10, 20", cases.len()))
}

// ---------------------------------------------------------------- 11

fn criterion_11() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = |name: &str| dir.path().join(name);
    let small = SynthConfig {
        topics: 30,
        train_queries: 24,
        test_queries: 6,
        list_len: 20,
        vocab: 300,
        ..Default::default()
    };
    let bench = generate(&small).map_err(|e| e.to_string())?;

    // run file: scores with at most six significant digits survive exactly
    let mut run = Run::new();
    for (qid, list) in bench.run.iter() {
        let entries = list.iter().map(|e| RunEntry::new(e.doc_id.clone(), e.score * 0.125 - 1.5)).collect();
        run.insert(qid, entries).map_err(|e| e.to_string())?;
    }
    write_run(&run, &path("run.trec"), "rt").map_err(|e| e.to_string())?;
    let back = load_run(&path("run.trec"), usize::MAX).map_err(|e| e.to_string())?;
    ensure(back == run, "run file changed on reload")?;

    let index = TermIndex::build(&bench.corpus, Bm25Params::new(1.2, 0.75).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    index.save(&path("corpus.idx")).map_err(|e| e.to_string())?;
    let loaded = TermIndex::load(&path("corpus.idx")).map_err(|e| e.to_string())?;
    ensure(loaded.to_bytes() == index.to_bytes(), "index bytes changed on reload")?;
    ensure(std::fs::read(path("corpus.idx")).map_err(|e| e.to_string())? == index.to_bytes(), "index file differs")?;

    let sources = Sources {
        index: Some(&index),
        store: Some(&bench.embeddings),
    };
    let opts = FeatureOptions {
        anchors: Some(8),
        ..Default::default()
    };
    let qid = &bench.train[0];
    let passages = bench.run.doc_ids(qid).ok_or("missing list")?;
    let text = bench.queries.get(qid).ok_or("missing query")?;
    let (anchors, features) = build_query_features(QueryInput { id: qid, text }, &passages, sources, &opts).map_err(|e| e.to_string())?;
    let cache = FeatureCache {
        qid: qid.clone(),
        key: cache_key(qid, &passages, &opts),
        anchors,
        passages,
        features,
    };
    let file = path(&FeatureCache::file_name(qid));
    cache.save(&file).map_err(|e| e.to_string())?;
    let first = FeatureCache::load(&file).map_err(|e| e.to_string())?;
    first.save(&file).map_err(|e| e.to_string())?;
    let second = FeatureCache::load(&file).map_err(|e| e.to_string())?;
    ensure(first == second && first.to_bytes() == cache.to_bytes(), "feature cache changed on reload")?;

    let index2 = TermIndex::build(&bench.corpus, Bm25Params::default()).map_err(|e| e.to_string())?;
    let sources2 = Sources {
        index: Some(&index2),
        store: Some(&bench.embeddings),
    };
    let items = featurize_run(&bench.run, &bench.queries, sources2, &opts, Some(&bench.train)).map_err(|e| e.to_string())?;
    let (examples, _) = label_examples(items, &bench.qrels);
    let mcfg = ModelConfig {
        dim: 16,
        inner: 32,
        heads: 2,
        ..Default::default()
    };
    let tcfg = TrainConfig {
        epochs: 2,
        batch_queries: 4,
        seed: 11,
        ..Default::default()
    };
    let a = train(&mcfg, &tcfg, &examples, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let b = train(&mcfg, &tcfg, &examples, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let (ba, bb) = (a.model.to_bytes().map_err(|e| e.to_string())?, b.model.to_bytes().map_err(|e| e.to_string())?);
    ensure(ba == bb, "same-seed training produced different checkpoints")?;
    ensure(a.step_losses == b.step_losses, "same-seed loss trajectories differ")?;
    a.model.save(&path("model.ckpt")).map_err(|e| e.to_string())?;
    let reloaded = HybRank::load(&path("model.ckpt")).map_err(|e| e.to_string())?;
    ensure(reloaded.to_bytes().map_err(|e| e.to_string())? == ba, "checkpoint changed on reload")?;
    Ok(format!("run, index, feature cache and checkpoint reload exactly; {} training steps repeat bit for bit", a.step_losses.len()))
}

fn main() {
    let mut failures = 0;
    let mut report = |id: u32, name: &str, result: Check| {
        match result {
            Ok(detail) => println!("PASS  criterion {id:>2}  {name}: {detail}"),
            Err(msg) => {
                failures += 1;
                println!("FAIL  criterion {id:>2}  {name}: {msg}");
            }
        }
    };
    report(1, "BM25 oracle equivalence", criterion_1());
    report(2, "normalization contract", criterion_2());
    report(3, "gradient correctness", criterion_3());
    report(4, "loss reductions", criterion_4());
    report(5, "structural invariances", criterion_5());
    report(6, "parameter-count band", criterion_6());
    let (seven, prev) = match criterion_7() {
        Ok((detail, res, prepared)) => (Ok(detail), Some((res, prepared))),
        Err(e) => (Err(e), None),
    };
    report(7, "synthetic end-to-end improvement", seven);
    report(8, "ablation ordering", criterion_8(prev.as_ref().map(|(r, p)| (r, p))));
    report(9, "anchor-count trend", criterion_9());
    report(10, "metric oracles", criterion_10());
    report(11, "round-trips and determinism", criterion_11());
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 11 acceptance criteria passed");
}
