use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hybrank_core::corpus::{load_corpus, load_qrels, load_queries, load_run, write_run, Qrels, Run};
use hybrank_core::dense::{load_embeddings, EmbeddingStore};
use hybrank_core::features::{
    build_query_features, cache_key, AnchorStrategy, FeatureCache, FeatureLayout, FeatureMode, FeatureOptions,
    NormConfig, QueryInput, Sources,
};
use hybrank_core::metrics::{evaluate, Metric};
use hybrank_core::model::{rerank as rerank_list, HybRank, ModelConfig};
use hybrank_core::sparse::{Bm25Params, TermIndex};
use hybrank_core::synth::{generate, SynthConfig};
use hybrank_core::train::{label_examples, load_config, train as train_model, QueryFeatures, TrainConfig, TrainOptions};
use rayon::prelude::*;

use crate::{EmbedConvertArgs, EvalArgs, FeatureArgs, IndexArgs, ModeArg, RerankArgs, StrategyArg, SynthArgs, TrainArgs};

pub fn index(a: IndexArgs) -> Result<()> {
    if a.output.exists() && !a.force {
        bail!("{} already exists; pass --force to overwrite", a.output.display());
    }
    let params = Bm25Params::new(a.k1, a.b)?;
    let corpus = load_corpus(&a.corpus)?;
    let index = TermIndex::build(&corpus, params)?;
    index.save(&a.output)?;
    println!(
        "indexed {} documents, {} terms, average length {:.2}",
        index.num_docs(),
        index.num_terms(),
        index.avg_len()
    );
    Ok(())
}

fn parse_anchors(s: &str) -> Result<Option<usize>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(None);
    }
    match s.parse::<usize>() {
        Ok(0) | Err(_) => bail!("--anchors must be a positive integer or `all`, got {s:?}"),
        Ok(n) => Ok(Some(n)),
    }
}

pub fn features(a: FeatureArgs) -> Result<()> {
    let mode = match a.mode {
        ModeArg::Sparse => FeatureMode::Sparse,
        ModeArg::Dense => FeatureMode::Dense,
        ModeArg::Hybrid => FeatureMode::Hybrid,
    };
    let opts = FeatureOptions {
        anchors: parse_anchors(&a.anchors)?,
        strategy: match a.anchor_strategy {
            StrategyArg::Top => AnchorStrategy::Top,
            StrategyArg::Random => AnchorStrategy::Random { seed: a.seed },
        },
        mode,
        norm: NormConfig {
            t_sparse: a.t_sparse,
            t_dense: a.t_dense,
        },
        layout: if a.no_collab {
            FeatureLayout::QueryPassageOnly
        } else {
            FeatureLayout::Collaborative
        },
    };
    opts.norm.validate()?;
    let [need_sparse, need_dense] = mode.active();
    let index = match (&a.index, need_sparse) {
        (Some(p), true) => Some(TermIndex::load(p)?),
        (None, true) => bail!("--mode {} needs --index", mode.as_str()),
        _ => None,
    };
    let store = match (&a.vectors, &a.ids, need_dense) {
        (Some(v), Some(i), true) => Some(load_embeddings(v, i)?),
        (_, _, true) => bail!("--mode {} needs --vectors and --ids", mode.as_str()),
        _ => None,
    };
    let run = load_run(&a.run, a.depth)?;
    let queries = load_queries(&a.queries)?;
    let sources = Sources {
        index: index.as_ref(),
        store: store.as_ref(),
    };
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;

    let qids: Vec<&str> = run.queries().collect();
    let built: Vec<Result<FeatureCache>> = qids
        .par_iter()
        .map(|&qid| {
            let passages = run.doc_ids(qid).expect("query comes from the run");
            let text = queries
                .get(qid)
                .with_context(|| format!("query {qid:?} has no text in {}", a.queries.display()))?;
            let (anchors, features) = build_query_features(QueryInput { id: qid, text }, &passages, sources, &opts)
                .with_context(|| format!("query {qid:?}"))?;
            Ok(FeatureCache {
                qid: qid.to_string(),
                key: cache_key(qid, &passages, &opts),
                anchors,
                passages,
                features,
            })
        })
        .collect();
    let mut shapes = std::collections::BTreeMap::new();
    let mut caches = Vec::with_capacity(built.len());
    for c in built {
        caches.push(c?);
    }
    for c in &caches {
        c.save(&a.output.join(FeatureCache::file_name(&c.qid)))?;
        *shapes
            .entry((c.features.passages(), c.features.anchors()))
            .or_insert(0usize) += 1;
    }
    let shapes: Vec<String> = shapes
        .iter()
        .map(|((n, l), count)| format!("{count} x ({}+1)x{l}x2", n))
        .collect();
    println!(
        "wrote features for {} queries to {} (mode {}, anchors {}; shapes {})",
        caches.len(),
        a.output.display(),
        mode.as_str(),
        if a.no_collab { "none".to_string() } else { a.anchors.clone() },
        shapes.join(", ")
    );
    Ok(())
}

/// Reads every `.fea` file of a directory, ordered by query id.
fn load_feature_dir(dir: &Path) -> Result<Vec<FeatureCache>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "fea"))
        .collect();
    paths.sort();
    let mut caches = paths
        .iter()
        .map(|p| FeatureCache::load(p).map_err(Into::into))
        .collect::<Result<Vec<_>>>()?;
    if caches.is_empty() {
        bail!("no feature caches in {}", dir.display());
    }
    caches.sort_by(|x, y| x.qid.cmp(&y.qid));
    Ok(caches)
}

fn to_items(caches: Vec<FeatureCache>) -> Result<Vec<QueryFeatures>> {
    caches
        .into_iter()
        .map(|c| QueryFeatures::new(c.qid, c.passages, c.features).map_err(Into::into))
        .collect()
}

fn set_opt<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut tcfg = TrainConfig::default();
    let mut mcfg = ModelConfig::default();
    if let Some(p) = &a.config {
        load_config(p, &mut tcfg, &mut mcfg)?;
    }
    set_opt(&mut tcfg.epochs, a.epochs);
    set_opt(&mut tcfg.batch_queries, a.batch_queries);
    set_opt(&mut tcfg.lr, a.lr);
    set_opt(&mut tcfg.warmup_ratio, a.warmup_ratio);
    set_opt(&mut tcfg.clip_norm, a.clip_norm);
    set_opt(&mut tcfg.weight_decay, a.weight_decay);
    set_opt(&mut tcfg.tau, a.tau);
    set_opt(&mut tcfg.seed, a.seed);
    set_opt(&mut mcfg.dim, a.dim);
    set_opt(&mut mcfg.inner, a.inner);
    set_opt(&mut mcfg.heads, a.heads);
    set_opt(&mut mcfg.layers_inter, a.layers_inter);
    set_opt(&mut mcfg.layers_aggr, a.layers_aggr);
    set_opt(&mut mcfg.max_rank, a.max_rank);
    if a.no_interaction {
        mcfg.use_interaction = false;
    }
    if a.no_query_row {
        mcfg.use_query_row = false;
    }
    if a.no_positions {
        mcfg.use_positions = false;
    }

    let caches = load_feature_dir(&a.features)?;
    let active = caches[0].features.active();
    if let Some(c) = caches.iter().find(|c| c.features.active() != active) {
        bail!("feature caches mix channel modes (query {:?})", c.qid);
    }
    mcfg.channels = [mcfg.channels[0] && active[0], mcfg.channels[1] && active[1]];
    mcfg.validate()?;
    tcfg.validate()?;

    let qrels = load_qrels(&a.qrels)?;
    let (examples, report) = label_examples(to_items(caches)?, &qrels);
    println!("{report}");
    let dev = match (&a.dev_features, &a.dev_qrels) {
        (Some(f), Some(q)) => Some((to_items(load_feature_dir(f)?)?, load_qrels(q)?)),
        _ => None,
    };
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    let opts = TrainOptions {
        checkpoint_dir: Some(a.output.clone()),
        log_path: Some(a.output.join("train.log")),
        dev: dev.as_ref().map(|(items, q)| (items.as_slice(), q)),
    };
    let out = train_model(&mcfg, &tcfg, &examples, &opts)?;
    out.model.save(&a.output.join("final.ckpt"))?;
    let last = out.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
    print!(
        "trained {} parameters for {} epochs ({} steps), final mean loss {last:.6}",
        out.model.num_params(),
        out.epochs.len(),
        out.step_losses.len()
    );
    match &out.best {
        Some((epoch, score, _)) => println!(", best dev MRR@10 {score:.4} at epoch {epoch}"),
        None => println!(),
    }
    Ok(())
}

pub fn rerank(a: RerankArgs) -> Result<()> {
    let model = HybRank::load(&a.checkpoint)?;
    let run = load_run(&a.run, a.depth)?;
    let qids: Vec<&str> = run.queries().collect();
    let lists: Vec<Result<(String, Vec<_>)>> = qids
        .par_iter()
        .map(|&qid| {
            let path = a.features.join(FeatureCache::file_name(qid));
            let cache = FeatureCache::load(&path).with_context(|| format!("features for query {qid:?}"))?;
            let passages = run.doc_ids(qid).expect("query comes from the run");
            if cache.qid != qid || cache.passages != passages {
                bail!("features for query {qid:?} were built from a different list");
            }
            let scores = model.score_all(&cache.features).with_context(|| format!("query {qid:?}"))?;
            Ok((qid.to_string(), rerank_list(&passages, &scores)?))
        })
        .collect();
    let mut out = Run::new();
    for item in lists {
        let (qid, list) = item?;
        out.insert(qid, list)?;
    }
    write_run(&out, &a.output, &a.tag)?;
    println!("reranked {} queries into {}", out.len(), a.output.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let metrics = Metric::parse_list(&a.metrics)?;
    let run = load_run(&a.run, usize::MAX)?;
    let qrels = load_qrels(&a.qrels)?;
    let report = evaluate(&run, &qrels, &metrics);
    println!("{}", serde_json::to_string_pretty(&report.to_json())?);
    Ok(())
}

pub fn embed_convert(a: EmbedConvertArgs) -> Result<()> {
    let store = EmbeddingStore::load_text(&a.input)?;
    store.save(&a.vectors, &a.ids)?;
    println!("converted {} vectors of dimension {}", store.len(), store.dim());
    Ok(())
}

fn subset_qrels(qrels: &Qrels, qids: &[String]) -> Qrels {
    let mut out = Qrels::new();
    for q in qids {
        for (doc, &g) in qrels.query(q).into_iter().flatten() {
            out.insert(q.clone(), doc.clone(), g);
        }
    }
    out
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        topics: a.topics,
        train_queries: a.train_queries,
        test_queries: a.test_queries,
        list_len: a.list_len,
        vocab: a.vocab,
        seed: a.seed,
        ..Default::default()
    };
    let bench = generate(&cfg)?;
    let dir = &a.output;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    bench.corpus.write(&dir.join("corpus.jsonl"))?;
    bench.queries.write(&dir.join("queries.tsv"))?;
    bench.embeddings.save(&dir.join("vectors.bin"), &dir.join("ids.txt"))?;
    for (name, qids) in [("train", &bench.train), ("test", &bench.test)] {
        write_run(&bench.subset(qids)?, &dir.join(format!("{name}.run")), "initial")?;
        subset_qrels(&bench.qrels, qids).write(&dir.join(format!("{name}.qrels")))?;
    }
    println!(
        "wrote {} passages, {} train and {} test queries to {}",
        bench.corpus.len(),
        bench.train.len(),
        bench.test.len(),
        dir.display()
    );
    Ok(())
}
