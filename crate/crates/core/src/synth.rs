//! Seeded synthetic reranking benchmark.
//!
//! Passages are grouped into topics. Passages of one topic share words drawn
//! from a topic template and sit near a common embedding centre; a query
//! belongs to one topic and its positives are that topic's passages. Words
//! come from one shared vocabulary, so topics overlap lexically.
//!
//! The initial list of a query is the ideal ranking (positives first, then
//! negatives from other topics), after which every positive, top one first,
//! is swapped with the entry a random 5 to 20 places below it. The top entry
//! is therefore always a negative.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{Corpus, Document, QuerySet, Qrels, Run, RunEntry};
use crate::dense::EmbeddingStore;
use crate::error::{Error, Result};
use crate::features::query_embedding_id;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub topics: usize,
    pub passages_per_topic: usize,
    pub train_queries: usize,
    pub test_queries: usize,
    pub list_len: usize,
    pub vocab: usize,
    pub template_words: usize,
    /// Template words per passage, drawn from its topic's template.
    pub passage_topic_words: usize,
    pub passage_filler_words: usize,
    pub query_topic_words: usize,
    pub query_filler_words: usize,
    pub embedding_dim: usize,
    /// Per-coordinate standard deviation around a unit-norm topic centre.
    pub noise: f64,
    pub min_shift: usize,
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            topics: 400,
            passages_per_topic: 5,
            train_queries: 500,
            test_queries: 100,
            list_len: 40,
            vocab: 3000,
            template_words: 10,
            passage_topic_words: 4,
            passage_filler_words: 12,
            query_topic_words: 2,
            query_filler_words: 3,
            embedding_dim: 32,
            noise: 0.3,
            min_shift: 5,
            max_shift: 20,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.topics < 2 || self.passages_per_topic == 0 {
            return bad("need at least two topics with passages");
        }
        if self.list_len <= self.passages_per_topic {
            return bad("lists must be longer than the number of positives");
        }
        if self.list_len - self.passages_per_topic > (self.topics - 1) * self.passages_per_topic {
            return bad("not enough negatives for the list length");
        }
        if self.template_words > self.vocab
            || self.passage_topic_words > self.template_words
            || self.query_topic_words > self.template_words
        {
            return bad("template sizes exceed the vocabulary or template");
        }
        if self.min_shift == 0 || self.min_shift > self.max_shift {
            return bad("shift range must satisfy 1 <= min <= max");
        }
        if self.embedding_dim == 0 || !(self.noise >= 0.0) {
            return bad("embedding dimension must be positive and noise non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub corpus: Corpus,
    pub queries: QuerySet,
    /// Passage vectors under their ids, query vectors under `q:<qid>`.
    pub embeddings: EmbeddingStore,
    pub qrels: Qrels,
    pub run: Run,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SynthBenchmark {
    /// The initial run restricted to `qids`.
    pub fn subset(&self, qids: &[String]) -> Result<Run> {
        let mut run = Run::new();
        for q in qids {
            let list = self.run.get(q).ok_or_else(|| Error::UnknownId(q.clone()))?;
            run.insert(q.clone(), list.to_vec())?;
        }
        Ok(run)
    }
}

fn word(i: usize) -> String {
    format!("w{i}")
}

fn pick<R: Rng>(rng: &mut R, pool: &[usize], n: usize) -> Vec<usize> {
    sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
}

fn noisy_vector<R: Rng>(rng: &mut R, centre: &[f64], noise: &Normal<f64>) -> Vec<f32> {
    centre.iter().map(|&c| (c + noise.sample(rng)) as f32).collect()
}

pub fn doc_id(topic: usize, k: usize, per_topic: usize) -> String {
    format!("p{:05}", topic * per_topic + k)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthBenchmark> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let vocab: Vec<usize> = (0..cfg.vocab).collect();

    let mut templates = Vec::with_capacity(cfg.topics);
    let mut centres = Vec::with_capacity(cfg.topics);
    for _ in 0..cfg.topics {
        templates.push(pick(&mut rng, &vocab, cfg.template_words));
        let mut c: Vec<f64> = (0..cfg.embedding_dim).map(|_| unit.sample(&mut rng)).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        c.iter_mut().for_each(|v| *v /= norm);
        centres.push(c);
    }

    let mut docs = Vec::with_capacity(cfg.topics * cfg.passages_per_topic);
    let mut embeddings = EmbeddingStore::new(cfg.embedding_dim)?;
    for t in 0..cfg.topics {
        for k in 0..cfg.passages_per_topic {
            let mut words = pick(&mut rng, &templates[t], cfg.passage_topic_words);
            words.extend((0..cfg.passage_filler_words).map(|_| rng.random_range(0..cfg.vocab)));
            words.shuffle(&mut rng);
            let id = doc_id(t, k, cfg.passages_per_topic);
            let text = words.iter().map(|&w| word(w)).collect::<Vec<_>>().join(" ");
            embeddings.insert(&id, &noisy_vector(&mut rng, &centres[t], &noise))?;
            docs.push(Document {
                id,
                title: String::new(),
                text,
            });
        }
    }
    let corpus = Corpus::from_documents(docs)?;

    let total = cfg.train_queries + cfg.test_queries;
    let mut queries = QuerySet::new();
    let mut qrels = Qrels::new();
    let mut run = Run::new();
    let mut qids = Vec::with_capacity(total);
    let per = cfg.passages_per_topic;
    let n_docs = cfg.topics * per;
    for i in 0..total {
        let qid = format!("q{i}");
        let t = i % cfg.topics;
        let mut words = pick(&mut rng, &templates[t], cfg.query_topic_words);
        words.extend((0..cfg.query_filler_words).map(|_| rng.random_range(0..cfg.vocab)));
        words.shuffle(&mut rng);
        queries.insert(&qid, words.iter().map(|&w| word(w)).collect::<Vec<_>>().join(" "))?;
        embeddings.insert(query_embedding_id(&qid), &noisy_vector(&mut rng, &centres[t], &noise))?;

        let mut list: Vec<String> = (0..per).map(|k| doc_id(t, k, per)).collect();
        for d in &list {
            qrels.insert(&qid, d, 1);
        }
        // negatives: distinct passages outside the topic
        let others: Vec<usize> = (0..n_docs).filter(|&d| d / per != t).collect();
        list.extend(
            pick(&mut rng, &others, cfg.list_len - per)
                .into_iter()
                .map(|d| doc_id(d / per, d % per, per)),
        );
        for p in 0..per {
            let shift = rng.random_range(cfg.min_shift..=cfg.max_shift);
            list.swap(p, (p + shift).min(cfg.list_len - 1));
        }
        let n = list.len();
        let entries = list
            .into_iter()
            .enumerate()
            .map(|(r, d)| RunEntry::new(d, (n - r) as f64))
            .collect();
        run.insert(&qid, entries)?;
        qids.push(qid);
    }
    let test = qids.split_off(cfg.train_queries);
    Ok(SynthBenchmark {
        corpus,
        queries,
        embeddings,
        qrels,
        run,
        train: qids,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            topics: 20,
            train_queries: 30,
            test_queries: 10,
            list_len: 30,
            vocab: 200,
            ..Default::default()
        }
    }

    #[test]
    fn shapes_and_labels() {
        let b = generate(&small()).unwrap();
        assert_eq!(b.corpus.len(), 100);
        assert_eq!(b.queries.len(), 40);
        assert_eq!(b.train.len(), 30);
        assert_eq!(b.test.len(), 10);
        assert_eq!(b.embeddings.ids().len(), 140);
        for (qid, list) in b.run.iter() {
            assert_eq!(list.len(), 30);
            assert!(!b.qrels.is_positive(qid, &list[0].doc_id));
            let positives = list.iter().filter(|e| b.qrels.is_positive(qid, &e.doc_id)).count();
            assert_eq!(positives, 5);
            let mut ids: Vec<_> = list.iter().map(|e| &e.doc_id).collect();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), 30);
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.run, b.run);
        assert_eq!(a.corpus.documents(), b.corpus.documents());
        let c = generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.run, c.run);
    }

    #[test]
    fn rejects_impossible_lists() {
        let cfg = SynthConfig {
            topics: 2,
            list_len: 20,
            ..small()
        };
        assert!(generate(&cfg).is_err());
    }
}
