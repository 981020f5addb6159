//! Exact cosine retrieval over pooled embeddings, with R@K evaluation.
//!
//! Pools at this scale are small, so scoring is exact brute force: every
//! query is ranked against every stored row. Rows are unit-normalized at
//! insert, making the dot product the cosine.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::align::TrainedAlignment;
use crate::error::{Error, Result};
use crate::scene::PairedCorpus;

/// The recall cutoffs every evaluation reports.
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// An immutable pool of unit-normalized embedding rows keyed by id.
/// Insertion order is preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Stored (normalized) row for position `i`.
    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }
}

fn normalize(id: &str, vector: &[f64]) -> Result<Vec<f64>> {
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::Numerical(format!(
            "embedding for {id:?} is non-finite"
        )));
    }
    if norm == 0.0 {
        return Err(Error::Data(format!("embedding for {id:?} is the zero vector")));
    }
    Ok(vector.iter().map(|v| v / norm).collect())
}

/// Builds an index from `(id, vector)` entries. Ids must be unique,
/// dimensions uniform, vectors nonzero.
pub fn build_index(entries: &[(String, Vec<f64>)]) -> Result<RetrievalIndex> {
    let dim = entries.first().map(|(_, v)| v.len()).unwrap_or(0);
    let mut seen = HashSet::with_capacity(entries.len());
    let mut ids = Vec::with_capacity(entries.len());
    let mut vectors = Vec::with_capacity(entries.len());
    for (id, vector) in entries {
        if vector.len() != dim {
            return Err(Error::Shape(format!(
                "embedding for {id:?} has length {}, expected {dim}",
                vector.len()
            )));
        }
        if !seen.insert(id.as_str()) {
            return Err(Error::Data(format!("duplicate id {id:?} in index")));
        }
        vectors.push(normalize(id, vector)?);
        ids.push(id.clone());
    }
    Ok(RetrievalIndex { ids, vectors, dim })
}

/// A query's candidates ordered by descending cosine score; equal scores
/// order by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    /// `(candidate id, score)`, best first.
    pub entries: Vec<(String, f64)>,
}

/// Exact top-k cosine ranking of `query` against the index. Returns
/// `min(k, count)` entries.
pub fn query_topk(
    index: &RetrievalIndex,
    query_id: &str,
    query: &[f64],
    k: usize,
) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::Data("k must be at least 1".into()));
    }
    if index.is_empty() {
        return Ok(RankedList {
            query_id: query_id.to_string(),
            entries: Vec::new(),
        });
    }
    if query.len() != index.dim {
        return Err(Error::Shape(format!(
            "query length {} does not match index dimension {}",
            query.len(),
            index.dim
        )));
    }
    let unit = normalize(query_id, query)?;
    let mut scored: Vec<(usize, f64)> = index
        .vectors
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let dot: f64 = row.iter().zip(&unit).map(|(a, b)| a * b).sum();
            (i, dot)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("cosine scores are finite")
            .then_with(|| index.ids[a.0].cmp(&index.ids[b.0]))
    });
    scored.truncate(k);
    Ok(RankedList {
        query_id: query_id.to_string(),
        entries: scored
            .into_iter()
            .map(|(i, score)| (index.ids[i].clone(), score))
            .collect(),
    })
}

/// Fraction of queries whose top-k contains at least one relevant id, for
/// each cutoff in `ks`. Every query must appear in `truth` with a
/// non-empty relevant set.
pub fn recall_at_k(
    ranked: &[RankedList],
    truth: &BTreeMap<String, BTreeSet<String>>,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if ranked.is_empty() {
        return Err(Error::Data("no ranked lists to evaluate".into()));
    }
    for list in ranked {
        match truth.get(&list.query_id) {
            None => {
                return Err(Error::Data(format!(
                    "query {:?} missing from relevance truth",
                    list.query_id
                )))
            }
            Some(relevant) if relevant.is_empty() => {
                return Err(Error::Data(format!(
                    "query {:?} has no relevant ids",
                    list.query_id
                )))
            }
            Some(_) => {}
        }
    }
    let mut out = BTreeMap::new();
    for &k in ks {
        let hits = ranked
            .iter()
            .filter(|list| {
                let relevant = &truth[&list.query_id];
                list.entries
                    .iter()
                    .take(k)
                    .any(|(id, _)| relevant.contains(id))
            })
            .count();
        out.insert(k, hits as f64 / ranked.len() as f64);
    }
    Ok(out)
}

/// Recall tables for both retrieval directions over one validation pool.
#[derive(Debug, Clone, PartialEq)]
pub struct BidirectionalRecall {
    /// Scene query → text candidates.
    pub text_retrieval: BTreeMap<usize, f64>,
    /// Text query → scene candidates.
    pub scene_retrieval: BTreeMap<usize, f64>,
    pub pool_size: usize,
}

/// Embeds every validation scene and caption with the trained model and
/// runs both retrieval directions over the validation pool. A candidate
/// is relevant to a query when their caption strings are equal.
pub fn evaluate_bidirectional(
    corpus: &PairedCorpus,
    model: &TrainedAlignment,
) -> Result<BidirectionalRecall> {
    corpus.validate()?;
    if corpus.split.validation.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let caption_of: HashMap<&str, &str> = corpus
        .texts
        .iter()
        .map(|(id, c)| (id.as_str(), c.as_str()))
        .collect();

    let mut scene_entries = Vec::new();
    let mut text_entries = Vec::new();
    for id in &corpus.split.validation {
        let scene = corpus
            .scene_by_id(id)
            .ok_or_else(|| Error::Data(format!("validation id {id:?} missing from scenes")))?;
        let caption = caption_of[id.as_str()];
        scene_entries.push((id.clone(), model.embed_scene(&scene.bev_sequence)?));
        text_entries.push((id.clone(), model.embed_text(caption)?));
    }
    let scene_index = build_index(&scene_entries)?;
    let text_index = build_index(&text_entries)?;

    // Same-caption validation ids, keyed by id.
    let mut relevant: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for id in &corpus.split.validation {
        let caption = caption_of[id.as_str()];
        let set = corpus
            .split
            .validation
            .iter()
            .filter(|other| caption_of[other.as_str()] == caption)
            .cloned()
            .collect();
        relevant.insert(id.clone(), set);
    }

    let max_k = *RECALL_KS.iter().max().expect("cutoffs are fixed");
    let mut scene_ranked = Vec::new();
    let mut text_ranked = Vec::new();
    for (id, vector) in &text_entries {
        scene_ranked.push(query_topk(&scene_index, id, vector, max_k)?);
    }
    for (id, vector) in &scene_entries {
        text_ranked.push(query_topk(&text_index, id, vector, max_k)?);
    }
    let scene_retrieval = recall_at_k(&scene_ranked, &relevant, &RECALL_KS)?;
    let text_retrieval = recall_at_k(&text_ranked, &relevant, &RECALL_KS)?;
    for table in [&scene_retrieval, &text_retrieval] {
        debug_assert!(table[&1] <= table[&5] && table[&5] <= table[&10]);
    }
    Ok(BidirectionalRecall {
        text_retrieval,
        scene_retrieval,
        pool_size: corpus.split.validation.len(),
    })
}

/// Serializable metrics report: per-direction recall table, pool size,
/// and the hash of the checkpoint that produced the embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub text_retrieval: BTreeMap<String, f64>,
    pub scene_retrieval: BTreeMap<String, f64>,
    pub pool_size: usize,
    pub checkpoint_hash: String,
}

impl MetricsReport {
    pub fn new(recall: &BidirectionalRecall, checkpoint_hash: impl Into<String>) -> Self {
        let label = |table: &BTreeMap<usize, f64>| {
            table
                .iter()
                .map(|(k, v)| (format!("R@{k}"), *v))
                .collect()
        };
        MetricsReport {
            text_retrieval: label(&recall.text_retrieval),
            scene_retrieval: label(&recall.scene_retrieval),
            pool_size: recall.pool_size,
            checkpoint_hash: checkpoint_hash.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{train_align, AlignDims, AlignTrainConfig};
    use crate::scene::{synth_corpus, SynthSpec};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(id: &str, v: &[f64]) -> (String, Vec<f64>) {
        (id.to_string(), v.to_vec())
    }

    #[test]
    fn index_normalizes_and_counts() {
        let index = build_index(&[
            entry("a", &[3.0, 4.0]),
            entry("b", &[0.0, 2.0]),
            entry("c", &[-1.0, 0.0]),
        ])
        .unwrap();
        assert_eq!(index.len(), 3);
        assert_eq!(index.vector(0), &[0.6, 0.8]);
        for i in 0..3 {
            let norm: f64 = index.vector(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn index_rejects_duplicates_zero_vectors_and_ragged_dims() {
        let err = build_index(&[entry("a", &[1.0]), entry("a", &[2.0])]).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
        let err = build_index(&[entry("a", &[0.0, 0.0])]).unwrap_err();
        assert!(err.to_string().contains("zero vector"));
        assert!(build_index(&[entry("a", &[1.0, 2.0]), entry("b", &[1.0])]).is_err());
    }

    #[test]
    fn topk_exact_match_ranks_first_with_unit_score() {
        let index = build_index(&[
            entry("a", &[1.0, 0.0]),
            entry("b", &[0.0, 1.0]),
            entry("c", &[1.0, 1.0]),
        ])
        .unwrap();
        let ranked = query_topk(&index, "q", &[0.0, 2.5], 2).unwrap();
        assert_eq!(ranked.entries.len(), 2);
        assert_eq!(ranked.entries[0].0, "b");
        assert!((ranked.entries[0].1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn topk_handles_large_k_ties_and_mismatches() {
        let index = build_index(&[
            entry("b", &[2.0, 0.0]),
            entry("a", &[1.0, 0.0]),
            entry("c", &[0.0, 1.0]),
        ])
        .unwrap();
        let ranked = query_topk(&index, "q", &[1.0, 0.0], 50).unwrap();
        assert_eq!(ranked.entries.len(), 3);
        assert_eq!(ranked.entries[0].0, "a", "equal scores break by ascending id");
        assert_eq!(ranked.entries[1].0, "b");

        assert!(query_topk(&index, "q", &[1.0, 0.0, 0.0], 1).is_err());
        assert!(query_topk(&index, "q", &[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn recall_closed_forms() {
        let ranked = |ids: &[&str]| RankedList {
            query_id: "q".to_string(),
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.to_string(), 1.0 - i as f64 * 0.1))
                .collect(),
        };
        let mut truth = BTreeMap::new();
        truth.insert("q".to_string(), BTreeSet::from(["hit".to_string()]));

        let first = [ranked(&["hit", "x", "y"])];
        let recall = recall_at_k(&first, &truth, &RECALL_KS).unwrap();
        assert_eq!(recall[&1], 1.0);
        assert_eq!(recall[&5], 1.0);
        assert_eq!(recall[&10], 1.0);

        let third = [ranked(&["x", "y", "hit", "z"])];
        let recall = recall_at_k(&third, &truth, &RECALL_KS).unwrap();
        assert_eq!(recall[&1], 0.0);
        assert_eq!(recall[&5], 1.0);
    }

    #[test]
    fn recall_rejects_missing_or_empty_truth() {
        let ranked = [RankedList {
            query_id: "q".to_string(),
            entries: vec![("x".to_string(), 0.5)],
        }];
        let empty = BTreeMap::new();
        assert!(recall_at_k(&ranked, &empty, &RECALL_KS)
            .unwrap_err()
            .to_string()
            .contains("missing"));

        let mut no_relevant = BTreeMap::new();
        no_relevant.insert("q".to_string(), BTreeSet::new());
        assert!(recall_at_k(&ranked, &no_relevant, &RECALL_KS)
            .unwrap_err()
            .to_string()
            .contains("no relevant"));

        assert!(recall_at_k(&[], &empty, &RECALL_KS).is_err());
    }

    #[test]
    fn random_ranking_recall_at_ten_near_one_tenth() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let trials = 2000;
        let mut hits = 0usize;
        for _ in 0..trials {
            let mut order: Vec<usize> = (0..100).collect();
            order.shuffle(&mut rng);
            let relevant = rng.gen_range(0..100);
            if order.iter().take(10).any(|&c| c == relevant) {
                hits += 1;
            }
        }
        let recall = hits as f64 / trials as f64;
        assert!(
            (recall - 0.10).abs() < 0.02,
            "monte-carlo R@10 {recall} strayed from 0.10"
        );
    }

    proptest! {
        #[test]
        fn topk_agrees_with_full_sort_oracle(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..40);
            let d = rng.gen_range(1..7);
            let entries: Vec<(String, Vec<f64>)> = (0..n)
                .map(|i| {
                    let v: Vec<f64> = (0..d)
                        .map(|_| {
                            let x: f64 = rng.gen_range(-1.0..1.0);
                            if x.abs() < 0.01 { 0.5 } else { x }
                        })
                        .collect();
                    (format!("id{i:03}"), v)
                })
                .collect();
            let index = build_index(&entries).unwrap();
            let query: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..1.0)).collect();
            let ranked = query_topk(&index, "q", &query, n).unwrap();

            let qnorm: f64 = query.iter().map(|v| v * v).sum::<f64>().sqrt();
            let unit: Vec<f64> = query.iter().map(|v| v / qnorm).collect();
            let mut oracle: Vec<(String, f64)> = (0..n)
                .map(|i| {
                    let score: f64 = index.vector(i).iter().zip(&unit).map(|(a, b)| a * b).sum();
                    (index.ids()[i].clone(), score)
                })
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            prop_assert_eq!(ranked.entries, oracle);
        }

        #[test]
        fn top_one_invariant_under_positive_query_scaling(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.gen_range(2..6);
            let entries: Vec<(String, Vec<f64>)> = (0..12)
                .map(|i| {
                    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..1.0)).collect();
                    (format!("id{i:02}"), v)
                })
                .collect();
            let index = build_index(&entries).unwrap();
            let query: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..1.0)).collect();
            let base = query_topk(&index, "q", &query, 1).unwrap();
            for scale in [0.25, 3.0, 1e4] {
                let scaled: Vec<f64> = query.iter().map(|v| v * scale).collect();
                let ranked = query_topk(&index, "q", &scaled, 1).unwrap();
                prop_assert_eq!(&ranked.entries[0].0, &base.entries[0].0);
            }
        }
    }

    fn toy_alignment(epochs: usize) -> (PairedCorpus, TrainedAlignment) {
        let corpus = synth_corpus(&SynthSpec {
            num_classes: 4,
            samples_per_class: 4,
            n: 4,
            d_b: 8,
            noise_sigma: 0.0,
            seed: 5,
        })
        .unwrap();
        let config = AlignTrainConfig {
            batch_size: 4,
            epochs,
            learning_rate: 0.4,
            seed: 6,
            dims: AlignDims {
                k: 8,
                d_c: 16,
                d_tok: 12,
                d_lang: 12,
            },
            ..AlignTrainConfig::default()
        };
        let trained = train_align(&corpus, None, &config).unwrap();
        (corpus, trained)
    }

    #[test]
    fn separable_corpus_evaluates_perfectly() {
        let (corpus, trained) = toy_alignment(80);
        let recall = evaluate_bidirectional(&corpus, &trained).unwrap();
        assert_eq!(recall.pool_size, 4);
        for table in [&recall.text_retrieval, &recall.scene_retrieval] {
            assert_eq!(table[&1], 1.0);
            assert_eq!(table[&5], 1.0);
            assert_eq!(table[&10], 1.0);
        }
    }

    #[test]
    fn untrained_model_scores_near_chance_and_recall_is_monotone() {
        let (corpus, untrained) = toy_alignment(0);
        let recall = evaluate_bidirectional(&corpus, &untrained).unwrap();
        for table in [&recall.text_retrieval, &recall.scene_retrieval] {
            assert!(table[&1] <= table[&5]);
            assert!(table[&5] <= table[&10]);
            assert!(table[&1] < 1.0, "untrained top-1 should not be perfect");
            assert_eq!(table[&10], 1.0, "pool of 4 makes R@10 trivially 1");
        }
    }

    #[test]
    fn evaluation_rejects_empty_validation_split() {
        let (mut corpus, trained) = toy_alignment(1);
        corpus.split.train.append(&mut corpus.split.validation);
        let err = evaluate_bidirectional(&corpus, &trained).unwrap_err();
        assert!(err.to_string().contains("validation split is empty"));
    }

    #[test]
    fn metrics_report_json_shape() {
        let recall = BidirectionalRecall {
            text_retrieval: BTreeMap::from([(1, 0.5), (5, 0.75), (10, 1.0)]),
            scene_retrieval: BTreeMap::from([(1, 0.25), (5, 0.5), (10, 0.75)]),
            pool_size: 8,
        };
        let report = MetricsReport::new(&recall, "abc123");
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"text_retrieval\":{\"R@1\":0.5,\"R@10\":1.0,\"R@5\":0.75}"));
        assert!(json.contains("\"pool_size\":8"));
        assert!(json.contains("\"checkpoint_hash\":\"abc123\""));
    }
}
