use std::collections::BTreeSet;

use approx::assert_abs_diff_eq;
use ctxembed::chunking::{recursive_split, subsplit_corpus, ChunkerConfig};
use ctxembed::corpus::{load_corpus, slice_chars, save_corpus, AnswerSpan, CharSpan, ChunkKey, Corpus, Document, Query};
use ctxembed::encoder::{Encoder, EncoderConfig, Tokenizer};
use ctxembed::evalbench::{evaluate, ndcg_at_k};
use ctxembed::pooling::{query_tokens, query_vector};
use ctxembed::retrieval::{build_bm25_index, build_index, search, Bm25Params, ChunkIndex, IndexMode};
use ctxembed::synthgen::{generate, SynthConfig};
use proptest::prelude::*;

fn arb_document(id: String) -> impl Strategy<Value = Document> {
    // Text from a mixed alphabet; chunk spans from sorted cut points, with
    // some gaps dropped between chunks.
    ("[a-z éü,.\n]{1,60}", prop::collection::vec(any::<bool>(), 60)).prop_map(move |(text, flags)| {
        let len = text.chars().count();
        let mut cuts: Vec<usize> = (1..len).filter(|&i| flags[i % flags.len()]).collect();
        cuts.insert(0, 0);
        cuts.push(len);
        let spans: Vec<CharSpan> = cuts
            .windows(2)
            .enumerate()
            .filter(|(i, w)| i % 3 != 2 || w[1] - w[0] > 1)
            .map(|(i, w)| if i % 3 == 2 { CharSpan::new(w[0] + 1, w[1]) } else { CharSpan::new(w[0], w[1]) })
            .collect();
        Document::from_spans(id.clone(), text, &spans)
    })
}

fn arb_corpus() -> impl Strategy<Value = Corpus> {
    (1usize..5)
        .prop_flat_map(|n| (0..n).map(|i| arb_document(format!("d{i}"))).collect::<Vec<_>>())
        .prop_flat_map(|docs| {
            let n = docs.len();
            let picks = prop::collection::vec((0..n, any::<prop::sample::Index>(), "[a-z ?]{0,20}", any::<bool>()), 0..6);
            (Just(docs), picks)
        })
        .prop_map(|(docs, picks)| {
            let queries = picks
                .into_iter()
                .enumerate()
                .map(|(i, (d, c, text, with_span))| {
                    let doc = &docs[d];
                    let chunk = c.index(doc.chunks.len());
                    let span = doc.chunks[chunk].char_span;
                    Query {
                        query_id: format!("q{i}"),
                        text,
                        gold: [ChunkKey::new(doc.doc_id.clone(), chunk)].into(),
                        answer_span: with_span.then(|| AnswerSpan {
                            doc_id: doc.doc_id.clone(),
                            start: span.start,
                            end: span.end,
                        }),
                    }
                })
                .collect();
            Corpus::new(docs, queries).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corpus_round_trips(corpus in arb_corpus()) {
        let dir = tempfile::tempdir().unwrap();
        let (docs, queries) = (dir.path().join("docs.jsonl"), dir.path().join("queries.jsonl"));
        save_corpus(&corpus, &docs, &queries).unwrap();
        prop_assert_eq!(load_corpus(&docs, &queries).unwrap(), corpus);
    }

    #[test]
    fn split_partitions_text(text in "[a-z \n.é]{0,400}", max_chars in 1usize..80) {
        let config = ChunkerConfig::with_max_chars(max_chars);
        let spans = recursive_split(&text, &config);
        let chars: Vec<char> = text.chars().collect();
        let mut at = 0;
        let mut rebuilt = String::new();
        for s in &spans {
            prop_assert_eq!(s.start, at);
            prop_assert!(s.end > s.start);
            rebuilt.extend(&chars[s.start..s.end]);
            at = s.end;
        }
        prop_assert_eq!(rebuilt, text.clone());
        prop_assert_eq!(recursive_split(&text, &config), spans);
    }
}

#[test]
fn subsplit_gold_follows_answer() {
    let corpus = generate(&SynthConfig {
        n_docs: 20,
        chunks_per_doc: 5,
        facts_per_chunk: 3,
        ..Default::default()
    })
    .unwrap();
    for target in [200, 80, 40, 15] {
        let split = subsplit_corpus(&corpus, target).unwrap();
        for q in &split.queries {
            let span = q.answer_span.as_ref().unwrap();
            let doc = &split.documents[&span.doc_id];
            let overlaps: Vec<usize> = doc.chunks.iter().map(|c| c.char_span.overlap(&span.span())).collect();
            let gold: Vec<usize> = q.gold.iter().map(|g| g.chunk_index).collect();
            assert_eq!(gold.len(), 1);
            // The answer lands in its gold sub-chunk whenever some sub-chunk
            // holds all of it; a straddling answer goes to the largest overlap.
            let best = overlaps.iter().max().unwrap();
            assert_eq!(overlaps[gold[0]], *best, "{} at {target}", q.query_id);
            if *best == span.end - span.start {
                assert!(doc.chunk_text(gold[0]).contains(slice_chars(&doc.text, span.span())));
            }
        }
    }
}

fn small_encoder() -> Encoder {
    Encoder::new(EncoderConfig {
        dim: 16,
        heads: 2,
        layers: 1,
        init_std: 0.3,
        seed: 4,
        ..Default::default()
    })
    .unwrap()
}

fn retrieval_corpus(n_docs: usize, seed: u64) -> Corpus {
    generate(&SynthConfig {
        n_docs,
        chunks_per_doc: 4,
        sabotage_rate: 0.5,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (norm(a) * norm(b))
}

/// Scores every chunk from the stored representations.
fn oracle_scores(index: &ChunkIndex, corpus: &Corpus, encoder: &Encoder, text: &str) -> Vec<f64> {
    let seq = encoder.encode_query_sequence(text).unwrap();
    let h = encoder.forward(&seq).unwrap();
    match index.mode {
        Some(IndexMode::LateInteraction) => {
            let q = query_tokens(&h, &seq).unwrap();
            (0..index.len())
                .map(|i| {
                    let c = index.token_vectors(i).unwrap();
                    q.rows()
                        .into_iter()
                        .map(|qt| c.rows().into_iter().map(|ct| qt.dot(&ct)).fold(f64::NEG_INFINITY, f64::max))
                        .sum()
                })
                .collect()
        }
        Some(_) => {
            let q = query_vector(&h, &seq).unwrap().to_vec();
            (0..index.len()).map(|i| cosine(&q, &index.vector(i).unwrap().to_vec())).collect()
        }
        None => {
            let tok = Tokenizer::new(encoder.config.vocab_size, encoder.config.lowercase);
            let chunks: Vec<Vec<String>> =
                index.keys().iter().map(|k| tok.tokenize(corpus.chunk_text(k).unwrap())).collect();
            let n = chunks.len() as f64;
            let avg = chunks.iter().map(Vec::len).sum::<usize>() as f64 / n;
            index
                .keys()
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    tok.tokenize(text)
                        .iter()
                        .map(|t| {
                            let df = chunks.iter().filter(|c| c.contains(t)).count() as f64;
                            let tf = chunks[i].iter().filter(|x| *x == t).count() as f64;
                            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                            idf * tf * 2.5 / (tf + 1.5 * (0.25 + 0.75 * chunks[i].len() as f64 / avg))
                        })
                        .sum()
                })
                .collect()
        }
    }
}

fn indices(corpus: &Corpus, encoder: &Encoder) -> Vec<ChunkIndex> {
    let mut out: Vec<ChunkIndex> = [IndexMode::Independent, IndexMode::LateChunk, IndexMode::LateInteraction]
        .into_iter()
        .map(|m| build_index(corpus, encoder, m).unwrap())
        .collect();
    out.push(build_bm25_index(corpus, encoder.tokenizer(), Bm25Params::default()));
    out
}

#[test]
fn search_matches_full_sort_oracle() {
    let encoder = small_encoder();
    let corpus = retrieval_corpus(40, 21);
    for index in indices(&corpus, &encoder) {
        for q in corpus.queries.iter().step_by(7) {
            let scores = oracle_scores(&index, &corpus, &encoder, &q.text);
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(index.keys()[a].cmp(&index.keys()[b])));
            let got = search(&index, &q.text, Some(&encoder), index.len()).unwrap();
            assert_eq!(got.hits.len(), index.len());
            for (hit, &i) in got.hits.iter().zip(&order) {
                assert_abs_diff_eq!(hit.score, scores[i], epsilon = 1e-9);
            }
            // Near-ties may legitimately swap under rounding; compare ranks
            // only where the oracle scores are well separated.
            for (r, hit) in got.hits.iter().enumerate() {
                let i = order[r];
                let separated = (r == 0 || scores[order[r - 1]] - scores[i] > 1e-9)
                    && (r + 1 == order.len() || scores[i] - scores[order[r + 1]] > 1e-9);
                if separated {
                    assert_eq!(hit.key(), index.keys()[i]);
                }
            }
        }
    }
}

#[test]
fn search_prefix_and_score_ranges() {
    let encoder = small_encoder();
    let corpus = retrieval_corpus(10, 5);
    for index in indices(&corpus, &encoder) {
        for q in corpus.queries.iter().step_by(5) {
            let full = search(&index, &q.text, Some(&encoder), index.len()).unwrap().keys();
            for k in 1..index.len() {
                assert_eq!(search(&index, &q.text, Some(&encoder), k).unwrap().keys(), full[..k]);
            }
            let n_tokens = encoder.tokenizer().tokenize(&q.text).len() as f64;
            for hit in search(&index, &q.text, Some(&encoder), index.len()).unwrap().hits {
                match index.mode {
                    None => assert!(hit.score >= 0.0),
                    Some(IndexMode::LateInteraction) => assert!(hit.score.abs() <= n_tokens + 1.0 + 1e-9),
                    Some(_) => assert!(hit.score.abs() <= 1.0 + 1e-12),
                }
            }
        }
    }
}

#[test]
fn evaluate_matches_recomputation() {
    let encoder = small_encoder();
    let corpus = retrieval_corpus(5, 8);
    let queries = &corpus.queries[..20];
    for index in indices(&corpus, &encoder) {
        let report = evaluate(&index, queries, Some(&encoder), 10).unwrap();
        let mut total = 0.0;
        for q in queries {
            let scores = oracle_scores(&index, &corpus, &encoder, &q.text);
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let dcg: f64 = order
                .iter()
                .take(10)
                .enumerate()
                .filter(|(_, &i)| q.gold.contains(&index.keys()[i]))
                .map(|(r, _)| 1.0 / (r as f64 + 2.0).log2())
                .sum();
            let idcg: f64 = (0..q.gold.len().min(10)).map(|r| 1.0 / (r as f64 + 2.0).log2()).sum();
            total += dcg / idcg;
        }
        assert_abs_diff_eq!(report.mean_ndcg, total / queries.len() as f64, epsilon = 1e-12);
    }
}

proptest! {
    #[test]
    fn irrelevant_chunk_below_k_leaves_ndcg(
        n in 1usize..30,
        gold_mask in prop::collection::vec(any::<bool>(), 30),
        k in 1usize..12,
        at in any::<prop::sample::Index>(),
    ) {
        let ranked: Vec<ChunkKey> = (0..n).map(|i| ChunkKey::new("d", i)).collect();
        let mut gold: BTreeSet<ChunkKey> = (0..n).filter(|&i| gold_mask[i]).map(|i| ChunkKey::new("d", i)).collect();
        gold.insert(ChunkKey::new("d", 0));
        let before = ndcg_at_k(&ranked, &gold, k);
        let mut extended = ranked.clone();
        let pos = k.min(n) + at.index(n + 1 - k.min(n));
        extended.insert(pos, ChunkKey::new("extra", 0));
        prop_assert_eq!(ndcg_at_k(&extended, &gold, k), before);
    }
}
