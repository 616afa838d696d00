//! Randomized invariant checks: softmax geometry, tokenizer purity, loss
//! positivity, retrieval equivalence against a naive oracle, container
//! round-trips, and attention equivariance.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uvr_core::corpus::parse_corpus;
use uvr_core::fusion::{attend, encode_text_with_cache, EncoderParams, ImageRepr, TextRepr};
use uvr_core::tensor::{softmax_rows, Matrix};
use uvr_core::{FeatureTable, FusionParams, Sentence, TiltModel, Token};

fn token(id: u32) -> Token {
    Token {
        surface: format!("w{id}"),
        id,
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::uniform(rows, cols, -30.0, 30.0, &mut rng);
        let a = softmax_rows(&m);
        for row in a.row_iter() {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn triplet_loss_is_never_negative(
        dim in 2usize..12,
        seed in 0u64..1000,
        gamma in 0.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| rand::Rng::random_range(rng, -2.0..2.0)).collect()
        };
        let (x, y, z) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        prop_assert!(uvr_core::cmrm::triplet_loss(&x, &y, &z, gamma) >= 0.0);
    }
}

// ---------------------------------------------------------------------------
// Corpus and retrieval
// ---------------------------------------------------------------------------

const WORDS: [&str; 6] = ["ape", "bear", "crab", "deer", "eel", "fox"];
const STOPS: [&str; 2] = ["the", "of"];

/// Strategy: a small corpus as (words-per-sentence, image id) choices.
fn corpus_strategy() -> impl Strategy<Value = Vec<(Vec<usize>, u32)>> {
    prop::collection::vec(
        (prop::collection::vec(0usize..8, 1..6), 1u32..5),
        2..8,
    )
}

/// Renders choices into JSONL; indices 6..8 inject stopwords.
fn render(corpus: &[(Vec<usize>, u32)]) -> String {
    let mut out = String::new();
    for (i, (words, image_id)) in corpus.iter().enumerate() {
        let text: Vec<&str> = words
            .iter()
            .map(|&w| {
                if w < WORDS.len() {
                    WORDS[w]
                } else {
                    STOPS[w - WORDS.len()]
                }
            })
            .collect();
        out.push_str(&format!(
            "{{\"id\": {}, \"text\": \"{}\", \"image_id\": {}}}\n",
            i + 1,
            text.join(" "),
            image_id
        ));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parsed_tokens_are_known_non_stopwords(choices in corpus_strategy()) {
        let stop: BTreeSet<String> = STOPS.iter().map(|s| s.to_string()).collect();
        let corpus = parse_corpus(&render(&choices), &stop, "prop").unwrap();
        for (sent, _) in &corpus.pairs {
            for tok in &sent.tokens {
                prop_assert!(!stop.contains(&tok.surface));
                prop_assert_eq!(corpus.vocab.surface(tok.id), Some(tok.surface.as_str()));
            }
            // Re-tokenizing the raw text reproduces the stored tokens.
            let again = corpus.vocab.tokenize_known(&sent.raw_text);
            prop_assert_eq!(&again, &sent.tokens);
        }
    }

    #[test]
    fn tilt_retrieval_matches_a_naive_oracle(
        choices in corpus_strategy(),
        query_pick in 0usize..8,
        w in 1u32..4,
        m in 1usize..4,
    ) {
        let stop: BTreeSet<String> = STOPS.iter().map(|s| s.to_string()).collect();
        let body = render(&choices);
        let corpus = parse_corpus(&body, &stop, "prop").unwrap();
        let model = TiltModel::build(&corpus, w).unwrap();
        let query_sentence = &corpus.pairs[query_pick % corpus.pairs.len()].0;
        let got = model.retrieve_text(&query_sentence.raw_text, None, m).unwrap();

        // Naive oracle: recompute everything with plain hash maps.
        let n_docs = corpus.pairs.len() as f64;
        let mut df: HashMap<u32, f64> = HashMap::new();
        for (sent, _) in &corpus.pairs {
            let distinct: BTreeSet<u32> = sent.tokens.iter().map(|t| t.id).collect();
            for id in distinct {
                *df.entry(id).or_insert(0.0) += 1.0;
            }
        }
        let ti = |tokens: &[Token], id: u32| -> f64 {
            let count = tokens.iter().filter(|t| t.id == id).count() as f64;
            let tf = count / tokens.len() as f64;
            tf * (n_docs / (1.0 + df.get(&id).copied().unwrap_or(0.0))).ln()
        };
        let top_topics = |tokens: &[Token]| -> Vec<u32> {
            let distinct: BTreeSet<u32> = tokens.iter().map(|t| t.id).collect();
            let mut scored: Vec<(u32, f64)> =
                distinct.iter().map(|&id| (id, ti(tokens, id))).collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            scored.truncate(w as usize);
            scored.into_iter().map(|(id, _)| id).collect()
        };
        let mut table: HashMap<u32, Vec<u32>> = HashMap::new();
        for (sent, img) in &corpus.pairs {
            if sent.tokens.is_empty() {
                continue;
            }
            for topic in top_topics(&sent.tokens) {
                let list = table.entry(topic).or_default();
                if !list.contains(&img.image_id) {
                    list.push(img.image_id);
                }
            }
        }
        let expected = if query_sentence.tokens.is_empty() {
            (vec![0u32], vec![0.0])
        } else {
            let mut counts: HashMap<u32, u64> = HashMap::new();
            for topic in top_topics(&query_sentence.tokens) {
                for &img in table.get(&topic).map(Vec::as_slice).unwrap_or(&[]) {
                    *counts.entry(img).or_insert(0) += 1;
                }
            }
            if counts.is_empty() {
                (vec![0u32], vec![0.0])
            } else {
                let mut ranked: Vec<(u32, u64)> = counts.into_iter().collect();
                ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                ranked.truncate(m);
                (
                    ranked.iter().map(|&(id, _)| id).collect(),
                    ranked.iter().map(|&(_, c)| c as f64).collect(),
                )
            }
        };
        prop_assert_eq!(&got.images, &expected.0);
        prop_assert_eq!(&got.scores, &expected.1);
    }

    #[test]
    fn tilt_container_roundtrip_is_byte_identical(choices in corpus_strategy(), w in 1u32..4) {
        let stop: BTreeSet<String> = STOPS.iter().map(|s| s.to_string()).collect();
        let corpus = parse_corpus(&render(&choices), &stop, "prop").unwrap();
        let model = TiltModel::build(&corpus, w).unwrap();
        let bytes = model.to_bytes();
        let back = TiltModel::from_bytes(&bytes, "prop").unwrap();
        prop_assert_eq!(bytes, back.to_bytes());
    }
}

// ---------------------------------------------------------------------------
// Feature container
// ---------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_container_roundtrip_is_exact(
        rows in prop::collection::vec(
            prop::collection::vec((-100i32..100).prop_map(|v| v as f64 * 0.125), 3),
            1..5,
        ),
    ) {
        let table = FeatureTable::from_rows(rows).unwrap();
        let bytes = table.to_bytes();
        let back = FeatureTable::from_bytes(&bytes, "prop").unwrap();
        prop_assert_eq!(table.matrix(), back.matrix());
        prop_assert_eq!(bytes, back.to_bytes());
    }
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encoder_attention_rows_sum_to_one(
        ids in prop::collection::vec(0u32..9, 1..6),
        seed in 0u64..500,
    ) {
        let enc = EncoderParams::init(9, 8, 16, 4, 8, seed).unwrap();
        let sentence = Sentence {
            sent_id: 1,
            raw_text: String::new(),
            tokens: ids.iter().map(|&id| token(id)).collect(),
        };
        let (_, cache) = encode_text_with_cache(&sentence, &enc).unwrap();
        for head in 0..cache.heads() {
            for row in cache.head_attention(head).row_iter() {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn attend_is_equivariant_under_any_image_permutation(
        n in 1usize..5,
        m in 1usize..5,
        seed in 0u64..500,
        perm_seed in 0u64..500,
    ) {
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = Matrix::uniform(n, d, -1.0, 1.0, &mut rng);
        let img = Matrix::uniform(m, d, -1.0, 1.0, &mut rng);
        let params = FusionParams::init(d, 3, seed ^ 0xff).unwrap();

        let mut perm: Vec<usize> = (0..m).collect();
        let mut perm_rng = ChaCha8Rng::seed_from_u64(perm_seed);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut perm_rng);
        let mut permuted = Matrix::zeros(m, d);
        for (j, &src) in perm.iter().enumerate() {
            permuted.row_mut(j).copy_from_slice(img.row(src));
        }

        let text = TextRepr { h };
        let (alpha, h_prime) = attend(&text, &ImageRepr { m: img }, &params).unwrap();
        let (alpha_p, h_prime_p) = attend(&text, &ImageRepr { m: permuted }, &params).unwrap();
        for i in 0..n {
            for (j, &src) in perm.iter().enumerate() {
                prop_assert!((alpha_p.get(i, j) - alpha.get(i, src)).abs() <= 1e-12);
            }
            for c in 0..d {
                prop_assert!((h_prime_p.get(i, c) - h_prime.get(i, c)).abs() <= 1e-12);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Table construction stays append-only under a fixed dictionary
// ---------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn table_lists_grow_append_only_under_a_fixed_dictionary(
        choices in corpus_strategy(),
    ) {
        // Build the dictionary over the full corpus, then add pairs one at a
        // time: every topic's image list must extend the previous one.
        let stop: BTreeSet<String> = STOPS.iter().map(|s| s.to_string()).collect();
        let corpus = parse_corpus(&render(&choices), &stop, "prop").unwrap();
        let dict = uvr_core::tilt::compute_tfidf(&corpus);
        let w = 2;
        let mut previous: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for take in 1..=corpus.pairs.len() {
            let prefix = uvr_core::CaptionCorpus {
                pairs: corpus.pairs[..take].to_vec(),
                vocab: corpus.vocab.clone(),
                doc_count: corpus.doc_count,
            };
            let table = uvr_core::tilt::build_table(&prefix, &dict, w).unwrap();
            for (topic, old_list) in &previous {
                let new_list = &table.index[topic];
                prop_assert!(new_list.len() >= old_list.len());
                prop_assert_eq!(&new_list[..old_list.len()], old_list.as_slice());
            }
            previous = table.index;
        }
    }
}
