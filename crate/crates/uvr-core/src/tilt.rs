//! Topic-image lookup: sentence-level TF-IDF scoring, table construction,
//! and frequency-ranked retrieval. Each caption counts as one document.
//! Every ordering ties back to a total deterministic order (score or count
//! first, then ascending id) so builds and retrievals are reproducible.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::corpus::{CaptionCorpus, Sentence, Vocabulary};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};

pub const TABLE_MAGIC: &[u8; 4] = b"UVRT";
pub const TABLE_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// TF-IDF
// ---------------------------------------------------------------------------

/// Corpus-level TF-IDF statistics. `df[t]` counts the documents containing
/// token t; `scores` records the build-time TI value per (token, sentence id)
/// for tokens that occur in that sentence. Retrieval only needs `df` and
/// `doc_count`, so `scores` is not serialized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TfIdfDictionary {
    pub scores: BTreeMap<(u32, u32), f64>,
    pub df: Vec<u32>,
    pub doc_count: u32,
}

impl TfIdfDictionary {
    pub fn df_of(&self, token_id: u32) -> u32 {
        self.df.get(token_id as usize).copied().unwrap_or(0)
    }
}

/// TI for one token in one document: term frequency times
/// ln(doc_count / (1 + df)). Negative values are legitimate and kept.
fn ti_value(occurrences: usize, doc_len: usize, df: u32, doc_count: u32) -> f64 {
    let tf = occurrences as f64 / doc_len as f64;
    tf * (doc_count as f64 / (1.0 + df as f64)).ln()
}

/// Scores every token of every sentence against its sentence-as-document.
pub fn compute_tfidf(corpus: &CaptionCorpus) -> TfIdfDictionary {
    let mut df = vec![0u32; corpus.vocab.len()];
    for (sent, _) in &corpus.pairs {
        for id in sent.distinct_token_ids() {
            df[id as usize] += 1;
        }
    }
    let mut scores = BTreeMap::new();
    for (sent, _) in &corpus.pairs {
        let doc_len = sent.tokens.len();
        if doc_len == 0 {
            continue;
        }
        let mut occ: BTreeMap<u32, usize> = BTreeMap::new();
        for t in &sent.tokens {
            *occ.entry(t.id).or_insert(0) += 1;
        }
        for (id, n) in occ {
            scores.insert(
                (id, sent.sent_id),
                ti_value(n, doc_len, df[id as usize], corpus.doc_count),
            );
        }
    }
    TfIdfDictionary {
        scores,
        df,
        doc_count: corpus.doc_count,
    }
}

// ---------------------------------------------------------------------------
// Topic words
// ---------------------------------------------------------------------------

/// Ranked topic words for one sentence: at most `w` distinct token ids in
/// descending TI order, ties broken by ascending token id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TopicList {
    pub token_ids: Vec<u32>,
    pub scores: Vec<f64>,
}

/// Ranks the sentence's distinct tokens by TI, treating the sentence as a
/// fresh document against the dictionary's frozen df statistics. This makes
/// query-time behavior identical to build-time behavior for corpus
/// sentences, and well defined for unseen sentences.
pub fn topic_words(sentence: &Sentence, dict: &TfIdfDictionary, w: u32) -> TopicList {
    let doc_len = sentence.tokens.len();
    if doc_len == 0 || w == 0 || dict.doc_count == 0 {
        return TopicList::default();
    }
    let mut occ: BTreeMap<u32, usize> = BTreeMap::new();
    for t in &sentence.tokens {
        *occ.entry(t.id).or_insert(0) += 1;
    }
    let mut ranked: Vec<(u32, f64)> = occ
        .into_iter()
        .map(|(id, n)| (id, ti_value(n, doc_len, dict.df_of(id), dict.doc_count)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(w as usize);
    TopicList {
        token_ids: ranked.iter().map(|&(id, _)| id).collect(),
        scores: ranked.iter().map(|&(_, s)| s).collect(),
    }
}

// ---------------------------------------------------------------------------
// Table construction
// ---------------------------------------------------------------------------

/// The lookup table: topic token id to the distinct image ids whose captions
/// ranked that token among their top-w, in corpus insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TopicImageTable {
    pub index: BTreeMap<u32, Vec<u32>>,
    pub w: u32,
}

/// Algorithm: for each (sentence, image) pair in corpus order, compute the
/// sentence's top-w topic words and append the image id to each topic's
/// list unless it is already present.
pub fn build_table(
    corpus: &CaptionCorpus,
    dict: &TfIdfDictionary,
    w: u32,
) -> Result<TopicImageTable> {
    if w == 0 {
        return Err(Error::invalid("topic budget w must be >= 1"));
    }
    let mut index: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (sent, img) in &corpus.pairs {
        for &t in &topic_words(sent, dict, w).token_ids {
            let list = index.entry(t).or_default();
            if !list.contains(&img.image_id) {
                list.push(img.image_id);
            }
        }
    }
    Ok(TopicImageTable { index, w })
}

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

/// Retrieval result shared by both retrieval paths. `scores` runs parallel
/// to `images`: whole-number occurrence counts for table retrieval, cosine
/// similarities for embedding retrieval. The blank sentinel (images = [0],
/// score 0) stands for "nothing retrieved"; downstream fusion maps id 0 to
/// the all-zero feature row.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedImages {
    pub images: Vec<u32>,
    pub scores: Vec<f64>,
    pub budget: usize,
}

impl RankedImages {
    pub fn sentinel(budget: usize) -> Self {
        RankedImages {
            images: vec![0],
            scores: vec![0.0],
            budget,
        }
    }

    pub fn is_sentinel(&self) -> bool {
        self.images == [0]
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Gathers the image lists of the sentence's topic words, counts how many
/// lists each image appears in, and returns the top-m by (count desc,
/// image id asc). Tokens absent from the table contribute nothing; if
/// nothing matches at all the blank sentinel comes back.
pub fn retrieve_tilt(
    sentence: &Sentence,
    table: &TopicImageTable,
    dict: &TfIdfDictionary,
    w: u32,
    m: usize,
) -> Result<RankedImages> {
    if m == 0 {
        return Err(Error::invalid("retrieval budget m must be >= 1"));
    }
    let topics = topic_words(sentence, dict, w);
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for t in &topics.token_ids {
        if let Some(list) = table.index.get(t) {
            for &img in list {
                *counts.entry(img).or_insert(0) += 1;
            }
        }
    }
    if counts.is_empty() {
        return Ok(RankedImages::sentinel(m));
    }
    let mut ranked: Vec<(u32, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(m);
    Ok(RankedImages {
        images: ranked.iter().map(|&(id, _)| id).collect(),
        scores: ranked.iter().map(|&(_, c)| c as f64).collect(),
        budget: m,
    })
}

// ---------------------------------------------------------------------------
// Serialized model
// ---------------------------------------------------------------------------

/// Everything retrieval needs in one artifact: the vocabulary (to tokenize
/// queries), the frozen df statistics, and the topic-image index.
#[derive(Clone, Debug)]
pub struct TiltModel {
    pub vocab: Vocabulary,
    pub dict: TfIdfDictionary,
    pub table: TopicImageTable,
}

impl TiltModel {
    pub fn build(corpus: &CaptionCorpus, w: u32) -> Result<Self> {
        let dict = compute_tfidf(corpus);
        let table = build_table(corpus, &dict, w)?;
        Ok(TiltModel {
            vocab: corpus.vocab.clone(),
            dict,
            table,
        })
    }

    /// Tokenizes and retrieves for free text using the model's own budget
    /// unless overridden.
    pub fn retrieve_text(&self, text: &str, w: Option<u32>, m: usize) -> Result<RankedImages> {
        let tokens = self.vocab.tokenize_known(text);
        let sentence = Sentence {
            sent_id: 0,
            tokens,
            raw_text: text.to_string(),
        };
        retrieve_tilt(
            &sentence,
            &self.table,
            &self.dict,
            w.unwrap_or(self.table.w),
            m,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut wtr = ByteWriter::new(TABLE_MAGIC, TABLE_VERSION);
        wtr.put_u32(self.table.w);
        wtr.put_u32(self.dict.doc_count);
        wtr.put_u64(self.vocab.len() as u64);
        for s in self.vocab.surfaces() {
            wtr.put_string(s);
        }
        wtr.put_u64(self.dict.df.len() as u64);
        for &d in &self.dict.df {
            wtr.put_u32(d);
        }
        wtr.put_u64(self.table.index.len() as u64);
        for (&token, images) in &self.table.index {
            wtr.put_u32(token);
            wtr.put_u64(images.len() as u64);
            for &img in images {
                wtr.put_u32(img);
            }
        }
        wtr.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8], name: &str) -> Result<Self> {
        let mut r = ByteReader::open(bytes, name, TABLE_MAGIC, TABLE_VERSION)?;
        let w = r.get_u32()?;
        let doc_count = r.get_u32()?;
        let vocab_len = r.get_count(9)?; // 8-byte length prefix + >=1 byte
        let mut surfaces = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            surfaces.push(r.get_string()?);
        }
        let vocab = Vocabulary::from_surfaces(surfaces)
            .map_err(|e| Error::format(format!("{name}: {e}")))?;
        let df_len = r.get_count(4)?;
        if df_len != vocab.len() {
            return Err(Error::format(format!(
                "{name}: df length {} does not match vocabulary size {}",
                df_len,
                vocab.len()
            )));
        }
        let mut df = Vec::with_capacity(df_len);
        for _ in 0..df_len {
            let d = r.get_u32()?;
            if d > doc_count {
                return Err(Error::format(format!(
                    "{name}: df {} exceeds document count {}",
                    d, doc_count
                )));
            }
            df.push(d);
        }
        let topic_count = r.get_count(12)?; // token id + list length at minimum
        let mut index = BTreeMap::new();
        let mut last_token: Option<u32> = None;
        for _ in 0..topic_count {
            let token = r.get_u32()?;
            if token as usize >= vocab.len() {
                return Err(Error::format(format!(
                    "{name}: topic token id {} outside vocabulary",
                    token
                )));
            }
            if let Some(prev) = last_token {
                if token <= prev {
                    return Err(Error::format(format!(
                        "{name}: topic ids out of order ({prev} then {token})"
                    )));
                }
            }
            last_token = Some(token);
            let n = r.get_count(4)?;
            let mut images = Vec::with_capacity(n);
            for _ in 0..n {
                let img = r.get_u32()?;
                if img == 0 {
                    return Err(Error::format(format!(
                        "{name}: image id 0 inside topic list"
                    )));
                }
                images.push(img);
            }
            index.insert(token, images);
        }
        r.finish()?;
        Ok(TiltModel {
            vocab,
            dict: TfIdfDictionary {
                scores: BTreeMap::new(),
                df,
                doc_count,
            },
            table: TopicImageTable { index, w },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_corpus;
    use std::collections::BTreeSet;

    // Three captions over images 1..3; the running example everywhere below.
    fn demo_corpus() -> CaptionCorpus {
        let body = concat!(
            r#"{"id": 1, "text": "dog park", "image_id": 1}"#,
            "\n",
            r#"{"id": 2, "text": "dog ball", "image_id": 2}"#,
            "\n",
            r#"{"id": 3, "text": "cat ball", "image_id": 3}"#,
        );
        parse_corpus(body, &BTreeSet::new(), "mem").unwrap()
    }

    fn id_of(corpus: &CaptionCorpus, surface: &str) -> u32 {
        corpus.vocab.id(surface).unwrap()
    }

    #[test]
    fn tfidf_frozen_examples() {
        let corpus = demo_corpus();
        let dict = compute_tfidf(&corpus);
        let dog = id_of(&corpus, "dog");
        let cat = id_of(&corpus, "cat");
        // dog appears in 2 of 3 docs: 0.5 * ln(3/3) = 0.
        assert_eq!(dict.scores[&(dog, 1)], 0.0);
        // cat appears in 1 of 3 docs: 0.5 * ln(3/2).
        let expect = 0.5 * (3.0f64 / 2.0).ln();
        assert!((dict.scores[&(cat, 3)] - expect).abs() < 1e-15);
        assert!((dict.scores[&(cat, 3)] - 0.2027).abs() < 1e-4);
    }

    #[test]
    fn tfidf_single_doc_is_negative() {
        let body = r#"{"id": 1, "text": "dog", "image_id": 1}"#;
        let corpus = parse_corpus(body, &BTreeSet::new(), "mem").unwrap();
        let dict = compute_tfidf(&corpus);
        let ti = dict.scores[&(0, 1)];
        assert!((ti - (1.0f64 / 2.0).ln()).abs() < 1e-15);
        assert!((ti + 0.6931).abs() < 1e-4, "got {ti}");
    }

    #[test]
    fn tfidf_skips_empty_documents() {
        let body = concat!(
            r#"{"id": 1, "text": "", "image_id": 1}"#,
            "\n",
            r#"{"id": 2, "text": "dog", "image_id": 2}"#,
        );
        let corpus = parse_corpus(body, &BTreeSet::new(), "mem").unwrap();
        let dict = compute_tfidf(&corpus);
        assert!(dict.scores.keys().all(|&(_, doc)| doc == 2));
        assert_eq!(dict.doc_count, 2);
    }

    #[test]
    fn topic_words_returns_all_when_budget_exceeds_candidates() {
        let corpus = demo_corpus();
        let dict = compute_tfidf(&corpus);
        let topics = topic_words(&corpus.pairs[0].0, &dict, 8);
        assert_eq!(topics.token_ids.len(), 2);
    }

    #[test]
    fn topic_words_breaks_ties_by_ascending_token_id() {
        let corpus = demo_corpus();
        let dict = compute_tfidf(&corpus);
        // g2 = [dog, ball]: both have TI 0, dog has the lower id.
        let topics = topic_words(&corpus.pairs[1].0, &dict, 2);
        let dog = id_of(&corpus, "dog");
        let ball = id_of(&corpus, "ball");
        assert!(dog < ball);
        assert_eq!(topics.token_ids, vec![dog, ball]);
    }

    #[test]
    fn topic_words_w1_prefers_rare_token() {
        let corpus = demo_corpus();
        let dict = compute_tfidf(&corpus);
        // g3 = [cat, ball]: cat (~0.2027) beats ball (0).
        let topics = topic_words(&corpus.pairs[2].0, &dict, 1);
        assert_eq!(topics.token_ids, vec![id_of(&corpus, "cat")]);
    }

    #[test]
    fn topic_words_of_empty_sentence_is_empty() {
        let corpus = demo_corpus();
        let dict = compute_tfidf(&corpus);
        let empty = Sentence {
            sent_id: 99,
            tokens: vec![],
            raw_text: String::new(),
        };
        assert!(topic_words(&empty, &dict, 8).token_ids.is_empty());
    }

    #[test]
    fn build_table_collects_and_dedups() {
        let corpus = demo_corpus();
        let dict = compute_tfidf(&corpus);
        let table = build_table(&corpus, &dict, 2).unwrap();
        let dog = id_of(&corpus, "dog");
        assert_eq!(table.index[&dog], vec![1, 2]);

        // Same image twice under one topic stays a single entry.
        let body = concat!(
            r#"{"id": 1, "text": "dog park", "image_id": 7}"#,
            "\n",
            r#"{"id": 2, "text": "dog ball", "image_id": 7}"#,
        );
        let corpus2 = parse_corpus(body, &BTreeSet::new(), "mem").unwrap();
        let dict2 = compute_tfidf(&corpus2);
        let table2 = build_table(&corpus2, &dict2, 2).unwrap();
        let dog2 = corpus2.vocab.id("dog").unwrap();
        assert_eq!(table2.index[&dog2], vec![7]);
    }

    #[test]
    fn retrieve_counts_and_orders() {
        // Table {a: [1,2], b: [2,3]} with both topics active and m = 2:
        // image 2 occurs twice, images 1 and 3 once; 1 wins the tie by id.
        let mut index = BTreeMap::new();
        index.insert(0, vec![1, 2]);
        index.insert(1, vec![2, 3]);
        let table = TopicImageTable { index, w: 2 };
        let dict = TfIdfDictionary {
            scores: BTreeMap::new(),
            df: vec![1, 1],
            doc_count: 2,
        };
        let sentence = Sentence {
            sent_id: 0,
            tokens: vec![
                Token {
                    surface: "a".into(),
                    id: 0,
                },
                Token {
                    surface: "b".into(),
                    id: 1,
                },
            ],
            raw_text: "a b".into(),
        };
        let out = retrieve_tilt(&sentence, &table, &dict, 2, 2).unwrap();
        assert_eq!(out.images, vec![2, 1]);
        assert_eq!(out.scores, vec![2.0, 1.0]);
    }

    use crate::corpus::Token;

    #[test]
    fn retrieve_sentinel_when_nothing_matches() {
        let corpus = demo_corpus();
        let model = TiltModel::build(&corpus, 2).unwrap();
        let out = model.retrieve_text("submarine telescope", None, 5).unwrap();
        assert!(out.is_sentinel());
        assert_eq!(out.images, vec![0]);
    }

    #[test]
    fn retrieve_caps_at_available_candidates() {
        let corpus = demo_corpus();
        let model = TiltModel::build(&corpus, 2).unwrap();
        let out = model.retrieve_text("dog park", None, 10).unwrap();
        assert!(out.images.len() <= 3);
        assert!(!out.images.contains(&0));
    }

    #[test]
    fn retrieval_never_leaves_the_build_time_table() {
        let corpus = demo_corpus();
        let model = TiltModel::build(&corpus, 2).unwrap();
        let known: Vec<u32> = model
            .table
            .index
            .values()
            .flat_map(|v| v.iter().copied())
            .collect();
        let out = model.retrieve_text("dog ball cat park", None, 10).unwrap();
        for id in &out.images {
            assert!(known.contains(id));
        }
    }

    #[test]
    fn incremental_build_only_appends() {
        // With the dictionary fixed, processing one more pair can only
        // append to topic lists, never remove.
        let body = concat!(
            r#"{"id": 1, "text": "dog park", "image_id": 1}"#,
            "\n",
            r#"{"id": 2, "text": "dog ball", "image_id": 2}"#,
            "\n",
            r#"{"id": 3, "text": "cat ball", "image_id": 3}"#,
            "\n",
            r#"{"id": 4, "text": "zebra fence", "image_id": 4}"#,
        );
        let full = parse_corpus(body, &BTreeSet::new(), "mem").unwrap();
        let dict = compute_tfidf(&full);
        let mut head = full.clone();
        head.pairs.truncate(3);
        let before = build_table(&head, &dict, 2).unwrap();
        let after = build_table(&full, &dict, 2).unwrap();
        for (token, list) in &before.index {
            let grown = &after.index[token];
            assert!(grown.len() >= list.len());
            assert_eq!(&grown[..list.len()], &list[..]);
        }
    }

    #[test]
    fn model_round_trip_is_byte_identical() {
        let corpus = demo_corpus();
        let model = TiltModel::build(&corpus, 2).unwrap();
        let bytes = model.to_bytes();
        let back = TiltModel::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.table, model.table);
        assert_eq!(back.dict.df, model.dict.df);
        assert_eq!(back.dict.doc_count, model.dict.doc_count);
        assert_eq!(back.vocab.surfaces(), model.vocab.surfaces());
    }

    #[test]
    fn model_rejects_corrupted_length_field() {
        let corpus = demo_corpus();
        let model = TiltModel::build(&corpus, 2).unwrap();
        let mut bytes = model.to_bytes();
        // Vocabulary count lives right after magic, version, w, doc_count.
        let pos = 4 + 4 + 4 + 4;
        bytes[pos..pos + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(TiltModel::from_bytes(&bytes, "mem").is_err());
    }

    #[test]
    fn model_rejects_foreign_version() {
        let corpus = demo_corpus();
        let model = TiltModel::build(&corpus, 2).unwrap();
        let mut bytes = model.to_bytes();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        let err = TiltModel::from_bytes(&bytes, "mem").unwrap_err();
        assert!(matches!(err, Error::Version { found: 9, .. }));
    }

    #[test]
    fn two_builds_are_byte_identical() {
        let a = TiltModel::build(&demo_corpus(), 2).unwrap().to_bytes();
        let b = TiltModel::build(&demo_corpus(), 2).unwrap().to_bytes();
        assert_eq!(a, b);
    }
}
