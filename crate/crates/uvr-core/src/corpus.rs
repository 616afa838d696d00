//! Caption corpus ingestion: JSON-lines parsing, lowercase whitespace
//! tokenization with stopword removal, and a first-occurrence-order
//! vocabulary. Token ids are dense and deterministic for a given corpus,
//! which every downstream artifact depends on.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// One surface form with its vocabulary id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub id: u32,
}

/// A caption after preprocessing. `tokens` keeps corpus order; stopwords and
/// anything that failed tokenization are already gone.
#[derive(Clone, Debug)]
pub struct Sentence {
    pub sent_id: u32,
    pub tokens: Vec<Token>,
    pub raw_text: String,
}

impl Sentence {
    /// Distinct token ids in ascending order.
    pub fn distinct_token_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.tokens.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Pointer to an image: its public id (>= 1) and its row in the feature
/// table. Row 0 of the feature table is the all-zero blank, so the row index
/// equals the id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageRef {
    pub image_id: u32,
    pub feature_row: usize,
}

impl ImageRef {
    pub fn new(image_id: u32) -> Self {
        ImageRef {
            image_id,
            feature_row: image_id as usize,
        }
    }
}

/// Interned vocabulary; ids are assigned in first-occurrence order.
#[derive(Clone, Debug, Default)]
pub struct Vocabulary {
    by_surface: HashMap<String, u32>,
    by_id: Vec<String>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Vocabulary::default()
    }

    pub fn intern(&mut self, surface: &str) -> u32 {
        if let Some(&id) = self.by_surface.get(surface) {
            return id;
        }
        let id = self.by_id.len() as u32;
        self.by_id.push(surface.to_string());
        self.by_surface.insert(surface.to_string(), id);
        id
    }

    pub fn id(&self, surface: &str) -> Option<u32> {
        self.by_surface.get(surface).copied()
    }

    pub fn surface(&self, id: u32) -> Option<&str> {
        self.by_id.get(id as usize).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Surfaces in id order; the serialized form of the vocabulary.
    pub fn surfaces(&self) -> &[String] {
        &self.by_id
    }

    pub fn from_surfaces(surfaces: Vec<String>) -> Result<Self> {
        let mut v = Vocabulary::new();
        for s in &surfaces {
            v.intern(s);
        }
        if v.by_id.len() != surfaces.len() {
            return Err(Error::invalid("vocabulary contains duplicate surfaces"));
        }
        Ok(v)
    }

    /// Tokenizes free text against this vocabulary: lowercase, whitespace
    /// split, keep only known surfaces. Stopwords were never interned, so
    /// they fall out together with out-of-vocabulary words.
    pub fn tokenize_known(&self, text: &str) -> Vec<Token> {
        text.split_whitespace()
            .filter_map(|w| {
                let lower = w.to_lowercase();
                self.id(&lower).map(|id| Token { surface: lower, id })
            })
            .collect()
    }
}

/// The loaded corpus: sentence-image pairs in file order plus the shared
/// vocabulary. Each sentence is one document for TF-IDF purposes, so
/// `doc_count` is the number of pairs.
#[derive(Clone, Debug)]
pub struct CaptionCorpus {
    pub pairs: Vec<(Sentence, ImageRef)>,
    pub vocab: Vocabulary,
    pub doc_count: u32,
}

impl CaptionCorpus {
    /// Largest image id referenced by any pair; 0 for an empty corpus.
    pub fn max_image_id(&self) -> u32 {
        self.pairs.iter().map(|(_, img)| img.image_id).max().unwrap_or(0)
    }
}

#[derive(Deserialize)]
struct RawCaption {
    id: u32,
    text: String,
    image_id: i64,
}

/// Loads newline-separated stopwords, lowercased. Blank lines are ignored.
pub fn load_stopwords(path: &Path) -> Result<BTreeSet<String>> {
    let body = fs::read_to_string(path)?;
    Ok(body
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

/// Loads a JSON-lines caption corpus. Each line is an object with fields
/// `id`, `text`, and `image_id`; blank lines are skipped. Sentence ids must
/// be unique and image ids must be >= 1. A caption whose text is empty after
/// stopword removal is kept (it still counts as a document) with a warning.
pub fn load_corpus(path: &Path, stopwords_path: Option<&Path>) -> Result<CaptionCorpus> {
    let stopwords = match stopwords_path {
        Some(p) => load_stopwords(p)?,
        None => BTreeSet::new(),
    };
    let body = fs::read_to_string(path)?;
    parse_corpus(&body, &stopwords, &path.display().to_string())
}

/// Same as `load_corpus` but over an in-memory body; `name` labels errors.
pub fn parse_corpus(
    body: &str,
    stopwords: &BTreeSet<String>,
    name: &str,
) -> Result<CaptionCorpus> {
    let mut vocab = Vocabulary::new();
    let mut pairs = Vec::new();
    let mut seen_ids = HashSet::new();
    for (idx, line) in body.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawCaption = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: name.to_string(),
            line: lineno,
            message: e.to_string(),
        })?;
        if raw.image_id < 1 {
            return Err(Error::Parse {
                path: name.to_string(),
                line: lineno,
                message: format!("image_id must be >= 1, got {}", raw.image_id),
            });
        }
        if raw.image_id > u32::MAX as i64 {
            return Err(Error::Parse {
                path: name.to_string(),
                line: lineno,
                message: format!("image_id {} out of range", raw.image_id),
            });
        }
        if !seen_ids.insert(raw.id) {
            return Err(Error::Parse {
                path: name.to_string(),
                line: lineno,
                message: format!("duplicate sentence id {}", raw.id),
            });
        }
        let tokens: Vec<Token> = raw
            .text
            .split_whitespace()
            .map(|w| w.to_lowercase())
            .filter(|w| !stopwords.contains(w))
            .map(|w| {
                let id = vocab.intern(&w);
                Token { surface: w, id }
            })
            .collect();
        if tokens.is_empty() {
            log::warn!("{name}:{lineno}: sentence {} has no content tokens", raw.id);
        }
        pairs.push((
            Sentence {
                sent_id: raw.id,
                tokens,
                raw_text: raw.text,
            },
            ImageRef::new(raw.image_id as u32),
        ));
    }
    let doc_count = pairs.len() as u32;
    Ok(CaptionCorpus {
        pairs,
        vocab,
        doc_count,
    })
}
