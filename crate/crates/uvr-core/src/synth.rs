//! Deterministic synthetic data: a planted corpus of topic-grouped captions
//! with cluster-structured image features. Used by the parameter sweeps and
//! by tests that need a corpus where the right answers are known by
//! construction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{parse_corpus, CaptionCorpus};
use crate::error::Result;
use crate::features::FeatureTable;

/// Shape of the planted corpus. Caption i (0-based) belongs to topic
/// i / captions_per_topic and is paired with image id i + 1. Every caption
/// carries all of its topic's words plus one caption-unique word, so topics
/// are separable from topic words alone while individual images stay
/// identifiable.
#[derive(Clone, Debug)]
pub struct PlantedSpec {
    pub topics: usize,
    pub captions_per_topic: usize,
    pub topic_words: usize,
    pub d_m: usize,
    /// Within-cluster feature noise, relative to the unit-scale center.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            topics: 10,
            captions_per_topic: 20,
            topic_words: 2,
            d_m: 16,
            noise: 0.5,
            seed: 7,
        }
    }
}

/// A generated corpus with its feature table and the raw JSONL it was
/// parsed from (handy for exercising the real file pipeline).
#[derive(Clone, Debug)]
pub struct Planted {
    pub corpus_jsonl: String,
    pub corpus: CaptionCorpus,
    pub features: FeatureTable,
}

impl Planted {
    pub fn n_captions(&self) -> usize {
        self.corpus.pairs.len()
    }
}

/// Rounds through f32 so the value survives the feature file format exactly.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

pub fn planted(spec: &PlantedSpec) -> Result<Planted> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.topics * spec.captions_per_topic;

    // Cluster centers on the unit-ish shell, then per-image noise.
    let mut centers = Vec::with_capacity(spec.topics);
    for _ in 0..spec.topics {
        let c: Vec<f64> = (0..spec.d_m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        centers.push(c.into_iter().map(|v| v / norm).collect::<Vec<f64>>());
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let t = i / spec.captions_per_topic;
        let row: Vec<f64> = centers[t]
            .iter()
            .map(|&c| f32_exact(c + spec.noise * rng.random_range(-1.0..1.0)))
            .collect();
        rows.push(row);
    }
    let features = FeatureTable::from_rows(rows)?;

    let mut jsonl = String::new();
    for i in 0..n {
        let t = i / spec.captions_per_topic;
        let mut words: Vec<String> = (0..spec.topic_words).map(|j| format!("t{t}w{j}")).collect();
        words.push(format!("u{i}"));
        jsonl.push_str(&format!(
            "{{\"id\": {}, \"text\": \"{}\", \"image_id\": {}}}\n",
            i + 1,
            words.join(" "),
            i + 1
        ));
    }
    let corpus = parse_corpus(&jsonl, &Default::default(), "planted")?;
    Ok(Planted {
        corpus_jsonl: jsonl,
        corpus,
        features,
    })
}
