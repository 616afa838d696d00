//! Joint text-image embedding: mean-pooled token embeddings and projected
//! image features meet in one unit-norm space, trained with a margin-based
//! triplet loss over mined hard negatives. Gradients are hand-derived and
//! audited against finite differences; with unit-norm outputs, dot product
//! and cosine similarity coincide.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CaptionCorpus, Sentence, Vocabulary};
use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::io::{ByteReader, ByteWriter};
use crate::tensor::{dot, finite_diff_grad, l2_norm, outer, GradCheckEntry, Matrix, FD_STEP};
use crate::tilt::RankedImages;

pub const INDEX_MAGIC: &[u8; 4] = b"UVRE";
pub const INDEX_VERSION: u32 = 1;

/// Unit-norm tolerance for indexed embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Text path: token embedding rows, mean-pooled, then one affine layer into
/// the joint space. The token embedding width equals the joint dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedParams {
    pub token_table: Matrix,
    pub proj_t: Matrix,
    pub bias_t: Vec<f64>,
}

/// Image path: one affine layer from ingested feature space into the joint
/// space.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedParams {
    pub proj_i: Matrix,
    pub bias_i: Vec<f64>,
}

/// Both paths bundled; everything the triplet objective differentiates.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedParams {
    pub text: TextEmbedParams,
    pub image: ImageEmbedParams,
}

impl EmbedParams {
    /// Seeded uniform(-0.1, 0.1) initialization. Draw order is fixed, so a
    /// seed pins every parameter bit.
    pub fn init(vocab_size: usize, d_m: usize, d_e: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let token_table = Matrix::uniform(vocab_size, d_e, -0.1, 0.1, &mut rng);
        let proj_t = Matrix::uniform(d_e, d_e, -0.1, 0.1, &mut rng);
        let bias_t = Matrix::uniform(1, d_e, -0.1, 0.1, &mut rng).data().to_vec();
        let proj_i = Matrix::uniform(d_m, d_e, -0.1, 0.1, &mut rng);
        let bias_i = Matrix::uniform(1, d_e, -0.1, 0.1, &mut rng).data().to_vec();
        EmbedParams {
            text: TextEmbedParams {
                token_table,
                proj_t,
                bias_t,
            },
            image: ImageEmbedParams { proj_i, bias_i },
        }
    }

    pub fn d_e(&self) -> usize {
        self.text.proj_t.cols()
    }

    pub fn d_m(&self) -> usize {
        self.image.proj_i.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.text.token_table.rows()
    }
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

fn normalize(v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let n = l2_norm(&v);
    if n == 0.0 {
        return Err(Error::numeric(format!(
            "{what}: embedding collapsed to the zero vector"
        )));
    }
    if !n.is_finite() {
        return Err(Error::numeric(format!("{what}: non-finite embedding")));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

/// Mean token embedding, affine projection, L2 normalization.
pub fn embed_text(sentence: &Sentence, params: &TextEmbedParams) -> Result<Vec<f64>> {
    if sentence.tokens.is_empty() {
        return Err(Error::invalid(format!(
            "sentence {} has no tokens to embed",
            sentence.sent_id
        )));
    }
    let (v, d_t) = (params.token_table.rows(), params.token_table.cols());
    let mut u = vec![0.0; d_t];
    for t in &sentence.tokens {
        if t.id as usize >= v {
            return Err(Error::invalid(format!(
                "token id {} outside embedding table of {} rows",
                t.id, v
            )));
        }
        for (acc, &x) in u.iter_mut().zip(params.token_table.row(t.id as usize)) {
            *acc += x;
        }
    }
    let inv = 1.0 / sentence.tokens.len() as f64;
    for x in u.iter_mut() {
        *x *= inv;
    }
    let a = affine(&u, &params.proj_t, &params.bias_t);
    normalize(a, "text")
}

/// Affine projection then L2 normalization.
pub fn embed_image(feature: &[f64], params: &ImageEmbedParams) -> Result<Vec<f64>> {
    if feature.len() != params.proj_i.rows() {
        return Err(Error::invalid(format!(
            "feature of dimension {} does not match projection {}x{}",
            feature.len(),
            params.proj_i.rows(),
            params.proj_i.cols()
        )));
    }
    let a = affine(feature, &params.proj_i, &params.bias_i);
    normalize(a, "image")
}

/// Row vector times matrix plus bias.
fn affine(x: &[f64], w: &Matrix, b: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Triplet loss and gradients
// ---------------------------------------------------------------------------

/// Margin loss max(0, gamma - x.y + x.z) for unit vectors x, y, z.
pub fn triplet_loss(x: &[f64], y: &[f64], z: &[f64], gamma: f64) -> f64 {
    (gamma - dot(x, y) + dot(x, z)).max(0.0)
}

/// Gradients of the triplet objective, same shapes as the parameters.
#[derive(Clone, Debug)]
pub struct EmbedGrads {
    pub token_table: Matrix,
    pub proj_t: Matrix,
    pub bias_t: Vec<f64>,
    pub proj_i: Matrix,
    pub bias_i: Vec<f64>,
}

impl EmbedGrads {
    pub fn zeros(params: &EmbedParams) -> Self {
        EmbedGrads {
            token_table: Matrix::zeros(
                params.text.token_table.rows(),
                params.text.token_table.cols(),
            ),
            proj_t: Matrix::zeros(params.text.proj_t.rows(), params.text.proj_t.cols()),
            bias_t: vec![0.0; params.text.bias_t.len()],
            proj_i: Matrix::zeros(params.image.proj_i.rows(), params.image.proj_i.cols()),
            bias_i: vec![0.0; params.image.bias_i.len()],
        }
    }

    fn scale(&mut self, s: f64) {
        for v in self.token_table.data_mut() {
            *v *= s;
        }
        for v in self.proj_t.data_mut() {
            *v *= s;
        }
        for v in self.bias_t.iter_mut() {
            *v *= s;
        }
        for v in self.proj_i.data_mut() {
            *v *= s;
        }
        for v in self.bias_i.iter_mut() {
            *v *= s;
        }
    }
}

/// Backs the gradient of the loss through L2 normalization: given the
/// pre-normalization vector `a` with unit image `x = a/|a|` and upstream
/// `dx`, returns `da = (dx - (x.dx) x) / |a|`.
fn normalize_backward(a: &[f64], x: &[f64], dx: &[f64]) -> Vec<f64> {
    let r = l2_norm(a);
    let proj = dot(x, dx);
    x.iter()
        .zip(dx)
        .map(|(&xi, &dxi)| (dxi - proj * xi) / r)
        .collect()
}

/// Loss and analytic gradients for one fixed triplet (the mined negative is
/// treated as a constant choice). Inactive hinge (including exactly at the
/// kink) contributes zero gradient.
pub fn triplet_grads(
    sentence: &Sentence,
    f_pos: &[f64],
    f_neg: &[f64],
    params: &EmbedParams,
    gamma: f64,
    grads: &mut EmbedGrads,
) -> Result<f64> {
    // Forward with cached pre-normalization vectors.
    let n_tokens = sentence.tokens.len();
    if n_tokens == 0 {
        return Err(Error::invalid("cannot form a triplet on an empty sentence"));
    }
    let d_t = params.text.token_table.cols();
    let mut u = vec![0.0; d_t];
    for t in &sentence.tokens {
        for (acc, &v) in u.iter_mut().zip(params.text.token_table.row(t.id as usize)) {
            *acc += v;
        }
    }
    for v in u.iter_mut() {
        *v /= n_tokens as f64;
    }
    let a_x = affine(&u, &params.text.proj_t, &params.text.bias_t);
    let x = normalize(a_x.clone(), "text")?;
    let a_y = affine(f_pos, &params.image.proj_i, &params.image.bias_i);
    let y = normalize(a_y.clone(), "image")?;
    let a_z = affine(f_neg, &params.image.proj_i, &params.image.bias_i);
    let z = normalize(a_z.clone(), "image")?;

    let slack = gamma - dot(&x, &y) + dot(&x, &z);
    if slack <= 0.0 {
        return Ok(0.0);
    }

    // dL/dx = z - y, dL/dy = -x, dL/dz = +x, each through its normalization.
    let dx: Vec<f64> = z.iter().zip(&y).map(|(&zi, &yi)| zi - yi).collect();
    let da_x = normalize_backward(&a_x, &x, &dx);
    for (g, &v) in grads.bias_t.iter_mut().zip(&da_x) {
        *g += v;
    }
    grads.proj_t.add_in_place(&outer(&u, &da_x))?;
    // du = proj_t . da_x, then spread over the sentence's tokens.
    let mut du = vec![0.0; d_t];
    for (i, g) in du.iter_mut().enumerate() {
        *g = dot(params.text.proj_t.row(i), &da_x);
    }
    let inv = 1.0 / n_tokens as f64;
    for t in &sentence.tokens {
        let row = grads.token_table.row_mut(t.id as usize);
        for (g, &v) in row.iter_mut().zip(&du) {
            *g += v * inv;
        }
    }

    let dy: Vec<f64> = x.iter().map(|&v| -v).collect();
    let da_y = normalize_backward(&a_y, &y, &dy);
    for (g, &v) in grads.bias_i.iter_mut().zip(&da_y) {
        *g += v;
    }
    grads.proj_i.add_in_place(&outer(f_pos, &da_y))?;

    let dz = x.clone();
    let da_z = normalize_backward(&a_z, &z, &dz);
    for (g, &v) in grads.bias_i.iter_mut().zip(&da_z) {
        *g += v;
    }
    grads.proj_i.add_in_place(&outer(f_neg, &da_z))?;

    Ok(slack)
}

/// Finite-difference audit of `triplet_grads` on a random seeded fixture:
/// one entry per parameter tensor with its worst relative error. Fixtures at
/// the hinge kink are resampled (the loss is not differentiable there).
pub fn gradcheck_triplet(seed: u64) -> Result<Vec<GradCheckEntry>> {
    use rand::Rng;

    const KINK_GUARD: f64 = 1e-3;
    let vocab_size = 6;
    let d_m = 4;
    let d_e = 3;
    let gamma = 0.2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7419_1e75);
    let sent = Sentence {
        sent_id: 1,
        raw_text: String::new(),
        tokens: [0u32, 2, 2, 5]
            .iter()
            .map(|&id| crate::corpus::Token {
                id,
                surface: format!("t{id}"),
            })
            .collect(),
    };

    let mut fixture = None;
    for _ in 0..64 {
        let pseed: u64 = rng.random_range(0..1_000_000);
        let params = EmbedParams::init(vocab_size, d_m, d_e, pseed);
        let f_pos: Vec<f64> = (0..d_m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f_neg: Vec<f64> = (0..d_m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = embed_text(&sent, &params.text)?;
        let y = embed_image(&f_pos, &params.image)?;
        let z = embed_image(&f_neg, &params.image)?;
        if (gamma - dot(&x, &y) + dot(&x, &z)).abs() >= KINK_GUARD {
            fixture = Some((params, f_pos, f_neg));
            break;
        }
    }
    let (params, f_pos, f_neg) = fixture
        .ok_or_else(|| Error::numeric("no triplet fixture clear of the hinge kink in 64 draws"))?;

    let mut grads = EmbedGrads::zeros(&params);
    triplet_grads(&sent, &f_pos, &f_neg, &params, gamma, &mut grads)?;
    let loss_with = |p: &EmbedParams| {
        let mut g = EmbedGrads::zeros(p);
        triplet_grads(&sent, &f_pos, &f_neg, p, gamma, &mut g).unwrap()
    };

    let slots: Vec<(&'static str, Vec<f64>, Vec<f64>)> = vec![
        (
            "cmrm.token_table",
            grads.token_table.data().to_vec(),
            finite_diff_grad(
                |t| {
                    let mut p = params.clone();
                    p.text.token_table =
                        Matrix::from_vec(vocab_size, d_e, t.to_vec()).unwrap();
                    loss_with(&p)
                },
                params.text.token_table.data(),
                FD_STEP,
            ),
        ),
        (
            "cmrm.proj_t",
            grads.proj_t.data().to_vec(),
            finite_diff_grad(
                |t| {
                    let mut p = params.clone();
                    p.text.proj_t = Matrix::from_vec(d_e, d_e, t.to_vec()).unwrap();
                    loss_with(&p)
                },
                params.text.proj_t.data(),
                FD_STEP,
            ),
        ),
        (
            "cmrm.bias_t",
            grads.bias_t.clone(),
            finite_diff_grad(
                |t| {
                    let mut p = params.clone();
                    p.text.bias_t = t.to_vec();
                    loss_with(&p)
                },
                &params.text.bias_t,
                FD_STEP,
            ),
        ),
        (
            "cmrm.proj_i",
            grads.proj_i.data().to_vec(),
            finite_diff_grad(
                |t| {
                    let mut p = params.clone();
                    p.image.proj_i = Matrix::from_vec(d_m, d_e, t.to_vec()).unwrap();
                    loss_with(&p)
                },
                params.image.proj_i.data(),
                FD_STEP,
            ),
        ),
        (
            "cmrm.bias_i",
            grads.bias_i.clone(),
            finite_diff_grad(
                |t| {
                    let mut p = params.clone();
                    p.image.bias_i = t.to_vec();
                    loss_with(&p)
                },
                &params.image.bias_i,
                FD_STEP,
            ),
        ),
    ];
    Ok(slots
        .into_iter()
        .map(|(tensor, analytic, numeric)| GradCheckEntry {
            tensor,
            rel_err: crate::tensor::max_relative_error(&analytic, &numeric, 1e-6),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Index and retrieval
// ---------------------------------------------------------------------------

/// Trained joint space: one unit-norm row per image id 1..=n plus the
/// parameters that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbeddingIndex {
    pub image_vecs: Matrix,
    pub params: EmbedParams,
    pub gamma: f64,
    pub delta_default: f64,
    pub seed: u64,
}

impl JointEmbeddingIndex {
    pub fn n_images(&self) -> u32 {
        self.image_vecs.rows() as u32
    }

    /// Row for image id (1-based).
    pub fn image_vec(&self, image_id: u32) -> Result<&[f64]> {
        if image_id == 0 || image_id as usize > self.image_vecs.rows() {
            return Err(Error::invalid(format!(
                "image id {} not in index (1..={})",
                image_id,
                self.image_vecs.rows()
            )));
        }
        Ok(self.image_vecs.row(image_id as usize - 1))
    }

    fn validate(&self) -> Result<()> {
        for r in 0..self.image_vecs.rows() {
            let n = l2_norm(self.image_vecs.row(r));
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::numeric(format!(
                    "index row {} has norm {} (unit required)",
                    r, n
                )));
            }
        }
        Ok(())
    }
}

/// Argmax cosine over the non-excluded images; ties go to the lowest id.
pub fn mine_hard_negative(
    x: &[f64],
    positives_excluded: &BTreeSet<u32>,
    index: &JointEmbeddingIndex,
) -> Result<u32> {
    let mut best: Option<(f64, u32)> = None;
    for id in 1..=index.n_images() {
        if positives_excluded.contains(&id) {
            continue;
        }
        let sim = dot(x, index.image_vec(id)?);
        if best.map_or(true, |(bs, _)| sim > bs) {
            best = Some((sim, id));
        }
    }
    best.map(|(_, id)| id).ok_or_else(|| {
        Error::invalid("every indexed image is associated with the query; no negative exists")
    })
}

/// Cosine retrieval: keep images with similarity >= delta, order by
/// (similarity desc, id asc), truncate to m. An empty sentence or an empty
/// survivor set yields the blank sentinel.
pub fn retrieve_cmrm(
    sentence: &Sentence,
    index: &JointEmbeddingIndex,
    delta: f64,
    m: usize,
) -> Result<RankedImages> {
    if m == 0 {
        return Err(Error::invalid("retrieval budget m must be >= 1"));
    }
    if sentence.tokens.is_empty() {
        return Ok(RankedImages::sentinel(m));
    }
    let x = embed_text(sentence, &index.params.text)?;
    let mut survivors: Vec<(u32, f64)> = Vec::new();
    for id in 1..=index.n_images() {
        let sim = dot(&x, index.image_vec(id)?);
        if sim >= delta {
            survivors.push((id, sim));
        }
    }
    if survivors.is_empty() {
        return Ok(RankedImages::sentinel(m));
    }
    survivors.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    survivors.truncate(m);
    Ok(RankedImages {
        images: survivors.iter().map(|&(id, _)| id).collect(),
        scores: survivors.iter().map(|&(_, s)| s).collect(),
        budget: m,
    })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Knobs for `train`. `holdout_every = k` holds out every k-th pair for the
/// recall evaluation (0 evaluates on the training pairs themselves, the
/// right setting for memorization-style checks).
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: u32,
    pub lr: f64,
    pub gamma: f64,
    pub batch: usize,
    pub seed: u64,
    pub d_e: usize,
    pub global_mining: bool,
    pub holdout_every: u32,
    pub recall_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 2.0,
            gamma: 0.2,
            batch: 8,
            seed: 42,
            d_e: 64,
            global_mining: false,
            holdout_every: 0,
            recall_k: 5,
        }
    }
}

/// Training trajectory and final quality.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub recall_at_k: f64,
    pub recall_k: usize,
    pub eval_pairs: usize,
    pub seed: u64,
}

/// Plain SGD on the mean triplet loss. Hard negatives are re-mined for every
/// batch against the current parameters, from the batch's own images by
/// default or from all images with `global_mining`. Entirely deterministic
/// for a fixed seed.
pub fn train(
    corpus: &CaptionCorpus,
    features: &FeatureTable,
    cfg: &TrainConfig,
) -> Result<(JointEmbeddingIndex, TrainReport)> {
    if cfg.batch == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    if cfg.epochs > 0 && !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::invalid("learning rate must be finite and >= 0"));
    }
    let n_images = features.n_images();
    if corpus.max_image_id() > n_images {
        return Err(Error::invalid(format!(
            "corpus references image id {} but the feature table holds 1..={}",
            corpus.max_image_id(),
            n_images
        )));
    }
    if n_images < 2 {
        return Err(Error::invalid(
            "training needs at least two images to form triplets",
        ));
    }

    // Usable pairs: sentences that still have tokens after filtering.
    let usable: Vec<usize> = corpus
        .pairs
        .iter()
        .enumerate()
        .filter(|(_, (s, _))| !s.tokens.is_empty())
        .map(|(i, _)| i)
        .collect();
    if usable.is_empty() {
        return Err(Error::invalid("no non-empty sentences to train on"));
    }
    for (i, skipped) in corpus
        .pairs
        .iter()
        .enumerate()
        .filter(|(_, (s, _))| s.tokens.is_empty())
    {
        log::warn!(
            "skipping pair {} (sentence {}): empty after filtering",
            i,
            skipped.0.sent_id
        );
    }

    let (train_idx, eval_idx): (Vec<usize>, Vec<usize>) = if cfg.holdout_every > 1 {
        let k = cfg.holdout_every as usize;
        let eval: Vec<usize> = usable
            .iter()
            .enumerate()
            .filter(|(pos, _)| pos % k == k - 1)
            .map(|(_, &i)| i)
            .collect();
        let tr: Vec<usize> = usable
            .iter()
            .enumerate()
            .filter(|(pos, _)| pos % k != k - 1)
            .map(|(_, &i)| i)
            .collect();
        if tr.is_empty() || eval.is_empty() {
            return Err(Error::invalid("holdout split left a side empty"));
        }
        (tr, eval)
    } else {
        (usable.clone(), usable.clone())
    };

    // Images associated with each exact token sequence; mining never offers
    // these as negatives.
    let mut assoc: HashMap<Vec<u32>, BTreeSet<u32>> = HashMap::new();
    for &i in &usable {
        let (sent, img) = &corpus.pairs[i];
        assoc
            .entry(sent.tokens.iter().map(|t| t.id).collect())
            .or_default()
            .insert(img.image_id);
    }

    let mut params = EmbedParams::init(corpus.vocab.len(), features.dim(), cfg.d_e, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order = train_idx.clone();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs as usize);

    let global_pool: Vec<u32> = (1..=n_images).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        let mut total_triplets = 0usize;
        for (batch_no, batch) in order.chunks(cfg.batch).enumerate() {
            // Embed the negative candidate pool once per batch.
            let pool: Vec<u32> = if cfg.global_mining {
                global_pool.clone()
            } else {
                let mut ids: Vec<u32> =
                    batch.iter().map(|&i| corpus.pairs[i].1.image_id).collect();
                ids.sort_unstable();
                ids.dedup();
                ids
            };
            let mut pool_vecs: Vec<(u32, Vec<f64>)> = Vec::with_capacity(pool.len());
            for &id in &pool {
                pool_vecs.push((id, embed_image(features.row(id)?, &params.image)?));
            }

            let mut grads = EmbedGrads::zeros(&params);
            let mut batch_loss = 0.0;
            let mut batch_triplets = 0usize;
            for &i in batch {
                let (sent, img) = &corpus.pairs[i];
                let x = embed_text(sent, &params.text)?;
                let key: Vec<u32> = sent.tokens.iter().map(|t| t.id).collect();
                let excluded = &assoc[&key];
                // Hard negative: highest-similarity pool image not
                // associated with this text; ascending scan keeps the
                // lowest id on ties.
                let mut best: Option<(f64, u32)> = None;
                for (id, vec) in &pool_vecs {
                    if excluded.contains(id) {
                        continue;
                    }
                    let sim = dot(&x, vec);
                    if best.map_or(true, |(bs, _)| sim > bs) {
                        best = Some((sim, *id));
                    }
                }
                let Some((_, neg_id)) = best else {
                    continue; // batch offered no legal negative
                };
                let loss = triplet_grads(
                    sent,
                    features.row(img.image_id)?,
                    features.row(neg_id)?,
                    &params,
                    cfg.gamma,
                    &mut grads,
                )?;
                if !loss.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite loss at epoch {}, batch {}",
                        epoch, batch_no
                    )));
                }
                batch_loss += loss;
                batch_triplets += 1;
            }
            if batch_triplets == 0 {
                continue;
            }
            // Mean loss over the batch's triplets, one SGD step.
            grads.scale(1.0 / batch_triplets as f64);
            let step = -cfg.lr;
            params
                .text
                .token_table
                .add_scaled_in_place(&grads.token_table, step)?;
            params.text.proj_t.add_scaled_in_place(&grads.proj_t, step)?;
            for (p, g) in params.text.bias_t.iter_mut().zip(&grads.bias_t) {
                *p += step * g;
            }
            params.image.proj_i.add_scaled_in_place(&grads.proj_i, step)?;
            for (p, g) in params.image.bias_i.iter_mut().zip(&grads.bias_i) {
                *p += step * g;
            }
            total_loss += batch_loss;
            total_triplets += batch_triplets;
        }
        let mean = if total_triplets == 0 {
            0.0
        } else {
            total_loss / total_triplets as f64
        };
        if !mean.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite epoch loss at epoch {epoch}"
            )));
        }
        epoch_loss.push(mean);
    }

    // Final index over every image.
    let mut image_vecs = Matrix::zeros(n_images as usize, cfg.d_e);
    for id in 1..=n_images {
        let v = embed_image(features.row(id)?, &params.image)?;
        image_vecs.row_mut(id as usize - 1).copy_from_slice(&v);
    }
    let index = JointEmbeddingIndex {
        image_vecs,
        params,
        gamma: cfg.gamma,
        delta_default: crate::config::Config::default().delta,
        seed: cfg.seed,
    };
    index.validate()?;

    // Recall@k over the evaluation pairs: full ranking, no threshold.
    let mut hits = 0usize;
    for &i in &eval_idx {
        let (sent, img) = &corpus.pairs[i];
        let ranked = retrieve_cmrm(sent, &index, -1.0, cfg.recall_k)?;
        if ranked.images.contains(&img.image_id) {
            hits += 1;
        }
    }
    let report = TrainReport {
        epoch_loss,
        recall_at_k: hits as f64 / eval_idx.len() as f64,
        recall_k: cfg.recall_k,
        eval_pairs: eval_idx.len(),
        seed: cfg.seed,
    };
    Ok((index, report))
}

// ---------------------------------------------------------------------------
// Serialized model
// ---------------------------------------------------------------------------

/// The index plus the vocabulary needed to tokenize free-text queries.
#[derive(Clone, Debug)]
pub struct CmrmModel {
    pub vocab: Vocabulary,
    pub index: JointEmbeddingIndex,
}

impl CmrmModel {
    pub fn train(
        corpus: &CaptionCorpus,
        features: &FeatureTable,
        cfg: &TrainConfig,
    ) -> Result<(Self, TrainReport)> {
        let (index, report) = train(corpus, features, cfg)?;
        Ok((
            CmrmModel {
                vocab: corpus.vocab.clone(),
                index,
            },
            report,
        ))
    }

    pub fn retrieve_text(&self, text: &str, delta: Option<f64>, m: usize) -> Result<RankedImages> {
        let sentence = Sentence {
            sent_id: 0,
            tokens: self.vocab.tokenize_known(text),
            raw_text: text.to_string(),
        };
        retrieve_cmrm(
            &sentence,
            &self.index,
            delta.unwrap_or(self.index.delta_default),
            m,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let idx = &self.index;
        let p = &idx.params;
        let mut w = ByteWriter::new(INDEX_MAGIC, INDEX_VERSION);
        w.put_u64(idx.seed);
        w.put_f64(idx.gamma);
        w.put_f64(idx.delta_default);
        w.put_u64(p.vocab_size() as u64);
        w.put_u64(p.d_m() as u64);
        w.put_u64(p.d_e() as u64);
        w.put_u64(idx.image_vecs.rows() as u64);
        for s in self.vocab.surfaces() {
            w.put_string(s);
        }
        for &v in p.text.token_table.data() {
            w.put_f64(v);
        }
        for &v in p.text.proj_t.data() {
            w.put_f64(v);
        }
        for &v in &p.text.bias_t {
            w.put_f64(v);
        }
        for &v in p.image.proj_i.data() {
            w.put_f64(v);
        }
        for &v in &p.image.bias_i {
            w.put_f64(v);
        }
        for &v in idx.image_vecs.data() {
            w.put_f64(v);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8], name: &str) -> Result<Self> {
        let mut r = ByteReader::open(bytes, name, INDEX_MAGIC, INDEX_VERSION)?;
        let seed = r.get_u64()?;
        let gamma = r.get_f64()?;
        let delta_default = r.get_f64()?;
        let vocab_size = r.get_u64()? as usize;
        let d_m = r.get_u64()? as usize;
        let d_e = r.get_u64()? as usize;
        let n_images = r.get_u64()? as usize;
        if d_e == 0 || d_m == 0 {
            return Err(Error::format(format!("{name}: zero embedding dimension")));
        }
        let mut surfaces = Vec::with_capacity(vocab_size.min(1 << 20));
        for _ in 0..vocab_size {
            surfaces.push(r.get_string()?);
        }
        let vocab = Vocabulary::from_surfaces(surfaces)
            .map_err(|e| Error::format(format!("{name}: {e}")))?;
        let mut read_matrix = |rows: usize, cols: usize| -> Result<Matrix> {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let v = r.get_f64()?;
                if !v.is_finite() {
                    return Err(Error::invalid(format!("{name}: non-finite parameter")));
                }
                data.push(v);
            }
            Matrix::from_vec(rows, cols, data)
        };
        let token_table = read_matrix(vocab_size, d_e)?;
        let proj_t = read_matrix(d_e, d_e)?;
        let bias_t = read_matrix(1, d_e)?.data().to_vec();
        let proj_i = read_matrix(d_m, d_e)?;
        let bias_i = read_matrix(1, d_e)?.data().to_vec();
        let image_vecs = read_matrix(n_images, d_e)?;
        r.finish()?;
        let index = JointEmbeddingIndex {
            image_vecs,
            params: EmbedParams {
                text: TextEmbedParams {
                    token_table,
                    proj_t,
                    bias_t,
                },
                image: ImageEmbedParams { proj_i, bias_i },
            },
            gamma,
            delta_default,
            seed,
        };
        index.validate()?;
        Ok(CmrmModel { vocab, index })
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
