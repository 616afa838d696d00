//! Gated attention fusion of text and retrieved image features.
//!
//! The pipeline has three stages. A single-block self-attention encoder
//! turns a tokenized sentence into a hidden sequence H. Retrieved image
//! features pass through a feed-forward projection into the same width,
//! giving M. Fusion then scores every text position against every image
//! row, forms a per-position visual summary H' as the attention-weighted
//! mix of image rows, gates it elementwise with a learned sigmoid weight,
//! and layer-normalizes the residual sum.
//!
//! Every forward operation here has a hand-derived backward counterpart;
//! `gradcheck` audits them against central finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Sentence, Token};
use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::tensor::{
    self, ffn_backward, ffn_with_cache, layer_norm, layer_norm_backward, sigmoid,
    softmax_backward_rows, softmax_rows, FfnCache, FfnGrads, FfnParams, GradCheckEntry,
    LayerNormParams, Matrix, FD_STEP, LN_EPS,
};
use crate::tilt::RankedImages;

const INIT_LO: f64 = -0.1;
const INIT_HI: f64 = 0.1;

/// Hidden sequence for one sentence: one row per token.
#[derive(Clone, Debug)]
pub struct TextRepr {
    pub h: Matrix,
}

impl TextRepr {
    pub fn n(&self) -> usize {
        self.h.rows()
    }

    pub fn d(&self) -> usize {
        self.h.cols()
    }
}

/// Projected image sequence: one row per retrieved image, in retrieval order.
#[derive(Clone, Debug)]
pub struct ImageRepr {
    pub m: Matrix,
}

impl ImageRepr {
    pub fn count(&self) -> usize {
        self.m.rows()
    }

    pub fn d(&self) -> usize {
        self.m.cols()
    }
}

/// Gate behaviour: learned per-entry sigmoid weights, or one fixed scalar
/// applied everywhere (for sensitivity sweeps).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    Learned,
    Fixed(f64),
}

/// Single-block text encoder: multi-head self-attention and a feed-forward
/// sublayer, each wrapped in a residual connection and layer norm.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    /// Token embedding table, vocabulary size x d.
    pub embed: Matrix,
    /// Query projection, d x d; head i owns columns i*d/h .. (i+1)*d/h.
    pub w_q: Matrix,
    /// Key projection, d x d.
    pub w_k: Matrix,
    /// Value projection, d x d.
    pub w_v: Matrix,
    /// Output projection applied to the concatenated heads, d x d.
    pub w_o: Matrix,
    /// Position-wise feed-forward sublayer, d -> d_ff -> d.
    pub ffn: FfnParams,
    /// Layer norm after the attention residual.
    pub ln_attn: LayerNormParams,
    /// Layer norm after the feed-forward residual.
    pub ln_ffn: LayerNormParams,
    pub heads: usize,
    pub max_len: usize,
}

impl EncoderParams {
    /// Seeded init: every weight uniform in (-0.1, 0.1), layer norms at
    /// identity. Draw order is fixed, so one seed pins every tensor.
    pub fn init(
        vocab_size: usize,
        d: usize,
        d_ff: usize,
        heads: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::invalid("encoder needs a non-empty vocabulary"));
        }
        if d == 0 || heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "hidden width {d} is not divisible by {heads} heads"
            )));
        }
        if d_ff == 0 || max_len == 0 {
            return Err(Error::invalid("d_ff and max_len must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(EncoderParams {
            embed: Matrix::uniform(vocab_size, d, INIT_LO, INIT_HI, &mut rng),
            w_q: Matrix::uniform(d, d, INIT_LO, INIT_HI, &mut rng),
            w_k: Matrix::uniform(d, d, INIT_LO, INIT_HI, &mut rng),
            w_v: Matrix::uniform(d, d, INIT_LO, INIT_HI, &mut rng),
            w_o: Matrix::uniform(d, d, INIT_LO, INIT_HI, &mut rng),
            ffn: FfnParams::uniform(d, d_ff, d, INIT_LO, INIT_HI, &mut rng),
            ln_attn: LayerNormParams::identity(d),
            ln_ffn: LayerNormParams::identity(d),
            heads,
            max_len,
        })
    }

    pub fn d(&self) -> usize {
        self.w_q.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }
}

/// Fusion-side parameters: the attention scorer, the gate, the image
/// projection, and the output layer norm.
#[derive(Clone, Debug)]
pub struct FusionParams {
    /// Attention projection applied to image rows, d x d.
    pub w_g: Matrix,
    /// Bias added to every projected image row, length d.
    pub b_g: Vec<f64>,
    /// Gate weight on the visual summary, d x d.
    pub w_lambda: Matrix,
    /// Gate weight on the text hidden state, d x d.
    pub u_lambda: Matrix,
    /// Image projection, feature width d_m -> d.
    pub img_ffn: FfnParams,
    /// Layer norm over the gated residual sum.
    pub ln: LayerNormParams,
}

impl FusionParams {
    /// Seeded init mirroring `EncoderParams::init`. The image projection
    /// uses a hidden width of d.
    pub fn init(d: usize, d_m: usize, seed: u64) -> Result<Self> {
        if d == 0 || d_m == 0 {
            return Err(Error::invalid("fusion widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(FusionParams {
            w_g: Matrix::uniform(d, d, INIT_LO, INIT_HI, &mut rng),
            b_g: (0..d)
                .map(|_| rand::Rng::random_range(&mut rng, INIT_LO..INIT_HI))
                .collect(),
            w_lambda: Matrix::uniform(d, d, INIT_LO, INIT_HI, &mut rng),
            u_lambda: Matrix::uniform(d, d, INIT_LO, INIT_HI, &mut rng),
            img_ffn: FfnParams::uniform(d_m, d, d, INIT_LO, INIT_HI, &mut rng),
            ln: LayerNormParams::identity(d),
        })
    }

    pub fn d(&self) -> usize {
        self.w_g.rows()
    }
}

/// Everything the fusion step produces: the fused sequence plus the
/// intermediates needed for diagnostics.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// Fused hidden sequence, n x d.
    pub h_hat: Matrix,
    /// Attention over images per text position, n x m; rows sum to 1.
    pub alpha: Matrix,
    /// Gate values in (0, 1), n x d.
    pub lambda: Matrix,
    /// Attention-weighted visual summary, n x d.
    pub h_prime: Matrix,
}

/// Fusion of a sentence pair: each side fused independently under shared
/// parameters.
#[derive(Clone, Debug)]
pub struct PairFusionOutput {
    pub left: FusionOutput,
    pub right: FusionOutput,
}

impl PairFusionOutput {
    /// Fused sequences stacked along the token axis, left rows first.
    pub fn concat_hidden(&self) -> Result<Matrix> {
        self.left.h_hat.concat_rows(&self.right.h_hat)
    }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Forward intermediates for one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    tokens: Vec<u32>,
    x0: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per-head attention weights, each n x n.
    attn: Vec<Matrix>,
    /// Concatenated head outputs before the output projection, n x d.
    concat: Matrix,
    /// Input to the first layer norm: x0 + attention output.
    x1_pre: Matrix,
    ffn: FfnCache,
    /// Input to the second layer norm: x1 + feed-forward output.
    h_pre: Matrix,
}

impl EncoderCache {
    /// Attention weights of one head, n x n.
    pub fn head_attention(&self, head: usize) -> &Matrix {
        &self.attn[head]
    }

    pub fn heads(&self) -> usize {
        self.attn.len()
    }
}

pub fn encode_text(sentence: &Sentence, params: &EncoderParams) -> Result<TextRepr> {
    Ok(encode_text_with_cache(sentence, params)?.0)
}

/// Encoder forward that also returns the intermediates for `backward`.
pub fn encode_text_with_cache(
    sentence: &Sentence,
    params: &EncoderParams,
) -> Result<(TextRepr, EncoderCache)> {
    let n = sentence.tokens.len();
    if n == 0 {
        return Err(Error::invalid("cannot encode an empty sentence"));
    }
    if n > params.max_len {
        return Err(Error::invalid(format!(
            "sentence of {n} tokens exceeds max_len {}",
            params.max_len
        )));
    }
    let d = params.d();
    let heads = params.heads;
    let dh = d / heads;
    let mut x0 = Matrix::zeros(n, d);
    let mut tokens = Vec::with_capacity(n);
    for (r, token) in sentence.tokens.iter().enumerate() {
        if token.id as usize >= params.vocab_size() {
            return Err(Error::invalid(format!(
                "token id {} outside the embedding table of {} rows",
                token.id,
                params.vocab_size()
            )));
        }
        x0.row_mut(r).copy_from_slice(params.embed.row(token.id as usize));
        tokens.push(token.id);
    }
    let q = x0.matmul(&params.w_q)?;
    let k = x0.matmul(&params.w_k)?;
    let v = x0.matmul(&params.w_v)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attn = Vec::with_capacity(heads);
    let mut concat = Matrix::zeros(n, d);
    for head in 0..heads {
        let start = head * dh;
        let qh = col_block(&q, start, dh);
        let kh = col_block(&k, start, dh);
        let vh = col_block(&v, start, dh);
        let sh = qh.matmul(&kh.transposed())?.scale(scale);
        let ah = softmax_rows(&sh);
        let oh = ah.matmul(&vh)?;
        set_col_block(&mut concat, start, &oh);
        attn.push(ah);
    }
    let o = concat.matmul(&params.w_o)?;
    let x1_pre = x0.add(&o)?;
    let x1 = layer_norm(&x1_pre, &params.ln_attn, LN_EPS)?;
    let (f, ffn_cache) = ffn_with_cache(&x1, &params.ffn)?;
    let h_pre = x1.add(&f)?;
    let h = layer_norm(&h_pre, &params.ln_ffn, LN_EPS)?;
    if !h.all_finite() {
        return Err(Error::numeric("encoder output is not finite"));
    }
    Ok((
        TextRepr { h },
        EncoderCache {
            tokens,
            x0,
            q,
            k,
            v,
            attn,
            concat,
            x1_pre,
            ffn: ffn_cache,
            h_pre,
        },
    ))
}

/// Gathers the retrieved rows (id 0 is the all-zero blank row) and projects
/// them to the hidden width.
pub fn project_images(
    ranked: &RankedImages,
    features: &FeatureTable,
    params: &FusionParams,
) -> Result<ImageRepr> {
    Ok(project_images_with_cache(ranked, features, params)?.0)
}

fn project_images_with_cache(
    ranked: &RankedImages,
    features: &FeatureTable,
    params: &FusionParams,
) -> Result<(ImageRepr, FfnCache)> {
    if ranked.images.is_empty() {
        return Err(Error::invalid(
            "image projection needs at least one retrieved row",
        ));
    }
    let e = features.gather(&ranked.images)?;
    let (m, cache) = ffn_with_cache(&e, &params.img_ffn)?;
    if !m.all_finite() {
        return Err(Error::numeric("image projection is not finite"));
    }
    Ok((ImageRepr { m }, cache))
}

/// Scores every text position against every projected image row and forms
/// the per-position visual summary. Returns `(alpha, h_prime)` where alpha
/// rows are a softmax over the image axis and `h_prime = alpha * M`.
pub fn attend(text: &TextRepr, images: &ImageRepr, params: &FusionParams) -> Result<(Matrix, Matrix)> {
    attend_inner(&text.h, &images.m, params)
}

fn attend_inner(h: &Matrix, m: &Matrix, params: &FusionParams) -> Result<(Matrix, Matrix)> {
    if h.cols() != m.cols() || h.cols() != params.d() {
        return Err(Error::invalid(format!(
            "attend widths disagree: text {}, images {}, params {}",
            h.cols(),
            m.cols(),
            params.d()
        )));
    }
    let p = m.matmul(&params.w_g)?.add_row_broadcast(&params.b_g)?;
    let s = h.matmul(&p.transposed())?;
    let alpha = softmax_rows(&s);
    let h_prime = alpha.matmul(m)?;
    Ok((alpha, h_prime))
}

/// Gates the visual summary against the text states and layer-normalizes
/// the residual sum. `alpha` and `h_prime` come from `attend` and are
/// carried through into the output.
pub fn gate_fuse(
    text: &TextRepr,
    alpha: Matrix,
    h_prime: Matrix,
    params: &FusionParams,
    mode: GateMode,
) -> Result<FusionOutput> {
    let (out, _) = gate_fuse_inner(&text.h, alpha, h_prime, params, mode)?;
    Ok(out)
}

fn gate_fuse_inner(
    h: &Matrix,
    alpha: Matrix,
    h_prime: Matrix,
    params: &FusionParams,
    mode: GateMode,
) -> Result<(FusionOutput, Matrix)> {
    if h.shape() != h_prime.shape() {
        return Err(Error::invalid(format!(
            "gate shapes disagree: text {}x{}, summary {}x{}",
            h.rows(),
            h.cols(),
            h_prime.rows(),
            h_prime.cols()
        )));
    }
    if alpha.rows() != h.rows() {
        return Err(Error::invalid("attention row count disagrees with text"));
    }
    let lambda = match mode {
        GateMode::Learned => {
            let pre = h_prime
                .matmul(&params.w_lambda)?
                .add(&h.matmul(&params.u_lambda)?)?;
            sigmoid(&pre)
        }
        GateMode::Fixed(c) => {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::invalid(format!(
                    "fixed gate value {c} must lie strictly between 0 and 1"
                )));
            }
            let mut m = Matrix::zeros(h.rows(), h.cols());
            m.data_mut().fill(c);
            m
        }
    };
    let z = h.add(&lambda.hadamard(&h_prime)?)?;
    let h_hat = layer_norm(&z, &params.ln, LN_EPS)?;
    Ok((
        FusionOutput {
            h_hat,
            alpha,
            lambda,
            h_prime,
        },
        z,
    ))
}

/// Forward intermediates for one full fusion pass.
#[derive(Clone, Debug)]
pub struct FusionCache {
    encoder: EncoderCache,
    img_ffn: FfnCache,
    /// Projected image rows, m x d.
    m: Matrix,
    /// Projected-and-biased image rows used for scoring, m x d.
    p: Matrix,
    alpha: Matrix,
    h: Matrix,
    h_prime: Matrix,
    lambda: Matrix,
    /// Input to the output layer norm: h + lambda .* h_prime.
    z: Matrix,
    mode: GateMode,
}

/// Full pipeline: encode the sentence, project the retrieved images, attend,
/// gate, and normalize.
pub fn fuse(
    sentence: &Sentence,
    ranked: &RankedImages,
    features: &FeatureTable,
    encoder: &EncoderParams,
    params: &FusionParams,
    mode: GateMode,
) -> Result<FusionOutput> {
    Ok(fuse_with_cache(sentence, ranked, features, encoder, params, mode)?.0)
}

/// `fuse` variant that retains every intermediate for `backward`.
pub fn fuse_with_cache(
    sentence: &Sentence,
    ranked: &RankedImages,
    features: &FeatureTable,
    encoder: &EncoderParams,
    params: &FusionParams,
    mode: GateMode,
) -> Result<(FusionOutput, FusionCache)> {
    let (text, enc_cache) = encode_text_with_cache(sentence, encoder)?;
    let (images, img_cache) = project_images_with_cache(ranked, features, params)?;
    let p = images.m.matmul(&params.w_g)?.add_row_broadcast(&params.b_g)?;
    let (alpha, h_prime) = attend_inner(&text.h, &images.m, params)?;
    let (out, z) = gate_fuse_inner(&text.h, alpha, h_prime, params, mode)?;
    let cache = FusionCache {
        encoder: enc_cache,
        img_ffn: img_cache,
        m: images.m,
        p,
        alpha: out.alpha.clone(),
        h: text.h,
        h_prime: out.h_prime.clone(),
        lambda: out.lambda.clone(),
        z,
        mode,
    };
    Ok((out, cache))
}

/// Fuses two sentences independently under shared parameters.
pub fn fuse_pair(
    left: (&Sentence, &RankedImages),
    right: (&Sentence, &RankedImages),
    features: &FeatureTable,
    encoder: &EncoderParams,
    params: &FusionParams,
    mode: GateMode,
) -> Result<PairFusionOutput> {
    Ok(PairFusionOutput {
        left: fuse(left.0, left.1, features, encoder, params, mode)?,
        right: fuse(right.0, right.1, features, encoder, params, mode)?,
    })
}

/// Mean gate value over all positions and dimensions: higher means the
/// output leans more on the visual summary.
pub fn mean_gate(out: &FusionOutput) -> f64 {
    let data = out.lambda.data();
    data.iter().sum::<f64>() / data.len() as f64
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Gradients for every encoder tensor, same shapes as the parameters.
#[derive(Clone, Debug)]
pub struct EncoderGrads {
    pub embed: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ffn: FfnGrads,
    pub ln_attn_scale: Vec<f64>,
    pub ln_attn_shift: Vec<f64>,
    pub ln_ffn_scale: Vec<f64>,
    pub ln_ffn_shift: Vec<f64>,
}

/// Gradients for every fusion tensor, same shapes as the parameters.
#[derive(Clone, Debug)]
pub struct FusionGrads {
    pub w_g: Matrix,
    pub b_g: Vec<f64>,
    pub w_lambda: Matrix,
    pub u_lambda: Matrix,
    pub img_ffn: FfnGrads,
    pub ln_scale: Vec<f64>,
    pub ln_shift: Vec<f64>,
}

/// Backpropagates `upstream` (the gradient at the fused output, n x d)
/// through the whole pipeline, producing gradients for every parameter
/// tensor on both sides.
pub fn backward(
    cache: &FusionCache,
    encoder: &EncoderParams,
    params: &FusionParams,
    upstream: &Matrix,
) -> Result<(EncoderGrads, FusionGrads)> {
    if upstream.shape() != cache.h.shape() {
        return Err(Error::invalid(format!(
            "upstream gradient {}x{} does not match the fused output {}x{}",
            upstream.rows(),
            upstream.cols(),
            cache.h.rows(),
            cache.h.cols()
        )));
    }
    // Output layer norm over z = h + lambda .* h_prime.
    let (dz, ln_scale, ln_shift) = layer_norm_backward(&cache.z, &params.ln, LN_EPS, upstream)?;
    let mut dh = dz.clone();
    let mut dh_prime = dz.hadamard(&cache.lambda)?;
    let d = params.d();
    let (dw_lambda, du_lambda) = match cache.mode {
        GateMode::Learned => {
            let dlambda = dz.hadamard(&cache.h_prime)?;
            // sigmoid': lambda * (1 - lambda)
            let dpre = dlambda
                .hadamard(&cache.lambda)?
                .hadamard(&cache.lambda.map(|v| 1.0 - v))?;
            dh_prime.add_in_place(&dpre.matmul(&params.w_lambda.transposed())?)?;
            dh.add_in_place(&dpre.matmul(&params.u_lambda.transposed())?)?;
            (
                cache.h_prime.transposed().matmul(&dpre)?,
                cache.h.transposed().matmul(&dpre)?,
            )
        }
        // A fixed gate is a constant: nothing flows into the gate weights.
        GateMode::Fixed(_) => (Matrix::zeros(d, d), Matrix::zeros(d, d)),
    };
    // h_prime = alpha * m
    let dalpha = dh_prime.matmul(&cache.m.transposed())?;
    let mut dm = cache.alpha.transposed().matmul(&dh_prime)?;
    // alpha = softmax(s), s = h * p^T
    let ds = softmax_backward_rows(&cache.alpha, &dalpha)?;
    dh.add_in_place(&ds.matmul(&cache.p)?)?;
    let dp = ds.transposed().matmul(&cache.h)?;
    // p = m * w_g + b_g
    dm.add_in_place(&dp.matmul(&params.w_g.transposed())?)?;
    let dw_g = cache.m.transposed().matmul(&dp)?;
    let b_g = dp.column_sums();
    // Image projection; the gradient at the raw features is discarded.
    let (img_grads, _) = ffn_backward(&cache.img_ffn, &params.img_ffn, &dm)?;
    let fusion_grads = FusionGrads {
        w_g: dw_g,
        b_g,
        w_lambda: dw_lambda,
        u_lambda: du_lambda,
        img_ffn: img_grads,
        ln_scale,
        ln_shift,
    };
    let encoder_grads = encoder_backward(&cache.encoder, encoder, &dh)?;
    Ok((encoder_grads, fusion_grads))
}

fn encoder_backward(
    cache: &EncoderCache,
    params: &EncoderParams,
    dh: &Matrix,
) -> Result<EncoderGrads> {
    let d = params.d();
    let heads = params.heads;
    let dh_width = d / heads;
    let scale = 1.0 / (dh_width as f64).sqrt();
    // Second residual: h = ln(x1 + ffn(x1)).
    let (dh_pre, ln_ffn_scale, ln_ffn_shift) =
        layer_norm_backward(&cache.h_pre, &params.ln_ffn, LN_EPS, dh)?;
    let mut dx1 = dh_pre.clone();
    let (ffn_grads, dx_ffn) = ffn_backward(&cache.ffn, &params.ffn, &dh_pre)?;
    dx1.add_in_place(&dx_ffn)?;
    // First residual: x1 = ln(x0 + attention(x0)).
    let (dx1_pre, ln_attn_scale, ln_attn_shift) =
        layer_norm_backward(&cache.x1_pre, &params.ln_attn, LN_EPS, &dx1)?;
    let mut dx0 = dx1_pre.clone();
    let do_ = dx1_pre;
    let dconcat = do_.matmul(&params.w_o.transposed())?;
    let dw_o = cache.concat.transposed().matmul(&do_)?;
    let n = cache.x0.rows();
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    for head in 0..heads {
        let start = head * dh_width;
        let doh = col_block(&dconcat, start, dh_width);
        let qh = col_block(&cache.q, start, dh_width);
        let kh = col_block(&cache.k, start, dh_width);
        let vh = col_block(&cache.v, start, dh_width);
        let ah = &cache.attn[head];
        let dah = doh.matmul(&vh.transposed())?;
        let dvh = ah.transposed().matmul(&doh)?;
        let dsh = softmax_backward_rows(ah, &dah)?;
        let dqh = dsh.matmul(&kh)?.scale(scale);
        let dkh = dsh.transposed().matmul(&qh)?.scale(scale);
        set_col_block(&mut dq, start, &dqh);
        set_col_block(&mut dk, start, &dkh);
        set_col_block(&mut dv, start, &dvh);
    }
    dx0.add_in_place(&dq.matmul(&params.w_q.transposed())?)?;
    dx0.add_in_place(&dk.matmul(&params.w_k.transposed())?)?;
    dx0.add_in_place(&dv.matmul(&params.w_v.transposed())?)?;
    let dw_q = cache.x0.transposed().matmul(&dq)?;
    let dw_k = cache.x0.transposed().matmul(&dk)?;
    let dw_v = cache.x0.transposed().matmul(&dv)?;
    let mut dembed = Matrix::zeros(params.vocab_size(), d);
    for (r, &token) in cache.tokens.iter().enumerate() {
        let src = dx0.row(r).to_vec();
        let dst = dembed.row_mut(token as usize);
        for (c, v) in src.iter().enumerate() {
            dst[c] += v;
        }
    }
    Ok(EncoderGrads {
        embed: dembed,
        w_q: dw_q,
        w_k: dw_k,
        w_v: dw_v,
        w_o: dw_o,
        ffn: ffn_grads,
        ln_attn_scale,
        ln_attn_shift,
        ln_ffn_scale,
        ln_ffn_shift,
    })
}

/// Copies columns `start .. start + width` into a new matrix.
fn col_block(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), width);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[start..start + width]);
    }
    out
}

fn set_col_block(dst: &mut Matrix, start: usize, src: &Matrix) {
    for r in 0..src.rows() {
        let width = src.cols();
        dst.row_mut(r)[start..start + width].copy_from_slice(src.row(r));
    }
}

// ---------------------------------------------------------------------------
// Gradient audit
// ---------------------------------------------------------------------------

/// One self-contained forward/backward scenario: seeded parameters, a
/// sentence, retrieved images, their features, and an upstream gradient.
#[derive(Clone, Debug)]
pub struct GradFixture {
    pub sentence: Sentence,
    pub ranked: RankedImages,
    pub features: FeatureTable,
    pub encoder: EncoderParams,
    pub params: FusionParams,
    pub mode: GateMode,
    pub upstream: Matrix,
}

/// Builds a random fixture. Parameter seeds are resampled until every
/// feed-forward preactivation sits at least 1e-3 from the ReLU kink, so a
/// 1e-5 finite-difference probe cannot flip an activation mask.
pub fn grad_fixture(n: usize, m: usize, d: usize, heads: usize, seed: u64, mode: GateMode) -> Result<GradFixture> {
    const KINK_GUARD: f64 = 1e-3;
    let vocab_size = 7;
    let d_m = 5;
    let n_images = 6;
    if m > n_images {
        return Err(Error::invalid("fixture supports at most 6 image rows"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1e1_d5ee_df1e);
    let tokens: Vec<Token> = (0..n)
        .map(|i| {
            let id = rand::Rng::random_range(&mut rng, 0..vocab_size as u32);
            Token {
                surface: format!("tok{i}"),
                id,
            }
        })
        .collect();
    let sentence = Sentence {
        sent_id: 1,
        raw_text: tokens
            .iter()
            .map(|t| t.surface.clone())
            .collect::<Vec<_>>()
            .join(" "),
        tokens,
    };
    let mut ids: Vec<u32> = (1..=n_images as u32).collect();
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut rng);
    ids.truncate(m);
    let ranked = RankedImages {
        scores: (0..m).map(|i| (m - i) as f64).collect(),
        budget: m,
        images: ids,
    };
    let rows: Vec<Vec<f64>> = (0..n_images)
        .map(|_| {
            (0..d_m)
                .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
                .collect()
        })
        .collect();
    let features = FeatureTable::from_rows(rows)?;
    let upstream = {
        let mut u = Matrix::zeros(n, d);
        u.data_mut().fill(1.0);
        u
    };
    for attempt in 0..64u64 {
        let p_seed = seed.wrapping_add(attempt.wrapping_mul(7919));
        let encoder = EncoderParams::init(vocab_size, d, 2 * d, heads, 16, p_seed)?;
        let params = FusionParams::init(d, d_m, p_seed ^ 0xabcd)?;
        let (_, cache) = fuse_with_cache(&sentence, &ranked, &features, &encoder, &params, mode)?;
        let min_pre = cache
            .encoder
            .ffn
            .a1
            .data()
            .iter()
            .chain(cache.img_ffn.a1.data())
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
        if min_pre >= KINK_GUARD {
            return Ok(GradFixture {
                sentence,
                ranked,
                features,
                encoder,
                params,
                mode,
                upstream,
            });
        }
    }
    Err(Error::numeric(
        "no fixture seed kept preactivations clear of the ReLU kink",
    ))
}

/// Number of parameter tensors audited per fixture.
const SLOTS: usize = 23;

fn slot_mut<'a>(
    enc: &'a mut EncoderParams,
    fus: &'a mut FusionParams,
    idx: usize,
) -> (&'static str, &'a mut [f64]) {
    match idx {
        0 => ("encoder.embed", enc.embed.data_mut()),
        1 => ("encoder.w_q", enc.w_q.data_mut()),
        2 => ("encoder.w_k", enc.w_k.data_mut()),
        3 => ("encoder.w_v", enc.w_v.data_mut()),
        4 => ("encoder.w_o", enc.w_o.data_mut()),
        5 => ("encoder.ffn.w1", enc.ffn.w1.data_mut()),
        6 => ("encoder.ffn.b1", &mut enc.ffn.b1),
        7 => ("encoder.ffn.w2", enc.ffn.w2.data_mut()),
        8 => ("encoder.ffn.b2", &mut enc.ffn.b2),
        9 => ("encoder.ln_attn.scale", &mut enc.ln_attn.scale),
        10 => ("encoder.ln_attn.shift", &mut enc.ln_attn.shift),
        11 => ("encoder.ln_ffn.scale", &mut enc.ln_ffn.scale),
        12 => ("encoder.ln_ffn.shift", &mut enc.ln_ffn.shift),
        13 => ("fusion.w_g", fus.w_g.data_mut()),
        14 => ("fusion.b_g", &mut fus.b_g),
        15 => ("fusion.w_lambda", fus.w_lambda.data_mut()),
        16 => ("fusion.u_lambda", fus.u_lambda.data_mut()),
        17 => ("fusion.img_ffn.w1", fus.img_ffn.w1.data_mut()),
        18 => ("fusion.img_ffn.b1", &mut fus.img_ffn.b1),
        19 => ("fusion.img_ffn.w2", fus.img_ffn.w2.data_mut()),
        20 => ("fusion.img_ffn.b2", &mut fus.img_ffn.b2),
        21 => ("fusion.ln.scale", &mut fus.ln.scale),
        22 => ("fusion.ln.shift", &mut fus.ln.shift),
        _ => unreachable!("slot index out of range"),
    }
}

fn slot_grad<'a>(enc: &'a EncoderGrads, fus: &'a FusionGrads, idx: usize) -> &'a [f64] {
    match idx {
        0 => enc.embed.data(),
        1 => enc.w_q.data(),
        2 => enc.w_k.data(),
        3 => enc.w_v.data(),
        4 => enc.w_o.data(),
        5 => enc.ffn.w1.data(),
        6 => &enc.ffn.b1,
        7 => enc.ffn.w2.data(),
        8 => &enc.ffn.b2,
        9 => &enc.ln_attn_scale,
        10 => &enc.ln_attn_shift,
        11 => &enc.ln_ffn_scale,
        12 => &enc.ln_ffn_shift,
        13 => fus.w_g.data(),
        14 => &fus.b_g,
        15 => fus.w_lambda.data(),
        16 => fus.u_lambda.data(),
        17 => fus.img_ffn.w1.data(),
        18 => &fus.img_ffn.b1,
        19 => fus.img_ffn.w2.data(),
        20 => &fus.img_ffn.b2,
        21 => &fus.ln_scale,
        22 => &fus.ln_shift,
        _ => unreachable!("slot index out of range"),
    }
}

/// Entries whose analytic and numeric magnitudes both sit below this floor
/// count as agreeing. It covers structurally zero gradients (the score bias
/// cancels under the softmax) and entries so small that the central
/// difference carries mostly rounding noise (absolute noise is near 1e-10
/// here, so the floor keeps two orders of margin).
const GRAD_ATOL: f64 = 1e-6;

/// Audits the analytic gradient of every parameter tensor against central
/// finite differences of the scalar loss `sum(upstream .* h_hat)`. Returns
/// one entry per tensor with the worst relative error observed.
pub fn gradcheck(fix: &GradFixture) -> Result<Vec<GradCheckEntry>> {
    let (_, cache) = fuse_with_cache(
        &fix.sentence,
        &fix.ranked,
        &fix.features,
        &fix.encoder,
        &fix.params,
        fix.mode,
    )?;
    let (enc_grads, fus_grads) = backward(&cache, &fix.encoder, &fix.params, &fix.upstream)?;
    let mut entries = Vec::with_capacity(SLOTS);
    for idx in 0..SLOTS {
        let mut enc_probe = fix.encoder.clone();
        let mut fus_probe = fix.params.clone();
        let (name, slot) = slot_mut(&mut enc_probe, &mut fus_probe, idx);
        let theta = slot.to_vec();
        let numeric = tensor::finite_diff_grad(
            |probe| {
                let mut enc_eval = fix.encoder.clone();
                let mut fus_eval = fix.params.clone();
                slot_mut(&mut enc_eval, &mut fus_eval, idx)
                    .1
                    .copy_from_slice(probe);
                let out = fuse(
                    &fix.sentence,
                    &fix.ranked,
                    &fix.features,
                    &enc_eval,
                    &fus_eval,
                    fix.mode,
                )
                .expect("fixture forward");
                fix.upstream
                    .data()
                    .iter()
                    .zip(out.h_hat.data())
                    .map(|(u, h)| u * h)
                    .sum()
            },
            &theta,
            FD_STEP,
        );
        let analytic = slot_grad(&enc_grads, &fus_grads, idx);
        entries.push(GradCheckEntry {
            tensor: name,
            rel_err: tensor::max_relative_error(analytic, &numeric, GRAD_ATOL),
        });
    }
    Ok(entries)
}
