//! Subcommand implementations. Every handler resolves its configuration as
//! defaults < config file < flags, with the `UVR_SEED` environment variable
//! filling in the seed when neither a flag nor the file pins it.

use std::collections::BTreeMap;
use std::env;
use std::path::PathBuf;

use serde_json::json;
use uvr_core::corpus::{load_corpus, Sentence, Vocabulary};
use uvr_core::fusion::{grad_fixture, gradcheck as fusion_gradcheck};
use uvr_core::synth::{planted, PlantedSpec};
use uvr_core::tensor::{layer_norm, LN_EPS};
use uvr_core::tilt::RankedImages;
use uvr_core::{
    ablate_features, ablate_retrieval, cmrm, fuse as fuse_forward, AblationMode, CmrmModel,
    Config, EncoderParams, Error, FusionParams, GateMode, Matrix, Result, TiltModel,
};

use crate::{BuildTableArgs, Cli, FuseArgs, GradcheckArgs, RetrieveArgs, SweepArgs, TrainArgs};

/// Defaults overlaid with the optional config file; returns the raw keys the
/// file set so seed fallback can tell "file pinned it" from "default".
fn load_config(cli: &Cli) -> Result<(Config, BTreeMap<String, String>)> {
    let mut cfg = Config::default();
    let mut file_keys = BTreeMap::new();
    if let Some(path) = &cli.config {
        file_keys = cfg.overlay_file(path)?;
    }
    Ok((cfg, file_keys))
}

/// Seed precedence: flag, then config file, then UVR_SEED, then the default.
fn resolve_seed(
    flag: Option<u64>,
    file_keys: &BTreeMap<String, String>,
    cfg: &mut Config,
) -> Result<()> {
    if let Some(seed) = flag {
        cfg.seed = seed;
    } else if !file_keys.contains_key("seed") {
        if let Ok(raw) = env::var("UVR_SEED") {
            cfg.seed = raw
                .parse()
                .map_err(|_| Error::invalid(format!("UVR_SEED: bad value {raw:?}")))?;
        }
    }
    Ok(())
}

fn required_path(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| Error::invalid(format!("no {what} path given (flag or config file)")))
}

fn ablation_mode(
    name: &Option<String>,
    seed_flag: Option<u64>,
    default_seed: u64,
) -> Result<AblationMode> {
    match name {
        None => Ok(AblationMode::None),
        Some(name) => AblationMode::from_flags(name, seed_flag.unwrap_or(default_seed)),
    }
}

pub fn build_table(cli: &Cli, args: &BuildTableArgs) -> Result<()> {
    let (mut cfg, _) = load_config(cli)?;
    if let Some(w) = args.w {
        cfg.w = w;
    }
    let corpus_path = required_path(&args.corpus, &cfg.paths.corpus, "corpus")?;
    let stopwords = args
        .stopwords
        .clone()
        .or_else(|| cfg.paths.stopwords.clone());
    let corpus = load_corpus(&corpus_path, stopwords.as_deref())?;
    let model = TiltModel::build(&corpus, cfg.w)?;
    model.save(&args.out)?;

    let topics = model.table.index.len();
    let entries: usize = model.table.index.values().map(Vec::len).sum();
    let mean = if topics == 0 {
        0.0
    } else {
        entries as f64 / topics as f64
    };
    log::info!(
        "table written to {}: {} topics, {:.2} images/topic",
        args.out.display(),
        topics,
        mean
    );
    println!(
        "{}",
        json!({"topics": topics, "mean_images_per_topic": mean})
    );
    Ok(())
}

/// One JSON line per retrieved image; the blank sentinel prints as
/// `{"image_id":0}` and still exits 0.
fn print_ranked(ranked: &RankedImages, score_key: &str, integer_scores: bool) {
    if ranked.is_sentinel() {
        println!("{}", json!({"image_id": 0}));
        return;
    }
    for (&id, &score) in ranked.images.iter().zip(&ranked.scores) {
        let line = if integer_scores {
            json!({"image_id": id, score_key: score as u64})
        } else {
            json!({"image_id": id, score_key: score})
        };
        println!("{line}");
    }
}

pub fn retrieve(cli: &Cli, args: &RetrieveArgs) -> Result<()> {
    let (mut cfg, file_keys) = load_config(cli)?;
    resolve_seed(None, &file_keys, &mut cfg)?;
    let ablate = ablation_mode(&args.ablate, args.ablate_seed, cfg.seed)?;

    match args.mode.as_str() {
        "tilt" => {
            let path = required_path(&args.table, &cfg.paths.table, "table")?;
            let model = TiltModel::load(&path)?;
            let m = args.m.unwrap_or(cfg.m_tilt);
            let ranked = model.retrieve_text(&args.text, args.w, m)?;
            let n_images = model
                .table
                .index
                .values()
                .flatten()
                .copied()
                .max()
                .unwrap_or(0);
            let ranked = ablate_retrieval(&ranked, n_images, &ablate, 0)?;
            print_ranked(&ranked, "count", true);
        }
        "cmrm" => {
            let path = required_path(&args.index, &cfg.paths.index, "index")?;
            let model = CmrmModel::load(&path)?;
            let m = args.m.unwrap_or(cfg.m_cmrm);
            let delta = args
                .delta
                .or_else(|| file_keys.contains_key("delta").then_some(cfg.delta));
            let ranked = model.retrieve_text(&args.text, delta, m)?;
            let ranked = ablate_retrieval(&ranked, model.index.n_images(), &ablate, 0)?;
            print_ranked(&ranked, "sim", false);
        }
        other => return Err(Error::invalid(format!("unknown retrieval mode {other:?}"))),
    }
    Ok(())
}

pub fn train_cmrm(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let (mut cfg, file_keys) = load_config(cli)?;
    resolve_seed(args.seed, &file_keys, &mut cfg)?;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.d_e {
        cfg.d_e = v;
    }
    if let Some(v) = &args.mining {
        cfg.apply("mining", v)?;
    }
    if let Some(v) = args.holdout_every {
        cfg.holdout_every = v;
    }
    if let Some(v) = args.recall_k {
        cfg.recall_k = v;
    }

    let corpus_path = required_path(&args.corpus, &cfg.paths.corpus, "corpus")?;
    let features_path = required_path(&args.features, &cfg.paths.features, "features")?;
    let stopwords = args
        .stopwords
        .clone()
        .or_else(|| cfg.paths.stopwords.clone());
    let corpus = load_corpus(&corpus_path, stopwords.as_deref())?;
    let features = uvr_core::FeatureTable::load(&features_path)?;

    let ablate = ablation_mode(&args.ablate, args.ablate_seed, cfg.seed)?;
    let features = ablate_features(&features, &ablate)?;

    let (model, report) = CmrmModel::train(&corpus, &features, &cfg.train_config())?;
    model.save(&args.out)?;
    log::info!(
        "index written to {}: {} images, recall@{} = {:.4}",
        args.out.display(),
        model.index.n_images(),
        report.recall_k,
        report.recall_at_k
    );
    println!(
        "{}",
        json!({
            "epochs": report.epoch_loss.len(),
            "final_loss": report.epoch_loss.last().copied().unwrap_or(0.0),
            "recall_at_k": report.recall_at_k,
            "recall_k": report.recall_k,
            "eval_pairs": report.eval_pairs,
            "seed": report.seed,
            "epoch_loss": report.epoch_loss,
        })
    );
    Ok(())
}

/// Retrieval backend for `fuse`: whichever artifact the caller handed over.
enum Retriever {
    Tilt(TiltModel),
    Cmrm(CmrmModel),
}

impl Retriever {
    fn vocab(&self) -> &Vocabulary {
        match self {
            Retriever::Tilt(m) => &m.vocab,
            Retriever::Cmrm(m) => &m.vocab,
        }
    }

    fn retrieve(&self, text: &str, args: &FuseArgs, cfg: &Config) -> Result<RankedImages> {
        match self {
            Retriever::Tilt(model) => {
                let m = args.m.unwrap_or(cfg.m_tilt);
                model.retrieve_text(text, args.w, m)
            }
            Retriever::Cmrm(model) => {
                let m = args.m.unwrap_or(cfg.m_cmrm);
                model.retrieve_text(text, args.delta, m)
            }
        }
    }
}

fn sentence_from(text: &str, vocab: &Vocabulary, sent_id: u32) -> Sentence {
    Sentence {
        sent_id,
        raw_text: text.to_string(),
        tokens: vocab.tokenize_known(text),
    }
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn fuse(cli: &Cli, args: &FuseArgs) -> Result<()> {
    let (mut cfg, mut file_keys) = load_config(cli)?;
    if let Some(path) = &args.params {
        let extra = cfg.overlay_file(path)?;
        file_keys.extend(extra);
    }
    resolve_seed(args.seed, &file_keys, &mut cfg)?;

    let table_path = args.table.clone().or_else(|| cfg.paths.table.clone());
    let index_path = args.index.clone().or_else(|| cfg.paths.index.clone());
    let retriever = match (table_path, index_path) {
        (Some(t), None) => Retriever::Tilt(TiltModel::load(&t)?),
        (None, Some(i)) => Retriever::Cmrm(CmrmModel::load(&i)?),
        (Some(_), Some(_)) => {
            return Err(Error::invalid(
                "both a table and an index given; pick one retrieval backend",
            ))
        }
        (None, None) => {
            return Err(Error::invalid(
                "no retrieval artifact given; pass --table or --index",
            ))
        }
    };

    let features_path = required_path(&args.features, &cfg.paths.features, "features")?;
    let features = uvr_core::FeatureTable::load(&features_path)?;
    let mode = match args.fixed_lambda {
        Some(c) => GateMode::Fixed(c),
        None => GateMode::Learned,
    };

    let vocab_size = retriever.vocab().len();
    let encoder = EncoderParams::init(vocab_size, cfg.d, cfg.d_ff, cfg.heads, cfg.max_len, cfg.seed)?;
    let params = FusionParams::init(cfg.d, features.dim(), cfg.seed.wrapping_add(1))?;

    let left_sent = sentence_from(&args.text, retriever.vocab(), 1);
    let left_ranked = retriever.retrieve(&args.text, args, &cfg)?;

    let report = |out: &uvr_core::FusionOutput, ranked: &RankedImages| {
        let mut obj = json!({
            "tokens": out.h_hat.rows(),
            "images": ranked.images,
            "d": out.h_hat.cols(),
            "mean_gate": uvr_core::mean_gate(out),
        });
        if args.dump_alpha {
            obj["alpha"] = json!(matrix_rows(&out.alpha));
        }
        if args.dump_lambda {
            obj["lambda"] = json!(matrix_rows(&out.lambda));
        }
        obj
    };

    match &args.pair {
        None => {
            let out = fuse_forward(&left_sent, &left_ranked, &features, &encoder, &params, mode)?;
            println!("{}", report(&out, &left_ranked));
        }
        Some(right_text) => {
            let right_sent = sentence_from(right_text, retriever.vocab(), 2);
            let right_ranked = retriever.retrieve(right_text, args, &cfg)?;
            let out = uvr_core::fuse_pair(
                (&left_sent, &left_ranked),
                (&right_sent, &right_ranked),
                &features,
                &encoder,
                &params,
                mode,
            )?;
            let stacked = out.concat_hidden()?;
            println!(
                "{}",
                json!({
                    "left": report(&out.left, &left_ranked),
                    "right": report(&out.right, &right_ranked),
                    "stacked_tokens": stacked.rows(),
                    "d": stacked.cols(),
                })
            );
        }
    }
    Ok(())
}

pub fn gradcheck(cli: &Cli, args: &GradcheckArgs) -> Result<()> {
    let (mut cfg, file_keys) = load_config(cli)?;
    resolve_seed(args.seed, &file_keys, &mut cfg)?;
    let seed = cfg.seed;

    // Worst relative error per tensor across a small grid of shapes, the
    // learned and the clamped gate both included.
    let fixtures = [
        grad_fixture(2, 3, 8, 4, seed, GateMode::Learned)?,
        grad_fixture(1, 1, 8, 4, seed.wrapping_add(1), GateMode::Learned)?,
        grad_fixture(3, 2, 16, 8, seed.wrapping_add(2), GateMode::Fixed(0.3))?,
    ];
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    for fix in &fixtures {
        for entry in fusion_gradcheck(fix)? {
            let slot = worst.entry(entry.tensor).or_insert(0.0);
            *slot = slot.max(entry.rel_err);
        }
    }
    let mut failures = 0usize;
    let mut emit = |tensor: &str, rel_err: f64| {
        let pass = rel_err <= args.tol;
        if !pass {
            failures += 1;
        }
        println!(
            "{}",
            json!({"tensor": tensor, "max_rel_err": rel_err, "pass": pass})
        );
    };
    for (tensor, rel_err) in &worst {
        emit(tensor, *rel_err);
    }
    for entry in cmrm::gradcheck_triplet(seed)? {
        emit(entry.tensor, entry.rel_err);
    }
    if failures > 0 {
        return Err(Error::numeric(format!(
            "{failures} tensor(s) exceeded the {} relative error tolerance",
            args.tol
        )));
    }
    log::info!("all tensors within {:.0e} of finite differences", args.tol);
    Ok(())
}

/// Recall of the true image within the top-m cosine neighbours, over every
/// pair in the corpus.
fn cmrm_recall(model: &CmrmModel, planted: &uvr_core::synth::Planted, m: usize) -> Result<f64> {
    let mut hits = 0usize;
    for (sent, img) in &planted.corpus.pairs {
        let ranked = uvr_core::cmrm::retrieve_cmrm(sent, &model.index, -2.0, m)?;
        if ranked.images.contains(&img.image_id) {
            hits += 1;
        }
    }
    Ok(hits as f64 / planted.corpus.pairs.len() as f64)
}

pub fn sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let (mut cfg, file_keys) = load_config(cli)?;
    resolve_seed(args.seed, &file_keys, &mut cfg)?;

    let data = planted(&PlantedSpec::default())?;
    let n_pairs = data.corpus.pairs.len() as f64;

    match args.param.as_str() {
        "m" => {
            let grid = parse_grid::<usize>(&args.grid)?;
            let tilt = TiltModel::build(&data.corpus, cfg.w)?;
            let (model, _) = CmrmModel::train(&data.corpus, &data.features, &cfg.train_config())?;
            println!("m,tilt_recall,cmrm_recall");
            for &m in &grid {
                if m == 0 {
                    return Err(Error::invalid("retrieval budget m must be >= 1"));
                }
                let mut tilt_hits = 0usize;
                for (sent, img) in &data.corpus.pairs {
                    let ranked = tilt.retrieve_text(&sent.raw_text, None, m)?;
                    if ranked.images.contains(&img.image_id) {
                        tilt_hits += 1;
                    }
                }
                let tilt_recall = tilt_hits as f64 / n_pairs;
                let cmrm_recall = cmrm_recall(&model, &data, m)?;
                println!("{m},{tilt_recall},{cmrm_recall}");
            }
        }
        "delta" => {
            let grid = parse_grid::<f64>(&args.grid)?;
            let (model, _) = CmrmModel::train(&data.corpus, &data.features, &cfg.train_config())?;
            println!("delta,mean_results,recall");
            for &delta in &grid {
                let mut total = 0usize;
                let mut hits = 0usize;
                for (sent, img) in &data.corpus.pairs {
                    let ranked =
                        uvr_core::cmrm::retrieve_cmrm(sent, &model.index, delta, cfg.m_cmrm)?;
                    if !ranked.is_sentinel() {
                        total += ranked.len();
                        if ranked.images.contains(&img.image_id) {
                            hits += 1;
                        }
                    }
                }
                let mean_results = total as f64 / n_pairs;
                let recall = hits as f64 / n_pairs;
                println!("{delta},{mean_results},{recall}");
            }
        }
        "lambda" => {
            let grid = parse_grid::<f64>(&args.grid)?;
            let (model, _) = CmrmModel::train(&data.corpus, &data.features, &cfg.train_config())?;
            let encoder = EncoderParams::init(
                data.corpus.vocab.len(),
                cfg.d,
                cfg.d_ff,
                cfg.heads,
                cfg.max_len,
                cfg.seed,
            )?;
            let params = FusionParams::init(cfg.d, data.features.dim(), cfg.seed.wrapping_add(1))?;
            println!("lambda,mean_gate,visual_shift");
            for &lam in &grid {
                let mode = GateMode::Fixed(lam);
                let mut gate_sum = 0.0;
                let mut shift_sum = 0.0;
                for (sent, _) in &data.corpus.pairs {
                    let ranked =
                        uvr_core::cmrm::retrieve_cmrm(sent, &model.index, cfg.delta, cfg.m_cmrm)?;
                    let out = fuse_forward(sent, &ranked, &data.features, &encoder, &params, mode)?;
                    gate_sum += uvr_core::mean_gate(&out);
                    // Distance from the text-only output LN(H): how far the
                    // clamped gate lets the visual summary move the tokens.
                    let text_only = layer_norm(
                        &uvr_core::encode_text(sent, &encoder)?.h,
                        &params.ln,
                        LN_EPS,
                    )?;
                    let diff = out.h_hat.sub(&text_only)?;
                    let n = diff.data().len() as f64;
                    shift_sum += diff.data().iter().map(|v| v.abs()).sum::<f64>() / n;
                }
                println!("{lam},{},{}", gate_sum / n_pairs, shift_sum / n_pairs);
            }
        }
        other => return Err(Error::invalid(format!("unknown sweep parameter {other:?}"))),
    }
    Ok(())
}

fn parse_grid<T: std::str::FromStr>(grid: &str) -> Result<Vec<T>> {
    let values: std::result::Result<Vec<T>, _> = grid
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect();
    let values = values.map_err(|_| Error::invalid(format!("bad grid value in {grid:?}")))?;
    if values.is_empty() {
        return Err(Error::invalid("empty sweep grid"));
    }
    Ok(values)
}
