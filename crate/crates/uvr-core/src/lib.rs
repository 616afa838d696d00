//! Core library for the uvr toolkit: corpus ingestion, the TF-IDF
//! topic-image lookup table, a trainable joint text-image embedding with
//! triplet loss, and a gated attention fusion layer with hand-derived,
//! finite-difference-audited gradients.

pub mod ablation;
pub mod cmrm;
pub mod config;
pub mod corpus;
pub mod error;
pub mod features;
pub mod fusion;
pub mod io;
pub mod synth;
pub mod tensor;
pub mod tilt;

pub use ablation::{ablate_features, ablate_retrieval, AblationMode};
pub use cmrm::{
    gradcheck_triplet, CmrmModel, EmbedParams, JointEmbeddingIndex, TrainConfig, TrainReport,
};
pub use config::Config;
pub use corpus::{CaptionCorpus, ImageRef, Sentence, Token, Vocabulary};
pub use error::{Error, Result};
pub use features::FeatureTable;
pub use fusion::{
    attend, backward, encode_text, fuse, fuse_pair, gate_fuse, mean_gate, project_images,
    EncoderGrads, EncoderParams, FusionGrads, FusionOutput, FusionParams, GateMode, ImageRepr,
    PairFusionOutput, TextRepr,
};
pub use tensor::{GradCheckEntry, Matrix};
pub use tilt::{RankedImages, TfIdfDictionary, TiltModel, TopicImageTable, TopicList};
