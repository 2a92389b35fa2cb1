//! Shared plumbing for the subcommands.

use std::path::{Path, PathBuf};

use guyu_core::corpus::DialogueSample;
use guyu_core::decoding::{DecodeConfig, Strategy};
use guyu_core::model::Model;
use guyu_core::tokenizer::Vocabulary;
use guyu_core::training::ModelCheckpoint;
use guyu_core::{Error, Result};

pub fn parse_strategy(name: &str) -> Result<Strategy> {
    match name {
        "greedy" => Ok(Strategy::Greedy),
        "bm" => Ok(Strategy::Beam),
        "tk" => Ok(Strategy::TopK),
        "tp" => Ok(Strategy::TopP),
        other => Err(Error::Config(format!(
            "unknown strategy {other:?} (expected greedy|bm|tk|tp)"
        ))),
    }
}

/// Loads a checkpoint and enforces that it was trained with this vocabulary.
pub fn load_model_for(path: &Path, vocab: &Vocabulary) -> Result<(Model<f32>, ModelCheckpoint)> {
    let ckpt = ModelCheckpoint::load(path)?;
    let hash = vocab.content_hash();
    if ckpt.vocab_hash != hash {
        return Err(Error::Compat(format!(
            "checkpoint {} was trained with vocabulary {} but {} was supplied",
            path.display(),
            &ckpt.vocab_hash[..12.min(ckpt.vocab_hash.len())],
            &hash[..12]
        )));
    }
    let model = ckpt.to_model()?;
    Ok((model, ckpt))
}

/// Metric token unit; defaults to the vocabulary's natural unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricUnit {
    Char,
    Word,
}

impl MetricUnit {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "char" => Ok(Self::Char),
            "word" => Ok(Self::Word),
            other => Err(Error::Config(format!(
                "unknown metric unit {other:?} (expected char|word)"
            ))),
        }
    }

    pub fn tokens(&self, text: &str) -> Vec<String> {
        match self {
            Self::Char => guyu_core::metrics::char_tokens(text),
            Self::Word => guyu_core::metrics::whitespace_tokens(text),
        }
    }
}

pub fn build_decode_config(
    strategy: Strategy,
    b: usize,
    k: usize,
    p: f64,
    max_new: usize,
    seed: u64,
) -> Result<DecodeConfig> {
    DecodeConfig {
        strategy,
        b,
        k,
        p,
        max_new_tokens: max_new,
        seed,
    }
    .validated()
}

pub fn ensure_out_dir(out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    Ok(out.to_path_buf())
}

pub fn read_dialogues(
    path: &Path,
) -> Result<(Vec<DialogueSample>, guyu_core::corpus::CorpusStats)> {
    guyu_core::corpus::load_dialogue_corpus(path, "test")
}
