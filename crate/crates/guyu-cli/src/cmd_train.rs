//! `guyu train`: vocabulary building/loading, sequence assembly for the
//! pretrain or finetune stage, the training loop, and checkpoint output.

use std::io::Write;
use std::path::PathBuf;

use guyu_core::corpus::{
    assemble_sequence, assemble_text_sequence, load_dialogue_corpus, load_text_corpus,
    AssembledSequence, CorpusStats,
};
use guyu_core::model::{Model, ModelConfig};
use guyu_core::tokenizer::Vocabulary;
use guyu_core::training::{train, Stage, TrainConfig};
use guyu_core::{Error, Result};

use crate::common::{ensure_out_dir, load_model_for};
use crate::config::{resolve_seed, FileConfig};
use crate::TrainArgs;

pub fn run(args: &TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let stage_name: String = file.resolve("stage", &args.stage, "finetune".to_string())?;
    let stage = match stage_name.as_str() {
        "pretrain" => Stage::Pretrain,
        "finetune" => Stage::Finetune,
        other => return Err(Error::Config(format!("unknown stage {other:?}"))),
    };
    let corpus = file
        .resolve_path("corpus", &args.corpus)
        .ok_or_else(|| Error::Config("--corpus is required".into()))?;
    let vocab_path = file
        .resolve_path("vocab", &args.vocab)
        .ok_or_else(|| Error::Config("--vocab is required".into()))?;
    let out = file
        .resolve_path("out", &args.out)
        .ok_or_else(|| Error::Config("--out is required".into()))?;
    let out = ensure_out_dir(&out)?;
    let seed = resolve_seed(&file, &args.seed)?;
    let lambda: f32 = file.resolve("lambda", &args.lambda, 0.0)?;
    let max_context: usize = file.resolve("max-context", &args.max_context, 64)?;
    let max_response: usize = file.resolve("max-response", &args.max_response, 64)?;

    // vocabulary: build on request, otherwise load
    let vocab = match file.resolve_opt("build-vocab", &args.build_vocab)? {
        Some(mode) => {
            let v = build_vocabulary(&mode, &corpus, stage, &file, args)?;
            v.save(&vocab_path)?;
            eprintln!(
                "built {} vocabulary ({} entries) -> {}",
                mode,
                v.len(),
                vocab_path.display()
            );
            v
        }
        None => Vocabulary::load(&vocab_path)?,
    };

    // sequences + stats
    let (train_seqs, valid_seqs, stats) = assemble_corpus(
        stage,
        &corpus,
        file.resolve_path("corpus-valid", &args.corpus_valid),
        &vocab,
        max_context,
        max_response,
        lambda,
    )?;
    println!("{}", serde_json::to_string(&stats)?);

    // model: resume from a checkpoint or initialize fresh
    let mut model = match file.resolve_path("checkpoint", &args.checkpoint) {
        Some(ckpt_path) => {
            let (model, ckpt) = load_model_for(&ckpt_path, &vocab)?;
            eprintln!(
                "continuing from {} (step {}, val_loss {:.4})",
                ckpt_path.display(),
                ckpt.step,
                ckpt.val_loss
            );
            model
        }
        None => {
            let cfg = ModelConfig {
                vocab_size: vocab.len(),
                d_model: file.resolve("d-model", &args.d_model, 128)?,
                n_layers: file.resolve("layers", &args.layers, 4)?,
                n_heads: file.resolve("heads", &args.heads, 4)?,
                d_ff: file.resolve("d-ff", &args.d_ff, 0)?,
                max_positions: file.resolve(
                    "max-positions",
                    &args.max_positions,
                    max_context + max_response,
                )?,
                dropout_rate: file.resolve("dropout", &args.dropout, 0.1)?,
                seed,
            };
            Model::init(cfg)?
        }
    };

    let mut tc = TrainConfig::new(lambda, stage);
    tc.batch_size = file.resolve("batch-size", &args.batch_size, 16)?;
    tc.max_steps = file.resolve("steps", &args.steps, 1000)?;
    tc.warmup_steps = file.resolve("warmup", &args.warmup, 400)?;
    tc.lr_scale = file.resolve("lr-scale", &args.lr_scale, 1.0)?;
    tc.validation_interval = file.resolve("val-interval", &args.val_interval, 50)?;
    tc.seed = seed;

    let log_path = out.join("train_log.jsonl");
    let mut log = std::fs::File::create(&log_path)?;
    let run = train(
        &mut model,
        &train_seqs,
        &valid_seqs,
        &tc,
        &vocab.content_hash(),
        |record| {
            let line = serde_json::to_string(record).expect("serializable record");
            let _ = writeln!(log, "{line}");
            if let Some(v) = record.val_loss {
                println!(
                    "step {:>6}  lr {:.6}  train {:.4}  val {:.4}",
                    record.step, record.lr, record.train_loss, v
                );
            }
        },
    )?;

    let ckpt_path = out.join("model.ckpt");
    run.checkpoint.save(&ckpt_path)?;
    println!(
        "best checkpoint: step {} val_loss {:.4} -> {}",
        run.checkpoint.step,
        run.checkpoint.val_loss,
        ckpt_path.display()
    );
    Ok(())
}

fn build_vocabulary(
    mode: &str,
    corpus: &PathBuf,
    stage: Stage,
    file: &FileConfig,
    args: &TrainArgs,
) -> Result<Vocabulary> {
    let lines: Vec<String> = match stage {
        Stage::Pretrain => load_text_corpus(corpus)?,
        Stage::Finetune => {
            let (samples, _) = load_dialogue_corpus(corpus, "train")?;
            samples
                .iter()
                .flat_map(|s| {
                    s.persona
                        .iter()
                        .chain(s.context.iter())
                        .cloned()
                        .chain(std::iter::once(s.response.clone()))
                })
                .collect()
        }
    };
    match mode {
        "char" => {
            let min_count = file.resolve("min-count", &args.min_count, 1)?;
            Vocabulary::build_char(lines.into_iter(), min_count)
        }
        "bpe" => {
            let size = file.resolve("vocab-size", &args.vocab_size, 4000)?;
            Vocabulary::train_bpe(lines.into_iter(), size)
        }
        other => Err(Error::Config(format!(
            "unknown vocabulary mode {other:?} (expected char|bpe)"
        ))),
    }
}

type SplitSeqs = (Vec<AssembledSequence>, Vec<AssembledSequence>, CorpusStats);

fn assemble_corpus(
    stage: Stage,
    corpus: &PathBuf,
    valid_path: Option<PathBuf>,
    vocab: &Vocabulary,
    max_context: usize,
    max_response: usize,
    lambda: f32,
) -> Result<SplitSeqs> {
    let assemble_all =
        |path: &PathBuf, split: &str| -> Result<(Vec<AssembledSequence>, CorpusStats)> {
            match stage {
                Stage::Pretrain => {
                    let docs = load_text_corpus(path)?;
                    if docs.is_empty() {
                        return Err(Error::Corpus {
                            line: 0,
                            msg: "empty text corpus".into(),
                        });
                    }
                    let max_len = max_context + max_response;
                    let seqs = docs
                        .iter()
                        .map(|d| assemble_text_sequence(d, vocab, max_len))
                        .collect::<Result<Vec<_>>>()?;
                    let tokens: usize = docs.iter().map(|d| d.split_whitespace().count()).sum();
                    let stats = CorpusStats {
                        split: split.to_string(),
                        samples: docs.len(),
                        avg_context_turns: 0.0,
                        avg_response_tokens: tokens as f64 / docs.len() as f64,
                    };
                    Ok((seqs, stats))
                }
                Stage::Finetune => {
                    let (samples, stats) = load_dialogue_corpus(path, split)?;
                    let seqs = samples
                        .iter()
                        .map(|s| assemble_sequence(s, vocab, max_context, max_response, lambda))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((seqs, stats))
                }
            }
        };

    let (train_seqs, stats) = assemble_all(corpus, "train")?;
    let valid_seqs = match valid_path {
        Some(path) => assemble_all(&path, "valid")?.0,
        None => {
            // deterministic holdout: the last tenth, capped at 256 rows
            let n = train_seqs.len();
            let k = (n / 10).clamp(1, 256);
            if n > k + 1 {
                train_seqs[n - k..].to_vec()
            } else {
                train_seqs.clone()
            }
        }
    };
    let train_seqs = match valid_path_is_holdout(&valid_seqs, &train_seqs) {
        Some(cut) => train_seqs[..cut].to_vec(),
        None => train_seqs,
    };
    Ok((train_seqs, valid_seqs, stats))
}

/// When validation is a tail holdout of the training split, returns the cut.
fn valid_path_is_holdout(
    valid: &[AssembledSequence],
    train: &[AssembledSequence],
) -> Option<usize> {
    if valid.len() < train.len() && train[train.len() - valid.len()..] == *valid {
        Some(train.len() - valid.len())
    } else {
        None
    }
}
