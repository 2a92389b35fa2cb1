//! `guyu generate`: decode a hypothesis per test sample (optionally a ranked
//! candidate batch per sample) and write aligned hypothesis/reference files.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use guyu_core::corpus::assemble_context_ids;
use guyu_core::decoding::{batch_generate, decode, derive_stream_seed, GenerationCandidate};
use guyu_core::{Error, Result};

use crate::common::{
    build_decode_config, ensure_out_dir, load_model_for, parse_strategy, read_dialogues,
};
use crate::config::{resolve_seed, FileConfig};
use crate::GenerateArgs;

#[derive(Serialize)]
struct DumpRecord<'a> {
    sample: usize,
    rank: usize,
    score: f64,
    text: &'a str,
    token_count: usize,
}

pub fn run(args: &GenerateArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let vocab_path = file
        .resolve_path("vocab", &args.vocab)
        .ok_or_else(|| Error::Config("--vocab is required".into()))?;
    let ckpt_path = file
        .resolve_path("checkpoint", &args.checkpoint)
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let corpus_path = file
        .resolve_path("corpus", &args.corpus)
        .ok_or_else(|| Error::Config("--corpus is required".into()))?;
    let out = file
        .resolve_path("out", &args.out)
        .ok_or_else(|| Error::Config("--out is required".into()))?;
    let out = ensure_out_dir(&out)?;

    let vocab = guyu_core::tokenizer::Vocabulary::load(&vocab_path)?;
    let (model, _) = load_model_for(&ckpt_path, &vocab)?;
    let (samples, stats) = read_dialogues(&corpus_path)?;
    println!("{}", serde_json::to_string(&stats)?);

    let strategy =
        parse_strategy(&file.resolve("strategy", &args.strategy, "greedy".to_string())?)?;
    let seed = resolve_seed(&file, &args.seed)?;
    let copies: usize = file.resolve("copies", &args.copies, 1)?;
    let limit: usize = file.resolve("limit", &args.limit, usize::MAX)?;
    let max_context: usize = file.resolve("max-context", &args.max_context, 64)?;
    let cfg = build_decode_config(
        strategy,
        file.resolve("b", &args.b, 5)?,
        file.resolve("k", &args.k, 32)?,
        file.resolve("p", &args.p, 0.9)?,
        file.resolve("max-new", &args.max_new, 64)?,
        seed,
    )?;
    // the prompt plus generated tokens must fit the position table
    let budget = model
        .config()
        .max_positions
        .saturating_sub(cfg.max_new_tokens + 1);
    let max_context = max_context.min(budget.max(2));

    let todo: Vec<_> = samples.iter().take(limit).collect();
    let results: Vec<Result<Vec<GenerationCandidate>>> = todo
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let context = assemble_context_ids(sample, &vocab, max_context)?;
            let mut sample_cfg = cfg.clone();
            sample_cfg.seed = derive_stream_seed(seed, i as u64);
            if copies > 1 {
                batch_generate(&model, &context, copies, &sample_cfg)
            } else {
                decode(&model, &context, &sample_cfg).map(|c| vec![c])
            }
        })
        .collect();

    let mut hyp_file = std::fs::File::create(out.join("hyps.txt"))?;
    let mut ref_file = std::fs::File::create(out.join("refs.txt"))?;
    let mut dump_file = match file.resolve_path("dump", &args.dump) {
        Some(p) => Some(std::fs::File::create(p)?),
        None => None,
    };
    for (i, (sample, result)) in todo.iter().zip(results).enumerate() {
        let candidates = result?;
        let top_text = vocab.decode(&candidates[0].ids)?;
        writeln!(hyp_file, "{}", top_text.replace('\n', " "))?;
        writeln!(ref_file, "{}", sample.response.replace('\n', " "))?;
        if let Some(dump) = dump_file.as_mut() {
            for (rank, cand) in candidates.iter().enumerate() {
                let text = vocab.decode(&cand.ids)?;
                let record = DumpRecord {
                    sample: i,
                    rank,
                    score: cand.score,
                    text: &text,
                    token_count: cand.ids.len(),
                };
                writeln!(dump, "{}", serde_json::to_string(&record)?)?;
            }
        }
    }
    println!(
        "wrote {} hypotheses -> {}",
        todo.len(),
        out.join("hyps.txt").display()
    );
    Ok(())
}
