//! `guyu botchat`: bot-to-bot interaction from a seed query over a shared,
//! trimmed context memory. One checkpoint means self-chat; a second
//! checkpoint (sharing the vocabulary) plays the other side.

use guyu_core::chat::{run_bot_chat, Bot};
use guyu_core::{Error, Result};

use crate::common::{build_decode_config, load_model_for, parse_strategy};
use crate::config::{resolve_seed, FileConfig};
use crate::BotchatArgs;

pub fn run(args: &BotchatArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let vocab_path = file
        .resolve_path("vocab", &args.vocab)
        .ok_or_else(|| Error::Config("--vocab is required".into()))?;
    let ckpt_path = file
        .resolve_path("checkpoint", &args.checkpoint)
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let vocab = guyu_core::tokenizer::Vocabulary::load(&vocab_path)?;
    let (model_a, _) = load_model_for(&ckpt_path, &vocab)?;
    let model_b = match file.resolve_path("checkpoint-b", &args.checkpoint_b) {
        Some(path) => Some(load_model_for(&path, &vocab)?.0),
        None => None,
    };

    let strategy = parse_strategy(&file.resolve("strategy", &args.strategy, "tk".to_string())?)?;
    let cfg = build_decode_config(
        strategy,
        file.resolve("b", &args.b, 5)?,
        file.resolve("k", &args.k, 32)?,
        file.resolve("p", &args.p, 0.9)?,
        file.resolve("max-new", &args.max_new, 64)?,
        resolve_seed(&file, &args.seed)?,
    )?;
    let window: usize = file.resolve("window", &args.window, 300)?;
    let copies: usize = file.resolve("copies", &args.copies, 8)?;
    let turns: usize = file.resolve("turns", &args.turns, 10)?;
    let query: String = file.resolve("query", &args.query, "hello".to_string())?;

    let bots = [
        Bot {
            label: "Bot-A".to_string(),
            model: &model_a,
        },
        Bot {
            label: "Bot-B".to_string(),
            model: model_b.as_ref().map(|m| m as _).unwrap_or(&model_a),
        },
    ];
    let transcript = run_bot_chat(&bots, &vocab, &query, turns, window, &cfg, copies)?;
    for turn in &transcript.turns {
        match turn.score {
            Some(s) => println!("{}: {}  [{:.4}]", turn.speaker, turn.text, s),
            None => println!("{}: {}", turn.speaker, turn.text),
        }
    }
    if let Some(out) = file.resolve_path("out", &args.out) {
        std::fs::write(&out, serde_json::to_string_pretty(&transcript)?)?;
        eprintln!("transcript -> {}", out.display());
    }
    Ok(())
}
