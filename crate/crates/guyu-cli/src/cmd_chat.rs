//! `guyu chat`: interactive REPL over a trained checkpoint. `/reset` clears
//! the context memory, `/quit` exits.

use std::io::{BufRead, Write};

use guyu_core::chat::ChatSession;
use guyu_core::{Error, Result};

use crate::common::{build_decode_config, load_model_for, parse_strategy};
use crate::config::{resolve_seed, FileConfig};
use crate::ChatArgs;

pub fn run(args: &ChatArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let vocab_path = file
        .resolve_path("vocab", &args.vocab)
        .ok_or_else(|| Error::Config("--vocab is required".into()))?;
    let ckpt_path = file
        .resolve_path("checkpoint", &args.checkpoint)
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let vocab = guyu_core::tokenizer::Vocabulary::load(&vocab_path)?;
    let (model, _) = load_model_for(&ckpt_path, &vocab)?;

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
    let mut session = ChatSession::new(&model, &vocab, window, cfg, copies)?;

    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    eprintln!("chat ready; /reset clears memory, /quit exits");
    loop {
        write!(stdout, "> ")?;
        stdout.flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            break; // EOF
        }
        let line = line.trim();
        match line {
            "" => continue,
            "/quit" => break,
            "/reset" => {
                session.reset();
                writeln!(stdout, "(memory cleared)")?;
            }
            _ => match session.reply(line) {
                Ok((text, score)) => writeln!(stdout, "bot [{score:.4}]: {text}")?,
                Err(e) => eprintln!("turn failed: {e}"),
            },
        }
    }
    Ok(())
}
