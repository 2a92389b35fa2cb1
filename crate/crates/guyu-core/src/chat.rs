//! Rolling context memory, interactive chat sessions, and the bot-to-bot
//! interaction driver. Both driver roles share one context memory; labels
//! alternate and no termination signal is imposed beyond the turn cap.

use serde::Serialize;

use crate::decoding::{batch_generate, DecodeConfig, LanguageModel};
use crate::error::{Error, Result};
use crate::tokenizer::{Vocabulary, BOS, EOS, EOU};

/// Token-level conversation memory trimmed to the most recent `window`
/// tokens; utterances are joined by EOU as in training sequences.
#[derive(Debug, Clone)]
pub struct ContextMemory {
    tokens: Vec<u32>,
    window: usize,
}

impl ContextMemory {
    pub fn new(window: usize) -> Self {
        Self {
            tokens: Vec::new(),
            window,
        }
    }

    pub fn push_utterance(&mut self, ids: &[u32]) {
        if !self.tokens.is_empty() {
            self.tokens.push(EOU);
        }
        self.tokens.extend(ids);
        if self.tokens.len() > self.window {
            self.tokens.drain(..self.tokens.len() - self.window);
        }
    }

    pub fn clear(&mut self) {
        self.tokens.clear();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Decode prompt: memory tokens followed by BOS.
    pub fn prompt(&self) -> Vec<u32> {
        let mut p = self.tokens.clone();
        p.push(BOS);
        p
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TranscriptTurn {
    pub speaker: String,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct Transcript {
    pub turns: Vec<TranscriptTurn>,
}

fn check_window(window: usize, model: &dyn LanguageModel, cfg: &DecodeConfig) -> Result<()> {
    let budget = model
        .max_positions()
        .saturating_sub(cfg.max_new_tokens)
        .saturating_sub(1);
    if window == 0 || window > budget {
        return Err(Error::Config(format!(
            "window {} must be in 1..={} (max_positions {} - max_new {} - 1)",
            window,
            budget,
            model.max_positions(),
            cfg.max_new_tokens
        )));
    }
    Ok(())
}

fn strip_eos(mut ids: Vec<u32>) -> Vec<u32> {
    if ids.last() == Some(&EOS) {
        ids.pop();
    }
    ids
}

/// One conversational endpoint replying with the top likelihood-ranked
/// candidate from a parallel batch.
pub struct ChatSession<'a> {
    model: &'a dyn LanguageModel,
    vocab: &'a Vocabulary,
    memory: ContextMemory,
    cfg: DecodeConfig,
    copies: usize,
    turn: u64,
}

impl<'a> ChatSession<'a> {
    pub fn new(
        model: &'a dyn LanguageModel,
        vocab: &'a Vocabulary,
        window: usize,
        cfg: DecodeConfig,
        copies: usize,
    ) -> Result<Self> {
        let cfg = cfg.validated()?;
        check_window(window, model, &cfg)?;
        if copies < 1 {
            return Err(Error::Config("copies must be >= 1".into()));
        }
        Ok(Self {
            model,
            vocab,
            memory: ContextMemory::new(window),
            cfg,
            copies,
            turn: 0,
        })
    }

    /// Appends the user utterance to memory, generates, appends the reply.
    pub fn reply(&mut self, user_text: &str) -> Result<(String, f64)> {
        self.memory.push_utterance(&self.vocab.encode(user_text));
        let mut cfg = self.cfg.clone();
        cfg.seed = crate::decoding::derive_stream_seed(self.cfg.seed, self.turn);
        self.turn += 1;
        let candidates = batch_generate(self.model, &self.memory.prompt(), self.copies, &cfg)?;
        let top = &candidates[0];
        let text = self.vocab.decode(&top.ids)?;
        self.memory.push_utterance(&strip_eos(top.ids.clone()));
        Ok((text, top.score))
    }

    pub fn reset(&mut self) {
        self.memory.clear();
        self.turn = 0;
    }

    pub fn memory_len(&self) -> usize {
        self.memory.len()
    }
}

/// A generation endpoint for bot-to-bot interaction.
pub struct Bot<'a> {
    pub label: String,
    pub model: &'a dyn LanguageModel,
}

/// Alternately extends a shared context memory from the seed query for
/// `turns` generated utterances. The seed is attributed to the first bot;
/// generation starts with the second. Deterministic for a fixed seed.
pub fn run_bot_chat(
    bots: &[Bot<'_>; 2],
    vocab: &Vocabulary,
    seed_query: &str,
    turns: usize,
    window: usize,
    cfg: &DecodeConfig,
    copies: usize,
) -> Result<Transcript> {
    let cfg = cfg.clone().validated()?;
    check_window(window, bots[0].model, &cfg)?;
    check_window(window, bots[1].model, &cfg)?;
    if copies < 1 {
        return Err(Error::Config("copies must be >= 1".into()));
    }
    let mut memory = ContextMemory::new(window);
    let mut transcript = Transcript::default();
    memory.push_utterance(&vocab.encode(seed_query));
    transcript.turns.push(TranscriptTurn {
        speaker: bots[0].label.clone(),
        text: seed_query.to_string(),
        score: None,
    });
    for turn in 0..turns {
        let bot = &bots[(turn + 1) % 2];
        let mut turn_cfg = cfg.clone();
        turn_cfg.seed = crate::decoding::derive_stream_seed(cfg.seed, turn as u64);
        let candidates = batch_generate(bot.model, &memory.prompt(), copies, &turn_cfg)?;
        let top = &candidates[0];
        let text = vocab.decode(&top.ids)?;
        memory.push_utterance(&strip_eos(top.ids.clone()));
        transcript.turns.push(TranscriptTurn {
            speaker: bot.label.clone(),
            text,
            score: Some(top.score),
        });
        debug_assert!(memory.len() <= window);
    }
    Ok(transcript)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::Strategy;

    struct LoopModel {
        vocab: usize,
    }

    impl LanguageModel for LoopModel {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn max_positions(&self) -> usize {
            32
        }
        fn next_distribution(&self, prefix: &[u32]) -> Result<Vec<f64>> {
            // cycles through the non-special ids, EOS after two tokens
            let mut dist = vec![0.0; self.vocab];
            let generated = prefix.iter().rev().take_while(|&&t| t != BOS).count();
            if generated >= 2 {
                dist[EOS as usize] = 1.0;
            } else {
                let tok = 5 + (prefix.len() % (self.vocab - 5));
                dist[tok] = 1.0;
            }
            Ok(dist)
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build_char("abcdefgh".lines().map(String::from), 1).unwrap()
    }

    #[test]
    fn memory_trims_to_window_keeping_recent() {
        let mut m = ContextMemory::new(5);
        m.push_utterance(&[10, 11, 12]);
        assert_eq!(m.prompt(), vec![10, 11, 12, BOS]);
        m.push_utterance(&[20, 21]);
        // [10,11,12,EOU,20,21] trimmed to last 5
        assert_eq!(m.len(), 5);
        assert_eq!(m.prompt(), vec![11, 12, EOU, 20, 21, BOS]);
        m.clear();
        assert!(m.is_empty());
    }

    #[test]
    fn session_round_trips_and_resets() {
        let v = vocab();
        let model = LoopModel { vocab: v.len() };
        let mut cfg = DecodeConfig::new(Strategy::Greedy);
        cfg.max_new_tokens = 8;
        let mut session = ChatSession::new(&model, &v, 20, cfg, 2).unwrap();
        let (reply1, score1) = session.reply("ab").unwrap();
        assert!(!reply1.is_empty());
        assert!(score1 > 0.0 && score1 <= 1.0);
        let mem_after_one = session.memory_len();
        assert!(mem_after_one > 0);

        // long session never exceeds the window
        for _ in 0..20 {
            session.reply("abcdefgh").unwrap();
            assert!(session.memory_len() <= 20);
        }
        session.reset();
        assert_eq!(session.memory_len(), 0);

        // replies after reset depend only on the new input
        let (r1, _) = session.reply("ab").unwrap();
        session.reset();
        let (r2, _) = session.reply("ab").unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn bot_chat_transcript_shape() {
        let v = vocab();
        let model = LoopModel { vocab: v.len() };
        let bots = [
            Bot {
                label: "Bot-A".to_string(),
                model: &model,
            },
            Bot {
                label: "Bot-B".to_string(),
                model: &model,
            },
        ];
        let mut cfg = DecodeConfig::new(Strategy::Greedy);
        cfg.max_new_tokens = 6;
        let t = run_bot_chat(&bots, &v, "hello", 10, 20, &cfg, 2).unwrap();
        assert_eq!(t.turns.len(), 11); // seed + 10 generated
        assert_eq!(t.turns[0].speaker, "Bot-A");
        assert_eq!(t.turns[0].text, "hello");
        assert!(t.turns[0].score.is_none());
        for (i, turn) in t.turns.iter().enumerate().skip(1) {
            let want = if i % 2 == 1 { "Bot-B" } else { "Bot-A" };
            assert_eq!(turn.speaker, want);
            assert!(turn.score.is_some());
        }
        let again = run_bot_chat(&bots, &v, "hello", 10, 20, &cfg, 2).unwrap();
        let texts: Vec<&str> = t.turns.iter().map(|x| x.text.as_str()).collect();
        let texts2: Vec<&str> = again.turns.iter().map(|x| x.text.as_str()).collect();
        assert_eq!(texts, texts2);
    }

    #[test]
    fn window_validation() {
        let v = vocab();
        let model = LoopModel { vocab: v.len() };
        let mut cfg = DecodeConfig::new(Strategy::Greedy);
        cfg.max_new_tokens = 30; // leaves no window budget under 32 positions
        assert!(ChatSession::new(&model, &v, 10, cfg, 1).is_err());
    }
}
