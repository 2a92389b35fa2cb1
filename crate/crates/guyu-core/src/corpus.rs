//! Dialogue and plain-text corpus ingestion, concatenated context+response
//! sequence assembly with per-target loss weights, and PAD-filled batching.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{Vocabulary, BOS, EOS, EOU, PAD};

/// One dialogue record: optional persona sentences, the ordered context
/// turns, and the target response.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DialogueSample {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub persona: Vec<String>,
    pub context: Vec<String>,
    pub response: String,
}

/// Corpus statistics for the loader report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    pub split: String,
    pub samples: usize,
    pub avg_context_turns: f64,
    /// Whitespace token count of responses (descriptive only).
    pub avg_response_tokens: f64,
}

/// Streaming JSONL reader; yields samples in file order.
pub struct DialogueCorpusReader<R: BufRead> {
    lines: std::io::Lines<R>,
    lineno: usize,
}

impl DialogueCorpusReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        Ok(Self {
            lines: BufReader::new(file).lines(),
            lineno: 0,
        })
    }
}

impl<R: BufRead> Iterator for DialogueCorpusReader<R> {
    type Item = Result<DialogueSample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.lineno += 1;
            match self.lines.next()? {
                Err(e) => return Some(Err(e.into())),
                Ok(line) if line.trim().is_empty() => continue,
                Ok(line) => {
                    let parsed: std::result::Result<DialogueSample, _> =
                        serde_json::from_str(&line);
                    return Some(match parsed {
                        Ok(sample) => {
                            if sample.context.is_empty() {
                                Err(Error::Corpus {
                                    line: self.lineno,
                                    msg: "context must be non-empty".into(),
                                })
                            } else if sample.response.is_empty() {
                                Err(Error::Corpus {
                                    line: self.lineno,
                                    msg: "response must be non-empty".into(),
                                })
                            } else {
                                Ok(sample)
                            }
                        }
                        Err(e) => Err(Error::Corpus {
                            line: self.lineno,
                            msg: e.to_string(),
                        }),
                    });
                }
            }
        }
    }
}

/// Eagerly loads a JSONL dialogue corpus and reports statistics.
pub fn load_dialogue_corpus(
    path: &Path,
    split: &str,
) -> Result<(Vec<DialogueSample>, CorpusStats)> {
    let mut samples = Vec::new();
    for item in DialogueCorpusReader::open(path)? {
        samples.push(item?);
    }
    let n = samples.len();
    let turns: usize = samples.iter().map(|s| s.context.len()).sum();
    let resp_tokens: usize = samples
        .iter()
        .map(|s| s.response.split_whitespace().count())
        .sum();
    let stats = CorpusStats {
        split: split.to_string(),
        samples: n,
        avg_context_turns: if n == 0 { 0.0 } else { turns as f64 / n as f64 },
        avg_response_tokens: if n == 0 {
            0.0
        } else {
            resp_tokens as f64 / n as f64
        },
    };
    Ok((samples, stats))
}

/// One document per non-empty line, in file order.
pub fn load_text_corpus(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path)?;
    let mut docs = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            docs.push(line);
        }
    }
    Ok(docs)
}

/// Token-level training sequence I = (X, Y). X ends with BOS at index
/// `context_len - 1`; Y ends with EOS. `loss_weights[i]` weights the
/// prediction of `ids[i + 1]`: lambda inside X, 1.0 inside Y.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledSequence {
    pub ids: Vec<u32>,
    /// m: number of tokens in X, BOS inclusive.
    pub context_len: usize,
    pub loss_weights: Vec<f32>,
}

impl AssembledSequence {
    pub fn total_len(&self) -> usize {
        self.ids.len()
    }

    pub fn response_len(&self) -> usize {
        self.ids.len() - self.context_len
    }
}

/// Builds I = (X, Y) for a dialogue sample.
///
/// X is persona sentences (each followed by EOU) then context turns joined
/// by EOU, left-truncated to `max_context - 1` so the most recent tokens
/// survive, then BOS. Y is the response right-truncated to
/// `max_response - 1`, then EOS.
pub fn assemble_sequence(
    sample: &DialogueSample,
    vocab: &Vocabulary,
    max_context: usize,
    max_response: usize,
    lambda: f32,
) -> Result<AssembledSequence> {
    if max_response < 2 {
        return Err(Error::Contract("max_response must be >= 2".into()));
    }
    if lambda < 0.0 {
        return Err(Error::Contract("lambda must be >= 0".into()));
    }
    let mut ids = assemble_context_ids(sample, vocab, max_context)?;
    let context_len = ids.len();

    let mut y: Vec<u32> = vocab.encode(&sample.response);
    y.truncate(max_response - 1);
    ids.extend(&y);
    ids.push(EOS);

    Ok(finish_sequence(ids, context_len, lambda))
}

/// The X side alone — persona and context turns, left-truncated, BOS last.
/// This is the decode-time prompt for a test sample.
pub fn assemble_context_ids(
    sample: &DialogueSample,
    vocab: &Vocabulary,
    max_context: usize,
) -> Result<Vec<u32>> {
    if max_context < 2 {
        return Err(Error::Contract("max_context must be >= 2".into()));
    }
    check_specials(vocab)?;
    let mut x_body: Vec<u32> = Vec::new();
    for sentence in &sample.persona {
        x_body.extend(vocab.encode(sentence));
        x_body.push(EOU);
    }
    for (i, turn) in sample.context.iter().enumerate() {
        if i > 0 {
            x_body.push(EOU);
        }
        x_body.extend(vocab.encode(turn));
    }
    if x_body.len() > max_context - 1 {
        x_body.drain(..x_body.len() - (max_context - 1));
    }
    x_body.push(BOS);
    Ok(x_body)
}

/// Builds a pre-training sequence from one plain-text document:
/// [BOS, tokens.., EOS] with every target carrying weight 1 (the whole
/// document is treated as "response"; X is the lone BOS).
pub fn assemble_text_sequence(
    document: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<AssembledSequence> {
    if max_len < 3 {
        return Err(Error::Contract("max_len must be >= 3".into()));
    }
    check_specials(vocab)?;
    let mut body = vocab.encode(document);
    body.truncate(max_len - 2);
    let mut ids = vec![BOS];
    ids.extend(&body);
    ids.push(EOS);
    Ok(finish_sequence(ids, 1, 0.0))
}

fn finish_sequence(ids: Vec<u32>, context_len: usize, lambda: f32) -> AssembledSequence {
    let total = ids.len();
    let mut loss_weights = Vec::with_capacity(total - 1);
    for target_pos in 1..total {
        loss_weights.push(if target_pos < context_len {
            lambda
        } else {
            1.0
        });
    }
    AssembledSequence {
        ids,
        context_len,
        loss_weights,
    }
}

fn check_specials(vocab: &Vocabulary) -> Result<()> {
    if vocab.len() <= EOU as usize {
        return Err(Error::Vocab(
            "vocabulary is missing the reserved special tokens".into(),
        ));
    }
    Ok(())
}

/// PAD-filled batch. `ids` and `loss_weights` are row-major B x T_max;
/// `loss_weights[b][t]` weights the prediction of `ids[b][t]` (column 0 and
/// all PAD columns are 0).
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub loss_weights: Vec<Vec<f32>>,
    /// Valid (non-PAD) length per row.
    pub lengths: Vec<usize>,
    /// Context length m per row (response targets start at column m).
    pub context_lens: Vec<usize>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    pub fn from_sequences(seqs: &[AssembledSequence]) -> Batch {
        let width = seqs.iter().map(|s| s.ids.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len());
        let mut weights = Vec::with_capacity(seqs.len());
        let mut lengths = Vec::with_capacity(seqs.len());
        let mut context_lens = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let mut row = seq.ids.clone();
            row.resize(width, PAD);
            let mut w = vec![0.0f32; width];
            for (i, &lw) in seq.loss_weights.iter().enumerate() {
                w[i + 1] = lw;
            }
            ids.push(row);
            weights.push(w);
            lengths.push(seq.ids.len());
            context_lens.push(seq.context_len);
        }
        Batch {
            ids,
            loss_weights: weights,
            lengths,
            context_lens,
        }
    }
}

/// Splits sequences into batches of `batch_size`, optionally shuffling with
/// a seeded RNG first. Equal seeds yield equal batch order.
pub fn make_batches(
    seqs: &[AssembledSequence],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let group: Vec<AssembledSequence> = chunk.iter().map(|&i| seqs[i].clone()).collect();
        batches.push(Batch::from_sequences(&group));
    }
    Ok(batches)
}
