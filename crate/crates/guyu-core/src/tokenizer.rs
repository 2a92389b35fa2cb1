//! Character-level and BPE vocabularies.
//!
//! Character mode covers corpora tokenized as raw characters; BPE mode uses
//! greedy most-frequent-pair merges over whitespace-delimited words, with the
//! end-of-word marker `</w>` fused onto each word's final symbol.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const EOU: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<eou>"];

const END_OF_WORD: &str = "</w>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabMode {
    Character,
    Bpe,
}

/// Immutable token <-> id mapping with the five fixed special ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    mode: VocabMode,
    /// BPE merges in training order; empty in character mode.
    merges: Vec<(String, String)>,
}

impl Vocabulary {
    fn with_specials(mode: VocabMode) -> Self {
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            mode,
            merges: Vec::new(),
        };
        for tok in SPECIAL_TOKENS {
            v.push_token(tok.to_string());
        }
        v
    }

    fn push_token(&mut self, token: String) -> u32 {
        debug_assert!(
            !self.token_to_id.contains_key(&token),
            "duplicate token {token:?}"
        );
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Result<&str> {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| {
                Error::Index(format!("token id {} >= vocabulary size {}", id, self.len()))
            })
    }

    pub fn is_special(id: u32) -> bool {
        id < SPECIAL_TOKENS.len() as u32
    }

    /// One entry per distinct character with frequency >= `min_count`, after
    /// the specials; ids ordered by descending frequency, ties by code point.
    pub fn build_char(corpus: impl Iterator<Item = String>, min_count: usize) -> Result<Self> {
        if min_count < 1 {
            return Err(Error::Contract("min_count must be >= 1".into()));
        }
        let mut counts: BTreeMap<char, usize> = BTreeMap::new();
        let mut saw_text = false;
        for line in corpus {
            saw_text = true;
            for ch in line.chars() {
                *counts.entry(ch).or_insert(0) += 1;
            }
        }
        if !saw_text {
            return Err(Error::Vocab(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut entries: Vec<(char, usize)> = counts
            .into_iter()
            .filter(|&(_, n)| n >= min_count)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut v = Self::with_specials(VocabMode::Character);
        for (ch, _) in entries {
            v.push_token(ch.to_string());
        }
        Ok(v)
    }

    /// Greedy most-frequent-pair BPE. Merging stops when the vocabulary
    /// reaches `target_size` or no pair occurs at least twice; frequency ties
    /// break toward the lexicographically smaller (left, right) pair.
    pub fn train_bpe(corpus: impl Iterator<Item = String>, target_size: usize) -> Result<Self> {
        let mut word_counts: HashMap<String, usize> = HashMap::new();
        let mut word_order: Vec<String> = Vec::new();
        for line in corpus {
            for word in line.split_whitespace() {
                match word_counts.get_mut(word) {
                    Some(n) => *n += 1,
                    None => {
                        word_counts.insert(word.to_string(), 1);
                        word_order.push(word.to_string());
                    }
                }
            }
        }
        if word_order.is_empty() {
            return Err(Error::Vocab("cannot train BPE on an empty corpus".into()));
        }

        // Words as symbol strings, base symbols counted for id ordering.
        let mut words: Vec<(Vec<String>, usize)> = Vec::with_capacity(word_order.len());
        let mut symbol_freq: BTreeMap<String, usize> = BTreeMap::new();
        for w in &word_order {
            let count = word_counts[w];
            let chars: Vec<char> = w.chars().collect();
            let mut symbols = Vec::with_capacity(chars.len());
            for (i, ch) in chars.iter().enumerate() {
                let mut s = ch.to_string();
                if i + 1 == chars.len() {
                    s.push_str(END_OF_WORD);
                }
                *symbol_freq.entry(s.clone()).or_insert(0) += count;
                symbols.push(s);
            }
            words.push((symbols, count));
        }

        let base_count = symbol_freq.len();
        if target_size <= base_count + SPECIAL_TOKENS.len() {
            return Err(Error::Vocab(format!(
                "target_size {} must exceed {} base symbols + {} specials",
                target_size,
                base_count,
                SPECIAL_TOKENS.len()
            )));
        }

        let mut v = Self::with_specials(VocabMode::Bpe);
        let mut base: Vec<(String, usize)> = symbol_freq.into_iter().collect();
        base.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        for (sym, _) in base {
            v.push_token(sym);
        }

        let mut pair_counts: HashMap<(String, String), i64> = HashMap::new();
        let mut pair_words: HashMap<(String, String), BTreeSet<usize>> = HashMap::new();
        for (wi, (symbols, count)) in words.iter().enumerate() {
            for pair in symbols.windows(2) {
                let key = (pair[0].clone(), pair[1].clone());
                *pair_counts.entry(key.clone()).or_insert(0) += *count as i64;
                pair_words.entry(key).or_default().insert(wi);
            }
        }

        // Max-heap keyed by (count, lexicographically smaller pair first);
        // stale entries are skipped when their recorded count is outdated.
        #[derive(PartialEq, Eq)]
        struct Entry {
            count: i64,
            pair: (String, String),
        }
        impl Ord for Entry {
            fn cmp(&self, other: &Self) -> std::cmp::Ordering {
                self.count
                    .cmp(&other.count)
                    .then_with(|| other.pair.cmp(&self.pair))
            }
        }
        impl PartialOrd for Entry {
            fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(other))
            }
        }
        let mut heap: BinaryHeap<Entry> = pair_counts
            .iter()
            .map(|(pair, &count)| Entry {
                count,
                pair: pair.clone(),
            })
            .collect();

        while v.len() < target_size {
            let best = loop {
                match heap.pop() {
                    None => break None,
                    Some(e) => {
                        if pair_counts.get(&e.pair).copied().unwrap_or(0) == e.count {
                            break Some(e);
                        }
                    }
                }
            };
            let Some(Entry { count, pair }) = best else {
                break;
            };
            if count < 2 {
                break;
            }

            let merged = format!("{}{}", pair.0, pair.1);
            v.merges.push(pair.clone());
            // Distinct merge paths can produce an identical string; record
            // the merge but keep one vocabulary entry.
            if v.id_of(&merged).is_none() {
                v.push_token(merged.clone());
            }

            let touched: Vec<usize> = pair_words
                .remove(&pair)
                .map(|s| s.into_iter().collect())
                .unwrap_or_default();
            pair_counts.remove(&pair);
            let mut dirty: BTreeSet<(String, String)> = BTreeSet::new();
            for wi in touched {
                let (symbols, count) = &mut words[wi];
                let wcount = *count as i64;
                for old in symbols.windows(2) {
                    let key = (old[0].clone(), old[1].clone());
                    if let Some(c) = pair_counts.get_mut(&key) {
                        *c -= wcount;
                        dirty.insert(key.clone());
                    }
                    if let Some(set) = pair_words.get_mut(&key) {
                        set.remove(&wi);
                    }
                }
                *symbols = merge_word(symbols, &pair, &merged);
                for new in symbols.windows(2) {
                    let key = (new[0].clone(), new[1].clone());
                    *pair_counts.entry(key.clone()).or_insert(0) += wcount;
                    pair_words.entry(key.clone()).or_default().insert(wi);
                    dirty.insert(key);
                }
            }
            for key in dirty {
                let c = pair_counts.get(&key).copied().unwrap_or(0);
                if c <= 0 {
                    pair_counts.remove(&key);
                    pair_words.remove(&key);
                } else {
                    heap.push(Entry {
                        count: c,
                        pair: key,
                    });
                }
            }
        }
        Ok(v)
    }

    /// Maps text to token ids; unknown symbols become UNK. Never emits
    /// special ids other than UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        match self.mode {
            VocabMode::Character => text
                .chars()
                .map(|ch| {
                    let mut buf = [0u8; 4];
                    self.id_of(ch.encode_utf8(&mut buf)).unwrap_or(UNK)
                })
                .collect(),
            VocabMode::Bpe => {
                let mut out = Vec::new();
                for word in text.split_whitespace() {
                    for sym in self.bpe_word(word) {
                        // A symbol that collides with a reserved token string
                        // degrades to UNK rather than leaking a special id.
                        out.push(match self.id_of(&sym) {
                            Some(id) if !Self::is_special(id) => id,
                            _ => UNK,
                        });
                    }
                }
                out
            }
        }
    }

    fn bpe_word(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        let mut symbols: Vec<String> = chars
            .iter()
            .enumerate()
            .map(|(i, ch)| {
                let mut s = ch.to_string();
                if i + 1 == chars.len() {
                    s.push_str(END_OF_WORD);
                }
                s
            })
            .collect();
        for pair in &self.merges {
            if symbols.len() < 2 {
                break;
            }
            let merged = format!("{}{}", pair.0, pair.1);
            symbols = merge_word(&symbols, pair, &merged);
        }
        symbols
    }

    /// Inverse of `encode` on in-vocabulary text; special ids render empty.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        match self.mode {
            VocabMode::Character => {
                for &id in ids {
                    let tok = self.token_of(id)?;
                    if !Self::is_special(id) {
                        out.push_str(tok);
                    }
                }
            }
            VocabMode::Bpe => {
                let mut word = String::new();
                for &id in ids {
                    let tok = self.token_of(id)?;
                    if Self::is_special(id) {
                        continue;
                    }
                    if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
                        word.push_str(stem);
                        if !out.is_empty() {
                            out.push(' ');
                        }
                        out.push_str(&word);
                        word.clear();
                    } else {
                        word.push_str(tok);
                    }
                }
                if !word.is_empty() {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(&word);
                }
            }
        }
        Ok(out)
    }

    /// Serializes as `token<TAB>id` lines (control characters escaped), then
    /// a `#MERGES` section in BPE mode with one `left<SPACE>right` per line.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (id, tok) in self.id_to_token.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}", escape(tok), id);
        }
        if self.mode == VocabMode::Bpe {
            out.push_str("#MERGES\n");
            for (l, r) in &self.merges {
                let _ = writeln!(out, "{} {}", escape(l), escape(r));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn from_file_string(content: &str) -> Result<Self> {
        let mut id_to_token: Vec<(u32, String)> = Vec::new();
        let mut merges = Vec::new();
        let mut in_merges = false;
        let mut saw_merges_header = false;
        for (lineno, line) in content.lines().enumerate() {
            if line == "#MERGES" {
                in_merges = true;
                saw_merges_header = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if in_merges {
                let (l, r) = line.split_once(' ').ok_or_else(|| {
                    Error::Vocab(format!("line {}: malformed merge {:?}", lineno + 1, line))
                })?;
                merges.push((unescape(l)?, unescape(r)?));
            } else {
                let (tok, id) = line.rsplit_once('\t').ok_or_else(|| {
                    Error::Vocab(format!("line {}: expected token<TAB>id", lineno + 1))
                })?;
                let id: u32 = id
                    .parse()
                    .map_err(|_| Error::Vocab(format!("line {}: bad id {:?}", lineno + 1, id)))?;
                id_to_token.push((id, unescape(tok)?));
            }
        }
        id_to_token.sort_by_key(|(id, _)| *id);
        for (want, (got, _)) in id_to_token.iter().enumerate() {
            if *got != want as u32 {
                return Err(Error::Vocab(format!("ids are not dense: missing {}", want)));
            }
        }
        let mode = if saw_merges_header {
            VocabMode::Bpe
        } else {
            VocabMode::Character
        };
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            mode,
            merges,
        };
        for (_, tok) in id_to_token {
            v.push_token(tok);
        }
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if v.id_to_token.get(i).map(String::as_str) != Some(*want) {
                return Err(Error::Vocab(format!(
                    "special token {} must be {:?} at id {}",
                    i, want, i
                )));
            }
        }
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        Self::from_file_string(&content)
    }

    /// Hex SHA-256 of the canonical file serialization; used to tie
    /// checkpoints to the vocabulary they were trained with.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            let _ = write!(out, "{:02x}", byte);
        }
        out
    }
}

fn merge_word(symbols: &[String], pair: &(String, String), merged: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

fn escape(token: &str) -> String {
    let mut out = String::with_capacity(token.len());
    for ch in token.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            ' ' => out.push_str("\\s"),
            _ => out.push(ch),
        }
    }
    out
}

fn unescape(token: &str) -> Result<String> {
    let mut out = String::with_capacity(token.len());
    let mut chars = token.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('s') => out.push(' '),
            other => {
                return Err(Error::Vocab(format!("bad escape \\{:?}", other)));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(text: &str) -> impl Iterator<Item = String> + '_ {
        text.lines().map(String::from)
    }

    #[test]
    fn char_vocab_counts_and_ordering() {
        let v = Vocabulary::build_char(lines("aab"), 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id_of("a"), Some(5)); // freq 2 before freq 1
        assert_eq!(v.id_of("b"), Some(6));

        let v = Vocabulary::build_char(lines("aab"), 2).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id_of("b"), None);
    }

    #[test]
    fn char_vocab_is_deterministic() {
        let a = Vocabulary::build_char(lines("the cat sat"), 1).unwrap();
        let b = Vocabulary::build_char(lines("the cat sat"), 1).unwrap();
        assert_eq!(a.to_file_string(), b.to_file_string());
    }

    #[test]
    fn char_vocab_rejects_empty_corpus() {
        assert!(Vocabulary::build_char(std::iter::empty(), 1).is_err());
    }

    #[test]
    fn char_encode_decode() {
        let v = Vocabulary::build_char(lines("aab"), 1).unwrap();
        assert_eq!(v.encode("abc"), vec![5, 6, UNK]);
        assert_eq!(v.encode(""), Vec::<u32>::new());
        assert_eq!(v.decode(&[5, 6]).unwrap(), "ab");
        assert_eq!(v.decode(&[BOS, 5, EOS]).unwrap(), "a");
        assert!(v.decode(&[99]).is_err());
    }

    #[test]
    fn bpe_first_merge_is_most_frequent_pair() {
        // "ab" x3: the only pair is (a, b</w>).
        let v = Vocabulary::train_bpe(lines("ab ab ab"), 100).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), format!("b{END_OF_WORD}")));
        assert_eq!(v.encode("ab ab"), {
            let id = v.id_of(&format!("ab{END_OF_WORD}")).unwrap();
            vec![id, id]
        });
    }

    #[test]
    fn bpe_prefers_higher_frequency_pair() {
        // "aaab" x2: (a,a) occurs 4 times, (a,b</w>) twice.
        let v = Vocabulary::train_bpe(lines("aaab aaab"), 100).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn bpe_unique_symbols_yield_no_merges() {
        let v = Vocabulary::train_bpe(lines("q w e r t y"), 100).unwrap();
        assert!(v.merges().is_empty());
    }

    #[test]
    fn bpe_respects_target_size() {
        let corpus = "the cat sat on the mat the cat sat";
        let v = Vocabulary::train_bpe(lines(corpus), 18).unwrap();
        assert!(v.len() <= 18);
        let big = Vocabulary::train_bpe(lines(corpus), 100).unwrap();
        let again = Vocabulary::train_bpe(lines(corpus), 100).unwrap();
        assert_eq!(big.merges(), again.merges());
    }

    #[test]
    fn bpe_rejects_tiny_target() {
        assert!(Vocabulary::train_bpe(lines("ab ab"), 7).is_err());
    }

    #[test]
    fn bpe_roundtrip_and_unknown_residue() {
        let v = Vocabulary::train_bpe(lines("hello world hello"), 64).unwrap();
        let ids = v.encode("hello world");
        assert_eq!(v.decode(&ids).unwrap(), "hello world");
        assert!(ids.iter().all(|&id| (id as usize) < v.len()));
        let ids = v.encode("hexo");
        assert!(ids.contains(&UNK));
    }

    #[test]
    fn vocab_file_roundtrip() {
        let v = Vocabulary::train_bpe(lines("the cat sat on the mat"), 40).unwrap();
        let text = v.to_file_string();
        let back = Vocabulary::from_file_string(&text).unwrap();
        assert_eq!(back.to_file_string(), text);
        assert_eq!(back.content_hash(), v.content_hash());
        assert_eq!(back.merges(), v.merges());

        let c = Vocabulary::build_char(lines("abc abc"), 1).unwrap();
        let back = Vocabulary::from_file_string(&c.to_file_string()).unwrap();
        assert_eq!(back.mode(), VocabMode::Character);
        assert_eq!(back.encode("abc"), c.encode("abc"));
    }

    #[test]
    fn encode_never_emits_non_unk_specials() {
        let v = Vocabulary::build_char(lines("<pad> hi"), 1).unwrap();
        let ids = v.encode("<pad><bos>");
        assert!(!ids.contains(&PAD));
        assert!(!ids.contains(&BOS));
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn char_roundtrip_on_in_vocab_text(s in "[abcde ]{0,40}") {
                let v = Vocabulary::build_char(lines("abcde abcde"), 1).unwrap();
                let ids = v.encode(&s);
                prop_assert_eq!(v.decode(&ids).unwrap(), s);
                prop_assert!(ids.iter().all(|&id| (id as usize) < v.len()));
            }

            #[test]
            fn bpe_roundtrip_on_in_vocab_words(words in proptest::collection::vec("(cat|dog|fish|go)", 0..8)) {
                let v = Vocabulary::train_bpe(lines("cat dog fish go cat dog fish go"), 64).unwrap();
                let text = words.join(" ");
                let ids = v.encode(&text);
                prop_assert_eq!(v.decode(&ids).unwrap(), text);
                prop_assert!(ids.iter().all(|&id| (id as usize) < v.len()));
            }
        }
    }
}
