//! Automatic evaluation: corpus BLEU-1..4 with brevity penalty (weighted
//! arithmetic combination plus the standard geometric-mean BLEU-4),
//! macro/micro Distinct-n ratios, and average response length.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing floor for an n-gram order with zero matches.
const EPSILON_PRECISION: f64 = 1e-9;

/// One hypothesis/reference pair, already split into metric tokens
/// (characters for character-vocabulary corpora, whitespace words for
/// English after BPE detokenization).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    /// Weighted arithmetic combination of BLEU-1..4.
    pub bleu: f64,
    /// Standard geometric-mean BLEU-4, reported alongside.
    pub bleu_geo: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub madist1: f64,
    pub madist2: f64,
    pub midist1: f64,
    pub midist2: f64,
    pub length: f64,
    pub pairs: usize,
}

/// Whitespace-delimited metric tokens.
pub fn whitespace_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Character metric tokens (whitespace skipped).
pub fn char_tokens(text: &str) -> Vec<String> {
    text.chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| c.to_string())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level clipped n-gram matches and hypothesis n-gram total.
pub fn modified_precision(pairs: &[EvalPair], n: usize) -> (usize, usize) {
    let mut matched = 0usize;
    let mut total = 0usize;
    for pair in pairs {
        let hyp = ngram_counts(&pair.hypothesis, n);
        let reference = ngram_counts(&pair.reference, n);
        for (gram, count) in &hyp {
            let clip = reference.get(gram).copied().unwrap_or(0);
            matched += (*count).min(clip);
        }
        total += pair.hypothesis.len().saturating_sub(n - 1);
    }
    (matched, total)
}

fn precision_value(matched: usize, total: usize) -> f64 {
    if matched == 0 || total == 0 {
        EPSILON_PRECISION
    } else {
        matched as f64 / total as f64
    }
}

/// exp(min(0, 1 - ref_len/hyp_len)) over corpus token totals.
pub fn brevity_penalty(pairs: &[EvalPair]) -> f64 {
    let hyp_len: usize = pairs.iter().map(|p| p.hypothesis.len()).sum();
    let ref_len: usize = pairs.iter().map(|p| p.reference.len()).sum();
    if hyp_len == 0 {
        return 0.0;
    }
    if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

fn check_nonempty(pairs_len: usize) -> Result<()> {
    if pairs_len == 0 {
        return Err(Error::Metric("empty corpus".into()));
    }
    Ok(())
}

/// Corpus BLEU at a single n-gram order: clipped precision times the
/// brevity penalty.
pub fn bleu_n(pairs: &[EvalPair], n: usize) -> Result<f64> {
    check_nonempty(pairs.len())?;
    if !(1..=4).contains(&n) {
        return Err(Error::Contract("bleu order must be in 1..=4".into()));
    }
    let (matched, total) = modified_precision(pairs, n);
    Ok(precision_value(matched, total) * brevity_penalty(pairs))
}

/// Weighted arithmetic sum of BLEU-1..4.
pub fn bleu_weighted(pairs: &[EvalPair], weights: &[f64; 4]) -> Result<f64> {
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract("bleu weights must sum to 1".into()));
    }
    let mut out = 0.0;
    for (i, w) in weights.iter().enumerate() {
        out += w * bleu_n(pairs, i + 1)?;
    }
    Ok(out)
}

/// Standard BLEU-4: brevity penalty times the geometric mean of the four
/// clipped precisions (epsilon-smoothed at zero-match orders).
pub fn bleu_geometric(pairs: &[EvalPair]) -> Result<f64> {
    check_nonempty(pairs.len())?;
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (matched, total) = modified_precision(pairs, n);
        log_sum += 0.25 * precision_value(matched, total).ln();
    }
    Ok(brevity_penalty(pairs) * log_sum.exp())
}

/// Corpus-pooled distinct ratio: unique n-grams / total n-grams.
pub fn distinct_micro(responses: &[Vec<String>], n: usize) -> Result<f64> {
    let mut unique: HashSet<&[String]> = HashSet::new();
    let mut total = 0usize;
    for resp in responses {
        if resp.len() >= n {
            for gram in resp.windows(n) {
                unique.insert(gram);
            }
            total += resp.len() - n + 1;
        }
    }
    if total == 0 {
        return Err(Error::Metric(format!("no {n}-grams in any response")));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Instance-averaged distinct ratio; responses shorter than n tokens are
/// skipped.
pub fn distinct_macro(responses: &[Vec<String>], n: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut counted = 0usize;
    for resp in responses {
        if resp.len() < n {
            continue;
        }
        let total = resp.len() - n + 1;
        let unique: HashSet<&[String]> = resp.windows(n).collect();
        sum += unique.len() as f64 / total as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Metric(format!(
            "every response is shorter than {n} tokens"
        )));
    }
    Ok(sum / counted as f64)
}

/// Mean token count (empty responses count as 0).
pub fn avg_length(responses: &[Vec<String>]) -> Result<f64> {
    check_nonempty(responses.len()).map_err(|_| Error::Metric("empty corpus".into()))?;
    let total: usize = responses.iter().map(Vec::len).sum();
    Ok(total as f64 / responses.len() as f64)
}

/// Full report over aligned hypothesis/reference token sequences.
pub fn evaluate_corpus(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<MetricReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Metric(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    check_nonempty(hyps.len())?;
    let pairs: Vec<EvalPair> = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| EvalPair {
            hypothesis: h.clone(),
            reference: r.clone(),
        })
        .collect();
    Ok(MetricReport {
        bleu: bleu_weighted(&pairs, &[0.25; 4])?,
        bleu_geo: bleu_geometric(&pairs)?,
        b1: bleu_n(&pairs, 1)?,
        b2: bleu_n(&pairs, 2)?,
        b3: bleu_n(&pairs, 3)?,
        b4: bleu_n(&pairs, 4)?,
        madist1: distinct_macro(hyps, 1)?,
        madist2: distinct_macro(hyps, 2).unwrap_or(0.0),
        midist1: distinct_micro(hyps, 1)?,
        midist2: distinct_micro(hyps, 2).unwrap_or(0.0),
        length: avg_length(hyps)?,
        pairs: hyps.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(texts: &[&str]) -> Vec<Vec<String>> {
        texts.iter().map(|t| whitespace_tokens(t)).collect()
    }

    fn pairs(hyps: &[&str], refs: &[&str]) -> Vec<EvalPair> {
        hyps.iter()
            .zip(refs)
            .map(|(h, r)| EvalPair {
                hypothesis: whitespace_tokens(h),
                reference: whitespace_tokens(r),
            })
            .collect()
    }

    #[test]
    fn identity_corpus_scores_one() {
        let p = pairs(&["a b c d", "x y z w"], &["a b c d", "x y z w"]);
        for n in 1..=4 {
            assert_eq!(bleu_n(&p, n).unwrap(), 1.0);
        }
        assert_eq!(bleu_weighted(&p, &[0.25; 4]).unwrap(), 1.0);
        assert!((bleu_geometric(&p).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            bleu_weighted(&p, &[1.0, 0.0, 0.0, 0.0]).unwrap(),
            bleu_n(&p, 1).unwrap()
        );
    }

    #[test]
    fn hand_unigram_and_bigram_case() {
        // hyp "a b c" vs ref "a b d": b1 = 2/3 (BP = 1), b2 = 1/2
        let p = pairs(&["a b c"], &["a b d"]);
        assert!((bleu_n(&p, 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((bleu_n(&p, 2).unwrap() - 0.5).abs() < 1e-12);
        // no trigram in a 3-token pair matches: epsilon floor
        assert!(bleu_n(&p, 3).unwrap() <= EPSILON_PRECISION);
        let w = bleu_weighted(&p, &[0.25; 4]).unwrap();
        let hand = 0.25 * (2.0 / 3.0) + 0.25 * 0.5 + 0.5 * EPSILON_PRECISION;
        assert!((w - hand).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_punishes_short_hypotheses() {
        let p = pairs(&["a b"], &["a b c d"]);
        assert!((brevity_penalty(&p) - (1.0f64 - 2.0).exp()).abs() < 1e-12);
        let p = pairs(&["a b c d e"], &["a b"]);
        assert_eq!(brevity_penalty(&p), 1.0);
    }

    #[test]
    fn clipping_caps_repeated_ngrams() {
        // "the the the" vs "the cat": only one "the" may count
        let p = pairs(&["the the the"], &["the cat"]);
        let (matched, total) = modified_precision(&p, 1);
        assert_eq!((matched, total), (1, 3));
    }

    #[test]
    fn precision_is_monotone_nonincreasing_in_order() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(15);
        let alphabet = ["a", "b", "c", "d", "e"];
        for _ in 0..30 {
            let mut hyps = Vec::new();
            let mut refs = Vec::new();
            for _ in 0..5 {
                let len = 4 + (rng.random::<u32>() % 8) as usize;
                let h: Vec<String> = (0..len)
                    .map(|_| alphabet[rng.random::<u32>() as usize % 5].to_string())
                    .collect();
                let r: Vec<String> = (0..len)
                    .map(|_| alphabet[rng.random::<u32>() as usize % 5].to_string())
                    .collect();
                hyps.push(h);
                refs.push(r);
            }
            let p: Vec<EvalPair> = hyps
                .iter()
                .zip(&refs)
                .map(|(h, r)| EvalPair {
                    hypothesis: h.clone(),
                    reference: r.clone(),
                })
                .collect();
            let mut prev = 1.0f64;
            for n in 1..=4 {
                let (m, t) = modified_precision(&p, n);
                let prec = if t == 0 { 0.0 } else { m as f64 / t as f64 };
                assert!(prec <= prev + 1e-12, "order {n}: {prec} > {prev}");
                prev = prec;
            }
        }
    }

    #[test]
    fn distinct_hand_fixtures() {
        // ["a b a", "a c"]: micro-1 = 3/5, macro-1 = mean(2/3, 1)
        let rs = toks(&["a b a", "a c"]);
        assert!((distinct_micro(&rs, 1).unwrap() - 0.6).abs() < 1e-12);
        assert!((distinct_macro(&rs, 1).unwrap() - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn distinct_degenerate_cases() {
        let single = toks(&["a b c"]);
        assert_eq!(distinct_micro(&single, 1).unwrap(), 1.0);
        assert_eq!(
            distinct_macro(&single, 1).unwrap(),
            distinct_micro(&single, 1).unwrap()
        );

        // N identical single-token responses: micro = 1/N
        let same = toks(&["a", "a", "a", "a"]);
        assert!((distinct_micro(&same, 1).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(distinct_macro(&same, 1).unwrap(), 1.0);

        assert!(distinct_micro(&toks(&["a"]), 2).is_err());
        assert!(distinct_macro(&toks(&["a"]), 2).is_err());
    }

    #[test]
    fn duplicating_corpus_keeps_macro_and_lowers_micro() {
        let rs = toks(&["a b a", "a c", "b d e"]);
        let mut doubled = rs.clone();
        doubled.extend(rs.clone());
        for n in 1..=2 {
            let macro_once = distinct_macro(&rs, n).unwrap();
            let macro_twice = distinct_macro(&doubled, n).unwrap();
            assert!((macro_once - macro_twice).abs() < 1e-12);
            let micro_once = distinct_micro(&rs, n).unwrap();
            let micro_twice = distinct_micro(&doubled, n).unwrap();
            assert!(micro_twice < micro_once);
        }
    }

    #[test]
    fn avg_length_cases() {
        let rs = toks(&["a b", "a b c"]);
        assert_eq!(avg_length(&rs).unwrap(), 2.5);
        let same = toks(&["q w e", "q w e"]);
        assert_eq!(avg_length(&same).unwrap(), 3.0);
        let with_empty = toks(&["", "a b"]);
        assert_eq!(avg_length(&with_empty).unwrap(), 1.0);
        assert!(avg_length(&[]).is_err());
    }

    #[test]
    fn order_invariance() {
        let hyps = toks(&["a b a", "a c", "b d"]);
        let refs = toks(&["a b c", "a d", "b d"]);
        let fwd = evaluate_corpus(&hyps, &refs).unwrap();
        let rev_h: Vec<_> = hyps.iter().rev().cloned().collect();
        let rev_r: Vec<_> = refs.iter().rev().cloned().collect();
        let rev = evaluate_corpus(&rev_h, &rev_r).unwrap();
        for (a, b) in [
            (fwd.bleu, rev.bleu),
            (fwd.b1, rev.b1),
            (fwd.madist1, rev.madist1),
            (fwd.midist2, rev.midist2),
            (fwd.length, rev.length),
        ] {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn report_has_tablelike_fields_and_identity_scores() {
        // every response has >= 4 tokens so all four orders hit 1.0
        let hyps = toks(&["a b a c", "a c d e"]);
        let report = evaluate_corpus(&hyps, &hyps).unwrap();
        assert_eq!(report.bleu, 1.0);
        assert_eq!(report.b1, 1.0);
        assert_eq!(report.b4, 1.0);
        assert_eq!(report.pairs, 2);
        assert!((report.midist1 - 5.0 / 8.0).abs() < 1e-12);
        assert!((report.madist1 - (3.0 / 4.0 + 1.0) / 2.0).abs() < 1e-12);
        let json = serde_json::to_value(&report).unwrap();
        for key in [
            "bleu", "bleu_geo", "b1", "b2", "b3", "b4", "madist1", "madist2", "midist1", "midist2",
            "length", "pairs",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert!(evaluate_corpus(&hyps, &toks(&["a"])).is_err());
    }

    #[test]
    fn char_tokens_skip_whitespace() {
        assert_eq!(char_tokens("ab c"), vec!["a", "b", "c"]);
        assert!(char_tokens("").is_empty());
    }
}
