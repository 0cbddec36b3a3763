//! Corpus-level translation quality metrics: BLEU-4, chrF, and CharacTER.
//!
//! All three are case-sensitive and apply no normalization beyond their own
//! tokenization: BLEU splits on whitespace, chrF drops whitespace entirely
//! (so character n-grams cross word boundaries), CharacTER compares
//! space-joined words. Higher is better for BLEU and chrF, lower for
//! CharacTER.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use thiserror::Error;

/// Longest word block the CharacTER shift search will move at once.
pub const MAX_SHIFT_WORDS: usize = 10;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics: {0}")]
    Usage(String),
    #[error("metrics io: {0}")]
    Io(#[from] std::io::Error),
}

fn usage_err<S: Into<String>>(msg: S) -> MetricsError {
    MetricsError::Usage(msg.into())
}

/// One scored metric: the headline value plus the intermediate quantities it
/// was computed from, in a stable order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricScore {
    pub name: &'static str,
    pub value: f64,
    pub components: Vec<(&'static str, f64)>,
}

/// Which metrics to run, e.g. parsed from `--metrics bleu,chrf,character`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Bleu,
    Chrf,
    Character,
}

impl MetricKind {
    pub fn parse(s: &str) -> Result<MetricKind, MetricsError> {
        match s {
            "bleu" => Ok(MetricKind::Bleu),
            "chrf" => Ok(MetricKind::Chrf),
            "character" => Ok(MetricKind::Character),
            other => Err(usage_err(format!(
                "unknown metric {other:?} (expected bleu, chrf or character)"
            ))),
        }
    }
}

fn check_corpus<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<(), MetricsError> {
    if hyps.len() != refs.len() {
        return Err(usage_err(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(usage_err("empty corpus"));
    }
    Ok(())
}

/// Unit-cost character edit distance (insert, delete, substitute).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    lev_chars(&a, &b)
}

fn lev_chars(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn word_ngrams(words: &[&str], n: usize) -> HashMap<Vec<String>, u64> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            let key: Vec<String> = w.iter().map(|s| s.to_string()).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with modified 1..4-gram precisions and a brevity penalty,
/// reported on a 0..100 scale. Tokens are whitespace-separated words; counts
/// are clipped against the single reference and summed over the corpus
/// before dividing. No smoothing: if any precision is zero (including a
/// zero denominator, as with sub-4-word corpora) the score is zero, though
/// the components still report the individual precisions.
pub fn bleu4<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<MetricScore, MetricsError> {
    check_corpus(hyps, refs)?;
    let mut matched = [0u64; 4];
    let mut total = [0u64; 4];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (hyp, reference) in hyps.iter().zip(refs) {
        let hyp_words: Vec<&str> = hyp.as_ref().split_whitespace().collect();
        let ref_words: Vec<&str> = reference.as_ref().split_whitespace().collect();
        hyp_len += hyp_words.len() as u64;
        ref_len += ref_words.len() as u64;
        for n in 1..=4 {
            let hyp_counts = word_ngrams(&hyp_words, n);
            let ref_counts = word_ngrams(&ref_words, n);
            for (gram, count) in &hyp_counts {
                total[n - 1] += count;
                matched[n - 1] += (*count).min(ref_counts.get(gram).copied().unwrap_or(0));
            }
        }
    }
    let precisions: Vec<f64> = (0..4)
        .map(|i| {
            if total[i] == 0 {
                0.0
            } else {
                matched[i] as f64 / total[i] as f64
            }
        })
        .collect();
    let bp = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0)
    };
    let value = if precisions.iter().any(|&p| p == 0.0) || bp == 0.0 {
        0.0
    } else {
        let mean_log: f64 = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        100.0 * bp * mean_log.exp()
    };
    Ok(MetricScore {
        name: "BLEU",
        value,
        components: vec![
            ("p1", precisions[0]),
            ("p2", precisions[1]),
            ("p3", precisions[2]),
            ("p4", precisions[3]),
            ("bp", bp),
            ("hyp_len", hyp_len as f64),
            ("ref_len", ref_len as f64),
        ],
    })
}

fn chrf_chars(text: &str) -> Vec<char> {
    text.split_whitespace().flat_map(|w| w.chars()).collect()
}

fn char_ngrams(chars: &[char], n: usize) -> HashMap<Vec<char>, u64> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// chrF: character n-gram F-score with whitespace removed before n-gram
/// extraction, so n-grams run across word boundaries of the de-spaced text.
/// Precision and recall are computed per order from corpus-summed counts and
/// averaged uniformly; an order with a zero denominator on one side
/// contributes zero there. Orders where neither corpus has any n-grams (all
/// text shorter than n) are excluded from the average so that identical
/// corpora score 100 regardless of length; if every order is empty both
/// corpora are empty and the score is 100 by the same identity rule.
pub fn chrf<S: AsRef<str>>(
    hyps: &[S],
    refs: &[S],
    max_n: usize,
    beta: f64,
) -> Result<MetricScore, MetricsError> {
    check_corpus(hyps, refs)?;
    if max_n == 0 {
        return Err(usage_err("chrf max_n must be positive"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(usage_err(format!("chrf beta must be finite and > 0, got {beta}")));
    }
    let mut matched = vec![0u64; max_n];
    let mut hyp_total = vec![0u64; max_n];
    let mut ref_total = vec![0u64; max_n];
    for (hyp, reference) in hyps.iter().zip(refs) {
        let h = chrf_chars(hyp.as_ref());
        let r = chrf_chars(reference.as_ref());
        for n in 1..=max_n {
            let hc = char_ngrams(&h, n);
            let rc = char_ngrams(&r, n);
            for (gram, count) in &hc {
                hyp_total[n - 1] += count;
                matched[n - 1] += (*count).min(rc.get(gram).copied().unwrap_or(0));
            }
            ref_total[n - 1] += rc.values().sum::<u64>();
        }
    }
    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..max_n {
        if hyp_total[n] == 0 && ref_total[n] == 0 {
            continue;
        }
        orders += 1;
        if hyp_total[n] > 0 {
            precision_sum += matched[n] as f64 / hyp_total[n] as f64;
        }
        if ref_total[n] > 0 {
            recall_sum += matched[n] as f64 / ref_total[n] as f64;
        }
    }
    let (precision, recall) = if orders == 0 {
        (1.0, 1.0)
    } else {
        (precision_sum / orders as f64, recall_sum / orders as f64)
    };
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    let value = if denom == 0.0 {
        0.0
    } else {
        100.0 * (1.0 + b2) * precision * recall / denom
    };
    Ok(MetricScore {
        name: "CHRF",
        value,
        components: vec![
            ("precision", precision),
            ("recall", recall),
            ("beta", beta),
            ("orders", orders as f64),
        ],
    })
}

fn shifted_words(words: &[String], i: usize, len: usize, j: usize) -> Vec<String> {
    let mut rest: Vec<String> = Vec::with_capacity(words.len() - len);
    rest.extend_from_slice(&words[..i]);
    rest.extend_from_slice(&words[i + len..]);
    let mut out = Vec::with_capacity(words.len());
    out.extend_from_slice(&rest[..j]);
    out.extend_from_slice(&words[i..i + len]);
    out.extend_from_slice(&rest[j..]);
    out
}

/// CharacTER: character-level edit rate with word shifts. Per sentence, a
/// greedy search repeatedly applies the single word-block shift that most
/// reduces the character distance to the reference (strict reduction
/// required, ties broken by scan order), where a block is a contiguous run
/// of at most [`MAX_SHIFT_WORDS`] hypothesis words that also occurs
/// contiguously in the reference. Each shift costs one point; the sentence
/// score is (shifts + remaining character edits) divided by the hypothesis
/// character count, and the corpus value is the sentence mean times 100.
/// Lower is better and values above 100 are possible. An empty hypothesis
/// divides by one instead and is counted in the `empty_hypotheses`
/// component.
pub fn character_score<S: AsRef<str>>(
    hyps: &[S],
    refs: &[S],
) -> Result<MetricScore, MetricsError> {
    check_corpus(hyps, refs)?;
    let mut total_shifts = 0u64;
    let mut total_edits = 0u64;
    let mut empty = 0u64;
    let mut rate_sum = 0.0;
    for (hyp, reference) in hyps.iter().zip(refs) {
        let hyp_words: Vec<String> =
            hyp.as_ref().split_whitespace().map(|w| w.to_string()).collect();
        let ref_words: Vec<String> =
            reference.as_ref().split_whitespace().map(|w| w.to_string()).collect();
        let ref_joined: Vec<char> = ref_words.join(" ").chars().collect();
        if hyp_words.is_empty() {
            let edits = ref_joined.len() as u64;
            total_edits += edits;
            empty += 1;
            rate_sum += edits as f64;
            continue;
        }
        let denom: usize = hyp_words.join(" ").chars().count();
        let (shifts, edits) = shift_search(hyp_words, &ref_words, &ref_joined);
        total_shifts += shifts;
        total_edits += edits;
        rate_sum += (shifts + edits) as f64 / denom as f64;
    }
    let value = 100.0 * rate_sum / hyps.len() as f64;
    Ok(MetricScore {
        name: "CharacTER",
        value,
        components: vec![
            ("shifts", total_shifts as f64),
            ("edits", total_edits as f64),
            ("empty_hypotheses", empty as f64),
        ],
    })
}

fn shift_search(
    mut words: Vec<String>,
    ref_words: &[String],
    ref_joined: &[char],
) -> (u64, u64) {
    let mut ref_spans: HashSet<&[String]> = HashSet::new();
    for i in 0..ref_words.len() {
        for len in 1..=MAX_SHIFT_WORDS.min(ref_words.len() - i) {
            ref_spans.insert(&ref_words[i..i + len]);
        }
    }
    let join_chars = |w: &[String]| -> Vec<char> { w.join(" ").chars().collect() };
    let mut cache: HashMap<String, usize> = HashMap::new();
    let mut shifts = 0u64;
    let mut cur = lev_chars(&join_chars(&words), ref_joined);
    while cur > 0 {
        let n = words.len();
        let mut best: Option<(usize, usize, usize, usize)> = None;
        for i in 0..n {
            for len in 1..=MAX_SHIFT_WORDS.min(n - i) {
                if !ref_spans.contains(&words[i..i + len]) {
                    continue;
                }
                for j in 0..=(n - len) {
                    if j == i {
                        continue;
                    }
                    let candidate = shifted_words(&words, i, len, j);
                    let key = candidate.join(" ");
                    let dist = *cache
                        .entry(key)
                        .or_insert_with_key(|k| {
                            let chars: Vec<char> = k.chars().collect();
                            lev_chars(&chars, ref_joined)
                        });
                    if best.map_or(dist < cur, |(b, ..)| dist < b) {
                        best = Some((dist, i, len, j));
                    }
                }
            }
        }
        match best {
            Some((dist, i, len, j)) if dist < cur => {
                words = shifted_words(&words, i, len, j);
                cur = dist;
                shifts += 1;
            }
            _ => break,
        }
    }
    (shifts, cur as u64)
}

/// Run the selected metrics over parallel hypothesis/reference line lists.
pub fn score_lines<S: AsRef<str>>(
    hyps: &[S],
    refs: &[S],
    kinds: &[MetricKind],
    chrf_beta: f64,
) -> Result<Vec<MetricScore>, MetricsError> {
    if kinds.is_empty() {
        return Err(usage_err("no metrics selected"));
    }
    kinds
        .iter()
        .map(|kind| match kind {
            MetricKind::Bleu => bleu4(hyps, refs),
            MetricKind::Chrf => chrf(hyps, refs, 6, chrf_beta),
            MetricKind::Character => character_score(hyps, refs),
        })
        .collect()
}

/// Score a hypothesis file against a line-aligned reference file.
pub fn score_files(
    hyp_path: &Path,
    ref_path: &Path,
    kinds: &[MetricKind],
    chrf_beta: f64,
) -> Result<Vec<MetricScore>, MetricsError> {
    let hyps: Vec<String> = std::fs::read_to_string(hyp_path)?
        .lines()
        .map(|l| l.to_string())
        .collect();
    let refs: Vec<String> = std::fs::read_to_string(ref_path)?
        .lines()
        .map(|l| l.to_string())
        .collect();
    if hyps.len() != refs.len() {
        return Err(usage_err(format!(
            "line counts differ: {} in {} vs {} in {}",
            hyps.len(),
            hyp_path.display(),
            refs.len(),
            ref_path.display()
        )));
    }
    score_lines(&hyps, &refs, kinds, chrf_beta)
}

fn fmt_component(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.6}")
    }
}

/// Render scores as a small table (with the direction arrow each metric is
/// read by) followed by machine-readable `name=value` lines, components on
/// `#` lines.
pub fn format_report(scores: &[MetricScore]) -> String {
    let mut out = String::new();
    for s in scores {
        let label = match s.name {
            "BLEU" => "BLEU\u{2191}",
            "CHRF" => "CHRF\u{2191}",
            "CharacTER" => "C-TER\u{2193}",
            other => other,
        };
        let pad = 8usize.saturating_sub(label.chars().count());
        out.push_str(label);
        out.extend(std::iter::repeat(' ').take(pad));
        out.push_str(&format!("{:>8.2}\n", s.value));
    }
    for s in scores {
        out.push_str(&format!("{}={:.4}\n", s.name, s.value));
        if !s.components.is_empty() {
            out.push('#');
            for (k, v) in &s.components {
                out.push_str(&format!(" {k}={}", fmt_component(*v)));
            }
            out.push('\n');
        }
    }
    out
}
