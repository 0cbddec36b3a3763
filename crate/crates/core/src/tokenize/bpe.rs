//! Byte-pair encoding: learn merge rules from word frequencies and apply
//! them greedily by learning priority. The end of every word is marked by
//! appending "</w>" to its last symbol so merges never cross word borders.

use std::collections::HashMap;

use super::{pretokenize, TokenizeError};

/// Marker glued to a word's final symbol.
pub const WORD_END: &str = "</w>";

/// Largest supported merge-rule count.
pub const MAX_BPE_OPS: usize = 20_000;

/// Ordered merge rules; position in `merges` is the priority (0 = first).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeMerges {
    merges: Vec<(String, String)>,
}

impl BpeMerges {
    pub fn new(merges: Vec<(String, String)>) -> Result<Self, TokenizeError> {
        if merges.len() > MAX_BPE_OPS {
            return Err(TokenizeError::TooManyOps {
                got: merges.len(),
                max: MAX_BPE_OPS,
            });
        }
        Ok(BpeMerges { merges })
    }

    pub fn count(&self) -> usize {
        self.merges.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Serialize as the merges text format: a `#bpe v1 <count>` header, then
    /// one space-separated pair per line in priority order.
    pub fn to_text(&self) -> String {
        let mut out = format!("#bpe v1 {}\n", self.merges.len());
        for (a, b) in &self.merges {
            out.push_str(a);
            out.push(' ');
            out.push_str(b);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizeError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        let bad_header = || TokenizeError::MergesFormat {
            line: 1,
            msg: format!("bad header {header:?}, expected \"#bpe v1 <count>\""),
        };
        let mut parts = header.split(' ');
        if parts.next() != Some("#bpe") || parts.next() != Some("v1") {
            return Err(bad_header());
        }
        let count: usize = parts
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(bad_header)?;
        let mut merges = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let mut sym = line.split(' ');
            match (sym.next(), sym.next(), sym.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()));
                }
                _ => {
                    return Err(TokenizeError::MergesFormat {
                        line: i + 2,
                        msg: format!("expected two space-separated symbols, got {line:?}"),
                    })
                }
            }
        }
        if merges.len() != count {
            return Err(TokenizeError::MergesFormat {
                line: 1,
                msg: format!("header says {count} merges, file has {}", merges.len()),
            });
        }
        Self::new(merges)
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let mut symbols: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(WORD_END);
    }
    symbols
}

/// Learn `num_ops` merges: at each step take the most frequent adjacent
/// symbol pair across all words (ties to the lexicographically smallest
/// pair), stopping early when no pair occurs at least twice.
pub fn learn_bpe<S: AsRef<str>>(
    corpus: &[S],
    num_ops: usize,
) -> Result<BpeMerges, TokenizeError> {
    if corpus.is_empty() {
        return Err(TokenizeError::EmptyCorpus);
    }
    if num_ops > MAX_BPE_OPS {
        return Err(TokenizeError::TooManyOps {
            got: num_ops,
            max: MAX_BPE_OPS,
        });
    }

    // Unique words with frequencies, in first-seen order for determinism.
    let mut word_index: HashMap<String, usize> = HashMap::new();
    let mut words: Vec<(Vec<String>, u64)> = Vec::new();
    for sentence in corpus {
        for word in pretokenize(sentence.as_ref()) {
            match word_index.get(&word) {
                Some(&i) => words[i].1 += 1,
                None => {
                    word_index.insert(word.clone(), words.len());
                    words.push((word_symbols(&word), 1));
                }
            }
        }
    }

    let mut merges = Vec::with_capacity(num_ops.min(256));
    for _ in 0..num_ops {
        let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, freq) in &words {
            for pair in symbols.windows(2) {
                *counts.entry((&pair[0], &pair[1])).or_insert(0) += *freq;
            }
        }
        let mut best: Option<((&str, &str), u64)> = None;
        for (&pair, &count) in &counts {
            let better = match best {
                None => true,
                Some((best_pair, best_count)) => {
                    count > best_count || (count == best_count && pair < best_pair)
                }
            };
            if better {
                best = Some((pair, count));
            }
        }
        let Some(((a, b), count)) = best else { break };
        if count < 2 {
            break;
        }
        let (a, b) = (a.to_string(), b.to_string());
        for (symbols, _) in words.iter_mut() {
            merge_pair(symbols, &a, &b);
        }
        merges.push((a, b));
    }
    BpeMerges::new(merges)
}

fn merge_pair(symbols: &mut Vec<String>, a: &str, b: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == a && symbols[i + 1] == b {
            let second = symbols.remove(i + 1);
            symbols[i].push_str(&second);
        }
        i += 1;
    }
}

/// Segment one word: start from characters with the end marker, repeatedly
/// apply the highest-priority applicable merge until none applies.
pub fn segment_word(word: &str, merges: &BpeMerges) -> Vec<String> {
    let mut symbols = word_symbols(word);
    if symbols.is_empty() {
        return symbols;
    }
    let rank: HashMap<(&str, &str), usize> = merges
        .merges
        .iter()
        .enumerate()
        .map(|(i, (a, b))| ((a.as_str(), b.as_str()), i))
        .collect();
    loop {
        let mut best: Option<usize> = None;
        for pair in symbols.windows(2) {
            if let Some(&r) = rank.get(&(pair[0].as_str(), pair[1].as_str())) {
                if best.is_none_or(|br| r < br) {
                    best = Some(r);
                }
            }
        }
        let Some(r) = best else { break };
        let (a, b) = &merges.merges[r];
        merge_pair(&mut symbols, a, b);
    }
    symbols
}

/// Segment a whole sentence: pretokenize, then BPE-split each word.
pub fn apply_bpe(sentence: &str, merges: &BpeMerges) -> Vec<String> {
    let mut out = Vec::new();
    for word in pretokenize(sentence) {
        out.extend(segment_word(&word, merges));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_ops_gives_character_segmentation() {
        let merges = learn_bpe(&["ab ba"], 0).unwrap();
        assert_eq!(merges.count(), 0);
        assert_eq!(apply_bpe("ab", &merges), vec!["a", "b</w>"]);
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let merges = learn_bpe(&["low low low", "lower"], 1).unwrap();
        assert_eq!(merges.merges(), &[("l".to_string(), "o".to_string())]);
    }

    #[test]
    fn stops_early_when_no_pair_repeats() {
        let merges = learn_bpe(&["abc xyz"], 20_000).unwrap();
        assert!(merges.count() < 20_000);
    }

    #[test]
    fn merge_application_traces_priorities() {
        let merges = BpeMerges::new(vec![
            ("l".into(), "o".into()),
            ("lo".into(), "w</w>".into()),
        ])
        .unwrap();
        assert_eq!(apply_bpe("low", &merges), vec!["low</w>"]);
    }

    #[test]
    fn unseen_word_falls_back_to_characters() {
        let merges = learn_bpe(&["low low"], 2).unwrap();
        let toks = segment_word("qz", &merges);
        assert_eq!(toks, vec!["q", "z</w>"]);
        let rebuilt: String = toks.join("").replace(WORD_END, "");
        assert_eq!(rebuilt, "qz");
    }

    #[test]
    fn segmentation_is_lossless() {
        let corpus = ["the cat sat on the mat", "a cat ate the hat"];
        let merges = learn_bpe(&corpus, 10).unwrap();
        for word in ["the", "cat", "sitting", "mats"] {
            let rebuilt: String = segment_word(word, &merges).join("").replace(WORD_END, "");
            assert_eq!(rebuilt, word);
        }
    }

    #[test]
    fn learning_is_deterministic() {
        let corpus = ["pack my box with five dozen liquor jugs", "mr jock tv quiz phd bags few lynx"];
        let a = learn_bpe(&corpus, 30).unwrap();
        let b = learn_bpe(&corpus, 30).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "ba" both occur twice inside "abab"; pairs ("a","b") x2 and
        // ("b","a") x1 per word occurrence... use two words making an exact tie.
        let merges = learn_bpe(&["dc dc", "ef ef"], 1).unwrap();
        assert_eq!(merges.merges()[0], ("d".to_string(), "c</w>".to_string()));
    }

    #[test]
    fn merges_text_round_trip() {
        let merges = learn_bpe(&["low lower lowest"], 5).unwrap();
        let text = merges.to_text();
        assert!(text.starts_with("#bpe v1 "));
        let back = BpeMerges::from_text(&text).unwrap();
        assert_eq!(merges, back);
    }

    #[test]
    fn merges_text_rejects_corruption() {
        assert!(BpeMerges::from_text("").is_err());
        assert!(BpeMerges::from_text("#bpe v2 0\n").is_err());
        assert!(BpeMerges::from_text("#bpe v1 2\na b\n").is_err());
        assert!(BpeMerges::from_text("#bpe v1 1\na b c\n").is_err());
    }
}
