//! Segmentation, vocabularies, corpus filtering, and token-budget batching.
//!
//! Character mode consumes raw lines code point by code point (spaces are
//! ordinary vocabulary items); BPE mode first splits on whitespace and
//! detaches punctuation, then applies learned merges.

mod bpe;

pub use bpe::{apply_bpe, learn_bpe, segment_word, BpeMerges, MAX_BPE_OPS, WORD_END};

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Character-mode vocabulary ceiling, specials included.
pub const DEFAULT_CHAR_VOCAB: usize = 300;
/// Sentence pairs longer than this many characters are dropped in char modes.
pub const MAX_SRC_CHARS: usize = 450;
/// Sentence pairs longer than this many subwords are dropped in BPE mode.
pub const MAX_SUBWORD_TOKENS: usize = 50;

#[derive(Debug, Error)]
pub enum TokenizeError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocabulary max_size {0} is below the 4 specials + 1 token minimum of 5")]
    MaxSizeTooSmall(usize),
    #[error("bpe mode needs merges")]
    MissingMerges,
    #[error("{got} merge operations exceed the maximum of {max}")]
    TooManyOps { got: usize, max: usize },
    #[error("target of {tgt_len} tokens exceeds the batch budget of {budget}")]
    BudgetExceeded { tgt_len: usize, budget: usize },
    #[error("vocab file line {line}: {msg}")]
    VocabFormat { line: usize, msg: String },
    #[error("merges file line {line}: {msg}")]
    MergesFormat { line: usize, msg: String },
}

/// Which segmentation a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenMode {
    Char,
    Bpe,
}

/// Token↔id bijection with the four reserved specials at ids 0–3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: IndexMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub(crate) fn from_tokens(tokens: Vec<String>) -> Self {
        let mut token_to_id = IndexMap::with_capacity(tokens.len() + 4);
        let mut id_to_token = Vec::with_capacity(tokens.len() + 4);
        for special in SPECIAL_TOKENS {
            token_to_id.insert(special.to_string(), id_to_token.len() as u32);
            id_to_token.push(special.to_string());
        }
        for tok in tokens {
            if token_to_id.contains_key(&tok) {
                continue;
            }
            token_to_id.insert(tok.clone(), id_to_token.len() as u32);
            id_to_token.push(tok);
        }
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    pub fn is_special(id: u32) -> bool {
        id < 4
    }

    /// One token per line, id = line number; newline, tab and backslash are
    /// escaped so every token stays on its line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for tok in &self.id_to_token {
            out.push_str(&escape_token(tok));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizeError> {
        let mut id_to_token = Vec::new();
        let mut token_to_id = IndexMap::new();
        for (i, line) in text.lines().enumerate() {
            let tok = unescape_token(line).map_err(|msg| TokenizeError::VocabFormat {
                line: i + 1,
                msg,
            })?;
            if i < 4 && tok != SPECIAL_TOKENS[i] {
                return Err(TokenizeError::VocabFormat {
                    line: i + 1,
                    msg: format!("expected special {:?}, got {tok:?}", SPECIAL_TOKENS[i]),
                });
            }
            if token_to_id.insert(tok.clone(), i as u32).is_some() {
                return Err(TokenizeError::VocabFormat {
                    line: i + 1,
                    msg: format!("duplicate token {tok:?}"),
                });
            }
            id_to_token.push(tok);
        }
        if id_to_token.len() < 4 {
            return Err(TokenizeError::VocabFormat {
                line: id_to_token.len(),
                msg: "fewer than the 4 special lines".into(),
            });
        }
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }
}

fn escape_token(tok: &str) -> String {
    let mut out = String::with_capacity(tok.len());
    for c in tok.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_token(line: &str) -> Result<String, String> {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            other => return Err(format!("bad escape \\{:?}", other)),
        }
    }
    Ok(out)
}

/// Whitespace split with punctuation detached: maximal runs of alphanumeric
/// characters and runs of anything else become separate words.
pub fn pretokenize(sentence: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in sentence.split_whitespace() {
        let mut current = String::new();
        let mut current_alnum = None;
        for c in chunk.chars() {
            let alnum = c.is_alphanumeric();
            if current_alnum != Some(alnum) && !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            current_alnum = Some(alnum);
            current.push(c);
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

/// Most frequent characters (code points, spaces included) up to
/// `max_size − 4`, plus the specials; frequency ties break toward the lower
/// code point.
pub fn build_char_vocab<S: AsRef<str>>(
    corpus: &[S],
    max_size: usize,
) -> Result<Vocab, TokenizeError> {
    if corpus.is_empty() {
        return Err(TokenizeError::EmptyCorpus);
    }
    if max_size < 5 {
        return Err(TokenizeError::MaxSizeTooSmall(max_size));
    }
    let mut counts: HashMap<char, u64> = HashMap::new();
    for sentence in corpus {
        for c in sentence.as_ref().chars() {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    let mut by_freq: Vec<(char, u64)> = counts.into_iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    by_freq.truncate(max_size - 4);
    let tokens = by_freq.into_iter().map(|(c, _)| c.to_string()).collect();
    Ok(Vocab::from_tokens(tokens))
}

/// Vocabulary of every subword the merges produce on the corpus, ordered by
/// frequency (ties toward the lexicographically smaller symbol). Symbols that
/// would collide with a special token string are left out and encode as UNK.
pub fn build_bpe_vocab<S: AsRef<str>>(
    corpus: &[S],
    merges: &BpeMerges,
) -> Result<Vocab, TokenizeError> {
    if corpus.is_empty() {
        return Err(TokenizeError::EmptyCorpus);
    }
    let mut counts: IndexMap<String, u64> = IndexMap::new();
    for sentence in corpus {
        for sym in apply_bpe(sentence.as_ref(), merges) {
            *counts.entry(sym).or_insert(0) += 1;
        }
    }
    let mut by_freq: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(sym, _)| !SPECIAL_TOKENS.contains(&sym.as_str()))
        .collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let tokens = by_freq.into_iter().map(|(s, _)| s).collect();
    Ok(Vocab::from_tokens(tokens))
}

/// Map a sentence to token ids in the given mode, appending EOS. Unknown
/// tokens become UNK.
pub fn encode(
    sentence: &str,
    mode: TokenMode,
    vocab: &Vocab,
    merges: Option<&BpeMerges>,
) -> Result<Vec<u32>, TokenizeError> {
    let mut ids = Vec::new();
    match mode {
        TokenMode::Char => {
            let mut buf = [0u8; 4];
            for c in sentence.chars() {
                ids.push(vocab.id_or_unk(c.encode_utf8(&mut buf)));
            }
        }
        TokenMode::Bpe => {
            let merges = merges.ok_or(TokenizeError::MissingMerges)?;
            for sym in apply_bpe(sentence, merges) {
                ids.push(vocab.id_or_unk(&sym));
            }
        }
    }
    ids.push(EOS);
    Ok(ids)
}

/// Drop pairs whose source or target exceeds the length limit: 450
/// characters in char mode, 50 subwords in BPE mode. Surviving pairs are
/// returned unchanged.
pub fn filter_corpus(
    pairs: &[(String, String)],
    mode: TokenMode,
    merges: Option<&BpeMerges>,
) -> Result<Vec<(String, String)>, TokenizeError> {
    let fits = |s: &str| -> Result<bool, TokenizeError> {
        match mode {
            TokenMode::Char => Ok(s.chars().count() <= MAX_SRC_CHARS),
            TokenMode::Bpe => {
                let merges = merges.ok_or(TokenizeError::MissingMerges)?;
                Ok(apply_bpe(s, merges).len() <= MAX_SUBWORD_TOKENS)
            }
        }
    };
    let mut kept = Vec::with_capacity(pairs.len());
    for (src, tgt) in pairs {
        if fits(src)? && fits(tgt)? {
            kept.push((src.clone(), tgt.clone()));
        }
    }
    Ok(kept)
}

/// Boolean PAD indicator over a `bsz × len` id matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PadMask {
    pub bsz: usize,
    pub len: usize,
    pub data: Vec<bool>,
}

impl PadMask {
    pub fn pad(&self, b: usize, t: usize) -> bool {
        self.data[b * self.len + t]
    }
}

/// One padded training batch.
///
/// Source rows end with EOS then PAD; target rows are BOS-led and end with
/// EOS then PAD. `token_count` counts target positions the loss predicts
/// (everything after the leading BOS, PAD excluded), which is what the token
/// budget limits.
#[derive(Debug, Clone)]
pub struct Batch {
    pub bsz: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src_ids: Vec<u32>,
    pub tgt_ids: Vec<u32>,
    pub src_pad: PadMask,
    pub tgt_pad: PadMask,
    pub token_count: usize,
}

impl Batch {
    /// Assemble one batch from encoded (EOS-terminated) pairs, padding the
    /// source side to a multiple of `stride`.
    pub fn from_pairs(pairs: &[(Vec<u32>, Vec<u32>)], stride: usize) -> Batch {
        let bsz = pairs.len();
        let max_src = pairs.iter().map(|(s, _)| s.len()).max().unwrap_or(1);
        let src_len = max_src.div_ceil(stride) * stride;
        let tgt_len = 1 + pairs.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
        let mut src_ids = vec![PAD; bsz * src_len];
        let mut tgt_ids = vec![PAD; bsz * tgt_len];
        let mut token_count = 0;
        for (b, (src, tgt)) in pairs.iter().enumerate() {
            src_ids[b * src_len..b * src_len + src.len()].copy_from_slice(src);
            tgt_ids[b * tgt_len] = BOS;
            tgt_ids[b * tgt_len + 1..b * tgt_len + 1 + tgt.len()].copy_from_slice(tgt);
            token_count += tgt.len();
        }
        let src_pad = PadMask {
            bsz,
            len: src_len,
            data: src_ids.iter().map(|&id| id == PAD).collect(),
        };
        let tgt_pad = PadMask {
            bsz,
            len: tgt_len,
            data: tgt_ids.iter().map(|&id| id == PAD).collect(),
        };
        Batch {
            bsz,
            src_len,
            tgt_len,
            src_ids,
            tgt_ids,
            src_pad,
            tgt_pad,
            token_count,
        }
    }
}

/// Bucket encoded pairs by length, pack greedily under the target-token
/// budget, and shuffle the batch order deterministically by `seed`.
pub fn make_batches(
    pairs: &[(Vec<u32>, Vec<u32>)],
    token_budget: usize,
    stride: usize,
    seed: u64,
) -> Result<Vec<Batch>, TokenizeError> {
    for (_, tgt) in pairs {
        if tgt.len() > token_budget {
            return Err(TokenizeError::BudgetExceeded {
                tgt_len: tgt.len(),
                budget: token_budget,
            });
        }
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].1.len(), pairs[i].0.len(), i));

    let mut batches = Vec::new();
    let mut group: Vec<(Vec<u32>, Vec<u32>)> = Vec::new();
    let mut group_tokens = 0usize;
    for &i in &order {
        let tgt_len = pairs[i].1.len();
        if group_tokens + tgt_len > token_budget && !group.is_empty() {
            batches.push(Batch::from_pairs(&group, stride));
            group.clear();
            group_tokens = 0;
        }
        group.push(pairs[i].clone());
        group_tokens += tgt_len;
    }
    if !group.is_empty() {
        batches.push(Batch::from_pairs(&group, stride));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batches.shuffle(&mut rng);
    Ok(batches)
}
