//! Greedy and beam-search decoding plus detokenization.
//!
//! Both decoders consume a [`NextTokenScorer`], which hides the model behind
//! "give me next-token log-probabilities for these prefixes". [`ModelScorer`]
//! is the real implementation: it encodes the source sentence once and reruns
//! only the decoder stack as hypotheses grow. Tests substitute table-driven
//! scorers so search behaviour can be checked against exhaustive enumeration.

use std::cmp::Ordering;

use thiserror::Error;

use crate::model::{decoder_forward, encode_source, EncoderOutput, ModelConfig, ModelError, ParamSet};
use crate::tensor::{Scalar, Tensor, TensorError};
use crate::tokenize::{PadMask, TokenMode, Vocab, WORD_END, BOS, EOS, PAD, UNK};

/// Rendering of `<unk>` in decoded text.
pub const UNK_GLYPH: &str = "\u{2047}";

/// Decoded character sequences are capped at this many tokens.
pub const MAX_CHAR_DECODE: usize = 500;
/// Decoded subword sequences are capped at this many tokens.
pub const MAX_BPE_DECODE: usize = 60;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("decode: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn decode_err<S: Into<String>>(msg: S) -> DecodeError {
    DecodeError::Config(msg.into())
}

/// Longest hypothesis the decoder will produce for a source of `src_len`
/// tokens: generous slack for expansion, capped per token mode.
pub fn decode_max_len(src_len: usize, mode: TokenMode) -> usize {
    let cap = match mode {
        TokenMode::Char => MAX_CHAR_DECODE,
        TokenMode::Bpe => MAX_BPE_DECODE,
    };
    (2 * src_len + 10).min(cap)
}

/// Next-token distribution source for the search loop.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities over the whole target vocabulary for the token
    /// following each prefix. Prefixes start with `BOS` and all share one
    /// length; the result holds one `vocab_size()` row per prefix.
    fn next_log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>, DecodeError>;
}

/// Model-backed scorer for a single source sentence.
///
/// The encoder runs once at construction on detached parameters; each
/// `next_log_probs` call replicates the cached source states across the
/// hypothesis batch and runs only the decoder stack.
pub struct ModelScorer<'a, T: Scalar> {
    params: ParamSet<T>,
    cfg: &'a ModelConfig,
    enc: EncoderOutput<T>,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    /// `src_ids` is one encoded sentence (EOS-terminated, no padding); an
    /// EOS-only row from an empty input line is fine.
    pub fn new(
        params: &ParamSet<T>,
        cfg: &'a ModelConfig,
        src_ids: &[u32],
    ) -> Result<Self, DecodeError> {
        if src_ids.is_empty() {
            return Err(decode_err("empty source id row"));
        }
        let stride = cfg.batch_stride();
        let padded = src_ids.len().div_ceil(stride) * stride;
        if padded > cfg.max_positions * stride {
            return Err(decode_err(format!(
                "source of {} tokens exceeds the model's {} positions",
                src_ids.len(),
                cfg.max_positions * stride
            )));
        }
        let mut row = src_ids.to_vec();
        row.resize(padded, PAD);
        let mask = PadMask {
            bsz: 1,
            len: padded,
            data: row.iter().map(|&id| id == PAD).collect(),
        };
        let frozen = params.frozen();
        let enc = encode_source(&row, &mask, &frozen, cfg, None)?;
        Ok(ModelScorer { params: frozen, cfg, enc })
    }

    fn replicate_encoding(&self, bsz: usize) -> Result<EncoderOutput<T>, DecodeError> {
        if bsz == 1 {
            return Ok(EncoderOutput {
                states: self.enc.states.clone(),
                pad_mask: self.enc.pad_mask.clone(),
            });
        }
        let shape = self.enc.states.shape();
        let (len, dim) = (shape[1], shape[2]);
        let mut data = Vec::with_capacity(bsz * len * dim);
        let mut mask = Vec::with_capacity(bsz * len);
        for _ in 0..bsz {
            data.extend_from_slice(self.enc.states.data());
            mask.extend_from_slice(&self.enc.pad_mask.data);
        }
        Ok(EncoderOutput {
            states: Tensor::from_vec(vec![bsz, len, dim], data)?,
            pad_mask: PadMask { bsz, len, data: mask },
        })
    }
}

impl<'a, T: Scalar> NextTokenScorer for ModelScorer<'a, T> {
    fn vocab_size(&self) -> usize {
        self.cfg.tgt_vocab
    }

    fn next_log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>, DecodeError> {
        let bsz = prefixes.len();
        if bsz == 0 {
            return Ok(Vec::new());
        }
        let len = prefixes[0].len();
        if prefixes.iter().any(|p| p.len() != len) || len == 0 {
            return Err(decode_err("prefixes must be non-empty and equally long"));
        }
        let mut tgt_ids = Vec::with_capacity(bsz * len);
        for p in prefixes {
            tgt_ids.extend_from_slice(p);
        }
        let enc = self.replicate_encoding(bsz)?;
        let logits = decoder_forward(&tgt_ids, &enc, &self.params, self.cfg, None)?;
        let vocab = self.cfg.tgt_vocab;
        let data = logits.data();
        let mut out = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let row = &data[(b * len + len - 1) * vocab..(b * len + len) * vocab];
            out.push(log_softmax_f64(row));
        }
        Ok(out)
    }
}

fn log_softmax_f64<T: Scalar>(row: &[T]) -> Vec<f64> {
    let vals: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    vals.iter().map(|v| v - lse).collect()
}

/// A partial or completed translation: `tokens` always starts with `BOS`,
/// `logprob` is the sum of per-token log-probabilities, and a hypothesis is
/// `finished` once it has produced `EOS` (finished hypotheses are never
/// extended).
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    fn start() -> Self {
        BeamHypothesis { tokens: vec![BOS], logprob: 0.0, finished: false }
    }

    /// Generated tokens, i.e. everything after the `BOS` seed.
    fn generated(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Length-normalized score: `logprob / len^alpha` with the generated
    /// token count as length (floored at one so the start hypothesis is
    /// well-defined).
    pub fn score(&self, alpha: f64) -> f64 {
        let len = self.generated().max(1) as f64;
        self.logprob / len.powf(alpha)
    }

    /// Best score any extension of this hypothesis could still reach within
    /// `max_len` generated tokens. Future log-probabilities are at most zero,
    /// so the log-probability never rises; with `alpha > 0` the denominator
    /// is largest at `max_len`, which for a non-positive numerator gives the
    /// upper bound.
    fn score_bound(&self, alpha: f64, max_len: usize) -> f64 {
        if alpha == 0.0 {
            self.logprob
        } else {
            self.logprob / (max_len.max(1) as f64).powf(alpha)
        }
    }
}

/// Ordering used everywhere a single best hypothesis is picked: higher score
/// first, then finished before unfinished, then the lexicographically
/// smallest token sequence so that ties are deterministic.
fn compare_final(a: &BeamHypothesis, b: &BeamHypothesis, alpha: f64) -> Ordering {
    b.score(alpha)
        .total_cmp(&a.score(alpha))
        .then(b.finished.cmp(&a.finished))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn strip_specials(mut tokens: Vec<u32>) -> Vec<u32> {
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    tokens.remove(0);
    tokens
}

/// Greedy decoding: repeatedly take the highest-probability next token
/// (lowest id on ties) until `EOS` or `max_len` generated tokens. `PAD` and
/// `BOS` are never emitted. Returns the generated ids without `BOS`/`EOS`.
pub fn greedy_decode<S: NextTokenScorer>(
    scorer: &S,
    max_len: usize,
) -> Result<Vec<u32>, DecodeError> {
    Ok(strip_specials(greedy_hypothesis(scorer, max_len)?.tokens))
}

fn greedy_hypothesis<S: NextTokenScorer>(
    scorer: &S,
    max_len: usize,
) -> Result<BeamHypothesis, DecodeError> {
    if max_len == 0 {
        return Err(decode_err("max_len must be positive"));
    }
    let mut hyp = BeamHypothesis::start();
    while !hyp.finished && hyp.generated() < max_len {
        let lps = scorer.next_log_probs(&[&hyp.tokens])?;
        let row = &lps[0];
        check_vocab_row(row, scorer.vocab_size())?;
        let mut best: Option<(u32, f64)> = None;
        for (id, &lp) in row.iter().enumerate() {
            let id = id as u32;
            if id == PAD || id == BOS {
                continue;
            }
            if best.map_or(true, |(_, b)| lp > b) {
                best = Some((id, lp));
            }
        }
        let (id, lp) = best.ok_or_else(|| decode_err("vocabulary too small to decode"))?;
        hyp.tokens.push(id);
        hyp.logprob += lp;
        hyp.finished = id == EOS;
    }
    Ok(hyp)
}

fn check_vocab_row(row: &[f64], vocab: usize) -> Result<(), DecodeError> {
    if row.len() != vocab {
        return Err(decode_err(format!(
            "scorer returned {} log-probs for a vocabulary of {vocab}",
            row.len()
        )));
    }
    Ok(())
}

/// Beam search with beam width `beam_size` and length-normalization exponent
/// `alpha >= 0`. Returns the generated ids of the best hypothesis without
/// `BOS`/`EOS`; `PAD` and `BOS` are never emitted. The result never scores
/// below the greedy hypothesis: for `beam_size > 1` the greedy rollout is
/// added to the final candidate pool, since beam search alone does not
/// guarantee this (a wide beam can displace the greedy prefix early and then
/// finish on a worse path).
pub fn beam_search<S: NextTokenScorer>(
    scorer: &S,
    beam_size: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Vec<u32>, DecodeError> {
    if beam_size == 0 {
        return Err(decode_err("beam_size must be positive"));
    }
    if max_len == 0 {
        return Err(decode_err("max_len must be positive"));
    }
    if !(alpha >= 0.0) {
        return Err(decode_err(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let vocab = scorer.vocab_size();

    let mut live = vec![BeamHypothesis::start()];
    let mut finished: Vec<BeamHypothesis> = Vec::new();

    while !live.is_empty() && live[0].generated() < max_len {
        let prefixes: Vec<&[u32]> = live.iter().map(|h| h.tokens.as_slice()).collect();
        let rows = scorer.next_log_probs(&prefixes)?;
        if rows.len() != live.len() {
            return Err(decode_err("scorer returned the wrong number of rows"));
        }

        let mut candidates: Vec<BeamHypothesis> = Vec::with_capacity(live.len() * beam_size);
        for (hyp, row) in live.iter().zip(&rows) {
            check_vocab_row(row, vocab)?;
            // Per-parent truncation to the beam_size best extensions loses
            // nothing: all candidates this step share one length, so the
            // beam's ranking orders them by parent logprob plus extension
            // log-prob, which within a parent follows the extension alone.
            // If a parent's (beam_size+1)-th best extension made the next
            // beam, the beam_size better siblings would be in it too, and
            // with it they would exceed the beam's capacity.
            let mut ext: Vec<(u32, f64)> = row
                .iter()
                .enumerate()
                .map(|(id, &lp)| (id as u32, lp))
                .filter(|&(id, _)| id != PAD && id != BOS)
                .collect();
            ext.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ext.truncate(beam_size);
            for (id, lp) in ext {
                let mut tokens = hyp.tokens.clone();
                tokens.push(id);
                candidates.push(BeamHypothesis {
                    tokens,
                    logprob: hyp.logprob + lp,
                    finished: id == EOS,
                });
            }
        }

        candidates.sort_by(|a, b| compare_final(a, b, alpha));
        candidates.truncate(beam_size);

        live = Vec::with_capacity(beam_size);
        for cand in candidates {
            if cand.finished {
                finished.push(cand);
            } else {
                live.push(cand);
            }
        }
        finished.sort_by(|a, b| compare_final(a, b, alpha));
        finished.truncate(beam_size);

        // Once the best finished hypothesis strictly beats every live
        // hypothesis's score bound, no extension can change the outcome.
        // Strict comparison keeps exact ties alive so the lexicographic
        // tie-break still sees them.
        if let Some(best) = finished.first() {
            let best_score = best.score(alpha);
            if live.iter().all(|h| h.score_bound(alpha, max_len) < best_score) {
                live.clear();
            }
        }
    }

    let mut pool = finished;
    pool.extend(live);
    if beam_size > 1 {
        pool.push(greedy_hypothesis(scorer, max_len)?);
    }
    pool.sort_by(|a, b| compare_final(a, b, alpha));
    let best = pool.into_iter().next().ok_or_else(|| decode_err("no hypothesis produced"))?;
    Ok(strip_specials(best.tokens))
}

/// Render decoded target ids as text. Character tokens concatenate directly;
/// subword tokens join and then `</w>` markers become spaces, with the
/// trailing space removed. `UNK` renders as [`UNK_GLYPH`]; remaining special
/// ids are skipped defensively.
pub fn detokenize(tokens: &[u32], mode: TokenMode, vocab: &Vocab) -> String {
    let mut glued = String::new();
    for &id in tokens {
        if id == PAD || id == BOS || id == EOS {
            continue;
        }
        if id == UNK {
            glued.push_str(UNK_GLYPH);
            continue;
        }
        match vocab.token(id) {
            Some(tok) => glued.push_str(tok),
            None => glued.push_str(UNK_GLYPH),
        }
    }
    match mode {
        TokenMode::Char => glued,
        TokenMode::Bpe => {
            let spaced = glued.replace(WORD_END, " ");
            spaced.trim_end_matches(' ').to_string()
        }
    }
}
