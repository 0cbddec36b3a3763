//! `bpe-learn` and `vocab`: corpus preparation commands.

use std::path::PathBuf;

use clap::Args;

use ctnmt_core::tokenize::{
    build_bpe_vocab, build_char_vocab, learn_bpe, BpeMerges, TokenMode, DEFAULT_CHAR_VOCAB,
    MAX_BPE_OPS,
};

use crate::util::{atomic_write, get_parsed, read_lines, KvConfig};
use crate::{CliError, GlobalArgs};

#[derive(Args)]
pub struct BpeLearnArgs {
    /// Training corpus, one sentence per line
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Where to write the merge rules
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// Merge operations to learn (default 20000)
    #[arg(long = "num-ops", value_name = "N")]
    num_ops: Option<usize>,
}

const BPE_KEYS: &[&str] = &["num_ops", "seed"];

pub fn bpe_learn(global: &GlobalArgs, args: &BpeLearnArgs) -> Result<(), CliError> {
    let kv = KvConfig::load(global.config.as_deref())?;
    kv.check_keys(BPE_KEYS)?;
    let num_ops = match args.num_ops {
        Some(n) => n,
        None => get_parsed(&kv, "num_ops")?.unwrap_or(20_000),
    };
    if num_ops > MAX_BPE_OPS {
        return Err(CliError::Usage(format!(
            "num_ops {num_ops} exceeds the maximum {MAX_BPE_OPS}"
        )));
    }
    let corpus = read_lines(&args.input)?;
    let merges = learn_bpe(&corpus, num_ops)?;
    atomic_write(&args.output, &merges.to_text())?;
    if !global.quiet {
        let vocab = build_bpe_vocab(&corpus, &merges)?;
        println!(
            "learned {} merges ({} requested) from {} sentences; subword vocabulary {} tokens",
            merges.merges().len(),
            num_ops,
            corpus.len(),
            vocab.len()
        );
    }
    Ok(())
}

#[derive(Args)]
pub struct VocabArgs {
    /// Corpus to build the vocabulary from
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Token mode: char or bpe
    #[arg(long, value_name = "MODE")]
    mode: Option<String>,
    /// Merge rules (required in bpe mode)
    #[arg(long, value_name = "FILE")]
    merges: Option<PathBuf>,
    /// Write the vocabulary here instead of printing it
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Vocabulary ceiling for char mode (default 300, specials included)
    #[arg(long = "max-size", value_name = "N")]
    max_size: Option<usize>,
}

const VOCAB_KEYS: &[&str] = &["mode", "merges_file", "max_size", "seed"];

pub fn vocab(global: &GlobalArgs, args: &VocabArgs) -> Result<(), CliError> {
    let kv = KvConfig::load(global.config.as_deref())?;
    kv.check_keys(VOCAB_KEYS)?;
    let mode = match args.mode.as_deref().or_else(|| kv.get("mode")) {
        None | Some("char") => TokenMode::Char,
        Some("bpe") => TokenMode::Bpe,
        Some(other) => {
            return Err(CliError::Usage(format!(
                "token mode {other:?} (expected char or bpe)"
            )))
        }
    };
    let corpus = read_lines(&args.input)?;
    let built = match mode {
        TokenMode::Char => {
            let max = match args.max_size {
                Some(n) => n,
                None => get_parsed(&kv, "max_size")?.unwrap_or(DEFAULT_CHAR_VOCAB),
            };
            build_char_vocab(&corpus, max)?
        }
        TokenMode::Bpe => {
            let merges_path = args
                .merges
                .clone()
                .or_else(|| kv.get("merges_file").map(PathBuf::from))
                .ok_or_else(|| CliError::Usage("bpe mode needs --merges".to_string()))?;
            let text = std::fs::read_to_string(&merges_path)
                .map_err(|e| crate::util::io_ctx(&merges_path, e))?;
            build_bpe_vocab(&corpus, &BpeMerges::from_text(&text)?)?
        }
    };
    if !global.quiet {
        println!(
            "vocabulary: {} tokens (4 reserved) from {} sentences",
            built.len(),
            corpus.len()
        );
    }
    match &args.output {
        Some(path) => atomic_write(path, &built.to_text())?,
        None => print!("{}", built.to_text()),
    }
    Ok(())
}
