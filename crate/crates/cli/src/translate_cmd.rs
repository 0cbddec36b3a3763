//! `translate`: decode a file line by line from a trained checkpoint.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::Args;

use ctnmt_core::decode::{beam_search, decode_max_len, detokenize, ModelScorer};
use ctnmt_core::tensor::Scalar;
use ctnmt_core::tokenize::{encode, TokenMode, EOS};
use ctnmt_core::train::{load_checkpoint, Checkpoint};

use crate::util::{atomic_write, get_parsed, io_ctx, read_lines, KvConfig};
use crate::{CliError, GlobalArgs};

#[derive(Args)]
pub struct TranslateArgs {
    /// Trained model checkpoint
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Source sentences, one per line
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Where to write the translations
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// Beam width (default 20 for char modes, 5 for bpe)
    #[arg(long, value_name = "N")]
    beam: Option<usize>,
    /// Length-normalization exponent (default 0)
    #[arg(long, value_name = "A")]
    alpha: Option<f64>,
}

const TRANSLATE_KEYS: &[&str] = &["beam", "alpha", "seed"];

/// The checkpoint header records whether parameters were stored as f32 or
/// f64; decode in that precision rather than converting.
fn stored_precision(path: &Path) -> Result<u8, CliError> {
    let mut head = [0u8; 7];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map_err(|e| io_ctx(path, e))?;
    Ok(head[6])
}

pub fn translate(global: &GlobalArgs, args: &TranslateArgs) -> Result<(), CliError> {
    let kv = KvConfig::load(global.config.as_deref())?;
    kv.check_keys(TRANSLATE_KEYS)?;
    let beam = match args.beam {
        Some(b) => Some(b),
        None => get_parsed(&kv, "beam")?,
    };
    let alpha = match args.alpha {
        Some(a) => a,
        None => get_parsed(&kv, "alpha")?.unwrap_or(0.0),
    };
    match stored_precision(&args.checkpoint)? {
        8 => run::<f64>(global, args, beam, alpha),
        _ => run::<f32>(global, args, beam, alpha),
    }
}

fn run<T: Scalar>(
    global: &GlobalArgs,
    args: &TranslateArgs,
    beam: Option<usize>,
    alpha: f64,
) -> Result<(), CliError> {
    let cp: Checkpoint<T> = load_checkpoint(&args.checkpoint)?;
    let token_mode = cp.cfg.mode.token_mode();
    let missing = |what: &str| {
        CliError::Data(format!(
            "{}: checkpoint lacks {what}",
            args.checkpoint.display()
        ))
    };
    let src_vocab = cp.src_vocab.as_ref().ok_or_else(|| missing("a source vocabulary"))?;
    let tgt_vocab = cp.tgt_vocab.as_ref().ok_or_else(|| missing("a target vocabulary"))?;
    if token_mode == TokenMode::Bpe && cp.merges.is_none() {
        return Err(missing("merge rules"));
    }

    let beam = beam.unwrap_or(match token_mode {
        TokenMode::Char => 20,
        TokenMode::Bpe => 5,
    });
    if beam == 0 {
        return Err(CliError::Usage("beam must be positive".to_string()));
    }

    let src_limit = cp.cfg.max_positions * cp.cfg.batch_stride();
    let lines = read_lines(&args.input)?;
    let mut out = String::new();
    for (i, line) in lines.iter().enumerate() {
        let mut ids = encode(line, token_mode, src_vocab, cp.merges.as_ref())?;
        if ids.len() > src_limit {
            ids.truncate(src_limit);
            *ids.last_mut().expect("limit is positive") = EOS;
            eprintln!(
                "warning: line {} truncated to {} source tokens",
                i + 1,
                src_limit
            );
        }
        let scorer = ModelScorer::new(&cp.params, &cp.cfg, &ids)?;
        let max_len = decode_max_len(ids.len() - 1, token_mode);
        let tokens = beam_search(&scorer, beam, max_len, alpha)?;
        out.push_str(&detokenize(&tokens, token_mode, tgt_vocab));
        out.push('\n');
    }
    atomic_write(&args.output, &out)?;
    if !global.quiet {
        println!(
            "# mode={} beam={} alpha={}",
            cp.cfg.mode, beam, alpha
        );
        println!(
            "translated {} lines to {}",
            lines.len(),
            args.output.display()
        );
    }
    Ok(())
}
