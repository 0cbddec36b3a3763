//! `score`: run the MT metrics over hypothesis/reference files.

use std::path::PathBuf;

use clap::Args;

use ctnmt_core::metrics::{format_report, score_files, MetricKind};

use crate::util::{get_parsed, KvConfig};
use crate::{CliError, GlobalArgs};

#[derive(Args)]
pub struct ScoreArgs {
    /// Hypothesis file, one sentence per line
    #[arg(long, value_name = "FILE")]
    hyp: PathBuf,
    /// Line-aligned reference file
    #[arg(long = "ref", value_name = "FILE")]
    reference: PathBuf,
    /// Comma-separated selection from bleu, chrf, character
    #[arg(long, value_name = "LIST")]
    metrics: Option<String>,
    /// chrF beta (default 3)
    #[arg(long = "chrf-beta", value_name = "N")]
    chrf_beta: Option<f64>,
}

const SCORE_KEYS: &[&str] = &["metrics", "chrf_beta", "seed"];

pub fn score(global: &GlobalArgs, args: &ScoreArgs) -> Result<(), CliError> {
    let kv = KvConfig::load(global.config.as_deref())?;
    kv.check_keys(SCORE_KEYS)?;
    let selection = args
        .metrics
        .as_deref()
        .or_else(|| kv.get("metrics"))
        .unwrap_or("bleu,chrf,character");
    let mut kinds = Vec::new();
    for name in selection.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        kinds.push(MetricKind::parse(name).map_err(|e| CliError::Usage(e.to_string()))?);
    }
    if kinds.is_empty() {
        return Err(CliError::Usage("no metrics selected".to_string()));
    }
    let beta = match args.chrf_beta {
        Some(b) => b,
        None => get_parsed(&kv, "chrf_beta")?.unwrap_or(3.0),
    };
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(CliError::Usage(format!("chrf beta must be finite and > 0, got {beta}")));
    }
    let scores = score_files(&args.hyp, &args.reference, &kinds, beta)?;
    print!("{}", format_report(&scores));
    Ok(())
}
