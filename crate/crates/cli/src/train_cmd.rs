//! `train`: corpus preparation, vocabulary construction, and the training
//! loop, with checkpoints and a reproducible resolved-config record.

use std::cell::Cell;
use std::path::{Path, PathBuf};

use clap::Args;

use ctnmt_core::model::{Mode, ModelConfig, ParamSet};
use ctnmt_core::tensor::Scalar;
use ctnmt_core::tokenize::{
    build_bpe_vocab, build_char_vocab, encode, filter_corpus, BpeMerges, TokenMode, Vocab,
    DEFAULT_CHAR_VOCAB,
};
use ctnmt_core::train::{
    derive_seed, load_checkpoint, model_config_to_text, parse_conv_filters, save_checkpoint,
    Checkpoint, LoopEvent, OptConfig, SaveKind, TrainState,
};

use crate::util::{atomic_write, io_ctx, parse_val, read_lines, resolve_seed, KvConfig};
use crate::{CliError, GlobalArgs};

#[derive(Args)]
pub struct TrainArgs {
    /// bpe-transformer, char-transformer, or char-reduction-transformer
    #[arg(long, value_name = "MODE")]
    mode: Option<String>,
    /// Hyperparameter preset: desk (default) or paper
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    #[arg(long, value_name = "FILE")]
    train_src: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    train_tgt: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    dev_src: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    dev_tgt: Option<PathBuf>,
    /// Directory for checkpoints and the resolved config
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// BPE merge rules (required for bpe-transformer)
    #[arg(long, value_name = "FILE")]
    merges: Option<PathBuf>,
    /// Continue from an existing checkpoint
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
    /// Override any config key, e.g. --set d_model=32 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

const TRAIN_KEYS: &[&str] = &[
    "mode",
    "seed",
    "precision",
    "train_src",
    "train_tgt",
    "dev_src",
    "dev_tgt",
    "out_dir",
    "merges_file",
    "resume",
    "char_vocab_max",
    "src_vocab",
    "tgt_vocab",
    "enc_emb",
    "dec_emb",
    "d_model",
    "heads",
    "d_ff",
    "enc_layers",
    "dec_layers",
    "conv_filters",
    "pool_stride",
    "highway_layers",
    "dropout",
    "max_positions",
    "lr_factor",
    "warmup_steps",
    "beta1",
    "beta2",
    "eps",
    "label_smoothing",
    "accum",
    "token_budget",
    "max_updates",
    "eval_interval",
];

struct Settings {
    cfg: ModelConfig,
    ocfg: OptConfig,
    char_vocab_max: usize,
    seed: u64,
    precision: String,
    quiet: bool,
    train_src: PathBuf,
    train_tgt: PathBuf,
    dev: Option<(PathBuf, PathBuf)>,
    out_dir: PathBuf,
    merges_file: Option<PathBuf>,
    resume: Option<PathBuf>,
}

pub fn train(global: &GlobalArgs, args: &TrainArgs) -> Result<(), CliError> {
    let settings = resolve(global, args)?;
    match settings.precision.as_str() {
        "f32" => run::<f32>(settings),
        "f64" => run::<f64>(settings),
        other => Err(CliError::Usage(format!(
            "precision {other:?} (expected f32 or f64)"
        ))),
    }
}

fn resolve(global: &GlobalArgs, args: &TrainArgs) -> Result<Settings, CliError> {
    let mut kv = KvConfig::load(global.config.as_deref())?;
    for pair in &args.set {
        kv.push_override(pair)?;
    }
    kv.check_keys(TRAIN_KEYS)?;

    let mode_str = args
        .mode
        .as_deref()
        .or_else(|| kv.get("mode"))
        .ok_or_else(|| CliError::Usage("--mode is required".to_string()))?;
    let mode = Mode::parse(mode_str)?;

    let preset = args.preset.as_deref().unwrap_or("desk");
    let (mut cfg, mut ocfg) = match preset {
        "desk" => (ModelConfig::desk(mode, 0, 0), OptConfig::desk()),
        "paper" => (ModelConfig::paper(mode, 0, 0), OptConfig::paper()),
        other => {
            return Err(CliError::Usage(format!(
                "preset {other:?} (expected desk or paper)"
            )))
        }
    };

    let mut char_vocab_max = DEFAULT_CHAR_VOCAB;
    let mut paths: [Option<PathBuf>; 7] = Default::default();
    for (key, value) in kv.entries() {
        match key.as_str() {
            "mode" | "seed" | "precision" => {}
            "train_src" => paths[0] = Some(PathBuf::from(value)),
            "train_tgt" => paths[1] = Some(PathBuf::from(value)),
            "dev_src" => paths[2] = Some(PathBuf::from(value)),
            "dev_tgt" => paths[3] = Some(PathBuf::from(value)),
            "out_dir" => paths[4] = Some(PathBuf::from(value)),
            "merges_file" => paths[5] = Some(PathBuf::from(value)),
            "resume" => paths[6] = Some(PathBuf::from(value)),
            "char_vocab_max" => char_vocab_max = parse_val(key, value)?,
            "src_vocab" => cfg.src_vocab = parse_val(key, value)?,
            "tgt_vocab" => cfg.tgt_vocab = parse_val(key, value)?,
            "enc_emb" => cfg.enc_emb = parse_val(key, value)?,
            "dec_emb" => cfg.dec_emb = parse_val(key, value)?,
            "d_model" => cfg.d_model = parse_val(key, value)?,
            "heads" => cfg.heads = parse_val(key, value)?,
            "d_ff" => cfg.d_ff = parse_val(key, value)?,
            "enc_layers" => cfg.enc_layers = parse_val(key, value)?,
            "dec_layers" => cfg.dec_layers = parse_val(key, value)?,
            "conv_filters" => {
                cfg.conv_filters =
                    parse_conv_filters(value).map_err(|e| CliError::Usage(e.to_string()))?
            }
            "pool_stride" => cfg.pool_stride = parse_val(key, value)?,
            "highway_layers" => cfg.highway_layers = parse_val(key, value)?,
            "dropout" => cfg.dropout = parse_val(key, value)?,
            "max_positions" => cfg.max_positions = parse_val(key, value)?,
            "lr_factor" => ocfg.lr_factor = parse_val(key, value)?,
            "warmup_steps" => ocfg.warmup_steps = parse_val(key, value)?,
            "beta1" => ocfg.beta1 = parse_val(key, value)?,
            "beta2" => ocfg.beta2 = parse_val(key, value)?,
            "eps" => ocfg.eps = parse_val(key, value)?,
            "label_smoothing" => ocfg.label_smoothing = parse_val(key, value)?,
            "accum" => ocfg.accum = parse_val(key, value)?,
            "token_budget" => ocfg.token_budget = parse_val(key, value)?,
            "max_updates" => ocfg.max_updates = parse_val(key, value)?,
            "eval_interval" => ocfg.eval_interval = parse_val(key, value)?,
            other => unreachable!("key {other:?} passed schema validation"),
        }
    }

    let pick = |flag: &Option<PathBuf>, slot: &Option<PathBuf>| flag.clone().or_else(|| slot.clone());
    let require = |name: &str, p: Option<PathBuf>| {
        p.ok_or_else(|| CliError::Usage(format!("--{} is required", name.replace('_', "-"))))
    };
    let train_src = require("train_src", pick(&args.train_src, &paths[0]))?;
    let train_tgt = require("train_tgt", pick(&args.train_tgt, &paths[1]))?;
    let out_dir = require("out_dir", pick(&args.out_dir, &paths[4]))?;
    let dev = match (pick(&args.dev_src, &paths[2]), pick(&args.dev_tgt, &paths[3])) {
        (Some(s), Some(t)) => Some((s, t)),
        (None, None) => None,
        _ => {
            return Err(CliError::Usage(
                "--dev-src and --dev-tgt must be given together".to_string(),
            ))
        }
    };

    Ok(Settings {
        cfg,
        ocfg,
        char_vocab_max,
        seed: resolve_seed(global, &kv)?,
        precision: kv.get("precision").unwrap_or("f32").to_string(),
        quiet: global.quiet,
        train_src,
        train_tgt,
        dev,
        out_dir,
        merges_file: pick(&args.merges, &paths[5]),
        resume: pick(&args.resume, &paths[6]),
    })
}

fn read_pairs(src: &Path, tgt: &Path) -> Result<Vec<(String, String)>, CliError> {
    let src_lines = read_lines(src)?;
    let tgt_lines = read_lines(tgt)?;
    if src_lines.len() != tgt_lines.len() {
        return Err(CliError::Data(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            src_lines.len(),
            tgt.display(),
            tgt_lines.len()
        )));
    }
    Ok(src_lines.into_iter().zip(tgt_lines).collect())
}

fn encode_pairs(
    pairs: &[(String, String)],
    mode: TokenMode,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    merges: Option<&BpeMerges>,
) -> Result<Vec<(Vec<u32>, Vec<u32>)>, CliError> {
    pairs
        .iter()
        .map(|(s, t)| {
            Ok((
                encode(s, mode, src_vocab, merges)?,
                encode(t, mode, tgt_vocab, merges)?,
            ))
        })
        .collect()
}

fn resolved_config_text(s: &Settings, cfg: &ModelConfig) -> String {
    let mut text = String::new();
    text.push_str(&format!("seed={}\n", s.seed));
    text.push_str(&format!("precision={}\n", s.precision));
    text.push_str(&model_config_to_text(cfg));
    text.push_str(&format!("char_vocab_max={}\n", s.char_vocab_max));
    let o = &s.ocfg;
    text.push_str(&format!(
        "lr_factor={:?}\nwarmup_steps={}\nbeta1={:?}\nbeta2={:?}\neps={:?}\n\
         label_smoothing={:?}\naccum={}\ntoken_budget={}\nmax_updates={}\neval_interval={}\n",
        o.lr_factor,
        o.warmup_steps,
        o.beta1,
        o.beta2,
        o.eps,
        o.label_smoothing,
        o.accum,
        o.token_budget,
        o.max_updates,
        o.eval_interval,
    ));
    text.push_str(&format!("train_src={}\n", s.train_src.display()));
    text.push_str(&format!("train_tgt={}\n", s.train_tgt.display()));
    if let Some((ds, dt)) = &s.dev {
        text.push_str(&format!("dev_src={}\n", ds.display()));
        text.push_str(&format!("dev_tgt={}\n", dt.display()));
    }
    text.push_str(&format!("out_dir={}\n", s.out_dir.display()));
    if let Some(m) = &s.merges_file {
        text.push_str(&format!("merges_file={}\n", m.display()));
    }
    if let Some(r) = &s.resume {
        text.push_str(&format!("resume={}\n", r.display()));
    }
    text
}

fn run<T: Scalar>(mut s: Settings) -> Result<(), CliError> {
    let token_mode = s.cfg.mode.token_mode();

    let merges = match (&s.merges_file, token_mode) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_ctx(path, e))?;
            Some(BpeMerges::from_text(&text)?)
        }
        (None, TokenMode::Bpe) if s.resume.is_none() => {
            return Err(CliError::Usage(
                "bpe-transformer needs --merges (or a resume checkpoint carrying them)"
                    .to_string(),
            ))
        }
        (None, _) => None,
    };

    let raw_pairs = read_pairs(&s.train_src, &s.train_tgt)?;
    let raw_count = raw_pairs.len();

    // Resuming replaces the locally resolved model side wholesale: the
    // checkpoint fixes the architecture, vocabularies, and merges the
    // parameters were trained with.
    let (cfg, params, mut state, src_vocab, tgt_vocab, merges) = match &s.resume {
        Some(path) => {
            let cp: Checkpoint<T> = load_checkpoint(path)?;
            if cp.cfg.mode != s.cfg.mode {
                return Err(CliError::Usage(format!(
                    "resume checkpoint was trained as {}, requested {}",
                    cp.cfg.mode, s.cfg.mode
                )));
            }
            let state = cp.state.ok_or_else(|| {
                CliError::Data(format!("{}: no training state to resume", path.display()))
            })?;
            let missing = |what: &str| {
                CliError::Data(format!("{}: checkpoint lacks {what}", path.display()))
            };
            let src_vocab = cp.src_vocab.ok_or_else(|| missing("a source vocabulary"))?;
            let tgt_vocab = cp.tgt_vocab.ok_or_else(|| missing("a target vocabulary"))?;
            let merges = match token_mode {
                TokenMode::Bpe => {
                    Some(cp.merges.or(merges).ok_or_else(|| missing("merge rules"))?)
                }
                TokenMode::Char => None,
            };
            (cp.cfg, cp.params, state, src_vocab, tgt_vocab, merges)
        }
        None => {
            let pairs = filter_corpus(&raw_pairs, token_mode, merges.as_ref())?;
            if pairs.is_empty() {
                return Err(CliError::Data(
                    "no training pairs survive the length filter".to_string(),
                ));
            }
            let src_lines: Vec<&str> = pairs.iter().map(|(a, _)| a.as_str()).collect();
            let tgt_lines: Vec<&str> = pairs.iter().map(|(_, b)| b.as_str()).collect();
            let (src_vocab, tgt_vocab) = match token_mode {
                TokenMode::Char => (
                    build_char_vocab(&src_lines, s.char_vocab_max)?,
                    build_char_vocab(&tgt_lines, s.char_vocab_max)?,
                ),
                TokenMode::Bpe => {
                    let m = merges.as_ref().expect("checked above");
                    (build_bpe_vocab(&src_lines, m)?, build_bpe_vocab(&tgt_lines, m)?)
                }
            };
            s.cfg.src_vocab = src_vocab.len();
            s.cfg.tgt_vocab = tgt_vocab.len();
            s.cfg.validate()?;
            let params = ParamSet::<T>::init(&s.cfg, derive_seed(s.seed, 0, 0))?;
            let state = TrainState::new(&params, s.seed);
            (s.cfg.clone(), params, state, src_vocab, tgt_vocab, merges)
        }
    };
    let mut params = params;

    let kept_pairs = filter_corpus(&raw_pairs, token_mode, merges.as_ref())?;
    let train_ids = encode_pairs(&kept_pairs, token_mode, &src_vocab, &tgt_vocab, merges.as_ref())?;
    if train_ids.is_empty() {
        return Err(CliError::Data(
            "no training pairs survive the length filter".to_string(),
        ));
    }

    let dev_ids = match &s.dev {
        Some((ds, dt)) => {
            let dev_raw = read_pairs(ds, dt)?;
            let dev_kept = filter_corpus(&dev_raw, token_mode, merges.as_ref())?;
            if dev_kept.is_empty() {
                return Err(CliError::Data(
                    "no dev pairs survive the length filter".to_string(),
                ));
            }
            Some(encode_pairs(&dev_kept, token_mode, &src_vocab, &tgt_vocab, merges.as_ref())?)
        }
        None => None,
    };

    std::fs::create_dir_all(&s.out_dir).map_err(|e| io_ctx(&s.out_dir, e))?;
    let resolved = resolved_config_text(&s, &cfg);
    atomic_write(&s.out_dir.join("resolved.cfg"), &resolved)?;
    if !s.quiet {
        println!("# resolved config (also at {})", s.out_dir.join("resolved.cfg").display());
        print!("{resolved}");
        println!("# end config");
        println!(
            "# {} of {} pairs kept after length filter; vocab {}/{}",
            train_ids.len(),
            raw_count,
            src_vocab.len(),
            tgt_vocab.len()
        );
        println!("# step\tloss_per_token\tlr\tsec_per_update\ttokens_per_sec (timing columns vary between runs)");
    }

    let latest_path = s.out_dir.join("latest.ckpt");
    let best_path = s.out_dir.join("best.ckpt");
    let bad_loss: Cell<Option<f64>> = Cell::new(None);
    let quiet = s.quiet;

    ctnmt_core::train::train_loop(
        &train_ids,
        dev_ids.as_deref(),
        &mut params,
        &mut state,
        &cfg,
        &s.ocfg,
        |event| match event {
            LoopEvent::Update(u) => {
                if !u.loss_per_token.is_finite() {
                    bad_loss.set(Some(u.loss_per_token));
                }
                if !quiet {
                    println!(
                        "{}\t{:.6}\t{:.6e}\t{:.3}\t{:.1}",
                        u.step, u.loss_per_token, u.lr, u.seconds, u.tokens_per_sec
                    );
                }
            }
            LoopEvent::DevEval { step, dev_loss, is_best } => {
                if !quiet {
                    println!(
                        "# dev\tstep={step}\tloss={dev_loss:.6}{}",
                        if *is_best { "\tbest" } else { "" }
                    );
                }
            }
        },
        |kind, p, st| {
            let cp = Checkpoint {
                cfg: cfg.clone(),
                params: p.clone(),
                state: Some(st.clone()),
                src_vocab: Some(src_vocab.clone()),
                tgt_vocab: Some(tgt_vocab.clone()),
                merges: merges.clone(),
            };
            let path = match kind {
                SaveKind::Latest => &latest_path,
                SaveKind::Best => &best_path,
            };
            save_checkpoint(path, &cp)
        },
    )?;

    if let Some(loss) = bad_loss.get() {
        return Err(CliError::Numeric(format!(
            "training diverged: loss became {loss}"
        )));
    }
    if !quiet {
        println!(
            "# done\tstep={}\tbest_dev={}",
            state.step,
            if state.best_dev_loss.is_finite() {
                format!("{:.6}", state.best_dev_loss)
            } else {
                "n/a".to_string()
            }
        );
    }
    Ok(())
}
