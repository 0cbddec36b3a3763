//! `benchmark`: time optimizer updates for the plain character transformer
//! against the length-reducing variant on synthetic maximal-length batches.

use clap::Args;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ctnmt_core::model::{Mode, ModelConfig};
use ctnmt_core::tokenize::EOS;
use ctnmt_core::train::{
    available_memory_bytes, benchmark_updates, derive_seed, pick_benchmark_dims, BenchSide,
};

use crate::util::{get_parsed, resolve_seed, KvConfig};
use crate::{CliError, GlobalArgs};

/// Source length of every synthetic sentence, padding-free for stride 5.
const BENCH_SRC_LEN: usize = 450;
/// Synthetic character vocabulary (ids 4.. plus the specials).
const BENCH_VOCAB: usize = 64;
/// Updates a full-size training run would take; used to project total hours.
const PROJECTED_UPDATES: f64 = 100_000.0;
/// Reference point printed next to the measured ratio: at full size the
/// reduction model is expected around 66% of the plain model's update time.
const REFERENCE_PERCENT: f64 = 66.0;

#[derive(Args)]
pub struct BenchmarkArgs {
    /// Timed updates per model (default 20)
    #[arg(long, value_name = "N")]
    updates: Option<usize>,
    /// Untimed warmup updates per model (default 2)
    #[arg(long, value_name = "N")]
    warmup: Option<usize>,
    /// Model width; omit or 0 to pick the largest that fits in memory
    #[arg(long = "d-model", value_name = "D")]
    d_model: Option<usize>,
    /// Sentence pairs per synthetic batch (default 2)
    #[arg(long, value_name = "N")]
    pairs: Option<usize>,
}

const BENCH_KEYS: &[&str] = &["updates", "warmup", "d_model", "pairs", "seed"];

fn paper_pair(d_model: usize) -> (ModelConfig, ModelConfig) {
    let mut reduction = ModelConfig::paper(Mode::CharReductionTransformer, BENCH_VOCAB, BENCH_VOCAB);
    let mut plain = ModelConfig::paper(Mode::CharTransformer, BENCH_VOCAB, BENCH_VOCAB);
    for cfg in [&mut reduction, &mut plain] {
        cfg.d_model = d_model;
        cfg.d_ff = 4 * d_model;
        cfg.dec_emb = d_model;
    }
    plain.enc_emb = d_model;
    (reduction, plain)
}

fn synthetic_pairs(count: usize, seed: u64) -> Vec<(Vec<u32>, Vec<u32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3, 0));
    let row = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        let mut ids: Vec<u32> = (0..BENCH_SRC_LEN - 1)
            .map(|_| rng.gen_range(4..BENCH_VOCAB as u32))
            .collect();
        ids.push(EOS);
        ids
    };
    (0..count).map(|_| (row(&mut rng), row(&mut rng))).collect()
}

fn side_line(name: &str, side: &BenchSide, baseline_sec: f64) -> String {
    format!(
        "{name:<30} {:>10.3} {:>9.1} {:>8.1}\n",
        side.median_sec,
        side.median_sec * PROJECTED_UPDATES / 3600.0,
        100.0 * side.median_sec / baseline_sec
    )
}

pub fn benchmark(global: &GlobalArgs, args: &BenchmarkArgs) -> Result<(), CliError> {
    let kv = KvConfig::load(global.config.as_deref())?;
    kv.check_keys(BENCH_KEYS)?;
    let updates = match args.updates {
        Some(n) => n,
        None => get_parsed(&kv, "updates")?.unwrap_or(20),
    };
    let warmup = match args.warmup {
        Some(n) => n,
        None => get_parsed(&kv, "warmup")?.unwrap_or(2),
    };
    let pair_count = match args.pairs {
        Some(n) => n,
        None => get_parsed(&kv, "pairs")?.unwrap_or(2),
    };
    if pair_count == 0 {
        return Err(CliError::Usage("pairs must be positive".to_string()));
    }
    let requested_d = match args.d_model {
        Some(d) => Some(d),
        None => get_parsed(&kv, "d_model")?,
    };
    let seed = resolve_seed(global, &kv)?;

    let (d_model, note) = match requested_d {
        Some(d) if d > 0 => (d, None),
        _ => pick_benchmark_dims(
            paper_pair,
            BENCH_SRC_LEN,
            BENCH_SRC_LEN + 1,
            pair_count,
            available_memory_bytes(),
        ),
    };
    let (reduction_cfg, plain_cfg) = paper_pair(d_model);
    let pairs = synthetic_pairs(pair_count, seed);

    if !global.quiet {
        println!(
            "# synthetic corpus: {pair_count} pairs x {BENCH_SRC_LEN} chars, d_model {d_model}, \
             {updates} updates ({warmup} warmup), f32"
        );
        if let Some(n) = &note {
            println!("# {n}");
        }
    }

    let report =
        benchmark_updates::<f32>(&reduction_cfg, &plain_cfg, &pairs, updates, warmup, seed)?;

    let mut table = String::new();
    table.push_str(&format!(
        "{:<30} {:>10} {:>9} {:>8}\n",
        "model", "sec/update", "total(h)", "percent"
    ));
    table.push_str(&side_line("char-transformer", &report.b, report.b.median_sec));
    table.push_str(&side_line(
        "char-reduction-transformer",
        &report.a,
        report.b.median_sec,
    ));
    print!("{table}");
    println!("d_model={d_model}");
    println!("char_sec={:.6}", report.b.median_sec);
    println!("reduction_sec={:.6}", report.a.median_sec);
    println!(
        "ratio={:.4} (reference {:.0}%)",
        report.ratio, REFERENCE_PERCENT
    );
    Ok(())
}
