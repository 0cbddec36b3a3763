//! Times one full training update (forward, backward, Adam step) per
//! architecture at desk dimensions, on long character sources where the
//! length-reduction front-end matters.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ctnmt_bench::{bench_config, synthetic_pairs};
use ctnmt_core::model::{Mode, ParamSet};
use ctnmt_core::tokenize::make_batches;
use ctnmt_core::train::{train_update, OptConfig, TrainState};

fn bench_mode(c: &mut Criterion, mode: Mode, src_len: usize) {
    let cfg = bench_config(mode);
    let pairs = synthetic_pairs(2, src_len, 11);
    let budget = pairs.iter().map(|(_, t)| t.len()).sum::<usize>();
    let batches = make_batches(&pairs, budget, cfg.batch_stride(), 0).unwrap();
    assert_eq!(batches.len(), 1, "fixture should form a single batch");

    let mut ocfg = OptConfig::desk();
    ocfg.accum = 1;
    let mut params = ParamSet::<f32>::init(&cfg, 5).unwrap();
    let mut state = TrainState::new(&params, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let mut group = c.benchmark_group("train_update");
    group.sample_size(10);
    group.bench_function(mode.as_str(), |b| {
        b.iter(|| train_update(&batches, &mut params, &mut state, &cfg, &ocfg, &mut rng).unwrap())
    });
    group.finish();
}

fn updates(c: &mut Criterion) {
    // Character modes see the same 450-char source; BPE sees the token count
    // the same text would occupy after subword segmentation.
    bench_mode(c, Mode::CharTransformer, 450);
    bench_mode(c, Mode::CharReductionTransformer, 450);
    bench_mode(c, Mode::BpeTransformer, 50);
}

criterion_group!(updates_group, updates);
criterion_main!(updates_group);
