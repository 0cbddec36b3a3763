//! Finite-difference gradient verification for every layer and for the full
//! models end to end, in double precision. Layer checks must stay under 1e-6
//! relative error, whole-model checks under 1e-4.

use ctnmt_core::model::{
    decoder_forward, encoder_forward, forward, highway_forward, multihead_attention,
    reduce_source, EncoderOutput, Mode, ModelConfig, ParamSet,
};
use ctnmt_core::tensor::{embedding_lookup, finite_diff_check_multi, DEFAULT_FD_EPS};
use ctnmt_core::tokenize::{make_batches, Batch, PadMask, BOS, EOS, PAD};
use ctnmt_core::train::nll_loss;
use ctnmt_core::{Scalar, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LAYER_TOL: f64 = 1e-6;
/// Stacked sublayers and whole models accumulate central-difference noise;
/// composites get the looser bound.
const COMPOSITE_TOL: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn causal_additive(len: usize) -> Tensor<f64> {
    let mut data = vec![0.0f64; len * len];
    for q in 0..len {
        for k in (q + 1)..len {
            data[q * len + k] = <f64 as Scalar>::MASK_NEG;
        }
    }
    Tensor::from_vec(vec![len, len], data).unwrap()
}

/// Check gradients of `loss` with respect to every parameter of a freshly
/// initialized set plus any extra input tensors.
fn check_full(
    cfg: &ModelConfig,
    seed: u64,
    extra: Vec<Tensor<f64>>,
    loss: impl Fn(&ParamSet<f64>, &[Tensor<f64>]) -> Tensor<f64>,
) -> f64 {
    let params = ParamSet::<f64>::init(cfg, seed).unwrap();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let mut inputs: Vec<Tensor<f64>> = params
        .iter()
        .map(|(_, t)| Tensor::from_vec(t.shape().to_vec(), t.data().to_vec()).unwrap())
        .collect();
    let n_params = inputs.len();
    inputs.extend(extra);
    finite_diff_check_multi(
        |vars| {
            let entries = names
                .iter()
                .cloned()
                .zip(vars[..n_params].iter().cloned())
                .collect();
            Ok(loss(&ParamSet::from_entries(entries), &vars[n_params..]))
        },
        &inputs,
        DEFAULT_FD_EPS,
    )
    .unwrap()
}

fn micro_cfg(mode: Mode) -> ModelConfig {
    let mut cfg = ModelConfig::desk(mode, 9, 9);
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.d_ff = 16;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.dec_emb = 8;
    cfg.max_positions = 32;
    cfg.dropout = 0.0;
    if mode.is_reduction() {
        cfg.enc_emb = 4;
        cfg.conv_filters = vec![(1, 3), (2, 3)];
        cfg.pool_stride = 2;
        cfg.highway_layers = 1;
    } else {
        cfg.enc_emb = 8;
        cfg.conv_filters = Vec::new();
        cfg.pool_stride = 1;
    }
    cfg.validate().unwrap();
    cfg
}

fn micro_batch(cfg: &ModelConfig) -> Batch {
    let pairs = vec![
        (vec![4u32, 5, 6, 7, EOS], vec![4u32, 5, EOS]),
        (vec![8u32, EOS], vec![6u32, 7, 8, EOS]),
    ];
    make_batches(&pairs, 24, cfg.batch_stride(), 0)
        .unwrap()
        .remove(0)
}

#[test]
fn attention_gradients_check() {
    let (d, heads, len) = (4usize, 2usize, 3usize);
    let names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"];
    for (seed, mask) in [(0u64, None), (1, None), (10, Some(causal_additive(len))), (11, Some(causal_additive(len)))] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs: Vec<Tensor<f64>> = names
            .iter()
            .map(|n| {
                if n.starts_with('w') {
                    randn(&mut rng, &[d, d])
                } else {
                    randn(&mut rng, &[d])
                }
            })
            .collect();
        inputs.push(randn(&mut rng, &[1, len, d]));
        let probe = randn(&mut rng, &[1, len, d]);
        let err = finite_diff_check_multi(
            |vars| {
                let entries = names
                    .iter()
                    .enumerate()
                    .map(|(i, n)| (format!("a.{n}"), vars[i].clone()))
                    .collect();
                let params = ParamSet::from_entries(entries);
                let x = &vars[8];
                let out =
                    multihead_attention(x, x, x, mask.as_ref(), heads, &params, "a").unwrap();
                Ok(out.mul(&probe)?.sum_all())
            },
            &inputs,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < LAYER_TOL, "seed {seed}: attention error {err}");
    }
}

#[test]
fn highway_gradients_check() {
    let d = 5usize;
    let names = ["wh", "bh", "wt", "bt"];
    for seed in 20..23u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs: Vec<Tensor<f64>> = names
            .iter()
            .map(|n| {
                if n.starts_with('w') {
                    randn(&mut rng, &[d, d])
                } else {
                    randn(&mut rng, &[d])
                }
            })
            .collect();
        inputs.push(randn(&mut rng, &[3, d]));
        let probe = randn(&mut rng, &[3, d]);
        let err = finite_diff_check_multi(
            |vars| {
                let entries = names
                    .iter()
                    .enumerate()
                    .map(|(i, n)| (format!("h.{n}"), vars[i].clone()))
                    .collect();
                let out = highway_forward(&vars[4], &ParamSet::from_entries(entries), "h").unwrap();
                Ok(out.mul(&probe)?.sum_all())
            },
            &inputs,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < LAYER_TOL, "seed {seed}: highway error {err}");
    }
}

#[test]
fn layer_norm_gradients_check() {
    let d = 6usize;
    for seed in 30..33u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            randn(&mut rng, &[2, 3, d]),
            randn(&mut rng, &[d]),
            randn(&mut rng, &[d]),
        ];
        let probe = randn(&mut rng, &[2, 3, d]);
        let err = finite_diff_check_multi(
            |vars| {
                let out = vars[0].layer_norm(&vars[1], &vars[2], 1e-5)?;
                Ok(out.mul(&probe)?.sum_all())
            },
            &inputs,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < LAYER_TOL, "seed {seed}: layer norm error {err}");
    }
}

#[test]
fn feed_forward_gradients_check() {
    let (d, f) = (4usize, 7usize);
    for seed in 40..43u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            randn(&mut rng, &[3, d]),
            randn(&mut rng, &[d, f]),
            randn(&mut rng, &[f]),
            randn(&mut rng, &[f, d]),
            randn(&mut rng, &[d]),
        ];
        let probe = randn(&mut rng, &[3, d]);
        let err = finite_diff_check_multi(
            |vars| {
                let hidden = vars[0].matmul(&vars[1])?.add(&vars[2])?.relu();
                let out = hidden.matmul(&vars[3])?.add(&vars[4])?;
                Ok(out.mul(&probe)?.sum_all())
            },
            &inputs,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < LAYER_TOL, "seed {seed}: feed-forward error {err}");
    }
}

#[test]
fn embedding_gradients_check() {
    for seed in 50..53u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = randn(&mut rng, &[6, 4]);
        let probe = randn(&mut rng, &[5, 4]);
        let err = finite_diff_check_multi(
            |vars| {
                let out = embedding_lookup(&vars[0], &[0, 3, 5, 3, 1])?;
                Ok(out.mul(&probe)?.sum_all())
            },
            &[table],
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < LAYER_TOL, "seed {seed}: embedding error {err}");
    }
}

#[test]
fn conv_and_maxpool_gradients_check() {
    for seed in 55..58u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            randn(&mut rng, &[1, 6, 3]),
            randn(&mut rng, &[2, 3, 4]),
            randn(&mut rng, &[4]),
        ];
        let probe = randn(&mut rng, &[1, 3, 4]);
        let err = finite_diff_check_multi(
            |vars| {
                let out = vars[0]
                    .conv1d_same(&vars[1])?
                    .add(&vars[2])?
                    .relu()
                    .maxpool1d(2)?;
                Ok(out.mul(&probe)?.sum_all())
            },
            &inputs,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < LAYER_TOL, "seed {seed}: conv/maxpool error {err}");
    }
}

#[test]
fn reduction_front_end_gradients_check() {
    let cfg = micro_cfg(Mode::CharReductionTransformer);
    let src_ids: Vec<u32> = vec![4, 5, 6, 7, EOS, PAD];
    let pad = PadMask {
        bsz: 1,
        len: 6,
        data: vec![false, false, false, false, false, true],
    };
    for seed in 60..63u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = randn(&mut rng, &[1, 3, cfg.d_model]);
        let err = check_full(&cfg, seed, Vec::new(), |params, _| {
            let (states, _) = reduce_source(&src_ids, &pad, params, &cfg).unwrap();
            states.mul(&probe).unwrap().sum_all()
        });
        assert!(err < COMPOSITE_TOL, "seed {seed}: conv front-end error {err}");
    }
}

#[test]
fn encoder_stack_gradients_check() {
    let cfg = micro_cfg(Mode::CharTransformer);
    let pad = PadMask {
        bsz: 2,
        len: 3,
        data: vec![false, false, false, false, false, true],
    };
    for seed in 70..72u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[2, 3, cfg.d_model]);
        let probe = randn(&mut rng, &[2, 3, cfg.d_model]);
        let err = check_full(&cfg, seed, vec![x], |params, extra| {
            let out = encoder_forward(&extra[0], &pad, params, &cfg, None).unwrap();
            out.mul(&probe).unwrap().sum_all()
        });
        assert!(err < COMPOSITE_TOL, "seed {seed}: encoder error {err}");
    }
}

#[test]
fn decoder_stack_gradients_check() {
    let cfg = micro_cfg(Mode::CharTransformer);
    let tgt_ids: Vec<u32> = vec![BOS, 4, 5, EOS, BOS, 6, EOS, PAD];
    let pad = PadMask {
        bsz: 2,
        len: 3,
        data: vec![false, false, false, false, false, true],
    };
    for seed in 80..82u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states = randn(&mut rng, &[2, 3, cfg.d_model]);
        let probe = randn(&mut rng, &[2, 4, cfg.tgt_vocab]);
        let err = check_full(&cfg, seed, vec![states], |params, extra| {
            let enc = EncoderOutput {
                states: extra[0].clone(),
                pad_mask: pad.clone(),
            };
            let logits = decoder_forward(&tgt_ids, &enc, params, &cfg, None).unwrap();
            logits.mul(&probe).unwrap().sum_all()
        });
        assert!(err < COMPOSITE_TOL, "seed {seed}: decoder error {err}");
    }
}

#[test]
fn full_model_gradients_check_all_modes() {
    for mode in [
        Mode::BpeTransformer,
        Mode::CharTransformer,
        Mode::CharReductionTransformer,
    ] {
        let cfg = micro_cfg(mode);
        let batch = micro_batch(&cfg);
        for (seed, smoothing) in [(90u64, 0.1f64), (91, 0.0)] {
            let err = check_full(&cfg, seed, Vec::new(), |params, _| {
                let logits = forward(&batch, params, &cfg, None).unwrap();
                nll_loss(&logits, &batch, smoothing).unwrap().0
            });
            assert!(
                err < COMPOSITE_TOL,
                "{} seed {seed} smoothing {smoothing}: end-to-end error {err}",
                mode.as_str()
            );
        }
    }
}
