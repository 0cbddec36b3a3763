//! Forward passes: attention, highway, the conv/maxpool length reducer, and
//! the full encoder/decoder stacks. Every function takes parameters by path
//! out of a [`ParamSet`], so the same code runs the trainable graph and the
//! frozen decode-time graph.

use rand_chacha::ChaCha8Rng;

use crate::model::{config_err, positional_encoding, ModelConfig, ModelError, ParamSet, LN_EPS};
use crate::tensor::{concat_last, embedding_lookup, Scalar, Tensor};
use crate::tokenize::{Batch, PadMask, BOS};

/// Encoder states plus the pad mask aligned to them (the reduced mask in
/// reduction mode). Cross-attention and decoding both key off this pair.
#[derive(Debug, Clone)]
pub struct EncoderOutput<T: Scalar> {
    /// `[bsz, src_positions, d_model]`
    pub states: Tensor<T>,
    pub pad_mask: PadMask,
}

fn linear<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, ModelError> {
    Ok(x.matmul(w)?.add(b)?)
}

fn maybe_dropout<T: Scalar>(
    x: Tensor<T>,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Tensor<T>, ModelError> {
    match rng.as_deref_mut() {
        Some(r) if rate > 0.0 => Ok(x.dropout(rate, r)?),
        _ => Ok(x),
    }
}

fn add_norm<T: Scalar>(
    x: &Tensor<T>,
    sublayer: Tensor<T>,
    params: &ParamSet<T>,
    prefix: &str,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Tensor<T>, ModelError> {
    let sublayer = maybe_dropout(sublayer, rate, rng)?;
    Ok(x.add(&sublayer)?.layer_norm(
        params.get(&format!("{prefix}.gain")),
        params.get(&format!("{prefix}.bias")),
        T::from_f64(LN_EPS),
    )?)
}

fn feed_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &ParamSet<T>,
    prefix: &str,
) -> Result<Tensor<T>, ModelError> {
    let hidden = linear(
        x,
        params.get(&format!("{prefix}.w1")),
        params.get(&format!("{prefix}.b1")),
    )?
    .relu();
    linear(
        &hidden,
        params.get(&format!("{prefix}.w2")),
        params.get(&format!("{prefix}.b2")),
    )
}

/// `[len, len]` additive mask: 0 where key ≤ query, a large negative number
/// where the key lies in the future.
pub fn causal_mask<T: Scalar>(len: usize) -> Result<Tensor<T>, ModelError> {
    let mut data = vec![T::zero(); len * len];
    for q in 0..len {
        for k in (q + 1)..len {
            data[q * len + k] = T::MASK_NEG;
        }
    }
    Ok(Tensor::from_vec(vec![len, len], data)?)
}

/// `[bsz·heads, lq, lk]` additive mask marking PAD keys, or `None` when the
/// batch has no padding at all.
pub fn keypad_mask<T: Scalar>(
    pad: &PadMask,
    lq: usize,
    heads: usize,
) -> Result<Option<Tensor<T>>, ModelError> {
    if pad.data.iter().all(|&p| !p) {
        return Ok(None);
    }
    let lk = pad.len;
    let mut data = Vec::with_capacity(pad.bsz * heads * lq * lk);
    for b in 0..pad.bsz {
        let row: Vec<T> = (0..lk)
            .map(|k| if pad.pad(b, k) { T::MASK_NEG } else { T::zero() })
            .collect();
        for _ in 0..heads * lq {
            data.extend_from_slice(&row);
        }
    }
    Ok(Some(Tensor::from_vec(vec![pad.bsz * heads, lq, lk], data)?))
}

/// Scaled dot-product attention with `heads` heads over `[bsz, len, d_model]`
/// inputs. `mask` is added to the raw scores and must be `[lq, lk]` or
/// `[bsz·heads, lq, lk]`. Projection weights live at `{prefix}.{wq,wk,wv,wo}`
/// with matching `b*` biases.
pub fn multihead_attention<T: Scalar>(
    query: &Tensor<T>,
    key: &Tensor<T>,
    value: &Tensor<T>,
    mask: Option<&Tensor<T>>,
    heads: usize,
    params: &ParamSet<T>,
    prefix: &str,
) -> Result<Tensor<T>, ModelError> {
    let (bsz, lq, d) = match query.shape() {
        [b, l, d] => (*b, *l, *d),
        other => return Err(config_err(format!("attention query has shape {other:?}"))),
    };
    let lk = match key.shape() {
        [kb, l, kd] if *kb == bsz && *kd == d => *l,
        other => return Err(config_err(format!("attention key has shape {other:?}"))),
    };
    if value.shape() != key.shape() {
        return Err(config_err(format!(
            "attention value shape {:?} does not match key {:?}",
            value.shape(),
            key.shape()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(config_err(format!("{d} channels over {heads} heads")));
    }
    let dh = d / heads;
    let p = |name: &str| params.get(&format!("{prefix}.{name}"));
    let split = |x: &Tensor<T>, len: usize| -> Result<Tensor<T>, ModelError> {
        Ok(x.reshape(vec![bsz, len, heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(vec![bsz * heads, len, dh])?)
    };
    let q = split(&linear(query, p("wq"), p("bq"))?, lq)?;
    let k = split(&linear(key, p("wk"), p("bk"))?, lk)?;
    let v = split(&linear(value, p("wv"), p("bv"))?, lk)?;

    let mut scores = q.bmm_nt(&k)?.mul_scalar(T::from_f64(1.0 / (dh as f64).sqrt()));
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    let weights = scores.softmax_lastdim()?;
    let ctx = weights
        .bmm(&v)?
        .reshape(vec![bsz, heads, lq, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(vec![bsz, lq, d])?;
    linear(&ctx, p("wo"), p("bo"))
}

/// One highway layer `y = g ⊙ relu(x·Wh + bh) + (1−g) ⊙ x` with
/// `g = σ(x·Wt + bt)`; weights at `{prefix}.{wh,bh,wt,bt}`.
pub fn highway_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &ParamSet<T>,
    prefix: &str,
) -> Result<Tensor<T>, ModelError> {
    let transform = linear(
        x,
        params.get(&format!("{prefix}.wh")),
        params.get(&format!("{prefix}.bh")),
    )?
    .relu();
    let gate = linear(
        x,
        params.get(&format!("{prefix}.wt")),
        params.get(&format!("{prefix}.bt")),
    )?
    .sigmoid();
    let carry = gate.mul_scalar(-T::one()).add_scalar(T::one());
    Ok(gate.mul(&transform)?.add(&carry.mul(x)?)?)
}

/// The length-reduction front-end: embed source ids, run the width-banked
/// convolutions, relu, maxpool by `pool_stride`, the highway stack, and the
/// projection to d_model. Returns `[bsz, len/stride, d_model]` states and the
/// pooled pad mask (a pooled position is PAD only when every character under
/// it is PAD).
pub fn reduce_source<T: Scalar>(
    src_ids: &[u32],
    pad: &PadMask,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
) -> Result<(Tensor<T>, PadMask), ModelError> {
    let (bsz, len) = (pad.bsz, pad.len);
    if src_ids.len() != bsz * len {
        return Err(config_err(format!(
            "{} source ids for a {bsz}x{len} pad mask",
            src_ids.len()
        )));
    }
    let stride = cfg.pool_stride;
    if len == 0 || len % stride != 0 {
        return Err(config_err(format!(
            "source length {len} not a multiple of pool stride {stride}"
        )));
    }
    let emb = embedding_lookup(params.get("enc.embed"), src_ids)?
        .reshape(vec![bsz, len, cfg.enc_emb])?;
    let mut widths = cfg.conv_filters.clone();
    widths.sort_unstable();
    let mut parts = Vec::with_capacity(widths.len());
    for (w, _) in widths {
        let conv = emb
            .conv1d_same(params.get(&format!("enc.conv.w{w}")))?
            .add(params.get(&format!("enc.conv.b{w}")))?;
        parts.push(conv);
    }
    let pooled = concat_last(&parts)?.relu().maxpool1d(stride)?;
    let mut h = pooled;
    for i in 0..cfg.highway_layers {
        h = highway_forward(&h, params, &format!("enc.highway{i}"))?;
    }
    let states = linear(&h, params.get("enc.proj.w"), params.get("enc.proj.b"))?;
    let reduced_len = len / stride;
    let mut mask = Vec::with_capacity(bsz * reduced_len);
    for b in 0..bsz {
        for j in 0..reduced_len {
            mask.push((0..stride).all(|s| pad.pad(b, j * stride + s)));
        }
    }
    let reduced = PadMask {
        bsz,
        len: reduced_len,
        data: mask,
    };
    Ok((states, reduced))
}

/// Self-attention encoder stack over already-embedded inputs
/// `[bsz, len, d_model]`. Post-norm residual wiring: each sublayer output is
/// dropped out, added to its input, then layer-normalized.
pub fn encoder_forward<T: Scalar>(
    x: &Tensor<T>,
    pad: &PadMask,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<T>, ModelError> {
    let len = match x.shape() {
        [b, l, d] if *b == pad.bsz && *d == cfg.d_model => *l,
        other => {
            return Err(config_err(format!(
                "encoder input shape {other:?} for a {}x{} pad mask at d_model {}",
                pad.bsz, pad.len, cfg.d_model
            )))
        }
    };
    if len != pad.len {
        return Err(config_err(format!(
            "encoder input length {len} vs pad mask length {}",
            pad.len
        )));
    }
    let mask = keypad_mask::<T>(pad, len, cfg.heads)?;
    let mut h = x.clone();
    for i in 0..cfg.enc_layers {
        let attn = multihead_attention(
            &h,
            &h,
            &h,
            mask.as_ref(),
            cfg.heads,
            params,
            &format!("enc.layer{i}.attn"),
        )?;
        h = add_norm(&h, attn, params, &format!("enc.layer{i}.norm1"), cfg.dropout, &mut rng)?;
        let ffn = feed_forward(&h, params, &format!("enc.layer{i}.ffn"))?;
        h = add_norm(&h, ffn, params, &format!("enc.layer{i}.norm2"), cfg.dropout, &mut rng)?;
    }
    Ok(h)
}

/// Embed and encode a batch of source rows according to `cfg.mode`:
/// character/subword modes scale embeddings by √d_model and add positions;
/// reduction mode runs [`reduce_source`] and adds positions to the projected
/// states.
pub fn encode_source<T: Scalar>(
    src_ids: &[u32],
    src_pad: &PadMask,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<EncoderOutput<T>, ModelError> {
    let (x, pad_mask) = if cfg.mode.is_reduction() {
        let (states, reduced) = reduce_source(src_ids, src_pad, params, cfg)?;
        (states, reduced)
    } else {
        if src_ids.len() != src_pad.bsz * src_pad.len {
            return Err(config_err(format!(
                "{} source ids for a {}x{} pad mask",
                src_ids.len(),
                src_pad.bsz,
                src_pad.len
            )));
        }
        let emb = embedding_lookup(params.get("enc.embed"), src_ids)?
            .reshape(vec![src_pad.bsz, src_pad.len, cfg.d_model])?
            .mul_scalar(T::from_f64((cfg.d_model as f64).sqrt()));
        (emb, src_pad.clone())
    };
    if pad_mask.len > cfg.max_positions {
        return Err(config_err(format!(
            "encoder length {} exceeds max_positions {}",
            pad_mask.len, cfg.max_positions
        )));
    }
    let pe = positional_encoding::<T>(pad_mask.len, cfg.d_model)?;
    let x = maybe_dropout(x.add(&pe)?, cfg.dropout, &mut rng)?;
    let states = encoder_forward(&x, &pad_mask, params, cfg, rng)?;
    Ok(EncoderOutput { states, pad_mask })
}

/// Decode logits `[bsz, tgt_len, tgt_vocab]` for BOS-led target rows laid out
/// row-major in `tgt_ids`. Self-attention is causally masked; cross-attention
/// masks PAD source keys.
pub fn decoder_forward<T: Scalar>(
    tgt_ids: &[u32],
    enc: &EncoderOutput<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<T>, ModelError> {
    let bsz = enc.pad_mask.bsz;
    if bsz == 0 || tgt_ids.is_empty() || tgt_ids.len() % bsz != 0 {
        return Err(config_err(format!(
            "{} target ids do not tile {bsz} rows",
            tgt_ids.len()
        )));
    }
    let lt = tgt_ids.len() / bsz;
    if lt > cfg.max_positions {
        return Err(config_err(format!(
            "target length {lt} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    for b in 0..bsz {
        if tgt_ids[b * lt] != BOS {
            return Err(config_err(format!("target row {b} does not start with BOS")));
        }
    }
    let emb = embedding_lookup(params.get("dec.embed"), tgt_ids)?
        .reshape(vec![bsz, lt, cfg.d_model])?
        .mul_scalar(T::from_f64((cfg.d_model as f64).sqrt()));
    let pe = positional_encoding::<T>(lt, cfg.d_model)?;
    let mut h = maybe_dropout(emb.add(&pe)?, cfg.dropout, &mut rng)?;
    let causal = causal_mask::<T>(lt)?;
    let cross = keypad_mask::<T>(&enc.pad_mask, lt, cfg.heads)?;
    for i in 0..cfg.dec_layers {
        let sa = multihead_attention(
            &h,
            &h,
            &h,
            Some(&causal),
            cfg.heads,
            params,
            &format!("dec.layer{i}.self_attn"),
        )?;
        h = add_norm(&h, sa, params, &format!("dec.layer{i}.norm1"), cfg.dropout, &mut rng)?;
        let ca = multihead_attention(
            &h,
            &enc.states,
            &enc.states,
            cross.as_ref(),
            cfg.heads,
            params,
            &format!("dec.layer{i}.cross_attn"),
        )?;
        h = add_norm(&h, ca, params, &format!("dec.layer{i}.norm2"), cfg.dropout, &mut rng)?;
        let ffn = feed_forward(&h, params, &format!("dec.layer{i}.ffn"))?;
        h = add_norm(&h, ffn, params, &format!("dec.layer{i}.norm3"), cfg.dropout, &mut rng)?;
    }
    linear(&h, params.get("dec.out.w"), params.get("dec.out.b"))
}

/// Full teacher-forced pass over one batch: encode the source rows, decode
/// the BOS-led target rows, return logits `[bsz, tgt_len, tgt_vocab]`.
pub fn forward<T: Scalar>(
    batch: &Batch,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<T>, ModelError> {
    let enc = encode_source(&batch.src_ids, &batch.src_pad, params, cfg, rng.as_deref_mut())?;
    decoder_forward(&batch.tgt_ids, &enc, params, cfg, rng)
}
