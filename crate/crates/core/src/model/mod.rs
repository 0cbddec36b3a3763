//! The three translation architectures: a subword transformer, a character
//! transformer, and the character model with a convolutional length-reduction
//! front-end (conv bank → maxpool → highway → projection) ahead of the same
//! six-layer encoder/decoder stack.

mod layers;

pub use layers::{
    decoder_forward, encode_source, encoder_forward, forward, highway_forward,
    multihead_attention, reduce_source, EncoderOutput,
};

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub(crate) fn config_err<S: Into<String>>(msg: S) -> ModelError {
    ModelError::Config(msg.into())
}

/// Which of the three architectures a config describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    BpeTransformer,
    CharTransformer,
    CharReductionTransformer,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::BpeTransformer => "bpe-transformer",
            Mode::CharTransformer => "char-transformer",
            Mode::CharReductionTransformer => "char-reduction-transformer",
        }
    }

    pub fn parse(s: &str) -> Result<Mode, ModelError> {
        match s {
            "bpe-transformer" => Ok(Mode::BpeTransformer),
            "char-transformer" => Ok(Mode::CharTransformer),
            "char-reduction-transformer" => Ok(Mode::CharReductionTransformer),
            other => Err(config_err(format!(
                "unknown mode {other:?} (expected bpe-transformer, char-transformer \
                 or char-reduction-transformer)"
            ))),
        }
    }

    pub fn token_mode(&self) -> crate::tokenize::TokenMode {
        match self {
            Mode::BpeTransformer => crate::tokenize::TokenMode::Bpe,
            _ => crate::tokenize::TokenMode::Char,
        }
    }

    pub fn is_reduction(&self) -> bool {
        matches!(self, Mode::CharReductionTransformer)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Every dimension of a model. Build one with [`ModelConfig::paper`] or
/// [`ModelConfig::desk`] and adjust from there; [`ModelConfig::validate`]
/// guards the cross-field rules.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub enc_emb: usize,
    pub dec_emb: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// (width, filter count) pairs; reduction mode only.
    pub conv_filters: Vec<(usize, usize)>,
    pub pool_stride: usize,
    pub highway_layers: usize,
    pub dropout: f64,
    pub max_positions: usize,
}

impl ModelConfig {
    /// Full-size dimensions: d_model 512, 8 heads, feed-forward 2048, six
    /// layers each side; the reduction front-end uses a 128-wide character
    /// embedding, 2100 conv channels, pool stride 5 and two highway layers.
    pub fn paper(mode: Mode, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            mode,
            src_vocab,
            tgt_vocab,
            enc_emb: if mode.is_reduction() { 128 } else { 512 },
            dec_emb: 512,
            d_model: 512,
            heads: 8,
            d_ff: 2048,
            enc_layers: 6,
            dec_layers: 6,
            conv_filters: if mode.is_reduction() {
                vec![
                    (1, 200),
                    (2, 200),
                    (3, 250),
                    (4, 250),
                    (5, 300),
                    (6, 300),
                    (7, 300),
                    (8, 300),
                ]
            } else {
                Vec::new()
            },
            pool_stride: if mode.is_reduction() { 5 } else { 1 },
            highway_layers: 2,
            dropout: 0.0,
            max_positions: 512,
        }
    }

    /// Miniature dimensions sized so the whole test suite runs on a CPU in
    /// minutes: d_model 64, 2 heads, 2 layers, feed-forward 128, 16 filters
    /// per width.
    pub fn desk(mode: Mode, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            mode,
            src_vocab,
            tgt_vocab,
            enc_emb: if mode.is_reduction() { 32 } else { 64 },
            dec_emb: 64,
            d_model: 64,
            heads: 2,
            d_ff: 128,
            enc_layers: 2,
            dec_layers: 2,
            conv_filters: if mode.is_reduction() {
                (1..=8).map(|w| (w, 16)).collect()
            } else {
                Vec::new()
            },
            pool_stride: if mode.is_reduction() { 5 } else { 1 },
            highway_layers: 2,
            dropout: 0.0,
            max_positions: 512,
        }
    }

    /// Sum of conv filter counts: the channel width entering the highway stack.
    pub fn conv_channels(&self) -> usize {
        self.conv_filters.iter().map(|(_, c)| c).sum()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(config_err(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.src_vocab < 5 || self.tgt_vocab < 5 {
            return Err(config_err("vocabulary smaller than specials + 1 token"));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(config_err("layer counts must be positive"));
        }
        if self.dec_emb != self.d_model {
            return Err(config_err(format!(
                "decoder embedding {} must equal d_model {}",
                self.dec_emb, self.d_model
            )));
        }
        if self.max_positions == 0 {
            return Err(config_err("max_positions must be positive"));
        }
        if self.mode.is_reduction() {
            if self.conv_filters.is_empty() {
                return Err(config_err("reduction mode needs conv_filters"));
            }
            let mut seen = [false; 9];
            for &(w, c) in &self.conv_filters {
                if w == 0 || w > 8 {
                    return Err(config_err(format!("conv width {w} outside 1..=8")));
                }
                if std::mem::replace(&mut seen[w], true) {
                    return Err(config_err(format!("duplicate conv width {w}")));
                }
                if c == 0 {
                    return Err(config_err(format!("conv width {w} has zero filters")));
                }
            }
            if self.pool_stride == 0 {
                return Err(config_err("pool_stride must be positive"));
            }
        } else {
            if !self.conv_filters.is_empty() {
                return Err(config_err("conv_filters only apply to reduction mode"));
            }
            if self.enc_emb != self.d_model {
                return Err(config_err(format!(
                    "encoder embedding {} must equal d_model {} outside reduction mode",
                    self.enc_emb, self.d_model
                )));
            }
            if self.pool_stride != 1 {
                return Err(config_err("pool_stride is 1 outside reduction mode"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    /// Stride the batcher must pad source rows to.
    pub fn batch_stride(&self) -> usize {
        if self.mode.is_reduction() {
            self.pool_stride
        } else {
            1
        }
    }
}

/// Glorot-uniform sample: bound √(6/(fan_in+fan_out)). Rank 2 uses the two
/// dims; rank-3 conv filters `[w,E,F]` use fan_in = w·E, fan_out = F.
pub fn glorot_init<T: Scalar>(
    shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>, ModelError> {
    if shape.iter().any(|&d| d == 0) {
        return Err(config_err(format!("glorot_init on shape {shape:?}")));
    }
    let (fan_in, fan_out) = match shape {
        [rows, cols] => (*rows, *cols),
        [w, e, f] => (w * e, *f),
        other => {
            return Err(config_err(format!(
                "glorot_init wants rank 2 or 3, got {other:?}"
            )))
        }
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let lo = T::from_f64(-bound);
    let hi = T::from_f64(bound);
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Ok(Tensor::param(shape.to_vec(), data)?)
}

/// Sinusoidal position table `[length, d_model]`:
/// `PE[p,2i] = sin(p/10000^{2i/d})`, `PE[p,2i+1] = cos(p/10000^{2i/d})`.
pub fn positional_encoding<T: Scalar>(
    length: usize,
    d_model: usize,
) -> Result<Tensor<T>, ModelError> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(config_err(format!("positional encoding needs even d_model, got {d_model}")));
    }
    let mut data = Vec::with_capacity(length * d_model);
    for p in 0..length {
        for i in 0..d_model / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data.push(T::from_f64(angle.sin()));
            data.push(T::from_f64(angle.cos()));
        }
    }
    Ok(Tensor::from_vec(vec![length, d_model], data)?)
}

/// Named parameter tensors in a fixed insertion order; the order drives
/// initialization draws, optimizer state, and checkpoint layout.
#[derive(Debug, Clone)]
pub struct ParamSet<T: Scalar> {
    params: IndexMap<String, Tensor<T>>,
}

enum Init {
    Glorot,
    Zeros,
    Ones,
    Const(f64),
}

fn param_plan(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut plan: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| plan.push((name, shape, init));

    push("enc.embed".into(), vec![cfg.src_vocab, cfg.enc_emb], Init::Glorot);
    if cfg.mode.is_reduction() {
        let ch = cfg.conv_channels();
        let mut widths = cfg.conv_filters.clone();
        widths.sort_unstable();
        for (w, count) in widths {
            push(format!("enc.conv.w{w}"), vec![w, cfg.enc_emb, count], Init::Glorot);
            push(format!("enc.conv.b{w}"), vec![count], Init::Zeros);
        }
        for i in 0..cfg.highway_layers {
            push(format!("enc.highway{i}.wh"), vec![ch, ch], Init::Glorot);
            push(format!("enc.highway{i}.bh"), vec![ch], Init::Zeros);
            push(format!("enc.highway{i}.wt"), vec![ch, ch], Init::Glorot);
            // Transform gate starts near carry so early training passes inputs through.
            push(format!("enc.highway{i}.bt"), vec![ch], Init::Const(-2.0));
        }
        push("enc.proj.w".into(), vec![ch, d], Init::Glorot);
        push("enc.proj.b".into(), vec![d], Init::Zeros);
    }
    let attn_block = |prefix: String, plan: &mut Vec<(String, Vec<usize>, Init)>| {
        for name in ["wq", "wk", "wv", "wo"] {
            plan.push((format!("{prefix}.{name}"), vec![d, d], Init::Glorot));
        }
        for name in ["bq", "bk", "bv", "bo"] {
            plan.push((format!("{prefix}.{name}"), vec![d], Init::Zeros));
        }
    };
    let norm_block = |prefix: String, plan: &mut Vec<(String, Vec<usize>, Init)>| {
        plan.push((format!("{prefix}.gain"), vec![d], Init::Ones));
        plan.push((format!("{prefix}.bias"), vec![d], Init::Zeros));
    };
    let ffn_block = |prefix: String, plan: &mut Vec<(String, Vec<usize>, Init)>| {
        plan.push((format!("{prefix}.w1"), vec![d, cfg.d_ff], Init::Glorot));
        plan.push((format!("{prefix}.b1"), vec![cfg.d_ff], Init::Zeros));
        plan.push((format!("{prefix}.w2"), vec![cfg.d_ff, d], Init::Glorot));
        plan.push((format!("{prefix}.b2"), vec![d], Init::Zeros));
    };
    for i in 0..cfg.enc_layers {
        attn_block(format!("enc.layer{i}.attn"), &mut plan);
        norm_block(format!("enc.layer{i}.norm1"), &mut plan);
        ffn_block(format!("enc.layer{i}.ffn"), &mut plan);
        norm_block(format!("enc.layer{i}.norm2"), &mut plan);
    }
    plan.push(("dec.embed".into(), vec![cfg.tgt_vocab, cfg.dec_emb], Init::Glorot));
    for i in 0..cfg.dec_layers {
        attn_block(format!("dec.layer{i}.self_attn"), &mut plan);
        norm_block(format!("dec.layer{i}.norm1"), &mut plan);
        attn_block(format!("dec.layer{i}.cross_attn"), &mut plan);
        norm_block(format!("dec.layer{i}.norm2"), &mut plan);
        ffn_block(format!("dec.layer{i}.ffn"), &mut plan);
        norm_block(format!("dec.layer{i}.norm3"), &mut plan);
    }
    plan.push(("dec.out.w".into(), vec![d, cfg.tgt_vocab], Init::Glorot));
    plan.push(("dec.out.b".into(), vec![cfg.tgt_vocab], Init::Zeros));
    plan
}

impl<T: Scalar> ParamSet<T> {
    /// Initialize all parameters for `cfg` from one seed: Glorot-uniform
    /// weights, zero biases, unit norm gains, highway transform bias −2.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<T>, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        for (name, shape, init) in param_plan(cfg) {
            let tensor = match init {
                Init::Glorot => glorot_init(&shape, &mut rng)?,
                Init::Zeros => Tensor::param(shape.clone(), vec![T::zero(); shape.iter().product()])?,
                Init::Ones => Tensor::param(shape.clone(), vec![T::one(); shape.iter().product()])?,
                Init::Const(v) => Tensor::param(
                    shape.clone(),
                    vec![T::from_f64(v); shape.iter().product()],
                )?,
            };
            params.insert(name, tensor);
        }
        Ok(ParamSet { params })
    }

    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> ParamSet<T> {
        ParamSet {
            params: entries.into_iter().collect(),
        }
    }

    /// Fetch by path; panics on a missing name (an internal wiring bug, not
    /// a runtime condition).
    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"))
    }

    pub fn replace(&mut self, name: &str, tensor: Tensor<T>) {
        let slot = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"));
        *slot = tensor;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Copies sharing the same storage with gradient tracking removed;
    /// forward passes over a frozen set build no graph.
    pub fn frozen(&self) -> ParamSet<T> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.detach()))
                .collect(),
        }
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.iter() {
            p.zero_grad();
        }
    }
}

/// Total element count over all parameters.
pub fn count_params<T: Scalar>(params: &ParamSet<T>) -> usize {
    params.iter().map(|(_, p)| p.numel()).sum()
}

/// The parameter names and shapes [`ParamSet::init`] creates for `cfg`, in
/// creation order; checkpoint loading validates files against this.
pub fn expected_param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    param_plan(cfg)
        .into_iter()
        .map(|(name, shape, _)| (name, shape))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_cfg(mode: Mode) -> ModelConfig {
        let mut cfg = ModelConfig::desk(mode, 12, 12);
        cfg.enc_emb = if mode.is_reduction() { 8 } else { 8 };
        cfg.dec_emb = 8;
        cfg.d_model = 8;
        cfg.heads = 2;
        cfg.d_ff = 16;
        cfg.enc_layers = 1;
        cfg.dec_layers = 1;
        if mode.is_reduction() {
            cfg.conv_filters = vec![(1, 2), (2, 2)];
            cfg.pool_stride = 2;
        }
        cfg
    }

    #[test]
    fn mode_strings_round_trip() {
        for mode in [
            Mode::BpeTransformer,
            Mode::CharTransformer,
            Mode::CharReductionTransformer,
        ] {
            assert_eq!(Mode::parse(mode.as_str()).unwrap(), mode);
        }
        assert!(Mode::parse("gru").is_err());
    }

    #[test]
    fn paper_config_dimensions() {
        let cfg = ModelConfig::paper(Mode::CharReductionTransformer, 300, 300);
        cfg.validate().unwrap();
        assert_eq!(cfg.conv_channels(), 2100);
        assert_eq!(cfg.enc_emb, 128);
        assert_eq!(cfg.d_model / cfg.heads, 64);
        assert_eq!(cfg.highway_layers, 2);
        assert_eq!(cfg.pool_stride, 5);
        let plain = ModelConfig::paper(Mode::CharTransformer, 300, 300);
        plain.validate().unwrap();
        assert_eq!(plain.enc_emb, 512);
        assert!(plain.conv_filters.is_empty());
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut cfg = ModelConfig::desk(Mode::CharTransformer, 30, 30);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(Mode::CharTransformer, 30, 30);
        cfg.conv_filters = vec![(1, 4)];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(Mode::CharReductionTransformer, 30, 30);
        cfg.conv_filters = vec![(9, 4)];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn glorot_bound_512() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = glorot_init(&[512, 512], &mut rng).unwrap();
        let bound = (6.0 / 1024.0f64).sqrt();
        assert!((bound - 0.0765466).abs() < 1e-6);
        assert!(t.data().iter().all(|v| v.abs() < bound));
        let spread = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(spread > bound * 0.9);
    }

    #[test]
    fn glorot_conv_fans() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t: Tensor<f64> = glorot_init(&[4, 8, 16], &mut rng).unwrap();
        let bound = (6.0f64 / (4.0 * 8.0 + 16.0)).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < bound));
        assert!(glorot_init::<f64>(&[0, 4], &mut rng).is_err());
    }

    #[test]
    fn glorot_is_seed_deterministic() {
        let a: Tensor<f64> =
            glorot_init(&[6, 6], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b: Tensor<f64> =
            glorot_init(&[6, 6], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn positional_encoding_values() {
        let pe: Tensor<f64> = positional_encoding(3, 4).unwrap();
        // Row 0 alternates sin 0 = 0, cos 0 = 1.
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[4] - 1.0f64.sin()).abs() < 1e-12);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding::<f64>(3, 5).is_err());
    }

    #[test]
    fn param_set_layout_and_counts() {
        let cfg = micro_cfg(Mode::CharReductionTransformer);
        let params: ParamSet<f64> = ParamSet::init(&cfg, 13).unwrap();
        // channels = 2 + 2 = 4
        let expected = [
            ("enc.embed", 12 * 8),
            ("enc.conv.w1", 8 * 2),
            ("enc.conv.b1", 2),
            ("enc.conv.w2", 2 * 8 * 2),
            ("enc.conv.b2", 2),
            ("enc.highway0.wh", 16),
            ("enc.highway0.bh", 4),
            ("enc.highway0.wt", 16),
            ("enc.highway0.bt", 4),
            ("enc.highway1.wh", 16),
            ("enc.highway1.bh", 4),
            ("enc.highway1.wt", 16),
            ("enc.highway1.bt", 4),
            ("enc.proj.w", 4 * 8),
            ("enc.proj.b", 8),
        ];
        for (name, numel) in expected {
            assert_eq!(params.get(name).numel(), numel, "{name}");
        }
        assert_eq!(params.get("dec.out.w").numel(), 8 * 12);
        let total = count_params(&params);
        let by_sum: usize = params.iter().map(|(_, p)| p.numel()).sum();
        assert_eq!(total, by_sum);
        let hand: usize = param_plan(&cfg)
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum();
        assert_eq!(total, hand);
    }

    #[test]
    fn paper_projection_parameter_count() {
        let cfg = ModelConfig::paper(Mode::CharReductionTransformer, 300, 300);
        let params: ParamSet<f32> = ParamSet::init(&cfg, 13).unwrap();
        assert_eq!(
            params.get("enc.proj.w").numel() + params.get("enc.proj.b").numel(),
            2100 * 512 + 512
        );
    }

    #[test]
    fn init_is_deterministic_and_sets_special_biases() {
        let cfg = micro_cfg(Mode::CharReductionTransformer);
        let a: ParamSet<f64> = ParamSet::init(&cfg, 13).unwrap();
        let b: ParamSet<f64> = ParamSet::init(&cfg, 13).unwrap();
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        assert!(a.get("enc.highway0.bt").data().iter().all(|&v| v == -2.0));
        assert!(a.get("enc.layer0.norm1.gain").data().iter().all(|&v| v == 1.0));
        assert!(a.get("enc.layer0.attn.bq").data().iter().all(|&v| v == 0.0));
        let c: ParamSet<f64> = ParamSet::init(&cfg, 14).unwrap();
        assert_ne!(a.get("enc.embed").data(), c.get("enc.embed").data());
    }

    #[test]
    fn count_params_single_matrix() {
        let t: Tensor<f64> = Tensor::zeros(vec![2, 3]).unwrap();
        let set = ParamSet::from_entries(vec![("w".into(), t)]);
        assert_eq!(count_params(&set), 6);
    }

    #[test]
    fn frozen_params_share_data_without_tracking() {
        let cfg = micro_cfg(Mode::CharTransformer);
        let params: ParamSet<f64> = ParamSet::init(&cfg, 13).unwrap();
        let frozen = params.frozen();
        for ((_, p), (_, f)) in params.iter().zip(frozen.iter()) {
            assert!(p.requires_grad() && !f.tracks_grad());
            assert_eq!(p.data().as_ptr(), f.data().as_ptr());
        }
    }
}
