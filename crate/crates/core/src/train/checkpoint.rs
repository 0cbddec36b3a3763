//! Checkpoint files: little-endian binary, magic "CTNMT1", a precision flag
//! byte, the model config as key=value text, every parameter tensor, then
//! tagged optional sections (optimizer state, vocabularies, BPE merges).
//! Files written by an f32 build load into an f64 build and vice versa.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::model::{expected_param_shapes, Mode, ModelConfig, ParamSet};
use crate::tensor::{Scalar, Tensor};
use crate::tokenize::{BpeMerges, Vocab};
use crate::train::{TrainError, TrainState};

const MAGIC: &[u8; 6] = b"CTNMT1";
const TAG_STATE: u8 = 1;
const TAG_SRC_VOCAB: u8 = 2;
const TAG_TGT_VOCAB: u8 = 3;
const TAG_MERGES: u8 = 4;
/// Upper bound on any length prefix; catches corrupt files before they turn
/// into absurd allocations.
const MAX_BLOCK: u64 = 1 << 33;

/// Everything a checkpoint can carry. `state` is present on training
/// checkpoints; vocabularies and merges make the file self-contained for
/// translation.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
    pub state: Option<TrainState>,
    pub src_vocab: Option<Vocab>,
    pub tgt_vocab: Option<Vocab>,
    pub merges: Option<BpeMerges>,
}

fn corrupt<S: Into<String>>(msg: S) -> TrainError {
    TrainError::Corrupt(msg.into())
}

/// Model config as the key=value text stored in checkpoints (and echoed by
/// the CLI). Keys appear in a fixed order; `conv_filters` is
/// `width:count,...` or empty.
pub fn model_config_to_text(cfg: &ModelConfig) -> String {
    let filters = cfg
        .conv_filters
        .iter()
        .map(|(w, c)| format!("{w}:{c}"))
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "mode={}\nsrc_vocab={}\ntgt_vocab={}\nenc_emb={}\ndec_emb={}\nd_model={}\n\
         heads={}\nd_ff={}\nenc_layers={}\ndec_layers={}\nconv_filters={}\n\
         pool_stride={}\nhighway_layers={}\ndropout={:?}\nmax_positions={}\n",
        cfg.mode,
        cfg.src_vocab,
        cfg.tgt_vocab,
        cfg.enc_emb,
        cfg.dec_emb,
        cfg.d_model,
        cfg.heads,
        cfg.d_ff,
        cfg.enc_layers,
        cfg.dec_layers,
        filters,
        cfg.pool_stride,
        cfg.highway_layers,
        cfg.dropout,
        cfg.max_positions,
    )
}

pub fn parse_conv_filters(value: &str) -> Result<Vec<(usize, usize)>, TrainError> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    let mut filters = Vec::new();
    for part in value.split(',') {
        let (w, c) = part
            .split_once(':')
            .ok_or_else(|| corrupt(format!("conv filter entry {part:?} is not width:count")))?;
        let w = w.trim().parse::<usize>().map_err(|e| corrupt(format!("conv width {w:?}: {e}")))?;
        let c = c.trim().parse::<usize>().map_err(|e| corrupt(format!("filter count {c:?}: {e}")))?;
        filters.push((w, c));
    }
    Ok(filters)
}

/// Parse the text form back; every key must be known and present exactly once.
pub fn model_config_from_text(text: &str) -> Result<ModelConfig, TrainError> {
    let mut cfg = ModelConfig {
        mode: Mode::CharTransformer,
        src_vocab: 0,
        tgt_vocab: 0,
        enc_emb: 0,
        dec_emb: 0,
        d_model: 0,
        heads: 0,
        d_ff: 0,
        enc_layers: 0,
        dec_layers: 0,
        conv_filters: Vec::new(),
        pool_stride: 0,
        highway_layers: 0,
        dropout: 0.0,
        max_positions: 0,
    };
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| corrupt(format!("config line {}: no '='", lineno + 1)))?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(corrupt(format!("config repeats key {key:?}")));
        }
        let parse_usize = || {
            value
                .parse::<usize>()
                .map_err(|e| corrupt(format!("config {key}={value:?}: {e}")))
        };
        match key {
            "mode" => cfg.mode = Mode::parse(value).map_err(|e| corrupt(e.to_string()))?,
            "src_vocab" => cfg.src_vocab = parse_usize()?,
            "tgt_vocab" => cfg.tgt_vocab = parse_usize()?,
            "enc_emb" => cfg.enc_emb = parse_usize()?,
            "dec_emb" => cfg.dec_emb = parse_usize()?,
            "d_model" => cfg.d_model = parse_usize()?,
            "heads" => cfg.heads = parse_usize()?,
            "d_ff" => cfg.d_ff = parse_usize()?,
            "enc_layers" => cfg.enc_layers = parse_usize()?,
            "dec_layers" => cfg.dec_layers = parse_usize()?,
            "conv_filters" => cfg.conv_filters = parse_conv_filters(value)?,
            "pool_stride" => cfg.pool_stride = parse_usize()?,
            "highway_layers" => cfg.highway_layers = parse_usize()?,
            "dropout" => {
                cfg.dropout = value
                    .parse::<f64>()
                    .map_err(|e| corrupt(format!("config dropout={value:?}: {e}")))?
            }
            "max_positions" => cfg.max_positions = parse_usize()?,
            other => return Err(corrupt(format!("unknown config key {other:?}"))),
        }
    }
    for key in [
        "mode", "src_vocab", "tgt_vocab", "enc_emb", "dec_emb", "d_model", "heads", "d_ff",
        "enc_layers", "dec_layers", "conv_filters", "pool_stride", "highway_layers", "dropout",
        "max_positions",
    ] {
        if !seen.contains(key) {
            return Err(corrupt(format!("config missing key {key:?}")));
        }
    }
    cfg.validate().map_err(TrainError::Model)?;
    Ok(cfg)
}

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<(), TrainError> {
        Ok(self.out.write_all(&[v])?)
    }
    fn u64(&mut self, v: u64) -> Result<(), TrainError> {
        Ok(self.out.write_all(&v.to_le_bytes())?)
    }
    fn f64(&mut self, v: f64) -> Result<(), TrainError> {
        Ok(self.out.write_all(&v.to_le_bytes())?)
    }
    fn block(&mut self, bytes: &[u8]) -> Result<(), TrainError> {
        self.u64(bytes.len() as u64)?;
        Ok(self.out.write_all(bytes)?)
    }
    fn values<T: Scalar>(&mut self, values: &[T]) -> Result<(), TrainError> {
        let mut buf = Vec::with_capacity(values.len() * T::PREC_FLAG as usize);
        for v in values {
            if T::PREC_FLAG == 4 {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        Ok(self.out.write_all(&buf)?)
    }
    fn moments(&mut self, moments: &[(String, Vec<f64>)]) -> Result<(), TrainError> {
        self.u64(moments.len() as u64)?;
        for (name, values) in moments {
            self.block(name.as_bytes())?;
            self.u64(values.len() as u64)?;
            for v in values {
                self.f64(*v)?;
            }
        }
        Ok(())
    }
}

/// Write atomically: serialize to `<name>.tmp` beside the target, then rename.
pub fn save_checkpoint<T: Scalar>(path: &Path, cp: &Checkpoint<T>) -> Result<(), TrainError> {
    let file_name = path
        .file_name()
        .ok_or_else(|| corrupt(format!("checkpoint path {path:?} has no file name")))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    {
        let mut w = Writer {
            out: BufWriter::new(File::create(&tmp)?),
        };
        w.out.write_all(MAGIC)?;
        w.u8(T::PREC_FLAG)?;
        w.block(model_config_to_text(&cp.cfg).as_bytes())?;
        w.u64(cp.params.len() as u64)?;
        for (name, p) in cp.params.iter() {
            w.block(name.as_bytes())?;
            w.u64(p.rank() as u64)?;
            for &d in p.shape() {
                w.u64(d as u64)?;
            }
            w.values(p.data())?;
        }
        if let Some(state) = &cp.state {
            w.u8(TAG_STATE)?;
            w.u64(state.step as u64)?;
            w.u64(state.accum as u64)?;
            w.u64(state.rng_seed)?;
            w.f64(state.best_dev_loss)?;
            w.moments(&state.opt_m)?;
            w.moments(&state.opt_v)?;
        }
        if let Some(vocab) = &cp.src_vocab {
            w.u8(TAG_SRC_VOCAB)?;
            w.block(vocab.to_text().as_bytes())?;
        }
        if let Some(vocab) = &cp.tgt_vocab {
            w.u8(TAG_TGT_VOCAB)?;
            w.block(vocab.to_text().as_bytes())?;
        }
        if let Some(merges) = &cp.merges {
            w.u8(TAG_MERGES)?;
            w.block(merges.to_text().as_bytes())?;
        }
        w.out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<R: Read> {
    input: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, TrainError> {
        let mut buf = vec![0u8; n];
        self.input.read_exact(&mut buf)?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.bytes(1)?[0])
    }
    /// `None` at clean end-of-file, used for the optional section tags.
    fn u8_or_eof(&mut self) -> Result<Option<u8>, TrainError> {
        let mut buf = [0u8; 1];
        match self.input.read_exact(&mut buf) {
            Ok(()) => Ok(Some(buf[0])),
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
    fn u64(&mut self) -> Result<u64, TrainError> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, TrainError> {
        let b = self.bytes(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
    fn block(&mut self) -> Result<Vec<u8>, TrainError> {
        let len = self.u64()?;
        if len > MAX_BLOCK {
            return Err(corrupt(format!("block length {len} exceeds sanity bound")));
        }
        self.bytes(len as usize)
    }
    fn text_block(&mut self) -> Result<String, TrainError> {
        String::from_utf8(self.block()?).map_err(|e| corrupt(format!("invalid UTF-8: {e}")))
    }
    fn values<T: Scalar>(&mut self, n: usize, stored: u8) -> Result<Vec<T>, TrainError> {
        let width = stored as usize;
        let raw = self.bytes(n * width)?;
        let mut out = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(width) {
            let v = if stored == 4 {
                f32::from_le_bytes(chunk.try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(chunk.try_into().unwrap())
            };
            out.push(T::from_f64(v));
        }
        Ok(out)
    }
    fn moments(&mut self) -> Result<Vec<(String, Vec<f64>)>, TrainError> {
        let n = self.u64()?;
        if n > MAX_BLOCK {
            return Err(corrupt("moment table length exceeds sanity bound"));
        }
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = self.text_block()?;
            let len = self.u64()?;
            if len > MAX_BLOCK {
                return Err(corrupt("moment vector length exceeds sanity bound"));
            }
            let mut values = Vec::with_capacity(len as usize);
            for _ in 0..len {
                values.push(self.f64()?);
            }
            out.push((name, values));
        }
        Ok(out)
    }
}

/// Load a checkpoint, converting stored values to `T` if the writer used the
/// other precision. Parameter names and shapes are validated against what the
/// stored config implies.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, TrainError> {
    let mut r = Reader {
        input: BufReader::new(File::open(path)?),
    };
    let magic = r.bytes(MAGIC.len())?;
    if magic != MAGIC {
        return Err(corrupt(format!("{path:?} is not a checkpoint (bad magic)")));
    }
    let stored = r.u8()?;
    if stored != 4 && stored != 8 {
        return Err(corrupt(format!("unknown precision flag {stored}")));
    }
    let cfg = model_config_from_text(&r.text_block()?)?;
    let expected = expected_param_shapes(&cfg);
    let count = r.u64()? as usize;
    if count != expected.len() {
        return Err(corrupt(format!(
            "checkpoint stores {count} parameters, config implies {}",
            expected.len()
        )));
    }
    let mut entries = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let name = r.text_block()?;
        if &name != want_name {
            return Err(corrupt(format!(
                "parameter order mismatch: found {name:?}, expected {want_name:?}"
            )));
        }
        let rank = r.u64()? as usize;
        if rank != want_shape.len() {
            return Err(corrupt(format!("parameter {name:?} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if &shape != want_shape {
            return Err(corrupt(format!(
                "parameter {name:?} has shape {shape:?}, expected {want_shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let data = r.values::<T>(numel, stored)?;
        entries.push((name, Tensor::param(shape, data).map_err(TrainError::Tensor)?));
    }
    let params = ParamSet::from_entries(entries);

    let mut state = None;
    let mut src_vocab = None;
    let mut tgt_vocab = None;
    let mut merges = None;
    while let Some(tag) = r.u8_or_eof()? {
        match tag {
            TAG_STATE => {
                let step = r.u64()? as usize;
                let accum = r.u64()? as usize;
                let rng_seed = r.u64()?;
                let best_dev_loss = r.f64()?;
                let opt_m = r.moments()?;
                let opt_v = r.moments()?;
                if opt_m.len() != expected.len() || opt_v.len() != expected.len() {
                    return Err(corrupt("optimizer state parameter count mismatch"));
                }
                for table in [&opt_m, &opt_v] {
                    for ((name, values), (want_name, want_shape)) in table.iter().zip(&expected) {
                        let want: usize = want_shape.iter().product();
                        if name != want_name || values.len() != want {
                            return Err(corrupt(format!(
                                "optimizer moment {name:?} does not match parameter {want_name:?}"
                            )));
                        }
                    }
                }
                state = Some(TrainState {
                    step,
                    accum,
                    opt_m,
                    opt_v,
                    rng_seed,
                    best_dev_loss,
                });
            }
            TAG_SRC_VOCAB => {
                src_vocab =
                    Some(Vocab::from_text(&r.text_block()?).map_err(|e| corrupt(e.to_string()))?)
            }
            TAG_TGT_VOCAB => {
                tgt_vocab =
                    Some(Vocab::from_text(&r.text_block()?).map_err(|e| corrupt(e.to_string()))?)
            }
            TAG_MERGES => {
                merges = Some(
                    BpeMerges::from_text(&r.text_block()?).map_err(|e| corrupt(e.to_string()))?,
                )
            }
            other => return Err(corrupt(format!("unknown checkpoint section tag {other}"))),
        }
    }
    Ok(Checkpoint {
        cfg,
        params,
        state,
        src_vocab,
        tgt_vocab,
        merges,
    })
}
