//! Encoder artifacts on disk: a safetensors weight archive, a JSON
//! architecture sidecar and a WordPiece vocabulary.
//!
//! A model directory holds exactly:
//!
//! | file                | contents                                  |
//! |---------------------|-------------------------------------------|
//! | `model.safetensors` | F32 little-endian tensors, names below    |
//! | `config.json`       | [`EncoderConfig`] with its field names    |
//! | `vocab.txt`         | one token per line, line index = token id |
//!
//! Tensor names follow the BERT layout so that exported checkpoints map
//! one-to-one. Linear weights are stored `[out_features, in_features]`.
//!
//! ```text
//! embeddings.word_embeddings.weight            [vocab_size, d_model]
//! embeddings.position_embeddings.weight        [max_position, d_model]
//! embeddings.token_type_embeddings.weight      [2, d_model]
//! embeddings.LayerNorm.{weight,bias}           [d_model]
//! encoder.layer.{i}.attention.self.query.{weight,bias}      [d_model, d_model] / [d_model]
//! encoder.layer.{i}.attention.self.key.{weight,bias}        [d_model, d_model] / [d_model]
//! encoder.layer.{i}.attention.self.value.{weight,bias}      [d_model, d_model] / [d_model]
//! encoder.layer.{i}.attention.output.dense.{weight,bias}    [d_model, d_model] / [d_model]
//! encoder.layer.{i}.attention.output.LayerNorm.{weight,bias} [d_model]
//! encoder.layer.{i}.intermediate.dense.{weight,bias}        [d_ff, d_model] / [d_ff]
//! encoder.layer.{i}.output.dense.{weight,bias}              [d_model, d_ff] / [d_model]
//! encoder.layer.{i}.output.LayerNorm.{weight,bias}          [d_model]
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Vocab;

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Number of segment (token type) embeddings; only segment 0 is used.
pub const NUM_SEGMENTS: usize = 2;

/// Architecture hyperparameters of a BERT-style encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub layernorm_eps: f32,
}

impl EncoderConfig {
    /// The 12-layer, 384-wide layout of the public MiniLM-L12 sentence encoder.
    pub fn minilm_l12() -> Self {
        Self {
            num_layers: 12,
            num_heads: 12,
            d_model: 384,
            d_k: 32,
            d_ff: 1536,
            vocab_size: 30522,
            max_position: 512,
            layernorm_eps: 1e-12,
        }
    }

    /// Small layout for fixtures: `d_k` is derived from `d_model / num_heads`.
    pub fn tiny(num_layers: usize, num_heads: usize, d_model: usize, vocab_size: usize) -> Self {
        Self {
            num_layers,
            num_heads,
            d_model,
            d_k: d_model / num_heads.max(1),
            d_ff: 4 * d_model,
            vocab_size,
            max_position: 512,
            layernorm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.max_position < 2 {
            return Err(Error::Config("max_position must be at least 2".into()));
        }
        if self.d_k * self.num_heads != self.d_model {
            return Err(Error::Config(format!(
                "d_k ({}) x num_heads ({}) must equal d_model ({})",
                self.d_k, self.num_heads, self.d_model
            )));
        }
        if !(self.layernorm_eps.is_finite() && self.layernorm_eps > 0.0) {
            return Err(Error::Config(
                "layernorm_eps must be a positive real".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters of one post-LayerNorm transformer layer. Linear weights are
/// `[out, in]`; the H attention heads are packed along the output axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub query_w: Array2<f32>,
    pub query_b: Array1<f32>,
    pub key_w: Array2<f32>,
    pub key_b: Array1<f32>,
    pub value_w: Array2<f32>,
    pub value_b: Array1<f32>,
    pub attn_out_w: Array2<f32>,
    pub attn_out_b: Array1<f32>,
    pub attn_ln_scale: Array1<f32>,
    pub attn_ln_bias: Array1<f32>,
    pub ffn_in_w: Array2<f32>,
    pub ffn_in_b: Array1<f32>,
    pub ffn_out_w: Array2<f32>,
    pub ffn_out_b: Array1<f32>,
    pub ffn_ln_scale: Array1<f32>,
    pub ffn_ln_bias: Array1<f32>,
}

/// Full weight set of the encoder. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub token_embeddings: Array2<f32>,
    pub position_embeddings: Array2<f32>,
    pub segment_embeddings: Array2<f32>,
    pub embed_ln_scale: Array1<f32>,
    pub embed_ln_bias: Array1<f32>,
    pub layers: Vec<LayerWeights>,
}

/// Every tensor the config requires, in canonical order.
pub fn tensor_specs(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut specs = vec![
        (
            "embeddings.word_embeddings.weight".to_string(),
            vec![config.vocab_size, d],
        ),
        (
            "embeddings.position_embeddings.weight".to_string(),
            vec![config.max_position, d],
        ),
        (
            "embeddings.token_type_embeddings.weight".to_string(),
            vec![NUM_SEGMENTS, d],
        ),
        ("embeddings.LayerNorm.weight".to_string(), vec![d]),
        ("embeddings.LayerNorm.bias".to_string(), vec![d]),
    ];
    for i in 0..config.num_layers {
        let p = format!("encoder.layer.{i}");
        for (suffix, shape) in [
            ("attention.self.query.weight", vec![d, d]),
            ("attention.self.query.bias", vec![d]),
            ("attention.self.key.weight", vec![d, d]),
            ("attention.self.key.bias", vec![d]),
            ("attention.self.value.weight", vec![d, d]),
            ("attention.self.value.bias", vec![d]),
            ("attention.output.dense.weight", vec![d, d]),
            ("attention.output.dense.bias", vec![d]),
            ("attention.output.LayerNorm.weight", vec![d]),
            ("attention.output.LayerNorm.bias", vec![d]),
            ("intermediate.dense.weight", vec![config.d_ff, d]),
            ("intermediate.dense.bias", vec![config.d_ff]),
            ("output.dense.weight", vec![d, config.d_ff]),
            ("output.dense.bias", vec![d]),
            ("output.LayerNorm.weight", vec![d]),
            ("output.LayerNorm.bias", vec![d]),
        ] {
            specs.push((format!("{p}.{suffix}"), shape));
        }
    }
    specs
}

struct TensorTable {
    tensors: HashMap<String, Vec<f32>>,
}

impl TensorTable {
    fn vector(&mut self, name: &str) -> Result<Array1<f32>> {
        let data = self.take(name)?;
        Ok(Array1::from_vec(data))
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f32>> {
        let data = self.take(name)?;
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Shape(format!("tensor `{name}`: {e}")))
    }

    fn take(&mut self, name: &str) -> Result<Vec<f32>> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Shape(format!("tensor `{name}` is missing")))
    }
}

impl EncoderModel {
    /// Assemble a model from named flat tensors whose shapes were already checked
    /// against [`tensor_specs`].
    fn from_table(config: EncoderConfig, mut t: TensorTable) -> Result<Self> {
        let d = config.d_model;
        let ff = config.d_ff;
        let token_embeddings =
            t.matrix("embeddings.word_embeddings.weight", config.vocab_size, d)?;
        let position_embeddings = t.matrix(
            "embeddings.position_embeddings.weight",
            config.max_position,
            d,
        )?;
        let segment_embeddings =
            t.matrix("embeddings.token_type_embeddings.weight", NUM_SEGMENTS, d)?;
        let embed_ln_scale = t.vector("embeddings.LayerNorm.weight")?;
        let embed_ln_bias = t.vector("embeddings.LayerNorm.bias")?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let p = format!("encoder.layer.{i}");
            layers.push(LayerWeights {
                query_w: t.matrix(&format!("{p}.attention.self.query.weight"), d, d)?,
                query_b: t.vector(&format!("{p}.attention.self.query.bias"))?,
                key_w: t.matrix(&format!("{p}.attention.self.key.weight"), d, d)?,
                key_b: t.vector(&format!("{p}.attention.self.key.bias"))?,
                value_w: t.matrix(&format!("{p}.attention.self.value.weight"), d, d)?,
                value_b: t.vector(&format!("{p}.attention.self.value.bias"))?,
                attn_out_w: t.matrix(&format!("{p}.attention.output.dense.weight"), d, d)?,
                attn_out_b: t.vector(&format!("{p}.attention.output.dense.bias"))?,
                attn_ln_scale: t.vector(&format!("{p}.attention.output.LayerNorm.weight"))?,
                attn_ln_bias: t.vector(&format!("{p}.attention.output.LayerNorm.bias"))?,
                ffn_in_w: t.matrix(&format!("{p}.intermediate.dense.weight"), ff, d)?,
                ffn_in_b: t.vector(&format!("{p}.intermediate.dense.bias"))?,
                ffn_out_w: t.matrix(&format!("{p}.output.dense.weight"), d, ff)?,
                ffn_out_b: t.vector(&format!("{p}.output.dense.bias"))?,
                ffn_ln_scale: t.vector(&format!("{p}.output.LayerNorm.weight"))?,
                ffn_ln_bias: t.vector(&format!("{p}.output.LayerNorm.bias"))?,
            });
        }
        Ok(Self {
            config,
            token_embeddings,
            position_embeddings,
            segment_embeddings,
            embed_ln_scale,
            embed_ln_bias,
            layers,
        })
    }

    /// Named views over every tensor, in [`tensor_specs`] order.
    pub fn named_tensors(&self) -> Vec<(String, &[f32])> {
        fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f32, D>) -> &[f32] {
            a.as_slice().expect("model tensors are standard-layout")
        }
        let mut out: Vec<(String, &[f32])> = vec![
            (
                "embeddings.word_embeddings.weight".into(),
                flat(&self.token_embeddings),
            ),
            (
                "embeddings.position_embeddings.weight".into(),
                flat(&self.position_embeddings),
            ),
            (
                "embeddings.token_type_embeddings.weight".into(),
                flat(&self.segment_embeddings),
            ),
            (
                "embeddings.LayerNorm.weight".into(),
                flat(&self.embed_ln_scale),
            ),
            (
                "embeddings.LayerNorm.bias".into(),
                flat(&self.embed_ln_bias),
            ),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("encoder.layer.{i}");
            out.extend([
                (format!("{p}.attention.self.query.weight"), flat(&l.query_w)),
                (format!("{p}.attention.self.query.bias"), flat(&l.query_b)),
                (format!("{p}.attention.self.key.weight"), flat(&l.key_w)),
                (format!("{p}.attention.self.key.bias"), flat(&l.key_b)),
                (format!("{p}.attention.self.value.weight"), flat(&l.value_w)),
                (format!("{p}.attention.self.value.bias"), flat(&l.value_b)),
                (
                    format!("{p}.attention.output.dense.weight"),
                    flat(&l.attn_out_w),
                ),
                (
                    format!("{p}.attention.output.dense.bias"),
                    flat(&l.attn_out_b),
                ),
                (
                    format!("{p}.attention.output.LayerNorm.weight"),
                    flat(&l.attn_ln_scale),
                ),
                (
                    format!("{p}.attention.output.LayerNorm.bias"),
                    flat(&l.attn_ln_bias),
                ),
                (format!("{p}.intermediate.dense.weight"), flat(&l.ffn_in_w)),
                (format!("{p}.intermediate.dense.bias"), flat(&l.ffn_in_b)),
                (format!("{p}.output.dense.weight"), flat(&l.ffn_out_w)),
                (format!("{p}.output.dense.bias"), flat(&l.ffn_out_b)),
                (
                    format!("{p}.output.LayerNorm.weight"),
                    flat(&l.ffn_ln_scale),
                ),
                (format!("{p}.output.LayerNorm.bias"), flat(&l.ffn_ln_bias)),
            ]);
        }
        out
    }
}

/// Deterministic model for `(config, seed)`. Every non-LayerNorm tensor is
/// uniform on `[-1/sqrt(d_model), 1/sqrt(d_model)]`; LayerNorm scales are one
/// and LayerNorm biases zero.
pub fn init_random_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (config.d_model as f32).sqrt();
    let mut tensors = HashMap::new();
    for (name, shape) in tensor_specs(config) {
        let len: usize = shape.iter().product();
        let data = if name.ends_with("LayerNorm.weight") {
            vec![1.0; len]
        } else if name.ends_with("LayerNorm.bias") {
            vec![0.0; len]
        } else {
            (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        tensors.insert(name, data);
    }
    EncoderModel::from_table(config.clone(), TensorTable { tensors })
}

pub fn load_config(path: &Path) -> Result<EncoderConfig> {
    let text = read_to_string(path)?;
    let config: EncoderConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// Load and fully validate the encoder stored in `model_dir`.
pub fn load_model(model_dir: &Path) -> Result<EncoderModel> {
    let config_path = model_dir.join(CONFIG_FILE);
    let weights_path = model_dir.join(WEIGHTS_FILE);
    let vocab_path = model_dir.join(VOCAB_FILE);
    for p in [&config_path, &weights_path, &vocab_path] {
        if !p.is_file() {
            return Err(Error::ArtifactMissing(p.clone()));
        }
    }
    let config = load_config(&config_path)?;
    let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let tensors = read_archive(&bytes, &config)?;
    log::debug!(
        "loaded {} tensors from {}",
        tensors.len(),
        weights_path.display()
    );
    EncoderModel::from_table(config, TensorTable { tensors })
}

/// Model and vocabulary from one directory; the vocabulary must cover
/// `config.vocab_size` ids exactly.
pub fn load_bundle(model_dir: &Path) -> Result<(EncoderModel, Vocab)> {
    let model = load_model(model_dir)?;
    let vocab = Vocab::from_file(&model_dir.join(VOCAB_FILE))?;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Vocab(format!(
            "vocabulary has {} tokens but config declares vocab_size {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    Ok((model, vocab))
}

fn read_archive(bytes: &[u8], config: &EncoderConfig) -> Result<HashMap<String, Vec<f32>>> {
    let archive = SafeTensors::deserialize(bytes)
        .map_err(|e| Error::CorruptWeights(format!("unreadable archive: {e}")))?;
    let mut out = HashMap::new();
    for (name, shape) in tensor_specs(config) {
        let view = archive
            .tensor(&name)
            .map_err(|_| Error::Shape(format!("tensor `{name}` is missing from the archive")))?;
        if view.dtype() != Dtype::F32 {
            return Err(Error::CorruptWeights(format!(
                "tensor `{name}` has dtype {:?}, expected F32",
                view.dtype()
            )));
        }
        if view.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                view.shape(),
                shape
            )));
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::CorruptWeights(format!(
                "tensor `{name}` has a non-finite value at flat index {pos}"
            )));
        }
        out.insert(name, data);
    }
    Ok(out)
}

/// Serialize named F32 tensors into a safetensors byte buffer.
pub fn write_archive(tensors: &[(String, Vec<usize>, &[f32])]) -> Result<Vec<u8>> {
    let bytes: Vec<Vec<u8>> = tensors
        .iter()
        .map(|(_, _, data)| data.iter().flat_map(|v| v.to_le_bytes()).collect())
        .collect();
    let views = tensors
        .iter()
        .zip(&bytes)
        .map(|((name, shape, _), b)| {
            safetensors::tensor::TensorView::new(Dtype::F32, shape.clone(), b)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Shape(format!("tensor `{name}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, None)
        .map_err(|e| Error::CorruptWeights(format!("serialization failed: {e}")))
}

/// Tensor name to `(shape, row-major values)`.
pub type TensorMap = HashMap<String, (Vec<usize>, Vec<f32>)>;

/// Parse a safetensors buffer into named F32 tensors with their shapes.
pub fn read_f32_archive(bytes: &[u8]) -> Result<TensorMap> {
    let archive = SafeTensors::deserialize(bytes)
        .map_err(|e| Error::CorruptWeights(format!("unreadable archive: {e}")))?;
    let mut out = HashMap::new();
    for (name, view) in archive.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::CorruptWeights(format!("tensor `{name}` is not F32")));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(name, (view.shape().to_vec(), data));
    }
    Ok(out)
}

/// Write `model.safetensors`, `config.json` and `vocab.txt` into `dir`.
pub fn save_model(model: &EncoderModel, vocab: &Vocab, dir: &Path) -> Result<()> {
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Vocab(format!(
            "vocabulary has {} tokens but model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let specs = tensor_specs(&model.config);
    let tensors: Vec<(String, Vec<usize>, &[f32])> = model
        .named_tensors()
        .into_iter()
        .zip(specs)
        .map(|((name, data), (_, shape))| (name, shape, data))
        .collect();
    let bytes = write_archive(&tensors)?;
    let weights = dir.join(WEIGHTS_FILE);
    fs::write(&weights, bytes).map_err(|e| Error::io(&weights, e))?;
    let config = dir.join(CONFIG_FILE);
    fs::write(&config, serde_json::to_string_pretty(&model.config)?)
        .map_err(|e| Error::io(&config, e))?;
    vocab.save(&dir.join(VOCAB_FILE))
}

fn read_to_string(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(Error::ArtifactMissing(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
