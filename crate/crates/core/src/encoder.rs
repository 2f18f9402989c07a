//! Post-LayerNorm BERT encoder forward pass with a single-layer pruning hook.
//!
//! Internally the batch is kept *packed*: the real tokens of every sentence
//! are stacked into one `[T, d_model]` matrix with per-sentence offsets, so
//! linear layers never touch padding and attention only ever sees a
//! sentence's own tokens. [`HiddenStates`] is the padded view used at the
//! public boundary.
//!
//! With pruning `(s, q, l)`, layer `l` runs its attention sub-layer, scores
//! tokens from the head-averaged attention, drops the losers, and then runs
//! its feed-forward and all later layers on the survivors only.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayViewMut2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model_io::{EncoderConfig, EncoderModel, LayerWeights};
use crate::pruner::{check_prefix_mask, column_sums, select_sentence, PruneConfig};
use crate::tokenizer::{tokenize, TokenizedBatch, Vocab};

/// Padded activations `[B, n, d_model]`; pad positions hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub values: Array3<f32>,
    pub pad_mask: Array2<bool>,
    pub lengths: Vec<usize>,
}

impl HiddenStates {
    pub fn validate(&self) -> Result<()> {
        let (b, n, _) = self.values.dim();
        if self.pad_mask.dim() != (b, n) || self.lengths.len() != b {
            return Err(Error::Shape(format!(
                "values {:?}, mask {:?} and {} lengths disagree",
                self.values.dim(),
                self.pad_mask.dim(),
                self.lengths.len()
            )));
        }
        check_prefix_mask(&self.pad_mask, &self.lengths)
    }
}

/// Attention probabilities of one layer.
///
/// `per_head` is `[B, H, n, n]`, `head_mean` is `[B, n, n]`. Rows and
/// columns belonging to padding are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    pub per_head: Option<Array4<f32>>,
    pub head_mean: Array3<f32>,
}

/// Unit-norm sentence vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding(pub Array1<f32>);

impl SentenceEmbedding {
    pub fn as_slice(&self) -> &[f32] {
        self.0.as_slice().expect("embedding is contiguous")
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Real tokens of a batch stacked row-wise.
#[derive(Debug, Clone)]
struct Packed {
    rows: Array2<f32>,
    lengths: Vec<usize>,
    offsets: Vec<usize>,
}

impl Packed {
    fn new(rows: Array2<f32>, lengths: Vec<usize>) -> Self {
        let offsets = offsets(&lengths);
        Self {
            rows,
            lengths,
            offsets,
        }
    }

    fn from_hidden(hidden: &HiddenStates) -> Self {
        let d = hidden.values.dim().2;
        let total = hidden.lengths.iter().sum();
        let mut rows = Array2::zeros((total, d));
        let mut r = 0;
        for (b, &len) in hidden.lengths.iter().enumerate() {
            rows.slice_mut(s![r..r + len, ..])
                .assign(&hidden.values.slice(s![b, ..len, ..]));
            r += len;
        }
        Self::new(rows, hidden.lengths.clone())
    }

    fn to_hidden(&self) -> HiddenStates {
        let d = self.rows.ncols();
        let n_max = self.lengths.iter().copied().max().unwrap_or(0);
        let batch = self.lengths.len();
        let mut values = Array3::zeros((batch, n_max, d));
        let mut pad_mask = Array2::from_elem((batch, n_max), false);
        for (b, (&len, &off)) in self.lengths.iter().zip(&self.offsets).enumerate() {
            values
                .slice_mut(s![b, ..len, ..])
                .assign(&self.rows.slice(s![off..off + len, ..]));
            pad_mask.slice_mut(s![b, ..len]).fill(true);
        }
        HiddenStates {
            values,
            pad_mask,
            lengths: self.lengths.clone(),
        }
    }

    fn sentence(&self, b: usize) -> ArrayView2<'_, f32> {
        let off = self.offsets[b];
        self.rows.slice(s![off..off + self.lengths[b], ..])
    }

    /// Keep only the listed positions of each sentence.
    fn gather(&self, keep: &[Vec<usize>]) -> Self {
        let d = self.rows.ncols();
        let lengths: Vec<usize> = keep.iter().map(Vec::len).collect();
        let mut rows = Array2::zeros((lengths.iter().sum(), d));
        let mut r = 0;
        for (b, positions) in keep.iter().enumerate() {
            let off = self.offsets[b];
            for &p in positions {
                rows.row_mut(r).assign(&self.rows.row(off + p));
                r += 1;
            }
        }
        Self::new(rows, lengths)
    }
}

fn offsets(lengths: &[usize]) -> Vec<usize> {
    lengths
        .iter()
        .scan(0, |acc, &len| {
            let o = *acc;
            *acc += len;
            Some(o)
        })
        .collect()
}

/// Which attention probabilities to keep while running a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Capture {
    Nothing,
    Mean,
    Full,
}

/// Attention probabilities of one sentence (unpadded).
struct SentenceAttention {
    mean: Option<Array2<f32>>,
    per_head: Option<Array3<f32>>,
}

const PAR_ROW_CHUNK: usize = 32;

/// `x @ w.T + b` with `w` stored `[out, in]`; rows are split across the
/// rayon pool when it has more than one thread.
fn linear(x: &Array2<f32>, w: &Array2<f32>, b: &Array1<f32>) -> Array2<f32> {
    let (rows, inner) = x.dim();
    let out_dim = w.nrows();
    debug_assert_eq!(inner, w.ncols());
    let mut out = Array2::from_shape_fn((rows, out_dim), |(_, j)| b[j]);
    if rows == 0 {
        return out;
    }
    let threads = rayon::current_num_threads();
    let wt = w.t();
    if threads <= 1 || rows < 2 * PAR_ROW_CHUNK {
        general_mat_mul(1.0, x, &wt, 1.0, &mut out);
        return out;
    }
    let chunk = rows.div_ceil(threads).max(PAR_ROW_CHUNK);
    let xs = x.as_slice().expect("activations are standard-layout");
    let os = out.as_slice_mut().expect("fresh array is standard-layout");
    os.par_chunks_mut(chunk * out_dim)
        .zip(xs.par_chunks(chunk * inner))
        .for_each(|(o, xi)| {
            let n = xi.len() / inner;
            let xi = ArrayView2::from_shape((n, inner), xi).expect("chunk shape");
            let mut o = ArrayViewMut2::from_shape((n, out_dim), o).expect("chunk shape");
            general_mat_mul(1.0, &xi, &wt, 1.0, &mut o);
        });
    out
}

fn layer_norm_rows(x: &mut Array2<f32>, scale: &Array1<f32>, bias: &Array1<f32>, eps: f32) {
    let d = x.ncols() as f32;
    for mut row in x.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(scale).zip(bias) {
            *v = (*v - mean) * inv * g + b;
        }
    }
}

/// Exact (erf) GELU.
fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

fn softmax_rows(m: &mut Array2<f32>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

fn check_layer(d_model: usize, layer: &LayerWeights, config: &EncoderConfig) -> Result<()> {
    let d = config.d_model;
    let ok = d_model == d
        && layer.query_w.dim() == (d, d)
        && layer.key_w.dim() == (d, d)
        && layer.value_w.dim() == (d, d)
        && layer.attn_out_w.dim() == (d, d)
        && layer.ffn_in_w.dim() == (config.d_ff, d)
        && layer.ffn_out_w.dim() == (d, config.d_ff)
        && layer.query_b.len() == d
        && layer.key_b.len() == d
        && layer.value_b.len() == d
        && layer.attn_out_b.len() == d
        && layer.ffn_in_b.len() == config.d_ff
        && layer.ffn_out_b.len() == d
        && layer.attn_ln_scale.len() == d
        && layer.ffn_ln_scale.len() == d;
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "hidden width {d_model} does not match layer weights for d_model={d}, d_ff={}",
            config.d_ff
        )))
    }
}

/// Multi-head self-attention of one sentence's rows.
fn sentence_attention(
    q: ArrayView2<'_, f32>,
    k: ArrayView2<'_, f32>,
    v: ArrayView2<'_, f32>,
    heads: usize,
    d_k: usize,
    capture: Capture,
) -> (Array2<f32>, SentenceAttention) {
    let n = q.nrows();
    let scale = 1.0 / (d_k as f32).sqrt();
    let mut context = Array2::zeros((n, heads * d_k));
    let mut mean = (capture != Capture::Nothing).then(|| Array2::<f32>::zeros((n, n)));
    let mut per_head = (capture == Capture::Full).then(|| Array3::<f32>::zeros((heads, n, n)));
    let mut probs = Array2::<f32>::zeros((n, n));
    for h in 0..heads {
        let cols = s![.., h * d_k..(h + 1) * d_k];
        general_mat_mul(scale, &q.slice(cols), &k.slice(cols).t(), 0.0, &mut probs);
        softmax_rows(&mut probs);
        general_mat_mul(
            1.0,
            &probs,
            &v.slice(cols),
            0.0,
            &mut context.slice_mut(cols),
        );
        if let Some(m) = mean.as_mut() {
            *m += &probs;
        }
        if let Some(p) = per_head.as_mut() {
            p.index_axis_mut(Axis(0), h).assign(&probs);
        }
    }
    if let Some(m) = mean.as_mut() {
        m.mapv_inplace(|x| x / heads as f32);
    }
    (context, SentenceAttention { mean, per_head })
}

/// Attention sub-layer on packed rows: projections, per-sentence attention,
/// output projection, residual and LayerNorm.
fn attention_packed(
    input: &Packed,
    layer: &LayerWeights,
    config: &EncoderConfig,
    capture: Capture,
) -> (Packed, Vec<SentenceAttention>) {
    let x = &input.rows;
    let q = linear(x, &layer.query_w, &layer.query_b);
    let k = linear(x, &layer.key_w, &layer.key_b);
    let v = linear(x, &layer.value_w, &layer.value_b);
    let run = |b: usize| {
        let (off, len) = (input.offsets[b], input.lengths[b]);
        let r = s![off..off + len, ..];
        sentence_attention(
            q.slice(r),
            k.slice(r),
            v.slice(r),
            config.num_heads,
            config.d_k,
            capture,
        )
    };
    let batch = input.lengths.len();
    let per_sentence: Vec<(Array2<f32>, SentenceAttention)> = if rayon::current_num_threads() > 1 {
        (0..batch).into_par_iter().map(run).collect()
    } else {
        (0..batch).map(run).collect()
    };
    let mut context = Array2::zeros(x.dim());
    let mut attn = Vec::with_capacity(batch);
    for (b, (ctx, a)) in per_sentence.into_iter().enumerate() {
        let off = input.offsets[b];
        context
            .slice_mut(s![off..off + input.lengths[b], ..])
            .assign(&ctx);
        attn.push(a);
    }
    let mut out = linear(&context, &layer.attn_out_w, &layer.attn_out_b);
    out += x;
    layer_norm_rows(
        &mut out,
        &layer.attn_ln_scale,
        &layer.attn_ln_bias,
        config.layernorm_eps,
    );
    (Packed::new(out, input.lengths.clone()), attn)
}

fn feed_forward_packed(input: &Packed, layer: &LayerWeights, config: &EncoderConfig) -> Packed {
    let mut inner = linear(&input.rows, &layer.ffn_in_w, &layer.ffn_in_b);
    inner.mapv_inplace(gelu);
    let mut out = linear(&inner, &layer.ffn_out_w, &layer.ffn_out_b);
    out += &input.rows;
    layer_norm_rows(
        &mut out,
        &layer.ffn_ln_scale,
        &layer.ffn_ln_bias,
        config.layernorm_eps,
    );
    Packed::new(out, input.lengths.clone())
}

/// Self-attention sub-layer of one transformer layer on a padded batch.
///
/// Pad keys receive probability exactly zero. Returns the post-LayerNorm
/// hidden states together with the full per-head and head-averaged
/// attention probabilities.
pub fn attention(
    hidden: &HiddenStates,
    layer: &LayerWeights,
    config: &EncoderConfig,
) -> Result<(HiddenStates, AttentionScores)> {
    hidden.validate()?;
    let (batch, n, d) = hidden.values.dim();
    check_layer(d, layer, config)?;
    let packed = Packed::from_hidden(hidden);
    let (out, attn) = attention_packed(&packed, layer, config, Capture::Full);
    let mut per_head = Array4::zeros((batch, config.num_heads, n, n));
    let mut head_mean = Array3::zeros((batch, n, n));
    for (b, a) in attn.into_iter().enumerate() {
        let len = hidden.lengths[b];
        if let Some(p) = a.per_head {
            per_head.slice_mut(s![b, .., ..len, ..len]).assign(&p);
        }
        if let Some(m) = a.mean {
            head_mean.slice_mut(s![b, ..len, ..len]).assign(&m);
        }
    }
    let mut out = out.to_hidden();
    repad(&mut out, n);
    Ok((
        out,
        AttentionScores {
            per_head: Some(per_head),
            head_mean,
        },
    ))
}

/// Token-wise GELU MLP with residual and LayerNorm; pad positions stay zero.
pub fn feed_forward(
    hidden: &HiddenStates,
    layer: &LayerWeights,
    config: &EncoderConfig,
) -> Result<HiddenStates> {
    hidden.validate()?;
    let n = hidden.values.dim().1;
    check_layer(hidden.values.dim().2, layer, config)?;
    let mut out = feed_forward_packed(&Packed::from_hidden(hidden), layer, config).to_hidden();
    repad(&mut out, n);
    Ok(out)
}

/// Widen a batch back to `n` columns after a packed round trip.
fn repad(hidden: &mut HiddenStates, n: usize) {
    let (batch, cur, d) = hidden.values.dim();
    if cur == n {
        return;
    }
    let mut values = Array3::zeros((batch, n, d));
    values.slice_mut(s![.., ..cur, ..]).assign(&hidden.values);
    let mut mask = Array2::from_elem((batch, n), false);
    mask.slice_mut(s![.., ..cur]).assign(&hidden.pad_mask);
    hidden.values = values;
    hidden.pad_mask = mask;
}

fn check_batch(model: &EncoderModel, batch: &TokenizedBatch) -> Result<()> {
    let (b, n) = batch.ids.dim();
    if batch.pad_mask.dim() != (b, n) || batch.lengths.len() != b {
        return Err(Error::Shape(
            "token batch ids, mask and lengths disagree".into(),
        ));
    }
    check_prefix_mask(&batch.pad_mask, &batch.lengths)?;
    let max_len = batch.lengths.iter().copied().max().unwrap_or(0);
    if max_len > model.config.max_position {
        return Err(Error::Config(format!(
            "sequence length {max_len} exceeds max_position {}",
            model.config.max_position
        )));
    }
    for (row, &len) in batch.ids.rows().into_iter().zip(&batch.lengths) {
        if let Some(&bad) = row
            .iter()
            .take(len)
            .find(|&&id| id as usize >= model.config.vocab_size)
        {
            return Err(Error::Vocab(format!(
                "token id {bad} out of range for vocab_size {}",
                model.config.vocab_size
            )));
        }
    }
    Ok(())
}

fn embed_packed(model: &EncoderModel, batch: &TokenizedBatch) -> Packed {
    let d = model.config.d_model;
    let total = batch.lengths.iter().sum();
    let mut rows = Array2::zeros((total, d));
    let segment = model.segment_embeddings.row(0);
    let mut r = 0;
    for (b, &len) in batch.lengths.iter().enumerate() {
        for t in 0..len {
            let id = batch.ids[[b, t]] as usize;
            let mut row = rows.row_mut(r);
            row.assign(&model.token_embeddings.row(id));
            row += &model.position_embeddings.row(t);
            row += &segment;
            r += 1;
        }
    }
    layer_norm_rows(
        &mut rows,
        &model.embed_ln_scale,
        &model.embed_ln_bias,
        model.config.layernorm_eps,
    );
    Packed::new(rows, batch.lengths.clone())
}

/// Token + position + segment-0 embeddings followed by LayerNorm.
pub fn embed_tokens(model: &EncoderModel, batch: &TokenizedBatch) -> Result<HiddenStates> {
    check_batch(model, batch)?;
    let mut hidden = embed_packed(model, batch).to_hidden();
    repad(&mut hidden, batch.max_len());
    Ok(hidden)
}

/// Mean over surviving rows, then L2 normalization.
fn pool_normalize(rows: ArrayView2<'_, f32>) -> SentenceEmbedding {
    let d = rows.ncols();
    let mut acc = vec![0f64; d];
    for row in rows.rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    let count = rows.nrows().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
    SentenceEmbedding(acc.into_iter().map(|a| (a * scale) as f32).collect())
}

/// Mean-pool real token rows and L2-normalize, one embedding per sentence.
pub fn mean_pool_normalize(hidden: &HiddenStates) -> Result<Vec<SentenceEmbedding>> {
    hidden.validate()?;
    Ok(hidden
        .lengths
        .iter()
        .enumerate()
        .map(|(b, &len)| pool_normalize(hidden.values.slice(s![b, ..len, ..])))
        .collect())
}

/// Per-layer sequence lengths recorded during [`encode_traced`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodeTrace {
    /// `lengths_after_layer[i][b]`: tokens of sentence `b` leaving layer `i + 1`.
    pub lengths_after_layer: Vec<Vec<usize>>,
}

/// Sentence embeddings for a tokenized batch, optionally pruned.
pub fn encode(
    model: &EncoderModel,
    batch: &TokenizedBatch,
    prune: Option<&PruneConfig>,
) -> Result<Vec<SentenceEmbedding>> {
    encode_traced(model, batch, prune).map(|(e, _)| e)
}

pub fn encode_traced(
    model: &EncoderModel,
    batch: &TokenizedBatch,
    prune: Option<&PruneConfig>,
) -> Result<(Vec<SentenceEmbedding>, EncodeTrace)> {
    if let Some(p) = prune {
        p.validate()?;
        if p.l > model.config.num_layers {
            return Err(Error::Config(format!(
                "prune layer {} exceeds the model's {} layers",
                p.l, model.config.num_layers
            )));
        }
    }
    check_batch(model, batch)?;
    let config = &model.config;
    let mut state = embed_packed(model, batch);
    let mut trace = Vec::with_capacity(config.num_layers);
    for (i, layer) in model.layers.iter().enumerate() {
        let prune_here = prune.filter(|p| p.l == i + 1);
        let capture = if prune_here.is_some() {
            Capture::Mean
        } else {
            Capture::Nothing
        };
        let (attended, attn) = attention_packed(&state, layer, config, capture);
        state = attended;
        if let Some(p) = prune_here {
            let keep: Vec<Vec<usize>> = attn
                .iter()
                .map(|a| {
                    let mean = a.mean.as_ref().expect("mean captured at the pruning layer");
                    select_sentence(&column_sums(mean.view()), p)
                })
                .collect();
            if keep.iter().zip(&state.lengths).any(|(k, &n)| k.len() != n) {
                state = state.gather(&keep);
            }
        }
        state = feed_forward_packed(&state, layer, config);
        trace.push(state.lengths.clone());
    }
    let embeddings = (0..state.lengths.len())
        .map(|b| pool_normalize(state.sentence(b)))
        .collect();
    Ok((
        embeddings,
        EncodeTrace {
            lengths_after_layer: trace,
        },
    ))
}

/// Texts per internal batch in [`embed_texts`]; bounds activation memory only.
pub const EMBED_CHUNK: usize = 256;

/// Tokenize, encode, pool and normalize `texts`, in input order.
pub fn embed_texts<S: AsRef<str> + Sync>(
    model: &EncoderModel,
    vocab: &Vocab,
    texts: &[S],
    prune: Option<&PruneConfig>,
    max_len: usize,
) -> Result<Vec<SentenceEmbedding>> {
    if texts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(EMBED_CHUNK) {
        let batch = tokenize(chunk, vocab, max_len)?;
        out.extend(encode(model, &batch, prune)?);
    }
    Ok(out)
}
