//! Caption decoder: causal self-attention over the caption prefix,
//! cross-attention over the encoder output and an output head tied to the
//! shared token table. Trained with teacher forcing, sampled with hybrid
//! top-k/top-p truncation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tslm_tensor::rng::{child_rng, derive_index, rng_from};
use tslm_tensor::{Graph, ParamId, ParamStore, Scalar, TensorError, Var};

use crate::autoencoder::Autoencoder;
use crate::checkpoint::Checkpoint;
use crate::encoder::{EncoderConfig, Modality, MmEncoder, SeriesInput};
use crate::error::{Error, Result};
use crate::nn::{mean_of, train_loop, DecoderBlock, LayerNorm, TrainConfig, EMBED_INIT};
use crate::series::{CaptionedPair, TimeSeries};
use crate::textrep::{Vocabulary, BOS, EOS, SPECIAL_TOKENS};

pub const KIND: &str = "tslm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TslmConfig {
    pub encoder: EncoderConfig,
    pub layers: usize,
    /// Longest target sequence, `[EOS]` included.
    pub max_len: usize,
    pub modality: Modality,
}

impl Default for TslmConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), layers: 2, max_len: 16, modality: Modality::Joint }
    }
}

#[derive(Debug, Clone)]
pub struct Tslm {
    pub config: TslmConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<f32>,
    pub encoder: MmEncoder,
    pos_emb: ParamId,
    blocks: Vec<DecoderBlock>,
    ln_f: LayerNorm,
}

/// Encoder input plus teacher-forcing sequences for one pair.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub input: SeriesInput,
    pub decoder_in: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Tslm {
    pub fn new(vocab: Vocabulary, config: TslmConfig, seed: u64) -> Result<Self> {
        if config.max_len < 2 {
            return Err(Error::param("max_len must allow at least one word and [EOS]"));
        }
        let mut rng = child_rng(seed, "tslm-init");
        let mut store = ParamStore::new();
        let encoder = MmEncoder::new(&mut store, config.encoder, vocab.len(), &mut rng)?;
        let d = config.encoder.d;
        let pos_emb = store.add_uniform("dec.pos_emb", &[config.max_len, d], EMBED_INIT, &mut rng);
        let blocks = (0..config.layers)
            .map(|i| DecoderBlock::new(&mut store, &format!("dec.block{i}"), d, config.encoder.heads, config.encoder.ff_mult, &mut rng))
            .collect();
        let ln_f = LayerNorm::new(&mut store, "dec.ln_f", d);
        Ok(Self { config, vocab, store, encoder, pos_emb, blocks, ln_f })
    }

    /// Encoder output `X` for one series.
    pub fn memory<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, input: &SeriesInput) -> Result<Var> {
        let emb = input.ts_emb.cast::<T>();
        Ok(self.encoder.encode_series(g, s, &input.joint_ids, &emb, self.config.modality)?.matrix)
    }

    /// Next-token logits `[t×|V|]` for every prefix position.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, prefix: &[usize], memory: Var) -> Result<Var> {
        let t = prefix.len();
        if t == 0 {
            return Err(Error::param("decoder prefix is empty"));
        }
        if t > self.config.max_len {
            return Err(TensorError::Index(format!("prefix of {t} tokens exceeds max_len {}", self.config.max_len)).into());
        }
        let table = g.param(s, self.encoder.tok_emb);
        let tok = g.gather(table, prefix)?;
        let pos_table = g.param(s, self.pos_emb);
        let idx: Vec<usize> = (0..t).collect();
        let pos = g.gather(pos_table, &idx)?;
        let mut x = g.add(tok, pos)?;
        for b in &self.blocks {
            x = b.forward(g, s, x, memory)?;
        }
        let h = self.ln_f.forward(g, s, x)?;
        Ok(g.matmul_t(h, table)?)
    }

    /// Logits for the token following `prefix`, which must start with `[BOS]`.
    pub fn decode_logits(&self, prefix: &[usize], input: &SeriesInput) -> Result<Vec<f32>> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::param("decoder prefix must begin with [BOS]"));
        }
        let mut g = Graph::no_grad();
        let mem = self.memory(&mut g, &self.store, input)?;
        let logits = self.logits(&mut g, &self.store, prefix, mem)?;
        Ok(g.value(logits).row(prefix.len() - 1).to_vec())
    }

    /// Teacher-forcing cross-entropy of one example.
    pub fn example_loss<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, ex: &TrainingExample) -> Result<Var> {
        let mem = self.memory(g, s, &ex.input)?;
        let logits = self.logits(g, s, &ex.decoder_in, mem)?;
        Ok(g.cross_entropy(logits, &ex.targets, None)?)
    }

    /// `[BOS] caption` / `caption [EOS]`, truncating long captions.
    pub fn example(&self, pair: &CaptionedPair, ae: &Autoencoder) -> Result<TrainingExample> {
        let mut ids = self.vocab.tokenize(&pair.caption);
        let room = self.config.max_len - 1;
        if ids.len() > room {
            log::warn!("caption of {} tokens truncated to {room}: {:?}", ids.len(), pair.caption);
            ids.truncate(room);
        }
        let mut decoder_in = vec![BOS];
        decoder_in.extend_from_slice(&ids);
        ids.push(EOS);
        Ok(TrainingExample { input: SeriesInput::new(&pair.series, &self.vocab, ae)?, decoder_in, targets: ids })
    }

    pub fn prepare(&self, series: &TimeSeries, ae: &Autoencoder) -> Result<SeriesInput> {
        SeriesInput::new(series, &self.vocab, ae)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({ "kind": KIND, "model": self.config, "vocab": self.vocab }));
        c.push_store("", &self.store);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(KIND)?;
        let vocab: Vocabulary = serde_json::from_value(c.config["vocab"].clone()).map_err(|e| Error::Format(format!("vocabulary: {e}")))?;
        vocab.validate()?;
        let config: TslmConfig = serde_json::from_value(c.config["model"].clone()).map_err(|e| Error::Format(format!("model config: {e}")))?;
        let mut model = Self::new(vocab, config, 0)?;
        c.fill_store("", &mut model.store)?;
        Ok(model)
    }
}

/// Teacher-forced training; the autoencoder only supplies frozen inputs.
pub fn train_tslm(pairs: &[CaptionedPair], vocab: Vocabulary, ae: &Autoencoder, config: TslmConfig, train: &TrainConfig) -> Result<(Tslm, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::param("no training pairs"));
    }
    if config.encoder.d != ae.config.d {
        return Err(Error::param(format!("model width {} differs from autoencoder width {}", config.encoder.d, ae.config.d)));
    }
    let mut model = Tslm::new(vocab, config, train.seed)?;
    let examples = pairs.iter().map(|p| model.example(p, ae)).collect::<Result<Vec<_>>>()?;
    let mut store = std::mem::take(&mut model.store);
    let mut rng = child_rng(train.seed, "value-jitter");
    let history = train_loop(&mut store, &examples, train, |g, s, batch| {
        let losses = batch
            .iter()
            .map(|ex| {
                if train.jitter == 0 {
                    return model.example_loss(g, s, ex);
                }
                let ex = TrainingExample { input: ex.input.jittered(train.jitter, &mut rng), ..(*ex).clone() };
                model.example_loss(g, s, &ex)
            })
            .collect::<Result<Vec<_>>>()?;
        mean_of(g, &losses)
    })?;
    model.store = store;
    Ok((model, history))
}

/// Sampling settings for caption generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub k: usize,
    pub top_k: usize,
    pub top_p: f64,
    /// Zero selects greedy decoding.
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { k: 3, top_k: 50, top_p: 0.95, temperature: 0.95, max_len: 16, seed: 0 }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.top_k == 0 || self.max_len == 0 {
            return Err(Error::param("k, top_k and max_len must be positive"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::param(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::param(format!("temperature {} must be finite and non-negative", self.temperature)));
        }
        Ok(())
    }
}

/// Keeps tokens that are both among the `top_k` most probable and inside
/// the smallest descending prefix whose mass reaches `top_p`, then
/// renormalises. Ties in probability keep the lower id first.
pub fn truncate_distribution(probs: &[f64], top_k: usize, top_p: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = 0;
    let mut mass = 0.0;
    for &i in &order {
        if keep >= top_k.max(1) {
            break;
        }
        keep += 1;
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    let mut out = vec![0.0; probs.len()];
    for &i in &order[..keep] {
        out[i] = probs[i] / mass;
    }
    out
}

fn softmax(logits: &[f32], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&v| v as f64 / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Token ids generated after `[BOS]`, up to `[EOS]` (excluded) or `max_len`.
pub fn sample_ids(model: &Tslm, input: &SeriesInput, cfg: &SamplingConfig, seed: u64) -> Result<Vec<usize>> {
    cfg.validate()?;
    let mut rng = rng_from(seed);
    let mut g = Graph::no_grad();
    let mem = model.memory(&mut g, &model.store, input)?;
    let limit = cfg.max_len.min(model.config.max_len);
    let mut prefix = vec![BOS];
    while prefix.len() <= limit {
        let logits = model.logits(&mut g, &model.store, &prefix, mem)?;
        let row = g.value(logits).row(prefix.len() - 1).to_vec();
        let next = if cfg.temperature == 0.0 {
            argmax(&row)
        } else {
            let probs = truncate_distribution(&softmax(&row, cfg.temperature), cfg.top_k, cfg.top_p);
            draw(&probs, &mut rng)
        };
        if next == EOS {
            break;
        }
        prefix.push(next);
        if prefix.len() == limit {
            break;
        }
    }
    Ok(prefix[1..].to_vec())
}

/// Detokenised words, special tokens dropped.
pub fn ids_to_text(vocab: &Vocabulary, ids: &[usize]) -> Result<String> {
    let words: Vec<usize> = ids.iter().copied().filter(|&i| i >= SPECIAL_TOKENS.len()).collect();
    vocab.detokenize(&words)
}

pub fn sample_caption(model: &Tslm, input: &SeriesInput, cfg: &SamplingConfig) -> Result<String> {
    ids_to_text(&model.vocab, &sample_ids(model, input, cfg, cfg.seed)?)
}

pub fn greedy_caption(model: &Tslm, input: &SeriesInput, max_len: usize) -> Result<String> {
    let cfg = SamplingConfig { temperature: 0.0, max_len, ..Default::default() };
    sample_caption(model, input, &cfg)
}

/// `K` samples from child seeds of `cfg.seed`.
pub fn generate_captions(model: &Tslm, input: &SeriesInput, cfg: &SamplingConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    (0..cfg.k as u64)
        .map(|i| ids_to_text(&model.vocab, &sample_ids(model, input, cfg, derive_index(cfg.seed, i))?))
        .collect()
}
