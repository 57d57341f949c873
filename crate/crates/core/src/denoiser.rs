//! Cross-modal retrieval model used to score and filter generated pairs.
//!
//! Series and captions are encoded by the same multi-modal encoder (shared
//! token table and blocks) and pooled at the `[CLS]` row; similarity is the
//! dot product. Training is contrastive with in-batch negatives.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use tslm_tensor::rng::child_rng;
use tslm_tensor::{Graph, ParamStore, Scalar, Var};

use crate::autoencoder::Autoencoder;
use crate::checkpoint::Checkpoint;
use crate::encoder::{EncoderConfig, Modality, MmEncoder, SeriesInput};
use crate::error::{Error, Result};
use crate::nn::{train_loop, TrainConfig};
use crate::series::{CaptionedPair, TimeSeries};
use crate::textrep::Vocabulary;

pub const KIND: &str = "denoiser";
const AE_PREFIX: &str = "ae.";

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub vocab: Vocabulary,
    pub ae: Autoencoder,
    pub store: ParamStore<f32>,
    pub encoder: MmEncoder,
}

/// A pair with its series already prepared for the encoder.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub input: SeriesInput,
    pub caption_ids: Vec<usize>,
}

impl Denoiser {
    pub fn new(vocab: Vocabulary, ae: Autoencoder, config: EncoderConfig, seed: u64) -> Result<Self> {
        if config.d != ae.config.d {
            return Err(Error::param(format!("encoder width {} differs from autoencoder width {}", config.d, ae.config.d)));
        }
        let mut store = ParamStore::new();
        let encoder = MmEncoder::new(&mut store, config, vocab.len(), &mut child_rng(seed, "denoiser-init"))?;
        Ok(Self { vocab, ae, store, encoder })
    }

    pub fn prepare(&self, pair: &CaptionedPair) -> Result<PreparedPair> {
        Ok(PreparedPair { input: SeriesInput::new(&pair.series, &self.vocab, &self.ae)?, caption_ids: self.caption_ids(&pair.caption)? })
    }

    fn caption_ids(&self, caption: &str) -> Result<Vec<usize>> {
        let ids = self.vocab.tokenize(caption);
        if ids.is_empty() {
            return Err(Error::param("caption is empty"));
        }
        Ok(ids)
    }

    /// `X_[CLS]`, `[1×d]`.
    pub fn series_vector<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, input: &SeriesInput) -> Result<Var> {
        let emb = input.ts_emb.cast::<T>();
        let out = self.encoder.encode_series(g, s, &input.joint_ids, &emb, Modality::Joint)?;
        Ok(g.slice_rows(out.matrix, 0, 1)?)
    }

    /// `C_[CLS]`, `[1×d]`.
    pub fn caption_vector<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, caption_ids: &[usize]) -> Result<Var> {
        self.encoder.encode_caption_ids(g, s, caption_ids)
    }

    /// Mean over rows of `-log softmax(X Cᵀ)[i,i]`.
    pub fn batch_loss<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, batch: &[&PreparedPair]) -> Result<Var> {
        let sim = self.similarity_matrix(g, s, batch)?;
        let targets: Vec<usize> = (0..batch.len()).collect();
        Ok(g.cross_entropy(sim, &targets, None)?)
    }

    fn similarity_matrix<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, batch: &[&PreparedPair]) -> Result<Var> {
        let xs = batch.iter().map(|p| self.series_vector(g, s, &p.input)).collect::<Result<Vec<_>>>()?;
        let cs = batch.iter().map(|p| self.caption_vector(g, s, &p.caption_ids)).collect::<Result<Vec<_>>>()?;
        let x = g.concat_rows(&xs)?;
        let c = g.concat_rows(&cs)?;
        Ok(g.matmul_t(x, c)?)
    }

    pub fn encode_caption(&self, caption: &str) -> Result<Vec<f32>> {
        let ids = self.caption_ids(caption)?;
        let mut g = Graph::no_grad();
        let v = self.caption_vector(&mut g, &self.store, &ids)?;
        Ok(g.value(v).data().to_vec())
    }

    pub fn encode_series(&self, series: &TimeSeries) -> Result<Vec<f32>> {
        let input = SeriesInput::new(series, &self.vocab, &self.ae)?;
        let mut g = Graph::no_grad();
        let v = self.series_vector(&mut g, &self.store, &input)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Dot product of the pooled series and caption vectors.
    pub fn similarity(&self, series: &TimeSeries, caption: &str) -> Result<f64> {
        let x = self.encode_series(series)?;
        let c = self.encode_caption(caption)?;
        Ok(dot(&x, &c))
    }

    /// In-batch `B×B` similarity matrix for prepared pairs.
    pub fn batch_similarities(&self, batch: &[&PreparedPair]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::no_grad();
        let sim = self.similarity_matrix(&mut g, &self.store, batch)?;
        let t = g.value(sim);
        Ok((0..batch.len()).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({
            "kind": KIND,
            "encoder": self.encoder.config,
            "vocab": self.vocab,
            "ae": self.ae.config,
        }));
        c.push_store("", &self.store);
        c.push_store(AE_PREFIX, &self.ae.store);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(KIND)?;
        let vocab: Vocabulary = serde_json::from_value(c.config["vocab"].clone()).map_err(|e| Error::Format(format!("vocabulary: {e}")))?;
        vocab.validate()?;
        let config: EncoderConfig = serde_json::from_value(c.config["encoder"].clone()).map_err(|e| Error::Format(format!("encoder config: {e}")))?;
        let ae = Autoencoder::from_checkpoint_prefixed(c, AE_PREFIX, &c.config["ae"])?;
        let mut model = Self::new(vocab, ae, config, 0)?;
        let own = Checkpoint { config: c.config.clone(), tensors: c.tensors.iter().filter(|(n, _)| !n.starts_with(AE_PREFIX)).cloned().collect() };
        own.fill_store("", &mut model.store)?;
        Ok(model)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Contrastive training on ground-truth pairs. Returns the model and the
/// per-epoch mean loss.
pub fn train_denoiser(pairs: &[CaptionedPair], vocab: Vocabulary, ae: Autoencoder, config: EncoderConfig, train: &TrainConfig) -> Result<(Denoiser, Vec<f64>)> {
    if pairs.len() < train.batch {
        return Err(Error::param(format!("denoiser training needs at least B={} pairs, got {}", train.batch, pairs.len())));
    }
    let mut model = Denoiser::new(vocab, ae, config, train.seed)?;
    let prepared = pairs.iter().map(|p| model.prepare(p)).collect::<Result<Vec<_>>>()?;
    let mut store = std::mem::take(&mut model.store);
    let mut duplicate_batches = 0usize;
    let mut rng = child_rng(train.seed, "value-jitter");
    let history = train_loop(&mut store, &prepared, train, |g, s, batch| {
        let jittered: Vec<PreparedPair>;
        let batch: Vec<&PreparedPair> = if train.jitter > 0 {
            jittered = batch.iter().map(|p| PreparedPair { input: p.input.jittered(train.jitter, &mut rng), caption_ids: p.caption_ids.clone() }).collect();
            jittered.iter().collect()
        } else {
            batch.to_vec()
        };
        let distinct: HashSet<&[usize]> = batch.iter().map(|p| p.caption_ids.as_slice()).collect();
        if distinct.len() < batch.len() {
            duplicate_batches += 1;
            log::debug!("batch holds {} duplicate captions (false negatives)", batch.len() - distinct.len());
        }
        model.batch_loss(g, s, &batch)
    })?;
    if duplicate_batches > 0 {
        log::info!("{duplicate_batches} training batches contained duplicate captions");
    }
    model.store = store;
    Ok((model, history))
}

/// Annotates every pair with its similarity, preserving order.
pub fn score_pairs(pairs: &[CaptionedPair], model: &Denoiser) -> Result<Vec<CaptionedPair>> {
    pairs
        .iter()
        .map(|p| {
            let score = model.similarity(&p.series, &p.caption)?;
            Ok(CaptionedPair { score: Some(score), ..p.clone() })
        })
        .collect()
}

/// Summary of a score distribution with the suggested threshold interval
/// `[μ−2σ, μ−σ]` (sample standard deviation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub suggested_interval: [f64; 2],
}

impl ScoreStats {
    pub fn from_moments(count: usize, mean: f64, std: f64, min: f64, max: f64) -> Self {
        Self { count, mean, std, min, max, suggested_interval: [mean - 2.0 * std, mean - std] }
    }
}

pub fn score_stats(scores: &[f64]) -> Result<ScoreStats> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::param(format!("score statistics need at least 2 scores, got {n}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let mean = scores.iter().sum::<f64>() / n as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ScoreStats::from_moments(n, mean, var.sqrt(), min, max))
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Vec<CaptionedPair>,
    pub removed: Vec<CaptionedPair>,
    pub stats: ScoreStats,
}

/// Keeps pairs scoring at least `threshold`.
pub fn filter_pairs(pairs: Vec<CaptionedPair>, threshold: f64) -> Result<FilterOutcome> {
    let scores = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| p.score.ok_or_else(|| Error::Contract(format!("pair {i} has no score"))))
        .collect::<Result<Vec<_>>>()?;
    let stats = score_stats(&scores)?;
    let (kept, removed) = pairs.into_iter().partition(|p| p.score.is_some_and(|s| s >= threshold));
    Ok(FilterOutcome { kept, removed, stats })
}

/// JSON summary written by the `denoise` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub count: usize,
    pub kept: usize,
    pub removed: usize,
    pub mean: f64,
    pub std: f64,
    pub threshold: f64,
    pub suggested_interval: [f64; 2],
}

impl DenoiseReport {
    pub fn new(outcome: &FilterOutcome, threshold: f64) -> Self {
        Self {
            count: outcome.stats.count,
            kept: outcome.kept.len(),
            removed: outcome.removed.len(),
            mean: outcome.stats.mean,
            std: outcome.stats.std,
            threshold,
            suggested_interval: outcome.stats.suggested_interval,
        }
    }
}

/// Probability that a positive outscores a negative (ties count half).
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::param("ROC AUC needs both positive and negative scores"));
    }
    let mut wins = 0.0;
    for &p in positives {
        for &n in negatives {
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    Ok(wins / (positives.len() * negatives.len()) as f64)
}

/// Fraction of rows whose diagonal entry is the row maximum. A diagonal
/// tied with the maximum counts as retrieved: tied scores arise only from
/// identical captions, which are indistinguishable by construction.
pub fn retrieval_hits(sim: &[Vec<f64>]) -> usize {
    sim.iter()
        .enumerate()
        .filter(|(i, row)| row.iter().all(|&v| v <= row[*i]))
        .count()
}

/// In-batch retrieval accuracy over consecutive batches of `batch` pairs.
pub fn retrieval_accuracy(model: &Denoiser, pairs: &[CaptionedPair], batch: usize) -> Result<f64> {
    if pairs.is_empty() || batch == 0 {
        return Err(Error::param("retrieval accuracy needs pairs and a positive batch size"));
    }
    let prepared = pairs.iter().map(|p| model.prepare(p)).collect::<Result<Vec<_>>>()?;
    let mut hits = 0;
    for chunk in prepared.chunks(batch) {
        let refs: Vec<&PreparedPair> = chunk.iter().collect();
        hits += retrieval_hits(&model.batch_similarities(&refs)?);
    }
    Ok(hits as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::Source;

    fn scored(scores: &[f64]) -> Vec<CaptionedPair> {
        scores
            .iter()
            .map(|&s| CaptionedPair {
                series: TimeSeries::new(vec![10.0, 20.0, 30.0]).unwrap(),
                caption: "rises".into(),
                source: Source::Generated,
                score: Some(s),
            })
            .collect()
    }

    #[test]
    fn filter_keeps_nonnegative_at_zero() {
        let out = filter_pairs(scored(&[2.5, -0.3, 0.0]), 0.0).unwrap();
        let kept: Vec<f64> = out.kept.iter().map(|p| p.score.unwrap()).collect();
        let removed: Vec<f64> = out.removed.iter().map(|p| p.score.unwrap()).collect();
        assert_eq!(kept, vec![2.5, 0.0]);
        assert_eq!(removed, vec![-0.3]);
        assert!(filter_pairs(scored(&[2.5, -0.3, 0.0]), -1.0).unwrap().removed.is_empty());

        let mut unscored = scored(&[1.0, 2.0]);
        unscored[1].score = None;
        assert!(matches!(filter_pairs(unscored, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn stats_examples() {
        let s = ScoreStats::from_moments(100, 3.37, 2.44, -5.0, 9.0);
        assert!((s.suggested_interval[0] + 1.51).abs() < 1e-9);
        assert!((s.suggested_interval[1] - 0.93).abs() < 1e-9);

        let c = score_stats(&[4.0, 4.0, 4.0]).unwrap();
        assert_eq!((c.std, c.suggested_interval), (0.0, [4.0, 4.0]));

        let two = score_stats(&[0.0, 2.0]).unwrap();
        assert_eq!(two.mean, 1.0);
        assert!((two.std - 2f64.sqrt()).abs() < 1e-12);
        assert!(score_stats(&[1.0]).is_err());
    }

    #[test]
    fn report_json_fields() {
        let out = filter_pairs(scored(&[1.0, -1.0, 3.0]), 0.0).unwrap();
        let v = serde_json::to_value(DenoiseReport::new(&out, 0.0)).unwrap();
        for k in ["count", "kept", "removed", "mean", "std", "threshold", "suggested_interval"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["count"], 3);
        assert_eq!(v["removed"], 1);
    }

    #[test]
    fn auc_and_hits() {
        assert_eq!(roc_auc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[1.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.0], &[1.0]).unwrap(), 0.0);
        let sim = vec![vec![2.0, 1.0, 2.0], vec![0.0, 1.0, 3.0], vec![0.0, 0.0, 0.5]];
        assert_eq!(retrieval_hits(&sim), 2);
    }

    #[test]
    fn uniform_similarities_give_log_b() {
        let mut g = Graph::<f64>::new();
        let sim = g.constant(tslm_tensor::Tensor::full(&[8, 8], 0.7)).unwrap();
        let loss = g.cross_entropy(sim, &(0..8).collect::<Vec<_>>(), None).unwrap();
        assert!((g.value(loss).item() - 8f64.ln()).abs() < 1e-12);
        assert!((8f64.ln() - 2.0794).abs() < 1e-4);
    }
}
