//! Layers shared by the encoder, the denoiser and the decoder. Layer structs
//! only hold parameter ids; values live in a `ParamStore`, so the same model
//! runs in f32 for training and f64 for gradient checks.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tslm_tensor::rng::child_rng;
use tslm_tensor::{GradBuffer, Graph, OptimizerState, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// Masked attention logits sit this far below the rest.
const MASKED: f64 = -1e9;

/// Embedding tables start small so tied output logits start near uniform.
pub const EMBED_INIT: f64 = 0.03;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// `w[in×out]` uniform in ±1/√in; zero bias.
    pub fn new(store: &mut ParamStore<f32>, name: &str, input: usize, output: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = store.add_uniform(format!("{name}.w"), &[input, output], bound, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), &[output]));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let y = g.matmul(x, w)?;
        Ok(match self.b {
            Some(b) => {
                let b = g.param(s, b);
                g.add_row_bias(y, b)?
            }
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore<f32>, name: &str, width: usize) -> Self {
        Self { gain: store.add_full(format!("{name}.gain"), &[width], 1.0), bias: store.add_zeros(format!("{name}.bias"), &[width]) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(s, self.gain), g.param(s, self.bias));
        Ok(g.layer_norm(x, gain, bias)?)
    }
}

/// `[t×t]` additive mask hiding future positions.
pub fn causal_mask<T: Scalar>(t: usize) -> Tensor<T> {
    let data = (0..t * t).map(|i| if i % t > i / t { T::of(MASKED) } else { T::zero() }).collect();
    Tensor::new(&[t, t], data).expect("finite mask")
}

/// Scaled dot-product attention split over `heads` column blocks.
/// Returns the concatenated head outputs and each head's weight matrix.
pub fn multi_head<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize, mask: Option<Var>) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_t(qh, kh)?;
        let mut scores = g.scale(scores, scale)?;
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let attn = g.softmax(scores, 1)?;
        outs.push(g.matmul(attn, vh)?);
        weights.push(attn);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, weights))
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore<f32>, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, false, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, false, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, false, rng),
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, query: Var, memory: Var, causal: bool) -> Result<Var> {
        let q = self.q.forward(g, s, query)?;
        let k = self.k.forward(g, s, memory)?;
        let v = self.v.forward(g, s, memory)?;
        let mask = if causal {
            let t = g.shape(query)[0];
            Some(g.constant(causal_mask(t))?)
        } else {
            None
        };
        let (heads, _) = multi_head(g, q, k, v, self.heads, mask)?;
        self.o.forward(g, s, heads)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore<f32>, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, s, x)?;
        let h = g.relu(h)?;
        self.down.forward(g, s, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore<f32>, name: &str, d: usize, heads: usize, ff_mult: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, ff_mult * d, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, s, x)?;
        let a = self.attn.forward(g, s, h, h, false)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, s, x)?;
        let f = self.ff.forward(g, s, h)?;
        Ok(g.add(x, f)?)
    }
}

/// Pre-norm block with causal self-attention, cross-attention over an
/// encoder memory and a feed-forward layer.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross_attn: Attention,
    pub ln3: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore<f32>, name: &str, d: usize, heads: usize, ff_mult: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            self_attn: Attention::new(store, &format!("{name}.self"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            cross_attn: Attention::new(store, &format!("{name}.cross"), d, heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, ff_mult * d, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, memory: Var) -> Result<Var> {
        let h = self.ln1.forward(g, s, x)?;
        let a = self.self_attn.forward(g, s, h, h, true)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, s, x)?;
        let c = self.cross_attn.forward(g, s, h, memory, false)?;
        let x = g.add(x, c)?;
        let h = self.ln3.forward(g, s, x)?;
        let f = self.ff.forward(g, s, h)?;
        Ok(g.add(x, f)?)
    }
}

/// Training-loop settings shared by every trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Training-time offset range for number tokens of the joint text.
    #[serde(default)]
    pub jitter: usize,
}

impl TrainConfig {
    pub fn optimizer(&self, steps_per_epoch: usize) -> tslm_tensor::AdamWConfig {
        tslm_tensor::AdamWConfig {
            base_lr: self.lr,
            total_steps: (self.epochs * steps_per_epoch).max(1),
            warmup_ratio: self.warmup_ratio,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Mean of several scalar nodes.
pub fn mean_of<T: Scalar>(g: &mut Graph<T>, parts: &[Var]) -> Result<Var> {
    let mut acc = *parts.first().ok_or_else(|| Error::param("mean of zero terms"))?;
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(g.scale(acc, 1.0 / parts.len() as f64)?)
}

/// Shuffled minibatch AdamW loop. `loss` builds the mean loss of one batch
/// in a fresh graph. Returns the mean training loss of every epoch.
pub fn train_loop<I, F>(store: &mut ParamStore<f32>, items: &[I], cfg: &TrainConfig, mut loss: F) -> Result<Vec<f64>>
where
    F: FnMut(&mut Graph<f32>, &ParamStore<f32>, &[&I]) -> Result<Var>,
{
    if items.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    if cfg.batch == 0 {
        return Err(Error::param("batch size must be positive"));
    }
    let steps = items.len().div_ceil(cfg.batch);
    let mut opt = OptimizerState::new(store, cfg.optimizer(steps));
    let mut grads = GradBuffer::for_store(store);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let numeric = |e: Error| if e.is_numeric() { Error::Numeric(format!("epoch {epoch}: {e}")) } else { e };
        order.shuffle(&mut child_rng(cfg.seed, &format!("epoch-{epoch}")));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&I> = chunk.iter().map(|&i| &items[i]).collect();
            let mut g = Graph::new();
            let l = loss(&mut g, store, &batch).map_err(numeric)?;
            let value = g.value(l).item() as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}: loss is {value}")));
            }
            let gr = g.backward(l).map_err(|e| numeric(e.into()))?;
            grads.clear();
            grads.accumulate(&g, &gr);
            opt.step(store, &grads).map_err(|e| numeric(e.into()))?;
            total += value * chunk.len() as f64;
        }
        let mean = total / items.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }
    Ok(history)
}

/// Order-sensitive hash of every tensor's bits, used to check that a model
/// was not modified.
pub fn store_checksum(store: &ParamStore<f32>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in store.iter() {
        for b in name.bytes().map(u64::from).chain(t.data().iter().map(|v| u64::from(v.to_bits()))) {
            h = (h ^ b).wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}
