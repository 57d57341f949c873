//! 1D-CNN autoencoder that compresses a series into an `f×d` embedding.
//!
//! Series of any length are resampled to `l_max` points on the unit scale,
//! then pass two stride-2 convolutions (kernel 3, padding 1) and a
//! per-position mapping to width `d`. The decoder mirrors this with
//! transposed convolutions and a sigmoid output.

use serde::{Deserialize, Serialize};
use tslm_tensor::rng::child_rng;
use tslm_tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{mean_of, train_loop, Linear, TrainConfig};
use crate::series::TimeSeries;

pub const KIND: &str = "autoencoder";
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AeConfig {
    pub l_max: usize,
    /// Encoder stage widths then decoder stage widths.
    pub channels: [usize; 4],
    pub d: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self { l_max: 24, channels: [32, 16, 16, 32], d: 128 }
    }
}

impl AeConfig {
    pub fn f(&self) -> usize {
        self.l_max / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_max < 4 || self.l_max % 4 != 0 {
            return Err(Error::param(format!("l_max must be a positive multiple of 4, got {}", self.l_max)));
        }
        if self.d == 0 || self.channels.contains(&0) {
            return Err(Error::param("autoencoder widths must be positive"));
        }
        Ok(())
    }
}

/// Values divided by 100, linearly resampled to exactly `l_max` points.
pub fn canonicalize(series: &TimeSeries, l_max: usize) -> Result<Vec<f64>> {
    resample(series.values(), l_max)
}

fn resample(values: &[f64], l_max: usize) -> Result<Vec<f64>> {
    let l = values.len();
    if l < 2 {
        return Err(Error::param(format!("canonicalize needs at least 2 values, got {l}")));
    }
    if l_max < 2 {
        return Err(Error::param("l_max must be at least 2"));
    }
    let span = (l - 1) as f64 / (l_max - 1) as f64;
    Ok((0..l_max)
        .map(|j| {
            let x = j as f64 * span;
            let i = (x.floor() as usize).min(l - 2);
            let t = x - i as f64;
            (values[i] * (1.0 - t) + values[i + 1] * t) / 100.0
        })
        .collect())
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    /// Weights `[a×b×k]`; for forward convolutions `a` is the output width.
    fn new(store: &mut ParamStore<f32>, name: &str, a: usize, b: usize, bias: usize, fan_in: usize, rng: &mut impl rand::Rng) -> Self {
        let bound = 1.0 / ((fan_in * KERNEL) as f64).sqrt();
        Self { w: store.add_uniform(format!("{name}.w"), &[a, b, KERNEL], bound, rng), b: store.add_zeros(format!("{name}.b"), &[bias]) }
    }
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub config: AeConfig,
    pub store: ParamStore<f32>,
    c1: Conv,
    c2: Conv,
    me: Linear,
    md: Linear,
    d1: Conv,
    d2: Conv,
}

impl Autoencoder {
    pub fn new(config: AeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = child_rng(seed, "autoencoder-init");
        let mut store = ParamStore::new();
        let [e1, e2, d1, d2] = config.channels;
        let c1 = Conv::new(&mut store, "enc.c1", e1, 1, e1, 1, &mut rng);
        let c2 = Conv::new(&mut store, "enc.c2", e2, e1, e2, e1, &mut rng);
        let me = Linear::new(&mut store, "enc.map", e2, config.d, true, &mut rng);
        let md = Linear::new(&mut store, "dec.map", config.d, d1, true, &mut rng);
        let dc1 = Conv::new(&mut store, "dec.c1", d1, d2, d2, d1, &mut rng);
        let dc2 = Conv::new(&mut store, "dec.c2", d2, 1, 1, d2, &mut rng);
        Ok(Self { config, store, c1, c2, me, md, d1: dc1, d2: dc2 })
    }

    fn conv<T: Scalar>(g: &mut Graph<T>, s: &ParamStore<T>, c: &Conv, x: Var, transpose: bool) -> Result<Var> {
        let (w, b) = (g.param(s, c.w), g.param(s, c.b));
        let y = if transpose { g.conv1d_transpose(x, w, STRIDE, PAD, 1)? } else { g.conv1d(x, w, STRIDE, PAD)? };
        Ok(g.add_col_bias(y, b)?)
    }

    /// `[1×l_max]` input to `[f×d]`.
    pub fn encode_graph<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = Self::conv(g, s, &self.c1, x, false)?;
        let h = g.relu(h)?;
        let h = Self::conv(g, s, &self.c2, h, false)?;
        let h = g.relu(h)?;
        let h = g.transpose(h)?;
        self.me.forward(g, s, h)
    }

    /// `[f×d]` to `[1×l_max]` in (0,1).
    pub fn decode_graph<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, z: Var) -> Result<Var> {
        let (f, d) = (self.config.f(), self.config.d);
        if g.shape(z) != [f, d] {
            return Err(tslm_tensor::TensorError::Shape(format!("decode expects [{f}, {d}], got {:?}", g.shape(z))).into());
        }
        let h = self.md.forward(g, s, z)?;
        let h = g.transpose(h)?;
        let h = Self::conv(g, s, &self.d1, h, true)?;
        let h = g.relu(h)?;
        let h = Self::conv(g, s, &self.d2, h, true)?;
        Ok(g.sigmoid(h)?)
    }

    fn input_tensor<T: Scalar>(&self, series: &TimeSeries) -> Result<Tensor<T>> {
        let x = canonicalize(series, self.config.l_max)?;
        Ok(Tensor::new(&[1, self.config.l_max], x.into_iter().map(T::of).collect())?)
    }

    pub fn encode(&self, series: &TimeSeries) -> Result<Tensor<f32>> {
        let mut g = Graph::no_grad();
        let x = g.constant(self.input_tensor(series)?)?;
        let z = self.encode_graph(&mut g, &self.store, x)?;
        Ok(g.value(z).clone())
    }

    pub fn decode(&self, embedding: &Tensor<f32>) -> Result<Vec<f32>> {
        let mut g = Graph::no_grad();
        let z = g.constant(embedding.clone())?;
        let y = self.decode_graph(&mut g, &self.store, z)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Mean L1 reconstruction error on the unit scale.
    pub fn reconstruction_loss(&self, series: &TimeSeries) -> Result<f64> {
        let mut g = Graph::no_grad();
        let x = g.constant(self.input_tensor(series)?)?;
        let loss = self.loss_graph(&mut g, &self.store, x)?;
        Ok(g.value(loss).item() as f64)
    }

    fn loss_graph<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let z = self.encode_graph(g, s, x)?;
        let y = self.decode_graph(g, s, z)?;
        Ok(g.l1_loss(y, x)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({ "kind": KIND, "model": self.config }));
        c.push_store("", &self.store);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(KIND)?;
        Self::from_checkpoint_prefixed(c, "", &c.config["model"])
    }

    /// Loads an autoencoder stored under `prefix` inside another checkpoint.
    pub fn from_checkpoint_prefixed(c: &Checkpoint, prefix: &str, config: &serde_json::Value) -> Result<Self> {
        let config: AeConfig = serde_json::from_value(config.clone()).map_err(|e| Error::Format(format!("autoencoder config: {e}")))?;
        let mut ae = Self::new(config, 0)?;
        c.fill_store(prefix, &mut ae.store)?;
        Ok(ae)
    }
}

/// Unsupervised training on series alone. Returns the model and the mean
/// L1 loss of every epoch.
pub fn train_autoencoder(series: &[TimeSeries], config: AeConfig, train: &TrainConfig) -> Result<(Autoencoder, Vec<f64>)> {
    if series.is_empty() {
        return Err(Error::param("autoencoder training needs at least one series"));
    }
    let mut ae = Autoencoder::new(config, train.seed)?;
    let inputs = series.iter().map(|s| ae.input_tensor::<f32>(s)).collect::<Result<Vec<_>>>()?;
    let mut store = std::mem::take(&mut ae.store);
    let history = train_loop(&mut store, &inputs, train, |g, s, batch| {
        let losses = batch
            .iter()
            .map(|x| {
                let x = g.constant((*x).clone())?;
                ae.loss_graph(g, s, x)
            })
            .collect::<Result<Vec<_>>>()?;
        mean_of(g, &losses)
    })?;
    ae.store = store;
    Ok((ae, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(v: Vec<f64>) -> TimeSeries {
        TimeSeries::new(v).unwrap()
    }

    #[test]
    fn canonicalize_examples() {
        let ramp = resample(&[0.0, 100.0], 24).unwrap();
        for (j, v) in ramp.iter().enumerate() {
            assert!((v - j as f64 / 23.0).abs() < 1e-12);
        }
        assert_eq!(canonicalize(&ts(vec![50.0; 13]), 24).unwrap(), vec![0.5; 24]);
        let v: Vec<f64> = (1..=24).map(|i| i as f64 * 3.5).collect();
        let c = canonicalize(&ts(v.clone()), 24).unwrap();
        for (a, b) in c.iter().zip(&v) {
            assert!((a - b / 100.0).abs() < 1e-12);
        }
        assert!(canonicalize(&ts(vec![5.0]), 24).is_err());
    }

    #[test]
    fn shapes_and_ranges() {
        let ae = Autoencoder::new(AeConfig { d: 8, ..Default::default() }, 3).unwrap();
        for l in [12, 25, 50] {
            let s = ts((0..l).map(|i| 10.0 + i as f64).collect());
            let z = ae.encode(&s).unwrap();
            assert_eq!(z.shape(), &[6, 8]);
            let y = ae.decode(&z).unwrap();
            assert_eq!(y.len(), 24);
            assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert!(ae.decode(&Tensor::zeros(&[5, 8])).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let ae = Autoencoder::new(AeConfig { d: 4, ..Default::default() }, 9).unwrap();
        let back = Autoencoder::from_checkpoint(&Checkpoint::from_bytes(&ae.to_checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
        let s = ts((0..20).map(|i| 30.0 + (i as f64).sin() * 10.0).collect());
        assert_eq!(ae.encode(&s).unwrap(), back.encode(&s).unwrap());
    }
}
