//! Multi-modal encoder: token embeddings of the joint text, reprogramming
//! of the autoencoder embedding onto text prototypes, and a stack of
//! transformer blocks over the concatenation.

use serde::{Deserialize, Serialize};
use tslm_tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

use crate::error::{Error, Result};
use crate::nn::{multi_head, EncoderBlock, LayerNorm, Linear, EMBED_INIT};
use crate::series::TimeSeries;
use crate::textrep::{assemble_joint_text, Vocabulary, CLS, NUMBER_BASE};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub prototypes: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d: 128, heads: 4, prototypes: 64, layers: 2, ff_mult: 2, max_positions: 128 }
    }
}

impl EncoderConfig {
    pub fn validate(&self, vocab_len: usize) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::param(format!("d={} must be a positive multiple of H={}", self.d, self.heads)));
        }
        if self.prototypes == 0 || self.prototypes >= vocab_len {
            return Err(Error::param(format!("need 0 < p < |V|, got p={} |V|={vocab_len}", self.prototypes)));
        }
        if self.ff_mult == 0 || self.max_positions == 0 {
            return Err(Error::param("ff_mult and max_positions must be positive"));
        }
        Ok(())
    }
}

/// Which modalities reach the transformer blocks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// Joint text followed by the reprogrammed embedding rows.
    #[default]
    Joint,
    /// Joint text only.
    Text,
    /// `[CLS]` followed by the reprogrammed embedding rows.
    TimeSeries,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "text" => Ok(Self::Text),
            "timeseries" => Ok(Self::TimeSeries),
            other => Err(Error::param(format!("unknown variant {other:?}"))),
        }
    }
}

/// Parameter handles of the encoder; values live in the caller's store.
#[derive(Debug, Clone)]
pub struct MmEncoder {
    pub config: EncoderConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub proto: ParamId,
    rq: Linear,
    rk: Linear,
    rv: Linear,
    blocks: Vec<EncoderBlock>,
    ln_f: LayerNorm,
}

/// One encoded input before pooling.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub matrix: Var,
    pub rows: usize,
}

impl MmEncoder {
    pub fn new(store: &mut ParamStore<f32>, config: EncoderConfig, vocab_len: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate(vocab_len)?;
        let d = config.d;
        let tok_emb = store.add_uniform("enc.tok_emb", &[vocab_len, d], EMBED_INIT, rng);
        let pos_emb = store.add_uniform("enc.pos_emb", &[config.max_positions, d], EMBED_INIT, rng);
        let proto = store.add_uniform("enc.proto", &[config.prototypes, vocab_len], 1.0 / (vocab_len as f64).sqrt(), rng);
        let rq = Linear::new(store, "enc.reprog.q", d, d, false, rng);
        let rk = Linear::new(store, "enc.reprog.k", d, d, false, rng);
        let rv = Linear::new(store, "enc.reprog.v", d, d, false, rng);
        let blocks = (0..config.layers).map(|i| EncoderBlock::new(store, &format!("enc.block{i}"), d, config.heads, config.ff_mult, rng)).collect();
        let ln_f = LayerNorm::new(store, "enc.ln_f", d);
        Ok(Self { config, tok_emb, pos_emb, proto, rq, rk, rv, blocks, ln_f })
    }

    /// Token plus positional embeddings for `ids` placed at `offset..`.
    pub fn embed_tokens<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, ids: &[usize], offset: usize) -> Result<Var> {
        let table = g.param(s, self.tok_emb);
        let tok = g.gather(table, ids)?;
        let pos = self.positions(g, s, offset, ids.len())?;
        Ok(g.add(tok, pos)?)
    }

    fn positions<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, offset: usize, len: usize) -> Result<Var> {
        if offset + len > self.config.max_positions {
            return Err(TensorError::Index(format!("sequence of {} positions exceeds max_positions {}", offset + len, self.config.max_positions)).into());
        }
        let table = g.param(s, self.pos_emb);
        let idx: Vec<usize> = (offset..offset + len).collect();
        Ok(g.gather(table, &idx)?)
    }

    /// `E_p = P · V_emb`, `[p×d]`.
    pub fn text_prototypes<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>) -> Result<Var> {
        let (p, v) = (g.param(s, self.proto), g.param(s, self.tok_emb));
        Ok(g.matmul(p, v)?)
    }

    /// Cross-attention from the `[f×d]` embedding onto the prototypes.
    /// Returns `Z` and the per-head attention weights.
    pub fn reprogram<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, ts_emb: Var, protos: Var) -> Result<(Var, Vec<Var>)> {
        let d = self.config.d;
        if g.shape(ts_emb).len() != 2 || g.shape(ts_emb)[1] != d {
            return Err(TensorError::Shape(format!("reprogram expects [f×{d}], got {:?}", g.shape(ts_emb))).into());
        }
        let q = self.rq.forward(g, s, ts_emb)?;
        let k = self.rk.forward(g, s, protos)?;
        let v = self.rv.forward(g, s, protos)?;
        multi_head(g, q, k, v, self.config.heads, None)
    }

    /// Transformer blocks and the final layer norm.
    pub fn transform<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, s, x)?;
        }
        self.ln_f.forward(g, s, x)
    }

    /// Encodes a series given its joint-text ids and its `[f×d]`
    /// autoencoder embedding.
    pub fn encode_series<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, joint_ids: &[usize], ts_emb: &Tensor<T>, modality: Modality) -> Result<Encoded> {
        let f = ts_emb.shape()[0];
        let reprogrammed = |g: &mut Graph<T>, offset: usize| -> Result<Var> {
            let protos = self.text_prototypes(g, s)?;
            let e = g.constant(ts_emb.clone())?;
            let (z, _) = self.reprogram(g, s, e, protos)?;
            let pos = self.positions(g, s, offset, f)?;
            Ok(g.add(z, pos)?)
        };
        let (x, rows) = match modality {
            Modality::Joint => {
                let n = joint_ids.len();
                let et = self.embed_tokens(g, s, joint_ids, 0)?;
                let z = reprogrammed(g, n)?;
                (g.concat_rows(&[et, z])?, n + f)
            }
            Modality::Text => (self.embed_tokens(g, s, joint_ids, 0)?, joint_ids.len()),
            Modality::TimeSeries => {
                let cls = self.embed_tokens(g, s, &[CLS], 0)?;
                let z = reprogrammed(g, 1)?;
                (g.concat_rows(&[cls, z])?, 1 + f)
            }
        };
        Ok(Encoded { matrix: self.transform(g, s, x)?, rows })
    }

    /// `[CLS] caption` through the shared embedding and blocks.
    pub fn encode_caption_ids<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, caption_ids: &[usize]) -> Result<Var> {
        if caption_ids.is_empty() {
            return Err(Error::param("cannot encode an empty caption"));
        }
        let mut ids = Vec::with_capacity(caption_ids.len() + 1);
        ids.push(CLS);
        ids.extend_from_slice(caption_ids);
        let x = self.embed_tokens(g, s, &ids, 0)?;
        let x = self.transform(g, s, x)?;
        Ok(g.slice_rows(x, 0, 1)?)
    }
}

/// Joint-text ids paired with the autoencoder embedding of one series.
#[derive(Debug, Clone)]
pub struct SeriesInput {
    pub joint_ids: Vec<usize>,
    pub ts_emb: Tensor<f32>,
}

impl SeriesInput {
    pub fn new(series: &TimeSeries, vocab: &Vocabulary, ae: &crate::autoencoder::Autoencoder) -> Result<Self> {
        Ok(Self { joint_ids: assemble_joint_text(series, vocab)?.ids, ts_emb: ae.encode(series)? })
    }

    /// Copy whose number tokens are shifted by independent uniform offsets
    /// in `-amount..=amount`, clamped to 0..=100.
    pub fn jittered(&self, amount: usize, rng: &mut impl Rng) -> Self {
        let mut out = self.clone();
        let a = amount as i64;
        for id in &mut out.joint_ids {
            if (NUMBER_BASE..=NUMBER_BASE + 100).contains(id) {
                let n = (*id - NUMBER_BASE) as i64 + rng.gen_range(-a..=a);
                *id = NUMBER_BASE + n.clamp(0, 100) as usize;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textrep::build_vocab;
    use tslm_tensor::rng::rng_from;

    fn setup(p: usize, heads: usize) -> (ParamStore<f32>, MmEncoder, Vocabulary) {
        let vocab = build_vocab(&["rises at the end", "falls early on"]).unwrap();
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { d: 8, heads, prototypes: p, layers: 1, ff_mult: 2, max_positions: 64 };
        let enc = MmEncoder::new(&mut store, cfg, vocab.len(), &mut rng_from(4)).unwrap();
        (store, enc, vocab)
    }

    fn emb(f: usize, d: usize) -> Tensor<f32> {
        Tensor::new(&[f, d], (0..f * d).map(|i| ((i * 7 % 11) as f32 - 5.0) * 0.1).collect()).unwrap()
    }

    #[test]
    fn prototype_shape_and_selection() {
        let (mut store, enc, vocab) = setup(4, 2);
        let mut g = Graph::no_grad();
        let e = enc.text_prototypes(&mut g, &store).unwrap();
        assert_eq!(g.shape(e), &[4, 8]);

        let mut onehot = Tensor::zeros(&[4, vocab.len()]);
        for (r, c) in [(0, 3), (1, 7), (2, 7), (3, 0)] {
            onehot.data_mut()[r * vocab.len() + c] = 1.0;
        }
        store.set(enc.proto, onehot).unwrap();
        let mut g = Graph::no_grad();
        let e = enc.text_prototypes(&mut g, &store).unwrap();
        let table = store.get(enc.tok_emb);
        assert_eq!(g.value(e).row(1), table.row(7));
        assert_eq!(g.value(e).row(3), table.row(0));
    }

    #[test]
    fn single_prototype_gives_its_value_row() {
        let (store, enc, _) = setup(1, 2);
        let mut g = Graph::no_grad();
        let protos = enc.text_prototypes(&mut g, &store).unwrap();
        let x = g.constant(emb(6, 8)).unwrap();
        let (z, weights) = enc.reprogram(&mut g, &store, x, protos).unwrap();
        let v = enc.rv.forward(&mut g, &store, protos).unwrap();
        let vrow = g.value(v).row(0).to_vec();
        for r in 0..6 {
            assert_eq!(g.value(z).row(r), &vrow[..]);
        }
        assert!(weights.iter().all(|w| g.value(*w).data().iter().all(|&p| p == 1.0)));
    }

    #[test]
    fn reprogram_rows_are_distributions() {
        let (store, enc, _) = setup(5, 4);
        let mut g = Graph::no_grad();
        let protos = enc.text_prototypes(&mut g, &store).unwrap();
        let x = g.constant(emb(6, 8)).unwrap();
        let (z, weights) = enc.reprogram(&mut g, &store, x, protos).unwrap();
        assert_eq!(g.shape(z), &[6, 8]);
        for w in weights {
            for r in 0..6 {
                let row = g.value(w).row(r);
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
        let bad = g.constant(emb(6, 5)).unwrap();
        assert!(enc.reprogram(&mut g, &store, bad, protos).is_err());
    }

    #[test]
    fn embedding_rows_follow_ids() {
        let (store, enc, vocab) = setup(4, 2);
        let mut g = Graph::no_grad();
        let a = vocab.tokenize("rises at the end");
        let mut b = a.clone();
        b.swap(0, 3);
        let ea = enc.embed_tokens(&mut g, &store, &a, 0).unwrap();
        let eb = enc.embed_tokens(&mut g, &store, &b, 0).unwrap();
        assert_eq!(g.value(ea).row(1), g.value(eb).row(1));
        assert_ne!(g.value(ea).row(0), g.value(eb).row(0));
        assert_ne!(g.value(ea).row(3), g.value(eb).row(3));
        assert!(enc.embed_tokens(&mut g, &store, &[vocab.len()], 0).is_err());
    }

    #[test]
    fn jitter_moves_only_numbers() {
        let (_, _, vocab) = setup(4, 2);
        let series = TimeSeries::new(vec![1.0, 50.0, 99.0, 20.0, 30.0, 40.0]).unwrap();
        let input = SeriesInput { joint_ids: assemble_joint_text(&series, &vocab).unwrap().ids, ts_emb: emb(6, 8) };
        let mut rng = rng_from(3);
        for _ in 0..20 {
            let j = input.jittered(4, &mut rng);
            for (a, b) in input.joint_ids.iter().zip(&j.joint_ids) {
                if (NUMBER_BASE..=NUMBER_BASE + 100).contains(a) {
                    assert!((*a as i64 - *b as i64).abs() <= 4);
                    assert!((NUMBER_BASE..=NUMBER_BASE + 100).contains(b));
                } else {
                    assert_eq!(a, b);
                }
            }
        }
        assert_eq!(input.jittered(0, &mut rng).joint_ids, input.joint_ids);
    }

    #[test]
    fn row_counts_per_modality() {
        let (store, enc, vocab) = setup(4, 2);
        let series = TimeSeries::new((1..=12).map(f64::from).collect()).unwrap();
        let ids = assemble_joint_text(&series, &vocab).unwrap().ids;
        let e = emb(6, 8);
        let mut g = Graph::no_grad();
        let rows = |m| {
            let mut g = Graph::no_grad();
            let out = enc.encode_series(&mut g, &store, &ids, &e, m).unwrap();
            assert_eq!(g.shape(out.matrix)[0], out.rows);
            out.rows
        };
        assert_eq!(rows(Modality::Joint), 31);
        assert_eq!(rows(Modality::Text), 25);
        assert_eq!(rows(Modality::TimeSeries), 7);
        assert!(enc.encode_caption_ids(&mut g, &store, &[]).is_err());
        assert_eq!("timeseries".parse::<Modality>().unwrap(), Modality::TimeSeries);
    }
}
