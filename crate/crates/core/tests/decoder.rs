use std::collections::HashSet;

use tslm_core::autoencoder::{train_autoencoder, AeConfig, Autoencoder};
use tslm_core::checkpoint::Checkpoint;
use tslm_core::datagen::toy_pairs;
use tslm_core::decoder::{generate_captions, greedy_caption, sample_caption, train_tslm, SamplingConfig, Tslm, TslmConfig};
use tslm_core::encoder::{EncoderConfig, Modality};
use tslm_core::nn::{store_checksum, TrainConfig};
use tslm_core::textrep::{build_vocab, Vocabulary};
use tslm_core::{CaptionedPair, Source};
use tslm_tensor::{Graph, ParamStore};

fn pairs(count: usize, seed: u64) -> Vec<CaptionedPair> {
    toy_pairs(count, (24, 24), Source::Original, seed).unwrap().into_iter().map(|(p, _)| p).collect()
}

fn vocab(data: &[CaptionedPair]) -> Vocabulary {
    build_vocab(&data.iter().map(|p| p.caption.as_str()).collect::<Vec<_>>()).unwrap()
}

fn config(d: usize, modality: Modality) -> TslmConfig {
    TslmConfig { encoder: EncoderConfig { d, heads: 4, prototypes: 8, layers: 1, ff_mult: 2, max_positions: 64 }, layers: 1, max_len: 16, modality }
}

fn train_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, batch: 4, lr: 3e-3, warmup_ratio: 0.1, weight_decay: 0.01, seed, jitter: 0 }
}

fn quick_ae(data: &[CaptionedPair], d: usize) -> Autoencoder {
    let s: Vec<_> = data.iter().map(|p| p.series.clone()).collect();
    train_autoencoder(&s, AeConfig { d, ..Default::default() }, &TrainConfig { epochs: 5, batch: 16, lr: 3e-3, warmup_ratio: 0.1, weight_decay: 0.0, seed: 1, jitter: 0 }).unwrap().0
}

#[test]
fn untrained_loss_is_near_log_vocabulary() {
    let data = pairs(24, 3);
    let ae = Autoencoder::new(AeConfig { d: 16, ..Default::default() }, 2).unwrap();
    for modality in [Modality::Joint, Modality::Text, Modality::TimeSeries] {
        let model = Tslm::new(vocab(&data), config(16, modality), 7).unwrap();
        let s64: ParamStore<f64> = model.store.cast();
        let mut total = 0.0;
        for p in &data {
            let ex = model.example(p, &ae).unwrap();
            let mut g = Graph::no_grad();
            let l = model.example_loss(&mut g, &s64, &ex).unwrap();
            total += g.value(l).item();
        }
        let mean = total / data.len() as f64;
        let expected = (model.vocab.len() as f64).ln();
        assert!((mean - expected).abs() / expected < 0.02, "{modality:?}: {mean} vs ln|V| {expected}");
    }
}

#[test]
fn small_set_is_memorised() {
    let data = pairs(8, 5);
    let ae = quick_ae(&data, 16);
    let (model, hist) = train_tslm(&data, vocab(&data), &ae, config(16, Modality::Joint), &TrainConfig { batch: 2, lr: 1e-2, ..train_cfg(100, 1) }).unwrap();
    assert!(hist.last().unwrap() < &(hist[0] * 0.1), "{hist:?}");
    let hits = data.iter().filter(|p| greedy_caption(&model, &model.prepare(&p.series, &ae).unwrap(), 16).unwrap() == p.caption).count();
    assert!(hits >= 7, "greedy reproduced {hits}/8");
}

#[test]
fn training_and_sampling_are_deterministic() {
    let data = pairs(12, 6);
    let ae = quick_ae(&data, 16);
    let run = |seed| train_tslm(&data, vocab(&data), &ae, config(16, Modality::Joint), &train_cfg(2, seed)).unwrap();
    let (a, b, c) = (run(4).0, run(4).0, run(5).0);
    assert_eq!(store_checksum(&a.store), store_checksum(&b.store));
    assert_ne!(store_checksum(&a.store), store_checksum(&c.store));
    let input = a.prepare(&data[0].series, &ae).unwrap();
    let cfg = SamplingConfig { seed: 9, ..Default::default() };
    assert_eq!(generate_captions(&a, &input, &cfg).unwrap(), generate_captions(&b, &input, &cfg).unwrap());
}

#[test]
fn sampling_is_diverse_but_greedy_is_not() {
    let data = pairs(12, 7);
    let ae = quick_ae(&data, 16);
    let (model, _) = train_tslm(&data, vocab(&data), &ae, config(16, Modality::Joint), &train_cfg(3, 2)).unwrap();
    let input = model.prepare(&data[0].series, &ae).unwrap();
    let sampled: HashSet<String> = (0..100).map(|s| sample_caption(&model, &input, &SamplingConfig { seed: s, temperature: 1.0, ..Default::default() }).unwrap()).collect();
    assert!(sampled.len() >= 2, "{sampled:?}");
    let greedy: HashSet<String> = (0..5).map(|s| sample_caption(&model, &input, &SamplingConfig { seed: s, temperature: 0.0, ..Default::default() }).unwrap()).collect();
    assert_eq!(greedy.len(), 1);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = pairs(6, 8);
    let ae = Autoencoder::new(AeConfig { d: 16, ..Default::default() }, 2).unwrap();
    let model = Tslm::new(vocab(&data), config(16, Modality::Text), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tslm.ckpt");
    model.to_checkpoint().save(&path).unwrap();
    let back = Tslm::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.vocab, model.vocab);
    let input = model.prepare(&data[0].series, &ae).unwrap();
    let prefix = [tslm_core::textrep::BOS, model.vocab.id("values").unwrap()];
    assert_eq!(back.decode_logits(&prefix, &input).unwrap(), model.decode_logits(&prefix, &input).unwrap());
    assert!(Tslm::from_checkpoint(&ae.to_checkpoint()).is_err());
}
