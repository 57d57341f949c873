use std::sync::OnceLock;

use tslm_core::autoencoder::{train_autoencoder, AeConfig, Autoencoder};
use tslm_core::checkpoint::Checkpoint;
use tslm_core::datagen::{inject_mispairs, toy_pairs, SeriesFacts};
use tslm_core::denoiser::{score_pairs, train_denoiser, Denoiser};
use tslm_core::encoder::EncoderConfig;
use tslm_core::nn::{store_checksum, TrainConfig};
use tslm_core::textrep::build_vocab;
use tslm_core::{CaptionedPair, Source};

fn pairs(count: usize, seed: u64) -> Vec<(CaptionedPair, SeriesFacts)> {
    toy_pairs(count, (24, 24), Source::Original, seed).unwrap()
}

fn train_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, batch: 8, lr: 3e-3, warmup_ratio: 0.1, weight_decay: 0.01, seed, jitter: 4 }
}

fn ae(series: &[CaptionedPair], d: usize) -> Autoencoder {
    let s: Vec<_> = series.iter().map(|p| p.series.clone()).collect();
    train_autoencoder(&s, AeConfig { d, ..Default::default() }, &TrainConfig { epochs: 20, batch: 32, lr: 3e-3, warmup_ratio: 0.1, weight_decay: 0.01, seed: 1, jitter: 0 }).unwrap().0
}

fn encoder(d: usize) -> EncoderConfig {
    EncoderConfig { d, heads: 4, prototypes: 16, layers: 2, ff_mult: 2, max_positions: 64 }
}

/// A moderately trained model shared by the behavioural tests.
fn trained() -> &'static (Denoiser, Vec<CaptionedPair>) {
    static MODEL: OnceLock<(Denoiser, Vec<CaptionedPair>)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let train: Vec<CaptionedPair> = pairs(240, 11).into_iter().map(|(p, _)| p).collect();
        let vocab = build_vocab(&train.iter().map(|p| p.caption.as_str()).collect::<Vec<_>>()).unwrap();
        let model = train_denoiser(&train, vocab, ae(&train, 32), encoder(32), &train_cfg(60, 3)).unwrap().0;
        let held_out = pairs(120, 12).into_iter().map(|(p, _)| p).collect();
        (model, held_out)
    })
}

#[test]
fn clean_pairs_outscore_mispairs() {
    let (model, held_out) = trained();
    let (noisy, bad) = inject_mispairs(held_out, 0.1, 5).unwrap();
    let scored = score_pairs(&noisy, model).unwrap();
    let mean = |keep: bool| {
        let v: Vec<f64> = scored.iter().enumerate().filter(|(i, _)| bad.contains(i) != keep).map(|(_, p)| p.score.unwrap()).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(true) > mean(false), "clean {} vs mispaired {}", mean(true), mean(false));
}

#[test]
fn ground_truth_beats_contradicting_caption() {
    let (model, held_out) = trained();
    let mut wins = 0;
    // toy pairs cycle through the six patterns, so neighbours disagree
    for (i, p) in held_out.iter().enumerate() {
        let other = &held_out[(i + 1) % held_out.len()];
        if model.similarity(&p.series, &p.caption).unwrap() > model.similarity(&p.series, &other.caption).unwrap() {
            wins += 1;
        }
    }
    let rate = wins as f64 / held_out.len() as f64;
    assert!(rate >= 0.9, "ground truth wins only {rate:.3}");
}

#[test]
fn scoring_is_idempotent_and_order_preserving() {
    let (model, held_out) = trained();
    let a = score_pairs(held_out, model).unwrap();
    let b = score_pairs(&a, model).unwrap();
    assert_eq!(a, b);
    for (p, q) in held_out.iter().zip(&a) {
        assert_eq!(p.caption, q.caption);
        assert!(q.score.unwrap().is_finite());
    }
}

#[test]
fn checkpoint_round_trip_preserves_scores() {
    let (model, held_out) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("den.ckpt");
    model.to_checkpoint().save(&path).unwrap();
    let back = Denoiser::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(store_checksum(&back.store), store_checksum(&model.store));
    assert_eq!(score_pairs(held_out, &back).unwrap(), score_pairs(held_out, model).unwrap());
    let wrong_kind = back.ae.to_checkpoint();
    assert!(Denoiser::from_checkpoint(&wrong_kind).is_err());
}

#[test]
fn one_embedding_table_serves_both_paths() {
    let data: Vec<CaptionedPair> = pairs(16, 4).into_iter().map(|(p, _)| p).collect();
    let vocab = build_vocab(&data.iter().map(|p| p.caption.as_str()).collect::<Vec<_>>()).unwrap();
    let mut model = Denoiser::new(vocab, Autoencoder::new(AeConfig { d: 8, ..Default::default() }, 1).unwrap(), EncoderConfig { d: 8, prototypes: 4, ..encoder(8) }, 2).unwrap();
    let tables = model.store.iter().filter(|(n, t)| t.shape() == [model.vocab.len(), 8] && n.contains("tok")).count();
    assert_eq!(tables, 1);
    let (s0, c0) = (model.encode_series(&data[0].series).unwrap(), model.encode_caption(&data[0].caption).unwrap());
    let table = model.store.get_mut(model.encoder.tok_emb);
    for v in table.data_mut() {
        *v *= -2.0;
    }
    assert_ne!(model.encode_series(&data[0].series).unwrap(), s0);
    assert_ne!(model.encode_caption(&data[0].caption).unwrap(), c0);
}

#[test]
fn training_is_deterministic() {
    let data: Vec<CaptionedPair> = pairs(32, 8).into_iter().map(|(p, _)| p).collect();
    let vocab = build_vocab(&data.iter().map(|p| p.caption.as_str()).collect::<Vec<_>>()).unwrap();
    let base = Autoencoder::new(AeConfig { d: 8, ..Default::default() }, 1).unwrap();
    let run = |seed| {
        let (m, h) = train_denoiser(&data, vocab.clone(), base.clone(), EncoderConfig { d: 8, prototypes: 4, ..encoder(8) }, &train_cfg(2, seed)).unwrap();
        (store_checksum(&m.store), h)
    };
    let (a, b, c) = (run(5), run(5), run(6));
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
    assert!(train_denoiser(&data[..4], vocab, base, encoder(8), &train_cfg(1, 0)).is_err());
}
