use proptest::prelude::*;

use tslm_core::autoencoder::canonicalize;
use tslm_core::datagen::{duplicate_rate, inject_mispairs, toy_pairs};
use tslm_core::decoder::truncate_distribution;
use tslm_core::denoiser::filter_pairs;
use tslm_core::encoder::SeriesInput;
use tslm_core::eval::{rouge_l, rouge_n, training_mix};
use tslm_core::llm::fallback_summary;
use tslm_core::textrep::{assemble_joint_text, build_vocab, parse_tagged, phase_tag, NUMBER_BASE};
use tslm_core::{CaptionedPair, Source, TimeSeries};
use tslm_tensor::rng::rng_from;
use tslm_tensor::Tensor;

fn series(min_len: usize) -> impl Strategy<Value = TimeSeries> {
    prop::collection::vec(0.5f64..99.5, min_len..60).prop_map(|v| TimeSeries::new(v).unwrap())
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["the", "price", "rises", "falls", "sharply", "at", "end", "values"]), 0..9).prop_map(|w| w.join(" "))
}

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, 1..20).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn toy(count: usize, seed: u64) -> Vec<CaptionedPair> {
    toy_pairs(count, (12, 30), Source::Generated, seed).unwrap().into_iter().map(|(p, _)| p).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncation_is_a_distribution_on_the_head(probs in distribution(), k in 1usize..25, p in 0.05f64..1.0) {
        let out = truncate_distribution(&probs, k, p);
        prop_assert_eq!(out.len(), probs.len());
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let support: Vec<usize> = (0..out.len()).filter(|&i| out[i] > 0.0).collect();
        prop_assert!(!support.is_empty() && support.len() <= k);
        // every kept token is at least as likely as every dropped one
        let min_kept = support.iter().map(|&i| probs[i]).fold(f64::INFINITY, f64::min);
        prop_assert!((0..out.len()).filter(|i| out[*i] == 0.0).all(|i| probs[i] <= min_kept));
        // kept tokens keep their relative odds
        let (a, b) = (support[0], *support.last().unwrap());
        prop_assert!((out[a] / out[b] - probs[a] / probs[b]).abs() < 1e-9 * (probs[a] / probs[b]).max(1.0));
    }

    #[test]
    fn rouge_is_bounded_and_self_perfect(c in sentence(), r in sentence(), n in 1usize..4) {
        let s = rouge_n(&c, &r, n).unwrap();
        let l = rouge_l(&c, &r);
        for v in [s.p, s.r, s.f, l.p, l.r, l.f] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((l.f - rouge_l(&r, &c).f).abs() < 1e-12);
        if c.split_whitespace().count() >= n {
            prop_assert_eq!(rouge_n(&c, &c, n).unwrap().f, 1.0);
            prop_assert_eq!(rouge_l(&c, &c).f, 1.0);
        }
    }

    #[test]
    fn canonical_series_keep_endpoints_and_range(s in series(2), l_max in 2usize..64) {
        let v = s.values();
        let c = canonicalize(&s, l_max).unwrap();
        prop_assert_eq!(c.len(), l_max);
        prop_assert!((c[0] - v[0] / 100.0).abs() < 1e-12);
        prop_assert!((c[l_max - 1] - v[v.len() - 1] / 100.0).abs() < 1e-9);
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        prop_assert!(c.iter().all(|&x| x >= lo / 100.0 - 1e-12 && x <= hi / 100.0 + 1e-12));
    }

    #[test]
    fn phase_tags_round_trip_rounded_values(s in series(3)) {
        let runs = parse_tagged(&phase_tag(&s).unwrap().text).unwrap();
        let flat: Vec<i64> = runs.iter().flatten().map(|&v| v as i64).collect();
        prop_assert_eq!(flat, s.rounded());
        prop_assert_eq!(runs[0].len(), s.len() / 3);
        prop_assert_eq!(runs[0].len() + runs[1].len(), 2 * s.len() / 3);
    }

    #[test]
    fn joint_text_has_no_unknown_tokens(s in series(3)) {
        let vocab = build_vocab(&["rises sharply"]).unwrap();
        let ids = assemble_joint_text(&s, &vocab).unwrap().ids;
        prop_assert!(!ids.contains(&tslm_core::textrep::UNK));
        prop_assert_eq!(ids.iter().filter(|&&id| (NUMBER_BASE..=NUMBER_BASE + 100).contains(&id)).count(), s.len());
    }

    #[test]
    fn jitter_stays_in_range(s in series(3), amount in 0usize..10, seed in any::<u64>()) {
        let vocab = build_vocab(&["rises"]).unwrap();
        let input = SeriesInput { joint_ids: assemble_joint_text(&s, &vocab).unwrap().ids, ts_emb: Tensor::zeros(&[6, 4]) };
        let moved = input.jittered(amount, &mut rng_from(seed));
        for (a, b) in input.joint_ids.iter().zip(&moved.joint_ids) {
            if (NUMBER_BASE..=NUMBER_BASE + 100).contains(a) {
                prop_assert!((NUMBER_BASE..=NUMBER_BASE + 100).contains(b));
                prop_assert!(a.abs_diff(*b) <= amount);
            } else {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn filtering_partitions_by_threshold(scores in prop::collection::vec(-5.0f64..5.0, 2..40), th in -5.0f64..5.0) {
        let mut data = toy(scores.len(), 1);
        for (p, s) in data.iter_mut().zip(&scores) {
            p.score = Some(*s);
        }
        let out = filter_pairs(data.clone(), th).unwrap();
        prop_assert_eq!(out.kept.len() + out.removed.len(), data.len());
        prop_assert!(out.kept.iter().all(|p| p.score.unwrap() >= th));
        prop_assert!(out.removed.iter().all(|p| p.score.unwrap() < th));
        prop_assert!(out.stats.suggested_interval[0] <= out.stats.suggested_interval[1]);
    }

    #[test]
    fn mispairs_swap_only_captions(count in 12usize..60, rate in 0.0f64..0.5, seed in any::<u64>()) {
        let data = toy(count, seed % 1000);
        let (out, bad) = inject_mispairs(&data, rate, seed).unwrap();
        prop_assert_eq!(bad.len(), (rate * count as f64 - 1e-9).ceil().max(0.0) as usize);
        for (i, (a, b)) in data.iter().zip(&out).enumerate() {
            prop_assert_eq!(&a.series, &b.series);
            if !bad.contains(&i) {
                prop_assert_eq!(a, b);
            } else {
                prop_assert!(data.iter().any(|p| p.caption == b.caption));
            }
        }
    }

    #[test]
    fn training_mix_adds_the_requested_share(orig in 0usize..10, generated in 0usize..40, pct in 0.0f64..=100.0) {
        let (o, g) = (toy(orig.max(1), 2)[..orig].to_vec(), toy(generated.max(1), 3)[..generated].to_vec());
        let mix = training_mix(&o, &g, pct, 4).unwrap();
        prop_assert_eq!(mix.len(), orig + (generated as f64 * pct / 100.0).round() as usize);
        prop_assert_eq!(&mix[..orig], &o[..]);
        prop_assert!((0.0..=100.0).contains(&duplicate_rate(&mix)));
    }

    #[test]
    fn fallback_summary_has_at_most_one_period(captions in prop::collection::vec(sentence().prop_filter("non-empty", |s| !s.is_empty()), 1..5), dot in any::<bool>()) {
        let captions: Vec<String> = captions.into_iter().map(|c| if dot { format!("{c}.") } else { c }).collect();
        let summary = fallback_summary(&captions).unwrap();
        prop_assert!(summary.matches('.').count() <= 1);
        for c in &captions {
            prop_assert!(summary.contains(c.trim_end_matches('.')));
        }
    }
}
