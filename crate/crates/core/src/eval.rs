//! ROUGE metrics, the learned similarity score and sweep harnesses.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tslm_tensor::rng::child_rng;

use crate::autoencoder::Autoencoder;
use crate::datagen::{describe, toy_pairs};
use crate::decoder::{generate_captions, SamplingConfig, Tslm};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::series::{CaptionedPair, Source, TimeSeries};

/// Generated-data percentages of the fraction sweep.
pub const FRACTIONS: [f64; 5] = [0.0, 25.0, 50.0, 75.0, 100.0];
/// Temperatures of the temperature sweep.
pub const TEMPERATURES: [f64; 5] = [0.5, 0.75, 0.95, 1.0, 1.25];

/// Precision, recall and F-measure as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f: f64,
}

impl Prf {
    fn from_overlap(overlap: usize, cand: usize, refs: usize) -> Self {
        if overlap == 0 || cand == 0 || refs == 0 {
            return Self::default();
        }
        let p = overlap as f64 / cand as f64;
        let r = overlap as f64 / refs as f64;
        Self { p, r, f: 2.0 * p * r / (p + r) }
    }
}

/// Lower-cased whitespace tokens with surrounding punctuation removed.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram overlap.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<Prf> {
    if n == 0 {
        return Err(Error::param("rouge n must be at least 1"));
    }
    let (c, r) = (rouge_tokens(candidate), rouge_tokens(reference));
    let (cc, rc) = (ngram_counts(&c, n), ngram_counts(&r, n));
    let overlap = cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum();
    Ok(Prf::from_overlap(overlap, cc.values().sum(), rc.values().sum()))
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Longest-common-subsequence overlap.
pub fn rouge_l(candidate: &str, reference: &str) -> Prf {
    let (c, r) = (rouge_tokens(candidate), rouge_tokens(reference));
    Prf::from_overlap(lcs(&c, &r), c.len(), r.len())
}

/// Similarity under the retrieval model.
pub fn tslm_score(denoiser: &Denoiser, series: &TimeSeries, caption: &str) -> Result<f64> {
    denoiser.similarity(series, caption)
}

/// A test series with every reference caption written for it.
#[derive(Debug, Clone, PartialEq)]
pub struct TestItem {
    pub series: TimeSeries,
    pub references: Vec<String>,
}

/// Groups pairs sharing identical series values, first-seen order.
pub fn group_references(pairs: &[CaptionedPair]) -> Vec<TestItem> {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut items: Vec<TestItem> = Vec::new();
    for p in pairs {
        let key: Vec<u64> = p.series.values().iter().map(|v| v.to_bits()).collect();
        match index.get(&key) {
            Some(&i) => items[i].references.push(p.caption.clone()),
            None => {
                index.insert(key, items.len());
                items.push(TestItem { series: p.series.clone(), references: vec![p.caption.clone()] });
            }
        }
    }
    items
}

/// Held-out toy series, each with `references` independently worded
/// captions of the same facts.
pub fn toy_test_items(count: usize, len_range: (usize, usize), references: usize, seed: u64) -> Result<Vec<TestItem>> {
    if references == 0 {
        return Err(Error::param("need at least one reference per series"));
    }
    let pairs = toy_pairs(count, len_range, Source::Original, seed)?;
    Ok(pairs
        .into_iter()
        .enumerate()
        .map(|(i, (p, facts))| {
            let item_seed = tslm_tensor::rng::derive_index(seed, i as u64);
            let mut refs = vec![p.caption];
            refs.extend((1..references).map(|r| describe(facts, &mut child_rng(item_seed, &format!("reference-{r}")))));
            TestItem { series: p.series, references: refs }
        })
        .collect())
}

/// Best F over every candidate against every reference.
pub fn best_f(candidates: &[String], references: &[String], metric: impl Fn(&str, &str) -> f64) -> f64 {
    candidates
        .iter()
        .flat_map(|c| references.iter().map(move |r| (c, r)))
        .map(|(c, r)| metric(c, r))
        .fold(0.0, f64::max)
}

/// One row of a metrics report; ROUGE values are F×100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub axis_value: Option<f64>,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub tslm_score: Option<f64>,
    pub series: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub axis: Option<String>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["dataset", "axis", "value", "r1", "r2", "rl", "tslm_score", "series"]).map_err(csv_err)?;
        for row in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                self.dataset.clone(),
                self.axis.clone().unwrap_or_default(),
                opt(row.axis_value),
                row.r1.to_string(),
                row.r2.to_string(),
                row.rl.to_string(),
                opt(row.tslm_score),
                row.series.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes `path` as JSON and a sibling `.csv`.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        std::fs::write(path.with_extension("csv"), self.to_csv()?)?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Generates `K` captions per series and averages the per-series best
/// ROUGE F over captions × references.
pub fn evaluate_run(model: &Tslm, ae: &Autoencoder, test: &[TestItem], cfg: &SamplingConfig, denoiser: Option<&Denoiser>) -> Result<MetricsRow> {
    if test.is_empty() {
        return Err(Error::param("test set is empty"));
    }
    let (mut r1, mut r2, mut rl) = (0.0, 0.0, 0.0);
    let (mut score_sum, mut scored) = (0.0, 0usize);
    for (i, item) in test.iter().enumerate() {
        let input = model.prepare(&item.series, ae)?;
        let item_cfg = SamplingConfig { seed: tslm_tensor::rng::derive_index(cfg.seed, i as u64), ..*cfg };
        let caps = generate_captions(model, &input, &item_cfg)?;
        r1 += best_f(&caps, &item.references, |c, r| rouge_n(c, r, 1).map(|x| x.f).unwrap_or(0.0));
        r2 += best_f(&caps, &item.references, |c, r| rouge_n(c, r, 2).map(|x| x.f).unwrap_or(0.0));
        rl += best_f(&caps, &item.references, |c, r| rouge_l(c, r).f);
        if let Some(d) = denoiser {
            for c in caps.iter().filter(|c| !c.trim().is_empty()) {
                score_sum += tslm_score(d, &item.series, c)?;
                scored += 1;
            }
        }
    }
    let n = test.len() as f64;
    Ok(MetricsRow {
        axis_value: None,
        r1: 100.0 * r1 / n,
        r2: 100.0 * r2 / n,
        rl: 100.0 * rl / n,
        tslm_score: (scored > 0).then(|| score_sum / scored as f64),
        series: test.len(),
    })
}

/// Re-evaluates one model at each temperature.
pub fn temperature_sweep(model: &Tslm, ae: &Autoencoder, test: &[TestItem], cfg: &SamplingConfig, temperatures: &[f64], denoiser: Option<&Denoiser>) -> Result<Vec<MetricsRow>> {
    temperatures
        .iter()
        .map(|&t| {
            let mut row = evaluate_run(model, ae, test, &SamplingConfig { temperature: t, ..*cfg }, denoiser)?;
            row.axis_value = Some(t);
            Ok(row)
        })
        .collect()
}

/// Original pairs plus `percent`% of the generated pairs, picked by a
/// seeded shuffle. Larger percentages extend smaller ones.
pub fn training_mix(original: &[CaptionedPair], generated: &[CaptionedPair], percent: f64, seed: u64) -> Result<Vec<CaptionedPair>> {
    if !(0.0..=100.0).contains(&percent) {
        return Err(Error::param(format!("percentage {percent} outside [0, 100]")));
    }
    let mut order: Vec<usize> = (0..generated.len()).collect();
    order.shuffle(&mut child_rng(seed, "fraction"));
    let take = (generated.len() as f64 * percent / 100.0).round() as usize;
    let mut out = original.to_vec();
    out.extend(order[..take].iter().map(|&i| generated[i].clone()));
    Ok(out)
}

/// Retrains via `train` at each percentage and evaluates the result.
pub fn fraction_sweep<F>(ae: &Autoencoder, test: &[TestItem], cfg: &SamplingConfig, fractions: &[f64], denoiser: Option<&Denoiser>, mut train: F) -> Result<Vec<MetricsRow>>
where
    F: FnMut(f64) -> Result<Tslm>,
{
    fractions
        .iter()
        .map(|&pct| {
            let model = train(pct)?;
            let mut row = evaluate_run(&model, ae, test, cfg, denoiser)?;
            row.axis_value = Some(pct);
            Ok(row)
        })
        .collect()
}

/// Average of several rows' metrics, keyed by axis value.
pub fn mean_rows(rows: &[MetricsRow]) -> BTreeMap<String, f64> {
    let n = rows.len().max(1) as f64;
    BTreeMap::from([
        ("r1".to_string(), rows.iter().map(|r| r.r1).sum::<f64>() / n),
        ("r2".to_string(), rows.iter().map(|r| r.r2).sum::<f64>() / n),
        ("rl".to_string(), rows.iter().map(|r| r.rl).sum::<f64>() / n),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::Source;

    #[test]
    fn rouge_examples() {
        let b = rouge_n("the price increases sharply", "the price increases quickly", 2).unwrap();
        assert_eq!((b.p, b.r), (2.0 / 3.0, 2.0 / 3.0));
        assert!((b.f - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge_n("a b c", "a b c", 1).unwrap().f, 1.0);
        assert_eq!(rouge_n("a b", "c d", 1).unwrap().f, 0.0);
        assert_eq!(rouge_n("a b", "", 1).unwrap(), Prf::default());
        assert!(rouge_n("a", "a", 0).is_err());

        assert_eq!(rouge_l("a b c d", "a c b d").f, 0.75);
        assert_eq!(rouge_l("x y z", "x y z").f, 1.0);
        let rev = rouge_l("a b c d", "d c b a");
        assert_eq!(rev.p, 0.25);
        assert_eq!(rouge_l("", "").f, 0.0);
    }

    #[test]
    fn clipping_and_case() {
        let r = rouge_n("the the the", "The cat", 1).unwrap();
        assert!((r.p - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.r, 0.5);
        assert_eq!(rouge_l("Rises at the end.", "rises at the end").f, 1.0);
    }

    #[test]
    fn best_f_is_reference_order_invariant() {
        let cands = vec!["rises at the end".to_string()];
        let a = vec!["falls early".to_string(), "rises near the end".to_string()];
        let b: Vec<String> = a.iter().rev().cloned().collect();
        let m = |c: &str, r: &str| rouge_l(c, r).f;
        assert_eq!(best_f(&cands, &a, m), best_f(&cands, &b, m));
    }

    #[test]
    fn grouping_and_mixing() {
        let s = TimeSeries::new(vec![10.0, 20.0, 30.0]).unwrap();
        let t = TimeSeries::new(vec![30.0, 20.0, 10.0]).unwrap();
        let p = |s: &TimeSeries, c: &str| CaptionedPair::new(s.clone(), c.to_string(), Source::Original).unwrap();
        let items = group_references(&[p(&s, "a"), p(&t, "b"), p(&s, "c")]);
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].references, vec!["a", "c"]);

        let orig = vec![p(&s, "o")];
        let generated: Vec<_> = (0..8).map(|i| p(&t, &format!("g{i}"))).collect();
        let half = training_mix(&orig, &generated, 50.0, 1).unwrap();
        let full = training_mix(&orig, &generated, 100.0, 1).unwrap();
        assert_eq!((half.len(), full.len()), (5, 9));
        assert_eq!(&full[..5], &half[..]);
        assert_eq!(training_mix(&orig, &generated, 0.0, 1).unwrap().len(), 1);
    }

    #[test]
    fn csv_has_one_row_per_point() {
        let row = |v| MetricsRow { axis_value: Some(v), r1: 1.0, r2: 2.0, rl: 3.0, tslm_score: None, series: 4 };
        let rep = MetricsReport { dataset: "toy".into(), axis: Some("fraction".into()), rows: FRACTIONS.iter().map(|&v| row(v)).collect() };
        let csv = rep.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().nth(3).unwrap().starts_with("toy,fraction,50,"));
    }
}
