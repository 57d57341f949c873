//! Synthetic series/caption generation, demonstration grouping, bootstrapped
//! pool growth, mispair injection and duplicate auditing.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tslm_tensor::rng::{child_rng, derive_index, derive_seed, rng_from, SeedRng};

use crate::error::{Error, Result};
use crate::series::{CaptionedPair, Location, PatternLabel, Source, TimeSeries, Trend};

pub const MIN_GEN_LEN: usize = 12;
pub const MAX_GEN_LEN: usize = 50;
pub const MAX_DEMONSTRATIONS: usize = 16;
pub const MAX_CAPTION_WORDS: usize = 9;

/// Largest total change of a trend segment; keeps every construction inside (0, 100).
const MAX_RISE: f64 = 35.0;
const MIN_SEGMENT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Steepness {
    Gentle,
    Steep,
}

impl Steepness {
    fn slope_range(self) -> (f64, f64) {
        match self {
            Steepness::Gentle => (1.5, 2.5),
            Steepness::Steep => (4.5, 6.0),
        }
    }
}

/// Bucket of the lower plateau of the series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    Mid,
    High,
}

impl Level {
    fn base_range(self) -> (f64, f64) {
        match self {
            Level::Low => (8.0, 20.0),
            Level::Mid => (25.0, 37.0),
            Level::High => (42.0, 54.0),
        }
    }
}

/// Everything a caption can state about a synthetic series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeriesFacts {
    pub pattern: PatternLabel,
    pub steepness: Steepness,
    pub level: Level,
}

impl SeriesFacts {
    pub fn random(pattern: PatternLabel, rng: &mut impl Rng) -> Self {
        let steepness = if rng.gen_bool(0.5) { Steepness::Gentle } else { Steepness::Steep };
        let level = [Level::Low, Level::Mid, Level::High][rng.gen_range(0..3)];
        Self { pattern, steepness, level }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    /// Half-width of the uniform per-point noise.
    pub noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { noise: 1.5 }
    }
}

/// A generated series together with the construction that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSeries {
    pub series: TimeSeries,
    pub facts: SeriesFacts,
    /// Inclusive index range of the trend segment.
    pub segment: (usize, usize),
    pub slope: f64,
}

/// Inclusive index window a trend at `location` may occupy for length `l`.
pub fn location_window(location: Location, l: usize) -> (usize, usize) {
    let (lo, hi) = location.window();
    let start = (lo * l as f64).floor() as usize;
    let end = ((hi * l as f64).floor() as usize).min(l - 1);
    (start, end)
}

fn check_len(l: usize) -> Result<()> {
    if !(MIN_GEN_LEN..=MAX_GEN_LEN).contains(&l) {
        return Err(Error::param(format!("series length {l} outside {MIN_GEN_LEN}..={MAX_GEN_LEN}")));
    }
    Ok(())
}

/// Flat line, one straight trend segment of at most `l/3` points inside the
/// location window, flat again, plus uniform noise; clamped inside (0, 100).
pub fn synth_series(facts: SeriesFacts, l: usize, params: SynthParams, rng: &mut impl Rng) -> Result<SynthSeries> {
    check_len(l)?;
    let (ws, we) = location_window(facts.pattern.location, l);
    let (smin, smax) = facts.steepness.slope_range();
    let slope = rng.gen_range(smin..=smax);
    let longest = (l / 3).min(we - ws + 1).min(1 + (MAX_RISE / slope).floor() as usize);
    let seg_len = rng.gen_range(MIN_SEGMENT..=longest.max(MIN_SEGMENT));
    let start = rng.gen_range(ws..=we + 1 - seg_len);
    let end = start + seg_len - 1;
    let (bmin, bmax) = facts.level.base_range();
    let base = rng.gen_range(bmin..=bmax);
    let rise = slope * (seg_len - 1) as f64;
    let (first, signed) = match facts.pattern.trend {
        Trend::Increase => (base, slope),
        Trend::Decrease => (base + rise, -slope),
    };
    let values = (0..l)
        .map(|i| {
            let steps = i.clamp(start, end) - start;
            let clean = first + signed * steps as f64;
            let noise = if params.noise > 0.0 { rng.gen_range(-params.noise..=params.noise) } else { 0.0 };
            (clean + noise).clamp(0.5, 99.5)
        })
        .collect();
    Ok(SynthSeries { series: TimeSeries::new(values)?, facts, segment: (start, end), slope: signed })
}

/// Deterministic series for `(pattern, l, seed)` with default noise.
pub fn gen_synth_series(pattern: PatternLabel, l: usize, seed: u64) -> Result<TimeSeries> {
    let mut rng = rng_from(seed);
    let facts = SeriesFacts::random(pattern, &mut rng);
    Ok(synth_series(facts, l, SynthParams::default(), &mut rng)?.series)
}

// Caption lexicon. The first entry of each list is the canonical phrasing.
const RISE_VERBS: [&str; 5] = ["increases", "rises", "goes up", "grows", "climbs"];
const FALL_VERBS: [&str; 5] = ["decreases", "falls", "goes down", "drops", "declines"];
const BEGINNING_PHRASES: [&str; 4] = ["at the beginning", "at the start", "early on", "initially"];
const MIDDLE_PHRASES: [&str; 4] = ["in the middle", "around the middle", "midway", "halfway through"];
const END_PHRASES: [&str; 4] = ["at the end", "towards the end", "near the end", "late on"];
const STEEP_ADVERBS: [&str; 2] = ["sharply", "steeply"];
const GENTLE_ADVERBS: [&str; 2] = ["slightly", "gently"];

fn verbs(trend: Trend) -> &'static [&'static str] {
    match trend {
        Trend::Increase => &RISE_VERBS,
        Trend::Decrease => &FALL_VERBS,
    }
}

fn places(location: Location) -> &'static [&'static str] {
    match location {
        Location::Beginning => &BEGINNING_PHRASES,
        Location::Middle => &MIDDLE_PHRASES,
        Location::End => &END_PHRASES,
    }
}

/// All paraphrases for a pattern, canonical first.
pub fn pattern_paraphrases(pattern: PatternLabel) -> Vec<String> {
    let mut out = Vec::new();
    for v in verbs(pattern.trend) {
        for p in places(pattern.location) {
            out.push(format!("{v} {p}"));
        }
    }
    out
}

pub fn canonical_caption(pattern: PatternLabel) -> String {
    format!("{} {}", verbs(pattern.trend)[0], places(pattern.location)[0])
}

fn caption_parts(pattern: PatternLabel, rng: &mut impl Rng) -> (&'static str, &'static str) {
    let v = verbs(pattern.trend);
    let p = places(pattern.location);
    (v[rng.gen_range(0..v.len())], p[rng.gen_range(0..p.len())])
}

/// One paraphrase of the pattern, chosen by `seed`.
pub fn caption_from_pattern(pattern: PatternLabel, seed: u64) -> String {
    let (v, p) = caption_parts(pattern, &mut rng_from(seed));
    format!("{v} {p}")
}

/// Full caption stating pattern, steepness and plateau level.
pub fn describe(facts: SeriesFacts, rng: &mut impl Rng) -> String {
    let (verb, place) = caption_parts(facts.pattern, rng);
    let adverbs = match facts.steepness {
        Steepness::Steep => &STEEP_ADVERBS,
        Steepness::Gentle => &GENTLE_ADVERBS,
    };
    let adverb = adverbs[rng.gen_range(0..adverbs.len())];
    let prep = match facts.pattern.trend {
        Trend::Increase => "from",
        Trend::Decrease => "to",
    };
    let level = match facts.level {
        Level::Low => "low",
        Level::Mid => "mid",
        Level::High => "high",
    };
    format!("{verb} {adverb} {place} {prep} {level} values")
}

/// What keyword matching can recover from a caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionFacts {
    pub pattern: PatternLabel,
    pub steepness: Option<Steepness>,
    pub level: Option<Level>,
}

/// Keyword-based reading of a caption. `None` when either the trend or the
/// location cannot be determined.
pub fn infer_facts(caption: &str) -> Option<CaptionFacts> {
    let lower = caption.to_lowercase();
    let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
    let has = |set: &[&str]| words.iter().any(|w| set.contains(w));
    let up = has(&["increase", "increases", "increasing", "rise", "rises", "rising", "grow", "grows", "growing", "climb", "climbs", "up"]);
    let down = has(&["decrease", "decreases", "decreasing", "fall", "falls", "falling", "drop", "drops", "dropping", "decline", "declines", "down"]);
    let trend = match (up, down) {
        (true, false) => Trend::Increase,
        (false, true) => Trend::Decrease,
        _ => return None,
    };
    let begin = has(&["beginning", "start", "early", "initially", "first"]);
    let middle = has(&["middle", "midway", "halfway", "center", "centre"]);
    let end = has(&["end", "late", "last", "final"]) || lower.contains("second half");
    let location = match (begin, middle, end) {
        (true, false, false) => Location::Beginning,
        (false, true, false) => Location::Middle,
        (false, false, true) => Location::End,
        _ => return None,
    };
    let steepness = if has(&["sharply", "steeply", "quickly", "rapidly"]) {
        Some(Steepness::Steep)
    } else if has(&["slightly", "gently", "gradually", "slowly"]) {
        Some(Steepness::Gentle)
    } else {
        None
    };
    let level = if has(&["low"]) {
        Some(Level::Low)
    } else if has(&["mid"]) {
        Some(Level::Mid)
    } else if has(&["high"]) {
        Some(Level::High)
    } else {
        None
    };
    Some(CaptionFacts { pattern: PatternLabel::new(trend, location), steepness, level })
}

/// `100 · (1 − levenshtein(a, b) / max(|a|, |b|))` over characters.
pub fn string_similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 100.0;
    }
    100.0 * (1.0 - strsim::levenshtein(a, b) as f64 / longest as f64)
}

/// A cluster of pool indices; the first member is the representative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoGroup {
    pub members: Vec<usize>,
}

/// Incremental greedy caption clustering.
#[derive(Debug, Clone)]
pub struct Grouper {
    threshold: f64,
    cap: usize,
    groups: Vec<DemoGroup>,
    reps: Vec<String>,
}

impl Grouper {
    pub fn new(threshold: f64) -> Self {
        Self { threshold, cap: MAX_DEMONSTRATIONS, groups: Vec::new(), reps: Vec::new() }
    }

    /// Places pool item `index` into the first non-full group whose
    /// representative is similar enough, else opens a new group.
    pub fn add(&mut self, index: usize, caption: &str) -> usize {
        for (g, rep) in self.reps.iter().enumerate() {
            if self.groups[g].members.len() < self.cap && string_similarity(rep, caption) >= self.threshold {
                self.groups[g].members.push(index);
                return g;
            }
        }
        self.groups.push(DemoGroup { members: vec![index] });
        self.reps.push(caption.to_string());
        self.groups.len() - 1
    }

    pub fn groups(&self) -> &[DemoGroup] {
        &self.groups
    }
}

pub fn group_demonstrations(pool: &[CaptionedPair], sim_threshold: f64) -> Vec<DemoGroup> {
    let mut grouper = Grouper::new(sim_threshold);
    for (i, p) in pool.iter().enumerate() {
        grouper.add(i, &p.caption);
    }
    grouper.groups
}

/// Demonstrations plus the number of pairs requested from one generator pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationQuery {
    pub demonstrations: Vec<CaptionedPair>,
    pub samples: usize,
    pub bootstrap: bool,
}

impl GenerationQuery {
    pub fn new(demonstrations: Vec<CaptionedPair>, samples: usize, bootstrap: bool) -> Result<Self> {
        if demonstrations.is_empty() || demonstrations.len() > MAX_DEMONSTRATIONS {
            return Err(Error::param(format!("{} demonstrations (allowed 1..={MAX_DEMONSTRATIONS})", demonstrations.len())));
        }
        if samples == 0 {
            return Err(Error::param("samples per query must be >= 1"));
        }
        Ok(Self { demonstrations, samples, bootstrap })
    }

    /// Content hash of the demonstrations: identical prompts share it.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0x0123_4567_89ab_cdefu64;
        for d in &self.demonstrations {
            h = derive_seed(h, &d.caption);
            for v in d.series.rounded() {
                h = derive_index(h, v as u64);
            }
        }
        derive_index(h, self.samples as u64)
    }
}

/// Produces pairs for one query (the in-context generation step).
pub trait GenerationBackend {
    fn generate(&mut self, query: &GenerationQuery, seed: u64) -> Result<Vec<CaptionedPair>>;
}

/// Offline stand-in for an LLM: reads the pattern off a demonstration
/// caption, then synthesises a fresh series and caption for it. Output is a
/// function of the prompt content and one of `variants` sampling draws, so
/// repeated prompts repeat outputs the way a low-temperature model does.
#[derive(Debug, Clone)]
pub struct TemplateBackend {
    pub params: SynthParams,
    pub len_range: (usize, usize),
    pub variants: u64,
}

impl Default for TemplateBackend {
    fn default() -> Self {
        Self { params: SynthParams::default(), len_range: (MIN_GEN_LEN, MAX_GEN_LEN), variants: 8 }
    }
}

impl GenerationBackend for TemplateBackend {
    fn generate(&mut self, query: &GenerationQuery, seed: u64) -> Result<Vec<CaptionedPair>> {
        let fp = query.fingerprint();
        let mut draw = rng_from(seed);
        (0..query.samples)
            .map(|s| {
                let variant = draw.gen_range(0..self.variants.max(1));
                let mut rng = rng_from(derive_index(derive_index(fp, s as u64), variant));
                let demo = &query.demonstrations[rng.gen_range(0..query.demonstrations.len())];
                let facts = match infer_facts(&demo.caption) {
                    Some(cf) => {
                        let mut f = SeriesFacts::random(cf.pattern, &mut rng);
                        f.steepness = cf.steepness.unwrap_or(f.steepness);
                        f.level = cf.level.unwrap_or(f.level);
                        f
                    }
                    None => SeriesFacts::random(PatternLabel::all()[rng.gen_range(0..6)], &mut rng),
                };
                let l = rng.gen_range(self.len_range.0..=self.len_range.1);
                let synth = synth_series(facts, l, self.params, &mut rng)?;
                CaptionedPair::new(synth.series, describe(facts, &mut rng), Source::Generated)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    pub samples_per_query: usize,
    pub bootstrap: bool,
    pub group_threshold: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { samples_per_query: 3, bootstrap: true, group_threshold: 60.0 }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub pairs: Vec<CaptionedPair>,
    pub queries: usize,
}

fn valid_generated(p: &CaptionedPair) -> bool {
    (MIN_GEN_LEN..=MAX_GEN_LEN).contains(&p.series.len())
        && !p.caption.trim().is_empty()
        && p.caption.split_whitespace().count() <= MAX_CAPTION_WORDS
}

/// Grows `target_count` generated pairs from `seed_pool`, one demonstration
/// group per query. With bootstrapping every accepted pair joins the pool
/// (and its grouping) before the next query.
pub fn generate_dataset(
    seed_pool: &[CaptionedPair],
    target_count: usize,
    cfg: &GenerationConfig,
    backend: &mut dyn GenerationBackend,
    seed: u64,
) -> Result<GenerationOutcome> {
    if seed_pool.is_empty() {
        return Err(Error::param("seed pool is empty"));
    }
    if target_count == 0 {
        return Err(Error::param("target count must be > 0"));
    }
    let s = cfg.samples_per_query.max(1);
    let mut pool = seed_pool.to_vec();
    let mut grouper = Grouper::new(cfg.group_threshold);
    for (i, p) in pool.iter().enumerate() {
        grouper.add(i, &p.caption);
    }
    let mut pick = child_rng(seed, "group-pick");
    let mut out = Vec::with_capacity(target_count);
    let max_queries = 10 * target_count.div_ceil(s) + 10;
    let mut queries = 0;
    while out.len() < target_count {
        if queries >= max_queries {
            return Err(Error::Generation { query: queries, message: "backend keeps returning too few valid pairs".into() });
        }
        let groups = grouper.groups();
        let group = &groups[pick.gen_range(0..groups.len())];
        let demos = group.members.iter().map(|&i| pool[i].clone()).collect();
        let query = GenerationQuery::new(demos, s.min(target_count - out.len()), cfg.bootstrap)?;
        let generated = backend
            .generate(&query, derive_index(seed, queries as u64))
            .map_err(|e| match e {
                Error::Transport(_) | Error::Protocol(_) => e,
                e => Error::Generation { query: queries, message: e.to_string() },
            })?;
        queries += 1;
        for mut p in generated.into_iter().filter(valid_generated).take(target_count - out.len()) {
            p.source = Source::Generated;
            p.score = None;
            if cfg.bootstrap {
                grouper.add(pool.len(), &p.caption);
                pool.push(p.clone());
            }
            out.push(p);
        }
    }
    Ok(GenerationOutcome { pairs: out, queries })
}

/// Replaces the caption of `ceil(rate·N)` random pairs with the caption of a
/// pair whose pattern differs. Returns the modified data and those indices.
pub fn inject_mispairs(data: &[CaptionedPair], rate: f64, seed: u64) -> Result<(Vec<CaptionedPair>, BTreeSet<usize>)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::param(format!("mispair rate {rate} outside [0, 1]")));
    }
    let count = (rate * data.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    if count == 0 {
        return Ok((data.to_vec(), BTreeSet::new()));
    }
    let patterns: Vec<Option<PatternLabel>> = data.iter().map(|p| infer_facts(&p.caption).map(|f| f.pattern)).collect();
    let distinct: HashSet<PatternLabel> = patterns.iter().flatten().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Injection("need pairs of at least two patterns to mispair".into()));
    }
    let mut rng = rng_from(seed);
    let mut candidates: Vec<usize> = (0..data.len()).filter(|&i| patterns[i].is_some()).collect();
    if candidates.len() < count {
        return Err(Error::Injection(format!("only {} pairs have a recognisable pattern, {count} requested", candidates.len())));
    }
    candidates.shuffle(&mut rng);
    let chosen: BTreeSet<usize> = candidates.into_iter().take(count).collect();
    let mut out = data.to_vec();
    for &i in &chosen {
        let own = patterns[i];
        let donors: Vec<usize> = (0..data.len()).filter(|&j| patterns[j].is_some() && patterns[j] != own).collect();
        let j = donors[rng.gen_range(0..donors.len())];
        out[i].caption = data[j].caption.clone();
        out[i].score = None;
    }
    Ok((out, chosen))
}

/// Percentage of pairs that repeat an earlier (rounded series, caption).
pub fn duplicate_rate(data: &[CaptionedPair]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let distinct: HashSet<(Vec<i64>, &str)> = data.iter().map(|p| (p.series.rounded(), p.caption.as_str())).collect();
    100.0 * (data.len() - distinct.len()) as f64 / data.len() as f64
}

/// A clean captioned set: `count` pairs cycling through the six patterns.
pub fn toy_pairs(count: usize, len_range: (usize, usize), source: Source, seed: u64) -> Result<Vec<(CaptionedPair, SeriesFacts)>> {
    let patterns = PatternLabel::all();
    (0..count)
        .map(|i| {
            let mut rng: SeedRng = rng_from(derive_index(seed, i as u64));
            let facts = SeriesFacts::random(patterns[i % patterns.len()], &mut rng);
            let l = rng.gen_range(len_range.0..=len_range.1);
            let synth = synth_series(facts, l, SynthParams::default(), &mut rng)?;
            Ok((CaptionedPair::new(synth.series, describe(facts, &mut rng), source)?, facts))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const INC_MID: PatternLabel = PatternLabel::new(Trend::Increase, Location::Middle);

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn middle_increase_segment_sits_in_window() {
        for seed in 0..200 {
            let mut rng = rng_from(seed);
            let facts = SeriesFacts::random(INC_MID, &mut rng);
            let s = synth_series(facts, 24, SynthParams::default(), &mut rng).unwrap();
            let (a, b) = s.segment;
            assert!(a >= 7 && b <= 16, "segment {a}..{b}");
            assert!(b - a + 1 <= 24 / 3);
            assert!(s.slope > 0.0);
            let v = s.series.values();
            let before = mean(&v[a.saturating_sub(2)..=a]);
            let after = mean(&v[b..(b + 3).min(24)]);
            assert!(after > before);
        }
    }

    #[test]
    fn zero_noise_flats_are_constant() {
        let mut rng = rng_from(3);
        let facts = SeriesFacts::random(PatternLabel::new(Trend::Decrease, Location::End), &mut rng);
        let s = synth_series(facts, 30, SynthParams { noise: 0.0 }, &mut rng).unwrap();
        let v = s.series.values();
        let (a, b) = s.segment;
        assert!(v[..=a].iter().all(|&x| x == v[0]));
        assert!(v[b..].iter().all(|&x| x == v[b]));
    }

    #[test]
    fn generated_values_always_in_bounds() {
        for i in 0..1000u64 {
            let p = PatternLabel::all()[(i % 6) as usize];
            let l = MIN_GEN_LEN + (i as usize % (MAX_GEN_LEN - MIN_GEN_LEN + 1));
            let s = gen_synth_series(p, l, i).unwrap();
            assert_eq!(s.len(), l);
            assert!(s.values().iter().all(|&v| v > 0.0 && v < 100.0));
        }
        assert_eq!(gen_synth_series(INC_MID, 20, 9).unwrap(), gen_synth_series(INC_MID, 20, 9).unwrap());
        assert!(gen_synth_series(INC_MID, 11, 0).is_err());
        assert!(gen_synth_series(INC_MID, 51, 0).is_err());
    }

    #[test]
    fn captions_from_patterns() {
        assert_eq!(canonical_caption(INC_MID), "increases in the middle");
        assert!(pattern_paraphrases(INC_MID).contains(&"rises around the middle".to_string()));
        assert_eq!(caption_from_pattern(INC_MID, 5), caption_from_pattern(INC_MID, 5));
        for p in PatternLabel::all() {
            assert!(pattern_paraphrases(p).len() >= 5);
            let distinct: HashSet<String> = (0..100).map(|s| caption_from_pattern(p, s)).collect();
            assert!(distinct.len() >= 3);
            for c in &distinct {
                assert!(c.split_whitespace().count() <= MAX_CAPTION_WORDS);
                assert_eq!(infer_facts(c).unwrap().pattern, p, "{c}");
            }
        }
    }

    #[test]
    fn full_descriptions_round_trip_through_inference() {
        let mut rng = rng_from(11);
        for _ in 0..300 {
            let p = PatternLabel::all()[rng.gen_range(0..6)];
            let facts = SeriesFacts::random(p, &mut rng);
            let c = describe(facts, &mut rng);
            assert!(c.split_whitespace().count() <= MAX_CAPTION_WORDS, "{c}");
            let got = infer_facts(&c).unwrap();
            assert_eq!((got.pattern, got.steepness, got.level), (p, Some(facts.steepness), Some(facts.level)), "{c}");
        }
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(string_similarity("abc", "abc"), 100.0);
        assert!((string_similarity("abc", "abd") - 66.6667).abs() < 0.01);
        assert_eq!(string_similarity("abc", "xyz"), 0.0);
        assert_eq!(string_similarity("", ""), 100.0);
        assert_eq!(string_similarity("kitten", "sitting"), string_similarity("sitting", "kitten"));
    }

    fn pair(caption: &str) -> CaptionedPair {
        CaptionedPair::new(TimeSeries::new(vec![10.0; 12]).unwrap(), caption, Source::Original).unwrap()
    }

    #[test]
    fn grouping_rules() {
        let same: Vec<_> = (0..5).map(|_| pair("increases in the middle")).collect();
        assert_eq!(group_demonstrations(&same, 60.0).len(), 1);

        let different = [pair("aaaa"), pair("bbbb"), pair("cccc")];
        let g = group_demonstrations(&different, 60.0);
        assert_eq!(g.len(), 3);
        assert!(g.iter().all(|g| g.members.len() == 1));

        let twenty: Vec<_> = (0..20).map(|_| pair("falls at the end")).collect();
        let g = group_demonstrations(&twenty, 60.0);
        assert_eq!(g.iter().map(|g| g.members.len()).collect::<Vec<_>>(), vec![16, 4]);
    }

    #[test]
    fn grouping_members_match_representative() {
        let mut rng = rng_from(2);
        let pool: Vec<_> = (0..80).map(|i| pair(&caption_from_pattern(PatternLabel::all()[i % 6], rng.gen()))).collect();
        for g in group_demonstrations(&pool, 60.0) {
            let rep = &pool[g.members[0]].caption;
            assert!(g.members.len() <= MAX_DEMONSTRATIONS);
            for &m in &g.members {
                assert!(string_similarity(rep, &pool[m].caption) >= 60.0);
            }
        }
    }

    fn seed_pool() -> Vec<CaptionedPair> {
        toy_pairs(24, (12, 24), Source::Original, 1).unwrap().into_iter().map(|(p, _)| p).collect()
    }

    #[test]
    fn nine_pairs_take_three_queries() {
        let out = generate_dataset(&seed_pool(), 9, &GenerationConfig::default(), &mut TemplateBackend::default(), 4).unwrap();
        assert_eq!(out.queries, 3);
        assert_eq!(out.pairs.len(), 9);
        assert!(out.pairs.iter().all(|p| p.source == Source::Generated && valid_generated(p)));
    }

    #[test]
    fn bootstrap_reduces_duplicates() {
        let pool = seed_pool();
        let run = |bootstrap| {
            let cfg = GenerationConfig { bootstrap, ..Default::default() };
            generate_dataset(&pool, 300, &cfg, &mut TemplateBackend::default(), 8).unwrap().pairs
        };
        let (with, without) = (duplicate_rate(&run(true)), duplicate_rate(&run(false)));
        assert!(with < without, "bootstrap {with} vs plain {without}");
    }

    struct Failing(fn() -> Error);
    impl GenerationBackend for Failing {
        fn generate(&mut self, _: &GenerationQuery, _: u64) -> Result<Vec<CaptionedPair>> {
            Err(self.0())
        }
    }

    #[test]
    fn backend_failure_names_query() {
        let run = |f| generate_dataset(&seed_pool(), 3, &GenerationConfig::default(), &mut Failing(f), 0).unwrap_err();
        assert!(matches!(run(|| Error::Parse("junk".into())), Error::Generation { query: 0, .. }));
        assert!(matches!(run(|| Error::Transport("down".into())), Error::Transport(_)));
    }

    #[test]
    fn mispair_injection() {
        let data: Vec<_> = toy_pairs(100, (12, 20), Source::Generated, 5).unwrap().into_iter().map(|(p, _)| p).collect();
        let (same, none) = inject_mispairs(&data, 0.0, 1).unwrap();
        assert_eq!(same, data);
        assert!(none.is_empty());

        let (noisy, idx) = inject_mispairs(&data, 0.1, 1).unwrap();
        assert_eq!(idx.len(), 10);
        for i in 0..data.len() {
            if idx.contains(&i) {
                let truth = infer_facts(&data[i].caption).unwrap().pattern;
                let now = infer_facts(&noisy[i].caption).unwrap().pattern;
                assert_ne!(truth, now);
                assert_eq!(noisy[i].series, data[i].series);
            } else {
                assert_eq!(noisy[i], data[i]);
            }
        }
        let mono: Vec<_> = (0..5).map(|_| pair("increases in the middle")).collect();
        assert!(matches!(inject_mispairs(&mono, 0.5, 0), Err(Error::Injection(_))));
    }

    #[test]
    fn duplicate_rate_examples() {
        let mut data: Vec<_> = toy_pairs(8, (12, 20), Source::Generated, 9).unwrap().into_iter().map(|(p, _)| p).collect();
        assert_eq!(duplicate_rate(&data), 0.0);
        data.push(data[0].clone());
        data.push(data[3].clone());
        assert_eq!(duplicate_rate(&data), 20.0);
        let mut rev = data.clone();
        rev.reverse();
        assert_eq!(duplicate_rate(&rev), 20.0);
        assert_eq!(duplicate_rate(&[]), 0.0);
    }
}
