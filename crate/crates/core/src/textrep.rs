//! Phase-tagged text form of a series, the word-level vocabulary and the
//! joint-representation prompt.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::TimeSeries;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const UNK: usize = 4;

/// Id of the token "0"; "n" sits at `NUMBER_BASE + n` for n in 0..=100.
pub const NUMBER_BASE: usize = 11;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[CLS]", "[BOS]", "[EOS]", "[UNK]"];
pub const PHASE_TAGS: [&str; 6] = ["<start>", "</start>", "<middle>", "</middle>", "<end>", "</end>"];
pub const PROMPT_HEAD: &str = "Describe this time series";
pub const PROMPT_TAIL: &str = "encoded by";

/// Text of the form `<start> … </start> <middle> … </middle> <end> … </end>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedText {
    pub text: String,
}

/// Phase boundaries `(floor(l/3), floor(2l/3))`.
pub fn phase_bounds(l: usize) -> (usize, usize) {
    (l / 3, 2 * l / 3)
}

pub fn phase_tag(series: &TimeSeries) -> Result<TaggedText> {
    let l = series.len();
    if l < 3 {
        return Err(Error::param(format!("phase tagging needs at least 3 values, got {l}")));
    }
    let (a, b) = phase_bounds(l);
    let r = series.rounded();
    let run = |v: &[i64]| v.iter().map(i64::to_string).collect::<Vec<_>>().join(" ");
    let text = format!(
        "<start> {} </start> <middle> {} </middle> <end> {} </end>",
        run(&r[..a]),
        run(&r[a..b]),
        run(&r[b..])
    );
    Ok(TaggedText { text })
}

/// Recovers the three value runs from tagged text.
pub fn parse_tagged(text: &str) -> Result<[Vec<f64>; 3]> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let mut runs: [Vec<f64>; 3] = Default::default();
    let mut pos = 0;
    for (phase, run) in runs.iter_mut().enumerate() {
        let (open, close) = (PHASE_TAGS[2 * phase], PHASE_TAGS[2 * phase + 1]);
        if tokens.get(pos) != Some(&open) {
            return Err(Error::Parse(format!("expected {open} at token {pos}")));
        }
        pos += 1;
        loop {
            match tokens.get(pos) {
                Some(&t) if t == close => break,
                Some(t) => {
                    let v: f64 = t.parse().map_err(|_| Error::Parse(format!("bad value {t:?} in {open} run")))?;
                    run.push(v);
                }
                None => return Err(Error::Parse(format!("missing {close}"))),
            }
            pos += 1;
        }
        pos += 1;
    }
    if pos != tokens.len() {
        return Err(Error::Parse("trailing tokens after </end>".into()));
    }
    Ok(runs)
}

/// Word-level vocabulary with fixed special ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Tokens every vocabulary carries, in id order.
fn reserved_tokens() -> Vec<String> {
    let mut out: Vec<String> = SPECIAL_TOKENS.iter().chain(&PHASE_TAGS).map(|s| s.to_string()).collect();
    out.extend((0..=100).map(|n| n.to_string()));
    out.extend(PROMPT_HEAD.split_whitespace().chain(PROMPT_TAIL.split_whitespace()).map(str::to_string));
    out
}

/// Specials, tags, the integers 0..=100 and the prompt words, then corpus
/// words by descending frequency (ties lexicographic).
pub fn build_vocab<S: AsRef<str>>(corpus: &[S]) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::param("vocabulary corpus is empty"));
    }
    let mut tokens = reserved_tokens();
    let reserved: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for text in corpus {
        for w in text.as_ref().split_whitespace() {
            if !reserved.contains(w) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let mut rest: Vec<(&str, usize)> = counts.into_iter().collect();
    rest.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    tokens.extend(rest.into_iter().map(|(w, _)| w.to_string()));
    Ok(Vocabulary::from(tokens))
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace split; unknown words map to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| self.token(i).ok_or_else(|| Error::Tensor(tslm_tensor::TensorError::Index(format!("token id {i} outside vocabulary of {}", self.len())))))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// Checks that the reserved layout is intact (used when loading files).
    pub fn validate(&self) -> Result<()> {
        let reserved = reserved_tokens();
        if self.tokens.len() < reserved.len() || self.tokens[..reserved.len()] != reserved[..] {
            return Err(Error::Format("vocabulary does not start with the reserved tokens".into()));
        }
        if self.ids.len() != self.tokens.len() {
            return Err(Error::Format("vocabulary has duplicate tokens".into()));
        }
        Ok(())
    }
}

/// Token ids of `[CLS] Describe this time series <tagged series> encoded by`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointText {
    pub ids: Vec<usize>,
}

impl JointText {
    pub fn n(&self) -> usize {
        self.ids.len()
    }
}

pub fn assemble_joint_text(series: &TimeSeries, vocab: &Vocabulary) -> Result<JointText> {
    let tagged = phase_tag(series)?;
    let mut ids = vec![CLS];
    ids.extend(vocab.tokenize(PROMPT_HEAD));
    ids.extend(vocab.tokenize(&tagged.text));
    ids.extend(vocab.tokenize(PROMPT_TAIL));
    Ok(JointText { ids })
}
