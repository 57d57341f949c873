//! Pipeline configuration and the JSONL pair format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::AeConfig;
use crate::decoder::{SamplingConfig, TslmConfig};
use crate::encoder::{EncoderConfig, Modality};
use crate::error::{Error, Result};
use crate::nn::TrainConfig;
use crate::series::{CaptionedPair, TimeSeries};
use crate::textrep::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSettings {
    pub count: usize,
    pub samples_per_query: usize,
    pub bootstrap: bool,
    pub group_threshold: f64,
    pub len_range: (usize, usize),
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self { count: 1000, samples_per_query: 3, bootstrap: true, group_threshold: 60.0, len_range: (12, 50) }
    }
}

/// Every hyperparameter of the pipeline. Missing JSON fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub autoencoder: AeConfig,
    /// Compressed series length; must equal `l_max / 4`.
    pub f: usize,
    pub encoder: EncoderConfig,
    pub decoder_layers: usize,
    pub max_caption_len: usize,
    pub vocabulary: Option<PathBuf>,
    pub ae_train: TrainConfig,
    pub denoiser_train: TrainConfig,
    pub tslm_train: TrainConfig,
    pub sampling: SamplingConfig,
    pub threshold: f64,
    pub generation: GenerationSettings,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let train = |epochs, batch| TrainConfig { epochs, batch, lr: 1e-4, warmup_ratio: 0.1, weight_decay: 0.01, seed: 0, jitter: 0 };
        Self {
            autoencoder: AeConfig::default(),
            f: 6,
            encoder: EncoderConfig::default(),
            decoder_layers: 2,
            max_caption_len: 16,
            vocabulary: None,
            ae_train: train(500, 32),
            denoiser_train: train(10, 8),
            tslm_train: train(10, 8),
            sampling: SamplingConfig::default(),
            threshold: 0.0,
            generation: GenerationSettings::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.autoencoder.validate()?;
        let e = &self.encoder;
        if e.heads == 0 || e.d % e.heads != 0 {
            return Err(Error::param(format!("d={} is not divisible by H={}", e.d, e.heads)));
        }
        if self.f != self.autoencoder.l_max / 4 {
            return Err(Error::param(format!("f={} must equal l_max/4={}", self.f, self.autoencoder.l_max / 4)));
        }
        if e.d != self.autoencoder.d {
            return Err(Error::param(format!("encoder d={} differs from autoencoder d={}", e.d, self.autoencoder.d)));
        }
        if self.decoder_layers == 0 || self.max_caption_len < 2 {
            return Err(Error::param("decoder needs at least one layer and max_caption_len >= 2"));
        }
        if !self.threshold.is_finite() {
            return Err(Error::param("threshold must be finite"));
        }
        let g = &self.generation;
        if g.len_range.0 < 3 || g.len_range.0 > g.len_range.1 {
            return Err(Error::param(format!("bad generation length range {:?}", g.len_range)));
        }
        for t in [&self.ae_train, &self.denoiser_train, &self.tslm_train] {
            if t.epochs == 0 || t.batch == 0 || !(t.lr > 0.0) {
                return Err(Error::param("epochs, batch and lr must be positive"));
            }
        }
        self.sampling.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn tslm(&self, modality: Modality) -> TslmConfig {
        TslmConfig { encoder: self.encoder, layers: self.decoder_layers, max_len: self.max_caption_len, modality }
    }

    /// Copy whose stage seeds all derive from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.ae_train.seed = seed;
        c.denoiser_train.seed = seed;
        c.tslm_train.seed = seed;
        c.sampling.seed = seed;
        c
    }
}

/// One token per line, reserved tokens first.
pub fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path)?;
    let v = Vocabulary::from(text.lines().map(str::to_string).filter(|l| !l.is_empty()).collect::<Vec<_>>());
    v.validate()?;
    Ok(v)
}

pub fn write_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in vocab.tokens() {
        writeln!(w, "{t}")?;
    }
    Ok(w.flush()?)
}

fn parse_pair(line: &str) -> std::result::Result<CaptionedPair, String> {
    let raw: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let values = raw.get("series").and_then(|v| v.as_array()).ok_or("missing \"series\" array")?;
    let values = values.iter().map(|v| v.as_f64().ok_or_else(|| format!("series entry {v} is not a number"))).collect::<std::result::Result<Vec<_>, _>>()?;
    let series = TimeSeries::new(values).map_err(|e| e.to_string())?;
    let caption = raw.get("caption").and_then(|v| v.as_str()).ok_or("missing \"caption\" string")?;
    let source = serde_json::from_value(raw.get("source").cloned().ok_or("missing \"source\"")?).map_err(|e| format!("source: {e}"))?;
    let mut pair = CaptionedPair::new(series, caption, source).map_err(|e| e.to_string())?;
    match raw.get("score") {
        None | Some(serde_json::Value::Null) => {}
        Some(s) => {
            let s = s.as_f64().filter(|s| s.is_finite()).ok_or("score is not a finite number")?;
            pair.score = Some(s);
        }
    }
    Ok(pair)
}

/// One pair per line; blank lines are skipped. Errors name the 1-based line.
pub fn read_pairs(path: &Path) -> Result<Vec<CaptionedPair>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_pair(&line).map_err(|message| Error::Data { line: i + 1, message: format!("{}: {message}", path.display()) })?);
    }
    Ok(out)
}

pub fn read_pairs_many(paths: &[PathBuf]) -> Result<Vec<CaptionedPair>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_pairs(p)?);
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[CaptionedPair]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(w.flush()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::Source;
    use crate::textrep::build_vocab;

    #[test]
    fn default_config_is_valid() {
        PipelineConfig::default().validate().unwrap();
        let mut c = PipelineConfig::default();
        c.encoder.heads = 3;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.f = 5;
        assert!(c.validate().is_err());
        let c: PipelineConfig = serde_json::from_str(r#"{"threshold": 1.5}"#).unwrap();
        assert_eq!(c.threshold, 1.5);
        assert_eq!(c.sampling.top_k, 50);
    }

    #[test]
    fn pairs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let mut a = CaptionedPair::new(TimeSeries::new(vec![1.5, 2.0, 99.0]).unwrap(), "rises", Source::Original).unwrap();
        let b = a.clone();
        a.score = Some(-0.25);
        write_pairs(&path, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_pairs(&path).unwrap(), vec![a, b]);
    }

    #[test]
    fn bad_lines_name_their_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let good = r#"{"series":[10,20,30],"caption":"rises","source":"original"}"#;
        for bad in [
            r#"{"series":[10,NaN,30],"caption":"x","source":"original"}"#,
            r#"{"series":[10,120,30],"caption":"x","source":"original"}"#,
            r#"{"series":[10,20,30],"caption":"","source":"original"}"#,
            r#"{"series":[10,20,30],"caption":"x","source":"other"}"#,
            r#"{"series":[10,20,30],"caption":"x","source":"generated","score":"high"}"#,
            r#"{"caption":"x","source":"original"}"#,
            "not json",
        ] {
            std::fs::write(&path, format!("{good}\n\n{bad}\n")).unwrap();
            match read_pairs(&path) {
                Err(Error::Data { line, .. }) => assert_eq!(line, 3, "{bad}"),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab(&["rises sharply", "falls"]).unwrap();
        write_vocabulary(&path, &v).unwrap();
        assert_eq!(read_vocabulary(&path).unwrap(), v);
        std::fs::write(&path, "a\nb\n").unwrap();
        assert!(read_vocabulary(&path).is_err());
    }
}
