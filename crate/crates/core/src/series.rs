//! Core data records: time series, captioned pairs and pattern labels.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_VALUE: f64 = 0.0;
pub const MAX_VALUE: f64 = 100.0;

/// A univariate series whose values lie strictly inside (0, 100).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeSeries {
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::param("time series is empty"));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::param(format!("value {v} at index {i} is not finite")));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, &v)| v <= MIN_VALUE || v >= MAX_VALUE) {
            return Err(Error::param(format!("value {v} at index {i} is outside (0, 100)")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values rounded to the integers used in the textual representation.
    pub fn rounded(&self) -> Vec<i64> {
        self.values.iter().map(|v| v.round().clamp(MIN_VALUE, MAX_VALUE) as i64).collect()
    }
}

impl TryFrom<Vec<f64>> for TimeSeries {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TimeSeries> for Vec<f64> {
    fn from(s: TimeSeries) -> Self {
        s.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Original,
    Generated,
}

/// A series with its caption. `score` is filled in by the denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionedPair {
    pub series: TimeSeries,
    pub caption: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl CaptionedPair {
    pub fn new(series: TimeSeries, caption: impl Into<String>, source: Source) -> Result<Self> {
        let caption = caption.into();
        if caption.trim().is_empty() {
            return Err(Error::param("caption is empty"));
        }
        Ok(Self { series, caption, source, score: None })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    Increase,
    Decrease,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Location {
    Beginning,
    Middle,
    End,
}

impl Location {
    /// Fractional window `[lo, hi]` of the series length holding the trend.
    pub fn window(self) -> (f64, f64) {
        match self {
            Location::Beginning => (0.0, 0.4),
            Location::Middle => (0.3, 0.7),
            Location::End => (0.6, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatternLabel {
    pub trend: Trend,
    pub location: Location,
}

impl PatternLabel {
    pub const fn new(trend: Trend, location: Location) -> Self {
        Self { trend, location }
    }

    pub fn all() -> [PatternLabel; 6] {
        use Location::*;
        use Trend::*;
        [
            Self::new(Increase, Beginning),
            Self::new(Increase, Middle),
            Self::new(Increase, End),
            Self::new(Decrease, Beginning),
            Self::new(Decrease, Middle),
            Self::new(Decrease, End),
        ]
    }
}

impl fmt::Display for PatternLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}/{:?}", self.trend, self.location)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_are_open() {
        assert!(TimeSeries::new(vec![0.0, 5.0]).is_err());
        assert!(TimeSeries::new(vec![5.0, 100.0]).is_err());
        assert!(TimeSeries::new(vec![f64::NAN]).is_err());
        assert!(TimeSeries::new(vec![0.01, 99.99]).is_ok());
    }

    #[test]
    fn pair_json_shape() {
        let p = CaptionedPair::new(TimeSeries::new(vec![1.5, 2.0]).unwrap(), "rises", Source::Original).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"series":[1.5,2.0],"caption":"rises","source":"original"}"#);
        let back: CaptionedPair = serde_json::from_str(r#"{"series":[1.5,2.0],"caption":"rises","source":"generated","score":0.5}"#).unwrap();
        assert_eq!(back.score, Some(0.5));
        assert!(serde_json::from_str::<CaptionedPair>(r#"{"series":[150.0],"caption":"x","source":"original"}"#).is_err());
    }
}
