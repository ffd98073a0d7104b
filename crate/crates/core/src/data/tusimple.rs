//! TuSimple JSON-lines annotations.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Marker for "no lane point at this row".
pub const ABSENT: f64 = -2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipAnnotation {
    pub lanes: Vec<Vec<f64>>,
    pub h_samples: Vec<f64>,
    pub raw_file: String,
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    lanes: &'a [Vec<f64>],
    h_samples: &'a [f64],
    raw_file: &'a str,
    run_time: f64,
}

pub fn is_present(x: f64) -> bool {
    x >= 0.0
}

impl ClipAnnotation {
    pub fn new(raw_file: impl Into<String>, h_samples: Vec<f64>, lanes: Vec<Vec<f64>>) -> Self {
        Self {
            lanes,
            h_samples,
            raw_file: raw_file.into(),
        }
    }

    /// Checks the structural invariants. `frame_width`, when known, bounds x.
    pub fn validate(&self, frame_width: Option<f64>) -> std::result::Result<(), String> {
        if self.h_samples.windows(2).any(|w| !(w[1] > w[0])) {
            return Err("h_samples must be strictly increasing".into());
        }
        if self.h_samples.iter().any(|y| !y.is_finite()) {
            return Err("h_samples must be finite".into());
        }
        for (i, lane) in self.lanes.iter().enumerate() {
            if lane.len() != self.h_samples.len() {
                return Err(format!(
                    "lane {i} has {} entries but h_samples has {}",
                    lane.len(),
                    self.h_samples.len()
                ));
            }
            for &x in lane {
                let ok = x == ABSENT || (x >= 0.0 && frame_width.is_none_or(|w| x < w));
                if !ok || !x.is_finite() {
                    return Err(format!("lane {i} has x value {x} outside the frame"));
                }
            }
        }
        Ok(())
    }

    /// Present `(x, y)` points of one lane, ordered by y.
    pub fn lane_points(&self, lane: usize) -> Vec<(f64, f64)> {
        self.lanes[lane]
            .iter()
            .zip(&self.h_samples)
            .filter(|(x, _)| is_present(**x))
            .map(|(&x, &y)| (x, y))
            .collect()
    }

    pub fn present_count(&self) -> usize {
        self.lanes.iter().flatten().filter(|&&x| is_present(x)).count()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("annotation serializes")
    }

    /// Prediction record with the extra `run_time` key (milliseconds).
    pub fn to_prediction_line(&self, run_time: f64) -> String {
        serde_json::to_string(&PredictionLine {
            lanes: &self.lanes,
            h_samples: &self.h_samples,
            raw_file: &self.raw_file,
            run_time,
        })
        .expect("prediction serializes")
    }
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, key: &'static str, line: usize) -> Result<&'a Value> {
    obj.get(key).ok_or(Error::Parse {
        line,
        field: key.into(),
        message: "missing key".into(),
    })
}

fn numbers(v: &Value, key: &'static str, line: usize) -> Result<Vec<f64>> {
    let bad = |m: &str| Error::Parse {
        line,
        field: key.into(),
        message: m.into(),
    };
    v.as_array()
        .ok_or_else(|| bad("expected an array"))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| bad("expected numbers")))
        .collect()
}

/// Parses and validates one record. `line` is 1-based and only used in errors.
pub fn parse_record(text: &str, line: usize) -> Result<ClipAnnotation> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        field: String::new(),
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or(Error::Parse {
        line,
        field: String::new(),
        message: "record is not a JSON object".into(),
    })?;
    let raw_file = field(obj, "raw_file", line)?
        .as_str()
        .ok_or(Error::Parse {
            line,
            field: "raw_file".into(),
            message: "expected a string".into(),
        })?
        .to_string();
    let h_samples = numbers(field(obj, "h_samples", line)?, "h_samples", line)?;
    let lanes = field(obj, "lanes", line)?
        .as_array()
        .ok_or(Error::Parse {
            line,
            field: "lanes".into(),
            message: "expected an array of arrays".into(),
        })?
        .iter()
        .map(|l| numbers(l, "lanes", line))
        .collect::<Result<Vec<_>>>()?;
    let ann = ClipAnnotation {
        lanes,
        h_samples,
        raw_file,
    };
    ann.validate(None).map_err(|message| Error::Validation {
        line,
        raw_file: ann.raw_file.clone(),
        message,
    })?;
    Ok(ann)
}

/// Per-line results; blank lines are skipped.
pub fn parse_tusimple_records(text: &str) -> Vec<Result<ClipAnnotation>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(l, i + 1))
        .collect()
}

/// Fails on the first malformed or invalid record.
pub fn parse_tusimple(text: &str) -> Result<Vec<ClipAnnotation>> {
    parse_tusimple_records(text).into_iter().collect()
}

pub fn serialize_tusimple(anns: &[ClipAnnotation]) -> String {
    anns.iter().map(|a| a.to_json_line() + "\n").collect()
}
