//! Line-delimited JSON MOS predictions, one object per utterance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infer::MosEstimate;

#[derive(Debug, Error, PartialEq)]
pub enum PredictionError {
    #[error("predictions line {line}: {msg}")]
    Line { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub utterance_id: String,
    #[serde(flatten)]
    pub estimate: MosEstimate,
}

impl Prediction {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("prediction serializes")
    }
}

pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>, PredictionError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line = i + 1;
        let p: Prediction = serde_json::from_str(raw).map_err(|e| PredictionError::Line {
            line,
            msg: e.to_string(),
        })?;
        let e = &p.estimate;
        if !(1.0..=5.0).contains(&e.mos) {
            return Err(PredictionError::Line {
                line,
                msg: format!("mos {} outside [1, 5]", e.mos),
            });
        }
        if e.per_nmr.len() != e.n {
            return Err(PredictionError::Line {
                line,
                msg: format!("n = {} but {} per-reference ratings", e.n, e.per_nmr.len()),
            });
        }
        out.push(p);
    }
    Ok(out)
}
