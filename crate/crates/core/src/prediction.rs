//! Prediction candidates and multi-modal candidate sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Waypoint;

/// Which expert produced a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    Learned,
    Rule,
}

/// One predicted future trajectory with a confidence weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionCandidate {
    /// Future positions, one per lookahead step.
    pub waypoints: Vec<Waypoint>,
    pub confidence: f64,
    pub source: ExpertKind,
}

impl PredictionCandidate {
    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(Error::validation("candidate has no waypoints"));
        }
        for p in &self.waypoints {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::validation("candidate waypoint is not finite"));
            }
        }
        if !self.confidence.is_finite() || !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::validation(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// Provenance of a whole candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetSource {
    Learned,
    Rule,
    /// Candidate-level routing pools candidates from several experts.
    Mixed,
}

/// The multi-modal output of one expert (or of the router).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub candidates: Vec<PredictionCandidate>,
    pub source: SetSource,
}

impl PredictionSet {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::validation("prediction set is empty"));
        }
        let len = self.candidates[0].waypoints.len();
        for c in &self.candidates {
            c.validate()?;
            if c.waypoints.len() != len {
                return Err(Error::validation(
                    "candidates in one set have differing lengths",
                ));
            }
        }
        match self.source {
            SetSource::Rule => {
                if self.candidates.len() != 1 || self.candidates[0].confidence != 1.0 {
                    return Err(Error::validation(
                        "rule sets must hold exactly one candidate with confidence 1",
                    ));
                }
            }
            SetSource::Learned | SetSource::Mixed => {
                let total: f64 = self.candidates.iter().map(|c| c.confidence).sum();
                if (total - 1.0).abs() > 1e-6 {
                    return Err(Error::validation(format!(
                        "confidences sum to {total}, expected 1 +/- 1e-6"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Number of lookahead steps shared by every candidate.
    pub fn horizon_len(&self) -> usize {
        self.candidates.first().map_or(0, |c| c.waypoints.len())
    }

    /// Highest-confidence candidate; ties resolve to the lowest index.
    pub fn top_confidence(&self) -> Result<&PredictionCandidate> {
        self.candidates
            .iter()
            .reduce(|best, c| if c.confidence > best.confidence { c } else { best })
            .ok_or_else(|| Error::validation("prediction set is empty"))
    }
}
