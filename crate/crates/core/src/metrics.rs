//! Forecasting metrics: minADE, minFDE, miss rate, mAP, and the relative
//! performance gain between two methods.
//!
//! The [`oracle`] submodule holds deliberately naive reference
//! implementations; tests compare the production paths against them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prediction::{PredictionCandidate, PredictionSet};
use crate::scene::{displacement, Trajectory};

pub const DEFAULT_LATERAL_TOL: f64 = 1.0;
pub const DEFAULT_LONGITUDINAL_TOL: f64 = 2.0;

/// Lateral/longitudinal miss tolerances evaluated at one lookahead step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissTolerance {
    pub lateral: f64,
    pub longitudinal: f64,
    /// 1-based step index within the future horizon.
    pub eval_step: usize,
}

impl MissTolerance {
    pub fn new(lateral: f64, longitudinal: f64, eval_step: usize) -> Result<Self> {
        for tol in [lateral, longitudinal] {
            if !tol.is_finite() || tol <= 0.0 {
                return Err(Error::validation("miss tolerances must be > 0"));
            }
        }
        if eval_step < 1 {
            return Err(Error::validation("eval_step is 1-based and must be >= 1"));
        }
        Ok(Self {
            lateral,
            longitudinal,
            eval_step,
        })
    }

    /// Default tolerances (1 m lateral, 2 m longitudinal) at the final step.
    pub fn default_at_final(t_future: usize) -> Result<Self> {
        Self::new(DEFAULT_LATERAL_TOL, DEFAULT_LONGITUDINAL_TOL, t_future.max(1))
    }
}

/// Mean per-step displacement between one candidate and the ground truth.
pub fn ade(waypoints: &[[f64; 2]], gt: &Trajectory) -> Result<f64> {
    if waypoints.is_empty() {
        return Err(Error::validation("candidate has no waypoints"));
    }
    if waypoints.len() != gt.len() {
        return Err(Error::shape(format!(
            "candidate length {} != ground-truth length {}",
            waypoints.len(),
            gt.len()
        )));
    }
    let total: f64 = waypoints
        .iter()
        .zip(&gt.states)
        .map(|(&wp, s)| displacement(wp, s.position()))
        .sum();
    Ok(total / waypoints.len() as f64)
}

/// Displacement at the final step only.
pub fn fde(waypoints: &[[f64; 2]], gt: &Trajectory) -> Result<f64> {
    if waypoints.is_empty() {
        return Err(Error::validation("candidate has no waypoints"));
    }
    if waypoints.len() != gt.len() {
        return Err(Error::shape(format!(
            "candidate length {} != ground-truth length {}",
            waypoints.len(),
            gt.len()
        )));
    }
    Ok(displacement(
        *waypoints.last().expect("non-empty"),
        gt.last().position(),
    ))
}

fn require_candidates(candidates: &[PredictionCandidate]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::validation("no candidates to score"));
    }
    Ok(())
}

/// Minimum ADE over a candidate set (a single expert's set or a pooled union).
pub fn min_ade(candidates: &[PredictionCandidate], gt: &Trajectory) -> Result<f64> {
    require_candidates(candidates)?;
    let mut best = f64::INFINITY;
    for c in candidates {
        best = best.min(ade(&c.waypoints, gt)?);
    }
    Ok(best)
}

/// Minimum FDE over a candidate set.
pub fn min_fde(candidates: &[PredictionCandidate], gt: &Trajectory) -> Result<f64> {
    require_candidates(candidates)?;
    let mut best = f64::INFINITY;
    for c in candidates {
        best = best.min(fde(&c.waypoints, gt)?);
    }
    Ok(best)
}

/// Longitudinal/lateral error of `wp` against the ground truth at
/// `tol.eval_step`, measured in the frame aligned with the ground-truth
/// heading at that step.
fn lon_lat_error(
    wp: [f64; 2],
    gt: &Trajectory,
    eval_step: usize,
) -> (f64, f64) {
    let state = &gt.states[eval_step - 1];
    let ex = wp[0] - state.x;
    let ey = wp[1] - state.y;
    let (sin, cos) = state.heading.sin_cos();
    let lon = cos * ex + sin * ey;
    let lat = -sin * ex + cos * ey;
    (lon, lat)
}

/// True iff no candidate lies within the tolerances at the designated step.
/// Errors exactly equal to a tolerance still count as "within".
pub fn is_miss(
    candidates: &[PredictionCandidate],
    gt: &Trajectory,
    tol: &MissTolerance,
) -> Result<bool> {
    require_candidates(candidates)?;
    if tol.eval_step > gt.len() {
        return Err(Error::validation(format!(
            "eval_step {} exceeds future length {}",
            tol.eval_step,
            gt.len()
        )));
    }
    for c in candidates {
        if c.waypoints.len() != gt.len() {
            return Err(Error::shape(format!(
                "candidate length {} != ground-truth length {}",
                c.waypoints.len(),
                gt.len()
            )));
        }
        let (lon, lat) = lon_lat_error(c.waypoints[tol.eval_step - 1], gt, tol.eval_step);
        if lon.abs() <= tol.longitudinal && lat.abs() <= tol.lateral {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Average precision over confidence-ranked per-scene detections.
///
/// Each scene contributes its highest-confidence candidate as one detection;
/// a detection is a true positive iff that single candidate is not a miss.
/// Precision is interpolated (`p_interp(r) = max over r' >= r of p(r')`) and
/// the score is the mean interpolated precision across true positives, i.e.
/// the area under the interpolated precision-recall curve over the achieved
/// recall range. Depends only on the confidence ranking.
pub fn map_score(items: &[(&PredictionSet, &Trajectory)], tol: &MissTolerance) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::validation("map_score needs at least one scene"));
    }
    // (confidence, scene index, is true positive)
    let mut detections: Vec<(f64, usize, bool)> = Vec::with_capacity(items.len());
    for (idx, (set, gt)) in items.iter().enumerate() {
        let top = set.top_confidence()?;
        let hit = !is_miss(std::slice::from_ref(top), gt, tol)?;
        detections.push((top.confidence, idx, hit));
    }
    detections.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite confidences")
            .then(a.1.cmp(&b.1))
    });

    let mut precisions = Vec::with_capacity(detections.len());
    let mut tp = 0usize;
    for (rank, det) in detections.iter().enumerate() {
        if det.2 {
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
    }
    if tp == 0 {
        return Ok(0.0);
    }

    // Suffix max turns raw precisions into the interpolated envelope.
    let mut interpolated = precisions.clone();
    for i in (0..interpolated.len().saturating_sub(1)).rev() {
        interpolated[i] = interpolated[i].max(interpolated[i + 1]);
    }

    let sum: f64 = detections
        .iter()
        .zip(&interpolated)
        .filter(|(det, _)| det.2)
        .map(|(_, p)| *p)
        .sum();
    Ok(sum / tp as f64)
}

/// Relative improvement of a lower-is-better metric, in percent:
/// `(1 - proposed / baseline) * 100`.
pub fn perf_gain(metric_proposed: f64, metric_baseline: f64) -> Result<f64> {
    if !metric_proposed.is_finite() || !metric_baseline.is_finite() {
        return Err(Error::validation("perf_gain inputs must be finite"));
    }
    if metric_baseline <= 0.0 {
        return Err(Error::validation(format!(
            "baseline metric {metric_baseline} must be > 0"
        )));
    }
    Ok((1.0 - metric_proposed / metric_baseline) * 100.0)
}

/// Aggregate metrics over one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub map_score: f64,
    pub n_scenes: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "dataset_tag,method,min_ade,min_fde,miss_rate,map_score,n_scenes";

    /// Flat CSV row matching [`MetricReport::CSV_HEADER`].
    pub fn csv_row(&self, dataset_tag: &str, method: &str) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            dataset_tag, method, self.min_ade, self.min_fde, self.miss_rate, self.map_score,
            self.n_scenes
        )
    }
}

/// Evaluate one method's prediction sets against per-scene ground truths.
/// Scene-level means are reduced in input order for reproducibility.
pub fn evaluate(items: &[(&PredictionSet, &Trajectory)], tol: &MissTolerance) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::validation("evaluate needs at least one scene"));
    }
    let mut sum_ade = 0.0;
    let mut sum_fde = 0.0;
    let mut misses = 0usize;
    for (set, gt) in items {
        sum_ade += min_ade(&set.candidates, gt)?;
        sum_fde += min_fde(&set.candidates, gt)?;
        if is_miss(&set.candidates, gt, tol)? {
            misses += 1;
        }
    }
    let n = items.len();
    Ok(MetricReport {
        min_ade: sum_ade / n as f64,
        min_fde: sum_fde / n as f64,
        miss_rate: misses as f64 / n as f64,
        map_score: map_score(items, tol)?,
        n_scenes: n,
    })
}

/// Naive reference implementations used to cross-check the metric paths.
pub mod oracle {
    use super::*;

    /// minADE by explicit loops over candidates and steps.
    pub fn naive_min_ade(candidates: &[PredictionCandidate], gt: &Trajectory) -> f64 {
        let mut best = f64::INFINITY;
        for c in candidates {
            let mut total = 0.0;
            let mut count = 0usize;
            for (t, wp) in c.waypoints.iter().enumerate() {
                let dx = wp[0] - gt.states[t].x;
                let dy = wp[1] - gt.states[t].y;
                total += (dx * dx + dy * dy).sqrt();
                count += 1;
            }
            let candidate_ade = total / count as f64;
            if candidate_ade < best {
                best = candidate_ade;
            }
        }
        best
    }

    /// minFDE by explicit loops.
    pub fn naive_min_fde(candidates: &[PredictionCandidate], gt: &Trajectory) -> f64 {
        let mut best = f64::INFINITY;
        let last = gt.len() - 1;
        for c in candidates {
            let wp = c.waypoints[last];
            let dx = wp[0] - gt.states[last].x;
            let dy = wp[1] - gt.states[last].y;
            let d = (dx * dx + dy * dy).sqrt();
            if d < best {
                best = d;
            }
        }
        best
    }

    /// Miss check via an explicit rotation matrix instead of dot products.
    pub fn naive_is_miss(
        candidates: &[PredictionCandidate],
        gt: &Trajectory,
        tol: &MissTolerance,
    ) -> bool {
        let state = &gt.states[tol.eval_step - 1];
        let rot = [
            [state.heading.cos(), state.heading.sin()],
            [-state.heading.sin(), state.heading.cos()],
        ];
        for c in candidates {
            let wp = c.waypoints[tol.eval_step - 1];
            let e = [wp[0] - state.x, wp[1] - state.y];
            let lon = rot[0][0] * e[0] + rot[0][1] * e[1];
            let lat = rot[1][0] * e[0] + rot[1][1] * e[1];
            if lon.abs() <= tol.longitudinal && lat.abs() <= tol.lateral {
                return false;
            }
        }
        true
    }

    /// Average precision from `(confidence, is_true_positive)` detections by
    /// building the full PR curve, taking the interpolated envelope with an
    /// O(n^2) scan, integrating over the achieved recall range, and
    /// normalizing by the final recall.
    pub fn naive_average_precision(detections: &[(f64, bool)], n_scenes: usize) -> f64 {
        let mut sorted: Vec<(usize, f64, bool)> = detections
            .iter()
            .enumerate()
            .map(|(i, &(c, tp))| (i, c, tp))
            .collect();
        sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));

        // PR curve points after each detection.
        let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
        let mut tp = 0usize;
        let mut fp = 0usize;
        for &(_, _, hit) in &sorted {
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            points.push((
                tp as f64 / n_scenes as f64,
                tp as f64 / (tp + fp) as f64,
            ));
        }
        if tp == 0 {
            return 0.0;
        }

        let p_interp = |r: f64| -> f64 {
            points
                .iter()
                .filter(|(recall, _)| *recall >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        };

        let mut area = 0.0;
        let mut prev_recall = 0.0;
        for &(recall, _) in &points {
            if recall > prev_recall {
                area += (recall - prev_recall) * p_interp(recall);
                prev_recall = recall;
            }
        }
        area / prev_recall
    }
}
