//! Greedy redundancy removal: repeatedly drop the learned landmark whose
//! removal degrades the mean registration loss the least.

use std::sync::Arc;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::landmarks::{Frame, DIM};
use crate::pipeline::{encode_normalized, evaluate_landmarks, query_grid, Objective, Sample};

/// Learned landmarks closer than this (pixels) are treated as coincident.
pub const COINCIDENT_DISTANCE: f64 = 1e-6;
/// Offset (pixels) applied to separate coincident landmarks.
pub const COINCIDENT_SHIFT: f64 = 1e-3;

/// Fixed landmarks and pairs on which importances are measured.
#[derive(Clone, Debug)]
pub struct PruneContext {
    objective: Objective,
    samples: Vec<Sample>,
    pairs: Vec<(usize, usize)>,
    /// Per-sample learned landmarks, normalized.
    landmarks: Vec<Vec<[f64; 2]>>,
    query: Arc<Vec<[f64; 2]>>,
}

/// Moves every landmark that coincides with an earlier one by
/// [`COINCIDENT_SHIFT`] pixels along x, until no pair coincides.
pub fn separate_coincident(points: &mut [[f64; 2]], frame: Frame) {
    let scale = frame.scale();
    let tol = [COINCIDENT_DISTANCE / scale[0], COINCIDENT_DISTANCE / scale[1]];
    for j in 1..points.len() {
        while (0..j).any(|i| {
            let d = [(points[i][0] - points[j][0]) / tol[0], (points[i][1] - points[j][1]) / tol[1]];
            d[0] * d[0] + d[1] * d[1] < 1.0
        }) {
            points[j][0] += COINCIDENT_SHIFT / scale[0];
        }
    }
}

impl PruneContext {
    /// Uses landmarks given directly (normalized coordinates), one set per sample.
    pub fn from_landmarks(
        objective: Objective,
        samples: Vec<Sample>,
        pairs: Vec<(usize, usize)>,
        mut landmarks: Vec<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        objective.validate()?;
        if samples.is_empty() || landmarks.len() != samples.len() {
            return Err(Error::Shape("one landmark set per sample is required".into()));
        }
        if pairs.is_empty() || pairs.iter().any(|&(s, t)| s == t || s >= samples.len() || t >= samples.len()) {
            return Err(Error::InvalidArgument("evaluation pairs must be non-empty, valid and distinct".into()));
        }
        let m = landmarks[0].len();
        if landmarks.iter().any(|l| l.len() != m) {
            return Err(Error::Shape("landmark sets differ in size".into()));
        }
        let img = &samples[0].image;
        let frame = Frame::new(img.width(), img.height());
        for l in &mut landmarks {
            separate_coincident(l, frame);
        }
        let query = query_grid(img.width(), img.height());
        Ok(Self {
            objective,
            samples,
            pairs,
            landmarks,
            query,
        })
    }

    /// Encodes every sample once with `params`.
    pub fn new(params: &EncoderParams, objective: Objective, samples: Vec<Sample>, pairs: Vec<(usize, usize)>) -> Result<Self> {
        let refs: Vec<&Sample> = samples.iter().collect();
        let landmarks = encode_normalized(params, &refs)?;
        Self::from_landmarks(objective, samples, pairs, landmarks)
    }

    pub fn landmark_count(&self) -> usize {
        self.landmarks[0].len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Smallest number of learned landmarks that keeps every system solvable.
    pub fn min_learned(&self) -> usize {
        (DIM + 3).saturating_sub(self.objective.anchors)
    }

    /// Mean registration (matching) loss over the evaluation pairs using
    /// only the `active` learned landmarks.
    pub fn mean_loss(&self, active: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for &(s, t) in &self.pairs {
            let v = evaluate_landmarks(
                &self.objective,
                &self.query,
                &self.landmarks[s],
                &self.landmarks[t],
                &self.samples[s],
                &self.samples[t],
                Some(active),
            )
            .map_err(|e| Error::Sample {
                id: format!("{} -> {}", self.samples[s].id, self.samples[t].id),
                cause: Box::new(e),
            })?;
            total += v.matching;
        }
        Ok(total / self.pairs.len() as f64)
    }
}

fn is_singular(e: &Error) -> bool {
    match e {
        Error::Singular { .. } => true,
        Error::Sample { cause, .. } => is_singular(cause),
        _ => false,
    }
}

/// Importance of every active index: mean loss without it minus `baseline`.
/// A removal that makes some system singular gets infinite importance.
pub fn importance_scores(ctx: &PruneContext, active: &[usize], baseline: f64) -> Result<Vec<(usize, f64)>> {
    if active.len() <= ctx.min_learned() {
        return Err(Error::InvalidArgument(format!(
            "{} active landmarks leave nothing removable (minimum {})",
            active.len(),
            ctx.min_learned()
        )));
    }
    let mut scores = Vec::with_capacity(active.len());
    for (k, &idx) in active.iter().enumerate() {
        let rest: Vec<usize> = active.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, &i)| i).collect();
        let score = match ctx.mean_loss(&rest) {
            Ok(loss) => loss - baseline,
            Err(e) if is_singular(&e) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        scores.push((idx, score));
    }
    Ok(scores)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StopRule {
    /// Stop once this many learned landmarks remain.
    TargetCount(usize),
    /// Stop when the least important landmark's importance exceeds this.
    MaxDelta(f64),
}

/// One greedy round.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneStep {
    pub active: Vec<usize>,
    pub baseline: f64,
    pub scores: Vec<(usize, f64)>,
    pub removed: usize,
    pub importance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    pub steps: Vec<PruneStep>,
    pub surviving: Vec<usize>,
    /// Mean loss with the surviving landmarks.
    pub final_loss: f64,
}

impl PruneReport {
    /// `(index, importance)` in removal order.
    pub fn removal_order(&self) -> Vec<(usize, f64)> {
        self.steps.iter().map(|s| (s.removed, s.importance)).collect()
    }

    /// Loss before each removal followed by the final loss.
    pub fn baselines(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.baseline).chain([self.final_loss]).collect()
    }
}

/// Lowest score, ties broken by lowest index.
fn least_important(scores: &[(usize, f64)]) -> (usize, f64) {
    scores
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .expect("non-empty scores")
}

pub fn greedy_prune(ctx: &PruneContext, stop: StopRule) -> Result<PruneReport> {
    let m = ctx.landmark_count();
    if let StopRule::TargetCount(n) = stop {
        if n > m || n < ctx.min_learned() {
            return Err(Error::InvalidArgument(format!(
                "target count {n} must lie in [{}, {m}]",
                ctx.min_learned()
            )));
        }
    }
    let mut active: Vec<usize> = (0..m).collect();
    let mut baseline = ctx.mean_loss(&active)?;
    let mut steps = Vec::new();
    loop {
        let done = match stop {
            StopRule::TargetCount(n) => active.len() <= n,
            StopRule::MaxDelta(_) => active.len() <= ctx.min_learned(),
        };
        if done {
            break;
        }
        let scores = importance_scores(ctx, &active, baseline)?;
        let (removed, importance) = least_important(&scores);
        if let StopRule::MaxDelta(limit) = stop {
            if importance > limit {
                break;
            }
        }
        if !importance.is_finite() {
            return Err(Error::Singular {
                condition: f64::INFINITY,
            });
        }
        let before = active.clone();
        active.retain(|&i| i != removed);
        let next = ctx.mean_loss(&active)?;
        steps.push(PruneStep {
            active: before,
            baseline,
            scores,
            removed,
            importance,
        });
        baseline = next;
    }
    Ok(PruneReport {
        steps,
        surviving: active,
        final_loss: baseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::losses::MatchLoss;

    #[test]
    fn coincident_points_are_separated() {
        let frame = Frame::new(33, 33);
        let mut pts = vec![[0.1, 0.2], [0.1, 0.2], [0.1, 0.2], [-0.5, 0.0]];
        separate_coincident(&mut pts, frame);
        let s = frame.scale()[0];
        assert!(((pts[1][0] - pts[0][0]) * s - COINCIDENT_SHIFT).abs() < 1e-12);
        assert!(((pts[2][0] - pts[0][0]) * s - 2.0 * COINCIDENT_SHIFT).abs() < 1e-12);
        assert_eq!(pts[3], [-0.5, 0.0]);
    }

    fn blob(n: usize, cx: f64) -> Image {
        Image::from_fn(n, n, |x, y| {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - 12.0).powi(2)).sqrt();
            0.1 + 0.8 / (1.0 + ((d - 6.0) / 1.5).exp())
        })
        .unwrap()
    }

    #[test]
    fn report_bookkeeping() {
        let n = 24;
        let samples = vec![Sample::new("a", blob(n, 11.0)), Sample::new("b", blob(n, 13.0)), Sample::new("c", blob(n, 12.0))];
        let base = vec![[-0.5, -0.5], [0.5, -0.4], [0.0, 0.6], [-0.3, 0.2], [0.4, 0.3]];
        let lms: Vec<Vec<[f64; 2]>> = [-0.08, 0.08, 0.0]
            .iter()
            .map(|dx| base.iter().map(|p| [p[0] + dx, p[1]]).collect())
            .collect();
        let ctx = PruneContext::from_landmarks(
            Objective::new(MatchLoss::L2, 0.0),
            samples,
            vec![(0, 1), (1, 0), (2, 0)],
            lms,
        )
        .unwrap();
        let same = greedy_prune(&ctx, StopRule::TargetCount(5)).unwrap();
        assert!(same.steps.is_empty());
        assert_eq!(same.surviving, vec![0, 1, 2, 3, 4]);
        let r = greedy_prune(&ctx, StopRule::TargetCount(2)).unwrap();
        assert_eq!(r.steps.len(), 3);
        let mut all: Vec<usize> = r.removal_order().iter().map(|x| x.0).chain(r.surviving.clone()).collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        let b = r.baselines();
        for (k, s) in r.steps.iter().enumerate() {
            assert!((b[k + 1] - b[k] - s.importance).abs() < 1e-10);
            assert_eq!(least_important(&s.scores), (s.removed, s.importance));
        }
        assert!(greedy_prune(&ctx, StopRule::TargetCount(0)).is_err());
    }
}
