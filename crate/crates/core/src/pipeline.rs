//! The differentiable registration pipeline for one image pair:
//! landmarks -> TPS system -> solve -> backward warp -> loss.
//!
//! Everything runs in the normalized frame of [`Frame`]. The kernel block is
//! built from the target landmarks and the right-hand side from the source
//! landmarks, so the spline maps each target pixel to the source location it
//! samples.

use std::sync::Arc;

use crate::encoder::{encode_on_tape, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::gradients::{Tape, Tensor, Var};
use crate::image::{Image, Mask};
use crate::landmarks::{corner_points, Frame, DIM};
use crate::losses::MatchLoss;
use crate::tps::{KernelKind, SINGULAR_CONDITION};

/// One image of a dataset.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Arc<Image>,
    pub segmentation: Option<Arc<Image>>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image) -> Self {
        Self {
            id: id.into(),
            image: Arc::new(image),
            segmentation: None,
        }
    }

    pub fn with_segmentation(mut self, seg: Image) -> Self {
        self.segmentation = Some(Arc::new(seg));
        self
    }
}

/// Which terms make up the training loss.
#[derive(Clone, Debug)]
pub struct Objective {
    pub match_loss: MatchLoss,
    pub lambda: f64,
    /// Weight of the segmentation term; used only when `weak` is set.
    pub beta: f64,
    pub weak: bool,
    /// Fixed region-of-interest mask applied to target and registered images.
    pub mask: Option<Arc<Mask>>,
    /// Corner anchors appended to the learned landmarks (0 or 4).
    pub anchors: usize,
    pub kernel: KernelKind,
}

impl Objective {
    pub fn new(match_loss: MatchLoss, lambda: f64) -> Self {
        Self {
            match_loss,
            lambda,
            beta: 0.0,
            weak: false,
            mask: None,
            anchors: 4,
            kernel: KernelKind::ThinPlate2D,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument("lambda and beta must be finite and non-negative".into()));
        }
        if self.anchors != 0 && self.anchors != 4 {
            return Err(Error::InvalidArgument(format!("anchor count must be 0 or 4, got {}", self.anchors)));
        }
        if let MatchLoss::Mind(cfg) = &self.match_loss {
            cfg.validate()?;
        }
        Ok(())
    }
}

/// Scalar nodes produced for one pair.
#[derive(Clone, Copy, Debug)]
pub struct PairTerms {
    /// The full objective for the pair.
    pub loss: Var,
    /// The (masked, if configured) image matching term alone.
    pub matching: Var,
    /// Frobenius condition number of the full system matrix.
    pub kappa: Var,
    /// Normalized source coordinate sampled by every target pixel.
    pub coords: Var,
    /// The warped source image.
    pub registered: Var,
}

/// Values of [`PairTerms`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairValues {
    pub loss: f64,
    pub matching: f64,
    pub kappa: f64,
}

/// Normalized pixel-centre grid shared by every pair of one image extent.
pub fn query_grid(width: usize, height: usize) -> Arc<Vec<[f64; 2]>> {
    Arc::new(Frame::new(width, height).grid())
}

fn anchors_normalized(frame: Frame, count: usize) -> Vec<[f64; 2]> {
    if count == 0 {
        return Vec::new();
    }
    corner_points([frame.width, frame.height])
        .into_iter()
        .map(|p| frame.to_normalized(p))
        .collect()
}

/// Records the loss for warping `source` onto `target` given their learned
/// landmark nodes (`M x 2`, normalized). `active` restricts the learned
/// landmarks to a subset (pruning); anchors are always kept.
#[allow(clippy::too_many_arguments)]
pub fn pair_on_tape(
    tape: &mut Tape,
    objective: &Objective,
    query: &Arc<Vec<[f64; 2]>>,
    source_lms: Var,
    target_lms: Var,
    source: &Sample,
    target: &Sample,
    active: Option<&[usize]>,
) -> Result<PairTerms> {
    let (w, h) = (target.image.width(), target.image.height());
    if !source.image.same_extent(&target.image) || query.len() != w * h {
        return Err(Error::Shape("pair images differ in extent".into()));
    }
    let frame = Frame::new(w, h);
    let (mut src, mut tgt) = (source_lms, target_lms);
    if let Some(rows) = active {
        src = tape.select_rows(src, rows.to_vec())?;
        tgt = tape.select_rows(tgt, rows.to_vec())?;
    }
    if objective.anchors > 0 {
        let corners = Tensor::from_points(&anchors_normalized(frame, objective.anchors));
        let anchors = tape.constant(corners);
        src = tape.concat_rows(src, anchors)?;
        tgt = tape.concat_rows(tgt, anchors)?;
    }
    if tape.value(tgt).shape()[0] < DIM + 1 {
        return Err(Error::InvalidArgument("at least three control points are required".into()));
    }

    let block = tape.tps_matrix(tgt, objective.kernel)?;
    let kappa = tape.frobenius_condition(block, DIM)?;
    let condition = tape.scalar(kappa);
    if condition > SINGULAR_CONDITION {
        return Err(Error::Singular { condition });
    }
    let rhs = tape.tps_rhs(src)?;
    let weights = tape.solve(block, rhs)?;
    let coords = tape.tps_grid(weights, tgt, query.clone(), objective.kernel)?;
    let registered = tape.grid_sample(coords, source.image.clone())?;

    let matching = match &objective.mask {
        Some(mask) => {
            let masked = tape.mask_mul(registered, Arc::new(mask.data().to_vec()))?;
            let t = Arc::new(mask.apply(&target.image)?);
            tape.match_loss(masked, t, objective.match_loss.clone())?
        }
        None => tape.match_loss(registered, target.image.clone(), objective.match_loss.clone())?,
    };

    let mut terms = vec![(matching, 1.0), (kappa, objective.lambda)];
    if objective.weak {
        if let (Some(s_seg), Some(t_seg)) = (&source.segmentation, &target.segmentation) {
            let warped = tape.grid_sample(coords, s_seg.clone())?;
            let seg = tape.match_loss(warped, t_seg.clone(), objective.match_loss.clone())?;
            terms.push((seg, objective.beta));
        }
    }
    let loss = tape.combine(terms)?;
    Ok(PairTerms {
        loss,
        matching,
        kappa,
        coords,
        registered,
    })
}

/// Pair values from fixed landmarks given in normalized coordinates.
pub fn evaluate_landmarks(
    objective: &Objective,
    query: &Arc<Vec<[f64; 2]>>,
    source_lms: &[[f64; 2]],
    target_lms: &[[f64; 2]],
    source: &Sample,
    target: &Sample,
    active: Option<&[usize]>,
) -> Result<PairValues> {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_points(source_lms));
    let t = tape.constant(Tensor::from_points(target_lms));
    let terms = pair_on_tape(&mut tape, objective, query, s, t, source, target, active)?;
    Ok(PairValues {
        loss: tape.scalar(terms.loss),
        matching: tape.scalar(terms.matching),
        kappa: tape.scalar(terms.kappa),
    })
}

/// Like [`evaluate_landmarks`], also returning the warped source image.
pub fn register_landmarks(
    objective: &Objective,
    query: &Arc<Vec<[f64; 2]>>,
    source_lms: &[[f64; 2]],
    target_lms: &[[f64; 2]],
    source: &Sample,
    target: &Sample,
    active: Option<&[usize]>,
) -> Result<(PairValues, Image)> {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_points(source_lms));
    let t = tape.constant(Tensor::from_points(target_lms));
    let terms = pair_on_tape(&mut tape, objective, query, s, t, source, target, active)?;
    let values = PairValues {
        loss: tape.scalar(terms.loss),
        matching: tape.scalar(terms.matching),
        kappa: tape.scalar(terms.kappa),
    };
    let registered = Image::new(target.image.width(), target.image.height(), tape.value(terms.registered).data().to_vec())?;
    Ok((values, registered))
}

/// Normalized encoder output for every sample, in order.
pub fn encode_normalized(params: &EncoderParams, samples: &[&Sample]) -> Result<Vec<Vec<[f64; 2]>>> {
    samples
        .iter()
        .map(|s| {
            let mut tape = Tape::new();
            let vars = EncoderVars::register(&mut tape, params, false);
            let out = encode_on_tape(&mut tape, &vars, params.arch(), &s.image)
                .map_err(|e| Error::Sample { id: s.id.clone(), cause: Box::new(e) })?;
            Ok(tape.value(out).points())
        })
        .collect()
}

/// Result of evaluating a batch of pairs.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    /// Per-pair values in batch order.
    pub pairs: Vec<PairValues>,
    /// Gradient of the mean pair loss with respect to the flat encoder
    /// parameters, when requested.
    pub gradient: Option<Vec<f64>>,
}

/// A failure attributed to one pair of a batch.
#[derive(Debug)]
pub struct PairFailure {
    pub pair: usize,
    pub error: Error,
}

/// Evaluates every pair `(source, target)` of indices into `samples` on one
/// tape. Each distinct image is encoded once and its encoding is shared by
/// all pairs that use it. With `with_gradient`, the mean pair loss is
/// differentiated with respect to the encoder parameters.
pub fn evaluate_batch(
    params: &EncoderParams,
    objective: &Objective,
    samples: &[Sample],
    pairs: &[(usize, usize)],
    with_gradient: bool,
) -> std::result::Result<BatchOutcome, PairFailure> {
    let fail = |pair: usize| move |error: Error| PairFailure { pair, error };
    if pairs.is_empty() {
        return Ok(BatchOutcome {
            pairs: Vec::new(),
            gradient: with_gradient.then(|| vec![0.0; params.num_params()]),
        });
    }
    let mut tape = Tape::new();
    let vars = EncoderVars::register(&mut tape, params, with_gradient);
    let mut encoded: Vec<Option<Var>> = vec![None; samples.len()];
    let first = &samples[pairs[0].0].image;
    let query = query_grid(first.width(), first.height());
    let mut terms = Vec::with_capacity(pairs.len());
    for (k, &(s, t)) in pairs.iter().enumerate() {
        for idx in [s, t] {
            if encoded[idx].is_none() {
                let v = encode_on_tape(&mut tape, &vars, params.arch(), &samples[idx].image).map_err(fail(k))?;
                encoded[idx] = Some(v);
            }
        }
        let (sv, tv) = (encoded[s].expect("encoded"), encoded[t].expect("encoded"));
        let pt = pair_on_tape(&mut tape, objective, &query, sv, tv, &samples[s], &samples[t], None).map_err(fail(k))?;
        terms.push(pt);
    }
    let values = terms
        .iter()
        .map(|pt| PairValues {
            loss: tape.scalar(pt.loss),
            matching: tape.scalar(pt.matching),
            kappa: tape.scalar(pt.kappa),
        })
        .collect::<Vec<_>>();
    if let Some(k) = values.iter().position(|v| !v.loss.is_finite()) {
        return Err(PairFailure {
            pair: k,
            error: Error::NonFinite("pair loss".into()),
        });
    }
    let gradient = if with_gradient {
        let scale = 1.0 / pairs.len() as f64;
        let mean = tape
            .combine(terms.iter().map(|pt| (pt.loss, scale)).collect())
            .map_err(fail(0))?;
        let grads = tape.backward(mean, 1.0).map_err(fail(0))?;
        let g = vars.gradient(&tape, &grads);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(PairFailure {
                pair: 0,
                error: Error::NonFinite("parameter gradient".into()),
            });
        }
        Some(g)
    } else {
        None
    };
    Ok(BatchOutcome { pairs: values, gradient })
}
