//! No-reference training objective.
//!
//! Four analytic terms (smoothness of the curve map, spatial consistency,
//! colour constancy, exposure) plus two pluggable terms (segmentation guidance
//! and a learned quality score). Every sum is normalised to a mean over the
//! contributing elements so the weights do not depend on image size.

use std::fmt;

use crate::autodiff::{Graph, ReduceKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Weights of the six loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub tv: Scalar,
    pub spa: Scalar,
    pub color: Scalar,
    pub exposure: Scalar,
    pub seg: Scalar,
    pub nr: Scalar,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tv: 1600.0,
            spa: 1.0,
            color: 5.0,
            exposure: 10.0,
            seg: 0.1,
            nr: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            tv: 0.0,
            spa: 0.0,
            color: 0.0,
            exposure: 0.0,
            seg: 0.0,
            nr: 0.0,
        }
    }

    pub fn as_array(&self) -> [Scalar; 6] {
        [self.tv, self.spa, self.color, self.exposure, self.seg, self.nr]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in TERM_NAMES.iter().zip(self.as_array()) {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight `{name}` must be finite and non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

pub const TERM_NAMES: [&str; 6] = ["tv", "spa", "color", "exposure", "seg", "nr"];

/// Target patch brightness for the exposure term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExposureTarget {
    pub level: Scalar,
    pub patch: usize,
}

impl Default for ExposureTarget {
    fn default() -> Self {
        Self {
            level: 0.6,
            patch: 16,
        }
    }
}

impl ExposureTarget {
    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "exposure level must lie in (0, 1), got {}",
                self.level
            )));
        }
        if self.patch == 0 {
            return Err(Error::InvalidArgument("exposure patch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Segmentation-structure penalty on the enhanced image. Must return a
/// differentiable non-negative scalar.
pub trait SegmentationGuidance {
    fn loss(&self, tape: &mut Tape, enhanced: Var) -> Result<Var>;
}

/// Differentiable aesthetic score `S ∈ [0, 100]` of the enhanced image.
pub trait QualityModel {
    fn score(&self, tape: &mut Tape, enhanced: Var) -> Result<Var>;
}

/// Optional plugin terms; absent plugins contribute exactly zero.
#[derive(Clone, Copy, Default)]
pub struct LossPlugins<'a> {
    pub segmentation: Option<&'a dyn SegmentationGuidance>,
    pub quality: Option<&'a dyn QualityModel>,
}

/// Stand-in quality model for exercising the plugin path end to end. It is a
/// fixed logistic probe on mean brightness, not a perceptual model:
/// `S = 100·σ(slope·(mean − centre))`.
#[derive(Clone, Copy, Debug)]
pub struct BrightnessProbeQuality {
    pub centre: Scalar,
    pub slope: Scalar,
}

impl Default for BrightnessProbeQuality {
    fn default() -> Self {
        Self {
            centre: 0.5,
            slope: 8.0,
        }
    }
}

impl QualityModel for BrightnessProbeQuality {
    fn score(&self, tape: &mut Tape, enhanced: Var) -> Result<Var> {
        let m = tape.mean(enhanced)?;
        let shifted = tape.offset(m, -self.centre)?;
        let logit = tape.scale(shifted, self.slope)?;
        let s = tape.sigmoid(logit)?;
        tape.scale(s, 100.0)
    }
}

fn grayscale(tape: &mut Tape, image: Var) -> Result<Var> {
    let (_, h, w) = tape.value(image).chw()?;
    let g = tape.reduce(ReduceKind::Mean, image, Some(&[0]))?;
    tape.reshape(g, &[1, h, w])
}

fn check_rgb(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [3, h, w] => Ok((*h, *w)),
        _ => Err(Error::invalid_shape(shape, "expected a 3×H×W image")),
    }
}

/// Mean squared horizontal plus mean squared vertical forward difference of
/// the curve map. Each direction is averaged over its own valid positions; a
/// direction with no pairs contributes zero.
pub fn tv_loss(tape: &mut Tape, a: Var) -> Result<Var> {
    let (_, h, w) = tape.value(a).chw()?;
    if h * w < 2 {
        return Err(Error::invalid_shape(tape.shape(a), "total variation needs at least two pixels"));
    }
    let mut terms = Vec::with_capacity(2);
    for (axis, extent) in [(2, w), (1, h)] {
        if extent < 2 {
            continue;
        }
        let next = tape.slice(a, axis, 1, extent - 1)?;
        let prev = tape.slice(a, axis, 0, extent - 1)?;
        let d = tape.sub(next, prev)?;
        let sq = tape.square(d)?;
        terms.push(tape.mean(sq)?);
    }
    match terms[..] {
        [one] => Ok(one),
        [h_term, v_term] => tape.add(h_term, v_term),
        _ => unreachable!(),
    }
}

/// Neighbour-difference stencils (3×3, row-major) for left, right, up, down.
pub const DIRECTION_STENCILS: [[Scalar; 9]; 4] = [
    [0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0],
    [0.0, -1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0],
];

/// Side of the averaging window applied before comparing directional gradients.
pub const SPATIAL_POOL: usize = 4;

/// Sum over the four directions of the mean squared difference between the
/// directional gradients of the pooled grey images.
pub fn spatial_consistency_loss(tape: &mut Tape, enhanced: Var, input: Var) -> Result<Var> {
    let (h, w) = check_rgb(tape.shape(enhanced))?;
    if tape.shape(enhanced) != tape.shape(input) {
        return Err(Error::shape(tape.shape(enhanced), tape.shape(input), "enhanced vs input"));
    }
    if h / SPATIAL_POOL < 3 || w / SPATIAL_POOL < 3 {
        return Err(Error::invalid_shape(
            tape.shape(enhanced),
            "pooled map must be at least 3×3 for spatial consistency",
        ));
    }
    let ge = grayscale(tape, enhanced)?;
    let gi = grayscale(tape, input)?;
    let pe = tape.avg_pool(&ge, SPATIAL_POOL)?;
    let pi = tape.avg_pool(&gi, SPATIAL_POOL)?;
    let mut total: Option<Var> = None;
    for stencil in &DIRECTION_STENCILS {
        let de = tape.stencil(pe, stencil, 3)?;
        let di = tape.stencil(pi, stencil, 3)?;
        let d = tape.sub(di, de)?;
        let sq = tape.square(d)?;
        let m = tape.mean(sq)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("four directions"))
}

/// `sqrt((R−G)² + (R−B)² + (G−B)²)` over the channel means.
pub fn color_constancy_loss(tape: &mut Tape, enhanced: Var) -> Result<Var> {
    check_rgb(tape.shape(enhanced))?;
    let means = tape.reduce(ReduceKind::Mean, enhanced, Some(&[1, 2]))?;
    let ch: Vec<Var> = (0..3)
        .map(|c| tape.slice(means, 0, c, 1))
        .collect::<Result<_>>()?;
    let mut acc: Option<Var> = None;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let d = tape.sub(ch[i], ch[j])?;
        let sq = tape.square(d)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, sq)?,
            None => sq,
        });
    }
    let norm = tape.sqrt(acc.expect("three pairs"))?;
    tape.reshape(norm, &[])
}

/// Mean squared deviation of `patch×patch` grey-level means from the target level.
pub fn exposure_loss(tape: &mut Tape, enhanced: Var, target: &ExposureTarget) -> Result<Var> {
    target.validate()?;
    let (h, w) = check_rgb(tape.shape(enhanced))?;
    if h < target.patch || w < target.patch {
        return Err(Error::invalid_shape(
            tape.shape(enhanced),
            format!("image smaller than one {0}×{0} exposure patch", target.patch),
        ));
    }
    let g = grayscale(tape, enhanced)?;
    let pooled = tape.avg_pool(&g, target.patch)?;
    let d = tape.offset(pooled, -target.level)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Raw (unweighted) term values and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub tv: Scalar,
    pub spa: Scalar,
    pub color: Scalar,
    pub exposure: Scalar,
    pub seg: Scalar,
    pub nr: Scalar,
    pub total: Scalar,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, Scalar); 6] {
        [
            ("tv", self.tv),
            ("spa", self.spa),
            ("color", self.color),
            ("exposure", self.exposure),
            ("seg", self.seg),
            ("nr", self.nr),
        ]
    }

    /// Element-wise mean of several breakdowns.
    pub fn average(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as Scalar;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.tv += b.tv;
            acc.spa += b.spa;
            acc.color += b.color;
            acc.exposure += b.exposure;
            acc.seg += b.seg;
            acc.nr += b.nr;
            acc.total += b.total;
        }
        LossBreakdown {
            tv: acc.tv / n,
            spa: acc.spa / n,
            color: acc.color / n,
            exposure: acc.exposure / n,
            seg: acc.seg / n,
            nr: acc.nr / n,
            total: acc.total / n,
        }
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "total={:.6}", self.total)?;
        for (name, v) in self.terms() {
            write!(f, " {name}={v:.6}")?;
        }
        Ok(())
    }
}

pub struct CompositeLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Weighted sum of all six terms.
///
/// The quality term is `100 − S(enhanced)` when a [`QualityModel`] is given.
pub fn composite_loss(
    tape: &mut Tape,
    input: Var,
    enhanced: Var,
    a: Var,
    weights: &LossWeights,
    exposure: &ExposureTarget,
    plugins: LossPlugins<'_>,
) -> Result<CompositeLoss> {
    weights.validate()?;
    let tv = tv_loss(tape, a)?;
    let spa = spatial_consistency_loss(tape, enhanced, input)?;
    let color = color_constancy_loss(tape, enhanced)?;
    let exp = exposure_loss(tape, enhanced, exposure)?;
    let seg = match plugins.segmentation {
        Some(p) => Some(p.loss(tape, enhanced)?),
        None => None,
    };
    let nr = match plugins.quality {
        Some(q) => {
            let s = q.score(tape, enhanced)?;
            let neg = tape.scale(s, -1.0)?;
            Some(tape.offset(neg, 100.0)?)
        }
        None => None,
    };

    let read = |tape: &Tape, v: Option<Var>| -> Result<Scalar> {
        v.map_or(Ok(0.0), |v| tape.value(v).item())
    };
    let mut breakdown = LossBreakdown {
        tv: read(tape, Some(tv))?,
        spa: read(tape, Some(spa))?,
        color: read(tape, Some(color))?,
        exposure: read(tape, Some(exp))?,
        seg: read(tape, seg)?,
        nr: read(tape, nr)?,
        total: 0.0,
    };

    let mut total = None;
    let terms = [Some(tv), Some(spa), Some(color), Some(exp), seg, nr];
    for (term, weight) in terms.into_iter().zip(weights.as_array()) {
        let Some(term) = term else { continue };
        let term = tape.reshape(term, &[])?;
        let weighted = tape.scale(term, weight)?;
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    let total = total.expect("analytic terms always present");
    breakdown.total = tape.value(total).item()?;
    Ok(CompositeLoss { total, breakdown })
}

/// Convenience wrapper evaluating the composite on plain tensors.
pub fn evaluate_composite(
    input: &Tensor,
    enhanced: &Tensor,
    a: &Tensor,
    weights: &LossWeights,
    exposure: &ExposureTarget,
    plugins: LossPlugins<'_>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let i = tape.constant(input.clone());
    let e = tape.constant(enhanced.clone());
    let m = tape.constant(a.clone());
    Ok(composite_loss(&mut tape, i, e, m, weights, exposure, plugins)?.breakdown)
}
