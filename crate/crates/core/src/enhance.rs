//! Recurrent quadratic enhancement `x ← x + A·(x² − x)`.
//!
//! For `x ∈ [0, 1]` and `a ∈ [-1, 1]` one step stays in `[0, 1]`: the step is
//! affine in `a`, and its endpoints are `x²` (`a = 1`) and `1 − (1 − x)²`
//! (`a = −1`). No clamping is needed between iterations.

use crate::autodiff::{ElementwiseKind, Graph, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnhanceSpec {
    pub iterations: usize,
    /// Clamp the final image to `[0, 1]` (export only).
    pub clamp_output: bool,
}

impl Default for EnhanceSpec {
    fn default() -> Self {
        Self {
            iterations: 8,
            clamp_output: false,
        }
    }
}

impl EnhanceSpec {
    pub fn new(iterations: usize) -> Self {
        Self {
            iterations,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// One step of the curve on a single value.
#[inline]
pub fn curve_step(x: Scalar, a: Scalar) -> Scalar {
    x + a * (x * x - x)
}

/// `n` applications of [`curve_step`] with the same factor.
pub fn curve(x: Scalar, a: Scalar, n: usize) -> Scalar {
    (0..n).fold(x, |x, _| curve_step(x, a))
}

fn check_inputs(image: &[usize], map: &[usize], a_values: Option<&[Scalar]>, spec: &EnhanceSpec) -> Result<()> {
    spec.validate()?;
    if image != map {
        return Err(Error::shape(image, map, "image vs curve map"));
    }
    if let Some(values) = a_values {
        if values.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "curve map values must lie in [-1, 1] to preserve the unit range".into(),
            ));
        }
    }
    Ok(())
}

/// Runs the recurrence on any [`Graph`], returning all `n + 1` states.
pub fn enhance_states<G: Graph>(
    g: &mut G,
    image: &G::Value,
    map: &G::Value,
    iterations: usize,
) -> Result<Vec<G::Value>> {
    let mut states = Vec::with_capacity(iterations + 1);
    let mut x = image.clone();
    states.push(x.clone());
    for _ in 0..iterations {
        let sq = g.unary(ElementwiseKind::Square, &x)?;
        let diff = g.binary(ElementwiseKind::Sub, &sq, &x)?;
        let delta = g.binary(ElementwiseKind::Mul, map, &diff)?;
        x = g.binary(ElementwiseKind::Add, &x, &delta)?;
        states.push(x.clone());
    }
    Ok(states)
}

/// Differentiable enhancement on a tape (with respect to both image and map).
pub fn enhance_on(tape: &mut Tape, image: Var, map: Var, spec: &EnhanceSpec) -> Result<Var> {
    check_inputs(tape.shape(image), tape.shape(map), Some(tape.value(map).data()), spec)?;
    let states = enhance_states(tape, &image, &map, spec.iterations)?;
    Ok(*states.last().expect("at least one state"))
}

/// Enhances `image` with the curve map `a`.
pub fn enhance(image: &Tensor, a: &Tensor, spec: &EnhanceSpec) -> Result<Tensor> {
    let mut out = enhance_trace(image, a, spec)?.pop().expect("at least one state");
    if spec.clamp_output {
        out = out.map(|v| v.clamp(0.0, 1.0));
    }
    Ok(out)
}

/// All intermediate images `X_0 … X_n` (unclamped).
pub fn enhance_trace(image: &Tensor, a: &Tensor, spec: &EnhanceSpec) -> Result<Vec<Tensor>> {
    check_inputs(image.shape(), a.shape(), Some(a.data()), spec)?;
    let mut states = Vec::with_capacity(spec.iterations + 1);
    let mut x = image.clone();
    states.push(x.clone());
    for _ in 0..spec.iterations {
        x = Tensor::new(
            x.shape(),
            x.data()
                .iter()
                .zip(a.data())
                .map(|(&x, &a)| curve_step(x, a))
                .collect(),
        )?;
        states.push(x.clone());
    }
    Ok(states)
}
