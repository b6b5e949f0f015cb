//! Convolutional building blocks: depthwise and pointwise convolutions,
//! depthwise-separable layers, spatial attention, resampling and pooling.
//!
//! Parameter structs are generic over their storage `P`: [`Tensor`] for the
//! weights a network owns, or [`Var`](crate::Var) once bound to a tape.
//! All blocks are written once against [`Graph`].

use std::fmt;

use rand::Rng;

use crate::autodiff::{ElementwiseKind, Graph};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Kernel, optional bias, stride and zero padding of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<P> {
    /// Depthwise: `C×1×K×K`. Pointwise: `Cout×Cin×1×1`.
    pub kernel: P,
    pub bias: Option<P>,
    pub stride: usize,
    pub padding: usize,
}

impl<P> ConvParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ConvParams<Q> {
        ConvParams {
            kernel: f(&self.kernel),
            bias: self.bias.as_ref().map(&mut *f),
            stride: self.stride,
            padding: self.padding,
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        out.push((format!("{prefix}.kernel"), &self.kernel));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        out.push((format!("{prefix}.kernel"), &mut self.kernel));
        if let Some(b) = &mut self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }
}

impl ConvParams<Tensor> {
    /// 3×3 same-size depthwise filter bank without bias (the following
    /// pointwise bias absorbs it), He-normal initialised.
    pub fn depthwise<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let fan_in = 9.0;
        Self {
            kernel: Tensor::normal(&[channels, 1, 3, 3], (2.0 / fan_in as Scalar).sqrt(), rng),
            bias: None,
            stride: 1,
            padding: 1,
        }
    }

    /// 1×1 channel mixer with zero bias, He-normal initialised.
    pub fn pointwise<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            kernel: Tensor::normal(&[c_out, c_in, 1, 1], (2.0 / c_in as Scalar).sqrt(), rng),
            bias: Some(Tensor::zeros(&[c_out])),
            stride: 1,
            padding: 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.kernel.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }

    pub fn check(&self) -> Result<()> {
        let shape = self.kernel.shape();
        if shape.len() != 4 {
            return Err(Error::invalid_shape(shape, "convolution kernel must be rank 4"));
        }
        if shape[2] != shape[3] || shape[2].is_multiple_of(2) {
            return Err(Error::invalid_shape(shape, "kernel must be square with odd extent"));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

impl Activation {
    fn kind(self) -> Option<ElementwiseKind> {
        match self {
            Self::Relu => Some(ElementwiseKind::Relu),
            Self::Tanh => Some(ElementwiseKind::Tanh),
            Self::None => None,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Tanh => "tanh",
            Self::None => "none",
        })
    }
}

/// Depthwise 3×3 followed by pointwise 1×1 and an activation.
#[derive(Clone, Debug, PartialEq)]
pub struct DscLayer<P> {
    pub depthwise: ConvParams<P>,
    pub pointwise: ConvParams<P>,
    pub activation: Activation,
}

impl<P> DscLayer<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> DscLayer<Q> {
        DscLayer {
            depthwise: self.depthwise.map(f),
            pointwise: self.pointwise.map(f),
            activation: self.activation,
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        self.depthwise.visit(&format!("{prefix}.dw"), out);
        self.pointwise.visit(&format!("{prefix}.pw"), out);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        self.depthwise.visit_mut(&format!("{prefix}.dw"), out);
        self.pointwise.visit_mut(&format!("{prefix}.pw"), out);
    }
}

impl DscLayer<Tensor> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            depthwise: ConvParams::depthwise(c_in, rng),
            pointwise: ConvParams::pointwise(c_in, c_out, rng),
            activation,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.depthwise.kernel.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.pointwise.kernel.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.param_count() + self.pointwise.param_count()
    }
}

/// `project` (1×1, Cin→C′) and `attend` (1×1, C′→1).
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionParams<P> {
    pub project: ConvParams<P>,
    pub attend: ConvParams<P>,
}

impl<P> SpatialAttentionParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> SpatialAttentionParams<Q> {
        SpatialAttentionParams {
            project: self.project.map(f),
            attend: self.attend.map(f),
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        self.project.visit(&format!("{prefix}.project"), out);
        self.attend.visit(&format!("{prefix}.attend"), out);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        self.project.visit_mut(&format!("{prefix}.project"), out);
        self.attend.visit_mut(&format!("{prefix}.attend"), out);
    }
}

impl SpatialAttentionParams<Tensor> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, width: usize, rng: &mut R) -> Self {
        Self {
            project: ConvParams::pointwise(c_in, width, rng),
            attend: ConvParams::pointwise(width, 1, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.project.param_count() + self.attend.param_count()
    }
}

/// Per-channel spatial filtering. Output channel `c` depends only on input channel `c`.
pub fn depthwise_conv2d<G: Graph>(g: &mut G, x: &G::Value, p: &ConvParams<G::Value>) -> Result<G::Value> {
    g.depthwise_conv2d(x, &p.kernel, p.bias.as_ref(), p.stride, p.padding)
}

/// `out[o,h,w] = Σ_c kernel[o,c]·y[c,h,w] + bias[o]`.
pub fn pointwise_conv2d<G: Graph>(g: &mut G, y: &G::Value, p: &ConvParams<G::Value>) -> Result<G::Value> {
    g.pointwise_conv2d(y, &p.kernel, p.bias.as_ref())
}

/// `activation(pointwise(depthwise(x)))`.
pub fn dsc_forward<G: Graph>(
    g: &mut G,
    x: &G::Value,
    depthwise: &ConvParams<G::Value>,
    pointwise: &ConvParams<G::Value>,
    activation: Activation,
) -> Result<G::Value> {
    let y = depthwise_conv2d(g, x, depthwise)?;
    let z = pointwise_conv2d(g, &y, pointwise)?;
    match activation.kind() {
        Some(kind) => g.unary(kind, &z),
        None => Ok(z),
    }
}

pub fn dsc_layer<G: Graph>(g: &mut G, x: &G::Value, layer: &DscLayer<G::Value>) -> Result<G::Value> {
    dsc_forward(g, x, &layer.depthwise, &layer.pointwise, layer.activation)
}

/// Intermediate values of one spatial-attention pass.
#[derive(Clone, Debug)]
pub struct AttentionTrace<V> {
    /// Projected features `F`.
    pub features: V,
    /// Sigmoid attention map `A`, `1×H×W`.
    pub attention: V,
    /// `F ⊙ A`.
    pub output: V,
}

/// Projects, scores, squashes with a sigmoid and reweights every location.
pub fn spatial_attention_forward<G: Graph>(
    g: &mut G,
    x: &G::Value,
    p: &SpatialAttentionParams<G::Value>,
) -> Result<G::Value> {
    Ok(spatial_attention_trace(g, x, p)?.output)
}

pub fn spatial_attention_trace<G: Graph>(
    g: &mut G,
    x: &G::Value,
    p: &SpatialAttentionParams<G::Value>,
) -> Result<AttentionTrace<G::Value>> {
    let features = pointwise_conv2d(g, x, &p.project)?;
    let logits = pointwise_conv2d(g, &features, &p.attend)?;
    if g.shape_of(&logits)[0] != 1 {
        return Err(Error::invalid_shape(&g.shape_of(&logits), "attention map must have one channel"));
    }
    let attention = g.unary(ElementwiseKind::Sigmoid, &logits)?;
    let output = g.mul_map(&features, &attention)?;
    Ok(AttentionTrace {
        features,
        attention,
        output,
    })
}

/// Bilinear resize with half-pixel centres; exact on constant images.
pub fn resize_bilinear<G: Graph>(g: &mut G, x: &G::Value, target: (usize, usize)) -> Result<G::Value> {
    g.resize_bilinear(x, target)
}

/// Non-overlapping window means; trailing partial windows are dropped.
pub fn avg_pool<G: Graph>(g: &mut G, x: &G::Value, window: usize) -> Result<G::Value> {
    g.avg_pool(x, window)
}

pub fn concat_channels<G: Graph>(g: &mut G, parts: &[G::Value]) -> Result<G::Value> {
    g.concat_channels(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_depthwise(c: usize) -> ConvParams<Tensor> {
        let mut k = Tensor::zeros(&[c, 1, 3, 3]);
        for ch in 0..c {
            k.set(&[ch, 0, 1, 1], 1.0);
        }
        ConvParams {
            kernel: k,
            bias: None,
            stride: 1,
            padding: 1,
        }
    }

    fn identity_pointwise(c: usize) -> ConvParams<Tensor> {
        let mut k = Tensor::zeros(&[c, c, 1, 1]);
        for ch in 0..c {
            k.set(&[ch, ch, 0, 0], 1.0);
        }
        ConvParams {
            kernel: k,
            bias: Some(Tensor::zeros(&[c])),
            stride: 1,
            padding: 0,
        }
    }

    #[test]
    fn identity_kernels_pass_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[3, 5, 4], -1.0, 1.0, &mut rng);
        let mut g = Eager;
        assert_eq!(depthwise_conv2d(&mut g, &x, &identity_depthwise(3)).unwrap(), x);
        assert_eq!(pointwise_conv2d(&mut g, &x, &identity_pointwise(3)).unwrap(), x);
        let y = dsc_forward(
            &mut g,
            &x,
            &identity_depthwise(3),
            &identity_pointwise(3),
            Activation::None,
        )
        .unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let p = ConvParams {
            kernel: Tensor::zeros(&[2, 1, 3, 3]),
            bias: None,
            stride: 1,
            padding: 1,
        };
        assert!(depthwise_conv2d(&mut Eager, &x, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn averaging_pointwise_gives_channel_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[4, 3, 3], 0.0, 1.0, &mut rng);
        let p = ConvParams {
            kernel: Tensor::full(&[1, 4, 1, 1], 0.25),
            bias: None,
            stride: 1,
            padding: 0,
        };
        let y = pointwise_conv2d(&mut Eager, &x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        for i in 0..9 {
            let mean: Scalar = (0..4).map(|c| x.data()[c * 9 + i]).sum::<Scalar>() / 4.0;
            assert!((y.data()[i] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::zeros(&[2, 4, 4]);
        assert!(depthwise_conv2d(&mut Eager, &x, &identity_depthwise(3)).is_err());
        assert!(pointwise_conv2d(&mut Eager, &x, &identity_pointwise(3)).is_err());
    }

    #[test]
    fn tanh_layer_output_is_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[3, 6, 6], -2.0, 2.0, &mut rng);
        let layer = DscLayer::new(3, 5, Activation::Tanh, &mut rng);
        let y = dsc_layer(&mut Eager, &x, &layer).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn zero_attend_weights_halve_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[4, 5, 5], -1.0, 1.0, &mut rng);
        let mut p = SpatialAttentionParams::new(4, 6, &mut rng);
        p.attend.kernel = Tensor::zeros(&[1, 6, 1, 1]);
        p.attend.bias = Some(Tensor::zeros(&[1]));
        let trace = spatial_attention_trace(&mut Eager, &x, &p).unwrap();
        assert!(trace.attention.data().iter().all(|&a| a == 0.5));
        for (o, f) in trace.output.data().iter().zip(trace.features.data()) {
            assert_eq!(*o, 0.5 * f);
        }
    }

    #[test]
    fn zero_features_give_zero_attention_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::uniform(&[4, 5, 5], -1.0, 1.0, &mut rng);
        let mut p = SpatialAttentionParams::new(4, 3, &mut rng);
        p.project.kernel = Tensor::zeros(&[3, 4, 1, 1]);
        let out = spatial_attention_forward(&mut Eager, &x, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_constant_and_identity() {
        let x = Tensor::full(&[2, 3, 5], 0.37);
        let up = resize_bilinear(&mut Eager, &x, (7, 11)).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.37));
        let down = resize_bilinear(&mut Eager, &x, (1, 2)).unwrap();
        assert!(down.data().iter().all(|&v| v == 0.37));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = Tensor::uniform(&[2, 3, 5], 0.0, 1.0, &mut rng);
        assert_eq!(resize_bilinear(&mut Eager, &r, (3, 5)).unwrap(), r);
        assert!(resize_bilinear(&mut Eager, &r, (0, 5)).is_err());
    }

    #[test]
    fn resize_ramp_matches_hand_weights() {
        let ramp = Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let up = resize_bilinear(&mut Eager, &ramp, (1, 4)).unwrap();
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn avg_pool_examples() {
        let c = Tensor::full(&[1, 8, 8], 0.3);
        let p = avg_pool(&mut Eager, &c, 4).unwrap();
        assert_eq!(p.shape(), &[1, 2, 2]);
        assert!(p.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));

        let block = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(avg_pool(&mut Eager, &block, 2).unwrap().data(), &[0.5]);

        let odd = Tensor::ones(&[1, 9, 10]);
        assert_eq!(avg_pool(&mut Eager, &odd, 4).unwrap().shape(), &[1, 2, 2]);
        assert!(avg_pool(&mut Eager, &block, 3).is_err());
    }

    #[test]
    fn concat_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::uniform(&[3, 2, 2], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3, 2, 2], 0.0, 1.0, &mut rng);
        assert_eq!(concat_channels(&mut Eager, std::slice::from_ref(&a)).unwrap(), a);
        let ab = concat_channels(&mut Eager, &[a.clone(), b]).unwrap();
        assert_eq!(ab.shape(), &[6, 2, 2]);
        assert_eq!(&ab.data()[..12], a.data());
        let wrong = Tensor::zeros(&[1, 3, 2]);
        assert!(concat_channels(&mut Eager, &[a, wrong]).is_err());
    }

    #[test]
    fn separable_parameter_count_beats_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for c in 2..10 {
            let layer = DscLayer::new(c, c, Activation::Relu, &mut rng);
            assert_eq!(layer.param_count(), c * 9 + c * c + c);
            assert!(layer.param_count() < c * c * 9 + c);
        }
    }
}
