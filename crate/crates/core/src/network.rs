//! Multi-scale curve-estimation network.
//!
//! Three branches of depthwise-separable layers see the image at full, half
//! and quarter resolution. The coarse outputs are resized back to full
//! resolution and fused hierarchically:
//!
//! ```text
//! F1   = DSC(concat(D1, up(D2)))
//! F2   = DSC(concat(F1, up(D3)))
//! Fagg = concat(F1, F2)
//! A    = tanh(DSC(attention(Fagg)))
//! ```
//!
//! The result is a `3×H×W` curve map in `[-1, 1]`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Eager, Graph, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, DscLayer, SpatialAttentionParams};
use crate::tensor::Tensor;

/// Smallest image extent the quarter-resolution branch accepts.
pub const MIN_EXTENT: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CurveNetConfig {
    /// Depthwise-separable layers per resolution branch.
    pub branch_layers: usize,
    /// Channels per feature layer.
    pub width: usize,
    /// Channels produced by the attention projection.
    pub attention_width: usize,
    /// Enhancement iterations the map is applied for.
    pub iterations: usize,
    pub seed: u64,
}

impl Default for CurveNetConfig {
    fn default() -> Self {
        Self::with_width(32)
    }
}

impl CurveNetConfig {
    /// Default depth and iteration count at a given feature width.
    pub fn with_width(width: usize) -> Self {
        Self {
            branch_layers: 3,
            width,
            attention_width: 2 * width,
            iterations: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branch_layers == 0 || self.attention_width == 0 || self.iterations == 0 {
            return Err(Error::InvalidArgument(format!(
                "network config values must be positive: {self:?}"
            )));
        }
        if self.width < 3 {
            return Err(Error::InvalidArgument(format!(
                "width must be at least 3, got {}",
                self.width
            )));
        }
        Ok(())
    }
}

/// All learnable parameters, generic over storage like the blocks in [`nn`].
#[derive(Clone, Debug, PartialEq)]
pub struct CurveParams<P> {
    /// Full, half and quarter resolution feature blocks.
    pub branches: [Vec<DscLayer<P>>; 3],
    pub fuse_half: DscLayer<P>,
    pub fuse_quarter: DscLayer<P>,
    pub attention: SpatialAttentionParams<P>,
    pub head: DscLayer<P>,
}

impl<P> CurveParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> CurveParams<Q> {
        let f = &mut f;
        CurveParams {
            branches: [0, 1, 2].map(|b| self.branches[b].iter().map(|l| l.map(f)).collect()),
            fuse_half: self.fuse_half.map(f),
            fuse_quarter: self.fuse_quarter.map(f),
            attention: self.attention.map(f),
            head: self.head.map(f),
        }
    }

    /// Parameters in a fixed order with stable dotted names.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        for (b, layers) in self.branches.iter().enumerate() {
            for (i, layer) in layers.iter().enumerate() {
                layer.visit(&format!("branch{b}.layer{i}"), &mut out);
            }
        }
        self.fuse_half.visit("fuse_half", &mut out);
        self.fuse_quarter.visit("fuse_quarter", &mut out);
        self.attention.visit("attention", &mut out);
        self.head.visit("head", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out = Vec::new();
        for (b, layers) in self.branches.iter_mut().enumerate() {
            for (i, layer) in layers.iter_mut().enumerate() {
                layer.visit_mut(&format!("branch{b}.layer{i}"), &mut out);
            }
        }
        self.fuse_half.visit_mut("fuse_half", &mut out);
        self.fuse_quarter.visit_mut("fuse_quarter", &mut out);
        self.attention.visit_mut("attention", &mut out);
        self.head.visit_mut("head", &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveNet {
    config: CurveNetConfig,
    params: CurveParams<Tensor>,
}

/// Per-pixel, per-channel enhancement factors in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveMap(Tensor);

impl CurveMap {
    pub fn new(values: Tensor) -> Result<Self> {
        values.chw()?;
        if values.shape()[0] != 3 {
            return Err(Error::invalid_shape(values.shape(), "curve map must have 3 channels"));
        }
        if values.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("curve map values must lie in [-1, 1]".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

impl CurveNet {
    /// Deterministic He-normal kernels and zero biases from `config.seed`.
    pub fn build(config: CurveNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = config.width;
        let branch = |rng: &mut ChaCha8Rng| -> Vec<DscLayer<Tensor>> {
            (0..config.branch_layers)
                .map(|i| DscLayer::new(if i == 0 { 3 } else { w }, w, Activation::Relu, rng))
                .collect()
        };
        let branches = [branch(&mut rng), branch(&mut rng), branch(&mut rng)];
        let fuse_half = DscLayer::new(2 * w, w, Activation::Relu, &mut rng);
        let fuse_quarter = DscLayer::new(2 * w, w, Activation::Relu, &mut rng);
        let attention = SpatialAttentionParams::new(2 * w, config.attention_width, &mut rng);
        let head = DscLayer::new(config.attention_width, 3, Activation::Tanh, &mut rng);
        Ok(Self {
            config,
            params: CurveParams {
                branches,
                fuse_half,
                fuse_quarter,
                attention,
                head,
            },
        })
    }

    /// Same architecture with every parameter set to zero; its curve map is
    /// identically zero, so enhancement is the identity.
    pub fn zeroed(config: CurveNetConfig) -> Result<Self> {
        let mut net = Self::build(config)?;
        net.params = net.params.map(|t| Tensor::zeros(t.shape()));
        Ok(net)
    }

    /// Rebuilds a network from stored parameters, checking every shape.
    pub fn from_params(config: CurveNetConfig, params: CurveParams<Tensor>) -> Result<Self> {
        let reference = Self::build(config.clone())?;
        for ((name, want), (_, got)) in reference.params.named().iter().zip(params.named()) {
            if want.shape() != got.shape() {
                return Err(Error::shape(want.shape(), got.shape(), "parameter shape"))
                    .map_err(|e| Error::InvalidArgument(format!("{name}: {e}")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &CurveNetConfig {
        &self.config
    }

    pub fn params(&self) -> &CurveParams<Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut CurveParams<Tensor> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Places every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> CurveParams<Var> {
        self.params.map(|t| tape.leaf(t.clone(), true))
    }

    /// Inference without recording; bit-identical to the taped forward pass.
    pub fn infer(&self, image: &Tensor) -> Result<CurveMap> {
        let a = forward(&mut Eager, &self.params, image)?;
        CurveMap::new(a)
    }

    /// Forward pass on a tape with freshly bound parameters.
    pub fn forward_on(&self, tape: &mut Tape, image: Var) -> Result<(Var, CurveParams<Var>)> {
        let bound = self.bind(tape);
        let a = forward(tape, &bound, &image)?;
        Ok((a, bound))
    }

    pub fn describe(&self) -> ArchitectureSummary {
        let mut layers = Vec::new();
        let mut dsc = |name: String, l: &DscLayer<Tensor>| {
            layers.push(LayerSummary {
                name,
                kind: format!("dsc3x3+{}", l.activation),
                in_channels: l.in_channels(),
                out_channels: l.out_channels(),
                params: l.param_count(),
            });
        };
        for (b, branch) in self.params.branches.iter().enumerate() {
            for (i, l) in branch.iter().enumerate() {
                dsc(format!("branch{b}.layer{i}"), l);
            }
        }
        dsc("fuse_half".into(), &self.params.fuse_half);
        dsc("fuse_quarter".into(), &self.params.fuse_quarter);
        let att = &self.params.attention;
        layers.push(LayerSummary {
            name: "attention".into(),
            kind: "spatial-attention".into(),
            in_channels: att.project.kernel.shape()[1],
            out_channels: att.project.kernel.shape()[0],
            params: att.param_count(),
        });
        let head = &self.params.head;
        layers.push(LayerSummary {
            name: "head".into(),
            kind: format!("dsc3x3+{}", head.activation),
            in_channels: head.in_channels(),
            out_channels: head.out_channels(),
            params: head.param_count(),
        });
        let total = layers.iter().map(|l| l.params).sum();
        ArchitectureSummary { layers, total }
    }
}

/// The full pipeline over any [`Graph`].
pub fn forward<G: Graph>(g: &mut G, params: &CurveParams<G::Value>, image: &G::Value) -> Result<G::Value> {
    let shape = g.shape_of(image);
    let (h, w) = match shape[..] {
        [3, h, w] => (h, w),
        _ => return Err(Error::invalid_shape(&shape, "image must be 3×H×W")),
    };
    if h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(Error::invalid_shape(
            &shape,
            format!("image must be at least {MIN_EXTENT}×{MIN_EXTENT}"),
        ));
    }
    let half = nn::resize_bilinear(g, image, (h / 2, w / 2))?;
    let quarter = nn::resize_bilinear(g, image, (h / 4, w / 4))?;

    let d1 = run_branch(g, &params.branches[0], image)?;
    let d2 = run_branch(g, &params.branches[1], &half)?;
    let d3 = run_branch(g, &params.branches[2], &quarter)?;

    let up2 = nn::resize_bilinear(g, &d2, (h, w))?;
    let cat = nn::concat_channels(g, &[d1, up2])?;
    let f1 = nn::dsc_layer(g, &cat, &params.fuse_half)?;

    let up3 = nn::resize_bilinear(g, &d3, (h, w))?;
    let cat = nn::concat_channels(g, &[f1.clone(), up3])?;
    let f2 = nn::dsc_layer(g, &cat, &params.fuse_quarter)?;

    let fused = nn::concat_channels(g, &[f1, f2])?;
    let attended = nn::spatial_attention_forward(g, &fused, &params.attention)?;
    nn::dsc_layer(g, &attended, &params.head)
}

fn run_branch<G: Graph>(g: &mut G, layers: &[DscLayer<G::Value>], x: &G::Value) -> Result<G::Value> {
    let mut h = x.clone();
    for layer in layers {
        h = nn::dsc_layer(g, &h, layer)?;
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSummary {
    pub name: String,
    pub kind: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureSummary {
    pub layers: Vec<LayerSummary>,
    pub total: usize,
}

impl fmt::Display for ArchitectureSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:<20} {:>6} {:>6} {:>10}", "layer", "kind", "in", "out", "params")?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<16} {:<20} {:>6} {:>6} {:>10}",
                l.name, l.kind, l.in_channels, l.out_channels, l.params
            )?;
        }
        write!(f, "{:<16} {:<20} {:>6} {:>6} {:>10}", "total", "", "", "", self.total)
    }
}
